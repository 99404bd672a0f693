#include <iostream>
#include <string>
#include <vector>

#include "fcm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return fcm::RunCli(args, std::cout, std::cerr);
}
