#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace fcm::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column position by name; throws DataError if absent.
  std::size_t Column(const std::string& name) const;
};

// Shortest round-trippable decimal form.
std::string FormatDouble(double value);

Table Read(const std::filesystem::path& file);
void Write(const std::filesystem::path& file, const Table& table);
std::string JoinRow(const std::vector<std::string>& cells);
std::vector<std::string> SplitRow(const std::string& line);

}  // namespace fcm::csv
