#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fcm/bayes_data.hpp"
#include "fcm/client_partition.hpp"
#include "fcm/config.hpp"

namespace fcm {

struct Experiment {
  data::EncodedDataset data;
  data::BayesNet net;
  std::vector<partition::ClientShard> shards;
};

// Loads or generates the dataset named by `config` and, when `with_shards` is
// set, the client shards (from the manifest if given, else freshly built).
Experiment PrepareExperiment(const Config& config, bool with_shards = true);

// Entry point of the `fcm` tool. `args` excludes the program name. Returns 0
// on success, 1 on usage errors, 2 on data or configuration errors and 3 on
// protocol errors.
int RunCli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace fcm
