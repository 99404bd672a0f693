#pragma once

// Ground-truth Bayesian networks, ancestral sampling and the synthetic input
// pipeline (one-hot concepts -> autoencoder latent -> noise mix -> standardize).

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fcm/digraph.hpp"
#include "fcm/nn.hpp"
#include "fcm/rng.hpp"

namespace fcm::data {

struct BayesNode {
  std::string name;
  int cardinality = 2;
  std::vector<std::string> states;
  std::vector<std::string> parents;
  // Row-major over parent configurations (last parent fastest); each row is a
  // distribution over this node's states.
  std::vector<double> cpt;
};

class BayesNet {
 public:
  BayesNet(std::string name, std::vector<BayesNode> nodes, std::string task);

  const std::string& name() const { return name_; }
  const std::string& task() const { return task_; }
  const std::vector<BayesNode>& nodes() const { return nodes_; }
  const Digraph& dag() const { return dag_; }
  int cardinality(int node) const { return nodes_[static_cast<std::size_t>(node)].cardinality; }
  int cardinality(const std::string& node) const { return cardinality(dag_.Index(node)); }

  // CPT row for `node` given a full assignment indexed like nodes().
  std::span<const double> CptRow(int node, std::span<const int> assignment) const;

 private:
  std::string name_;
  std::string task_;
  std::vector<BayesNode> nodes_;
  std::vector<std::vector<int>> parent_index_;
  Digraph dag_;
};

BayesNet LoadNetwork(const std::filesystem::path& file);

// Directory holding the bundled network files; FCM_NETWORK_DIR overrides the
// build-time default.
std::filesystem::path NetworkDirectory();

inline const std::vector<std::string>& ReferenceNetworkNames() {
  static const std::vector<std::string> names{"asia", "sachs", "alarm", "insurance",
                                              "hailfinder"};
  return names;
}

BayesNet LoadReferenceNetwork(const std::string& name);
std::map<std::string, BayesNet> ReferenceNetworks();

struct NetworkDefaults {
  std::size_t n_samples = 0;
  int latent_dim = 0;
};
NetworkDefaults DefaultsFor(const std::string& network);

struct SampleTable {
  std::vector<std::string> columns;
  std::vector<int> cardinality;
  Eigen::MatrixXi values;  // n x columns
};

SampleTable AncestralSample(const BayesNet& net, std::size_t n, Rng& rng);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct EncodedDataset {
  std::string network;
  std::string task;
  nn::Matrix inputs;  // n x latent_dim
  std::vector<std::string> concept_names;
  std::vector<int> concept_cardinality;
  Eigen::MatrixXi concepts;  // n x concepts
  int task_cardinality = 2;
  std::vector<int> task_labels;
  Split split;

  std::size_t rows() const { return task_labels.size(); }
  int ConceptIndex(const std::string& name) const;
};

struct SynthesisOptions {
  int latent_dim = 32;
  double noise_mix = 0.5;
  int epochs = 50;
  double lr = 1e-3;
  int batch_size = 512;
};

// 70/10/20 split by a seeded permutation; each part sorted ascending.
Split MakeSplit(std::size_t n, Rng& rng);

EncodedDataset SynthesizeInputs(const SampleTable& samples, const std::string& task,
                                const SynthesisOptions& options, Rng& rng);

// Convenience: sample the reference network and synthesize inputs.
EncodedDataset GenerateDataset(const BayesNet& net, std::size_t n,
                               const SynthesisOptions& options, Rng& rng);

// Directory layout: inputs.csv, concepts.csv, task.csv, split.json, meta.json.
void SaveDataset(const EncodedDataset& data, const std::filesystem::path& dir);
EncodedDataset LoadDataset(const std::filesystem::path& dir);

}  // namespace fcm::data
