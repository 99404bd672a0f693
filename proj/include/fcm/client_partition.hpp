#pragma once

// Client subgraphs, graph perturbation and the partition of a dataset into
// client shards with partial concept / task supervision.

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fcm/bayes_data.hpp"
#include "fcm/digraph.hpp"
#include "fcm/nn.hpp"
#include "fcm/rng.hpp"

namespace fcm::partition {

enum class Cohort { kInitial, kLate };

const char* CohortName(Cohort cohort);
Cohort ParseCohort(const std::string& name);

struct ClientSpec {
  int id = 0;
  Digraph subgraph;                 // nodes: supervised concepts (+ task if has_task)
  std::set<std::string> supervised; // I^(k)
  bool has_task = false;
  Cohort cohort = Cohort::kInitial;
  std::vector<std::size_t> rows;    // indices into the EncodedDataset
};

struct ClientShard {
  ClientSpec spec;
  nn::Matrix inputs;
  Eigen::MatrixXi concepts;  // dataset concept order; kMissing outside I^(k)
  std::vector<int> task;     // all kMissing when !has_task

  std::size_t size() const { return spec.rows.size(); }
};

// Union of up to `paths_per_anchor` distinct root-to-anchor paths from the task
// and from `extra_nodes` random non-root concepts; returned as the induced
// subgraph of `dag` on the collected nodes.
Digraph BuildSubgraph(const Digraph& dag, const std::string& task, int extra_nodes, Rng& rng,
                      int paths_per_anchor = 3);

enum class EdgeOp { kFlip, kRemove, kAdd };

// floor(p * |E|) modification attempts, each a uniform flip/remove/add; draws
// that would create a cycle (or are impossible) are retried up to 100 times,
// then the attempt is skipped. `forced` pins the operation kind.
Digraph PerturbGraph(const Digraph& g, double edge_fraction, Rng& rng,
                     std::optional<EdgeOp> forced = std::nullopt);

struct FederationOptions {
  int n_clients = 20;
  double task_drop_rate = 0.3;
  double perturb_rate = 0.3;   // r: fraction of clients whose graph is perturbed
  double perturb_p = 0.3;      // p: fraction of each perturbed graph's edges
  int extra_nodes = 2;
  int paths_per_anchor = 3;
  // Clients [0, n_initial) form the initial cohort; the rest join late.
  // Negative means half of n_clients (rounded up).
  int n_initial = -1;
  // Fraction of concepts unseen by the initial cohort; late clients introduce
  // them. Zero gives a stationary concept space.
  double late_concept_fraction = 0.4;
};

// Builds the client specs (graphs, supervision, cohorts, row partition).
std::vector<ClientSpec> MakeFederationSpecs(const data::EncodedDataset& dataset,
                                            const Digraph& dag,
                                            const FederationOptions& options, Rng& rng);

// Materializes shards from specs: gathers rows and masks labels.
std::vector<ClientShard> MakeShards(const data::EncodedDataset& dataset,
                                    const std::vector<ClientSpec>& specs);

std::vector<ClientShard> MakeFederation(const data::EncodedDataset& dataset, const Digraph& dag,
                                        const FederationOptions& options, Rng& rng);

// Manifest: per client subgraph edges, supervised set, has_task, cohort and
// row index ranges.
void SaveManifest(const std::vector<ClientSpec>& specs, const std::filesystem::path& file);
std::vector<ClientSpec> LoadManifest(const std::filesystem::path& file);

// Half-open [begin, end) runs covering a sorted index list.
std::vector<std::pair<std::size_t, std::size_t>> ToRanges(std::vector<std::size_t> rows);

}  // namespace fcm::partition
