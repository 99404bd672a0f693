#pragma once

// Server round loop: client sampling over a two-cohort population, structure
// aggregation, architecture adaptation, local training with frozen
// unsupervised modules, and module-wise averaging.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fcm/bayes_data.hpp"
#include "fcm/client_partition.hpp"
#include "fcm/concept_model.hpp"
#include "fcm/eval.hpp"
#include "fcm/graph_agg.hpp"

namespace fcm::fed {

enum class Regime { kCentralized, kLocalized, kStatic, kStaticReinit, kFcm };

std::string RegimeName(Regime regime);  // centralized|localized|static|static-reinit|fcm
Regime ParseRegime(const std::string& name);  // also accepts static_fed, static_fed_reinit

enum class GraphMemory { kRoundOnly, kCumulative };

std::string MemoryName(GraphMemory memory);
GraphMemory ParseMemory(const std::string& name);

struct DpOptions {
  bool enabled = false;
  double clip = 1.0;
  double sigma = 1.0;
};

struct Schedule {
  int total_rounds = 200;
  int participants = 10;
  int join_round = 10;
  int patience = 10;
  Regime regime = Regime::kFcm;
};

struct LocalOptions {
  int epochs = 2;
  int batch_size = 64;
  double lr = 1e-3;
  double gamma = 0.8;
  double intervention_prob = 0.25;
  bool freeze_unsupervised = true;
  DpOptions dp;
  // Train I^(k) ∩ M instead of rejecting concepts the model lacks (static
  // regime, whose architecture never grows).
  bool restrict_to_model = false;
};

struct TrainOptions {
  model::ModelKind kind = model::ModelKind::kCbm;
  model::Dims dims;  // dims.input is taken from the dataset
  Schedule schedule;
  LocalOptions local;
  GraphMemory memory = GraphMemory::kCumulative;
  bool record_wall_clock = false;
  std::uint64_t seed = 0;
};

struct ModuleUpdate {
  int client_id = 0;
  std::map<std::string, std::vector<double>> params;  // trained modules only
  std::size_t n = 0;
  std::set<std::string> trained;
};

// Indices into `clients`. Before the join round only the initial cohort is
// eligible; afterwards both cohorts are sampled about half and half.
std::vector<std::size_t> SampleClients(std::span<const partition::ClientSpec> clients, const Schedule& schedule,
                                       int round, Rng& rng);

ModuleUpdate LocalUpdate(const partition::ClientShard& shard, const model::SharedModel& model,
                         const std::map<std::string, int>& columns, const LocalOptions& options, Rng& rng);

// beta_j^(k) = n_k / sum of n over the clients that trained module j.
std::vector<double> AggregationWeights(std::span<const ModuleUpdate> updates, const std::string& module_id);

model::SharedModel ModuleWiseAggregate(std::span<const ModuleUpdate> updates, const model::SharedModel& broadcast);

struct MetricsRow {
  int round = 0;
  std::string regime;
  std::string model_kind;
  std::uint64_t seed = 0;
  double val_task_loss = 0.0;
  double val_task_acc = 0.0;
  double mean_concept_acc = 0.0;
  double coverage = 0.0;
  std::size_t n_params = 0;
  double frac_params_changed = 0.0;
  double wall_clock_s = 0.0;
};

const std::vector<std::string>& MetricsHeader();
std::vector<std::string> MetricsCells(const MetricsRow& row);

struct Context {
  const data::EncodedDataset* data = nullptr;
  const Digraph* truth = nullptr;
  const std::vector<partition::ClientShard>* clients = nullptr;
  TrainOptions options;
};

struct FederationState {
  int round = 0;
  bool built = false;
  model::SharedModel model;
  Digraph graph;                      // G_t over M_t and the task
  std::vector<std::string> concepts;  // M_t, in arrival order
  std::map<int, graph::Proposal> proposals;
  // Snapshot taken before the first post-join round, and a copy that only
  // replays the structural changes applied since then.
  std::optional<model::SharedModel> pre_join;
  std::optional<model::SharedModel> shadow;
  std::vector<std::size_t> last_participants;
};

// Steps (1)-(3) of a round: sample, aggregate structure, adapt.
void UpdateStructure(FederationState& state, const Context& ctx, std::span<const std::size_t> participants);
// A full round; appends nothing, returns the round's metrics.
MetricsRow RunRound(FederationState& state, const Context& ctx);

double StructuralChangeFraction(const FederationState& state);

// The returned models are those of the round with the lowest validation task
// loss (rounds before join_round are not eligible in the federated regimes).
struct RunResult {
  std::vector<MetricsRow> metrics;
  std::vector<std::pair<std::string, model::SharedModel>> models;
  std::vector<bool> predicts_task;  // per model
  eval::Metrics test;               // averaged over models
  double frac_params_changed = 0.0;
  int rounds_run = 0;
  int best_round = -1;
};

// Runs one training regime. When `metrics_file` is set each round's row is
// appended as soon as it is computed.
RunResult RunRegime(Regime regime, const data::EncodedDataset& data, const Digraph& truth,
                    const std::vector<partition::ClientShard>& clients, TrainOptions options,
                    const std::optional<std::filesystem::path>& metrics_file = std::nullopt);

// The pooled training split with every label, as a single client.
partition::ClientShard CentralShard(const data::EncodedDataset& data, const Digraph& truth);

}  // namespace fcm::fed
