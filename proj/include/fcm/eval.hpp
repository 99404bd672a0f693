#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fcm/bayes_data.hpp"
#include "fcm/concept_model.hpp"
#include "fcm/csv.hpp"
#include "fcm/digraph.hpp"

namespace fcm::eval {

// Argmax accuracy of `probs` against labels (kMissing rows skipped), or
// 1/cardinality when the variable is not predicted (probs == nullptr).
double AccuracyWithRandomFill(const nn::Matrix* probs, std::span<const int> labels, int cardinality);

// Concepts with a directed path to the task in the ground-truth DAG.
std::set<std::string> TaskRelevantConcepts(const Digraph& truth, const std::string& task);

struct CoverageReport {
  std::set<std::string> predicted;
  std::set<std::string> relevant;
  double coverage = 0.0;
};

CoverageReport Coverage(const std::set<std::string>& predicted, const Digraph& truth, const std::string& task);

struct Metrics {
  double task_loss = 0.0;
  double task_acc = 0.0;
  double concept_acc = 0.0;  // mean over all dataset concepts, random fill
  double coverage = 0.0;
  std::map<std::string, double> concept_acc_by_name;
};

// `predicts_task` false scores the task as a uniform guess.
Metrics Evaluate(const model::SharedModel& model, const data::EncodedDataset& data,
                 std::span<const std::size_t> rows, const Digraph& truth, bool predicts_task = true);

// Longest-path depth from any root; roots are level 0.
std::map<std::string, int> DepthLevels(const Digraph& dag);

struct CurveLevel {
  int level = -1;
  std::vector<std::string> intervened;
  std::vector<std::string> unavailable;  // concepts at this depth or above the model lacks
  bool impossible = false;
  double label_accuracy = 0.0;
  double task_accuracy = 0.0;
};

struct InterventionCurve {
  CurveLevel baseline;  // no interventions
  std::vector<CurveLevel> levels;
};

// Cumulative interventions: level l fixes every predicted concept whose depth
// is at most l. Label accuracy averages the task and every non-intervened
// concept, with random fill for concepts the model does not predict.
InterventionCurve ComputeInterventionCurve(const model::SharedModel& model, const data::EncodedDataset& data,
                                           std::span<const std::size_t> rows, const Digraph& truth,
                                           bool predicts_task = true);

struct SweepOptions {
  std::vector<double> p_values = {0.0, 0.3, 0.6, 0.9};
  std::vector<double> rates = {0.0, 0.25, 0.5, 0.75, 1.0};
  int seeds = 20;
  int n_clients = 20;
  int extra_nodes = 2;
  int paths_per_anchor = 3;
};

struct SweepRow {
  double p = 0.0;
  double rate = 0.0;
  double mean_diff = 0.0;        // aggregated graph vs truth
  double std_diff = 0.0;
  double local_mean_diff = 0.0;  // each client graph vs its truth subgraph
  double full_cover = 0.0;       // share of seeds whose clients jointly see every true edge
};

std::vector<SweepRow> RobustnessSweep(const Digraph& truth, const std::string& task, const SweepOptions& options,
                                      std::uint64_t seed);

struct ReportRow {
  std::string regime;
  std::string model_kind;
  int runs = 0;
  std::map<std::string, std::pair<double, double>> stats;  // column -> (mean, sample std)
};

// Groups summary tables by (regime, model_kind) and aggregates every numeric
// column other than seed.
std::vector<ReportRow> Report(const std::vector<csv::Table>& summaries);
csv::Table ReportTable(const std::vector<ReportRow>& rows);

}  // namespace fcm::eval
