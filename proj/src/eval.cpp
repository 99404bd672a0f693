#include "fcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fcm/client_partition.hpp"
#include "fcm/error.hpp"
#include "fcm/graph_agg.hpp"

namespace fcm::eval {

namespace {

std::vector<int> Column(const Eigen::MatrixXi& m, int col, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(m(static_cast<Eigen::Index>(r), col));
  return out;
}

std::vector<int> Pick(const std::vector<int>& values, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(values[r]);
  return out;
}

std::map<std::string, int> ColumnsOf(const data::EncodedDataset& data) {
  std::map<std::string, int> columns;
  for (std::size_t i = 0; i < data.concept_names.size(); ++i) columns[data.concept_names[i]] = static_cast<int>(i);
  return columns;
}

double MeanOf(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double SampleStd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = MeanOf(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

double AccuracyWithRandomFill(const nn::Matrix* probs, std::span<const int> labels, int cardinality) {
  if (cardinality < 1) throw InputError("cardinality must be positive");
  if (probs == nullptr) return 1.0 / static_cast<double>(cardinality);
  if (static_cast<std::size_t>(probs->rows()) != labels.size()) {
    throw InputError("accuracy: prediction and label counts differ");
  }
  std::size_t hits = 0, count = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] == nn::kMissing) continue;
    Eigen::Index arg = 0;
    probs->row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
    hits += arg == labels[r] ? 1 : 0;
    ++count;
  }
  return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
}

std::set<std::string> TaskRelevantConcepts(const Digraph& truth, const std::string& task) {
  std::set<std::string> out;
  for (int a : truth.Ancestors(truth.Index(task))) out.insert(truth.Name(a));
  return out;
}

CoverageReport Coverage(const std::set<std::string>& predicted, const Digraph& truth, const std::string& task) {
  CoverageReport r;
  r.predicted = predicted;
  r.relevant = TaskRelevantConcepts(truth, task);
  std::size_t hit = 0;
  for (const auto& c : r.relevant) hit += predicted.count(c);
  r.coverage = r.relevant.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(r.relevant.size());
  return r;
}

Metrics Evaluate(const model::SharedModel& model, const data::EncodedDataset& data,
                 std::span<const std::size_t> rows, const Digraph& truth, bool predicts_task) {
  Metrics m;
  const auto& arch = model.arch();
  model::Output out;
  if (!rows.empty()) {
    nn::Matrix x(static_cast<Eigen::Index>(rows.size()), data.inputs.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = data.inputs.row(static_cast<Eigen::Index>(rows[i]));
    }
    out = model.Forward(x);
  }
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < arch.concepts.size(); ++i) position[arch.concepts[i]] = i;
  std::vector<double> accs;
  for (std::size_t c = 0; c < data.concept_names.size(); ++c) {
    const auto& name = data.concept_names[c];
    auto it = position.find(name);
    const nn::Matrix* probs = it == position.end() || rows.empty() ? nullptr : &out.concept_probs[it->second];
    const double acc =
        AccuracyWithRandomFill(probs, Column(data.concepts, static_cast<int>(c), rows), data.concept_cardinality[c]);
    m.concept_acc_by_name[name] = acc;
    accs.push_back(acc);
  }
  m.concept_acc = MeanOf(accs);
  const auto labels = Pick(data.task_labels, rows);
  if (predicts_task && !rows.empty()) {
    m.task_acc = AccuracyWithRandomFill(&out.task_probs, labels, data.task_cardinality);
    m.task_loss = nn::CrossEntropy(out.task_probs, labels).value;
  } else {
    m.task_acc = AccuracyWithRandomFill(nullptr, labels, data.task_cardinality);
    m.task_loss = std::log(static_cast<double>(data.task_cardinality));
  }
  m.coverage = Coverage({arch.concepts.begin(), arch.concepts.end()}, truth, data.task).coverage;
  return m;
}

std::map<std::string, int> DepthLevels(const Digraph& dag) {
  std::vector<int> level(dag.size(), 0);
  for (int v : dag.TopologicalOrder()) {
    for (int p : dag.Parents(v)) {
      level[static_cast<std::size_t>(v)] = std::max(level[static_cast<std::size_t>(v)], level[static_cast<std::size_t>(p)] + 1);
    }
  }
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < dag.size(); ++i) out[dag.nodes()[i]] = level[i];
  return out;
}

InterventionCurve ComputeInterventionCurve(const model::SharedModel& model, const data::EncodedDataset& data,
                                           std::span<const std::size_t> rows, const Digraph& truth,
                                           bool predicts_task) {
  const auto& arch = model.arch();
  const auto levels = DepthLevels(truth);
  const auto columns = ColumnsOf(data);
  nn::Matrix x(static_cast<Eigen::Index>(rows.size()), data.inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = data.inputs.row(static_cast<Eigen::Index>(rows[i]));
  }
  Eigen::MatrixXi labels(static_cast<Eigen::Index>(rows.size()), data.concepts.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    labels.row(static_cast<Eigen::Index>(i)) = data.concepts.row(static_cast<Eigen::Index>(rows[i]));
  }
  const auto task_labels = Pick(data.task_labels, rows);
  std::vector<std::size_t> local_rows(rows.size());
  std::iota(local_rows.begin(), local_rows.end(), 0);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < arch.concepts.size(); ++i) position[arch.concepts[i]] = i;

  auto score = [&](int level, const std::vector<std::string>& intervened) {
    CurveLevel cl;
    cl.level = level;
    cl.intervened = intervened;
    const auto iv = model::Intervention::FromLabels(intervened, labels, columns);
    const auto out = model.Forward(x, iv);
    std::set<std::string> fixed(intervened.begin(), intervened.end());
    std::vector<double> accs;
    for (std::size_t c = 0; c < data.concept_names.size(); ++c) {
      const auto& name = data.concept_names[c];
      if (fixed.count(name)) continue;
      auto it = position.find(name);
      const nn::Matrix* probs = it == position.end() ? nullptr : &out.concept_probs[it->second];
      accs.push_back(AccuracyWithRandomFill(probs, Column(labels, static_cast<int>(c), local_rows),
                                            data.concept_cardinality[c]));
    }
    cl.task_accuracy = AccuracyWithRandomFill(predicts_task ? &out.task_probs : nullptr, task_labels,
                                              data.task_cardinality);
    accs.push_back(cl.task_accuracy);
    cl.label_accuracy = MeanOf(accs);
    return cl;
  };

  InterventionCurve curve;
  curve.baseline = score(-1, {});
  int max_level = -1;
  for (const auto& c : data.concept_names) max_level = std::max(max_level, levels.at(c));
  for (int l = 0; l <= max_level; ++l) {
    std::vector<std::string> chosen, missing;
    for (const auto& c : data.concept_names) {
      if (levels.at(c) > l) continue;
      (position.count(c) ? chosen : missing).push_back(c);
    }
    CurveLevel cl = score(l, chosen);
    cl.unavailable = missing;
    cl.impossible = !missing.empty();
    curve.levels.push_back(std::move(cl));
  }
  return curve;
}

std::vector<SweepRow> RobustnessSweep(const Digraph& truth, const std::string& task, const SweepOptions& options,
                                      std::uint64_t seed) {
  if (options.seeds < 1 || options.n_clients < 1) throw InputError("sweep needs at least one seed and client");
  const Rng base(seed);
  std::vector<SweepRow> rows;
  for (double rate : options.rates) {
    for (double p : options.p_values) {
      std::vector<double> diffs, locals, covered;
      for (int s = 0; s < options.seeds; ++s) {
        const auto su = static_cast<std::uint64_t>(s);
        // Subgraphs and the corrupted subset depend on the seed only, so
        // rows at the same seed differ just in the perturbation strength.
        Rng build = base.Fork("clients", su);
        std::vector<Digraph> clean;
        for (int k = 0; k < options.n_clients; ++k) {
          clean.push_back(partition::BuildSubgraph(truth, task, options.extra_nodes, build, options.paths_per_anchor));
        }
        Rng pick = base.Fork("corrupt", su);
        const auto order = pick.Permutation(clean.size());
        const auto n_bad = static_cast<std::size_t>(std::lround(rate * static_cast<double>(clean.size())));
        std::set<std::size_t> bad(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_bad));

        std::vector<graph::Proposal> proposals;
        std::set<std::pair<std::string, std::string>> seen_pairs;
        double local = 0.0;
        for (std::size_t k = 0; k < clean.size(); ++k) {
          Digraph g = clean[k];
          if (bad.count(k)) {
            Rng rng = base.Fork("perturb", su * 1000 + k);
            g = partition::PerturbGraph(g, p, rng);
          }
          local += graph::DiffPairs(g, clean[k]);
          for (const auto& [a, b] : clean[k].NamedEdges()) seen_pairs.insert({a, b});
          proposals.push_back({graph::FromAdjacency(g), 1.0});
        }
        Rng ties = base.Fork("ties", su);
        const Digraph agg = graph::Aggregate(proposals, ties, truth.nodes());
        diffs.push_back(graph::DiffPairs(agg, truth));
        locals.push_back(local / static_cast<double>(clean.size()));
        covered.push_back(seen_pairs.size() == truth.edge_count() ? 1.0 : 0.0);
      }
      rows.push_back({p, rate, MeanOf(diffs), SampleStd(diffs), MeanOf(locals), MeanOf(covered)});
    }
  }
  return rows;
}

std::vector<ReportRow> Report(const std::vector<csv::Table>& summaries) {
  // (regime, kind) -> column -> values, in first-seen order.
  std::vector<ReportRow> out;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::map<std::size_t, std::map<std::string, std::vector<double>>> values;
  std::map<std::size_t, std::vector<std::string>> column_order;
  for (const auto& t : summaries) {
    const std::size_t ri = t.Column("regime"), ki = t.Column("model_kind");
    for (const auto& row : t.rows) {
      const auto key = std::make_pair(row[ri], row[ki]);
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, out.size()).first;
        out.push_back({key.first, key.second, 0, {}});
      }
      ReportRow& r = out[it->second];
      ++r.runs;
      for (std::size_t c = 0; c < t.header.size(); ++c) {
        const auto& name = t.header[c];
        if (c == ri || c == ki || name == "seed" || c >= row.size()) continue;
        double v = 0.0;
        try {
          std::size_t used = 0;
          v = std::stod(row[c], &used);
          if (used != row[c].size()) continue;
        } catch (const std::exception&) {
          continue;
        }
        auto& col = values[it->second][name];
        if (col.empty()) column_order[it->second].push_back(name);
        col.push_back(v);
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (const auto& name : column_order[i]) {
      const auto& v = values[i][name];
      out[i].stats[name] = {MeanOf(v), SampleStd(v)};
    }
  }
  return out;
}

csv::Table ReportTable(const std::vector<ReportRow>& rows) {
  csv::Table t;
  t.header = {"regime", "model_kind", "runs"};
  std::vector<std::string> cols;
  for (const auto& r : rows) {
    for (const auto& [name, s] : r.stats) {
      if (std::find(cols.begin(), cols.end(), name) == cols.end()) cols.push_back(name);
    }
  }
  for (const auto& c : cols) {
    t.header.push_back(c + "_mean");
    t.header.push_back(c + "_std");
  }
  for (const auto& r : rows) {
    std::vector<std::string> line = {r.regime, r.model_kind, std::to_string(r.runs)};
    for (const auto& c : cols) {
      auto it = r.stats.find(c);
      line.push_back(it == r.stats.end() ? "" : csv::FormatDouble(it->second.first));
      line.push_back(it == r.stats.end() ? "" : csv::FormatDouble(it->second.second));
    }
    t.rows.push_back(std::move(line));
  }
  return t;
}

}  // namespace fcm::eval
