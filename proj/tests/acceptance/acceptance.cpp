// Runs the acceptance criteria end to end and prints one PASS/FAIL line each.
// Exits with status 1 when any criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "fcm/cli.hpp"
#include "fcm/concept_model.hpp"
#include "fcm/eval.hpp"
#include "fcm/federation.hpp"
#include "fcm/graph_agg.hpp"

using namespace fcm;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::string Pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

// ---------------------------------------------------------------- criterion 1

model::Architecture ToyArch(model::ModelKind kind) {
  model::Dims d;
  d.input = 5;
  d.encoder_hidden = 6;
  d.latent = 4;
  d.hidden = 5;
  d.embedding = 3;
  const Digraph dag({"A", "B", "C", "Y"}, {{"A", "B"}, {"A", "C"}, {"B", "C"}, {"B", "Y"}, {"C", "Y"}});
  return model::MakeArchitecture(kind, d, {"A", "B", "C"}, {{"A", 2}, {"B", 3}, {"C", 2}}, "Y", 2, dag);
}

model::Batch ToyBatch(int rows, std::uint64_t seed) {
  Rng rng(seed);
  model::Batch b;
  b.x = nn::Matrix(rows, 5);
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x.data()[i] = rng.Normal();
  b.concepts = Eigen::MatrixXi(rows, 3);
  for (int r = 0; r < rows; ++r) {
    b.concepts(r, 0) = static_cast<int>(rng.Index(2));
    b.concepts(r, 1) = static_cast<int>(rng.Index(3));
    b.concepts(r, 2) = static_cast<int>(rng.Index(2));
    b.task.push_back(static_cast<int>(rng.Index(2)));
  }
  return b;
}

const std::map<std::string, int> kToyColumns = {{"A", 0}, {"B", 1}, {"C", 2}};

double ToyLoss(const model::SharedModel& m, const model::Batch& b, const model::Intervention& iv) {
  return model::Loss(m.arch(), m.Forward(b.x, iv), b, kToyColumns, {"A", "B", "C"}, true, 0.8).value;
}

double WorstGradientError(const model::SharedModel& base, const model::Batch& b, const model::Intervention& iv) {
  model::Tape tape;
  const auto out = base.Forward(b.x, iv, &tape);
  const auto loss = model::Loss(base.arch(), out, b, kToyColumns, {"A", "B", "C"}, true, 0.8);
  const auto grads = base.Backward(tape, loss.d_concepts, loss.d_task);
  double worst = 0.0;
  for (const auto& [id, mod] : base.modules()) {
    const auto analytic = model::FlattenModule(grads.modules.at(id));
    auto params = model::FlattenModule(mod);
    double diff = 0.0, na = 0.0, nn_ = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double h = 1e-6, v = params[i];
      model::SharedModel m = base;
      params[i] = v + h;
      model::UnflattenModule(params, m.module(id));
      const double up = ToyLoss(m, b, iv);
      params[i] = v - h;
      model::UnflattenModule(params, m.module(id));
      const double down = ToyLoss(m, b, iv);
      params[i] = v;
      const double numeric = (up - down) / (2 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn_ += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn_), 1e-8}));
  }
  return worst;
}

Outcome GradientSuite() {
  const auto start = Clock::now();
  const auto b = ToyBatch(8, 1);
  double worst = 0.0;
  for (auto kind : {model::ModelKind::kCbm, model::ModelKind::kCem, model::ModelKind::kCgm, model::ModelKind::kC2bm}) {
    Rng rng(2);
    const auto m = model::SharedModel::Build(ToyArch(kind), rng);
    model::Intervention none, on_a;
    on_a.Set("A", {0, 1, 1, 0, 0, 1, 0, 1});
    worst = std::max({worst, WorstGradientError(m, b, none), WorstGradientError(m, b, on_a)});
  }
  const double t = Seconds(start);
  return {worst < 1e-4 && t < 10.0, "worst relative error " + Fmt(worst, 3) + " in " + Fmt(t, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 2

Outcome AggregationOracle() {
  const auto start = Clock::now();
  int dags = 0, mismatches = 0;
  for (int n = 1; n <= 5; ++n) {
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back("v" + std::to_string(i));
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) pairs.push_back({i, j});
    }
    int total = 1;
    for (std::size_t k = 0; k < pairs.size(); ++k) total *= 3;
    for (int code = 0; code < total; ++code) {
      Digraph g(names);
      int c = code, edges = 0;
      for (const auto& [i, j] : pairs) {
        const int r = c % 3;
        c /= 3;
        if (r == 1) g.AddEdge(i, j), ++edges;
        if (r == 2) g.AddEdge(j, i), ++edges;
      }
      if (edges > 6 || !g.IsAcyclic()) continue;
      std::vector<graph::Proposal> props(3, graph::Proposal{graph::FromAdjacency(g), 1.0 / 3});
      Rng rng(static_cast<std::uint64_t>(code));
      mismatches += graph::Aggregate(props, rng, names) == g ? 0 : 1;
      ++dags;
    }
  }
  auto pair = [](double ab, double ba) {
    nn::Matrix s = nn::Matrix::Zero(2, 2);
    s(0, 1) = ab;
    s(1, 0) = ba;
    return graph::EdgeConfidence({"A", "B"}, s);
  };
  const std::vector<graph::Proposal> three = {
      {pair(0.9, 0.0), 1.0 / 3}, {pair(0.0, 0.2), 1.0 / 3}, {pair(0.0, 0.0), 1.0 / 3}};
  const auto table = graph::Accumulate(three);
  Rng rng(0);
  const auto conflict = graph::Aggregate(three, rng);
  const bool none_wins = conflict.edge_count() == 0 && std::abs(table.none(0, 1) - 1.9 / 3) < 1e-12;
  const double t = Seconds(start);
  return {mismatches == 0 && none_wins && t < 5.0,
          std::to_string(dags) + " DAGs, " + std::to_string(mismatches) + " mismatches; conflicting pair: none=" +
              Fmt(table.none(0, 1)) + ", edges=" + std::to_string(conflict.edge_count()) + "; " + Fmt(t, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 3

bool SameBits(const nn::Matrix& a, const nn::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::equal(a.data(), a.data() + a.size(), b.data());
}

bool SameOutputs(const model::SharedModel& before, const model::SharedModel& after, const nn::Matrix& x) {
  const auto o1 = before.Forward(x);
  const auto o2 = after.Forward(x);
  const auto& a1 = before.arch().concepts;
  const auto& a2 = after.arch().concepts;
  for (std::size_t i = 0; i < a1.size(); ++i) {
    const auto j = static_cast<std::size_t>(std::find(a2.begin(), a2.end(), a1[i]) - a2.begin());
    if (j >= a2.size() || !SameBits(o1.concept_probs[i], o2.concept_probs[j])) return false;
  }
  return SameBits(o1.task_probs, o2.task_probs);
}

Outcome WarmStart() {
  const auto start = Clock::now();
  const auto b = ToyBatch(32, 3);
  model::Dims d = ToyArch(model::ModelKind::kCbm).dims;
  const std::map<std::string, int> cards = {{"A", 2}, {"B", 3}, {"C", 2}, {"D", 2}};
  Digraph with_d({"A", "B", "C", "D", "Y"},
                 {{"A", "B"}, {"A", "C"}, {"B", "C"}, {"B", "Y"}, {"C", "Y"}, {"A", "D"}, {"D", "C"}, {"D", "Y"}});
  // Same concepts plus the edge A -> Y.
  Digraph denser({"A", "B", "C", "Y"}, {{"A", "B"}, {"A", "C"}, {"B", "C"}, {"B", "Y"}, {"C", "Y"}, {"A", "Y"}});
  int checks = 0, failures = 0;
  for (auto kind : {model::ModelKind::kCbm, model::ModelKind::kCem, model::ModelKind::kCgm, model::ModelKind::kC2bm,
                    model::ModelKind::kOpaque}) {
    Rng rng(5);
    const auto base = model::SharedModel::Build(ToyArch(kind), rng);
    const auto grown = model::AdaptAddConcept(
        base, "D", 2, model::MakeArchitecture(kind, d, {"A", "B", "C", "D"}, cards, "Y", 2, with_d), rng);
    failures += SameOutputs(base, grown, b.x) ? 0 : 1;
    const auto rewired =
        model::AdaptUpdateEdges(base, model::MakeArchitecture(kind, d, {"A", "B", "C"}, cards, "Y", 2, denser), rng);
    failures += SameOutputs(base, rewired, b.x) ? 0 : 1;
    // The generic entry point does both at once.
    const auto both = base.Adapt(model::MakeArchitecture(kind, d, {"A", "B", "C", "D"}, cards, "Y", 2, with_d), rng);
    failures += SameOutputs(base, both, b.x) ? 0 : 1;
    checks += 3;
  }
  const double t = Seconds(start);
  return {failures == 0 && t < 5.0,
          std::to_string(checks - failures) + "/" + std::to_string(checks) + " adaptations bitwise-identical; " +
              Fmt(t, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 4

Outcome AggregationWeightsOracle() {
  Rng init(7);
  const auto m = model::SharedModel::Build(ToyArch(model::ModelKind::kCbm), init);
  // Encoder plus two concept modules form the three aggregated modules.
  const std::vector<std::string> ids = {model::kEncoderId, "A", "B"};
  double worst = 0.0, worst_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<fed::ModuleUpdate> updates;
    for (int k = 0; k < 5; ++k) {
      fed::ModuleUpdate u;
      u.client_id = k;
      u.n = 1 + rng.Index(1000);
      u.trained.insert(model::kEncoderId);
      for (const auto& id : {"A", "B"}) {
        if (k == 0 || rng.Bernoulli(0.5)) u.trained.insert(id);
      }
      for (const auto& id : u.trained) {
        auto& v = u.params[id];
        v.resize(m.module(id).param_count());
        for (double& x : v) x = rng.Normal() * 5.0;
      }
      updates.push_back(std::move(u));
    }
    const auto out = fed::ModuleWiseAggregate(updates, m);
    for (const auto& id : ids) {
      double sum = 0.0;
      for (double b : fed::AggregationWeights(updates, id)) sum += b;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      double total = 0.0;
      for (const auto& u : updates) total += u.trained.count(id) ? static_cast<double>(u.n) : 0.0;
      const auto got = model::FlattenModule(out.module(id));
      for (std::size_t i = 0; i < got.size(); ++i) {
        double expect = 0.0;
        for (const auto& u : updates) {
          if (u.trained.count(id)) expect += static_cast<double>(u.n) * u.params.at(id)[i];
        }
        worst = std::max(worst, std::abs(got[i] - expect / total));
      }
    }
  }
  return {worst < 1e-12 && worst_sum < 1e-12,
          "max deviation " + Fmt(worst, 3) + ", max |sum beta - 1| " + Fmt(worst_sum, 3) + " over 50 draws"};
}

// ---------------------------------------------------------- shared Asia runs

struct SeedRuns {
  double prepare_s = 0.0;
  std::map<std::string, fed::RunResult> runs;
  std::map<std::string, double> seconds;
  std::optional<eval::InterventionCurve> c2bm_curve;
};

class AsiaRuns {
 public:
  AsiaRuns(int seeds, int rounds, bool verbose) : seeds_(seeds), rounds_(rounds), verbose_(verbose) {}

  const fed::RunResult& Run(int s, const std::string& regime, const std::string& kind, std::optional<double> sigma = {}) {
    SeedRuns& r = cache_[s];
    const std::string key = regime + "/" + kind + (sigma ? "/dp" + Fmt(*sigma) : "");
    auto it = r.runs.find(key);
    if (it != r.runs.end()) return it->second;
    Use(s);
    Config c = Base(s);
    c.regime = regime;
    c.model_kind = kind;
    if (sigma) {
      c.dp.enabled = true;
      c.dp.clip = 1.0;
      c.dp.sigma = *sigma;
    }
    const auto start = Clock::now();
    auto result = fed::RunRegime(fed::ParseRegime(regime), experiment_->data, experiment_->net.dag(),
                                 experiment_->shards, c.Training());
    r.seconds[key] = Seconds(start);
    if (verbose_) {
      std::cerr << "  seed " << s << " " << key << ": test acc " << Pct(result.test.task_acc) << ", coverage "
                << Pct(result.test.coverage) << ", " << result.rounds_run << " rounds, " << Fmt(r.seconds[key], 3)
                << " s\n";
    }
    return r.runs.emplace(key, std::move(result)).first->second;
  }

  eval::InterventionCurve Curve(int s, const std::string& regime, const std::string& kind) {
    const auto& result = Run(s, regime, kind);
    Use(s);
    return eval::ComputeInterventionCurve(result.models.front().second, experiment_->data,
                                          experiment_->data.split.test, experiment_->net.dag());
  }

  int seeds() const { return seeds_; }
  int join_round() const { return Base(0).join_round; }

  double SeedSeconds(int s) const {
    auto it = cache_.find(s);
    if (it == cache_.end()) return 0.0;
    double t = it->second.prepare_s;
    for (const auto& [k, v] : it->second.seconds) t += v;
    return t;
  }

 private:
  // Makes the seed's dataset and shards current, regenerating on a switch.
  void Use(int s) {
    if (experiment_ && current_ == s) return;
    const auto start = Clock::now();
    experiment_ = PrepareExperiment(Base(s));
    current_ = s;
    cache_[s].prepare_s += Seconds(start);
  }

  Config Base(int s) const {
    Config c;
    c.dataset = "asia";
    c.n_samples = 15000;
    c.n_clients = 20;
    c.participants_per_round = 10;
    c.join_round = 10;
    c.rounds = rounds_;
    c.seed = static_cast<std::uint64_t>(s);
    return c;
  }

  int seeds_;
  int rounds_;
  bool verbose_;
  std::map<int, SeedRuns> cache_;
  std::optional<Experiment> experiment_;
  int current_ = -1;
};

double Mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------- criterion 5

Outcome AsiaReproduction(AsiaRuns& runs) {
  std::vector<double> cent, fcm, fcm_cov, static_cov, per_seed;
  std::ostringstream seeds;
  for (int s = 0; s < runs.seeds(); ++s) {
    const auto& c = runs.Run(s, "centralized", "cbm");
    const auto& f = runs.Run(s, "fcm", "cbm");
    const auto& st = runs.Run(s, "static", "cbm");
    cent.push_back(c.test.task_acc);
    fcm.push_back(f.test.task_acc);
    fcm_cov.push_back(f.test.coverage);
    static_cov.push_back(st.test.coverage);
    per_seed.push_back(runs.SeedSeconds(s));
  }
  const double gap = Mean(cent) - Mean(fcm);
  const bool a = std::abs(gap) <= 0.05;
  const bool b = *std::min_element(fcm_cov.begin(), fcm_cov.end()) == 1.0;
  const bool c = Mean(static_cov) < Mean(fcm_cov);
  const double slowest = *std::max_element(per_seed.begin(), per_seed.end());
  return {a && b && c,
          "task acc cent " + Pct(Mean(cent)) + " vs fcm " + Pct(Mean(fcm)) + " (gap " + Pct(gap) +
              " pts); coverage fcm " + Pct(Mean(fcm_cov)) + ", static " + Pct(Mean(static_cov)) +
              "; slowest seed " + Fmt(slowest / 60.0, 3) + " min for all its runs"};
}

// ---------------------------------------------------------------- criterion 6

// Post-join best-so-far validation task loss, averaged over seeds; shorter
// runs hold their final value.
std::vector<double> MeanBestSoFar(AsiaRuns& runs, const std::string& regime, const std::string& kind) {
  std::vector<std::vector<double>> curves;
  for (int s = 0; s < runs.seeds(); ++s) {
    const auto& m = runs.Run(s, regime, kind).metrics;
    std::vector<double> c;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = static_cast<std::size_t>(runs.join_round()); t < m.size(); ++t) {
      best = std::min(best, m[t].val_task_loss);
      c.push_back(best);
    }
    curves.push_back(std::move(c));
  }
  std::size_t len = 0;
  for (const auto& c : curves) len = std::max(len, c.size());
  std::vector<double> mean(len, 0.0);
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < len; ++i) mean[i] += c.empty() ? 0.0 : c[std::min(i, c.size() - 1)];
  }
  for (double& v : mean) v /= static_cast<double>(curves.size());
  return mean;
}

Outcome Convergence(AsiaRuns& runs) {
  const auto fcm = MeanBestSoFar(runs, "fcm", "cem");
  const auto st = MeanBestSoFar(runs, "static", "cem");
  const auto re = MeanBestSoFar(runs, "static-reinit", "cem");
  if (fcm.empty() || st.empty() || re.empty()) return {false, "no post-join rounds"};
  const double target = re.back();
  auto reach = [&](const std::vector<double>& c) -> int {
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c[i] <= target) return static_cast<int>(i);
    }
    return -1;
  };
  const int rf = reach(fcm), rr = reach(re);
  const bool lower = fcm.back() <= st.back();
  const bool faster = rf >= 0 && rf < rr;
  return {lower && faster, "final val loss fcm " + Fmt(fcm.back()) + ", static " + Fmt(st.back()) + ", reinit " +
                               Fmt(re.back()) + "; rounds after join to reach reinit final: fcm " +
                               std::to_string(rf) + ", reinit " + std::to_string(rr)};
}

// ---------------------------------------------------------------- criterion 7

Outcome SparseAdaptation(AsiaRuns& runs) {
  std::vector<double> fcm, st, re;
  for (int s = 0; s < runs.seeds(); ++s) {
    for (const char* kind : {"cbm", "cem"}) {
      fcm.push_back(runs.Run(s, "fcm", kind).frac_params_changed);
      st.push_back(runs.Run(s, "static", kind).frac_params_changed);
    }
    re.push_back(runs.Run(s, "static-reinit", "cem").frac_params_changed);
  }
  const auto [fmin, fmax] = std::minmax_element(fcm.begin(), fcm.end());
  const bool a = *fmin > 0.0 && *fmax < 1.0;
  const bool b = *std::max_element(st.begin(), st.end()) == 0.0;
  const bool c = *std::min_element(re.begin(), re.end()) > 0.999;
  return {a && b && c, "fcm in [" + Fmt(*fmin, 3) + ", " + Fmt(*fmax, 3) + "], static max " +
                           Fmt(*std::max_element(st.begin(), st.end()), 3) + ", reinit min " +
                           Fmt(*std::min_element(re.begin(), re.end()), 6)};
}

// ---------------------------------------------------------------- criterion 8

Outcome InterventionMonotonicity(AsiaRuns& runs) {
  std::vector<double> mean;
  for (int s = 0; s < runs.seeds(); ++s) {
    const auto curve = runs.Curve(s, "fcm", "c2bm");
    std::vector<double> points = {curve.baseline.label_accuracy};
    for (const auto& l : curve.levels) points.push_back(l.label_accuracy);
    if (mean.empty()) mean.assign(points.size(), 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) mean[i] += points[i] / runs.seeds();
  }
  bool monotone = true;
  for (std::size_t i = 2; i < mean.size(); ++i) monotone = monotone && mean[i] >= mean[i - 1] - 0.01;
  const bool above = mean.back() > mean.front();
  std::string points;
  for (std::size_t i = 0; i < mean.size(); ++i) points += (i ? " " : "") + Pct(mean[i]);
  return {monotone && above, "mean label accuracy (baseline, levels 0..): " + points};
}

// ---------------------------------------------------------------- criterion 9

Outcome RobustnessShape() {
  const auto net = data::LoadReferenceNetwork("asia");
  eval::SweepOptions opt;
  opt.seeds = 20;
  opt.rates = {0.5};
  opt.p_values = {0.3, 0.6, 0.9};
  const auto rows = eval::RobustnessSweep(net.dag(), net.task(), opt, 2024);
  bool monotone = true;
  std::string shape;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) monotone = monotone && rows[i].mean_diff >= rows[i - 1].mean_diff;
    shape += (i ? ", " : "") + std::string("p=") + Fmt(rows[i].p) + ": " + Fmt(rows[i].mean_diff, 3);
  }
  // Clean proposals: check every seed whose clients jointly see all edges.
  int covered = 0, nonzero = 0;
  for (int s = 0; s < 20; ++s) {
    eval::SweepOptions one = opt;
    one.seeds = 1;
    one.p_values = {0.0};
    const auto r = eval::RobustnessSweep(net.dag(), net.task(), one, 5000 + static_cast<std::uint64_t>(s)).front();
    if (r.full_cover == 1.0) {
      ++covered;
      nonzero += r.mean_diff == 0.0 ? 0 : 1;
    }
  }
  return {monotone && covered > 0 && nonzero == 0,
          "mean DiffPairs at rate 0.5: " + shape + "; p=0: " + std::to_string(covered) + "/20 seeds fully covered, " +
              std::to_string(nonzero) + " nonzero"};
}

// --------------------------------------------------------------- criterion 10

Outcome DpDegradation(AsiaRuns& runs) {
  std::vector<double> clean, noisy;
  for (int s = 0; s < runs.seeds(); ++s) {
    clean.push_back(runs.Run(s, "fcm", "cbm", 0.0).test.task_acc);
    noisy.push_back(runs.Run(s, "fcm", "cbm", 1.0).test.task_acc);
  }
  const double drop = Mean(clean) - Mean(noisy);
  return {drop < 0.10, "task acc sigma=0 " + Pct(Mean(clean)) + ", sigma=1 " + Pct(Mean(noisy)) + " (drop " +
                           Pct(drop) + " pts)"};
}

// --------------------------------------------------------------- criterion 11

Outcome Determinism(const fs::path& work) {
  const std::vector<std::vector<std::string>> invocations = {
      {"train", "--regime", "fcm", "--model", "c2bm", "--n", "3000", "--rounds", "15", "--seed", "5"},
      {"train", "--regime", "localized", "--model", "cem", "--n", "3000", "--rounds", "6", "--seed", "6"},
      {"train", "--regime", "static-reinit", "--model", "cgm", "--n", "3000", "--rounds", "12", "--seed", "7"},
      {"train", "--regime", "fcm", "--model", "cbm", "--n", "1500", "--rounds", "12", "--dp", "--seed", "8"},
  };
  auto slurp = [](const fs::path& f) {
    std::ifstream in(f, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  int same = 0;
  for (std::size_t i = 0; i < invocations.size(); ++i) {
    std::vector<std::string> bytes;
    for (const char* rep : {"a", "b"}) {
      const fs::path out = work / ("run" + std::to_string(i) + rep);
      fs::remove_all(out);
      auto args = invocations[i];
      args.push_back("--out");
      args.push_back(out.string());
      std::ostringstream sink;
      if (RunCli(args, sink, std::cerr) != 0) return {false, "train invocation " + std::to_string(i) + " failed"};
      bytes.push_back(slurp(out / "metrics.csv"));
    }
    same += !bytes[0].empty() && bytes[0] == bytes[1] ? 1 : 0;
  }
  return {same == static_cast<int>(invocations.size()),
          std::to_string(same) + "/" + std::to_string(invocations.size()) + " invocations byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  int seeds = 3, rounds = 200;
  std::string work = (fs::temp_directory_path() / "fcm_acceptance").string();
  bool verbose = false;
  app.add_option("--only", only, "Criterion numbers to run (default: all)");
  app.add_option("--seeds", seeds, "Seeds for the training criteria");
  app.add_option("--rounds", rounds, "Round budget for the training criteria");
  app.add_option("--work-dir", work, "Scratch directory");
  app.add_flag("-v,--verbose", verbose, "Log every training run");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  AsiaRuns runs(seeds, rounds, verbose);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", GradientSuite},
      {"graph aggregation oracle", AggregationOracle},
      {"warm-start exactness", WarmStart},
      {"module-wise aggregation oracle", AggregationWeightsOracle},
      {"asia reproduction", [&] { return AsiaReproduction(runs); }},
      {"convergence ordering", [&] { return Convergence(runs); }},
      {"sparse adaptation", [&] { return SparseAdaptation(runs); }},
      {"intervention monotonicity", [&] { return InterventionMonotonicity(runs); }},
      {"robustness sweep shape", RobustnessShape},
      {"dp degradation bound", [&] { return DpDegradation(runs); }},
      {"determinism", [&] { return Determinism(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << number << " (" << criteria[i].first
              << "): " << o.detail << " [" << Fmt(Seconds(start), 3) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
