#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fcm/error.hpp"
#include "fcm/eval.hpp"
#include "fcm/federation.hpp"

using namespace fcm;
using namespace fcm::eval;

namespace {

// A -> B -> Y with near-deterministic copies; inputs carry no signal.
data::BayesNet NoisyChain() {
  std::vector<data::BayesNode> nodes = {
      {"A", 2, {"0", "1"}, {}, {0.5, 0.5}},
      {"B", 2, {"0", "1"}, {"A"}, {0.95, 0.05, 0.05, 0.95}},
      {"Y", 2, {"0", "1"}, {"B"}, {0.95, 0.05, 0.05, 0.95}},
  };
  return data::BayesNet("chain", nodes, "Y");
}

csv::Table Summary(const std::string& regime, const std::string& kind, const std::string& seed, const std::string& acc) {
  csv::Table t;
  t.header = {"regime", "model_kind", "seed", "test_task_acc"};
  t.rows.push_back({regime, kind, seed, acc});
  return t;
}

}  // namespace

TEST_CASE("random fill scores unpredicted variables at 1/cardinality") {
  const std::vector<int> labels = {0, 1, 1, 0};
  CHECK(AccuracyWithRandomFill(nullptr, labels, 2) == doctest::Approx(0.5));
  CHECK(AccuracyWithRandomFill(nullptr, labels, 4) == doctest::Approx(0.25));
  // Same answer on every call: no sampling involved.
  CHECK(AccuracyWithRandomFill(nullptr, labels, 3) == AccuracyWithRandomFill(nullptr, labels, 3));

  nn::Matrix probs(4, 2);
  probs << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.7, 0.3;
  CHECK(AccuracyWithRandomFill(&probs, labels, 2) == doctest::Approx(0.75));
  const std::vector<int> partial = {0, nn::kMissing, 1, nn::kMissing};
  CHECK(AccuracyWithRandomFill(&probs, partial, 2) == doctest::Approx(0.5));
  CHECK_THROWS_AS(AccuracyWithRandomFill(&probs, std::vector<int>{0, 1}, 2), InputError);

  // Three binary concepts at 0.9 and one unpredicted: (0.9 * 3 + 0.5) / 4.
  const double mean = (0.9 * 3 + AccuracyWithRandomFill(nullptr, labels, 2)) / 4.0;
  CHECK(mean == doctest::Approx(0.8));
}

TEST_CASE("depth levels follow the longest path") {
  const auto chain = DepthLevels(Digraph({"A", "B", "C"}, {{"A", "B"}, {"B", "C"}}));
  CHECK(chain.at("A") == 0);
  CHECK(chain.at("B") == 1);
  CHECK(chain.at("C") == 2);

  const auto diamond =
      DepthLevels(Digraph({"A", "B", "C", "D"}, {{"A", "B"}, {"A", "C"}, {"B", "D"}, {"C", "D"}}));
  CHECK(diamond.at("D") == 2);

  // A shortcut edge does not shorten the longest path.
  const auto shortcut = DepthLevels(Digraph({"A", "B", "C"}, {{"A", "B"}, {"B", "C"}, {"A", "C"}}));
  CHECK(shortcut.at("C") == 2);

  const auto isolated = DepthLevels(Digraph(std::vector<std::string>{"A", "B"}));
  CHECK(isolated.at("A") == 0);
  CHECK(isolated.at("B") == 0);
}

TEST_CASE("coverage counts task ancestors only") {
  const auto asia = data::LoadReferenceNetwork("asia");
  const auto relevant = TaskRelevantConcepts(asia.dag(), "dysp");
  CHECK(relevant == std::set<std::string>{"asia", "tub", "smoke", "lung", "bronc", "either"});
  CHECK(Coverage({"asia", "tub", "smoke", "lung", "bronc", "either", "xray"}, asia.dag(), "dysp").coverage == 1.0);
  CHECK(Coverage({"xray"}, asia.dag(), "dysp").coverage == 0.0);
  CHECK(Coverage({"bronc", "either", "xray"}, asia.dag(), "dysp").coverage == doctest::Approx(2.0 / 6.0));
}

TEST_CASE("intervention curve flags levels with unpredicted concepts") {
  const auto net = NoisyChain();
  Rng rng(3);
  data::SynthesisOptions so;
  so.latent_dim = 4;
  so.epochs = 1;
  const auto data = data::GenerateDataset(net, 200, so, rng);

  model::Dims dims;
  dims.input = 4;
  dims.encoder_hidden = 4;
  dims.latent = 3;
  dims.hidden = 3;
  dims.embedding = 2;
  const std::map<std::string, int> cards = {{"A", 2}, {"B", 2}};
  // The model lacks A, the only level-0 concept.
  const auto arch = model::MakeArchitecture(model::ModelKind::kCbm, dims, {"B"}, cards, "Y", 2,
                                            Digraph({"B", "Y"}, {{"B", "Y"}}));
  Rng init(1);
  const auto m = model::SharedModel::Build(arch, init);
  const auto curve = ComputeInterventionCurve(m, data, data.split.test, net.dag());
  REQUIRE(curve.levels.size() == 2);
  CHECK(curve.baseline.intervened.empty());
  CHECK(curve.levels[0].impossible);
  CHECK(curve.levels[0].unavailable == std::vector<std::string>{"A"});
  CHECK(curve.levels[0].intervened.empty());
  CHECK(curve.levels[1].intervened == std::vector<std::string>{"B"});
  // Endpoint: only A (random fill) and the task remain.
  CHECK(curve.levels[1].label_accuracy == doctest::Approx((0.5 + curve.levels[1].task_accuracy) / 2.0));

  // Baseline agrees with the standalone metrics.
  const auto metrics = Evaluate(m, data, data.split.test, net.dag());
  CHECK(curve.baseline.task_accuracy == doctest::Approx(metrics.task_acc));
  CHECK(curve.baseline.label_accuracy == doctest::Approx((metrics.concept_acc * 2 + metrics.task_acc) / 3.0));
  CHECK(metrics.coverage == doctest::Approx(0.5));
}

TEST_CASE("interventions on an uninformative-input chain lift accuracy to the CPT ceiling") {
  const auto net = NoisyChain();
  Rng rng(11);
  data::SynthesisOptions so;
  so.latent_dim = 4;
  so.noise_mix = 1.0;
  so.epochs = 1;
  const auto data = data::GenerateDataset(net, 3000, so, rng);

  fed::TrainOptions opt;
  opt.kind = model::ModelKind::kC2bm;
  opt.dims.encoder_hidden = 8;
  opt.dims.latent = 4;
  opt.dims.hidden = 8;
  opt.dims.embedding = 4;
  opt.schedule.total_rounds = 15;
  opt.local.lr = 1e-2;
  const auto run = fed::RunRegime(fed::Regime::kCentralized, data, net.dag(), {}, opt);
  const auto curve = ComputeInterventionCurve(run.models.front().second, data, data.split.test, net.dag());
  REQUIRE(curve.levels.size() == 2);
  for (const auto& l : curve.levels) CHECK_FALSE(l.impossible);

  // Without interventions nothing beats chance by much; with A and B fixed,
  // Y is right whenever the 0.95 copy holds.
  CHECK(curve.baseline.task_accuracy < 0.65);
  CHECK(curve.levels[1].task_accuracy > 0.9);
  CHECK(curve.levels[1].label_accuracy == doctest::Approx(curve.levels[1].task_accuracy));
  CHECK(curve.levels[0].label_accuracy > curve.baseline.label_accuracy + 0.2);
  CHECK(curve.levels[1].label_accuracy > curve.baseline.label_accuracy + 0.2);
}

TEST_CASE("report aggregates mean and sample std per regime and model") {
  const std::vector<csv::Table> runs = {
      Summary("fcm", "cbm", "0", "0.7"),
      Summary("fcm", "cbm", "1", "0.8"),
      Summary("fcm", "cbm", "2", "0.9"),
      Summary("static", "cbm", "0", "0.5"),
  };
  const auto rows = Report(runs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].regime == "fcm");
  CHECK(rows[0].runs == 3);
  CHECK(rows[0].stats.at("test_task_acc").first == doctest::Approx(0.8));
  CHECK(rows[0].stats.at("test_task_acc").second == doctest::Approx(0.1));
  CHECK(rows[0].stats.count("seed") == 0);
  CHECK(rows[1].runs == 1);
  CHECK(rows[1].stats.at("test_task_acc").second == 0.0);

  const auto table = ReportTable(rows);
  CHECK(table.header == std::vector<std::string>{"regime", "model_kind", "runs", "test_task_acc_mean",
                                                 "test_task_acc_std"});
  CHECK(table.rows[0][2] == "3");

  // Round trip through files.
  const auto dir = std::filesystem::path(FCM_TEST_TMP) / "eval_report";
  std::filesystem::create_directories(dir);
  std::vector<csv::Table> reread;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto file = dir / ("summary" + std::to_string(i) + ".csv");
    csv::Write(file, runs[i]);
    reread.push_back(csv::Read(file));
  }
  CHECK(Report(reread)[0].stats.at("test_task_acc").first == doctest::Approx(0.8));
}

TEST_CASE("robustness sweep: clean proposals reconstruct asia") {
  const auto asia = data::LoadReferenceNetwork("asia");
  SweepOptions opt;
  opt.seeds = 5;
  opt.p_values = {0.0, 0.9};
  opt.rates = {0.0, 1.0};
  const auto rows = RobustnessSweep(asia.dag(), asia.task(), opt, 7);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    if (r.p == 0.0 || r.rate == 0.0) {
      CHECK(r.local_mean_diff == 0.0);
      if (r.full_cover == 1.0) CHECK(r.mean_diff == 0.0);
    }
  }
  // Every client corrupted at p=0.9 must show some damage locally.
  CHECK(rows[3].local_mean_diff > 0.0);
  // Same seed, same table.
  const auto again = RobustnessSweep(asia.dag(), asia.task(), opt, 7);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].mean_diff == again[i].mean_diff);
  SweepOptions bad = opt;
  bad.seeds = 0;
  CHECK_THROWS_AS(RobustnessSweep(asia.dag(), asia.task(), bad, 7), InputError);
}
