#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fcm/error.hpp"
#include "fcm/federation.hpp"

using namespace fcm;
using namespace fcm::fed;

namespace {

struct Fixture {
  data::BayesNet net = data::LoadReferenceNetwork("asia");
  data::EncodedDataset data;
  std::vector<partition::ClientShard> clients;

  Fixture() {
    Rng rng(5);
    data::SynthesisOptions so;
    so.latent_dim = 8;
    so.epochs = 2;
    data = data::GenerateDataset(net, 2000, so, rng);
    partition::FederationOptions fo;
    fo.n_clients = 6;
    Rng part(6);
    clients = partition::MakeFederation(data, net.dag(), fo, part);
  }
};

const Fixture& Asia() {
  static const Fixture f;
  return f;
}

TrainOptions SmallOptions(model::ModelKind kind, int rounds) {
  TrainOptions o;
  o.kind = kind;
  o.dims.encoder_hidden = 8;
  o.dims.latent = 6;
  o.dims.hidden = 6;
  o.dims.embedding = 3;
  o.schedule.total_rounds = rounds;
  o.schedule.participants = 4;
  o.schedule.join_round = 2;
  o.schedule.patience = 0;
  o.local.epochs = 1;
  o.local.batch_size = 32;
  o.local.lr = 5e-3;
  o.seed = 9;
  return o;
}

std::map<std::string, int> Columns(const data::EncodedDataset& d) {
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < d.concept_names.size(); ++i) out[d.concept_names[i]] = static_cast<int>(i);
  return out;
}

model::SharedModel ModelFor(const std::vector<std::string>& concepts, const Fixture& f, model::ModelKind kind) {
  model::Dims dims = SmallOptions(kind, 1).dims;
  dims.input = static_cast<int>(f.data.inputs.cols());
  std::map<std::string, int> cards;
  for (std::size_t i = 0; i < f.data.concept_names.size(); ++i) {
    cards[f.data.concept_names[i]] = f.data.concept_cardinality[i];
  }
  std::set<std::string> keep(concepts.begin(), concepts.end());
  keep.insert(f.data.task);
  const auto arch = model::MakeArchitecture(kind, dims, concepts, cards, f.data.task, f.data.task_cardinality,
                                            f.net.dag().Induced(keep));
  Rng init(4);
  return model::SharedModel::Build(arch, init);
}

ModuleUpdate Constant(int id, std::size_t n, const model::SharedModel& m, const std::set<std::string>& modules,
                      double value) {
  ModuleUpdate u;
  u.client_id = id;
  u.n = n;
  u.trained = modules;
  for (const auto& mod : modules) u.params[mod] = std::vector<double>(m.module(mod).param_count(), value);
  return u;
}

}  // namespace

TEST_CASE("client sampling respects cohorts") {
  std::vector<partition::ClientSpec> pool(20);
  for (int i = 0; i < 20; ++i) {
    pool[static_cast<std::size_t>(i)].id = i;
    pool[static_cast<std::size_t>(i)].cohort = i < 10 ? partition::Cohort::kInitial : partition::Cohort::kLate;
  }
  Schedule s;
  s.participants = 10;
  s.join_round = 10;
  for (int round = 0; round < 30; ++round) {
    Rng rng(round);
    const auto k = SampleClients(pool, s, round, rng);
    REQUIRE(k.size() == 10);
    CHECK(std::is_sorted(k.begin(), k.end()));
    CHECK(std::adjacent_find(k.begin(), k.end()) == k.end());
    const auto late = std::count_if(k.begin(), k.end(), [](std::size_t i) { return i >= 10; });
    if (round < 10) {
      CHECK(late == 0);
    } else {
      CHECK(late == 5);
    }
    Rng again(round);
    CHECK(SampleClients(pool, s, round, again) == k);
  }
  s.participants = 30;
  Rng rng(1);
  CHECK(SampleClients(pool, s, 12, rng).size() == 20);
  s.participants = 0;
  CHECK_THROWS_AS(SampleClients(pool, s, 12, rng), InputError);
}

TEST_CASE("local update trains only supervised modules") {
  const auto& f = Asia();
  const auto m = ModelFor(f.data.concept_names, f, model::ModelKind::kCbm);
  const auto columns = Columns(f.data);
  LocalOptions opt;
  opt.epochs = 1;

  partition::ClientShard shard = f.clients.front();
  shard.spec.supervised.clear();
  shard.spec.has_task = true;
  Rng rng(2);
  const auto u = LocalUpdate(shard, m, columns, opt, rng);
  CHECK(u.trained == std::set<std::string>{model::kEncoderId, model::kTaskId});
  CHECK(u.params.size() == 2);
  CHECK(u.n == shard.size());
  CHECK(u.params.at(model::kTaskId) != model::FlattenModule(m.module(model::kTaskId)));

  // Aggregating it leaves every other module bit-identical.
  const auto next = ModuleWiseAggregate(std::span(&u, 1), m);
  for (const auto& [id, mod] : m.modules()) {
    if (u.trained.count(id)) continue;
    CHECK(model::FlattenModule(next.module(id)) == model::FlattenModule(mod));
  }

  // Without freezing every module is sent.
  opt.freeze_unsupervised = false;
  Rng rng2(2);
  CHECK(LocalUpdate(shard, m, columns, opt, rng2).trained.size() == m.modules().size());
}

TEST_CASE("zero local epochs return the broadcast values") {
  const auto& f = Asia();
  const auto m = ModelFor(f.data.concept_names, f, model::ModelKind::kCem);
  LocalOptions opt;
  opt.epochs = 0;
  Rng rng(3);
  const auto u = LocalUpdate(f.clients[1], m, Columns(f.data), opt, rng);
  for (const auto& [id, v] : u.params) CHECK(v == model::FlattenModule(m.module(id)));
}

TEST_CASE("local update rejects concepts missing from the model") {
  const auto& f = Asia();
  const auto m = ModelFor({"smoke"}, f, model::ModelKind::kCbm);
  partition::ClientShard shard = f.clients.front();
  shard.spec.supervised = {"smoke", "lung"};
  LocalOptions opt;
  opt.epochs = 0;
  Rng rng(1);
  CHECK_THROWS_AS(LocalUpdate(shard, m, Columns(f.data), opt, rng), ProtocolError);
  opt.restrict_to_model = true;
  CHECK(LocalUpdate(shard, m, Columns(f.data), opt, rng).trained.count("lung") == 0);
}

TEST_CASE("DP local updates are seeded and differ from plain training") {
  const auto& f = Asia();
  const auto m = ModelFor(f.data.concept_names, f, model::ModelKind::kCbm);
  partition::ClientShard shard = f.clients.front();
  LocalOptions opt;
  opt.epochs = 1;
  opt.dp.enabled = true;
  opt.dp.sigma = 1.0;
  Rng a(8), b(8), c(8);
  const auto u1 = LocalUpdate(shard, m, Columns(f.data), opt, a);
  const auto u2 = LocalUpdate(shard, m, Columns(f.data), opt, b);
  CHECK(u1.params == u2.params);
  opt.dp.enabled = false;
  const auto plain = LocalUpdate(shard, m, Columns(f.data), opt, c);
  CHECK(plain.params.at(model::kEncoderId) != u1.params.at(model::kEncoderId));
}

TEST_CASE("module-wise aggregation examples") {
  const auto& f = Asia();
  const auto m = ModelFor({"smoke", "lung"}, f, model::ModelKind::kCbm);
  const std::vector<ModuleUpdate> two = {Constant(0, 100, m, {"lung"}, 1.0), Constant(1, 300, m, {"lung"}, 3.0)};
  const auto out = ModuleWiseAggregate(two, m);
  for (double v : model::FlattenModule(out.module("lung"))) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(model::FlattenModule(out.module("smoke")) == model::FlattenModule(m.module("smoke")));
  CHECK(AggregationWeights(two, "lung") == std::vector<double>{0.25, 0.75});
  CHECK(AggregationWeights(two, "smoke").empty());

  const std::vector<ModuleUpdate> one = {Constant(0, 7, m, {"smoke"}, -0.3)};
  for (double v : model::FlattenModule(ModuleWiseAggregate(one, m).module("smoke"))) CHECK(v == -0.3);

  // Conservation: identical vectors aggregate to themselves exactly.
  const std::vector<ModuleUpdate> same = {Constant(0, 3, m, {"lung"}, 0.1), Constant(1, 7, m, {"lung"}, 0.1),
                                          Constant(2, 11, m, {"lung"}, 0.1)};
  for (double v : model::FlattenModule(ModuleWiseAggregate(same, m).module("lung"))) CHECK(v == 0.1);
}

TEST_CASE("module-wise aggregation matches a brute-force weighted mean") {
  const auto& f = Asia();
  const auto m = ModelFor({"smoke", "lung"}, f, model::ModelKind::kCbm);
  const std::vector<std::string> ids = {model::kEncoderId, "smoke", "lung", model::kTaskId};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<ModuleUpdate> updates;
    for (int k = 0; k < 5; ++k) {
      ModuleUpdate u;
      u.client_id = k;
      u.n = 1 + rng.Index(500);
      u.trained.insert(model::kEncoderId);
      for (const auto& id : {"smoke", "lung"}) {
        if (rng.Bernoulli(0.6)) u.trained.insert(id);
      }
      for (const auto& id : u.trained) {
        auto& v = u.params[id];
        v.resize(m.module(id).param_count());
        for (double& x : v) x = rng.Normal() * 3.0;
      }
      updates.push_back(std::move(u));
    }
    const auto out = ModuleWiseAggregate(updates, m);
    for (const auto& id : ids) {
      const auto beta = AggregationWeights(updates, id);
      const auto got = model::FlattenModule(out.module(id));
      double n_total = 0.0;
      for (const auto& u : updates) n_total += u.trained.count(id) ? static_cast<double>(u.n) : 0.0;
      if (n_total == 0.0) {
        CHECK(beta.empty());
        CHECK(got == model::FlattenModule(m.module(id)));
        continue;
      }
      double sum = 0.0;
      for (double b : beta) sum += b;
      CHECK(std::abs(sum - 1.0) < 1e-12);
      for (std::size_t i = 0; i < got.size(); ++i) {
        double expect = 0.0;
        for (const auto& u : updates) {
          if (u.trained.count(id)) expect += static_cast<double>(u.n) / n_total * u.params.at(id)[i];
        }
        CHECK(std::abs(got[i] - expect) < 1e-12);
      }
    }
  }
}

TEST_CASE("module-wise aggregation rejects malformed updates") {
  const auto& f = Asia();
  const auto m = ModelFor({"smoke"}, f, model::ModelKind::kCbm);
  auto unknown = Constant(0, 5, m, {"smoke"}, 1.0);
  unknown.trained.insert("lung");
  CHECK_THROWS_AS(ModuleWiseAggregate(std::span(&unknown, 1), m), ProtocolError);
  auto short_vec = Constant(0, 5, m, {"smoke"}, 1.0);
  short_vec.params["smoke"].pop_back();
  CHECK_THROWS_AS(ModuleWiseAggregate(std::span(&short_vec, 1), m), ProtocolError);
  auto empty = Constant(0, 5, m, {"smoke"}, 1.0);
  empty.params.clear();
  CHECK_THROWS_AS(ModuleWiseAggregate(std::span(&empty, 1), m), ProtocolError);
}

TEST_CASE("fcm grows the concept set while static freezes it") {
  const auto& f = Asia();
  for (Regime regime : {Regime::kFcm, Regime::kStatic}) {
    TrainOptions opt = SmallOptions(model::ModelKind::kCgm, 5);
    opt.schedule.regime = regime;
    opt.dims.input = static_cast<int>(f.data.inputs.cols());
    Context ctx{&f.data, &f.net.dag(), &f.clients, opt};
    FederationState state;
    std::vector<std::set<std::string>> history;
    for (int t = 0; t < 5; ++t) {
      RunRound(state, ctx);
      const auto& c = state.model.arch().concepts;
      history.emplace_back(c.begin(), c.end());
      CHECK_NOTHROW(state.model.arch().Validate());
    }
    for (std::size_t t = 1; t < history.size(); ++t) {
      CHECK(std::includes(history[t].begin(), history[t].end(), history[t - 1].begin(), history[t - 1].end()));
    }
    if (regime == Regime::kStatic) {
      for (const auto& h : history) CHECK(h == history.front());
      CHECK(StructuralChangeFraction(state) == 0.0);
    } else {
      CHECK(history.back().size() > history.front().size());
      const double frac = StructuralChangeFraction(state);
      CHECK(frac > 0.0);
      CHECK(frac < 1.0);
    }
  }
}

TEST_CASE("static-reinit replaces every parameter at the join") {
  const auto& f = Asia();
  const auto r =
      RunRegime(Regime::kStaticReinit, f.data, f.net.dag(), f.clients, SmallOptions(model::ModelKind::kCbm, 4));
  CHECK(r.frac_params_changed > 0.999);
}

TEST_CASE("a single fully supervised client reproduces centralized training") {
  const auto& f = Asia();
  const std::vector<partition::ClientShard> solo = {CentralShard(f.data, f.net.dag())};
  for (auto kind : {model::ModelKind::kCbm, model::ModelKind::kC2bm}) {
    TrainOptions opt = SmallOptions(kind, 4);
    opt.schedule.participants = 1;
    const auto central = RunRegime(Regime::kCentralized, f.data, f.net.dag(), {}, opt);
    const auto fcm = RunRegime(Regime::kFcm, f.data, f.net.dag(), solo, opt);
    REQUIRE(central.metrics.size() == fcm.metrics.size());
    for (std::size_t t = 0; t < central.metrics.size(); ++t) {
      CHECK(central.metrics[t].val_task_loss == fcm.metrics[t].val_task_loss);
      CHECK(central.metrics[t].mean_concept_acc == fcm.metrics[t].mean_concept_acc);
    }
    const auto& a = central.models.front().second;
    const auto& b = fcm.models.front().second;
    for (const auto& [id, mod] : a.modules()) CHECK(model::FlattenModule(mod) == model::FlattenModule(b.module(id)));
  }
}

TEST_CASE("zero rounds return the initialized model") {
  const auto& f = Asia();
  const auto r = RunRegime(Regime::kFcm, f.data, f.net.dag(), f.clients, SmallOptions(model::ModelKind::kCbm, 0));
  CHECK(r.metrics.empty());
  CHECK(r.rounds_run == 0);
  REQUIRE(r.models.size() == 1);
  CHECK(r.models.front().second.param_count() > 0);
  CHECK(r.frac_params_changed == 0.0);
}

TEST_CASE("localized models only predict their own concepts") {
  const auto& f = Asia();
  const auto r = RunRegime(Regime::kLocalized, f.data, f.net.dag(), f.clients, SmallOptions(model::ModelKind::kCbm, 2));
  REQUIRE(r.models.size() == f.clients.size());
  for (std::size_t k = 0; k < f.clients.size(); ++k) {
    const auto& concepts = r.models[k].second.arch().concepts;
    for (const auto& c : concepts) CHECK(f.clients[k].spec.supervised.count(c) == 1);
    CHECK(r.predicts_task[k] == f.clients[k].spec.has_task);
  }
  CHECK(r.test.coverage < 1.0);
  CHECK_THROWS_AS(RunRegime(Regime::kLocalized, f.data, f.net.dag(), {}, SmallOptions(model::ModelKind::kCbm, 1)),
                  InputError);
}

TEST_CASE("early stopping returns the best post-join model") {
  const auto& f = Asia();
  TrainOptions opt = SmallOptions(model::ModelKind::kCbm, 40);
  opt.schedule.patience = 3;
  const auto r = RunRegime(Regime::kFcm, f.data, f.net.dag(), f.clients, opt);
  CHECK(r.rounds_run < 40);
  REQUIRE(r.best_round >= opt.schedule.join_round);
  double best = 1e300;
  for (std::size_t t = static_cast<std::size_t>(opt.schedule.join_round); t < r.metrics.size(); ++t) {
    best = std::min(best, r.metrics[t].val_task_loss);
  }
  CHECK(r.metrics[static_cast<std::size_t>(r.best_round)].val_task_loss == best);
  // Stopped exactly `patience` rounds after the best one.
  CHECK(r.rounds_run == r.best_round + 1 + opt.schedule.patience);
}

TEST_CASE("regime names round trip") {
  for (Regime r : {Regime::kCentralized, Regime::kLocalized, Regime::kStatic, Regime::kStaticReinit, Regime::kFcm}) {
    CHECK(ParseRegime(RegimeName(r)) == r);
  }
  CHECK(ParseRegime("static_fed") == Regime::kStatic);
  CHECK(ParseRegime("static_fed_reinit") == Regime::kStaticReinit);
  CHECK_THROWS_AS(ParseRegime("federated"), InputError);
  CHECK(ParseMemory(MemoryName(GraphMemory::kRoundOnly)) == GraphMemory::kRoundOnly);
}
