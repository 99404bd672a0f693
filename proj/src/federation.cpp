#include "fcm/federation.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>

#include "fcm/csv.hpp"
#include "fcm/error.hpp"

namespace fcm::fed {

namespace {

std::map<std::string, int> ConceptColumns(const data::EncodedDataset& data) {
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < data.concept_names.size(); ++i) out[data.concept_names[i]] = static_cast<int>(i);
  return out;
}

std::map<std::string, int> Cardinalities(const data::EncodedDataset& data) {
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < data.concept_names.size(); ++i) out[data.concept_names[i]] = data.concept_cardinality[i];
  return out;
}

model::Architecture TargetArchitecture(const Context& ctx, const std::vector<std::string>& concepts,
                                       const Digraph& graph) {
  const auto& data = *ctx.data;
  model::Dims dims = ctx.options.dims;
  dims.input = static_cast<int>(data.inputs.cols());
  return model::MakeArchitecture(ctx.options.kind, dims, concepts, Cardinalities(data), data.task,
                                 data.task_cardinality, graph);
}

bool SameStructure(const model::Architecture& a, const model::Architecture& b) {
  if (a.concepts.size() != b.concepts.size()) return false;
  auto as_set = [](const std::vector<std::string>& v) { return std::set<std::string>(v.begin(), v.end()); };
  for (const auto& c : b.concepts) {
    if (!a.HasConcept(c) || as_set(a.parents.at(c)) != as_set(b.parents.at(c))) return false;
  }
  return as_set(a.task_parents) == as_set(b.task_parents);
}

void AppendRow(const std::filesystem::path& file, const std::vector<std::string>& cells) {
  std::ofstream out(file, std::ios::app);
  if (!out) throw DataError("cannot append to " + file.string());
  out << csv::JoinRow(cells) << '\n';
}

Rng Stream(const TrainOptions& options, std::string_view tag, std::uint64_t index) {
  return Rng(options.seed).Fork(tag, index);
}

}  // namespace

std::string RegimeName(Regime regime) {
  switch (regime) {
    case Regime::kCentralized: return "centralized";
    case Regime::kLocalized: return "localized";
    case Regime::kStatic: return "static";
    case Regime::kStaticReinit: return "static-reinit";
    case Regime::kFcm: return "fcm";
  }
  return "?";
}

Regime ParseRegime(const std::string& name) {
  if (name == "static_fed") return Regime::kStatic;
  if (name == "static_fed_reinit" || name == "static_reinit") return Regime::kStaticReinit;
  for (auto r : {Regime::kCentralized, Regime::kLocalized, Regime::kStatic, Regime::kStaticReinit, Regime::kFcm}) {
    if (RegimeName(r) == name) return r;
  }
  throw InputError("unknown regime '" + name + "'");
}

std::string MemoryName(GraphMemory memory) {
  return memory == GraphMemory::kRoundOnly ? "round_only" : "cumulative";
}

GraphMemory ParseMemory(const std::string& name) {
  if (name == "round_only") return GraphMemory::kRoundOnly;
  if (name == "cumulative") return GraphMemory::kCumulative;
  throw InputError("unknown graph memory '" + name + "'");
}

std::vector<std::size_t> SampleClients(std::span<const partition::ClientSpec> clients, const Schedule& schedule,
                                       int round, Rng& rng) {
  if (schedule.participants < 1) throw InputError("participants per round must be at least 1");
  std::vector<std::size_t> initial, late;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    (clients[i].cohort == partition::Cohort::kInitial ? initial : late).push_back(i);
  }
  const bool joined = round >= schedule.join_round;
  if (!joined) late.clear();
  if (initial.empty() && late.empty()) throw InputError("client pool is empty");
  const auto want = static_cast<std::size_t>(schedule.participants);
  std::size_t take_late = 0, take_initial = 0;
  if (late.empty()) {
    take_initial = std::min(want, initial.size());
  } else {
    take_initial = std::min(initial.size(), (want + 1) / 2);
    take_late = std::min(late.size(), want - take_initial);
    take_initial = std::min(initial.size(), want - take_late);
  }
  auto draw = [&](const std::vector<std::size_t>& pool, std::size_t k, std::vector<std::size_t>& out) {
    const auto perm = rng.Permutation(pool.size());
    for (std::size_t i = 0; i < k; ++i) out.push_back(pool[perm[i]]);
  };
  std::vector<std::size_t> out;
  draw(initial, take_initial, out);
  draw(late, take_late, out);
  std::sort(out.begin(), out.end());
  return out;
}

ModuleUpdate LocalUpdate(const partition::ClientShard& shard, const model::SharedModel& broadcast,
                         const std::map<std::string, int>& columns, const LocalOptions& options, Rng& rng) {
  const auto& arch = broadcast.arch();
  std::set<std::string> supervised;
  for (const auto& c : shard.spec.supervised) {
    if (arch.HasConcept(c)) {
      supervised.insert(c);
    } else if (!options.restrict_to_model) {
      throw ProtocolError("client " + std::to_string(shard.spec.id) + " supervises '" + c +
                          "' but the broadcast model has no module for it");
    }
  }
  const bool has_task = shard.spec.has_task;

  ModuleUpdate update;
  update.client_id = shard.spec.id;
  update.n = shard.size();
  if (options.freeze_unsupervised) {
    update.trained = supervised;
    update.trained.insert(model::kEncoderId);
    if (has_task) update.trained.insert(model::kTaskId);
  } else {
    for (const auto& [id, m] : broadcast.modules()) update.trained.insert(id);
  }

  model::SharedModel local = broadcast;
  std::map<std::string, nn::AdamState> adam;
  for (const auto& id : update.trained) {
    adam[id] = nn::AdamState::Zeros(local.module(id).param_count(), options.lr);
  }
  const bool intervene = arch.kind != model::ModelKind::kOpaque && options.intervention_prob > 0.0;
  const auto batch_size = static_cast<std::size_t>(std::max(1, options.batch_size));
  std::vector<std::size_t> order(shard.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto step = [&](const std::map<std::string, std::vector<double>>& grads) {
    for (const auto& id : update.trained) {
      auto params = model::FlattenModule(local.module(id));
      nn::AdamStep(adam.at(id), params, grads.at(id));
      model::UnflattenModule(params, local.module(id));
    }
  };
  auto gradients = [&](const model::Batch& b, const model::Intervention& iv) {
    model::Tape tape;
    const auto out = local.Forward(b.x, iv, &tape);
    const auto loss = model::Loss(arch, out, b, columns, supervised, has_task, options.gamma);
    const auto g = local.Backward(tape, loss.d_concepts, loss.d_task);
    std::map<std::string, std::vector<double>> flat;
    for (const auto& id : update.trained) flat[id] = model::FlattenModule(g.modules.at(id));
    return flat;
  };

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.Shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const model::Batch b = model::Gather(shard.inputs, shard.concepts, shard.task, idx);
      model::Intervention iv;
      if (intervene) {
        for (const auto& c : supervised) {
          if (!rng.Bernoulli(options.intervention_prob)) continue;
          std::vector<int> v(idx.size());
          for (std::size_t r = 0; r < idx.size(); ++r) v[r] = b.concepts(static_cast<Eigen::Index>(r), columns.at(c));
          iv.Set(c, std::move(v));
        }
      }
      if (!options.dp.enabled) {
        step(gradients(b, iv));
        continue;
      }
      // DP-SGD: one gradient per sample, clipped jointly over all trained
      // modules, averaged and noised.
      std::vector<nn::Vector> per_sample;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::size_t one[] = {r};
        const model::Batch single = model::Gather(b.x, b.concepts, b.task, one);
        model::Intervention single_iv;
        for (const auto& [c, v] : iv.values) single_iv.Set(c, {v[r]});
        const auto g = gradients(single, single_iv);
        std::size_t total = 0;
        for (const auto& [id, v] : g) total += v.size();
        nn::Vector flat(static_cast<Eigen::Index>(total));
        Eigen::Index at = 0;
        for (const auto& [id, v] : g) {
          for (double x : v) flat(at++) = x;
        }
        per_sample.push_back(std::move(flat));
      }
      const nn::Vector noisy = nn::ClipAndNoise(per_sample, options.dp.clip, options.dp.sigma, rng);
      std::map<std::string, std::vector<double>> grads;
      Eigen::Index at = 0;
      for (const auto& id : update.trained) {
        auto& v = grads[id];
        v.resize(local.module(id).param_count());
        for (double& x : v) x = noisy(at++);
      }
      step(grads);
    }
  }
  for (const auto& id : update.trained) update.params[id] = model::FlattenModule(local.module(id));
  return update;
}

std::vector<double> AggregationWeights(std::span<const ModuleUpdate> updates, const std::string& module_id) {
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.trained.count(module_id)) total += static_cast<double>(u.n);
  }
  std::vector<double> beta;
  for (const auto& u : updates) {
    if (!u.trained.count(module_id)) continue;
    beta.push_back(total > 0.0 ? static_cast<double>(u.n) / total : 0.0);
  }
  return beta;
}

model::SharedModel ModuleWiseAggregate(std::span<const ModuleUpdate> updates, const model::SharedModel& broadcast) {
  for (const auto& u : updates) {
    for (const auto& id : u.trained) {
      if (!broadcast.modules().count(id)) {
        throw ProtocolError("update from client " + std::to_string(u.client_id) + " trains unknown module " + id);
      }
      if (!u.params.count(id)) throw ProtocolError("update lists " + id + " as trained but carries no values");
    }
  }
  model::SharedModel out = broadcast;
  for (const auto& [id, mod] : broadcast.modules()) {
    std::vector<const std::vector<double>*> values;
    for (const auto& u : updates) {
      if (!u.trained.count(id)) continue;
      const auto& v = u.params.at(id);
      if (v.size() != mod.param_count()) {
        throw ProtocolError("update from client " + std::to_string(u.client_id) + " has the wrong size for " + id);
      }
      values.push_back(&v);
    }
    if (values.empty()) continue;
    const auto beta = AggregationWeights(updates, id);
    // v_1 + sum_k beta_k (v_k - v_1): equal to the weighted mean, and exactly
    // v when every client sends the same v.
    std::vector<double> acc = *values[0];
    for (std::size_t k = 1; k < values.size(); ++k) {
      const auto& v = *values[k];
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += beta[k] * (v[i] - (*values[0])[i]);
    }
    model::UnflattenModule(acc, out.module(id));
  }
  return out;
}

const std::vector<std::string>& MetricsHeader() {
  static const std::vector<std::string> header = {
      "round",    "regime",   "model_kind", "seed",   "val_task_loss", "val_task_acc", "mean_concept_acc",
      "coverage", "n_params", "frac_params_changed", "wall_clock_s"};
  return header;
}

std::vector<std::string> MetricsCells(const MetricsRow& r) {
  return {std::to_string(r.round),
          r.regime,
          r.model_kind,
          std::to_string(r.seed),
          csv::FormatDouble(r.val_task_loss),
          csv::FormatDouble(r.val_task_acc),
          csv::FormatDouble(r.mean_concept_acc),
          csv::FormatDouble(r.coverage),
          std::to_string(r.n_params),
          csv::FormatDouble(r.frac_params_changed),
          csv::FormatDouble(r.wall_clock_s)};
}

void UpdateStructure(FederationState& state, const Context& ctx, std::span<const std::size_t> participants) {
  const auto& opt = ctx.options;
  const auto& data = *ctx.data;
  const auto& clients = *ctx.clients;
  const Regime regime = opt.schedule.regime;
  const int t = state.round;

  if (state.built && regime == Regime::kStatic) {
    if (!state.pre_join && t >= opt.schedule.join_round) state.pre_join = state.shadow = state.model;
    return;
  }
  const bool join_now = state.built && !state.pre_join && t >= opt.schedule.join_round;
  if (join_now) state.pre_join = state.shadow = state.model;

  // M_t grows by the participants' supervised concepts, in dataset order.
  std::set<std::string> have(state.concepts.begin(), state.concepts.end());
  std::set<std::string> incoming;
  for (std::size_t k : participants) {
    for (const auto& c : clients[k].spec.supervised) {
      if (!have.count(c)) incoming.insert(c);
    }
  }
  for (const auto& c : data.concept_names) {
    if (incoming.count(c)) state.concepts.push_back(c);
  }

  if (model::IsGraphBased(opt.kind)) {
    for (std::size_t k : participants) {
      const auto& s = clients[k].spec;
      state.proposals[s.id] = {graph::FromAdjacency(s.subgraph), static_cast<double>(clients[k].size())};
    }
    std::vector<graph::Proposal> use;
    if (opt.memory == GraphMemory::kCumulative) {
      for (const auto& [id, p] : state.proposals) use.push_back(p);
    } else {
      for (std::size_t k : participants) use.push_back(state.proposals.at(clients[k].spec.id));
    }
    std::vector<std::string> nodes = state.concepts;
    nodes.push_back(data.task);
    Rng ties = Stream(opt, "graph", static_cast<std::uint64_t>(t));
    state.graph = graph::Aggregate(use, ties, nodes);
  } else {
    std::vector<std::string> nodes = state.concepts;
    nodes.push_back(data.task);
    state.graph = Digraph(nodes);
  }

  const auto target = TargetArchitecture(ctx, state.concepts, state.graph);
  Rng adapt = Stream(opt, "adapt", static_cast<std::uint64_t>(t));
  if (!state.built) {
    Rng init = Stream(opt, "init", 0);
    state.model = model::SharedModel::Build(target, init);
    state.built = true;
    if (t >= opt.schedule.join_round) state.pre_join = state.shadow = state.model;
  } else if (!SameStructure(state.model.arch(), target)) {
    Rng adapt_shadow = adapt;
    state.model = state.model.Adapt(target, adapt);
    if (state.shadow) state.shadow = state.shadow->Adapt(target, adapt_shadow);
  }
  if (join_now && regime == Regime::kStaticReinit) {
    Rng reinit = Stream(opt, "reinit", static_cast<std::uint64_t>(t));
    state.model = state.model.Reinitialized(reinit);
    state.shadow = state.model;
  }
}

double StructuralChangeFraction(const FederationState& state) {
  if (!state.pre_join || !state.shadow) return 0.0;
  return model::FractionParamsChanged(*state.pre_join, *state.shadow);
}

MetricsRow RunRound(FederationState& state, const Context& ctx) {
  const auto& opt = ctx.options;
  const auto& clients = *ctx.clients;
  std::vector<partition::ClientSpec> specs;
  for (const auto& c : clients) specs.push_back(c.spec);
  Rng sample = Stream(opt, "sample", static_cast<std::uint64_t>(state.round));
  const auto participants = SampleClients(specs, opt.schedule, state.round, sample);
  state.last_participants = participants;
  UpdateStructure(state, ctx, participants);

  LocalOptions local = opt.local;
  local.restrict_to_model = opt.schedule.regime == Regime::kStatic;
  const auto columns = ConceptColumns(*ctx.data);
  std::vector<ModuleUpdate> updates;
  for (std::size_t k : participants) {
    Rng rng = Stream(opt, "local", static_cast<std::uint64_t>(state.round) * 100003u +
                                       static_cast<std::uint64_t>(clients[k].spec.id));
    updates.push_back(LocalUpdate(clients[k], state.model, columns, local, rng));
  }
  state.model = ModuleWiseAggregate(updates, state.model);

  const auto m = eval::Evaluate(state.model, *ctx.data, ctx.data->split.val, *ctx.truth);
  MetricsRow row;
  row.round = state.round;
  row.regime = RegimeName(opt.schedule.regime);
  row.model_kind = model::KindName(opt.kind);
  row.seed = opt.seed;
  row.val_task_loss = m.task_loss;
  row.val_task_acc = m.task_acc;
  row.mean_concept_acc = m.concept_acc;
  row.coverage = m.coverage;
  row.n_params = state.model.param_count();
  row.frac_params_changed = StructuralChangeFraction(state);
  ++state.round;
  return row;
}

partition::ClientShard CentralShard(const data::EncodedDataset& data, const Digraph& truth) {
  partition::ClientShard shard;
  shard.spec.id = 0;
  shard.spec.has_task = true;
  shard.spec.cohort = partition::Cohort::kInitial;
  shard.spec.supervised = {data.concept_names.begin(), data.concept_names.end()};
  shard.spec.subgraph = truth;
  shard.spec.rows = data.split.train;
  const auto b = model::Gather(data.inputs, data.concepts, data.task_labels, data.split.train);
  shard.inputs = b.x;
  shard.concepts = b.concepts;
  shard.task = b.task;
  return shard;
}

namespace {

// Stops once the validation loss has not improved for `patience` rounds,
// counting from `from_round`. improved() tells whether the last update set a
// new best, so callers can snapshot the model to return.
class EarlyStop {
 public:
  EarlyStop(int patience, int from_round) : patience_(patience), from_(from_round) {}
  bool Update(int round, double loss) {
    improved_ = false;
    if (round < from_) return false;
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      improved_ = true;
      return false;
    }
    return patience_ > 0 && ++stale_ >= patience_;
  }
  bool improved() const { return improved_; }

 private:
  bool improved_ = false;
  int patience_;
  int from_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

void StartMetrics(const std::optional<std::filesystem::path>& file) {
  if (!file) return;
  std::filesystem::remove(*file);
  AppendRow(*file, MetricsHeader());
}

using Clock = std::chrono::steady_clock;

double Elapsed(const TrainOptions& opt, Clock::time_point start) {
  if (!opt.record_wall_clock) return 0.0;
  return std::chrono::duration<double>(Clock::now() - start).count();
}

RunResult RunFederated(const data::EncodedDataset& data, const Digraph& truth,
                       const std::vector<partition::ClientShard>& clients, const TrainOptions& opt,
                       const std::optional<std::filesystem::path>& metrics_file) {
  const auto start = Clock::now();
  Context ctx{&data, &truth, &clients, opt};
  FederationState state;
  RunResult result;
  StartMetrics(metrics_file);
  const int from = opt.schedule.regime == Regime::kCentralized ? 0 : opt.schedule.join_round;
  EarlyStop stop(opt.schedule.patience, from);
  std::optional<model::SharedModel> best;
  double best_frac = 0.0;
  for (int t = 0; t < opt.schedule.total_rounds; ++t) {
    MetricsRow row = RunRound(state, ctx);
    row.wall_clock_s = Elapsed(opt, start);
    if (metrics_file) AppendRow(*metrics_file, MetricsCells(row));
    result.metrics.push_back(row);
    const bool done = stop.Update(t, row.val_task_loss);
    if (stop.improved()) {
      best = state.model;
      best_frac = row.frac_params_changed;
      result.best_round = t;
    }
    if (done) break;
  }
  if (!state.built) {
    std::vector<partition::ClientSpec> specs;
    for (const auto& c : clients) specs.push_back(c.spec);
    Rng sample = Stream(opt, "sample", 0);
    UpdateStructure(state, ctx, SampleClients(specs, opt.schedule, 0, sample));
  }
  result.rounds_run = state.round;
  if (!best) {
    best = state.model;
    best_frac = StructuralChangeFraction(state);
    result.best_round = state.round - 1;
  }
  result.frac_params_changed = best_frac;
  result.test = eval::Evaluate(*best, data, data.split.test, truth);
  result.models.push_back({"shared", *best});
  result.predicts_task.push_back(true);
  return result;
}

RunResult RunLocalized(const data::EncodedDataset& data, const Digraph& truth,
                       const std::vector<partition::ClientShard>& clients, const TrainOptions& opt,
                       const std::optional<std::filesystem::path>& metrics_file) {
  const auto start = Clock::now();
  const auto columns = ConceptColumns(data);
  std::vector<model::SharedModel> models;
  for (const auto& c : clients) {
    std::vector<std::string> concepts;
    for (const auto& name : data.concept_names) {
      if (c.spec.supervised.count(name)) concepts.push_back(name);
    }
    Context ctx{&data, &truth, &clients, opt};
    const auto arch = TargetArchitecture(ctx, concepts, c.spec.subgraph);
    Rng init = Stream(opt, "init", static_cast<std::uint64_t>(c.spec.id));
    models.push_back(model::SharedModel::Build(arch, init));
  }
  RunResult result;
  StartMetrics(metrics_file);
  EarlyStop stop(opt.schedule.patience, 0);
  std::vector<model::SharedModel> best = models;
  int t = 0;
  for (; t < opt.schedule.total_rounds; ++t) {
    std::vector<double> loss, acc, cacc, cov;
    std::size_t params = 0;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      Rng rng = Stream(opt, "local", static_cast<std::uint64_t>(t) * 100003u +
                                         static_cast<std::uint64_t>(clients[k].spec.id));
      const auto u = LocalUpdate(clients[k], models[k], columns, opt.local, rng);
      models[k] = ModuleWiseAggregate(std::span(&u, 1), models[k]);
      const auto m = eval::Evaluate(models[k], data, data.split.val, truth, clients[k].spec.has_task);
      if (clients[k].spec.has_task) loss.push_back(m.task_loss);
      acc.push_back(m.task_acc);
      cacc.push_back(m.concept_acc);
      cov.push_back(m.coverage);
      params += models[k].param_count();
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    MetricsRow row;
    row.round = t;
    row.regime = RegimeName(Regime::kLocalized);
    row.model_kind = model::KindName(opt.kind);
    row.seed = opt.seed;
    row.val_task_loss = mean(loss);
    row.val_task_acc = mean(acc);
    row.mean_concept_acc = mean(cacc);
    row.coverage = mean(cov);
    row.n_params = params / std::max<std::size_t>(1, clients.size());
    row.wall_clock_s = Elapsed(opt, start);
    if (metrics_file) AppendRow(*metrics_file, MetricsCells(row));
    result.metrics.push_back(row);
    const bool done = stop.Update(t, row.val_task_loss);
    if (stop.improved()) {
      best = models;
      result.best_round = t;
    }
    if (done) {
      ++t;
      break;
    }
  }
  result.rounds_run = t;
  models = std::move(best);
  eval::Metrics total;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto m = eval::Evaluate(models[k], data, data.split.test, truth, clients[k].spec.has_task);
    total.task_loss += m.task_loss;
    total.task_acc += m.task_acc;
    total.concept_acc += m.concept_acc;
    total.coverage += m.coverage;
    result.models.push_back({"client_" + std::to_string(clients[k].spec.id), models[k]});
    result.predicts_task.push_back(clients[k].spec.has_task);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, clients.size()));
  total.task_loss /= n;
  total.task_acc /= n;
  total.concept_acc /= n;
  total.coverage /= n;
  result.test = total;
  return result;
}

}  // namespace

RunResult RunRegime(Regime regime, const data::EncodedDataset& data, const Digraph& truth,
                    const std::vector<partition::ClientShard>& clients, TrainOptions options,
                    const std::optional<std::filesystem::path>& metrics_file) {
  options.schedule.regime = regime;
  options.dims.input = static_cast<int>(data.inputs.cols());
  switch (regime) {
    case Regime::kCentralized: {
      const std::vector<partition::ClientShard> pooled = {CentralShard(data, truth)};
      options.schedule.participants = 1;
      return RunFederated(data, truth, pooled, options, metrics_file);
    }
    case Regime::kLocalized:
      if (clients.empty()) throw InputError("localized training needs clients");
      return RunLocalized(data, truth, clients, options, metrics_file);
    case Regime::kStatic:
    case Regime::kStaticReinit:
    case Regime::kFcm:
      if (clients.empty()) throw InputError("federated training needs clients");
      return RunFederated(data, truth, clients, options, metrics_file);
  }
  throw InputError("unknown regime");
}

}  // namespace fcm::fed
