#include "fcm/config.hpp"

#include <fstream>
#include <set>

#include "fcm/error.hpp"

namespace fcm {

using nlohmann::json;
using nlohmann::ordered_json;

void Config::Validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InputError("config: " + what);
  };
  require(n_samples >= 0, "n_samples must be non-negative");
  require(latent_dim >= 0, "latent_dim must be non-negative");
  require(noise_mix >= 0.0 && noise_mix <= 1.0, "noise_mix must lie in [0, 1]");
  require(n_clients >= 1, "n_clients must be at least 1");
  require(participants_per_round >= 1, "participants_per_round must be at least 1");
  require(join_round >= 0, "join_round must be non-negative");
  require(rounds >= 0, "rounds must be non-negative");
  require(local_epochs >= 0, "local_epochs must be non-negative");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
  require(lr > 0.0, "lr must be positive");
  require(intervention_prob >= 0.0 && intervention_prob <= 1.0, "intervention_prob must lie in [0, 1]");
  require(encoder_hidden >= 1 && z_dim >= 1 && hidden_dim >= 1 && embedding_dim >= 1, "widths must be positive");
  require(task_drop_rate >= 0.0 && task_drop_rate <= 1.0, "task_drop_rate must lie in [0, 1]");
  require(late_concept_fraction >= 0.0 && late_concept_fraction < 1.0, "late_concept_fraction must lie in [0, 1)");
  require(dp.clip > 0.0 && dp.sigma >= 0.0, "dp clip must be positive and sigma non-negative");
  require(graph.perturb_p >= 0.0 && graph.perturb_p <= 1.0, "graph.perturb_p must lie in [0, 1]");
  require(graph.perturb_rate >= 0.0 && graph.perturb_rate <= 1.0, "graph.perturb_rate must lie in [0, 1]");
  (void)fed::ParseRegime(regime);
  (void)model::ParseKind(model_kind);
  (void)fed::ParseMemory(graph.memory);
}

std::uint64_t Config::DataSeed() const { return data_seed < 0 ? seed : static_cast<std::uint64_t>(data_seed); }

std::uint64_t Config::PartitionSeed() const {
  return partition_seed < 0 ? seed : static_cast<std::uint64_t>(partition_seed);
}

int Config::SampleCount() const {
  return n_samples > 0 ? n_samples : static_cast<int>(data::DefaultsFor(dataset).n_samples);
}

int Config::LatentDim() const { return latent_dim > 0 ? latent_dim : data::DefaultsFor(dataset).latent_dim; }

data::SynthesisOptions Config::Synthesis() const {
  data::SynthesisOptions s;
  s.latent_dim = LatentDim();
  s.noise_mix = noise_mix;
  s.epochs = synthesis_epochs;
  return s;
}

partition::FederationOptions Config::Federation() const {
  partition::FederationOptions f;
  f.n_clients = n_clients;
  f.task_drop_rate = task_drop_rate;
  f.perturb_rate = graph.perturb_rate;
  f.perturb_p = graph.perturb_p;
  f.extra_nodes = extra_nodes;
  f.late_concept_fraction = late_concept_fraction;
  return f;
}

fed::TrainOptions Config::Training() const {
  fed::TrainOptions t;
  t.kind = model::ParseKind(model_kind);
  t.dims.encoder_hidden = encoder_hidden;
  t.dims.latent = z_dim;
  t.dims.hidden = hidden_dim;
  t.dims.embedding = embedding_dim;
  t.schedule.total_rounds = rounds;
  t.schedule.participants = participants_per_round;
  t.schedule.join_round = join_round;
  t.schedule.patience = patience;
  t.schedule.regime = fed::ParseRegime(regime);
  t.local.epochs = local_epochs;
  t.local.batch_size = batch_size;
  t.local.lr = lr;
  t.local.gamma = gamma;
  t.local.intervention_prob = intervention_prob;
  t.local.freeze_unsupervised = freeze_unsupervised;
  t.local.dp = {dp.enabled, dp.clip, dp.sigma};
  t.memory = fed::ParseMemory(graph.memory);
  t.record_wall_clock = record_wall_clock;
  t.seed = seed;
  return t;
}

ordered_json ToJson(const Config& c) {
  ordered_json j;
  j["dataset"] = c.dataset;
  j["data_dir"] = c.data_dir;
  j["manifest"] = c.manifest;
  j["n_samples"] = c.n_samples;
  j["latent_dim"] = c.latent_dim;
  j["noise_mix"] = c.noise_mix;
  j["synthesis_epochs"] = c.synthesis_epochs;
  j["n_clients"] = c.n_clients;
  j["participants_per_round"] = c.participants_per_round;
  j["join_round"] = c.join_round;
  j["rounds"] = c.rounds;
  j["local_epochs"] = c.local_epochs;
  j["batch_size"] = c.batch_size;
  j["patience"] = c.patience;
  j["gamma"] = c.gamma;
  j["lr"] = c.lr;
  j["intervention_prob"] = c.intervention_prob;
  j["freeze_unsupervised"] = c.freeze_unsupervised;
  j["encoder_hidden"] = c.encoder_hidden;
  j["z_dim"] = c.z_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["embedding_dim"] = c.embedding_dim;
  j["task_drop_rate"] = c.task_drop_rate;
  j["late_concept_fraction"] = c.late_concept_fraction;
  j["extra_nodes"] = c.extra_nodes;
  j["regime"] = c.regime;
  j["model_kind"] = c.model_kind;
  j["dp"] = {{"enabled", c.dp.enabled}, {"clip", c.dp.clip}, {"sigma", c.dp.sigma}};
  j["graph"] = {{"memory", c.graph.memory}, {"perturb_p", c.graph.perturb_p}, {"perturb_rate", c.graph.perturb_rate}};
  j["seed"] = c.seed;
  j["data_seed"] = c.data_seed;
  j["partition_seed"] = c.partition_seed;
  j["record_wall_clock"] = c.record_wall_clock;
  return j;
}

namespace {

template <typename T>
void Take(const json& doc, const char* key, T& field) {
  auto it = doc.find(key);
  if (it != doc.end()) field = it->get<T>();
}

void RejectUnknown(const json& doc, const std::set<std::string>& known, const std::string& where) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!known.count(it.key())) throw DataError("config: unknown key '" + where + it.key() + "'");
  }
}

}  // namespace

Config ConfigFromJson(const json& doc, Config c) {
  if (!doc.is_object()) throw DataError("config: expected a JSON object");
  std::set<std::string> known;
  const json defaults = ToJson(c);
  for (auto it = defaults.begin(); it != defaults.end(); ++it) known.insert(it.key());
  RejectUnknown(doc, known, "");
  try {
    Take(doc, "dataset", c.dataset);
    Take(doc, "data_dir", c.data_dir);
    Take(doc, "manifest", c.manifest);
    Take(doc, "n_samples", c.n_samples);
    Take(doc, "latent_dim", c.latent_dim);
    Take(doc, "noise_mix", c.noise_mix);
    Take(doc, "synthesis_epochs", c.synthesis_epochs);
    Take(doc, "n_clients", c.n_clients);
    Take(doc, "participants_per_round", c.participants_per_round);
    Take(doc, "join_round", c.join_round);
    Take(doc, "rounds", c.rounds);
    Take(doc, "local_epochs", c.local_epochs);
    Take(doc, "batch_size", c.batch_size);
    Take(doc, "patience", c.patience);
    Take(doc, "gamma", c.gamma);
    Take(doc, "lr", c.lr);
    Take(doc, "intervention_prob", c.intervention_prob);
    Take(doc, "freeze_unsupervised", c.freeze_unsupervised);
    Take(doc, "encoder_hidden", c.encoder_hidden);
    Take(doc, "z_dim", c.z_dim);
    Take(doc, "hidden_dim", c.hidden_dim);
    Take(doc, "embedding_dim", c.embedding_dim);
    Take(doc, "task_drop_rate", c.task_drop_rate);
    Take(doc, "late_concept_fraction", c.late_concept_fraction);
    Take(doc, "extra_nodes", c.extra_nodes);
    Take(doc, "regime", c.regime);
    Take(doc, "model_kind", c.model_kind);
    if (auto it = doc.find("dp"); it != doc.end()) {
      RejectUnknown(*it, {"enabled", "clip", "sigma"}, "dp.");
      Take(*it, "enabled", c.dp.enabled);
      Take(*it, "clip", c.dp.clip);
      Take(*it, "sigma", c.dp.sigma);
    }
    if (auto it = doc.find("graph"); it != doc.end()) {
      RejectUnknown(*it, {"memory", "perturb_p", "perturb_rate"}, "graph.");
      Take(*it, "memory", c.graph.memory);
      Take(*it, "perturb_p", c.graph.perturb_p);
      Take(*it, "perturb_rate", c.graph.perturb_rate);
    }
    Take(doc, "seed", c.seed);
    Take(doc, "data_seed", c.data_seed);
    Take(doc, "partition_seed", c.partition_seed);
    Take(doc, "record_wall_clock", c.record_wall_clock);
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  return c;
}

Config LoadConfig(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open config " + file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return ConfigFromJson(doc);
}

void SaveConfig(const Config& config, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << ToJson(config).dump(2) << '\n';
}

}  // namespace fcm
