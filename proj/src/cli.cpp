#include "fcm/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "fcm/bayes_data.hpp"
#include "fcm/client_partition.hpp"
#include "fcm/config.hpp"
#include "fcm/csv.hpp"
#include "fcm/error.hpp"
#include "fcm/eval.hpp"
#include "fcm/federation.hpp"
#include "fcm/graph_agg.hpp"

namespace fcm {

namespace fs = std::filesystem;

namespace {

data::EncodedDataset LoadOrGenerate(const Config& c, data::BayesNet& net) {
  if (!c.data_dir.empty()) {
    auto d = data::LoadDataset(c.data_dir);
    net = data::LoadReferenceNetwork(d.network);
    return d;
  }
  net = data::LoadReferenceNetwork(c.dataset);
  Rng rng = Rng(c.DataSeed()).Fork("data");
  return data::GenerateDataset(net, static_cast<std::size_t>(c.SampleCount()), c.Synthesis(), rng);
}

std::vector<double> ParseList(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw InputError("not a number: '" + item + "'");
    }
  }
  return out;
}

std::string Percent(double mean, double sd) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * mean << "±" << 100.0 * sd;
  return os.str();
}

void WriteSummary(const fs::path& file, const Config& c, const fed::RunResult& r) {
  csv::Table t;
  t.header = {"regime",      "model_kind", "seed",   "test_task_acc",       "test_concept_acc",
              "coverage",    "test_task_loss", "rounds", "best_round", "frac_params_changed", "n_params"};
  std::size_t params = 0;
  for (const auto& [name, m] : r.models) params += m.param_count();
  params /= std::max<std::size_t>(1, r.models.size());
  t.rows.push_back({fed::RegimeName(fed::ParseRegime(c.regime)), c.model_kind, std::to_string(c.seed),
                    csv::FormatDouble(r.test.task_acc), csv::FormatDouble(r.test.concept_acc),
                    csv::FormatDouble(r.test.coverage), csv::FormatDouble(r.test.task_loss),
                    std::to_string(r.rounds_run), std::to_string(r.best_round), csv::FormatDouble(r.frac_params_changed), std::to_string(params)});
  csv::Write(file, t);
}

int Train(const Config& c, const fs::path& out_dir, std::ostream& out) {
  c.Validate();
  fs::create_directories(out_dir);
  SaveConfig(c, out_dir / "config.json");
  const Experiment w = PrepareExperiment(c);
  const auto regime = fed::ParseRegime(c.regime);
  const auto result = fed::RunRegime(regime, w.data, w.net.dag(), w.shards, c.Training(), out_dir / "metrics.csv");
  WriteSummary(out_dir / "summary.csv", c, result);
  fs::remove_all(out_dir / "models");
  csv::Table index;
  index.header = {"name", "predicts_task"};
  for (std::size_t i = 0; i < result.models.size(); ++i) {
    const auto& [name, m] = result.models[i];
    m.Save(out_dir / "models" / name);
    index.rows.push_back({name, result.predicts_task[i] ? "1" : "0"});
  }
  csv::Write(out_dir / "models" / "index.csv", index);
  out << "regime=" << c.regime << " model=" << c.model_kind << " seed=" << c.seed << " rounds=" << result.rounds_run
      << " test_task_acc=" << csv::FormatDouble(result.test.task_acc)
      << " coverage=" << csv::FormatDouble(result.test.coverage) << '\n';
  return 0;
}

int Intervene(const fs::path& run, const std::optional<fs::path>& out_file, std::ostream& out) {
  const Config c = LoadConfig(run / "config.json");
  const Experiment w = PrepareExperiment(c, false);
  const auto index = csv::Read(run / "models" / "index.csv");
  const std::size_t ni = index.Column("name"), pi = index.Column("predicts_task");
  std::vector<eval::InterventionCurve> curves;
  for (const auto& row : index.rows) {
    const auto m = model::SharedModel::Load(run / "models" / row[ni]);
    curves.push_back(eval::ComputeInterventionCurve(m, w.data, w.data.split.test, w.net.dag(), row[pi] == "1"));
  }
  if (curves.empty()) throw DataError("run " + run.string() + " has no models");
  csv::Table t;
  t.header = {"level", "label_accuracy", "task_accuracy", "impossible_fraction", "mean_intervened"};
  auto add = [&](int level, auto pick) {
    double label = 0, task = 0, impossible = 0, count = 0;
    for (const auto& cv : curves) {
      const eval::CurveLevel& l = pick(cv);
      label += l.label_accuracy;
      task += l.task_accuracy;
      impossible += l.impossible ? 1.0 : 0.0;
      count += static_cast<double>(l.intervened.size());
    }
    const double n = static_cast<double>(curves.size());
    t.rows.push_back({std::to_string(level), csv::FormatDouble(label / n), csv::FormatDouble(task / n),
                      csv::FormatDouble(impossible / n), csv::FormatDouble(count / n)});
  };
  add(-1, [](const eval::InterventionCurve& cv) -> const eval::CurveLevel& { return cv.baseline; });
  for (std::size_t l = 0; l < curves.front().levels.size(); ++l) {
    add(static_cast<int>(l), [l](const eval::InterventionCurve& cv) -> const eval::CurveLevel& { return cv.levels[l]; });
  }
  const fs::path target = out_file.value_or(run / "intervention.csv");
  csv::Write(target, t);
  for (const auto& r : t.rows) out << "level " << r[0] << ": label_acc=" << r[1] << " task_acc=" << r[2] << '\n';
  return 0;
}

int GraphAgg(const fs::path& manifest, const fs::path& out_file, std::uint64_t seed, std::ostream& out) {
  const auto specs = partition::LoadManifest(manifest);
  std::vector<graph::Proposal> proposals;
  for (const auto& s : specs) {
    proposals.push_back({graph::FromAdjacency(s.subgraph), static_cast<double>(std::max<std::size_t>(1, s.rows.size()))});
  }
  Rng rng = Rng(seed).Fork("graph");
  const Digraph g = graph::Aggregate(proposals, rng);
  graph::WriteEdgeList(g, out_file);
  out << g.size() << " nodes, " << g.edge_count() << " edges -> " << out_file.string() << '\n';
  return 0;
}

int Sweep(const std::string& network, const eval::SweepOptions& opt, std::uint64_t seed, const fs::path& out_file,
          std::ostream& out) {
  const auto net = data::LoadReferenceNetwork(network);
  const auto rows = eval::RobustnessSweep(net.dag(), net.task(), opt, seed);
  csv::Table t;
  t.header = {"p", "rate", "mean_diff_pairs", "std_diff_pairs", "local_mean_diff_pairs", "full_cover"};
  for (const auto& r : rows) {
    t.rows.push_back({csv::FormatDouble(r.p), csv::FormatDouble(r.rate), csv::FormatDouble(r.mean_diff),
                      csv::FormatDouble(r.std_diff), csv::FormatDouble(r.local_mean_diff),
                      csv::FormatDouble(r.full_cover)});
    out << "p=" << r.p << " rate=" << r.rate << " diff_pairs=" << r.mean_diff << '\n';
  }
  csv::Write(out_file, t);
  return 0;
}

int Report(const std::vector<std::string>& runs, const std::optional<fs::path>& out_file, std::ostream& out) {
  std::vector<csv::Table> tables;
  for (const auto& r : runs) {
    const fs::path p = fs::is_directory(r) ? fs::path(r) / "summary.csv" : fs::path(r);
    tables.push_back(csv::Read(p));
  }
  const auto rows = eval::Report(tables);
  if (out_file) csv::Write(*out_file, eval::ReportTable(rows));
  out << "regime,model_kind,runs,task_acc,concept_acc,coverage\n";
  for (const auto& r : rows) {
    auto cell = [&](const std::string& col) {
      auto it = r.stats.find(col);
      return it == r.stats.end() ? std::string("-") : Percent(it->second.first, it->second.second);
    };
    out << r.regime << ',' << r.model_kind << ',' << r.runs << ',' << cell("test_task_acc") << ','
        << cell("test_concept_acc") << ',' << cell("coverage") << '\n';
  }
  return 0;
}

}  // namespace

Experiment PrepareExperiment(const Config& c, bool with_shards) {
  Experiment w{.data = {}, .net = data::LoadReferenceNetwork(c.dataset), .shards = {}};
  w.data = LoadOrGenerate(c, w.net);
  if (!with_shards) return w;
  if (!c.manifest.empty()) {
    w.shards = partition::MakeShards(w.data, partition::LoadManifest(c.manifest));
  } else {
    Rng rng = Rng(c.PartitionSeed()).Fork("partition");
    w.shards = partition::MakeFederation(w.data, w.net.dag(), c.Federation(), rng);
  }
  return w;
}

int RunCli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated concept-based model experiments", "fcm"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Sample a reference network and synthesize inputs");
  std::string gen_net, gen_out;
  int gen_n = 0, gen_latent = 0, gen_epochs = 50;
  double gen_noise = 0.5;
  std::uint64_t gen_seed = 0;
  gen->add_option("network", gen_net, "asia|sachs|alarm|insurance|hailfinder")->required();
  gen->add_option("--n", gen_n, "Number of samples (default: network default)");
  gen->add_option("--latent", gen_latent, "Input width (default: network default)");
  gen->add_option("--noise-mix", gen_noise, "Weight of Gaussian noise in the inputs");
  gen->add_option("--epochs", gen_epochs, "Autoencoder epochs");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out)->required();

  // partition
  auto* part = app.add_subcommand("partition", "Split a dataset into client shards");
  std::string part_data, part_out;
  partition::FederationOptions part_opt;
  std::uint64_t part_seed = 0;
  part->add_option("--data", part_data, "Dataset directory from gen-data")->required();
  part->add_option("--clients", part_opt.n_clients);
  part->add_option("--perturb-p", part_opt.perturb_p);
  part->add_option("--perturb-rate", part_opt.perturb_rate);
  part->add_option("--task-drop", part_opt.task_drop_rate);
  part->add_option("--late-fraction", part_opt.late_concept_fraction);
  part->add_option("--extra-nodes", part_opt.extra_nodes);
  part->add_option("--seed", part_seed);
  part->add_option("--out", part_out, "Manifest JSON")->required();

  // train
  auto* train = app.add_subcommand("train", "Run one training regime");
  std::string cfg_file, train_out, regime, kind, data_dir, manifest, dataset, memory;
  std::uint64_t seed = 0;
  std::int64_t fixed_partition = -1;
  int rounds = 0, clients = 0, participants = 0, join = 0, epochs = 0, batch = 0, n = 0;
  double lr = 0, gamma = 0, sigma = 0, clip = 0;
  bool dp = false, no_freeze = false, wall = false;
  train->add_option("--config", cfg_file, "JSON config; flags override its keys");
  auto* o_regime = train->add_option("--regime", regime, "centralized|localized|static|static-reinit|fcm");
  auto* o_kind = train->add_option("--model", kind, "opaq|cbm|cem|cgm|c2bm");
  auto* o_seed = train->add_option("--seed", seed);
  train->add_option("--out", train_out, "Run directory")->required();
  auto* o_data = train->add_option("--data", data_dir, "Dataset directory from gen-data");
  auto* o_manifest = train->add_option("--manifest", manifest, "Manifest from partition");
  auto* o_dataset = train->add_option("--dataset", dataset, "Reference network when generating data");
  auto* o_n = train->add_option("--n", n, "Samples when generating data");
  auto* o_rounds = train->add_option("--rounds", rounds);
  auto* o_clients = train->add_option("--clients", clients);
  auto* o_part = train->add_option("--participants", participants);
  auto* o_join = train->add_option("--join-round", join);
  auto* o_epochs = train->add_option("--local-epochs", epochs);
  auto* o_batch = train->add_option("--batch-size", batch);
  auto* o_lr = train->add_option("--lr", lr);
  auto* o_gamma = train->add_option("--gamma", gamma);
  auto* o_dp = train->add_flag("--dp", dp, "Enable DP-SGD");
  auto* o_sigma = train->add_option("--dp-sigma", sigma);
  auto* o_clip = train->add_option("--dp-clip", clip);
  auto* o_memory = train->add_option("--graph-memory", memory, "round_only|cumulative");
  auto* o_fixed = train->add_option("--fixed-partition", fixed_partition, "Partition seed independent of --seed");
  auto* o_nofreeze = train->add_flag("--no-freeze", no_freeze, "Train unsupervised modules too");
  auto* o_wall = train->add_flag("--wall-clock", wall, "Record elapsed seconds in the metrics");

  // intervene
  auto* inter = app.add_subcommand("intervene", "Depth-level intervention curve of a finished run");
  std::string inter_run, inter_out;
  inter->add_option("--run", inter_run)->required();
  auto* o_inter_out = inter->add_option("--out", inter_out);

  // graph-agg
  auto* gagg = app.add_subcommand("graph-agg", "Aggregate the client graphs of a manifest");
  std::string gagg_manifest, gagg_out;
  std::uint64_t gagg_seed = 0;
  gagg->add_option("--manifest", gagg_manifest)->required();
  gagg->add_option("--out", gagg_out)->required();
  gagg->add_option("--seed", gagg_seed);

  // sweep-robustness
  auto* sweep = app.add_subcommand("sweep-robustness", "DiffPairs of aggregated graphs under perturbation");
  std::string sweep_net = "asia", sweep_p = "0,0.3,0.6,0.9", sweep_rates = "0,0.25,0.5,0.75,1", sweep_out;
  eval::SweepOptions sweep_opt;
  std::uint64_t sweep_seed = 0;
  sweep->add_option("--network", sweep_net);
  sweep->add_option("--p", sweep_p, "Comma-separated per-client edge fractions");
  sweep->add_option("--rates", sweep_rates, "Comma-separated corrupted-client rates");
  sweep->add_option("--seeds", sweep_opt.seeds);
  sweep->add_option("--clients", sweep_opt.n_clients);
  sweep->add_option("--seed", sweep_seed);
  sweep->add_option("--out", sweep_out)->required();

  // report
  auto* report = app.add_subcommand("report", "Mean and std of run summaries per regime and model");
  std::vector<std::string> report_runs;
  std::string report_out;
  report->add_option("--runs", report_runs, "Run directories or summary.csv files")->required();
  auto* o_report_out = report->add_option("--out", report_out);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      Config c;
      c.dataset = gen_net;
      c.n_samples = gen_n;
      c.latent_dim = gen_latent;
      c.noise_mix = gen_noise;
      c.synthesis_epochs = gen_epochs;
      c.seed = gen_seed;
      c.Validate();
      data::BayesNet net = data::LoadReferenceNetwork(gen_net);
      const auto d = LoadOrGenerate(c, net);
      data::SaveDataset(d, gen_out);
      out << d.rows() << " rows of " << gen_net << " -> " << gen_out << '\n';
      return 0;
    }
    if (part->parsed()) {
      const auto d = data::LoadDataset(part_data);
      const auto net = data::LoadReferenceNetwork(d.network);
      Rng rng = Rng(part_seed).Fork("partition");
      const auto specs = partition::MakeFederationSpecs(d, net.dag(), part_opt, rng);
      partition::SaveManifest(specs, part_out);
      out << specs.size() << " clients -> " << part_out << '\n';
      return 0;
    }
    if (train->parsed()) {
      Config c = cfg_file.empty() ? Config{} : LoadConfig(cfg_file);
      if (o_regime->count()) c.regime = regime;
      if (o_kind->count()) c.model_kind = kind;
      if (o_seed->count()) c.seed = seed;
      if (o_data->count()) c.data_dir = fs::absolute(data_dir).string();
      if (o_manifest->count()) c.manifest = fs::absolute(manifest).string();
      if (o_dataset->count()) c.dataset = dataset;
      if (o_n->count()) c.n_samples = n;
      if (o_rounds->count()) c.rounds = rounds;
      if (o_clients->count()) c.n_clients = clients;
      if (o_part->count()) c.participants_per_round = participants;
      if (o_join->count()) c.join_round = join;
      if (o_epochs->count()) c.local_epochs = epochs;
      if (o_batch->count()) c.batch_size = batch;
      if (o_lr->count()) c.lr = lr;
      if (o_gamma->count()) c.gamma = gamma;
      if (o_dp->count()) c.dp.enabled = dp;
      if (o_sigma->count()) c.dp.sigma = sigma;
      if (o_clip->count()) c.dp.clip = clip;
      if (o_memory->count()) c.graph.memory = memory;
      if (o_fixed->count()) c.partition_seed = fixed_partition;
      if (o_nofreeze->count()) c.freeze_unsupervised = !no_freeze;
      if (o_wall->count()) c.record_wall_clock = wall;
      return Train(c, train_out, out);
    }
    if (inter->parsed()) {
      return Intervene(inter_run, o_inter_out->count() ? std::optional<fs::path>(inter_out) : std::nullopt, out);
    }
    if (gagg->parsed()) return GraphAgg(gagg_manifest, gagg_out, gagg_seed, out);
    if (sweep->parsed()) {
      sweep_opt.p_values = ParseList(sweep_p);
      sweep_opt.rates = ParseList(sweep_rates);
      return Sweep(sweep_net, sweep_opt, sweep_seed, sweep_out, out);
    }
    if (report->parsed()) {
      return Report(report_runs, o_report_out->count() ? std::optional<fs::path>(report_out) : std::nullopt, out);
    }
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    err << "invalid input: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace fcm
