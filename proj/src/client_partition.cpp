#include "fcm/client_partition.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "fcm/error.hpp"

namespace fcm::partition {

using nlohmann::json;

namespace {

constexpr int kMaxRetries = 100;

// Number of root-to-node paths, saturating at `cap`.
std::vector<double> CountRootPaths(const Digraph& dag, double cap) {
  std::vector<double> count(dag.size(), 0.0);
  for (int u : dag.TopologicalOrder()) {
    const auto parents = dag.Parents(u);
    if (parents.empty()) {
      count[static_cast<std::size_t>(u)] = 1.0;
      continue;
    }
    double c = 0.0;
    for (int p : parents) c += count[static_cast<std::size_t>(p)];
    count[static_cast<std::size_t>(u)] = std::min(c, cap);
  }
  return count;
}

void EnumerateUpward(const Digraph& dag, int node, std::vector<int>& path,
                     std::vector<std::vector<int>>& out) {
  path.push_back(node);
  const auto parents = dag.Parents(node);
  if (parents.empty()) {
    out.push_back(path);
  } else {
    for (int p : parents) EnumerateUpward(dag, p, path, out);
  }
  path.pop_back();
}

std::vector<int> RandomUpwardWalk(const Digraph& dag, int node, Rng& rng) {
  std::vector<int> path{node};
  while (true) {
    const auto parents = dag.Parents(path.back());
    if (parents.empty()) return path;
    path.push_back(parents[rng.Index(parents.size())]);
  }
}

void CollectPaths(const Digraph& dag, int anchor, int paths_per_anchor,
                  const std::vector<double>& counts, Rng& rng, std::set<std::string>& nodes) {
  std::vector<std::vector<int>> paths;
  if (counts[static_cast<std::size_t>(anchor)] <= paths_per_anchor) {
    std::vector<int> scratch;
    EnumerateUpward(dag, anchor, scratch, paths);
  } else {
    std::set<std::vector<int>> distinct;
    for (int attempt = 0; attempt < kMaxRetries &&
                          static_cast<int>(distinct.size()) < paths_per_anchor;
         ++attempt) {
      distinct.insert(RandomUpwardWalk(dag, anchor, rng));
    }
    paths.assign(distinct.begin(), distinct.end());
  }
  for (const auto& path : paths) {
    for (int v : path) nodes.insert(dag.Name(v));
  }
}

}  // namespace

const char* CohortName(Cohort cohort) {
  return cohort == Cohort::kInitial ? "initial" : "late";
}

Cohort ParseCohort(const std::string& name) {
  if (name == "initial") return Cohort::kInitial;
  if (name == "late") return Cohort::kLate;
  throw DataError("unknown cohort '" + name + "'");
}

Digraph BuildSubgraph(const Digraph& dag, const std::string& task, int extra_nodes, Rng& rng,
                      int paths_per_anchor) {
  if (!dag.HasNode(task)) throw InputError("BuildSubgraph: task '" + task + "' not in graph");
  if (paths_per_anchor < 1) throw InputError("BuildSubgraph: need at least one path per anchor");
  const auto counts = CountRootPaths(dag, 1e9);
  std::set<std::string> nodes;
  CollectPaths(dag, dag.Index(task), paths_per_anchor, counts, rng, nodes);

  std::vector<int> candidates;
  const int task_index = dag.Index(task);
  for (std::size_t i = 0; i < dag.size(); ++i) {
    const int v = static_cast<int>(i);
    if (v != task_index && !dag.Parents(v).empty()) candidates.push_back(v);
  }
  rng.Shuffle(candidates);
  const auto n_extra = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, extra_nodes)),
                                             candidates.size());
  for (std::size_t i = 0; i < n_extra; ++i) {
    CollectPaths(dag, candidates[i], paths_per_anchor, counts, rng, nodes);
  }
  return dag.Induced(nodes);
}

Digraph PerturbGraph(const Digraph& g, double edge_fraction, Rng& rng,
                     std::optional<EdgeOp> forced) {
  if (edge_fraction < 0.0 || edge_fraction > 1.0) {
    throw InputError("PerturbGraph: edge fraction must lie in [0, 1]");
  }
  Digraph out = g;
  const auto attempts =
      static_cast<int>(std::floor(edge_fraction * static_cast<double>(g.edge_count())));
  const int n = static_cast<int>(g.size());
  for (int a = 0; a < attempts; ++a) {
    for (int retry = 0; retry < kMaxRetries; ++retry) {
      const EdgeOp op = forced ? *forced : static_cast<EdgeOp>(rng.Index(3));
      const std::vector<Digraph::Edge> edges(out.edges().begin(), out.edges().end());
      if (op == EdgeOp::kRemove) {
        if (edges.empty()) continue;
        const auto [u, v] = edges[rng.Index(edges.size())];
        out.RemoveEdge(u, v);
        break;
      }
      if (op == EdgeOp::kFlip) {
        if (edges.empty()) continue;
        const auto [u, v] = edges[rng.Index(edges.size())];
        Digraph trial = out;
        trial.RemoveEdge(u, v);
        trial.AddEdge(v, u);
        if (!trial.IsAcyclic()) continue;
        out = std::move(trial);
        break;
      }
      std::vector<Digraph::Edge> absent;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          if (u != v && !out.HasEdge(u, v)) absent.emplace_back(u, v);
        }
      }
      if (absent.empty()) continue;
      const auto [u, v] = absent[rng.Index(absent.size())];
      Digraph trial = out;
      trial.AddEdge(u, v);
      if (!trial.IsAcyclic()) continue;
      out = std::move(trial);
      break;
    }
  }
  return out;
}

std::vector<ClientSpec> MakeFederationSpecs(const data::EncodedDataset& dataset,
                                            const Digraph& dag,
                                            const FederationOptions& options, Rng& rng) {
  if (options.n_clients < 1) throw InputError("federation needs at least one client");
  const int n = options.n_clients;
  const int n_initial =
      options.n_initial < 0 ? (n + 1) / 2 : std::clamp(options.n_initial, 1, n);
  const std::string& task = dataset.task;
  for (const auto& c : dataset.concept_names) {
    if (!dag.HasNode(c)) throw InputError("concept '" + c + "' missing from the graph");
  }
  if (!dag.HasNode(task)) throw InputError("task '" + task + "' missing from the graph");

  std::vector<ClientSpec> specs;
  bool covered = false;
  for (int attempt = 0; attempt < kMaxRetries && !covered; ++attempt) {
    Rng round = rng.Fork("coverage-attempt", static_cast<std::uint64_t>(attempt));
    specs.assign(static_cast<std::size_t>(n), ClientSpec{});

    // Concepts only the late cohort can introduce.
    std::set<std::string> late_only;
    if (n_initial < n && options.late_concept_fraction > 0.0) {
      std::vector<std::string> pool = dataset.concept_names;
      round.Shuffle(pool);
      const auto k = static_cast<std::size_t>(std::lround(
          options.late_concept_fraction * static_cast<double>(pool.size())));
      late_only.insert(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(k, pool.size())));
    }
    std::set<std::string> initial_nodes;
    for (const auto& v : dag.nodes()) {
      if (!late_only.count(v)) initial_nodes.insert(v);
    }
    const Digraph initial_dag = dag.Induced(initial_nodes);

    std::vector<Digraph> graphs;
    for (int k = 0; k < n; ++k) {
      const bool initial = k < n_initial;
      graphs.push_back(BuildSubgraph(initial ? initial_dag : dag, task, options.extra_nodes,
                                     round, options.paths_per_anchor));
    }

    // Task supervision: drop from a fraction, keeping it in each cohort.
    std::vector<bool> keeps(static_cast<std::size_t>(n), true);
    auto order = round.Permutation(static_cast<std::size_t>(n));
    const auto n_drop = static_cast<std::size_t>(
        std::floor(options.task_drop_rate * static_cast<double>(n)));
    for (std::size_t i = 0; i < std::min(n_drop, order.size()); ++i) keeps[order[i]] = false;
    for (int cohort = 0; cohort < 2; ++cohort) {
      const int lo = cohort == 0 ? 0 : n_initial;
      const int hi = cohort == 0 ? n_initial : n;
      if (lo >= hi) continue;
      bool any = false;
      for (int k = lo; k < hi; ++k) any = any || keeps[static_cast<std::size_t>(k)];
      if (!any) keeps[static_cast<std::size_t>(lo + static_cast<int>(round.Index(static_cast<std::size_t>(hi - lo))))] = true;
    }

    std::set<std::string> union_nodes;
    for (int k = 0; k < n; ++k) {
      ClientSpec& spec = specs[static_cast<std::size_t>(k)];
      spec.id = k;
      spec.cohort = k < n_initial ? Cohort::kInitial : Cohort::kLate;
      std::set<std::string> nodes(graphs[static_cast<std::size_t>(k)].nodes().begin(),
                                  graphs[static_cast<std::size_t>(k)].nodes().end());
      nodes.erase(task);
      // Every client needs some supervision.
      spec.has_task = keeps[static_cast<std::size_t>(k)] || nodes.empty();
      spec.supervised = nodes;
      if (spec.has_task) nodes.insert(task);
      spec.subgraph = graphs[static_cast<std::size_t>(k)].Induced(nodes);
      union_nodes.insert(nodes.begin(), nodes.end());
    }
    covered = union_nodes.size() == dag.size();
  }
  if (!covered) {
    throw InputError("could not reach full concept/task coverage after " +
                     std::to_string(kMaxRetries) + " attempts");
  }

  Rng perturb = rng.Fork("perturb");
  auto order = perturb.Permutation(static_cast<std::size_t>(n));
  const auto n_perturbed = static_cast<std::size_t>(
      std::lround(options.perturb_rate * static_cast<double>(n)));
  for (std::size_t i = 0; i < std::min(n_perturbed, order.size()); ++i) {
    ClientSpec& spec = specs[order[i]];
    spec.subgraph = PerturbGraph(spec.subgraph, options.perturb_p, perturb);
  }

  Rng rows_rng = rng.Fork("rows");
  std::vector<std::size_t> rows = dataset.split.train;
  rows_rng.Shuffle(rows);
  const std::size_t base = rows.size() / static_cast<std::size_t>(n);
  const std::size_t extra = rows.size() % static_cast<std::size_t>(n);
  std::size_t offset = 0;
  for (int k = 0; k < n; ++k) {
    const std::size_t len = base + (static_cast<std::size_t>(k) < extra ? 1 : 0);
    auto& r = specs[static_cast<std::size_t>(k)].rows;
    r.assign(rows.begin() + static_cast<std::ptrdiff_t>(offset),
             rows.begin() + static_cast<std::ptrdiff_t>(offset + len));
    std::sort(r.begin(), r.end());
    offset += len;
  }
  return specs;
}

std::vector<ClientShard> MakeShards(const data::EncodedDataset& dataset,
                                    const std::vector<ClientSpec>& specs) {
  std::vector<ClientShard> shards;
  for (const auto& spec : specs) {
    if (spec.supervised.empty() && !spec.has_task) {
      throw DataError("client " + std::to_string(spec.id) + " has neither concept nor task supervision");
    }
    for (const auto& c : spec.supervised) dataset.ConceptIndex(c);
    ClientShard shard;
    shard.spec = spec;
    const auto m = static_cast<Eigen::Index>(spec.rows.size());
    shard.inputs.resize(m, dataset.inputs.cols());
    shard.concepts = Eigen::MatrixXi::Constant(m, dataset.concepts.cols(), nn::kMissing);
    shard.task.assign(spec.rows.size(), nn::kMissing);
    std::vector<bool> keep(dataset.concept_names.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
      keep[j] = spec.supervised.count(dataset.concept_names[j]) > 0;
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto r = static_cast<Eigen::Index>(spec.rows[static_cast<std::size_t>(i)]);
      if (r >= static_cast<Eigen::Index>(dataset.rows())) throw DataError("client row index out of range");
      shard.inputs.row(i) = dataset.inputs.row(r);
      for (std::size_t j = 0; j < keep.size(); ++j) {
        if (keep[j]) shard.concepts(i, static_cast<Eigen::Index>(j)) = dataset.concepts(r, static_cast<Eigen::Index>(j));
      }
      if (spec.has_task) shard.task[static_cast<std::size_t>(i)] = dataset.task_labels[static_cast<std::size_t>(r)];
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

std::vector<ClientShard> MakeFederation(const data::EncodedDataset& dataset, const Digraph& dag,
                                        const FederationOptions& options, Rng& rng) {
  return MakeShards(dataset, MakeFederationSpecs(dataset, dag, options, rng));
}

std::vector<std::pair<std::size_t, std::size_t>> ToRanges(std::vector<std::size_t> rows) {
  std::sort(rows.begin(), rows.end());
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r : rows) {
    if (!out.empty() && out.back().second == r) {
      ++out.back().second;
    } else {
      out.emplace_back(r, r + 1);
    }
  }
  return out;
}

void SaveManifest(const std::vector<ClientSpec>& specs, const std::filesystem::path& file) {
  json clients = json::array();
  for (const auto& s : specs) {
    json edges = json::array();
    for (const auto& [a, b] : s.subgraph.NamedEdges()) edges.push_back({a, b});
    json ranges = json::array();
    for (const auto& [lo, hi] : ToRanges(s.rows)) ranges.push_back({lo, hi});
    clients.push_back({{"id", s.id},
                       {"cohort", CohortName(s.cohort)},
                       {"has_task", s.has_task},
                       {"supervised", std::vector<std::string>(s.supervised.begin(), s.supervised.end())},
                       {"nodes", s.subgraph.nodes()},
                       {"edges", edges},
                       {"rows", ranges}});
  }
  std::ofstream out(file);
  if (!out) throw DataError("cannot write manifest " + file.string());
  out << json{{"clients", clients}}.dump(1) << '\n';
}

std::vector<ClientSpec> LoadManifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest " + file.string());
  std::vector<ClientSpec> specs;
  try {
    const json doc = json::parse(in);
    for (const auto& c : doc.at("clients")) {
      ClientSpec s;
      s.id = c.at("id").get<int>();
      s.cohort = ParseCohort(c.at("cohort").get<std::string>());
      s.has_task = c.at("has_task").get<bool>();
      for (const auto& name : c.at("supervised")) s.supervised.insert(name.get<std::string>());
      s.subgraph = Digraph(c.at("nodes").get<std::vector<std::string>>());
      for (const auto& e : c.at("edges")) s.subgraph.AddEdge(e.at(0).get<std::string>(), e.at(1).get<std::string>());
      for (const auto& r : c.at("rows")) {
        for (auto i = r.at(0).get<std::size_t>(); i < r.at(1).get<std::size_t>(); ++i) s.rows.push_back(i);
      }
      specs.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + file.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw DataError("invalid manifest " + file.string() + ": " + e.what());
  }
  return specs;
}

}  // namespace fcm::partition
