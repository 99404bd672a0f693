#include "fcm/graph_agg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "fcm/error.hpp"

namespace fcm::graph {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr std::size_t kMaxCycles = 5000;
constexpr std::size_t kMaxSearchSteps = 2000000;

// Simple cycles whose smallest node index is the start node; stops early at
// the caps (the result is then a subset).
std::vector<std::vector<int>> SimpleCycles(const Digraph& g) {
  std::vector<std::vector<int>> cycles;
  std::size_t steps = 0;
  const int n = static_cast<int>(g.size());
  std::vector<bool> on_path(static_cast<std::size_t>(n), false);
  std::vector<int> path;
  auto dfs = [&](auto&& self, int start, int v) -> void {
    if (cycles.size() >= kMaxCycles || ++steps > kMaxSearchSteps) return;
    for (int w : g.Children(v)) {
      if (w == start) {
        cycles.push_back(path);
      } else if (w > start && !on_path[static_cast<std::size_t>(w)]) {
        on_path[static_cast<std::size_t>(w)] = true;
        path.push_back(w);
        self(self, start, w);
        path.pop_back();
        on_path[static_cast<std::size_t>(w)] = false;
      }
    }
  };
  for (int s = 0; s < n; ++s) {
    path = {s};
    on_path[static_cast<std::size_t>(s)] = true;
    dfs(dfs, s, s);
    on_path[static_cast<std::size_t>(s)] = false;
  }
  return cycles;
}

}  // namespace

EdgeConfidence::EdgeConfidence(std::vector<std::string> names, nn::Matrix mat)
    : nodes(std::move(names)), s(std::move(mat)) {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  if (s.rows() != n || s.cols() != n) throw InputError("EdgeConfidence: matrix is not n x n");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (s(i, i) != 0.0) throw InputError("EdgeConfidence: non-zero diagonal");
    for (Eigen::Index j = 0; j < n; ++j) {
      if (s(i, j) < 0.0 || s(i, j) > 1.0) throw InputError("EdgeConfidence: entry outside [0,1]");
      if (i != j && s(i, j) + s(j, i) > 1.0 + 1e-12) {
        throw InputError("EdgeConfidence: S(i,j) + S(j,i) exceeds 1");
      }
    }
  }
}

EdgeConfidence FromAdjacency(const Digraph& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  nn::Matrix s = nn::Matrix::Zero(n, n);
  for (const auto& [a, b] : g.edges()) s(a, b) = 1.0;
  return EdgeConfidence(g.nodes(), std::move(s));
}

int StrengthTable::Index(const std::string& name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] == name) return static_cast<int>(i);
  }
  throw InputError("strength table has no node '" + name + "'");
}

StrengthTable Accumulate(std::span<const Proposal> proposals, std::vector<std::string> nodes) {
  if (nodes.empty()) {
    std::set<std::string> all;
    for (const auto& p : proposals) all.insert(p.confidence.nodes.begin(), p.confidence.nodes.end());
    nodes.assign(all.begin(), all.end());
  }
  StrengthTable t;
  t.nodes = std::move(nodes);
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < t.nodes.size(); ++i) index[t.nodes[i]] = static_cast<int>(i);
  const auto n = static_cast<Eigen::Index>(t.nodes.size());
  t.strength = nn::Matrix::Zero(n, n);
  t.none = nn::Matrix::Zero(n, n);
  t.observed = nn::Matrix::Zero(n, n);
  for (const auto& p : proposals) {
    if (!(p.weight > 0.0)) throw InputError("Accumulate: proposal weights must be positive");
    const auto& c = p.confidence;
    std::vector<int> global;
    for (const auto& name : c.nodes) {
      auto it = index.find(name);
      if (it == index.end()) throw InputError("Accumulate: node '" + name + "' not in the node list");
      global.push_back(it->second);
    }
    for (std::size_t a = 0; a < global.size(); ++a) {
      for (std::size_t b = 0; b < global.size(); ++b) {
        if (a == b) continue;
        const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
        const int ga = global[a], gb = global[b];
        t.strength(ga, gb) += p.weight * c.s(ia, ib);
        t.none(ga, gb) += p.weight * (1.0 - c.s(ia, ib) - c.s(ib, ia));
        t.observed(ga, gb) += p.weight;
      }
    }
  }
  return t;
}

Digraph DecideEdges(const StrengthTable& table, Rng& rng) {
  Digraph g(table.nodes);
  const int n = static_cast<int>(table.nodes.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (table.observed(i, j) <= 0.0) continue;
      const double vals[3] = {table.strength(i, j), table.strength(j, i), table.none(i, j)};
      const double best = std::max({vals[0], vals[1], vals[2]});
      const double tol = kTieTolerance * std::max(1.0, std::abs(best));
      std::vector<int> winners;
      for (int k = 0; k < 3; ++k) {
        if (vals[k] >= best - tol) winners.push_back(k);
      }
      const int pick = winners.size() == 1 ? winners[0] : winners[rng.Index(winners.size())];
      if (pick == 0) g.AddEdge(i, j);
      if (pick == 1) g.AddEdge(j, i);
    }
  }
  return g;
}

Digraph ProjectToDag(Digraph g, const StrengthTable& table) {
  auto strength_of = [&](const Digraph::Edge& e) {
    return table.strength(table.Index(g.Name(e.first)), table.Index(g.Name(e.second)));
  };
  auto weaker = [&](const Digraph::Edge& a, const Digraph::Edge& b) {
    const double sa = strength_of(a), sb = strength_of(b);
    if (sa != sb) return sa < sb;
    return std::tie(g.Name(a.first), g.Name(a.second)) < std::tie(g.Name(b.first), g.Name(b.second));
  };
  while (!g.IsAcyclic()) {
    auto cycles = SimpleCycles(g);
    if (cycles.empty()) cycles.push_back(*g.FindCycle());
    std::vector<std::set<Digraph::Edge>> cycle_edges;
    std::vector<Digraph::Edge> candidates;
    for (const auto& cyc : cycles) {
      std::set<Digraph::Edge> edges;
      Digraph::Edge weakest{cyc.back(), cyc.front()};
      for (std::size_t k = 0; k < cyc.size(); ++k) {
        const Digraph::Edge e{cyc[k], cyc[(k + 1) % cyc.size()]};
        edges.insert(e);
        if (weaker(e, weakest)) weakest = e;
      }
      cycle_edges.push_back(std::move(edges));
      candidates.push_back(weakest);
    }
    Digraph::Edge chosen = candidates.front();
    std::size_t chosen_hits = 0;
    for (const auto& cand : candidates) {
      std::size_t hits = 0;
      for (const auto& edges : cycle_edges) hits += edges.count(cand);
      if (hits > chosen_hits || (hits == chosen_hits && weaker(cand, chosen))) {
        chosen = cand;
        chosen_hits = hits;
      }
    }
    g.RemoveEdge(chosen.first, chosen.second);
  }
  return g;
}

Digraph Aggregate(std::span<const Proposal> proposals, Rng& rng, std::vector<std::string> nodes) {
  const StrengthTable table = Accumulate(proposals, std::move(nodes));
  return ProjectToDag(DecideEdges(table, rng), table);
}

int DiffPairs(const Digraph& g, const Digraph& reference) {
  if (g.size() != reference.size()) throw InputError("DiffPairs: node sets differ");
  for (const auto& v : g.nodes()) {
    if (!reference.HasNode(v)) throw InputError("DiffPairs: node sets differ");
  }
  auto relation = [](const Digraph& h, const std::string& a, const std::string& b) {
    if (h.HasEdge(a, b)) return 1;
    if (h.HasEdge(b, a)) return 2;
    return 0;
  };
  int diff = 0;
  const auto& nodes = g.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (std::size_t j = i + 1; j < nodes.size(); ++j) {
      if (relation(g, nodes[i], nodes[j]) != relation(reference, nodes[i], nodes[j])) ++diff;
    }
  }
  return diff;
}

void WriteEdgeList(const Digraph& g, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  std::set<int> touched;
  for (const auto& [a, b] : g.edges()) {
    touched.insert(a);
    touched.insert(b);
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!touched.count(static_cast<int>(i))) out << g.nodes()[i] << '\n';
  }
  for (const auto& [a, b] : g.NamedEdges()) out << a << " -> " << b << '\n';
}

Digraph ReadEdgeList(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  Digraph g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto arrow = line.find(" -> ");
    if (arrow == std::string::npos) {
      g.AddNode(line);
      continue;
    }
    const std::string a = line.substr(0, arrow), b = line.substr(arrow + 4);
    g.AddNode(a);
    g.AddNode(b);
    g.AddEdge(a, b);
  }
  return g;
}

}  // namespace fcm::graph
