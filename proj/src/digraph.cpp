#include "fcm/digraph.hpp"

#include <algorithm>
#include <functional>
#include <queue>

#include "fcm/error.hpp"

namespace fcm {

Digraph::Digraph(std::vector<std::string> nodes) {
  for (auto& n : nodes) AddNode(n);
}

Digraph::Digraph(std::vector<std::string> nodes,
                 const std::vector<std::pair<std::string, std::string>>& edges)
    : Digraph(std::move(nodes)) {
  for (const auto& [a, b] : edges) AddEdge(a, b);
}

bool Digraph::HasNode(const std::string& name) const { return index_.count(name) > 0; }

int Digraph::Index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown node '" + name + "'");
  return it->second;
}

std::optional<int> Digraph::Find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Digraph::AddNode(const std::string& name) {
  if (auto it = index_.find(name); it != index_.end()) return it->second;
  const int idx = static_cast<int>(nodes_.size());
  nodes_.push_back(name);
  index_.emplace(name, idx);
  return idx;
}

void Digraph::AddEdge(int from, int to) {
  const int n = static_cast<int>(nodes_.size());
  if (from < 0 || to < 0 || from >= n || to >= n) throw InputError("edge endpoint out of range");
  if (from == to) throw InputError("self loop on '" + nodes_[static_cast<std::size_t>(from)] + "'");
  edges_.insert({from, to});
}

void Digraph::AddEdge(const std::string& from, const std::string& to) {
  AddEdge(Index(from), Index(to));
}

void Digraph::RemoveEdge(int from, int to) { edges_.erase({from, to}); }

bool Digraph::HasEdge(const std::string& from, const std::string& to) const {
  auto a = Find(from);
  auto b = Find(to);
  return a && b && HasEdge(*a, *b);
}

std::vector<int> Digraph::Parents(int node) const {
  std::vector<int> out;
  for (const auto& [a, b] : edges_) {
    if (b == node) out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> Digraph::Children(int node) const {
  std::vector<int> out;
  for (auto it = edges_.lower_bound({node, -1}); it != edges_.end() && it->first == node; ++it) {
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::string> Digraph::ParentNames(const std::string& node) const {
  std::vector<std::string> out;
  for (int p : Parents(Index(node))) out.push_back(nodes_[static_cast<std::size_t>(p)]);
  return out;
}

std::vector<int> Digraph::Roots() const {
  std::vector<bool> has_parent(nodes_.size(), false);
  for (const auto& e : edges_) has_parent[static_cast<std::size_t>(e.second)] = true;
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!has_parent[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

bool Digraph::IsAcyclic() const { return !FindCycle().has_value(); }

std::vector<int> Digraph::TopologicalOrder() const {
  const std::size_t n = nodes_.size();
  std::vector<int> indeg(n, 0);
  for (const auto& e : edges_) ++indeg[static_cast<std::size_t>(e.second)];
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indeg[i] == 0) ready.push(static_cast<int>(i));
  }
  std::vector<int> order;
  while (!ready.empty()) {
    const int u = ready.top();
    ready.pop();
    order.push_back(u);
    for (int v : Children(u)) {
      if (--indeg[static_cast<std::size_t>(v)] == 0) ready.push(v);
    }
  }
  if (order.size() != n) throw InputError("graph has a directed cycle");
  return order;
}

std::optional<std::vector<int>> Digraph::FindCycle() const {
  const std::size_t n = nodes_.size();
  std::vector<int> state(n, 0);  // 0 unvisited, 1 on stack, 2 done
  std::vector<int> parent(n, -1);
  std::optional<std::vector<int>> found;
  std::function<bool(int)> dfs = [&](int u) {
    state[static_cast<std::size_t>(u)] = 1;
    for (int v : Children(u)) {
      if (state[static_cast<std::size_t>(v)] == 1) {
        std::vector<int> cycle{v};
        for (int w = u; w != v; w = parent[static_cast<std::size_t>(w)]) cycle.push_back(w);
        std::reverse(cycle.begin() + 1, cycle.end());
        found = std::move(cycle);
        return true;
      }
      if (state[static_cast<std::size_t>(v)] == 0) {
        parent[static_cast<std::size_t>(v)] = u;
        if (dfs(v)) return true;
      }
    }
    state[static_cast<std::size_t>(u)] = 2;
    return false;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (state[i] == 0 && dfs(static_cast<int>(i))) break;
  }
  return found;
}

std::set<int> Digraph::Ancestors(int node) const {
  std::set<int> seen;
  std::vector<int> stack{node};
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    for (int p : Parents(u)) {
      if (seen.insert(p).second) stack.push_back(p);
    }
  }
  seen.erase(node);
  return seen;
}

Digraph Digraph::Induced(const std::set<std::string>& keep) const {
  Digraph out;
  for (const auto& name : nodes_) {
    if (keep.count(name)) out.AddNode(name);
  }
  for (const auto& [a, b] : edges_) {
    const auto& na = nodes_[static_cast<std::size_t>(a)];
    const auto& nb = nodes_[static_cast<std::size_t>(b)];
    if (keep.count(na) && keep.count(nb)) out.AddEdge(na, nb);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> Digraph::NamedEdges() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [a, b] : edges_) {
    out.emplace_back(nodes_[static_cast<std::size_t>(a)], nodes_[static_cast<std::size_t>(b)]);
  }
  return out;
}

bool Digraph::operator==(const Digraph& other) const {
  if (nodes_.size() != other.nodes_.size()) return false;
  for (const auto& n : nodes_) {
    if (!other.HasNode(n)) return false;
  }
  if (edges_.size() != other.edges_.size()) return false;
  for (const auto& [a, b] : NamedEdges()) {
    if (!other.HasEdge(a, b)) return false;
  }
  return true;
}

}  // namespace fcm
