#pragma once

#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fcm {

// Directed graph over named nodes. Used both for DAGs (G, G^(k), G_t) and for
// the possibly-cyclic intermediate produced by edge decisions; IsAcyclic()
// distinguishes the two.
class Digraph {
 public:
  using Edge = std::pair<int, int>;

  Digraph() = default;
  explicit Digraph(std::vector<std::string> nodes);
  Digraph(std::vector<std::string> nodes,
          const std::vector<std::pair<std::string, std::string>>& edges);

  const std::vector<std::string>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  const std::set<Edge>& edges() const { return edges_; }

  bool HasNode(const std::string& name) const;
  int Index(const std::string& name) const;  // throws if absent
  std::optional<int> Find(const std::string& name) const;
  const std::string& Name(int index) const { return nodes_.at(static_cast<std::size_t>(index)); }

  int AddNode(const std::string& name);
  void AddEdge(int from, int to);
  void AddEdge(const std::string& from, const std::string& to);
  void RemoveEdge(int from, int to);
  bool HasEdge(int from, int to) const { return edges_.count({from, to}) > 0; }
  bool HasEdge(const std::string& from, const std::string& to) const;

  std::vector<int> Parents(int node) const;
  std::vector<int> Children(int node) const;
  std::vector<std::string> ParentNames(const std::string& node) const;
  std::vector<int> Roots() const;

  bool IsAcyclic() const;
  // Kahn's algorithm with smallest-index-first tie breaking; throws on cycles.
  std::vector<int> TopologicalOrder() const;
  // Any directed cycle as a closed node sequence (first node not repeated).
  std::optional<std::vector<int>> FindCycle() const;

  // Nodes with a directed path to `node` (excluding it).
  std::set<int> Ancestors(int node) const;

  // Induced subgraph on the named nodes, keeping this graph's node order.
  Digraph Induced(const std::set<std::string>& keep) const;

  std::vector<std::pair<std::string, std::string>> NamedEdges() const;

  bool operator==(const Digraph& other) const;

 private:
  std::vector<std::string> nodes_;
  std::unordered_map<std::string, int> index_;
  std::set<Edge> edges_;
};

}  // namespace fcm
