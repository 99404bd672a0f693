#pragma once

// Server-side structure aggregation: client edge confidences are summed into
// a strength table, each node pair keeps its strongest outcome (i->j, j->i or
// no edge), and remaining cycles are broken by dropping weak edges.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fcm/digraph.hpp"
#include "fcm/nn.hpp"
#include "fcm/rng.hpp"

namespace fcm::graph {

// S(i,j) in [0,1], zero diagonal, S(i,j) + S(j,i) <= 1.
struct EdgeConfidence {
  std::vector<std::string> nodes;
  nn::Matrix s;

  EdgeConfidence() = default;
  EdgeConfidence(std::vector<std::string> nodes, nn::Matrix s);  // validates
  double NoEdge(int i, int j) const { return 1.0 - s(i, j) - s(j, i); }
};

EdgeConfidence FromAdjacency(const Digraph& g);

struct Proposal {
  EdgeConfidence confidence;
  double weight = 1.0;
};

struct StrengthTable {
  std::vector<std::string> nodes;
  nn::Matrix strength;  // weighted sum of S(i,j)
  nn::Matrix none;      // weighted sum of 1 - S(i,j) - S(j,i); symmetric
  nn::Matrix observed;  // total weight of clients observing both endpoints

  int Index(const std::string& name) const;
};

// `nodes` fixes the global node order; empty means the sorted union of all
// proposal nodes.
StrengthTable Accumulate(std::span<const Proposal> proposals,
                         std::vector<std::string> nodes = {});

// Keeps i->j iff S(i,j) is the strict maximum among the three outcomes; ties
// are broken by a uniform draw. Never-observed pairs emit no edge.
Digraph DecideEdges(const StrengthTable& table, Rng& rng);

// Breaks cycles by removing, per step, a minimum-strength edge of some cycle
// (preferring the candidate shared by the most cycles) until acyclic.
Digraph ProjectToDag(Digraph g, const StrengthTable& table);

Digraph Aggregate(std::span<const Proposal> proposals, Rng& rng,
                  std::vector<std::string> nodes = {});

// Unordered pairs whose relation (i->j, j->i, none) differs.
int DiffPairs(const Digraph& g, const Digraph& reference);

// One "src -> dst" per line; isolated nodes listed as bare names.
void WriteEdgeList(const Digraph& g, const std::filesystem::path& file);
Digraph ReadEdgeList(const std::filesystem::path& file);

}  // namespace fcm::graph
