#pragma once

// The shared concept-based model. One encoder maps inputs to a latent z; one
// module per concept predicts a distribution over its states from z and the
// representations of its parent set B_j; a task module predicts Y from B_Y.
// Five kinds are supported: an opaque baseline, CBM, CEM, CGM and C2BM.

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fcm/digraph.hpp"
#include "fcm/nn.hpp"
#include "fcm/rng.hpp"

namespace fcm::model {

using nn::Matrix;
using nn::Vector;

enum class ModelKind { kOpaque, kCbm, kCem, kCgm, kC2bm };

std::string KindName(ModelKind kind);
ModelKind ParseKind(const std::string& name);  // opaq|cbm|cem|cgm|c2bm
bool IsGraphBased(ModelKind kind);

inline const std::string kEncoderId = "encoder";
inline const std::string kTaskId = "task";

struct Dims {
  int input = 0;
  int encoder_hidden = 64;
  int latent = 32;
  int hidden = 32;
  int embedding = 16;
};

struct Architecture {
  ModelKind kind = ModelKind::kCbm;
  Dims dims;
  std::vector<std::string> concepts;          // M, in insertion order
  std::map<std::string, int> cardinality;     // concepts only
  std::map<std::string, std::vector<std::string>> parents;  // B_j, input order
  std::string task;
  int task_cardinality = 2;
  std::vector<std::string> task_parents;      // B_Y, input order

  bool HasConcept(const std::string& name) const { return cardinality.count(name) > 0; }
  // Width of the representation a concept passes to its children.
  int RepWidth(const std::string& concept_name) const;
  // Concepts ordered so every parent precedes its children.
  std::vector<std::string> EvaluationOrder() const;
  void Validate() const;  // throws InputError
};

// B_j = PA(C_j) ∩ M and B_Y = PA(Y) ∩ M for graph-based kinds; B_j = ∅ and
// B_Y = M for bipartite ones; the opaque task reads z only.
Architecture MakeArchitecture(ModelKind kind, const Dims& dims,
                              const std::vector<std::string>& concepts,
                              const std::map<std::string, int>& cardinality,
                              const std::string& task, int task_cardinality,
                              const Digraph& dag);

// Affine map y = b + sum_s x_s W_s^T over named input blocks. Keeping one
// block per source lets parents be added or removed without touching the
// other blocks.
struct Linear {
  std::string name;
  std::vector<std::string> sources;
  std::vector<Matrix> w;  // out x width(source)
  Vector b;

  int out() const { return static_cast<int>(b.size()); }
  std::size_t param_count() const;
};

enum class ModuleType {
  kEncoder,     // stacked leaky layers
  kHead,        // in (z?, parents) -> hidden -> softmax
  kEmbedding,   // per-class embeddings of (z?, parents), softmax scoring, mixture
  kStructural,  // exogenous u from z; logits = head(u) + sum_p <theta_p(u), parent probs>
};

struct Module {
  ModuleType type = ModuleType::kHead;
  int cardinality = 0;
  bool uses_z = true;
  bool detach_z = false;  // gradients stop at z (opaque auxiliary heads)
  std::vector<std::string> parents;
  std::vector<Linear> layers;

  std::size_t param_count() const;
};

// Flat parameter layout: layers in order, each layer's blocks (column-major)
// then its bias.
std::vector<double> FlattenModule(const Module& m);
void UnflattenModule(std::span<const double> values, Module& m);
nn::ParamVector ToParamVector(const Module& m, const std::string& id);

// Per-row ground-truth classes; kMissing means "not intervened on that row".
struct Intervention {
  std::map<std::string, std::vector<int>> values;

  bool empty() const { return values.empty(); }
  void Set(const std::string& concept_name, std::vector<int> classes);
  // Intervenes every row with the given labels.
  static Intervention FromLabels(std::span<const std::string> concepts,
                                 const Eigen::MatrixXi& labels,
                                 const std::map<std::string, int>& columns);
};

struct Output {
  std::vector<Matrix> concept_probs;  // aligned with arch.concepts
  Matrix task_probs;
};

struct ModuleCache {
  std::vector<Matrix> inputs;  // first-layer inputs in source order
  std::vector<Matrix> act;     // per-layer activated outputs
  Matrix probs;
  Matrix rep;
  std::vector<int> forced;     // per row intervened class or kMissing
};

struct Tape {
  Matrix x;
  Matrix z;
  std::vector<Matrix> encoder_act;
  std::map<std::string, ModuleCache> modules;
};

struct Gradients {
  std::map<std::string, Module> modules;  // zero-initialized like the model
};

struct Batch {
  Matrix x;
  Eigen::MatrixXi concepts;  // columns named by `columns`
  std::vector<int> task;
};

Batch Gather(const Matrix& x, const Eigen::MatrixXi& concepts, std::span<const int> task,
             std::span<const std::size_t> rows);

struct LossResult {
  double value = 0.0;
  double concept_loss = 0.0;  // sum over supervised concepts
  double task_loss = 0.0;
  std::vector<Matrix> d_concepts;  // d loss / d probs, empty when unused
  Matrix d_task;
};

class SharedModel {
 public:
  SharedModel() = default;

  static SharedModel Build(const Architecture& arch, Rng& rng);

  const Architecture& arch() const { return arch_; }
  const std::map<std::string, Module>& modules() const { return modules_; }
  const Module& module(const std::string& id) const;
  Module& module(const std::string& id);
  std::size_t param_count() const;

  Output Forward(const Matrix& x, const Intervention& intervention = {},
                 Tape* tape = nullptr) const;
  Gradients Backward(const Tape& tape, const std::vector<Matrix>& d_concepts,
                     const Matrix& d_task) const;
  Gradients ZeroGradients() const;

  // Returns a model whose architecture is `target`: new concepts get fresh
  // modules, added parents get zero-initialized input blocks appended after
  // the kept ones, removed parents lose their blocks. Everything else is
  // copied bitwise.
  SharedModel Adapt(const Architecture& target, Rng& rng) const;

  // Fresh parameters for the same architecture.
  SharedModel Reinitialized(Rng& rng) const;

  void Save(const std::filesystem::path& dir) const;
  static SharedModel Load(const std::filesystem::path& dir);

 private:
  Architecture arch_;
  std::map<std::string, Module> modules_;
};

SharedModel AdaptAddConcept(const SharedModel& model, const std::string& concept_name,
                            int cardinality, const Architecture& target, Rng& rng);
SharedModel AdaptUpdateEdges(const SharedModel& model, const Architecture& target, Rng& rng);

// gamma * sum_{j in supervised} CE(c_j) + (1 - gamma) * [task_supervised] CE(y).
// Concept labels are looked up by name in `columns`; missing entries are
// skipped.
LossResult Loss(const Architecture& arch, const Output& out, const Batch& batch,
                const std::map<std::string, int>& columns,
                const std::set<std::string>& supervised, bool task_supervised, double gamma);

// Share of `after`'s parameters that are new or differ from `before`.
double FractionParamsChanged(const SharedModel& before, const SharedModel& after);

void WriteArchitecture(const Architecture& arch, const std::filesystem::path& file);
Architecture ReadArchitecture(const std::filesystem::path& file);

}  // namespace fcm::model
