#include "fcm/concept_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "fcm/csv.hpp"
#include "fcm/error.hpp"

namespace fcm::model {

namespace {

using nn::Activation;

const std::string kZ = "z";

std::string ParentSource(const std::string& parent) { return "pa:" + parent; }
std::string HyperName(const std::string& parent) { return "hyper:" + parent; }

bool Bipartite(ModelKind kind) { return kind == ModelKind::kCbm || kind == ModelKind::kCem; }

Matrix Leaky(const Matrix& pre) { return nn::Activate(pre, Activation::kLeakyRelu); }
Matrix LeakyBackward(const Matrix& out, const Matrix& upstream) {
  return nn::ActivationBackward(out, out, upstream, Activation::kLeakyRelu);
}

Linear MakeLinear(std::string name, std::vector<std::string> sources, const std::vector<int>& widths,
                  int out, Rng& rng) {
  Linear l;
  l.name = std::move(name);
  l.sources = std::move(sources);
  int fan_in = 0;
  for (int w : widths) fan_in += w;
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max(1, fan_in + out)));
  for (int w : widths) {
    Matrix m(out, w);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.Uniform(-bound, bound);
    l.w.push_back(std::move(m));
  }
  const double bias_bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  l.b = Vector(out);
  for (Eigen::Index r = 0; r < l.b.size(); ++r) l.b(r) = rng.Uniform(-bias_bound, bias_bound);
  return l;
}

Matrix LinearForward(const Linear& l, const std::vector<const Matrix*>& in, Eigen::Index rows) {
  Matrix acc = Matrix::Zero(rows, l.out());
  for (std::size_t s = 0; s < l.w.size(); ++s) acc.noalias() += *in[s] * l.w[s].transpose();
  acc.rowwise() += l.b.transpose();
  return acc;
}

// Accumulates parameter gradients into `g` and returns d loss / d inputs.
std::vector<Matrix> LinearBackward(const Linear& l, const std::vector<const Matrix*>& in,
                                   const Matrix& d_pre, Linear& g, bool need_inputs = true) {
  std::vector<Matrix> d_in;
  for (std::size_t s = 0; s < l.w.size(); ++s) {
    g.w[s].noalias() += d_pre.transpose() * *in[s];
    if (need_inputs) d_in.push_back(d_pre * l.w[s]);
  }
  g.b += d_pre.colwise().sum().transpose();
  return d_in;
}

Linear ZerosLike(const Linear& l) {
  Linear z = l;
  for (auto& w : z.w) w.setZero();
  z.b.setZero();
  return z;
}

Module ZerosLike(const Module& m) {
  Module z = m;
  for (auto& l : z.layers) l = ZerosLike(l);
  return z;
}

int CardinalityOf(const Architecture& arch, const std::string& id) {
  return id == kTaskId ? arch.task_cardinality : arch.cardinality.at(id);
}

const std::vector<std::string>& ParentsOf(const Architecture& arch, const std::string& id) {
  return id == kTaskId ? arch.task_parents : arch.parents.at(id);
}

ModuleType TypeFor(ModelKind kind, bool is_task) {
  switch (kind) {
    case ModelKind::kOpaque:
    case ModelKind::kCbm:
      return ModuleType::kHead;
    case ModelKind::kCem:
    case ModelKind::kCgm:
      return is_task ? ModuleType::kHead : ModuleType::kEmbedding;
    case ModelKind::kC2bm:
      return ModuleType::kStructural;
  }
  return ModuleType::kHead;
}

bool UsesZ(ModelKind kind, bool is_task) {
  if (!is_task) return true;
  return kind != ModelKind::kCbm && kind != ModelKind::kCem;
}

Linear MakeHyper(const Architecture& arch, int card, const std::string& parent, Rng* rng) {
  const int width = card * arch.RepWidth(parent);
  if (rng != nullptr) return MakeLinear(HyperName(parent), {"u"}, {arch.dims.embedding}, width, *rng);
  Linear l;
  l.name = HyperName(parent);
  l.sources = {"u"};
  l.w = {Matrix::Zero(width, arch.dims.embedding)};
  l.b = Vector::Zero(width);
  return l;
}

Module NewModule(const Architecture& arch, const std::string& id, Rng& rng) {
  const Dims& d = arch.dims;
  Module m;
  if (id == kEncoderId) {
    m.type = ModuleType::kEncoder;
    m.uses_z = false;
    m.layers.push_back(MakeLinear("l0", {"x"}, {d.input}, d.encoder_hidden, rng));
    m.layers.push_back(MakeLinear("l1", {"h"}, {d.encoder_hidden}, d.latent, rng));
    return m;
  }
  const bool is_task = id == kTaskId;
  m.type = TypeFor(arch.kind, is_task);
  m.cardinality = CardinalityOf(arch, id);
  m.uses_z = UsesZ(arch.kind, is_task);
  m.detach_z = arch.kind == ModelKind::kOpaque && !is_task;
  m.parents = ParentsOf(arch, id);

  std::vector<std::string> sources;
  std::vector<int> widths;
  if (m.uses_z) {
    sources.push_back(kZ);
    widths.push_back(d.latent);
  }
  for (const auto& p : m.parents) {
    sources.push_back(ParentSource(p));
    widths.push_back(arch.RepWidth(p));
  }
  switch (m.type) {
    case ModuleType::kHead:
      m.layers.push_back(MakeLinear("in", sources, widths, d.hidden, rng));
      m.layers.push_back(MakeLinear("out", {"h"}, {d.hidden}, m.cardinality, rng));
      break;
    case ModuleType::kEmbedding:
      for (int c = 0; c < m.cardinality; ++c) {
        m.layers.push_back(MakeLinear("class" + std::to_string(c), sources, widths, d.embedding, rng));
      }
      m.layers.push_back(MakeLinear("score", {"e"}, {m.cardinality * d.embedding}, m.cardinality, rng));
      break;
    case ModuleType::kStructural:
      m.layers.push_back(MakeLinear("exo", {kZ}, {d.latent}, d.embedding, rng));
      m.layers.push_back(MakeLinear("head", {"u"}, {d.embedding}, m.cardinality, rng));
      for (const auto& p : m.parents) m.layers.push_back(MakeHyper(arch, m.cardinality, p, &rng));
      break;
    case ModuleType::kEncoder:
      break;
  }
  return m;
}

// Moves a module to a new parent list: blocks of kept parents stay, removed
// ones are deleted, added ones are appended as zeros.
void Rewire(const Architecture& arch, Module& m, const std::vector<std::string>& new_parents) {
  std::set<std::string> keep(new_parents.begin(), new_parents.end());
  std::set<std::string> old(m.parents.begin(), m.parents.end());
  if (m.type == ModuleType::kStructural) {
    std::vector<Linear> layers(m.layers.begin(), m.layers.begin() + 2);
    std::map<std::string, Linear> hyper;
    for (std::size_t i = 2; i < m.layers.size(); ++i) hyper[m.parents[i - 2]] = m.layers[i];
    for (const auto& p : new_parents) {
      layers.push_back(old.count(p) ? hyper.at(p) : MakeHyper(arch, m.cardinality, p, nullptr));
    }
    m.layers = std::move(layers);
  } else {
    const std::size_t n_input = m.type == ModuleType::kEmbedding ? static_cast<std::size_t>(m.cardinality) : 1;
    for (std::size_t li = 0; li < n_input; ++li) {
      Linear& l = m.layers[li];
      Linear next;
      next.name = l.name;
      next.b = l.b;
      for (std::size_t s = 0; s < l.sources.size(); ++s) {
        const auto& src = l.sources[s];
        const bool is_parent = src.rfind("pa:", 0) == 0;
        if (is_parent && !keep.count(src.substr(3))) continue;
        next.sources.push_back(src);
        next.w.push_back(l.w[s]);
      }
      for (const auto& p : new_parents) {
        if (old.count(p)) continue;
        next.sources.push_back(ParentSource(p));
        next.w.push_back(Matrix::Zero(l.out(), arch.RepWidth(p)));
      }
      l = std::move(next);
    }
  }
  m.parents = new_parents;
}

template <typename ModuleT, typename F>
void VisitTensors(ModuleT& m, F&& f) {
  for (auto& l : m.layers) {
    for (std::size_t s = 0; s < l.w.size(); ++s) f(l.name + "/" + l.sources[s], l.w[s]);
    f(l.name + "/b", l.b);
  }
}

Matrix OneHotRows(const Matrix& probs, const std::vector<int>& forced) {
  Matrix out = probs;
  for (std::size_t r = 0; r < forced.size(); ++r) {
    if (forced[r] == nn::kMissing) continue;
    out.row(static_cast<Eigen::Index>(r)).setZero();
    out(static_cast<Eigen::Index>(r), forced[r]) = 1.0;
  }
  return out;
}

void MaskForced(Matrix& grad, const std::vector<int>& forced) {
  for (std::size_t r = 0; r < forced.size(); ++r) {
    if (forced[r] != nn::kMissing) grad.row(static_cast<Eigen::Index>(r)).setZero();
  }
}

std::vector<const Matrix*> Pointers(const std::vector<Matrix>& ms, std::size_t from = 0,
                                    std::size_t count = std::string::npos) {
  std::vector<const Matrix*> out;
  const std::size_t end = count == std::string::npos ? ms.size() : from + count;
  for (std::size_t i = from; i < end; ++i) out.push_back(&ms[i]);
  return out;
}

void RunModule(const Module& m, int embedding, ModuleCache& c) {
  const Eigen::Index rows = c.inputs.empty() ? 0 : c.inputs.front().rows();
  c.act.clear();
  switch (m.type) {
    case ModuleType::kHead: {
      c.act.push_back(Leaky(LinearForward(m.layers[0], Pointers(c.inputs), rows)));
      c.probs = nn::SoftmaxRows(LinearForward(m.layers[1], {&c.act[0]}, rows));
      c.rep = OneHotRows(c.probs, c.forced);
      break;
    }
    case ModuleType::kEmbedding: {
      const int k = m.cardinality;
      const auto in = Pointers(c.inputs);
      Matrix all(rows, static_cast<Eigen::Index>(k) * embedding);
      for (int cl = 0; cl < k; ++cl) {
        c.act.push_back(Leaky(LinearForward(m.layers[static_cast<std::size_t>(cl)], in, rows)));
        all.middleCols(static_cast<Eigen::Index>(cl) * embedding, embedding) = c.act.back();
      }
      c.act.push_back(std::move(all));
      c.probs = nn::SoftmaxRows(LinearForward(m.layers[static_cast<std::size_t>(k)], {&c.act.back()}, rows));
      const Matrix weights = OneHotRows(c.probs, c.forced);
      c.rep = Matrix::Zero(rows, embedding);
      for (int cl = 0; cl < k; ++cl) {
        c.rep.array() += c.act[static_cast<std::size_t>(cl)].array().colwise() * weights.col(cl).array();
      }
      break;
    }
    case ModuleType::kStructural: {
      const int k = m.cardinality;
      c.act.push_back(Leaky(LinearForward(m.layers[0], {&c.inputs[0]}, rows)));
      Matrix logits = LinearForward(m.layers[1], {&c.act[0]}, rows);
      for (std::size_t p = 0; p < m.parents.size(); ++p) {
        c.act.push_back(LinearForward(m.layers[2 + p], {&c.act[0]}, rows));
        const Matrix& theta = c.act.back();
        const Matrix& pa = c.inputs[1 + p];
        const Eigen::Index cp = pa.cols();
        for (Eigen::Index n = 0; n < rows; ++n) {
          for (int cl = 0; cl < k; ++cl) {
            double s = 0.0;
            for (Eigen::Index j = 0; j < cp; ++j) s += theta(n, cl * cp + j) * pa(n, j);
            logits(n, cl) += s;
          }
        }
      }
      c.probs = nn::SoftmaxRows(logits);
      c.rep = OneHotRows(c.probs, c.forced);
      break;
    }
    case ModuleType::kEncoder:
      throw ProtocolError("RunModule called on the encoder");
  }
}

// Returns d loss / d inputs, aligned with c.inputs.
std::vector<Matrix> BackModule(const Module& m, int embedding, const ModuleCache& c, const Matrix& d_probs,
                               const Matrix& d_rep, Module& g) {
  const Eigen::Index rows = c.probs.rows();
  switch (m.type) {
    case ModuleType::kHead:
    case ModuleType::kStructural: {
      Matrix d_p = d_rep;
      MaskForced(d_p, c.forced);
      d_p += d_probs;
      const Matrix d_logits = nn::SoftmaxBackward(c.probs, d_p);
      if (m.type == ModuleType::kHead) {
        const auto d_h = LinearBackward(m.layers[1], {&c.act[0]}, d_logits, g.layers[1]);
        return LinearBackward(m.layers[0], Pointers(c.inputs), LeakyBackward(c.act[0], d_h[0]), g.layers[0]);
      }
      const int k = m.cardinality;
      std::vector<Matrix> d_in(c.inputs.size());
      Matrix d_u = LinearBackward(m.layers[1], {&c.act[0]}, d_logits, g.layers[1])[0];
      for (std::size_t p = 0; p < m.parents.size(); ++p) {
        const Matrix& theta = c.act[1 + p];
        const Matrix& pa = c.inputs[1 + p];
        const Eigen::Index cp = pa.cols();
        Matrix d_theta(rows, theta.cols());
        Matrix d_pa = Matrix::Zero(rows, cp);
        for (Eigen::Index n = 0; n < rows; ++n) {
          for (int cl = 0; cl < k; ++cl) {
            for (Eigen::Index j = 0; j < cp; ++j) {
              d_theta(n, cl * cp + j) = d_logits(n, cl) * pa(n, j);
              d_pa(n, j) += d_logits(n, cl) * theta(n, cl * cp + j);
            }
          }
        }
        d_u += LinearBackward(m.layers[2 + p], {&c.act[0]}, d_theta, g.layers[2 + p])[0];
        d_in[1 + p] = std::move(d_pa);
      }
      d_in[0] = LinearBackward(m.layers[0], {&c.inputs[0]}, LeakyBackward(c.act[0], d_u), g.layers[0])[0];
      return d_in;
    }
    case ModuleType::kEmbedding: {
      const int k = m.cardinality;
      const Matrix weights = OneHotRows(c.probs, c.forced);
      Matrix d_p = Matrix::Zero(rows, k);
      for (int cl = 0; cl < k; ++cl) {
        d_p.col(cl) = d_rep.cwiseProduct(c.act[static_cast<std::size_t>(cl)]).rowwise().sum();
      }
      MaskForced(d_p, c.forced);
      d_p += d_probs;
      const Matrix d_logits = nn::SoftmaxBackward(c.probs, d_p);
      const Matrix d_all =
          LinearBackward(m.layers[static_cast<std::size_t>(k)], {&c.act[static_cast<std::size_t>(k)]}, d_logits,
                         g.layers[static_cast<std::size_t>(k)])[0];
      std::vector<Matrix> d_in;
      const auto in = Pointers(c.inputs);
      for (int cl = 0; cl < k; ++cl) {
        const auto ci = static_cast<std::size_t>(cl);
        Matrix d_e = d_all.middleCols(static_cast<Eigen::Index>(cl) * embedding, embedding);
        d_e += (d_rep.array().colwise() * weights.col(cl).array()).matrix();
        auto d = LinearBackward(m.layers[ci], in, LeakyBackward(c.act[ci], d_e), g.layers[ci]);
        if (d_in.empty()) {
          d_in = std::move(d);
        } else {
          for (std::size_t s = 0; s < d.size(); ++s) d_in[s] += d[s];
        }
      }
      return d_in;
    }
    case ModuleType::kEncoder:
      break;
  }
  throw ProtocolError("BackModule called on the encoder");
}

void ValidateName(const std::string& name) {
  if (name.empty() || name == kEncoderId || name == kTaskId) {
    throw InputError("invalid concept name '" + name + "'");
  }
}

}  // namespace

std::string KindName(ModelKind kind) {
  switch (kind) {
    case ModelKind::kOpaque: return "opaq";
    case ModelKind::kCbm: return "cbm";
    case ModelKind::kCem: return "cem";
    case ModelKind::kCgm: return "cgm";
    case ModelKind::kC2bm: return "c2bm";
  }
  return "?";
}

ModelKind ParseKind(const std::string& name) {
  for (auto k : {ModelKind::kOpaque, ModelKind::kCbm, ModelKind::kCem, ModelKind::kCgm, ModelKind::kC2bm}) {
    if (KindName(k) == name) return k;
  }
  throw InputError("unknown model kind '" + name + "'");
}

bool IsGraphBased(ModelKind kind) { return kind == ModelKind::kCgm || kind == ModelKind::kC2bm; }

std::size_t Linear::param_count() const {
  std::size_t n = static_cast<std::size_t>(b.size());
  for (const auto& m : w) n += static_cast<std::size_t>(m.size());
  return n;
}

std::size_t Module::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

int Architecture::RepWidth(const std::string& concept_name) const {
  if (kind == ModelKind::kCem || kind == ModelKind::kCgm) return dims.embedding;
  return cardinality.at(concept_name);
}

std::vector<std::string> Architecture::EvaluationOrder() const {
  Digraph g(concepts);
  for (const auto& c : concepts) {
    for (const auto& p : parents.at(c)) g.AddEdge(p, c);
  }
  std::vector<std::string> order;
  for (int i : g.TopologicalOrder()) order.push_back(concepts[static_cast<std::size_t>(i)]);
  return order;
}

void Architecture::Validate() const {
  if (dims.input <= 0 || dims.latent <= 0 || dims.hidden <= 0 || dims.embedding <= 0 || dims.encoder_hidden <= 0) {
    throw InputError("architecture dimensions must be positive");
  }
  if (task.empty() || task_cardinality < 2) throw InputError("architecture needs a task with >= 2 classes");
  std::set<std::string> seen;
  for (const auto& c : concepts) {
    ValidateName(c);
    if (c == task) throw InputError("concept '" + c + "' clashes with the task");
    if (!seen.insert(c).second) throw InputError("duplicate concept '" + c + "'");
    auto it = cardinality.find(c);
    if (it == cardinality.end() || it->second < 2) throw InputError("concept '" + c + "' needs cardinality >= 2");
    if (!parents.count(c)) throw InputError("concept '" + c + "' has no parent entry");
  }
  if (cardinality.size() != concepts.size() || parents.size() != concepts.size()) {
    throw InputError("architecture maps list concepts outside M");
  }
  auto check_parents = [&](const std::string& who, const std::vector<std::string>& ps) {
    std::set<std::string> uniq;
    for (const auto& p : ps) {
      if (!seen.count(p)) throw InputError("parent '" + p + "' of '" + who + "' is not in M");
      if (p == who) throw InputError("'" + who + "' lists itself as a parent");
      if (!uniq.insert(p).second) throw InputError("duplicate parent '" + p + "' of '" + who + "'");
    }
  };
  for (const auto& c : concepts) check_parents(c, parents.at(c));
  check_parents(task, task_parents);
  if (!IsGraphBased(kind)) {
    for (const auto& c : concepts) {
      if (!parents.at(c).empty()) throw InputError("bipartite model with concept-to-concept edge into '" + c + "'");
    }
  }
  if (Bipartite(kind) && task_parents.size() != concepts.size()) {
    throw InputError("bipartite task head must read every concept");
  }
  if (kind == ModelKind::kOpaque && !task_parents.empty()) {
    throw InputError("opaque task head reads z only");
  }
  try {
    (void)EvaluationOrder();
  } catch (const std::exception&) {
    throw InputError("concept parent sets contain a cycle");
  }
}

Architecture MakeArchitecture(ModelKind kind, const Dims& dims, const std::vector<std::string>& concepts,
                              const std::map<std::string, int>& cardinality, const std::string& task,
                              int task_cardinality, const Digraph& dag) {
  Architecture a;
  a.kind = kind;
  a.dims = dims;
  a.concepts = concepts;
  a.task = task;
  a.task_cardinality = task_cardinality;
  std::set<std::string> in_m(concepts.begin(), concepts.end());
  auto parents_in_m = [&](const std::string& node) {
    std::vector<std::string> out;
    if (!dag.HasNode(node)) return out;
    for (const auto& p : dag.ParentNames(node)) {
      if (in_m.count(p)) out.push_back(p);
    }
    return out;
  };
  for (const auto& c : concepts) {
    auto it = cardinality.find(c);
    if (it == cardinality.end()) throw InputError("no cardinality for concept '" + c + "'");
    a.cardinality[c] = it->second;
    a.parents[c] = IsGraphBased(kind) ? parents_in_m(c) : std::vector<std::string>{};
  }
  if (IsGraphBased(kind)) {
    a.task_parents = parents_in_m(task);
  } else if (Bipartite(kind)) {
    a.task_parents = concepts;
  }
  a.Validate();
  return a;
}

std::vector<double> FlattenModule(const Module& m) {
  std::vector<double> out;
  out.reserve(m.param_count());
  VisitTensors(m, [&](const std::string&, const auto& t) { out.insert(out.end(), t.data(), t.data() + t.size()); });
  return out;
}

void UnflattenModule(std::span<const double> values, Module& m) {
  if (values.size() != m.param_count()) {
    throw InputError("parameter vector has " + std::to_string(values.size()) + " entries, module expects " +
                     std::to_string(m.param_count()));
  }
  std::size_t at = 0;
  VisitTensors(m, [&](const std::string&, auto& t) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), t.size(), t.data());
    at += static_cast<std::size_t>(t.size());
  });
}

nn::ParamVector ToParamVector(const Module& m, const std::string& id) {
  nn::ParamVector pv;
  const auto flat = FlattenModule(m);
  pv.values = Eigen::Map<const Vector>(flat.data(), static_cast<Eigen::Index>(flat.size()));
  VisitTensors(m, [&](const std::string& name, const auto& t) {
    pv.layout.push_back({id + "/" + name, static_cast<int>(t.rows()), static_cast<int>(t.cols())});
  });
  return pv;
}

void Intervention::Set(const std::string& concept_name, std::vector<int> classes) {
  values[concept_name] = std::move(classes);
}

Intervention Intervention::FromLabels(std::span<const std::string> concepts, const Eigen::MatrixXi& labels,
                                      const std::map<std::string, int>& columns) {
  Intervention iv;
  for (const auto& c : concepts) {
    auto it = columns.find(c);
    if (it == columns.end()) throw InputError("no label column for concept '" + c + "'");
    std::vector<int> v(static_cast<std::size_t>(labels.rows()));
    for (Eigen::Index r = 0; r < labels.rows(); ++r) v[static_cast<std::size_t>(r)] = labels(r, it->second);
    iv.values[c] = std::move(v);
  }
  return iv;
}

Batch Gather(const Matrix& x, const Eigen::MatrixXi& concepts, std::span<const int> task,
             std::span<const std::size_t> rows) {
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  b.concepts.resize(static_cast<Eigen::Index>(rows.size()), concepts.cols());
  b.task.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    b.x.row(static_cast<Eigen::Index>(i)) = x.row(r);
    b.concepts.row(static_cast<Eigen::Index>(i)) = concepts.row(r);
    b.task[i] = task[rows[i]];
  }
  return b;
}

SharedModel SharedModel::Build(const Architecture& arch, Rng& rng) {
  arch.Validate();
  SharedModel m;
  m.arch_ = arch;
  m.modules_[kEncoderId] = NewModule(arch, kEncoderId, rng);
  for (const auto& c : arch.concepts) m.modules_[c] = NewModule(arch, c, rng);
  m.modules_[kTaskId] = NewModule(arch, kTaskId, rng);
  return m;
}

const Module& SharedModel::module(const std::string& id) const {
  auto it = modules_.find(id);
  if (it == modules_.end()) throw InputError("model has no module '" + id + "'");
  return it->second;
}

Module& SharedModel::module(const std::string& id) {
  auto it = modules_.find(id);
  if (it == modules_.end()) throw InputError("model has no module '" + id + "'");
  return it->second;
}

std::size_t SharedModel::param_count() const {
  std::size_t n = 0;
  for (const auto& [id, m] : modules_) n += m.param_count();
  return n;
}

Output SharedModel::Forward(const Matrix& x, const Intervention& intervention, Tape* tape) const {
  if (x.cols() != arch_.dims.input) {
    throw InputError("batch has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(arch_.dims.input));
  }
  const auto rows = static_cast<std::size_t>(x.rows());
  for (const auto& [c, v] : intervention.values) {
    if (!arch_.HasConcept(c)) throw InputError("intervention on concept '" + c + "' outside the model");
    if (v.size() != rows) throw InputError("intervention on '" + c + "' has the wrong row count");
    for (int cls : v) {
      if (cls != nn::kMissing && (cls < 0 || cls >= arch_.cardinality.at(c))) {
        throw InputError("intervention class out of range for '" + c + "'");
      }
    }
  }
  Tape local;
  Tape& t = tape != nullptr ? *tape : local;
  t.modules.clear();
  t.x = x;
  const Module& enc = modules_.at(kEncoderId);
  t.encoder_act.clear();
  t.encoder_act.push_back(Leaky(LinearForward(enc.layers[0], {&t.x}, x.rows())));
  t.encoder_act.push_back(Leaky(LinearForward(enc.layers[1], {&t.encoder_act[0]}, x.rows())));
  t.z = t.encoder_act.back();

  auto prepare = [&](const std::string& id, const Module& m) -> ModuleCache& {
    ModuleCache& c = t.modules[id];
    if (m.uses_z) c.inputs.push_back(t.z);
    for (const auto& p : m.parents) c.inputs.push_back(t.modules.at(p).rep);
    if (c.inputs.empty()) c.inputs.push_back(Matrix::Zero(x.rows(), 0));
    auto it = intervention.values.find(id);
    c.forced = it != intervention.values.end() ? it->second : std::vector<int>(rows, nn::kMissing);
    return c;
  };

  for (const auto& id : arch_.EvaluationOrder()) {
    const Module& m = modules_.at(id);
    RunModule(m, arch_.dims.embedding, prepare(id, m));
  }
  const Module& task = modules_.at(kTaskId);
  RunModule(task, arch_.dims.embedding, prepare(kTaskId, task));

  Output out;
  for (const auto& c : arch_.concepts) out.concept_probs.push_back(t.modules.at(c).probs);
  out.task_probs = t.modules.at(kTaskId).probs;
  return out;
}

Gradients SharedModel::ZeroGradients() const {
  Gradients g;
  for (const auto& [id, m] : modules_) g.modules[id] = ZerosLike(m);
  return g;
}

Gradients SharedModel::Backward(const Tape& tape, const std::vector<Matrix>& d_concepts, const Matrix& d_task) const {
  Gradients g = ZeroGradients();
  const Eigen::Index rows = tape.x.rows();
  Matrix d_z = Matrix::Zero(rows, arch_.dims.latent);
  std::map<std::string, Matrix> d_rep;
  for (const auto& c : arch_.concepts) {
    d_rep[c] = Matrix::Zero(rows, tape.modules.at(c).rep.cols());
  }

  auto distribute = [&](const Module& m, std::vector<Matrix>& d_in) {
    std::size_t at = 0;
    if (m.uses_z) {
      if (!m.detach_z) d_z += d_in[0];
      at = 1;
    }
    for (const auto& p : m.parents) d_rep[p] += d_in[at++];
  };
  auto zero_or = [&](const Matrix& d, Eigen::Index cols) {
    return d.size() == 0 ? Matrix(Matrix::Zero(rows, cols)) : d;
  };

  {
    const Module& m = modules_.at(kTaskId);
    const ModuleCache& c = tape.modules.at(kTaskId);
    const Matrix none = Matrix::Zero(rows, c.rep.cols());
    auto d_in = BackModule(m, arch_.dims.embedding, c, zero_or(d_task, m.cardinality), none, g.modules[kTaskId]);
    distribute(m, d_in);
  }
  const auto order = arch_.EvaluationOrder();
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < arch_.concepts.size(); ++i) position[arch_.concepts[i]] = i;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Module& m = modules_.at(*it);
    const ModuleCache& c = tape.modules.at(*it);
    const std::size_t idx = position.at(*it);
    const Matrix d_probs = idx < d_concepts.size() ? zero_or(d_concepts[idx], m.cardinality)
                                                   : Matrix(Matrix::Zero(rows, m.cardinality));
    auto d_in = BackModule(m, arch_.dims.embedding, c, d_probs, d_rep.at(*it), g.modules[*it]);
    distribute(m, d_in);
  }
  const Module& enc = modules_.at(kEncoderId);
  Module& ge = g.modules[kEncoderId];
  const Matrix d_h = LinearBackward(enc.layers[1], {&tape.encoder_act[0]}, LeakyBackward(tape.encoder_act[1], d_z),
                                    ge.layers[1])[0];
  LinearBackward(enc.layers[0], {&tape.x}, LeakyBackward(tape.encoder_act[0], d_h), ge.layers[0], false);
  return g;
}

SharedModel SharedModel::Adapt(const Architecture& target, Rng& rng) const {
  target.Validate();
  if (target.kind != arch_.kind || target.task != arch_.task || target.task_cardinality != arch_.task_cardinality ||
      target.dims.input != arch_.dims.input || target.dims.latent != arch_.dims.latent ||
      target.dims.hidden != arch_.dims.hidden || target.dims.embedding != arch_.dims.embedding ||
      target.dims.encoder_hidden != arch_.dims.encoder_hidden) {
    throw InputError("adaptation cannot change kind, task or dimensions");
  }
  for (const auto& c : arch_.concepts) {
    if (!target.HasConcept(c)) throw InputError("adaptation cannot remove concept '" + c + "'");
    if (target.cardinality.at(c) != arch_.cardinality.at(c)) {
      throw InputError("adaptation cannot change the cardinality of '" + c + "'");
    }
  }
  // Kept parents stay in their old position; new ones follow in target order.
  auto merged = [](const std::vector<std::string>& old, const std::vector<std::string>& wanted) {
    std::set<std::string> want(wanted.begin(), wanted.end());
    std::vector<std::string> out;
    for (const auto& p : old) {
      if (want.count(p)) out.push_back(p);
    }
    for (const auto& p : wanted) {
      if (std::find(old.begin(), old.end(), p) == old.end()) out.push_back(p);
    }
    return out;
  };
  Architecture next = target;
  for (const auto& c : arch_.concepts) next.parents[c] = merged(arch_.parents.at(c), target.parents.at(c));
  next.task_parents = merged(arch_.task_parents, target.task_parents);

  SharedModel out;
  out.arch_ = next;
  out.modules_ = modules_;
  for (const auto& c : next.concepts) {
    if (!arch_.HasConcept(c)) out.modules_[c] = NewModule(next, c, rng);
  }
  for (const auto& c : arch_.concepts) {
    if (next.parents.at(c) != arch_.parents.at(c)) Rewire(next, out.modules_.at(c), next.parents.at(c));
  }
  if (next.task_parents != arch_.task_parents) Rewire(next, out.modules_.at(kTaskId), next.task_parents);
  return out;
}

SharedModel SharedModel::Reinitialized(Rng& rng) const { return Build(arch_, rng); }

SharedModel AdaptAddConcept(const SharedModel& model, const std::string& concept_name, int cardinality,
                            const Architecture& target, Rng& rng) {
  if (model.arch().HasConcept(concept_name)) {
    throw InputError("concept '" + concept_name + "' is already in the model");
  }
  if (!target.HasConcept(concept_name) || target.cardinality.at(concept_name) != cardinality) {
    throw InputError("target architecture does not contain '" + concept_name + "' with the given cardinality");
  }
  if (target.concepts.size() != model.arch().concepts.size() + 1) {
    throw InputError("AdaptAddConcept adds exactly one concept");
  }
  return model.Adapt(target, rng);
}

SharedModel AdaptUpdateEdges(const SharedModel& model, const Architecture& target, Rng& rng) {
  std::set<std::string> before(model.arch().concepts.begin(), model.arch().concepts.end());
  std::set<std::string> after(target.concepts.begin(), target.concepts.end());
  if (before != after) throw InputError("AdaptUpdateEdges cannot change the concept set");
  if (!IsGraphBased(model.arch().kind)) {
    // Bipartite kinds have no concept-to-concept inputs to rewire.
    return model;
  }
  return model.Adapt(target, rng);
}

LossResult Loss(const Architecture& arch, const Output& out, const Batch& batch,
                const std::map<std::string, int>& columns, const std::set<std::string>& supervised,
                bool task_supervised, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw InputError("gamma must lie in [0, 1]");
  LossResult r;
  r.d_concepts.resize(arch.concepts.size());
  const auto rows = static_cast<std::size_t>(batch.x.rows());
  std::vector<int> targets(rows);
  for (std::size_t i = 0; i < arch.concepts.size(); ++i) {
    const auto& c = arch.concepts[i];
    if (!supervised.count(c)) continue;
    auto col = columns.find(c);
    if (col == columns.end()) throw InputError("no label column for concept '" + c + "'");
    for (std::size_t n = 0; n < rows; ++n) targets[n] = batch.concepts(static_cast<Eigen::Index>(n), col->second);
    auto ce = nn::CrossEntropy(out.concept_probs[i], targets);
    r.concept_loss += ce.value;
    r.d_concepts[i] = gamma * ce.gradient;
  }
  for (const auto& c : supervised) {
    if (!arch.HasConcept(c)) throw ProtocolError("supervised concept '" + c + "' has no module in the model");
  }
  r.value = gamma * r.concept_loss;
  if (task_supervised) {
    auto ce = nn::CrossEntropy(out.task_probs, batch.task);
    r.task_loss = ce.value;
    r.value += (1.0 - gamma) * ce.value;
    r.d_task = (1.0 - gamma) * ce.gradient;
  }
  return r;
}

double FractionParamsChanged(const SharedModel& before, const SharedModel& after) {
  std::size_t total = 0, changed = 0;
  for (const auto& [id, m] : after.modules()) {
    std::map<std::string, const Matrix*> old_w;
    std::map<std::string, const Vector*> old_b;
    auto it = before.modules().find(id);
    if (it != before.modules().end()) {
      for (const auto& l : it->second.layers) {
        for (std::size_t s = 0; s < l.w.size(); ++s) old_w[l.name + "/" + l.sources[s]] = &l.w[s];
        old_b[l.name + "/b"] = &l.b;
      }
    }
    auto count = [&](const auto& now, const auto* prev) {
      total += static_cast<std::size_t>(now.size());
      if (prev == nullptr || prev->rows() != now.rows() || prev->cols() != now.cols()) {
        changed += static_cast<std::size_t>(now.size());
        return;
      }
      for (Eigen::Index k = 0; k < now.size(); ++k) {
        if (now.data()[k] != prev->data()[k]) ++changed;
      }
    };
    for (const auto& l : m.layers) {
      for (std::size_t s = 0; s < l.w.size(); ++s) {
        auto w = old_w.find(l.name + "/" + l.sources[s]);
        count(l.w[s], w == old_w.end() ? nullptr : w->second);
      }
      auto b = old_b.find(l.name + "/b");
      count(l.b, b == old_b.end() ? nullptr : b->second);
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(changed) / static_cast<double>(total);
}

void WriteArchitecture(const Architecture& arch, const std::filesystem::path& file) {
  nlohmann::ordered_json j;
  j["kind"] = KindName(arch.kind);
  j["dims"] = {{"input", arch.dims.input},
               {"encoder_hidden", arch.dims.encoder_hidden},
               {"latent", arch.dims.latent},
               {"hidden", arch.dims.hidden},
               {"embedding", arch.dims.embedding}};
  j["concepts"] = nlohmann::ordered_json::array();
  for (const auto& c : arch.concepts) {
    j["concepts"].push_back({{"name", c}, {"cardinality", arch.cardinality.at(c)}, {"parents", arch.parents.at(c)}});
  }
  j["task"] = {{"name", arch.task}, {"cardinality", arch.task_cardinality}, {"parents", arch.task_parents}};
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

Architecture ReadArchitecture(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  try {
    const auto j = nlohmann::json::parse(in);
    Architecture a;
    a.kind = ParseKind(j.at("kind").get<std::string>());
    const auto& d = j.at("dims");
    a.dims = {d.at("input").get<int>(), d.at("encoder_hidden").get<int>(), d.at("latent").get<int>(),
              d.at("hidden").get<int>(), d.at("embedding").get<int>()};
    for (const auto& c : j.at("concepts")) {
      const auto name = c.at("name").get<std::string>();
      a.concepts.push_back(name);
      a.cardinality[name] = c.at("cardinality").get<int>();
      a.parents[name] = c.at("parents").get<std::vector<std::string>>();
    }
    a.task = j.at("task").at("name").get<std::string>();
    a.task_cardinality = j.at("task").at("cardinality").get<int>();
    a.task_parents = j.at("task").at("parents").get<std::vector<std::string>>();
    a.Validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed architecture file " + file.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw DataError("invalid architecture in " + file.string() + ": " + e.what());
  }
}

void SharedModel::Save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  WriteArchitecture(arch_, dir / "arch.json");
  for (const auto& [id, m] : modules_) {
    std::ofstream out(dir / (id + ".params"));
    if (!out) throw DataError("cannot write parameters for module " + id);
    for (double v : FlattenModule(m)) out << csv::FormatDouble(v) << '\n';
  }
}

SharedModel SharedModel::Load(const std::filesystem::path& dir) {
  const Architecture arch = ReadArchitecture(dir / "arch.json");
  Rng rng(0);
  SharedModel m = Build(arch, rng);
  for (auto& [id, mod] : m.modules_) {
    const auto file = dir / (id + ".params");
    std::ifstream in(file);
    if (!in) throw DataError("missing parameter file " + file.string());
    std::vector<double> values;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        values.push_back(std::stod(line));
      } catch (const std::exception&) {
        throw DataError("bad number in " + file.string());
      }
    }
    if (values.size() != mod.param_count()) throw DataError("parameter count mismatch in " + file.string());
    UnflattenModule(values, mod);
  }
  return m;
}

}  // namespace fcm::model
