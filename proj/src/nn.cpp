#include "fcm/nn.hpp"

#include <cmath>
#include <string>

#include "fcm/error.hpp"

namespace fcm::nn {

DenseNet::DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (layer.bias.size() != layer.weight.rows()) {
      throw InputError("layer " + std::to_string(l) +
                       ": bias length does not match weight rows");
    }
    if (l > 0 && layer.weight.cols() != layers_[l - 1].weight.rows()) {
      throw InputError("layer " + std::to_string(l) +
                       ": input width does not match previous output width");
    }
  }
}

DenseNet DenseNet::Create(std::span<const int> dims,
                          std::span<const Activation> activations, Rng& rng) {
  if (dims.size() != activations.size() + 1) {
    throw InputError("DenseNet::Create: need one more dim than activations");
  }
  std::vector<Layer> layers;
  for (std::size_t l = 0; l < activations.size(); ++l) {
    const int in = dims[l];
    const int out = dims[l + 1];
    if (in < 0 || out <= 0) throw InputError("DenseNet::Create: bad width");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Layer layer;
    layer.weight.resize(out, in);
    for (int c = 0; c < in; ++c) {
      for (int r = 0; r < out; ++r) layer.weight(r, c) = rng.Uniform(-limit, limit);
    }
    layer.bias = Vector::Zero(out);
    layer.activation = activations[l];
    layers.push_back(std::move(layer));
  }
  return DenseNet(std::move(layers));
}

int DenseNet::input_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols());
}

int DenseNet::output_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows());
}

std::size_t DenseNet::param_count() const {
  std::size_t n = 0;
  for (const Layer& layer : layers_) {
    n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  }
  return n;
}

Matrix Activate(const Matrix& pre, Activation activation) {
  switch (activation) {
    case Activation::kIdentity:
      return pre;
    case Activation::kLeakyRelu:
      return pre.unaryExpr([](double x) { return x > 0.0 ? x : kLeakySlope * x; });
    case Activation::kSigmoid:
      return pre.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    case Activation::kSoftmax:
      return SoftmaxRows(pre);
  }
  return pre;
}

Matrix ActivationBackward(const Matrix& pre, const Matrix& out,
                          const Matrix& upstream, Activation activation) {
  switch (activation) {
    case Activation::kIdentity:
      return upstream;
    case Activation::kLeakyRelu:
      return upstream.cwiseProduct(
          pre.unaryExpr([](double x) { return x > 0.0 ? 1.0 : kLeakySlope; }));
    case Activation::kSigmoid:
      return upstream.cwiseProduct(
          out.unaryExpr([](double s) { return s * (1.0 - s); }));
    case Activation::kSoftmax:
      return SoftmaxBackward(out, upstream);
  }
  return upstream;
}

Matrix SoftmaxRows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix SoftmaxBackward(const Matrix& probs, const Matrix& upstream) {
  const Vector dot = probs.cwiseProduct(upstream).rowwise().sum();
  Matrix grad = upstream;
  grad.colwise() -= dot;
  return grad.cwiseProduct(probs);
}

Matrix DenseNet::Forward(const Matrix& batch, ForwardCache* cache) const {
  if (layers_.empty()) throw InputError("forward on an empty network");
  if (batch.cols() != input_dim()) {
    throw InputError("forward: batch has " + std::to_string(batch.cols()) +
                     " columns, network expects " + std::to_string(input_dim()));
  }
  if (cache != nullptr) {
    cache->inputs.clear();
    cache->outputs.clear();
  }
  Matrix x = batch;
  for (const Layer& layer : layers_) {
    Matrix pre = x * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    Matrix out = Activate(pre, layer.activation);
    if (cache != nullptr) {
      cache->inputs.push_back(std::move(x));
      cache->outputs.push_back(out);
    }
    x = std::move(out);
  }
  return x;
}

Matrix DenseNet::Backward(const ForwardCache& cache, const Matrix& upstream,
                          std::span<double> grad) const {
  if (cache.empty() || cache.inputs.size() != layers_.size()) {
    throw InputError("backward: no forward cache for this network");
  }
  if (!grad.empty() && grad.size() != param_count()) {
    throw InputError("backward: gradient buffer has the wrong length");
  }
  // Offsets of each layer inside the flat layout.
  std::vector<std::size_t> offsets(layers_.size());
  std::size_t off = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    offsets[l] = off;
    off += static_cast<std::size_t>(layers_[l].weight.size() + layers_[l].bias.size());
  }

  Matrix delta = upstream;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& layer = layers_[li];
    const Matrix& in = cache.inputs[li];
    const Matrix& out = cache.outputs[li];
    if (delta.rows() != out.rows() || delta.cols() != out.cols()) {
      throw InputError("backward: upstream gradient shape mismatch");
    }
    // LeakyReLU output has the sign of its input, so `out` stands in for the
    // pre-activation.
    const Matrix dpre = ActivationBackward(out, out, delta, layer.activation);
    if (!grad.empty()) {
      Eigen::Map<Matrix> dw(grad.data() + offsets[li], layer.weight.rows(),
                            layer.weight.cols());
      dw.noalias() += dpre.transpose() * in;
      Eigen::Map<Vector> db(grad.data() + offsets[li] + layer.weight.size(),
                            layer.bias.size());
      db += dpre.colwise().sum().transpose();
    }
    delta = dpre * layer.weight;
  }
  return delta;
}

void DenseNet::CopyParams(std::span<double> out) const {
  if (out.size() != param_count()) throw InputError("CopyParams: size mismatch");
  std::size_t off = 0;
  for (const Layer& layer : layers_) {
    std::copy(layer.weight.data(), layer.weight.data() + layer.weight.size(),
              out.begin() + static_cast<std::ptrdiff_t>(off));
    off += static_cast<std::size_t>(layer.weight.size());
    std::copy(layer.bias.data(), layer.bias.data() + layer.bias.size(),
              out.begin() + static_cast<std::ptrdiff_t>(off));
    off += static_cast<std::size_t>(layer.bias.size());
  }
}

void DenseNet::LoadParams(std::span<const double> in) {
  if (in.size() != param_count()) throw InputError("LoadParams: size mismatch");
  std::size_t off = 0;
  for (Layer& layer : layers_) {
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(off),
              in.begin() + static_cast<std::ptrdiff_t>(off + layer.weight.size()),
              layer.weight.data());
    off += static_cast<std::size_t>(layer.weight.size());
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(off),
              in.begin() + static_cast<std::ptrdiff_t>(off + layer.bias.size()),
              layer.bias.data());
    off += static_cast<std::size_t>(layer.bias.size());
  }
}

namespace {

std::vector<LayoutEntry> LayoutOf(const DenseNet& net, std::string_view id) {
  std::vector<LayoutEntry> layout;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const Layer& layer = net.layers()[l];
    const std::string prefix = std::string(id) + "/" + std::to_string(l);
    layout.push_back({prefix + "/W", static_cast<int>(layer.weight.rows()),
                      static_cast<int>(layer.weight.cols())});
    layout.push_back({prefix + "/b", static_cast<int>(layer.bias.size()), 1});
  }
  return layout;
}

}  // namespace

ParamVector Flatten(const DenseNet& net, std::string_view id) {
  ParamVector pv;
  pv.values.resize(static_cast<Eigen::Index>(net.param_count()));
  net.CopyParams({pv.values.data(), pv.size()});
  pv.layout = LayoutOf(net, id);
  return pv;
}

void Unflatten(const ParamVector& params, DenseNet& net) {
  const auto& layers = net.layers();
  if (params.layout.size() != 2 * layers.size()) {
    throw InputError("Unflatten: layout does not match network depth");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayoutEntry& w = params.layout[2 * l];
    const LayoutEntry& b = params.layout[2 * l + 1];
    if (w.rows != layers[l].weight.rows() || w.cols != layers[l].weight.cols() ||
        b.rows != layers[l].bias.size()) {
      throw InputError("Unflatten: shape mismatch at layer " + std::to_string(l));
    }
  }
  net.LoadParams({params.values.data(), params.size()});
}

ParamVector Backward(const DenseNet& net, const ForwardCache& cache,
                     const Matrix& upstream) {
  ParamVector grad;
  grad.values = Vector::Zero(static_cast<Eigen::Index>(net.param_count()));
  grad.layout = LayoutOf(net, "grad");
  net.Backward(cache, upstream, {grad.values.data(), grad.size()});
  return grad;
}

LossResult CrossEntropy(const Matrix& probs, std::span<const int> targets,
                        int missing) {
  if (static_cast<std::size_t>(probs.rows()) != targets.size()) {
    throw InputError("CrossEntropy: target count does not match rows");
  }
  LossResult result;
  result.gradient = Matrix::Zero(probs.rows(), probs.cols());
  std::size_t count = 0;
  for (int t : targets) {
    if (t == missing) continue;
    if (t < 0 || t >= probs.cols()) {
      throw InputError("CrossEntropy: target index " + std::to_string(t) +
                       " out of range");
    }
    ++count;
  }
  if (count == 0) return result;
  constexpr double kFloor = 1e-300;
  const double inv = 1.0 / static_cast<double>(count);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t == missing) continue;
    const double p = std::max(probs(r, t), kFloor);
    result.value -= std::log(p) * inv;
    result.gradient(r, t) = -inv / p;
  }
  return result;
}

AdamState AdamState::Zeros(std::size_t n, double lr) {
  AdamState s;
  s.m = Vector::Zero(static_cast<Eigen::Index>(n));
  s.v = Vector::Zero(static_cast<Eigen::Index>(n));
  s.lr = lr;
  return s;
}

void AdamStep(AdamState& state, std::span<double> params,
              std::span<const double> grad) {
  const auto n = static_cast<Eigen::Index>(params.size());
  if (state.m.size() != n || state.v.size() != n ||
      static_cast<Eigen::Index>(grad.size()) != n) {
    throw InputError("AdamStep: vector lengths disagree");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = grad[static_cast<std::size_t>(i)];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[static_cast<std::size_t>(i)] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

Vector ClipAndNoise(std::span<const Vector> per_sample, double clip,
                    double noise_multiplier, Rng& rng) {
  if (per_sample.empty()) throw InputError("ClipAndNoise: empty gradient list");
  if (!(clip > 0.0)) throw InputError("ClipAndNoise: clip norm must be positive");
  if (noise_multiplier < 0.0) throw InputError("ClipAndNoise: negative noise multiplier");
  const Eigen::Index dim = per_sample.front().size();
  Vector sum = Vector::Zero(dim);
  for (const Vector& g : per_sample) {
    if (g.size() != dim) throw InputError("ClipAndNoise: gradient lengths differ");
    const double norm = g.norm();
    const double scale = norm > clip ? clip / norm : 1.0;
    sum += scale * g;
  }
  const double n = static_cast<double>(per_sample.size());
  Vector out = sum / n;
  if (noise_multiplier > 0.0) {
    const double stddev = noise_multiplier * clip / n;
    for (Eigen::Index i = 0; i < dim; ++i) out[i] += rng.Normal(0.0, stddev);
  }
  return out;
}

}  // namespace fcm::nn
