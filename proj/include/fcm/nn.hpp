#pragma once

// Minimal dense-network engine: forward/backward passes over batches stored as
// rows, cross-entropy loss, Adam, parameter flattening and the DP-SGD
// clip-and-noise primitive. All arithmetic is double precision.

#include <Eigen/Dense>

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fcm/rng.hpp"

namespace fcm::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kLeakyRelu, kIdentity, kSigmoid, kSoftmax };

inline constexpr double kLeakySlope = 0.01;

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::kIdentity;
};

// Per-layer inputs and activated outputs of one forward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
  bool empty() const { return inputs.empty(); }
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers);

  // Fan-based uniform init in [-sqrt(6/(in+out)), sqrt(6/(in+out))], zero
  // biases. dims has one more entry than activations.
  static DenseNet Create(std::span<const int> dims,
                         std::span<const Activation> activations, Rng& rng);

  bool empty() const { return layers_.empty(); }
  int input_dim() const;
  int output_dim() const;
  std::size_t param_count() const;

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  Matrix Forward(const Matrix& batch, ForwardCache* cache = nullptr) const;

  // Backpropagates `upstream` (d loss / d output, same shape as the output)
  // through the cached pass. Parameter gradients are added into `grad`, laid
  // out as in CopyParams; pass an empty span to skip them. Returns
  // d loss / d input.
  Matrix Backward(const ForwardCache& cache, const Matrix& upstream,
                  std::span<double> grad) const;

  // Flat layout: per layer, the weight matrix in column-major order followed
  // by the bias.
  void CopyParams(std::span<double> out) const;
  void LoadParams(std::span<const double> in);

 private:
  std::vector<Layer> layers_;
};

// Elementwise activation and its backward given the activated output.
Matrix Activate(const Matrix& pre, Activation activation);
Matrix ActivationBackward(const Matrix& pre, const Matrix& out,
                          const Matrix& upstream, Activation activation);

Matrix SoftmaxRows(const Matrix& logits);
// d loss / d logits given softmax output rows and d loss / d probabilities.
Matrix SoftmaxBackward(const Matrix& probs, const Matrix& upstream);

struct LayoutEntry {
  std::string id;
  int rows = 0;
  int cols = 0;
};

struct ParamVector {
  Vector values;
  std::vector<LayoutEntry> layout;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

ParamVector Flatten(const DenseNet& net, std::string_view id);
// Inverse of Flatten; the layout must match the net's shapes.
void Unflatten(const ParamVector& params, DenseNet& net);

// Gradient of one backward pass as a ParamVector with the net's layout.
ParamVector Backward(const DenseNet& net, const ForwardCache& cache,
                     const Matrix& upstream);

struct LossResult {
  double value = 0.0;
  Matrix gradient;  // d loss / d probabilities
};

inline constexpr int kMissing = -1;

// Mean negative log-likelihood over rows whose target is not `missing`.
LossResult CrossEntropy(const Matrix& probs, std::span<const int> targets,
                        int missing = kMissing);

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState Zeros(std::size_t n, double lr);
};

void AdamStep(AdamState& state, std::span<double> params,
              std::span<const double> grad);

// DP-SGD aggregation: clip every per-sample gradient to l2 norm `clip`,
// average, then add N(0, (sigma * clip / n)^2) to every coordinate.
Vector ClipAndNoise(std::span<const Vector> per_sample, double clip,
                    double noise_multiplier, Rng& rng);

}  // namespace fcm::nn
