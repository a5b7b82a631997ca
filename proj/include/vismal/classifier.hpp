#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "vismal/image.hpp"

namespace vismal {

/// 64-byte aligned allocation. Vectorized reductions then see the same
/// alignment on every run, which keeps floating point results reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

struct ConvSpec {
  std::size_t filters = 0;
  std::size_t kernel = 0;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Channels x height x width of a feature map.
struct FeatureShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

struct ClassifierConfig {
  // Architecture. Each conv block is conv (same padding, stride 1) + ReLU +
  // max-pool (same padding); then dropout, flatten, ReLU dense layers and a
  // softmax output layer.
  std::size_t input_width = 64;
  std::size_t input_height = 64;
  std::vector<ConvSpec> conv = {{64, 5}, {128, 5}, {256, 2}, {256, 2}};
  std::size_t pool_size = 2;
  std::size_t pool_stride = 2;
  double dropout = 0.5;
  std::vector<std::size_t> dense = {256, 128};
  std::size_t num_classes = 25;
  double l2 = 0.01;

  // Optimization.
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double early_stop_tol = 1e-3;  // relative loss improvement counted as progress
  std::size_t patience = 2;      // 0 disables early stopping
  std::uint64_t seed = 0x5eed;

  void validate() const;

  /// Shape after each conv block (pooling applied).
  std::vector<FeatureShape> block_shapes() const;
  std::size_t flatten_size() const;

  /// True when the two configs describe the same tensors.
  bool same_architecture(const ClassifierConfig& other) const;
};

template <typename T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  AlignedVector<T> data;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Learned parameters. Tensor order: conv{i}.kernel [F, C, k, k],
/// conv{i}.bias [F] for each block, then dense{i}.kernel [out, in],
/// dense{i}.bias [out] for every dense layer including the output layer.
template <typename T>
struct BasicModel {
  ClassifierConfig config;
  std::vector<Tensor<T>> tensors;
  std::vector<std::string> class_names;

  /// Zero-filled tensors of the right shapes.
  static BasicModel zeros(const ClassifierConfig& cfg);

  Tensor<T>& conv_kernel(std::size_t i) { return tensors[2 * i]; }
  Tensor<T>& conv_bias(std::size_t i) { return tensors[2 * i + 1]; }
  const Tensor<T>& conv_kernel(std::size_t i) const { return tensors[2 * i]; }
  const Tensor<T>& conv_bias(std::size_t i) const { return tensors[2 * i + 1]; }
  const Tensor<T>& dense_kernel(std::size_t i) const { return tensors[2 * (config.conv.size() + i)]; }
  const Tensor<T>& dense_bias(std::size_t i) const { return tensors[2 * (config.conv.size() + i) + 1]; }
  std::size_t parameter_count() const;

  friend bool operator==(const BasicModel& a, const BasicModel& b) {
    return a.config.same_architecture(b.config) && a.tensors == b.tensors &&
           a.class_names == b.class_names;
  }
};

using Model = BasicModel<float>;

/// Row-major batch of class probability vectors.
struct ProbabilityMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
};

/// He-uniform kernels, zero biases, drawn from cfg.seed.
template <typename T = float>
BasicModel<T> init_model(const ClassifierConfig& cfg);

/// Converts images to network input (value / 255). Throws ShapeError when an
/// image is not input_width x input_height.
template <typename T>
AlignedVector<T> to_input(std::span<const GrayImage> images, const ClassifierConfig& cfg);

/// Softmax probabilities. `inputs` holds N samples of input_height *
/// input_width scaled pixels. Dropout only runs in train mode, with masks
/// drawn from `dropout_seed`.
template <typename T>
ProbabilityMatrix forward(const BasicModel<T>& model, std::span<const T> inputs, bool train_mode,
                          std::uint64_t dropout_seed = 0);

ProbabilityMatrix forward(const Model& model, std::span<const GrayImage> images, bool train_mode,
                          std::uint64_t dropout_seed = 0);

/// Penalty l2 * sum of squared conv kernel weights.
template <typename T>
double l2_penalty(const BasicModel<T>& model, double l2);

/// Mean cross-entropy (log clamped at 1e-12) plus the L2 penalty.
template <typename T>
double loss(const ProbabilityMatrix& probs, std::span<const std::size_t> labels,
            const BasicModel<T>& model, double l2);

/// Gradient of the full loss w.r.t. every tensor, in model tensor order.
template <typename T>
struct Gradients {
  double loss = 0.0;
  std::vector<AlignedVector<T>> tensors;
  ProbabilityMatrix probs;
};

template <typename T>
Gradients<T> compute_gradients(const BasicModel<T>& model, std::span<const T> inputs,
                               std::span<const std::size_t> labels, std::uint64_t dropout_seed);

template <typename T>
struct AdamState {
  std::vector<AlignedVector<T>> m;
  std::vector<AlignedVector<T>> v;
  std::uint64_t step = 0;

  static AdamState for_model(const BasicModel<T>& model);
};

/// One optimizer step on a batch. Returns the batch loss and probabilities
/// computed before the update. Throws NumericsError on a non-finite loss or
/// gradient.
template <typename T>
Gradients<T> backward_and_step(BasicModel<T>& model, std::span<const T> inputs,
                               std::span<const std::size_t> labels, AdamState<T>& adam,
                               std::uint64_t dropout_seed);

struct LabeledSample {
  GrayImage image;
  std::size_t label = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

/// Seeded shuffled mini-batch training with early stopping on a plateaued loss.
TrainResult train(Model model, std::span<const LabeledSample> dataset);

void write_training_log_csv(std::span<const EpochLog> log, std::ostream& out);

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

/// Argmax of the inference-mode probabilities, lowest index on ties.
Prediction predict(const Model& model, const GrayImage& image);

std::size_t argmax(std::span<const double> values);

/// Binary container: magic, version, architecture text, class names, then
/// each tensor as name, shape and little-endian float32 data.
void save_model(const Model& model, std::ostream& out);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(std::istream& in);
Model load_model(const std::filesystem::path& path);
/// Throws ConfigError when the stored architecture differs from `expected`.
Model load_model(const std::filesystem::path& path, const ClassifierConfig& expected);

}  // namespace vismal
