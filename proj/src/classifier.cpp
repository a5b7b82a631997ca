#include "vismal/classifier.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "vismal/error.hpp"
#include "vismal/random.hpp"

namespace vismal {

// ---------------------------------------------------------------------------
// Configuration and shape algebra

namespace {

// TensorFlow "same" convention: the extra padding element goes after.
std::size_t same_pad_before(std::size_t in, std::size_t out, std::size_t stride, std::size_t window) {
  const auto needed = static_cast<std::int64_t>((out - 1) * stride + window) - static_cast<std::int64_t>(in);
  return needed > 0 ? static_cast<std::size_t>(needed / 2) : 0;
}

std::size_t pooled_extent(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

}  // namespace

void ClassifierConfig::validate() const {
  if (input_width == 0 || input_height == 0) throw ConfigError("input size must be positive");
  if (conv.empty()) throw ConfigError("at least one conv block is required");
  for (const auto& c : conv) {
    if (c.filters == 0 || c.kernel == 0) throw ConfigError("conv filters and kernel must be positive");
  }
  if (pool_size == 0 || pool_stride == 0) throw ConfigError("pool size and stride must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  for (auto d : dense) {
    if (d == 0) throw ConfigError("dense widths must be positive");
  }
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be non-negative");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

std::vector<FeatureShape> ClassifierConfig::block_shapes() const {
  std::vector<FeatureShape> shapes;
  FeatureShape s{1, input_height, input_width};
  for (const auto& c : conv) {
    s = {c.filters, pooled_extent(s.height, pool_stride), pooled_extent(s.width, pool_stride)};
    shapes.push_back(s);
  }
  return shapes;
}

std::size_t ClassifierConfig::flatten_size() const { return block_shapes().back().size(); }

bool ClassifierConfig::same_architecture(const ClassifierConfig& o) const {
  return input_width == o.input_width && input_height == o.input_height && conv == o.conv &&
         pool_size == o.pool_size && pool_stride == o.pool_stride && dense == o.dense &&
         num_classes == o.num_classes;
}

template <typename T>
BasicModel<T> BasicModel<T>::zeros(const ClassifierConfig& cfg) {
  cfg.validate();
  BasicModel<T> model;
  model.config = cfg;
  std::size_t channels = 1;
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& c = cfg.conv[i];
    const std::string prefix = "conv" + std::to_string(i + 1);
    model.tensors.push_back({prefix + ".kernel", {c.filters, channels, c.kernel, c.kernel},
                             AlignedVector<T>(c.filters * channels * c.kernel * c.kernel, T(0))});
    model.tensors.push_back({prefix + ".bias", {c.filters}, AlignedVector<T>(c.filters, T(0))});
    channels = c.filters;
  }
  std::size_t width = cfg.flatten_size();
  std::vector<std::size_t> outs = cfg.dense;
  outs.push_back(cfg.num_classes);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const std::string prefix = "dense" + std::to_string(i + 1);
    model.tensors.push_back({prefix + ".kernel", {outs[i], width}, AlignedVector<T>(outs[i] * width, T(0))});
    model.tensors.push_back({prefix + ".bias", {outs[i]}, AlignedVector<T>(outs[i], T(0))});
    width = outs[i];
  }
  return model;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.data.size();
  return n;
}

template <typename T>
BasicModel<T> init_model(const ClassifierConfig& cfg) {
  auto model = BasicModel<T>::zeros(cfg);
  for (std::size_t i = 0; i < model.tensors.size(); i += 2) {
    auto& kernel = model.tensors[i];
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < kernel.shape.size(); ++d) fan_in *= kernel.shape[d];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(cfg.seed, i));
    for (auto& w : kernel.data) w = static_cast<T>((2.0 * uniform_unit(rng) - 1.0) * limit);
  }
  return model;
}

template <typename T>
AlignedVector<T> to_input(std::span<const GrayImage> images, const ClassifierConfig& cfg) {
  AlignedVector<T> out;
  out.reserve(images.size() * cfg.input_width * cfg.input_height);
  for (const auto& img : images) {
    if (img.width() != cfg.input_width || img.height() != cfg.input_height) {
      throw ShapeError("expected " + std::to_string(cfg.input_width) + "x" +
                       std::to_string(cfg.input_height) + " input, got " +
                       std::to_string(img.width()) + "x" + std::to_string(img.height()));
    }
    for (auto p : img.pixels()) out.push_back(static_cast<T>(p) / T(255));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Unrolls k x k same-padded patches: row (c * k + ky) * k + kx, column y * W + x.
template <typename T>
void im2col(const T* in, const FeatureShape& s, std::size_t k, T* col) {
  const auto pad = static_cast<std::int64_t>((k - 1) / 2);
  const auto h = static_cast<std::int64_t>(s.height);
  const auto w = static_cast<std::int64_t>(s.width);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const T* plane = in + c * s.height * s.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * s.height * s.width;
        const auto dy = static_cast<std::int64_t>(ky) - pad;
        const auto dx = static_cast<std::int64_t>(kx) - pad;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t iy = y + dy;
          T* row = dst + y * w;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + w, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t ix = x + dx;
            row[x] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const FeatureShape& s, std::size_t k, T* out) {
  const auto pad = static_cast<std::int64_t>((k - 1) / 2);
  const auto h = static_cast<std::int64_t>(s.height);
  const auto w = static_cast<std::int64_t>(s.width);
  std::fill(out, out + s.size(), T(0));
  for (std::size_t c = 0; c < s.channels; ++c) {
    T* plane = out + c * s.height * s.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * s.height * s.width;
        const auto dy = static_cast<std::int64_t>(ky) - pad;
        const auto dx = static_cast<std::int64_t>(kx) - pad;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + iy * w;
          const T* row = src + y * w;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t ix = x + dx;
            if (ix >= 0 && ix < w) dst[ix] += row[x];
          }
        }
      }
    }
  }
}

// Same-padded max pooling; padding never wins. argmax holds the flat input
// index of each output's maximum.
template <typename T>
void max_pool(const T* in, const FeatureShape& s, const FeatureShape& o, std::size_t size,
              std::size_t stride, T* out, std::uint32_t* argmax) {
  const auto pad_y = static_cast<std::int64_t>(same_pad_before(s.height, o.height, stride, size));
  const auto pad_x = static_cast<std::int64_t>(same_pad_before(s.width, o.width, stride, size));
  for (std::size_t c = 0; c < s.channels; ++c) {
    const std::size_t plane = c * s.height * s.width;
    for (std::size_t oy = 0; oy < o.height; ++oy) {
      for (std::size_t ox = 0; ox < o.width; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_idx = 0;
        for (std::size_t py = 0; py < size; ++py) {
          const std::int64_t iy = static_cast<std::int64_t>(oy * stride + py) - pad_y;
          if (iy < 0 || iy >= static_cast<std::int64_t>(s.height)) continue;
          for (std::size_t px = 0; px < size; ++px) {
            const std::int64_t ix = static_cast<std::int64_t>(ox * stride + px) - pad_x;
            if (ix < 0 || ix >= static_cast<std::int64_t>(s.width)) continue;
            const auto idx = static_cast<std::uint32_t>(plane + iy * s.width + ix);
            if (in[idx] > best) {
              best = in[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o_idx = (c * o.height + oy) * o.width + ox;
        out[o_idx] = best;
        argmax[o_idx] = best_idx;
      }
    }
  }
}

template <typename T>
AlignedVector<T> dropout_mask(std::size_t n, double rate, std::uint64_t seed) {
  AlignedVector<T> mask(n);
  Rng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask) m = uniform_unit(rng) >= rate ? keep_scale : T(0);
  return mask;
}

template <typename T>
struct BlockTrace {
  AlignedVector<T> input;       // block input
  AlignedVector<T> activation;  // ReLU output before pooling
  std::vector<std::uint32_t> argmax;
};

template <typename T>
struct ForwardPass {
  std::vector<std::vector<BlockTrace<T>>> blocks;  // [sample][block]
  std::vector<AlignedVector<T>> masks;               // [sample], empty outside train mode
  std::vector<RowMat<T>> dense_inputs;             // N x in for each dense layer
  std::vector<RowMat<T>> dense_pre;                // N x out pre-activations
  RowMat<T> probs;                                 // N x classes
};

template <typename T>
ForwardPass<T> run_forward(const BasicModel<T>& model, std::span<const T> inputs, bool train_mode,
                           std::uint64_t dropout_seed, bool keep_trace) {
  const auto& cfg = model.config;
  const std::size_t per_sample = cfg.input_width * cfg.input_height;
  if (per_sample == 0 || inputs.size() % per_sample != 0 || inputs.empty()) {
    throw ShapeError("input length is not a whole number of " + std::to_string(cfg.input_width) +
                     "x" + std::to_string(cfg.input_height) + " samples");
  }
  const std::size_t n = inputs.size() / per_sample;
  const auto shapes = cfg.block_shapes();
  const std::size_t flat = shapes.back().size();

  ForwardPass<T> pass;
  if (keep_trace) pass.blocks.resize(n);
  pass.masks.resize(n);
  RowMat<T> features(n, flat);
  AlignedVector<T> col;
  AlignedVector<T> act;
  AlignedVector<T> pooled;
  std::vector<std::uint32_t> argmax;

  for (std::size_t i = 0; i < n; ++i) {
    AlignedVector<T> current(inputs.begin() + i * per_sample, inputs.begin() + (i + 1) * per_sample);
    FeatureShape in_shape{1, cfg.input_height, cfg.input_width};
    for (std::size_t b = 0; b < cfg.conv.size(); ++b) {
      const auto& spec = cfg.conv[b];
      const std::size_t hw = in_shape.height * in_shape.width;
      const std::size_t patch = in_shape.channels * spec.kernel * spec.kernel;
      col.resize(patch * hw);
      im2col(current.data(), in_shape, spec.kernel, col.data());
      act.resize(spec.filters * hw);
      MatMap<T> out(act.data(), spec.filters, hw);
      out.noalias() = ConstMatMap<T>(model.conv_kernel(b).data.data(), spec.filters, patch) *
                      ConstMatMap<T>(col.data(), patch, hw);
      const auto& bias = model.conv_bias(b).data;
      for (std::size_t f = 0; f < spec.filters; ++f) {
        T* row = act.data() + f * hw;
        for (std::size_t p = 0; p < hw; ++p) row[p] = std::max(row[p] + bias[f], T(0));
      }
      const FeatureShape act_shape{spec.filters, in_shape.height, in_shape.width};
      const FeatureShape& out_shape = shapes[b];
      pooled.resize(out_shape.size());
      argmax.resize(out_shape.size());
      max_pool(act.data(), act_shape, out_shape, cfg.pool_size, cfg.pool_stride, pooled.data(),
               argmax.data());
      if (keep_trace) {
        pass.blocks[i].push_back({std::move(current), act, argmax});
      }
      current = pooled;
      in_shape = out_shape;
    }
    if (train_mode && cfg.dropout > 0.0) {
      pass.masks[i] = dropout_mask<T>(flat, cfg.dropout, derive_seed(dropout_seed, i));
      for (std::size_t k = 0; k < flat; ++k) current[k] *= pass.masks[i][k];
    }
    std::copy(current.begin(), current.end(), features.row(i).data());
  }

  const std::size_t layers = cfg.dense.size() + 1;
  RowMat<T> a = std::move(features);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& kernel = model.dense_kernel(l);
    const auto& bias = model.dense_bias(l);
    ConstMatMap<T> w(kernel.data.data(), kernel.shape[0], kernel.shape[1]);
    RowMat<T> z = a * w.transpose();
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) += bias.data[c];
    }
    if (keep_trace) pass.dense_inputs.push_back(a);
    if (l + 1 < layers) {
      if (keep_trace) pass.dense_pre.push_back(z);
      a = z.cwiseMax(T(0));
    } else {
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const T top = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - top).exp();
        z.row(r) /= z.row(r).sum();
      }
      pass.probs = std::move(z);
    }
  }
  return pass;
}

template <typename T>
ProbabilityMatrix to_probability_matrix(const RowMat<T>& probs) {
  ProbabilityMatrix out;
  out.rows = static_cast<std::size_t>(probs.rows());
  out.cols = static_cast<std::size_t>(probs.cols());
  out.values.resize(out.rows * out.cols);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) out.values[r * out.cols + c] = probs(r, c);
  }
  return out;
}

void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) throw ShapeError("label count does not match batch size");
  for (auto y : labels) {
    if (y >= classes) throw LabelError("label " + std::to_string(y) + " out of range");
  }
}

}  // namespace

template <typename T>
ProbabilityMatrix forward(const BasicModel<T>& model, std::span<const T> inputs, bool train_mode,
                          std::uint64_t dropout_seed) {
  return to_probability_matrix(run_forward(model, inputs, train_mode, dropout_seed, false).probs);
}

ProbabilityMatrix forward(const Model& model, std::span<const GrayImage> images, bool train_mode,
                          std::uint64_t dropout_seed) {
  const auto inputs = to_input<float>(images, model.config);
  return forward<float>(model, inputs, train_mode, dropout_seed);
}

template <typename T>
double l2_penalty(const BasicModel<T>& model, double l2) {
  if (l2 == 0.0) return 0.0;
  double sum = 0.0;
  for (std::size_t b = 0; b < model.config.conv.size(); ++b) {
    for (auto w : model.conv_kernel(b).data) sum += static_cast<double>(w) * static_cast<double>(w);
  }
  return l2 * sum;
}

template <typename T>
double loss(const ProbabilityMatrix& probs, std::span<const std::size_t> labels,
            const BasicModel<T>& model, double l2) {
  check_labels(labels, probs.rows, probs.cols);
  double ce = 0.0;
  for (std::size_t r = 0; r < probs.rows; ++r) {
    ce -= std::log(std::max(probs.row(r)[labels[r]], 1e-12));
  }
  if (probs.rows > 0) ce /= static_cast<double>(probs.rows);
  return ce + l2_penalty(model, l2);
}

template <typename T>
Gradients<T> compute_gradients(const BasicModel<T>& model, std::span<const T> inputs,
                               std::span<const std::size_t> labels, std::uint64_t dropout_seed) {
  const auto& cfg = model.config;
  auto pass = run_forward(model, inputs, true, dropout_seed, true);
  const std::size_t n = static_cast<std::size_t>(pass.probs.rows());
  check_labels(labels, n, cfg.num_classes);

  Gradients<T> grads;
  grads.probs = to_probability_matrix(pass.probs);
  grads.loss = loss(grads.probs, labels, model, cfg.l2);
  grads.tensors.resize(model.tensors.size());
  for (std::size_t i = 0; i < model.tensors.size(); ++i) {
    grads.tensors[i].assign(model.tensors[i].data.size(), T(0));
  }

  // Dense stack.
  RowMat<T> dz = pass.probs;
  for (std::size_t r = 0; r < n; ++r) dz(r, labels[r]) -= T(1);
  dz /= static_cast<T>(n);
  const std::size_t layers = cfg.dense.size() + 1;
  const std::size_t dense_base = 2 * cfg.conv.size();
  RowMat<T> da;
  for (std::size_t l = layers; l-- > 0;) {
    const auto& kernel = model.dense_kernel(l);
    MatMap<T> dw(grads.tensors[dense_base + 2 * l].data(), kernel.shape[0], kernel.shape[1]);
    dw.noalias() = dz.transpose() * pass.dense_inputs[l];
    auto& db = grads.tensors[dense_base + 2 * l + 1];
    for (Eigen::Index c = 0; c < dz.cols(); ++c) db[c] = dz.col(c).sum();
    ConstMatMap<T> w(kernel.data.data(), kernel.shape[0], kernel.shape[1]);
    da = dz * w;
    if (l > 0) {
      dz = da.cwiseProduct((pass.dense_pre[l - 1].array() > T(0)).matrix().template cast<T>());
    }
  }

  // Conv stack, one sample at a time.
  const auto shapes = cfg.block_shapes();
  AlignedVector<T> col;
  AlignedVector<T> dcol;
  AlignedVector<T> dact;
  for (std::size_t i = 0; i < n; ++i) {
    AlignedVector<T> dpooled(da.row(i).data(), da.row(i).data() + da.cols());
    if (!pass.masks[i].empty()) {
      for (std::size_t k = 0; k < dpooled.size(); ++k) dpooled[k] *= pass.masks[i][k];
    }
    FeatureShape in_shape{1, cfg.input_height, cfg.input_width};
    std::vector<FeatureShape> in_shapes;
    for (const auto& s : shapes) {
      in_shapes.push_back(in_shape);
      in_shape = s;
    }
    for (std::size_t b = cfg.conv.size(); b-- > 0;) {
      const auto& spec = cfg.conv[b];
      const auto& trace = pass.blocks[i][b];
      const FeatureShape& ins = in_shapes[b];
      const std::size_t hw = ins.height * ins.width;
      const std::size_t patch = ins.channels * spec.kernel * spec.kernel;

      dact.assign(spec.filters * hw, T(0));
      for (std::size_t k = 0; k < dpooled.size(); ++k) dact[trace.argmax[k]] += dpooled[k];
      for (std::size_t k = 0; k < dact.size(); ++k) {
        if (!(trace.activation[k] > T(0))) dact[k] = T(0);
      }

      col.resize(patch * hw);
      im2col(trace.input.data(), ins, spec.kernel, col.data());
      ConstMatMap<T> dout(dact.data(), spec.filters, hw);
      ConstMatMap<T> cols(col.data(), patch, hw);
      MatMap<T> dw(grads.tensors[2 * b].data(), spec.filters, patch);
      dw.noalias() += dout * cols.transpose();
      auto& db = grads.tensors[2 * b + 1];
      for (std::size_t f = 0; f < spec.filters; ++f) db[f] += dout.row(f).sum();

      if (b > 0) {
        dcol.resize(patch * hw);
        MatMap<T> dc(dcol.data(), patch, hw);
        dc.noalias() = ConstMatMap<T>(model.conv_kernel(b).data.data(), spec.filters, patch).transpose() * dout;
        dpooled.resize(ins.size());
        col2im(dcol.data(), ins, spec.kernel, dpooled.data());
      }
    }
  }

  if (cfg.l2 != 0.0) {
    const T scale = static_cast<T>(2.0 * cfg.l2);
    for (std::size_t b = 0; b < cfg.conv.size(); ++b) {
      const auto& w = model.conv_kernel(b).data;
      auto& g = grads.tensors[2 * b];
      for (std::size_t k = 0; k < w.size(); ++k) g[k] += scale * w[k];
    }
  }
  return grads;
}

template <typename T>
AdamState<T> AdamState<T>::for_model(const BasicModel<T>& model) {
  AdamState state;
  for (const auto& t : model.tensors) {
    state.m.emplace_back(t.data.size(), T(0));
    state.v.emplace_back(t.data.size(), T(0));
  }
  return state;
}

template <typename T>
Gradients<T> backward_and_step(BasicModel<T>& model, std::span<const T> inputs,
                               std::span<const std::size_t> labels, AdamState<T>& adam,
                               std::uint64_t dropout_seed) {
  auto grads = compute_gradients(model, inputs, labels, dropout_seed);
  if (!std::isfinite(grads.loss)) {
    throw NumericsError("non-finite loss at optimizer step " + std::to_string(adam.step + 1));
  }
  for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
    for (auto g : grads.tensors[i]) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericsError("non-finite gradient in " + model.tensors[i].name + " at optimizer step " +
                            std::to_string(adam.step + 1));
      }
    }
  }
  const auto& cfg = model.config;
  if (adam.m.size() != model.tensors.size()) adam = AdamState<T>::for_model(model);
  ++adam.step;
  const double t = static_cast<double>(adam.step);
  const T lr = static_cast<T>(cfg.learning_rate * std::sqrt(1.0 - std::pow(cfg.beta2, t)) /
                              (1.0 - std::pow(cfg.beta1, t)));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < model.tensors.size(); ++i) {
    auto& w = model.tensors[i].data;
    auto& m = adam.m[i];
    auto& v = adam.v[i];
    const auto& g = grads.tensors[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      w[k] -= lr * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Training and inference

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

TrainResult train(Model model, std::span<const LabeledSample> dataset) {
  const auto& cfg = model.config;
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  for (const auto& s : dataset) {
    if (s.label >= cfg.num_classes) {
      throw LabelError("label " + std::to_string(s.label) + " exceeds num_classes " +
                       std::to_string(cfg.num_classes));
    }
  }

  TrainResult result;
  auto adam = AdamState<float>::for_model(model);
  std::vector<std::size_t> order(dataset.size());
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stalled = 0;
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, 0x100000 + epoch));
    shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<GrayImage> images;
      std::vector<std::size_t> labels;
      for (std::size_t k = start; k < end; ++k) {
        images.push_back(dataset[order[k]].image);
        labels.push_back(dataset[order[k]].label);
      }
      const auto inputs = to_input<float>(images, cfg);
      const auto grads = backward_and_step<float>(model, inputs, labels, adam,
                                                  derive_seed(cfg.seed, 0x200000 + step++));
      loss_sum += grads.loss * static_cast<double>(end - start);
      for (std::size_t r = 0; r < labels.size(); ++r) {
        if (argmax(grads.probs.row(r)) == labels[r]) ++correct;
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(dataset.size());
    result.log.push_back({epoch + 1, epoch_loss,
                          static_cast<double>(correct) / static_cast<double>(dataset.size())});

    if (cfg.patience > 0) {
      if (best_loss - epoch_loss < cfg.early_stop_tol * std::abs(best_loss)) {
        if (++stalled >= cfg.patience) break;
      } else {
        stalled = 0;
      }
      best_loss = std::min(best_loss, epoch_loss);
    }
  }
  result.model = std::move(model);
  return result;
}

void write_training_log_csv(std::span<const EpochLog> log, std::ostream& out) {
  out << "epoch,loss,train_accuracy\n";
  for (const auto& e : log) {
    std::ostringstream line;
    line.precision(9);
    line << e.epoch << ',' << e.loss << ',' << e.train_accuracy << '\n';
    out << line.str();
  }
}

Prediction predict(const Model& model, const GrayImage& image) {
  const auto probs = forward(model, std::span<const GrayImage>(&image, 1), false);
  Prediction p;
  p.probabilities.assign(probs.values.begin(), probs.values.end());
  p.label = argmax(p.probabilities);
  return p;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr std::array<char, 8> kMagic = {'V', 'I', 'S', 'M', 'A', 'L', 'M', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("model file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string get_string(std::istream& in, std::uint32_t max_len = 1u << 20) {
  const auto len = get_u32(in);
  if (len > max_len) throw FormatError("model file has an implausible string length");
  std::string s(len, '\0');
  if (len && !in.read(s.data(), len)) throw FormatError("model file truncated");
  return s;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw FormatError("bad integer list in model header: " + s);
    }
  }
  return out;
}

std::string architecture_text(const ClassifierConfig& cfg) {
  std::vector<std::size_t> filters;
  std::vector<std::size_t> kernels;
  for (const auto& c : cfg.conv) {
    filters.push_back(c.filters);
    kernels.push_back(c.kernel);
  }
  std::ostringstream out;
  out.precision(17);
  out << "input_width=" << cfg.input_width << '\n'
      << "input_height=" << cfg.input_height << '\n'
      << "conv_filters=" << join_sizes(filters) << '\n'
      << "conv_kernels=" << join_sizes(kernels) << '\n'
      << "pool_size=" << cfg.pool_size << '\n'
      << "pool_stride=" << cfg.pool_stride << '\n'
      << "dropout=" << cfg.dropout << '\n'
      << "dense=" << join_sizes(cfg.dense) << '\n'
      << "num_classes=" << cfg.num_classes << '\n'
      << "l2=" << cfg.l2 << '\n';
  return out.str();
}

ClassifierConfig parse_architecture(const std::string& text) {
  ClassifierConfig cfg;
  std::vector<std::size_t> filters;
  std::vector<std::size_t> kernels;
  std::stringstream ss(text);
  std::string line;
  try {
    while (std::getline(ss, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "input_width") cfg.input_width = std::stoull(value);
      else if (key == "input_height") cfg.input_height = std::stoull(value);
      else if (key == "conv_filters") filters = split_sizes(value);
      else if (key == "conv_kernels") kernels = split_sizes(value);
      else if (key == "pool_size") cfg.pool_size = std::stoull(value);
      else if (key == "pool_stride") cfg.pool_stride = std::stoull(value);
      else if (key == "dropout") cfg.dropout = std::stod(value);
      else if (key == "dense") cfg.dense = split_sizes(value);
      else if (key == "num_classes") cfg.num_classes = std::stoull(value);
      else if (key == "l2") cfg.l2 = std::stod(value);
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception&) {
    throw FormatError("malformed model header line: " + line);
  }
  if (filters.size() != kernels.size()) throw FormatError("conv filter/kernel lists differ in length");
  cfg.conv.clear();
  for (std::size_t i = 0; i < filters.size(); ++i) cfg.conv.push_back({filters[i], kernels[i]});
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid architecture in model file: ") + e.what());
  }
  return cfg;
}

}  // namespace

void save_model(const Model& model, std::ostream& out) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_string(out, architecture_text(model.config));
  put_u32(out, static_cast<std::uint32_t>(model.class_names.size()));
  for (const auto& name : model.class_names) put_string(out, name);
  put_u32(out, static_cast<std::uint32_t>(model.tensors.size()));
  for (const auto& t : model.tensors) {
    put_string(out, t.name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u32(out, bits);
    }
  }
  if (!out) throw IoError("failed to write model");
}

void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  save_model(model, out);
}

Model load_model(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("not a model file (bad magic)");
  }
  const auto version = get_u32(in);
  if (version != kVersion) throw FormatError("unsupported model version " + std::to_string(version));
  Model model = Model::zeros(parse_architecture(get_string(in)));
  const auto names = get_u32(in);
  if (names > 1u << 20) throw FormatError("implausible class name count");
  for (std::uint32_t i = 0; i < names; ++i) model.class_names.push_back(get_string(in));
  const auto count = get_u32(in);
  if (count != model.tensors.size()) throw FormatError("tensor count does not match architecture");
  for (auto& t : model.tensors) {
    if (get_string(in) != t.name) throw FormatError("unexpected tensor " + t.name);
    const auto rank = get_u32(in);
    if (rank != t.shape.size()) throw FormatError("rank mismatch for " + t.name);
    for (auto d : t.shape) {
      if (get_u32(in) != d) throw FormatError("shape mismatch for " + t.name);
    }
    for (auto& v : t.data) {
      const std::uint32_t bits = get_u32(in);
      std::memcpy(&v, &bits, sizeof v);
    }
  }
  return model;
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_model(in);
}

Model load_model(const std::filesystem::path& path, const ClassifierConfig& expected) {
  Model model = load_model(path);
  if (!model.config.same_architecture(expected)) {
    throw ConfigError("model file architecture does not match the configured classifier");
  }
  return model;
}

// ---------------------------------------------------------------------------

#define VISMAL_INSTANTIATE(T)                                                                     \
  template struct BasicModel<T>;                                                                  \
  template struct AdamState<T>;                                                                   \
  template BasicModel<T> init_model<T>(const ClassifierConfig&);                                  \
  template AlignedVector<T> to_input<T>(std::span<const GrayImage>, const ClassifierConfig&);       \
  template ProbabilityMatrix forward<T>(const BasicModel<T>&, std::span<const T>, bool, std::uint64_t); \
  template double l2_penalty<T>(const BasicModel<T>&, double);                                    \
  template double loss<T>(const ProbabilityMatrix&, std::span<const std::size_t>, const BasicModel<T>&, double); \
  template Gradients<T> compute_gradients<T>(const BasicModel<T>&, std::span<const T>,            \
                                             std::span<const std::size_t>, std::uint64_t);        \
  template Gradients<T> backward_and_step<T>(BasicModel<T>&, std::span<const T>,                  \
                                             std::span<const std::size_t>, AdamState<T>&, std::uint64_t);

VISMAL_INSTANTIATE(float)
VISMAL_INSTANTIATE(double)

#undef VISMAL_INSTANTIATE

}  // namespace vismal
