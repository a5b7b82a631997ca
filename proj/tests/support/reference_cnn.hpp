#pragma once

// Scalar inference pass: nested loops over every output element, no
// unrolling, no matrix library.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vismal/classifier.hpp"

namespace vismal::reference {

struct Map {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(std::size_t ch, std::size_t y, std::size_t x) { return v[(ch * h + y) * w + x]; }
  double at(std::size_t ch, std::size_t y, std::size_t x) const { return v[(ch * h + y) * w + x]; }
};

template <typename T>
Map conv_relu(const Map& in, const Tensor<T>& kernel, const Tensor<T>& bias) {
  const std::size_t f = kernel.shape[0], k = kernel.shape[2];
  const long lead = static_cast<long>((k - 1) / 2);
  Map out{f, in.h, in.w, std::vector<double>(f * in.h * in.w)};
  for (std::size_t o = 0; o < f; ++o) {
    for (std::size_t y = 0; y < in.h; ++y) {
      for (std::size_t x = 0; x < in.w; ++x) {
        double s = bias.data[o];
        for (std::size_t c = 0; c < in.c; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y + ky) - lead;
              const long ix = static_cast<long>(x + kx) - lead;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) continue;
              s += kernel.data[((o * in.c + c) * k + ky) * k + kx] * in.at(c, iy, ix);
            }
          }
        }
        out.at(o, y, x) = std::max(s, 0.0);
      }
    }
  }
  return out;
}

inline Map max_pool(const Map& in, std::size_t size, std::size_t stride) {
  const std::size_t oh = (in.h + stride - 1) / stride, ow = (in.w + stride - 1) / stride;
  auto lead = [&](std::size_t n, std::size_t o) {
    const long total = static_cast<long>((o - 1) * stride + size) - static_cast<long>(n);
    return std::max(total, 0L) / 2;
  };
  const long ly = lead(in.h, oh), lx = lead(in.w, ow);
  Map out{in.c, oh, ow, std::vector<double>(in.c * oh * ow)};
  for (std::size_t c = 0; c < in.c; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t py = 0; py < size; ++py) {
          for (std::size_t px = 0; px < size; ++px) {
            const long iy = static_cast<long>(y * stride + py) - ly;
            const long ix = static_cast<long>(x * stride + px) - lx;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) continue;
            best = std::max(best, in.at(c, iy, ix));
          }
        }
        out.at(c, y, x) = best;
      }
    }
  }
  return out;
}

/// Inference-mode probabilities of one sample.
template <typename T>
std::vector<double> forward_one(const BasicModel<T>& model, const std::vector<double>& pixels) {
  const auto& cfg = model.config;
  Map a{1, cfg.input_height, cfg.input_width, pixels};
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    a = max_pool(conv_relu(a, model.conv_kernel(i), model.conv_bias(i)), cfg.pool_size, cfg.pool_stride);
  }
  std::vector<double> v = a.v;
  const std::size_t layers = cfg.dense.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& wk = model.dense_kernel(l);
    const auto& bk = model.dense_bias(l);
    std::vector<double> z(wk.shape[0]);
    for (std::size_t o = 0; o < z.size(); ++o) {
      double s = bk.data[o];
      for (std::size_t j = 0; j < v.size(); ++j) s += wk.data[o * v.size() + j] * v[j];
      z[o] = (l + 1 < layers) ? std::max(s, 0.0) : s;
    }
    v = z;
  }
  const double top = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (auto& e : v) sum += (e = std::exp(e - top));
  for (auto& e : v) e /= sum;
  return v;
}

}  // namespace vismal::reference
