#pragma once

// Central finite differences of the scalar training loss, one parameter at a
// time. Only forward() and loss() are used, never the backward pass.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vismal/classifier.hpp"

namespace vismal::testing {

struct TensorCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

inline double rel_error(double analytic, double numeric) {
  const double den = std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
  return std::abs(analytic - numeric) / den;
}

inline std::vector<TensorCheck> finite_difference_check(const BasicModel<double>& model,
                                                        std::span<const double> inputs,
                                                        std::span<const std::size_t> labels,
                                                        std::uint64_t dropout_seed, double eps) {
  const auto grads = compute_gradients(model, inputs, labels, dropout_seed);
  BasicModel<double> probe = model;
  auto objective = [&] {
    return loss(forward(probe, inputs, true, dropout_seed), labels, probe, probe.config.l2);
  };
  std::vector<TensorCheck> checks;
  for (std::size_t t = 0; t < probe.tensors.size(); ++t) {
    TensorCheck c{probe.tensors[t].name, probe.tensors[t].data.size(), 0.0, 0.0};
    for (std::size_t k = 0; k < probe.tensors[t].data.size(); ++k) {
      double& w = probe.tensors[t].data[k];
      const double saved = w;
      w = saved + eps;
      const double up = objective();
      w = saved - eps;
      const double down = objective();
      w = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads.tensors[t][k];
      c.max_rel_error = std::max(c.max_rel_error, rel_error(analytic, numeric));
      c.max_abs_error = std::max(c.max_abs_error, std::abs(analytic - numeric));
    }
    checks.push_back(c);
  }
  return checks;
}

/// Reduced network: 8x8 input, two conv blocks of 4 filters, one hidden
/// dense layer, two classes.
inline ClassifierConfig reduced_config() {
  ClassifierConfig cfg;
  cfg.input_width = 8;
  cfg.input_height = 8;
  cfg.conv = {{4, 3}, {4, 2}};
  cfg.dense = {6};
  cfg.num_classes = 2;
  cfg.dropout = 0.5;
  cfg.l2 = 0.01;
  cfg.seed = 11;
  return cfg;
}

}  // namespace vismal::testing
