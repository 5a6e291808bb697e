// SPDX-License-Identifier: Apache-2.0
// Naive reference implementations of the filter scores, written directly
// from their definitions. Shared by the unit and acceptance suites.
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "genq/nnkit/model.hpp"

namespace genq::testing {

inline double naive_energy(const std::vector<double>& f, double alpha) {
  long double s = 0;
  for (const double x : f) s += std::exp(static_cast<long double>(-x / alpha));
  return static_cast<double>(-alpha * s);
}

inline double naive_energy_logsumexp(const std::vector<double>& f, double alpha) {
  long double s = 0;
  for (const double x : f) s += std::exp(static_cast<long double>(x / alpha));
  return static_cast<double>(-alpha * std::log(s));
}

struct NaiveStats {
  std::vector<std::vector<double>> mean;  // [layer][channel]
  std::vector<std::vector<double>> sigma;
};

inline double naive_bn_distance(const NaiveStats& a, const NaiveStats& b) {
  double d = 0;
  for (std::size_t l = 0; l < a.mean.size(); ++l) {
    long double dm = 0;
    long double ds = 0;
    for (std::size_t c = 0; c < a.mean[l].size(); ++c) {
      dm += std::pow(static_cast<long double>(a.mean[l][c]) - b.mean[l][c], 2);
      ds += std::pow(static_cast<long double>(a.sigma[l][c]) - b.sigma[l][c], 2);
    }
    d += static_cast<double>(std::sqrt(dm) + std::sqrt(ds));
  }
  return d;
}

/// Per-channel mean and biased std of every BN input over the listed images.
inline NaiveStats naive_batch_stats(const nn::Model& model, const nn::TensorF& images, const std::vector<nn::Index>& rows) {
  std::vector<nn::TensorF> inputs;
  nn::Tape<float> tape;
  tape.set_grad_enabled(false);
  nn::ForwardContext ctx;
  ctx.bn_inputs = &inputs;
  (void)const_cast<nn::Model&>(model).forward(tape, images.gather(rows), ctx);
  NaiveStats s;
  for (const auto& x : inputs) {
    std::vector<double> mean;
    std::vector<double> sigma;
    for (nn::Index c = 0; c < x.dim(1); ++c) {
      long double sum = 0;
      long double count = 0;
      for (nn::Index b = 0; b < x.dim(0); ++b) {
        for (nn::Index i = 0; i < x.dim(2); ++i) {
          for (nn::Index j = 0; j < x.dim(3); ++j) {
            sum += x.at(b, c, i, j);
            count += 1;
          }
        }
      }
      const long double mu = sum / count;
      long double ss = 0;
      for (nn::Index b = 0; b < x.dim(0); ++b) {
        for (nn::Index i = 0; i < x.dim(2); ++i) {
          for (nn::Index j = 0; j < x.dim(3); ++j) ss += std::pow(x.at(b, c, i, j) - mu, 2);
        }
      }
      mean.push_back(static_cast<double>(mu));
      sigma.push_back(static_cast<double>(std::sqrt(ss / count)));
    }
    s.mean.push_back(mean);
    s.sigma.push_back(sigma);
  }
  return s;
}

inline NaiveStats naive_running_stats(const nn::Model& model) {
  NaiveStats s;
  for (const auto& bn : model.bn_layers()) {
    std::vector<double> mean;
    std::vector<double> sigma;
    for (nn::Index c = 0; c < bn.running_mean.size(); ++c) {
      mean.push_back(bn.running_mean[c]);
      sigma.push_back(std::sqrt(static_cast<double>(bn.running_var[c])));
    }
    s.mean.push_back(mean);
    s.sigma.push_back(sigma);
  }
  return s;
}

inline double naive_bn_sensitivity(const nn::Model& model, const nn::TensorF& batch, nn::Index i) {
  std::vector<nn::Index> all;
  std::vector<nn::Index> rest;
  for (nn::Index j = 0; j < batch.dim(0); ++j) {
    all.push_back(j);
    if (j != i) rest.push_back(j);
  }
  const NaiveStats ref = naive_running_stats(model);
  return naive_bn_distance(naive_batch_stats(model, batch, all), ref) -
         naive_bn_distance(naive_batch_stats(model, batch, rest), ref);
}

inline std::vector<std::vector<double>> naive_similarity(const std::vector<std::vector<double>>& o) {
  const std::size_t n = o.size();
  std::vector<std::vector<double>> g(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double dot = 0;
      long double ni = 0;
      long double nj = 0;
      for (std::size_t k = 0; k < o[i].size(); ++k) {
        dot += static_cast<long double>(o[i][k]) * o[j][k];
        ni += static_cast<long double>(o[i][k]) * o[i][k];
        nj += static_cast<long double>(o[j][k]) * o[j][k];
      }
      g[i][j] = static_cast<double>(dot / (std::sqrt(ni) * std::sqrt(nj)));
    }
  }
  return g;
}

/// Gaussian KDE entropy over all entries, trapezoid rule on `grid` points
/// spanning [min - 3h, max + 3h], with no kernel truncation.
inline double naive_entropy(const std::vector<double>& values, double h, int grid = 512) {
  double lo = values[0];
  double hi = values[0];
  for (const double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  lo -= 3 * h;
  hi += 3 * h;
  const double dx = (hi - lo) / (grid - 1);
  long double integral = 0;
  for (int g = 0; g < grid; ++g) {
    const long double x = lo + dx * g;
    long double f = 0;
    for (const double v : values) f += std::exp(-0.5L * std::pow((x - v) / h, 2));
    f /= values.size() * h * std::sqrt(2 * std::numbers::pi_v<long double>);
    const long double term = f > 0 ? f * std::log(f) : 0;
    integral += (g == 0 || g == grid - 1) ? term / 2 : term;
  }
  return static_cast<double>(-integral * dx);
}

inline double naive_scott(const std::vector<double>& values) {
  long double mean = 0;
  for (const double v : values) mean += v;
  mean /= values.size();
  long double ss = 0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  const double sigma = static_cast<double>(std::sqrt(ss / (values.size() - 1)));
  return std::max(1e-3, sigma * std::pow(static_cast<double>(values.size()), -0.2));
}

inline bool close_rel(double a, double b, double rtol, double floor = 1e-12) {
  return std::abs(a - b) <= rtol * std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace genq::testing
