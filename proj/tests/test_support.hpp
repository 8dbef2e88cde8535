// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries: tiny model configs, a dense
// attention oracle, and a central finite-difference gradient checker.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "taskadapter/attention.hpp"
#include "taskadapter/autograd.hpp"
#include "taskadapter/rng.hpp"
#include "taskadapter/trainer.hpp"

namespace tatest {

using namespace taskadapter;

/// Everything at width 8 so finite differences stay cheap.
inline TrainConfig tiny_config(std::uint64_t seed = 7) {
  TrainConfig c;
  c.seed = seed;
  c.episode.ways = 3;
  c.episode.shots = 1;
  c.episode.queries_per_class = 1;
  c.episode.frames = 4;
  c.videos_per_class = 3;
  auto& v = c.model.visual;
  v.image_size = 32;
  v.patch_size = 16;
  v.width = 8;
  v.depth = 2;
  v.heads = 2;
  v.adapted_layers = 1;
  v.joint_dim = 8;
  v.bottleneck_ratio = 4;
  auto& t = c.model.text;
  t.context_length = 16;
  t.width = 8;
  t.depth = 2;
  t.heads = 2;
  t.adapted_layers = 1;
  c.model.alignment.heads = 2;
  c.train_episodes = 3;
  c.eval_episodes = 4;
  c.threads = 1;
  return c.normalized();
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> out(n);
  for (auto& x : out) x = rng.normal(0.0, scale);
  return out;
}

inline Var random_var(const Shape& shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  return Var::leaf(shape, random_values(shape_size(shape), rng, scale), requires_grad);
}

inline void fill_random(Var tensor, Rng& rng, double scale) {
  for (auto& x : tensor.mutable_values()) x = rng.normal(0.0, scale);
}

/// Overwrites every trainable tensor with small random values.
inline void randomize_trainable(ParameterStore& store, Rng& rng, double scale = 0.3) {
  for (const auto& e : store.entries()) {
    if (e.trainable) fill_random(e.tensor, rng, scale);
  }
}

inline std::vector<double> copy_values(const Var& v) { return {v.values().begin(), v.values().end()}; }

inline double max_abs_diff(const Var& a, const Var& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return a.shape() == b.shape() ? m : INFINITY;
}

/// Plain row-major matrices for the oracle.
using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Var& v) {
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = v.at(r * cols + c);
  return m;
}

inline std::vector<double> affine(const std::vector<double>& x, const Var& w, const Var& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t j = 0; j < out; ++j) {
    double s = b.defined() ? b.at(j) : 0.0;
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w.at(i * out + j);
    y[j] = s;
  }
  return y;
}

/// Multi-head attention written out loop by loop: each query row attends to
/// every context row, heads split the feature axis.
inline Matrix dense_attention(const Matrix& queries, const Matrix& context, const MultiHeadAttentionParams& p,
                              bool causal = false) {
  const std::size_t d = p.width();
  const std::size_t dh = d / p.heads;
  Matrix q, k, v;
  for (const auto& row : queries) q.push_back(affine(row, p.w_q, p.b_q));
  for (const auto& row : context) {
    k.push_back(affine(row, p.w_k, p.b_k));
    v.push_back(affine(row, p.w_v, p.b_v));
  }
  Matrix out;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> mixed(d, 0.0);
    for (std::size_t h = 0; h < p.heads; ++h) {
      std::vector<double> logits;
      for (std::size_t j = 0; j < k.size(); ++j) {
        if (causal && j > i) break;
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += q[i][h * dh + e] * k[j][h * dh + e];
        logits.push_back(s / std::sqrt(static_cast<double>(dh)));
      }
      const double top = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - top));
      for (std::size_t j = 0; j < logits.size(); ++j)
        for (std::size_t e = 0; e < dh; ++e) mixed[h * dh + e] += logits[j] / z * v[j][h * dh + e];
    }
    out.push_back(affine(mixed, p.w_o, p.b_o));
  }
  return out;
}

struct GradCheck {
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

/// Central differences of `loss` with respect to every entry of `tensor`,
/// compared against the analytic gradient by ||a - n|| / max(||a||, ||n||).
/// Tensors whose gradients both vanish report zero error.
inline GradCheck check_gradient(Var tensor, const std::function<Var()>& loss, ParameterStore* store = nullptr,
                                double h = 1e-5) {
  if (store) store->zero_grads();
  tensor.zero_grad();
  loss().backward();
  std::vector<double> analytic(tensor.size(), 0.0);
  if (tensor.has_grad()) analytic = {tensor.grad().begin(), tensor.grad().end()};
  std::vector<double> numeric(tensor.size());
  for (std::size_t i = 0; i < tensor.size(); ++i) {
    auto values = tensor.mutable_values();
    const double saved = values[i];
    double plus, minus;
    {
      NoGradGuard guard;
      values[i] = saved + h;
      plus = loss().item();
      values[i] = saved - h;
      minus = loss().item();
    }
    values[i] = saved;
    numeric[i] = (plus - minus) / (2.0 * h);
  }
  double diff = 0.0, an = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    an += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradCheck r{0.0, std::sqrt(an), std::sqrt(nn)};
  const double scale = std::max(r.analytic_norm, r.numeric_norm);
  r.relative_error = scale < 1e-9 ? std::sqrt(diff) : std::sqrt(diff) / scale;
  if (store) store->zero_grads();
  return r;
}

}  // namespace tatest
