// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/attention.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "taskadapter/errors.hpp"

namespace taskadapter {

namespace {

void check_finite(const Var& x, const char* where) {
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(where) + ": non-finite input");
  }
}

}  // namespace

Var layer_norm(const Var& x, const LayerNormParams& params) {
  return layer_norm(x, params.gain, params.bias, kLayerNormEpsilon);
}

Var mlp_block(const Var& x, const MlpParams& params) {
  return linear(gelu(linear(x, params.w_in, params.b_in)), params.w_out, params.b_out);
}

Var multi_head_self_attention(const Var& x, const MultiHeadAttentionParams& params, std::size_t axis,
                              bool causal) {
  const std::size_t rank = x.rank();
  if (rank < 2 || axis + 1 >= rank) {
    throw ContractError("attention axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
  }
  if (x.shape().back() != params.width()) {
    throw ContractError("attention width mismatch: " + shape_string(x.shape()));
  }
  check_finite(x, "multi_head_self_attention");

  // Move the attended axis next to the feature axis and flatten the rest.
  std::vector<std::size_t> order;
  for (std::size_t a = 0; a + 1 < rank; ++a) {
    if (a != axis) order.push_back(a);
  }
  order.push_back(axis);
  order.push_back(rank - 1);
  const bool identity = axis + 2 == rank;
  Var moved = identity ? x : permute(x, order);
  const Shape moved_shape = moved.shape();
  const std::size_t seq = x.dim(axis);
  const std::size_t width = x.shape().back();
  const Var flat = reshape(moved, {moved.size() / (seq * width), seq, width});

  const Var q = linear(flat, params.w_q, params.b_q);
  const Var k = linear(flat, params.w_k, params.b_k);
  const Var v = linear(flat, params.w_v, params.b_v);
  const Var attended = scaled_dot_product_attention(q, k, v, params.heads, causal);
  const Var projected = reshape(linear(attended, params.w_o, params.b_o), moved_shape);
  if (identity) return projected;

  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[order[i]] = i;
  return permute(projected, inverse);
}

Var multi_head_cross_attention(const Var& queries, const Var& context, const MultiHeadAttentionParams& params) {
  if (queries.rank() != 3 || context.rank() != 3 || queries.dim(0) != context.dim(0)) {
    throw ContractError("cross attention expects [B, Sq, D] and [B, Sk, D]");
  }
  check_finite(queries, "multi_head_cross_attention");
  check_finite(context, "multi_head_cross_attention");
  const Var q = linear(queries, params.w_q, params.b_q);
  const Var k = linear(context, params.w_k, params.b_k);
  const Var v = linear(context, params.w_v, params.b_v);
  return linear(scaled_dot_product_attention(q, k, v, params.heads, false), params.w_o, params.b_o);
}

Var bottleneck_adapter(const Var& x, const AdapterParams& params) {
  if (x.shape().back() != params.w_down.dim(0)) {
    throw ContractError("adapter width mismatch: " + shape_string(x.shape()));
  }
  Var core = linear(gelu(linear(x, params.w_down, params.b_down)), params.w_up, params.b_up);
  if (params.scale != 1.0) core = scale(core, params.scale);
  return params.internal_residual ? add(x, core) : core;
}

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, const std::string& group,
                                std::size_t width, bool trainable) {
  return {store.add_constant(prefix + ".gain", group, {width}, 1.0, trainable),
          store.add_constant(prefix + ".bias", group, {width}, 0.0, trainable)};
}

MlpParams make_mlp(ParameterStore& store, const std::string& prefix, const std::string& group, std::size_t width,
                   std::size_t hidden, Rng& rng, bool trainable) {
  MlpParams p;
  p.w_in = store.add_normal(prefix + ".w_in", group, {width, hidden}, 1.0 / std::sqrt(double(width)), rng, trainable);
  p.b_in = store.add_constant(prefix + ".b_in", group, {hidden}, 0.0, trainable);
  p.w_out = store.add_normal(prefix + ".w_out", group, {hidden, width}, 1.0 / std::sqrt(double(hidden)), rng,
                             trainable);
  p.b_out = store.add_constant(prefix + ".b_out", group, {width}, 0.0, trainable);
  return p;
}

MultiHeadAttentionParams make_attention(ParameterStore& store, const std::string& prefix, const std::string& group,
                                        std::size_t width, std::size_t heads, Rng& rng, bool trainable,
                                        bool zero_output) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError(prefix + ": width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const double stddev = 1.0 / std::sqrt(static_cast<double>(width));
  MultiHeadAttentionParams p;
  p.heads = heads;
  p.w_q = store.add_normal(prefix + ".w_q", group, {width, width}, stddev, rng, trainable);
  p.b_q = store.add_constant(prefix + ".b_q", group, {width}, 0.0, trainable);
  p.w_k = store.add_normal(prefix + ".w_k", group, {width, width}, stddev, rng, trainable);
  p.b_k = store.add_constant(prefix + ".b_k", group, {width}, 0.0, trainable);
  p.w_v = store.add_normal(prefix + ".w_v", group, {width, width}, stddev, rng, trainable);
  p.b_v = store.add_constant(prefix + ".b_v", group, {width}, 0.0, trainable);
  if (zero_output) {
    p.w_o = store.add_constant(prefix + ".w_o", group, {width, width}, 0.0, trainable);
  } else {
    p.w_o = store.add_normal(prefix + ".w_o", group, {width, width}, stddev, rng, trainable);
  }
  p.b_o = store.add_constant(prefix + ".b_o", group, {width}, 0.0, trainable);
  return p;
}

AdapterParams make_adapter(ParameterStore& store, const std::string& prefix, const std::string& group,
                           std::size_t width, std::size_t bottleneck_ratio, bool internal_residual, Rng& rng,
                           double scale) {
  if (bottleneck_ratio == 0 || width / bottleneck_ratio == 0) {
    throw ConfigError(prefix + ": bottleneck width must be at least 1");
  }
  const std::size_t hidden = width / bottleneck_ratio;
  AdapterParams p;
  p.w_down = store.add_normal(prefix + ".down.w", group, {width, hidden}, 1.0 / std::sqrt(double(width)), rng, true);
  p.b_down = store.add_constant(prefix + ".down.b", group, {hidden}, 0.0, true);
  p.w_up = store.add_constant(prefix + ".up.w", group, {hidden, width}, 0.0, true);
  p.b_up = store.add_constant(prefix + ".up.b", group, {width}, 0.0, true);
  p.internal_residual = internal_residual;
  p.scale = scale;
  return p;
}

std::size_t adapter_parameter_count(std::size_t width, std::size_t bottleneck_ratio) {
  const std::size_t hidden = width / bottleneck_ratio;
  return width * hidden + hidden + hidden * width + width;
}

}  // namespace taskadapter
