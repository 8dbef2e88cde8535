// SPDX-License-Identifier: Apache-2.0
//
// Transformer primitives shared by the visual and semantic encoders:
// layer norm, MLP, multi-head attention over an arbitrary tensor axis, and
// the bottleneck adapter.

#pragma once

#include <cstddef>
#include <string>

#include "taskadapter/autograd.hpp"
#include "taskadapter/parameters.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

inline constexpr double kLayerNormEpsilon = 1e-5;

struct LayerNormParams {
  Var gain;  // [D]
  Var bias;  // [D]
};

/// Two affine maps D -> hidden -> D with GELU in between.
struct MlpParams {
  Var w_in, b_in;
  Var w_out, b_out;
};

/// Projections are stored input-major: y = x W + b with W [D, D].
struct MultiHeadAttentionParams {
  Var w_q, b_q;
  Var w_k, b_k;
  Var w_v, b_v;
  Var w_o, b_o;
  std::size_t heads = 1;

  std::size_t width() const { return w_q.dim(0); }
};

/// Bottleneck D -> D/r -> D. With `internal_residual` the input is added
/// back inside the adapter.
struct AdapterParams {
  Var w_down, b_down;  // [D, D/r], [D/r]
  Var w_up, b_up;      // [D/r, D], [D]
  bool internal_residual = false;
  double scale = 1.0;
};

Var layer_norm(const Var& x, const LayerNormParams& params);
Var mlp_block(const Var& x, const MlpParams& params);

/// Self-attention along `axis` of x (last axis is the feature width D);
/// every other axis is treated as batch.
Var multi_head_self_attention(const Var& x, const MultiHeadAttentionParams& params, std::size_t axis,
                              bool causal = false);

/// Cross-attention: queries [B, Sq, D] attend to context [B, Sk, D].
Var multi_head_cross_attention(const Var& queries, const Var& context, const MultiHeadAttentionParams& params);

/// core = scale * Up(gelu(Down(x))); returns x + core or core.
Var bottleneck_adapter(const Var& x, const AdapterParams& params);

// Parameter factories. Registered names are `<prefix>.<field>`.

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, const std::string& group,
                                std::size_t width, bool trainable);

MlpParams make_mlp(ParameterStore& store, const std::string& prefix, const std::string& group, std::size_t width,
                   std::size_t hidden, Rng& rng, bool trainable);

/// With `zero_output` the output projection starts at zero.
MultiHeadAttentionParams make_attention(ParameterStore& store, const std::string& prefix, const std::string& group,
                                        std::size_t width, std::size_t heads, Rng& rng, bool trainable,
                                        bool zero_output = false);

/// Down projection random, up projection zero.
AdapterParams make_adapter(ParameterStore& store, const std::string& prefix, const std::string& group,
                           std::size_t width, std::size_t bottleneck_ratio, bool internal_residual, Rng& rng,
                           double scale = 1.0);

/// Parameter count of one adapter; used by the analytic counter.
std::size_t adapter_parameter_count(std::size_t width, std::size_t bottleneck_ratio);

}  // namespace taskadapter
