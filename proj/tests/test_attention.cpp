// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <limits>

#include "taskadapter/errors.hpp"
#include "test_support.hpp"

using namespace taskadapter;
using namespace tatest;

namespace {

MultiHeadAttentionParams random_attention(ParameterStore& store, const std::string& name, std::size_t d,
                                          std::size_t heads, Rng& rng) {
  auto p = make_attention(store, name, "test", d, heads, rng, true);
  for (Var t : {p.b_q, p.b_k, p.b_v, p.b_o}) fill_random(t, rng, 0.2);
  return p;
}

// Rows of x [A, B, D] along `axis` for a fixed other index.
Matrix rows_along(const Var& x, std::size_t axis, std::size_t other) {
  const std::size_t a = x.dim(0), b = x.dim(1), d = x.dim(2);
  Matrix m;
  const std::size_t n = axis == 0 ? a : b;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = axis == 0 ? i * b + other : other * b + i;
    m.emplace_back(x.values().begin() + static_cast<long>(r * d), x.values().begin() + static_cast<long>(r * d + d));
  }
  return m;
}

}  // namespace

TEST_CASE("self-attention along either axis matches the dense oracle") {
  Rng rng(11);
  ParameterStore store;
  const auto p = random_attention(store, "mhsa", 6, 3, rng);
  const Var x = random_var({4, 5, 6}, rng);
  for (std::size_t axis : {0u, 1u}) {
    for (bool causal : {false, true}) {
      const Var y = multi_head_self_attention(x, p, axis, causal);
      CHECK(y.shape() == x.shape());
      const std::size_t others = axis == 0 ? 5 : 4;
      double worst = 0.0;
      for (std::size_t o = 0; o < others; ++o) {
        const Matrix in = rows_along(x, axis, o);
        const Matrix expected = dense_attention(in, in, p, causal);
        const Matrix got = rows_along(y, axis, o);
        for (std::size_t i = 0; i < in.size(); ++i)
          for (std::size_t e = 0; e < 6; ++e) worst = std::max(worst, std::abs(expected[i][e] - got[i][e]));
      }
      CHECK(worst < 1e-12);
    }
  }
}

TEST_CASE("cross-attention matches the dense oracle") {
  Rng rng(12);
  ParameterStore store;
  const auto p = random_attention(store, "cross", 4, 2, rng);
  const Var q = random_var({2, 3, 4}, rng);
  const Var c = random_var({2, 5, 4}, rng);
  const Var y = multi_head_cross_attention(q, c, p);
  CHECK(y.shape() == Shape{2, 3, 4});
  for (std::size_t b = 0; b < 2; ++b) {
    Matrix qm, cm;
    for (std::size_t i = 0; i < 3; ++i) qm.push_back(rows_along(q, 1, b)[i]);
    for (std::size_t i = 0; i < 5; ++i) cm.push_back(rows_along(c, 1, b)[i]);
    const Matrix expected = dense_attention(qm, cm, p);
    const Matrix got = rows_along(y, 1, b);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t e = 0; e < 4; ++e) CHECK(got[i][e] == doctest::Approx(expected[i][e]).epsilon(1e-12));
  }
}

TEST_CASE("attention rejects widths that heads cannot split and non-finite input") {
  Rng rng(13);
  ParameterStore store;
  CHECK_THROWS_AS(make_attention(store, "bad", "test", 6, 4, rng, false), ConfigError);
  const auto p = make_attention(store, "ok", "test", 4, 2, rng, false);
  Var x = random_var({2, 3, 4}, rng);
  x.mutable_values()[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(multi_head_self_attention(x, p, 1), NumericError);
}

TEST_CASE("zero-initialised adapters are exact identities of their residual form") {
  Rng rng(14);
  ParameterStore store;
  const auto plain = make_adapter(store, "a", "adapter", 8, 4, false, rng);
  const auto residual = make_adapter(store, "b", "adapter", 8, 4, true, rng);
  const Var x = random_var({3, 8}, rng);
  const Var core = bottleneck_adapter(x, plain);
  for (double v : core.values()) CHECK(v == 0.0);
  const Var kept = bottleneck_adapter(x, residual);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(kept.at(i) == x.at(i));
  CHECK(store.trainable_count() == 2 * adapter_parameter_count(8, 4));
  CHECK(adapter_parameter_count(768, 4) == 295872);
}

TEST_CASE("adapter output follows Up(gelu(Down(x))) scaled") {
  Rng rng(15);
  ParameterStore store;
  auto a = make_adapter(store, "a", "adapter", 4, 2, false, rng, 0.5);
  fill_random(a.w_up, rng, 1.0);
  fill_random(a.b_up, rng, 1.0);
  const Var x = random_var({1, 4}, rng);
  const auto hidden = affine({x.values().begin(), x.values().end()}, a.w_down, a.b_down);
  std::vector<double> activated;
  for (double h : hidden) activated.push_back(gelu(Var::constant({1}, {h})).item());
  const auto out = affine(activated, a.w_up, a.b_up);
  const Var y = bottleneck_adapter(x, a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(0.5 * out[i]).epsilon(1e-12));
}

TEST_CASE("mlp and layer norm factories register the expected tensors") {
  Rng rng(16);
  ParameterStore store;
  make_layer_norm(store, "ln", "g", 8, false);
  make_mlp(store, "mlp", "g", 8, 32, rng, false);
  CHECK(store.total_count() == 16 + (8 * 32 + 32 + 32 * 8 + 8));
  CHECK(store.trainable_count() == 0);
  CHECK(store.contains("mlp.w_in"));
  CHECK_THROWS_AS(make_layer_norm(store, "ln", "g", 8, false), ContractError);
}
