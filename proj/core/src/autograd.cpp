// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "taskadapter/errors.hpp"

namespace taskadapter {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

namespace {

thread_local bool g_grad_enabled = true;

Var make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

std::size_t product(const Shape& shape, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= shape[i];
  return p;
}

std::size_t last_dim(const Var& x) {
  require(x.rank() >= 1, "operation needs rank >= 1");
  return x.shape().back();
}

}  // namespace

std::size_t shape_size(const Shape& shape) { return product(shape, 0, shape.size()); }

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ']';
  return out.str();
}

// ---- Var ---------------------------------------------------------------------

Var Var::constant(Shape shape, std::vector<double> values) { return leaf(std::move(shape), std::move(values), false); }

Var Var::zeros(Shape shape) {
  const std::size_t n = shape_size(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Var Var::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ContractError("tensor of shape " + shape_string(shape) + " given " +
                        std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

const Shape& Var::shape() const { return node_->shape; }
std::size_t Var::size() const { return node_->value.size(); }
std::span<const double> Var::values() const { return node_->value; }
std::span<double> Var::mutable_values() { return node_->value; }

double Var::item() const {
  require(size() == 1, "item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

bool Var::requires_grad() const { return node_->requires_grad; }
void Var::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Var::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Var::grad() const { return node_->grad; }
void Var::zero_grad() { node_->grad.clear(); }

Var Var::detach() const { return constant(shape(), node_->value); }

void Var::backward() const {
  require(size() == 1, "backward() without seed needs a scalar, got " + shape_string(shape()));
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Var::backward(std::span<const double> seed) const {
  require(seed.size() == size(), "backward seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& root_grad = node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) root_grad[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Intermediate gradients are scratch; only leaves keep theirs.
  for (Node* node : order) {
    if (node->backward) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * factor;
  return make_result(x.shape(), std::move(out), {x.node()}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Var add_broadcast(const Var& x, const Var& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  require(ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin()),
          "add_broadcast: " + shape_string(ys) + " is not a trailing shape of " + shape_string(xs));
  const std::size_t block = y.size();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y.at(i % block);
  return make_result(xs, std::move(out), {x.node(), y.node()}, [block](Node& self) {
    Node& px = *self.parents[0];
    Node& py = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (py.requires_grad) {
      auto& g = py.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i];
    }
  });
}

Var gelu(const Var& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.value[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

Var log_clamped(const Var& x, double floor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x.at(i), floor));
  return make_result(x.shape(), std::move(out), {x.node()}, [floor](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > floor) g[i] += self.grad[i] / p.value[i];
    }
  });
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(const Var& x, const Var& w) {
  require(w.rank() == 2, "matmul: weight must be rank 2, got " + shape_string(w.shape()));
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  require(last_dim(x) == k, "matmul: " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  const std::size_t m = x.size() / k;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(x.values().data(), m, k) * ConstMap(w.values().data(), k, n);
  return make_result(std::move(shape), std::move(out), {x.node(), w.node()}, [m, k, n](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    ConstMap grad(self.grad.data(), m, n);
    if (px.requires_grad) {
      MutMap(px.ensure_grad().data(), m, k).noalias() += grad * ConstMap(pw.value.data(), k, n).transpose();
    }
    if (pw.requires_grad) {
      MutMap(pw.ensure_grad().data(), k, n).noalias() += ConstMap(px.value.data(), m, k).transpose() * grad;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  Var y = matmul(x, w);
  return bias.defined() ? add_broadcast(y, bias) : y;
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t d = last_dim(x);
  require(gain.size() == d && bias.size() == d, "layer_norm: parameter width mismatch");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(d);
    if (!std::isfinite(var)) throw NumericError("layer_norm: non-finite row variance");
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mean) * rstd[r];
      xhat[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pg.requires_grad || pb.requires_grad) {
          auto* gg = pg.requires_grad ? pg.ensure_grad().data() : nullptr;
          auto* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              const double dy = self.grad[r * d + i];
              if (gg) gg[i] += dy * xhat[r * d + i];
              if (gb) gb[i] += dy;
            }
          }
        }
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            dxhat[i] = self.grad[r * d + i] * pg.value[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xhat[r * d + i];
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t i = 0; i < d; ++i) {
            gx[r * d + i] += rstd[r] * (dxhat[i] - mean_d - xhat[r * d + i] * mean_dx);
          }
        }
      });
}

Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                                 bool causal) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention expects rank-3 q/k/v");
  require(k.shape() == v.shape(), "attention: key/value shape mismatch");
  const std::size_t batch = q.dim(0);
  const std::size_t sq = q.dim(1);
  const std::size_t sk = k.dim(1);
  const std::size_t d = q.dim(2);
  require(k.dim(0) == batch && k.dim(2) == d, "attention: query/key shape mismatch");
  require(heads >= 1 && d % heads == 0, "attention: width not divisible by head count");
  require(!causal || sq == sk, "attention: causal mask needs square scores");
  require(sk >= 1, "attention: empty key set");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();
  std::vector<double> out(batch * sq * d, 0.0);
  std::vector<double> probs(batch * heads * sq * sk, 0.0);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < sq; ++i) {
        double* p = probs.data() + ((b * heads + h) * sq + i) * sk;
        const double* qi = qv.data() + (b * sq + i) * d + h * dh;
        const std::size_t visible = causal ? i + 1 : sk;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = kv.data() + (b * sk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * inv_sqrt;
          peak = std::max(peak, p[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          p[j] = std::exp(p[j] - peak);
          total += p[j];
        }
        double* oi = out.data() + (b * sq + i) * d + h * dh;
        for (std::size_t j = 0; j < visible; ++j) {
          p[j] /= total;
          const double* vj = vv.data() + (b * sk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  return make_result(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [batch, heads, sq, sk, d, dh, inv_sqrt, causal, probs = std::move(probs)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        double* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        double* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        std::vector<double> dp(sk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < sq; ++i) {
              const double* p = probs.data() + ((b * heads + h) * sq + i) * sk;
              const double* go = self.grad.data() + (b * sq + i) * d + h * dh;
              const std::size_t visible = causal ? i + 1 : sk;
              double weighted = 0.0;
              for (std::size_t j = 0; j < visible; ++j) {
                const double* vj = pv.value.data() + (b * sk + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                weighted += p[j] * s;
                if (gv) {
                  double* gvj = gv + (b * sk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              if (!gq && !gk) continue;
              const double* qi = pq.value.data() + (b * sq + i) * d + h * dh;
              for (std::size_t j = 0; j < visible; ++j) {
                const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = pk.value.data() + (b * sk + j) * d + h * dh;
                if (gq) {
                  double* gqi = gq + (b * sq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (b * sk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// ---- shape manipulation --------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  require(shape_size(shape) == x.size(),
          "reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x.node()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var permute(const Var& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  require(order.size() == in.size(), "permute: order rank mismatch");
  std::vector<bool> seen(order.size(), false);
  for (std::size_t a : order) {
    require(a < in.size() && !seen[a], "permute: invalid axis order");
    seen[a] = true;
  }
  const std::size_t rank = in.size();
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[order[i]];
    strides[i] = in_strides[order[i]];
  }
  const std::size_t n = x.size();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    source[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      if (++counter[axis] < out_shape[axis]) {
        offset += strides[axis];
        break;
      }
      offset -= strides[axis] * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
  std::vector<double> out(n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[source[i]];
  return make_result(std::move(out_shape), std::move(out), {x.node()},
                     [source = std::move(source)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += self.grad[i];
                     });
}

Var take(const Var& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  const Shape& in = x.shape();
  require(axis < in.size(), "take: axis out of range");
  for (std::size_t idx : indices) require(idx < in[axis], "take: index out of range");
  const std::size_t outer = product(in, 0, axis);
  const std::size_t inner = product(in, axis + 1, in.size());
  const std::size_t len = in[axis];
  Shape out_shape = in;
  out_shape[axis] = indices.size();
  std::vector<double> out(outer * indices.size() * inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const double* src = xv.data() + (o * len + indices[i]) * inner;
      std::copy(src, src + inner, out.data() + (o * indices.size() + i) * inner);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x.node()},
                     [outer, inner, len, indices](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < indices.size(); ++i) {
                           const double* src = self.grad.data() + (o * indices.size() + i) * inner;
                           double* dst = g.data() + (o * len + indices[i]) * inner;
                           for (std::size_t c = 0; c < inner; ++c) dst[c] += src[c];
                         }
                       }
                     });
}

Var select(const Var& x, std::size_t axis, std::size_t index) {
  Var picked = take(x, axis, {index});
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(picked, std::move(shape));
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require(begin <= end, "slice: begin after end");
  std::vector<std::size_t> indices(end - begin);
  std::iota(indices.begin(), indices.end(), begin);
  return take(x, axis, indices);
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lengths;
  for (const Var& p : parts) {
    Shape s = p.shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    lengths.push_back(s[axis]);
    out_shape[axis] += s[axis];
    s[axis] = first[axis];
    require(s == first, "concat: non-axis shape mismatch");
  }
  const std::size_t outer = product(first, 0, axis);
  const std::size_t inner = product(first, axis + 1, first.size());
  const std::size_t total = out_shape[axis];
  std::vector<double> out(shape_size(out_shape));
  std::vector<NodePtr> parents;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const std::size_t chunk = lengths[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * chunk, pv.data() + (o + 1) * chunk,
                out.data() + (o * total + offset) * inner);
    }
    offset += lengths[k];
    parents.push_back(parts[k].node());
  }
  return make_result(std::move(out_shape), std::move(out), std::move(parents),
                     [outer, inner, total, lengths](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < lengths.size(); ++k) {
                         Node& p = *self.parents[k];
                         const std::size_t chunk = lengths[k] * inner;
                         if (p.requires_grad) {
                           auto& g = p.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + (o * total + offset) * inner;
                             for (std::size_t c = 0; c < chunk; ++c) g[o * chunk + c] += src[c];
                           }
                         }
                         offset += lengths[k];
                       }
                     });
}

Var stack(const std::vector<Var>& parts) {
  require(!parts.empty(), "stack: no inputs");
  std::vector<Var> expanded;
  expanded.reserve(parts.size());
  for (const Var& p : parts) {
    require(p.shape() == parts.front().shape(), "stack: shape mismatch");
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, 0);
}

Var broadcast_axis(const Var& x, std::size_t axis, std::size_t count) {
  const Shape& in = x.shape();
  require(axis <= in.size(), "broadcast_axis: axis out of range");
  const std::size_t outer = product(in, 0, axis);
  const std::size_t inner = product(in, axis, in.size());
  Shape out_shape = in;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  std::vector<double> out(outer * count * inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < count; ++c) {
      std::copy(xv.data() + o * inner, xv.data() + (o + 1) * inner, out.data() + (o * count + c) * inner);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x.node()}, [outer, count, inner](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < count; ++c) {
        const double* src = self.grad.data() + (o * count + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += src[i];
      }
    }
  });
}

// ---- reductions ------------------------------------------------------------------

Var combine_along(const Var& x, std::size_t axis, std::size_t out_count,
                  const std::vector<double>& weights) {
  const Shape& in = x.shape();
  require(axis < in.size(), "combine_along: axis out of range");
  const std::size_t len = in[axis];
  require(weights.size() == out_count * len, "combine_along: weight matrix size mismatch");
  const std::size_t outer = product(in, 0, axis);
  const std::size_t inner = product(in, axis + 1, in.size());
  Shape out_shape = in;
  out_shape[axis] = out_count;
  std::vector<double> out(outer * out_count * inner, 0.0);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < out_count; ++r) {
      double* dst = out.data() + (o * out_count + r) * inner;
      for (std::size_t j = 0; j < len; ++j) {
        const double w = weights[r * len + j];
        if (w == 0.0) continue;
        const double* src = xv.data() + (o * len + j) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x.node()},
                     [outer, inner, len, out_count, weights](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t r = 0; r < out_count; ++r) {
                           const double* src = self.grad.data() + (o * out_count + r) * inner;
                           for (std::size_t j = 0; j < len; ++j) {
                             const double w = weights[r * len + j];
                             if (w == 0.0) continue;
                             double* dst = g.data() + (o * len + j) * inner;
                             for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
                           }
                         }
                       }
                     });
}

Var mean_along(const Var& x, std::size_t axis) {
  require(axis < x.rank(), "mean_along: axis out of range");
  const std::size_t len = x.dim(axis);
  Var summed = combine_along(x, axis, 1, std::vector<double>(len, 1.0 / static_cast<double>(len)));
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(summed, std::move(shape));
}

Var max_along(const Var& x, std::size_t axis) {
  const Shape& in = x.shape();
  require(axis < in.size() && in[axis] >= 1, "max_along: bad axis");
  const std::size_t outer = product(in, 0, axis);
  const std::size_t inner = product(in, axis + 1, in.size());
  const std::size_t len = in[axis];
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> argmax(outer * inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < len; ++j) {
        if (xv[(o * len + j) * inner + i] > xv[(o * len + best) * inner + i]) best = j;
      }
      argmax[o * inner + i] = (o * len + best) * inner + i;
      out[o * inner + i] = xv[argmax[o * inner + i]];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x.node()},
                     [argmax = std::move(argmax)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
                     });
}

Var sum_all(const Var& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, {x.node()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Var cosine_last(const Var& a, const Var& b) {
  require_same_shape(a, b, "cosine_last");
  const std::size_t d = last_dim(a);
  const std::size_t rows = a.size() / d;
  Shape out_shape = a.shape();
  out_shape.pop_back();
  std::vector<double> out(rows, 0.0);
  std::vector<double> norm_a(rows), norm_b(rows);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dot += av[r * d + i] * bv[r * d + i];
      na += av[r * d + i] * av[r * d + i];
      nb += bv[r * d + i] * bv[r * d + i];
    }
    norm_a[r] = std::sqrt(na);
    norm_b[r] = std::sqrt(nb);
    out[r] = (norm_a[r] > 0.0 && norm_b[r] > 0.0) ? dot / (norm_a[r] * norm_b[r]) : 0.0;
  }
  std::vector<double> cosines = out;
  return make_result(std::move(out_shape), std::move(out), {a.node(), b.node()},
                     [d, rows, norm_a = std::move(norm_a), norm_b = std::move(norm_b),
                      cosines = std::move(cosines)](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
                       double* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (norm_a[r] == 0.0 || norm_b[r] == 0.0) continue;
                         const double g = self.grad[r];
                         const double inv = 1.0 / (norm_a[r] * norm_b[r]);
                         for (std::size_t i = 0; i < d; ++i) {
                           const double ai = pa.value[r * d + i];
                           const double bi = pb.value[r * d + i];
                           if (ga) ga[r * d + i] += g * (bi * inv - cosines[r] * ai / (norm_a[r] * norm_a[r]));
                           if (gb) gb[r * d + i] += g * (ai * inv - cosines[r] * bi / (norm_b[r] * norm_b[r]));
                         }
                       }
                     });
}

Var l2_normalize_last(const Var& x) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size(), 0.0);
  std::vector<double> norms(rows, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += xv[r * d + i] * xv[r * d + i];
    norms[r] = std::sqrt(sq);
    if (norms[r] == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] / norms[r];
  }
  std::vector<double> unit = out;
  return make_result(x.shape(), std::move(out), {x.node()},
                     [d, rows, norms = std::move(norms), unit = std::move(unit)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (norms[r] == 0.0) continue;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * unit[r * d + i];
                         for (std::size_t i = 0; i < d; ++i) {
                           g[r * d + i] += (self.grad[r * d + i] - dot * unit[r * d + i]) / norms[r];
                         }
                       }
                     });
}

Var softmax_last(const Var& x) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < d; ++i) peak = std::max(peak, xv[r * d + i]);
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      out[r * d + i] = std::exp(xv[r * d + i] - peak);
      total += out[r * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] /= total;
  }
  std::vector<double> probs = out;
  return make_result(x.shape(), std::move(out), {x.node()}, [d, rows, probs = std::move(probs)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * probs[r * d + i];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += probs[r * d + i] * (self.grad[r * d + i] - dot);
    }
  });
}

Var normalize_sum_last(const Var& x) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> sums(rows, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) sums[r] += xv[r * d + i];
    if (sums[r] == 0.0) throw NumericError("normalize_sum_last: zero row sum");
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] / sums[r];
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [d, rows, sums = std::move(sums)](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * p.value[r * d + i];
      const double s = sums[r];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += self.grad[r * d + i] / s - dot / (s * s);
    }
  });
}

Var pick_columns(const Var& x, const std::vector<std::size_t>& columns) {
  require(x.rank() == 2 && columns.size() == x.dim(0), "pick_columns: expects [R, C] and R columns");
  const std::size_t cols = x.dim(1);
  std::vector<double> out(columns.size());
  for (std::size_t r = 0; r < columns.size(); ++r) {
    require(columns[r] < cols, "pick_columns: column out of range");
    out[r] = x.at(r * cols + columns[r]);
  }
  return make_result({columns.size()}, std::move(out), {x.node()}, [cols, columns](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < columns.size(); ++r) g[r * cols + columns[r]] += self.grad[r];
  });
}

}  // namespace taskadapter
