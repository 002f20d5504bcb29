#include "hd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "hd/kernels.hpp"

namespace hd::ag {

void Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
}

void Node::add_grad(const Tensor& g) {
  check(g.same_shape(value), std::string("gradient shape mismatch in op ") + op);
  ensure_grad();
  for (int64_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
}

void Node::zero_grad() {
  if (grad.defined())
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] = 0.0;
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

namespace {

Var make_node(Tensor value, std::vector<Var> parents, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->op = op;
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

void topo_sort(const Var& root, std::vector<Node*>& order) {
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

// ---------- broadcasting ----------

struct BcastPlan {
  std::vector<int64_t> shape;
  std::vector<int64_t> stride_a, stride_b;
  int64_t numel = 1;
  bool same = false;  // fast path: identical shapes
};

BcastPlan plan_bcast(const Tensor& a, const Tensor& b, const char* op) {
  check(a.rank() == b.rank(), std::string(op) + ": rank mismatch " + a.shape_str() + " vs " +
                                  b.shape_str());
  BcastPlan p;
  const int r = a.rank();
  p.shape.resize(r);
  for (int i = 0; i < r; ++i) {
    const int64_t da = a.dim(i), db = b.dim(i);
    check(da == db || da == 1 || db == 1, std::string(op) + ": incompatible shapes " +
                                              a.shape_str() + " vs " + b.shape_str());
    p.shape[i] = std::max(da, db);
    p.numel *= p.shape[i];
  }
  p.same = a.same_shape(b);
  auto strides_of = [&](const Tensor& t) {
    std::vector<int64_t> s(r);
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      s[i] = (t.dim(i) == 1 && p.shape[i] != 1) ? 0 : acc;
      acc *= t.dim(i);
    }
    return s;
  };
  p.stride_a = strides_of(a);
  p.stride_b = strides_of(b);
  return p;
}

inline void bcast_offsets(const BcastPlan& p, int64_t flat, int64_t& oa, int64_t& ob) {
  oa = 0;
  ob = 0;
  for (int axis = static_cast<int>(p.shape.size()) - 1; axis >= 0; --axis) {
    const int64_t coord = flat % p.shape[axis];
    flat /= p.shape[axis];
    oa += coord * p.stride_a[axis];
    ob += coord * p.stride_b[axis];
  }
}

using BinFwd = double (*)(double, double);
using BinBwd = double (*)(double, double, double);  // (av, bv, gout) -> parent grad element

Var make_binary(const Var& a, const Var& b, const char* op, BinFwd fwd, BinBwd da, BinBwd db) {
  BcastPlan p = plan_bcast(a->value, b->value, op);
  Tensor out(p.shape);
  const double* ad = a->value.data();
  const double* bd = b->value.data();
  if (p.same) {
    for (int64_t i = 0; i < p.numel; ++i) out[i] = fwd(ad[i], bd[i]);
  } else {
    for (int64_t i = 0; i < p.numel; ++i) {
      int64_t oa, ob;
      bcast_offsets(p, i, oa, ob);
      out[i] = fwd(ad[oa], bd[ob]);
    }
  }
  Var n = make_node(std::move(out), {a, b}, op);
  if (n->requires_grad) {
    n->backprop = [p, da, db](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      const double* ad = pa->value.data();
      const double* bd = pb->value.data();
      const double* g = self.grad.data();
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int64_t i = 0; i < p.numel; ++i) {
        int64_t oa, ob;
        if (p.same) {
          oa = i;
          ob = i;
        } else {
          bcast_offsets(p, i, oa, ob);
        }
        if (pa->requires_grad) pa->grad[oa] += da(ad[oa], bd[ob], g[i]);
        if (pb->requires_grad) pb->grad[ob] += db(ad[oa], bd[ob], g[i]);
      }
    };
  }
  return n;
}

using UnFwd = double (*)(double);
using UnBwd = double (*)(double, double, double);  // (x, y, gout) -> gx element

Var make_unary(const Var& a, const char* op, UnFwd fwd, UnBwd bwd) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i]);
  Var n = make_node(std::move(out), {a}, op);
  if (n->requires_grad) {
    n->backprop = [bwd](Node& self) {
      Node* pa = self.parents[0].get();
      pa->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        pa->grad[i] += bwd(pa->value[i], self.value[i], self.grad[i]);
    };
  }
  return n;
}

}  // namespace

void backward(const Var& root, const Tensor& seed) {
  check(root->requires_grad, "backward() on a graph with no trainable inputs");
  check(seed.same_shape(root->value), "backward seed shape mismatch");
  root->add_grad(seed);
  std::vector<Node*> order;
  topo_sort(root, order);
  // order is parents-first; walk it backwards
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.defined()) n->backprop(*n);
  }
}

void backward(const Var& root) {
  check(root->value.numel() == 1, "backward() without seed requires a scalar root");
  backward(root, Tensor::full(root->value.shape(), 1.0));
}

// ---------- binaries ----------

Var add(const Var& a, const Var& b) {
  return make_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return make_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return make_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Var divide(const Var& a, const Var& b) {
  return make_binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Var minimum(const Var& a, const Var& b) {
  return make_binary(
      a, b, "min", [](double x, double y) { return x < y ? x : y; },
      [](double x, double y, double g) { return x <= y ? g : 0.0; },
      [](double x, double y, double g) { return x <= y ? 0.0 : g; });
}

Var maximum(const Var& a, const Var& b) {
  return make_binary(
      a, b, "max", [](double x, double y) { return x > y ? x : y; },
      [](double x, double y, double g) { return x >= y ? g : 0.0; },
      [](double x, double y, double g) { return x >= y ? 0.0 : g; });
}

// ---------- unaries ----------

Var scale(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  Var n = make_node(std::move(out), {a}, "scale");
  if (n->requires_grad) {
    n->backprop = [c](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += c * self.grad[i];
    };
  }
  return n;
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  Var n = make_node(std::move(out), {a}, "add_scalar");
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += self.grad[i];
    };
  }
  return n;
}

Var vexp(const Var& a) {
  return make_unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Var vsqrt(const Var& a) {
  return make_unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y, double g) { return y > 0.0 ? g * 0.5 / y : 0.0; });
}

Var vatan(const Var& a) {
  return make_unary(
      a, "atan", [](double x) { return std::atan(x); },
      [](double x, double, double g) { return g / (1.0 + x * x); });
}

Var sigmoid(const Var& a) {
  return make_unary(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var silu(const Var& a) {
  return make_unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double, double g) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return g * s * (1.0 + x * (1.0 - s));
      });
}

Var leaky_relu(const Var& a, double negative_slope) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double x = a->value[i];
    out[i] = x > 0.0 ? x : negative_slope * x;
  }
  Var n = make_node(std::move(out), {a}, "leaky_relu");
  if (n->requires_grad) {
    n->backprop = [negative_slope](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        p->grad[i] += self.grad[i] * (p->value[i] > 0.0 ? 1.0 : negative_slope);
    };
  }
  return n;
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(a->value[i], lo), hi);
  Var n = make_node(std::move(out), {a}, "clamp");
  if (n->requires_grad) {
    n->backprop = [lo, hi](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) {
        const double x = p->value[i];
        if (x >= lo && x <= hi) p->grad[i] += self.grad[i];
      }
    };
  }
  return n;
}

// ---------- shape ----------

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  Var n = make_node(std::move(out), {a}, "reshape");
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node* p = self.parents[0].get();
      p->add_grad(self.grad.reshaped(p->value.shape()));
    };
  }
  return n;
}

Var concat(const std::vector<Var>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  const int r = xs[0]->value.rank();
  check(axis >= 0 && axis < r, "concat: bad axis");
  std::vector<int64_t> shape = xs[0]->value.shape();
  int64_t total_axis = 0;
  for (const auto& x : xs) {
    check(x->value.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      check(i == axis || x->value.dim(i) == shape[static_cast<size_t>(i)],
            "concat: shape mismatch " + x->value.shape_str());
    total_axis += x->value.dim(axis);
  }
  shape[static_cast<size_t>(axis)] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= shape[static_cast<size_t>(i)];

  Tensor out(shape);
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t ax = x->value.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < ax; ++j)
        for (int64_t i = 0; i < inner; ++i)
          out[(o * total_axis + off + j) * inner + i] = x->value[(o * ax + j) * inner + i];
    off += ax;
  }
  Var n = make_node(std::move(out), xs, "concat");
  if (n->requires_grad) {
    n->backprop = [axis, outer, inner, total_axis](Node& self) {
      int64_t off = 0;
      for (auto& parent : self.parents) {
        const int64_t ax = parent->value.dim(axis);
        if (parent->requires_grad) {
          parent->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < ax; ++j)
              for (int64_t i = 0; i < inner; ++i)
                parent->grad[(o * ax + j) * inner + i] +=
                    self.grad[(o * total_axis + off + j) * inner + i];
        }
        off += ax;
      }
    };
  }
  return n;
}

Var slice(const Var& a, int axis, int64_t start, int64_t len) {
  const int r = a->value.rank();
  check(axis >= 0 && axis < r, "slice: bad axis");
  const int64_t ax = a->value.dim(axis);
  check(start >= 0 && len >= 1 && start + len <= ax, "slice: range out of bounds");
  std::vector<int64_t> shape = a->value.shape();
  shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a->value.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= a->value.dim(i);

  Tensor out(shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      for (int64_t i = 0; i < inner; ++i)
        out[(o * len + j) * inner + i] = a->value[(o * ax + start + j) * inner + i];
  Var n = make_node(std::move(out), {a}, "slice");
  if (n->requires_grad) {
    n->backprop = [outer, inner, ax, start, len](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j)
          for (int64_t i = 0; i < inner; ++i)
            p->grad[(o * ax + start + j) * inner + i] += self.grad[(o * len + j) * inner + i];
    };
  }
  return n;
}

Var to_vertices(const Var& a) {
  check(a->value.rank() == 4, "to_vertices expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  Tensor out({B, H * W, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) out.at(b, y * W + x, c) = a->value.at(b, c, y, x);
  Var n = make_node(std::move(out), {a}, "to_vertices");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      Tensor& g = p->grad;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) g.at(b, c, y, x) += self.grad.at(b, y * W + x, c);
    };
  }
  return n;
}

Var from_vertices(const Var& a, int64_t h, int64_t w) {
  check(a->value.rank() == 3, "from_vertices expects (B,N,C)");
  const int64_t B = a->value.dim(0), N = a->value.dim(1), C = a->value.dim(2);
  check(N == h * w, "from_vertices: N != h*w");
  Tensor out({B, C, h, w});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) out.at(b, c, y, x) = a->value.at(b, y * w + x, c);
  Var n = make_node(std::move(out), {a}, "from_vertices");
  if (n->requires_grad) {
    n->backprop = [B, C, h, w](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
              p->grad.at(b, y * w + x, c) += self.grad.at(b, c, y, x);
    };
  }
  return n;
}

// ---------- reductions / pooling ----------

Var sum_all(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  Var n = make_node(Tensor::scalar(s), {a}, "sum_all");
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      const double g = self.grad[0];
      for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] += g;
    };
  }
  return n;
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

Var mean_channels(const Var& a) {
  check(a->value.rank() == 4, "mean_channels expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  Tensor out({B, 1, H, W});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += a->value.at(b, c, y, x);
        out.at(b, 0, y, x) = s / static_cast<double>(C);
      }
  Var n = make_node(std::move(out), {a}, "mean_channels");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      const double inv = 1.0 / static_cast<double>(C);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
              p->grad.at(b, c, y, x) += self.grad.at(b, 0, y, x) * inv;
    };
  }
  return n;
}

Var max_channels(const Var& a) {
  check(a->value.rank() == 4, "max_channels expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  Tensor out({B, 1, H, W});
  std::vector<int64_t> argmax(static_cast<size_t>(B * H * W));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double best = a->value.at(b, 0, y, x);
        int64_t bc = 0;
        for (int64_t c = 1; c < C; ++c) {
          const double v = a->value.at(b, c, y, x);
          if (v > best) {
            best = v;
            bc = c;
          }
        }
        out.at(b, 0, y, x) = best;
        argmax[static_cast<size_t>((b * H + y) * W + x)] = bc;
      }
  Var n = make_node(std::move(out), {a}, "max_channels");
  if (n->requires_grad) {
    n->backprop = [B, H, W, argmax](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            p->grad.at(b, argmax[static_cast<size_t>((b * H + y) * W + x)], y, x) +=
                self.grad.at(b, 0, y, x);
    };
  }
  return n;
}

Var global_avg_pool(const Var& a) {
  check(a->value.rank() == 4, "global_avg_pool expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  Tensor out({B, C, 1, 1});
  const double inv = 1.0 / static_cast<double>(H * W);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) s += a->value.at(b, c, y, x);
      out.at(b, c, 0, 0) = s * inv;
    }
  Var n = make_node(std::move(out), {a}, "global_avg_pool");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W, inv](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const double g = self.grad.at(b, c, 0, 0) * inv;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) p->grad.at(b, c, y, x) += g;
        }
    };
  }
  return n;
}

Var global_max_pool(const Var& a) {
  check(a->value.rank() == 4, "global_max_pool expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  Tensor out({B, C, 1, 1});
  std::vector<int64_t> argmax(static_cast<size_t>(B * C));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t bi = 0;
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const double v = a->value.at(b, c, y, x);
          if (v > best) {
            best = v;
            bi = y * W + x;
          }
        }
      out.at(b, c, 0, 0) = best;
      argmax[static_cast<size_t>(b * C + c)] = bi;
    }
  Var n = make_node(std::move(out), {a}, "global_max_pool");
  if (n->requires_grad) {
    n->backprop = [B, C, W, argmax](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const int64_t bi = argmax[static_cast<size_t>(b * C + c)];
          p->grad.at(b, c, bi / W, bi % W) += self.grad.at(b, c, 0, 0);
        }
    };
  }
  return n;
}

Var adaptive_avg_pool(const Var& a, int64_t oh, int64_t ow) {
  check(a->value.rank() == 4, "adaptive_avg_pool expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  check(oh >= 1 && ow >= 1 && oh <= H && ow <= W, "adaptive_avg_pool: bad output size");
  Tensor out({B, C, oh, ow});
  auto bin = [](int64_t i, int64_t n, int64_t on, int64_t& lo, int64_t& hi) {
    lo = (i * n) / on;
    hi = ((i + 1) * n + on - 1) / on;
  };
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < oh; ++y) {
        int64_t y0, y1;
        bin(y, H, oh, y0, y1);
        for (int64_t x = 0; x < ow; ++x) {
          int64_t x0, x1;
          bin(x, W, ow, x0, x1);
          double s = 0.0;
          for (int64_t iy = y0; iy < y1; ++iy)
            for (int64_t ix = x0; ix < x1; ++ix) s += a->value.at(b, c, iy, ix);
          out.at(b, c, y, x) = s / static_cast<double>((y1 - y0) * (x1 - x0));
        }
      }
  Var n = make_node(std::move(out), {a}, "adaptive_avg_pool");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W, oh, ow, bin](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < oh; ++y) {
            int64_t y0, y1;
            bin(y, H, oh, y0, y1);
            for (int64_t x = 0; x < ow; ++x) {
              int64_t x0, x1;
              bin(x, W, ow, x0, x1);
              const double g =
                  self.grad.at(b, c, y, x) / static_cast<double>((y1 - y0) * (x1 - x0));
              for (int64_t iy = y0; iy < y1; ++iy)
                for (int64_t ix = x0; ix < x1; ++ix) p->grad.at(b, c, iy, ix) += g;
            }
          }
    };
  }
  return n;
}

// ---------- geometry ----------

Var nearest_resize(const Var& a, int64_t oh, int64_t ow) {
  check(a->value.rank() == 4, "nearest_resize expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  if (oh == H && ow == W) return a;
  Tensor out({B, C, oh, ow});
  kernels::par::nearest_resize(a->value.data(), out.data(), B, C, H, W, oh, ow);
  Var n = make_node(std::move(out), {a}, "nearest_resize");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W, oh, ow](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      auto ceil_div = [](int64_t x, int64_t y) { return (x + y - 1) / y; };
      for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* g = self.grad.data() + bc * oh * ow;
        double* gx = p->grad.data() + bc * H * W;
        for (int64_t iy = 0; iy < H; ++iy) {
          const int64_t ylo = ceil_div(iy * oh, H), yhi = ceil_div((iy + 1) * oh, H);
          for (int64_t ix = 0; ix < W; ++ix) {
            const int64_t xlo = ceil_div(ix * ow, W), xhi = ceil_div((ix + 1) * ow, W);
            double s = 0.0;
            for (int64_t y = ylo; y < yhi; ++y)
              for (int64_t x = xlo; x < xhi; ++x) s += g[y * ow + x];
            gx[iy * W + ix] += s;
          }
        }
      }
    };
  }
  return n;
}

Var pixel_unshuffle(const Var& a, int64_t r) {
  check(a->value.rank() == 4, "pixel_unshuffle expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  check(r >= 1, "pixel_unshuffle: factor must be >= 1");
  check(H % r == 0 && W % r == 0, "pixel_unshuffle: spatial dims " + a->value.shape_str() +
                                      " not divisible by factor " + std::to_string(r));
  Tensor out({B, C * r * r, H / r, W / r});
  kernels::par::pixel_unshuffle(a->value.data(), out.data(), B, C, H, W, r);
  Var n = make_node(std::move(out), {a}, "pixel_unshuffle");
  if (n->requires_grad) {
    n->backprop = [B, C, H, W, r](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      Tensor g({B, C, H, W});
      kernels::par::pixel_shuffle(self.grad.data(), g.data(), B, C, H, W, r);
      for (int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
    };
  }
  return n;
}

Var pixel_shuffle(const Var& a, int64_t r) {
  check(a->value.rank() == 4, "pixel_shuffle expects (B,C,H,W)");
  const int64_t B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2),
                W = a->value.dim(3);
  check(r >= 1 && C % (r * r) == 0, "pixel_shuffle: channels not divisible by factor^2");
  const int64_t oc = C / (r * r);
  Tensor out({B, oc, H * r, W * r});
  kernels::par::pixel_shuffle(a->value.data(), out.data(), B, oc, H * r, W * r, r);
  Var n = make_node(std::move(out), {a}, "pixel_shuffle");
  if (n->requires_grad) {
    n->backprop = [B, oc, H, W, r](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      Tensor g({B, oc * r * r, H, W});
      kernels::par::pixel_unshuffle(self.grad.data(), g.data(), B, oc, H * r, W * r, r);
      for (int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
    };
  }
  return n;
}

// ---------- linear algebra ----------

Var matmul(const Var& a, const Var& b) {
  check(a->value.rank() == 2 && b->value.rank() == 2, "matmul expects rank-2 inputs");
  const int64_t n = a->value.dim(0), k = a->value.dim(1), m = b->value.dim(1);
  check(b->value.dim(0) == k, "matmul: inner dims disagree " + a->value.shape_str() + " x " +
                                  b->value.shape_str());
  Tensor out({n, m});
  kernels::par::matmul(a->value.data(), false, b->value.data(), false, out.data(), n, m, k);
  Var node = make_node(std::move(out), {a, b}, "matmul");
  if (node->requires_grad) {
    node->backprop = [n, m, k](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      if (pa->requires_grad) {
        Tensor ga({n, k});
        kernels::par::matmul(self.grad.data(), false, pb->value.data(), true, ga.data(), n, k, m);
        pa->add_grad(ga);
      }
      if (pb->requires_grad) {
        Tensor gb({k, m});
        kernels::par::matmul(pa->value.data(), true, self.grad.data(), false, gb.data(), k, m, n);
        pb->add_grad(gb);
      }
    };
  }
  return node;
}

Var bmm(const Var& a, const Var& b) {
  check(a->value.rank() == 3 && b->value.rank() == 3, "bmm expects rank-3 inputs");
  const int64_t B = a->value.dim(0), n = a->value.dim(1), k = a->value.dim(2),
                m = b->value.dim(2);
  check(b->value.dim(0) == B && b->value.dim(1) == k,
        "bmm: shape mismatch " + a->value.shape_str() + " x " + b->value.shape_str());
  Tensor out({B, n, m});
  kernels::par::bmm(a->value.data(), false, b->value.data(), false, out.data(), B, n, m, k);
  Var node = make_node(std::move(out), {a, b}, "bmm");
  if (node->requires_grad) {
    node->backprop = [B, n, m, k](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      if (pa->requires_grad) {
        Tensor ga({B, n, k});
        kernels::par::bmm(self.grad.data(), false, pb->value.data(), true, ga.data(), B, n, k, m);
        pa->add_grad(ga);
      }
      if (pb->requires_grad) {
        Tensor gb({B, k, m});
        kernels::par::bmm(pa->value.data(), true, self.grad.data(), false, gb.data(), B, k, m, n);
        pb->add_grad(gb);
      }
    };
  }
  return node;
}

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  check(x->value.rank() == 4, "conv2d: input must be (B,C,H,W)");
  check(w->value.rank() == 4 && w->value.dim(2) == w->value.dim(3),
        "conv2d: weight must be (O,I,K,K)");
  check(x->value.dim(1) == w->value.dim(1),
        "conv2d: input has " + std::to_string(x->value.dim(1)) + " channels, weight expects " +
            std::to_string(w->value.dim(1)));
  const auto d = kernels::ConvDims::make(x->value.dim(0), x->value.dim(1), x->value.dim(2),
                                         x->value.dim(3), w->value.dim(0), w->value.dim(2),
                                         stride, pad);
  if (bias) check(bias->value.rank() == 1 && bias->value.dim(0) == d.c_out, "conv2d: bad bias");
  Tensor out({d.batch, d.c_out, d.h_out, d.w_out});
  kernels::par::conv2d_forward(x->value.data(), w->value.data(),
                               bias ? bias->value.data() : nullptr, out.data(), d);
  std::vector<Var> parents = {x, w};
  if (bias) parents.push_back(bias);
  Var node = make_node(std::move(out), std::move(parents), "conv2d");
  if (node->requires_grad) {
    node->backprop = [d](Node& self) {
      Node* px = self.parents[0].get();
      Node* pw = self.parents[1].get();
      if (px->requires_grad) {
        Tensor gx({d.batch, d.c_in, d.h_in, d.w_in});
        kernels::par::conv2d_backward_input(self.grad.data(), pw->value.data(), gx.data(), d);
        px->add_grad(gx);
      }
      if (pw->requires_grad) {
        Tensor gw(pw->value.shape());
        kernels::par::conv2d_backward_weight(self.grad.data(), px->value.data(), gw.data(), d);
        pw->add_grad(gw);
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        Tensor gb({d.c_out});
        kernels::par::conv2d_backward_bias(self.grad.data(), gb.data(), d);
        self.parents[2]->add_grad(gb);
      }
    };
  }
  return node;
}

// ---------- batch norm ----------

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BnBuffers& buffers,
                bool training, double momentum, double eps) {
  check(x->value.rank() == 4, "batchnorm2d expects (B,C,H,W)");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  check(gamma->value.numel() == C && beta->value.numel() == C, "batchnorm2d: bad affine shape");
  check(buffers.running_mean.numel() == C && buffers.running_var.numel() == C,
        "batchnorm2d: bad running stats");
  const int64_t m = B * H * W;

  Tensor mean({C}), invstd({C});
  if (training) {
    check(m > 1, "batchnorm2d: training requires more than one sample per channel");
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) s += x->value.at(b, c, y, xx);
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            const double dlt = x->value.at(b, c, y, xx) - mu;
            v += dlt * dlt;
          }
      const double var = v / static_cast<double>(m);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      const double var_unbiased = v / static_cast<double>(m - 1);
      buffers.running_mean[c] = (1.0 - momentum) * buffers.running_mean[c] + momentum * mu;
      buffers.running_var[c] =
          (1.0 - momentum) * buffers.running_var[c] + momentum * var_unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = buffers.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(buffers.running_var[c] + eps);
    }
  }

  Tensor out({B, C, H, W});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double g = gamma->value[c], be = beta->value[c], mu = mean[c], is = invstd[c];
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx)
          out.at(b, c, y, xx) = (x->value.at(b, c, y, xx) - mu) * is * g + be;
    }

  Var node = make_node(std::move(out), {x, gamma, beta}, "batchnorm2d");
  if (node->requires_grad) {
    node->backprop = [B, C, H, W, m, mean, invstd, training](Node& self) {
      Node* px = self.parents[0].get();
      Node* pg = self.parents[1].get();
      Node* pb = self.parents[2].get();
      if (px->requires_grad) px->ensure_grad();
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int64_t c = 0; c < C; ++c) {
        const double mu = mean[c], is = invstd[c], gam = pg->value[c];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
              const double g = self.grad.at(b, c, y, xx);
              const double xhat = (px->value.at(b, c, y, xx) - mu) * is;
              sum_g += g;
              sum_gx += g * xhat;
            }
        if (pg->requires_grad) pg->grad[c] += sum_gx;
        if (pb->requires_grad) pb->grad[c] += sum_g;
        if (!px->requires_grad) continue;
        if (training) {
          const double inv_m = 1.0 / static_cast<double>(m);
          for (int64_t b = 0; b < B; ++b)
            for (int64_t y = 0; y < H; ++y)
              for (int64_t xx = 0; xx < W; ++xx) {
                const double g = self.grad.at(b, c, y, xx);
                const double xhat = (px->value.at(b, c, y, xx) - mu) * is;
                px->grad.at(b, c, y, xx) +=
                    gam * is * (g - inv_m * sum_g - xhat * inv_m * sum_gx);
              }
        } else {
          for (int64_t b = 0; b < B; ++b)
            for (int64_t y = 0; y < H; ++y)
              for (int64_t xx = 0; xx < W; ++xx)
                px->grad.at(b, c, y, xx) += self.grad.at(b, c, y, xx) * gam * is;
        }
      }
    };
  }
  return node;
}

// ---------- detection helpers ----------

Var gather_cells(const Var& x, std::vector<CellIndex> cells) {
  check(x->value.rank() == 4, "gather_cells expects (B,C,H,W)");
  check(!cells.empty(), "gather_cells: empty index list");
  const int64_t C = x->value.dim(1);
  const int64_t K = static_cast<int64_t>(cells.size());
  for (const auto& cell : cells)
    check(cell.b >= 0 && cell.b < x->value.dim(0) && cell.y >= 0 && cell.y < x->value.dim(2) &&
              cell.x >= 0 && cell.x < x->value.dim(3),
          "gather_cells: index out of range");
  Tensor out({K, C});
  for (int64_t kk = 0; kk < K; ++kk)
    for (int64_t c = 0; c < C; ++c) out.at(kk, c) = x->value.at(cells[kk].b, c, cells[kk].y, cells[kk].x);
  Var node = make_node(std::move(out), {x}, "gather_cells");
  if (node->requires_grad) {
    node->backprop = [cells, C, K](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t kk = 0; kk < K; ++kk)
        for (int64_t c = 0; c < C; ++c)
          p->grad.at(cells[kk].b, c, cells[kk].y, cells[kk].x) += self.grad.at(kk, c);
    };
  }
  return node;
}

Var bce_with_logits(const Var& logits, Tensor targets) {
  check(targets.same_shape(logits->value), "bce_with_logits: target shape mismatch");
  Tensor out(logits->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double z = logits->value[i], y = targets[i];
    // stable form: max(z,0) - z*y + log(1 + exp(-|z|))
    out[i] = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
  }
  Var node = make_node(std::move(out), {logits}, "bce_with_logits");
  if (node->requires_grad) {
    node->backprop = [targets](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-p->value[i]));
        p->grad[i] += self.grad[i] * (s - targets[i]);
      }
    };
  }
  return node;
}

Var pairwise_distance(const Var& x) {
  check(x->value.rank() == 3, "pairwise_distance expects (B,N,C)");
  const int64_t B = x->value.dim(0), N = x->value.dim(1), C = x->value.dim(2);
  Tensor out({B, N, N});
  kernels::par::pairwise_distance(x->value.data(), out.data(), B, N, C);
  Var node = make_node(std::move(out), {x}, "pairwise_distance");
  if (node->requires_grad) {
    // d(i,j) = |x_i - x_j|; zero-distance pairs (the diagonal) get zero
    // subgradient.
    node->backprop = [B, N, C](Node& self) {
      Node* p = self.parents[0].get();
      p->ensure_grad();
      const Tensor& xv = p->value;
      const Tensor& dv = self.value;
#pragma omp parallel for schedule(static) if (B * N * N * C > 16384)
      for (int64_t bi = 0; bi < B * N; ++bi) {
        const int64_t b = bi / N, i = bi % N;
        for (int64_t j = 0; j < N; ++j) {
          if (j == i) continue;
          const double d = dv.at(b, i, j);
          if (d <= 0.0) continue;
          const double w = (self.grad.at(b, i, j) + self.grad.at(b, j, i)) / d;
          if (w == 0.0) continue;
          for (int64_t c = 0; c < C; ++c)
            p->grad.at(b, i, c) += w * (xv.at(b, i, c) - xv.at(b, j, c));
        }
      }
    };
  }
  return node;
}

}  // namespace hd::ag
