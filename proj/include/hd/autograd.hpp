#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hd/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor. Every op records its
// parents and a pull-style backward closure; backward() walks the graph in
// reverse topological order. Parameters are leaves that outlive the graphs
// built from them; intermediate nodes are freed once the loss Var is dropped.

namespace hd::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;
  const char* op = "leaf";

  void ensure_grad();
  void add_grad(const Tensor& g);
  void zero_grad();
};

Var leaf(Tensor value, bool requires_grad);
Var constant(Tensor value);

// Seeds grad with ones for a scalar root (or `seed` when given) and
// propagates. Grads accumulate into leaves; callers zero them between steps.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// ---- elementwise binaries; shapes must match or broadcast (dim equal or 1,
// same rank) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);

// ---- elementwise unaries ----
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var vexp(const Var& a);
Var vsqrt(const Var& a);
Var vatan(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var leaky_relu(const Var& a, double negative_slope);
Var clamp(const Var& a, double lo, double hi);

// ---- shape ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, int64_t start, int64_t len);
Var to_vertices(const Var& a);                          // (B,C,H,W) -> (B,H*W,C)
Var from_vertices(const Var& a, int64_t h, int64_t w);  // inverse

// ---- reductions / pooling ----
Var sum_all(const Var& a);   // -> shape (1)
Var mean_all(const Var& a);  // -> shape (1)
Var mean_channels(const Var& a);  // (B,C,H,W) -> (B,1,H,W)
Var max_channels(const Var& a);   // (B,C,H,W) -> (B,1,H,W)
Var global_avg_pool(const Var& a);  // (B,C,H,W) -> (B,C,1,1)
Var global_max_pool(const Var& a);  // (B,C,H,W) -> (B,C,1,1)
Var adaptive_avg_pool(const Var& a, int64_t oh, int64_t ow);

// ---- geometry ----
Var nearest_resize(const Var& a, int64_t oh, int64_t ow);
Var pixel_unshuffle(const Var& a, int64_t r);
Var pixel_shuffle(const Var& a, int64_t r);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);  // (n,k) x (k,m)
Var bmm(const Var& a, const Var& b);     // (B,n,k) x (B,k,m)
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);

// ---- batch norm ----
struct BnBuffers {
  Tensor running_mean;
  Tensor running_var;
};
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BnBuffers& buffers,
                bool training, double momentum, double eps);

// ---- detection helpers ----
struct CellIndex {
  int64_t b, y, x;
};
Var gather_cells(const Var& x, std::vector<CellIndex> cells);  // (B,C,H,W) -> (K,C)
Var bce_with_logits(const Var& logits, Tensor targets);        // elementwise losses
Var pairwise_distance(const Var& x);  // (B,N,C) -> (B,N,N)

}  // namespace hd::ag
