#pragma once

#include <cstdint>

// Numeric kernels behind the autograd ops. Each kernel comes in two flavors
// with identical per-element arithmetic: kernels::par (OpenMP) is what the
// library calls, kernels::ref (serial) is kept as the reference for tests and
// for the benchmark tool. Parallelism is always over independent output
// elements, so results do not depend on the thread count.

namespace hd::kernels {

struct ConvDims {
  int64_t batch{}, c_in{}, h_in{}, w_in{};
  int64_t c_out{}, k{}, stride{}, pad{};
  int64_t h_out{}, w_out{};

  static ConvDims make(int64_t batch, int64_t c_in, int64_t h_in, int64_t w_in, int64_t c_out,
                       int64_t k, int64_t stride, int64_t pad);
};

#define HD_DECLARE_KERNELS                                                                       \
  void conv2d_forward(const double* x, const double* w, const double* bias, double* y,           \
                      const ConvDims& d);                                                        \
  void conv2d_backward_input(const double* gy, const double* w, double* gx, const ConvDims& d);  \
  void conv2d_backward_weight(const double* gy, const double* x, double* gw, const ConvDims& d); \
  void conv2d_backward_bias(const double* gy, double* gb, const ConvDims& d);                    \
  /* out(n,m) = op(a)(n,k) * op(b)(k,m); ta/tb read the operand transposed */                    \
  void matmul(const double* a, bool ta, const double* b, bool tb, double* out, int64_t n,        \
              int64_t m, int64_t k);                                                             \
  void bmm(const double* a, bool ta, const double* b, bool tb, double* out, int64_t batch,       \
           int64_t n, int64_t m, int64_t k);                                                     \
  /* x: (batch,n,c) -> d: (batch,n,n) Euclidean distances */                                     \
  void pairwise_distance(const double* x, double* dist, int64_t batch, int64_t n, int64_t c);    \
  /* (b,c,h,w) -> (b,c*r*r,h/r,w/r); out channel c*r*r+(i*r+j) at (y,x) is in(c, y*r+i, x*r+j) */\
  void pixel_unshuffle(const double* x, double* y, int64_t batch, int64_t c, int64_t h,          \
                       int64_t w, int64_t r);                                                    \
  /* inverse of pixel_unshuffle; input (b,c*r*r,h,w) -> output (b,c,h*r,w*r) */                  \
  void pixel_shuffle(const double* x, double* y, int64_t batch, int64_t c_out, int64_t h_out,    \
                     int64_t w_out, int64_t r);                                                  \
  /* nearest neighbour: out(oy,ox) = in((oy*h)/oh, (ox*w)/ow) */                                 \
  void nearest_resize(const double* x, double* y, int64_t batch, int64_t c, int64_t h,           \
                      int64_t w, int64_t oh, int64_t ow);

namespace ref {
HD_DECLARE_KERNELS
}
namespace par {
HD_DECLARE_KERNELS
}

#undef HD_DECLARE_KERNELS

}  // namespace hd::kernels
