#include "hd/kernels.hpp"

#include <cmath>

#include "hd/tensor.hpp"

namespace hd::kernels {

ConvDims ConvDims::make(int64_t batch, int64_t c_in, int64_t h_in, int64_t w_in, int64_t c_out,
                        int64_t k, int64_t stride, int64_t pad) {
  ConvDims d;
  d.batch = batch;
  d.c_in = c_in;
  d.h_in = h_in;
  d.w_in = w_in;
  d.c_out = c_out;
  d.k = k;
  d.stride = stride;
  d.pad = pad;
  d.h_out = (h_in + 2 * pad - k) / stride + 1;
  d.w_out = (w_in + 2 * pad - k) / stride + 1;
  check(d.h_out >= 1 && d.w_out >= 1,
        "conv2d output would be empty for input " + std::to_string(h_in) + "x" +
            std::to_string(w_in) + " kernel " + std::to_string(k));
  return d;
}

namespace detail {

// Per-element computations shared by the serial and parallel drivers, so the
// two flavors are arithmetically identical.

inline double conv_out_at(const double* x, const double* w, const ConvDims& d, int64_t b,
                          int64_t o, int64_t oh, int64_t ow) {
  double acc = 0.0;
  const int64_t ih0 = oh * d.stride - d.pad;
  const int64_t iw0 = ow * d.stride - d.pad;
  for (int64_t i = 0; i < d.c_in; ++i) {
    const double* xc = x + ((b * d.c_in + i) * d.h_in) * d.w_in;
    const double* wc = w + ((o * d.c_in + i) * d.k) * d.k;
    for (int64_t kh = 0; kh < d.k; ++kh) {
      const int64_t ih = ih0 + kh;
      if (ih < 0 || ih >= d.h_in) continue;
      for (int64_t kw = 0; kw < d.k; ++kw) {
        const int64_t iw = iw0 + kw;
        if (iw < 0 || iw >= d.w_in) continue;
        acc += xc[ih * d.w_in + iw] * wc[kh * d.k + kw];
      }
    }
  }
  return acc;
}

inline double conv_gx_at(const double* gy, const double* w, const ConvDims& d, int64_t b,
                         int64_t i, int64_t ih, int64_t iw) {
  double acc = 0.0;
  for (int64_t o = 0; o < d.c_out; ++o) {
    const double* gc = gy + ((b * d.c_out + o) * d.h_out) * d.w_out;
    const double* wc = w + ((o * d.c_in + i) * d.k) * d.k;
    for (int64_t kh = 0; kh < d.k; ++kh) {
      const int64_t num_h = ih + d.pad - kh;
      if (num_h < 0 || num_h % d.stride != 0) continue;
      const int64_t oh = num_h / d.stride;
      if (oh >= d.h_out) continue;
      for (int64_t kw = 0; kw < d.k; ++kw) {
        const int64_t num_w = iw + d.pad - kw;
        if (num_w < 0 || num_w % d.stride != 0) continue;
        const int64_t ow = num_w / d.stride;
        if (ow >= d.w_out) continue;
        acc += gc[oh * d.w_out + ow] * wc[kh * d.k + kw];
      }
    }
  }
  return acc;
}

inline double conv_gw_at(const double* gy, const double* x, const ConvDims& d, int64_t o,
                         int64_t i, int64_t kh, int64_t kw) {
  double acc = 0.0;
  for (int64_t b = 0; b < d.batch; ++b) {
    const double* gc = gy + ((b * d.c_out + o) * d.h_out) * d.w_out;
    const double* xc = x + ((b * d.c_in + i) * d.h_in) * d.w_in;
    for (int64_t oh = 0; oh < d.h_out; ++oh) {
      const int64_t ih = oh * d.stride - d.pad + kh;
      if (ih < 0 || ih >= d.h_in) continue;
      for (int64_t ow = 0; ow < d.w_out; ++ow) {
        const int64_t iw = ow * d.stride - d.pad + kw;
        if (iw < 0 || iw >= d.w_in) continue;
        acc += gc[oh * d.w_out + ow] * xc[ih * d.w_in + iw];
      }
    }
  }
  return acc;
}

inline double conv_gb_at(const double* gy, const ConvDims& d, int64_t o) {
  double acc = 0.0;
  for (int64_t b = 0; b < d.batch; ++b) {
    const double* gc = gy + ((b * d.c_out + o) * d.h_out) * d.w_out;
    for (int64_t s = 0; s < d.h_out * d.w_out; ++s) acc += gc[s];
  }
  return acc;
}

inline double mat_at(const double* a, bool trans, int64_t rows, int64_t cols, int64_t r,
                     int64_t c) {
  // logical (rows x cols) element; storage is transposed when trans is set
  return trans ? a[c * rows + r] : a[r * cols + c];
}

inline double matmul_at(const double* a, bool ta, const double* b, bool tb, int64_t n, int64_t m,
                        int64_t k, int64_t r, int64_t c) {
  double acc = 0.0;
  for (int64_t kk = 0; kk < k; ++kk)
    acc += mat_at(a, ta, n, k, r, kk) * mat_at(b, tb, k, m, kk, c);
  return acc;
}

inline double pdist_at(const double* x, int64_t c, int64_t n, int64_t b, int64_t i, int64_t j) {
  const double* xi = x + (b * n + i) * c;
  const double* xj = x + (b * n + j) * c;
  double acc = 0.0;
  for (int64_t f = 0; f < c; ++f) {
    const double diff = xi[f] - xj[f];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// HD_PAR expands to the OpenMP pragma in the parallel build of the kernel
// bodies and to nothing in the serial reference build.

#define HD_KERNEL_BODIES                                                                     \
  void conv2d_forward(const double* x, const double* w, const double* bias, double* y,       \
                      const ConvDims& d) {                                                   \
    const int64_t total = d.batch * d.c_out;                                                 \
    HD_PAR(total* d.h_out* d.w_out* d.c_in* d.k* d.k)                                        \
    for (int64_t bo = 0; bo < total; ++bo) {                                                 \
      const int64_t b = bo / d.c_out, o = bo % d.c_out;                                      \
      double* yc = y + ((b * d.c_out + o) * d.h_out) * d.w_out;                              \
      const double bval = bias ? bias[o] : 0.0;                                              \
      for (int64_t oh = 0; oh < d.h_out; ++oh)                                               \
        for (int64_t ow = 0; ow < d.w_out; ++ow)                                             \
          yc[oh * d.w_out + ow] = bval + detail::conv_out_at(x, w, d, b, o, oh, ow);         \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void conv2d_backward_input(const double* gy, const double* w, double* gx,                  \
                             const ConvDims& d) {                                            \
    const int64_t total = d.batch * d.c_in;                                                  \
    HD_PAR(total* d.h_in* d.w_in* d.c_out* d.k* d.k)                                         \
    for (int64_t bi = 0; bi < total; ++bi) {                                                 \
      const int64_t b = bi / d.c_in, i = bi % d.c_in;                                        \
      double* gc = gx + ((b * d.c_in + i) * d.h_in) * d.w_in;                                \
      for (int64_t ih = 0; ih < d.h_in; ++ih)                                                \
        for (int64_t iw = 0; iw < d.w_in; ++iw)                                              \
          gc[ih * d.w_in + iw] = detail::conv_gx_at(gy, w, d, b, i, ih, iw);                 \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void conv2d_backward_weight(const double* gy, const double* x, double* gw,                 \
                              const ConvDims& d) {                                           \
    const int64_t total = d.c_out * d.c_in;                                                  \
    HD_PAR(total* d.k* d.k* d.batch* d.h_out* d.w_out)                                       \
    for (int64_t oi = 0; oi < total; ++oi) {                                                 \
      const int64_t o = oi / d.c_in, i = oi % d.c_in;                                        \
      double* wc = gw + ((o * d.c_in + i) * d.k) * d.k;                                      \
      for (int64_t kh = 0; kh < d.k; ++kh)                                                   \
        for (int64_t kw = 0; kw < d.k; ++kw)                                                 \
          wc[kh * d.k + kw] = detail::conv_gw_at(gy, x, d, o, i, kh, kw);                    \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void conv2d_backward_bias(const double* gy, double* gb, const ConvDims& d) {               \
    HD_PAR(d.c_out* d.batch* d.h_out* d.w_out)                                               \
    for (int64_t o = 0; o < d.c_out; ++o) gb[o] = detail::conv_gb_at(gy, d, o);              \
  }                                                                                          \
                                                                                             \
  void matmul(const double* a, bool ta, const double* b, bool tb, double* out, int64_t n,    \
              int64_t m, int64_t k) {                                                        \
    HD_PAR(n* m* k)                                                                          \
    for (int64_t r = 0; r < n; ++r)                                                          \
      for (int64_t c = 0; c < m; ++c)                                                        \
        out[r * m + c] = detail::matmul_at(a, ta, b, tb, n, m, k, r, c);                     \
  }                                                                                          \
                                                                                             \
  void bmm(const double* a, bool ta, const double* b, bool tb, double* out, int64_t batch,   \
           int64_t n, int64_t m, int64_t k) {                                                \
    const int64_t total = batch * n;                                                         \
    HD_PAR(total* m* k)                                                                      \
    for (int64_t bn = 0; bn < total; ++bn) {                                                 \
      const int64_t bb = bn / n, r = bn % n;                                                 \
      const double* ab = a + bb * n * k;                                                     \
      const double* bbp = b + bb * k * m;                                                    \
      for (int64_t c = 0; c < m; ++c)                                                        \
        out[(bb * n + r) * m + c] = detail::matmul_at(ab, ta, bbp, tb, n, m, k, r, c);       \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void pairwise_distance(const double* x, double* dist, int64_t batch, int64_t n,            \
                         int64_t c) {                                                        \
    const int64_t total = batch * n;                                                         \
    HD_PAR(total* n* c)                                                                      \
    for (int64_t bi = 0; bi < total; ++bi) {                                                 \
      const int64_t b = bi / n, i = bi % n;                                                  \
      for (int64_t j = 0; j < n; ++j)                                                        \
        dist[(b * n + i) * n + j] = detail::pdist_at(x, c, n, b, i, j);                      \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void pixel_unshuffle(const double* x, double* y, int64_t batch, int64_t c, int64_t h,      \
                       int64_t w, int64_t r) {                                               \
    const int64_t oh = h / r, ow = w / r, oc = c * r * r;                                    \
    HD_PAR(batch* c* h* w)                                                                   \
    for (int64_t bc = 0; bc < batch * oc; ++bc) {                                            \
      const int64_t b = bc / oc, co = bc % oc;                                               \
      const int64_t ci = co / (r * r), rem = co % (r * r);                                   \
      const int64_t di = rem / r, dj = rem % r;                                              \
      const double* xc = x + ((b * c + ci) * h) * w;                                         \
      double* yc = y + ((b * oc + co) * oh) * ow;                                            \
      for (int64_t yy = 0; yy < oh; ++yy)                                                    \
        for (int64_t xx = 0; xx < ow; ++xx)                                                  \
          yc[yy * ow + xx] = xc[(yy * r + di) * w + (xx * r + dj)];                          \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void pixel_shuffle(const double* x, double* y, int64_t batch, int64_t c_out, int64_t h_out,\
                     int64_t w_out, int64_t r) {                                             \
    const int64_t c_in = c_out * r * r, h_in = h_out / r, w_in = w_out / r;                  \
    HD_PAR(batch* c_out* h_out* w_out)                                                       \
    for (int64_t bc = 0; bc < batch * c_out; ++bc) {                                         \
      const int64_t b = bc / c_out, co = bc % c_out;                                         \
      double* yc = y + ((b * c_out + co) * h_out) * w_out;                                   \
      for (int64_t yy = 0; yy < h_out; ++yy) {                                               \
        const int64_t di = yy % r, iy = yy / r;                                              \
        for (int64_t xx = 0; xx < w_out; ++xx) {                                             \
          const int64_t dj = xx % r, ix = xx / r;                                            \
          const int64_t ci = co * r * r + di * r + dj;                                       \
          yc[yy * w_out + xx] = x[((b * c_in + ci) * h_in + iy) * w_in + ix];                \
        }                                                                                    \
      }                                                                                      \
    }                                                                                        \
  }                                                                                          \
                                                                                             \
  void nearest_resize(const double* x, double* y, int64_t batch, int64_t c, int64_t h,       \
                      int64_t w, int64_t oh, int64_t ow) {                                   \
    const int64_t total = batch * c;                                                         \
    HD_PAR(total* oh* ow)                                                                    \
    for (int64_t bc = 0; bc < total; ++bc) {                                                 \
      const double* xc = x + bc * h * w;                                                     \
      double* yc = y + bc * oh * ow;                                                         \
      for (int64_t yy = 0; yy < oh; ++yy) {                                                  \
        const int64_t iy = (yy * h) / oh;                                                    \
        for (int64_t xx = 0; xx < ow; ++xx) yc[yy * ow + xx] = xc[iy * w + (xx * w) / ow];   \
      }                                                                                      \
    }                                                                                        \
  }

namespace ref {
#define HD_PAR(work)
HD_KERNEL_BODIES
#undef HD_PAR
}  // namespace ref

namespace par {
// Parallelism is only worth the fork for enough arithmetic.
#define HD_PRAGMA(text) _Pragma(#text)
#define HD_PAR(work) HD_PRAGMA(omp parallel for schedule(static) if ((work) > 16384))
HD_KERNEL_BODIES
#undef HD_PAR
#undef HD_PRAGMA
}  // namespace par

#undef HD_KERNEL_BODIES

}  // namespace hd::kernels
