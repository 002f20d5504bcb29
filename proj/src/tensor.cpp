#include "hd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hd {

void fail(const std::string& msg) { throw std::runtime_error(msg); }

namespace {
int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check(shape_numel(shape_) == static_cast<int64_t>(data_.size()),
        "tensor data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  check(shape_numel(new_shape) == numel(),
        "reshape " + shape_str() + " -> " + hd::shape_str(new_shape) + " changes element count");
  return Tensor(std::move(new_shape), data_);
}

std::string Tensor::shape_str() const { return hd::shape_str(shape_); }

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

double Rng::uniform(double a, double b) {
  std::uniform_real_distribution<double> d(a, b);
  return d(eng);
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(eng);
}

int64_t Rng::randint(int64_t lo, int64_t hi) {
  std::uniform_int_distribution<int64_t> d(lo, hi);
  return d(eng);
}

Tensor Rng::normal_tensor(std::vector<int64_t> shape, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int64_t> shape, double a, double b) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(a, b);
  return t;
}

// splitmix64 finalizer; decorrelates derived seeds
uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace hd
