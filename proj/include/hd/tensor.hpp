#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace hd {

[[noreturn]] void fail(const std::string& msg);

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Dense row-major tensor of doubles. Rank is arbitrary but everything in this
// project is rank 1..4 (feature maps are NCHW, vertex sets are (B,N,C)).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool defined() const { return !shape_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at(int64_t b, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  double abs_max() const;
  Tensor reshaped(std::vector<int64_t> new_shape) const;
  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<int64_t>& shape);

// Deterministic RNG. All randomness in the project flows through explicit
// seeds; sub-streams are derived with mix_seed so parallel generation stays
// reproducible.
struct Rng {
  explicit Rng(uint64_t seed) : eng(seed) {}
  std::mt19937_64 eng;

  double uniform(double a, double b);
  double normal(double mean, double stddev);
  int64_t randint(int64_t lo, int64_t hi);  // inclusive range
  Tensor normal_tensor(std::vector<int64_t> shape, double mean, double stddev);
  Tensor uniform_tensor(std::vector<int64_t> shape, double a, double b);
};

uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b = 0);

}  // namespace hd
