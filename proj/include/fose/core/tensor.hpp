#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fose {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles. Copies are shallow (shared buffer);
/// every op in nn/ops.hpp allocates a fresh output.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}
  Tensor(Shape shape, double fill)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(std::move(values))) {
    if ((int64_t)buf_->size() != shape_numel(shape_))
      throw ShapeError("tensor: value count does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return buf_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return (int)shape_.size(); }
  int dim(int i) const { return shape_[(size_t)i]; }
  int64_t numel() const { return buf_ ? (int64_t)buf_->size() : 0; }

  double* data() { return buf_->data(); }
  const double* data() const { return buf_->data(); }

  double& operator[](int64_t i) { return (*buf_)[(size_t)i]; }
  double operator[](int64_t i) const { return (*buf_)[(size_t)i]; }

  // 4-D NCHW access; also 3-D/2-D helpers.
  double& at(int n, int c, int h, int w) {
    return (*buf_)[(size_t)(((int64_t)n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(int n, int c, int h, int w) const {
    return (*buf_)[(size_t)(((int64_t)n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double& at(int c, int h, int w) {
    return (*buf_)[(size_t)((int64_t)c * shape_[1] + h) * shape_[2] + w];
  }
  double at(int c, int h, int w) const {
    return (*buf_)[(size_t)((int64_t)c * shape_[1] + h) * shape_[2] + w];
  }
  double& at(int r, int c) { return (*buf_)[(size_t)r * shape_[1] + c]; }
  double at(int r, int c) const { return (*buf_)[(size_t)r * shape_[1] + c]; }

  /// Same buffer, new shape (numel must match).
  Tensor viewed(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("view: numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.buf_ = buf_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<double>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(buf_->begin(), buf_->end(), v); }

  bool all_finite() const {
    for (double v : *buf_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// ---- plain (non-differentiable) tensor math, used by schedules/samplers/data ----

inline Tensor t_add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_add");
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = a[i] + b[i];
  return o;
}

inline Tensor t_sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_sub");
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = a[i] - b[i];
  return o;
}

inline Tensor t_mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_mul");
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = a[i] * b[i];
  return o;
}

inline Tensor t_scale(const Tensor& a, double s) {
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = a[i] * s;
  return o;
}

inline Tensor t_axpby(double alpha, const Tensor& a, double beta, const Tensor& b) {
  check_same_shape(a, b, "t_axpby");
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = alpha * a[i] + beta * b[i];
  return o;
}

inline Tensor t_clip(const Tensor& a, double lo, double hi) {
  Tensor o(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) o[i] = std::min(hi, std::max(lo, a[i]));
  return o;
}

inline double t_mean(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
  return s / (double)a.numel();
}

inline double t_mean_abs(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i]);
  return s / (double)a.numel();
}

inline double t_max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double t_mean_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "t_mean_abs_diff");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
  return s / (double)a.numel();
}

}  // namespace fose
