#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace periopt::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Layer widths of a two-hidden-layer perceptron.
struct MlpShape {
  int in = 0;
  int h1 = 0;
  int h2 = 0;
  int out = 0;

  std::size_t num_params() const {
    return static_cast<std::size_t>(h1) * (in + 1) + static_cast<std::size_t>(h2) * (h1 + 1) +
           static_cast<std::size_t>(out) * (h2 + 1);
  }
  bool operator==(const MlpShape&) const = default;
};

/// in -> ReLU(h1) -> ReLU(h2) -> linear(out). Samples are columns. All
/// parameters live in one flat vector laid out as W1, b1, W2, b2, W3, b3 with
/// column-major weight matrices, so optimizers and serialization see a single
/// array.
template <class T>
class Mlp {
 public:
  struct Cache {
    Mat<T> x;
    Mat<T> a1;  // post-activation, layer 1
    Mat<T> a2;
  };

  Mlp() = default;
  explicit Mlp(MlpShape shape) : shape_(shape), theta_(Vec<T>::Zero(static_cast<Eigen::Index>(shape.num_params()))) {
    if (shape.in < 1 || shape.h1 < 1 || shape.h2 < 1 || shape.out < 1) throw std::invalid_argument("bad MLP shape");
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init(std::mt19937_64& rng) {
    fill_layer(rng, offset_w(0), shape_.h1, shape_.in);
    fill_layer(rng, offset_w(1), shape_.h2, shape_.h1);
    fill_layer(rng, offset_w(2), shape_.out, shape_.h2);
  }

  const MlpShape& shape() const { return shape_; }
  Vec<T>& params() { return theta_; }
  const Vec<T>& params() const { return theta_; }

  template <class U>
  Mlp<U> cast() const {
    Mlp<U> out(shape_);
    out.params() = theta_.template cast<U>();
    return out;
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache = nullptr) const {
    if (x.rows() != shape_.in) throw std::invalid_argument("MLP input has wrong dimension");
    Mat<T> a1 = ((w(0) * x).colwise() + b(0)).cwiseMax(T(0));
    Mat<T> a2 = ((w(1) * a1).colwise() + b(1)).cwiseMax(T(0));
    Mat<T> y = (w(2) * a2).colwise() + b(2);
    if (cache) {
      cache->x = x;
      cache->a1 = std::move(a1);
      cache->a2 = std::move(a2);
    }
    return y;
  }

  /// Back-propagates dL/dy. Adds dL/dtheta into `grad` when it is non-null and
  /// returns dL/dx when `want_input_grad`.
  Mat<T> backward(const Cache& c, const Mat<T>& dy, Vec<T>* grad, bool want_input_grad) const {
    Mat<T> dz2 = (w(2).transpose() * dy).cwiseProduct(positive(c.a2));
    Mat<T> dz1 = (w(1).transpose() * dz2).cwiseProduct(positive(c.a1));
    if (grad) {
      if (grad->size() != theta_.size()) *grad = Vec<T>::Zero(theta_.size());
      gw(*grad, 2).noalias() += dy * c.a2.transpose();
      gb(*grad, 2) += dy.rowwise().sum();
      gw(*grad, 1).noalias() += dz2 * c.a1.transpose();
      gb(*grad, 1) += dz2.rowwise().sum();
      gw(*grad, 0).noalias() += dz1 * c.x.transpose();
      gb(*grad, 0) += dz1.rowwise().sum();
    }
    if (!want_input_grad) return {};
    return w(0).transpose() * dz1;
  }

 private:
  using MatMap = Eigen::Map<Mat<T>>;
  using ConstMatMap = Eigen::Map<const Mat<T>>;
  using VecMap = Eigen::Map<Vec<T>>;
  using ConstVecMap = Eigen::Map<const Vec<T>>;

  std::array<int, 4> widths() const { return {shape_.in, shape_.h1, shape_.h2, shape_.out}; }

  std::size_t offset_w(int layer) const {
    const auto wd = widths();
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l) off += static_cast<std::size_t>(wd[l + 1]) * (wd[l] + 1);
    return off;
  }
  std::size_t offset_b(int layer) const {
    const auto wd = widths();
    return offset_w(layer) + static_cast<std::size_t>(wd[layer + 1]) * wd[layer];
  }

  ConstMatMap w(int l) const {
    const auto wd = widths();
    return ConstMatMap(theta_.data() + offset_w(l), wd[l + 1], wd[l]);
  }
  ConstVecMap b(int l) const { return ConstVecMap(theta_.data() + offset_b(l), widths()[l + 1]); }
  MatMap gw(Vec<T>& g, int l) const {
    const auto wd = widths();
    return MatMap(g.data() + offset_w(l), wd[l + 1], wd[l]);
  }
  VecMap gb(Vec<T>& g, int l) const { return VecMap(g.data() + offset_b(l), widths()[l + 1]); }

  static Mat<T> positive(const Mat<T>& a) { return (a.array() > T(0)).template cast<T>().matrix(); }

  void fill_layer(std::mt19937_64& rng, std::size_t off, int rows, int cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    const std::size_t n = static_cast<std::size_t>(rows) * (cols + 1);
    for (std::size_t i = 0; i < n; ++i) theta_[static_cast<Eigen::Index>(off + i)] = static_cast<T>(u(rng));
  }

  MlpShape shape_;
  Vec<T> theta_;
};

/// Adam with bias correction.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps),
        m_(Vec<T>::Zero(static_cast<Eigen::Index>(n))), v_(Vec<T>::Zero(static_cast<Eigen::Index>(n))) {}

  void step(Vec<T>& params, const Vec<T>& grad) {
    ++t_;
    m_ = T(b1_) * m_ + T(1 - b1_) * grad;
    v_ = T(b2_) * v_ + T(1 - b2_) * grad.cwiseAbs2();
    const T c1 = T(1 - std::pow(b1_, t_));
    const T c2 = T(1 - std::pow(b2_, t_));
    params.array() -= T(lr_) * (m_.array() / c1) / ((v_.array() / c2).sqrt() + T(eps_));
  }

  long steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  Vec<T> m_, v_;
  long t_ = 0;
};

/// target <- tau * online + (1 - tau) * target.
template <class T>
void polyak(Vec<T>& target, const Vec<T>& online, double tau) {
  if (tau == 1.0) {
    target = online;
    return;
  }
  if (tau == 0.0) return;
  target = T(tau) * online + T(1 - tau) * target;
}

}  // namespace periopt::nn
