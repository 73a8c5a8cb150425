#pragma once

// Soft actor-critic losses with closed-form gradients for the fixed
// two-hidden-layer networks of nn.hpp. Everything is templated on the scalar
// so training can run in float while gradient checks run in double.

#include <cmath>
#include <numbers>

#include "periopt/nn.hpp"

namespace periopt::sac {

using nn::Mat;
using nn::Mlp;
using nn::Vec;

inline constexpr int kActionDim = 3;
inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Transitions as columns.
template <class T>
struct Batch {
  Mat<T> obs;       // D x B
  Mat<T> actions;   // 3 x B, inside (-1, 1)
  Vec<T> rewards;   // B
  Mat<T> next_obs;  // D x B
  Vec<T> done;      // B, 1 for terminal (success) transitions

  int size() const { return static_cast<int>(obs.cols()); }
};

template <class T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

/// Reparameterized sample a = tanh(mean + std * xi) with its log density.
template <class T>
struct PolicySample {
  typename Mlp<T>::Cache cache;
  Mat<T> mean;
  Mat<T> log_std;     // clamped
  Mat<T> in_range;    // 1 where the raw log std was inside the clamp range
  Mat<T> std;
  Mat<T> xi;
  Mat<T> u;
  Mat<T> a;
  Vec<T> logp;
};

template <class T>
PolicySample<T> sample_policy(const Mlp<T>& actor, const Mat<T>& obs, const Mat<T>& xi) {
  PolicySample<T> s;
  const Mat<T> out = actor.forward(obs, &s.cache);
  s.mean = out.topRows(kActionDim);
  const Mat<T> raw = out.bottomRows(kActionDim);
  s.log_std = raw.cwiseMax(T(kLogStdMin)).cwiseMin(T(kLogStdMax));
  s.in_range = ((raw.array() >= T(kLogStdMin)) && (raw.array() <= T(kLogStdMax))).template cast<T>().matrix();
  s.std = s.log_std.array().exp().matrix();
  s.xi = xi;
  s.u = s.mean + s.std.cwiseProduct(xi);
  s.a = s.u.array().tanh().matrix();
  const T half_log_2pi = T(0.5 * std::log(2.0 * std::numbers::pi));
  const T ln2 = T(std::numbers::ln2);
  s.logp = Vec<T>::Zero(obs.cols());
  for (Eigen::Index b = 0; b < obs.cols(); ++b) {
    T lp = 0;
    for (int j = 0; j < kActionDim; ++j) {
      const T u = s.u(j, b);
      // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
      lp += T(-0.5) * xi(j, b) * xi(j, b) - s.log_std(j, b) - half_log_2pi - T(2) * (ln2 - u - softplus(T(-2) * u));
    }
    s.logp[b] = lp;
  }
  return s;
}

/// tanh(mean): the deterministic action.
template <class T>
Mat<T> mean_action(const Mlp<T>& actor, const Mat<T>& obs) {
  return actor.forward(obs).topRows(kActionDim).array().tanh().matrix();
}

template <class T>
Mat<T> concat_rows(const Mat<T>& top, const Mat<T>& bottom) {
  Mat<T> x(top.rows() + bottom.rows(), top.cols());
  x << top, bottom;
  return x;
}

template <class T>
struct CriticResult {
  T loss = 0;
  Vec<T> grad_q1;
  Vec<T> grad_q2;   // empty without twin critics
  Vec<T> target;
  Vec<T> q1;
  Vec<T> q2;
};

/// Mean over the batch of 1/2 (Q_i - y)^2 summed over the critics, with
/// y = r + gamma (1 - done) (min_i Q_i'(o', a') - alpha log pi(a'|o')) and
/// a' drawn with noise xi_next. The target is a constant.
template <class T>
CriticResult<T> critic_loss(const Mlp<T>& q1, const Mlp<T>* q2, const Mlp<T>& q1_target, const Mlp<T>* q2_target,
                            const Mlp<T>& actor, const Batch<T>& batch, const Mat<T>& xi_next, T alpha, T gamma) {
  const int n = batch.size();
  const T inv_n = T(1) / T(n);
  CriticResult<T> r;

  const PolicySample<T> next = sample_policy(actor, batch.next_obs, xi_next);
  const Mat<T> next_in = concat_rows(batch.next_obs, next.a);
  Vec<T> q_next = q1_target.forward(next_in).row(0).transpose();
  if (q2_target) q_next = q_next.cwiseMin(Vec<T>(q2_target->forward(next_in).row(0).transpose()));
  r.target = batch.rewards + gamma * (Vec<T>::Ones(n) - batch.done).cwiseProduct(q_next - alpha * next.logp);

  const Mat<T> in = concat_rows(batch.obs, batch.actions);
  auto one = [&](const Mlp<T>& q, Vec<T>& values, Vec<T>& grad) {
    typename Mlp<T>::Cache cache;
    values = q.forward(in, &cache).row(0).transpose();
    const Vec<T> diff = values - r.target;
    r.loss += T(0.5) * diff.squaredNorm() * inv_n;
    grad = Vec<T>::Zero(q.params().size());
    q.backward(cache, Mat<T>((diff * inv_n).transpose()), &grad, false);
  };
  one(q1, r.q1, r.grad_q1);
  if (q2) one(*q2, r.q2, r.grad_q2);
  return r;
}

template <class T>
struct ActorResult {
  T loss = 0;
  Vec<T> grad;
  Vec<T> logp;   // log pi of the fresh actions, reused by the temperature loss
};

/// Mean over the batch of alpha log pi(a|o) - min_i Q_i(o, a) for
/// reparameterized a = tanh(mean + std xi). Critic parameters are constants.
template <class T>
ActorResult<T> actor_loss(const Mlp<T>& actor, const Mlp<T>& q1, const Mlp<T>* q2, const Mat<T>& obs,
                          const Mat<T>& xi, T alpha) {
  const int n = static_cast<int>(obs.cols());
  const T inv_n = T(1) / T(n);
  ActorResult<T> r;

  const PolicySample<T> s = sample_policy(actor, obs, xi);
  const Mat<T> in = concat_rows(obs, s.a);
  typename Mlp<T>::Cache c1, c2;
  const Vec<T> v1 = q1.forward(in, &c1).row(0).transpose();
  Vec<T> qmin = v1;
  Vec<T> use_first = Vec<T>::Ones(n);
  Vec<T> v2;
  if (q2) {
    v2 = q2->forward(in, &c2).row(0).transpose();
    for (int b = 0; b < n; ++b) {
      if (v2[b] < v1[b]) {
        qmin[b] = v2[b];
        use_first[b] = 0;
      }
    }
  }
  r.loss = (alpha * s.logp - qmin).sum() * inv_n;
  r.logp = s.logp;

  // dQmin/da through whichever critic is smaller for each sample.
  const Mat<T> dq1 = q1.backward(c1, Mat<T>(use_first.transpose()), nullptr, true).bottomRows(kActionDim);
  Mat<T> dq_da = dq1;
  if (q2) {
    const Mat<T> sel2 = (Vec<T>::Ones(n) - use_first).transpose();
    dq_da += q2->backward(c2, sel2, nullptr, true).bottomRows(kActionDim);
  }

  // log pi = sum[-xi^2/2 - log_std - log(2 pi)/2 - log(1 - tanh(u)^2)],
  // d/du of the last term is 2 tanh(u) = 2a.
  const Mat<T> one_minus_a2 = (Mat<T>::Ones(kActionDim, n) - s.a.cwiseAbs2());
  const Mat<T> dl_du = (alpha * T(2) * s.a - dq_da.cwiseProduct(one_minus_a2)) * inv_n;
  const Mat<T> dl_dmean = dl_du;
  const Mat<T> dl_dlogstd =
      (dl_du.cwiseProduct(s.std).cwiseProduct(s.xi) - Mat<T>::Constant(kActionDim, n, alpha * inv_n))
          .cwiseProduct(s.in_range);
  r.grad = Vec<T>::Zero(actor.params().size());
  actor.backward(s.cache, concat_rows(dl_dmean, dl_dlogstd), &r.grad, false);
  return r;
}

template <class T>
struct AlphaResult {
  T loss = 0;
  T grad = 0;
};

/// -mean(log_alpha (log pi + target_entropy)), with log pi held constant.
template <class T>
AlphaResult<T> alpha_loss(T log_alpha, const Vec<T>& logp, T target_entropy) {
  const T m = (logp.array() + target_entropy).mean();
  return {-log_alpha * m, -m};
}

}  // namespace periopt::sac
