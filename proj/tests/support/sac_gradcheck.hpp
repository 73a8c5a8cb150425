#pragma once

// Central finite-difference check of the closed-form SAC loss gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "periopt/sac_losses.hpp"

namespace periopt::testing {

struct GradCheckResult {
  double actor = 0.0;    // worst relative component error
  double critic_q1 = 0.0;
  double critic_q2 = 0.0;
  double alpha = 0.0;
  std::size_t components = 0;
};

/// Worst |analytic - fd| / max(|analytic|, |fd|, floor) over all parameters.
inline double worst_relative_error(Eigen::VectorXd& theta, const Eigen::VectorXd& analytic,
                                   const std::function<double()>& loss, double h, double floor,
                                   std::size_t* count = nullptr) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + h;
    const double up = loss();
    theta[i] = keep - h;
    const double down = loss();
    theta[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(fd - analytic[i]) / scale);
    if (count) ++*count;
  }
  return worst;
}

/// Builds width-(4,4) double-precision networks with `obs_dim` inputs and a
/// seeded batch, then compares every analytic parameter gradient of the
/// critic, actor and temperature losses against central differences.
inline GradCheckResult sac_gradient_check(int obs_dim, int batch_size, std::uint64_t seed, double h = 1e-5,
                                          double floor = 1e-8) {
  using namespace periopt::sac;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-0.95, 0.95);

  nn::Mlp<double> actor({obs_dim, 4, 4, 2 * kActionDim});
  nn::Mlp<double> q1({obs_dim + kActionDim, 4, 4, 1}), q2({obs_dim + kActionDim, 4, 4, 1});
  nn::Mlp<double> q1t({obs_dim + kActionDim, 4, 4, 1}), q2t({obs_dim + kActionDim, 4, 4, 1});
  for (auto* net : {&actor, &q1, &q2, &q1t, &q2t}) net->init(rng);

  Batch<double> b;
  b.obs = Mat<double>(obs_dim, batch_size);
  b.next_obs = Mat<double>(obs_dim, batch_size);
  b.actions = Mat<double>(kActionDim, batch_size);
  b.rewards = Vec<double>(batch_size);
  b.done = Vec<double>(batch_size);
  for (Eigen::Index i = 0; i < b.obs.size(); ++i) b.obs.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < b.next_obs.size(); ++i) b.next_obs.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < b.actions.size(); ++i) b.actions.data()[i] = unit(rng);
  for (int i = 0; i < batch_size; ++i) {
    b.rewards[i] = normal(rng);
    b.done[i] = i % 3 == 0 ? 1.0 : 0.0;
  }
  Mat<double> xi(kActionDim, batch_size), xi_next(kActionDim, batch_size);
  for (Eigen::Index i = 0; i < xi.size(); ++i) xi.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < xi_next.size(); ++i) xi_next.data()[i] = normal(rng);
  const double alpha = 0.37, gamma = 0.995, target_entropy = -8.0;

  GradCheckResult r;
  const auto critic = critic_loss<double>(q1, &q2, q1t, &q2t, actor, b, xi_next, alpha, gamma);
  auto critic_value = [&] { return critic_loss<double>(q1, &q2, q1t, &q2t, actor, b, xi_next, alpha, gamma).loss; };
  r.critic_q1 = worst_relative_error(q1.params(), critic.grad_q1, critic_value, h, floor, &r.components);
  r.critic_q2 = worst_relative_error(q2.params(), critic.grad_q2, critic_value, h, floor, &r.components);

  const auto act = actor_loss<double>(actor, q1, &q2, b.obs, xi, alpha);
  auto actor_value = [&] { return actor_loss<double>(actor, q1, &q2, b.obs, xi, alpha).loss; };
  r.actor = worst_relative_error(actor.params(), act.grad, actor_value, h, floor, &r.components);

  Eigen::VectorXd log_alpha = Eigen::VectorXd::Constant(1, std::log(alpha));
  const auto temp = alpha_loss<double>(log_alpha[0], act.logp, target_entropy);
  auto alpha_value = [&] { return alpha_loss<double>(log_alpha[0], act.logp, target_entropy).loss; };
  r.alpha = worst_relative_error(log_alpha, Eigen::VectorXd::Constant(1, temp.grad), alpha_value, h, floor,
                                 &r.components);
  return r;
}

}  // namespace periopt::testing
