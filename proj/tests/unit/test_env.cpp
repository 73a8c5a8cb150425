#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "periopt/env.hpp"
#include "periopt/error.hpp"
#include "test_support.hpp"

namespace periopt {
namespace {

const SpeciesTable kTable = SpeciesTable::defaults();

Structure lj_structure(int natoms, std::uint64_t seed) {
  RandomStructureRequest req;
  req.counts = {{"Ar", natoms}};
  req.target_volume = 40.0 * natoms;
  req.min_dist = 2.8;
  return random_structure(kTable, req, seed);
}

std::vector<Vec3> random_actions(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> a(n);
  for (auto& v : a) v = Vec3(u(rng), u(rng), u(rng));
  return a;
}

TEST(ScaleGradient, Examples) {
  EXPECT_EQ(scale_gradient(Vec3(3, 4, 0), 5.0), Vec3(3, 4, 0));
  EXPECT_EQ(scale_gradient(Vec3(10, 0, 0), 5.0), Vec3(5, 0, 0));
  EXPECT_TRUE(scale_gradient(Vec3(6, -8, 0), 5.0).isApprox(Vec3(3.75, -5, 0), 1e-15));
}

TEST(ScaleGradient, CappedAndCollinear) {
  std::mt19937_64 rng(5);
  std::lognormal_distribution<double> mag(0.0, 3.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 100000; ++i) {
    const Vec3 g0 = Vec3(n(rng), n(rng), n(rng)) * mag(rng);
    const Vec3 g = scale_gradient(g0, 5.0);
    ASSERT_LE(g.cwiseAbs().maxCoeff(), 5.0);
    ASSERT_NEAR(g.dot(g0) / (g.norm() * g0.norm()), 1.0, 1e-12);
  }
}

TEST(ActionScale, Examples) {
  EXPECT_DOUBLE_EQ(action_scale(Vec3(0.2, 0, 0), 0.4), 0.2);
  EXPECT_DOUBLE_EQ(action_scale(Vec3(0, 7, 0), 0.4), 0.4);
  EXPECT_EQ(action_scale(Vec3::Zero(), 0.4), 0.0);
}

TEST(Observation, Lengths) {
  EnvConfig cfg;
  EXPECT_EQ(observation_length(cfg), 204);
  cfg.k = 3;
  EXPECT_EQ(observation_length(cfg), 12 * 4 + 12);
  EXPECT_EQ(feature_length(FeatureVariant::FEAT6), 5);
  EXPECT_EQ(feature_length(FeatureVariant::FEAT7), 6);
  EXPECT_EQ(feature_length(FeatureVariant::FEAT8), 9);
  EXPECT_EQ(feature_length(FeatureVariant::FEAT9), 9);

  const Structure s = lj_structure(5, 1);
  LennardJones lj;
  for (auto fv : {FeatureVariant::FULL, FeatureVariant::FEAT6, FeatureVariant::FEAT7, FeatureVariant::FEAT8,
                  FeatureVariant::FEAT9}) {
    for (int k : {1, 3, 12}) {
      EnvConfig c;
      c.feature_variant = fv;
      c.k = k;
      MacsEnv env(c, lj);
      const auto out = env.reset(s);
      ASSERT_EQ(out.observations.size(), s.size());
      for (const auto& o : out.observations) {
        EXPECT_EQ(static_cast<int>(o.size()), feature_length(fv) * (k + 1) + 4 * k) << to_string(fv) << " k=" << k;
      }
    }
  }
}

// Layout of the FULL observation rebuilt by hand from the neighbor list.
TEST(Observation, FullLayoutMatchesHandAssembly) {
  const Structure s = lj_structure(4, 2);
  LennardJones lj;
  EnvConfig cfg;
  cfg.k = 5;
  MacsEnv env(cfg, lj);
  std::mt19937_64 rng(3);
  env.reset(s);
  const Structure before = env.structure();
  const std::vector<Vec3> g_before = env.scaled_grads();
  const auto actions = random_actions(rng, s.size());
  const auto d = action_displacements(actions, g_before, cfg);
  const auto out = env.step(actions);
  ASSERT_FALSE(out.done);

  const auto forces = lj.evaluate(env.structure()).forces;
  const auto nl = k_nearest(env.structure(), cfg.k);
  auto feature = [&](std::size_t a) {
    std::vector<double> f;
    const Vec3 g = scale_gradient(-forces[a], cfg.g_max);
    f.push_back(kTable.at("Ar").covalent_radius);
    f.push_back(std::min(g.norm(), cfg.c_max));
    f.push_back(std::log(g.norm()));
    for (int c = 0; c < 3; ++c) f.push_back(g[c]);
    for (int c = 0; c < 3; ++c) f.push_back(d[a][c]);
    for (int c = 0; c < 3; ++c) f.push_back(g[c] - g_before[a][c]);
    return f;
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<double> expect = feature(i);
    for (const auto& e : nl.of(i)) {
      const auto f = feature(static_cast<std::size_t>(e.atom));
      expect.insert(expect.end(), f.begin(), f.end());
    }
    for (const auto& e : nl.of(i)) expect.push_back(e.dist);
    for (const auto& e : nl.of(i)) expect.insert(expect.end(), {e.rel_vec[0], e.rel_vec[1], e.rel_vec[2]});
    ASSERT_EQ(out.observations[i].size(), expect.size());
    for (std::size_t c = 0; c < expect.size(); ++c) {
      EXPECT_NEAR(out.observations[i][c], expect[c], 1e-12) << "atom " << i << " component " << c;
    }
  }
}

TEST(Observation, NoHistoryAtStart) {
  const Structure s = lj_structure(6, 4);
  LennardJones lj;
  EnvConfig cfg;
  MacsEnv env(cfg, lj);
  const auto out = env.reset(s);
  for (const auto& o : out.observations) {
    for (int a = 0; a <= cfg.k; ++a) {
      for (int c = 6; c < 12; ++c) EXPECT_EQ(o[static_cast<std::size_t>(12 * a + c)], 0.0);
    }
  }
}

TEST(Observation, RigidTranslationInvariant) {
  LennardJones lj;
  EnvConfig cfg;
  std::mt19937_64 rng(11);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Structure s = lj_structure(6, 100 + seed);
    Structure moved = s;
    for (auto& p : moved.positions) p += Vec3(1.7, -22.3, 0.41);
    MacsEnv a(cfg, lj), b(cfg, lj);
    auto oa = a.reset(s), ob = b.reset(moved);
    const auto actions = random_actions(rng, s.size());
    for (int step = 0; step < 3; ++step) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t c = 0; c < oa.observations[i].size(); ++c) {
          ASSERT_NEAR(oa.observations[i][c], ob.observations[i][c], 1e-10);
        }
      }
      if (oa.done) break;
      oa = a.step(actions);
      ob = b.step(actions);
    }
  }
}

TEST(Actions, Displacements) {
  EnvConfig cfg;
  const std::vector<Vec3> g{Vec3(0, 3, 4)};  // |g| = 5 -> c = 0.4
  const auto d = action_displacements({Vec3(1, -1, 0.5)}, g, cfg);
  EXPECT_TRUE(d[0].isApprox(Vec3(0.4, -0.4, 0.2), 1e-15));
  EXPECT_EQ(action_displacements({Vec3::Zero()}, g, cfg)[0], Vec3::Zero());

  cfg.action_variant = ActionVariant::DIRECT;
  cfg.a_max = 0.1;
  EXPECT_TRUE(action_displacements({Vec3(1, 0, 0)}, g, cfg)[0].isApprox(Vec3(0.1, 0, 0)));

  EXPECT_THROW(action_displacements({Vec3(std::nan(""), 0, 0)}, g, cfg), Error);
  EXPECT_THROW(action_displacements({Vec3(1.5, 0, 0)}, g, cfg), Error);
}

TEST(Actions, ScaledDisplacementBounded) {
  EnvConfig cfg;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<Vec3> g{scale_gradient(Vec3(n(rng), n(rng), n(rng)), cfg.g_max)};
    const auto d = action_displacements(random_actions(rng, 1), g, cfg);
    EXPECT_LE(d[0].cwiseAbs().maxCoeff(), cfg.c_max);
  }
}

TEST(Rewards, Variants) {
  EnvConfig cfg;
  const double e = std::exp(1.0);
  auto r = compute_rewards({Vec3(e * e, 0, 0)}, {Vec3(0, e, 0)}, cfg);
  EXPECT_NEAR(r[0], 1.0, 1e-15);
  EXPECT_EQ(compute_rewards({Vec3(1, 2, 3)}, {Vec3(3, 2, 1)}, cfg)[0], 0.0);
  cfg.reward_variant = RewardVariant::PENALTY;
  EXPECT_NEAR(compute_rewards({Vec3(1, 2, 3)}, {Vec3(3, 2, 1)}, cfg)[0], -0.05, 1e-15);
  cfg.reward_variant = RewardVariant::SHARED;
  r = compute_rewards({Vec3(e, 0, 0), Vec3(1, 0, 0)}, {Vec3(1, 0, 0), Vec3(1, 0, 0)}, cfg);
  EXPECT_NEAR(r[0], 1.5, 1e-15);
  EXPECT_NEAR(r[1], 0.5, 1e-15);
  // Zero gradients are clamped rather than producing infinities.
  EXPECT_TRUE(std::isfinite(compute_rewards({Vec3::Zero()}, {Vec3(1, 0, 0)}, EnvConfig{})[0]));
}

TEST(Env, ConvergedAtReset) {
  Structure s = testing::fcc(kTable.at("Ar"), 5.26, 1);
  LennardJones lj;
  MacsEnv env(EnvConfig{}, lj);
  const auto out = env.reset(s);
  EXPECT_TRUE(out.done);
  EXPECT_EQ(out.reason, DoneReason::SUCCESS);
  EXPECT_EQ(env.steps(), 0);
  EXPECT_THROW(env.step(std::vector<Vec3>(s.size(), Vec3::Zero())), Error);
}

TEST(Env, TruncatesAtStepCap) {
  LennardJones lj;
  EnvConfig cfg;
  cfg.max_steps = 7;
  MacsEnv env(cfg, lj);
  const Structure s = lj_structure(4, 5);
  env.reset(s);
  StepOutcome out;
  int steps = 0;
  while (!env.done()) {
    out = env.step(std::vector<Vec3>(s.size(), Vec3::Zero()));  // frozen agents never converge
    ++steps;
  }
  EXPECT_EQ(steps, 7);
  EXPECT_EQ(out.reason, DoneReason::TRUNCATED);
  EXPECT_FALSE(out.calculator_failed);
  EXPECT_EQ(env.energy_calls(), 8u);
}

TEST(Env, TelescopingRewards) {
  LennardJones lj;
  EnvConfig cfg;
  cfg.max_steps = 60;
  std::mt19937_64 rng(21);
  for (std::uint64_t ep = 0; ep < 20; ++ep) {
    MacsEnv env(cfg, lj);
    const Structure s = lj_structure(5, 200 + ep);
    env.reset(s);
    std::vector<double> g0;
    for (const auto& g : env.scaled_grads()) g0.push_back(log_norm(g));
    std::vector<double> sum(s.size(), 0.0);
    while (!env.done()) {
      // Mostly downhill actions keep the episode physical.
      std::vector<Vec3> u = random_actions(rng, s.size());
      for (std::size_t i = 0; i < u.size(); ++i) {
        const Vec3& g = env.scaled_grads()[i];
        if (g.norm() > 0) u[i] = (0.5 * u[i] - 0.5 * g / g.norm()).cwiseMax(-1.0).cwiseMin(1.0);
      }
      const auto out = env.step(u);
      ASSERT_FALSE(out.calculator_failed) << out.error;
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += out.rewards[i];
    }
    for (std::size_t i = 0; i < sum.size(); ++i) {
      EXPECT_NEAR(sum[i], g0[i] - log_norm(env.scaled_grads()[i]), 1e-9);
    }
  }
}

TEST(Env, Deterministic) {
  LennardJones lj;
  EnvConfig cfg;
  cfg.max_steps = 30;
  const Structure s = lj_structure(5, 77);
  auto run = [&] {
    MacsEnv env(cfg, lj);
    std::mt19937_64 rng(1);
    std::vector<double> energies;
    env.reset(s);
    while (!env.done()) energies.push_back(env.step(random_actions(rng, s.size())).energy);
    return energies;
  };
  EXPECT_EQ(run(), run());
}

TEST(Env, CalculatorFailureTruncates) {
  LennardJones lj;
  EnvConfig cfg;
  cfg.action_variant = ActionVariant::DIRECT;
  cfg.a_max = 1.0;
  Structure s;
  s.lattice = Lattice::cubic(10.0);
  s.add_atom(kTable.at("Ar"), {0, 0, 0});
  s.add_atom(kTable.at("Ar"), {3, 0, 0});
  MacsEnv env(cfg, lj);
  env.reset(s);
  // Move both atoms onto the same point.
  const auto out = env.step({Vec3(1, 0, 0), Vec3(-1, 0, 0)});
  const auto out2 = out.done ? out : env.step({Vec3(0.5, 0, 0), Vec3(-0.5, 0, 0)});
  EXPECT_TRUE(out2.done);
  EXPECT_EQ(out2.reason, DoneReason::TRUNCATED);
  EXPECT_TRUE(out2.calculator_failed);
  EXPECT_NE(out2.error.find("overlap"), std::string::npos);
}

TEST(Normalizer, Examples) {
  RunningMeanStd rms(2);
  rms.update({3.0, -1.0});
  const auto z = rms.normalize({3.0, -1.0});
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
  rms.update({5.0, -1.0});  // second component has zero variance
  EXPECT_EQ(rms.normalize({4.0, -1.0})[1], 0.0);
  EXPECT_NEAR(rms.normalize({5.0, -1.0})[0], 1.0 / std::sqrt(1.0 + 1e-8), 1e-12);
  EXPECT_THROW(rms.update({1.0}), Error);
}

TEST(Normalizer, StandardNormalSamples) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 1.0);
  const int dim = 8;
  RunningMeanStd rms(dim);
  std::vector<std::vector<double>> xs(10000, std::vector<double>(dim));
  for (auto& x : xs) {
    for (auto& v : x) v = 3.0 + 2.0 * n(rng);
    rms.update(x);
  }
  std::vector<double> mean(dim, 0.0);
  for (const auto& x : xs) {
    const auto z = rms.normalize(x);
    for (int c = 0; c < dim; ++c) mean[static_cast<std::size_t>(c)] += z[static_cast<std::size_t>(c)] / 10000.0;
  }
  for (double m : mean) EXPECT_LT(std::abs(m), 0.05);
  const auto back = RunningMeanStd::from_json(rms.to_json());
  EXPECT_EQ(back.normalize(xs[0]), rms.normalize(xs[0]));
}

TEST(EnvConfig, TextAndJsonRoundTrip) {
  EnvConfig cfg;
  cfg.k = 8;
  cfg.feature_variant = FeatureVariant::FEAT9;
  cfg.reward_variant = RewardVariant::SHARED;
  cfg.action_variant = ActionVariant::DIRECT;
  cfg.normalize_obs = false;
  EXPECT_EQ(EnvConfig::parse(cfg.to_text()), cfg);
  EXPECT_EQ(EnvConfig::from_json(cfg.to_json()), cfg);
  EXPECT_EQ(EnvConfig::parse("# defaults\n\n"), EnvConfig{});
  EXPECT_THROW(EnvConfig::parse("k = 0"), Error);
  EXPECT_THROW(EnvConfig::parse("penalty = 0.1"), Error);
  EXPECT_THROW(EnvConfig::parse("bogus = 1"), FormatError);
  EXPECT_THROW(EnvConfig::parse("feature_variant = FEAT5"), FormatError);
}

}  // namespace
}  // namespace periopt
