#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include <gtest/gtest.h>

#include "periopt/error.hpp"
#include "periopt/sac.hpp"
#include "sac_gradcheck.hpp"
#include "test_support.hpp"

namespace periopt {
namespace {

namespace fs = std::filesystem;

const SpeciesTable kTable = SpeciesTable::defaults();

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("periopt_test_" + std::to_string(::getpid()) + "_" + name)).string();
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.batch = 32;
  c.num_envs = 2;
  c.hidden1 = 16;
  c.hidden2 = 16;
  c.buffer_capacity = 10000;
  c.warmup_samples = 64;
  c.composition = "Ar=4";
  c.seed = 3;
  return c;
}

std::unique_ptr<SacTrainer> make_trainer(const EnvConfig& env, const TrainerConfig& cfg) {
  return std::make_unique<SacTrainer>(env, cfg, random_structure_source(kTable, cfg),
                                      [] { return std::make_unique<LennardJones>(); });
}

TEST(SacGradients, MatchFiniteDifferences) {
  const auto r = testing::sac_gradient_check(observation_length(EnvConfig{}), 12, 7);
  EXPECT_GT(r.components, 1000u);
  EXPECT_LT(r.critic_q1, 1e-3);
  EXPECT_LT(r.critic_q2, 1e-3);
  EXPECT_LT(r.actor, 1e-3);
  EXPECT_LT(r.alpha, 1e-3);
}

TEST(SacGradients, SmallInputAllSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = testing::sac_gradient_check(10, 6, 100 + seed);
    EXPECT_LT(std::max({r.critic_q1, r.critic_q2, r.actor, r.alpha}), 1e-3) << "seed " << seed;
  }
}

TEST(Policy, ZeroMeanGivesZeroAction) {
  Policy p;
  p.env.k = 2;
  p.env.normalize_obs = false;
  p.actor = nn::Mlp<float>({observation_length(p.env), 8, 8, 6});  // all parameters zero
  const std::vector<std::vector<double>> obs(3, std::vector<double>(static_cast<std::size_t>(p.obs_dim()), 1.5));
  for (const auto& a : p.act(obs, ActMode::MEAN)) EXPECT_EQ(a, Vec3::Zero());
}

TEST(Policy, SampledActionsStrictlyInsideAndSeeded) {
  Policy p;
  p.env.k = 2;
  p.env.normalize_obs = false;
  p.actor = nn::Mlp<float>({observation_length(p.env), 8, 8, 6});
  std::mt19937_64 init(1);
  p.actor.init(init);
  p.actor.params() *= 50.0f;  // saturate tanh
  std::mt19937_64 data(2);
  std::normal_distribution<double> n(0.0, 100.0);
  std::vector<std::vector<double>> obs(50, std::vector<double>(static_cast<std::size_t>(p.obs_dim())));
  for (auto& o : obs) {
    for (auto& v : o) v = n(data);
  }
  std::mt19937_64 r1(9), r2(9);
  const auto a1 = p.act(obs, ActMode::SAMPLE, &r1);
  const auto a2 = p.act(obs, ActMode::SAMPLE, &r2);
  EXPECT_EQ(a1, a2);
  for (const auto& a : a1) EXPECT_LT(a.cwiseAbs().maxCoeff(), 1.0);
  for (const auto& a : p.act(obs, ActMode::MEAN)) EXPECT_LT(a.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_THROW(p.act(obs, ActMode::SAMPLE), Error);
  p.actor.params()[0] = std::nanf("");
  EXPECT_THROW(p.act(obs, ActMode::MEAN), Error);
}

TEST(CriticTarget, DoneAndDiscountAndTwinMinimum) {
  using namespace sac;
  std::mt19937_64 rng(4);
  const int d = 6, n = 10;
  nn::Mlp<double> actor({d, 5, 5, 6}), q1({d + 3, 5, 5, 1}), q2({d + 3, 5, 5, 1});
  for (auto* net : {&actor, &q1, &q2}) net->init(rng);
  Batch<double> b;
  b.obs = Mat<double>::Random(d, n);
  b.next_obs = Mat<double>::Random(d, n);
  b.actions = Mat<double>::Random(3, n) * 0.5;
  b.rewards = Vec<double>::LinSpaced(n, -1.0, 1.0);
  b.done = Vec<double>::Zero(n);
  b.done[2] = 1.0;
  const Mat<double> xi = Mat<double>::Random(3, n);

  const auto r = critic_loss<double>(q1, &q2, q1, &q2, actor, b, xi, 0.2, 0.9);
  EXPECT_EQ(r.target[2], b.rewards[2]);
  const auto r0 = critic_loss<double>(q1, &q2, q1, &q2, actor, b, xi, 0.2, 0.0);
  for (int i = 0; i < n; ++i) EXPECT_EQ(r0.target[i], b.rewards[i]);

  // The twin target never exceeds either single-critic target.
  const auto only1 = critic_loss<double>(q1, nullptr, q1, nullptr, actor, b, xi, 0.2, 0.9);
  const auto only2 = critic_loss<double>(q2, nullptr, q2, nullptr, actor, b, xi, 0.2, 0.9);
  for (int i = 0; i < n; ++i) {
    EXPECT_LE(r.target[i], only1.target[i] + 1e-15);
    EXPECT_LE(r.target[i], only2.target[i] + 1e-15);
  }
}

TEST(CriticTarget, WithoutEntropyBackup) {
  using namespace sac;
  std::mt19937_64 rng(6);
  const int d = 4, n = 8;
  nn::Mlp<double> actor({d, 5, 5, 6}), q1({d + 3, 5, 5, 1}), q2({d + 3, 5, 5, 1});
  for (auto* net : {&actor, &q1, &q2}) net->init(rng);
  Batch<double> b;
  b.obs = Mat<double>::Random(d, n);
  b.next_obs = Mat<double>::Random(d, n);
  b.actions = Mat<double>::Random(3, n) * 0.5;
  b.rewards = Vec<double>::LinSpaced(n, -0.5, 0.5);
  b.done = Vec<double>::Zero(n);
  b.done[5] = 1.0;
  const Mat<double> xi = Mat<double>::Random(3, n);
  // Passing alpha = 0 is how the trainer drops the entropy term from targets.
  const auto r = critic_loss<double>(q1, &q2, q1, &q2, actor, b, xi, 0.0, 0.99);
  const PolicySample<double> next = sample_policy(actor, b.next_obs, xi);
  const Mat<double> in = concat_rows(b.next_obs, next.a);
  for (int i = 0; i < n; ++i) {
    const double qmin = std::min(q1.forward(in)(0, i), q2.forward(in)(0, i));
    const double expected = b.rewards[i] + (i == 5 ? 0.0 : 0.99 * qmin);
    EXPECT_NEAR(r.target[i], expected, 1e-14);
  }
}

TEST(ReplayBuffer, FifoEvictionAndSampling) {
  ReplayBuffer buf(5, 2);
  for (int i = 0; i < 8; ++i) {
    Transition t;
    t.obs = {static_cast<float>(i), 0.0f};
    t.next_obs = {static_cast<float>(i + 1), 0.0f};
    t.action = Eigen::Vector3f(0.1f, 0.2f, 0.3f);
    t.reward = static_cast<float>(i);
    t.done = i % 2 == 0;
    buf.add(t);
    EXPECT_LE(buf.size(), buf.capacity());
  }
  EXPECT_EQ(buf.size(), 5u);
  EXPECT_EQ(buf.total_added(), 8u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(buf.at(i).reward, static_cast<float>(i + 3));
  std::mt19937_64 rng(1);
  const auto b = buf.sample(rng, 200);
  std::vector<int> seen(8, 0);
  for (int c = 0; c < 200; ++c) {
    const int r = static_cast<int>(b.rewards[c]);
    ASSERT_GE(r, 3);
    EXPECT_EQ(b.obs(0, c), static_cast<float>(r));
    EXPECT_EQ(b.next_obs(0, c), static_cast<float>(r + 1));
    EXPECT_EQ(b.done[c], r % 2 == 0 ? 1.0f : 0.0f);
    ++seen[static_cast<std::size_t>(r)];
  }
  for (int r = 3; r < 8; ++r) EXPECT_GT(seen[static_cast<std::size_t>(r)], 20);

  Transition bad;
  bad.obs = {1.0f};
  bad.next_obs = {1.0f};
  EXPECT_THROW(buf.add(bad), ShapeError);
}

TEST(Trainer, WarmupDelaysUpdates) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  cfg.warmup_samples = 500;
  auto t = make_trainer(env, cfg);
  while (t->buffer().size() < 500) {
    EXPECT_EQ(t->updates(), 0);
    t->round();
  }
  EXPECT_EQ(t->updates(), 1);
  t->round();
  EXPECT_EQ(t->updates(), 2);
  EXPECT_GT(t->alpha(), 0.0);
}

TEST(Trainer, TargetUpdateExtremes) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  cfg.tau = 0.0;
  auto frozen = make_trainer(env, cfg);
  const auto before = frozen->q1_target().params();
  for (int i = 0; i < 40; ++i) frozen->round();
  ASSERT_GT(frozen->updates(), 0);
  EXPECT_EQ(frozen->q1_target().params(), before);
  EXPECT_NE(frozen->q1().params(), before);

  cfg.tau = 1.0;
  auto copy = make_trainer(env, cfg);
  while (copy->updates() == 0) copy->round();
  EXPECT_EQ(copy->q1_target().params(), copy->q1().params());
}

TEST(Trainer, SingleEnvironmentDeterministic) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  cfg.num_envs = 1;
  auto a = make_trainer(env, cfg);
  auto b = make_trainer(env, cfg);
  for (int i = 0; i < 120; ++i) {
    a->round();
    b->round();
  }
  EXPECT_EQ(a->actor().params(), b->actor().params());
  EXPECT_EQ(a->episodes().size(), b->episodes().size());
}

TEST(Trainer, ParallelCollectionMatchesSerial) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  cfg.num_envs = 3;
  auto serial = make_trainer(env, cfg);
  cfg.collect_threads = 3;
  auto parallel = make_trainer(env, cfg);
  for (int i = 0; i < 60; ++i) {
    serial->round();
    parallel->round();
  }
  EXPECT_EQ(serial->actor().params(), parallel->actor().params());
}

TEST(Trainer, EntropyBackupChangesOnlyTheCritic) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  auto with = make_trainer(env, cfg);
  cfg.backup_entropy = false;
  auto without = make_trainer(env, cfg);
  // Identical until the first update, then the critics part ways.
  while (with->updates() == 0) {
    EXPECT_EQ(with->q1().params(), without->q1().params());
    with->round();
    without->round();
  }
  EXPECT_EQ(with->buffer().size(), without->buffer().size());
  EXPECT_NE(with->q1().params(), without->q1().params());
}

TEST(Trainer, UnpackableStructuresAreSkipped) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  int calls = 0;
  const auto good = random_structure_source(kTable, cfg);
  StructureSource flaky = [&](std::uint64_t seed) {
    if (calls++ % 2 == 0) throw GeometryError("packing infeasible: could not place atom 1 of 4");
    return good(seed);
  };
  SacTrainer t(env, cfg, flaky, [] { return std::make_unique<LennardJones>(); });
  EXPECT_NO_THROW(for (int i = 0; i < 5; ++i) t.round());
  EXPECT_GE(calls, 2 * cfg.num_envs);

  StructureSource never = [](std::uint64_t) -> Structure { throw GeometryError("packing infeasible"); };
  SacTrainer hopeless(env, cfg, never, [] { return std::make_unique<LennardJones>(); });
  EXPECT_THROW(hopeless.round(), Error);
}

TEST(Checkpoint, RoundTripAndErrors) {
  EnvConfig env;
  env.k = 4;
  auto cfg = small_config();
  auto t = make_trainer(env, cfg);
  for (int i = 0; i < 80; ++i) t->round();
  const std::string path = temp_path("ckpt.bin");
  save_checkpoint(t->checkpoint(), path);
  const Checkpoint c = load_checkpoint(path);
  EXPECT_EQ(c.actor.params(), t->actor().params());
  EXPECT_EQ(c.q1.params(), t->q1().params());
  EXPECT_EQ(c.q1_target.params(), t->q1_target().params());
  EXPECT_EQ(c.env, env);
  EXPECT_EQ(c.trainer, cfg);
  EXPECT_EQ(c.rounds, t->rounds());

  // Same deterministic actions from the reloaded policy on 100 observations.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> obs(100, std::vector<double>(static_cast<std::size_t>(observation_length(env))));
  for (auto& o : obs) {
    for (auto& v : o) v = n(rng);
  }
  EXPECT_EQ(c.policy().act(obs, ActMode::MEAN), t->policy().act(obs, ActMode::MEAN));

  // Resuming into a trainer with other widths is a shape error.
  auto wide_cfg = cfg;
  wide_cfg.hidden1 = 32;
  auto wide = make_trainer(env, wide_cfg);
  EXPECT_THROW(wide->restore(c), ShapeError);
  auto same = make_trainer(env, cfg);
  same->restore(c);
  EXPECT_EQ(same->actor().params(), t->actor().params());

  // Version mismatch and corruption.
  std::ifstream in(path, std::ios::binary);
  std::string header, rest;
  std::getline(in, header);
  rest.assign(std::istreambuf_iterator<char>(in), {});
  auto rewrite = [&](const std::string& h, const std::string& body) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << h << '\n' << body;
  };
  auto j = nlohmann::json::parse(header);
  j["version"] = 2;
  rewrite(j.dump(), rest);
  try {
    load_checkpoint(path);
    FAIL() << "version mismatch accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }
  rewrite(header, rest.substr(0, rest.size() / 2));
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  rewrite(header, rest + "x");
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  rewrite("{not json", rest);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::remove(path.c_str());
}

TEST(Checkpoint, VariantMismatchRefused) {
  EnvConfig env;
  env.feature_variant = FeatureVariant::FEAT9;
  env.k = 12;
  auto cfg = small_config();
  auto t = make_trainer(env, cfg);
  const Policy p = t->policy();
  EXPECT_THROW(p.check_compatible(EnvConfig{}), ShapeError);
  EnvConfig feat8 = env;
  feat8.feature_variant = FeatureVariant::FEAT8;  // same length, different layout
  EXPECT_THROW(p.check_compatible(feat8), ShapeError);
  EXPECT_NO_THROW(p.check_compatible(env));

  Policy full = p;
  full.env = EnvConfig{};
  EXPECT_THROW(relax_macs(testing::fcc(kTable.at("Ar"), 5.26, 1), full, *std::make_unique<LennardJones>()),
               ShapeError);
}

TEST(RelaxMacs, AccountingAndDeterminism) {
  EnvConfig env;
  env.k = 4;
  auto t = make_trainer(env, small_config());
  for (int i = 0; i < 50; ++i) t->round();
  const Policy p = t->policy();
  RandomStructureRequest req;
  req.counts = {{"Ar", 4}};
  req.target_volume = 160;
  req.min_dist = 2.8;
  LennardJones lj;
  TerminationPolicy tp;
  tp.max_steps = 40;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Structure s = random_structure(kTable, req, seed);
    const auto a = relax_macs(s, p, lj, tp);
    const auto b = relax_macs(s, p, lj, tp);
    EXPECT_EQ(a.energy_calls, static_cast<std::uint64_t>(a.steps) + 1);
    EXPECT_EQ(a.energy_trace.size(), static_cast<std::size_t>(a.steps) + 1);
    EXPECT_EQ(a.energy_trace, b.energy_trace);
    EXPECT_EQ(a.method, "MACS");
    EXPECT_EQ(a.final_structure.lattice, s.lattice);
    EXPECT_EQ(a.success, max_force_norm(lj.evaluate(a.final_structure).forces) <= tp.fmax);
    if (!a.success) EXPECT_EQ(a.steps, tp.max_steps);
  }
}

TEST(TrainerConfig, TextRoundTrip) {
  auto cfg = small_config();
  cfg.twin_q = false;
  cfg.backup_entropy = false;
  cfg.composition = "Ar=3,Xa=1";
  EXPECT_EQ(TrainerConfig::parse(cfg.to_text()), cfg);
  EXPECT_EQ(TrainerConfig::parse("batch = 256\n# comment\n").batch, 256);
  EXPECT_TRUE(TrainerConfig{}.backup_entropy);
  EXPECT_FALSE(TrainerConfig::parse("backup_entropy = false").backup_entropy);
  EXPECT_THROW(TrainerConfig::parse("batch = 0"), Error);
  EXPECT_THROW(TrainerConfig::parse("nonsense = 1"), FormatError);
}

}  // namespace
}  // namespace periopt
