#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "periopt/env.hpp"
#include "periopt/nn.hpp"
#include "periopt/optimizers.hpp"
#include "periopt/sac_losses.hpp"

namespace periopt {

struct TrainerConfig {
  double gamma = 0.995;
  int batch = 8192;
  double target_entropy = -8.0;
  double tau = 0.001;
  double initial_alpha = 1.0;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double entropy_lr = 1e-4;
  int warmup_samples = 500;
  bool twin_q = true;
  bool backup_entropy = true;     // false: critic targets omit the -alpha log pi term
  int num_envs = 40;
  long total_rounds = 80000;      // collection rounds, one update each after warmup
  long max_episodes = 0;          // 0: no episode limit
  std::size_t buffer_capacity = 10'000'000;
  int hidden1 = 256;
  int hidden2 = 256;
  int target_update_interval = 1; // Polyak every n updates; n > 1 gives the periodic variant
  int collect_threads = 1;
  std::uint64_t seed = 0;
  // Training structures.
  std::string composition = "Ar=8";
  double volume_per_atom = 40.0;  // Angstrom^3
  double min_dist = 2.8;          // Angstrom
  // Logging and checkpoints.
  int log_every = 100;            // rounds between CSV rows
  long checkpoint_every = 0;      // rounds; 0 disables periodic checkpoints

  void validate() const;
  /// `key = value` text, `#` comments; unknown keys are errors.
  static TrainerConfig parse(std::string_view text);
  static TrainerConfig load(const std::string& path);
  std::string to_text() const;
  nlohmann::json to_json() const;
  static TrainerConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainerConfig&) const = default;
};

/// One agent transition. Observations are stored already normalized.
struct Transition {
  std::vector<float> obs;
  Eigen::Vector3f action;
  float reward = 0.0f;
  std::vector<float> next_obs;
  bool done = false;
};

/// Fixed-capacity FIFO of transitions with uniform sampling (with
/// replacement). Storage grows on demand up to the capacity. Appends and
/// samples are serialized by a mutex.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int obs_dim);

  void add(const Transition& t);
  void add(const std::vector<Transition>& ts);
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::uint64_t total_added() const;
  int obs_dim() const { return dim_; }
  /// The i-th oldest stored transition.
  Transition at(std::size_t i) const;
  sac::Batch<float> sample(std::mt19937_64& rng, int batch) const;

 private:
  void add_unlocked(const Transition& t);

  std::size_t capacity_;
  int dim_;
  mutable std::mutex mu_;
  std::vector<float> obs_, next_obs_, actions_, rewards_, done_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;   // next slot to write once full
  std::uint64_t added_ = 0;
};

enum class ActMode { SAMPLE, MEAN };

/// Policy network plus everything needed to act in an environment: the
/// environment config it was trained for and the frozen normalization.
struct Policy {
  EnvConfig env;
  RunningMeanStd normalizer;
  nn::Mlp<float> actor;

  int obs_dim() const { return actor.shape().in; }
  /// Throws ShapeError when the environment produces a different layout.
  void check_compatible(const EnvConfig& cfg) const;
  /// Normalizes (frozen statistics) and acts for every agent. SAMPLE needs rng.
  std::vector<Vec3> act(const std::vector<std::vector<double>>& raw_obs, ActMode mode,
                        std::mt19937_64* rng = nullptr) const;
  std::vector<float> normalize(const std::vector<double>& raw) const;
};

/// Relaxation driven by a trained policy (deterministic MEAN actions).
/// energy_calls == steps + 1 unless the calculator fails.
RelaxationReport relax_macs(const Structure& s, const Policy& policy, Calculator& calc,
                            const TerminationPolicy& tp = {});

struct Checkpoint {
  static constexpr int kVersion = 1;
  EnvConfig env;
  TrainerConfig trainer;
  RunningMeanStd normalizer;
  nn::Mlp<float> actor, q1, q2, q1_target, q2_target;
  float log_alpha = 0.0f;
  std::string rng_state;
  long rounds = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t episodes = 0;

  Policy policy() const { return {env, normalizer, actor}; }
};

/// JSON header line, then little-endian float32 parameter blocks in the order
/// the header lists them.
void save_checkpoint(const Checkpoint& c, const std::string& path);
/// Throws CheckpointError on version mismatch or a truncated/corrupt file.
Checkpoint load_checkpoint(const std::string& path);

struct EpisodeRecord {
  int length = 0;
  double reward = 0.0;        // sum over steps of the mean agent reward
  bool success = false;
  bool calculator_failed = false;
};

struct UpdateStats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double mean_q = 0.0;
  double mean_logp = 0.0;
};

/// Builds training structures from a seed.
using StructureSource = std::function<Structure(std::uint64_t seed)>;
using CalculatorFactory = std::function<std::unique_ptr<Calculator>()>;

/// Random structures with the trainer config's composition and density.
StructureSource random_structure_source(const SpeciesTable& table, const TrainerConfig& cfg);

/// Independent SAC with one policy and one twin-Q pair shared by every agent
/// of every environment.
class SacTrainer {
 public:
  SacTrainer(EnvConfig env, TrainerConfig cfg, StructureSource source, CalculatorFactory make_calc);
  ~SacTrainer();

  /// One collection step in every environment plus, after warmup, one update.
  void round();
  /// Rounds until total_rounds or max_episodes; writes a CSV row every
  /// log_every rounds and checkpoints to `checkpoint_path` when configured.
  void run(std::ostream* log = nullptr, const std::string& checkpoint_path = {});
  /// One gradient update on a sampled batch.
  UpdateStats update();

  static void write_log_header(std::ostream& out);
  void write_log_row(std::ostream& out) const;

  Checkpoint checkpoint() const;
  /// Loads networks, temperature, normalization and generator state. Throws
  /// ShapeError when the checkpoint's networks or environment do not match.
  void restore(const Checkpoint& c);
  Policy policy() const;

  const EnvConfig& env_config() const { return env_; }
  const TrainerConfig& config() const { return cfg_; }
  const std::vector<EpisodeRecord>& episodes() const { return episodes_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  long rounds() const { return rounds_; }
  long updates() const { return updates_; }
  std::uint64_t env_steps() const { return env_steps_; }
  double alpha() const;
  const std::optional<UpdateStats>& last_update() const { return last_update_; }
  const nn::Mlp<float>& actor() const { return actor_; }
  const nn::Mlp<float>& q1() const { return q1_; }
  const nn::Mlp<float>& q1_target() const { return q1_target_; }
  nn::Mlp<float>& mutable_actor() { return actor_; }

 private:
  struct Slot;

  void start_episode(Slot& slot);
  std::vector<float> observe(const std::vector<double>& raw);

  EnvConfig env_;
  TrainerConfig cfg_;
  StructureSource source_;
  int obs_dim_;
  nn::Mlp<float> actor_, q1_, q2_, q1_target_, q2_target_;
  nn::Adam<float> actor_opt_, q1_opt_, q2_opt_;
  nn::Adam<float> alpha_opt_;
  nn::Vec<float> log_alpha_;   // one element, so the same Adam applies
  RunningMeanStd normalizer_;
  ReplayBuffer buffer_;
  std::mt19937_64 rng_;
  std::vector<std::unique_ptr<Slot>> slots_;
  std::vector<EpisodeRecord> episodes_;
  std::optional<UpdateStats> last_update_;
  std::uint64_t structure_counter_ = 0;
  std::uint64_t env_steps_ = 0;
  long rounds_ = 0;
  long updates_ = 0;
};

}  // namespace periopt
