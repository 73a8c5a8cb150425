#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "periopt/crystal.hpp"
#include "periopt/potential.hpp"

namespace periopt {

/// Per-atom feature layouts. FULL is [r, c, log|g|, g, d_prev, g - g_prev];
/// the reduced variants drop force or history components.
enum class FeatureVariant { FULL, FEAT6, FEAT7, FEAT8, FEAT9 };
enum class RewardVariant { BASE, PENALTY, SHARED };
enum class ActionVariant { SCALED, DIRECT };

std::string to_string(FeatureVariant v);
std::string to_string(RewardVariant v);
std::string to_string(ActionVariant v);
FeatureVariant parse_feature_variant(std::string_view s);
RewardVariant parse_reward_variant(std::string_view s);
ActionVariant parse_action_variant(std::string_view s);

struct EnvConfig {
  int k = 12;
  double g_max = 5.0;
  double c_max = 0.4;
  double fmax = 0.05;       // eV/Angstrom, on unscaled forces
  int max_steps = 1000;
  FeatureVariant feature_variant = FeatureVariant::FULL;
  RewardVariant reward_variant = RewardVariant::BASE;
  ActionVariant action_variant = ActionVariant::SCALED;
  double a_max = 0.1;       // DIRECT only
  double penalty = -0.05;   // PENALTY only
  bool normalize_obs = true;

  void validate() const;

  /// Plain `key = value` text, one entry per line, `#` comments.
  static EnvConfig parse(std::string_view text);
  static EnvConfig load(const std::string& path);
  std::string to_text() const;

  nlohmann::json to_json() const;
  static EnvConfig from_json(const nlohmann::json& j);

  bool operator==(const EnvConfig&) const = default;
};

int feature_length(FeatureVariant v);
/// feature_length * (k + 1) + k distances + 3k relative vectors.
int observation_length(const EnvConfig& cfg);

/// Caps the infinity norm at g_max by uniform rescaling.
Vec3 scale_gradient(const Vec3& g0, double g_max);

/// min(|g|, c_max).
double action_scale(const Vec3& g, double c_max);

/// ln(max(|g|, 1e-12)).
double log_norm(const Vec3& g);

struct AgentFeature {
  double r = 0.0;          // covalent radius
  double c = 0.0;          // action scale
  double log_gnorm = 0.0;
  Vec3 g = Vec3::Zero();   // scaled gradient
  Vec3 d_prev = Vec3::Zero();
  Vec3 dg = Vec3::Zero();
};

/// Per-agent dynamic state carried between steps.
struct AgentHistory {
  Vec3 d_prev = Vec3::Zero();
  Vec3 g_prev = Vec3::Zero();
  bool has_prev = false;
};

/// Scaled gradients (-forces, capped) for every atom.
std::vector<Vec3> scaled_gradients(const std::vector<Vec3>& forces, double g_max);

std::vector<AgentFeature> agent_features(const Structure& s, const std::vector<Vec3>& scaled_grads,
                                         const std::vector<AgentHistory>& history, const EnvConfig& cfg);

/// Appends the variant's components of one feature to out.
void append_feature(const AgentFeature& f, FeatureVariant v, std::vector<double>& out);

/// Observation of every agent: own features, neighbor features, neighbor
/// distances, neighbor relative vectors (k nearest, recomputed from `s`).
std::vector<std::vector<double>> build_observations(const Structure& s, const std::vector<AgentFeature>& features,
                                                    const EnvConfig& cfg);

/// Displacements d_i = c_i u_i (SCALED) or a_max u_i (DIRECT).
/// Throws Error on non-finite or out-of-range actions.
std::vector<Vec3> action_displacements(const std::vector<Vec3>& actions, const std::vector<Vec3>& scaled_grads,
                                       const EnvConfig& cfg);

/// Structure with positions moved by the displacements; no wrapping.
Structure apply_displacements(const Structure& s, const std::vector<Vec3>& displacements);

/// Per-agent rewards from scaled gradients before and after the step.
std::vector<double> compute_rewards(const std::vector<Vec3>& g_now, const std::vector<Vec3>& g_next,
                                    const EnvConfig& cfg);

/// Running per-component mean and variance (population), merged in batches.
class RunningMeanStd {
 public:
  RunningMeanStd() = default;
  explicit RunningMeanStd(int dim);

  int dim() const { return static_cast<int>(mean_.size()); }
  double count() const { return count_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::VectorXd variance() const;

  void update(const std::vector<double>& x);
  /// (x - mean) / sqrt(var + 1e-8); x must have dim() entries.
  std::vector<double> normalize(const std::vector<double>& x) const;

  nlohmann::json to_json() const;
  static RunningMeanStd from_json(const nlohmann::json& j);

 private:
  double count_ = 0.0;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
};

enum class DoneReason { NONE, SUCCESS, TRUNCATED };

struct StepOutcome {
  std::vector<std::vector<double>> observations;  // raw, per agent
  std::vector<double> rewards;                    // empty after reset
  bool done = false;
  DoneReason reason = DoneReason::NONE;
  double energy = 0.0;
  double max_force = 0.0;       // unscaled
  bool calculator_failed = false;
  std::string error;
};

/// One geometry-relaxation episode treated as a multi-agent game: every atom
/// is an agent, a joint action moves all atoms, and the calculator is called
/// once per step.
class MacsEnv {
 public:
  MacsEnv(EnvConfig cfg, Calculator& calc);

  /// Evaluates the structure and builds the initial observations; the episode
  /// is already done (SUCCESS) when the forces are below fmax.
  StepOutcome reset(const Structure& s);

  /// Applies one action per agent; u components must lie in [-1, 1].
  StepOutcome step(const std::vector<Vec3>& actions);

  const EnvConfig& config() const { return cfg_; }
  const Structure& structure() const { return structure_; }
  int steps() const { return steps_; }
  bool done() const { return done_; }
  std::size_t num_agents() const { return structure_.size(); }
  std::uint64_t energy_calls() const { return energy_calls_; }
  const std::vector<Vec3>& scaled_grads() const { return grads_; }
  const std::vector<Vec3>& forces() const { return forces_; }
  double energy() const { return energy_; }

 private:
  StepOutcome observe(DoneReason reason);

  EnvConfig cfg_;
  Calculator& calc_;
  Structure structure_;
  std::vector<Vec3> forces_;
  std::vector<Vec3> grads_;
  std::vector<AgentHistory> history_;
  double energy_ = 0.0;
  int steps_ = 0;
  bool done_ = true;
  std::uint64_t energy_calls_ = 0;
};

}  // namespace periopt
