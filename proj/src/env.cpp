#include "periopt/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "periopt/error.hpp"

namespace periopt {

using nlohmann::json;

namespace {

std::string upper(std::string_view s) {
  std::string out;
  for (char c : s) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_bool(const std::string& v) {
  const std::string u = upper(v);
  if (u == "TRUE" || u == "1" || u == "YES") return true;
  if (u == "FALSE" || u == "0" || u == "NO") return false;
  throw FormatError("expected a boolean, got `" + v + "`");
}

}  // namespace

std::string to_string(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::FULL: return "FULL";
    case FeatureVariant::FEAT6: return "FEAT6";
    case FeatureVariant::FEAT7: return "FEAT7";
    case FeatureVariant::FEAT8: return "FEAT8";
    case FeatureVariant::FEAT9: return "FEAT9";
  }
  return "?";
}

std::string to_string(RewardVariant v) {
  switch (v) {
    case RewardVariant::BASE: return "BASE";
    case RewardVariant::PENALTY: return "PENALTY";
    case RewardVariant::SHARED: return "SHARED";
  }
  return "?";
}

std::string to_string(ActionVariant v) { return v == ActionVariant::SCALED ? "SCALED" : "DIRECT"; }

FeatureVariant parse_feature_variant(std::string_view s) {
  const auto u = upper(s);
  if (u == "FULL") return FeatureVariant::FULL;
  if (u == "FEAT6") return FeatureVariant::FEAT6;
  if (u == "FEAT7") return FeatureVariant::FEAT7;
  if (u == "FEAT8") return FeatureVariant::FEAT8;
  if (u == "FEAT9") return FeatureVariant::FEAT9;
  throw FormatError("unknown feature variant: " + std::string(s));
}

RewardVariant parse_reward_variant(std::string_view s) {
  const auto u = upper(s);
  if (u == "BASE") return RewardVariant::BASE;
  if (u == "PENALTY") return RewardVariant::PENALTY;
  if (u == "SHARED") return RewardVariant::SHARED;
  throw FormatError("unknown reward variant: " + std::string(s));
}

ActionVariant parse_action_variant(std::string_view s) {
  const auto u = upper(s);
  if (u == "SCALED") return ActionVariant::SCALED;
  if (u == "DIRECT") return ActionVariant::DIRECT;
  throw FormatError("unknown action variant: " + std::string(s));
}

// ---------------------------------------------------------------- config

void EnvConfig::validate() const {
  if (k < 1) throw Error("env config: k must be >= 1");
  if (!(g_max > 0.0)) throw Error("env config: g_max must be > 0");
  if (!(c_max > 0.0)) throw Error("env config: c_max must be > 0");
  if (!(fmax > 0.0)) throw Error("env config: fmax must be > 0");
  if (max_steps < 1) throw Error("env config: max_steps must be >= 1");
  if (!(a_max > 0.0)) throw Error("env config: a_max must be > 0");
  if (!(penalty <= 0.0)) throw Error("env config: penalty must be <= 0");
}

EnvConfig EnvConfig::parse(std::string_view text) {
  EnvConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("env config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "k") cfg.k = std::stoi(value);
      else if (key == "g_max") cfg.g_max = std::stod(value);
      else if (key == "c_max") cfg.c_max = std::stod(value);
      else if (key == "fmax") cfg.fmax = std::stod(value);
      else if (key == "max_steps") cfg.max_steps = std::stoi(value);
      else if (key == "feature_variant") cfg.feature_variant = parse_feature_variant(value);
      else if (key == "reward_variant") cfg.reward_variant = parse_reward_variant(value);
      else if (key == "action_variant") cfg.action_variant = parse_action_variant(value);
      else if (key == "a_max") cfg.a_max = std::stod(value);
      else if (key == "penalty") cfg.penalty = std::stod(value);
      else if (key == "normalize_obs") cfg.normalize_obs = parse_bool(value);
      else throw FormatError("unknown key `" + key + "`");
    } catch (const std::invalid_argument&) {
      throw FormatError("env config line " + std::to_string(lineno) + ": bad value for " + key);
    } catch (const FormatError& e) {
      throw FormatError("env config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

EnvConfig EnvConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open env config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string EnvConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "k = " << k << "\n"
      << "g_max = " << g_max << "\n"
      << "c_max = " << c_max << "\n"
      << "fmax = " << fmax << "\n"
      << "max_steps = " << max_steps << "\n"
      << "feature_variant = " << to_string(feature_variant) << "\n"
      << "reward_variant = " << to_string(reward_variant) << "\n"
      << "action_variant = " << to_string(action_variant) << "\n"
      << "a_max = " << a_max << "\n"
      << "penalty = " << penalty << "\n"
      << "normalize_obs = " << (normalize_obs ? "true" : "false") << "\n";
  return out.str();
}

json EnvConfig::to_json() const {
  return json{{"k", k},
              {"g_max", g_max},
              {"c_max", c_max},
              {"fmax", fmax},
              {"max_steps", max_steps},
              {"feature_variant", to_string(feature_variant)},
              {"reward_variant", to_string(reward_variant)},
              {"action_variant", to_string(action_variant)},
              {"a_max", a_max},
              {"penalty", penalty},
              {"normalize_obs", normalize_obs}};
}

EnvConfig EnvConfig::from_json(const json& j) {
  EnvConfig cfg;
  cfg.k = j.at("k").get<int>();
  cfg.g_max = j.at("g_max").get<double>();
  cfg.c_max = j.at("c_max").get<double>();
  cfg.fmax = j.at("fmax").get<double>();
  cfg.max_steps = j.at("max_steps").get<int>();
  cfg.feature_variant = parse_feature_variant(j.at("feature_variant").get<std::string>());
  cfg.reward_variant = parse_reward_variant(j.at("reward_variant").get<std::string>());
  cfg.action_variant = parse_action_variant(j.at("action_variant").get<std::string>());
  cfg.a_max = j.at("a_max").get<double>();
  cfg.penalty = j.at("penalty").get<double>();
  cfg.normalize_obs = j.at("normalize_obs").get<bool>();
  cfg.validate();
  return cfg;
}

int feature_length(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::FULL: return 12;
    case FeatureVariant::FEAT6: return 5;
    case FeatureVariant::FEAT7: return 6;
    case FeatureVariant::FEAT8: return 9;
    case FeatureVariant::FEAT9: return 9;
  }
  return 0;
}

int observation_length(const EnvConfig& cfg) {
  return feature_length(cfg.feature_variant) * (cfg.k + 1) + 4 * cfg.k;
}

// ---------------------------------------------------------------- features

Vec3 scale_gradient(const Vec3& g0, double g_max) {
  const double inf = g0.cwiseAbs().maxCoeff();
  if (inf < g_max) return g0;
  // The product can round one ulp past g_max; the bound must hold exactly.
  return (g0 * (g_max / inf)).cwiseMax(-g_max).cwiseMin(g_max);
}

double action_scale(const Vec3& g, double c_max) { return std::min(g.norm(), c_max); }

double log_norm(const Vec3& g) { return std::log(std::max(g.norm(), 1e-12)); }

std::vector<Vec3> scaled_gradients(const std::vector<Vec3>& forces, double g_max) {
  std::vector<Vec3> out;
  out.reserve(forces.size());
  for (const auto& f : forces) out.push_back(scale_gradient(-f, g_max));
  return out;
}

std::vector<AgentFeature> agent_features(const Structure& s, const std::vector<Vec3>& scaled_grads,
                                         const std::vector<AgentHistory>& history, const EnvConfig& cfg) {
  std::vector<AgentFeature> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& f = out[i];
    f.r = s.species_of(i).covalent_radius;
    f.g = scaled_grads[i];
    f.c = action_scale(f.g, cfg.c_max);
    f.log_gnorm = log_norm(f.g);
    if (history[i].has_prev) {
      f.d_prev = history[i].d_prev;
      f.dg = f.g - history[i].g_prev;
    }
  }
  return out;
}

void append_feature(const AgentFeature& f, FeatureVariant v, std::vector<double>& out) {
  auto push3 = [&](const Vec3& x) { out.insert(out.end(), {x[0], x[1], x[2]}); };
  out.push_back(f.r);
  out.push_back(f.c);
  switch (v) {
    case FeatureVariant::FULL:
      out.push_back(f.log_gnorm);
      push3(f.g);
      push3(f.d_prev);
      push3(f.dg);
      break;
    case FeatureVariant::FEAT6:
      push3(f.d_prev);
      break;
    case FeatureVariant::FEAT7:
      out.push_back(f.log_gnorm);
      push3(f.g);
      break;
    case FeatureVariant::FEAT8:
      out.push_back(f.log_gnorm);
      push3(f.g);
      push3(f.dg);
      break;
    case FeatureVariant::FEAT9:
      out.push_back(f.log_gnorm);
      push3(f.g);
      push3(f.d_prev);
      break;
  }
}

std::vector<std::vector<double>> build_observations(const Structure& s, const std::vector<AgentFeature>& features,
                                                    const EnvConfig& cfg) {
  const NeighborList nl = k_nearest(s, cfg.k);
  const auto len = static_cast<std::size_t>(observation_length(cfg));
  std::vector<std::vector<double>> obs(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& o = obs[i];
    o.reserve(len);
    append_feature(features[i], cfg.feature_variant, o);
    const auto& neigh = nl.of(i);
    for (const auto& e : neigh) append_feature(features[static_cast<std::size_t>(e.atom)], cfg.feature_variant, o);
    for (const auto& e : neigh) o.push_back(e.dist);
    for (const auto& e : neigh) o.insert(o.end(), {e.rel_vec[0], e.rel_vec[1], e.rel_vec[2]});
  }
  return obs;
}

std::vector<Vec3> action_displacements(const std::vector<Vec3>& actions, const std::vector<Vec3>& scaled_grads,
                                       const EnvConfig& cfg) {
  if (actions.size() != scaled_grads.size()) throw Error("one action per agent required");
  std::vector<Vec3> d(actions.size());
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const Vec3& u = actions[i];
    if (!u.allFinite()) throw Error("non-finite action for agent " + std::to_string(i));
    if (u.cwiseAbs().maxCoeff() > 1.0) throw Error("action component outside [-1, 1] for agent " + std::to_string(i));
    const double scale =
        cfg.action_variant == ActionVariant::SCALED ? action_scale(scaled_grads[i], cfg.c_max) : cfg.a_max;
    d[i] = scale * u;
  }
  return d;
}

Structure apply_displacements(const Structure& s, const std::vector<Vec3>& displacements) {
  Structure out = s;
  for (std::size_t i = 0; i < s.size(); ++i) out.positions[i] += displacements[i];
  return out;
}

std::vector<double> compute_rewards(const std::vector<Vec3>& g_now, const std::vector<Vec3>& g_next,
                                    const EnvConfig& cfg) {
  std::vector<double> r(g_now.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = log_norm(g_now[i]) - log_norm(g_next[i]);
  if (cfg.reward_variant == RewardVariant::PENALTY) {
    for (auto& x : r) x += cfg.penalty;
  } else if (cfg.reward_variant == RewardVariant::SHARED && !r.empty()) {
    double mean = 0.0;
    for (double x : r) mean += x;
    mean /= static_cast<double>(r.size());
    for (auto& x : r) x += mean;
  }
  return r;
}

// ---------------------------------------------------------------- normalization

RunningMeanStd::RunningMeanStd(int dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

Eigen::VectorXd RunningMeanStd::variance() const {
  if (count_ <= 0.0) return Eigen::VectorXd::Ones(mean_.size());
  return m2_ / count_;
}

void RunningMeanStd::update(const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != dim()) throw Error("normalizer dimension mismatch");
  const Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
  count_ += 1.0;
  const Eigen::VectorXd delta = v - mean_;
  mean_ += delta / count_;
  m2_ += delta.cwiseProduct(v - mean_);
}

std::vector<double> RunningMeanStd::normalize(const std::vector<double>& x) const {
  if (static_cast<int>(x.size()) != dim()) throw Error("normalizer dimension mismatch");
  const Eigen::VectorXd var = variance();
  std::vector<double> out(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) {
    const auto i = static_cast<Eigen::Index>(c);
    out[c] = (x[c] - mean_[i]) / std::sqrt(var[i] + 1e-8);
  }
  return out;
}

json RunningMeanStd::to_json() const {
  return json{{"count", count_},
              {"mean", std::vector<double>(mean_.data(), mean_.data() + mean_.size())},
              {"m2", std::vector<double>(m2_.data(), m2_.data() + m2_.size())}};
}

RunningMeanStd RunningMeanStd::from_json(const json& j) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto m2 = j.at("m2").get<std::vector<double>>();
  if (mean.size() != m2.size()) throw FormatError("normalizer arrays differ in length");
  RunningMeanStd r(static_cast<int>(mean.size()));
  r.count_ = j.at("count").get<double>();
  r.mean_ = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  r.m2_ = Eigen::Map<const Eigen::VectorXd>(m2.data(), static_cast<Eigen::Index>(m2.size()));
  return r;
}

// ---------------------------------------------------------------- environment

MacsEnv::MacsEnv(EnvConfig cfg, Calculator& calc) : cfg_(cfg), calc_(calc) { cfg_.validate(); }

StepOutcome MacsEnv::reset(const Structure& s) {
  s.validate();
  structure_ = s;
  steps_ = 0;
  history_.assign(s.size(), AgentHistory{});
  done_ = false;
  StepOutcome out;
  try {
    ++energy_calls_;
    const CalcResult r = calc_.evaluate(structure_);
    forces_ = r.forces;
    energy_ = r.energy;
  } catch (const Error& e) {
    done_ = true;
    out.done = true;
    out.reason = DoneReason::TRUNCATED;
    out.calculator_failed = true;
    out.error = e.what();
    return out;
  }
  grads_ = scaled_gradients(forces_, cfg_.g_max);
  const bool converged = max_force_norm(forces_) <= cfg_.fmax;
  return observe(converged ? DoneReason::SUCCESS : DoneReason::NONE);
}

StepOutcome MacsEnv::step(const std::vector<Vec3>& actions) {
  if (done_) throw Error("step() called on a finished episode");
  const std::vector<Vec3> d = action_displacements(actions, grads_, cfg_);
  Structure next = apply_displacements(structure_, d);
  CalcResult r;
  try {
    ++energy_calls_;
    r = calc_.evaluate(next);
    if (!std::isfinite(r.energy)) throw CalculatorError("non-finite energy");
    for (const auto& f : r.forces) {
      if (!f.allFinite()) throw CalculatorError("non-finite forces");
    }
  } catch (const Error& e) {
    done_ = true;
    StepOutcome out;
    out.done = true;
    out.reason = DoneReason::TRUNCATED;
    out.calculator_failed = true;
    out.error = e.what();
    out.energy = energy_;
    out.max_force = max_force_norm(forces_);
    out.rewards.assign(structure_.size(), 0.0);
    return out;
  }
  ++steps_;
  const std::vector<Vec3> next_grads = scaled_gradients(r.forces, cfg_.g_max);
  std::vector<double> rewards = compute_rewards(grads_, next_grads, cfg_);
  for (std::size_t i = 0; i < history_.size(); ++i) {
    history_[i].d_prev = d[i];
    history_[i].g_prev = grads_[i];
    history_[i].has_prev = true;
  }
  structure_ = std::move(next);
  forces_ = r.forces;
  energy_ = r.energy;
  grads_ = next_grads;

  DoneReason reason = DoneReason::NONE;
  if (max_force_norm(forces_) <= cfg_.fmax) {
    reason = DoneReason::SUCCESS;
  } else if (steps_ >= cfg_.max_steps) {
    reason = DoneReason::TRUNCATED;
  }
  StepOutcome out = observe(reason);
  out.rewards = std::move(rewards);
  return out;
}

StepOutcome MacsEnv::observe(DoneReason reason) {
  StepOutcome out;
  out.observations = build_observations(structure_, agent_features(structure_, grads_, history_, cfg_), cfg_);
  out.reason = reason;
  out.done = reason != DoneReason::NONE;
  out.energy = energy_;
  out.max_force = max_force_norm(forces_);
  done_ = out.done;
  return out;
}

}  // namespace periopt
