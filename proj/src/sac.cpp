#include "periopt/sac.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "periopt/error.hpp"
#include "periopt/seed.hpp"

namespace periopt {

using nlohmann::json;

namespace {

// Largest float strictly below 1: tanh of a large argument rounds to 1 in
// single precision, and actions must stay inside the open interval.
constexpr float kActionBound = 1.0f - 1.0f / 16777216.0f;

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw FormatError("expected a boolean, got `" + v + "`");
}

nn::MlpShape actor_shape(int obs_dim, const TrainerConfig& c) {
  return {obs_dim, c.hidden1, c.hidden2, 2 * sac::kActionDim};
}
nn::MlpShape critic_shape(int obs_dim, const TrainerConfig& c) {
  return {obs_dim + sac::kActionDim, c.hidden1, c.hidden2, 1};
}

void assign_parameters(nn::Mlp<float>& dst, const nn::Mlp<float>& src, const char* name) {
  const auto& a = dst.shape();
  const auto& b = src.shape();
  if (!(a == b)) {
    std::ostringstream msg;
    msg << name << " shape mismatch: expected " << a.in << "-" << a.h1 << "-" << a.h2 << "-" << a.out << ", got "
        << b.in << "-" << b.h1 << "-" << b.h2 << "-" << b.out;
    throw ShapeError(msg.str());
  }
  dst.params() = src.params();
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainerConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw Error(std::string("trainer config: ") + what);
  };
  need(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
  need(batch >= 1, "batch must be >= 1");
  need(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
  need(initial_alpha > 0.0, "initial_alpha must be > 0");
  need(actor_lr > 0.0 && critic_lr > 0.0 && entropy_lr > 0.0, "learning rates must be > 0");
  need(warmup_samples >= 0, "warmup_samples must be >= 0");
  need(num_envs >= 1, "num_envs must be >= 1");
  need(total_rounds >= 0, "total_rounds must be >= 0");
  need(max_episodes >= 0, "max_episodes must be >= 0");
  need(buffer_capacity >= 1, "buffer_capacity must be >= 1");
  need(hidden1 >= 1 && hidden2 >= 1, "hidden widths must be >= 1");
  need(target_update_interval >= 1, "target_update_interval must be >= 1");
  need(collect_threads >= 1, "collect_threads must be >= 1");
  need(volume_per_atom > 0.0, "volume_per_atom must be > 0");
  need(min_dist > 0.0, "min_dist must be > 0");
  need(log_every >= 1, "log_every must be >= 1");
  need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  if (total_atoms(parse_composition(composition)) < 1) throw Error("trainer config: empty composition");
}

json TrainerConfig::to_json() const {
  return json{{"gamma", gamma},
              {"batch", batch},
              {"target_entropy", target_entropy},
              {"tau", tau},
              {"initial_alpha", initial_alpha},
              {"actor_lr", actor_lr},
              {"critic_lr", critic_lr},
              {"entropy_lr", entropy_lr},
              {"warmup_samples", warmup_samples},
              {"twin_q", twin_q},
              {"backup_entropy", backup_entropy},
              {"num_envs", num_envs},
              {"total_rounds", total_rounds},
              {"max_episodes", max_episodes},
              {"buffer_capacity", buffer_capacity},
              {"hidden1", hidden1},
              {"hidden2", hidden2},
              {"target_update_interval", target_update_interval},
              {"collect_threads", collect_threads},
              {"seed", seed},
              {"composition", composition},
              {"volume_per_atom", volume_per_atom},
              {"min_dist", min_dist},
              {"log_every", log_every},
              {"checkpoint_every", checkpoint_every}};
}

TrainerConfig TrainerConfig::from_json(const json& j) {
  TrainerConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "gamma") c.gamma = value.get<double>();
    else if (key == "batch") c.batch = value.get<int>();
    else if (key == "target_entropy") c.target_entropy = value.get<double>();
    else if (key == "tau") c.tau = value.get<double>();
    else if (key == "initial_alpha") c.initial_alpha = value.get<double>();
    else if (key == "actor_lr") c.actor_lr = value.get<double>();
    else if (key == "critic_lr") c.critic_lr = value.get<double>();
    else if (key == "entropy_lr") c.entropy_lr = value.get<double>();
    else if (key == "warmup_samples") c.warmup_samples = value.get<int>();
    else if (key == "twin_q") c.twin_q = value.get<bool>();
    else if (key == "backup_entropy") c.backup_entropy = value.get<bool>();
    else if (key == "num_envs") c.num_envs = value.get<int>();
    else if (key == "total_rounds") c.total_rounds = value.get<long>();
    else if (key == "max_episodes") c.max_episodes = value.get<long>();
    else if (key == "buffer_capacity") c.buffer_capacity = value.get<std::size_t>();
    else if (key == "hidden1") c.hidden1 = value.get<int>();
    else if (key == "hidden2") c.hidden2 = value.get<int>();
    else if (key == "target_update_interval") c.target_update_interval = value.get<int>();
    else if (key == "collect_threads") c.collect_threads = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "composition") c.composition = value.get<std::string>();
    else if (key == "volume_per_atom") c.volume_per_atom = value.get<double>();
    else if (key == "min_dist") c.min_dist = value.get<double>();
    else if (key == "log_every") c.log_every = value.get<int>();
    else if (key == "checkpoint_every") c.checkpoint_every = value.get<long>();
    else throw FormatError("unknown trainer config key `" + key + "`");
  }
  c.validate();
  return c;
}

TrainerConfig TrainerConfig::parse(std::string_view text) {
  // Reuse the JSON reader: every value is parsed as JSON, bare words as strings.
  json j = TrainerConfig{}.to_json();
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("trainer config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!j.contains(key)) throw FormatError("trainer config line " + std::to_string(lineno) + ": unknown key `" + key + "`");
    if (key == "composition") {
      j[key] = value;
    } else if (key == "twin_q" || key == "backup_entropy") {
      j[key] = parse_bool(value);
    } else {
      try {
        j[key] = json::parse(value);
      } catch (const json::exception&) {
        throw FormatError("trainer config line " + std::to_string(lineno) + ": bad value for " + key);
      }
    }
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw FormatError(std::string("trainer config: ") + e.what());
  }
}

TrainerConfig TrainerConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trainer config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string TrainerConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  const json j = to_json();
  for (const auto& [key, value] : j.items()) {
    out << key << " = " << (value.is_string() ? value.get<std::string>() : value.dump()) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------- replay buffer

ReplayBuffer::ReplayBuffer(std::size_t capacity, int obs_dim) : capacity_(capacity), dim_(obs_dim) {
  if (capacity == 0) throw Error("replay buffer capacity must be >= 1");
  if (obs_dim < 1) throw Error("replay buffer observation dimension must be >= 1");
}

std::size_t ReplayBuffer::size() const {
  std::lock_guard lock(mu_);
  return size_;
}

std::uint64_t ReplayBuffer::total_added() const {
  std::lock_guard lock(mu_);
  return added_;
}

void ReplayBuffer::add(const Transition& t) {
  std::lock_guard lock(mu_);
  add_unlocked(t);
}

void ReplayBuffer::add(const std::vector<Transition>& ts) {
  std::lock_guard lock(mu_);
  for (const auto& t : ts) add_unlocked(t);
}

void ReplayBuffer::add_unlocked(const Transition& t) {
  const auto d = static_cast<std::size_t>(dim_);
  if (t.obs.size() != d || t.next_obs.size() != d) throw ShapeError("transition observation has wrong dimension");
  if (size_ < capacity_) {
    obs_.insert(obs_.end(), t.obs.begin(), t.obs.end());
    next_obs_.insert(next_obs_.end(), t.next_obs.begin(), t.next_obs.end());
    actions_.insert(actions_.end(), {t.action[0], t.action[1], t.action[2]});
    rewards_.push_back(t.reward);
    done_.push_back(t.done ? 1.0f : 0.0f);
    ++size_;
  } else {
    std::copy(t.obs.begin(), t.obs.end(), obs_.begin() + static_cast<std::ptrdiff_t>(head_ * d));
    std::copy(t.next_obs.begin(), t.next_obs.end(), next_obs_.begin() + static_cast<std::ptrdiff_t>(head_ * d));
    for (int c = 0; c < 3; ++c) actions_[3 * head_ + static_cast<std::size_t>(c)] = t.action[c];
    rewards_[head_] = t.reward;
    done_[head_] = t.done ? 1.0f : 0.0f;
    head_ = (head_ + 1) % capacity_;
  }
  ++added_;
}

Transition ReplayBuffer::at(std::size_t i) const {
  std::lock_guard lock(mu_);
  if (i >= size_) throw Error("replay buffer index out of range");
  const std::size_t slot = size_ < capacity_ ? i : (head_ + i) % capacity_;
  const auto d = static_cast<std::size_t>(dim_);
  Transition t;
  t.obs.assign(obs_.begin() + static_cast<std::ptrdiff_t>(slot * d), obs_.begin() + static_cast<std::ptrdiff_t>((slot + 1) * d));
  t.next_obs.assign(next_obs_.begin() + static_cast<std::ptrdiff_t>(slot * d),
                    next_obs_.begin() + static_cast<std::ptrdiff_t>((slot + 1) * d));
  t.action = Eigen::Vector3f(actions_[3 * slot], actions_[3 * slot + 1], actions_[3 * slot + 2]);
  t.reward = rewards_[slot];
  t.done = done_[slot] != 0.0f;
  return t;
}

sac::Batch<float> ReplayBuffer::sample(std::mt19937_64& rng, int batch) const {
  std::lock_guard lock(mu_);
  if (size_ == 0) throw Error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  sac::Batch<float> b;
  b.obs.resize(dim_, batch);
  b.next_obs.resize(dim_, batch);
  b.actions.resize(3, batch);
  b.rewards.resize(batch);
  b.done.resize(batch);
  const auto d = static_cast<std::size_t>(dim_);
  for (int c = 0; c < batch; ++c) {
    const std::size_t s = pick(rng);
    std::memcpy(b.obs.col(c).data(), obs_.data() + s * d, d * sizeof(float));
    std::memcpy(b.next_obs.col(c).data(), next_obs_.data() + s * d, d * sizeof(float));
    for (int a = 0; a < 3; ++a) b.actions(a, c) = actions_[3 * s + static_cast<std::size_t>(a)];
    b.rewards[c] = rewards_[s];
    b.done[c] = done_[s];
  }
  return b;
}

// ---------------------------------------------------------------- policy

void Policy::check_compatible(const EnvConfig& cfg) const {
  const int want = observation_length(cfg);
  if (cfg.feature_variant != env.feature_variant || cfg.k != env.k || want != obs_dim()) {
    std::ostringstream msg;
    msg << "policy was trained on " << to_string(env.feature_variant) << " observations with k=" << env.k << " ("
        << obs_dim() << " components); environment uses " << to_string(cfg.feature_variant) << " with k=" << cfg.k
        << " (" << want << " components)";
    throw ShapeError(msg.str());
  }
  if (env.normalize_obs && normalizer.dim() != obs_dim()) throw ShapeError("normalizer dimension does not match policy");
}

std::vector<float> Policy::normalize(const std::vector<double>& raw) const {
  if (static_cast<int>(raw.size()) != obs_dim()) throw ShapeError("observation has wrong dimension");
  std::vector<float> out(raw.size());
  if (env.normalize_obs) {
    const auto z = normalizer.normalize(raw);
    std::transform(z.begin(), z.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  } else {
    std::transform(raw.begin(), raw.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  }
  return out;
}

std::vector<Vec3> Policy::act(const std::vector<std::vector<double>>& raw_obs, ActMode mode,
                              std::mt19937_64* rng) const {
  if (!actor.params().allFinite()) throw Error("policy parameters are not finite");
  const auto n = static_cast<Eigen::Index>(raw_obs.size());
  nn::Mat<float> obs(obs_dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto z = normalize(raw_obs[static_cast<std::size_t>(i)]);
    obs.col(i) = Eigen::Map<const Eigen::VectorXf>(z.data(), obs_dim());
  }
  nn::Mat<float> a;
  if (mode == ActMode::MEAN) {
    a = sac::mean_action(actor, obs);
  } else {
    if (!rng) throw Error("sampled actions need a random generator");
    std::normal_distribution<float> normal(0.0f, 1.0f);
    nn::Mat<float> xi(sac::kActionDim, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      for (int j = 0; j < sac::kActionDim; ++j) xi(j, c) = normal(*rng);
    }
    a = sac::sample_policy(actor, obs, xi).a;
  }
  std::vector<Vec3> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) {
      out[static_cast<std::size_t>(i)][j] = std::clamp(a(j, i), -kActionBound, kActionBound);
    }
  }
  return out;
}

RelaxationReport relax_macs(const Structure& s, const Policy& policy, Calculator& calc, const TerminationPolicy& tp) {
  tp.validate();
  s.validate();
  EnvConfig cfg = policy.env;
  cfg.fmax = tp.fmax;
  cfg.max_steps = tp.max_steps;
  policy.check_compatible(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  RelaxationReport rep;
  rep.method = to_string(Method::MACS);
  rep.final_structure = s;
  rep.final_fmax = std::numeric_limits<double>::infinity();
  MacsEnv env(cfg, calc);
  StepOutcome out = env.reset(s);
  if (out.calculator_failed) {
    rep.failure_reason = out.error;
  } else {
    rep.energy_trace.push_back(out.energy);
    while (!out.done) {
      out = env.step(policy.act(out.observations, ActMode::MEAN));
      if (out.calculator_failed) {
        rep.failure_reason = out.error;
        break;
      }
      rep.energy_trace.push_back(out.energy);
    }
    rep.success = out.reason == DoneReason::SUCCESS && !out.calculator_failed;
    rep.final_structure = env.structure();
    rep.final_fmax = max_force_norm(env.forces());
  }
  rep.steps = env.steps();
  rep.energy_calls = env.energy_calls();
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr const char* kCheckpointFormat = "periopt-sac-checkpoint";

constexpr std::uint32_t swap_bytes(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xff00u) | ((x << 8) & 0xff0000u) | (x << 24);
}

json shape_json(const nn::MlpShape& s) { return json::array({s.in, s.h1, s.h2, s.out}); }

nn::MlpShape shape_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw CheckpointError("corrupt checkpoint: bad network shape");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

void write_floats(std::ostream& out, const nn::Vec<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const auto bits = swap_bytes(std::bit_cast<std::uint32_t>(v[i]));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

void read_floats(std::istream& in, nn::Vec<float>& v) {
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(float))) {
    throw CheckpointError("corrupt checkpoint: parameter data truncated");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      v[i] = std::bit_cast<float>(swap_bytes(std::bit_cast<std::uint32_t>(v[i])));
    }
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::vector<std::pair<const char*, const nn::Mlp<float>*>> blocks{
      {"actor", &c.actor}, {"q1", &c.q1}, {"q2", &c.q2}, {"q1_target", &c.q1_target}, {"q2_target", &c.q2_target}};
  json header{{"format", kCheckpointFormat},
              {"version", Checkpoint::kVersion},
              {"env", c.env.to_json()},
              {"trainer", c.trainer.to_json()},
              {"normalizer", c.normalizer.to_json()},
              {"log_alpha", c.log_alpha},
              {"rng_state", c.rng_state},
              {"rounds", c.rounds},
              {"env_steps", c.env_steps},
              {"episodes", c.episodes},
              {"byte_order", "little"},
              {"dtype", "float32"}};
  json list = json::array();
  for (const auto& [name, net] : blocks) {
    list.push_back({{"name", name}, {"shape", shape_json(net->shape())}, {"count", net->params().size()}});
  }
  header["blocks"] = list;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);
    out << header.dump() << '\n';
    for (const auto& [name, net] : blocks) write_floats(out, net->params());
    if (!out) throw CheckpointError("failed writing checkpoint: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into place: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("corrupt checkpoint: missing header");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception&) {
    throw CheckpointError("corrupt checkpoint: header is not JSON");
  }
  if (!header.is_object() || header.value("format", "") != kCheckpointFormat) {
    throw CheckpointError("not a periopt checkpoint: " + path);
  }
  const int version = header.value("version", -1);
  if (version != Checkpoint::kVersion) {
    throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(Checkpoint::kVersion));
  }
  Checkpoint c;
  try {
    c.env = EnvConfig::from_json(header.at("env"));
    c.trainer = TrainerConfig::from_json(header.at("trainer"));
    c.normalizer = RunningMeanStd::from_json(header.at("normalizer"));
    c.log_alpha = header.at("log_alpha").get<float>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.rounds = header.at("rounds").get<long>();
    c.env_steps = header.at("env_steps").get<std::uint64_t>();
    c.episodes = header.at("episodes").get<std::uint64_t>();
    std::map<std::string, nn::Mlp<float>*> slots{
        {"actor", &c.actor}, {"q1", &c.q1}, {"q2", &c.q2}, {"q1_target", &c.q1_target}, {"q2_target", &c.q2_target}};
    for (const auto& b : header.at("blocks")) {
      const auto name = b.at("name").get<std::string>();
      auto it = slots.find(name);
      if (it == slots.end()) throw CheckpointError("corrupt checkpoint: unknown block " + name);
      nn::Mlp<float> net(shape_from_json(b.at("shape")));
      if (b.at("count").get<std::size_t>() != net.shape().num_params()) {
        throw CheckpointError("corrupt checkpoint: block " + name + " size disagrees with its shape");
      }
      read_floats(in, net.params());
      *it->second = std::move(net);
      slots.erase(it);
    }
    if (!slots.empty()) throw CheckpointError("corrupt checkpoint: missing block " + slots.begin()->first);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("corrupt checkpoint: trailing data");
  if (c.actor.shape().in != observation_length(c.env)) {
    throw CheckpointError("corrupt checkpoint: actor input does not match its environment config");
  }
  return c;
}

// ---------------------------------------------------------------- trainer

StructureSource random_structure_source(const SpeciesTable& table, const TrainerConfig& cfg) {
  RandomStructureRequest req;
  req.counts = parse_composition(cfg.composition);
  req.target_volume = cfg.volume_per_atom * total_atoms(req.counts);
  req.min_dist = cfg.min_dist;
  return [table, req](std::uint64_t seed) { return random_structure(table, req, seed); };
}

struct SacTrainer::Slot {
  std::unique_ptr<Calculator> calc;
  std::unique_ptr<MacsEnv> env;
  std::mt19937_64 rng;
  bool active = false;
  std::vector<std::vector<float>> obs;    // normalized, per agent
  std::vector<Vec3> actions;
  StepOutcome outcome;
  int length = 0;
  double reward = 0.0;
};

SacTrainer::SacTrainer(EnvConfig env, TrainerConfig cfg, StructureSource source, CalculatorFactory make_calc)
    : env_(env),
      cfg_(std::move(cfg)),
      source_(std::move(source)),
      obs_dim_(observation_length(env)),
      actor_(actor_shape(obs_dim_, cfg_)),
      q1_(critic_shape(obs_dim_, cfg_)),
      q2_(critic_shape(obs_dim_, cfg_)),
      q1_target_(critic_shape(obs_dim_, cfg_)),
      q2_target_(critic_shape(obs_dim_, cfg_)),
      normalizer_(obs_dim_),
      buffer_(cfg_.buffer_capacity, obs_dim_),
      rng_(derive_seed(cfg_.seed, 0, 0)) {
  env_.validate();
  cfg_.validate();
  std::mt19937_64 init(derive_seed(cfg_.seed, 1, 0));
  actor_.init(init);
  q1_.init(init);
  q2_.init(init);
  q1_target_.params() = q1_.params();
  q2_target_.params() = q2_.params();
  actor_opt_ = nn::Adam<float>(actor_.shape().num_params(), cfg_.actor_lr);
  q1_opt_ = nn::Adam<float>(q1_.shape().num_params(), cfg_.critic_lr);
  q2_opt_ = nn::Adam<float>(q2_.shape().num_params(), cfg_.critic_lr);
  alpha_opt_ = nn::Adam<float>(1, cfg_.entropy_lr);
  log_alpha_ = nn::Vec<float>::Constant(1, static_cast<float>(std::log(cfg_.initial_alpha)));
  for (int i = 0; i < cfg_.num_envs; ++i) {
    auto slot = std::make_unique<Slot>();
    slot->calc = make_calc();
    slot->env = std::make_unique<MacsEnv>(env_, *slot->calc);
    slot->rng.seed(derive_seed(cfg_.seed, 2, static_cast<std::uint64_t>(i)));
    slots_.push_back(std::move(slot));
  }
}

SacTrainer::~SacTrainer() = default;

double SacTrainer::alpha() const { return std::exp(static_cast<double>(log_alpha_[0])); }

std::vector<float> SacTrainer::observe(const std::vector<double>& raw) {
  std::vector<float> out(raw.size());
  if (env_.normalize_obs) {
    normalizer_.update(raw);
    const auto z = normalizer_.normalize(raw);
    std::transform(z.begin(), z.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  } else {
    std::transform(raw.begin(), raw.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  }
  return out;
}

void SacTrainer::start_episode(Slot& slot) {
  // Structures that cannot be packed, are already relaxed or that the
  // calculator rejects carry no learning signal; draw again.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Structure s;
    try {
      s = source_(derive_seed(cfg_.seed, 3, structure_counter_++));
    } catch (const GeometryError&) {
      continue;  // this seed cannot be packed
    }
    StepOutcome out = slot.env->reset(s);
    if (out.done) continue;
    slot.obs.clear();
    for (const auto& o : out.observations) slot.obs.push_back(observe(o));
    slot.active = true;
    slot.length = 0;
    slot.reward = 0.0;
    return;
  }
  throw Error("structure source produced 1000 unusable structures in a row");
}

void SacTrainer::round() {
  // Actions for every environment, sequentially so that normalization and
  // random draws do not depend on thread timing.
  for (auto& sp : slots_) {
    Slot& slot = *sp;
    if (!slot.active) start_episode(slot);
    const auto n = static_cast<Eigen::Index>(slot.obs.size());
    nn::Mat<float> obs(obs_dim_, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      obs.col(i) = Eigen::Map<const Eigen::VectorXf>(slot.obs[static_cast<std::size_t>(i)].data(), obs_dim_);
    }
    std::normal_distribution<float> normal(0.0f, 1.0f);
    nn::Mat<float> xi(sac::kActionDim, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      for (int j = 0; j < sac::kActionDim; ++j) xi(j, c) = normal(slot.rng);
    }
    const nn::Mat<float> a = sac::sample_policy(actor_, obs, xi).a;
    slot.actions.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < 3; ++j) {
        slot.actions[static_cast<std::size_t>(i)][j] = std::clamp(a(j, i), -kActionBound, kActionBound);
      }
    }
  }

  // Calculator calls, optionally in parallel.
  const int threads = std::min<int>(cfg_.collect_threads, static_cast<int>(slots_.size()));
  if (threads <= 1) {
    for (auto& sp : slots_) sp->outcome = sp->env->step(sp->actions);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = static_cast<std::size_t>(t); i < slots_.size(); i += static_cast<std::size_t>(threads)) {
            slots_[i]->outcome = slots_[i]->env->step(slots_[i]->actions);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Transitions, in environment order.
  for (auto& sp : slots_) {
    Slot& slot = *sp;
    StepOutcome& out = slot.outcome;
    ++env_steps_;
    if (out.calculator_failed) {
      episodes_.push_back({slot.length, slot.reward, false, true});
      slot.active = false;
      continue;
    }
    std::vector<Transition> batch(slot.obs.size());
    double mean_reward = 0.0;
    for (std::size_t i = 0; i < slot.obs.size(); ++i) {
      Transition& t = batch[i];
      t.obs = std::move(slot.obs[i]);
      t.action = slot.actions[i].cast<float>();
      t.reward = static_cast<float>(out.rewards[i]);
      t.next_obs = observe(out.observations[i]);
      t.done = out.reason == DoneReason::SUCCESS;
      mean_reward += out.rewards[i];
    }
    ++slot.length;
    slot.reward += mean_reward / static_cast<double>(batch.size());
    slot.obs.clear();
    for (const auto& t : batch) slot.obs.push_back(t.next_obs);
    buffer_.add(batch);
    if (out.done) {
      episodes_.push_back({slot.length, slot.reward, out.reason == DoneReason::SUCCESS, false});
      slot.active = false;
    }
  }
  ++rounds_;
  if (buffer_.size() >= static_cast<std::size_t>(std::max(cfg_.warmup_samples, 1))) last_update_ = update();
}

UpdateStats SacTrainer::update() {
  const sac::Batch<float> batch = buffer_.sample(rng_, cfg_.batch);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto noise = [&] {
    nn::Mat<float> xi(sac::kActionDim, cfg_.batch);
    for (Eigen::Index i = 0; i < xi.size(); ++i) xi.data()[i] = normal(rng_);
    return xi;
  };
  const nn::Mat<float> xi_next = noise();
  const nn::Mat<float> xi = noise();
  const auto alpha = std::exp(log_alpha_[0]);
  const bool twin = cfg_.twin_q;

  UpdateStats st;
  st.alpha = alpha;
  const auto critic = sac::critic_loss<float>(q1_, twin ? &q2_ : nullptr, q1_target_, twin ? &q2_target_ : nullptr,
                                              actor_, batch, xi_next, cfg_.backup_entropy ? alpha : 0.0f,
                                              static_cast<float>(cfg_.gamma));
  st.critic_loss = critic.loss;
  st.mean_q = critic.q1.mean();
  if (!std::isfinite(st.critic_loss) || !critic.grad_q1.allFinite()) {
    std::ostringstream msg;
    msg << "critic loss diverged at round " << rounds_ << " (update " << updates_ << "): loss=" << st.critic_loss
        << " alpha=" << alpha << " mean target=" << critic.target.mean() << " mean reward=" << batch.rewards.mean();
    throw TrainingError(msg.str());
  }
  q1_opt_.step(q1_.params(), critic.grad_q1);
  if (twin) q2_opt_.step(q2_.params(), critic.grad_q2);

  const auto actor = sac::actor_loss<float>(actor_, q1_, twin ? &q2_ : nullptr, batch.obs, xi, alpha);
  st.actor_loss = actor.loss;
  st.mean_logp = actor.logp.mean();
  if (!std::isfinite(st.actor_loss) || !actor.grad.allFinite()) {
    std::ostringstream msg;
    msg << "actor loss diverged at round " << rounds_ << " (update " << updates_ << "): loss=" << st.actor_loss
        << " alpha=" << alpha << " mean log pi=" << st.mean_logp << " mean Q=" << st.mean_q;
    throw TrainingError(msg.str());
  }
  actor_opt_.step(actor_.params(), actor.grad);

  const auto temp = sac::alpha_loss<float>(log_alpha_[0], actor.logp, static_cast<float>(cfg_.target_entropy));
  st.alpha_loss = temp.loss;
  alpha_opt_.step(log_alpha_, nn::Vec<float>::Constant(1, temp.grad));

  ++updates_;
  if (updates_ % cfg_.target_update_interval == 0) {
    nn::polyak(q1_target_.params(), q1_.params(), cfg_.tau);
    nn::polyak(q2_target_.params(), q2_.params(), cfg_.tau);
  }
  return st;
}

void SacTrainer::write_log_header(std::ostream& out) {
  out << "round,env_steps,episodes,mean_ep_reward,mean_ep_len,actor_loss,critic_loss,alpha\n";
}

void SacTrainer::write_log_row(std::ostream& out) const {
  // Episode statistics over the most recent 100 finished episodes.
  const std::size_t window = std::min<std::size_t>(episodes_.size(), 100);
  out << rounds_ << ',' << env_steps_ << ',' << episodes_.size() << ',';
  out << std::setprecision(8);
  if (window == 0) {
    out << "NA,NA,";
  } else {
    double reward = 0.0, length = 0.0;
    for (std::size_t i = episodes_.size() - window; i < episodes_.size(); ++i) {
      reward += episodes_[i].reward;
      length += episodes_[i].length;
    }
    out << reward / static_cast<double>(window) << ',' << length / static_cast<double>(window) << ',';
  }
  if (last_update_) {
    out << last_update_->actor_loss << ',' << last_update_->critic_loss << ',';
  } else {
    out << "NA,NA,";
  }
  out << alpha() << '\n';
}

void SacTrainer::run(std::ostream* log, const std::string& checkpoint_path) {
  if (log && rounds_ == 0) write_log_header(*log);
  auto finished = [&] {
    return rounds_ >= cfg_.total_rounds ||
           (cfg_.max_episodes > 0 && static_cast<long>(episodes_.size()) >= cfg_.max_episodes);
  };
  while (!finished()) {
    round();
    if (log && rounds_ % cfg_.log_every == 0) {
      write_log_row(*log);
      log->flush();
    }
    if (!checkpoint_path.empty() && cfg_.checkpoint_every > 0 && rounds_ % cfg_.checkpoint_every == 0) {
      save_checkpoint(checkpoint(), checkpoint_path);
    }
  }
  if (log && rounds_ % cfg_.log_every != 0) write_log_row(*log);
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint(), checkpoint_path);
}

Checkpoint SacTrainer::checkpoint() const {
  Checkpoint c;
  c.env = env_;
  c.trainer = cfg_;
  c.normalizer = normalizer_;
  c.actor = actor_;
  c.q1 = q1_;
  c.q2 = q2_;
  c.q1_target = q1_target_;
  c.q2_target = q2_target_;
  c.log_alpha = log_alpha_[0];
  std::ostringstream rng;
  rng << rng_;
  c.rng_state = rng.str();
  c.rounds = rounds_;
  c.env_steps = env_steps_;
  c.episodes = episodes_.size();
  return c;
}

void SacTrainer::restore(const Checkpoint& c) {
  if (!(c.env == env_)) throw ShapeError("checkpoint environment config differs from the trainer's");
  assign_parameters(actor_, c.actor, "actor");
  assign_parameters(q1_, c.q1, "q1");
  assign_parameters(q2_, c.q2, "q2");
  assign_parameters(q1_target_, c.q1_target, "q1_target");
  assign_parameters(q2_target_, c.q2_target, "q2_target");
  if (c.normalizer.dim() != normalizer_.dim()) throw ShapeError("normalizer dimension mismatch");
  normalizer_ = c.normalizer;
  log_alpha_[0] = c.log_alpha;
  std::istringstream rng(c.rng_state);
  rng >> rng_;
  if (!rng) throw CheckpointError("corrupt checkpoint: bad random generator state");
  rounds_ = c.rounds;
  env_steps_ = c.env_steps;
}

Policy SacTrainer::policy() const { return {env_, normalizer_, actor_}; }

}  // namespace periopt
