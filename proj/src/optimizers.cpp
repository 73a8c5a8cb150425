#include "periopt/optimizers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "periopt/error.hpp"

namespace periopt {

using nlohmann::json;

// ---------------------------------------------------------------- naming

std::string to_string(Method m) {
  switch (m) {
    case Method::BFGS: return "BFGS";
    case Method::BFGSLS: return "BFGSLS";
    case Method::FIRE: return "FIRE";
    case Method::MDMin: return "MDMin";
    case Method::CG: return "CG";
    case Method::FIRE_BFGSLS: return "FIRE+BFGSLS";
    case Method::MACS: return "MACS";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "bfgs") return Method::BFGS;
  if (lower == "bfgsls") return Method::BFGSLS;
  if (lower == "fire") return Method::FIRE;
  if (lower == "mdmin") return Method::MDMin;
  if (lower == "cg") return Method::CG;
  if (lower == "fire+bfgsls" || lower == "fire_bfgsls" || lower == "hybrid") return Method::FIRE_BFGSLS;
  if (lower == "macs") return Method::MACS;
  throw Error("unknown method: " + std::string(name));
}

std::vector<Method> classical_methods() {
  return {Method::BFGS, Method::BFGSLS, Method::FIRE, Method::MDMin, Method::CG, Method::FIRE_BFGSLS};
}

void TerminationPolicy::validate() const {
  if (!(fmax > 0.0)) throw Error("fmax must be > 0");
  if (max_steps < 1) throw Error("max_steps must be >= 1");
}

// ---------------------------------------------------------------- json

json structure_to_json(const Structure& s) {
  json lattice = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) lattice.push_back(s.lattice.matrix()(r, c));
  }
  json symbols = json::array();
  json positions = json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    symbols.push_back(s.symbol(i));
    for (int a = 0; a < 3; ++a) positions.push_back(s.positions[i][a]);
  }
  return json{{"lattice", lattice}, {"symbols", symbols}, {"positions", positions}};
}

Structure structure_from_json(const json& j, const SpeciesTable& table) {
  const auto lattice = j.at("lattice").get<std::vector<double>>();
  const auto symbols = j.at("symbols").get<std::vector<std::string>>();
  const auto positions = j.at("positions").get<std::vector<double>>();
  if (lattice.size() != 9 || positions.size() != 3 * symbols.size()) {
    throw FormatError("structure json has inconsistent array lengths");
  }
  Mat3 rows;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rows(r, c) = lattice[static_cast<std::size_t>(3 * r + c)];
  }
  Structure s;
  s.lattice = Lattice(rows);
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    s.add_atom(table.at(symbols[i]), Vec3(positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]));
  }
  return s;
}

json to_json(const RelaxationReport& r) {
  return json{{"method", r.method},
              {"success", r.success},
              {"steps", r.steps},
              {"energy_calls", r.energy_calls},
              {"wall_time", r.wall_time},
              {"energy_trace", r.energy_trace},
              {"final_fmax", r.final_fmax},
              {"failure_reason", r.failure_reason},
              {"final_structure", structure_to_json(r.final_structure)}};
}

RelaxationReport report_from_json(const json& j, const SpeciesTable& table) {
  RelaxationReport r;
  r.method = j.at("method").get<std::string>();
  r.success = j.at("success").get<bool>();
  r.steps = j.at("steps").get<int>();
  r.energy_calls = j.at("energy_calls").get<std::uint64_t>();
  r.wall_time = j.at("wall_time").get<double>();
  r.energy_trace = j.at("energy_trace").get<std::vector<double>>();
  r.final_fmax = j.at("final_fmax").is_number() ? j.at("final_fmax").get<double>()
                                                 : std::numeric_limits<double>::infinity();
  r.failure_reason = j.value("failure_reason", std::string());
  r.final_structure = structure_from_json(j.at("final_structure"), table);
  return r;
}

// ---------------------------------------------------------------- helpers

VecX flatten(const std::vector<Vec3>& v) {
  VecX out(3 * static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out.segment<3>(3 * static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

std::vector<Vec3> unflatten(const VecX& x) {
  std::vector<Vec3> out(static_cast<std::size_t>(x.size() / 3));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.segment<3>(3 * static_cast<Eigen::Index>(i));
  return out;
}

double max_atom_norm(const VecX& v) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < v.size(); i += 3) m = std::max(m, v.segment<3>(i).norm());
  return m;
}

VecX cap_step(const VecX& dr, double max_step) {
  const double longest = max_atom_norm(dr);
  if (longest > max_step) return dr * (max_step / longest);
  return dr;
}

Structure Evaluator::structure_at(const VecX& x) const {
  Structure s = templ_;
  s.positions = unflatten(x);
  return s;
}

Point Evaluator::evaluate(const VecX& x) {
  ++calls_;
  CalcResult r = calc_.evaluate(structure_at(x));
  Point p{x, r.energy, flatten(r.forces)};
  if (!std::isfinite(p.energy) || !p.forces.allFinite()) {
    throw CalculatorError("calculator returned non-finite energy or forces");
  }
  return p;
}

// ---------------------------------------------------------------- fixed step

Point FixedStepOptimizer::advance(const Point& current, Evaluator& eval) {
  const VecX dr = displacement(current.x, current.forces);
  return eval.evaluate(current.x + dr);
}

void Bfgs::update(const VecX& x, const VecX& forces) {
  const VecX dr = x - x0_;
  if (dr.cwiseAbs().maxCoeff() < 1e-7) return;
  const VecX df = forces - f0_;
  const double a = dr.dot(df);
  const VecX dg = hessian_ * dr;
  const double b = dr.dot(dg);
  if (std::abs(a) < 1e-14 || std::abs(b) < 1e-14) return;
  hessian_ -= df * df.transpose() / a + dg * dg.transpose() / b;
}

VecX Bfgs::displacement(const VecX& x, const VecX& forces) {
  if (hessian_.size() == 0) {
    hessian_ = Eigen::MatrixXd::Identity(x.size(), x.size()) * p_.initial_curvature;
  } else {
    update(x, forces);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hessian_);
  const VecX& omega = eig.eigenvalues();
  const Eigen::MatrixXd& modes = eig.eigenvectors();
  const VecX projected = modes.transpose() * forces;
  const VecX dr = cap_step(modes * projected.cwiseQuotient(omega.cwiseAbs()), p_.max_step);
  x0_ = x;
  f0_ = forces;
  return dr;
}

VecX Fire::displacement(const VecX& /*x*/, const VecX& forces) {
  if (v_.size() == 0) {
    v_ = VecX::Zero(forces.size());
  } else {
    const double vf = forces.dot(v_);
    if (vf > 0.0) {
      const double fnorm = forces.norm();
      if (fnorm > 0.0) v_ = (1.0 - a_) * v_ + a_ * forces / fnorm * v_.norm();
      if (n_since_reset_ > p_.n_min) {
        dt_ = std::min(dt_ * p_.f_inc, p_.dt_max);
        a_ *= p_.f_a;
      }
      ++n_since_reset_;
    } else {
      v_.setZero();
      a_ = p_.a_start;
      dt_ *= p_.f_dec;
      n_since_reset_ = 0;
    }
  }
  v_ += dt_ * forces;
  return cap_step(dt_ * v_, p_.max_step);
}

VecX MdMin::displacement(const VecX& /*x*/, const VecX& forces) {
  if (v_.size() == 0) v_ = VecX::Zero(forces.size());
  v_ += p_.dt * forces;
  const double vf = v_.dot(forces);
  const double ff = forces.squaredNorm();
  if (vf < 0.0 || ff == 0.0) {
    v_.setZero();
  } else {
    v_ = forces * (vf / ff);
  }
  return cap_step(p_.dt * v_, p_.max_step);
}

// ---------------------------------------------------------------- line search

namespace {

struct Trial {
  double alpha;
  Point point;
  double phi;
  double dphi;
};

double cubic_minimizer(const Trial& lo, const Trial& hi) {
  const double d1 = lo.dphi + hi.dphi - 3.0 * (lo.phi - hi.phi) / (lo.alpha - hi.alpha);
  const double disc = d1 * d1 - lo.dphi * hi.dphi;
  if (!(disc >= 0.0)) return 0.5 * (lo.alpha + hi.alpha);
  const double d2 = std::copysign(std::sqrt(disc), hi.alpha - lo.alpha);
  const double denom = hi.dphi - lo.dphi + 2.0 * d2;
  if (denom == 0.0) return 0.5 * (lo.alpha + hi.alpha);
  const double a = hi.alpha - (hi.alpha - lo.alpha) * (hi.dphi + d2 - d1) / denom;
  return std::isfinite(a) ? a : 0.5 * (lo.alpha + hi.alpha);
}

}  // namespace

LineSearchResult wolfe_line_search(const Point& start, const VecX& direction, double alpha0, double alpha_max,
                                   Evaluator& eval, const WolfeParams& params) {
  const double phi0 = start.energy;
  const double dphi0 = -start.forces.dot(direction);
  if (!(dphi0 < 0.0)) throw Error("line search direction is not downhill");

  LineSearchResult result;
  std::optional<Trial> best;
  auto probe = [&](double alpha) {
    Point p = eval.evaluate(start.x + alpha * direction);
    ++result.evaluations;
    Trial t{alpha, std::move(p), 0.0, 0.0};
    t.phi = t.point.energy;
    t.dphi = -t.point.forces.dot(direction);
    if (!best || t.phi < best->phi) best = t;
    return t;
  };
  auto armijo = [&](const Trial& t) { return t.phi <= phi0 + params.c1 * t.alpha * dphi0; };
  auto curvature = [&](const Trial& t) { return std::abs(t.dphi) <= -params.c2 * dphi0; };
  auto finish = [&](const Trial& t, bool wolfe) {
    result.alpha = t.alpha;
    result.point = t.point;
    result.wolfe = wolfe;
    result.decreased = t.phi < phi0;
    return result;
  };

  Trial start_trial{0.0, start, phi0, dphi0};
  auto zoom = [&](Trial lo, Trial hi) -> LineSearchResult {
    while (result.evaluations < params.max_evaluations) {
      const double lower = std::min(lo.alpha, hi.alpha);
      const double upper = std::max(lo.alpha, hi.alpha);
      const double width = upper - lower;
      double alpha = cubic_minimizer(lo, hi);
      alpha = std::clamp(alpha, lower + 0.1 * width, upper - 0.1 * width);
      Trial t = probe(alpha);
      if (!armijo(t) || t.phi >= lo.phi) {
        hi = t;
      } else {
        if (curvature(t)) return finish(t, true);
        if (t.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = t;
      }
    }
    if (lo.alpha > 0.0) return finish(lo, false);
    return finish(*best, false);
  };

  Trial prev = start_trial;
  double alpha = std::min(alpha0, alpha_max);
  for (int iter = 0; result.evaluations < params.max_evaluations; ++iter) {
    Trial t = probe(alpha);
    if (!armijo(t) || (iter > 0 && t.phi >= prev.phi)) return zoom(prev, t);
    if (curvature(t)) return finish(t, true);
    if (t.dphi >= 0.0) return zoom(t, prev);
    if (alpha >= alpha_max) return finish(t, false);
    prev = t;
    alpha = std::min(2.0 * alpha, alpha_max);
  }
  // Budget exhausted while extrapolating: every trial so far met Armijo.
  return finish(prev.alpha > 0.0 ? prev : *best, false);
}

// ---------------------------------------------------------------- BFGSLS

Point BfgsLineSearch::advance(const Point& current, Evaluator& eval) {
  const Eigen::Index n = current.x.size();
  const auto reset = [&] { inv_hessian_ = Eigen::MatrixXd::Identity(n, n) / p_.initial_curvature; };
  if (inv_hessian_.size() == 0) {
    reset();
  } else {
    const VecX s = current.x - x0_;
    const VecX y = f0_ - current.forces;  // gradient difference
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd left = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
      inv_hessian_ = left * inv_hessian_ * left.transpose() + rho * s * s.transpose();
    }
  }
  VecX p = inv_hessian_ * current.forces;
  if (!(current.forces.dot(p) > 0.0)) {
    reset();
    p = inv_hessian_ * current.forces;
  }
  const double alpha_cap = p_.max_step / max_atom_norm(p);
  LineSearchResult ls = wolfe_line_search(current, p, std::min(1.0, alpha_cap), alpha_cap, eval, p_.wolfe);
  x0_ = current.x;
  f0_ = current.forces;
  if (!ls.decreased) reset();
  return ls.point;
}

// ---------------------------------------------------------------- CG

Point ConjugateGradient::advance(const Point& current, Evaluator& eval) {
  const VecX& f = current.forces;
  const auto restart_limit = f.size();
  bool restart = direction_.size() == 0 || since_restart_ >= restart_limit;
  VecX d;
  if (!restart) {
    const double beta = std::max(0.0, f.dot(f - f_prev_) / f_prev_.squaredNorm());
    d = f + beta * direction_;
    if (!(f.dot(d) > 0.0)) restart = true;
  }
  if (restart) {
    d = f;
    since_restart_ = 0;
  }
  const double slope = f.dot(d);
  double alpha0 = p_.initial_alpha;
  if (alpha_prev_ > 0.0 && slope_prev_ > 0.0) alpha0 = alpha_prev_ * slope_prev_ / slope;
  const double longest = max_atom_norm(d);
  alpha0 = std::min(alpha0, p_.max_trial_step / longest);
  const double alpha_max = p_.max_step / longest;

  LineSearchResult ls = wolfe_line_search(current, d, alpha0, alpha_max, eval, p_.wolfe);
  f_prev_ = f;
  direction_ = d;
  alpha_prev_ = ls.alpha;
  slope_prev_ = slope;
  ++since_restart_;
  if (!ls.decreased) since_restart_ = restart_limit;
  return ls.point;
}

std::unique_ptr<Optimizer> make_optimizer(Method m) {
  switch (m) {
    case Method::BFGS: return std::make_unique<Bfgs>();
    case Method::BFGSLS: return std::make_unique<BfgsLineSearch>();
    case Method::FIRE: return std::make_unique<Fire>();
    case Method::MDMin: return std::make_unique<MdMin>();
    case Method::CG: return std::make_unique<ConjugateGradient>();
    default: throw Error("no single optimizer for method " + to_string(m));
  }
}

// ---------------------------------------------------------------- relax

namespace {

// Runs until converged or `budget` steps were committed; returns convergence.
bool drive(Optimizer& opt, Point& cur, int budget, double fmax, Evaluator& eval, RelaxationReport& rep) {
  for (int used = 0;; ++used) {
    if (max_atom_norm(cur.forces) <= fmax) return true;
    if (used == budget) return false;
    cur = opt.advance(cur, eval);
    ++rep.steps;
    rep.energy_trace.push_back(cur.energy);
  }
}

template <typename Body>
RelaxationReport run_relaxation(const Structure& s, const std::string& name, Calculator& calc,
                                const TerminationPolicy& tp, Body&& body) {
  tp.validate();
  s.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RelaxationReport rep;
  rep.method = name;
  rep.final_structure = s;
  rep.final_fmax = std::numeric_limits<double>::infinity();
  Evaluator eval(calc, s);
  std::optional<Point> cur;
  try {
    cur = eval.evaluate(flatten(s.positions));
    rep.energy_trace.push_back(cur->energy);
    rep.success = body(*cur, eval, rep);
  } catch (const Error& e) {
    rep.success = false;
    rep.failure_reason = e.what();
  }
  if (cur) {
    rep.final_structure = eval.structure_at(cur->x);
    rep.final_fmax = max_atom_norm(cur->forces);
  }
  rep.energy_calls = eval.calls();
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace

RelaxationReport relax(const Structure& s, Method method, Calculator& calc, const TerminationPolicy& tp) {
  if (method == Method::FIRE_BFGSLS) return relax_hybrid(s, calc, tp);
  if (method == Method::MACS) throw Error("MACS relaxation needs a trained policy (see relax_macs)");
  auto opt = make_optimizer(method);
  return run_relaxation(s, to_string(method), calc, tp, [&](Point& cur, Evaluator& eval, RelaxationReport& rep) {
    return drive(*opt, cur, tp.max_steps, tp.fmax, eval, rep);
  });
}

RelaxationReport relax_hybrid(const Structure& s, Calculator& calc, const TerminationPolicy& tp, int fire_steps) {
  return run_relaxation(s, to_string(Method::FIRE_BFGSLS), calc, tp,
                        [&](Point& cur, Evaluator& eval, RelaxationReport& rep) {
                          Fire fire;
                          if (drive(fire, cur, std::min(fire_steps, tp.max_steps), tp.fmax, eval, rep)) return true;
                          BfgsLineSearch bfgsls;
                          return drive(bfgsls, cur, tp.max_steps - rep.steps, tp.fmax, eval, rep);
                        });
}

}  // namespace periopt
