#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "periopt/crystal.hpp"
#include "periopt/potential.hpp"

namespace periopt {

using VecX = Eigen::VectorXd;

enum class Method { BFGS, BFGSLS, FIRE, MDMin, CG, FIRE_BFGSLS, MACS };

std::string to_string(Method m);
Method parse_method(std::string_view name);
/// BFGS, BFGSLS, FIRE, MDMin, CG, FIRE+BFGSLS (MACS excluded).
std::vector<Method> classical_methods();

struct TerminationPolicy {
  double fmax = 0.05;   // eV/Angstrom
  int max_steps = 1000;

  void validate() const;
  bool operator==(const TerminationPolicy&) const = default;
};

struct RelaxationReport {
  std::string method;
  bool success = false;
  int steps = 0;
  std::uint64_t energy_calls = 0;
  double wall_time = 0.0;             // seconds
  std::vector<double> energy_trace;   // eV, one entry per committed step plus the start
  Structure final_structure;
  double final_fmax = 0.0;
  std::string failure_reason;         // empty on success and on plain budget exhaustion
};

nlohmann::json to_json(const RelaxationReport& r);
/// Inverse of to_json; species parameters are taken from `table`.
RelaxationReport report_from_json(const nlohmann::json& j, const SpeciesTable& table);

nlohmann::json structure_to_json(const Structure& s);
Structure structure_from_json(const nlohmann::json& j, const SpeciesTable& table);

/// Flattened state of a relaxation: 3N positions, energy and 3N forces.
struct Point {
  VecX x;
  double energy = 0.0;
  VecX forces;
};

VecX flatten(const std::vector<Vec3>& v);
std::vector<Vec3> unflatten(const VecX& x);
/// Largest per-atom norm of a flattened 3N vector.
double max_atom_norm(const VecX& v);
/// Uniformly rescale so that no atom moves further than max_step.
VecX cap_step(const VecX& dr, double max_step);

/// Evaluates flattened positions against a fixed cell and species layout.
/// Every call is one energy calculation.
class Evaluator {
 public:
  Evaluator(Calculator& calc, Structure templ) : calc_(calc), templ_(std::move(templ)) {}

  /// Throws CalculatorError on calculator failure or non-finite output.
  Point evaluate(const VecX& x);
  std::uint64_t calls() const { return calls_; }
  Structure structure_at(const VecX& x) const;

 private:
  Calculator& calc_;
  Structure templ_;
  std::uint64_t calls_ = 0;
};

/// One outer iteration of an optimizer.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Commits one step from `current`, evaluating as many trial points as needed.
  virtual Point advance(const Point& current, Evaluator& eval) = 0;
};

/// Methods that move by a displacement computed from the current forces,
/// followed by exactly one evaluation.
class FixedStepOptimizer : public Optimizer {
 public:
  Point advance(const Point& current, Evaluator& eval) override;
  /// 3N displacement for the given positions and forces; updates internal state.
  virtual VecX displacement(const VecX& x, const VecX& forces) = 0;
};

struct BfgsParams {
  double max_step = 0.2;       // Angstrom per atom
  double initial_curvature = 70.0;  // eV/Angstrom^2
};

/// Quasi-Newton with a Hessian model; the step uses |eigenvalues| so it is
/// always downhill in the model.
class Bfgs final : public FixedStepOptimizer {
 public:
  explicit Bfgs(BfgsParams p = {}) : p_(p) {}
  VecX displacement(const VecX& x, const VecX& forces) override;
  const Eigen::MatrixXd& hessian() const { return hessian_; }

 private:
  void update(const VecX& x, const VecX& forces);

  BfgsParams p_;
  Eigen::MatrixXd hessian_;
  VecX x0_, f0_;
};

struct FireParams {
  double dt = 0.1;
  double dt_max = 1.0;
  double max_step = 0.2;
  int n_min = 5;
  double f_inc = 1.1;
  double f_dec = 0.5;
  double a_start = 0.1;
  double f_a = 0.99;
};

class Fire final : public FixedStepOptimizer {
 public:
  explicit Fire(FireParams p = {}) : p_(p), dt_(p.dt), a_(p.a_start) {}
  VecX displacement(const VecX& x, const VecX& forces) override;
  const VecX& velocity() const { return v_; }
  double dt() const { return dt_; }

 private:
  FireParams p_;
  VecX v_;
  double dt_;
  double a_;
  int n_since_reset_ = 0;
};

struct MdMinParams {
  double dt = 0.2;
  double max_step = 0.2;
};

/// Velocity Verlet with unit masses; velocity is projected onto the force
/// and zeroed when it points uphill.
class MdMin final : public FixedStepOptimizer {
 public:
  explicit MdMin(MdMinParams p = {}) : p_(p) {}
  VecX displacement(const VecX& x, const VecX& forces) override;
  const VecX& velocity() const { return v_; }

 private:
  MdMinParams p_;
  VecX v_;
};

struct WolfeParams {
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_evaluations = 10;
};

struct LineSearchResult {
  double alpha = 0.0;
  Point point;
  int evaluations = 0;
  bool wolfe = false;       // strong Wolfe conditions met
  bool decreased = false;   // point.energy < start energy
};

/// Strong Wolfe line search along `direction` (bracketing followed by zoom
/// with cubic interpolation). Never evaluates beyond alpha_max.
LineSearchResult wolfe_line_search(const Point& start, const VecX& direction, double alpha0, double alpha_max,
                                   Evaluator& eval, const WolfeParams& params = {});

struct BfgsLineSearchParams {
  double max_step = 0.2;
  double initial_curvature = 70.0;
  WolfeParams wolfe{};
};

/// BFGS on the inverse Hessian with a Wolfe line search along each step.
class BfgsLineSearch final : public Optimizer {
 public:
  explicit BfgsLineSearch(BfgsLineSearchParams p = {}) : p_(p) {}
  Point advance(const Point& current, Evaluator& eval) override;

 private:
  BfgsLineSearchParams p_;
  Eigen::MatrixXd inv_hessian_;
  VecX x0_, f0_;
};

struct CgParams {
  double initial_alpha = 1.0 / 70.0;  // Angstrom^2/eV
  double max_trial_step = 0.2;        // cap on the first trial per atom
  double max_step = 1.0;              // no trial moves an atom further than this
  WolfeParams wolfe{};
};

/// Nonlinear conjugate gradient, Polak-Ribiere (clipped at zero), restarted
/// every 3N iterations or when the direction is not downhill.
class ConjugateGradient final : public Optimizer {
 public:
  explicit ConjugateGradient(CgParams p = {}) : p_(p) {}
  Point advance(const Point& current, Evaluator& eval) override;

 private:
  CgParams p_;
  VecX direction_, f_prev_;
  double alpha_prev_ = 0.0;
  double slope_prev_ = 0.0;
  int since_restart_ = 0;
};

std::unique_ptr<Optimizer> make_optimizer(Method m);

/// Relaxes positions with one of the classical methods (not MACS). The cell is
/// never modified. Success iff the max per-atom force norm reaches fmax within
/// max_steps; the check precedes every step.
RelaxationReport relax(const Structure& s, Method method, Calculator& calc, const TerminationPolicy& tp = {});

/// Up to 250 FIRE steps, then BFGSLS with the remaining budget.
RelaxationReport relax_hybrid(const Structure& s, Calculator& calc, const TerminationPolicy& tp = {},
                              int fire_steps = 250);

}  // namespace periopt
