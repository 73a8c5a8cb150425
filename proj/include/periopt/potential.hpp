#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <vector>

#include "periopt/crystal.hpp"

namespace periopt {

struct CalcResult {
  double energy = 0.0;         // eV, per unit cell
  std::vector<Vec3> forces;    // eV/Angstrom, per atom
  int call_count_delta = 1;
};

/// Energy/force provider. Every evaluate() call counts towards total_calls().
class Calculator {
 public:
  virtual ~Calculator() = default;

  CalcResult evaluate(const Structure& s) {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return compute(s);
  }

  std::uint64_t total_calls() const { return calls_.load(std::memory_order_relaxed); }

 protected:
  virtual CalcResult compute(const Structure& s) = 0;

 private:
  std::atomic<std::uint64_t> calls_{0};
};

/// Force-shifted Lennard-Jones pair energy:
/// V(r) - V(rc) - (r - rc) V'(rc) for r < rc, 0 beyond.
double pair_energy(double r, double sigma, double epsilon, double rc);

/// dV_fs/dr for the same potential.
double pair_energy_derivative(double r, double sigma, double epsilon, double rc);

/// Lorentz-Berthelot combination of two species.
struct PairParams {
  double sigma;
  double epsilon;
};
PairParams mix(const Species& a, const Species& b);

/// Periodic force-shifted LJ lattice sum over every pair image closer than the cutoff.
class LennardJones final : public Calculator {
 public:
  /// Without an explicit cutoff, rc = 2.5 * max sigma over the species the atoms use.
  explicit LennardJones(std::optional<double> cutoff = std::nullopt) : cutoff_(cutoff) {}

  double cutoff_for(const Structure& s) const;

 protected:
  CalcResult compute(const Structure& s) override;

 private:
  std::optional<double> cutoff_;
};

/// Largest per-atom force norm.
double max_force_norm(const std::vector<Vec3>& forces);

}  // namespace periopt
