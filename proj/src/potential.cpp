#include "periopt/potential.hpp"

#include <algorithm>
#include <cmath>

#include "periopt/error.hpp"

namespace periopt {

namespace {

constexpr double kOverlap = 1e-6;

double lj(double r, double sigma, double epsilon) {
  const double s6 = std::pow(sigma / r, 6);
  return 4.0 * epsilon * (s6 * s6 - s6);
}

double lj_derivative(double r, double sigma, double epsilon) {
  const double s6 = std::pow(sigma / r, 6);
  return 4.0 * epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r;
}

}  // namespace

double pair_energy(double r, double sigma, double epsilon, double rc) {
  if (r >= rc) return 0.0;
  return lj(r, sigma, epsilon) - lj(rc, sigma, epsilon) - (r - rc) * lj_derivative(rc, sigma, epsilon);
}

double pair_energy_derivative(double r, double sigma, double epsilon, double rc) {
  if (r >= rc) return 0.0;
  return lj_derivative(r, sigma, epsilon) - lj_derivative(rc, sigma, epsilon);
}

PairParams mix(const Species& a, const Species& b) {
  return {0.5 * (a.lj_sigma + b.lj_sigma), std::sqrt(a.lj_epsilon * b.lj_epsilon)};
}

double LennardJones::cutoff_for(const Structure& s) const {
  if (cutoff_) return *cutoff_;
  // Only species that atoms actually use; a registered but unused species
  // must not change the energy.
  double sigma = 0.0;
  for (int idx : s.species_index) sigma = std::max(sigma, s.species[static_cast<std::size_t>(idx)].lj_sigma);
  return 2.5 * sigma;
}

CalcResult LennardJones::compute(const Structure& s) {
  s.validate();
  const double rc = cutoff_for(s);
  const std::size_t nspecies = s.species.size();
  std::vector<PairParams> params(nspecies * nspecies);
  for (std::size_t a = 0; a < nspecies; ++a) {
    for (std::size_t b = 0; b < nspecies; ++b) params[a * nspecies + b] = mix(s.species[a], s.species[b]);
  }

  CalcResult out;
  out.forces.assign(s.size(), Vec3::Zero());
  double energy = 0.0;
  for_each_pair_within(s, rc, [&](int i, int j, const Vec3& rel, double d) {
    if (d < kOverlap) {
      throw CalculatorError("atomic overlap between atoms " + std::to_string(i) + " and " + std::to_string(j));
    }
    const auto& p = params[static_cast<std::size_t>(s.species_index[i]) * nspecies + s.species_index[j]];
    energy += 0.5 * pair_energy(d, p.sigma, p.epsilon, rc);
    // rel points from i to the image of j; moving i along rel shortens the pair.
    out.forces[i] += pair_energy_derivative(d, p.sigma, p.epsilon, rc) * (rel / d);
  });
  out.energy = energy;
  return out;
}

double max_force_norm(const std::vector<Vec3>& forces) {
  double m = 0.0;
  for (const auto& f : forces) m = std::max(m, f.norm());
  return m;
}

}  // namespace periopt
