#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "periopt/crystal.hpp"

namespace periopt::testing {

/// Random cell: a near-cubic cell of edge `edge` with independent shear noise
/// of relative size `skew`. Always right-handed.
inline Lattice random_lattice(std::mt19937_64& rng, double edge, double skew) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    Mat3 m = Mat3::Identity() * edge;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m(r, c) += skew * edge * u(rng);
    }
    if (m.determinant() > 0.2 * edge * edge * edge) return Lattice(m);
  }
}

/// Structure with atoms scattered anywhere in [-1, 2) fractional, i.e. not wrapped.
inline Structure scatter(std::mt19937_64& rng, const Lattice& lattice, int natoms,
                         const std::vector<Species>& species) {
  std::uniform_real_distribution<double> u(-1.0, 2.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(species.size()) - 1);
  Structure s;
  s.lattice = lattice;
  for (int i = 0; i < natoms; ++i) {
    s.add_atom(species[static_cast<std::size_t>(pick(rng))], lattice.to_cartesian(Vec3(u(rng), u(rng), u(rng))));
  }
  return s;
}

/// Random structure whose atoms keep at least `min_dist` apart; each atom is
/// placed by rejection against the ones already placed.
inline Structure scatter_separated(std::mt19937_64& rng, const Lattice& lattice, int natoms,
                                   const std::vector<Species>& species, double min_dist) {
  std::uniform_real_distribution<double> u(-1.0, 2.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(species.size()) - 1);
  for (;;) {
    if (min_image_norm(lattice, Vec3::Zero(), true) < min_dist) throw std::runtime_error("cell too small");
    Structure s;
    s.lattice = lattice;
    bool placed_all = true;
    for (int i = 0; i < natoms && placed_all; ++i) {
      placed_all = false;
      for (int attempt = 0; attempt < 2000; ++attempt) {
        s.add_atom(species[static_cast<std::size_t>(pick(rng))], lattice.to_cartesian(Vec3(u(rng), u(rng), u(rng))));
        bool ok = true;
        for (int j = 0; ok && j < i; ++j) {
          ok = min_periodic_distance(s, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) >= min_dist;
        }
        if (ok) {
          placed_all = true;
          break;
        }
        s.positions.pop_back();
        s.species_index.pop_back();
      }
    }
    if (placed_all) return s;
  }
}

/// FCC conventional cell of edge a repeated reps^3 times.
inline Structure fcc(const Species& sp, double a, int reps) {
  Structure s;
  s.lattice = Lattice::cubic(a * reps);
  const Vec3 basis[4] = {{0, 0, 0}, {0.5, 0.5, 0}, {0.5, 0, 0.5}, {0, 0.5, 0.5}};
  for (int x = 0; x < reps; ++x) {
    for (int y = 0; y < reps; ++y) {
      for (int z = 0; z < reps; ++z) {
        for (const auto& b : basis) s.add_atom(sp, a * (Vec3(x, y, z) + b));
      }
    }
  }
  return s;
}

}  // namespace periopt::testing
