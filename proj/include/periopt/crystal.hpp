#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace periopt {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Integer lattice translation (h, k, l).
using ImageOffset = std::array<int, 3>;

/// Unit cell given by three row vectors a1, a2, a3 (Angstrom).
///
/// Cartesian and fractional coordinates are related by
/// cart = f0 * a1 + f1 * a2 + f2 * a3.
class Lattice {
 public:
  /// Throws GeometryError unless det(rows) > 1e-6.
  explicit Lattice(const Mat3& rows);

  static Lattice cubic(double a);
  /// Cell from edge lengths (Angstrom) and angles alpha, beta, gamma (degrees).
  static Lattice from_parameters(double a, double b, double c, double alpha, double beta, double gamma);

  const Mat3& matrix() const { return rows_; }
  Vec3 row(int i) const { return rows_.row(i).transpose(); }
  double volume() const { return rows_.determinant(); }

  Vec3 to_fractional(const Vec3& cart) const { return inv_t_ * cart; }
  Vec3 to_cartesian(const Vec3& frac) const { return rows_.transpose() * frac; }
  Vec3 translation(const ImageOffset& n) const;

  /// Distances between adjacent lattice planes of each family (100), (010), (001).
  Vec3 plane_spacings() const;

  bool operator==(const Lattice& other) const { return rows_ == other.rows_; }

 private:
  Mat3 rows_;
  Mat3 inv_t_;
};

struct Species {
  std::string symbol;
  double covalent_radius = 1.0;  // Angstrom
  double lj_sigma = 1.0;         // Angstrom
  double lj_epsilon = 1.0;       // eV

  void validate() const;
  bool operator==(const Species&) const = default;
};

/// Symbol-indexed collection of species parameters.
class SpeciesTable {
 public:
  SpeciesTable() = default;
  explicit SpeciesTable(std::vector<Species> entries);

  /// Ar-like LJ parameters plus two synthetic species for mixed-species work.
  static SpeciesTable defaults();

  /// Plain-text table: one `symbol sigma epsilon covalent_radius` record per
  /// line; `#` starts a comment.
  static SpeciesTable load(const std::string& path);
  static SpeciesTable parse(std::string_view text);

  const Species& at(std::string_view symbol) const;
  bool contains(std::string_view symbol) const;
  void insert(const Species& sp);
  const std::vector<Species>& entries() const { return entries_; }

 private:
  std::vector<Species> entries_;
};

/// Periodic atomic structure. Positions are Cartesian and need not lie inside
/// the cell.
struct Structure {
  Lattice lattice = Lattice::cubic(1.0);
  std::vector<Species> species;      // species present, indexed by species_index
  std::vector<int> species_index;    // per atom
  std::vector<Vec3> positions;       // per atom, Angstrom

  std::size_t size() const { return positions.size(); }
  const Species& species_of(std::size_t atom) const { return species[species_index[atom]]; }
  const std::string& symbol(std::size_t atom) const { return species_of(atom).symbol; }

  /// Throws GeometryError on inconsistent sizes, bad indices or non-finite coordinates.
  void validate() const;

  /// Append an atom of the given species, registering the species if new.
  void add_atom(const Species& sp, const Vec3& position);
};

struct NeighborEntry {
  int atom = 0;           // index of the neighbor atom
  Vec3 rel_vec;           // neighbor image position minus central atom position
  double dist = 0.0;
  ImageOffset image{};    // lattice offset relative to the wrapped cell
};

struct NeighborList {
  int k = 0;
  std::vector<std::vector<NeighborEntry>> atoms;

  const std::vector<NeighborEntry>& of(std::size_t i) const { return atoms[i]; }
};

/// Translate every atom by lattice vectors so that its fractional coordinates lie in [0, 1).
Structure wrap_into_cell(const Structure& s);

/// Fractional coordinates in [0, 1) for every atom.
std::vector<Vec3> wrapped_fractional(const Structure& s);

/// The k closest periodic images of all atoms around each atom, excluding the
/// zero-distance self image. Ordered by distance; exact ties are broken by
/// image offset (lexicographic, relative to the wrapped cell) and then atom index.
NeighborList k_nearest(const Structure& s, int k);

/// Minimum distance between atom i and any periodic image of atom j. For i == j
/// the (0,0,0) image is excluded.
double min_periodic_distance(const Structure& s, std::size_t i, std::size_t j);

/// Shortest Cartesian length of rel + T over all lattice translations T.
/// With exclude_zero the untranslated vector is skipped (self-image search).
double min_image_norm(const Lattice& lattice, const Vec3& rel, bool exclude_zero = false);

/// Visit every ordered pair (i, j, image) with 0 < |rel| < radius, where
/// rel = r_j + T - r_i. Each unordered pair is visited twice.
void for_each_pair_within(const Structure& s, double radius,
                          const std::function<void(int i, int j, const Vec3& rel, double dist)>& visit);

struct RandomStructureRequest {
  std::vector<std::pair<std::string, int>> counts;  // symbol -> atom count
  double target_volume = 0.0;                       // Angstrom^3
  double min_dist = 1.0;                            // Angstrom
  int max_attempts = 5000;                          // per atom
  int max_cell_attempts = 1000;
};

/// Random cell with volume uniform in [0.95 v, 1.05 v] and atoms placed at
/// random with every periodic pair distance >= min_dist. Throws GeometryError
/// "packing infeasible" when an atom cannot be placed.
Structure random_structure(const SpeciesTable& table, const RandomStructureRequest& req, std::uint64_t seed);

/// Lattice vector lengths (a, b, c) and angles (alpha, beta, gamma) in degrees.
std::pair<Vec3, Vec3> lattice_parameters(const Lattice& lattice);

/// Total atom count of a composition request.
int total_atoms(const std::vector<std::pair<std::string, int>>& counts);

/// Parse "Ar=4,Xa=2" (also accepts ':' as separator) into ordered counts.
std::vector<std::pair<std::string, int>> parse_composition(std::string_view text);

}  // namespace periopt
