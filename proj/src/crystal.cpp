#include "periopt/crystal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

#include "periopt/error.hpp"

namespace periopt {

namespace {

constexpr double kTieTolerance = 1e-10;

double floor_frac(double x) {
  double f = x - std::floor(x);
  // x slightly below an integer can round up to exactly 1.0
  if (f >= 1.0) f = 0.0;
  return f;
}

bool offset_less(const ImageOffset& a, const ImageOffset& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

/// Visits all offsets with Chebyshev norm exactly `shell`.
template <typename Fn>
void for_each_offset_in_shell(int shell, Fn&& fn) {
  for (int h = -shell; h <= shell; ++h) {
    for (int k = -shell; k <= shell; ++k) {
      for (int l = -shell; l <= shell; ++l) {
        if (std::max({std::abs(h), std::abs(k), std::abs(l)}) != shell) continue;
        fn(ImageOffset{h, k, l});
      }
    }
  }
}

struct Candidate {
  double dist;
  ImageOffset image;
  int atom;
  Vec3 rel;
};

// Exact distance sort, then runs of numerically tied distances are
// re-ordered by (image, atom).
void order_candidates(std::vector<Candidate>& cands) {
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.image != b.image) return offset_less(a.image, b.image);
    return a.atom < b.atom;
  });
  std::size_t start = 0;
  while (start < cands.size()) {
    std::size_t end = start + 1;
    while (end < cands.size() &&
           cands[end].dist - cands[end - 1].dist <= kTieTolerance * std::max(1.0, cands[end].dist)) {
      ++end;
    }
    if (end - start > 1) {
      std::stable_sort(cands.begin() + static_cast<std::ptrdiff_t>(start),
                       cands.begin() + static_cast<std::ptrdiff_t>(end),
                       [](const Candidate& a, const Candidate& b) {
                         if (a.image != b.image) return offset_less(a.image, b.image);
                         return a.atom < b.atom;
                       });
    }
    start = end;
  }
}

}  // namespace

// ---------------------------------------------------------------- Lattice

Lattice::Lattice(const Mat3& rows) : rows_(rows) {
  if (!rows.allFinite()) throw GeometryError("lattice has non-finite entries");
  const double det = rows.determinant();
  if (!(det > 1e-6)) {
    throw GeometryError("degenerate or left-handed lattice (det = " + std::to_string(det) + ")");
  }
  inv_t_ = rows.transpose().inverse();
}

Lattice Lattice::cubic(double a) { return Lattice(Mat3::Identity() * a); }

Lattice Lattice::from_parameters(double a, double b, double c, double alpha, double beta, double gamma) {
  const double deg = std::numbers::pi / 180.0;
  const double ca = std::cos(alpha * deg);
  const double cb = std::cos(beta * deg);
  const double cg = std::cos(gamma * deg);
  const double sg = std::sin(gamma * deg);
  const double cy = (ca - cb * cg) / sg;
  const double cz2 = 1.0 - cb * cb - cy * cy;
  if (!(cz2 > 0.0)) throw GeometryError("cell angles do not form a valid parallelepiped");
  Mat3 rows;
  rows << a, 0.0, 0.0,
          b * cg, b * sg, 0.0,
          c * cb, c * cy, c * std::sqrt(cz2);
  return Lattice(rows);
}

Vec3 Lattice::translation(const ImageOffset& n) const {
  return static_cast<double>(n[0]) * rows_.row(0).transpose() +
         static_cast<double>(n[1]) * rows_.row(1).transpose() +
         static_cast<double>(n[2]) * rows_.row(2).transpose();
}

Vec3 Lattice::plane_spacings() const {
  // Reciprocal vectors are the columns of inv(rows).
  const Mat3 recip = inv_t_.transpose();
  return Vec3(1.0 / recip.col(0).norm(), 1.0 / recip.col(1).norm(), 1.0 / recip.col(2).norm());
}

// ---------------------------------------------------------------- Species

void Species::validate() const {
  if (symbol.empty()) throw Error("species symbol is empty");
  if (!(covalent_radius > 0.0)) throw Error("species " + symbol + ": covalent_radius must be > 0");
  if (!(lj_sigma > 0.0)) throw Error("species " + symbol + ": lj_sigma must be > 0");
  if (!(lj_epsilon > 0.0)) throw Error("species " + symbol + ": lj_epsilon must be > 0");
}

SpeciesTable::SpeciesTable(std::vector<Species> entries) {
  for (const auto& sp : entries) insert(sp);
}

SpeciesTable SpeciesTable::defaults() {
  return SpeciesTable({
      {"Ar", 1.06, 3.40, 0.0104},
      {"Xa", 0.90, 2.80, 0.0200},
      {"Xb", 1.20, 3.10, 0.0150},
  });
}

SpeciesTable SpeciesTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open species file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

SpeciesTable SpeciesTable::parse(std::string_view text) {
  SpeciesTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    Species sp;
    if (!(fields >> sp.symbol)) continue;
    if (!(fields >> sp.lj_sigma >> sp.lj_epsilon >> sp.covalent_radius)) {
      throw FormatError("species file line " + std::to_string(lineno) +
                        ": expected `symbol sigma epsilon covalent_radius`");
    }
    std::string extra;
    if (fields >> extra) throw FormatError("species file line " + std::to_string(lineno) + ": trailing fields");
    table.insert(sp);
  }
  return table;
}

const Species& SpeciesTable::at(std::string_view symbol) const {
  for (const auto& sp : entries_) {
    if (sp.symbol == symbol) return sp;
  }
  throw Error("unknown species: " + std::string(symbol));
}

bool SpeciesTable::contains(std::string_view symbol) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Species& sp) { return sp.symbol == symbol; });
}

void SpeciesTable::insert(const Species& sp) {
  sp.validate();
  for (auto& existing : entries_) {
    if (existing.symbol == sp.symbol) {
      existing = sp;
      return;
    }
  }
  entries_.push_back(sp);
}

// ---------------------------------------------------------------- Structure

void Structure::validate() const {
  if (positions.empty()) throw GeometryError("structure has no atoms");
  if (positions.size() != species_index.size()) throw GeometryError("positions/species length mismatch");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!positions[i].allFinite()) throw GeometryError("non-finite coordinate for atom " + std::to_string(i));
    if (species_index[i] < 0 || static_cast<std::size_t>(species_index[i]) >= species.size()) {
      throw GeometryError("bad species index for atom " + std::to_string(i));
    }
  }
}

void Structure::add_atom(const Species& sp, const Vec3& position) {
  int idx = -1;
  for (std::size_t t = 0; t < species.size(); ++t) {
    if (species[t].symbol == sp.symbol) idx = static_cast<int>(t);
  }
  if (idx < 0) {
    species.push_back(sp);
    idx = static_cast<int>(species.size()) - 1;
  }
  species_index.push_back(idx);
  positions.push_back(position);
}

// ---------------------------------------------------------------- geometry

std::vector<Vec3> wrapped_fractional(const Structure& s) {
  std::vector<Vec3> out;
  out.reserve(s.size());
  for (const auto& p : s.positions) {
    Vec3 f = s.lattice.to_fractional(p);
    for (int a = 0; a < 3; ++a) f[a] = floor_frac(f[a]);
    out.push_back(f);
  }
  return out;
}

Structure wrap_into_cell(const Structure& s) {
  Structure out = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Vec3 f = s.lattice.to_fractional(s.positions[i]);
    ImageOffset shift{};
    for (int a = 0; a < 3; ++a) shift[a] = -static_cast<int>(std::floor(f[a]));
    Vec3 p = s.positions[i] + s.lattice.translation(shift);
    // Guard against rounding pushing a coordinate to exactly 1.
    const Vec3 g = s.lattice.to_fractional(p);
    for (int a = 0; a < 3; ++a) {
      if (g[a] >= 1.0) {
        ImageOffset back{};
        back[a] = -1;
        p += s.lattice.translation(back);
      }
    }
    out.positions[i] = p;
  }
  return out;
}

namespace {

std::vector<Vec3> wrapped_cartesian(const Structure& s) {
  std::vector<Vec3> out;
  out.reserve(s.size());
  for (const auto& f : wrapped_fractional(s)) out.push_back(s.lattice.to_cartesian(f));
  return out;
}

}  // namespace

NeighborList k_nearest(const Structure& s, int k) {
  if (k < 1) throw Error("k_nearest: k must be >= 1");
  s.validate();
  const auto base = wrapped_cartesian(s);
  const double dmin = s.lattice.plane_spacings().minCoeff();
  const int n = static_cast<int>(s.size());

  NeighborList list;
  list.k = k;
  list.atoms.resize(s.size());
  std::vector<Candidate> cands;
  std::vector<double> scratch;
  for (int i = 0; i < n; ++i) {
    cands.clear();
    for (int shell = 0;; ++shell) {
      if (static_cast<int>(cands.size()) >= k) {
        scratch.clear();
        for (const auto& c : cands) scratch.push_back(c.dist);
        std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
        const double kth = scratch[static_cast<std::size_t>(k - 1)];
        const double bound = static_cast<double>(shell - 1) * dmin;
        if (kth + kTieTolerance * std::max(1.0, kth) < bound) break;
      }
      for_each_offset_in_shell(shell, [&](const ImageOffset& off) {
        const Vec3 t = s.lattice.translation(off);
        for (int j = 0; j < n; ++j) {
          if (j == i && shell == 0) continue;
          const Vec3 rel = (base[j] - base[i]) + t;
          cands.push_back({rel.norm(), off, j, rel});
        }
      });
    }
    order_candidates(cands);
    auto& out = list.atoms[i];
    out.reserve(k);
    for (int m = 0; m < k; ++m) {
      const auto& c = cands[m];
      out.push_back({c.atom, c.rel, c.dist, c.image});
    }
  }
  return list;
}

double min_image_norm(const Lattice& lattice, const Vec3& rel, bool exclude_zero) {
  // Reduce to the wrapped representative so the shell bound applies.
  Vec3 f = lattice.to_fractional(rel);
  for (int a = 0; a < 3; ++a) f[a] -= std::floor(f[a]);
  const Vec3 base = lattice.to_cartesian(f);
  const Vec3 zero_image = rel - base;  // lattice translation mapping base back to rel
  const double dmin = lattice.plane_spacings().minCoeff();
  double best = std::numeric_limits<double>::infinity();
  for (int shell = 0;; ++shell) {
    if (best < static_cast<double>(shell - 1) * dmin) break;
    for_each_offset_in_shell(shell, [&](const ImageOffset& off) {
      const Vec3 v = base + lattice.translation(off);
      if (exclude_zero && (v - base - zero_image).norm() < 1e-9 * std::max(1.0, rel.norm())) return;
      best = std::min(best, v.norm());
    });
  }
  return best;
}

double min_periodic_distance(const Structure& s, std::size_t i, std::size_t j) {
  if (i >= s.size() || j >= s.size()) throw Error("min_periodic_distance: atom index out of range");
  if (i == j) return min_image_norm(s.lattice, Vec3::Zero(), true);
  return min_image_norm(s.lattice, s.positions[j] - s.positions[i], false);
}

void for_each_pair_within(const Structure& s, double radius,
                          const std::function<void(int, int, const Vec3&, double)>& visit) {
  const auto base = wrapped_cartesian(s);
  const Vec3 spacing = s.lattice.plane_spacings();
  ImageOffset reach{};
  for (int a = 0; a < 3; ++a) reach[a] = static_cast<int>(std::ceil(radius / spacing[a]));
  const int n = static_cast<int>(s.size());
  for (int h = -reach[0]; h <= reach[0]; ++h) {
    for (int kk = -reach[1]; kk <= reach[1]; ++kk) {
      for (int l = -reach[2]; l <= reach[2]; ++l) {
        const Vec3 t = s.lattice.translation({h, kk, l});
        const bool origin = h == 0 && kk == 0 && l == 0;
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            if (origin && i == j) continue;
            const Vec3 rel = (base[j] - base[i]) + t;
            const double d = rel.norm();
            if (d < radius) visit(i, j, rel, d);
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------- generation

std::pair<Vec3, Vec3> lattice_parameters(const Lattice& lattice) {
  const Vec3 a = lattice.row(0), b = lattice.row(1), c = lattice.row(2);
  const double rad = 180.0 / std::numbers::pi;
  const Vec3 lengths(a.norm(), b.norm(), c.norm());
  const Vec3 angles(std::acos(b.dot(c) / (lengths[1] * lengths[2])) * rad,
                    std::acos(a.dot(c) / (lengths[0] * lengths[2])) * rad,
                    std::acos(a.dot(b) / (lengths[0] * lengths[1])) * rad);
  return {lengths, angles};
}

int total_atoms(const std::vector<std::pair<std::string, int>>& counts) {
  int total = 0;
  for (const auto& [sym, n] : counts) total += n;
  return total;
}

std::vector<std::pair<std::string, int>> parse_composition(std::string_view text) {
  std::vector<std::pair<std::string, int>> out;
  std::string item;
  std::istringstream in{std::string(text)};
  auto strip = [](std::string v) {
    const auto first = v.find_first_not_of(" \t");
    const auto last = v.find_last_not_of(" \t");
    return first == std::string::npos ? std::string() : v.substr(first, last - first + 1);
  };
  while (std::getline(in, item, ',')) {
    item = strip(item);
    if (item.empty()) continue;
    auto sep = item.find_first_of("=:");
    if (sep == std::string::npos) throw FormatError("composition entry needs symbol=count: " + item);
    std::string sym = strip(item.substr(0, sep));
    const std::string num = strip(item.substr(sep + 1));
    int count = 0;
    const auto [end, ec] = std::from_chars(num.data(), num.data() + num.size(), count);
    if (num.empty() || ec != std::errc() || end != num.data() + num.size()) {
      throw FormatError("bad atom count in composition entry: " + item);
    }
    if (sym.empty() || count < 0) throw FormatError("bad composition entry: " + item);
    out.emplace_back(std::move(sym), count);
  }
  if (out.empty()) throw FormatError("empty composition");
  return out;
}

Structure random_structure(const SpeciesTable& table, const RandomStructureRequest& req, std::uint64_t seed) {
  const int natoms = total_atoms(req.counts);
  if (natoms < 1) throw Error("random_structure: need at least one atom");
  if (!(req.target_volume > 0.0)) throw Error("random_structure: target_volume must be > 0");
  if (!(req.min_dist > 0.0)) throw Error("random_structure: min_dist must be > 0");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double edge = std::cbrt(req.target_volume);
  std::optional<Lattice> cell;
  for (int attempt = 0; attempt < req.max_cell_attempts && !cell; ++attempt) {
    const double volume = uniform(0.95, 1.05) * req.target_volume;
    const double a = uniform(0.7, 1.3) * edge;
    const double b = uniform(0.7, 1.3) * edge;
    const double c = uniform(0.7, 1.3) * edge;
    const double alpha = uniform(60.0, 120.0);
    const double beta = uniform(60.0, 120.0);
    const double gamma = uniform(60.0, 120.0);
    try {
      Lattice raw = Lattice::from_parameters(a, b, c, alpha, beta, gamma);
      const double scale = std::cbrt(volume / raw.volume());
      Lattice scaled(raw.matrix() * scale);
      if (min_image_norm(scaled, Vec3::Zero(), true) < req.min_dist) continue;
      cell = scaled;
    } catch (const GeometryError&) {
      continue;
    }
  }
  if (!cell) throw GeometryError("packing infeasible: no admissible cell found");

  Structure s;
  s.lattice = *cell;
  std::vector<Vec3> frac;
  for (const auto& [symbol, count] : req.counts) {
    const Species& sp = table.at(symbol);
    for (int n = 0; n < count; ++n) {
      bool placed = false;
      for (int attempt = 0; attempt < req.max_attempts && !placed; ++attempt) {
        const Vec3 f(unit(rng), unit(rng), unit(rng));
        const Vec3 p = s.lattice.to_cartesian(f);
        placed = std::all_of(s.positions.begin(), s.positions.end(), [&](const Vec3& q) {
          return min_image_norm(s.lattice, p - q) >= req.min_dist;
        });
        if (placed) s.add_atom(sp, p);
      }
      if (!placed) {
        throw GeometryError("packing infeasible: could not place atom " + std::to_string(s.size() + 1) + " of " +
                            std::to_string(natoms));
      }
    }
  }
  return s;
}

}  // namespace periopt
