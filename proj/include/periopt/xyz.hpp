#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "periopt/crystal.hpp"

namespace periopt {

/// Extended-XYZ reader/writer.
///
///   line 1: atom count
///   line 2: key=value pairs, must include Lattice="a1x a1y a1z a2x ... a3z"
///   then one `Symbol x y z` line per atom (Cartesian Angstrom)
///
/// Species parameters are looked up in `table` by symbol.
Structure read_xyz(std::istream& in, const SpeciesTable& table);
Structure read_xyz_file(const std::string& path, const SpeciesTable& table);

/// Extra key=value pairs are written to the comment line after Lattice and Properties.
void write_xyz(std::ostream& out, const Structure& s, const std::map<std::string, std::string>& extra = {});
void write_xyz_file(const std::string& path, const Structure& s, const std::map<std::string, std::string>& extra = {});

/// Parse the key=value comment line; quoted values may contain spaces.
std::map<std::string, std::string> parse_xyz_comment(const std::string& line);

}  // namespace periopt
