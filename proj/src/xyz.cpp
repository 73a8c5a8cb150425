#include "periopt/xyz.hpp"

#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "periopt/error.hpp"

namespace periopt {

std::map<std::string, std::string> parse_xyz_comment(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  const std::size_t n = line.size();
  while (pos < n) {
    while (pos < n && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos >= n) break;
    std::size_t key_start = pos;
    while (pos < n && line[pos] != '=' && !std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    std::string key = line.substr(key_start, pos - key_start);
    std::string value;
    if (pos < n && line[pos] == '=') {
      ++pos;
      if (pos < n && line[pos] == '"') {
        auto close = line.find('"', pos + 1);
        if (close == std::string::npos) throw FormatError("unterminated quote in xyz comment line");
        value = line.substr(pos + 1, close - pos - 1);
        pos = close + 1;
      } else {
        std::size_t vstart = pos;
        while (pos < n && !std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
        value = line.substr(vstart, pos - vstart);
      }
    }
    kv[key] = value;
  }
  return kv;
}

Structure read_xyz(std::istream& in, const SpeciesTable& table) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("xyz: missing atom count line");
  long count = 0;
  try {
    count = std::stol(line);
  } catch (const std::exception&) {
    throw FormatError("xyz: bad atom count line: " + line);
  }
  if (count < 1) throw FormatError("xyz: atom count must be >= 1");
  if (!std::getline(in, line)) throw FormatError("xyz: missing comment line");
  const auto kv = parse_xyz_comment(line);
  auto lat = kv.find("Lattice");
  if (lat == kv.end()) throw FormatError("xyz: comment line lacks Lattice=\"...\"");
  std::istringstream lin(lat->second);
  Mat3 rows;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (!(lin >> rows(r, c))) throw FormatError("xyz: Lattice needs 9 numbers");
    }
  }
  Structure s;
  s.lattice = Lattice(rows);
  for (long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw FormatError("xyz: expected " + std::to_string(count) + " atom lines");
    std::istringstream fields(line);
    std::string sym;
    Vec3 p;
    if (!(fields >> sym >> p[0] >> p[1] >> p[2])) throw FormatError("xyz: bad atom line: " + line);
    s.add_atom(table.at(sym), p);
  }
  s.validate();
  return s;
}

Structure read_xyz_file(const std::string& path, const SpeciesTable& table) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_xyz(in, table);
}

void write_xyz(std::ostream& out, const Structure& s, const std::map<std::string, std::string>& extra) {
  std::ostringstream buf;
  buf << std::setprecision(17);
  buf << s.size() << "\n";
  buf << "Lattice=\"";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (r || c) buf << ' ';
      buf << s.lattice.matrix()(r, c);
    }
  }
  buf << "\" Properties=species:S:1:pos:R:3";
  for (const auto& [key, value] : extra) {
    buf << ' ' << key << '=';
    if (value.find(' ') != std::string::npos) {
      buf << '"' << value << '"';
    } else {
      buf << value;
    }
  }
  buf << "\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& p = s.positions[i];
    buf << s.symbol(i) << ' ' << p[0] << ' ' << p[1] << ' ' << p[2] << "\n";
  }
  out << buf.str();
}

void write_xyz_file(const std::string& path, const Structure& s, const std::map<std::string, std::string>& extra) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_xyz(out, s, extra);
}

}  // namespace periopt
