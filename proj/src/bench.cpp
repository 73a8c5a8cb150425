#include "periopt/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "periopt/error.hpp"
#include "periopt/extcalc.hpp"
#include "periopt/seed.hpp"
#include "periopt/xyz.hpp"

namespace periopt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kTestsetStream = 4;

std::string trim(std::string s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && is_space(s.back())) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && is_space(s[start])) ++start;
  return s.substr(start);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !(in >> std::ws).eof()) throw FormatError("bench spec: bad value for " + key + ": `" + value + "`");
  return out;
}

std::string format_value(double v, int precision) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string index_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04d", index);
  return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

// Filesystem-safe method directory name.
std::string method_dir(const std::string& method) {
  std::string out;
  for (char c : method) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

fs::path report_path(const std::string& output_dir, int size, const std::string& method, int index) {
  return fs::path(output_dir) / "runs" / ("n" + std::to_string(size)) / method_dir(method) / (index_name(index) + ".json");
}

}  // namespace

void BenchmarkSpec::validate() const {
  if (set_size < 1) throw Error("bench spec: set_size must be >= 1");
  if (sizes.empty()) throw Error("bench spec: sizes must not be empty");
  for (int n : sizes) {
    if (n <= 0) throw Error("bench spec: sizes must be positive");
    (void)counts_for(n);
  }
  if (methods.empty()) throw Error("bench spec: no methods");
  if (!(volume_per_atom > 0.0)) throw Error("bench spec: volume_per_atom must be > 0");
  if (!(min_dist > 0.0)) throw Error("bench spec: min_dist must be > 0");
  termination.validate();
}

std::vector<std::pair<std::string, int>> BenchmarkSpec::counts_for(int atoms) const {
  auto base = parse_composition(composition);
  const int k = total_atoms(base);
  if (k <= 0) throw Error("bench spec: empty composition");
  int total = 0;
  for (auto& [symbol, count] : base) {
    const long scaled = static_cast<long>(count) * atoms;
    if (scaled % k != 0) {
      throw Error("bench spec: composition " + composition + " does not scale to " + std::to_string(atoms) + " atoms");
    }
    count = static_cast<int>(scaled / k);
    total += count;
  }
  if (total != atoms) throw Error("bench spec: composition does not scale to " + std::to_string(atoms) + " atoms");
  return base;
}

BenchmarkSpec BenchmarkSpec::parse(std::string_view text) {
  BenchmarkSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("bench spec line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "composition") {
      spec.composition = value;
    } else if (key == "sizes") {
      spec.sizes.clear();
      for (const auto& item : split_list(value)) spec.sizes.push_back(parse_number<int>(key, item));
    } else if (key == "set_size") {
      spec.set_size = parse_number<int>(key, value);
    } else if (key == "methods") {
      spec.methods.clear();
      for (const auto& item : split_list(value)) spec.methods.push_back(parse_method(item));
    } else if (key == "seed") {
      spec.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "calculator") {
      spec.calculator = value;
    } else if (key == "fmax") {
      spec.termination.fmax = parse_number<double>(key, value);
    } else if (key == "max_steps") {
      spec.termination.max_steps = parse_number<int>(key, value);
    } else if (key == "volume_per_atom") {
      spec.volume_per_atom = parse_number<double>(key, value);
    } else if (key == "min_dist") {
      spec.min_dist = parse_number<double>(key, value);
    } else {
      throw FormatError("bench spec line " + std::to_string(lineno) + ": unknown key `" + key + "`");
    }
  }
  spec.validate();
  return spec;
}

BenchmarkSpec BenchmarkSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open bench spec: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string BenchmarkSpec::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "composition = " << composition << "\n";
  out << "sizes = ";
  for (std::size_t i = 0; i < sizes.size(); ++i) out << (i ? ", " : "") << sizes[i];
  out << "\nset_size = " << set_size << "\n";
  out << "methods = ";
  for (std::size_t i = 0; i < methods.size(); ++i) out << (i ? ", " : "") << to_string(methods[i]);
  out << "\nseed = " << seed << "\n";
  out << "calculator = " << calculator << "\n";
  out << "fmax = " << termination.fmax << "\n";
  out << "max_steps = " << termination.max_steps << "\n";
  out << "volume_per_atom = " << volume_per_atom << "\n";
  out << "min_dist = " << min_dist << "\n";
  return out.str();
}

json BenchmarkSpec::to_json() const {
  json methods_json = json::array();
  for (Method m : methods) methods_json.push_back(to_string(m));
  return {{"composition", composition}, {"sizes", sizes},
          {"set_size", set_size},       {"methods", methods_json},
          {"seed", seed},               {"calculator", calculator},
          {"fmax", termination.fmax},   {"max_steps", termination.max_steps},
          {"volume_per_atom", volume_per_atom}, {"min_dist", min_dist}};
}

BenchmarkSpec BenchmarkSpec::from_json(const json& j) {
  BenchmarkSpec spec;
  spec.composition = j.at("composition").get<std::string>();
  spec.sizes = j.at("sizes").get<std::vector<int>>();
  spec.set_size = j.at("set_size").get<int>();
  spec.methods.clear();
  for (const auto& m : j.at("methods")) spec.methods.push_back(parse_method(m.get<std::string>()));
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.calculator = j.at("calculator").get<std::string>();
  spec.termination.fmax = j.at("fmax").get<double>();
  spec.termination.max_steps = j.at("max_steps").get<int>();
  spec.volume_per_atom = j.at("volume_per_atom").get<double>();
  spec.min_dist = j.at("min_dist").get<double>();
  spec.validate();
  return spec;
}

std::optional<std::uint64_t> seed_override() {
  const char* raw = std::getenv("PERIOPT_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string text = trim(raw);
  if (text.empty() || !std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw FormatError("PERIOPT_SEED must be a non-negative integer, got `" + std::string(raw) + "`");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw FormatError("PERIOPT_SEED out of range: " + text);
  }
}

std::vector<int> Testset::sizes() const {
  std::set<int> s;
  for (const auto& e : entries) s.insert(e.size);
  return {s.begin(), s.end()};
}

std::vector<TestsetEntry> Testset::entries_of_size(int size) const {
  std::vector<TestsetEntry> out;
  for (const auto& e : entries) {
    if (e.size == size) out.push_back(e);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  return out;
}

Structure Testset::load(const TestsetEntry& e, const SpeciesTable& table) const {
  return read_xyz_file((fs::path(directory) / e.file).string(), table);
}

std::uint64_t testset_structure_seed(std::uint64_t base, int size, int index) {
  return derive_seed(derive_seed(base, kTestsetStream, static_cast<std::uint64_t>(size)), 0,
                     static_cast<std::uint64_t>(index));
}

Testset gen_testset(const BenchmarkSpec& spec, const SpeciesTable& table, const std::string& directory) {
  spec.validate();
  Testset ts;
  ts.directory = directory;
  ts.spec = spec;
  json entries = json::array();
  for (int size : spec.sizes) {
    RandomStructureRequest req;
    req.counts = spec.counts_for(size);
    req.target_volume = spec.volume_per_atom * size;
    req.min_dist = spec.min_dist;
    for (int i = 0; i < spec.set_size; ++i) {
      TestsetEntry e;
      e.size = size;
      e.index = i;
      e.seed = testset_structure_seed(spec.seed, size, i);
      e.file = "n" + std::to_string(size) + "/" + index_name(i) + ".xyz";
      const Structure s = random_structure(table, req, e.seed);
      fs::create_directories(fs::path(directory) / ("n" + std::to_string(size)));
      write_xyz_file((fs::path(directory) / e.file).string(), s, {{"seed", std::to_string(e.seed)}});
      entries.push_back({{"size", e.size}, {"index", e.index}, {"seed", e.seed}, {"file", e.file}});
      ts.entries.push_back(e);
    }
  }
  json manifest = {{"format", "periopt-testset"}, {"version", 1}, {"spec", spec.to_json()}, {"entries", entries}};
  write_text_file(fs::path(directory) / "manifest.json", manifest.dump(1) + "\n");
  return ts;
}

Testset load_testset(const std::string& directory) {
  const fs::path path = fs::path(directory) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Testset ts;
  ts.directory = directory;
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format") != "periopt-testset") throw FormatError("not a test set manifest: " + path.string());
    ts.spec = BenchmarkSpec::from_json(manifest.at("spec"));
    for (const auto& e : manifest.at("entries")) {
      ts.entries.push_back({e.at("size").get<int>(), e.at("index").get<int>(), e.at("seed").get<std::uint64_t>(),
                            e.at("file").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
  return ts;
}

std::pair<double, double> mean_and_stderr(const std::vector<double>& xs) {
  if (xs.empty()) return {kNaN, kNaN};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double n = static_cast<double>(xs.size());
  const double mean = sum / n;
  if (xs.size() < 2) return {mean, kNaN};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

MetricsRow compute_metrics(const std::string& method, const std::vector<RelaxationReport>& reports) {
  MetricsRow row;
  row.method = method;
  row.runs = static_cast<int>(reports.size());
  std::vector<double> t, n, c;
  for (const auto& r : reports) {
    if (!r.success) continue;
    t.push_back(r.wall_time);
    n.push_back(r.steps);
    c.push_back(static_cast<double>(r.energy_calls));
  }
  row.successes = static_cast<int>(n.size());
  std::tie(row.t_mean, row.t_se) = mean_and_stderr(t);
  std::tie(row.n_mean, row.n_se) = mean_and_stderr(n);
  std::tie(row.c_mean, row.c_se) = mean_and_stderr(c);
  row.p_f = row.runs == 0 ? kNaN : 100.0 * (row.runs - row.successes) / row.runs;
  return row;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows, bool include_timing) {
  out << "method,T_mean,T_se,N_mean,N_se,C_mean,C_se,P_F\n";
  for (const auto& r : rows) {
    out << r.method << ',' << (include_timing ? format_value(r.t_mean, 6) : "NA") << ','
        << (include_timing ? format_value(r.t_se, 6) : "NA") << ',' << format_value(r.n_mean, 3) << ','
        << format_value(r.n_se, 3) << ',' << format_value(r.c_mean, 3) << ',' << format_value(r.c_se, 3) << ','
        << format_value(r.p_f, 2) << '\n';
  }
}

std::vector<BenchResult> run_bench(const Testset& testset, const SpeciesTable& table, const BenchOptions& opts) {
  const BenchmarkSpec& spec = testset.spec;
  spec.validate();
  if (opts.output_dir.empty()) throw Error("bench: output directory required");
  const bool wants_macs = std::find(spec.methods.begin(), spec.methods.end(), Method::MACS) != spec.methods.end();
  if (wants_macs && !opts.policy) throw Error("bench: MACS requires a checkpoint");
  const int jobs = std::max(1, opts.jobs);

  std::vector<BenchResult> results;
  for (int size : testset.sizes()) {
    const auto entries = testset.entries_of_size(size);
    std::vector<Structure> structures;
    structures.reserve(entries.size());
    for (const auto& e : entries) structures.push_back(testset.load(e, table));

    BenchResult result;
    result.size = size;
    for (Method method : spec.methods) {
      const std::string name = to_string(method);
      std::vector<RelaxationReport> reports(structures.size());
      std::atomic<std::size_t> next{0};
      std::mutex err_mu;
      std::exception_ptr first_error;
      auto worker = [&] {
        try {
          auto calc = make_calculator(spec.calculator);
          for (std::size_t i = next++; i < structures.size(); i = next++) {
            reports[i] = method == Method::MACS ? relax_macs(structures[i], *opts.policy, *calc, spec.termination)
                                                : relax(structures[i], method, *calc, spec.termination);
          }
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          next = structures.size();
        }
      };
      if (jobs == 1) {
        worker();
      } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
      }
      if (first_error) std::rethrow_exception(first_error);

      for (std::size_t i = 0; i < reports.size(); ++i) {
        write_text_file(report_path(opts.output_dir, size, name, entries[i].index), to_json(reports[i]).dump(1) + "\n");
      }
      result.rows.push_back(compute_metrics(name, reports));
      if (opts.progress) {
        const auto& row = result.rows.back();
        *opts.progress << "n=" << size << ' ' << name << ": " << row.successes << '/' << row.runs << " converged\n";
      }
    }
    result.csv_path = (fs::path(opts.output_dir) / ("metrics_n" + std::to_string(size) + ".csv")).string();
    std::ostringstream csv;
    write_metrics_csv(csv, result.rows, opts.include_timing);
    write_text_file(result.csv_path, csv.str());
    results.push_back(std::move(result));
  }
  return results;
}

std::vector<RelaxationReport> load_run_reports(const std::string& output_dir, int size, const std::string& method,
                                               const SpeciesTable& table) {
  const fs::path dir = fs::path(output_dir) / "runs" / ("n" + std::to_string(size)) / method_dir(method);
  if (!fs::is_directory(dir)) throw Error("no reports under " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RelaxationReport> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    try {
      out.push_back(report_from_json(json::parse(in), table));
    } catch (const json::exception& e) {
      throw FormatError("malformed report " + f.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<TraceRow> energy_traces(const std::vector<std::pair<std::string, std::vector<RelaxationReport>>>& by_method,
                                    std::vector<std::string>* warnings) {
  std::vector<TraceRow> rows;
  for (const auto& [method, reports] : by_method) {
    std::size_t len = 0;
    int successes = 0;
    for (const auto& r : reports) {
      if (r.success && !r.energy_trace.empty()) {
        len = std::max(len, r.energy_trace.size());
        ++successes;
      }
    }
    if (successes == 0) {
      if (warnings) warnings->push_back("no successful runs for " + method + "; trace omitted");
      continue;
    }
    TraceRow row;
    row.method = method;
    row.runs = successes;
    row.mean_energy.assign(len, 0.0);
    for (const auto& r : reports) {
      if (!r.success || r.energy_trace.empty()) continue;
      for (std::size_t k = 0; k < len; ++k) {
        row.mean_energy[k] += k < r.energy_trace.size() ? r.energy_trace[k] : r.energy_trace.back();
      }
    }
    for (double& e : row.mean_energy) e /= successes;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_traces_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
  out << "method,step,mean_energy,runs\n";
  char buf[64];
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < r.mean_energy.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.10f", r.mean_energy[k]);
      out << r.method << ',' << k << ',' << buf << ',' << r.runs << '\n';
    }
  }
}

std::vector<HistogramRow> minima_histogram(
    const std::vector<std::pair<std::string, std::vector<RelaxationReport>>>& by_method, int bins) {
  if (bins < 1) throw Error("histogram: bins must be >= 1");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [method, reports] : by_method) {
    for (const auto& r : reports) {
      if (!r.success || r.energy_trace.empty()) continue;
      lo = std::min(lo, r.energy_trace.back());
      hi = std::max(hi, r.energy_trace.back());
    }
  }
  std::vector<HistogramRow> rows;
  if (!std::isfinite(lo)) return rows;
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  for (const auto& [method, reports] : by_method) {
    std::vector<int> counts(bins, 0);
    for (const auto& r : reports) {
      if (!r.success || r.energy_trace.empty()) continue;
      int b = hi > lo ? static_cast<int>((r.energy_trace.back() - lo) / width) : 0;
      counts[std::clamp(b, 0, bins - 1)]++;
    }
    for (int b = 0; b < bins; ++b) rows.push_back({method, lo + b * width, lo + (b + 1) * width, counts[b]});
  }
  return rows;
}

void write_histogram_csv(std::ostream& out, const std::vector<HistogramRow>& rows) {
  out << "method,bin_lo,bin_hi,count\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.10f,%.10f", r.lo, r.hi);
    out << r.method << ',' << buf << ',' << r.count << '\n';
  }
}

}  // namespace periopt
