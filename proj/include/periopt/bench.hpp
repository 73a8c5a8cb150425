#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "periopt/optimizers.hpp"
#include "periopt/sac.hpp"

namespace periopt {

/// What to generate and which methods to compare.
struct BenchmarkSpec {
  std::string composition = "Ar=8";      // base composition; its atom count is K
  std::vector<int> sizes = {8, 12, 16};  // atom counts of the test sets
  int set_size = 300;
  std::vector<Method> methods = classical_methods();
  std::uint64_t seed = 0;
  std::string calculator = "lj";
  TerminationPolicy termination;
  double volume_per_atom = 40.0;         // Angstrom^3
  double min_dist = 2.8;                 // Angstrom

  void validate() const;
  /// Species counts for an `atoms`-atom member of the family. Counts scale
  /// with the base composition and must come out integral.
  std::vector<std::pair<std::string, int>> counts_for(int atoms) const;

  /// `key = value` lines, `#` comments. Lists are comma separated.
  static BenchmarkSpec parse(std::string_view text);
  static BenchmarkSpec load(const std::string& path);
  std::string to_text() const;
  nlohmann::json to_json() const;
  static BenchmarkSpec from_json(const nlohmann::json& j);
  bool operator==(const BenchmarkSpec&) const = default;
};

/// PERIOPT_SEED, when set. Throws FormatError on a malformed value.
std::optional<std::uint64_t> seed_override();

struct TestsetEntry {
  int size = 0;
  int index = 0;
  std::uint64_t seed = 0;
  std::string file;     // relative to the test set directory
};

struct Testset {
  std::string directory;
  BenchmarkSpec spec;
  std::vector<TestsetEntry> entries;

  std::vector<int> sizes() const;
  std::vector<TestsetEntry> entries_of_size(int size) const;
  Structure load(const TestsetEntry& e, const SpeciesTable& table) const;
};

/// Seed of structure `index` of the `size`-atom set.
std::uint64_t testset_structure_seed(std::uint64_t base, int size, int index);

/// Writes `n<size>/s<index>.xyz` files and manifest.json under `directory`.
Testset gen_testset(const BenchmarkSpec& spec, const SpeciesTable& table, const std::string& directory);
/// Reads manifest.json. Throws FormatError on a malformed manifest.
Testset load_testset(const std::string& directory);

struct MetricsRow {
  std::string method;
  int runs = 0;
  int successes = 0;
  // Means and standard errors over successful runs; NaN when undefined.
  double t_mean = 0.0, t_se = 0.0;
  double n_mean = 0.0, n_se = 0.0;
  double c_mean = 0.0, c_se = 0.0;
  double p_f = 0.0;   // percent of all runs
};

/// Mean and sample-stddev/sqrt(n) standard error. n == 0 gives NaN for both,
/// n == 1 a NaN standard error.
std::pair<double, double> mean_and_stderr(const std::vector<double>& xs);

MetricsRow compute_metrics(const std::string& method, const std::vector<RelaxationReport>& reports);

/// Header plus one line per row. `include_timing == false` writes NA in the
/// wall-time columns so the file depends on the inputs only.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows, bool include_timing = true);

struct BenchOptions {
  std::string output_dir;
  int jobs = 1;                  // structures relaxed concurrently
  bool include_timing = true;
  std::optional<Policy> policy;  // required when MACS is requested
  std::ostream* progress = nullptr;
};

struct BenchResult {
  int size = 0;
  std::vector<MetricsRow> rows;
  std::string csv_path;
};

/// Relaxes every structure with every method. Writes per-run reports to
/// `<out>/runs/n<size>/<method>/s<index>.json` and metrics to
/// `<out>/metrics_n<size>.csv`.
std::vector<BenchResult> run_bench(const Testset& testset, const SpeciesTable& table, const BenchOptions& opts);

/// Reports previously written by run_bench for one set and method, in index order.
std::vector<RelaxationReport> load_run_reports(const std::string& output_dir, int size, const std::string& method,
                                               const SpeciesTable& table);

struct TraceRow {
  std::string method;
  std::vector<double> mean_energy;   // per step, successful runs only
  int runs = 0;
};

/// Averages energy traces over successful runs; shorter traces carry their
/// final energy forward. Methods without successes are left out and named in
/// `warnings`.
std::vector<TraceRow> energy_traces(const std::vector<std::pair<std::string, std::vector<RelaxationReport>>>& by_method,
                                    std::vector<std::string>* warnings = nullptr);
/// Long format: method,step,mean_energy,runs.
void write_traces_csv(std::ostream& out, const std::vector<TraceRow>& rows);

struct HistogramRow {
  std::string method;
  double lo = 0.0, hi = 0.0;
  int count = 0;
};

/// Final energies of successful runs binned on edges shared by all methods.
std::vector<HistogramRow> minima_histogram(
    const std::vector<std::pair<std::string, std::vector<RelaxationReport>>>& by_method, int bins);
void write_histogram_csv(std::ostream& out, const std::vector<HistogramRow>& rows);

}  // namespace periopt
