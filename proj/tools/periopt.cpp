// periopt: test-set generation, relaxation, MACS training/evaluation and
// benchmarking from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "periopt/bench.hpp"
#include "periopt/error.hpp"
#include "periopt/extcalc.hpp"
#include "periopt/sac.hpp"
#include "periopt/xyz.hpp"

namespace fs = std::filesystem;
using namespace periopt;

namespace {

SpeciesTable species_table(const std::string& path) {
  return path.empty() ? SpeciesTable::defaults() : SpeciesTable::load(path);
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(1) << "\n";
}

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct Common {
  std::string species;
};

// --- gen --------------------------------------------------------------------

struct GenArgs {
  std::string spec_path, out;
  std::string composition;
  std::vector<int> sizes;
  int set_size = 0;
  std::optional<std::uint64_t> seed;
};

int run_gen(const Common& common, const GenArgs& a) {
  BenchmarkSpec spec = a.spec_path.empty() ? BenchmarkSpec{} : BenchmarkSpec::load(a.spec_path);
  if (!a.composition.empty()) spec.composition = a.composition;
  if (!a.sizes.empty()) spec.sizes = a.sizes;
  if (a.set_size > 0) spec.set_size = a.set_size;
  if (a.seed) spec.seed = *a.seed;
  if (auto s = seed_override()) spec.seed = *s;
  const auto ts = gen_testset(spec, species_table(common.species), a.out);
  std::cout << "wrote " << ts.entries.size() << " structures (sizes " << join(spec.sizes) << ") to " << a.out << "\n";
  return 0;
}

// --- relax ------------------------------------------------------------------

struct RelaxArgs {
  std::string in, method = "BFGS", calculator = "lj", out, report, checkpoint;
  double fmax = 0.05;
  int max_steps = 1000;
};

int run_relax(const Common& common, const RelaxArgs& a) {
  const SpeciesTable table = species_table(common.species);
  const Structure s = read_xyz_file(a.in, table);
  TerminationPolicy tp{a.fmax, a.max_steps};
  tp.validate();
  const Method method = parse_method(a.method);
  auto calc = make_calculator(a.calculator);
  RelaxationReport rep;
  if (method == Method::MACS) {
    if (a.checkpoint.empty()) throw Error("relax: MACS needs --checkpoint");
    const Policy policy = load_checkpoint(a.checkpoint).policy();
    rep = relax_macs(s, policy, *calc, tp);
  } else {
    rep = relax(s, method, *calc, tp);
  }
  if (!a.out.empty()) {
    ensure_parent(a.out);
    write_xyz_file(a.out, rep.final_structure, {{"energy", std::to_string(rep.energy_trace.back())}});
  }
  if (!a.report.empty()) write_json_file(a.report, to_json(rep));
  std::cout << rep.method << ": " << (rep.success ? "converged" : "not converged") << " after " << rep.steps
            << " steps, " << rep.energy_calls << " energy calls, fmax " << rep.final_fmax << " eV/A";
  if (!rep.failure_reason.empty()) std::cout << " (" << rep.failure_reason << ")";
  std::cout << "\n";
  return rep.success ? 0 : 2;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, env, out = "macs.ckpt", log, resume, calculator = "lj";
  long rounds = 0, episodes = 0;
};

int run_train(const Common& common, const TrainArgs& a) {
  const SpeciesTable table = species_table(common.species);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainerConfig cfg = resume ? resume->trainer : TrainerConfig{};
  if (!a.config.empty()) cfg = TrainerConfig::load(a.config);
  EnvConfig env = resume ? resume->env : EnvConfig{};
  if (!a.env.empty()) env = EnvConfig::load(a.env);
  if (auto s = seed_override()) cfg.seed = *s;
  if (a.rounds > 0) cfg.total_rounds = a.rounds;
  if (a.episodes > 0) cfg.max_episodes = a.episodes;
  cfg.validate();
  env.validate();

  const std::string calc_spec = a.calculator;
  SacTrainer trainer(env, cfg, random_structure_source(table, cfg), [calc_spec] { return make_calculator(calc_spec); });
  if (resume) trainer.restore(*resume);

  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!a.log.empty()) {
    ensure_parent(a.log);
    log_file.open(a.log, resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw Error("cannot write " + a.log);
    log = &log_file;
  }
  ensure_parent(a.out);
  trainer.run(log, a.out);
  std::cerr << "trained " << trainer.rounds() << " rounds, " << trainer.episodes().size() << " episodes; checkpoint "
            << a.out << "\n";
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, testset, calculator = "lj", composition, report;
  int size = 0, count = 50;
  std::uint64_t seed = 1;
  double fmax = 0.05;
  int max_steps = 1000;
};

int run_eval(const Common& common, const EvalArgs& a) {
  const SpeciesTable table = species_table(common.species);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Policy policy = ckpt.policy();
  TerminationPolicy tp{a.fmax, a.max_steps};
  tp.validate();

  std::vector<Structure> structures;
  if (!a.testset.empty()) {
    const Testset ts = load_testset(a.testset);
    for (const auto& e : ts.entries) {
      if (a.size == 0 || e.size == a.size) structures.push_back(ts.load(e, table));
    }
  } else {
    BenchmarkSpec spec;
    spec.composition = a.composition.empty() ? ckpt.trainer.composition : a.composition;
    spec.volume_per_atom = ckpt.trainer.volume_per_atom;
    spec.min_dist = ckpt.trainer.min_dist;
    const int atoms = a.size > 0 ? a.size : total_atoms(parse_composition(spec.composition));
    RandomStructureRequest req{spec.counts_for(atoms), spec.volume_per_atom * atoms, spec.min_dist};
    std::uint64_t seed = a.seed;
    if (auto s = seed_override()) seed = *s;
    for (int i = 0; i < a.count; ++i) structures.push_back(random_structure(table, req, testset_structure_seed(seed, atoms, i)));
  }
  if (structures.empty()) throw Error("eval: no structures selected");

  auto calc = make_calculator(a.calculator);
  std::vector<RelaxationReport> reports;
  for (const auto& s : structures) reports.push_back(relax_macs(s, policy, *calc, tp));
  const MetricsRow row = compute_metrics("MACS", reports);
  write_metrics_csv(std::cout, {row});
  std::cerr << row.successes << "/" << row.runs << " converged\n";
  if (!a.report.empty()) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : reports) runs.push_back(to_json(r));
    write_json_file(a.report, runs);
  }
  return 0;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  std::string spec_path, testset, out = "bench_out", checkpoint, calculator;
  std::vector<std::string> methods;
  int jobs = 1;
  bool omit_timing = false;
};

int run_bench_cmd(const Common& common, const BenchArgs& a) {
  const SpeciesTable table = species_table(common.species);
  Testset ts;
  if (!a.testset.empty() && fs::exists(fs::path(a.testset) / "manifest.json")) {
    ts = load_testset(a.testset);
  } else {
    BenchmarkSpec spec = a.spec_path.empty() ? BenchmarkSpec{} : BenchmarkSpec::load(a.spec_path);
    if (auto s = seed_override()) spec.seed = *s;
    const std::string dir = a.testset.empty() ? (fs::path(a.out) / "testset").string() : a.testset;
    ts = gen_testset(spec, table, dir);
  }
  if (!a.methods.empty()) {
    ts.spec.methods.clear();
    for (const auto& m : a.methods) ts.spec.methods.push_back(parse_method(m));
  }
  if (!a.calculator.empty()) ts.spec.calculator = a.calculator;

  BenchOptions opts;
  opts.output_dir = a.out;
  opts.jobs = a.jobs;
  opts.include_timing = !a.omit_timing;
  opts.progress = &std::cerr;
  if (!a.checkpoint.empty()) opts.policy = load_checkpoint(a.checkpoint).policy();
  for (const auto& r : run_bench(ts, table, opts)) {
    std::cout << "# n=" << r.size << " -> " << r.csv_path << "\n";
    write_metrics_csv(std::cout, r.rows, opts.include_timing);
  }
  return 0;
}

// --- traces -----------------------------------------------------------------

struct TracesArgs {
  std::string runs, out, histogram;
  int size = 0, bins = 20;
  std::vector<std::string> methods;
};

int run_traces(const Common& common, const TracesArgs& a) {
  const SpeciesTable table = species_table(common.species);
  std::vector<std::string> methods = a.methods;
  if (methods.empty()) {
    const fs::path dir = fs::path(a.runs) / "runs" / ("n" + std::to_string(a.size));
    if (!fs::is_directory(dir)) throw Error("no runs under " + dir.string());
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory()) methods.push_back(e.path().filename().string());
    }
    std::sort(methods.begin(), methods.end());
  }
  std::vector<std::pair<std::string, std::vector<RelaxationReport>>> by_method;
  for (const auto& m : methods) by_method.emplace_back(m, load_run_reports(a.runs, a.size, m, table));

  std::vector<std::string> warnings;
  const auto rows = energy_traces(by_method, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  if (a.out.empty()) {
    write_traces_csv(std::cout, rows);
  } else {
    ensure_parent(a.out);
    std::ofstream out(a.out);
    write_traces_csv(out, rows);
  }
  if (!a.histogram.empty()) {
    ensure_parent(a.histogram);
    std::ofstream out(a.histogram);
    write_histogram_csv(out, minima_histogram(by_method, a.bins));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Periodic crystal geometry relaxation: classical optimizers, MACS and benchmarks"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--species", common.species, "Species table (symbol sigma epsilon radius per line)")
      ->check(CLI::ExistingFile);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate random test sets");
  gen_cmd->add_option("--spec", gen.spec_path, "Benchmark spec file")->check(CLI::ExistingFile);
  gen_cmd->add_option("--composition", gen.composition, "Base composition, e.g. Ar=8");
  gen_cmd->add_option("--sizes", gen.sizes, "Atom counts of the sets")->delimiter(',');
  gen_cmd->add_option("--set-size", gen.set_size, "Structures per set");
  gen_cmd->add_option("--seed", gen.seed, "Seed (PERIOPT_SEED overrides)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  RelaxArgs rx;
  auto* relax_cmd = app.add_subcommand("relax", "Relax one structure");
  relax_cmd->add_option("--in", rx.in, "Extended-XYZ input")->required()->check(CLI::ExistingFile);
  relax_cmd->add_option("--method", rx.method, "BFGS, BFGSLS, FIRE, MDMin, CG, FIRE+BFGSLS or MACS");
  relax_cmd->add_option("--fmax", rx.fmax, "Force threshold in eV/A");
  relax_cmd->add_option("--max-steps", rx.max_steps, "Step budget");
  relax_cmd->add_option("--calculator", rx.calculator, "lj or cmd:<server command>");
  relax_cmd->add_option("--checkpoint", rx.checkpoint, "Trained policy (MACS)")->check(CLI::ExistingFile);
  relax_cmd->add_option("--out", rx.out, "Relaxed structure (XYZ)");
  relax_cmd->add_option("--report", rx.report, "Relaxation report (JSON)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a MACS policy with soft actor-critic");
  train_cmd->add_option("--config", tr.config, "Trainer config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--env", tr.env, "Environment config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Checkpoint path");
  train_cmd->add_option("--log", tr.log, "Training log CSV (default stdout)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--calculator", tr.calculator, "lj or cmd:<server command>");
  train_cmd->add_option("--rounds", tr.rounds, "Override total_rounds");
  train_cmd->add_option("--episodes", tr.episodes, "Override max_episodes");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained policy with deterministic actions");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Trained policy")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--testset", ev.testset, "Test set directory (otherwise structures are generated)");
  eval_cmd->add_option("--size", ev.size, "Atom count (filter or generate)");
  eval_cmd->add_option("--composition", ev.composition, "Composition of generated structures");
  eval_cmd->add_option("--count", ev.count, "Generated structures");
  eval_cmd->add_option("--seed", ev.seed, "Seed of generated structures (PERIOPT_SEED overrides)");
  eval_cmd->add_option("--fmax", ev.fmax, "Force threshold in eV/A");
  eval_cmd->add_option("--max-steps", ev.max_steps, "Step budget");
  eval_cmd->add_option("--calculator", ev.calculator, "lj or cmd:<server command>");
  eval_cmd->add_option("--report", ev.report, "Per-run reports (JSON array)");

  BenchArgs bn;
  auto* bench_cmd = app.add_subcommand("bench", "Relax a test set with every method and write metrics");
  bench_cmd->add_option("--spec", bn.spec_path, "Benchmark spec (used when the test set must be generated)")
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--testset", bn.testset, "Test set directory; generated there if absent");
  bench_cmd->add_option("--out", bn.out, "Output directory");
  bench_cmd->add_option("--methods", bn.methods, "Override the method list")->delimiter(',');
  bench_cmd->add_option("--checkpoint", bn.checkpoint, "Trained policy for MACS rows")->check(CLI::ExistingFile);
  bench_cmd->add_option("--calculator", bn.calculator, "Override the calculator");
  bench_cmd->add_option("--jobs", bn.jobs, "Structures relaxed concurrently")->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--omit-timing", bn.omit_timing, "Write NA for wall-time columns");

  TracesArgs tc;
  auto* traces_cmd = app.add_subcommand("traces", "Mean energy traces and minima histograms from bench runs");
  traces_cmd->add_option("--runs", tc.runs, "Bench output directory")->required();
  traces_cmd->add_option("--size", tc.size, "Atom count of the set")->required();
  traces_cmd->add_option("--methods", tc.methods, "Methods (default: all present)")->delimiter(',');
  traces_cmd->add_option("--out", tc.out, "Trace CSV (default stdout)");
  traces_cmd->add_option("--histogram", tc.histogram, "Also write a minima histogram CSV here");
  traces_cmd->add_option("--bins", tc.bins, "Histogram bins")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return run_gen(common, gen);
    if (*relax_cmd) return run_relax(common, rx);
    if (*train_cmd) return run_train(common, tr);
    if (*eval_cmd) return run_eval(common, ev);
    if (*bench_cmd) return run_bench_cmd(common, bn);
    if (*traces_cmd) return run_traces(common, tc);
  } catch (const std::exception& e) {
    std::cerr << "periopt: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
