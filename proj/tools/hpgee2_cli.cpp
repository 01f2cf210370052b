// hpgee2 command-line driver: fit | tune | simulate | replicate.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hpgee2.hpp"

namespace {

using namespace hpgee2;

struct RunConfig {
  std::string units;
  std::string pairs;
  std::string mode = "joint";
  std::string penalty = "scad";
  double lambda = 0.0;
  std::string grid = "0.001:1:30";
  double a = 3.7;
  double tol = 1e-6;
  std::uint64_t seed = 20120901;
  std::string out;
  std::string format = "text";
  std::string config;
  bool no_intercept = false;
  std::string clusters = "200";
  int cluster_size = 5;
  int replicates = 100;
  int threads = 1;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos)
      throw ConfigError("cli-io", "parse_list", "empty entry in list '" + s + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  if (out.empty()) throw ConfigError("cli-io", "parse_list", "empty list");
  return out;
}

std::vector<int> parse_counts(const std::string& s) {
  std::vector<int> out;
  for (const auto& t : split_list(s)) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || v < 1)
      throw ConfigError("cli-io", "parse_clusters", "bad cluster count '" + t + "'");
    out.push_back(v);
  }
  return out;
}

std::string num(double v) { return detail::format_double(v); }

SolverOptions solver_options(const RunConfig& rc) {
  if (!(rc.tol > 0.0)) throw ConfigError("cli-io", "options", "--tol must be positive");
  SolverOptions s;
  s.tol = rc.tol;
  return s;
}

AlrOptions alr_options(const RunConfig& rc) {
  AlrOptions a;
  a.tol = rc.tol;
  return a;
}

// Values from --config fill every option the command line left unset.
void apply_config_file(CLI::App* sub, const std::string& path) {
  for (const auto& [key, value] : read_config_file(path)) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config")
      throw ConfigError("cli-io", "read_config", "'" + path + "': unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

std::vector<std::pair<std::string, std::string>> echo(const std::string& command,
                                                      const RunConfig& rc) {
  std::vector<std::pair<std::string, std::string>> kv{{"command", command}};
  if (command == "fit" || command == "tune") {
    kv.emplace_back("units", rc.units);
    kv.emplace_back("pairs", rc.pairs);
    kv.emplace_back("intercept", rc.no_intercept ? "false" : "true");
  }
  if (command != "simulate") {
    kv.emplace_back("mode", rc.mode);
    kv.emplace_back("penalty", rc.penalty);
    if (command == "fit") kv.emplace_back("lambda", num(rc.lambda));
    else kv.emplace_back("grid", rc.grid);
    kv.emplace_back("a", num(rc.a));
    kv.emplace_back("tol", num(rc.tol));
  }
  if (command == "simulate" || command == "replicate") {
    kv.emplace_back("seed", std::to_string(rc.seed));
    kv.emplace_back("clusters", rc.clusters);
    kv.emplace_back("cluster_size", std::to_string(rc.cluster_size));
  }
  if (command == "replicate") {
    kv.emplace_back("replicates", std::to_string(rc.replicates));
    kv.emplace_back("threads", std::to_string(rc.threads));
  }
  if (command != "simulate") kv.emplace_back("format", rc.format);
  return kv;
}

void emit(const RunConfig& rc, const std::string& content) {
  if (rc.out.empty()) {
    std::cout << content;
    std::cout.flush();
    return;
  }
  write_files_atomically({{rc.out, content}});
}

std::string fit_report(const Dataset& data, const FitResult& fit, OutputFormat fmt) {
  std::optional<SandwichResult> se;
  std::string note;
  try {
    se = sandwich_covariance(data, fit);
  } catch (const Error& e) {
    note = std::string("# standard errors unavailable: ") + e.what() + "\n";
  }
  return note + report_fit(data, fit, se, fmt);
}

int run_fit(const RunConfig& rc) {
  const Dataset data = load_dataset(rc.units, rc.pairs, !rc.no_intercept);
  const OutputFormat fmt = parse_output_format(rc.format);
  const AnalysisMode mode{parse_analysis(rc.mode), {}};
  const auto pen = penalties_for(data, mode.mode, parse_penalty_kind(rc.penalty), rc.lambda, rc.a);
  const FitResult fit =
      fit_hpgee2(data, mode, pen.mean, pen.assoc, solver_options(rc), nullptr, alr_options(rc));
  std::string body = config_header(echo("fit", rc));
  body += "# converged = " + std::string(fit.converged ? "true" : "false") + "\n";
  body += fit_report(data, fit, fmt);
  emit(rc, body);
  return 0;
}

int run_tune(const RunConfig& rc) {
  const Dataset data = load_dataset(rc.units, rc.pairs, !rc.no_intercept);
  const OutputFormat fmt = parse_output_format(rc.format);
  const AnalysisMode mode{parse_analysis(rc.mode), {}};
  TuningOptions topts;
  topts.solver = solver_options(rc);
  topts.alr = alr_options(rc);
  topts.scad_a = rc.a;
  topts.threads = rc.threads;
  const TuningReport rep =
      grid_search(data, mode, parse_penalty_kind(rc.penalty), GridSpec::parse(rc.grid), topts);
  std::string body = config_header(echo("tune", rc));
  body += "# chosen_lambda = " + num(rep.chosen_lambda) + "\n";
  body += report_tuning(rep, fmt);
  if (fmt == OutputFormat::text) body += "\n";
  body += fit_report(data, rep.chosen_fit(), fmt);
  emit(rc, body);
  return 0;
}

StudyConfig study_config(const RunConfig& rc, int n_clusters) {
  StudyConfig cfg;
  cfg.n_clusters = n_clusters;
  cfg.cluster_size = rc.cluster_size;
  cfg.seed = rc.seed;
  cfg.replicates = rc.replicates;
  cfg.threads = rc.threads;
  cfg.scad_a = rc.a;
  cfg.solver = solver_options(rc);
  cfg.alr = alr_options(rc);
  return cfg;
}

int run_simulate(const RunConfig& rc) {
  if (rc.out.empty())
    throw ConfigError("cli-io", "simulate", "--out PREFIX is required for simulate");
  const auto counts = parse_counts(rc.clusters);
  if (counts.size() != 1)
    throw ConfigError("cli-io", "simulate", "simulate takes a single --clusters value");
  StudyConfig cfg = study_config(rc, counts.front());
  cfg.mode = Analysis::joint;
  cfg.validate();
  const SimulatedData sim = simulate_dataset(cfg, 0);
  std::vector<std::string> comments;
  for (const auto& [k, v] : echo("simulate", rc)) comments.push_back(k + " = " + v);
  comments.push_back("mean_clipped_mass = " + num(sim.mean_clipped_mass));
  write_dataset(sim.data, rc.out + ".units.csv", rc.out + ".pairs.csv", comments);
  return 0;
}

int run_replicate(const RunConfig& rc) {
  const OutputFormat fmt = parse_output_format(rc.format);
  std::vector<PenaltyKind> kinds;
  for (const auto& k : split_list(rc.penalty)) kinds.push_back(parse_penalty_kind(k));
  std::vector<SelectionMetrics> rows;
  std::string extra;
  for (int n : parse_counts(rc.clusters)) {
    StudyConfig cfg = study_config(rc, n);
    cfg.mode = parse_analysis(rc.mode);
    cfg.penalties = kinds;
    cfg.grid = GridSpec::parse(rc.grid);
    const StudyResult res = replicate_study(cfg);
    extra += "# n = " + std::to_string(n) + ": mean_clipped_mass = " + num(res.mean_clipped_mass) +
             ", heavy_clip_clusters = " + std::to_string(res.heavy_clip_clusters) + "\n";
    for (const auto& m : res.metrics) rows.push_back(m);
  }
  emit(rc, config_header(echo("replicate", rc)) + extra + report_selection(rows, fmt));
  return 0;
}

void add_common(CLI::App* sub, RunConfig& rc) {
  sub->add_option("--mode", rc.mode, "Analysis: mean | assoc | joint")
      ->check(CLI::IsMember({"mean", "assoc", "joint"}));
  sub->add_option("--a", rc.a, "SCAD shape parameter");
  sub->add_option("--tol", rc.tol, "Convergence tolerance");
  sub->add_option("--out", rc.out, "Output path (stdout when omitted)");
  sub->add_option("--format", rc.format, "Output format: text | csv")
      ->check(CLI::IsMember({"text", "csv"}));
  sub->add_option("--config", rc.config, "Flat key=value file; flags override it");
  sub->add_option("--threads", rc.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void add_data(CLI::App* sub, RunConfig& rc) {
  sub->add_option("--units", rc.units, "Unit-level CSV")->check(CLI::ExistingFile);
  sub->add_option("--pairs", rc.pairs, "Pair-level CSV")->check(CLI::ExistingFile);
  sub->add_flag("--no-intercept", rc.no_intercept, "Do not prepend intercept columns");
}

void add_sim(CLI::App* sub, RunConfig& rc) {
  sub->add_option("--seed", rc.seed, "Master seed");
  sub->add_option("--clusters", rc.clusters, "Number of clusters (comma list for replicate)");
  sub->add_option("--cluster-size", rc.cluster_size, "Units per cluster");
}

void require_data(const RunConfig& rc) {
  if (rc.units.empty() || rc.pairs.empty())
    throw ConfigError("cli-io", "options", "--units and --pairs are required");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical penalized GEE2 for clustered binary data"};
  app.require_subcommand(1);
  RunConfig rc;

  CLI::App* fit = app.add_subcommand("fit", "Fit at a single lambda");
  add_common(fit, rc);
  add_data(fit, rc);
  fit->add_option("--penalty", rc.penalty, "none | lasso | scad");
  fit->add_option("--lambda", rc.lambda, "Tuning parameter");

  CLI::App* tune = app.add_subcommand("tune", "Select lambda by modified BIC");
  add_common(tune, rc);
  add_data(tune, rc);
  tune->add_option("--penalty", rc.penalty, "none | lasso | scad");
  tune->add_option("--grid", rc.grid, "Lambda grid LO:HI:N");

  CLI::App* sim = app.add_subcommand("simulate", "Write one synthetic dataset");
  add_common(sim, rc);
  add_sim(sim, rc);

  CLI::App* rep = app.add_subcommand("replicate", "Monte-Carlo selection study");
  add_common(rep, rc);
  add_sim(rep, rc);
  rep->add_option("--penalty", rc.penalty, "Comma list of penalties");
  rep->add_option("--grid", rc.grid, "Lambda grid LO:HI:N");
  rep->add_option("--replicates", rc.replicates, "Replicates per setting")
      ->check(CLI::PositiveNumber);
  rep->get_option("--penalty")->default_str("lasso,scad");
  rc.penalty = "scad";

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "hpgee2: error: " << e.what() << "\n";
    return 2;
  }

  try {
    CLI::App* chosen = app.get_subcommands().front();
    if (chosen == rep && rep->get_option("--penalty")->count() == 0) rc.penalty = "lasso,scad";
    if (chosen == rep && rep->get_option("--mode")->count() == 0) rc.mode = "mean";
    if (!rc.config.empty()) apply_config_file(chosen, rc.config);
    if (chosen == fit) {
      require_data(rc);
      return run_fit(rc);
    }
    if (chosen == tune) {
      require_data(rc);
      return run_tune(rc);
    }
    if (chosen == sim) return run_simulate(rc);
    return run_replicate(rc);
  } catch (const Error& e) {
    std::cerr << "hpgee2: error: " << e.what() << "\n";
    return 1;
  } catch (const CLI::Error& e) {
    std::cerr << "hpgee2: error: " << e.what() << "\n";
    return 2;
  }
}
