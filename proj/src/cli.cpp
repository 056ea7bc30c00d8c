#include "robart/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <fmt/format.h>
#include <iostream>
#include <map>
#include <sstream>

#include "robart/correction.hpp"
#include "robart/dataio.hpp"
#include "robart/error.hpp"
#include "robart/pilot.hpp"
#include "robart/simlab.hpp"

namespace robart {

namespace {

enum Sub : unsigned { kSim = 1, kFit = 2, kAte = 4, kAtt = 8 };
constexpr unsigned kEst = kFit | kAte | kAtt;
constexpr unsigned kAll = kSim | kEst;

struct FlagSpec {
  const char* flag;
  const char* key;
  const char* help;
  unsigned subs;
};

const FlagSpec kFlags[] = {
    {"--seed", "seed", "master seed (u64)", kAll},
    {"--out", "output", "output path (simulate) or prefix (fit/ate/att)", kAll},
    {"--threads", "threads", "worker threads for replications", kSim},
    {"--profile", "profile", "desk or paper", kAll},
    {"--design", "design", "design list, e.g. I,II,IV", kSim},
    {"--n", "n", "sample size list, e.g. 125,250", kSim},
    {"--reps", "reps", "Monte Carlo replications", kSim},
    {"--methods", "methods", "plugin,onestep,robart-logit,robart-stacked,robart-oracle", kSim},
    {"--input", "input", "input CSV", kEst},
    {"--method", "method", "plugin-bart, onestep or robart", kEst},
    {"--pilot", "pilot", "propensity pilot: logit or stacked", kEst},
    {"--m-hat", "m_hat", "outcome pilot: chain, bart-mean or ols", kEst},
    {"--features", "features", "pilot features: quadratic or linear", kEst},
    {"--ridge", "ridge", "ridge penalty of the logistic pilot", kEst},
    {"--crossfit", "crossfit", "cross-fit the propensity pilot over K folds", kEst},
    {"--draws", "draws", "posterior draws to use (0 = all retained)", kEst},
    {"--trim", "trim", "keep rows with propensity in [t, 1 - t]", kAte | kAtt},
    {"--outcome", "schema.outcome", "outcome column", kEst},
    {"--indicator", "schema.indicator", "observation indicator column", kFit},
    {"--treatment", "schema.indicator", "treatment column", kAte | kAtt},
    {"--covariates", "schema.covariates", "covariate columns (default: all others)", kEst},
    {"--categorical", "schema.categorical", "categorical covariate columns", kEst},
    {"--clip-eps", "clip_eps", "propensity clipping level", kAll},
    {"--stack-folds", "stack_folds", "folds of the stacked pilot", kAll},
    {"--alpha", "alpha", "credible level is 1 - alpha", kAll},
    {"--trees", "bart.num_trees", "number of trees", kAll},
    {"--burn-in", "bart.burn_in", "burn-in sweeps", kAll},
    {"--num-draws", "bart.num_draws", "retained posterior draws", kAll},
    {"--thin", "bart.thin", "thinning interval", kAll},
    {"--sparse", "bart.sparse", "Dirichlet split prior: true or false", kAll},
    {"--min-node-size", "bart.min_node_size", "minimum rows per child", kAll},
};

struct Parsed {
  std::string config_path;
  std::map<std::string, std::string> values;  // key -> flag value
  std::map<std::string, CLI::Option*> options;
};

std::string sub_name(unsigned sub) {
  switch (sub) {
    case kSim: return "simulate";
    case kFit: return "fit";
    case kAte: return "ate";
    case kAtt: return "att";
  }
  return "";
}

RunConfig resolve_config(unsigned sub, const Parsed& parsed) {
  std::map<std::string, std::string> flags;
  for (const auto& [key, opt] : parsed.options) {
    if (opt->count() > 0) flags[key] = parsed.values.at(key);
  }
  std::map<std::string, std::string> file;
  if (!parsed.config_path.empty()) file = read_key_values(parsed.config_path);

  std::string profile = "desk";
  if (file.count("profile")) profile = file.at("profile");
  if (flags.count("profile")) profile = flags.at("profile");

  RunConfig base;
  base.profile = profile;
  if (profile == "paper") {
    base.bart = MCConfig::paper_bart();
    base.reps = 1000;
  } else if (sub == kSim) {
    base.bart = MCConfig::desk_bart();
  }
  RunConfig c = RunConfig::from_map(flags, RunConfig::from_map(file, base));
  c.command = sub_name(sub);
  if (sub == kFit) c.estimand = Estimand::Mean;
  if (sub == kAte) c.estimand = Estimand::Ate;
  if (sub == kAtt) c.estimand = Estimand::Att;
  c.validate();
  return c;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_simulate(const RunConfig& c, std::ostream& out) {
  if (c.output.empty()) throw InvalidParameter("simulate needs --out");
  const auto t0 = std::chrono::steady_clock::now();
  MCReport all;
  for (const auto& d : split_commas(c.design)) {
    for (const auto& n : split_commas(c.n)) {
      MCConfig mc;
      mc.design = parse_design(d).id;
      mc.n = std::stol(n);
      mc.reps = c.reps;
      mc.methods = parse_mc_methods(c.methods);
      mc.bart = c.bart;
      mc.alpha = c.alpha;
      mc.clip_eps = c.clip_eps;
      mc.stack_folds = c.stack_folds;
      mc.seed = c.seed;
      mc.threads = c.threads;
      const MCReport r = run_mc(mc);
      all.cells.insert(all.cells.end(), r.cells.begin(), r.cells.end());
    }
  }
  all.runtime_seconds = elapsed_since(t0);
  write_text(c.output, format_report(all, ReportStyle::Csv));
  const std::string md = format_report(all, ReportStyle::Markdown);
  write_text(c.output + ".md", md);
  write_manifest(c.output + ".manifest", c, all.runtime_seconds);
  out << md;
  return kExitOk;
}

PropensityLearner base_learner(const RunConfig& c, const std::vector<ColumnInfo>& columns) {
  const FeatureMap features = c.features == "linear" ? FeatureMap::linear() : FeatureMap::quadratic();
  return logit_learner(columns, features, IrlsOptions{c.ridge});
}

PropensityLearner pilot_learner(const RunConfig& c, const std::vector<ColumnInfo>& columns) {
  if (c.pilot == "logit") return base_learner(c, columns);
  return stacked_learner({base_learner(c, columns), bart_probability_learner(MCConfig::stack_bart())}, c.stack_folds);
}

// Propensity pilot at every row, clipped.
Eigen::VectorXd fit_propensity(const RunConfig& c, const Eigen::MatrixXd& X, const std::vector<ColumnInfo>& columns,
                               std::span<const int> labels, RngStream rng) {
  if (c.crossfit >= 2) return crossfit_propensity(pilot_learner(c, columns), X, labels, c.crossfit, rng, c.clip_eps);
  Eigen::VectorXd p = pilot_learner(c, columns)(X, labels, X, rng);
  return p.unaryExpr([&](double v) { return std::clamp(v, c.clip_eps, 1.0 - c.clip_eps); });
}

// Outcome pilot trained on the given rows, evaluated at every row of X.
std::optional<Eigen::VectorXd> fit_m_hat(const RunConfig& c, const Eigen::MatrixXd& X,
                                         const std::vector<ColumnInfo>& columns, const Eigen::VectorXd& y,
                                         const std::vector<Eigen::Index>& rows, RngStream rng) {
  if (c.m_hat == "chain") return std::nullopt;
  OutcomePilotOptions opt;
  opt.method = c.m_hat == "ols" ? OutcomePilotMethod::OlsExpansion : OutcomePilotMethod::BartMean;
  opt.bart = c.bart;
  opt.features = c.features == "linear" ? FeatureMap::linear() : FeatureMap::quadratic();
  const PilotFit fit = fit_outcome_pilot(select_rows(X, rows), select_rows(y, rows), X, columns, opt, rng);
  return predict_outcome(fit, X);
}

void write_estimation_outputs(const RunConfig& c, const DrawSet& ds, const RunSummary& summary,
                              const Eigen::VectorXd& pi, const Eigen::VectorXd& m_hat, double runtime,
                              std::ostream& out) {
  const std::string json = summary_json(summary);
  write_text(c.output + ".summary.json", json);
  write_text(c.output + ".draws.csv", drawset_csv(ds));
  write_text(c.output + ".pilots.csv", pilot_csv(pi, m_hat));
  write_manifest(c.output + ".manifest", c, runtime);
  out << json;
}

RunSummary make_summary(const RunConfig& c, const DrawSet& ds, Eigen::Index n, Eigen::Index n_eff) {
  RunSummary s;
  s.method = to_string(ds.method);
  s.estimand = to_string(ds.estimand);
  s.interval = credible_interval(ds, c.alpha);
  s.draws = ds.size();
  s.seed = c.seed;
  s.n = n;
  s.effective_n = n_eff;
  s.trim = c.trim;
  s.alpha = c.alpha;
  return s;
}

void require_io(const RunConfig& c) {
  if (c.input.empty()) throw InvalidParameter("--input is required");
  if (c.output.empty()) throw InvalidParameter("--out is required");
}

int run_fit(const RunConfig& c, std::ostream& out) {
  require_io(c);
  const auto t0 = std::chrono::steady_clock::now();
  const MissingDataset data = load_missing_csv(c.input, c.schema);
  RngStream master = derive_stream(c.seed, 0);

  PilotValues pv;
  pv.pi = fit_propensity(c, data.X, data.columns, data.r, master.child(10));
  pv.m_hat = fit_m_hat(c, data.X, data.columns, data.y, data.observed_rows(), master.child(11));

  Eigen::VectorXd chain_mean;
  const DrawSet ds = run_mean_response(data, c.method, &pv, c.bart, c.draws, master, c.clip_eps, &chain_mean);
  ds.check();
  const RunSummary summary = make_summary(c, ds, data.n(), data.n());
  write_estimation_outputs(c, ds, summary, pv.pi, pv.m_hat ? *pv.m_hat : chain_mean, elapsed_since(t0), out);
  return kExitOk;
}

int run_treatment(const RunConfig& c, std::ostream& out) {
  require_io(c);
  const auto t0 = std::chrono::steady_clock::now();
  TreatmentDataset data = load_treatment_csv(c.input, c.schema);
  const Eigen::Index n_full = data.n();
  RngStream master = derive_stream(c.seed, 0);

  if (c.trim > 0.0) {
    // trimming always uses the plain logistic pilot on the full sample
    RunConfig logit = c;
    logit.pilot = "logit";
    logit.crossfit = 0;
    const Eigen::VectorXd pi_full = fit_propensity(logit, data.X, data.columns, data.d, master.child(9));
    data = trim_by_propensity(data, pi_full, c.trim).data;
    data.validate();
  }

  PilotValues pv;
  pv.pi = fit_propensity(c, data.X, data.columns, data.d, master.child(10));
  Eigen::VectorXd chain_mean;
  Eigen::VectorXd m_export;
  DrawSet ds;
  if (c.estimand == Estimand::Ate) {
    pv.m_hat1 = fit_m_hat(c, data.X, data.columns, data.y, data.treated_rows(), master.child(11));
    pv.m_hat0 = fit_m_hat(c, data.X, data.columns, data.y, data.control_rows(), master.child(12));
    ds = run_ate(data, c.method, &pv, c.bart, c.draws, master, c.clip_eps, &chain_mean);
    m_export = chain_mean;
    if (pv.m_hat1 && pv.m_hat0) {
      for (Eigen::Index i = 0; i < data.n(); ++i) {
        m_export[i] = data.d[static_cast<std::size_t>(i)] == 1 ? (*pv.m_hat1)[i] : (*pv.m_hat0)[i];
      }
    }
  } else {
    pv.m_hat = fit_m_hat(c, data.X, data.columns, data.y, data.control_rows(), master.child(12));
    ds = run_att(data, c.method, &pv, c.bart, c.draws, master, c.clip_eps, &chain_mean);
    m_export = pv.m_hat ? *pv.m_hat : chain_mean;
  }
  ds.check();
  const RunSummary summary = make_summary(c, ds, n_full, data.n());
  write_estimation_outputs(c, ds, summary, pv.pi, m_export, elapsed_since(t0), out);
  return kExitOk;
}

int run_report(const std::string& input, const std::string& style, std::ostream& out) {
  const MCReport r = parse_report_csv(read_text(input));
  if (style == "csv") {
    out << format_report(r, ReportStyle::Csv);
  } else if (style == "markdown") {
    out << format_report(r, ReportStyle::Markdown);
  } else {
    throw InvalidParameter("style must be markdown or csv");
  }
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust Bayesian inference with BART: missing-data mean, ATE and ATT", "robart"};
  app.require_subcommand(1);

  const std::pair<unsigned, const char*> subs[] = {
      {kSim, "run the Monte Carlo study"},
      {kFit, "mean response under missing outcomes"},
      {kAte, "average treatment effect"},
      {kAtt, "average treatment effect on the treated"},
  };
  std::map<unsigned, CLI::App*> apps;
  std::map<unsigned, Parsed> parsed;
  for (const auto& [sub, desc] : subs) {
    CLI::App* s = app.add_subcommand(sub_name(sub), desc);
    Parsed& p = parsed[sub];
    s->add_option("--config", p.config_path, "key=value config file (flags override it)");
    for (const auto& f : kFlags) {
      if ((f.subs & sub) == 0) continue;
      p.options[f.key] = s->add_option(f.flag, p.values[f.key], f.help);
    }
    apps[sub] = s;
  }
  std::string report_input, report_style = "markdown";
  CLI::App* report = app.add_subcommand("report", "render a report CSV");
  report->add_option("--input", report_input, "report CSV")->required();
  report->add_option("--style", report_style, "markdown or csv");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (report->parsed()) return run_report(report_input, report_style, out);
    for (const auto& [sub, s] : apps) {
      if (!s->parsed()) continue;
      RunConfig c;
      try {
        c = resolve_config(sub, parsed[sub]);
      } catch (const InvalidParameter& e) {
        err << "error: " << e.what() << "\n\n" << s->help();
        return kExitUsage;
      }
      if (sub == kSim) return run_simulate(c, out);
      if (sub == kFit) return run_fit(c, out);
      return run_treatment(c, out);
    }
  } catch (const InvalidParameter& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace robart
