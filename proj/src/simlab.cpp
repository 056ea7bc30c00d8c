#include "robart/simlab.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fmt/format.h>
#include <map>
#include <sstream>
#include <thread>

#include "robart/error.hpp"
#include "robart/pilot.hpp"

namespace robart {

namespace {

// encoded row layout
constexpr int kX1 = 0, kX2 = 1, kX3 = 2, kX4 = 3, kL1 = 4, kL2 = 5, kL3 = 6;
constexpr int kEncodedCols = 7;

}  // namespace

double design_h(std::span<const double> x) { return 2.0 * x[kL1] - x[kL2] - 0.5 * x[kL3]; }

std::string DesignSpec::name() const {
  switch (id) {
    case DesignId::I: return "I";
    case DesignId::II: return "II";
    case DesignId::III: return "III";
    case DesignId::IV: return "IV";
    case DesignId::Linear: return "linear";
  }
  return "unknown";
}

double DesignSpec::e(std::span<const double> x) const {
  if (x.size() != kEncodedCols) throw DimensionMismatch("design rows have 7 encoded columns");
  switch (id) {
    case DesignId::I:
    case DesignId::II:
    case DesignId::Linear:
      return -0.2 * x[kX1] + 0.4 * x[kX1] * x[kX3];
    case DesignId::III:
    case DesignId::IV:
      return -0.2 * x[kX1] + 0.4 * x[kX1] * x[kX3] + 0.4 * x[kX2] * x[kX3];
  }
  return 0.0;
}

double DesignSpec::m(std::span<const double> x) const {
  if (x.size() != kEncodedCols) throw DimensionMismatch("design rows have 7 encoded columns");
  const double x1 = x[kX1], x2 = x[kX2], x3 = x[kX3], x4 = x[kX4];
  const double h = design_h(x);
  switch (id) {
    case DesignId::I: return 1.0 - 2.0 * x1 - 0.5 * x1 * x1 + x2 + x3 + x4 + h;
    case DesignId::II: return 1.0 + x1 * x2 + x1 * x3 + x2 + x4 + h;
    case DesignId::III: return 1.0 + x1 * x3 + x2 * x3 + x1 + x4 + h;
    case DesignId::IV: return 1.0 + x1 * x3 + x2 * x3 + x2 * x4 + h;
    case DesignId::Linear: return 1.0 - 2.0 * x1 + x2 + x3 + x4 + h;
  }
  return 0.0;
}

double DesignSpec::propensity(std::span<const double> x) const { return logistic(e(x)); }

DesignSpec design(DesignId id) { return DesignSpec{id}; }

DesignSpec parse_design(const std::string& name) {
  if (name == "I" || name == "1") return design(DesignId::I);
  if (name == "II" || name == "2") return design(DesignId::II);
  if (name == "III" || name == "3") return design(DesignId::III);
  if (name == "IV" || name == "4") return design(DesignId::IV);
  if (name == "linear") return design(DesignId::Linear);
  throw InvalidParameter(fmt::format("unknown design '{}'", name));
}

Eigen::MatrixXd gen_covariates(Eigen::Index n, RngStream& rng) {
  if (n < 1) throw InvalidParameter("n must be at least 1");
  Eigen::MatrixXd raw(n, 5);
  for (Eigen::Index i = 0; i < n; ++i) {
    raw(i, 0) = rng.normal();
    raw(i, 1) = rng.normal();
    raw(i, 2) = rng.normal();
    raw(i, 3) = draw(rng, Bernoulli{0.5});
    raw(i, 4) = 1 + draw(rng, Categorical{{1.0, 1.0, 1.0}});
  }
  return raw;
}

Eigen::MatrixXd encode_covariates(const Eigen::MatrixXd& raw) {
  if (raw.cols() != 5) throw DimensionMismatch("raw covariates have 5 columns");
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(raw.rows(), kEncodedCols);
  X.leftCols(4) = raw.leftCols(4);
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const auto level = static_cast<int>(raw(i, 4));
    if (level < 1 || level > 3) throw DataError(fmt::format("row {}: x5 must be 1, 2 or 3", i));
    X(i, 3 + level) = 1.0;
  }
  return X;
}

std::vector<ColumnInfo> encoded_columns() {
  return {{"x1", 0, ColumnKind::Continuous}, {"x2", 1, ColumnKind::Continuous},
          {"x3", 2, ColumnKind::Continuous}, {"x4", 3, ColumnKind::Binary},
          {"x5=1", 4, ColumnKind::Indicator}, {"x5=2", 4, ColumnKind::Indicator},
          {"x5=3", 4, ColumnKind::Indicator}};
}

SimulatedMissing gen_missing_data(Eigen::Index n, const DesignSpec& spec, RngStream& rng) {
  SimulatedMissing sim;
  sim.raw = gen_covariates(n, rng);
  sim.data.X = encode_covariates(sim.raw);
  sim.data.columns = encoded_columns();
  sim.data.y.resize(n);
  sim.data.r.resize(static_cast<std::size_t>(n));
  sim.y_full.resize(n);
  sim.m0.resize(n);
  sim.pi0.resize(n);
  std::array<double, kEncodedCols> row{};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < kEncodedCols; ++j) row[static_cast<std::size_t>(j)] = sim.data.X(i, j);
    sim.m0[i] = spec.m(row);
    sim.pi0[i] = spec.propensity(row);
    const int r = draw(rng, Bernoulli{sim.pi0[i]});
    sim.y_full[i] = sim.m0[i] + rng.normal();
    sim.data.r[static_cast<std::size_t>(i)] = r;
    sim.data.y[i] = r == 1 ? sim.y_full[i] : std::numeric_limits<double>::quiet_NaN();
  }
  return sim;
}

double true_mean(const DesignSpec& spec) {
  // E[x1] = 0, E[x1^2] = 1, E[x4] = 1/2, E[h(x5)] = 1/6; products of independent centered terms vanish
  switch (spec.id) {
    case DesignId::I: return 7.0 / 6.0;
    case DesignId::II: return 5.0 / 3.0;
    case DesignId::III: return 5.0 / 3.0;
    case DesignId::IV: return 7.0 / 6.0;
    case DesignId::Linear: return 5.0 / 3.0;
  }
  return 0.0;
}

std::string to_string(MCMethod method) {
  switch (method) {
    case MCMethod::Plugin: return "plugin";
    case MCMethod::OneStep: return "onestep";
    case MCMethod::RoBartLogit: return "robart-logit";
    case MCMethod::RoBartStacked: return "robart-stacked";
    case MCMethod::RoBartOracle: return "robart-oracle";
  }
  return "unknown";
}

MCMethod parse_mc_method(const std::string& name) {
  if (name == "plugin" || name == "plugin-bart") return MCMethod::Plugin;
  if (name == "onestep") return MCMethod::OneStep;
  if (name == "robart-logit" || name == "robart") return MCMethod::RoBartLogit;
  if (name == "robart-stacked") return MCMethod::RoBartStacked;
  if (name == "robart-oracle") return MCMethod::RoBartOracle;
  throw InvalidParameter(fmt::format("unknown method '{}'", name));
}

std::vector<MCMethod> parse_mc_methods(const std::string& comma_list) {
  std::vector<MCMethod> out;
  std::stringstream ss(comma_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_mc_method(item));
  }
  if (out.empty()) throw InvalidParameter("method list is empty");
  return out;
}

BartConfig MCConfig::desk_bart() {
  BartConfig c;
  c.num_trees = 50;
  c.num_draws = 1000;
  c.burn_in = 250;
  return c;
}

BartConfig MCConfig::paper_bart() { return BartConfig{}; }

BartConfig MCConfig::stack_bart() {
  BartConfig c;
  c.num_trees = 50;
  c.num_draws = 300;
  c.burn_in = 200;
  return c;
}

void MCConfig::validate() const {
  if (n < 10) throw InvalidParameter("MCConfig.n must be at least 10");
  if (reps < 1) throw InvalidParameter("MCConfig.reps must be at least 1");
  if (methods.empty()) throw InvalidParameter("MCConfig.methods must not be empty");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidParameter("MCConfig.alpha must lie in (0, 1)");
  if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw InvalidParameter("MCConfig.clip_eps must lie in (0, 0.5)");
  if (stack_folds < 2) throw InvalidParameter("MCConfig.stack_folds must be at least 2");
  if (threads < 1) throw InvalidParameter("MCConfig.threads must be at least 1");
  bart.validate();
  pilot_bart.validate();
}

ReplicationRecord run_replication(const MCConfig& config, RngStream stream) {
  ReplicationRecord rec;
  try {
    const DesignSpec spec = design(config.design);
    RngStream data_rng = stream.child(0);
    const SimulatedMissing sim = gen_missing_data(config.n, spec, data_rng);
    const MissingDataset& data = sim.data;

    const auto observed = data.observed_rows();
    if (observed.size() < 2) throw DataError("fewer than two observed outcomes");
    RngStream outcome_rng = stream.child(1);
    const auto chain = run_bart_regression(select_rows(data.X, observed), select_rows(data.y, observed),
                                           config.bart, outcome_rng, &data.X);
    const RowMatrix& m_draws = chain.fitted_test;
    const RngStream weights = stream.child(4);

    for (MCMethod method : config.methods) {
      DrawSet ds;
      switch (method) {
        case MCMethod::Plugin:
          ds = mean_response_draws(data, m_draws, Method::PluginBart, nullptr, nullptr, weights, config.clip_eps);
          break;
        case MCMethod::OneStep: {
          RngStream pi_rng = stream.child(2);
          const auto pis = run_bart_binary(data.X, data.r, config.bart, pi_rng);
          ds = mean_response_draws(data, m_draws, Method::OneStep, nullptr, &pis.fitted, weights, config.clip_eps);
          break;
        }
        case MCMethod::RoBartLogit: {
          PilotValues pv;
          pv.pi = predict_propensity(
              fit_logit_pilot(data.X, data.columns, data.r, FeatureMap::quadratic(), {kPilotRidge}, config.clip_eps),
              data.X);
          ds = mean_response_draws(data, m_draws, Method::RoBart, &pv, nullptr, weights, config.clip_eps);
          break;
        }
        case MCMethod::RoBartStacked: {
          RngStream stack_rng = stream.child(3);
          const std::vector<PropensityLearner> learners{logit_learner(data.columns),
                                                        bart_probability_learner(config.pilot_bart)};
          PilotValues pv;
          pv.pi = predict_propensity(
              stack_pilots(learners, data.X, data.r, config.stack_folds, stack_rng, config.clip_eps), data.X);
          ds = mean_response_draws(data, m_draws, Method::RoBart, &pv, nullptr, weights, config.clip_eps);
          break;
        }
        case MCMethod::RoBartOracle: {
          PilotValues pv;
          pv.pi = sim.pi0.unaryExpr([&](double p) { return std::clamp(p, config.clip_eps, 1.0 - config.clip_eps); });
          pv.m_hat = sim.m0;
          ds = mean_response_draws(data, m_draws, Method::RoBart, &pv, nullptr, weights, config.clip_eps);
          break;
        }
      }
      ds.check();
      const Interval ci = credible_interval(ds, config.alpha);
      rec.mean.push_back(ci.mean);
      rec.lo.push_back(ci.lo);
      rec.hi.push_back(ci.hi);
    }
  } catch (const Error& e) {
    rec = ReplicationRecord{};
    rec.failed = true;
    rec.error = e.what();
  }
  return rec;
}

std::vector<MCCell> summarize(const MCConfig& config, const std::vector<ReplicationRecord>& records, double truth) {
  long failures = 0;
  for (const auto& r : records) failures += r.failed ? 1 : 0;
  std::vector<MCCell> cells;
  for (std::size_t k = 0; k < config.methods.size(); ++k) {
    MCCell cell;
    cell.design = design(config.design).name();
    cell.n = static_cast<long>(config.n);
    cell.method = to_string(config.methods[k]);
    cell.failures = failures;
    double sum_mean = 0.0, sum_len = 0.0;
    long covered = 0, used = 0;
    for (const auto& r : records) {
      if (r.failed) continue;
      ++used;
      sum_mean += r.mean[k];
      sum_len += r.hi[k] - r.lo[k];
      covered += (r.lo[k] <= truth && truth <= r.hi[k]) ? 1 : 0;
    }
    cell.replications = used;
    if (used > 0) {
      const double u = static_cast<double>(used);
      cell.signed_bias = sum_mean / u - truth;
      cell.bias = std::abs(cell.signed_bias);
      cell.cp = static_cast<double>(covered) / u;
      cell.cp_se = std::sqrt(cell.cp * (1.0 - cell.cp) / u);
      cell.cil = sum_len / u;
    }
    cells.push_back(cell);
  }
  return cells;
}

MCReport run_mc(const MCConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto reps = static_cast<std::size_t>(config.reps);
  std::vector<ReplicationRecord> records(reps);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t r = next.fetch_add(1); r < reps; r = next.fetch_add(1)) {
      records[r] = run_replication(config, derive_stream(config.seed, r));
    }
  };
  const int workers = std::min<int>(config.threads, config.reps);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  MCReport report;
  report.truth = true_mean(design(config.design));
  report.cells = summarize(config, records, report.truth);
  report.replications = std::move(records);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const long failures = report.cells.empty() ? 0 : report.cells.front().failures;
  if (failures * 100 > config.reps) {
    std::string first;
    for (const auto& r : report.replications) {
      if (r.failed) {
        first = r.error;
        break;
      }
    }
    throw Error(fmt::format("{} of {} replications failed (first: {})", failures, config.reps, first));
  }
  return report;
}

namespace {

const char* kCsvHeader = "design,n,method,bias,signed_bias,cp,cp_se,cil,replications,failures";

std::string full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_report(const MCReport& report, ReportStyle style) {
  std::string out;
  if (style == ReportStyle::Csv) {
    out = std::string(kCsvHeader) + "\n";
    for (const auto& c : report.cells) {
      out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", c.design, c.n, c.method, full(c.bias),
                         full(c.signed_bias), full(c.cp), full(c.cp_se), full(c.cil), c.replications, c.failures);
    }
    return out;
  }

  std::vector<std::string> designs;
  std::vector<std::pair<long, std::string>> rows;
  std::map<std::tuple<long, std::string, std::string>, const MCCell*> lookup;
  for (const auto& c : report.cells) {
    if (std::find(designs.begin(), designs.end(), c.design) == designs.end()) designs.push_back(c.design);
    const auto key = std::make_pair(c.n, c.method);
    if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
    lookup[{c.n, c.method, c.design}] = &c;
  }
  out = "| n | Method |";
  std::string rule = "|---|---|";
  for (const auto& d : designs) {
    out += fmt::format(" {0} Bias | {0} CP | {0} CIL |", d);
    rule += "---|---|---|";
  }
  out += "\n" + rule + "\n";
  for (const auto& [n, method] : rows) {
    out += fmt::format("| {} | {} |", n, method);
    for (const auto& d : designs) {
      const auto it = lookup.find({n, method, d});
      if (it == lookup.end()) {
        out += "  |  |  |";
      } else {
        out += fmt::format(" {:.3f} | {:.3f} | {:.3f} |", it->second->bias, it->second->cp, it->second->cil);
      }
    }
    out += "\n";
  }
  return out;
}

MCReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("report CSV header not recognized");
  MCReport report;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 10) throw DataError(fmt::format("report line {}: expected 10 fields", lineno));
    try {
      MCCell c;
      c.design = f[0];
      c.n = std::stol(f[1]);
      c.method = f[2];
      c.bias = std::stod(f[3]);
      c.signed_bias = std::stod(f[4]);
      c.cp = std::stod(f[5]);
      c.cp_se = std::stod(f[6]);
      c.cil = std::stod(f[7]);
      c.replications = std::stol(f[8]);
      c.failures = std::stol(f[9]);
      report.cells.push_back(c);
    } catch (const std::logic_error&) {
      throw DataError(fmt::format("report line {}: malformed number", lineno));
    }
  }
  return report;
}

}  // namespace robart
