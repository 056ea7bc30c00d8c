#include "robart/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fmt/format.h>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "robart/error.hpp"

namespace robart {

const char* const kVersion = "0.3.0";

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != cell.size() || !std::isfinite(v)) {
    throw DataError(fmt::format("row {}, column '{}': malformed number '{}'", row, col, cell));
  }
  return v;
}

int parse_flag(const std::string& cell, std::size_t row, const std::string& col) {
  if (cell == "0") return 0;
  if (cell == "1") return 1;
  throw DataError(fmt::format("row {}, column '{}': indicator must be 0 or 1, got '{}'", row, col, cell));
}

int require_column(const CsvTable& t, const std::string& name, const char* role) {
  if (name.empty()) throw InvalidParameter(fmt::format("schema needs a {} column", role));
  const int j = t.column(name);
  if (j < 0) throw DataError(fmt::format("{} column '{}' not found", role, name));
  return j;
}

// Covariate block with categorical columns expanded.
void build_covariates(const CsvTable& t, const CsvSchema& schema, Eigen::MatrixXd& X,
                      std::vector<ColumnInfo>& columns) {
  std::vector<std::string> covs = schema.covariates;
  if (covs.empty()) {
    for (const auto& h : t.header) {
      if (h != schema.outcome && h != schema.indicator) covs.push_back(h);
    }
  }
  if (covs.empty()) throw DataError("no covariate columns");
  for (const auto& c : schema.categorical) {
    if (std::find(covs.begin(), covs.end(), c) == covs.end()) {
      throw InvalidParameter(fmt::format("categorical column '{}' is not a covariate", c));
    }
  }

  struct Block {
    int src;
    std::vector<std::string> levels;  // empty for numeric
  };
  std::vector<Block> blocks;
  std::size_t width = 0;
  for (const auto& name : covs) {
    Block b{require_column(t, name, "covariate"), {}};
    const bool cat = std::find(schema.categorical.begin(), schema.categorical.end(), name) != schema.categorical.end();
    if (cat) {
      for (const auto& row : t.rows) {
        const auto& v = row[static_cast<std::size_t>(b.src)];
        if (v.empty()) throw DataError(fmt::format("column '{}' has an empty category", name));
        if (std::find(b.levels.begin(), b.levels.end(), v) == b.levels.end()) b.levels.push_back(v);
      }
      width += b.levels.size();
    } else {
      width += 1;
    }
    blocks.push_back(std::move(b));
  }

  const auto n = static_cast<Eigen::Index>(t.rows.size());
  X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(width));
  columns.clear();
  Eigen::Index col = 0;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    const std::string& name = covs[k];
    const int group = static_cast<int>(k);
    if (b.levels.empty()) {
      bool binary = true;
      for (Eigen::Index i = 0; i < n; ++i) {
        X(i, col) = parse_cell(t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(b.src)],
                               static_cast<std::size_t>(i) + 1, name);
        binary = binary && (X(i, col) == 0.0 || X(i, col) == 1.0);
      }
      columns.push_back({name, group, binary ? ColumnKind::Binary : ColumnKind::Continuous});
      ++col;
    } else {
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& v = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(b.src)];
        const auto level = std::find(b.levels.begin(), b.levels.end(), v) - b.levels.begin();
        X(i, col + level) = 1.0;
      }
      for (const auto& level : b.levels) columns.push_back({name + "=" + level, group, ColumnKind::Indicator});
      col += static_cast<Eigen::Index>(b.levels.size());
    }
  }
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable parse_csv_table(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV is empty; a header row is required");
  t.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw DataError(fmt::format("line {}: {} fields, header has {}", lineno, cells.size(), t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

CsvTable read_csv_table(const std::string& path) { return parse_csv_table(read_text(path)); }

MissingDataset to_missing_dataset(const CsvTable& t, const CsvSchema& schema) {
  const int yj = require_column(t, schema.outcome, "outcome");
  const int rj = require_column(t, schema.indicator, "indicator");
  MissingDataset d;
  build_covariates(t, schema, d.X, d.columns);
  const auto n = t.rows.size();
  d.y.resize(static_cast<Eigen::Index>(n));
  d.r.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    d.r[i] = parse_flag(row[static_cast<std::size_t>(rj)], i + 1, schema.indicator);
    const auto& ycell = row[static_cast<std::size_t>(yj)];
    const bool blank = ycell.empty() || ycell == "NA";
    if (d.r[i] == 1) {
      if (blank) throw DataError(fmt::format("row {}: outcome is missing where {} = 1", i + 1, schema.indicator));
      d.y[static_cast<Eigen::Index>(i)] = parse_cell(ycell, i + 1, schema.outcome);
    } else {
      d.y[static_cast<Eigen::Index>(i)] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  d.validate();
  return d;
}

TreatmentDataset to_treatment_dataset(const CsvTable& t, const CsvSchema& schema) {
  const int yj = require_column(t, schema.outcome, "outcome");
  const int dj = require_column(t, schema.indicator, "treatment");
  TreatmentDataset d;
  build_covariates(t, schema, d.X, d.columns);
  const auto n = t.rows.size();
  d.y.resize(static_cast<Eigen::Index>(n));
  d.d.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    d.d[i] = parse_flag(row[static_cast<std::size_t>(dj)], i + 1, schema.indicator);
    d.y[static_cast<Eigen::Index>(i)] = parse_cell(row[static_cast<std::size_t>(yj)], i + 1, schema.outcome);
  }
  d.validate();
  return d;
}

MissingDataset load_missing_csv(const std::string& path, const CsvSchema& schema) {
  return to_missing_dataset(read_csv_table(path), schema);
}

TreatmentDataset load_treatment_csv(const std::string& path, const CsvSchema& schema) {
  return to_treatment_dataset(read_csv_table(path), schema);
}

TrimResult trim_by_propensity(const TreatmentDataset& data, const Eigen::VectorXd& pi_hat, double t) {
  if (!(t >= 0.0 && t < 0.5)) throw InvalidParameter("trim threshold must lie in [0, 0.5)");
  if (pi_hat.size() != data.n()) throw DimensionMismatch("propensity length does not match the data");
  TrimResult out;
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    if (pi_hat[i] >= t && pi_hat[i] <= 1.0 - t) out.kept.push_back(i);
  }
  if (out.kept.empty()) throw DataError(fmt::format("trimming at {} removes every row", t));
  out.effective_n = static_cast<Eigen::Index>(out.kept.size());
  out.data = data.subset(out.kept);
  return out;
}

void RunConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidParameter("alpha must lie in (0, 1)");
  if (!(trim >= 0.0 && trim < 0.5)) throw InvalidParameter("trim must lie in [0, 0.5)");
  if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw InvalidParameter("clip_eps must lie in (0, 0.5)");
  if (ridge < 0.0) throw InvalidParameter("ridge must be nonnegative");
  if (crossfit == 1 || crossfit < 0) throw InvalidParameter("crossfit must be 0 or at least 2");
  if (draws < 0) throw InvalidParameter("draws must be nonnegative");
  if (threads < 1) throw InvalidParameter("threads must be at least 1");
  if (pilot != "logit" && pilot != "stacked") throw InvalidParameter("pilot must be logit or stacked");
  if (features != "quadratic" && features != "linear") throw InvalidParameter("features must be quadratic or linear");
  if (m_hat != "chain" && m_hat != "bart-mean" && m_hat != "ols") {
    throw InvalidParameter("m_hat must be chain, bart-mean or ols");
  }
  if (profile != "desk" && profile != "paper") throw InvalidParameter("profile must be desk or paper");
  bart.validate();
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["command"] = command;
  kv["seed"] = std::to_string(seed);
  kv["estimand"] = to_string(estimand);
  kv["method"] = to_string(method);
  kv["pilot"] = pilot;
  kv["features"] = features;
  kv["m_hat"] = m_hat;
  kv["clip_eps"] = format_double(clip_eps);
  kv["ridge"] = format_double(ridge);
  kv["crossfit"] = std::to_string(crossfit);
  kv["stack_folds"] = std::to_string(stack_folds);
  kv["bart.num_trees"] = std::to_string(bart.num_trees);
  kv["bart.num_draws"] = std::to_string(bart.num_draws);
  kv["bart.burn_in"] = std::to_string(bart.burn_in);
  kv["bart.thin"] = std::to_string(bart.thin);
  kv["bart.split_base"] = format_double(bart.split_base);
  kv["bart.split_power"] = format_double(bart.split_power);
  kv["bart.sigma_df"] = format_double(bart.sigma_df);
  kv["bart.sigma_quantile"] = format_double(bart.sigma_quantile);
  kv["bart.leaf_sd_k"] = format_double(bart.leaf_sd_k);
  kv["bart.sparse"] = bart.sparse ? "true" : "false";
  kv["bart.min_node_size"] = std::to_string(bart.min_node_size);
  kv["bart.move_grow"] = format_double(bart.moves.grow);
  kv["bart.move_prune"] = format_double(bart.moves.prune);
  kv["bart.move_change"] = format_double(bart.moves.change);
  kv["draws"] = std::to_string(draws);
  kv["alpha"] = format_double(alpha);
  kv["trim"] = format_double(trim);
  kv["input"] = input;
  kv["output"] = output;
  kv["schema.outcome"] = schema.outcome;
  kv["schema.indicator"] = schema.indicator;
  kv["schema.covariates"] = join_list(schema.covariates);
  kv["schema.categorical"] = join_list(schema.categorical);
  kv["design"] = design;
  kv["n"] = n;
  kv["reps"] = std::to_string(reps);
  kv["methods"] = methods;
  kv["threads"] = std::to_string(threads);
  kv["profile"] = profile;
  return kv;
}

namespace {

long parse_long(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long out = 0;
  try {
    out = std::stol(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InvalidParameter(fmt::format("{}: expected an integer, got '{}'", key, v));
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InvalidParameter(fmt::format("{}: expected an unsigned integer, got '{}'", key, v));
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InvalidParameter(fmt::format("{}: expected a number, got '{}'", key, v));
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidParameter(fmt::format("{}: expected true or false, got '{}'", key, v));
}

}  // namespace

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv, RunConfig c) {
  for (const auto& [key, v] : kv) {
    if (key.rfind("manifest.", 0) == 0) continue;
    if (key == "command") c.command = v;
    else if (key == "seed") c.seed = parse_u64(key, v);
    else if (key == "estimand") c.estimand = parse_estimand(v);
    else if (key == "method") c.method = parse_method(v);
    else if (key == "pilot") c.pilot = v;
    else if (key == "features") c.features = v;
    else if (key == "m_hat") c.m_hat = v;
    else if (key == "clip_eps") c.clip_eps = parse_real(key, v);
    else if (key == "ridge") c.ridge = parse_real(key, v);
    else if (key == "crossfit") c.crossfit = static_cast<int>(parse_long(key, v));
    else if (key == "stack_folds") c.stack_folds = static_cast<int>(parse_long(key, v));
    else if (key == "bart.num_trees") c.bart.num_trees = static_cast<int>(parse_long(key, v));
    else if (key == "bart.num_draws") c.bart.num_draws = static_cast<int>(parse_long(key, v));
    else if (key == "bart.burn_in") c.bart.burn_in = static_cast<int>(parse_long(key, v));
    else if (key == "bart.thin") c.bart.thin = static_cast<int>(parse_long(key, v));
    else if (key == "bart.split_base") c.bart.split_base = parse_real(key, v);
    else if (key == "bart.split_power") c.bart.split_power = parse_real(key, v);
    else if (key == "bart.sigma_df") c.bart.sigma_df = parse_real(key, v);
    else if (key == "bart.sigma_quantile") c.bart.sigma_quantile = parse_real(key, v);
    else if (key == "bart.leaf_sd_k") c.bart.leaf_sd_k = parse_real(key, v);
    else if (key == "bart.sparse") c.bart.sparse = parse_bool(key, v);
    else if (key == "bart.min_node_size") c.bart.min_node_size = static_cast<int>(parse_long(key, v));
    else if (key == "bart.move_grow") c.bart.moves.grow = parse_real(key, v);
    else if (key == "bart.move_prune") c.bart.moves.prune = parse_real(key, v);
    else if (key == "bart.move_change") c.bart.moves.change = parse_real(key, v);
    else if (key == "draws") c.draws = static_cast<int>(parse_long(key, v));
    else if (key == "alpha") c.alpha = parse_real(key, v);
    else if (key == "trim") c.trim = parse_real(key, v);
    else if (key == "input") c.input = v;
    else if (key == "output") c.output = v;
    else if (key == "schema.outcome") c.schema.outcome = v;
    else if (key == "schema.indicator") c.schema.indicator = v;
    else if (key == "schema.covariates") c.schema.covariates = split_list(v);
    else if (key == "schema.categorical") c.schema.categorical = split_list(v);
    else if (key == "design") c.design = v;
    else if (key == "n") c.n = v;
    else if (key == "reps") c.reps = static_cast<int>(parse_long(key, v));
    else if (key == "methods") c.methods = v;
    else if (key == "threads") c.threads = static_cast<int>(parse_long(key, v));
    else if (key == "profile") c.profile = v;
    else throw InvalidParameter(fmt::format("unknown config key '{}'", key));
  }
  return c;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InvalidParameter(fmt::format("config line {}: expected key=value", lineno));
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw InvalidParameter(fmt::format("config line {}: empty key", lineno));
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> read_key_values(const std::string& path) { return parse_key_values(read_text(path)); }

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void write_manifest(const std::string& path, const RunConfig& config, double runtime_seconds) {
  auto kv = config.to_map();
  kv["manifest.version"] = kVersion;
  kv["manifest.runtime_seconds"] = fmt::format("{:.3f}", runtime_seconds);
  write_text(path, "# robart run manifest; rerun with --config <this file>\n" + format_key_values(kv));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot open '{}' for writing", path));
  out << text;
  if (!out) throw DataError(fmt::format("failed writing '{}'", path));
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string drawset_csv(const DrawSet& ds) {
  std::string out = "draw_index,chi,b_hat,chi_corrected\n";
  for (std::size_t s = 0; s < ds.draws.size(); ++s) {
    const double chi = ds.has_components() ? ds.chi[s] : ds.draws[s];
    const double b = ds.has_components() ? ds.b_hat[s] : 0.0;
    out += fmt::format("{},{},{},{}\n", s, format_double(chi), format_double(b), format_double(ds.draws[s]));
  }
  return out;
}

DrawSet parse_drawset_csv(const std::string& text) {
  const CsvTable t = parse_csv_table(text);
  if (t.header != std::vector<std::string>{"draw_index", "chi", "b_hat", "chi_corrected"}) {
    throw DataError("draw CSV header not recognized");
  }
  DrawSet ds;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    ds.chi.push_back(parse_cell(t.rows[i][1], i + 1, "chi"));
    ds.b_hat.push_back(parse_cell(t.rows[i][2], i + 1, "b_hat"));
    ds.draws.push_back(parse_cell(t.rows[i][3], i + 1, "chi_corrected"));
  }
  return ds;
}

std::string pilot_csv(const Eigen::VectorXd& pi_hat, const Eigen::VectorXd& m_hat) {
  if (pi_hat.size() != m_hat.size()) throw DimensionMismatch("pilot columns differ in length");
  std::string out = "row,pi_hat,m_hat\n";
  for (Eigen::Index i = 0; i < pi_hat.size(); ++i) {
    out += fmt::format("{},{},{}\n", i, format_double(pi_hat[i]), format_double(m_hat[i]));
  }
  return out;
}

std::string fitted_draws_csv(const RowMatrix& fitted) {
  std::string out;
  for (Eigen::Index j = 0; j < fitted.cols(); ++j) out += (j ? "," : "") + std::to_string(j);
  out += "\n";
  for (Eigen::Index s = 0; s < fitted.rows(); ++s) {
    for (Eigen::Index j = 0; j < fitted.cols(); ++j) out += (j ? "," : "") + format_double(fitted(s, j));
    out += "\n";
  }
  return out;
}

std::string summary_json(const RunSummary& s) {
  nlohmann::ordered_json j;
  j["method"] = s.method;
  j["estimand"] = s.estimand;
  j["mean"] = s.interval.mean;
  j["lo"] = s.interval.lo;
  j["hi"] = s.interval.hi;
  j["cil"] = s.interval.length;
  j["alpha"] = s.alpha;
  j["S"] = s.draws;
  j["seed"] = s.seed;
  j["n"] = s.n;
  j["n_eff"] = s.effective_n;
  j["trim"] = s.trim;
  return j.dump(2) + "\n";
}

}  // namespace robart
