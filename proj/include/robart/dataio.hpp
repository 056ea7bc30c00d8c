#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "robart/bart.hpp"
#include "robart/correction.hpp"
#include "robart/data.hpp"

namespace robart {

/// Column roles of an input CSV. An empty covariate list takes every column
/// that is not the outcome or the indicator.
struct CsvSchema {
  std::string outcome;
  std::string indicator;
  std::vector<std::string> covariates;
  std::vector<std::string> categorical;
};

/// Parsed table: header names and cells as text.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv_table(const std::string& path);
CsvTable parse_csv_table(const std::string& text);

/// Categorical columns become one indicator per level in order of first
/// appearance. Blank outcomes are allowed only where the indicator is 0.
MissingDataset load_missing_csv(const std::string& path, const CsvSchema& schema);
TreatmentDataset load_treatment_csv(const std::string& path, const CsvSchema& schema);
MissingDataset to_missing_dataset(const CsvTable& table, const CsvSchema& schema);
TreatmentDataset to_treatment_dataset(const CsvTable& table, const CsvSchema& schema);

struct TrimResult {
  TreatmentDataset data;
  std::vector<Eigen::Index> kept;
  Eigen::Index effective_n = 0;
};

/// Keeps rows with t <= pi_hat <= 1 - t.
TrimResult trim_by_propensity(const TreatmentDataset& data, const Eigen::VectorXd& pi_hat, double t);

/// Flat key=value run configuration. Lines starting with '#' are comments.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 42;
  Estimand estimand = Estimand::Mean;
  Method method = Method::RoBart;
  std::string pilot = "logit";         // logit | stacked
  std::string features = "quadratic";  // quadratic | linear
  std::string m_hat = "chain";         // chain | bart-mean | ols
  double clip_eps = 0.01;
  double ridge = 1e-3;
  int crossfit = 0;
  int stack_folds = 5;
  BartConfig bart;
  int draws = 0;  // 0 keeps every retained draw
  double alpha = 0.05;
  double trim = 0.0;
  std::string input;
  std::string output;
  CsvSchema schema;
  // simulate
  std::string design = "II";  // comma list of designs
  std::string n = "250";  // comma list of sample sizes
  int reps = 200;
  std::string methods = "plugin,onestep,robart-logit,robart-stacked";
  int threads = 1;
  std::string profile = "desk";

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  /// Unknown keys are an error, except those under "manifest.".
  static RunConfig from_map(const std::map<std::string, std::string>& kv, RunConfig base);
  static RunConfig from_map(const std::map<std::string, std::string>& kv) { return from_map(kv, RunConfig{}); }
};

std::map<std::string, std::string> parse_key_values(const std::string& text);
std::map<std::string, std::string> read_key_values(const std::string& path);
std::string format_key_values(const std::map<std::string, std::string>& kv);

/// Config echo plus manifest.* entries (version, runtime). Feeding the file
/// back through --config reproduces the run.
void write_manifest(const std::string& path, const RunConfig& config, double runtime_seconds);

std::string format_double(double v);  // %.17g
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

/// draw_index,chi,b_hat,chi_corrected
std::string drawset_csv(const DrawSet& draws);
DrawSet parse_drawset_csv(const std::string& text);
/// row,pi_hat,m_hat
std::string pilot_csv(const Eigen::VectorXd& pi_hat, const Eigen::VectorXd& m_hat);
/// Header of observation ids, one line per draw.
std::string fitted_draws_csv(const RowMatrix& fitted);

struct RunSummary {
  std::string method;
  std::string estimand;
  Interval interval;
  std::size_t draws = 0;
  std::uint64_t seed = 0;
  Eigen::Index n = 0;
  Eigen::Index effective_n = 0;
  double trim = 0.0;
  double alpha = 0.05;
};

std::string summary_json(const RunSummary& summary);

extern const char* const kVersion;

}  // namespace robart
