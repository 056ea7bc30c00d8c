#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robart/bart.hpp"
#include "robart/correction.hpp"
#include "robart/data.hpp"
#include "robart/rng.hpp"

namespace robart {

enum class DesignId { I, II, III, IV, Linear };

/// Simulation design on the encoded covariate row
/// (x1, x2, x3, x4, 1{x5=1}, 1{x5=2}, 1{x5=3}).
struct DesignSpec {
  DesignId id = DesignId::I;

  std::string name() const;
  /// Linear index of the propensity; pi(x) = logistic(e(x)).
  double e(std::span<const double> x) const;
  double m(std::span<const double> x) const;
  double propensity(std::span<const double> x) const;
};

DesignSpec design(DesignId id);
DesignSpec parse_design(const std::string& name);

/// h(x5) = 2 1{x5=1} - 1{x5=2} - 0.5 1{x5=3} on the encoded row.
double design_h(std::span<const double> x);

/// n x 5 raw covariates: x1..x3 ~ N(0,1), x4 ~ Bernoulli(0.5), x5 uniform on {1,2,3}.
Eigen::MatrixXd gen_covariates(Eigen::Index n, RngStream& rng);
/// One-hot expansion of x5 into three indicator columns.
Eigen::MatrixXd encode_covariates(const Eigen::MatrixXd& raw);
std::vector<ColumnInfo> encoded_columns();

/// A simulated dataset together with the truth that estimators never see.
struct SimulatedMissing {
  MissingDataset data;
  Eigen::MatrixXd raw;
  Eigen::VectorXd y_full;
  Eigen::VectorXd m0;
  Eigen::VectorXd pi0;
};

SimulatedMissing gen_missing_data(Eigen::Index n, const DesignSpec& design, RngStream& rng);

/// E[m(X)] under the covariate law.
double true_mean(const DesignSpec& design);

/// Methods the harness knows: plugin, onestep, robart-logit, robart-stacked,
/// robart-oracle.
enum class MCMethod { Plugin, OneStep, RoBartLogit, RoBartStacked, RoBartOracle };

std::string to_string(MCMethod method);
MCMethod parse_mc_method(const std::string& name);
std::vector<MCMethod> parse_mc_methods(const std::string& comma_list);

struct MCConfig {
  DesignId design = DesignId::II;
  Eigen::Index n = 250;
  int reps = 200;
  std::vector<MCMethod> methods{MCMethod::Plugin, MCMethod::RoBartLogit};
  BartConfig bart = desk_bart();
  /// Probit chain used inside the stacked propensity pilot.
  BartConfig pilot_bart = stack_bart();
  double alpha = 0.05;
  double clip_eps = 0.01;
  int stack_folds = 5;
  std::uint64_t seed = 42;
  int threads = 1;

  static BartConfig desk_bart();
  static BartConfig paper_bart();
  static BartConfig stack_bart();
  void validate() const;
};

struct MCCell {
  std::string design;
  long n = 0;
  std::string method;
  double bias = 0.0;  // |mean posterior mean - truth|
  double signed_bias = 0.0;
  double cp = 0.0;
  double cp_se = 0.0;
  double cil = 0.0;
  long replications = 0;
  long failures = 0;
};

/// Per-replication summaries, one entry per method in config order.
struct ReplicationRecord {
  bool failed = false;
  std::string error;
  std::vector<double> mean;
  std::vector<double> lo;
  std::vector<double> hi;
};

struct MCReport {
  std::vector<MCCell> cells;
  std::vector<ReplicationRecord> replications;
  double truth = 0.0;
  double runtime_seconds = 0.0;
};

/// One replication: dataset from child 0, outcome chain child 1, probit chain
/// child 2, stacked pilot child 3, bootstrap weights child 4 (shared by all
/// methods).
ReplicationRecord run_replication(const MCConfig& config, RngStream stream);

/// Replication r uses derive_stream(seed, r); results are reduced in
/// replication order so the report is independent of the thread count.
/// Throws Error when more than 1% of replications fail.
MCReport run_mc(const MCConfig& config);

/// Summaries over the non-failed records.
std::vector<MCCell> summarize(const MCConfig& config, const std::vector<ReplicationRecord>& records, double truth);

enum class ReportStyle { Markdown, Csv };

/// Markdown: one row per (n, method), Bias/CP/CIL grouped by design, three
/// decimals. CSV: one line per cell, full precision.
std::string format_report(const MCReport& report, ReportStyle style);
MCReport parse_report_csv(const std::string& text);

}  // namespace robart
