#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

namespace robart {

enum class ColumnKind { Continuous, Binary, Indicator };

/// Numeric covariate column as seen by the estimators. One-hot indicator
/// columns of the same categorical variable share a group id.
struct ColumnInfo {
  std::string name;
  int group = 0;
  ColumnKind kind = ColumnKind::Continuous;
};

/// Columns named x1..xp, each continuous and in its own group.
std::vector<ColumnInfo> default_columns(int p);

/// Rows (y, r, x): y is only meaningful where r == 1 and is stored as NaN
/// elsewhere.
struct MissingDataset {
  Eigen::MatrixXd X;
  std::vector<ColumnInfo> columns;
  Eigen::VectorXd y;
  std::vector<int> r;

  Eigen::Index n() const { return X.rows(); }
  /// Outcome of an observed row. Reading an unobserved outcome is an
  /// identification error and throws.
  double outcome(Eigen::Index i) const;
  std::vector<Eigen::Index> observed_rows() const;
  std::vector<Eigen::Index> missing_rows() const;
  /// Throws DataError when the masking or size invariants fail.
  void validate() const;
};

/// Rows (y, d, x) for treatment-effect estimands.
struct TreatmentDataset {
  Eigen::MatrixXd X;
  std::vector<ColumnInfo> columns;
  Eigen::VectorXd y;
  std::vector<int> d;

  Eigen::Index n() const { return X.rows(); }
  std::vector<Eigen::Index> treated_rows() const;
  std::vector<Eigen::Index> control_rows() const;
  double treated_share() const;
  void validate() const;
  TreatmentDataset subset(std::span<const Eigen::Index> rows) const;
};

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& X, std::span<const Eigen::Index> rows);
Eigen::VectorXd select_rows(const Eigen::VectorXd& v, std::span<const Eigen::Index> rows);

}  // namespace robart
