#include "robart/data.hpp"

#include <cmath>
#include <fmt/format.h>

#include "robart/error.hpp"

namespace robart {

std::vector<ColumnInfo> default_columns(int p) {
  std::vector<ColumnInfo> cols;
  for (int j = 0; j < p; ++j) cols.push_back({fmt::format("x{}", j + 1), j, ColumnKind::Continuous});
  return cols;
}

double MissingDataset::outcome(Eigen::Index i) const {
  if (r[static_cast<std::size_t>(i)] != 1) {
    throw DataError(fmt::format("outcome of row {} is unobserved (r = 0)", i));
  }
  return y[i];
}

std::vector<Eigen::Index> MissingDataset::observed_rows() const {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < n(); ++i) {
    if (r[static_cast<std::size_t>(i)] == 1) rows.push_back(i);
  }
  return rows;
}

std::vector<Eigen::Index> MissingDataset::missing_rows() const {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < n(); ++i) {
    if (r[static_cast<std::size_t>(i)] == 0) rows.push_back(i);
  }
  return rows;
}

void MissingDataset::validate() const {
  if (y.size() != n() || static_cast<Eigen::Index>(r.size()) != n()) {
    throw DataError("dataset columns have inconsistent lengths");
  }
  if (!columns.empty() && static_cast<Eigen::Index>(columns.size()) != X.cols()) {
    throw DataError("column metadata does not match X");
  }
  bool any_observed = false;
  for (Eigen::Index i = 0; i < n(); ++i) {
    const int ri = r[static_cast<std::size_t>(i)];
    if (ri != 0 && ri != 1) throw DataError(fmt::format("row {}: indicator must be 0 or 1", i));
    if (ri == 1 && !std::isfinite(y[i])) throw DataError(fmt::format("row {}: observed outcome is missing", i));
    if (ri == 0 && !std::isnan(y[i])) throw DataError(fmt::format("row {}: unobserved outcome must be empty", i));
    any_observed = any_observed || ri == 1;
  }
  if (!any_observed) throw DataError("no observed outcomes");
  if (!X.allFinite()) throw DataError("covariates contain non-finite values");
}

std::vector<Eigen::Index> TreatmentDataset::treated_rows() const {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < n(); ++i) {
    if (d[static_cast<std::size_t>(i)] == 1) rows.push_back(i);
  }
  return rows;
}

std::vector<Eigen::Index> TreatmentDataset::control_rows() const {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < n(); ++i) {
    if (d[static_cast<std::size_t>(i)] == 0) rows.push_back(i);
  }
  return rows;
}

double TreatmentDataset::treated_share() const {
  double total = 0.0;
  for (int di : d) total += di;
  return total / static_cast<double>(n());
}

void TreatmentDataset::validate() const {
  if (y.size() != n() || static_cast<Eigen::Index>(d.size()) != n()) {
    throw DataError("dataset columns have inconsistent lengths");
  }
  if (!columns.empty() && static_cast<Eigen::Index>(columns.size()) != X.cols()) {
    throw DataError("column metadata does not match X");
  }
  long treated = 0;
  for (Eigen::Index i = 0; i < n(); ++i) {
    const int di = d[static_cast<std::size_t>(i)];
    if (di != 0 && di != 1) throw DataError(fmt::format("row {}: treatment must be 0 or 1", i));
    if (!std::isfinite(y[i])) throw DataError(fmt::format("row {}: outcome is missing", i));
    treated += di;
  }
  if (treated == 0 || treated == n()) throw DataError("both treatment arms must be nonempty");
  if (!X.allFinite()) throw DataError("covariates contain non-finite values");
}

TreatmentDataset TreatmentDataset::subset(std::span<const Eigen::Index> rows) const {
  TreatmentDataset out;
  out.X = select_rows(X, rows);
  out.columns = columns;
  out.y = select_rows(y, rows);
  for (auto i : rows) out.d.push_back(d[static_cast<std::size_t>(i)]);
  return out;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& X, std::span<const Eigen::Index> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = X.row(rows[k]);
  return out;
}

Eigen::VectorXd select_rows(const Eigen::VectorXd& v, std::span<const Eigen::Index> rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[rows[k]];
  return out;
}

}  // namespace robart
