#pragma once

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robart/bart.hpp"
#include "robart/data.hpp"
#include "robart/rng.hpp"

namespace robart {

/// Polynomial feature expansion used by the parametric pilots.
///
/// Raw columns drop the first indicator of every categorical group (it is
/// the reference level); squares are taken of continuous columns only;
/// pairwise products are formed between raw columns of different groups.
struct FeatureMap {
  bool intercept = true;
  bool include_raw = true;
  bool include_squares = true;
  bool include_pairwise = true;

  static FeatureMap linear() { return {true, true, false, false}; }
  static FeatureMap quadratic() { return {}; }

  Eigen::MatrixXd expand(const Eigen::MatrixXd& X, const std::vector<ColumnInfo>& columns) const;
  std::vector<std::string> names(const std::vector<ColumnInfo>& columns) const;
  int dimension(const std::vector<ColumnInfo>& columns) const;
};

enum class PilotKind { LogitIrls, Stacked, BartMean, Oracle, Ols };

std::string to_string(PilotKind kind);

/// A fitted pilot for a propensity or an outcome regression.
///
/// Parametric kinds keep coefficients over the feature map; tabulated kinds
/// (stacked, bart-mean) keep one prediction per row id; the oracle kind
/// evaluates a known function of the covariate row.
struct PilotFit {
  PilotKind kind = PilotKind::LogitIrls;
  FeatureMap features;
  std::vector<ColumnInfo> columns;
  Eigen::VectorXd coefficients;
  Eigen::VectorXd table;
  std::vector<double> stack_weights;
  std::function<double(std::span<const double>)> oracle;
  double clip_eps = 0.01;
};

/// Ridge used by the propensity pilots unless overridden.
inline constexpr double kPilotRidge = 1e-3;

struct IrlsOptions {
  double ridge = 0.0;
  double tol = 1e-8;
  int max_iter = 100;
};

/// Relative rounding slack of the step acceptance test; the recorded
/// objective never decreases by more than this times (1 + |objective|).
inline constexpr double kObjectiveSlack = 1e-12;

struct IrlsResult {
  Eigen::VectorXd coefficients;
  int iterations = 0;
  double score_norm = 0.0;
  /// Penalized log-likelihood after each accepted step (nondecreasing).
  std::vector<double> objective;
};

/// Logistic link 1 / (1 + e^-t).
double logistic(double t);

/// Penalized log-likelihood sum_i [y_i eta_i - log(1 + e^eta_i)] - ridge/2 |b|^2.
double logit_objective(const Eigen::MatrixXd& features, std::span<const int> labels,
                       const Eigen::VectorXd& beta, double ridge);

/// Newton-Raphson (IRLS) with step halving; stops when the max abs score of
/// the penalized objective drops below tol.
IrlsResult fit_logit_irls(const Eigen::MatrixXd& features, std::span<const int> labels,
                          const IrlsOptions& options = {});

/// Quadratic-with-interactions logistic propensity pilot.
PilotFit fit_logit_pilot(const Eigen::MatrixXd& X, const std::vector<ColumnInfo>& columns,
                         std::span<const int> labels, const FeatureMap& features = FeatureMap::quadratic(),
                         const IrlsOptions& options = {kPilotRidge}, double clip_eps = 0.01);

/// Clipped propensity for every row of X (row ids are row positions).
Eigen::VectorXd predict_propensity(const PilotFit& fit, const Eigen::MatrixXd& X);
double predict_propensity(const PilotFit& fit, Eigen::Index row, std::span<const double> x);

/// Unclipped outcome prediction for every row of X.
Eigen::VectorXd predict_outcome(const PilotFit& fit, const Eigen::MatrixXd& X);

enum class RieszMode { MeanResponse, Ate, Att };

/// mean-response: r / pi; ate: d / pi - (1 - d) / (1 - pi);
/// att: d / pi_bar - ((1 - d) / pi_bar) * pi / (1 - pi).
double riesz_representer(RieszMode mode, int indicator, double pi_hat,
                         std::optional<double> pi_bar = std::nullopt);

enum class OutcomePilotMethod { BartMean, OlsExpansion };

struct OutcomePilotOptions {
  OutcomePilotMethod method = OutcomePilotMethod::BartMean;
  BartConfig bart;
  FeatureMap features = FeatureMap::quadratic();
  double ridge = 0.0;
};

/// Outcome regression trained on (X_train, y_train) with predictions
/// tabulated (bart-mean) or computable (ols) at every row of X_eval.
PilotFit fit_outcome_pilot(const Eigen::MatrixXd& X_train, const Eigen::VectorXd& y_train,
                           const Eigen::MatrixXd& X_eval, const std::vector<ColumnInfo>& columns,
                           const OutcomePilotOptions& options, RngStream& rng);

/// Fits on (X_train, labels) and returns probabilities at X_eval.
using PropensityLearner = std::function<Eigen::VectorXd(
    const Eigen::MatrixXd& X_train, std::span<const int> labels, const Eigen::MatrixXd& X_eval, RngStream& rng)>;

PropensityLearner logit_learner(std::vector<ColumnInfo> columns, FeatureMap features = FeatureMap::quadratic(),
                                IrlsOptions options = {kPilotRidge});
PropensityLearner bart_probability_learner(BartConfig config);

/// Convex weights on the 0.01 simplex grid minimizing the log-loss of the
/// weighted average of the candidate predictions. Enumeration is
/// lexicographic in the integer weights; the first minimizer wins.
std::vector<double> best_stack_weights(const std::vector<Eigen::VectorXd>& predictions,
                                       std::span<const int> labels, int grid_steps = 100);

double log_loss(const Eigen::VectorXd& prob, std::span<const int> labels);

/// Stratified fold ids in [0, folds): each class is shuffled and dealt
/// round-robin. Throws DataError when a class has fewer rows than folds.
std::vector<int> stratified_folds(std::span<const int> labels, int folds, RngStream& rng);

/// Out-of-fold propensities: row i is predicted by a learner fit without
/// fold(i). Clipped to [clip_eps, 1 - clip_eps].
Eigen::VectorXd crossfit_propensity(const PropensityLearner& learner, const Eigen::MatrixXd& X,
                                    std::span<const int> labels, int folds, RngStream& rng, double clip_eps = 0.01);

/// Learner that stacks the given learners on its own training rows (weights
/// from an inner K-fold search) and predicts the weighted mixture.
PropensityLearner stacked_learner(std::vector<PropensityLearner> learners, int folds);

/// K-fold cross-validated stacking of propensity learners. Folds are
/// stratified by label; every fold must hold both classes.
PilotFit stack_pilots(const std::vector<PropensityLearner>& learners, const Eigen::MatrixXd& X,
                      std::span<const int> labels, int folds, RngStream& rng, double clip_eps = 0.01);

}  // namespace robart
