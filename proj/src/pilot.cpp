#include "robart/pilot.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

#include "robart/error.hpp"

namespace robart {

namespace {

struct RawColumn {
  int index;
  int group;
  bool continuous;
};

std::vector<RawColumn> raw_columns(const std::vector<ColumnInfo>& columns) {
  std::vector<RawColumn> out;
  std::vector<int> seen_groups;
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const auto& c = columns[j];
    if (c.kind == ColumnKind::Indicator) {
      // first indicator of a group is the reference level
      if (std::find(seen_groups.begin(), seen_groups.end(), c.group) == seen_groups.end()) {
        seen_groups.push_back(c.group);
        continue;
      }
    }
    out.push_back({static_cast<int>(j), c.group, c.kind == ColumnKind::Continuous});
  }
  return out;
}

void check_labels(std::span<const int> labels, Eigen::Index n) {
  if (static_cast<Eigen::Index>(labels.size()) != n) throw DimensionMismatch("labels length does not match rows");
  long ones = 0;
  for (int v : labels) {
    if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
    ones += v;
  }
  if (ones == 0 || ones == static_cast<long>(labels.size())) throw DataError("both classes must be present");
}

double clip(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

Eigen::VectorXd table_lookup(const PilotFit& fit, Eigen::Index rows) {
  if (fit.table.size() != rows) {
    throw DataError(fmt::format("pilot table holds {} rows, asked for {}", fit.table.size(), rows));
  }
  return fit.table;
}

std::span<const double> row_span(const Eigen::MatrixXd& X, Eigen::Index i, std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) buf[static_cast<std::size_t>(j)] = X(i, j);
  return buf;
}

}  // namespace

Eigen::MatrixXd FeatureMap::expand(const Eigen::MatrixXd& X, const std::vector<ColumnInfo>& columns) const {
  if (static_cast<Eigen::Index>(columns.size()) != X.cols()) {
    throw DimensionMismatch("column metadata does not match X");
  }
  const auto raw = raw_columns(columns);
  Eigen::MatrixXd F(X.rows(), dimension(columns));
  Eigen::Index k = 0;
  if (intercept) F.col(k++).setOnes();
  if (include_raw) {
    for (const auto& c : raw) F.col(k++) = X.col(c.index);
  }
  if (include_squares) {
    for (const auto& c : raw) {
      if (c.continuous) F.col(k++) = X.col(c.index).array().square();
    }
  }
  if (include_pairwise) {
    for (std::size_t a = 0; a < raw.size(); ++a) {
      for (std::size_t b = a + 1; b < raw.size(); ++b) {
        if (raw[a].group == raw[b].group) continue;
        F.col(k++) = X.col(raw[a].index).cwiseProduct(X.col(raw[b].index));
      }
    }
  }
  return F;
}

std::vector<std::string> FeatureMap::names(const std::vector<ColumnInfo>& columns) const {
  const auto raw = raw_columns(columns);
  std::vector<std::string> out;
  if (intercept) out.emplace_back("(intercept)");
  if (include_raw) {
    for (const auto& c : raw) out.push_back(columns[static_cast<std::size_t>(c.index)].name);
  }
  if (include_squares) {
    for (const auto& c : raw) {
      if (c.continuous) out.push_back(columns[static_cast<std::size_t>(c.index)].name + "^2");
    }
  }
  if (include_pairwise) {
    for (std::size_t a = 0; a < raw.size(); ++a) {
      for (std::size_t b = a + 1; b < raw.size(); ++b) {
        if (raw[a].group == raw[b].group) continue;
        out.push_back(columns[static_cast<std::size_t>(raw[a].index)].name + ":" +
                      columns[static_cast<std::size_t>(raw[b].index)].name);
      }
    }
  }
  return out;
}

int FeatureMap::dimension(const std::vector<ColumnInfo>& columns) const {
  const auto raw = raw_columns(columns);
  int q = intercept ? 1 : 0;
  if (include_raw) q += static_cast<int>(raw.size());
  if (include_squares) {
    for (const auto& c : raw) q += c.continuous ? 1 : 0;
  }
  if (include_pairwise) {
    for (std::size_t a = 0; a < raw.size(); ++a) {
      for (std::size_t b = a + 1; b < raw.size(); ++b) q += raw[a].group != raw[b].group ? 1 : 0;
    }
  }
  return q;
}

std::string to_string(PilotKind kind) {
  switch (kind) {
    case PilotKind::LogitIrls: return "logit-irls";
    case PilotKind::Stacked: return "stacked";
    case PilotKind::BartMean: return "bart-mean";
    case PilotKind::Oracle: return "oracle";
    case PilotKind::Ols: return "ols-expansion";
  }
  return "unknown";
}

double logistic(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

namespace {

// log(1 + e^t) without overflow
double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

}  // namespace

double logit_objective(const Eigen::MatrixXd& features, std::span<const int> labels, const Eigen::VectorXd& beta,
                       double ridge) {
  const Eigen::VectorXd eta = features * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    ll += labels[static_cast<std::size_t>(i)] * eta[i] - softplus(eta[i]);
  }
  return ll - 0.5 * ridge * beta.squaredNorm();
}

IrlsResult fit_logit_irls(const Eigen::MatrixXd& features, std::span<const int> labels, const IrlsOptions& options) {
  const Eigen::Index n = features.rows();
  const Eigen::Index q = features.cols();
  check_labels(labels, n);
  if (!(options.ridge >= 0.0) || !std::isfinite(options.ridge)) {
    throw InvalidParameter("IrlsOptions.ridge must be nonnegative and finite");
  }
  if (!(options.tol > 0.0)) throw InvalidParameter("IrlsOptions.tol must be positive");
  if (options.max_iter < 1) throw InvalidParameter("IrlsOptions.max_iter must be at least 1");
  if (q >= n && options.ridge == 0.0) {
    throw InvalidParameter(fmt::format("{} features for {} rows needs ridge > 0", q, n));
  }

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[static_cast<std::size_t>(i)];

  IrlsResult res;
  res.coefficients = Eigen::VectorXd::Zero(q);
  double obj = logit_objective(features, labels, res.coefficients, options.ridge);
  res.objective.push_back(obj);

  for (int it = 0; it <= options.max_iter; ++it) {
    const Eigen::VectorXd eta = features * res.coefficients;
    Eigen::VectorXd p(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p[i] = logistic(eta[i]);
      w[i] = p[i] * (1.0 - p[i]);
    }
    const Eigen::VectorXd score = features.transpose() * (y - p) - options.ridge * res.coefficients;
    res.score_norm = score.cwiseAbs().maxCoeff();
    res.iterations = it;
    if (res.score_norm < options.tol) {
      // a linear rule that classifies every row means no finite maximizer
      if (options.ridge == 0.0) {
        bool separated = true;
        for (Eigen::Index i = 0; i < n && separated; ++i) separated = y[i] == 1.0 ? eta[i] > 0.0 : eta[i] < 0.0;
        if (separated) throw ConvergenceError("classes are separated; the logistic fit has no finite maximizer");
      }
      return res;
    }
    if (it == options.max_iter) break;

    Eigen::MatrixXd H = features.transpose() * w.asDiagonal() * features;
    H.diagonal().array() += options.ridge;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw ConvergenceError("logistic Hessian is singular; add a ridge penalty");
    }
    const Eigen::VectorXd step = ldlt.solve(score);

    // near the optimum the gain of a Newton step falls below the rounding
    // level of the objective; changes within that slack count as ascent
    const double slack = kObjectiveSlack * (1.0 + std::abs(obj));
    double t = 1.0;
    Eigen::VectorXd next;
    double next_obj = -std::numeric_limits<double>::infinity();
    for (int h = 0; h < 50; ++h, t *= 0.5) {
      next = res.coefficients + t * step;
      next_obj = logit_objective(features, labels, next, options.ridge);
      if (next_obj >= obj - slack) break;
    }
    if (!(next_obj >= obj - slack)) {
      throw ConvergenceError(fmt::format("logistic fit stalled with max |score| {:.3g}", res.score_norm));
    }
    res.coefficients = next;
    obj = next_obj;
    res.objective.push_back(obj);
    if (res.coefficients.norm() > 1e6) {
      throw ConvergenceError("logistic coefficients diverge (separated classes); add a ridge penalty");
    }
  }
  throw ConvergenceError(
      fmt::format("logistic fit did not converge in {} iterations; max |score| {:.3g}", options.max_iter,
                  res.score_norm));
}

PilotFit fit_logit_pilot(const Eigen::MatrixXd& X, const std::vector<ColumnInfo>& columns,
                         std::span<const int> labels, const FeatureMap& features, const IrlsOptions& options,
                         double clip_eps) {
  if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw InvalidParameter("clip_eps must lie in (0, 0.5)");
  PilotFit fit;
  fit.kind = PilotKind::LogitIrls;
  fit.features = features;
  fit.columns = columns;
  fit.clip_eps = clip_eps;
  fit.coefficients = fit_logit_irls(features.expand(X, columns), labels, options).coefficients;
  return fit;
}

Eigen::VectorXd predict_propensity(const PilotFit& fit, const Eigen::MatrixXd& X) {
  Eigen::VectorXd p(X.rows());
  switch (fit.kind) {
    case PilotKind::LogitIrls: {
      const Eigen::VectorXd eta = fit.features.expand(X, fit.columns) * fit.coefficients;
      for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = logistic(eta[i]);
      break;
    }
    case PilotKind::Stacked:
    case PilotKind::BartMean:
      p = table_lookup(fit, X.rows());
      break;
    case PilotKind::Oracle: {
      std::vector<double> buf;
      for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = fit.oracle(row_span(X, i, buf));
      break;
    }
    case PilotKind::Ols:
      throw InvalidParameter("an outcome regression cannot serve as a propensity");
  }
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = clip(p[i], fit.clip_eps);
  return p;
}

double predict_propensity(const PilotFit& fit, Eigen::Index row, std::span<const double> x) {
  double p = 0.0;
  switch (fit.kind) {
    case PilotKind::LogitIrls: {
      Eigen::MatrixXd one(1, static_cast<Eigen::Index>(x.size()));
      for (std::size_t j = 0; j < x.size(); ++j) one(0, static_cast<Eigen::Index>(j)) = x[j];
      p = logistic((fit.features.expand(one, fit.columns) * fit.coefficients)(0));
      break;
    }
    case PilotKind::Stacked:
    case PilotKind::BartMean:
      if (row < 0 || row >= fit.table.size()) throw DataError(fmt::format("unknown row id {}", row));
      p = fit.table[row];
      break;
    case PilotKind::Oracle:
      p = fit.oracle(x);
      break;
    case PilotKind::Ols:
      throw InvalidParameter("an outcome regression cannot serve as a propensity");
  }
  return clip(p, fit.clip_eps);
}

Eigen::VectorXd predict_outcome(const PilotFit& fit, const Eigen::MatrixXd& X) {
  switch (fit.kind) {
    case PilotKind::Ols:
      return fit.features.expand(X, fit.columns) * fit.coefficients;
    case PilotKind::BartMean:
    case PilotKind::Stacked:
      return table_lookup(fit, X.rows());
    case PilotKind::Oracle: {
      Eigen::VectorXd m(X.rows());
      std::vector<double> buf;
      for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = fit.oracle(row_span(X, i, buf));
      return m;
    }
    case PilotKind::LogitIrls:
      break;
  }
  throw InvalidParameter("a propensity fit cannot serve as an outcome regression");
}

double riesz_representer(RieszMode mode, int indicator, double pi_hat, std::optional<double> pi_bar) {
  if (indicator != 0 && indicator != 1) throw InvalidParameter("indicator must be 0 or 1");
  if (!(pi_hat > 0.0 && pi_hat < 1.0)) throw InvalidParameter("pi_hat must lie in (0, 1)");
  switch (mode) {
    case RieszMode::MeanResponse:
      return indicator / pi_hat;
    case RieszMode::Ate:
      return indicator / pi_hat - (1 - indicator) / (1.0 - pi_hat);
    case RieszMode::Att: {
      if (!pi_bar || !(*pi_bar > 0.0 && *pi_bar < 1.0)) throw InvalidParameter("pi_bar must lie in (0, 1)");
      const double pb = *pi_bar;
      return indicator / pb - ((1 - indicator) / pb) * pi_hat / (1.0 - pi_hat);
    }
  }
  return 0.0;
}

PilotFit fit_outcome_pilot(const Eigen::MatrixXd& X_train, const Eigen::VectorXd& y_train,
                           const Eigen::MatrixXd& X_eval, const std::vector<ColumnInfo>& columns,
                           const OutcomePilotOptions& options, RngStream& rng) {
  if (X_train.rows() == 0) throw DataError("outcome pilot needs at least one observed row");
  if (y_train.size() != X_train.rows()) throw DimensionMismatch("y length does not match X rows");
  if (X_eval.cols() != X_train.cols()) throw DimensionMismatch("evaluation matrix has wrong column count");

  PilotFit fit;
  fit.columns = columns;
  fit.features = options.features;
  if (options.method == OutcomePilotMethod::BartMean) {
    fit.kind = PilotKind::BartMean;
    const double lo = y_train.minCoeff();
    const double hi = y_train.maxCoeff();
    if (lo == hi) {
      fit.table = Eigen::VectorXd::Constant(X_eval.rows(), lo);
      return fit;
    }
    const auto draws = run_bart_regression(X_train, y_train, options.bart, rng, &X_eval);
    fit.table = draws.mean_fitted_test();
    return fit;
  }

  fit.kind = PilotKind::Ols;
  const Eigen::MatrixXd F = options.features.expand(X_train, columns);
  if (options.ridge > 0.0) {
    Eigen::MatrixXd G = F.transpose() * F;
    G.diagonal().array() += options.ridge;
    fit.coefficients = G.ldlt().solve(F.transpose() * y_train);
  } else {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(F);
    if (qr.rank() < F.cols()) {
      throw DataError(fmt::format("expanded design is rank deficient ({} of {} columns); add a ridge penalty",
                                  qr.rank(), F.cols()));
    }
    fit.coefficients = qr.solve(y_train);
  }
  return fit;
}

PropensityLearner logit_learner(std::vector<ColumnInfo> columns, FeatureMap features, IrlsOptions options) {
  return [columns = std::move(columns), features, options](const Eigen::MatrixXd& X_train,
                                                            std::span<const int> labels,
                                                            const Eigen::MatrixXd& X_eval, RngStream&) {
    const auto coef = fit_logit_irls(features.expand(X_train, columns), labels, options).coefficients;
    Eigen::VectorXd eta = features.expand(X_eval, columns) * coef;
    return Eigen::VectorXd(eta.unaryExpr([](double t) { return logistic(t); }));
  };
}

PropensityLearner bart_probability_learner(BartConfig config) {
  return [config](const Eigen::MatrixXd& X_train, std::span<const int> labels, const Eigen::MatrixXd& X_eval,
                  RngStream& rng) {
    return run_bart_binary(X_train, labels, config, rng, &X_eval).mean_fitted_test();
  };
}

double log_loss(const Eigen::VectorXd& prob, std::span<const int> labels) {
  constexpr double kFloor = 1e-12;
  double total = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(prob[i], kFloor, 1.0 - kFloor);
    total -= labels[static_cast<std::size_t>(i)] == 1 ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(prob.size());
}

std::vector<double> best_stack_weights(const std::vector<Eigen::VectorXd>& predictions, std::span<const int> labels,
                                       int grid_steps) {
  const int K = static_cast<int>(predictions.size());
  if (K < 1) throw InvalidParameter("stacking needs at least one candidate");
  if (grid_steps < 1) throw InvalidParameter("grid_steps must be positive");
  for (const auto& p : predictions) {
    if (p.size() != static_cast<Eigen::Index>(labels.size())) throw DimensionMismatch("prediction length mismatch");
  }

  std::vector<int> w(static_cast<std::size_t>(K), 0);
  std::vector<int> best;
  double best_loss = std::numeric_limits<double>::infinity();
  Eigen::VectorXd mix(static_cast<Eigen::Index>(labels.size()));

  // w[0..K-2] enumerated lexicographically; w[K-1] takes the remainder
  auto visit = [&]() {
    mix.setZero();
    for (int k = 0; k < K; ++k) {
      if (w[static_cast<std::size_t>(k)] > 0) {
        mix += (static_cast<double>(w[static_cast<std::size_t>(k)]) / grid_steps) * predictions[static_cast<std::size_t>(k)];
      }
    }
    const double loss = log_loss(mix, labels);
    if (loss < best_loss) {
      best_loss = loss;
      best = w;
    }
  };
  auto recurse = [&](auto&& self, int k, int remaining) -> void {
    if (k == K - 1) {
      w[static_cast<std::size_t>(k)] = remaining;
      visit();
      return;
    }
    for (int v = 0; v <= remaining; ++v) {
      w[static_cast<std::size_t>(k)] = v;
      self(self, k + 1, remaining - v);
    }
  };
  recurse(recurse, 0, grid_steps);

  std::vector<double> out(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) out[static_cast<std::size_t>(k)] = static_cast<double>(best[static_cast<std::size_t>(k)]) / grid_steps;
  return out;
}

std::vector<int> stratified_folds(std::span<const int> labels, int folds, RngStream& rng) {
  if (folds < 2) throw InvalidParameter("folds must be at least 2");
  const auto n = labels.size();
  std::vector<int> fold_of(n);
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    if (static_cast<int>(idx.size()) < folds) {
      throw DataError(fmt::format("class {} has {} rows, too few for {} folds", cls, idx.size(), folds));
    }
    for (std::size_t k = idx.size(); k > 1; --k) {
      const auto j = std::min(static_cast<std::size_t>(rng.uniform() * static_cast<double>(k)), k - 1);
      std::swap(idx[k - 1], idx[j]);
    }
    for (std::size_t k = 0; k < idx.size(); ++k) fold_of[idx[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  }
  return fold_of;
}

namespace {

struct FoldSplit {
  std::vector<Eigen::Index> train, test;
  std::vector<int> train_labels;
};

FoldSplit split_fold(const std::vector<int>& fold_of, std::span<const int> labels, int f) {
  FoldSplit s;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == f) {
      s.test.push_back(static_cast<Eigen::Index>(i));
    } else {
      s.train.push_back(static_cast<Eigen::Index>(i));
      s.train_labels.push_back(labels[i]);
    }
  }
  return s;
}

}  // namespace

Eigen::VectorXd crossfit_propensity(const PropensityLearner& learner, const Eigen::MatrixXd& X,
                                    std::span<const int> labels, int folds, RngStream& rng, double clip_eps) {
  check_labels(labels, X.rows());
  if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw InvalidParameter("clip_eps must lie in (0, 0.5)");
  const std::vector<int> fold_of = stratified_folds(labels, folds, rng);
  Eigen::VectorXd out(X.rows());
  for (int f = 0; f < folds; ++f) {
    const FoldSplit s = split_fold(fold_of, labels, f);
    RngStream sub = rng.child(static_cast<std::uint64_t>(f));
    const Eigen::VectorXd pred = learner(select_rows(X, s.train), s.train_labels, select_rows(X, s.test), sub);
    for (std::size_t t = 0; t < s.test.size(); ++t) out[s.test[t]] = clip(pred[static_cast<Eigen::Index>(t)], clip_eps);
  }
  return out;
}

PilotFit stack_pilots(const std::vector<PropensityLearner>& learners, const Eigen::MatrixXd& X,
                      std::span<const int> labels, int folds, RngStream& rng, double clip_eps) {
  if (learners.size() < 2) throw InvalidParameter("stacking needs at least two candidates");
  if (folds < 2) throw InvalidParameter("folds must be at least 2");
  if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw InvalidParameter("clip_eps must lie in (0, 0.5)");
  const Eigen::Index n = X.rows();
  check_labels(labels, n);

  const std::vector<int> fold_of = stratified_folds(labels, folds, rng);

  const std::size_t L = learners.size();
  std::vector<Eigen::VectorXd> oof(L, Eigen::VectorXd::Zero(n));
  for (int f = 0; f < folds; ++f) {
    const FoldSplit s = split_fold(fold_of, labels, f);
    const Eigen::MatrixXd Xtr = select_rows(X, s.train);
    const Eigen::MatrixXd Xte = select_rows(X, s.test);
    for (std::size_t k = 0; k < L; ++k) {
      RngStream sub = rng.child(static_cast<std::uint64_t>(f) * L + k);
      const Eigen::VectorXd pred = learners[k](Xtr, s.train_labels, Xte, sub);
      for (std::size_t t = 0; t < s.test.size(); ++t) oof[k][s.test[t]] = pred[static_cast<Eigen::Index>(t)];
    }
  }

  PilotFit fit;
  fit.kind = PilotKind::Stacked;
  fit.clip_eps = clip_eps;
  fit.stack_weights = best_stack_weights(oof, labels);
  fit.table = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < L; ++k) {
    if (fit.stack_weights[k] == 0.0) continue;
    RngStream sub = rng.child(static_cast<std::uint64_t>(folds) * L + k);
    fit.table += fit.stack_weights[k] * learners[k](X, labels, X, sub);
  }
  return fit;
}

PropensityLearner stacked_learner(std::vector<PropensityLearner> learners, int folds) {
  return [learners = std::move(learners), folds](const Eigen::MatrixXd& X_train, std::span<const int> labels,
                                                 const Eigen::MatrixXd& X_eval, RngStream& rng) {
    const PilotFit inner = stack_pilots(learners, X_train, labels, folds, rng);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(X_eval.rows());
    for (std::size_t k = 0; k < learners.size(); ++k) {
      if (inner.stack_weights[k] == 0.0) continue;
      RngStream sub = rng.child(1000 + k);
      out += inner.stack_weights[k] * learners[k](X_train, labels, X_eval, sub);
    }
    return out;
  };
}

}  // namespace robart
