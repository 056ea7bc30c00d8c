#include "robart/correction.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "robart/error.hpp"
#include "robart/pilot.hpp"

namespace robart {

std::string to_string(Method method) {
  switch (method) {
    case Method::PluginBart: return "plugin-bart";
    case Method::OneStep: return "onestep";
    case Method::RoBart: return "robart";
  }
  return "unknown";
}

std::string to_string(Estimand estimand) {
  switch (estimand) {
    case Estimand::Mean: return "mean";
    case Estimand::Ate: return "ate";
    case Estimand::Att: return "att";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "plugin-bart" || name == "plugin") return Method::PluginBart;
  if (name == "onestep") return Method::OneStep;
  if (name == "robart") return Method::RoBart;
  throw InvalidParameter(fmt::format("unknown method '{}'", name));
}

Estimand parse_estimand(const std::string& name) {
  if (name == "mean") return Estimand::Mean;
  if (name == "ate") return Estimand::Ate;
  if (name == "att") return Estimand::Att;
  throw InvalidParameter(fmt::format("unknown estimand '{}'", name));
}

void DrawSet::check() const {
  for (std::size_t s = 0; s < draws.size(); ++s) {
    if (!std::isfinite(draws[s])) throw Error(fmt::format("draw {} is not finite", s));
  }
  if (!has_components()) return;
  if (chi.size() != draws.size() || b_hat.size() != draws.size()) throw Error("component lengths differ");
  for (std::size_t s = 0; s < draws.size(); ++s) {
    if (draws[s] != chi[s] - b_hat[s]) throw Error(fmt::format("draw {} differs from chi - b_hat", s));
  }
}

Eigen::VectorXd bayesian_bootstrap_weights(Eigen::Index n, RngStream& rng) {
  if (n < 1) throw InvalidParameter("bootstrap size must be at least 1");
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = rng.exponential();
  w /= w.sum();
  return w;
}

double chi_draw(const Eigen::VectorXd& m_s, const Eigen::VectorXd& gamma, const Eigen::VectorXd& y,
                std::span<const int> r, const Eigen::VectorXd& W) {
  const Eigen::Index n = m_s.size();
  if (gamma.size() != n || y.size() != n || W.size() != n || static_cast<Eigen::Index>(r.size()) != n) {
    throw DimensionMismatch("chi_draw inputs have different lengths");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double term = m_s[i];
    if (r[static_cast<std::size_t>(i)] == 1) term += gamma[i] * (y[i] - m_s[i]);
    total += W[i] * term;
  }
  return total;
}

double debias_term(const Eigen::VectorXd& m_s, const Eigen::VectorXd& m_hat, const Eigen::VectorXd& gamma) {
  const Eigen::Index n = m_s.size();
  if (m_hat.size() != n || gamma.size() != n) throw DimensionMismatch("debias_term inputs have different lengths");
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) total += (gamma[i] - 1.0) * (m_hat[i] - m_s[i]);
  return total / static_cast<double>(n);
}

double oracle_bias_term(const Eigen::VectorXd& m0, const Eigen::VectorXd& m_s, const Eigen::VectorXd& gamma0) {
  return debias_term(m_s, m0, gamma0);
}

double aipw_point_estimate(const MissingDataset& data, const Eigen::VectorXd& pi_hat, const Eigen::VectorXd& m_hat) {
  const Eigen::Index n = data.n();
  if (pi_hat.size() != n || m_hat.size() != n) throw DimensionMismatch("pilot lengths do not match the data");
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    total += m_hat[i];
    if (data.r[static_cast<std::size_t>(i)] == 1) total += (data.outcome(i) - m_hat[i]) / pi_hat[i];
  }
  return total / static_cast<double>(n);
}

double quantile_type7(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw InvalidParameter("quantile of an empty sample");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Interval credible_interval(std::span<const double> draws, double alpha) {
  if (draws.size() < 2) throw InvalidParameter("credible interval needs at least 2 draws");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidParameter("alpha must lie in (0, 1)");
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  Interval out;
  double total = 0.0;
  for (double d : draws) total += d;
  out.mean = total / static_cast<double>(draws.size());
  out.lo = quantile_type7(sorted, alpha / 2.0);
  out.hi = quantile_type7(sorted, 1.0 - alpha / 2.0);
  out.length = out.hi - out.lo;
  return out;
}

Interval credible_interval(const DrawSet& draws, double alpha) { return credible_interval(draws.draws, alpha); }

Eigen::VectorXd mean_response_gamma(std::span<const int> r, const Eigen::VectorXd& pi) {
  if (static_cast<Eigen::Index>(r.size()) != pi.size()) throw DimensionMismatch("indicator and pi lengths differ");
  Eigen::VectorXd g(pi.size());
  for (Eigen::Index i = 0; i < pi.size(); ++i) g[i] = riesz_representer(RieszMode::MeanResponse, r[static_cast<std::size_t>(i)], pi[i]);
  return g;
}

Eigen::MatrixXd append_constant_column(const Eigen::MatrixXd& X, double value) {
  Eigen::MatrixXd out(X.rows(), X.cols() + 1);
  out.leftCols(X.cols()) = X;
  out.col(X.cols()).setConstant(value);
  return out;
}

namespace {

void check_draw_matrix(const RowMatrix& m, Eigen::Index n, const char* what) {
  if (m.cols() != n) throw DimensionMismatch(fmt::format("{} has {} columns for {} rows", what, m.cols(), n));
  if (m.rows() < 1) throw InvalidParameter(fmt::format("{} holds no draws", what));
}

const RowMatrix& require_pi_draws(const RowMatrix* pi_draws, Eigen::Index S, Eigen::Index n) {
  if (pi_draws == nullptr) throw InvalidParameter("the one-step method needs propensity draws");
  check_draw_matrix(*pi_draws, n, "propensity draws");
  if (pi_draws->rows() < S) throw InvalidParameter("fewer propensity draws than outcome draws");
  return *pi_draws;
}

const PilotValues& require_pilots(const PilotValues* pilots, Eigen::Index n) {
  if (pilots == nullptr || pilots->pi.size() != n) throw InvalidParameter("RoBART needs a propensity pilot at every row");
  return *pilots;
}

double clip(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

Eigen::VectorXd draw_row(const RowMatrix& m, Eigen::Index s) { return m.row(s).transpose(); }

DrawSet start(Method method, Estimand estimand, const RngStream& rng, Eigen::Index S, bool components) {
  DrawSet out;
  out.method = method;
  out.estimand = estimand;
  out.seed = rng.seed();
  out.draws.reserve(static_cast<std::size_t>(S));
  if (components) {
    out.chi.reserve(static_cast<std::size_t>(S));
    out.b_hat.reserve(static_cast<std::size_t>(S));
  }
  return out;
}

void push(DrawSet& out, double chi, double b) {
  out.chi.push_back(chi);
  out.b_hat.push_back(b);
  out.draws.push_back(chi - b);
}

}  // namespace

DrawSet mean_response_draws(const MissingDataset& data, const RowMatrix& m_draws, Method method,
                            const PilotValues* pilots, const RowMatrix* pi_draws, RngStream weights_rng,
                            double clip_eps) {
  const Eigen::Index n = data.n();
  check_draw_matrix(m_draws, n, "outcome draws");
  const Eigen::Index S = m_draws.rows();
  DrawSet out = start(method, Estimand::Mean, weights_rng, S, method != Method::PluginBart);

  Eigen::VectorXd gamma, m_hat;
  if (method == Method::RoBart) {
    const auto& p = require_pilots(pilots, n);
    gamma = mean_response_gamma(data.r, p.pi);
    m_hat = p.m_hat ? *p.m_hat : Eigen::VectorXd(m_draws.colwise().mean().transpose());
    if (m_hat.size() != n) throw DimensionMismatch("outcome pilot length does not match the data");
  }
  const RowMatrix* pis = method == Method::OneStep ? &require_pi_draws(pi_draws, S, n) : nullptr;

  for (Eigen::Index s = 0; s < S; ++s) {
    const Eigen::VectorXd W = bayesian_bootstrap_weights(n, weights_rng);
    const Eigen::VectorXd m = draw_row(m_draws, s);
    switch (method) {
      case Method::PluginBart:
        out.draws.push_back(W.dot(m));
        break;
      case Method::OneStep: {
        Eigen::VectorXd pi = draw_row(*pis, s);
        for (Eigen::Index i = 0; i < n; ++i) pi[i] = clip(pi[i], clip_eps);
        push(out, chi_draw(m, mean_response_gamma(data.r, pi), data.y, data.r, W), 0.0);
        break;
      }
      case Method::RoBart:
        push(out, chi_draw(m, gamma, data.y, data.r, W), debias_term(m, m_hat, gamma));
        break;
    }
  }
  return out;
}

namespace {

Eigen::VectorXd ate_gamma(std::span<const int> d, const Eigen::VectorXd& pi) {
  Eigen::VectorXd g(pi.size());
  for (Eigen::Index i = 0; i < pi.size(); ++i) g[i] = riesz_representer(RieszMode::Ate, d[static_cast<std::size_t>(i)], pi[i]);
  return g;
}

Eigen::VectorXd att_gamma(std::span<const int> d, const Eigen::VectorXd& pi, double pi_bar) {
  Eigen::VectorXd g(pi.size());
  for (Eigen::Index i = 0; i < pi.size(); ++i) g[i] = riesz_representer(RieszMode::Att, d[static_cast<std::size_t>(i)], pi[i], pi_bar);
  return g;
}

// sum_i W_i [m1_i - m0_i + gamma_i (y_i - m_{d_i, i})]
double ate_chi(const Eigen::VectorXd& m1, const Eigen::VectorXd& m0, const Eigen::VectorXd& gamma,
               const TreatmentDataset& data, const Eigen::VectorXd& W) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < W.size(); ++i) {
    const double md = data.d[static_cast<std::size_t>(i)] == 1 ? m1[i] : m0[i];
    total += W[i] * (m1[i] - m0[i] + gamma[i] * (data.y[i] - md));
  }
  return total;
}

// (1/n) sum_i tau[m^s - m_hat](Z_i); the outcome terms cancel
double ate_debias(const Eigen::VectorXd& m1, const Eigen::VectorXd& m0, const Eigen::VectorXd& h1,
                  const Eigen::VectorXd& h0, const Eigen::VectorXd& gamma, std::span<const int> d) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < gamma.size(); ++i) {
    const double g1 = m1[i] - h1[i];
    const double g0 = m0[i] - h0[i];
    const double gd = d[static_cast<std::size_t>(i)] == 1 ? g1 : g0;
    total += (g1 - g0) - gamma[i] * gd;
  }
  return total / static_cast<double>(gamma.size());
}

double att_chi(const Eigen::VectorXd& m0, const Eigen::VectorXd& gamma, const Eigen::VectorXd& y,
               const Eigen::VectorXd& W) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < W.size(); ++i) total += W[i] * gamma[i] * (y[i] - m0[i]);
  return total;
}

// (1/n) sum_i tau[m^s(0,.) - m_hat(0,.)](Z_i) with tau[m] = m(0,x) + gamma (y - m(0,x))
double att_debias(const Eigen::VectorXd& m0, const Eigen::VectorXd& h0, const Eigen::VectorXd& gamma) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < gamma.size(); ++i) total += (1.0 - gamma[i]) * (m0[i] - h0[i]);
  return total / static_cast<double>(gamma.size());
}

}  // namespace

DrawSet ate_draws(const TreatmentDataset& data, const RowMatrix& m1_draws, const RowMatrix& m0_draws, Method method,
                  const PilotValues* pilots, const RowMatrix* pi_draws, RngStream weights_rng, double clip_eps) {
  const Eigen::Index n = data.n();
  check_draw_matrix(m1_draws, n, "treated outcome draws");
  check_draw_matrix(m0_draws, n, "control outcome draws");
  if (m1_draws.rows() != m0_draws.rows()) throw DimensionMismatch("treated and control draw counts differ");
  const Eigen::Index S = m1_draws.rows();
  DrawSet out = start(method, Estimand::Ate, weights_rng, S, method != Method::PluginBart);

  Eigen::VectorXd gamma, h1, h0;
  if (method == Method::RoBart) {
    const auto& p = require_pilots(pilots, n);
    gamma = ate_gamma(data.d, p.pi);
    h1 = p.m_hat1 ? *p.m_hat1 : Eigen::VectorXd(m1_draws.colwise().mean().transpose());
    h0 = p.m_hat0 ? *p.m_hat0 : Eigen::VectorXd(m0_draws.colwise().mean().transpose());
    if (h1.size() != n || h0.size() != n) throw DimensionMismatch("outcome pilot length does not match the data");
  }
  const RowMatrix* pis = method == Method::OneStep ? &require_pi_draws(pi_draws, S, n) : nullptr;

  for (Eigen::Index s = 0; s < S; ++s) {
    const Eigen::VectorXd W = bayesian_bootstrap_weights(n, weights_rng);
    const Eigen::VectorXd m1 = draw_row(m1_draws, s);
    const Eigen::VectorXd m0 = draw_row(m0_draws, s);
    switch (method) {
      case Method::PluginBart:
        out.draws.push_back(W.dot(m1 - m0));
        break;
      case Method::OneStep: {
        Eigen::VectorXd pi = draw_row(*pis, s);
        for (Eigen::Index i = 0; i < n; ++i) pi[i] = clip(pi[i], clip_eps);
        push(out, ate_chi(m1, m0, ate_gamma(data.d, pi), data, W), 0.0);
        break;
      }
      case Method::RoBart:
        push(out, ate_chi(m1, m0, gamma, data, W), ate_debias(m1, m0, h1, h0, gamma, data.d));
        break;
    }
  }
  return out;
}

DrawSet att_draws(const TreatmentDataset& data, const RowMatrix& m0_draws, Method method, const PilotValues* pilots,
                  const RowMatrix* pi_draws, RngStream weights_rng, double clip_eps) {
  const Eigen::Index n = data.n();
  check_draw_matrix(m0_draws, n, "control outcome draws");
  const Eigen::Index S = m0_draws.rows();
  const double pi_bar = data.treated_share();
  if (!(pi_bar > 0.0 && pi_bar < 1.0)) throw DataError("both treatment arms must be nonempty");
  DrawSet out = start(method, Estimand::Att, weights_rng, S, method != Method::PluginBart);

  Eigen::VectorXd gamma, h0;
  if (method == Method::RoBart) {
    const auto& p = require_pilots(pilots, n);
    gamma = att_gamma(data.d, p.pi, pi_bar);
    h0 = p.m_hat ? *p.m_hat : Eigen::VectorXd(m0_draws.colwise().mean().transpose());
    if (h0.size() != n) throw DimensionMismatch("outcome pilot length does not match the data");
  }
  const RowMatrix* pis = method == Method::OneStep ? &require_pi_draws(pi_draws, S, n) : nullptr;

  for (Eigen::Index s = 0; s < S; ++s) {
    const Eigen::VectorXd W = bayesian_bootstrap_weights(n, weights_rng);
    const Eigen::VectorXd m0 = draw_row(m0_draws, s);
    switch (method) {
      case Method::PluginBart: {
        double num = 0.0, den = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (data.d[static_cast<std::size_t>(i)] == 1) {
            num += W[i] * (data.y[i] - m0[i]);
            den += W[i];
          }
        }
        out.draws.push_back(num / den);
        break;
      }
      case Method::OneStep: {
        Eigen::VectorXd pi = draw_row(*pis, s);
        for (Eigen::Index i = 0; i < n; ++i) pi[i] = clip(pi[i], clip_eps);
        push(out, att_chi(m0, att_gamma(data.d, pi, pi_bar), data.y, W), 0.0);
        break;
      }
      case Method::RoBart:
        push(out, att_chi(m0, gamma, data.y, W), att_debias(m0, h0, gamma));
        break;
    }
  }
  return out;
}

namespace {

RowMatrix take_draws(const RowMatrix& all, int num_draws) {
  if (num_draws < 0) throw InvalidParameter("num_draws must be nonnegative");
  if (num_draws > all.rows()) {
    throw InvalidParameter(fmt::format("{} draws requested but the chain retained {}", num_draws, all.rows()));
  }
  return num_draws == 0 ? all : RowMatrix(all.topRows(num_draws));
}

}  // namespace

DrawSet run_mean_response(const MissingDataset& data, Method method, const PilotValues* pilots,
                          const BartConfig& config, int num_draws, RngStream& rng, double clip_eps,
                          Eigen::VectorXd* posterior_mean) {
  data.validate();
  const auto observed = data.observed_rows();
  const Eigen::MatrixXd X_obs = select_rows(data.X, observed);
  const Eigen::VectorXd y_obs = select_rows(data.y, observed);

  RngStream outcome_rng = rng.child(0);
  const auto outcome = run_bart_regression(X_obs, y_obs, config, outcome_rng, &data.X);
  const RowMatrix m_draws = take_draws(outcome.fitted_test, num_draws);
  if (posterior_mean != nullptr) *posterior_mean = m_draws.colwise().mean().transpose();

  RowMatrix pi_draws;
  if (method == Method::OneStep) {
    RngStream pi_rng = rng.child(1);
    pi_draws = take_draws(run_bart_binary(data.X, data.r, config, pi_rng).fitted, num_draws);
  }
  DrawSet out = mean_response_draws(data, m_draws, method, pilots, &pi_draws, rng.child(2), clip_eps);
  out.seed = rng.seed();
  return out;
}

DrawSet run_ate(const TreatmentDataset& data, Method method, const PilotValues* pilots, const BartConfig& config,
                int num_draws, RngStream& rng, double clip_eps, Eigen::VectorXd* posterior_mean) {
  data.validate();
  const Eigen::Index n = data.n();
  Eigen::MatrixXd Xd(n, data.X.cols() + 1);
  Xd.leftCols(data.X.cols()) = data.X;
  for (Eigen::Index i = 0; i < n; ++i) Xd(i, data.X.cols()) = data.d[static_cast<std::size_t>(i)];
  Eigen::MatrixXd X_test(2 * n, Xd.cols());
  X_test.topRows(n) = append_constant_column(data.X, 1.0);
  X_test.bottomRows(n) = append_constant_column(data.X, 0.0);

  RngStream outcome_rng = rng.child(0);
  const auto outcome = run_bart_regression(Xd, data.y, config, outcome_rng, &X_test);
  const RowMatrix all = take_draws(outcome.fitted_test, num_draws);
  const RowMatrix m1 = all.leftCols(n);
  const RowMatrix m0 = all.rightCols(n);
  if (posterior_mean != nullptr) {
    const Eigen::VectorXd a1 = m1.colwise().mean().transpose();
    const Eigen::VectorXd a0 = m0.colwise().mean().transpose();
    posterior_mean->resize(n);
    for (Eigen::Index i = 0; i < n; ++i) (*posterior_mean)[i] = data.d[static_cast<std::size_t>(i)] == 1 ? a1[i] : a0[i];
  }

  RowMatrix pi_draws;
  if (method == Method::OneStep) {
    RngStream pi_rng = rng.child(1);
    pi_draws = take_draws(run_bart_binary(data.X, data.d, config, pi_rng).fitted, num_draws);
  }
  DrawSet out = ate_draws(data, m1, m0, method, pilots, &pi_draws, rng.child(2), clip_eps);
  out.seed = rng.seed();
  return out;
}

DrawSet run_att(const TreatmentDataset& data, Method method, const PilotValues* pilots, const BartConfig& config,
                int num_draws, RngStream& rng, double clip_eps, Eigen::VectorXd* posterior_mean) {
  data.validate();
  const auto controls = data.control_rows();
  const Eigen::MatrixXd X_c = select_rows(data.X, controls);
  const Eigen::VectorXd y_c = select_rows(data.y, controls);

  RngStream outcome_rng = rng.child(0);
  const auto outcome = run_bart_regression(X_c, y_c, config, outcome_rng, &data.X);
  const RowMatrix m0 = take_draws(outcome.fitted_test, num_draws);
  if (posterior_mean != nullptr) *posterior_mean = m0.colwise().mean().transpose();

  RowMatrix pi_draws;
  if (method == Method::OneStep) {
    RngStream pi_rng = rng.child(1);
    pi_draws = take_draws(run_bart_binary(data.X, data.d, config, pi_rng).fitted, num_draws);
  }
  DrawSet out = att_draws(data, m0, method, pilots, &pi_draws, rng.child(2), clip_eps);
  out.seed = rng.seed();
  return out;
}

}  // namespace robart
