#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robart/bart.hpp"
#include "robart/data.hpp"
#include "robart/rng.hpp"

namespace robart {

enum class Method { PluginBart, OneStep, RoBart };
enum class Estimand { Mean, Ate, Att };

std::string to_string(Method method);
std::string to_string(Estimand estimand);
Method parse_method(const std::string& name);
Estimand parse_estimand(const std::string& name);

/// Posterior draws of the target functional. When components are kept,
/// draws[s] == chi[s] - b_hat[s] exactly.
struct DrawSet {
  std::vector<double> draws;
  std::vector<double> chi;
  std::vector<double> b_hat;
  Method method = Method::RoBart;
  Estimand estimand = Estimand::Mean;
  std::uint64_t seed = 0;

  std::size_t size() const { return draws.size(); }
  bool has_components() const { return !chi.empty(); }
  /// Throws Error if a draw is non-finite or a component identity fails.
  void check() const;
};

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double length = 0.0;
};

/// W_i = e_i / sum_j e_j with e_i ~ Exp(1).
Eigen::VectorXd bayesian_bootstrap_weights(Eigen::Index n, RngStream& rng);

/// sum_i W_i (m_i + gamma_i (y_i - m_i)); the product term is zero where r_i == 0
/// and y_i is never read there.
double chi_draw(const Eigen::VectorXd& m_s, const Eigen::VectorXd& gamma, const Eigen::VectorXd& y,
                std::span<const int> r, const Eigen::VectorXd& W);

/// (1/n) sum_i (gamma_i - 1)(m_hat_i - m_s_i).
double debias_term(const Eigen::VectorXd& m_s, const Eigen::VectorXd& m_hat, const Eigen::VectorXd& gamma);

/// (1/n) sum_i (gamma0_i - 1)(m0_i - m_s_i).
double oracle_bias_term(const Eigen::VectorXd& m0, const Eigen::VectorXd& m_s, const Eigen::VectorXd& gamma0);

/// (1/n) sum_i [m_hat_i + (r_i / pi_hat_i)(y_i - m_hat_i)].
double aipw_point_estimate(const MissingDataset& data, const Eigen::VectorXd& pi_hat, const Eigen::VectorXd& m_hat);

/// Linear interpolation between order statistics at position p (S - 1).
double quantile_type7(std::span<const double> sorted, double p);
Interval credible_interval(std::span<const double> draws, double alpha);
Interval credible_interval(const DrawSet& draws, double alpha);

/// Gamma of the mean-response functional at every row: r_i / pi_i.
Eigen::VectorXd mean_response_gamma(std::span<const int> r, const Eigen::VectorXd& pi);

/// Pilot quantities tabulated at every row. Missing outcome pilots default
/// to the posterior mean of the outcome draws.
struct PilotValues {
  Eigen::VectorXd pi;
  std::optional<Eigen::VectorXd> m_hat;    // mean: m(X_i); att: m(0, X_i)
  std::optional<Eigen::VectorXd> m_hat1;   // ate: m(1, X_i)
  std::optional<Eigen::VectorXd> m_hat0;   // ate: m(0, X_i)
};

/// Mean-response draws from S x n outcome draws m^s(X_i). pi_draws (S x n)
/// is required for the one-step method, pilots.pi for RoBART. Bootstrap
/// weights come from a copy of weights_rng, so calls sharing a stream share
/// weights.
DrawSet mean_response_draws(const MissingDataset& data, const RowMatrix& m_draws, Method method,
                            const PilotValues* pilots, const RowMatrix* pi_draws, RngStream weights_rng,
                            double clip_eps = 0.01);

/// ATE draws from m^s(1, X_i) and m^s(0, X_i).
DrawSet ate_draws(const TreatmentDataset& data, const RowMatrix& m1_draws, const RowMatrix& m0_draws,
                  Method method, const PilotValues* pilots, const RowMatrix* pi_draws, RngStream weights_rng,
                  double clip_eps = 0.01);

/// ATT draws from m^s(0, X_i).
DrawSet att_draws(const TreatmentDataset& data, const RowMatrix& m0_draws, Method method,
                  const PilotValues* pilots, const RowMatrix* pi_draws, RngStream weights_rng,
                  double clip_eps = 0.01);

/// Full pipeline: outcome chain on the observed rows evaluated at every row,
/// a probit chain on r for the one-step method, then the requested draws.
/// num_draws == 0 takes every retained draw. posterior_mean, when given,
/// receives the outcome chain's mean at every row (at (D_i, X_i) for the ATE,
/// at (0, X_i) for the ATT).
DrawSet run_mean_response(const MissingDataset& data, Method method, const PilotValues* pilots,
                          const BartConfig& config, int num_draws, RngStream& rng, double clip_eps = 0.01,
                          Eigen::VectorXd* posterior_mean = nullptr);

/// One outcome chain on (X, d) evaluated at (1, X_i) and (0, X_i).
DrawSet run_ate(const TreatmentDataset& data, Method method, const PilotValues* pilots, const BartConfig& config,
                int num_draws, RngStream& rng, double clip_eps = 0.01, Eigen::VectorXd* posterior_mean = nullptr);

/// Outcome chain on the control arm evaluated at every row.
DrawSet run_att(const TreatmentDataset& data, Method method, const PilotValues* pilots, const BartConfig& config,
                int num_draws, RngStream& rng, double clip_eps = 0.01, Eigen::VectorXd* posterior_mean = nullptr);

/// [X | column] with the given constant value.
Eigen::MatrixXd append_constant_column(const Eigen::MatrixXd& X, double value);

}  // namespace robart
