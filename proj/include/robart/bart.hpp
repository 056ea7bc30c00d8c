#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <span>
#include <vector>

#include "robart/rng.hpp"
#include "robart/tree.hpp"

namespace robart {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct MoveProbs {
  double grow = 0.4;
  double prune = 0.4;
  double change = 0.2;
};

/// Prior and chain settings. A node at depth l is internal with probability
/// split_base * (1 + l)^-split_power; leaf heights have prior sd
/// range(y) / (2 * leaf_sd_k * sqrt(num_trees)).
struct BartConfig {
  int num_trees = 200;
  int num_draws = 2000;
  int burn_in = 500;
  int thin = 1;
  double split_base = 0.95;
  double split_power = 2.0;
  double sigma_df = 3.0;
  double sigma_quantile = 0.9;
  double leaf_sd_k = 2.0;
  /// Dirichlet prior on the split-variable probabilities.
  bool sparse = false;
  MoveProbs moves;
  int min_node_size = 1;
  /// Constant outcomes get a tiny jitter instead of being rejected.
  bool jitter_constant = false;

  /// Throws InvalidParameter naming the offending field.
  void validate() const;
  double split_probability(int depth) const;
};

enum class Move { Grow = 0, Prune = 1, Change = 2 };

struct MoveStats {
  std::array<long, 3> proposed{};
  std::array<long, 3> accepted{};
};

/// Retained draws of the regression function (or of the probability
/// function for binary outcomes), one row per draw.
struct PosteriorDraws {
  RowMatrix fitted;       // draws x training rows
  RowMatrix fitted_test;  // draws x test rows; empty without a test matrix
  Eigen::VectorXd sigma;  // per draw; 1 for the probit model
  MoveStats moves;

  Eigen::Index num_draws() const { return fitted.rows(); }
  Eigen::VectorXd mean_fitted() const { return fitted.colwise().mean().transpose(); }
  Eigen::VectorXd mean_fitted_test() const { return fitted_test.colwise().mean().transpose(); }
};

/// Split-count / residual sufficient statistics of one leaf.
struct LeafStats {
  double count = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;
};

/// log of the tree prior: prod over internal nodes of
/// p_split(depth) * s[var] / #candidates(node, var), times prod over leaves of
/// 1 - p_split(depth). Candidates are counted on the training rows X.
double log_tree_prior(const Tree& tree, const Eigen::MatrixXd& X, const BartConfig& config,
                      std::span<const double> split_probs);

/// sum over leaves of log int prod_i N(r_i; mu, sigma^2) N(mu; 0, leaf_sd^2) dmu.
double integrated_leaf_loglik(std::span<const LeafStats> leaves, double sigma, double leaf_sd);
double integrated_leaf_loglik(const std::vector<std::vector<double>>& residuals_by_leaf, double sigma,
                              double leaf_sd);

/// Scale lambda of the scaled-inverse-chi^2(df, lambda) prior on sigma^2 with
/// P(sigma < sigma_hat) = quantile, where sigma_hat is the residual sd of a
/// least-squares fit of y on X (the sd of y when n <= rank + 1).
double calibrate_sigma_lambda(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, double df,
                              double quantile);
/// The same relation with sigma_hat supplied.
double sigma_lambda_for(double sigma_hat, double df, double quantile);

/// 100-point grid of theta / (theta + p), log-spaced in [1e-3, 1 - 1e-3].
const std::vector<double>& sparsity_grid();
/// Normalized Gibbs weights of theta over the grid given split
/// probabilities s, under a Beta(0.5, 1) prior on theta / (theta + p).
std::vector<double> theta_grid_posterior(std::span<const double> split_probs);

/// Single-chain sum-of-trees sampler over a fixed training matrix.
///
/// The residual cache holds target - sum_t tree_t(X) on the centered scale
/// and is maintained exactly by every move.
class BartSampler {
 public:
  BartSampler(const Eigen::MatrixXd& X, Eigen::VectorXd target, const BartConfig& config,
              double leaf_sd, double sigma, double sigma_lambda);

  /// One Metropolis-Hastings structure move on tree t against the partial
  /// residuals of all other trees. Returns whether it was accepted.
  bool mh_tree_update(int t, RngStream& rng);
  /// Conjugate draw of every leaf height of tree t.
  void gibbs_leaf_update(int t, RngStream& rng);
  void gibbs_sigma_update(RngStream& rng);
  /// Sparse mode: refresh the split probabilities and theta.
  void gibbs_split_prob_update(RngStream& rng);
  /// Probit augmentation: redraw the latent targets given labels.
  void update_probit_latent(std::span<const int> labels, double offset, RngStream& rng);

  /// Tree moves and leaf draws for every tree, then sigma (unless fixed), then
  /// split probabilities in sparse mode.
  void sweep(RngStream& rng);

  /// With the likelihood off, structure moves sample the tree prior.
  void set_likelihood_enabled(bool enabled) { likelihood_enabled_ = enabled; }
  void fix_sigma(double sigma);
  void set_sigma(double sigma) { sigma_ = sigma; }

  int num_trees() const { return static_cast<int>(trees_.size()); }
  const Tree& tree(int t) const { return trees_[static_cast<std::size_t>(t)]; }
  /// Replaces tree t (structure and heights); rows are re-routed.
  void set_tree(int t, const Tree& tree);
  Forest forest(double offset) const;
  double sigma() const { return sigma_; }
  double leaf_sd() const { return leaf_sd_; }
  double theta() const { return theta_; }
  const std::vector<double>& split_probs() const { return split_probs_; }
  const Eigen::VectorXd& residuals() const { return residual_; }
  const Eigen::VectorXd& target() const { return target_; }
  /// sum_t tree_t at every training row.
  Eigen::VectorXd fitted() const { return target_ - residual_; }
  std::vector<int> split_counts() const;
  const std::vector<int>& leaf_of_row(int t) const { return leaf_of_row_[static_cast<std::size_t>(t)]; }
  const MoveStats& move_stats() const { return stats_; }

  /// Rebuilds the residuals from scratch and re-validates every tree;
  /// throws Error on a discrepancy above tol.
  void check_invariants(double tol = 1e-10) const;

 private:
  void gather_rows(int t, int node, std::vector<int>& rows) const;
  void gather_rows_pair(int t, int a, int b, std::vector<int>& rows) const;
  bool splittable(std::span<const int> rows, int var) const;
  void candidate_ranks(std::span<const int> rows, int var, std::vector<int>& out) const;
  void refresh_avail(int t, int node, std::span<const int> rows);
  double avail_mass(int t, int node) const;
  int choose_var(int t, int node, RngStream& rng) const;
  double leaf_loglik(double count, double sum) const;
  double partial(int t, int row) const;

  bool propose_grow(int t, RngStream& rng);
  bool propose_prune(int t, RngStream& rng);
  bool propose_change(int t, RngStream& rng);

  Eigen::MatrixXd X_;
  BartConfig config_;
  int n_;
  int p_;
  std::vector<std::vector<int>> rank_;        // per column, per row
  std::vector<std::vector<double>> levels_;   // per column, sorted distinct values
  Eigen::VectorXd target_;
  Eigen::VectorXd residual_;
  std::vector<Tree> trees_;
  std::vector<std::vector<int>> leaf_of_row_;
  std::vector<std::vector<std::uint8_t>> avail_;  // per tree, capacity x p
  std::vector<double> split_probs_;
  double theta_;
  double leaf_sd_;
  double sigma_;
  double sigma_lambda_;
  bool sigma_fixed_ = false;
  bool likelihood_enabled_ = true;
  MoveStats stats_;
  mutable std::vector<int> scratch_rows_;
  mutable std::vector<int> scratch_rows2_;
  mutable std::vector<int> scratch_ranks_;
};

/// Gaussian-likelihood BART. y is centered at its mean internally and fits
/// are reported on the original scale.
PosteriorDraws run_bart_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   const BartConfig& config, RngStream& rng,
                                   const Eigen::MatrixXd* X_test = nullptr);

/// Probit BART with truncated-normal latent augmentation; fitted values are
/// probabilities Phi(offset + forest).
PosteriorDraws run_bart_binary(const Eigen::MatrixXd& X, std::span<const int> labels,
                               const BartConfig& config, RngStream& rng,
                               const Eigen::MatrixXd* X_test = nullptr);

}  // namespace robart
