#include "robart/bart.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "robart/error.hpp"

namespace robart {

namespace {

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw InvalidParameter(fmt::format("BartConfig.{} {}", field, what));
}

int uniform_int(RngStream& rng, std::size_t n) {
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)), n - 1));
}

// Number of valid split values of `values` (unsorted copy) for min size m.
int count_split_values(std::vector<double> values, int m) {
  std::sort(values.begin(), values.end());
  const auto n = static_cast<std::ptrdiff_t>(values.size());
  int count = 0;
  for (std::ptrdiff_t k = m - 1; k + 1 < n && n - k - 1 >= m; ++k) {
    if (values[static_cast<std::size_t>(k)] < values[static_cast<std::size_t>(k + 1)]) ++count;
  }
  return count;
}

double residual_sd(const Eigen::VectorXd& y, const Eigen::MatrixXd& X) {
  const Eigen::Index n = y.size();
  const double mean = y.mean();
  const double sd_y = std::sqrt((y.array() - mean).square().sum() / static_cast<double>(n - 1));
  if (!(sd_y > 0.0)) throw DataError("outcome has zero variance");
  if (n > X.cols() + 1) {
    Eigen::MatrixXd design(n, X.cols() + 1);
    design.col(0).setOnes();
    design.rightCols(X.cols()) = X;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    const Eigen::VectorXd beta = qr.solve(y);
    const double ssr = (y - design * beta).squaredNorm();
    const Eigen::Index dof = n - qr.rank();
    if (dof > 0) {
      const double sd = std::sqrt(ssr / static_cast<double>(dof));
      if (sd > 1e-12 * sd_y) return sd;
    }
  }
  return sd_y;
}

}  // namespace

void BartConfig::validate() const {
  require(num_trees >= 1, "num_trees", "must be >= 1");
  require(num_draws >= 1, "num_draws", "must be >= 1");
  require(burn_in >= 0, "burn_in", "must be >= 0");
  require(thin >= 1, "thin", "must be >= 1");
  require(split_base > 0.0 && split_base < 1.0, "split_base", "must lie in (0, 1)");
  require(split_power >= 0.0, "split_power", "must be >= 0");
  require(sigma_df > 0.0, "sigma_df", "must be positive");
  require(sigma_quantile > 0.0 && sigma_quantile < 1.0, "sigma_quantile", "must lie in (0, 1)");
  require(leaf_sd_k > 0.0, "leaf_sd_k", "must be positive");
  require(moves.grow >= 0.0 && moves.prune >= 0.0 && moves.change >= 0.0, "moves",
          "probabilities must be nonnegative");
  require(std::abs(moves.grow + moves.prune + moves.change - 1.0) < 1e-9, "moves", "probabilities must sum to 1");
  require(min_node_size >= 1, "min_node_size", "must be >= 1");
}

double BartConfig::split_probability(int depth) const {
  return split_base * std::pow(1.0 + depth, -split_power);
}

// ---------------------------------------------------------------------------

double log_tree_prior(const Tree& tree, const Eigen::MatrixXd& X, const BartConfig& config,
                      std::span<const double> split_probs) {
  if (static_cast<int>(split_probs.size()) != tree.num_features()) {
    throw DimensionMismatch("split probability vector does not match the tree's feature count");
  }
  double lp = 0.0;
  for (int id = 0; id < tree.capacity(); ++id) {
    if (!tree.alive(id)) continue;
    const TreeNode& node = tree.node(id);
    const double ps = config.split_probability(node.depth);
    if (node.is_leaf()) {
      lp += std::log1p(-ps);
      continue;
    }
    const auto rows = rows_in_node(tree, id, X);
    std::vector<double> values;
    values.reserve(rows.size());
    for (auto r : rows) values.push_back(X(r, node.rule.var));
    const int candidates = count_split_values(std::move(values), config.min_node_size);
    lp += std::log(ps) + std::log(split_probs[static_cast<std::size_t>(node.rule.var)]) -
          std::log(static_cast<double>(candidates));
  }
  return lp;
}

double integrated_leaf_loglik(std::span<const LeafStats> leaves, double sigma, double leaf_sd) {
  if (!(sigma > 0.0)) throw InvalidParameter("sigma must be positive");
  if (!(leaf_sd > 0.0)) throw InvalidParameter("leaf_sd must be positive");
  const double s2 = sigma * sigma;
  const double t2 = leaf_sd * leaf_sd;
  double total = 0.0;
  for (const LeafStats& leaf : leaves) {
    if (leaf.count == 0.0) continue;
    const double denom = s2 + leaf.count * t2;
    total += -0.5 * leaf.count * std::log(2.0 * M_PI * s2) - leaf.sum_sq / (2.0 * s2) +
             0.5 * std::log(s2 / denom) + t2 * leaf.sum * leaf.sum / (2.0 * s2 * denom);
  }
  return total;
}

double integrated_leaf_loglik(const std::vector<std::vector<double>>& residuals_by_leaf, double sigma,
                              double leaf_sd) {
  std::vector<LeafStats> stats;
  stats.reserve(residuals_by_leaf.size());
  for (const auto& leaf : residuals_by_leaf) {
    LeafStats s;
    for (double r : leaf) {
      s.count += 1.0;
      s.sum += r;
      s.sum_sq += r * r;
    }
    stats.push_back(s);
  }
  return integrated_leaf_loglik(stats, sigma, leaf_sd);
}

double sigma_lambda_for(double sigma_hat, double df, double quantile) {
  if (!(sigma_hat > 0.0)) throw InvalidParameter("sigma_hat must be positive");
  if (!(df > 0.0)) throw InvalidParameter("df must be positive");
  if (!(quantile > 0.0 && quantile < 1.0)) throw InvalidParameter("quantile must lie in (0, 1)");
  // P(sigma^2 < s^2) = P(chi2_df > df * lambda / s^2) = quantile.
  const boost::math::chi_squared chi2(df);
  return sigma_hat * sigma_hat * boost::math::quantile(chi2, 1.0 - quantile) / df;
}

double calibrate_sigma_lambda(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, double df,
                              double quantile) {
  if (y.size() < 2) throw DataError("need at least two outcomes to calibrate the sigma prior");
  if (X.rows() != y.size()) throw DimensionMismatch("X rows do not match y length");
  return sigma_lambda_for(residual_sd(y, X), df, quantile);
}

const std::vector<double>& sparsity_grid() {
  static const std::vector<double> grid = [] {
    constexpr int kPoints = 100;
    const double lo = std::log(1e-3);
    const double hi = std::log(1.0 - 1e-3);
    std::vector<double> g(kPoints);
    for (int k = 0; k < kPoints; ++k) g[static_cast<std::size_t>(k)] = std::exp(lo + (hi - lo) * k / (kPoints - 1));
    return g;
  }();
  return grid;
}

std::vector<double> theta_grid_posterior(std::span<const double> split_probs) {
  const auto& grid = sparsity_grid();
  const double p = static_cast<double>(split_probs.size());
  double sum_log_s = 0.0;
  for (double s : split_probs) sum_log_s += std::log(std::max(s, 1e-300));
  const std::size_t K = grid.size();
  std::vector<double> logw(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double u = grid[k];
    const double width = 0.5 * (grid[std::min(k + 1, K - 1)] - grid[k == 0 ? 0 : k - 1]);
    const double alpha = u / (1.0 - u);  // theta / p
    const double theta = p * alpha;
    const double log_prior = std::log(0.5) - 0.5 * std::log(u) + std::log(width);
    const double log_lik = std::lgamma(theta) - p * std::lgamma(alpha) + (alpha - 1.0) * sum_log_s;
    logw[k] = log_prior + log_lik;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (double& w : logw) {
    w = std::exp(w - mx);
    total += w;
  }
  for (double& w : logw) w /= total;
  return logw;
}

// ---------------------------------------------------------------------------

BartSampler::BartSampler(const Eigen::MatrixXd& X, Eigen::VectorXd target, const BartConfig& config,
                         double leaf_sd, double sigma, double sigma_lambda)
    : X_(X),
      config_(config),
      n_(static_cast<int>(X.rows())),
      p_(static_cast<int>(X.cols())),
      target_(std::move(target)),
      leaf_sd_(leaf_sd),
      sigma_(sigma),
      sigma_lambda_(sigma_lambda) {
  config_.validate();
  if (target_.size() != X_.rows()) throw DimensionMismatch("target length does not match X rows");
  if (p_ < 1) throw DimensionMismatch("X must have at least one column");
  if (!(leaf_sd > 0.0)) throw InvalidParameter("leaf_sd must be positive");
  if (!(sigma > 0.0)) throw InvalidParameter("sigma must be positive");

  rank_.resize(static_cast<std::size_t>(p_));
  levels_.resize(static_cast<std::size_t>(p_));
  for (int v = 0; v < p_; ++v) {
    auto& lv = levels_[static_cast<std::size_t>(v)];
    lv.assign(X_.col(v).data(), X_.col(v).data() + n_);
    std::sort(lv.begin(), lv.end());
    lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
    auto& rk = rank_[static_cast<std::size_t>(v)];
    rk.resize(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      rk[static_cast<std::size_t>(i)] =
          static_cast<int>(std::lower_bound(lv.begin(), lv.end(), X_(i, v)) - lv.begin());
    }
  }

  residual_ = target_;
  split_probs_.assign(static_cast<std::size_t>(p_), 1.0 / p_);
  theta_ = static_cast<double>(p_);
  trees_.assign(static_cast<std::size_t>(config_.num_trees), Tree(p_, 0.0));
  leaf_of_row_.assign(static_cast<std::size_t>(config_.num_trees), std::vector<int>(static_cast<std::size_t>(n_), 0));
  std::vector<int> all(static_cast<std::size_t>(n_));
  std::iota(all.begin(), all.end(), 0);
  avail_.assign(static_cast<std::size_t>(config_.num_trees), {});
  refresh_avail(0, Tree::kRoot, all);
  for (auto& a : avail_) a = avail_[0];
}

void BartSampler::fix_sigma(double sigma) {
  if (!(sigma > 0.0)) throw InvalidParameter("sigma must be positive");
  sigma_ = sigma;
  sigma_fixed_ = true;
}

double BartSampler::partial(int t, int row) const {
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  return residual_[row] + trees_[static_cast<std::size_t>(t)].node(lor[static_cast<std::size_t>(row)]).value;
}

void BartSampler::gather_rows(int t, int node, std::vector<int>& rows) const {
  rows.clear();
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  for (int i = 0; i < n_; ++i) {
    if (lor[static_cast<std::size_t>(i)] == node) rows.push_back(i);
  }
}

void BartSampler::gather_rows_pair(int t, int a, int b, std::vector<int>& rows) const {
  rows.clear();
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  for (int i = 0; i < n_; ++i) {
    const int leaf = lor[static_cast<std::size_t>(i)];
    if (leaf == a || leaf == b) rows.push_back(i);
  }
}

bool BartSampler::splittable(std::span<const int> rows, int var) const {
  const int m = config_.min_node_size;
  const auto n = static_cast<int>(rows.size());
  if (n < 2 * m) return false;
  const auto& rk = rank_[static_cast<std::size_t>(var)];
  if (m == 1) {
    const int first = rk[static_cast<std::size_t>(rows[0])];
    for (int r : rows) {
      if (rk[static_cast<std::size_t>(r)] != first) return true;
    }
    return false;
  }
  auto& buf = scratch_ranks_;
  buf.resize(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) buf[k] = rk[static_cast<std::size_t>(rows[k])];
  std::nth_element(buf.begin(), buf.begin() + (m - 1), buf.end());
  const int lo = buf[static_cast<std::size_t>(m - 1)];
  std::nth_element(buf.begin(), buf.begin() + (n - m), buf.end());
  const int hi = buf[static_cast<std::size_t>(n - m)];
  return lo < hi;
}

void BartSampler::candidate_ranks(std::span<const int> rows, int var, std::vector<int>& out) const {
  const int m = config_.min_node_size;
  const auto& rk = rank_[static_cast<std::size_t>(var)];
  auto& buf = scratch_ranks_;
  buf.resize(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) buf[k] = rk[static_cast<std::size_t>(rows[k])];
  std::sort(buf.begin(), buf.end());
  out.clear();
  const auto n = static_cast<int>(buf.size());
  for (int k = m - 1; k + 1 < n && n - k - 1 >= m; ++k) {
    if (buf[static_cast<std::size_t>(k)] < buf[static_cast<std::size_t>(k + 1)]) out.push_back(buf[static_cast<std::size_t>(k)]);
  }
}

void BartSampler::refresh_avail(int t, int node, std::span<const int> rows) {
  auto& av = avail_[static_cast<std::size_t>(t)];
  const auto need = static_cast<std::size_t>(trees_[static_cast<std::size_t>(t)].capacity() * p_);
  if (av.size() < need) av.resize(need, 0);
  for (int v = 0; v < p_; ++v) {
    av[static_cast<std::size_t>(node * p_ + v)] = splittable(rows, v) ? 1 : 0;
  }
}

double BartSampler::avail_mass(int t, int node) const {
  const auto& av = avail_[static_cast<std::size_t>(t)];
  double mass = 0.0;
  for (int v = 0; v < p_; ++v) {
    if (av[static_cast<std::size_t>(node * p_ + v)]) mass += split_probs_[static_cast<std::size_t>(v)];
  }
  return mass;
}

int BartSampler::choose_var(int t, int node, RngStream& rng) const {
  const auto& av = avail_[static_cast<std::size_t>(t)];
  double w[64];
  std::vector<double> big;
  double* weights = w;
  if (p_ > 64) {
    big.resize(static_cast<std::size_t>(p_));
    weights = big.data();
  }
  for (int v = 0; v < p_; ++v) {
    weights[v] = av[static_cast<std::size_t>(node * p_ + v)] ? split_probs_[static_cast<std::size_t>(v)] : 0.0;
  }
  return draw_index(rng, std::span<const double>(weights, static_cast<std::size_t>(p_)));
}

double BartSampler::leaf_loglik(double count, double sum) const {
  if (count == 0.0) return 0.0;
  const double s2 = sigma_ * sigma_;
  const double t2 = leaf_sd_ * leaf_sd_;
  const double denom = s2 + count * t2;
  return 0.5 * std::log(s2 / denom) + t2 * sum * sum / (2.0 * s2 * denom);
}

// ---------------------------------------------------------------------------

bool BartSampler::mh_tree_update(int t, RngStream& rng) {
  const double u = rng.uniform();
  if (u < config_.moves.grow) return propose_grow(t, rng);
  if (u < config_.moves.grow + config_.moves.prune) return propose_prune(t, rng);
  return propose_change(t, rng);
}

bool BartSampler::propose_grow(int t, RngStream& rng) {
  ++stats_.proposed[0];
  Tree& tree = trees_[static_cast<std::size_t>(t)];

  std::vector<int> growable;
  for (int leaf : tree.leaves()) {
    if (avail_mass(t, leaf) > 0.0) growable.push_back(leaf);
  }
  if (growable.empty()) return false;
  const int leaf = growable[static_cast<std::size_t>(uniform_int(rng, growable.size()))];
  const double mass = avail_mass(t, leaf);
  const int var = choose_var(t, leaf, rng);

  auto& rows = scratch_rows_;
  gather_rows(t, leaf, rows);
  std::vector<int> cuts;
  candidate_ranks(rows, var, cuts);
  const int cut = cuts[static_cast<std::size_t>(uniform_int(rng, cuts.size()))];

  const TreeNode& node = tree.node(leaf);
  const auto& rk = rank_[static_cast<std::size_t>(var)];
  double nl = 0, sl = 0, nr = 0, sr = 0;
  for (int i : rows) {
    const double r = residual_[i] + node.value;
    if (rk[static_cast<std::size_t>(i)] <= cut) {
      nl += 1;
      sl += r;
    } else {
      nr += 1;
      sr += r;
    }
  }

  const int nog_before = static_cast<int>(tree.nog_nodes().size());
  bool parent_was_nog = false;
  if (node.parent >= 0) {
    const TreeNode& par = tree.node(node.parent);
    const int sibling = par.left == leaf ? par.right : par.left;
    parent_was_nog = tree.node(sibling).is_leaf();
  }
  const int nog_after = nog_before - (parent_was_nog ? 1 : 0) + 1;

  const double ps = config_.split_probability(node.depth);
  const double ps_child = config_.split_probability(node.depth + 1);
  double log_ratio = std::log(ps) + 2.0 * std::log1p(-ps_child) - std::log1p(-ps) +
                     std::log(static_cast<double>(growable.size())) + std::log(mass) -
                     std::log(static_cast<double>(nog_after)) + std::log(config_.moves.prune) -
                     std::log(config_.moves.grow);
  if (likelihood_enabled_) {
    log_ratio += leaf_loglik(nl, sl) + leaf_loglik(nr, sr) - leaf_loglik(nl + nr, sl + sr);
  }
  if (!(std::log(rng.uniform_open()) < log_ratio)) return false;

  const double value = node.value;
  const auto [l, r] = tree.split(leaf, {var, levels_[static_cast<std::size_t>(var)][static_cast<std::size_t>(cut)]}, value, value);
  auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  std::vector<int> left_rows, right_rows;
  for (int i : rows) {
    if (rk[static_cast<std::size_t>(i)] <= cut) {
      lor[static_cast<std::size_t>(i)] = l;
      left_rows.push_back(i);
    } else {
      lor[static_cast<std::size_t>(i)] = r;
      right_rows.push_back(i);
    }
  }
  refresh_avail(t, l, left_rows);
  refresh_avail(t, r, right_rows);
  ++stats_.accepted[0];
#ifndef NDEBUG
  tree.validate();
#endif
  return true;
}

bool BartSampler::propose_prune(int t, RngStream& rng) {
  ++stats_.proposed[1];
  Tree& tree = trees_[static_cast<std::size_t>(t)];
  const auto nogs = tree.nog_nodes();
  if (nogs.empty()) return false;
  const int target = nogs[static_cast<std::size_t>(uniform_int(rng, nogs.size()))];
  const TreeNode& node = tree.node(target);
  const int l = node.left;
  const int r = node.right;

  int growable_after = 0;
  for (int leaf : tree.leaves()) {
    if (leaf != l && leaf != r && avail_mass(t, leaf) > 0.0) ++growable_after;
  }
  const double mass = avail_mass(t, target);
  if (mass > 0.0) ++growable_after;

  auto& rows = scratch_rows_;
  gather_rows_pair(t, l, r, rows);
  const double vl = tree.node(l).value;
  const double vr = tree.node(r).value;
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  double nl = 0, sl = 0, nr = 0, sr = 0;
  for (int i : rows) {
    if (lor[static_cast<std::size_t>(i)] == l) {
      nl += 1;
      sl += residual_[i] + vl;
    } else {
      nr += 1;
      sr += residual_[i] + vr;
    }
  }

  const double ps = config_.split_probability(node.depth);
  const double ps_child = config_.split_probability(node.depth + 1);
  double log_ratio = -(std::log(ps) + 2.0 * std::log1p(-ps_child) - std::log1p(-ps) +
                       std::log(static_cast<double>(growable_after)) + std::log(mass) -
                       std::log(static_cast<double>(nogs.size()))) +
                     std::log(config_.moves.grow) - std::log(config_.moves.prune);
  if (likelihood_enabled_) {
    log_ratio += leaf_loglik(nl + nr, sl + sr) - leaf_loglik(nl, sl) - leaf_loglik(nr, sr);
  }
  if (!(std::log(rng.uniform_open()) < log_ratio)) return false;

  const double merged = (nl * vl + nr * vr) / std::max(nl + nr, 1.0);
  tree.collapse(target, merged);
  auto& lor_mut = leaf_of_row_[static_cast<std::size_t>(t)];
  for (int i : rows) {
    residual_[i] += (lor_mut[static_cast<std::size_t>(i)] == l ? vl : vr) - merged;
    lor_mut[static_cast<std::size_t>(i)] = target;
  }
  ++stats_.accepted[1];
#ifndef NDEBUG
  tree.validate();
#endif
  return true;
}

bool BartSampler::propose_change(int t, RngStream& rng) {
  ++stats_.proposed[2];
  Tree& tree = trees_[static_cast<std::size_t>(t)];
  const auto nogs = tree.nog_nodes();
  if (nogs.empty()) return false;
  const int target = nogs[static_cast<std::size_t>(uniform_int(rng, nogs.size()))];
  const int l = tree.node(target).left;
  const int r = tree.node(target).right;

  auto& rows = scratch_rows_;
  gather_rows_pair(t, l, r, rows);
  const int var = choose_var(t, target, rng);
  std::vector<int> cuts;
  candidate_ranks(rows, var, cuts);
  const int cut = cuts[static_cast<std::size_t>(uniform_int(rng, cuts.size()))];

  const double vl = tree.node(l).value;
  const double vr = tree.node(r).value;
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  const auto& rk = rank_[static_cast<std::size_t>(var)];
  double ol = 0, osl = 0, orr = 0, osr = 0;  // current children
  double nl = 0, nsl = 0, nr = 0, nsr = 0;   // proposed children
  for (int i : rows) {
    const double part = residual_[i] + (lor[static_cast<std::size_t>(i)] == l ? vl : vr);
    if (lor[static_cast<std::size_t>(i)] == l) {
      ol += 1;
      osl += part;
    } else {
      orr += 1;
      osr += part;
    }
    if (rk[static_cast<std::size_t>(i)] <= cut) {
      nl += 1;
      nsl += part;
    } else {
      nr += 1;
      nsr += part;
    }
  }
  // Prior and proposal terms cancel: both directions pick (var, value) from
  // the same node with the same split-probability weights.
  double log_ratio = 0.0;
  if (likelihood_enabled_) {
    log_ratio = leaf_loglik(nl, nsl) + leaf_loglik(nr, nsr) - leaf_loglik(ol, osl) - leaf_loglik(orr, osr);
  }
  if (!(std::log(rng.uniform_open()) < log_ratio)) return false;

  tree.set_rule(target, {var, levels_[static_cast<std::size_t>(var)][static_cast<std::size_t>(cut)]});
  auto& lor_mut = leaf_of_row_[static_cast<std::size_t>(t)];
  std::vector<int> left_rows, right_rows;
  for (int i : rows) {
    const double old_value = lor_mut[static_cast<std::size_t>(i)] == l ? vl : vr;
    const bool go_left = rk[static_cast<std::size_t>(i)] <= cut;
    lor_mut[static_cast<std::size_t>(i)] = go_left ? l : r;
    residual_[i] += old_value - (go_left ? vl : vr);
    (go_left ? left_rows : right_rows).push_back(i);
  }
  refresh_avail(t, l, left_rows);
  refresh_avail(t, r, right_rows);
  ++stats_.accepted[2];
  return true;
}

void BartSampler::gibbs_leaf_update(int t, RngStream& rng) {
  Tree& tree = trees_[static_cast<std::size_t>(t)];
  const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  const auto cap = static_cast<std::size_t>(tree.capacity());
  std::vector<double> count(cap, 0.0), sum(cap, 0.0), old_value(cap, 0.0), new_value(cap, 0.0);
  for (int id = 0; id < tree.capacity(); ++id) {
    if (tree.alive(id)) old_value[static_cast<std::size_t>(id)] = tree.node(id).value;
  }
  for (int i = 0; i < n_; ++i) {
    const auto leaf = static_cast<std::size_t>(lor[static_cast<std::size_t>(i)]);
    count[leaf] += 1.0;
    sum[leaf] += residual_[i] + old_value[leaf];
  }
  const double s2 = sigma_ * sigma_;
  const double prior_prec = 1.0 / (leaf_sd_ * leaf_sd_);
  for (int id = 0; id < tree.capacity(); ++id) {
    if (!tree.alive(id) || !tree.node(id).is_leaf()) continue;
    const auto k = static_cast<std::size_t>(id);
    const double post_var = 1.0 / (count[k] / s2 + prior_prec);
    const double post_mean = post_var * sum[k] / s2;
    new_value[k] = post_mean + std::sqrt(post_var) * rng.normal();
    tree.set_leaf_value(id, new_value[k]);
  }
  for (int i = 0; i < n_; ++i) {
    const auto leaf = static_cast<std::size_t>(lor[static_cast<std::size_t>(i)]);
    residual_[i] += old_value[leaf] - new_value[leaf];
  }
}

void BartSampler::gibbs_sigma_update(RngStream& rng) {
  const double df = config_.sigma_df;
  const double ssr = residual_.squaredNorm();
  const double post_df = df + n_;
  const double post_scale = (df * sigma_lambda_ + ssr) / post_df;
  sigma_ = std::sqrt(draw(rng, ScaledInvChiSq{post_df, post_scale}));
}

std::vector<int> BartSampler::split_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(p_), 0);
  for (const Tree& tree : trees_) {
    for (int id : tree.internal_nodes()) ++counts[static_cast<std::size_t>(tree.node(id).rule.var)];
  }
  return counts;
}

void BartSampler::gibbs_split_prob_update(RngStream& rng) {
  const auto counts = split_counts();
  Dirichlet dir;
  dir.alpha.resize(static_cast<std::size_t>(p_));
  for (int v = 0; v < p_; ++v) dir.alpha[static_cast<std::size_t>(v)] = theta_ / p_ + counts[static_cast<std::size_t>(v)];
  split_probs_ = draw(rng, dir);
  const auto weights = theta_grid_posterior(split_probs_);
  const double u = sparsity_grid()[static_cast<std::size_t>(draw_index(rng, weights))];
  theta_ = p_ * u / (1.0 - u);
}

void BartSampler::update_probit_latent(std::span<const int> labels, double offset, RngStream& rng) {
  if (static_cast<int>(labels.size()) != n_) throw DimensionMismatch("label count does not match X rows");
  for (int i = 0; i < n_; ++i) {
    const double f = target_[i] - residual_[i];
    const double mean = offset + f;
    const double z = labels[static_cast<std::size_t>(i)] == 1 ? mean + std_normal_above(rng, -mean)
                                                              : mean - std_normal_above(rng, mean);
    target_[i] = z - offset;
    residual_[i] = target_[i] - f;
  }
}

void BartSampler::sweep(RngStream& rng) {
  for (int t = 0; t < num_trees(); ++t) {
    mh_tree_update(t, rng);
    gibbs_leaf_update(t, rng);
  }
  if (!sigma_fixed_) gibbs_sigma_update(rng);
  if (config_.sparse) gibbs_split_prob_update(rng);
#ifndef NDEBUG
  check_invariants();
#endif
}

void BartSampler::set_tree(int t, const Tree& replacement) {
  if (replacement.num_features() != p_) throw DimensionMismatch("tree feature count does not match X");
  replacement.validate();
  Tree& tree = trees_[static_cast<std::size_t>(t)];
  auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
  for (int i = 0; i < n_; ++i) residual_[i] += tree.node(lor[static_cast<std::size_t>(i)]).value;
  tree = replacement;
  std::vector<std::vector<int>> rows_by_node(static_cast<std::size_t>(tree.capacity()));
  for (int i = 0; i < n_; ++i) {
    int id = Tree::kRoot;
    for (;;) {
      rows_by_node[static_cast<std::size_t>(id)].push_back(i);
      const TreeNode& nd = tree.node(id);
      if (nd.is_leaf()) break;
      id = X_(i, nd.rule.var) <= nd.rule.value ? nd.left : nd.right;
    }
    lor[static_cast<std::size_t>(i)] = id;
    residual_[i] -= tree.node(id).value;
  }
  avail_[static_cast<std::size_t>(t)].assign(static_cast<std::size_t>(tree.capacity() * p_), 0);
  for (int id = 0; id < tree.capacity(); ++id) {
    if (tree.alive(id)) refresh_avail(t, id, rows_by_node[static_cast<std::size_t>(id)]);
  }
}

Forest BartSampler::forest(double offset) const {
  Forest f;
  f.trees = trees_;
  f.offset = offset;
  return f;
}

void BartSampler::check_invariants(double tol) const {
  for (int t = 0; t < num_trees(); ++t) {
    const Tree& tree = trees_[static_cast<std::size_t>(t)];
    tree.validate();
    const auto& lor = leaf_of_row_[static_cast<std::size_t>(t)];
    for (int i = 0; i < n_; ++i) {
      if (tree.route(X_, i) != lor[static_cast<std::size_t>(i)]) {
        throw Error(fmt::format("tree {}: cached leaf of row {} is stale", t, i));
      }
    }
  }
  for (int i = 0; i < n_; ++i) {
    double fit = 0.0;
    for (const Tree& tree : trees_) fit += tree.node(tree.route(X_, i)).value;
    const double expected = target_[i] - fit;
    if (std::abs(expected - residual_[i]) > tol) {
      throw Error(fmt::format("residual cache drift at row {}: {} vs {}", i, residual_[i], expected));
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

void check_inputs(const Eigen::MatrixXd& X, Eigen::Index n, const Eigen::MatrixXd* X_test) {
  if (X.rows() != n) throw DimensionMismatch(fmt::format("X has {} rows, outcome has {}", X.rows(), n));
  if (n < 2) throw DataError("need at least two training rows");
  if (!X.allFinite()) throw DataError("X contains non-finite entries");
  if (X_test && X_test->cols() != X.cols()) {
    throw DimensionMismatch(fmt::format("X_test has {} columns, X has {}", X_test->cols(), X.cols()));
  }
  if (X_test && !X_test->allFinite()) throw DataError("X_test contains non-finite entries");
}

void record_test(const BartSampler& sampler, const Eigen::MatrixXd& X_test, double offset, bool probit,
                 RowMatrix& out, Eigen::Index row) {
  for (Eigen::Index i = 0; i < X_test.rows(); ++i) {
    double f = offset;
    for (int t = 0; t < sampler.num_trees(); ++t) {
      const Tree& tree = sampler.tree(t);
      f += tree.node(tree.route(X_test, i)).value;
    }
    out(row, i) = probit ? std_normal_cdf(f) : f;
  }
}

}  // namespace

PosteriorDraws run_bart_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   const BartConfig& config, RngStream& rng, const Eigen::MatrixXd* X_test) {
  config.validate();
  check_inputs(X, y.size(), X_test);
  if (!y.allFinite()) throw DataError("outcome contains non-finite entries");

  Eigen::VectorXd yv = y;
  double range = yv.maxCoeff() - yv.minCoeff();
  if (range == 0.0) {
    if (!config.jitter_constant) throw DataError("outcome is constant; enable jitter_constant to fit it");
    const double scale = 1e-6 * std::max(1.0, std::abs(yv[0]));
    for (Eigen::Index i = 0; i < yv.size(); ++i) yv[i] += scale * rng.normal();
    range = yv.maxCoeff() - yv.minCoeff();
  }
  const double ybar = yv.mean();
  const double leaf_sd = range / (2.0 * config.leaf_sd_k * std::sqrt(static_cast<double>(config.num_trees)));
  const double sigma_hat = residual_sd(yv, X);
  const double lambda = sigma_lambda_for(sigma_hat, config.sigma_df, config.sigma_quantile);

  BartSampler sampler(X, yv.array() - ybar, config, leaf_sd, sigma_hat, lambda);
  PosteriorDraws out;
  out.fitted.resize(config.num_draws, X.rows());
  out.sigma.resize(config.num_draws);
  if (X_test) out.fitted_test.resize(config.num_draws, X_test->rows());

  const long total = config.burn_in + static_cast<long>(config.num_draws) * config.thin;
  Eigen::Index kept = 0;
  for (long it = 0; it < total; ++it) {
    sampler.sweep(rng);
    if (it < config.burn_in || (it - config.burn_in) % config.thin != 0) continue;
    out.fitted.row(kept) = (sampler.fitted().array() + ybar).transpose();
    out.sigma[kept] = sampler.sigma();
    if (X_test) record_test(sampler, *X_test, ybar, false, out.fitted_test, kept);
    ++kept;
  }
  out.moves = sampler.move_stats();
  return out;
}

PosteriorDraws run_bart_binary(const Eigen::MatrixXd& X, std::span<const int> labels, const BartConfig& config,
                               RngStream& rng, const Eigen::MatrixXd* X_test) {
  config.validate();
  const auto n = static_cast<Eigen::Index>(labels.size());
  check_inputs(X, n, X_test);
  long ones = 0;
  for (int r : labels) {
    if (r != 0 && r != 1) throw DataError("binary labels must be 0 or 1");
    ones += r;
  }
  if (ones == 0 || ones == n) throw DataError("binary labels contain a single class");

  const double offset = std_normal_quantile(static_cast<double>(ones) / static_cast<double>(n));
  const double leaf_sd = 3.0 / (config.leaf_sd_k * std::sqrt(static_cast<double>(config.num_trees)));
  BartSampler sampler(X, Eigen::VectorXd::Zero(n), config, leaf_sd, 1.0, 1.0);
  sampler.fix_sigma(1.0);

  PosteriorDraws out;
  out.fitted.resize(config.num_draws, n);
  out.sigma = Eigen::VectorXd::Ones(config.num_draws);
  if (X_test) out.fitted_test.resize(config.num_draws, X_test->rows());

  const long total = config.burn_in + static_cast<long>(config.num_draws) * config.thin;
  Eigen::Index kept = 0;
  for (long it = 0; it < total; ++it) {
    sampler.update_probit_latent(labels, offset, rng);
    sampler.sweep(rng);
    if (it < config.burn_in || (it - config.burn_in) % config.thin != 0) continue;
    const Eigen::VectorXd f = sampler.fitted();
    for (Eigen::Index i = 0; i < n; ++i) out.fitted(kept, i) = std_normal_cdf(offset + f[i]);
    if (X_test) record_test(sampler, *X_test, offset, true, out.fitted_test, kept);
    ++kept;
  }
  out.moves = sampler.move_stats();
  return out;
}

}  // namespace robart
