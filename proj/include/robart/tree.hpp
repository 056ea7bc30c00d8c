#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

namespace robart {

/// Axis-aligned split: rows with x[var] <= value go left, the rest right.
struct SplitRule {
  int var = -1;
  double value = 0.0;

  friend bool operator==(const SplitRule&, const SplitRule&) = default;
};

struct TreeNode {
  int left = -1;
  int right = -1;
  int parent = -1;
  int depth = 0;
  SplitRule rule;     // internal nodes only
  double value = 0.0; // leaf step height; ignored for internal nodes

  bool is_leaf() const { return left < 0; }
};

/// Binary decision tree stored as an index-based node array. Node 0 is the
/// root; freed slots are recycled so node ids stay stable across moves.
class Tree {
 public:
  static constexpr int kRoot = 0;

  explicit Tree(int num_features, double root_value = 0.0);

  int num_features() const { return num_features_; }

  /// Splits a leaf. Returns {left id, right id}.
  std::pair<int, int> split(int leaf, SplitRule rule, double left_value = 0.0,
                            double right_value = 0.0);
  /// Collapses an internal node whose children are both leaves.
  void collapse(int node, double value = 0.0);

  const TreeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  void set_leaf_value(int id, double value) { nodes_[static_cast<std::size_t>(id)].value = value; }
  void set_rule(int id, SplitRule rule) { nodes_[static_cast<std::size_t>(id)].rule = rule; }

  bool alive(int id) const;
  /// Size of the id space (alive and free slots).
  int capacity() const { return static_cast<int>(nodes_.size()); }
  int num_nodes() const { return capacity() - static_cast<int>(free_.size()); }
  int num_leaves() const { return (num_nodes() + 1) / 2; }

  std::vector<int> leaves() const;
  std::vector<int> internal_nodes() const;
  /// Internal nodes whose two children are leaves (prune / change targets).
  std::vector<int> nog_nodes() const;
  int max_depth() const;

  /// Leaf id reached by x. No dimension check.
  int route(std::span<const double> x) const;
  int route(const Eigen::MatrixXd& X, Eigen::Index row) const;

  /// Throws Error when a structural invariant is broken.
  void validate() const;

  /// One node per line: "id leaf value" or "id internal var value left right",
  /// ordered by id, numbers printed round-trip exact.
  std::string dump() const;

 private:
  int num_features_;
  std::vector<TreeNode> nodes_;
  std::vector<bool> free_mask_;
  std::vector<int> free_;
};

/// Sum-of-trees function plus the centering constant.
struct Forest {
  std::vector<Tree> trees;
  double offset = 0.0;
};

double evaluate_tree(const Tree& tree, std::span<const double> x);
double evaluate_forest(const Forest& forest, std::span<const double> x);
/// Forest evaluated at every row of X.
Eigen::VectorXd evaluate_forest(const Forest& forest, const Eigen::MatrixXd& X);

/// Leaf id for every row of X, matching evaluate_tree's routing.
std::vector<int> leaf_assignments(const Tree& tree, const Eigen::MatrixXd& X);

/// Training rows routed through `node` (not only leaves).
std::vector<Eigen::Index> rows_in_node(const Tree& tree, int node, const Eigen::MatrixXd& X);

/// Every split of leaf `node` at an observed value of the rows it holds that
/// leaves both children with at least `min_node_size` rows. Sorted by
/// (var, value).
std::vector<SplitRule> grow_candidates(const Tree& tree, int node, const Eigen::MatrixXd& X,
                                       int min_node_size);

}  // namespace robart
