#include "robart/tree.hpp"

#include <algorithm>
#include <fmt/format.h>

#include "robart/error.hpp"

namespace robart {

Tree::Tree(int num_features, double root_value) : num_features_(num_features) {
  if (num_features < 1) throw InvalidParameter("Tree.num_features must be >= 1");
  TreeNode root;
  root.value = root_value;
  nodes_.push_back(root);
  free_mask_.push_back(false);
}

bool Tree::alive(int id) const {
  return id >= 0 && id < capacity() && !free_mask_[static_cast<std::size_t>(id)];
}

std::pair<int, int> Tree::split(int leaf, SplitRule rule, double left_value, double right_value) {
  if (!alive(leaf) || !node(leaf).is_leaf()) throw Error("Tree::split: node is not a leaf");
  if (rule.var < 0 || rule.var >= num_features_) {
    throw DimensionMismatch(fmt::format("split variable {} outside [0, {})", rule.var, num_features_));
  }
  auto take_slot = [this]() {
    if (!free_.empty()) {
      const int id = free_.back();
      free_.pop_back();
      free_mask_[static_cast<std::size_t>(id)] = false;
      return id;
    }
    nodes_.emplace_back();
    free_mask_.push_back(false);
    return capacity() - 1;
  };
  const int l = take_slot();
  const int r = take_slot();
  const int child_depth = node(leaf).depth + 1;
  nodes_[static_cast<std::size_t>(l)] = TreeNode{-1, -1, leaf, child_depth, {}, left_value};
  nodes_[static_cast<std::size_t>(r)] = TreeNode{-1, -1, leaf, child_depth, {}, right_value};
  TreeNode& parent = nodes_[static_cast<std::size_t>(leaf)];
  parent.left = l;
  parent.right = r;
  parent.rule = rule;
  return {l, r};
}

void Tree::collapse(int id, double value) {
  if (!alive(id) || node(id).is_leaf()) throw Error("Tree::collapse: node is not internal");
  TreeNode& n = nodes_[static_cast<std::size_t>(id)];
  if (!node(n.left).is_leaf() || !node(n.right).is_leaf()) {
    throw Error("Tree::collapse: children are not both leaves");
  }
  for (int c : {n.left, n.right}) {
    free_mask_[static_cast<std::size_t>(c)] = true;
    free_.push_back(c);
  }
  n.left = n.right = -1;
  n.rule = {};
  n.value = value;
}

std::vector<int> Tree::leaves() const {
  std::vector<int> out;
  for (int id = 0; id < capacity(); ++id) {
    if (alive(id) && node(id).is_leaf()) out.push_back(id);
  }
  return out;
}

std::vector<int> Tree::internal_nodes() const {
  std::vector<int> out;
  for (int id = 0; id < capacity(); ++id) {
    if (alive(id) && !node(id).is_leaf()) out.push_back(id);
  }
  return out;
}

std::vector<int> Tree::nog_nodes() const {
  std::vector<int> out;
  for (int id = 0; id < capacity(); ++id) {
    if (!alive(id)) continue;
    const TreeNode& n = node(id);
    if (!n.is_leaf() && node(n.left).is_leaf() && node(n.right).is_leaf()) out.push_back(id);
  }
  return out;
}

int Tree::max_depth() const {
  int d = 0;
  for (int id = 0; id < capacity(); ++id) {
    if (alive(id)) d = std::max(d, node(id).depth);
  }
  return d;
}

int Tree::route(std::span<const double> x) const {
  int id = kRoot;
  while (!nodes_[static_cast<std::size_t>(id)].is_leaf()) {
    const TreeNode& n = nodes_[static_cast<std::size_t>(id)];
    id = x[static_cast<std::size_t>(n.rule.var)] <= n.rule.value ? n.left : n.right;
  }
  return id;
}

int Tree::route(const Eigen::MatrixXd& X, Eigen::Index row) const {
  int id = kRoot;
  while (!nodes_[static_cast<std::size_t>(id)].is_leaf()) {
    const TreeNode& n = nodes_[static_cast<std::size_t>(id)];
    id = X(row, n.rule.var) <= n.rule.value ? n.left : n.right;
  }
  return id;
}

void Tree::validate() const {
  if (!alive(kRoot) || node(kRoot).parent != -1 || node(kRoot).depth != 0) {
    throw Error("tree: malformed root");
  }
  int leaves = 0;
  int reached = 0;
  std::vector<int> stack{kRoot};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (!alive(id)) throw Error(fmt::format("tree: dangling reference to node {}", id));
    ++reached;
    const TreeNode& n = node(id);
    if (n.is_leaf()) {
      if (n.right != -1) throw Error(fmt::format("tree: node {} has one child", id));
      ++leaves;
      continue;
    }
    if (n.right < 0) throw Error(fmt::format("tree: node {} has one child", id));
    if (n.rule.var < 0 || n.rule.var >= num_features_) {
      throw Error(fmt::format("tree: node {} splits on invalid variable {}", id, n.rule.var));
    }
    for (int c : {n.left, n.right}) {
      if (!alive(c) || node(c).parent != id) throw Error(fmt::format("tree: bad parent link at {}", c));
      if (node(c).depth != n.depth + 1) throw Error(fmt::format("tree: bad depth at {}", c));
      stack.push_back(c);
    }
  }
  if (reached != num_nodes()) throw Error("tree: unreachable nodes");
  if (reached != 2 * leaves - 1) throw Error("tree: node count != 2 * leaves - 1");
}

std::string Tree::dump() const {
  std::string out;
  for (int id = 0; id < capacity(); ++id) {
    if (!alive(id)) continue;
    const TreeNode& n = node(id);
    if (n.is_leaf()) {
      out += fmt::format("{} leaf {}\n", id, n.value);
    } else {
      out += fmt::format("{} internal {} {} {} {}\n", id, n.rule.var, n.rule.value, n.left, n.right);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

double evaluate_tree(const Tree& tree, std::span<const double> x) {
  if (static_cast<int>(x.size()) != tree.num_features()) {
    throw DimensionMismatch(
        fmt::format("covariate vector has {} entries, tree expects {}", x.size(), tree.num_features()));
  }
  return tree.node(tree.route(x)).value;
}

double evaluate_forest(const Forest& forest, std::span<const double> x) {
  double total = forest.offset;
  for (const Tree& t : forest.trees) total += evaluate_tree(t, x);
  return total;
}

Eigen::VectorXd evaluate_forest(const Forest& forest, const Eigen::MatrixXd& X) {
  Eigen::VectorXd out = Eigen::VectorXd::Constant(X.rows(), forest.offset);
  for (const Tree& t : forest.trees) {
    if (X.cols() != t.num_features()) {
      throw DimensionMismatch(fmt::format("matrix has {} columns, tree expects {}", X.cols(), t.num_features()));
    }
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] += t.node(t.route(X, i)).value;
  }
  return out;
}

std::vector<int> leaf_assignments(const Tree& tree, const Eigen::MatrixXd& X) {
  if (X.cols() != tree.num_features()) {
    throw DimensionMismatch(fmt::format("matrix has {} columns, tree expects {}", X.cols(), tree.num_features()));
  }
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[static_cast<std::size_t>(i)] = tree.route(X, i);
  return out;
}

std::vector<Eigen::Index> rows_in_node(const Tree& tree, int node, const Eigen::MatrixXd& X) {
  if (X.cols() != tree.num_features()) {
    throw DimensionMismatch(fmt::format("matrix has {} columns, tree expects {}", X.cols(), tree.num_features()));
  }
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    int id = Tree::kRoot;
    for (;;) {
      if (id == node) {
        rows.push_back(i);
        break;
      }
      const TreeNode& n = tree.node(id);
      if (n.is_leaf()) break;
      id = X(i, n.rule.var) <= n.rule.value ? n.left : n.right;
    }
  }
  return rows;
}

std::vector<SplitRule> grow_candidates(const Tree& tree, int node, const Eigen::MatrixXd& X,
                                       int min_node_size) {
  if (!tree.alive(node) || !tree.node(node).is_leaf()) throw Error("grow_candidates: node is not a leaf");
  const auto rows = rows_in_node(tree, node, X);
  const auto n = static_cast<std::ptrdiff_t>(rows.size());
  const std::ptrdiff_t m = std::max(min_node_size, 1);
  std::vector<SplitRule> out;
  std::vector<double> vals(rows.size());
  for (int v = 0; v < tree.num_features(); ++v) {
    for (std::size_t k = 0; k < rows.size(); ++k) vals[k] = X(rows[k], v);
    std::sort(vals.begin(), vals.end());
    // Splitting at sorted position k puts vals[0..k] left and the rest right.
    for (std::ptrdiff_t k = 0; k + 1 < n; ++k) {
      if (vals[static_cast<std::size_t>(k)] == vals[static_cast<std::size_t>(k + 1)]) continue;
      const std::ptrdiff_t left = k + 1;
      if (left >= m && n - left >= m) out.push_back({v, vals[static_cast<std::size_t>(k)]});
    }
  }
  return out;
}

}  // namespace robart
