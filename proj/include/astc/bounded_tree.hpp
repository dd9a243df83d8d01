#pragma once

#include "astc/belief_model.hpp"
#include "astc/common.hpp"

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace astc {

/// Linear lower/upper value-bound weights: v_L(b) = wL.b, v_U(b) = wU.b.
struct BoundWeights {
  Vec lower;
  Vec upper;

  static BoundWeights uniform(int K, double lo, double hi) {
    return {Vec::Constant(K, lo), Vec::Constant(K, hi)};
  }
};

struct SearchBudget {
  int max_expansions = 50;
  /// Stop once the root gap falls below this.
  double eps_gap = 1e-3;
  /// Stop when one expansion shrinks the root gap by less than this.
  double eps_gap_delta = 0.0;
  /// Observation cells with lower probability are not instantiated.
  double p_min = 1e-4;
};

struct SearchResult {
  double root_lower = 0.0;
  double root_upper = 0.0;
  double root_value = 0.0;
  int best_root_action_bin = 0;
  int expansions_used = 0;
  std::vector<double> root_gap_history;
};

/// Successor structure of one action at a node.
struct ActionBranch {
  double reward = 0.0;  // R_B(b, a)
  Vec cell_prob;        // joint P(continue, cell)
  Mat successor;        // K x n_cells, column k = belief after cell k (zero if impossible)
  double leaf_lower = 0.0;  // one-step value with critic leaves
  double leaf_upper = 0.0;
  bool expanded = false;
  std::vector<int> child;  // node index per cell, -1 if not instantiated
  double pruned_lower = 0.0;  // sum of p * leaf bound over pruned cells
  double pruned_upper = 0.0;
};

struct BeliefNode {
  Belief belief;
  int depth = 0;
  double lower = 0.0;
  double upper = 0.0;
  double reach_prob = 1.0;
  int parent = -1;
  int parent_action = -1;
  int parent_cell = -1;
  int best_action = -1;
  std::vector<ActionBranch> actions;  // empty until the node is first expanded

  bool evaluated() const { return !actions.empty(); }
  bool has_children() const {
    for (const auto& a : actions)
      if (a.expanded) return true;
    return false;
  }
};

/// Anytime bounded search over beliefs. Nodes are stored in creation order, so
/// every parent precedes its children.
///
/// A node is open when its current best action has not been expanded; fresh
/// leaves are open. Each step expands the open node maximizing
/// gamma^depth * (upper - lower) * reach_prob, where reach_prob multiplies cell
/// probabilities along the path and is zero below any off-best action.
class SearchTree {
 public:
  SearchTree(const PomdpModel& model, const BoundWeights& critic, const Belief& root, double p_min = 1e-4)
      : model_(&model), critic_(critic), p_min_(p_min) {
    if (root.size() != model.K || !is_simplex(root)) throw DataError("search: root belief is not a valid simplex vector");
    if (critic.lower.size() != model.K || critic.upper.size() != model.K)
      throw ConfigError("search: critic weights do not match K");
    BeliefNode n;
    n.belief = root;
    set_leaf_bounds(n);
    nodes_.push_back(std::move(n));
  }

  SearchTree(PomdpModel&&, const BoundWeights&, const Belief&, double = 1e-4) = delete;

  const std::vector<BeliefNode>& nodes() const { return nodes_; }
  const BeliefNode& root() const { return nodes_.front(); }
  double root_gap() const { return root().upper - root().lower; }

  /// Cached fringe-selection score of a node.
  double fringe_score(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return std::pow(model_->gamma, n.depth) * (n.upper - n.lower) * n.reach_prob;
  }

  bool is_open(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return !n.evaluated() || !n.actions[static_cast<std::size_t>(n.best_action)].expanded;
  }

  /// Open node with maximal score; -1 when no open node has positive score.
  int select_fringe() const {
    int best = -1;
    double best_score = 0.0;
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) {
      if (!is_open(i)) continue;
      double sc = fringe_score(i);
      if (sc > best_score) {
        best_score = sc;
        best = i;
      }
    }
    return best;
  }

  /// Instantiates the children of the node's best upper-bound action.
  void expand(int id) {
    if (!is_open(id)) throw Error("search: expand called on a node that is not open");
    evaluate(id);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    recompute_bounds(node);
    int a = node.best_action;
    instantiate(id, a);
  }

  /// Recomputes bounds and best actions from `id` up to the root, then refreshes
  /// reach probabilities.
  void backup(int id) {
    for (int cur = id; cur >= 0; cur = nodes_[static_cast<std::size_t>(cur)].parent)
      recompute_bounds(nodes_[static_cast<std::size_t>(cur)]);
    refresh_reach();
  }

  /// One select-expand-backup cycle. Returns false if nothing could be expanded.
  bool step() {
    int id = select_fringe();
    if (id < 0) return false;
    expand(id);
    backup(id);
    return true;
  }

  /// Best root action without instantiating children (one-step critic leaves).
  int leaf_best_action() {
    evaluate(0);
    auto& r = nodes_.front();
    Vec qu(static_cast<Eigen::Index>(r.actions.size()));
    for (std::size_t a = 0; a < r.actions.size(); ++a) qu[static_cast<Eigen::Index>(a)] = r.actions[a].leaf_upper;
    return static_cast<int>(argmax_lowest(qu));
  }

  /// Q bounds of action a at a node from its current children or critic leaves.
  std::pair<double, double> q_bounds(const BeliefNode& n, int a) const {
    const auto& br = n.actions[static_cast<std::size_t>(a)];
    if (!br.expanded) return {br.leaf_lower, br.leaf_upper};
    double lo = br.pruned_lower, hi = br.pruned_upper;
    for (std::size_t c = 0; c < br.child.size(); ++c) {
      if (br.child[c] < 0) continue;
      const auto& ch = nodes_[static_cast<std::size_t>(br.child[c])];
      lo += br.cell_prob[static_cast<Eigen::Index>(c)] * ch.lower;
      hi += br.cell_prob[static_cast<Eigen::Index>(c)] * ch.upper;
    }
    return {br.reward + model_->gamma * lo, br.reward + model_->gamma * hi};
  }

  /// Writes one line per node: id, parent, depth, action, cell, lower, upper, reach.
  void dump(std::ostream& out) const {
    out << "# id\tparent\tdepth\taction\tcell\tlower\tupper\treach_prob\tbest_action\n";
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      out << i << '\t' << n.parent << '\t' << n.depth << '\t' << n.parent_action << '\t' << n.parent_cell << '\t'
          << fmt_double(n.lower) << '\t' << fmt_double(n.upper) << '\t' << fmt_double(n.reach_prob) << '\t'
          << n.best_action << '\n';
    }
  }

 private:
  void set_leaf_bounds(BeliefNode& n) const {
    n.lower = critic_.lower.dot(n.belief);
    n.upper = critic_.upper.dot(n.belief);
    clamp(n);
  }

  static void clamp(BeliefNode& n) {
    if (n.upper < n.lower) {
      double mid = 0.5 * (n.lower + n.upper);
      n.lower = mid;
      n.upper = mid;
    }
  }

  /// Fills per-action successor data and one-step critic-leaf values.
  void evaluate(int id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.evaluated()) return;
    const int K = model_->K;
    const int M = model_->n_cells();
    node.actions.resize(static_cast<std::size_t>(model_->n_actions));
    for (int a = 0; a < model_->n_actions; ++a) {
      auto& br = node.actions[static_cast<std::size_t>(a)];
      br.reward = expected_reward(*model_, node.belief, a);
      Vec pred = propagate(*model_, node.belief, a);
      br.cell_prob.resize(M);
      br.successor = Mat::Zero(K, M);
      double lo = 0.0, hi = 0.0;
      for (int c = 0; c < M; ++c) {
        Vec un = model_->C.col(c).cwiseProduct(pred);
        double p = un.sum();
        br.cell_prob[c] = p > 0.0 ? p : 0.0;
        if (p > 0.0) {
          br.successor.col(c) = un / p;
          lo += p * critic_.lower.dot(br.successor.col(c));
          hi += p * critic_.upper.dot(br.successor.col(c));
        }
      }
      br.leaf_lower = br.reward + model_->gamma * lo;
      br.leaf_upper = br.reward + model_->gamma * hi;
      if (br.leaf_upper < br.leaf_lower) {
        double mid = 0.5 * (br.leaf_lower + br.leaf_upper);
        br.leaf_lower = mid;
        br.leaf_upper = mid;
      }
    }
  }

  void instantiate(int id, int a) {
    auto& br0 = nodes_[static_cast<std::size_t>(id)].actions[static_cast<std::size_t>(a)];
    const int M = static_cast<int>(br0.cell_prob.size());
    br0.expanded = true;
    br0.child.assign(static_cast<std::size_t>(M), -1);
    br0.pruned_lower = 0.0;
    br0.pruned_upper = 0.0;
    for (int c = 0; c < M; ++c) {
      // nodes_ may reallocate below; re-fetch references each iteration.
      auto& parent = nodes_[static_cast<std::size_t>(id)];
      auto& br = parent.actions[static_cast<std::size_t>(a)];
      double p = br.cell_prob[c];
      if (p <= 0.0) continue;
      Belief nb = br.successor.col(c);
      if (p <= p_min_) {
        BeliefNode tmp;
        tmp.belief = nb;
        set_leaf_bounds(tmp);
        br.pruned_lower += p * tmp.lower;
        br.pruned_upper += p * tmp.upper;
        continue;
      }
      BeliefNode child;
      child.belief = std::move(nb);
      child.depth = parent.depth + 1;
      child.parent = id;
      child.parent_action = a;
      child.parent_cell = c;
      child.reach_prob = parent.reach_prob * p * (parent.best_action == a ? 1.0 : 0.0);
      set_leaf_bounds(child);
      br.child[static_cast<std::size_t>(c)] = static_cast<int>(nodes_.size());
      nodes_.push_back(std::move(child));
    }
  }

  void recompute_bounds(BeliefNode& n) const {
    if (!n.evaluated()) return;
    const int A = static_cast<int>(n.actions.size());
    Vec qu(A);
    double lo = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < A; ++a) {
      auto [l, u] = q_bounds(n, a);
      qu[a] = u;
      lo = std::max(lo, l);
    }
    n.best_action = static_cast<int>(argmax_lowest(qu));
    n.lower = lo;
    n.upper = qu[n.best_action];
    clamp(n);
  }

  void refresh_reach() {
    for (std::size_t i = 1; i < nodes_.size(); ++i) {
      auto& n = nodes_[i];
      const auto& p = nodes_[static_cast<std::size_t>(n.parent)];
      double pol = p.best_action == n.parent_action ? 1.0 : 0.0;
      n.reach_prob = p.reach_prob * pol *
                     p.actions[static_cast<std::size_t>(n.parent_action)].cell_prob[n.parent_cell];
    }
  }

  const PomdpModel* model_;
  BoundWeights critic_;
  double p_min_;
  std::vector<BeliefNode> nodes_;
};

/// Runs the anytime search from `root` until the budget or a gap criterion stops it.
inline SearchResult search(const PomdpModel& model, const BoundWeights& critic, const Belief& root,
                           const SearchBudget& budget, std::optional<SearchTree>* tree_out = nullptr) {
  SearchTree tree(model, critic, root, budget.p_min);
  SearchResult res;
  res.root_gap_history.push_back(tree.root_gap());
  if (budget.max_expansions <= 0) {
    res.best_root_action_bin = tree.leaf_best_action();
  } else {
    while (res.expansions_used < budget.max_expansions) {
      double gap = tree.root_gap();
      if (gap < budget.eps_gap) break;
      if (!tree.step()) break;
      ++res.expansions_used;
      double new_gap = tree.root_gap();
      res.root_gap_history.push_back(new_gap);
      if (gap - new_gap < budget.eps_gap_delta) break;
    }
    res.best_root_action_bin = tree.root().evaluated() ? tree.root().best_action : tree.leaf_best_action();
  }
  res.root_lower = tree.root().lower;
  res.root_upper = tree.root().upper;
  res.root_value = 0.5 * (res.root_lower + res.root_upper);
  if (tree_out) tree_out->emplace(std::move(tree));
  return res;
}

}  // namespace astc
