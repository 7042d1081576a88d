#pragma once

#include <json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace treediff {

struct TreeNode {
  int id = 0;
  int parent = -1;
  int left = -1;
  int right = -1;
  int depth = 0;
  /// Bottom-up feature level read by this node's posterior heads. Equals the
  /// depth at creation and is kept when pruning shortens a path.
  int feature_level = 0;
  /// Bottom-up feature level read by this node's inference router.
  int router_level = 0;

  bool is_leaf() const { return left < 0 && right < 0; }
};

/// What a single leaf removal did to the structure.
struct CollapseResult {
  int removed_leaf = -1;
  /// The single-child node that disappeared (the parent, or the surviving
  /// child when the parent was the root).
  int removed_node = -1;
  int survivor = -1;
  bool root_absorbed = false;
};

/// Binary tree structure. Node 0 is the root; ids are never reused.
class TreeTopology {
 public:
  TreeTopology() = default;

  /// Root plus two leaf children.
  static TreeTopology initial(int max_depth);

  int max_depth() const { return max_depth_; }
  int next_id() const { return next_id_; }
  size_t size() const { return nodes_.size(); }
  bool contains(int id) const { return nodes_.count(id) != 0; }
  const TreeNode& node(int id) const;
  bool is_leaf(int id) const { return node(id).is_leaf(); }

  /// Parents before children, siblings left before right.
  std::vector<int> node_ids() const;
  /// Leaves in left-to-right order.
  std::vector<int> leaves() const;
  std::vector<int> internal_nodes() const;
  /// Node ids from the root down to `id`, inclusive.
  std::vector<int> path_to(int id) const;
  int depth_of_tree() const;

  /// Turns a leaf into an internal node with two fresh leaf children.
  /// Does not enforce caps; callers check depth and leaf count.
  std::pair<int, int> split_leaf(int leaf);

  /// Removes a leaf and collapses its now single-child parent. A non-root
  /// parent is replaced by the surviving sibling; when the parent is the
  /// root, the root takes over the sibling's children (or becomes a leaf).
  CollapseResult remove_leaf(int leaf);

  /// Throws InvariantError if any structural invariant fails.
  void validate(int max_leaves) const;

  nlohmann::json to_json() const;
  /// One line per node: `id parent depth kind`, parent -1 for the root.
  std::string dump() const;
  static TreeTopology from_json(const nlohmann::json& j);

  bool operator==(const TreeTopology& other) const;

 private:
  void recompute_depths();
  TreeNode& mut(int id);

  std::map<int, TreeNode> nodes_;
  int next_id_ = 0;
  int max_depth_ = 1;
};

}  // namespace treediff
