#include "treediff/topology.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <string>

#include "treediff/errors.hpp"

namespace treediff {

TreeTopology TreeTopology::initial(int max_depth) {
  TreeTopology t;
  t.max_depth_ = max_depth;
  t.nodes_[0] = TreeNode{};
  t.next_id_ = 1;
  t.split_leaf(0);
  return t;
}

const TreeNode& TreeTopology::node(int id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw InvariantError("no tree node with id " + std::to_string(id));
  return it->second;
}

TreeNode& TreeTopology::mut(int id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw InvariantError("no tree node with id " + std::to_string(id));
  return it->second;
}

std::vector<int> TreeTopology::node_ids() const {
  std::vector<int> out;
  if (nodes_.empty()) return out;
  std::deque<int> queue{0};
  while (!queue.empty()) {
    const int id = queue.front();
    queue.pop_front();
    out.push_back(id);
    const TreeNode& n = node(id);
    if (n.left >= 0) queue.push_back(n.left);
    if (n.right >= 0) queue.push_back(n.right);
  }
  return out;
}

std::vector<int> TreeTopology::leaves() const {
  std::vector<int> out;
  std::function<void(int)> walk = [&](int id) {
    const TreeNode& n = node(id);
    if (n.is_leaf()) {
      out.push_back(id);
      return;
    }
    walk(n.left);
    walk(n.right);
  };
  if (!nodes_.empty()) walk(0);
  return out;
}

std::vector<int> TreeTopology::internal_nodes() const {
  std::vector<int> out;
  for (int id : node_ids())
    if (!node(id).is_leaf()) out.push_back(id);
  return out;
}

std::vector<int> TreeTopology::path_to(int id) const {
  std::vector<int> path;
  for (int cur = id; cur >= 0; cur = node(cur).parent) path.push_back(cur);
  std::reverse(path.begin(), path.end());
  return path;
}

int TreeTopology::depth_of_tree() const {
  int d = 0;
  for (const auto& [id, n] : nodes_) d = std::max(d, n.depth);
  return d;
}

std::pair<int, int> TreeTopology::split_leaf(int leaf) {
  TreeNode& parent = mut(leaf);
  if (!parent.is_leaf()) throw InvariantError("node " + std::to_string(leaf) + " is not a leaf");
  const int l = next_id_++;
  const int r = next_id_++;
  parent.left = l;
  parent.right = r;
  parent.router_level = parent.feature_level;
  const int depth = parent.depth + 1;
  const int level = parent.feature_level + 1;
  nodes_[l] = TreeNode{l, leaf, -1, -1, depth, level, level};
  nodes_[r] = TreeNode{r, leaf, -1, -1, depth, level, level};
  return {l, r};
}

CollapseResult TreeTopology::remove_leaf(int leaf) {
  const TreeNode victim = node(leaf);
  if (!victim.is_leaf()) throw InvariantError("node " + std::to_string(leaf) + " is not a leaf");
  if (victim.parent < 0) throw InvariantError("cannot remove the last leaf");
  const int p = victim.parent;
  const TreeNode parent = node(p);
  const int survivor = parent.left == leaf ? parent.right : parent.left;
  CollapseResult res;
  res.removed_leaf = leaf;
  res.survivor = survivor;
  nodes_.erase(leaf);
  if (p != 0) {
    TreeNode& gp = mut(parent.parent);
    (gp.left == p ? gp.left : gp.right) = survivor;
    mut(survivor).parent = parent.parent;
    nodes_.erase(p);
    res.removed_node = p;
  } else {
    const TreeNode s = node(survivor);
    TreeNode& root = mut(0);
    root.left = s.left;
    root.right = s.right;
    if (!s.is_leaf()) {
      root.router_level = s.router_level;
      mut(s.left).parent = 0;
      mut(s.right).parent = 0;
    }
    nodes_.erase(survivor);
    res.removed_node = survivor;
    res.root_absorbed = true;
  }
  recompute_depths();
  return res;
}

void TreeTopology::recompute_depths() {
  for (int id : node_ids()) {
    TreeNode& n = mut(id);
    n.depth = n.parent < 0 ? 0 : node(n.parent).depth + 1;
  }
}

void TreeTopology::validate(int max_leaves) const {
  auto fail = [](const std::string& what) { throw InvariantError("tree topology invalid: " + what); };
  if (!contains(0)) fail("missing root");
  if (node(0).parent != -1 || node(0).depth != 0) fail("root must have no parent and depth 0");
  const auto reachable = node_ids();
  if (reachable.size() != nodes_.size()) fail("unreachable nodes");
  for (const auto& [id, n] : nodes_) {
    if (n.id != id) fail("id mismatch");
    if ((n.left < 0) != (n.right < 0)) fail("node " + std::to_string(id) + " has exactly one child");
    if (n.left >= 0) {
      if (n.left == n.right) fail("duplicate child");
      for (int c : {n.left, n.right}) {
        if (node(c).parent != id) fail("child/parent mismatch at " + std::to_string(c));
        if (node(c).depth != n.depth + 1) fail("depth mismatch at " + std::to_string(c));
      }
    }
    if (n.depth > max_depth_) fail("depth exceeds max depth");
    if (n.feature_level > max_depth_ || n.router_level > max_depth_) fail("feature level exceeds max depth");
    if (id >= next_id_) fail("id beyond allocator");
  }
  const auto lv = leaves();
  if (lv.empty()) fail("no leaves");
  if (static_cast<int>(lv.size()) > max_leaves) fail("too many leaves");
}

nlohmann::json TreeTopology::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, n] : nodes_) {
    nodes.push_back({{"id", n.id},
                     {"parent", n.parent},
                     {"left", n.left},
                     {"right", n.right},
                     {"depth", n.depth},
                     {"feature_level", n.feature_level},
                     {"router_level", n.router_level}});
  }
  return {{"max_depth", max_depth_}, {"next_id", next_id_}, {"nodes", nodes}};
}

std::string TreeTopology::dump() const {
  std::string out;
  for (int id : node_ids()) {
    const TreeNode& n = node(id);
    out += std::to_string(id) + " " + std::to_string(n.parent) + " " + std::to_string(n.depth) + " " +
           (n.is_leaf() ? "leaf" : "internal") + "\n";
  }
  return out;
}

TreeTopology TreeTopology::from_json(const nlohmann::json& j) {
  TreeTopology t;
  t.max_depth_ = j.at("max_depth").get<int>();
  t.next_id_ = j.at("next_id").get<int>();
  for (const auto& n : j.at("nodes")) {
    TreeNode node{n.at("id").get<int>(),    n.at("parent").get<int>(),        n.at("left").get<int>(),
                  n.at("right").get<int>(), n.at("depth").get<int>(),         n.at("feature_level").get<int>(),
                  n.at("router_level").get<int>()};
    t.nodes_[node.id] = node;
  }
  return t;
}

bool TreeTopology::operator==(const TreeTopology& other) const {
  if (max_depth_ != other.max_depth_ || next_id_ != other.next_id_ || nodes_.size() != other.nodes_.size()) return false;
  for (const auto& [id, n] : nodes_) {
    auto it = other.nodes_.find(id);
    if (it == other.nodes_.end()) return false;
    const TreeNode& m = it->second;
    if (n.parent != m.parent || n.left != m.left || n.right != m.right || n.depth != m.depth ||
        n.feature_level != m.feature_level || n.router_level != m.router_level)
      return false;
  }
  return true;
}

}  // namespace treediff
