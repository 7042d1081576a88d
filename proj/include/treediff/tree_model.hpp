#pragma once

// The latent tree: per-node transformations, posterior heads, routers and
// leaf decoders over a learnable binary topology, with the bottom-up
// inference pass and the top-down generative / variational passes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "treediff/ad.hpp"
#include "treediff/checkpoint.hpp"
#include "treediff/config.hpp"
#include "treediff/errors.hpp"
#include "treediff/nn.hpp"
#include "treediff/rng.hpp"
#include "treediff/topology.hpp"

namespace treediff {

using ad::Matrix;
using ad::Tape;
using ad::Var;
using ad::Index;

enum class Likelihood { Bernoulli, Gaussian };

/// `Sample` draws z = mu + sigma * eps; `Mean` uses z = mu (deterministic).
enum class LatentMode { Sample, Mean };

struct TreeDims {
  int channels = 1;
  int height = 0;
  int width = 0;
  int latent_dim = 64;
  int bottom_up_dim = 128;
  int hidden_width = 128;
  int node_width = 64;
  int max_depth = 3;
  int max_leaves = 4;
  double sigma_floor = 1e-6;
  Likelihood likelihood = Likelihood::Bernoulli;

  int x_dim() const { return channels * height * width; }

  static TreeDims from_config(const ExperimentConfig& c);
  nlohmann::json to_json() const;
  static TreeDims from_json(const nlohmann::json& j);
};

/// Prior transformation: parent embedding -> (mean, variance).
template <typename S>
struct Transformation {
  nn::Dense<S> input;
  nn::ResidualBlock<S> body;
  nn::Dense<S> mu;
  nn::Dense<S> var;

  Transformation() = default;
  Transformation(const TreeDims& d, Rng& rng)
      : input(d.latent_dim, d.node_width, rng),
        body(d.node_width, d.node_width, nn::Activation::LeakyRelu, rng),
        mu(d.node_width, d.latent_dim, rng),
        var(d.node_width, d.latent_dim, rng) {}

  std::pair<Var<S>, Var<S>> operator()(Tape<S>& t, const Var<S>& parent, S floor) {
    const Var<S> h = ad::leaky_relu(body(t, ad::leaky_relu(input(t, parent), S(0.1))), S(0.1));
    return {mu(t, h), ad::shift(ad::softplus(var(t, h)), floor)};
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    input.visit(p + ".input", f);
    body.visit(p + ".body", f);
    mu.visit(p + ".mu", f);
    var.visit(p + ".var", f);
  }
};

/// Dense heads on a bottom-up feature: (mean estimate, variance estimate).
template <typename S>
struct PosteriorHead {
  nn::Dense<S> mu;
  nn::Dense<S> var;

  PosteriorHead() = default;
  PosteriorHead(const TreeDims& d, Rng& rng) : mu(d.bottom_up_dim, d.latent_dim, rng), var(d.bottom_up_dim, d.latent_dim, rng) {}

  std::pair<Var<S>, Var<S>> operator()(Tape<S>& t, const Var<S>& feature, S floor) {
    return {mu(t, feature), ad::shift(ad::softplus(var(t, feature)), floor)};
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    mu.visit(p + ".mu", f);
    var.visit(p + ".var", f);
  }
};

/// Two-layer router producing the logit of descending to the LEFT child.
template <typename S>
struct Router {
  nn::Mlp<S> net;

  Router() = default;
  Router(int in, int width, Rng& rng) : net({in, width, 1}, nn::Activation::LeakyRelu, rng) {}

  Var<S> operator()(Tape<S>& t, const Var<S>& x) { return net(t, x); }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    net.visit(p, f);
  }
};

template <typename S>
struct NodeParams {
  std::optional<Transformation<S>> prior;  // absent on the root
  PosteriorHead<S> posterior;
  std::optional<Router<S>> router_q;  // internal nodes only
  std::optional<Router<S>> router_p;
  std::optional<nn::Mlp<S>> decoder;  // leaves only
  /// Test and analysis hook: pins the left-branch probability of the
  /// inference / generative router. Not persisted in checkpoints.
  std::optional<double> forced_q;
  std::optional<double> forced_p;

  template <typename F>
  void visit(const std::string& p, F&& f) {
    if (prior) prior->visit(p + ".prior", f);
    posterior.visit(p + ".post", f);
    if (router_q) router_q->visit(p + ".router_q", f);
    if (router_p) router_p->visit(p + ".router_p", f);
    if (decoder) decoder->visit(p + ".decoder", f);
  }
};

template <typename S>
class TreeModel {
 public:
  TreeDims dims;
  TreeTopology topology;
  nn::Mlp<S> encoder;
  /// bottom_up[h] maps d_{h+1} to d_h for h = 0..H-1.
  std::vector<nn::ResidualBlock<S>> bottom_up;
  std::map<int, NodeParams<S>> nodes;

  /// Root with two leaf children, all parameters freshly initialized.
  static TreeModel init_root_tree(const TreeDims& dims, Rng& rng) {
    TreeModel m;
    m.dims = dims;
    m.topology = TreeTopology::initial(dims.max_depth);
    m.encoder = nn::Mlp<S>({dims.x_dim(), dims.hidden_width, dims.hidden_width, dims.bottom_up_dim},
                           nn::Activation::LeakyRelu, rng);
    for (int h = 0; h < dims.max_depth; ++h)
      m.bottom_up.emplace_back(dims.bottom_up_dim, dims.node_width, nn::Activation::LeakyRelu, rng);
    for (int id : m.topology.node_ids()) m.nodes[id] = m.make_node(id, rng);
    return m;
  }

  /// Parameters for node `id` shaped by its current role in the topology.
  NodeParams<S> make_node(int id, Rng& rng) const {
    const TreeNode& n = topology.node(id);
    NodeParams<S> p;
    if (n.parent >= 0) p.prior.emplace(dims, rng);
    p.posterior = PosteriorHead<S>(dims, rng);
    if (!n.is_leaf()) {
      p.router_q.emplace(dims.bottom_up_dim, dims.node_width, rng);
      p.router_p.emplace(dims.latent_dim, dims.node_width, rng);
    } else {
      p.decoder.emplace(std::vector<int>{dims.latent_dim, dims.hidden_width, dims.hidden_width, dims.x_dim()},
                        nn::Activation::LeakyRelu, rng);
    }
    return p;
  }

  /// Calls f(name, Parameter&) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& f) {
    encoder.visit("encoder", f);
    for (size_t h = 0; h < bottom_up.size(); ++h) bottom_up[h].visit("bottom_up." + std::to_string(h), f);
    for (auto& [id, p] : nodes) p.visit("node" + std::to_string(id), f);
  }

  std::map<std::string, Matrix<S>> parameter_values() const {
    std::map<std::string, Matrix<S>> out;
    const_cast<TreeModel*>(this)->visit([&](const std::string& n, ad::Parameter<S>& p) { out[n] = p.value; });
    return out;
  }

  size_t parameter_count() const {
    size_t n = 0;
    const_cast<TreeModel*>(this)->visit([&](const std::string&, ad::Parameter<S>& p) { n += static_cast<size_t>(p.value.size()); });
    return n;
  }

  /// Freezes every parameter whose name fails `trainable`.
  void set_trainable(const std::function<bool(const std::string&)>& trainable) {
    visit([&](const std::string& n, ad::Parameter<S>& p) { p.frozen = !trainable(n); });
  }

  /// Same structure with freshly initialized values; used before loading.
  static TreeModel skeleton(const TreeDims& dims, const TreeTopology& topology) {
    Rng rng(0);
    TreeModel m = init_root_tree(dims, rng);
    m.topology = topology;
    m.nodes.clear();
    for (int id : topology.node_ids()) m.nodes[id] = m.make_node(id, rng);
    return m;
  }

  /// Overwrites parameter values by name. Names and shapes must match exactly.
  template <typename T>
  void assign(const std::map<std::string, Matrix<T>>& values) {
    size_t seen = 0;
    visit([&](const std::string& n, ad::Parameter<S>& p) {
      auto it = values.find(n);
      if (it == values.end()) throw IntegrityError("missing parameter " + n);
      if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
        throw IntegrityError("shape mismatch for parameter " + n);
      }
      p.value = it->second.template cast<S>();
      ++seen;
    });
    if (seen != values.size()) throw IntegrityError("unexpected extra parameters");
  }

  template <typename T>
  TreeModel<T> cast() const {
    TreeModel<T> out = TreeModel<T>::skeleton(dims, topology);
    out.assign(parameter_values());
    for (const auto& [id, p] : nodes) {
      out.nodes.at(id).forced_q = p.forced_q;
      out.nodes.at(id).forced_p = p.forced_p;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Graph-level passes (values plus autodiff records on a tape).

template <typename S>
struct BottomUpGraph {
  /// d[h] for h = 0..H; d[H] is the encoder output.
  std::vector<Var<S>> d;
};

template <typename S>
struct NodeGraph {
  Var<S> z, mu_q, var_q, mu_p, var_p;
  // Internal nodes only.
  Var<S> logit_q, logit_p, left_q, right_q, left_p, right_p;
};

template <typename S>
struct TreeGraph {
  std::map<int, NodeGraph<S>> nodes;
  /// Probability of visiting each node (q routers for inference, p routers
  /// for prior generation).
  std::map<int, Var<S>> reach;
  std::vector<int> leaves;
  Var<S> leaf_probs;
  BottomUpGraph<S> features;
};

namespace detail {

template <typename S>
S forced_logit(double p) {
  return static_cast<S>(std::log(p) - std::log1p(-p));
}

// Left/right probabilities and logit for one router, honoring forcing.
template <typename S>
void route(Tape<S>& t, Router<S>& router, const std::optional<double>& forced, const Var<S>& input, Index n,
           Var<S>& logit, Var<S>& left, Var<S>& right) {
  if (forced) {
    logit = t.constant(Matrix<S>::Constant(n, 1, forced_logit<S>(*forced)));
    left = t.constant(Matrix<S>::Constant(n, 1, static_cast<S>(*forced)));
    right = t.constant(Matrix<S>::Constant(n, 1, static_cast<S>(1.0 - *forced)));
    return;
  }
  logit = router(t, input);
  left = ad::sigmoid(logit);
  right = ad::sigmoid(ad::neg(logit));
}

template <typename S>
Var<S> draw(Tape<S>& t, const Var<S>& mu, const Var<S>& var, Rng& rng, LatentMode mode) {
  if (mode == LatentMode::Mean) return mu;
  const Var<S> eps = t.constant(rng.normal_matrix<S>(mu.rows(), mu.cols()));
  return mu + ad::mul(ad::sqrt(var), eps);
}

template <typename S>
void finish_paths(Tape<S>& t, const TreeTopology& topo, TreeGraph<S>& g, Index n) {
  g.reach[0] = t.constant(Matrix<S>::Ones(n, 1));
  for (int id : topo.node_ids()) {
    const TreeNode& node = topo.node(id);
    if (node.is_leaf()) continue;
    g.reach[node.left] = ad::mul(g.reach.at(id), g.nodes.at(id).left_q.valid() ? g.nodes.at(id).left_q : g.nodes.at(id).left_p);
    g.reach[node.right] = ad::mul(g.reach.at(id), g.nodes.at(id).right_q.valid() ? g.nodes.at(id).right_q : g.nodes.at(id).right_p);
  }
  g.leaves = topo.leaves();
  std::vector<Var<S>> cols;
  for (int l : g.leaves) cols.push_back(g.reach.at(l));
  g.leaf_probs = ad::concat_cols(cols);
}

}  // namespace detail

/// Precision-weighted merge of a bottom-up estimate with the prior; all
/// inputs are variances.
template <typename S>
std::pair<Var<S>, Var<S>> posterior_merge(const Var<S>& mu_hat, const Var<S>& var_hat, const Var<S>& mu_p,
                                          const Var<S>& var_p) {
  const Var<S> prec_hat = ad::reciprocal(var_hat);
  const Var<S> prec_p = ad::reciprocal(var_p);
  const Var<S> var_q = ad::reciprocal(prec_hat + prec_p);
  const Var<S> mu_q = ad::mul(ad::mul(mu_hat, prec_hat) + ad::mul(mu_p, prec_p), var_q);
  return {mu_q, var_q};
}

/// Value form of the merge. Throws NumericError on non-positive variances.
template <typename S>
std::pair<Matrix<S>, Matrix<S>> posterior_merge(const Matrix<S>& mu_hat, const Matrix<S>& var_hat,
                                                const Matrix<S>& mu_p, const Matrix<S>& var_p) {
  if (!(var_hat.array() > S(0)).all() || !(var_p.array() > S(0)).all()) {
    throw NumericError("posterior_merge: variances must be strictly positive");
  }
  const auto prec_hat = var_hat.array().inverse();
  const auto prec_p = var_p.array().inverse();
  Matrix<S> var_q = (prec_hat + prec_p).inverse().matrix();
  Matrix<S> mu_q = ((mu_hat.array() * prec_hat + mu_p.array() * prec_p) * var_q.array()).matrix();
  return {mu_q, var_q};
}

template <typename S>
BottomUpGraph<S> bottom_up_graph(Tape<S>& t, TreeModel<S>& m, const Var<S>& x) {
  if (x.cols() != m.dims.x_dim()) {
    throw ShapeError("input width " + std::to_string(x.cols()) + " does not match model width " +
                     std::to_string(m.dims.x_dim()));
  }
  BottomUpGraph<S> g;
  const int H = m.dims.max_depth;
  g.d.resize(static_cast<size_t>(H) + 1);
  g.d[static_cast<size_t>(H)] = m.encoder(t, x);
  for (int h = H - 1; h >= 0; --h) g.d[static_cast<size_t>(h)] = m.bottom_up[static_cast<size_t>(h)](t, g.d[static_cast<size_t>(h) + 1]);
  return g;
}

template <typename S>
TreeGraph<S> infer_graph(Tape<S>& t, TreeModel<S>& m, const Var<S>& x, Rng& rng, LatentMode mode) {
  TreeGraph<S> g;
  g.features = bottom_up_graph(t, m, x);
  const Index n = x.rows();
  const S floor = static_cast<S>(m.dims.sigma_floor);
  for (int id : m.topology.node_ids()) {
    const TreeNode& node = m.topology.node(id);
    NodeParams<S>& p = m.nodes.at(id);
    NodeGraph<S> ng;
    auto [mu_hat, var_hat] = p.posterior(t, g.features.d[static_cast<size_t>(node.feature_level)], floor);
    if (node.parent < 0) {
      ng.mu_q = mu_hat;
      ng.var_q = var_hat;
      ng.mu_p = t.constant(Matrix<S>::Zero(n, m.dims.latent_dim));
      ng.var_p = t.constant(Matrix<S>::Ones(n, m.dims.latent_dim));
    } else {
      std::tie(ng.mu_p, ng.var_p) = (*p.prior)(t, g.nodes.at(node.parent).z, floor);
      std::tie(ng.mu_q, ng.var_q) = posterior_merge(mu_hat, var_hat, ng.mu_p, ng.var_p);
    }
    ng.z = detail::draw(t, ng.mu_q, ng.var_q, rng, mode);
    if (!node.is_leaf()) {
      detail::route(t, *p.router_q, p.forced_q, g.features.d[static_cast<size_t>(node.router_level)], n, ng.logit_q,
                    ng.left_q, ng.right_q);
      detail::route(t, *p.router_p, p.forced_p, ng.z, n, ng.logit_p, ng.left_p, ng.right_p);
    }
    g.nodes[id] = ng;
  }
  detail::finish_paths(t, m.topology, g, n);
  return g;
}

template <typename S>
TreeGraph<S> prior_graph(Tape<S>& t, TreeModel<S>& m, Index n, Rng& rng, LatentMode mode = LatentMode::Sample,
                         const Matrix<S>* root_z = nullptr) {
  TreeGraph<S> g;
  const S floor = static_cast<S>(m.dims.sigma_floor);
  for (int id : m.topology.node_ids()) {
    const TreeNode& node = m.topology.node(id);
    NodeParams<S>& p = m.nodes.at(id);
    NodeGraph<S> ng;
    if (node.parent < 0) {
      ng.mu_p = t.constant(Matrix<S>::Zero(n, m.dims.latent_dim));
      ng.var_p = t.constant(Matrix<S>::Ones(n, m.dims.latent_dim));
    } else {
      std::tie(ng.mu_p, ng.var_p) = (*p.prior)(t, g.nodes.at(node.parent).z, floor);
    }
    if (node.parent < 0 && root_z != nullptr) {
      if (root_z->rows() != n || root_z->cols() != m.dims.latent_dim) throw ShapeError("root sample shape mismatch");
      ng.z = t.constant(*root_z);
    } else {
      ng.z = detail::draw(t, ng.mu_p, ng.var_p, rng, mode);
    }
    if (!node.is_leaf()) detail::route(t, *p.router_p, p.forced_p, ng.z, n, ng.logit_p, ng.left_p, ng.right_p);
    g.nodes[id] = ng;
  }
  detail::finish_paths(t, m.topology, g, n);
  return g;
}

/// Decoder output for one leaf: logits (Bernoulli) or means (Gaussian).
template <typename S>
Var<S> decode_graph(Tape<S>& t, TreeModel<S>& m, int leaf, const Var<S>& z) {
  auto& p = m.nodes.at(leaf);
  if (!p.decoder) throw InvariantError("node " + std::to_string(leaf) + " has no decoder");
  return (*p.decoder)(t, z);
}

// ---------------------------------------------------------------------------
// Value-level API.

template <typename S>
struct NodeLatent {
  Matrix<S> z, mu_q, var_q, mu_p, var_p;
  /// Left-branch probabilities (internal nodes only; empty otherwise).
  Matrix<S> left_q, left_p;
};

template <typename S>
struct LatentState {
  std::map<int, NodeLatent<S>> nodes;
};

template <typename S>
struct PathDistribution {
  std::vector<int> leaves;
  std::map<int, Matrix<S>> reach;
  /// N x |leaves|, columns ordered like `leaves`.
  Matrix<S> leaf_probs;

  Index leaf_column(int leaf) const {
    auto it = std::find(leaves.begin(), leaves.end(), leaf);
    if (it == leaves.end()) throw InvariantError("leaf " + std::to_string(leaf) + " not in distribution");
    return static_cast<Index>(it - leaves.begin());
  }
  /// Largest |sum_l p(l) - 1| over rows.
  double max_normalization_error() const {
    if (leaf_probs.rows() == 0) return 0.0;
    return static_cast<double>((leaf_probs.rowwise().sum().array() - S(1)).abs().maxCoeff());
  }
};

template <typename S>
struct BottomUpFeatures {
  std::vector<Matrix<S>> d;
};

template <typename S>
struct Inference {
  LatentState<S> state;
  PathDistribution<S> paths;
  BottomUpFeatures<S> features;
};

namespace detail {

template <typename S>
Matrix<S> value_or_empty(const Var<S>& v) {
  return v.valid() ? v.value() : Matrix<S>();
}

template <typename S>
void extract(const TreeGraph<S>& g, LatentState<S>& state, PathDistribution<S>& paths) {
  for (const auto& [id, ng] : g.nodes) {
    NodeLatent<S> nl;
    nl.z = ng.z.value();
    nl.mu_q = value_or_empty(ng.mu_q);
    nl.var_q = value_or_empty(ng.var_q);
    nl.mu_p = value_or_empty(ng.mu_p);
    nl.var_p = value_or_empty(ng.var_p);
    nl.left_q = value_or_empty(ng.left_q);
    nl.left_p = value_or_empty(ng.left_p);
    state.nodes[id] = std::move(nl);
  }
  paths.leaves = g.leaves;
  for (const auto& [id, r] : g.reach) paths.reach[id] = r.value();
  paths.leaf_probs = g.leaf_probs.value();
}

}  // namespace detail

template <typename S>
BottomUpFeatures<S> bottom_up(const TreeModel<S>& model, const Matrix<S>& x) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);  // non-recording tape never writes parameters
  const auto g = bottom_up_graph(t, m, t.constant(x));
  BottomUpFeatures<S> out;
  for (const auto& d : g.d) out.d.push_back(d.value());
  return out;
}

template <typename S>
Inference<S> infer(const TreeModel<S>& model, const Matrix<S>& x, Rng& rng, LatentMode mode) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  const auto g = infer_graph(t, m, t.constant(x), rng, mode);
  Inference<S> out;
  detail::extract(g, out.state, out.paths);
  for (const auto& d : g.features.d) out.features.d.push_back(d.value());
  return out;
}

template <typename S>
std::pair<LatentState<S>, PathDistribution<S>> generate_prior(const TreeModel<S>& model, Index n, Rng& rng,
                                                              LatentMode mode = LatentMode::Sample,
                                                              const Matrix<S>* root_z = nullptr) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  const auto g = prior_graph(t, m, n, rng, mode, root_z);
  std::pair<LatentState<S>, PathDistribution<S>> out;
  detail::extract(g, out.first, out.second);
  return out;
}

/// Decoder mean for one leaf from embeddings z (N x latent): sigmoid-squashed
/// for Bernoulli data.
template <typename S>
Matrix<S> decode_leaf(const TreeModel<S>& model, int leaf, const Matrix<S>& z) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  Var<S> out = decode_graph(t, m, leaf, t.constant(z));
  if (m.dims.likelihood == Likelihood::Bernoulli) out = ad::sigmoid(out);
  return out.value();
}

/// One reconstruction per leaf from the leaf embeddings in `state`.
template <typename S>
std::map<int, Matrix<S>> decode_leaves(const TreeModel<S>& model, const LatentState<S>& state) {
  std::map<int, Matrix<S>> out;
  for (int leaf : model.topology.leaves()) {
    auto it = state.nodes.find(leaf);
    if (it == state.nodes.end()) throw InvariantError("missing embedding for leaf " + std::to_string(leaf));
    out[leaf] = decode_leaf(model, leaf, it->second.z);
  }
  return out;
}

/// Propagates given parent embeddings down `path` (root first, root
/// embedding supplied), sampling each transformation. Returns one
/// embedding per path node.
template <typename S>
std::vector<Matrix<S>> sample_path(const TreeModel<S>& model, const Matrix<S>& z_root, const std::vector<int>& path,
                                   Rng& rng, LatentMode mode = LatentMode::Sample) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  std::vector<Matrix<S>> out{z_root};
  Var<S> z = t.constant(z_root);
  const S floor = static_cast<S>(m.dims.sigma_floor);
  for (size_t i = 1; i < path.size(); ++i) {
    auto [mu, var] = (*m.nodes.at(path[i]).prior)(t, z, floor);
    z = detail::draw(t, mu, var, rng, mode);
    out.push_back(z.value());
  }
  return out;
}

/// Draws one leaf from a normalized row of leaf probabilities.
template <typename S>
int sample_leaf(const std::vector<int>& leaves, const Eigen::Matrix<S, 1, Eigen::Dynamic>& probs_row, Rng& rng) {
  if (static_cast<Index>(leaves.size()) != probs_row.size()) throw ShapeError("leaf probability width mismatch");
  double total = 0;
  for (Index i = 0; i < probs_row.size(); ++i) {
    if (!(probs_row(i) >= S(0))) throw InvariantError("negative or NaN leaf probability");
    total += static_cast<double>(probs_row(i));
  }
  if (std::abs(total - 1.0) > 1e-4) throw InvariantError("leaf probabilities sum to " + std::to_string(total));
  const double u = rng.uniform() * total;
  double acc = 0;
  for (Index i = 0; i < probs_row.size(); ++i) {
    acc += static_cast<double>(probs_row(i));
    if (u < acc) return leaves[static_cast<size_t>(i)];
  }
  for (Index i = probs_row.size() - 1; i >= 0; --i)
    if (probs_row(i) > S(0)) return leaves[static_cast<size_t>(i)];
  return leaves.back();
}

// ---------------------------------------------------------------------------
// Structural edits.

struct GrowResult {
  int split_leaf = -1;
  int left = -1;
  int right = -1;
  /// Parameter-name prefixes that form the new trainable subtree.
  std::vector<std::string> trainable_prefixes;
};

/// Splits the leaf with the largest assignment mass (ties: lowest id) and
/// freezes everything outside the new subtree. Only leaves present in
/// `counts` are candidates (all leaves when `counts` is empty).
template <typename S>
GrowResult grow(TreeModel<S>& m, const std::map<int, double>& counts, Rng& rng) {
  const auto leaves = m.topology.leaves();
  if (static_cast<int>(leaves.size()) >= m.dims.max_leaves) throw CapacityError("tree already has max leaves");
  int best = -1;
  double best_count = 0;
  for (int l : leaves) {
    auto it = counts.find(l);
    if (it == counts.end() && !counts.empty()) continue;
    const double c = it == counts.end() ? 0.0 : it->second;
    if (best < 0 || c > best_count || (c == best_count && l < best)) {
      best = l;
      best_count = c;
    }
  }
  if (best < 0) throw CapacityError("no candidate leaf to split");
  if (m.topology.node(best).depth >= m.dims.max_depth) {
    throw CapacityError("leaf " + std::to_string(best) + " is at max depth");
  }
  GrowResult res;
  res.split_leaf = best;
  std::tie(res.left, res.right) = m.topology.split_leaf(best);

  NodeParams<S>& parent = m.nodes.at(best);
  const PosteriorHead<S> inherited = parent.posterior;
  parent.decoder.reset();
  parent.router_q.emplace(m.dims.bottom_up_dim, m.dims.node_width, rng);
  parent.router_p.emplace(m.dims.latent_dim, m.dims.node_width, rng);
  for (int child : {res.left, res.right}) {
    NodeParams<S> p = m.make_node(child, rng);
    p.posterior = inherited;
    p.posterior.visit("", [&](const std::string&, ad::Parameter<S>& q) {
      q.value += rng.normal_matrix<S>(q.value.rows(), q.value.cols()) * S(1e-2);
    });
    m.nodes[child] = std::move(p);
  }
  res.trainable_prefixes = {"node" + std::to_string(res.left) + ".", "node" + std::to_string(res.right) + ".",
                            "node" + std::to_string(best) + ".router_"};
  const auto prefixes = res.trainable_prefixes;
  m.set_trainable([&](const std::string& name) {
    return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.rfind(p, 0) == 0; });
  });
  return res;
}

struct PruneResult {
  std::vector<int> removed_leaves;
};

/// Removes every leaf whose assignment mass is below `threshold_fraction *
/// total` and collapses the single-child nodes this leaves behind.
template <typename S>
PruneResult prune(TreeModel<S>& m, const std::map<int, double>& masses, double total, double threshold_fraction) {
  const auto leaves = m.topology.leaves();
  std::vector<std::pair<double, int>> victims;
  for (int l : leaves) {
    auto it = masses.find(l);
    const double mass = it == masses.end() ? 0.0 : it->second;
    if (mass < threshold_fraction * total) victims.emplace_back(mass, l);
  }
  if (victims.size() == leaves.size()) throw InvariantError("pruning would remove every leaf");
  std::sort(victims.begin(), victims.end());
  PruneResult res;
  for (const auto& [mass, leaf] : victims) {
    if (!m.topology.contains(leaf) || !m.topology.is_leaf(leaf)) continue;
    const CollapseResult c = m.topology.remove_leaf(leaf);
    m.nodes.erase(leaf);
    if (c.root_absorbed) {
      NodeParams<S>& root = m.nodes.at(0);
      NodeParams<S>& s = m.nodes.at(c.survivor);
      root.router_q = std::move(s.router_q);
      root.router_p = std::move(s.router_p);
      root.decoder = std::move(s.decoder);
      root.forced_q = s.forced_q;
      root.forced_p = s.forced_p;
      m.nodes.erase(c.survivor);
    } else {
      m.nodes.erase(c.removed_node);
    }
    res.removed_leaves.push_back(leaf);
  }
  m.topology.validate(m.dims.max_leaves);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence.

template <typename S>
Checkpoint tree_to_checkpoint(const TreeModel<S>& m, std::uint64_t config_hash) {
  Checkpoint c;
  c.manifest.stage = "tree";
  c.manifest.config_hash = config_hash;
  c.manifest.extra = {{"topology", m.topology.to_json()}, {"dims", m.dims.to_json()}};
  for (const auto& [name, value] : m.parameter_values()) c.arrays[name] = to_named_array(value);
  return c;
}

template <typename S>
TreeModel<S> tree_from_checkpoint(const Checkpoint& c) {
  if (c.manifest.stage != "tree") throw CompatibilityError("checkpoint stage is '" + c.manifest.stage + "', not 'tree'");
  try {
    const TreeDims dims = TreeDims::from_json(c.manifest.extra.at("dims"));
    const TreeTopology topo = TreeTopology::from_json(c.manifest.extra.at("topology"));
    topo.validate(dims.max_leaves);
    TreeModel<S> m = TreeModel<S>::skeleton(dims, topo);
    std::map<std::string, Matrix<S>> values;
    for (const auto& [name, arr] : c.arrays) values[name] = from_named_array<S>(arr);
    m.assign(values);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("tree checkpoint manifest malformed: ") + e.what());
  }
}

}  // namespace treediff
