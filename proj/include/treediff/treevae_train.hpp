#pragma once

// Stage-1 objective and training schedule for the latent tree.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "treediff/config.hpp"
#include "treediff/optim.hpp"
#include "treediff/tree_model.hpp"

namespace treediff {

/// Per-sample averages. total = rec - (kl_root + kl_nodes + kl_decisions).
struct ElboTerms {
  double rec = 0;
  double kl_root = 0;
  double kl_nodes = 0;
  double kl_decisions = 0;
  double total = 0;
};

template <typename S>
struct ElboGraph {
  // Batch means.
  Var<S> rec, kl_root, kl_nodes, kl_decisions;
  /// Negative ELBO, the quantity minimized.
  Var<S> loss;
};

/// Per-row log-likelihood of `x` under the decoder output.
template <typename S>
Var<S> log_likelihood(Tape<S>& t, Likelihood lik, const Var<S>& x, const Var<S>& out) {
  if (lik == Likelihood::Bernoulli) return ad::row_sum(ad::mul(x, out) - ad::softplus(out));
  const S c = static_cast<S>(-0.5 * static_cast<double>(x.cols()) * std::log(2.0 * M_PI));
  (void)t;
  return ad::shift(ad::scale(ad::row_sum(ad::square(x - out)), S(-0.5)), c);
}

/// Per-row KL(N(mu_q, var_q) || N(mu_p, var_p)).
template <typename S>
Var<S> gaussian_kl(const Var<S>& mu_q, const Var<S>& var_q, const Var<S>& mu_p, const Var<S>& var_p) {
  const Var<S> ratio = ad::div(var_q + ad::square(mu_q - mu_p), var_p);
  const Var<S> inner = ad::log(var_p) - ad::log(var_q) + ratio;
  return ad::scale(ad::shift(ad::row_sum(inner), S(-static_cast<S>(mu_q.cols()))), S(0.5));
}

/// Per-row KL(Ber(sigmoid(lq)) || Ber(sigmoid(lp))) from logits.
template <typename S>
Var<S> bernoulli_kl(const Var<S>& lq, const Var<S>& lp) {
  const Var<S> q = ad::sigmoid(lq);
  const Var<S> log_q = ad::neg(ad::softplus(ad::neg(lq)));
  const Var<S> log_1mq = ad::neg(ad::softplus(lq));
  const Var<S> log_p = ad::neg(ad::softplus(ad::neg(lp)));
  const Var<S> log_1mp = ad::neg(ad::softplus(lp));
  const Var<S> one_m_q = ad::sigmoid(ad::neg(lq));
  return ad::mul(q, log_q - log_p) + ad::mul(one_m_q, log_1mq - log_1mp);
}

/// ELBO with the path expectation computed by exact enumeration of leaves.
template <typename S>
ElboGraph<S> elbo_graph(Tape<S>& t, TreeModel<S>& m, const Var<S>& x, Rng& rng,
                        LatentMode mode = LatentMode::Sample) {
  const TreeGraph<S> g = infer_graph(t, m, x, rng, mode);
  const Index n = x.rows();
  Var<S> rec = t.constant(Matrix<S>::Zero(n, 1));
  for (int leaf : g.leaves) {
    const Var<S> out = decode_graph(t, m, leaf, g.nodes.at(leaf).z);
    rec = rec + ad::mul(g.reach.at(leaf), log_likelihood(t, m.dims.likelihood, x, out));
  }
  const NodeGraph<S>& root = g.nodes.at(0);
  const Var<S> kl_root = gaussian_kl(root.mu_q, root.var_q, root.mu_p, root.var_p);
  Var<S> kl_nodes = t.constant(Matrix<S>::Zero(n, 1));
  Var<S> kl_dec = t.constant(Matrix<S>::Zero(n, 1));
  for (const auto& [id, ng] : g.nodes) {
    if (id != 0) kl_nodes = kl_nodes + ad::mul(g.reach.at(id), gaussian_kl(ng.mu_q, ng.var_q, ng.mu_p, ng.var_p));
    if (!m.topology.is_leaf(id)) kl_dec = kl_dec + ad::mul(g.reach.at(id), bernoulli_kl(ng.logit_q, ng.logit_p));
  }
  ElboGraph<S> out;
  out.rec = ad::mean(rec);
  out.kl_root = ad::mean(kl_root);
  out.kl_nodes = ad::mean(kl_nodes);
  out.kl_decisions = ad::mean(kl_dec);
  out.loss = out.kl_root + out.kl_nodes + out.kl_decisions - out.rec;
  return out;
}

template <typename S>
ElboTerms terms_of(const ElboGraph<S>& g) {
  ElboTerms e;
  e.rec = static_cast<double>(g.rec.value()(0, 0));
  e.kl_root = static_cast<double>(g.kl_root.value()(0, 0));
  e.kl_nodes = static_cast<double>(g.kl_nodes.value()(0, 0));
  e.kl_decisions = static_cast<double>(g.kl_decisions.value()(0, 0));
  e.total = e.rec - (e.kl_root + e.kl_nodes + e.kl_decisions);
  return e;
}

/// Throws NumericError naming the first non-finite term.
void check_finite(const ElboTerms& e);

template <typename S>
ElboTerms elbo(const TreeModel<S>& model, const Matrix<S>& x, Rng& rng, LatentMode mode = LatentMode::Sample) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  const ElboTerms e = terms_of(elbo_graph(t, m, t.constant(x), rng, mode));
  check_finite(e);
  return e;
}

/// Single-path estimator: each row follows one leaf drawn from its
/// inference path distribution, and only the nodes on that path contribute.
/// Unbiased for elbo() over the path draw.
template <typename S>
ElboTerms elbo_single_path(const TreeModel<S>& model, const Matrix<S>& x, Rng& rng,
                           LatentMode mode = LatentMode::Sample) {
  Tape<S> t(false);
  auto& m = const_cast<TreeModel<S>&>(model);
  const TreeGraph<S> g = infer_graph(t, m, t.constant(x), rng, mode);
  const Index n = x.rows();
  const Var<S> xv = t.constant(x);
  std::map<int, Matrix<S>> ll, kl_node, kl_dec;
  for (int leaf : g.leaves)
    ll[leaf] = log_likelihood(t, m.dims.likelihood, xv, decode_graph(t, m, leaf, g.nodes.at(leaf).z)).value();
  for (const auto& [id, ng] : g.nodes) {
    if (id != 0) kl_node[id] = gaussian_kl(ng.mu_q, ng.var_q, ng.mu_p, ng.var_p).value();
    if (!m.topology.is_leaf(id)) kl_dec[id] = bernoulli_kl(ng.logit_q, ng.logit_p).value();
  }
  const NodeGraph<S>& root = g.nodes.at(0);
  const Matrix<S> kl_root = gaussian_kl(root.mu_q, root.var_q, root.mu_p, root.var_p).value();
  const Matrix<S> probs = g.leaf_probs.value();
  ElboTerms e;
  for (Index r = 0; r < n; ++r) {
    const int leaf = sample_leaf<S>(g.leaves, probs.row(r), rng);
    e.rec += static_cast<double>(ll.at(leaf)(r, 0));
    e.kl_root += static_cast<double>(kl_root(r, 0));
    for (int id : m.topology.path_to(leaf)) {
      if (id != 0) e.kl_nodes += static_cast<double>(kl_node.at(id)(r, 0));
      if (id != leaf) e.kl_decisions += static_cast<double>(kl_dec.at(id)(r, 0));
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  e.rec *= inv;
  e.kl_root *= inv;
  e.kl_nodes *= inv;
  e.kl_decisions *= inv;
  e.total = e.rec - (e.kl_root + e.kl_nodes + e.kl_decisions);
  check_finite(e);
  return e;
}

/// Expected leaf mass sum_x p(l|x) from the inference routers.
template <typename S>
std::map<int, double> assignment_counts(const TreeModel<S>& model, const Matrix<S>& data, Index chunk = 512) {
  std::map<int, double> counts;
  for (int l : model.topology.leaves()) counts[l] = 0.0;
  Rng rng(0);
  for (Index start = 0; start < data.rows(); start += chunk) {
    const Index len = std::min(chunk, data.rows() - start);
    const auto inf = infer(model, Matrix<S>(data.middleRows(start, len)), rng, LatentMode::Mean);
    for (size_t i = 0; i < inf.paths.leaves.size(); ++i)
      counts[inf.paths.leaves[i]] += static_cast<double>(inf.paths.leaf_probs.col(static_cast<Index>(i)).sum());
  }
  return counts;
}

/// Most probable leaf per row.
template <typename S>
std::vector<int> leaf_assignments(const TreeModel<S>& model, const Matrix<S>& data, Index chunk = 512) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(data.rows()));
  Rng rng(0);
  for (Index start = 0; start < data.rows(); start += chunk) {
    const Index len = std::min(chunk, data.rows() - start);
    const auto inf = infer(model, Matrix<S>(data.middleRows(start, len)), rng, LatentMode::Mean);
    for (Index r = 0; r < len; ++r) {
      Index best = 0;
      inf.paths.leaf_probs.row(r).maxCoeff(&best);
      out.push_back(inf.paths.leaves[static_cast<size_t>(best)]);
    }
  }
  return out;
}

struct PhaseSpec {
  std::string name;
  int epochs = 0;
  /// Parameters whose name satisfies this predicate are trained; the rest
  /// are frozen for the phase.
  std::function<bool(const std::string&)> trainable;
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  ElboTerms terms;
};

/// Optimizes the ELBO over the trainable subset for `spec.epochs` epochs of
/// shuffled minibatches. Throws PreconditionError if nothing is trainable,
/// NumericError on a non-finite loss (after restoring the last good epoch),
/// and InvariantError if a frozen parameter changed.
template <typename S>
std::vector<EpochRecord> train_phase(TreeModel<S>& m, const Matrix<S>& data, const PhaseSpec& spec,
                                     const TreeVaeConfig& cfg, Rng& rng, int epoch_offset = 0) {
  m.set_trainable(spec.trainable);
  size_t trainable = 0;
  m.visit([&](const std::string&, ad::Parameter<S>& p) { trainable += p.frozen ? 0 : 1; });
  if (trainable == 0) throw PreconditionError("phase '" + spec.name + "' has no trainable parameters");
  const auto frozen = [](const std::string&, const ad::Parameter<S>& p) { return p.frozen; };
  const std::uint64_t frozen_before = parameter_fingerprint(m, frozen);

  Adam<S> opt(cfg.learning_rate, cfg.weight_decay);
  std::vector<EpochRecord> history;
  auto last_good = m.parameter_values();
  std::vector<Index> order(static_cast<size_t>(data.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index bs = std::max(1, cfg.batch_size);

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    opt.lr = cfg.learning_rate * std::pow(cfg.lr_decay_rate, epoch / std::max(1, cfg.lr_decay_step));
    std::shuffle(order.begin(), order.end(), rng.engine());
    ElboTerms acc;
    double seen = 0;
    for (Index start = 0; start < data.rows(); start += bs) {
      const Index len = std::min(bs, data.rows() - start);
      Matrix<S> batch(len, data.cols());
      for (Index r = 0; r < len; ++r) batch.row(r) = data.row(order[static_cast<size_t>(start + r)]);
      Tape<S> t;
      const ElboGraph<S> g = elbo_graph(t, m, t.constant(batch), rng);
      const ElboTerms e = terms_of(g);
      if (!std::isfinite(e.total)) {
        m.assign(last_good);
        throw NumericError("non-finite ELBO in phase '" + spec.name + "' epoch " + std::to_string(epoch_offset + epoch) +
                           "; parameters restored to the end of epoch " + std::to_string(epoch_offset + epoch - 1));
      }
      zero_grad(m);
      t.backward(g.loss);
      opt.step(m);
      const double w = static_cast<double>(len);
      acc.rec += w * e.rec;
      acc.kl_root += w * e.kl_root;
      acc.kl_nodes += w * e.kl_nodes;
      acc.kl_decisions += w * e.kl_decisions;
      seen += w;
    }
    acc.rec /= seen;
    acc.kl_root /= seen;
    acc.kl_nodes /= seen;
    acc.kl_decisions /= seen;
    acc.total = acc.rec - (acc.kl_root + acc.kl_nodes + acc.kl_decisions);
    history.push_back({epoch_offset + epoch, spec.name, acc});
    last_good = m.parameter_values();
  }
  zero_grad(m);
  if (parameter_fingerprint(m, frozen) != frozen_before) {
    throw InvariantError("frozen parameters changed during phase '" + spec.name + "'");
  }
  m.set_trainable([](const std::string&) { return true; });
  return history;
}

struct GrowthEvent {
  int split_leaf = -1;
  int left = -1;
  int right = -1;
  int epoch = 0;
  std::map<int, double> counts;
};

struct ScheduleResult {
  TreeModel<float> model;
  std::vector<EpochRecord> history;
  std::vector<GrowthEvent> growth;
  std::vector<int> pruned;
};

using ScheduleLog = std::function<void(const std::string&)>;

/// initial -> repeated {grow, smalltree, intermediate} until no leaf can be
/// split -> prune -> finetune.
ScheduleResult run_full_schedule(const ExperimentConfig& config, const Eigen::MatrixXf& data, Rng& rng,
                                 const ScheduleLog& log = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
void write_growth_log(const std::filesystem::path& path, const std::vector<GrowthEvent>& growth);

}  // namespace treediff
