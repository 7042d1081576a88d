#pragma once

// Conditional DDPM over flattened images in [-1, 1]: schedule, forward
// process, epsilon-prediction denoiser with hierarchical conditioning,
// DDPM/DDIM samplers and EMA.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "treediff/ad.hpp"
#include "treediff/checkpoint.hpp"
#include "treediff/config.hpp"
#include "treediff/errors.hpp"
#include "treediff/nn.hpp"
#include "treediff/optim.hpp"
#include "treediff/rng.hpp"
#include "treediff/tree_model.hpp"

namespace treediff {

/// Tables are indexed by t = 0..T; entry 0 holds alpha_bar_0 = 1 and
/// beta_0 = beta_tilde_0 = 0.
struct NoiseSchedule {
  int T = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;
  Eigen::VectorXd beta_tilde;

  void check_step(int t) const {
    if (t < 1 || t > T) throw PreconditionError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

/// Linearly spaced betas from beta_1 to beta_T inclusive. Throws
/// ValidationError unless 0 < beta_1 < beta_T < 1 and T >= 2.
NoiseSchedule make_linear_schedule(int T, double beta_1, double beta_T);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, one timestep per row.
template <typename S>
Matrix<S> q_sample(const Matrix<S>& x0, const std::vector<int>& t, const Matrix<S>& eps, const NoiseSchedule& s) {
  if (static_cast<Index>(t.size()) != x0.rows()) throw ShapeError("one timestep per row required");
  Matrix<S> out(x0.rows(), x0.cols());
  for (Index r = 0; r < x0.rows(); ++r) {
    const int ti = t[static_cast<size_t>(r)];
    s.check_step(ti);
    out.row(r) = static_cast<S>(std::sqrt(s.alpha_bar(ti))) * x0.row(r) +
                 static_cast<S>(std::sqrt(1.0 - s.alpha_bar(ti))) * eps.row(r);
  }
  return out;
}

template <typename S>
Matrix<S> q_sample(const Matrix<S>& x0, int t, const Matrix<S>& eps, const NoiseSchedule& s) {
  return q_sample(x0, std::vector<int>(static_cast<size_t>(x0.rows()), t), eps, s);
}

/// One forward step x_{t-1} -> x_t.
template <typename S>
Matrix<S> q_step(const Matrix<S>& x_prev, int t, const Matrix<S>& eps, const NoiseSchedule& s) {
  s.check_step(t);
  return static_cast<S>(std::sqrt(s.alpha(t))) * x_prev + static_cast<S>(std::sqrt(s.beta(t))) * eps;
}

template <typename S>
struct Gaussian {
  Matrix<S> mean;
  double sigma = 0;
};

/// q(x_{t-1} | x_t, x0): mean and standard deviation sqrt(beta_tilde_t).
template <typename S>
Gaussian<S> forward_posterior(const Matrix<S>& x_t, const Matrix<S>& x0, int t, const NoiseSchedule& s) {
  s.check_step(t);
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  return {static_cast<S>(c0) * x0 + static_cast<S>(ct) * x_t, std::sqrt(s.beta_tilde(t))};
}

/// x0 implied by x_t and a noise estimate.
template <typename S>
Matrix<S> predict_x0(const Matrix<S>& x_t, const Matrix<S>& eps, int t, const NoiseSchedule& s) {
  s.check_step(t);
  return (x_t - static_cast<S>(std::sqrt(1.0 - s.alpha_bar(t))) * eps) / static_cast<S>(std::sqrt(s.alpha_bar(t)));
}

/// Reverse-step moments: mean (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) /
/// sqrt(alpha_t), sigma sqrt(beta_tilde_t) (zero at t = 1).
template <typename S>
Gaussian<S> ddpm_moments(const Matrix<S>& x_t, const Matrix<S>& eps, int t, const NoiseSchedule& s) {
  s.check_step(t);
  const double k = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  return {(x_t - static_cast<S>(k) * eps) / static_cast<S>(std::sqrt(s.alpha(t))), t > 1 ? std::sqrt(s.beta_tilde(t)) : 0.0};
}

/// DDIM transition t -> t_prev (t_prev = 0 lands on the x0 estimate).
template <typename S>
Gaussian<S> ddim_moments(const Matrix<S>& x_t, const Matrix<S>& eps, int t, int t_prev, double eta,
                         const NoiseSchedule& s) {
  s.check_step(t);
  if (t_prev < 0 || t_prev >= t) throw PreconditionError("DDIM step must decrease");
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const Matrix<S> x0 = predict_x0(x_t, eps, t, s);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  return {static_cast<S>(std::sqrt(ab_prev)) * x0 + static_cast<S>(dir) * eps, sigma};
}

/// Noise predictor as a function of (x_t, t).
template <typename S>
using EpsFn = std::function<Matrix<S>(const Matrix<S>&, int)>;

template <typename S>
Matrix<S> ddpm_step(const EpsFn<S>& eps_fn, const Matrix<S>& x_t, int t, const NoiseSchedule& s, Rng& rng) {
  const Gaussian<S> g = ddpm_moments(x_t, eps_fn(x_t, t), t, s);
  if (g.sigma == 0) return g.mean;
  return g.mean + static_cast<S>(g.sigma) * rng.normal_matrix<S>(x_t.rows(), x_t.cols());
}

/// Full T-step ancestral chain, clamped to [-1, 1] at the end.
template <typename S>
Matrix<S> ddpm_sample(const EpsFn<S>& eps_fn, Matrix<S> x, const NoiseSchedule& s, Rng& rng) {
  for (int t = s.T; t >= 1; --t) x = ddpm_step(eps_fn, x, t, s, rng);
  return x.cwiseMax(S(-1)).cwiseMin(S(1));
}

/// `count` timesteps evenly spaced from T down to 1, both included
/// ({T} when count is 1).
std::vector<int> ddim_subsequence(int T, int count);

/// Throws PreconditionError unless strictly decreasing within [1, T] and
/// starting at T.
void check_subsequence(const std::vector<int>& steps, int T);

template <typename S>
Matrix<S> ddim_sample(const EpsFn<S>& eps_fn, Matrix<S> x, const NoiseSchedule& s, const std::vector<int>& steps,
                      double eta, Rng& rng, std::size_t* clamped = nullptr) {
  check_subsequence(steps, s.T);
  for (size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    const Gaussian<S> g = ddim_moments(x, eps_fn(x, t), t, t_prev, eta, s);
    x = g.mean;
    if (g.sigma > 0) x += static_cast<S>(g.sigma) * rng.normal_matrix<S>(x.rows(), x.cols());
  }
  if (clamped) *clamped += static_cast<std::size_t>((x.array().abs() > S(1)).count());
  return x.cwiseMax(S(-1)).cwiseMin(S(1));
}

// ---------------------------------------------------------------------------
// Conditioning.

struct ConditioningVariant {
  bool recon = false;
  bool leaf = false;
  bool embed = false;
  bool path = false;

  /// "+"-joined tokens from {recon, leaf, embed, path}, or "unconditional".
  /// Throws ConfigError for anything else.
  static ConditioningVariant parse(const std::string& text);
  std::string name() const;
  bool uses_embedding() const { return leaf || embed || path; }
  bool operator==(const ConditioningVariant&) const = default;
};

/// Rows of the batch being denoised, each tied to one leaf.
template <typename S>
struct Condition {
  /// Leaf reconstruction in [-1, 1] (N x d) when the variant uses it.
  Matrix<S> recon;
  /// Leaf table row per sample.
  std::vector<int> leaf_slot;
  /// Leaf embedding z_l (N x latent).
  Matrix<S> leaf_z;
  /// path_z[h] holds the depth-h path embedding (N x latent); rows whose
  /// path is shorter have path_mask[h](r) = 0.
  std::vector<Matrix<S>> path_z;
  std::vector<Matrix<S>> path_mask;
};

struct DenoiserDims {
  int x_dim = 0;
  /// Image geometry of x (channels * height * width == x_dim).
  int channels = 1;
  int height = 0;
  int width_px = 0;
  int latent_dim = 0;
  /// Number of per-depth path projections (max tree depth + 1).
  int path_levels = 0;
  /// Leaf ids in table order.
  std::vector<int> leaf_ids;
  int base_channels = 64;
  std::vector<int> channel_multipliers = {1, 2, 2};
  int res_blocks = 1;
  double dropout = 0.1;
  ConditioningVariant variant;

  int width(size_t level) const { return 2 * base_channels * channel_multipliers.at(level); }
  int embed_width() const { return 4 * base_channels; }
  int input_dim() const { return variant.recon ? 2 * x_dim : x_dim; }
  /// Channels of the 3x3 local branch and of its per-pixel input
  /// (x_t, the MLP estimate and the reconstruction when used).
  int local_width() const { return std::max(2, base_channels / 4); }
  int local_inputs() const { return channels * (variant.recon ? 3 : 2); }
  int leaf_slot(int leaf) const;

  nlohmann::json to_json() const;
  static DenoiserDims from_json(const nlohmann::json& j);
};

/// Residual MLP block with additive embedding injection.
template <typename S>
struct EmbedResBlock {
  nn::Dense<S> in;
  nn::Dense<S> emb;
  nn::Dense<S> out;
  std::optional<nn::Dense<S>> skip;

  EmbedResBlock() = default;
  EmbedResBlock(int in_w, int out_w, int emb_w, Rng& rng)
      : in(in_w, out_w, rng), emb(emb_w, out_w, rng), out(out_w, out_w, rng, 0.5) {
    if (in_w != out_w) skip.emplace(in_w, out_w, rng);
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x, const Var<S>& e, double dropout, Rng* rng) {
    Var<S> h = ad::silu(in(t, x));
    h = ad::silu(h + emb(t, e));
    if (rng != nullptr && dropout > 0) {
      const S keep = static_cast<S>(1.0 - dropout);
      Matrix<S> mask(h.rows(), h.cols());
      for (Index j = 0; j < mask.cols(); ++j)
        for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng->uniform() < 1.0 - dropout ? S(1) / keep : S(0);
      h = ad::mul(h, t.constant(mask));
    }
    h = out(t, h);
    return (skip ? (*skip)(t, x) : x) + h;
  }

  template <typename F>
  void visit(const std::string& p, F&& f) {
    in.visit(p + ".in", f);
    emb.visit(p + ".emb", f);
    out.visit(p + ".out", f);
    if (skip) skip->visit(p + ".skip", f);
  }
};

/// Sinusoidal features of integer timesteps (N x width).
template <typename S>
Matrix<S> timestep_features(const std::vector<int>& t, int width) {
  Matrix<S> out(static_cast<Index>(t.size()), width);
  const int half = width / 2;
  for (size_t r = 0; r < t.size(); ++r)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half));
      out(static_cast<Index>(r), k) = static_cast<S>(std::sin(t[r] * freq));
      out(static_cast<Index>(r), k + half) = static_cast<S>(std::cos(t[r] * freq));
    }
  if (width % 2 == 1) out.col(width - 1).setZero();
  return out;
}

/// Encoder/decoder MLP with skip concatenation between matching levels, plus
/// full-resolution per-pixel paths from x_t (and the reconstruction) to the
/// output gated by the embedding.
template <typename S>
class Denoiser {
 public:
  DenoiserDims dims;
  nn::Dense<S> time_in, time_out;
  std::optional<ad::Parameter<S>> leaf_table;
  std::optional<nn::Mlp<S>> leaf_proj;
  std::vector<nn::Mlp<S>> path_proj;
  nn::Dense<S> stem;
  std::vector<EmbedResBlock<S>> down;
  std::vector<EmbedResBlock<S>> mid;
  std::vector<EmbedResBlock<S>> up;
  nn::Dense<S> head;
  nn::Dense<S> gate_x;
  std::optional<nn::Dense<S>> gate_recon;
  nn::Dense<S> local_in, local_emb, local_mid, local_out;

  Denoiser() = default;
  Denoiser(const DenoiserDims& d, Rng& rng) : dims(d) {
    if (d.channels < 1 || d.height < 1 || d.width_px < 1 || d.channels * d.height * d.width_px != d.x_dim)
      throw ShapeError("denoiser image geometry does not match x_dim");
    const int E = d.embed_width();
    const int B = d.base_channels;
    time_in = nn::Dense<S>(B, E, rng);
    time_out = nn::Dense<S>(E, E, rng);
    if (d.variant.leaf) {
      ad::Parameter<S> table;
      table.value = rng.normal_matrix<S>(static_cast<Index>(d.leaf_ids.size()), E);
      leaf_table = table;
    }
    if (d.variant.embed) leaf_proj.emplace(std::vector<int>{d.latent_dim, E, E}, nn::Activation::Silu, rng);
    if (d.variant.path)
      for (int h = 0; h < d.path_levels; ++h) path_proj.emplace_back(std::vector<int>{d.latent_dim, E, E}, nn::Activation::Silu, rng);
    const size_t L = d.channel_multipliers.size();
    stem = nn::Dense<S>(d.input_dim(), d.width(0), rng);
    int w = d.width(0);
    for (size_t l = 0; l < L; ++l)
      for (int r = 0; r < d.res_blocks; ++r) {
        down.emplace_back(w, d.width(l), E, rng);
        w = d.width(l);
      }
    mid.emplace_back(w, w, E, rng);
    mid.emplace_back(w, w, E, rng);
    for (size_t l = L; l-- > 0;)
      for (int r = 0; r < d.res_blocks; ++r) {
        const size_t skip_level = l;  // matches the down block at this position
        up.emplace_back(w + d.width(skip_level), d.width(l), E, rng);
        w = d.width(l);
      }
    head = nn::Dense<S>(w, d.x_dim, rng);
    head.weight.value.setZero();
    gate_x = nn::Dense<S>(E, d.x_dim, rng);
    gate_x.weight.value.setZero();
    if (d.variant.recon) {
      gate_recon.emplace(E, d.x_dim, rng);
      gate_recon->weight.value.setZero();
    }
    const int F = d.local_width();
    local_in = nn::Dense<S>(9 * d.local_inputs(), F, rng);
    local_emb = nn::Dense<S>(E, F, rng);
    local_mid = nn::Dense<S>(9 * F, F, rng);
    local_out = nn::Dense<S>(F, d.channels, rng);
    local_out.weight.value.setZero();
  }

  template <typename F>
  void visit(F&& f) {
    time_in.visit("time.in", f);
    time_out.visit("time.out", f);
    if (leaf_table) f("cond.leaf_table", *leaf_table);
    if (leaf_proj) leaf_proj->visit("cond.leaf_proj", f);
    for (size_t h = 0; h < path_proj.size(); ++h) path_proj[h].visit("cond.path." + std::to_string(h), f);
    stem.visit("stem", f);
    for (size_t i = 0; i < down.size(); ++i) down[i].visit("down." + std::to_string(i), f);
    for (size_t i = 0; i < mid.size(); ++i) mid[i].visit("mid." + std::to_string(i), f);
    for (size_t i = 0; i < up.size(); ++i) up[i].visit("up." + std::to_string(i), f);
    head.visit("head", f);
    gate_x.visit("gate.x", f);
    if (gate_recon) gate_recon->visit("gate.recon", f);
    local_in.visit("local.in", f);
    local_emb.visit("local.emb", f);
    local_mid.visit("local.mid", f);
    local_out.visit("local.out", f);
  }

  std::map<std::string, Matrix<S>> parameter_values() const {
    std::map<std::string, Matrix<S>> out;
    const_cast<Denoiser*>(this)->visit([&](const std::string& n, ad::Parameter<S>& p) { out[n] = p.value; });
    return out;
  }

  template <typename T>
  void assign(const std::map<std::string, Matrix<T>>& values) {
    size_t seen = 0;
    visit([&](const std::string& n, ad::Parameter<S>& p) {
      auto it = values.find(n);
      if (it == values.end()) throw IntegrityError("missing parameter " + n);
      if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
        throw IntegrityError("shape mismatch for parameter " + n);
      p.value = it->second.template cast<S>();
      ++seen;
    });
    if (seen != values.size()) throw IntegrityError("unexpected extra parameters");
  }

  size_t parameter_count() const {
    size_t n = 0;
    const_cast<Denoiser*>(this)->visit([&](const std::string&, ad::Parameter<S>& p) { n += static_cast<size_t>(p.value.size()); });
    return n;
  }

  template <typename T>
  Denoiser<T> cast() const {
    Rng rng(0);
    Denoiser<T> out(dims, rng);
    out.assign(parameter_values());
    return out;
  }
};

/// Conditioning embedding (N x E) from the variant's signals.
template <typename S>
Var<S> condition_embedding(Tape<S>& t, Denoiser<S>& d, const Condition<S>& c, Index n) {
  const int E = d.dims.embed_width();
  Var<S> e = t.constant(Matrix<S>::Zero(n, E));
  if (d.dims.variant.leaf) {
    if (static_cast<Index>(c.leaf_slot.size()) != n) throw ShapeError("leaf conditioning needs one leaf per row");
    Matrix<S> onehot = Matrix<S>::Zero(n, static_cast<Index>(d.dims.leaf_ids.size()));
    for (Index r = 0; r < n; ++r) {
      const int slot = c.leaf_slot[static_cast<size_t>(r)];
      if (slot < 0 || slot >= onehot.cols()) throw PreconditionError("leaf slot out of range");
      onehot(r, slot) = S(1);
    }
    e = e + ad::matmul(t.constant(onehot), t.parameter(*d.leaf_table));
  }
  if (d.dims.variant.embed) {
    if (c.leaf_z.rows() != n) throw ShapeError("embedding conditioning needs z_l per row");
    e = e + (*d.leaf_proj)(t, t.constant(c.leaf_z));
  }
  if (d.dims.variant.path) {
    if (c.path_z.empty() || c.path_z.size() > d.path_proj.size() || c.path_mask.size() != c.path_z.size())
      throw ShapeError("path conditioning depth mismatch");
    for (size_t h = 0; h < c.path_z.size(); ++h) {
      const Var<S> proj = d.path_proj[h](t, t.constant(c.path_z[h]));
      e = e + ad::mul_col(proj, t.constant(c.path_mask[h]));
    }
  }
  return e;
}

/// Time embedding MLP over sinusoidal features.
template <typename S>
Var<S> time_embedding(Tape<S>& t, Denoiser<S>& d, const Matrix<S>& features) {
  return d.time_out(t, ad::silu(d.time_in(t, t.constant(features))));
}

/// Noise estimate for x_t (N x d) at per-row timesteps. With
/// `use_condition_embedding` false the conditioning term is skipped.
/// `dropout_rng` enables dropout (training).
template <typename S>
Var<S> denoise_graph(Tape<S>& t, Denoiser<S>& d, const Var<S>& x_t, const std::vector<int>& steps,
                     const Condition<S>& c, Rng* dropout_rng = nullptr, bool use_condition_embedding = true) {
  const Index n = x_t.rows();
  if (x_t.cols() != d.dims.x_dim) throw ShapeError("denoiser input width mismatch");
  if (static_cast<Index>(steps.size()) != n) throw ShapeError("one timestep per row required");
  Var<S> e = time_embedding(t, d, timestep_features<S>(steps, d.dims.base_channels));
  if (use_condition_embedding && d.dims.variant.uses_embedding()) e = e + condition_embedding(t, d, c, n);
  const Var<S> act_e = ad::silu(e);
  Var<S> in = x_t;
  if (d.dims.variant.recon) {
    if (c.recon.rows() != n || c.recon.cols() != d.dims.x_dim) throw ShapeError("reconstruction conditioning shape mismatch");
    in = ad::concat_cols(std::vector<Var<S>>{x_t, t.constant(c.recon)});
  }
  Var<S> h = d.stem(t, in);
  std::vector<Var<S>> skips;
  for (auto& b : d.down) {
    h = b(t, h, act_e, d.dims.dropout, dropout_rng);
    skips.push_back(h);
  }
  for (auto& b : d.mid) h = b(t, h, act_e, d.dims.dropout, dropout_rng);
  for (auto& b : d.up) {
    h = b(t, ad::concat_cols(std::vector<Var<S>>{h, skips.back()}), act_e, d.dims.dropout, dropout_rng);
    skips.pop_back();
  }
  const Var<S> global = d.head(t, ad::silu(h));
  Var<S> out = global + ad::mul(d.gate_x(t, act_e), x_t);
  if (d.gate_recon) out = out + ad::mul((*d.gate_recon)(t, act_e), t.constant(c.recon));
  // Two 3x3 layers over the per-pixel inputs.
  std::vector<Var<S>> planes{x_t, global};
  if (d.dims.variant.recon) planes.push_back(t.constant(c.recon));
  const Index H = d.dims.height, W = d.dims.width_px;
  const Var<S> px = ad::to_pixels(ad::concat_cols(planes), d.dims.local_inputs());
  Var<S> l = d.local_in(t, ad::patches3x3(px, H, W)) + ad::repeat_rows(d.local_emb(t, act_e), H * W);
  l = ad::silu(d.local_mid(t, ad::patches3x3(ad::silu(l), H, W)));
  return out + ad::from_pixels(d.local_out(t, l), n);
}

/// Inference-mode noise estimate (no dropout).
template <typename S>
Matrix<S> denoise(const Denoiser<S>& den, const Matrix<S>& x_t, const std::vector<int>& steps, const Condition<S>& c,
                  bool use_condition_embedding = true) {
  Tape<S> t(false);
  auto& d = const_cast<Denoiser<S>&>(den);
  return denoise_graph(t, d, t.constant(x_t), steps, c, nullptr, use_condition_embedding).value();
}

template <typename S>
EpsFn<S> eps_function(const Denoiser<S>& den, const Condition<S>& c) {
  return [&den, c](const Matrix<S>& x, int t) {
    return denoise(den, x, std::vector<int>(static_cast<size_t>(x.rows()), t), c);
  };
}

enum class LossType { L2, L2Weighted };
LossType parse_loss_type(const std::string& s);

/// Per-timestep weight of the ELBO form of the loss relative to the simple
/// loss: beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)), with sigma_t^2 =
/// beta_tilde_t for t > 1 and beta_1 at t = 1 (where beta_tilde vanishes).
double elbo_weight(const NoiseSchedule& s, int t);

/// Squared error between injected and predicted noise, summed over pixels
/// and averaged over rows. Draws t ~ U{1..T} and eps ~ N(0, I) per row
/// unless given.
template <typename S>
Var<S> ddpm_loss_graph(Tape<S>& t, Denoiser<S>& d, const Matrix<S>& x0, const Condition<S>& c, const NoiseSchedule& s,
                       Rng& rng, LossType type = LossType::L2, Rng* dropout_rng = nullptr,
                       const std::vector<int>* fixed_t = nullptr, const Matrix<S>* fixed_eps = nullptr) {
  const Index n = x0.rows();
  std::vector<int> steps(static_cast<size_t>(n));
  if (fixed_t) {
    steps = *fixed_t;
  } else {
    for (auto& v : steps) v = static_cast<int>(rng.uniform_int(1, s.T));
  }
  const Matrix<S> eps = fixed_eps ? *fixed_eps : rng.normal_matrix<S>(n, x0.cols());
  const Matrix<S> x_t = q_sample(x0, steps, eps, s);
  const Var<S> pred = denoise_graph(t, d, t.constant(x_t), steps, c, dropout_rng);
  Var<S> per_row = ad::row_sum(ad::square(pred - t.constant(eps)));
  if (type == LossType::L2Weighted) {
    Matrix<S> w(n, 1);
    for (Index r = 0; r < n; ++r) w(r, 0) = static_cast<S>(elbo_weight(s, steps[static_cast<size_t>(r)]));
    per_row = ad::mul(per_row, t.constant(w));
  }
  return ad::mean(per_row);
}

/// Exponential moving average of parameters, keyed by name.
template <typename S>
class Ema {
 public:
  Ema() = default;
  template <typename Model>
  explicit Ema(Model& m) {
    m.visit([&](const std::string& n, ad::Parameter<S>& p) { shadow_[n] = p.value; });
  }

  /// shadow = decay * shadow + (1 - decay) * live.
  template <typename Model>
  void update(Model& m, double decay) {
    const S a = static_cast<S>(decay), b = static_cast<S>(1.0 - decay);
    m.visit([&](const std::string& n, ad::Parameter<S>& p) {
      auto& sh = shadow_.at(n);
      if (decay == 0.0) {
        sh = p.value;
      } else if (decay != 1.0) {
        sh = a * sh + b * p.value;
      }
    });
  }

  const std::map<std::string, Matrix<S>>& shadow() const { return shadow_; }

 private:
  std::map<std::string, Matrix<S>> shadow_;
};

// ---------------------------------------------------------------------------
// Conditioning signals from the tree.

/// Builds the conditioning for rows that each chose leaf `leaves[r]`, using
/// node embeddings from `state` (inference or prior generation). The leaf
/// reconstruction is decoded from z_l and mapped to [-1, 1].
Condition<float> make_condition(const TreeModel<float>& tree, const LatentState<float>& state,
                                const std::vector<int>& leaves, const DenoiserDims& dims);

struct DiffusionTrainResult {
  Denoiser<float> live;
  Denoiser<float> ema;
  std::vector<double> losses;
};

using DiffusionLog = std::function<void(int step, double loss)>;

/// Trains a denoiser on images in [0, 1]; each step draws a batch, infers
/// its tree posterior, samples one leaf per row from p(l|x) and conditions
/// on that leaf. The tree is only read.
DiffusionTrainResult train_diffusion(const ExperimentConfig& config, const TreeModel<float>& tree,
                                     const Eigen::MatrixXf& data, Rng& rng, const DiffusionLog& log = {});

DenoiserDims denoiser_dims(const ExperimentConfig& config, const TreeModel<float>& tree,
                           const ConditioningVariant& variant);

NoiseSchedule schedule_from_config(const DiffusionConfig& c);

Checkpoint denoiser_to_checkpoint(const Denoiser<float>& ema, std::uint64_t config_hash, std::uint64_t tree_hash,
                                  const DiffusionConfig& cfg);
/// Restores the EMA denoiser; throws CompatibilityError when the checkpoint
/// was trained against a different tree.
Denoiser<float> denoiser_from_checkpoint(const Checkpoint& c, std::optional<std::uint64_t> expected_tree_hash = {});
NoiseSchedule schedule_from_checkpoint(const Checkpoint& c);

}  // namespace treediff
