#include "treediff/diffusion.hpp"

#include <algorithm>
#include <sstream>

#include "treediff/data.hpp"

namespace treediff {

NoiseSchedule make_linear_schedule(int T, double beta_1, double beta_T) {
  if (T < 2) throw ValidationError("timesteps >= 2 violated");
  if (!(beta_1 > 0.0)) throw ValidationError("beta_start > 0 violated");
  if (!(beta_1 < beta_T)) throw ValidationError("beta_start < beta_end violated");
  if (!(beta_T < 1.0)) throw ValidationError("beta_end < 1 violated");
  NoiseSchedule s;
  s.T = T;
  s.beta = Eigen::VectorXd::Zero(T + 1);
  s.alpha = Eigen::VectorXd::Ones(T + 1);
  s.alpha_bar = Eigen::VectorXd::Ones(T + 1);
  s.beta_tilde = Eigen::VectorXd::Zero(T + 1);
  for (int t = 1; t <= T; ++t) {
    s.beta(t) = beta_1 + (beta_T - beta_1) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.alpha(t) = 1.0 - s.beta(t);
    s.alpha_bar(t) = s.alpha_bar(t - 1) * s.alpha(t);
    s.beta_tilde(t) = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
  }
  return s;
}

NoiseSchedule schedule_from_config(const DiffusionConfig& c) {
  return make_linear_schedule(c.timesteps, c.beta_start, c.beta_end);
}

std::vector<int> ddim_subsequence(int T, int count) {
  if (T < 1 || count < 1) throw PreconditionError("DDIM subsequence needs T >= 1 and count >= 1");
  count = std::min(count, T);
  if (count == 1) return {T};
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    const double v = static_cast<double>(T) - static_cast<double>(T - 1) * i / static_cast<double>(count - 1);
    const int t = static_cast<int>(std::lround(v));
    if (out.empty() || t < out.back()) out.push_back(t);
  }
  return out;
}

void check_subsequence(const std::vector<int>& steps, int T) {
  if (steps.empty()) throw PreconditionError("empty DDIM subsequence");
  if (steps.front() != T) throw PreconditionError("DDIM subsequence must start at T");
  for (size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1 || steps[i] > T) throw PreconditionError("DDIM step outside [1, T]");
    if (i > 0 && steps[i] >= steps[i - 1]) throw PreconditionError("DDIM subsequence must strictly decrease");
  }
}

double elbo_weight(const NoiseSchedule& s, int t) {
  s.check_step(t);
  const double var = t > 1 ? s.beta_tilde(t) : s.beta(t);
  return s.beta(t) * s.beta(t) / (2.0 * var * s.alpha(t) * (1.0 - s.alpha_bar(t)));
}

LossType parse_loss_type(const std::string& s) {
  if (s == "l2") return LossType::L2;
  if (s == "l2_weighted") return LossType::L2Weighted;
  throw ConfigError("unknown diffusion loss type '" + s + "'");
}

ConditioningVariant ConditioningVariant::parse(const std::string& text) {
  ConditioningVariant v;
  if (text == "unconditional") return v;
  if (text.empty()) throw ConfigError("empty conditioning variant");
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, '+');) {
    bool* slot = tok == "recon" ? &v.recon : tok == "leaf" ? &v.leaf : tok == "embed" ? &v.embed : tok == "path" ? &v.path : nullptr;
    if (slot == nullptr) throw ConfigError("unknown conditioning token '" + tok + "' in variant '" + text + "'");
    if (*slot) throw ConfigError("repeated conditioning token '" + tok + "'");
    *slot = true;
  }
  return v;
}

std::string ConditioningVariant::name() const {
  std::vector<std::string> parts;
  if (recon) parts.push_back("recon");
  if (leaf) parts.push_back("leaf");
  if (embed) parts.push_back("embed");
  if (path) parts.push_back("path");
  if (parts.empty()) return "unconditional";
  std::string out = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

int DenoiserDims::leaf_slot(int leaf) const {
  auto it = std::find(leaf_ids.begin(), leaf_ids.end(), leaf);
  if (it == leaf_ids.end()) throw PreconditionError("leaf " + std::to_string(leaf) + " unknown to the denoiser");
  return static_cast<int>(it - leaf_ids.begin());
}

nlohmann::json DenoiserDims::to_json() const {
  return {{"x_dim", x_dim},
          {"channels", channels},
          {"height", height},
          {"width", width_px},
          {"latent_dim", latent_dim},
          {"path_levels", path_levels},
          {"leaf_ids", leaf_ids},
          {"base_channels", base_channels},
          {"channel_multipliers", channel_multipliers},
          {"res_blocks", res_blocks},
          {"dropout", dropout},
          {"variant", variant.name()}};
}

DenoiserDims DenoiserDims::from_json(const nlohmann::json& j) {
  DenoiserDims d;
  d.x_dim = j.at("x_dim").get<int>();
  d.channels = j.at("channels").get<int>();
  d.height = j.at("height").get<int>();
  d.width_px = j.at("width").get<int>();
  d.latent_dim = j.at("latent_dim").get<int>();
  d.path_levels = j.at("path_levels").get<int>();
  d.leaf_ids = j.at("leaf_ids").get<std::vector<int>>();
  d.base_channels = j.at("base_channels").get<int>();
  d.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  d.res_blocks = j.at("res_blocks").get<int>();
  d.dropout = j.at("dropout").get<double>();
  d.variant = ConditioningVariant::parse(j.at("variant").get<std::string>());
  return d;
}

DenoiserDims denoiser_dims(const ExperimentConfig& config, const TreeModel<float>& tree,
                           const ConditioningVariant& variant) {
  DenoiserDims d;
  d.x_dim = tree.dims.x_dim();
  d.channels = tree.dims.channels;
  d.height = tree.dims.height;
  d.width_px = tree.dims.width;
  d.latent_dim = tree.dims.latent_dim;
  d.path_levels = tree.dims.max_depth + 1;
  d.leaf_ids = tree.topology.leaves();
  d.base_channels = config.diffusion.base_channels;
  d.channel_multipliers = config.diffusion.channel_multipliers;
  d.res_blocks = config.diffusion.res_blocks;
  d.dropout = config.diffusion.dropout;
  d.variant = variant;
  return d;
}

Condition<float> make_condition(const TreeModel<float>& tree, const LatentState<float>& state,
                                const std::vector<int>& leaves, const DenoiserDims& dims) {
  const Index n = static_cast<Index>(leaves.size());
  Condition<float> c;
  const auto z_of = [&](int node) -> const Eigen::MatrixXf& {
    auto it = state.nodes.find(node);
    if (it == state.nodes.end()) throw InvariantError("missing embedding for node " + std::to_string(node));
    return it->second.z;
  };
  if (dims.variant.recon) {
    c.recon.resize(n, dims.x_dim);
    std::map<int, std::vector<Index>> rows_by_leaf;
    for (Index r = 0; r < n; ++r) rows_by_leaf[leaves[static_cast<size_t>(r)]].push_back(r);
    for (const auto& [leaf, rows] : rows_by_leaf) {
      const Eigen::MatrixXf& z = z_of(leaf);
      Eigen::MatrixXf zl(static_cast<Index>(rows.size()), z.cols());
      for (size_t i = 0; i < rows.size(); ++i) zl.row(static_cast<Index>(i)) = z.row(rows[i]);
      const Eigen::MatrixXf rec = to_diffusion_range(decode_leaf(tree, leaf, zl));
      for (size_t i = 0; i < rows.size(); ++i) c.recon.row(rows[i]) = rec.row(static_cast<Index>(i));
    }
  }
  if (dims.variant.leaf) {
    for (int leaf : leaves) c.leaf_slot.push_back(dims.leaf_slot(leaf));
  }
  if (dims.variant.embed) {
    c.leaf_z.resize(n, dims.latent_dim);
    for (Index r = 0; r < n; ++r) c.leaf_z.row(r) = z_of(leaves[static_cast<size_t>(r)]).row(r);
  }
  if (dims.variant.path) {
    c.path_z.assign(static_cast<size_t>(dims.path_levels), Eigen::MatrixXf::Zero(n, dims.latent_dim));
    c.path_mask.assign(static_cast<size_t>(dims.path_levels), Eigen::MatrixXf::Zero(n, 1));
    for (Index r = 0; r < n; ++r) {
      const auto path = tree.topology.path_to(leaves[static_cast<size_t>(r)]);
      if (static_cast<int>(path.size()) > dims.path_levels) throw InvariantError("path deeper than the denoiser supports");
      for (size_t h = 0; h < path.size(); ++h) {
        c.path_z[h].row(r) = z_of(path[h]).row(r);
        c.path_mask[h](r, 0) = 1.0f;
      }
    }
  }
  return c;
}

DiffusionTrainResult train_diffusion(const ExperimentConfig& config, const TreeModel<float>& tree,
                                     const Eigen::MatrixXf& data, Rng& rng, const DiffusionLog& log) {
  const DiffusionConfig& dc = config.diffusion;
  if (data.cols() != tree.dims.x_dim()) throw CompatibilityError("data width does not match the tree model");
  if (data.rows() == 0) throw PreconditionError("no training images");
  const NoiseSchedule sched = schedule_from_config(dc);
  const LossType loss_type = parse_loss_type(dc.loss_type);
  const DenoiserDims dims = denoiser_dims(config, tree, ConditioningVariant::parse(dc.variant));
  Rng init_rng = rng.split(11);
  Rng data_rng = rng.split(12);
  Rng noise_rng = rng.split(13);
  Rng dropout_rng = rng.split(14);

  DiffusionTrainResult res;
  res.live = Denoiser<float>(dims, init_rng);
  Ema<float> ema(res.live);
  Adam<float> opt(dc.learning_rate, 0.0);
  const Index bs = std::max(1, dc.batch_size);
  for (int step = 0; step < dc.train_steps; ++step) {
    opt.lr = dc.learning_rate * std::min(1.0, static_cast<double>(step + 1) / std::max(1, dc.warmup_steps));
    Eigen::MatrixXf batch(bs, data.cols());
    for (Index r = 0; r < bs; ++r) batch.row(r) = data.row(data_rng.uniform_int(0, data.rows() - 1));
    const auto inf = infer(tree, batch, noise_rng, LatentMode::Sample);
    std::vector<int> leaves(static_cast<size_t>(bs));
    for (Index r = 0; r < bs; ++r)
      leaves[static_cast<size_t>(r)] = sample_leaf<float>(inf.paths.leaves, inf.paths.leaf_probs.row(r), noise_rng);
    const Condition<float> cond = make_condition(tree, inf.state, leaves, dims);
    Tape<float> t;
    const Var<float> loss =
        ddpm_loss_graph(t, res.live, to_diffusion_range(batch), cond, sched, noise_rng, loss_type, &dropout_rng);
    const double lv = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(lv)) throw NumericError("non-finite diffusion loss at step " + std::to_string(step));
    zero_grad(res.live);
    t.backward(loss);
    clip_grad_norm(res.live, dc.grad_clip);
    opt.step(res.live);
    ema.update(res.live, dc.ema_decay);
    res.losses.push_back(lv);
    if (log) log(step, lv);
  }
  zero_grad(res.live);
  res.ema = res.live;
  res.ema.assign(ema.shadow());
  return res;
}

Checkpoint denoiser_to_checkpoint(const Denoiser<float>& ema, std::uint64_t config_hash, std::uint64_t tree_hash,
                                  const DiffusionConfig& cfg) {
  Checkpoint c;
  c.manifest.stage = "diffusion";
  c.manifest.config_hash = config_hash;
  c.manifest.step = static_cast<std::uint64_t>(cfg.train_steps);
  c.manifest.extra = {{"dims", ema.dims.to_json()},
                      {"tree_hash", hex_hash(tree_hash)},
                      {"timesteps", cfg.timesteps},
                      {"beta_start", cfg.beta_start},
                      {"beta_end", cfg.beta_end}};
  for (const auto& [name, value] : ema.parameter_values()) c.arrays[name] = to_named_array(value);
  return c;
}

Denoiser<float> denoiser_from_checkpoint(const Checkpoint& c, std::optional<std::uint64_t> expected_tree_hash) {
  if (c.manifest.stage != "diffusion") {
    throw CompatibilityError("checkpoint stage is '" + c.manifest.stage + "', not 'diffusion'");
  }
  try {
    if (expected_tree_hash && c.manifest.extra.at("tree_hash").get<std::string>() != hex_hash(*expected_tree_hash)) {
      throw CompatibilityError("denoiser was trained against tree " + c.manifest.extra.at("tree_hash").get<std::string>() +
                               ", not " + hex_hash(*expected_tree_hash));
    }
    Rng rng(0);
    Denoiser<float> d(DenoiserDims::from_json(c.manifest.extra.at("dims")), rng);
    std::map<std::string, Eigen::MatrixXf> values;
    for (const auto& [name, arr] : c.arrays) values[name] = from_named_array<float>(arr);
    d.assign(values);
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("diffusion checkpoint manifest malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("diffusion checkpoint manifest malformed: ") + e.what());
  }
}

NoiseSchedule schedule_from_checkpoint(const Checkpoint& c) {
  try {
    return make_linear_schedule(c.manifest.extra.at("timesteps").get<int>(), c.manifest.extra.at("beta_start").get<double>(),
                                c.manifest.extra.at("beta_end").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("diffusion checkpoint manifest malformed: ") + e.what());
  }
}

}  // namespace treediff
