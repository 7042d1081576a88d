#include "treediff/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "treediff/errors.hpp"

namespace treediff {

using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticConfig, clusters, noise_std, samples_per_cluster)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, name, resolution, channels, images, labels,
                                                max_images, train_fraction, synthetic)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TreeConfig, max_depth, max_leaves, latent_channels,
                                                representation_size, bottom_up_channels, hidden_width, node_width,
                                                prune_threshold, sigma_floor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TreeVaeConfig, initial_epochs, smalltree_epochs,
                                                intermediate_epochs, finetune_epochs, learning_rate, batch_size,
                                                weight_decay, lr_decay_rate, lr_decay_step, path_estimator)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiffusionConfig, timesteps, beta_start, beta_end, base_channels,
                                                channel_multipliers, attention_scales, res_blocks, dropout,
                                                learning_rate, ema_decay, grad_clip, loss_type, warmup_steps,
                                                train_steps, batch_size, variant)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, classifier_epochs, fid_samples, ddim_steps, eta,
                                                leaf_samples)

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"dataset", c.dataset}, {"tree", c.tree},   {"treevae", c.treevae},
           {"diffusion", c.diffusion}, {"eval", c.eval}, {"seed", c.seed}};
}

void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.dataset = j.value("dataset", json(d.dataset)).get<DatasetConfig>();
  c.tree = j.value("tree", json(d.tree)).get<TreeConfig>();
  c.treevae = j.value("treevae", json(d.treevae)).get<TreeVaeConfig>();
  c.diffusion = j.value("diffusion", json(d.diffusion)).get<DiffusionConfig>();
  c.eval = j.value("eval", json(d.eval)).get<EvalConfig>();
  c.seed = j.value("seed", d.seed);
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not silently become fractional values.
    if (a.is_number_integer() && b.is_number_float()) return false;
    return true;
  }
  return a.type() == b.type() || (a.is_array() && b.is_array());
}

// Merges `patch` into `base`, refusing keys the defaults do not know.
void merge_checked(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config root must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be a section");
      merge_checked(slot, it.value(), key);
      continue;
    }
    if (!same_kind(slot, it.value())) {
      throw ConfigError("config key '" + key + "' has the wrong type (expected " + std::string(slot.type_name()) +
                        ", got " + std::string(it.value().type_name()) + ")");
    }
    slot = it.value();
  }
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

void apply_override(json& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  json value = parse_override_value(assignment.substr(eq + 1));
  // Build a nested patch object from the dotted key.
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_checked(base, patch, "");
}

ExperimentConfig finish(const json& merged) {
  ExperimentConfig c;
  try {
    c = merged.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config conversion failed: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  json merged = ExperimentConfig{};
  const bool blank = text.find_first_not_of(" \t\r\n") == std::string::npos;
  if (!blank) {
    json file;
    try {
      file = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    merge_checked(merged, file, "");
  }
  for (const auto& o : overrides) apply_override(merged, o);
  return finish(merged);
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what + " violated");
  };
  require(tree.max_depth >= 1, "tree.max_depth >= 1");
  require(tree.max_leaves >= 2, "tree.max_leaves >= 2");
  require(tree.latent_channels >= 1 && tree.representation_size >= 1 && tree.bottom_up_channels >= 1,
          "tree dimensions >= 1");
  require(tree.hidden_width >= 1 && tree.node_width >= 1, "tree widths >= 1");
  require(tree.prune_threshold >= 0.0 && tree.prune_threshold < 1.0, "0 <= tree.prune_threshold < 1");
  require(tree.sigma_floor > 0.0, "tree.sigma_floor > 0");
  require(diffusion.timesteps >= 2, "diffusion.timesteps >= 2 (T >= 2)");
  require(diffusion.beta_start > 0.0, "0 < beta_start (0 < β₁)");
  require(diffusion.beta_start < diffusion.beta_end, "beta_start < beta_end (β₁ < β_T)");
  require(diffusion.beta_end < 1.0, "beta_end < 1 (β_T < 1)");
  require(diffusion.ema_decay > 0.0 && diffusion.ema_decay < 1.0, "0 < diffusion.ema_decay < 1");
  require(diffusion.base_channels >= 1 && !diffusion.channel_multipliers.empty(), "denoiser width >= 1");
  require(diffusion.dropout >= 0.0 && diffusion.dropout < 1.0, "0 <= diffusion.dropout < 1");
  require(diffusion.loss_type == "l2" || diffusion.loss_type == "l2_weighted", "diffusion.loss_type in {l2, l2_weighted}");
  require(diffusion.grad_clip > 0.0, "diffusion.grad_clip > 0");
  require(diffusion.batch_size >= 1 && treevae.batch_size >= 1, "batch sizes >= 1");
  require(treevae.initial_epochs >= 0 && treevae.smalltree_epochs >= 0 && treevae.intermediate_epochs >= 0 &&
              treevae.finetune_epochs >= 0 && eval.classifier_epochs >= 0 && diffusion.train_steps >= 0,
          "epoch counts >= 0");
  require(treevae.learning_rate > 0.0 && diffusion.learning_rate > 0.0, "learning rates > 0");
  require(treevae.lr_decay_step >= 1, "treevae.lr_decay_step >= 1");
  require(treevae.path_estimator == "exact" || treevae.path_estimator == "mc", "treevae.path_estimator in {exact, mc}");
  require(dataset.channels == 1 || dataset.channels == 3, "dataset.channels in {1, 3}");
  require(dataset.resolution >= 1, "dataset.resolution >= 1");
  require(dataset.train_fraction > 0.0 && dataset.train_fraction < 1.0, "0 < dataset.train_fraction < 1");
  require(dataset.synthetic.clusters >= 2, "dataset.synthetic.clusters >= 2");
  require(dataset.synthetic.noise_std >= 0.0, "dataset.synthetic.noise_std >= 0");
  require(eval.ddim_steps >= 1 && eval.ddim_steps <= diffusion.timesteps, "1 <= eval.ddim_steps <= T");
  require(eval.eta >= 0.0 && eval.eta <= 1.0, "0 <= eval.eta <= 1");
}

std::uint64_t config_hash(const ExperimentConfig& c, const std::vector<std::string>& sections) {
  const json j = c;
  std::string canonical;
  for (const auto& s : sections) canonical += s + "=" + j.at(s).dump() + ";";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t tree_config_hash(const ExperimentConfig& c) {
  ExperimentConfig shape = c;
  // Only the fields that fix data space and tree architecture participate.
  shape.dataset.images.clear();
  shape.dataset.labels.clear();
  shape.dataset.max_images = 0;
  shape.dataset.train_fraction = 0.8;
  shape.dataset.synthetic = {};
  shape.tree.prune_threshold = 0.0;
  return config_hash(shape, {"dataset", "tree"});
}

std::uint64_t diffusion_config_hash(const ExperimentConfig& c) {
  ExperimentConfig shape = c;
  shape.diffusion.learning_rate = 0;
  shape.diffusion.ema_decay = 0.5;
  shape.diffusion.grad_clip = 1;
  shape.diffusion.warmup_steps = 0;
  shape.diffusion.train_steps = 0;
  shape.diffusion.batch_size = 1;
  shape.diffusion.loss_type = "l2";
  shape.diffusion.dropout = 0;
  return tree_config_hash(c) ^ config_hash(shape, {"diffusion"});
}

std::string hex_hash(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace treediff
