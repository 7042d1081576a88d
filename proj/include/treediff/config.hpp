#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace treediff {

struct SyntheticConfig {
  int clusters = 4;
  double noise_std = 0.05;
  int samples_per_cluster = 64;
};

struct DatasetConfig {
  /// "synthetic" or "idx" (MNIST-format files at `images` / `labels`).
  std::string name = "synthetic";
  int resolution = 16;
  int channels = 1;
  std::string images;
  std::string labels;
  /// Use at most this many images from an IDX file; 0 keeps all.
  int max_images = 0;
  double train_fraction = 0.8;
  SyntheticConfig synthetic;
};

struct TreeConfig {
  int max_depth = 3;
  int max_leaves = 4;
  int latent_channels = 4;
  int representation_size = 4;
  int bottom_up_channels = 8;
  /// Width of encoder/decoder hidden layers.
  int hidden_width = 128;
  /// Width of transformation and router hidden layers.
  int node_width = 64;
  double prune_threshold = 0.01;
  double sigma_floor = 1e-6;

  int latent_dim() const { return latent_channels * representation_size * representation_size; }
  int bottom_up_dim() const { return bottom_up_channels * representation_size * representation_size; }
};

struct TreeVaeConfig {
  int initial_epochs = 30;
  int smalltree_epochs = 15;
  int intermediate_epochs = 5;
  int finetune_epochs = 10;
  double learning_rate = 1e-3;
  int batch_size = 64;
  double weight_decay = 1e-5;
  double lr_decay_rate = 0.1;
  int lr_decay_step = 100;
  /// "exact" enumerates every root-to-leaf path; "mc" samples one path per
  /// input when evaluating (training always uses exact enumeration).
  std::string path_estimator = "exact";
};

struct DiffusionConfig {
  int timesteps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.1;
  int base_channels = 64;
  std::vector<int> channel_multipliers = {1, 2, 2};
  std::vector<int> attention_scales = {};
  int res_blocks = 1;
  double dropout = 0.1;
  double learning_rate = 2e-4;
  double ema_decay = 0.995;
  double grad_clip = 1.0;
  /// "l2" (unweighted simple loss) or "l2_weighted" (per-step ELBO weights).
  std::string loss_type = "l2";
  int warmup_steps = 200;
  int train_steps = 2000;
  int batch_size = 64;
  std::string variant = "recon+path";
};

struct EvalConfig {
  int classifier_epochs = 8;
  int fid_samples = 1000;
  int ddim_steps = 20;
  double eta = 0.0;
  /// Generations per leaf for the leaf-specificity histograms.
  int leaf_samples = 200;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  TreeConfig tree;
  TreeVaeConfig treevae;
  DiffusionConfig diffusion;
  EvalConfig eval;
  std::uint64_t seed = 0;

  /// Throws ValidationError naming the violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses a JSON config. Missing keys take the desk-scale defaults; unknown
/// keys and type mismatches raise ConfigError naming the key. `overrides`
/// are dotted `key=value` assignments applied after the file.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

/// Same as load_config but from in-memory text (empty text = defaults).
ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});

/// Stable 64-bit FNV-1a hash of the canonical JSON of the given sections.
std::uint64_t config_hash(const ExperimentConfig& c, const std::vector<std::string>& sections);

/// Hash of everything that fixes the tree model's shape and data space.
std::uint64_t tree_config_hash(const ExperimentConfig& c);
/// Tree hash plus the denoiser architecture.
std::uint64_t diffusion_config_hash(const ExperimentConfig& c);

std::string hex_hash(std::uint64_t h);

}  // namespace treediff
