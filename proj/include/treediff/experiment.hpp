#pragma once

// End-to-end experiment steps shared by the command line and the acceptance
// runner: data loading, metric reports and the conditioning ablation.

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "treediff/config.hpp"
#include "treediff/data.hpp"
#include "treediff/diffusion.hpp"
#include "treediff/eval.hpp"
#include "treediff/pipeline.hpp"
#include "treediff/tree_model.hpp"

namespace treediff {

struct ExperimentData {
  ImageBatch train;
  ImageBatch test;
};

/// Synthetic clusters or IDX files as configured, split by
/// dataset.train_fraction with a stream derived from config.seed. Relative
/// IDX paths resolve against `base_dir`. Throws ValidationError when the
/// images do not match dataset.resolution.
ExperimentData load_experiment_data(const ExperimentConfig& config, const std::filesystem::path& base_dir = ".");

/// Conditioning variants of the ablation table plus the unconditional
/// baseline.
std::vector<std::string> default_ablation_variants();

struct ClusteringMetrics {
  double acc = 0;
  double nmi = 0;
  int leaves = 0;
};

ClusteringMetrics clustering_metrics(const TreeModel<float>& tree, const ImageBatch& data);

/// Mean prior probability of each leaf over `n` root samples.
std::map<int, double> prior_leaf_mass(const TreeModel<float>& tree, int n, Rng& rng);

struct GenerativeMetrics {
  /// Frechet-proxy of leaf reconstructions and of refined reconstructions
  /// of the reference images.
  double fid_rec_tree = 0;
  double fid_rec_refined = 0;
  /// Frechet-proxy of prior generations before and after refinement.
  double fid_gen_tree = 0;
  double fid_gen_refined = 0;
};

/// Reference images are compared with reconstructions of themselves and
/// with `n_gen` generations.
GenerativeMetrics generative_metrics(const TreeModel<float>& tree, const Denoiser<float>& den, const NoiseSchedule& sched,
                                     const FeatureExtractor& fe, const Eigen::MatrixXf& reference, int n_gen,
                                     const SamplerOptions& opts, Rng& rng);

/// Frechet-proxy of `n` refined prior generations against precomputed
/// reference features.
double generation_score(const TreeModel<float>& tree, const Denoiser<float>& den, const NoiseSchedule& sched,
                        const FeatureExtractor& fe, const Eigen::MatrixXd& reference_features, int n,
                        const SamplerOptions& opts, Rng& rng);

/// Classifier labels of `per_leaf` all-leaves generations per leaf.
LeafSpecificity generation_specificity(const TreeModel<float>& tree, const Denoiser<float>& den,
                                       const NoiseSchedule& sched, const FeatureExtractor& fe, int per_leaf,
                                       const SamplerOptions& opts, Rng& rng);

struct MetricsReport {
  ClusteringMetrics clustering;
  std::optional<GenerativeMetrics> generative;
  std::optional<LeafSpecificity> specificity;
  double extractor_accuracy = 0;
  std::string variant;
};

nlohmann::json to_json(const MetricsReport& r);
/// Throws ValidationError unless the report has every field with the
/// expected type and range.
void validate_report(const nlohmann::json& j);

struct AblationRow {
  std::string variant;
  std::vector<double> fid_gen;
  double mean = 0;
  double stddev = 0;
};

/// Trains one denoiser per variant and seed on the shared tree and scores
/// its generations; rows sorted ascending by mean score.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config, const TreeModel<float>& tree,
                                      const ExperimentData& data, const FeatureExtractor& fe,
                                      const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const std::string&)>& log = {});

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace treediff
