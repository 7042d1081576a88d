#pragma once

// Clustering and generative metrics.

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "treediff/checkpoint.hpp"
#include "treediff/config.hpp"
#include "treediff/data.hpp"
#include "treediff/nn.hpp"
#include "treediff/rng.hpp"

namespace treediff {

/// Minimum-cost assignment of rows to distinct columns (rectangular costs
/// allowed); returns the column of each row, -1 for rows left unmatched
/// when rows outnumber columns.
std::vector<int> hungarian(const Eigen::MatrixXd& cost);

/// Fraction of samples matched under the best injective cluster -> class
/// mapping. Throws PreconditionError on empty or mismatched input.
double cluster_accuracy(const std::vector<int>& labels, const std::vector<int>& assignments);

/// Mutual information normalized by the arithmetic mean of the two
/// entropies (natural log). Degenerate partitions: 1 if identical, else 0.
double nmi(const std::vector<int>& labels, const std::vector<int>& assignments);

struct FeatureMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance; needs at least two rows.
FeatureMoments feature_moments(const Eigen::MatrixXd& feats);

/// Symmetric square root of a positive semi-definite matrix; eigenvalues in
/// (-1e-6, 0) are clamped to zero, anything more negative is rejected.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

/// ||mu_A - mu_B||^2 + Tr(S_A + S_B - 2 (S_A^1/2 S_B S_A^1/2)^1/2).
double frechet_distance(const FeatureMoments& a, const FeatureMoments& b);
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Shannon entropy in nats of a normalized histogram.
double entropy(const Eigen::VectorXd& hist);

/// Small residual MLP classifier whose penultimate activations serve as the
/// features of the Frechet distance.
class FeatureExtractor {
 public:
  static constexpr int kFeatureWidth = 64;

  FeatureExtractor() = default;
  FeatureExtractor(int input_dim, int num_classes, Rng& rng);

  int input_dim() const { return input_dim_; }
  int num_classes() const { return num_classes_; }

  /// N x kFeatureWidth.
  Eigen::MatrixXf features(const Eigen::MatrixXf& x) const;
  Eigen::MatrixXf logits(const Eigen::MatrixXf& x) const;
  std::vector<int> predict(const Eigen::MatrixXf& x) const;
  double accuracy(const Eigen::MatrixXf& x, const std::vector<int>& labels) const;

  /// Cross-entropy training with Adam over shuffled minibatches; returns the
  /// mean loss per epoch.
  std::vector<double> fit(const Eigen::MatrixXf& x, const std::vector<int>& labels, int epochs, Rng& rng,
                          int batch_size = 64, double lr = 1e-3);

  Checkpoint to_checkpoint(std::uint64_t config_hash) const;
  static FeatureExtractor from_checkpoint(const Checkpoint& c);

  template <typename F>
  void visit(F&& f) {
    stem.visit("stem", f);
    for (size_t i = 0; i < stages.size(); ++i) stages[i].visit("stage." + std::to_string(i), f);
    penultimate.visit("penultimate", f);
    head.visit("head", f);
  }

 private:
  ad::Var<float> forward(ad::Tape<float>& t, const ad::Var<float>& x, ad::Var<float>* feats) const;

  int input_dim_ = 0;
  int num_classes_ = 0;
  mutable nn::Dense<float> stem;
  mutable std::vector<nn::ResidualBlock<float>> stages;
  mutable nn::Dense<float> penultimate;
  mutable nn::Dense<float> head;
};

/// Classifier test accuracy below which feature-based metrics are refused.
inline constexpr double kMinExtractorAccuracy = 0.9;

/// Trains on `train`, checks accuracy on `test`; throws PreconditionError
/// when it stays below kMinExtractorAccuracy.
FeatureExtractor train_feature_extractor(const ImageBatch& train, const ImageBatch& test, const EvalConfig& cfg,
                                         Rng& rng, double* test_accuracy = nullptr);

struct LeafSpecificity {
  /// Normalized class histogram per included leaf.
  std::map<int, Eigen::VectorXd> histograms;
  std::map<int, double> entropies;
  std::vector<int> included;
  std::vector<int> excluded;
  double mean_entropy = 0;
};

/// Histograms of classifier labels for each leaf's generations. Leaves with
/// prior mass below `min_mass` (or no generations) are excluded; throws
/// PreconditionError if none remain.
LeafSpecificity leaf_specificity(const std::map<int, std::vector<int>>& predicted, const std::map<int, double>& prior_mass,
                                 int num_classes, double min_mass = 0.01);

void write_entropy_csv(const std::filesystem::path& path, const LeafSpecificity& spec);

/// Bar charts of the included leaves' histograms stacked top to bottom,
/// dark bars on white, values in [0, 1]. Each panel is `bar_height` pixels
/// tall plus a 4-pixel gap; bars are `bar_width` wide with 1-pixel spacing.
Eigen::MatrixXf histogram_chart(const LeafSpecificity& spec, int bar_width = 6, int bar_height = 40);

}  // namespace treediff
