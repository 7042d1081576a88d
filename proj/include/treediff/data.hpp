#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "treediff/rng.hpp"

namespace treediff {

/// Images stored one per row, each row in (channel, row, column) order.
struct ImageBatch {
  Eigen::MatrixXf values;
  int channels = 1;
  int height = 0;
  int width = 0;
  std::optional<std::vector<int>> labels;
  int num_classes = 0;

  Eigen::Index size() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }

  /// Range [0,1], channel count and label invariants; throws ValidationError.
  void validate() const;
  ImageBatch subset(const std::vector<Eigen::Index>& rows) const;
  ImageBatch head(Eigen::Index n) const;
};

/// Reads an IDX image file (magic 0x00000803) and optional label file
/// (0x00000801). Bytes are scaled by 1/255. `max_images` > 0 truncates.
ImageBatch load_idx_dataset(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels,
                            int max_images = 0);

void write_idx_images(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, int count,
                      int rows, int cols);
void write_idx_labels(const std::filesystem::path& path, const std::vector<unsigned char>& labels);

enum class Pattern {
  HorizontalStripes,
  VerticalStripes,
  Diagonal,
  AntiDiagonal,
  Ring,
  CenterBlob,
  Checker,
  LeftHalf,
  TopHalf,
  Cross,
};

struct ClusterTemplate {
  Pattern pattern;
  float intensity = 0.9f;
};

struct SyntheticClusterSpec {
  int clusters = 4;
  int size = 16;
  /// One per cluster; filled with the first `clusters` patterns when empty.
  std::vector<ClusterTemplate> templates;
  double noise_std = 0.05;
  int samples_per_cluster = 64;
};

/// Noise-free template image for one cluster (size*size values in [0,1]).
Eigen::VectorXf render_template(const ClusterTemplate& t, int size);

/// Template images plus Gaussian pixel noise, clamped to [0,1]; rows are
/// shuffled and labelled with their cluster.
ImageBatch make_synthetic(const SyntheticClusterSpec& spec, Rng& rng);

/// x -> 2x - 1.
Eigen::MatrixXf to_diffusion_range(const Eigen::MatrixXf& x);
/// y -> (clamp(y, -1, 1) + 1) / 2. Adds the number of clamped entries to
/// `clamped` when given.
Eigen::MatrixXf from_diffusion_range(const Eigen::MatrixXf& y, std::size_t* clamped = nullptr);

/// Stratified when labels are present: each class is split with the same
/// fraction, and per-class rounding is balanced so the train side holds
/// round(fraction * N) rows.
std::pair<ImageBatch, ImageBatch> train_test_split(const ImageBatch& batch, double fraction, Rng& rng);

}  // namespace treediff
