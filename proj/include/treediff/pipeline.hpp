#pragma once

// Two-stage generation: tree prior -> leaf -> leaf reconstruction and
// conditioning -> diffusion refinement from pure noise.

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "treediff/diffusion.hpp"
#include "treediff/tree_model.hpp"

namespace treediff {

struct SamplerOptions {
  int steps = 20;
  double eta = 0.0;
  /// When false the leaf reconstruction is returned unrefined.
  bool refine = true;
  /// generate_all_leaves: one x_T shared by every leaf.
  bool shared_noise = true;
  int chunk = 256;
  /// When set, accumulates the number of final sample entries clamped to
  /// [-1, 1].
  std::size_t* clamped = nullptr;
};

struct GenerationRecord {
  Eigen::VectorXf z_root;
  /// Root to leaf, inclusive.
  std::vector<int> path;
  int leaf = -1;
  double leaf_probability = 0;
  /// Images in [0, 1].
  Eigen::VectorXf reconstruction;
  Eigen::VectorXf refined;
  std::string variant;
  std::uint64_t seed_fragment = 0;
};

/// Throws InvariantError unless the path runs root -> leaf through
/// parent-child links and ends at the recorded leaf.
void validate_record(const GenerationRecord& r, const TreeTopology& topo);

/// `n` samples: prior generation, leaf l ~ p(l), decode, refine.
std::vector<GenerationRecord> generate(int n, const TreeModel<float>& tree, const Denoiser<float>* denoiser,
                                       const NoiseSchedule& sched, const SamplerOptions& opts, Rng& rng);

struct RefinedReconstruction {
  Eigen::MatrixXf images;
  Eigen::MatrixXf leaf_reconstructions;
  std::vector<int> leaves;
};

/// Per row: infer, sample l ~ p(l|x), decode leaf l, refine from fresh noise
/// conditioned on that leaf. The input itself only enters through the tree.
RefinedReconstruction reconstruct_refined(const Eigen::MatrixXf& x, const TreeModel<float>& tree,
                                          const Denoiser<float>* denoiser, const NoiseSchedule& sched,
                                          const SamplerOptions& opts, Rng& rng);

/// One record per leaf, all from one root sample propagated down the tree
/// (ancestors shared, each node sampled once); leaf_probability is the
/// prior path probability under that root sample.
std::vector<GenerationRecord> generate_all_leaves(const TreeModel<float>& tree, const Denoiser<float>* denoiser,
                                                  const NoiseSchedule& sched, const SamplerOptions& opts, Rng& rng);

/// Writes rows of images (one row per entry of `rows`) as a binary PGM with
/// an optional caption strip left of each row.
void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<Eigen::VectorXf>>& rows,
                      int height, int width, const std::vector<std::string>& captions = {});

void write_pgm(const std::filesystem::path& path, const Eigen::VectorXf& image, int height, int width);

nlohmann::json record_summary(const GenerationRecord& r, const std::string& image_path);

}  // namespace treediff
