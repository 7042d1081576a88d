#include "treediff/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "treediff/data.hpp"

namespace treediff {

namespace {

// Leaf reconstructions in [0, 1] for rows that chose `leaves[r]`.
Eigen::MatrixXf decode_rows(const TreeModel<float>& tree, const LatentState<float>& state, const std::vector<int>& leaves) {
  const Index n = static_cast<Index>(leaves.size());
  Eigen::MatrixXf out(n, tree.dims.x_dim());
  std::map<int, std::vector<Index>> rows_by_leaf;
  for (Index r = 0; r < n; ++r) rows_by_leaf[leaves[static_cast<size_t>(r)]].push_back(r);
  for (const auto& [leaf, rows] : rows_by_leaf) {
    const Eigen::MatrixXf& z = state.nodes.at(leaf).z;
    Eigen::MatrixXf zl(static_cast<Index>(rows.size()), z.cols());
    for (size_t i = 0; i < rows.size(); ++i) zl.row(static_cast<Index>(i)) = z.row(rows[i]);
    const Eigen::MatrixXf rec = decode_leaf(tree, leaf, zl);
    for (size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) = rec.row(static_cast<Index>(i));
  }
  return out;
}

Eigen::MatrixXf refine(const TreeModel<float>& tree, const Denoiser<float>& den, const LatentState<float>& state,
                       const std::vector<int>& leaves, const Eigen::MatrixXf& x_T, const NoiseSchedule& sched,
                       const SamplerOptions& opts, Rng& rng) {
  const Condition<float> cond = make_condition(tree, state, leaves, den.dims);
  const Eigen::MatrixXf out =
      ddim_sample<float>(eps_function(den, cond), x_T, sched, ddim_subsequence(sched.T, opts.steps), opts.eta, rng, opts.clamped);
  return from_diffusion_range(out);
}

void check_compatible(const TreeModel<float>& tree, const Denoiser<float>* den) {
  if (den == nullptr) return;
  if (den->dims.x_dim != tree.dims.x_dim() || den->dims.latent_dim != tree.dims.latent_dim ||
      den->dims.leaf_ids != tree.topology.leaves()) {
    throw CompatibilityError("denoiser does not match the tree model");
  }
}

}  // namespace

void validate_record(const GenerationRecord& r, const TreeTopology& topo) {
  if (r.path.empty() || r.path.front() != 0) throw InvariantError("generation path must start at the root");
  if (r.path.back() != r.leaf) throw InvariantError("generation path must end at the recorded leaf");
  if (!topo.is_leaf(r.leaf)) throw InvariantError("recorded leaf is not a leaf");
  for (size_t i = 1; i < r.path.size(); ++i)
    if (topo.node(r.path[i]).parent != r.path[i - 1]) throw InvariantError("generation path breaks a parent link");
}

std::vector<GenerationRecord> generate(int n, const TreeModel<float>& tree, const Denoiser<float>* denoiser,
                                       const NoiseSchedule& sched, const SamplerOptions& opts, Rng& rng) {
  check_compatible(tree, denoiser);
  std::vector<GenerationRecord> out;
  const int chunk = std::max(1, opts.chunk);
  for (int start = 0, k = 0; start < n; start += chunk, ++k) {
    const int len = std::min(chunk, n - start);
    const std::uint64_t fragment = rng.engine()();
    Rng local(fragment);
    const auto [state, pd] = generate_prior(tree, len, local);
    std::vector<int> leaves(static_cast<size_t>(len));
    for (int r = 0; r < len; ++r)
      leaves[static_cast<size_t>(r)] = sample_leaf<float>(pd.leaves, pd.leaf_probs.row(r), local);
    const Eigen::MatrixXf recon = decode_rows(tree, state, leaves);
    Eigen::MatrixXf refined = recon;
    if (opts.refine && denoiser != nullptr) {
      const Eigen::MatrixXf x_T = local.normal_matrix<float>(len, tree.dims.x_dim());
      refined = refine(tree, *denoiser, state, leaves, x_T, sched, opts, local);
    }
    for (int r = 0; r < len; ++r) {
      GenerationRecord rec;
      rec.z_root = state.nodes.at(0).z.row(r).transpose();
      rec.leaf = leaves[static_cast<size_t>(r)];
      rec.path = tree.topology.path_to(rec.leaf);
      rec.leaf_probability = static_cast<double>(pd.leaf_probs(r, pd.leaf_column(rec.leaf)));
      rec.reconstruction = recon.row(r).transpose();
      rec.refined = refined.row(r).transpose();
      rec.variant = denoiser != nullptr && opts.refine ? denoiser->dims.variant.name() : "none";
      rec.seed_fragment = fragment;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

RefinedReconstruction reconstruct_refined(const Eigen::MatrixXf& x, const TreeModel<float>& tree,
                                          const Denoiser<float>* denoiser, const NoiseSchedule& sched,
                                          const SamplerOptions& opts, Rng& rng) {
  check_compatible(tree, denoiser);
  RefinedReconstruction out;
  out.images.resize(x.rows(), x.cols());
  out.leaf_reconstructions.resize(x.rows(), x.cols());
  const Index chunk = std::max(1, opts.chunk);
  for (Index start = 0; start < x.rows(); start += chunk) {
    const Index len = std::min(chunk, x.rows() - start);
    const auto inf = infer(tree, Eigen::MatrixXf(x.middleRows(start, len)), rng, LatentMode::Sample);
    std::vector<int> leaves(static_cast<size_t>(len));
    for (Index r = 0; r < len; ++r)
      leaves[static_cast<size_t>(r)] = sample_leaf<float>(inf.paths.leaves, inf.paths.leaf_probs.row(r), rng);
    const Eigen::MatrixXf recon = decode_rows(tree, inf.state, leaves);
    out.leaf_reconstructions.middleRows(start, len) = recon;
    if (opts.refine && denoiser != nullptr) {
      const Eigen::MatrixXf x_T = rng.normal_matrix<float>(len, x.cols());
      out.images.middleRows(start, len) = refine(tree, *denoiser, inf.state, leaves, x_T, sched, opts, rng);
    } else {
      out.images.middleRows(start, len) = recon;
    }
    out.leaves.insert(out.leaves.end(), leaves.begin(), leaves.end());
  }
  return out;
}

std::vector<GenerationRecord> generate_all_leaves(const TreeModel<float>& tree, const Denoiser<float>* denoiser,
                                                  const NoiseSchedule& sched, const SamplerOptions& opts, Rng& rng) {
  check_compatible(tree, denoiser);
  const std::uint64_t fragment = rng.engine()();
  Rng local(fragment);
  const Eigen::MatrixXf z0 = local.normal_matrix<float>(1, tree.dims.latent_dim);
  const auto [state1, pd] = generate_prior(tree, 1, local, LatentMode::Sample, &z0);
  const std::vector<int> leaves = pd.leaves;
  const Index L = static_cast<Index>(leaves.size());
  // Row r of every node embedding belongs to leaf r's chain.
  LatentState<float> state;
  for (const auto& [id, nl] : state1.nodes) {
    NodeLatent<float> rep;
    rep.z = nl.z.replicate(L, 1);
    state.nodes[id] = rep;
  }
  const Eigen::MatrixXf recon = decode_rows(tree, state, leaves);
  Eigen::MatrixXf refined = recon;
  if (opts.refine && denoiser != nullptr) {
    const Eigen::MatrixXf x_T = opts.shared_noise ? Eigen::MatrixXf(local.normal_matrix<float>(1, tree.dims.x_dim()).replicate(L, 1))
                                                  : local.normal_matrix<float>(L, tree.dims.x_dim());
    refined = refine(tree, *denoiser, state, leaves, x_T, sched, opts, local);
  }
  std::vector<GenerationRecord> out;
  for (Index r = 0; r < L; ++r) {
    GenerationRecord rec;
    rec.z_root = z0.row(0).transpose();
    rec.leaf = leaves[static_cast<size_t>(r)];
    rec.path = tree.topology.path_to(rec.leaf);
    rec.leaf_probability = static_cast<double>(pd.leaf_probs(0, r));
    rec.reconstruction = recon.row(r).transpose();
    rec.refined = refined.row(r).transpose();
    rec.variant = denoiser != nullptr && opts.refine ? denoiser->dims.variant.name() : "none";
    rec.seed_fragment = fragment;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image output.

namespace {

// 3x5 glyphs for "0123456789.", one row per 3-bit mask.
constexpr std::array<std::array<unsigned char, 5>, 11> kGlyphs = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7},
    {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}, {0, 0, 0, 0, 2},
}};
constexpr int kScale = 2;
constexpr int kGlyphW = 4 * kScale;

void draw_text(std::vector<unsigned char>& img, int stride, int x0, int y0, const std::string& text) {
  int x = x0;
  for (char ch : text) {
    int g = -1;
    if (ch >= '0' && ch <= '9') g = ch - '0';
    if (ch == '.') g = 10;
    if (g >= 0) {
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col) {
          if (!((kGlyphs[static_cast<size_t>(g)][static_cast<size_t>(row)] >> (2 - col)) & 1)) continue;
          for (int dy = 0; dy < kScale; ++dy)
            for (int dx = 0; dx < kScale; ++dx)
              img[static_cast<size_t>((y0 + row * kScale + dy) * stride + x + col * kScale + dx)] = 255;
        }
    }
    x += kGlyphW;
  }
}

void write_bytes_pgm(const std::filesystem::path& path, const std::vector<unsigned char>& img, int w, int h) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

unsigned char to_byte(float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void write_pgm(const std::filesystem::path& path, const Eigen::VectorXf& image, int height, int width) {
  if (image.size() != static_cast<Index>(height) * width) throw ShapeError("image size does not match height x width");
  std::vector<unsigned char> img(static_cast<size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) img[static_cast<size_t>(i)] = to_byte(image(i));
  write_bytes_pgm(path, img, width, height);
}

void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<Eigen::VectorXf>>& rows,
                      int height, int width, const std::vector<std::string>& captions) {
  if (rows.empty()) throw PreconditionError("image grid needs at least one row");
  size_t max_cols = 0;
  for (const auto& r : rows) max_cols = std::max(max_cols, r.size());
  size_t max_caption = 0;
  for (const auto& c : captions) max_caption = std::max(max_caption, c.size());
  const int pad = 2;
  const int caption_w = max_caption > 0 ? static_cast<int>(max_caption) * kGlyphW + 2 * pad : 0;
  const int row_h = max_caption > 0 ? std::max(height, 5 * kScale) : height;
  const int W = caption_w + static_cast<int>(max_cols) * (width + pad) + pad;
  const int H = static_cast<int>(rows.size()) * (row_h + pad) + pad;
  std::vector<unsigned char> img(static_cast<size_t>(W) * static_cast<size_t>(H), 0);
  for (size_t r = 0; r < rows.size(); ++r) {
    const int y0 = pad + static_cast<int>(r) * (row_h + pad);
    if (r < captions.size()) draw_text(img, W, pad, y0 + (row_h - 5 * kScale) / 2, captions[r]);
    for (size_t c = 0; c < rows[r].size(); ++c) {
      const Eigen::VectorXf& im = rows[r][c];
      if (im.size() != static_cast<Index>(height) * width) throw ShapeError("grid image size mismatch");
      const int x0 = caption_w + pad + static_cast<int>(c) * (width + pad);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          img[static_cast<size_t>((y0 + y) * W + x0 + x)] = to_byte(im(static_cast<Index>(y) * width + x));
    }
  }
  write_bytes_pgm(path, img, W, H);
}

nlohmann::json record_summary(const GenerationRecord& r, const std::string& image_path) {
  return {{"leaf", r.leaf},
          {"leaf_probability", r.leaf_probability},
          {"path", r.path},
          {"variant", r.variant},
          {"seed_fragment", r.seed_fragment},
          {"image", image_path}};
}

}  // namespace treediff
