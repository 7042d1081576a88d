#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "treediff/checkpoint.hpp"
#include "treediff/pipeline.hpp"
#include "treediff/treevae_train.hpp"

using namespace treediff;

namespace {

TreeDims small_dims() {
  TreeDims d;
  d.height = d.width = 4;
  d.latent_dim = 3;
  d.bottom_up_dim = 4;
  d.hidden_width = 8;
  d.node_width = 4;
  d.max_depth = 3;
  d.max_leaves = 4;
  return d;
}

/// Root, internal node 1 and leaves 2, 3, 4.
TreeModel<float> small_tree(std::uint64_t seed) {
  Rng rng(seed);
  auto m = TreeModel<float>::init_root_tree(small_dims(), rng);
  grow(m, {{1, 1.0}}, rng);
  m.set_trainable([](const std::string&) { return true; });
  m.visit([](const std::string& name, ad::Parameter<float>& p) {
    if (name.find("router") != std::string::npos) p.value *= 5.0f;
  });
  return m;
}

ExperimentConfig small_config() {
  ExperimentConfig c = parse_config("");
  c.diffusion.timesteps = 40;
  c.diffusion.base_channels = 4;
  c.diffusion.channel_multipliers = {1, 2};
  c.diffusion.dropout = 0.0;
  return c;
}

Denoiser<float> small_denoiser(const TreeModel<float>& tree, const std::string& variant, std::uint64_t seed) {
  Rng rng(seed);
  Denoiser<float> d(denoiser_dims(small_config(), tree, ConditioningVariant::parse(variant)), rng);
  d.head.weight.value = rng.normal_matrix<float>(d.head.weight.value.rows(), d.head.weight.value.cols()) * 0.3f;
  return d;
}

SamplerOptions opts(int steps = 5) {
  SamplerOptions o;
  o.steps = steps;
  o.chunk = 7;
  return o;
}

std::uint64_t tree_hash(const TreeModel<float>& m) { return parameter_hash(tree_to_checkpoint(m, 0)); }

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("treediff_pipeline_" + name);
}

}  // namespace

TEST_CASE("zero generations give an empty list") {
  const auto tree = small_tree(1);
  const auto den = small_denoiser(tree, "recon+path", 2);
  Rng rng(3);
  CHECK(generate(0, tree, &den, schedule_from_config(small_config().diffusion), opts(), rng).empty());
}

TEST_CASE("generation is bit identical under a fixed seed with eta zero") {
  const auto tree = small_tree(4);
  const auto den = small_denoiser(tree, "recon+path", 5);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  Rng a(6), b(6);
  const auto x = generate(20, tree, &den, s, opts(), a);
  const auto y = generate(20, tree, &den, s, opts(), b);
  REQUIRE(x.size() == 20);
  for (size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].leaf == y[i].leaf);
    CHECK(x[i].path == y[i].path);
    CHECK(x[i].z_root == y[i].z_root);
    CHECK(x[i].refined == y[i].refined);
    CHECK(x[i].seed_fragment == y[i].seed_fragment);
  }
}

TEST_CASE("generated records are valid and refined images lie in the unit range") {
  const auto tree = small_tree(7);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  for (const std::string variant : {"recon", "leaf", "embed", "path", "recon+path", "unconditional"}) {
    INFO(variant);
    const auto den = small_denoiser(tree, variant, 8);
    Rng rng(9);
    for (const auto& r : generate(15, tree, &den, s, opts(), rng)) {
      CHECK_NOTHROW(validate_record(r, tree.topology));
      CHECK(r.variant == variant);
      CHECK(r.refined.size() == 16);
      CHECK(r.refined.minCoeff() >= 0.0f);
      CHECK(r.refined.maxCoeff() <= 1.0f);
      CHECK(r.reconstruction.minCoeff() >= 0.0f);
      CHECK(r.reconstruction.maxCoeff() <= 1.0f);
      CHECK(r.leaf_probability > 0.0);
    }
  }
}

TEST_CASE("leaf frequencies follow the mean prior leaf probabilities") {
  const auto tree = small_tree(10);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  SamplerOptions o = opts();
  o.refine = false;
  o.chunk = 1000;
  Rng rng(11);
  const auto recs = generate(10000, tree, nullptr, s, o, rng);
  std::map<int, double> freq;
  for (const auto& r : recs) freq[r.leaf] += 1.0 / 10000.0;
  Rng prior_rng(12);
  const auto [state, pd] = generate_prior(tree, 20000, prior_rng);
  const Eigen::RowVectorXf mean = pd.leaf_probs.colwise().mean();
  for (size_t k = 0; k < pd.leaves.size(); ++k) {
    INFO("leaf " << pd.leaves[k] << " freq " << freq[pd.leaves[k]] << " prior " << mean(static_cast<Index>(k)));
    CHECK(std::abs(freq[pd.leaves[k]] - mean(static_cast<Index>(k))) < 0.02);
  }
}

TEST_CASE("all-leaves generation shares one root sample and normalized probabilities") {
  const auto tree = small_tree(13);
  const auto den = small_denoiser(tree, "recon+path", 14);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  for (bool shared : {true, false}) {
    SamplerOptions o = opts();
    o.shared_noise = shared;
    Rng rng(15);
    const auto recs = generate_all_leaves(tree, &den, s, o, rng);
    REQUIRE(recs.size() == tree.topology.leaves().size());
    double total = 0;
    for (size_t i = 0; i < recs.size(); ++i) {
      CHECK_NOTHROW(validate_record(recs[i], tree.topology));
      CHECK(recs[i].leaf == tree.topology.leaves()[i]);
      CHECK(recs[i].z_root == recs[0].z_root);
      CHECK(recs[i].refined.minCoeff() >= 0.0f);
      CHECK(recs[i].refined.maxCoeff() <= 1.0f);
      total += recs[i].leaf_probability;
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("with forced routers the most probable leaf is the one generate samples") {
  auto tree = small_tree(16);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  SamplerOptions o = opts();
  o.refine = false;
  for (const auto& [root_left, inner_left] : std::vector<std::pair<double, double>>{{1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}}) {
    tree.nodes.at(0).forced_p = root_left;
    tree.nodes.at(1).forced_p = inner_left;
    Rng rng(17);
    const auto all = generate_all_leaves(tree, nullptr, s, o, rng);
    const auto best = std::max_element(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.leaf_probability < b.leaf_probability;
    });
    for (const auto& r : generate(50, tree, nullptr, s, o, rng)) CHECK(r.leaf == best->leaf);
  }
}

TEST_CASE("pass-through mode returns the leaf reconstruction unchanged") {
  const auto tree = small_tree(18);
  const auto den = small_denoiser(tree, "recon+path", 19);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  Rng data_rng(20);
  const Eigen::MatrixXf x = (data_rng.normal_matrix<float>(30, 16).array() * 0.3f + 0.5f).max(0.0f).min(1.0f).matrix();
  SamplerOptions o = opts();
  o.refine = false;
  Rng rng(21);
  const auto off = reconstruct_refined(x, tree, &den, s, o, rng);
  CHECK(off.images == off.leaf_reconstructions);
  CHECK(off.leaves.size() == 30);
  const auto none = reconstruct_refined(x, tree, nullptr, s, opts(), rng);
  CHECK(none.images == none.leaf_reconstructions);
  const auto on = reconstruct_refined(x, tree, &den, s, opts(), rng);
  CHECK(on.images != on.leaf_reconstructions);
  CHECK(on.images.minCoeff() >= 0.0f);
  CHECK(on.images.maxCoeff() <= 1.0f);
  const auto leaves = tree.topology.leaves();
  for (int l : on.leaves) CHECK(std::find(leaves.begin(), leaves.end(), l) != leaves.end());
}

TEST_CASE("diffusion training and sampling leave the tree and its assignments untouched") {
  const auto tree = small_tree(22);
  Rng data_rng(23);
  const Eigen::MatrixXf x = (data_rng.normal_matrix<float>(40, 16).array() * 0.3f + 0.5f).max(0.0f).min(1.0f).matrix();
  const std::uint64_t hash = tree_hash(tree);
  const auto assignments = leaf_assignments(tree, x);
  ExperimentConfig cfg = small_config();
  cfg.diffusion.train_steps = 10;
  cfg.diffusion.batch_size = 8;
  Rng rng(24);
  const auto trained = train_diffusion(cfg, tree, x, rng);
  const NoiseSchedule s = schedule_from_config(cfg.diffusion);
  generate(10, tree, &trained.ema, s, opts(), rng);
  generate_all_leaves(tree, &trained.ema, s, opts(), rng);
  reconstruct_refined(x, tree, &trained.ema, s, opts(), rng);
  CHECK(tree_hash(tree) == hash);
  CHECK(leaf_assignments(tree, x) == assignments);
}

TEST_CASE("a denoiser built for another tree is rejected") {
  const auto tree = small_tree(25);
  Rng rng(26);
  const auto other = TreeModel<float>::init_root_tree(small_dims(), rng);
  const auto den = small_denoiser(other, "recon", 27);
  const NoiseSchedule s = schedule_from_config(small_config().diffusion);
  CHECK_THROWS_AS(generate(3, tree, &den, s, opts(), rng), CompatibilityError);
}

TEST_CASE("record validation catches broken paths") {
  const auto tree = small_tree(28);
  GenerationRecord r;
  r.leaf = 3;
  r.path = {0, 1, 3};
  CHECK_NOTHROW(validate_record(r, tree.topology));
  r.path = {1, 3};
  CHECK_THROWS_AS(validate_record(r, tree.topology), InvariantError);
  r.path = {0, 2, 3};
  CHECK_THROWS_AS(validate_record(r, tree.topology), InvariantError);
  r.path = {0, 1, 4};
  CHECK_THROWS_AS(validate_record(r, tree.topology), InvariantError);
  r.leaf = 1;
  r.path = {0, 1};
  CHECK_THROWS_AS(validate_record(r, tree.topology), InvariantError);
}

TEST_CASE("image grids and manifests are written with the expected layout") {
  const auto path = temp_path("grid.pgm");
  const Eigen::VectorXf img = Eigen::VectorXf::LinSpaced(16, 0.0f, 1.0f);
  write_image_grid(path, {{img, img, img}, {img}}, 4, 4, {"0.25", "0.75"});
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  CHECK(magic == "P5");
  CHECK(h == 2 * (10 + 2) + 2);
  CHECK(w > 3 * (4 + 2));
  CHECK(maxval == 255);
  in.get();
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.size() == static_cast<size_t>(w * h));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_image_grid(path, {{img}}, 3, 3), ShapeError);
  CHECK_THROWS_AS(write_pgm(path, img, 3, 5), ShapeError);

  GenerationRecord r;
  r.leaf = 4;
  r.path = {0, 1, 4};
  r.leaf_probability = 0.5;
  r.variant = "recon+path";
  const auto j = record_summary(r, "images/000.pgm");
  CHECK(j.at("leaf") == 4);
  CHECK(j.at("path") == nlohmann::json::array({0, 1, 4}));
  CHECK(j.at("image") == "images/000.pgm");
}
