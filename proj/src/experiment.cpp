#include "treediff/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "treediff/treevae_train.hpp"

namespace treediff {

ExperimentData load_experiment_data(const ExperimentConfig& config, const std::filesystem::path& base_dir) {
  const DatasetConfig& dc = config.dataset;
  Rng rng = Rng(config.seed).split(100);
  ImageBatch all;
  if (dc.name == "synthetic") {
    SyntheticClusterSpec spec;
    spec.clusters = dc.synthetic.clusters;
    spec.noise_std = dc.synthetic.noise_std;
    spec.samples_per_cluster = dc.synthetic.samples_per_cluster;
    spec.size = dc.resolution;
    Rng gen = rng.split(1);
    all = make_synthetic(spec, gen);
  } else if (dc.name == "idx") {
    const auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_absolute() ? path : base_dir / path;
    };
    if (dc.images.empty()) throw ValidationError("dataset.images must be set for idx data");
    std::optional<std::filesystem::path> labels;
    if (!dc.labels.empty()) labels = resolve(dc.labels);
    all = load_idx_dataset(resolve(dc.images), labels, dc.max_images);
  } else {
    throw ValidationError("dataset.name must be 'synthetic' or 'idx', got '" + dc.name + "'");
  }
  if (all.height != dc.resolution || all.width != dc.resolution || all.channels != dc.channels) {
    throw ValidationError("images are " + std::to_string(all.height) + "x" + std::to_string(all.width) +
                          " but dataset.resolution is " + std::to_string(dc.resolution));
  }
  all.validate();
  Rng split = rng.split(2);
  auto [train, test] = train_test_split(all, dc.train_fraction, split);
  return {std::move(train), std::move(test)};
}

std::vector<std::string> default_ablation_variants() {
  return {"recon", "recon+leaf", "recon+embed", "recon+leaf+embed", "leaf+embed", "recon+path", "path", "unconditional"};
}

ClusteringMetrics clustering_metrics(const TreeModel<float>& tree, const ImageBatch& data) {
  if (!data.labels) throw PreconditionError("clustering metrics need labelled data");
  const auto a = leaf_assignments(tree, data.values);
  return {cluster_accuracy(*data.labels, a), nmi(*data.labels, a), static_cast<int>(tree.topology.leaves().size())};
}

std::map<int, double> prior_leaf_mass(const TreeModel<float>& tree, int n, Rng& rng) {
  const auto [state, pd] = generate_prior(tree, n, rng);
  std::map<int, double> out;
  for (size_t k = 0; k < pd.leaves.size(); ++k)
    out[pd.leaves[k]] = static_cast<double>(pd.leaf_probs.col(static_cast<Index>(k)).mean());
  return out;
}

namespace {

Eigen::MatrixXd feats(const FeatureExtractor& fe, const Eigen::MatrixXf& x) { return fe.features(x).cast<double>(); }

}  // namespace

GenerativeMetrics generative_metrics(const TreeModel<float>& tree, const Denoiser<float>& den, const NoiseSchedule& sched,
                                     const FeatureExtractor& fe, const Eigen::MatrixXf& reference, int n_gen,
                                     const SamplerOptions& opts, Rng& rng) {
  const Eigen::MatrixXd ref = feats(fe, reference);
  GenerativeMetrics m;
  Rng rec_rng = rng.split(1);
  const RefinedReconstruction rec = reconstruct_refined(reference, tree, &den, sched, opts, rec_rng);
  m.fid_rec_tree = frechet_distance(ref, feats(fe, rec.leaf_reconstructions));
  m.fid_rec_refined = frechet_distance(ref, feats(fe, rec.images));
  Rng gen_rng = rng.split(2);
  const auto records = generate(n_gen, tree, &den, sched, opts, gen_rng);
  Eigen::MatrixXf tree_gen(n_gen, reference.cols()), refined_gen(n_gen, reference.cols());
  for (int i = 0; i < n_gen; ++i) {
    tree_gen.row(i) = records[static_cast<size_t>(i)].reconstruction.transpose();
    refined_gen.row(i) = records[static_cast<size_t>(i)].refined.transpose();
  }
  m.fid_gen_tree = frechet_distance(ref, feats(fe, tree_gen));
  m.fid_gen_refined = frechet_distance(ref, feats(fe, refined_gen));
  return m;
}

double generation_score(const TreeModel<float>& tree, const Denoiser<float>& den, const NoiseSchedule& sched,
                        const FeatureExtractor& fe, const Eigen::MatrixXd& reference_features, int n,
                        const SamplerOptions& opts, Rng& rng) {
  const auto recs = generate(n, tree, &den, sched, opts, rng);
  Eigen::MatrixXf gen(static_cast<Index>(recs.size()), tree.dims.x_dim());
  for (size_t i = 0; i < recs.size(); ++i) gen.row(static_cast<Index>(i)) = recs[i].refined.transpose();
  return frechet_distance(reference_features, feats(fe, gen));
}

LeafSpecificity generation_specificity(const TreeModel<float>& tree, const Denoiser<float>& den,
                                       const NoiseSchedule& sched, const FeatureExtractor& fe, int per_leaf,
                                       const SamplerOptions& opts, Rng& rng) {
  std::map<int, std::vector<int>> predicted;
  const auto leaves = tree.topology.leaves();
  Eigen::MatrixXf images(static_cast<Index>(per_leaf) * static_cast<Index>(leaves.size()), tree.dims.x_dim());
  Index row = 0;
  for (int i = 0; i < per_leaf; ++i)
    for (const auto& r : generate_all_leaves(tree, &den, sched, opts, rng)) images.row(row++) = r.refined.transpose();
  const std::vector<int> labels = fe.predict(images);
  row = 0;
  for (int i = 0; i < per_leaf; ++i)
    for (int leaf : leaves) predicted[leaf].push_back(labels[static_cast<size_t>(row++)]);
  Rng mass_rng = rng.split(3);
  return leaf_specificity(predicted, prior_leaf_mass(tree, 10000, mass_rng), fe.num_classes());
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"acc", r.clustering.acc},
                      {"nmi", r.clustering.nmi},
                      {"leaves", r.clustering.leaves},
                      {"extractor_accuracy", r.extractor_accuracy},
                      {"variant", r.variant}};
  if (r.generative) {
    j["fid_rec_tree"] = r.generative->fid_rec_tree;
    j["fid_rec_refined"] = r.generative->fid_rec_refined;
    j["fid_gen_tree"] = r.generative->fid_gen_tree;
    j["fid_gen_refined"] = r.generative->fid_gen_refined;
  }
  if (r.specificity) {
    nlohmann::json leaves = nlohmann::json::object();
    for (int leaf : r.specificity->included) {
      const Eigen::VectorXd& h = r.specificity->histograms.at(leaf);
      leaves[std::to_string(leaf)] = {{"entropy", r.specificity->entropies.at(leaf)},
                                      {"histogram", std::vector<double>(h.data(), h.data() + h.size())}};
    }
    j["mean_entropy"] = r.specificity->mean_entropy;
    j["leaf_histograms"] = leaves;
    j["excluded_leaves"] = r.specificity->excluded;
  }
  return j;
}

void validate_report(const nlohmann::json& j) {
  const auto unit = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_number()) throw ValidationError(std::string("report field ") + key + " missing");
    const double v = j.at(key).get<double>();
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("report field ") + key + " outside [0, 1]");
  };
  unit("acc");
  unit("nmi");
  unit("extractor_accuracy");
  if (!j.contains("leaves") || !j.at("leaves").is_number_integer() || j.at("leaves").get<int>() < 1)
    throw ValidationError("report field leaves missing");
  if (!j.contains("variant") || !j.at("variant").is_string()) throw ValidationError("report field variant missing");
  for (const char* key : {"fid_rec_tree", "fid_rec_refined", "fid_gen_tree", "fid_gen_refined"}) {
    if (!j.contains(key)) continue;
    if (!j.at(key).is_number() || !(j.at(key).get<double>() >= 0.0))
      throw ValidationError(std::string("report field ") + key + " must be a nonnegative number");
  }
  if (j.contains("mean_entropy")) {
    if (!j.at("mean_entropy").is_number() || j.at("mean_entropy").get<double>() < 0.0)
      throw ValidationError("report field mean_entropy must be nonnegative");
    for (const auto& [leaf, v] : j.at("leaf_histograms").items()) {
      const auto h = v.at("histogram").get<std::vector<double>>();
      const double sum = std::accumulate(h.begin(), h.end(), 0.0);
      if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("histogram of leaf " + leaf + " does not sum to 1");
      if (v.at("entropy").get<double>() > std::log(static_cast<double>(h.size())) + 1e-9)
        throw ValidationError("entropy of leaf " + leaf + " exceeds ln K");
    }
  }
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config, const TreeModel<float>& tree,
                                      const ExperimentData& data, const FeatureExtractor& fe,
                                      const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const std::string&)>& log) {
  if (variants.empty() || seeds.empty()) throw PreconditionError("ablation needs at least one variant and one seed");
  const NoiseSchedule sched = schedule_from_config(config.diffusion);
  SamplerOptions opts;
  opts.steps = config.eval.ddim_steps;
  opts.eta = config.eval.eta;
  const Eigen::MatrixXd ref = fe.features(data.test.values).cast<double>();
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = ConditioningVariant::parse(v).name();
    for (std::uint64_t seed : seeds) {
      ExperimentConfig c = config;
      c.diffusion.variant = row.variant;
      Rng rng(seed);
      Rng train_rng = rng.split(1);
      const auto trained = train_diffusion(c, tree, data.train.values, train_rng);
      Rng gen_rng = rng.split(2);
      const double score = generation_score(tree, trained.ema, sched, fe, ref, config.eval.fid_samples, opts, gen_rng);
      row.fid_gen.push_back(score);
      if (log) log(row.variant + " seed " + std::to_string(seed) + ": " + std::to_string(score));
    }
    const double n = static_cast<double>(row.fid_gen.size());
    row.mean = std::accumulate(row.fid_gen.begin(), row.fid_gen.end(), 0.0) / n;
    double ss = 0;
    for (double s : row.fid_gen) ss += (s - row.mean) * (s - row.mean);
    row.stddev = row.fid_gen.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) { return a.mean < b.mean; });
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "variant,mean_fid_gen,std_fid_gen,seeds\n" << std::setprecision(9);
  for (const auto& r : rows) {
    out << r.variant << ',' << r.mean << ',' << r.stddev << ',';
    for (size_t i = 0; i < r.fid_gen.size(); ++i) out << (i ? ";" : "") << r.fid_gen[i];
    out << '\n';
  }
}

}  // namespace treediff
