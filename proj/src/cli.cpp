#include "treediff/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "treediff/experiment.hpp"
#include "treediff/treevae_train.hpp"

namespace treediff {

namespace {

namespace fs = std::filesystem;

struct RunExists : Error {
  using Error::Error;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string run_id = "default";
  std::vector<std::string> sets;
  bool force = false;
  std::string runs_dir;
};

struct Context {
  ExperimentConfig config;
  fs::path base_dir;
  fs::path run_dir;
  fs::path stage_dir;
  std::string command;
  std::ostream& out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

ExperimentConfig load(const Globals& g, fs::path& base_dir) {
  ExperimentConfig c;
  if (g.config_path.empty()) {
    c = parse_config("", g.sets);
    base_dir = fs::current_path();
  } else {
    c = load_config(g.config_path, g.sets);
    base_dir = fs::absolute(g.config_path).parent_path();
  }
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

fs::path runs_root(const Globals& g) {
  if (!g.runs_dir.empty()) return g.runs_dir;
  if (const char* env = std::getenv("TREEDIFF_RUNS_DIR"); env != nullptr && *env != '\0') return env;
  return "runs";
}

void prepare_stage(Context& ctx, const Globals& g) {
  ctx.run_dir = runs_root(g) / g.run_id;
  ctx.stage_dir = ctx.run_dir / ctx.command;
  if (fs::exists(ctx.stage_dir) && !fs::is_empty(ctx.stage_dir)) {
    if (!g.force) throw RunExists("run '" + g.run_id + "' already has " + ctx.command + " output in " + ctx.stage_dir.string() + "; pass --force to overwrite");
    fs::remove_all(ctx.stage_dir);
  }
  fs::create_directories(ctx.stage_dir);
}

/// Records this stage in <run>/manifest.json.
void record_stage(const Context& ctx, const std::map<std::string, fs::path>& artifacts, const nlohmann::json& extra = {}) {
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, path] : artifacts) {
    if (!fs::exists(path)) throw InvariantError("manifest references missing artifact " + path.string());
    files[name] = fs::relative(path, ctx.run_dir).generic_string();
  }
  const fs::path manifest = ctx.run_dir / "manifest.json";
  nlohmann::json j;
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) j = nlohmann::json::object();
  }
  j["run_id"] = ctx.run_dir.filename().string();
  nlohmann::json snapshot;
  to_json(snapshot, ctx.config);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  nlohmann::json stage = {{"config", snapshot},
                          {"tree_config_hash", hex_hash(tree_config_hash(ctx.config))},
                          {"diffusion_config_hash", hex_hash(diffusion_config_hash(ctx.config))},
                          {"artifacts", files},
                          {"seconds", seconds}};
  if (!extra.is_null()) stage["details"] = extra;
  j["stages"][ctx.command] = stage;
  std::ofstream out(manifest);
  out << j.dump(2) << '\n';
}

void write_config_snapshot(const Context& ctx) {
  nlohmann::json j;
  to_json(j, ctx.config);
  std::ofstream(ctx.stage_dir / "config.json") << j.dump(2) << '\n';
}

TreeModel<float> load_tree(const Context& ctx, const std::string& path, std::uint64_t* hash = nullptr) {
  const Checkpoint c = load_checkpoint(path, tree_config_hash(ctx.config));
  if (hash != nullptr) *hash = parameter_hash(c);
  return tree_from_checkpoint<float>(c);
}

std::pair<Denoiser<float>, NoiseSchedule> load_denoiser(const std::string& path, std::uint64_t tree_hash) {
  const Checkpoint c = load_checkpoint(path);
  return {denoiser_from_checkpoint(c, tree_hash), schedule_from_checkpoint(c)};
}

FeatureExtractor extractor_for(const Context& ctx, const ExperimentData& data, double* accuracy) {
  Rng rng = seed_all(ctx.config.seed).split(300);
  FeatureExtractor fe = train_feature_extractor(data.train, data.test, ctx.config.eval, rng, accuracy);
  save_checkpoint(ctx.stage_dir / "extractor.npz", fe.to_checkpoint(tree_config_hash(ctx.config)));
  return fe;
}

// ---------------------------------------------------------------------------

void cmd_train_tree(Context& ctx, std::optional<int> epochs) {
  ExperimentConfig& c = ctx.config;
  if (epochs) {
    c.treevae.initial_epochs = c.treevae.smalltree_epochs = c.treevae.intermediate_epochs = c.treevae.finetune_epochs = *epochs;
  }
  write_config_snapshot(ctx);
  const ExperimentData data = load_experiment_data(c, ctx.base_dir);
  Rng rng = seed_all(c.seed);
  ScheduleResult res;
  if (epochs && *epochs == 0) {
    Rng init_rng = rng.split(1);
    res.model = TreeModel<float>::init_root_tree(TreeDims::from_config(c), init_rng);
  } else {
    res = run_full_schedule(c, data.train.values, rng, [&](const std::string& m) { ctx.out << m << std::endl; });
  }
  const Checkpoint ckpt = tree_to_checkpoint(res.model, tree_config_hash(c));
  const fs::path tree_path = ctx.stage_dir / "tree.npz";
  save_checkpoint(tree_path, ckpt);
  write_loss_csv(ctx.stage_dir / "loss.csv", res.history);
  write_growth_log(ctx.stage_dir / "growth.jsonl", res.growth);
  std::ofstream(ctx.stage_dir / "tree.txt") << res.model.topology.dump();
  nlohmann::json details = {{"parameter_hash", hex_hash(parameter_hash(ckpt))},
                            {"leaves", res.model.topology.leaves()},
                            {"pruned", res.pruned}};
  if (data.test.labels) {
    const ClusteringMetrics m = clustering_metrics(res.model, data.test);
    details["test_acc"] = m.acc;
    details["test_nmi"] = m.nmi;
    ctx.out << "test ACC " << m.acc << " NMI " << m.nmi << " leaves " << m.leaves << '\n';
  }
  record_stage(ctx,
               {{"checkpoint", tree_path},
                {"loss", ctx.stage_dir / "loss.csv"},
                {"growth", ctx.stage_dir / "growth.jsonl"},
                {"config", ctx.stage_dir / "config.json"}},
               details);
  ctx.out << "checkpoint " << tree_path.string() << " hash " << hex_hash(parameter_hash(ckpt)) << '\n';
}

void cmd_train_diffusion(Context& ctx, const std::string& tree_path, const std::string& variant) {
  ExperimentConfig& c = ctx.config;
  if (!variant.empty()) c.diffusion.variant = ConditioningVariant::parse(variant).name();
  ConditioningVariant::parse(c.diffusion.variant);
  std::uint64_t tree_hash = 0;
  const TreeModel<float> tree = load_tree(ctx, tree_path, &tree_hash);
  write_config_snapshot(ctx);
  const ExperimentData data = load_experiment_data(c, ctx.base_dir);
  Rng rng = seed_all(c.seed).split(200);
  const fs::path loss_path = ctx.stage_dir / "diffusion_loss.csv";
  std::ofstream loss(loss_path);
  loss << "step,loss\n" << std::setprecision(9);
  const int every = std::max(1, c.diffusion.train_steps / 20);
  const auto res = train_diffusion(c, tree, data.train.values, rng, [&](int step, double v) {
    loss << step << ',' << v << '\n';
    if (step % every == 0) ctx.out << "step " << step << " loss " << v << std::endl;
  });
  loss.close();
  const Checkpoint ckpt = denoiser_to_checkpoint(res.ema, diffusion_config_hash(c), tree_hash, c.diffusion);
  const fs::path path = ctx.stage_dir / "denoiser.npz";
  save_checkpoint(path, ckpt);
  record_stage(ctx, {{"checkpoint", path}, {"loss", loss_path}, {"config", ctx.stage_dir / "config.json"}},
               {{"variant", c.diffusion.variant},
                {"tree_hash", hex_hash(tree_hash)},
                {"parameter_hash", hex_hash(parameter_hash(ckpt))}});
  ctx.out << "checkpoint " << path.string() << " variant " << c.diffusion.variant << '\n';
}

struct SampleArgs {
  std::string tree, denoiser;
  int n = 16;
  std::optional<int> steps;
  std::optional<double> eta;
  bool all_leaves = false;
  bool independent_noise = false;
};

std::string caption(double p) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << p;
  return os.str();
}

void cmd_sample(Context& ctx, const SampleArgs& a) {
  const ExperimentConfig& c = ctx.config;
  if (a.n < 0) throw ValidationError("--n must be nonnegative");
  std::uint64_t tree_hash = 0;
  const TreeModel<float> tree = load_tree(ctx, a.tree, &tree_hash);
  std::optional<Denoiser<float>> den;
  NoiseSchedule sched = schedule_from_config(c.diffusion);
  if (!a.denoiser.empty()) std::tie(den, sched) = load_denoiser(a.denoiser, tree_hash);
  SamplerOptions opts;
  opts.steps = a.steps.value_or(c.eval.ddim_steps);
  opts.eta = a.eta.value_or(c.eval.eta);
  opts.shared_noise = !a.independent_noise;
  opts.refine = den.has_value();
  std::size_t clamped = 0;
  opts.clamped = &clamped;
  write_config_snapshot(ctx);
  Rng rng = seed_all(c.seed).split(400);
  const int H = tree.dims.height, W = tree.dims.width;
  const fs::path img_dir = ctx.stage_dir / "images";
  fs::create_directories(img_dir);
  std::ofstream manifest(ctx.stage_dir / "manifest.jsonl");
  const auto emit = [&](const GenerationRecord& r, size_t index) {
    validate_record(r, tree.topology);
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << index << ".pgm";
    write_pgm(img_dir / name.str(), r.refined, H, W);
    manifest << record_summary(r, "images/" + name.str()).dump() << '\n';
  };
  std::map<std::string, fs::path> artifacts = {{"manifest", ctx.stage_dir / "manifest.jsonl"}};
  const Denoiser<float>* dp = den ? &*den : nullptr;
  if (a.all_leaves) {
    const auto leaves = tree.topology.leaves();
    std::vector<std::vector<Eigen::VectorXf>> rows(leaves.size());
    std::vector<double> prob(leaves.size(), 0.0);
    size_t index = 0;
    for (int s = 0; s < std::max(1, a.n); ++s) {
      const auto recs = generate_all_leaves(tree, dp, sched, opts, rng);
      for (size_t k = 0; k < recs.size(); ++k) {
        emit(recs[k], index++);
        rows[k].push_back(recs[k].refined);
        prob[k] += recs[k].leaf_probability / std::max(1, a.n);
      }
    }
    std::vector<std::string> captions;
    for (double p : prob) captions.push_back(caption(p));
    write_image_grid(ctx.stage_dir / "all_leaves.pgm", rows, H, W, captions);
    artifacts["grid"] = ctx.stage_dir / "all_leaves.pgm";
  } else {
    const auto recs = generate(a.n, tree, dp, sched, opts, rng);
    std::vector<std::vector<Eigen::VectorXf>> rows;
    for (size_t i = 0; i < recs.size(); ++i) {
      emit(recs[i], i);
      if (i % 10 == 0) rows.emplace_back();
      rows.back().push_back(recs[i].refined);
    }
    if (!rows.empty()) {
      write_image_grid(ctx.stage_dir / "grid.pgm", rows, H, W);
      artifacts["grid"] = ctx.stage_dir / "grid.pgm";
    }
  }
  manifest.close();
  record_stage(ctx, artifacts,
               {{"refined", opts.refine}, {"steps", opts.steps}, {"eta", opts.eta}, {"clamped_entries", clamped}});
  if (clamped > 0) ctx.out << "warning: " << clamped << " sample entries clamped to [-1, 1]\n";
  ctx.out << "wrote samples to " << ctx.stage_dir.string() << '\n';
}

void cmd_evaluate(Context& ctx, const std::string& tree_path, const std::string& den_path, std::optional<int> steps) {
  const ExperimentConfig& c = ctx.config;
  std::uint64_t tree_hash = 0;
  const TreeModel<float> tree = load_tree(ctx, tree_path, &tree_hash);
  std::optional<Denoiser<float>> den;
  NoiseSchedule sched = schedule_from_config(c.diffusion);
  if (!den_path.empty()) std::tie(den, sched) = load_denoiser(den_path, tree_hash);
  write_config_snapshot(ctx);
  const ExperimentData data = load_experiment_data(c, ctx.base_dir);
  MetricsReport report;
  report.clustering = clustering_metrics(tree, data.test);
  const FeatureExtractor fe = extractor_for(ctx, data, &report.extractor_accuracy);
  std::map<std::string, fs::path> artifacts = {{"metrics", ctx.stage_dir / "metrics.json"},
                                               {"extractor", ctx.stage_dir / "extractor.npz"}};
  report.variant = den ? den->dims.variant.name() : "none";
  if (den) {
    SamplerOptions opts;
    opts.steps = steps.value_or(c.eval.ddim_steps);
    opts.eta = c.eval.eta;
    Rng rng = seed_all(c.seed).split(500);
    report.generative = generative_metrics(tree, *den, sched, fe, data.test.values, c.eval.fid_samples, opts, rng);
    Rng spec_rng = seed_all(c.seed).split(501);
    report.specificity = generation_specificity(tree, *den, sched, fe, c.eval.leaf_samples, opts, spec_rng);
    write_entropy_csv(ctx.stage_dir / "entropy.csv", *report.specificity);
    artifacts["entropy"] = ctx.stage_dir / "entropy.csv";
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> chart =
        histogram_chart(*report.specificity);
    write_pgm(ctx.stage_dir / "leaf_histograms.pgm", Eigen::Map<const Eigen::VectorXf>(chart.data(), chart.size()),
              static_cast<int>(chart.rows()), static_cast<int>(chart.cols()));
    artifacts["histograms"] = ctx.stage_dir / "leaf_histograms.pgm";
  }
  const nlohmann::json j = to_json(report);
  validate_report(j);
  std::ofstream(ctx.stage_dir / "metrics.json") << j.dump(2) << '\n';
  record_stage(ctx, artifacts);
  ctx.out << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(tok);
  return out;
}

void cmd_ablate(Context& ctx, const std::string& tree_path, const std::string& variants, const std::string& seeds) {
  const ExperimentConfig& c = ctx.config;
  std::vector<std::string> vs = variants.empty() ? default_ablation_variants() : split_list(variants);
  for (const auto& v : vs) ConditioningVariant::parse(v);
  bool has_unconditional = false;
  for (const auto& v : vs) has_unconditional = has_unconditional || ConditioningVariant::parse(v).name() == "unconditional";
  if (!has_unconditional) vs.push_back("unconditional");
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) {
    try {
      seed_list.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("--seeds expects comma-separated integers, got '" + s + "'");
    }
  }
  if (seed_list.empty()) seed_list.push_back(c.seed);
  const TreeModel<float> tree = load_tree(ctx, tree_path);
  write_config_snapshot(ctx);
  const ExperimentData data = load_experiment_data(c, ctx.base_dir);
  double acc = 0;
  const FeatureExtractor fe = extractor_for(ctx, data, &acc);
  const auto rows = run_ablation(c, tree, data, fe, vs, seed_list, [&](const std::string& m) { ctx.out << m << std::endl; });
  write_ablation_csv(ctx.stage_dir / "ablation.csv", rows);
  record_stage(ctx, {{"table", ctx.stage_dir / "ablation.csv"}, {"extractor", ctx.stage_dir / "extractor.npz"}});
  for (const auto& r : rows) ctx.out << r.variant << ' ' << r.mean << " +- " << r.stddev << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"TreeVAE plus conditional diffusion refiner"};
  app.name("treediff");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Overrides the config seed");
  app.add_option("--run-id", g.run_id, "Run directory name");
  app.add_option("--set", g.sets, "Dotted key=value override (repeatable)");
  app.add_flag("--force", g.force, "Overwrite existing output of this command");
  app.add_option("--runs-dir", g.runs_dir, "Root of run directories");

  std::optional<int> epochs;
  auto* tt = app.add_subcommand("train-tree", "Grow, prune and finetune the tree model");
  tt->add_option("--epochs", epochs, "Epochs for every phase; 0 saves the initialized model")->check(CLI::NonNegativeNumber);

  std::string tree_path, den_path, variant;
  auto* td = app.add_subcommand("train-diffusion", "Train the conditional denoiser on a tree checkpoint");
  td->add_option("--tree", tree_path, "Tree checkpoint")->required()->check(CLI::ExistingFile);
  td->add_option("--variant", variant, "Conditioning: unconditional or '+'-joined recon, leaf, embed, path");

  SampleArgs sa;
  auto* sm = app.add_subcommand("sample", "Generate images");
  sm->add_option("--tree", sa.tree, "Tree checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--denoiser", sa.denoiser, "Denoiser checkpoint (omit for unrefined samples)")->check(CLI::ExistingFile);
  sm->add_option("--n", sa.n, "Number of samples (root samples with --all-leaves)");
  sm->add_option("--steps", sa.steps, "DDIM steps");
  sm->add_option("--eta", sa.eta, "DDIM eta");
  sm->add_flag("--all-leaves", sa.all_leaves, "One image per leaf from a shared root sample");
  sm->add_flag("--independent-noise", sa.independent_noise, "Fresh x_T per leaf with --all-leaves");

  std::optional<int> eval_steps;
  std::string ev_tree, ev_den;
  auto* ev = app.add_subcommand("evaluate", "Clustering and Frechet-proxy metrics");
  ev->add_option("--tree", ev_tree, "Tree checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--denoiser", ev_den, "Denoiser checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--steps", eval_steps, "DDIM steps");

  std::string ab_tree, ab_variants, ab_seeds;
  auto* ab = app.add_subcommand("ablate", "Train and score every conditioning variant");
  ab->add_option("--tree", ab_tree, "Tree checkpoint")->required()->check(CLI::ExistingFile);
  ab->add_option("--variants", ab_variants, "Comma-separated variants (default: all ablation rows)");
  ab->add_option("--seeds", ab_seeds, "Comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    fs::path base_dir;
    Context ctx{load(g, base_dir), base_dir, {}, {}, app.get_subcommands().front()->get_name(), out};
    prepare_stage(ctx, g);
    if (tt->parsed()) cmd_train_tree(ctx, epochs);
    if (td->parsed()) cmd_train_diffusion(ctx, tree_path, variant);
    if (sm->parsed()) cmd_sample(ctx, sa);
    if (ev->parsed()) cmd_evaluate(ctx, ev_tree, ev_den, eval_steps);
    if (ab->parsed()) cmd_ablate(ctx, ab_tree, ab_variants, ab_seeds);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const RunExists& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}

}  // namespace treediff
