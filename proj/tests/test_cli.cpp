#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "treediff/cli.hpp"

using namespace treediff;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

const std::vector<std::string> kTiny = {
    "dataset.name=synthetic",          "dataset.resolution=8",
    "dataset.synthetic.clusters=2",    "dataset.synthetic.samples_per_cluster=24",
    "dataset.synthetic.noise_std=0.05", "tree.max_depth=2",
    "tree.max_leaves=2",               "tree.hidden_width=16",
    "tree.node_width=8",               "tree.latent_channels=1",
    "tree.bottom_up_channels=2",       "treevae.batch_size=16",
    "diffusion.timesteps=20",          "diffusion.train_steps=3",
    "diffusion.warmup_steps=1",        "diffusion.batch_size=8",
    "diffusion.base_channels=4",       "diffusion.channel_multipliers=[1]",
    "eval.classifier_epochs=6",        "eval.fid_samples=16",
    "eval.leaf_samples=3",             "eval.ddim_steps=4"};

/// Fresh runs directory per test case.
struct Runs {
  fs::path root;
  explicit Runs(const std::string& name) : root(fs::temp_directory_path() / ("treediff_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Runs() { fs::remove_all(root); }

  Result run(const std::vector<std::string>& command, const std::vector<std::string>& extra_sets = {},
             const std::string& run_id = "r", bool force = false) const {
    std::vector<std::string> args = {"treediff", "--runs-dir", root.string(), "--run-id", run_id};
    for (const auto& s : kTiny) args.insert(args.end(), {"--set", s});
    for (const auto& s : extra_sets) args.insert(args.end(), {"--set", s});
    if (force) args.push_back("--force");
    args.insert(args.end(), command.begin(), command.end());
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Result r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
  }

  fs::path stage(const std::string& run_id, const std::string& command) const { return root / run_id / command; }
};

std::string hash_from_output(const std::string& out) {
  const auto pos = out.rfind(" hash ");
  return pos == std::string::npos ? "" : out.substr(pos + 6, 16);
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

/// Trains a one-epoch tree and a three-step denoiser under run `id`.
void train_both(const Runs& runs, const std::string& id) {
  const Result t = runs.run({"train-tree", "--epochs", "1"}, {}, id);
  REQUIRE_MESSAGE(t.code == kExitOk, t.err);
  const Result d = runs.run({"train-diffusion", "--tree", (runs.stage(id, "train-tree") / "tree.npz").string()}, {}, id);
  REQUIRE_MESSAGE(d.code == kExitOk, d.err);
}

}  // namespace

TEST_CASE("train-tree with zero epochs saves the initialized model deterministically") {
  Runs runs("init");
  const Result a = runs.run({"train-tree", "--epochs", "0"}, {}, "a");
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  const Result b = runs.run({"train-tree", "--epochs", "0"}, {}, "b");
  REQUIRE(b.code == kExitOk);
  CHECK(hash_from_output(a.out).size() == 16);
  CHECK(hash_from_output(a.out) == hash_from_output(b.out));
  const Result c = runs.run({"--seed", "5", "train-tree", "--epochs", "0"}, {}, "c");
  REQUIRE(c.code == kExitOk);
  CHECK(hash_from_output(c.out) != hash_from_output(a.out));
  for (const char* f : {"tree.npz", "loss.csv", "growth.jsonl", "tree.txt", "config.json"})
    CHECK(fs::exists(runs.stage("a", "train-tree") / f));
  const auto manifest = read_json(runs.root / "a" / "manifest.json");
  CHECK(manifest.at("stages").at("train-tree").at("details").at("parameter_hash") == hash_from_output(a.out));
}

TEST_CASE("training twice with the same seed gives the same checkpoint hash") {
  Runs runs("determinism");
  const Result a = runs.run({"train-tree", "--epochs", "1"}, {}, "a");
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  const Result b = runs.run({"train-tree", "--epochs", "1"}, {}, "b");
  REQUIRE(b.code == kExitOk);
  CHECK(hash_from_output(a.out) == hash_from_output(b.out));
  CHECK(a.out.find("test ACC") != std::string::npos);
}

TEST_CASE("rerunning a stage needs --force and everything stays under the run directory") {
  Runs runs("force");
  REQUIRE(runs.run({"train-tree", "--epochs", "0"}).code == kExitOk);
  const Result again = runs.run({"train-tree", "--epochs", "0"});
  CHECK(again.code == kExitUsage);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(runs.run({"train-tree", "--epochs", "0"}, {}, "r", true).code == kExitOk);
  for (const auto& entry : fs::directory_iterator(runs.root)) CHECK(entry.path().filename() == "r");
}

TEST_CASE("usage and validation failures map to distinct exit codes") {
  Runs runs("errors");
  CHECK(runs.run({"no-such-command"}).code == kExitUsage);
  CHECK(runs.run({"train-tree", "--epochs", "-1"}).code == kExitUsage);
  CHECK(runs.run({"train-tree"}, {"diffusion.timesteps"}).code == kExitUsage);
  CHECK(runs.run({"train-tree"}, {"diffusion.loss_type=cubic"}).code == kExitValidation);
  REQUIRE(runs.run({"train-tree", "--epochs", "0"}).code == kExitOk);
  const std::string tree = (runs.stage("r", "train-tree") / "tree.npz").string();
  const Result bad_variant = runs.run({"train-diffusion", "--tree", tree, "--variant", "recon+colour"});
  CHECK(bad_variant.code == kExitUsage);
  // A tree trained under a different architecture is incompatible.
  const Result mismatch = runs.run({"train-diffusion", "--tree", tree}, {"tree.hidden_width=24"}, "other");
  CHECK(mismatch.code == kExitValidation);
  CHECK(!mismatch.err.empty());
}

TEST_CASE("a denoiser refuses a tree it was not trained on") {
  Runs runs("compat");
  train_both(runs, "a");
  REQUIRE(runs.run({"--seed", "9", "train-tree", "--epochs", "0"}, {}, "b").code == kExitOk);
  const Result r = runs.run({"sample", "--tree", (runs.stage("b", "train-tree") / "tree.npz").string(), "--denoiser",
                             (runs.stage("a", "train-diffusion") / "denoiser.npz").string(), "--n", "2"},
                            {}, "b");
  CHECK(r.code == kExitValidation);
}

TEST_CASE("sample writes one image per record and a reproducible manifest") {
  Runs runs("sample");
  train_both(runs, "r");
  const std::string tree = (runs.stage("r", "train-tree") / "tree.npz").string();
  const std::string den = (runs.stage("r", "train-diffusion") / "denoiser.npz").string();
  const Result a = runs.run({"sample", "--tree", tree, "--denoiser", den, "--n", "5"});
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  const fs::path stage = runs.stage("r", "sample");
  size_t images = 0;
  for (const auto& e : fs::directory_iterator(stage / "images")) images += e.path().extension() == ".pgm";
  CHECK(images == 5);
  CHECK(count_lines(stage / "manifest.jsonl") == 5);
  CHECK(fs::exists(stage / "grid.pgm"));
  std::ifstream in(stage / "manifest.jsonl");
  std::string first;
  std::getline(in, first);
  const auto rec = nlohmann::json::parse(first);
  CHECK(rec.contains("leaf"));
  CHECK(rec.at("image") == "images/000000.pgm");

  const Result b = runs.run({"sample", "--tree", tree, "--denoiser", den, "--n", "5"}, {}, "r2");
  REQUIRE(b.code == kExitOk);
  std::ifstream ma(stage / "manifest.jsonl"), mb(runs.stage("r2", "sample") / "manifest.jsonl");
  std::stringstream sa, sb;
  sa << ma.rdbuf();
  sb << mb.rdbuf();
  CHECK(sa.str() == sb.str());

  const Result zero = runs.run({"sample", "--tree", tree, "--n", "0"}, {}, "r3");
  CHECK(zero.code == kExitOk);
  CHECK(count_lines(runs.stage("r3", "sample") / "manifest.jsonl") == 0);
}

TEST_CASE("sample --all-leaves emits one record per leaf and a captioned grid") {
  Runs runs("leaves");
  train_both(runs, "r");
  const std::string tree = (runs.stage("r", "train-tree") / "tree.npz").string();
  const Result a = runs.run({"sample", "--tree", tree, "--denoiser", (runs.stage("r", "train-diffusion") / "denoiser.npz").string(),
                             "--n", "2", "--all-leaves"});
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  std::ifstream txt(runs.stage("r", "train-tree") / "tree.txt");
  size_t leaves = 0;
  for (std::string line; std::getline(txt, line);) leaves += line.find("leaf") != std::string::npos;
  REQUIRE(leaves >= 1);
  CHECK(count_lines(runs.stage("r", "sample") / "manifest.jsonl") == 2 * leaves);
  CHECK(fs::exists(runs.stage("r", "sample") / "all_leaves.pgm"));
}

TEST_CASE("evaluate writes a schema-valid deterministic report") {
  Runs runs("evaluate");
  train_both(runs, "r");
  const std::string tree = (runs.stage("r", "train-tree") / "tree.npz").string();
  const std::string den = (runs.stage("r", "train-diffusion") / "denoiser.npz").string();
  const Result a = runs.run({"evaluate", "--tree", tree, "--denoiser", den});
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  const auto j = read_json(runs.stage("r", "evaluate") / "metrics.json");
  CHECK(j.at("acc").get<double>() >= 0.0);
  CHECK(j.at("acc").get<double>() <= 1.0);
  CHECK(j.at("nmi").get<double>() >= 0.0);
  CHECK(j.at("variant") == "recon+path");
  for (const char* k : {"fid_rec_tree", "fid_rec_refined", "fid_gen_tree", "fid_gen_refined", "mean_entropy"})
    CHECK(j.contains(k));
  CHECK(fs::exists(runs.stage("r", "evaluate") / "entropy.csv"));
  CHECK(fs::exists(runs.stage("r", "evaluate") / "leaf_histograms.pgm"));
  const Result b = runs.run({"evaluate", "--tree", tree, "--denoiser", den}, {}, "r", true);
  REQUIRE(b.code == kExitOk);
  CHECK(read_json(runs.stage("r", "evaluate") / "metrics.json") == j);

  const Result tree_only = runs.run({"evaluate", "--tree", tree}, {}, "t");
  REQUIRE(tree_only.code == kExitOk);
  const auto k = read_json(runs.stage("t", "evaluate") / "metrics.json");
  CHECK(k.at("variant") == "none");
  CHECK(!k.contains("fid_gen_refined"));
}

TEST_CASE("ablate writes one sorted row per variant including the unconditional baseline") {
  Runs runs("ablate");
  REQUIRE(runs.run({"train-tree", "--epochs", "1"}).code == kExitOk);
  const std::string tree = (runs.stage("r", "train-tree") / "tree.npz").string();
  const Result a = runs.run({"ablate", "--tree", tree, "--variants", "recon,path", "--seeds", "1,2"});
  REQUIRE_MESSAGE(a.code == kExitOk, a.err);
  std::ifstream in(runs.stage("r", "ablate") / "ablation.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "variant,mean_fid_gen,std_fid_gen,seeds");
  std::vector<std::string> names;
  std::vector<double> means;
  for (std::string line; std::getline(in, line);) {
    std::stringstream ss(line);
    std::string name, mean;
    std::getline(ss, name, ',');
    std::getline(ss, mean, ',');
    names.push_back(name);
    means.push_back(std::stod(mean));
  }
  CHECK(names.size() == 3);
  CHECK(std::find(names.begin(), names.end(), "unconditional") != names.end());
  CHECK(std::is_sorted(means.begin(), means.end()));
  CHECK(runs.run({"ablate", "--tree", tree, "--seeds", "x"}, {}, "s").code == kExitUsage);
}
