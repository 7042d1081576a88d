#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "support.hpp"
#include "treediff/data.hpp"
#include "treediff/eval.hpp"
#include "treediff/treevae_train.hpp"

using namespace treediff;

namespace {

TreeDims tiny_dims() {
  TreeDims d;
  d.height = d.width = 2;
  d.latent_dim = 2;
  d.bottom_up_dim = 2;
  d.hidden_width = 3;
  d.node_width = 2;
  d.max_depth = 2;
  d.max_leaves = 3;
  return d;
}

/// Root, an internal left child and three leaves.
TreeModel<double> tiny_tree(std::uint64_t seed) {
  Rng rng(seed);
  auto m = TreeModel<double>::init_root_tree(tiny_dims(), rng);
  grow(m, {{1, 1.0}}, rng);
  m.set_trainable([](const std::string&) { return true; });
  // Sharper routers so the path weights differ from one half.
  m.visit([](const std::string& name, ad::Parameter<double>& p) {
    if (name.find("router") != std::string::npos) p.value *= 20.0;
  });
  return m;
}

Matrix<double> tiny_batch(Index n, Rng& rng) {
  return (rng.normal_matrix<double>(n, 4).array() * 0.3 + 0.5).max(0.0).min(1.0).matrix();
}

ExperimentConfig synthetic_config(int clusters, int max_leaves) {
  ExperimentConfig c = parse_config("");
  c.dataset.resolution = 16;
  c.dataset.synthetic.clusters = clusters;
  c.tree.max_leaves = max_leaves;
  c.treevae.batch_size = 16;
  return c;
}

ImageBatch synthetic_data(int clusters, int per, std::uint64_t seed) {
  SyntheticClusterSpec s;
  s.clusters = clusters;
  s.samples_per_cluster = per;
  Rng rng(seed);
  return make_synthetic(s, rng);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("treediff_treevae_" + name);
}

}  // namespace

TEST_CASE("kl terms vanish when every posterior equals its prior") {
  auto m = tiny_tree(1);
  for (auto& [id, node] : m.nodes) {
    node.posterior.var.weight.value.setZero();
    node.posterior.var.bias.value.setConstant(1e12);
    if (id == 0) {
      // The root posterior is the head itself; pin it to N(0, I).
      node.posterior.mu.weight.value.setZero();
      node.posterior.mu.bias.value.setZero();
      node.posterior.var.bias.value.setConstant(std::log(std::expm1(1.0 - m.dims.sigma_floor)));
    }
    if (!m.topology.is_leaf(id)) {
      node.forced_q = 0.35;
      node.forced_p = 0.35;
    }
  }
  Rng rng(2);
  const ElboTerms e = elbo(m, tiny_batch(16, rng), rng);
  CHECK(std::abs(e.kl_root) < 1e-6);
  CHECK(std::abs(e.kl_nodes) < 1e-6);
  CHECK(std::abs(e.kl_decisions) < 1e-6);
}

TEST_CASE("bernoulli reconstruction with logit zero is minus d ln 2") {
  auto m = tiny_tree(3);
  for (int leaf : m.topology.leaves()) {
    auto& last = m.nodes.at(leaf).decoder->layers.back();
    last.weight.value.setZero();
    last.bias.value.setZero();
  }
  Rng rng(4);
  const ElboTerms e = elbo(m, tiny_batch(10, rng), rng);
  CHECK(e.rec == doctest::Approx(-4.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("every elbo component matches central differences on a tiny model") {
  auto m = tiny_tree(5);
  INFO("parameters: " << m.parameter_count());
  REQUIRE(m.parameter_count() <= 500);
  Rng data_rng(6);
  const Matrix<double> x = tiny_batch(6, data_rng);
  for (int term = 0; term < 5; ++term) {
    const auto loss = [&](ad::Tape<double>& t) {
      Rng rng(7);
      const ElboGraph<double> g = elbo_graph(t, m, t.constant(x), rng);
      switch (term) {
        case 0: return g.rec;
        case 1: return g.kl_root;
        case 2: return g.kl_nodes;
        case 3: return g.kl_decisions;
        default: return g.loss;
      }
    };
    const auto rep = testing::check_gradients(m, loss);
    INFO("term " << term << ": " << rep.worst);
    CHECK(rep.checked == m.parameter_count());
    CHECK(rep.max_rel_error < 1e-3);
  }
}

TEST_CASE("kl terms are nonnegative on random models") {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    const auto m = tiny_tree(seed);
    Rng rng(seed);
    const ElboTerms e = elbo(m, tiny_batch(32, rng), rng);
    CHECK(e.kl_root >= -1e-6);
    CHECK(e.kl_nodes >= -1e-6);
    CHECK(e.kl_decisions >= -1e-6);
    CHECK(e.total == doctest::Approx(e.rec - e.kl_root - e.kl_nodes - e.kl_decisions));
  }
}

TEST_CASE("non-finite terms are reported by name") {
  ElboTerms e;
  e.kl_nodes = std::nan("");
  try {
    check_finite(e);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    CHECK(std::string(err.what()).find("kl_nodes") != std::string::npos);
  }
}

TEST_CASE("exact enumeration equals the mean of single-path estimates") {
  const auto m = tiny_tree(21);
  Rng rng(22);
  const Matrix<double> x = tiny_batch(100, rng);
  const ElboTerms exact = elbo(m, x, rng, LatentMode::Mean);
  std::vector<double> means;
  for (int rep = 0; rep < 100; ++rep) means.push_back(elbo_single_path(m, x, rng, LatentMode::Mean).total);
  double mu = 0, var = 0;
  for (double v : means) mu += v / means.size();
  for (double v : means) var += (v - mu) * (v - mu) / (means.size() - 1);
  const double se = std::sqrt(var / means.size());
  INFO("exact " << exact.total << " mc " << mu << " se " << se);
  CHECK(se > 0);
  CHECK(std::abs(exact.total - mu) < 3 * se);
}

TEST_CASE("assignment counts split evenly under half routers and sum to N") {
  Rng rng(23);
  auto m = TreeModel<double>::init_root_tree(tiny_dims(), rng);
  m.nodes.at(0).forced_q = 0.5;
  const Matrix<double> x = tiny_batch(40, rng);
  const auto counts = assignment_counts(m, x, 16);
  CHECK(counts.at(1) == doctest::Approx(20.0));
  CHECK(counts.at(2) == doctest::Approx(20.0));
  const auto t = tiny_tree(24);
  const Matrix<double> y = tiny_batch(333, rng);
  const auto c2 = assignment_counts(t, y, 50);
  double total = 0;
  for (const auto& [leaf, v] : c2) total += v;
  CHECK(std::abs(total - 333.0) < 1e-3);
  // Brute force: one row at a time.
  std::map<int, double> brute;
  for (Index r = 0; r < y.rows(); ++r) {
    const auto inf = infer(t, Matrix<double>(y.row(r)), rng, LatentMode::Mean);
    for (size_t k = 0; k < inf.paths.leaves.size(); ++k) brute[inf.paths.leaves[k]] += inf.paths.leaf_probs(0, static_cast<Index>(k));
  }
  for (const auto& [leaf, v] : c2) CHECK(v == doctest::Approx(brute.at(leaf)).epsilon(1e-9));
}

TEST_CASE("leaf assignments pick the most probable leaf") {
  auto m = tiny_tree(25);
  m.nodes.at(0).forced_q = 0.2;
  Rng rng(26);
  for (int leaf : leaf_assignments(m, tiny_batch(20, rng))) CHECK(leaf == 2);
}

TEST_CASE("a phase with nothing trainable is a precondition error") {
  auto m = tiny_tree(27);
  Rng rng(28);
  const PhaseSpec none{"none", 1, [](const std::string&) { return false; }};
  CHECK_THROWS_AS(train_phase(m, tiny_batch(8, rng), none, TreeVaeConfig{}, rng), PreconditionError);
}

TEST_CASE("train phase leaves frozen parameters bit identical") {
  auto m = tiny_tree(29).cast<float>();
  Rng rng(30);
  const Matrix<float> x = tiny_batch(64, rng).cast<float>();
  const auto before = m.parameter_values();
  const auto trainable = [](const std::string& name) { return name.rfind("node3.", 0) == 0; };
  TreeVaeConfig cfg;
  cfg.batch_size = 16;
  train_phase(m, x, PhaseSpec{"subtree", 3, trainable}, cfg, rng);
  const auto after = m.parameter_values();
  bool moved = false;
  for (const auto& [name, value] : before) {
    if (trainable(name)) {
      moved = moved || value != after.at(name);
    } else {
      INFO(name);
      CHECK(value == after.at(name));
    }
  }
  CHECK(moved);
}

TEST_CASE("non-finite data aborts the phase and restores parameters") {
  auto m = tiny_tree(31).cast<float>();
  Rng rng(32);
  Matrix<float> x = tiny_batch(8, rng).cast<float>();
  x(3, 1) = std::numeric_limits<float>::quiet_NaN();
  const auto before = m.parameter_values();
  CHECK_THROWS_AS(train_phase(m, x, PhaseSpec{"all", 2, [](const std::string&) { return true; }}, TreeVaeConfig{}, rng),
                  NumericError);
  CHECK(m.parameter_values() == before);
}

TEST_CASE("five epochs on two synthetic clusters mostly improve the elbo") {
  const ImageBatch data = synthetic_data(2, 64, 33);
  const ExperimentConfig c = synthetic_config(2, 2);
  Rng rng(34);
  auto m = TreeModel<float>::init_root_tree(TreeDims::from_config(c), rng);
  const auto m0 = m;
  TreeVaeConfig cfg = c.treevae;
  cfg.batch_size = 32;
  const auto h = train_phase(m, data.values, PhaseSpec{"initial", 5, [](const std::string&) { return true; }}, cfg, rng);
  REQUIRE(h.size() == 5);
  int improved = 0;
  for (size_t i = 1; i < h.size(); ++i) improved += h[i].terms.total > h[i - 1].terms.total;
  improved += h[0].terms.total > elbo(m0, data.values, rng).total;
  CHECK(improved >= 3);
  for (const auto& r : h) {
    CHECK(r.terms.kl_root >= -1e-6);
    CHECK(r.terms.kl_nodes >= -1e-6);
    CHECK(r.terms.kl_decisions >= -1e-6);
  }
}

TEST_CASE("schedule with max leaves two never grows") {
  const ImageBatch data = synthetic_data(2, 32, 35);
  ExperimentConfig c = synthetic_config(2, 2);
  c.treevae.initial_epochs = 2;
  c.treevae.finetune_epochs = 1;
  Rng rng(36);
  const ScheduleResult r = run_full_schedule(c, data.values, rng);
  CHECK(r.growth.empty());
  CHECK(r.model.topology.leaves().size() <= 2);
  std::set<std::string> phases;
  for (const auto& e : r.history) phases.insert(e.phase);
  CHECK(phases.count("smalltree") == 0);
  CHECK(phases.count("intermediate") == 0);
}

TEST_CASE("schedule clusters four synthetic patterns and logs valid splits") {
  const ImageBatch data = synthetic_data(4, 64, 37);
  ExperimentConfig c = synthetic_config(4, 4);
  Rng rng(0);
  const ScheduleResult r = run_full_schedule(c, data.values, rng);
  const size_t leaves = r.model.topology.leaves().size();
  CHECK(leaves >= 3);
  CHECK(leaves <= 4);
  CHECK(r.growth.size() == 2);
  std::set<int> known{1, 2};
  for (const auto& g : r.growth) {
    CHECK(known.count(g.split_leaf) == 1);
    CHECK(g.counts.count(g.split_leaf) == 1);
    known.erase(g.split_leaf);
    known.insert(g.left);
    known.insert(g.right);
  }
  CHECK_NOTHROW(r.model.topology.validate(4));
  const auto a = leaf_assignments(r.model, data.values);
  CHECK(cluster_accuracy(*data.labels, a) >= 0.9);
  CHECK(nmi(*data.labels, a) >= 0.75);

  const auto csv = temp_path("loss.csv");
  const auto jsonl = temp_path("growth.jsonl");
  write_loss_csv(csv, r.history);
  write_growth_log(jsonl, r.growth);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,phase,rec,kl_root,kl_nodes,kl_decisions,total");
  size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == r.history.size());
  std::ifstream gin(jsonl);
  size_t events = 0;
  for (std::string line; std::getline(gin, line); ++events) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("split_leaf").get<int>() == r.growth[events].split_leaf);
  }
  CHECK(events == r.growth.size());
  std::filesystem::remove(csv);
  std::filesystem::remove(jsonl);
}
