#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "treediff/checkpoint.hpp"
#include "treediff/diffusion.hpp"

using namespace treediff;

namespace {

// Regression constants: prod_t (1 - beta_t) over linspace(beta_1, beta_T, T),
// computed once in float64 by direct product.
constexpr double kAlphaBarT1000 = 4.035829765375676e-05;  // T=1000, 1e-4 .. 0.02
constexpr double kAlphaBarT200 = 3.0318371672319075e-05;  // T=200, 5e-4 .. 0.1

struct Scalar {
  ad::Parameter<float> p;
  template <typename F>
  void visit(F&& f) {
    f("p", p);
  }
};

DenoiserDims tiny_dims(const std::string& variant) {
  DenoiserDims d;
  d.x_dim = 2;
  d.height = 1;
  d.width_px = 2;
  d.latent_dim = 2;
  d.path_levels = 2;
  d.leaf_ids = {1, 2};
  d.base_channels = 2;
  d.channel_multipliers = {1};
  d.res_blocks = 1;
  d.dropout = 0.0;
  d.variant = ConditioningVariant::parse(variant);
  return d;
}

DenoiserDims small_dims(const std::string& variant) {
  DenoiserDims d;
  d.x_dim = 6;
  d.height = 2;
  d.width_px = 3;
  d.latent_dim = 3;
  d.path_levels = 3;
  d.leaf_ids = {3, 4, 2};
  d.base_channels = 4;
  d.channel_multipliers = {1, 2};
  d.dropout = 0.0;
  d.variant = ConditioningVariant::parse(variant);
  return d;
}

template <typename S>
void randomize_head(Denoiser<S>& d, Rng& rng) {
  d.head.weight.value = rng.normal_matrix<S>(d.head.weight.value.rows(), d.head.weight.value.cols());
  d.gate_x.weight.value = rng.normal_matrix<S>(d.gate_x.weight.value.rows(), d.gate_x.weight.value.cols());
  if (d.gate_recon)
    d.gate_recon->weight.value = rng.normal_matrix<S>(d.gate_recon->weight.value.rows(), d.gate_recon->weight.value.cols());
  d.local_out.weight.value = rng.normal_matrix<S>(d.local_out.weight.value.rows(), d.local_out.weight.value.cols());
}

/// Rows tied to leaves 3, 4, 2, 3 with paths of depth 1 and 2.
Condition<float> small_condition(const DenoiserDims& d, Rng& rng) {
  const Index n = 4;
  Condition<float> c;
  c.recon = rng.normal_matrix<float>(n, d.x_dim).cwiseMax(-1.0f).cwiseMin(1.0f);
  c.leaf_slot = {0, 1, 2, 0};
  c.leaf_z = rng.normal_matrix<float>(n, d.latent_dim);
  for (int h = 0; h < d.path_levels; ++h) {
    c.path_z.push_back(rng.normal_matrix<float>(n, d.latent_dim));
    c.path_mask.push_back(Eigen::MatrixXf::Ones(n, 1));
  }
  c.path_mask[2](2, 0) = 0.0f;
  c.path_z[2].row(2).setZero();
  return c;
}

Matrix<double> toy_eps(const Matrix<double>& x, int t) { return 0.3 * x.array().sin().matrix() + Matrix<double>::Constant(x.rows(), x.cols(), 0.01 * t); }

}  // namespace

TEST_CASE("linear schedule tables and regression constants") {
  const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-14));
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-14));
  CHECK(s.alpha_bar(1000) == doctest::Approx(kAlphaBarT1000).epsilon(1e-9));
  CHECK(make_linear_schedule(200, 5e-4, 0.1).alpha_bar(200) == doctest::Approx(kAlphaBarT200).epsilon(1e-9));
  CHECK(s.beta_tilde(1) == 0.0);
  CHECK(s.alpha_bar(0) == 1.0);
  for (int t = 1; t <= s.T; ++t) {
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(s.beta_tilde(t) <= s.beta(t));
    if (t > 1) CHECK(s.beta(t) > s.beta(t - 1));
    if (t > 1) CHECK(s.beta_tilde(t) > 0.0);
  }
}

TEST_CASE("schedule range violations are rejected") {
  CHECK_THROWS_AS(make_linear_schedule(100, 0.0, 0.0), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(100, 0.02, 1e-4), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(100, 1e-4, 1.0), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(1, 1e-4, 0.02), ValidationError);
  const NoiseSchedule s = make_linear_schedule(10, 1e-4, 0.02);
  const Eigen::MatrixXf x = Eigen::MatrixXf::Zero(1, 2);
  CHECK_THROWS_AS(q_sample(x, 0, x, s), PreconditionError);
  CHECK_THROWS_AS(q_sample(x, 11, x, s), PreconditionError);
}

TEST_CASE("q_sample with zero noise scales x0 exactly") {
  const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(1);
  const Matrix<double> x0 = rng.normal_matrix<double>(3, 5).cwiseMax(-1.0).cwiseMin(1.0);
  for (int t : {1, 17, 500, 1000}) {
    const Matrix<double> xt = q_sample(x0, t, Matrix<double>::Zero(3, 5).eval(), s);
    CHECK((xt - std::sqrt(s.alpha_bar(t)) * x0).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("q_sample variance from zero data matches one minus alpha bar") {
  const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(2);
  const Index n = 10000;
  for (int t : {10, 250, 900}) {
    const Matrix<double> xt = q_sample(Matrix<double>::Zero(n, 1).eval(), t, rng.normal_matrix<double>(n, 1), s);
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / static_cast<double>(n - 1);
    INFO("t " << t << " var " << var);
    CHECK(std::abs(var / (1.0 - s.alpha_bar(t)) - 1.0) < 0.05);
  }
}

TEST_CASE("iterated forward chain agrees with the closed form within three sigma") {
  const NoiseSchedule s = make_linear_schedule(200, 5e-4, 0.1);
  Rng rng(3);
  const Index n = 10000;
  const double x0 = 0.7;
  for (int target : {1, 20, 120}) {
    Matrix<double> x = Matrix<double>::Constant(n, 1, x0);
    for (int t = 1; t <= target; ++t) x = q_step(x, t, rng.normal_matrix<double>(n, 1), s);
    const double mu = std::sqrt(s.alpha_bar(target)) * x0;
    const double var = 1.0 - s.alpha_bar(target);
    const double m = x.mean();
    const double v = (x.array() - m).square().sum() / static_cast<double>(n - 1);
    INFO("t " << target << " mean " << m << " vs " << mu << ", var " << v << " vs " << var);
    CHECK(std::abs(m - mu) < 3.0 * std::sqrt(var / n));
    CHECK(std::abs(v - var) < 3.0 * var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("posterior mean from the recovered x0 equals the epsilon form mean") {
  const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(4);
  double worst = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T));
    const Eigen::MatrixXf x0 = (rng.normal_matrix<float>(4, 8) * 0.5f).cwiseMax(-1.0f).cwiseMin(1.0f);
    const Eigen::MatrixXf eps = rng.normal_matrix<float>(4, 8);
    const Eigen::MatrixXf xt = q_sample(x0, t, eps, s);
    const Gaussian<float> post = forward_posterior(xt, predict_x0(xt, eps, t, s), t, s);
    const Gaussian<float> model = ddpm_moments(xt, eps, t, s);
    worst = std::max(worst, static_cast<double>((post.mean - model.mean).cwiseAbs().maxCoeff()));
    if (t > 1) CHECK(post.sigma == doctest::Approx(model.sigma).epsilon(1e-12));
  }
  INFO("max abs error " << worst);
  CHECK(worst < 1e-5);
}

TEST_CASE("forward posterior coefficients match their symbolic sum") {
  const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T));
    long double ab = 1, ab_prev = 1;
    for (int k = 1; k <= t; ++k) {
      const long double beta = 1e-4L + (0.02L - 1e-4L) * (k - 1) / 999.0L;
      ab_prev = ab;
      ab *= 1.0L - beta;
    }
    const long double beta_t = 1.0L - ab / ab_prev;
    const long double expected = (std::sqrt(ab_prev) * beta_t + std::sqrt(1.0L - beta_t) * (1.0L - ab_prev)) / (1.0L - ab);
    const Matrix<double> ones = Matrix<double>::Ones(1, 1);
    const Gaussian<double> g = forward_posterior(ones, ones, t, s);
    CHECK(g.mean(0, 0) == doctest::Approx(static_cast<double>(expected)).epsilon(1e-9));
  }
  const Matrix<double> x0 = Matrix<double>::Constant(1, 3, 0.25), xt = Matrix<double>::Constant(1, 3, -0.6);
  const Gaussian<double> first = forward_posterior(xt, x0, 1, s);
  CHECK((first.mean - x0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(first.sigma == 0.0);
}

TEST_CASE("ddim with eta one and every step matches ddpm per step") {
  const NoiseSchedule s = make_linear_schedule(200, 5e-4, 0.1);
  Rng rng(6);
  double worst_mean = 0, worst_sigma = 0;
  for (int t = s.T; t >= 1; --t) {
    const Matrix<double> x = rng.normal_matrix<double>(3, 4);
    const Matrix<double> eps = toy_eps(x, t);
    const Gaussian<double> a = ddpm_moments(x, eps, t, s);
    const Gaussian<double> b = ddim_moments(x, eps, t, t - 1, 1.0, s);
    worst_mean = std::max(worst_mean, (a.mean - b.mean).cwiseAbs().maxCoeff());
    worst_sigma = std::max(worst_sigma, std::abs(a.sigma - b.sigma));
  }
  INFO("mean " << worst_mean << " sigma " << worst_sigma);
  CHECK(worst_mean < 1e-6);
  CHECK(worst_sigma < 1e-6);

  // Whole chains from one x_T under one noise stream.
  const EpsFn<double> fn = toy_eps;
  const Matrix<double> xT = Rng(7).normal_matrix<double>(2, 5);
  Rng r1(8), r2(8);
  const Matrix<double> ddpm = ddpm_sample(fn, xT, s, r1);
  const Matrix<double> ddim = ddim_sample(fn, xT, s, ddim_subsequence(s.T, s.T), 1.0, r2);
  CHECK((ddpm - ddim).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("ddpm final step adds no noise") {
  const NoiseSchedule s = make_linear_schedule(50, 1e-3, 0.05);
  const EpsFn<double> fn = toy_eps;
  const Matrix<double> x = Rng(9).normal_matrix<double>(2, 3);
  Rng a(1), b(2);
  CHECK(ddpm_step(fn, x, 1, s, a) == ddpm_step(fn, x, 1, s, b));
  CHECK(ddpm_step(fn, x, 2, s, a) != ddpm_step(fn, x, 2, s, b));
}

TEST_CASE("ddim with eta zero is deterministic and one step collapses to clamped x0") {
  const NoiseSchedule s = make_linear_schedule(200, 5e-4, 0.1);
  const EpsFn<float> fn = [](const Eigen::MatrixXf& x, int) { return Eigen::MatrixXf(0.5f * x); };
  const Eigen::MatrixXf xT = Rng(10).normal_matrix<float>(4, 6) * 2.0f;
  Rng a(1), b(2);
  const auto steps = ddim_subsequence(s.T, 20);
  CHECK(ddim_sample(fn, xT, s, steps, 0.0, a) == ddim_sample(fn, xT, s, steps, 0.0, b));
  std::size_t clamped = 0;
  const Eigen::MatrixXf one = ddim_sample(fn, xT, s, {s.T}, 0.0, a, &clamped);
  const Eigen::MatrixXf raw = predict_x0(xT, fn(xT, s.T), s.T, s);
  const Eigen::MatrixXf x0 = raw.cwiseMax(-1.0f).cwiseMin(1.0f);
  CHECK((one - x0).cwiseAbs().maxCoeff() < 1e-6f);
  CHECK(clamped == static_cast<std::size_t>((raw.array().abs() > 1.0f).count()));
  CHECK(clamped > 0);
}

TEST_CASE("ddim subsequences include both ends and malformed ones are rejected") {
  const auto steps = ddim_subsequence(200, 20);
  CHECK(steps.size() == 20);
  CHECK(steps.front() == 200);
  CHECK(steps.back() == 1);
  for (size_t i = 1; i < steps.size(); ++i) CHECK(steps[i] < steps[i - 1]);
  CHECK(ddim_subsequence(200, 1) == std::vector<int>{200});
  CHECK(ddim_subsequence(5, 50).size() == 5);
  CHECK_THROWS_AS(check_subsequence({}, 10), PreconditionError);
  CHECK_THROWS_AS(check_subsequence({9, 5, 1}, 10), PreconditionError);
  CHECK_THROWS_AS(check_subsequence({10, 5, 5}, 10), PreconditionError);
  CHECK_THROWS_AS(check_subsequence({10, 0}, 10), PreconditionError);
  CHECK_NOTHROW(check_subsequence({10, 4}, 10));
}

TEST_CASE("loss is zero for an exact noise predictor and near d for a zero predictor") {
  const NoiseSchedule s = make_linear_schedule(200, 5e-4, 0.1);
  Rng rng(11);
  DenoiserDims dims = tiny_dims("unconditional");
  dims.x_dim = 4;
  dims.height = 2;
  dims.width_px = 2;
  Denoiser<double> d(dims, rng);
  d.head.bias.value.setZero();
  // Zero head: the prediction is exactly 0.
  const Index n = 10000;
  const Matrix<double> x0 = (rng.normal_matrix<double>(n, 4) * 0.5).cwiseMax(-1.0).cwiseMin(1.0);
  const Matrix<double> zero = Matrix<double>::Zero(n, 4);
  {
    Tape<double> t(false);
    CHECK(ddpm_loss_graph(t, d, x0, Condition<double>{}, s, rng, LossType::L2, nullptr, nullptr, &zero).value()(0, 0) == 0.0);
  }
  Tape<double> t(false);
  const double loss = ddpm_loss_graph(t, d, x0, Condition<double>{}, s, rng).value()(0, 0);
  INFO("loss " << loss);
  CHECK(std::abs(loss / 4.0 - 1.0) < 0.05);
}

TEST_CASE("loss gradients match central differences on a tiny denoiser") {
  const NoiseSchedule s = make_linear_schedule(20, 1e-3, 0.2);
  for (const std::string variant : {"unconditional", "recon+leaf"}) {
    Rng rng(12);
    Denoiser<double> d(tiny_dims(variant), rng);
    randomize_head(d, rng);
    d.head.bias.value = rng.normal_matrix<double>(1, 2);
    INFO(variant << " parameters: " << d.parameter_count());
    REQUIRE(d.parameter_count() <= 800);
    const Matrix<double> x0 = rng.normal_matrix<double>(5, 2).cwiseMax(-1.0).cwiseMin(1.0);
    const Matrix<double> eps = rng.normal_matrix<double>(5, 2);
    const std::vector<int> steps = {1, 3, 7, 15, 20};
    Condition<double> c;
    c.recon = rng.normal_matrix<double>(5, 2).cwiseMax(-1.0).cwiseMin(1.0);
    c.leaf_slot = {0, 1, 1, 0, 1};
    for (LossType type : {LossType::L2, LossType::L2Weighted}) {
      const auto loss = [&](ad::Tape<double>& t) {
        Rng unused(0);
        return ddpm_loss_graph(t, d, x0, c, s, unused, type, nullptr, &steps, &eps);
      };
      const auto rep = testing::check_gradients(d, loss);
      INFO(rep.worst);
      CHECK(rep.checked == d.parameter_count());
      CHECK(rep.max_rel_error < 1e-3);
    }
  }
}

TEST_CASE("ema decay limits and the closed-form geometric average") {
  Scalar m;
  m.p.value = Eigen::MatrixXf::Zero(1, 1);
  Ema<float> tracking(m), frozen(m), avg(m);
  for (int k = 1; k <= 100; ++k) {
    m.p.value(0, 0) = static_cast<float>(k);
    tracking.update(m, 0.0);
    frozen.update(m, 1.0);
    avg.update(m, 0.9);
    CHECK(tracking.shadow().at("p")(0, 0) == static_cast<float>(k));
  }
  CHECK(frozen.shadow().at("p")(0, 0) == 0.0f);
  // s_n = n - d (1 - d^n) / (1 - d) for s_0 = 0 and live value k at step k.
  const double expected = 100.0 - 0.9 * (1.0 - std::pow(0.9, 100)) / 0.1;
  CHECK(avg.shadow().at("p")(0, 0) == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("a zeroed conditioning embedding equals the embedding-free pass") {
  Rng rng(13);
  for (const std::string variant : {"leaf", "path", "recon+embed"}) {
    INFO(variant);
    const DenoiserDims dims = small_dims(variant);
    Denoiser<float> d(dims, rng);
    randomize_head(d, rng);
    Condition<float> c = small_condition(dims, rng);
    if (dims.variant.leaf) d.leaf_table->value.setZero();
    for (auto& m : c.path_mask) m.setZero();
    if (dims.variant.embed) {
      auto& last = d.leaf_proj->layers.back();
      last.weight.value.setZero();
      last.bias.value.setZero();
    }
    const Eigen::MatrixXf x = rng.normal_matrix<float>(4, dims.x_dim);
    const std::vector<int> steps = {5, 5, 80, 150};
    CHECK(denoise(d, x, steps, c) == denoise(d, x, steps, c, false));
  }
}

TEST_CASE("different leaves give different outputs for the same input") {
  Rng rng(14);
  for (const std::string variant : {"leaf", "embed", "path"}) {
    INFO(variant);
    const DenoiserDims dims = small_dims(variant);
    Denoiser<float> d(dims, rng);
    randomize_head(d, rng);
    Condition<float> c = small_condition(dims, rng);
    const Eigen::MatrixXf row = rng.normal_matrix<float>(1, dims.x_dim);
    const Eigen::MatrixXf x = row.replicate(4, 1);
    const Eigen::MatrixXf out = denoise(d, x, {30, 30, 30, 30}, c);
    CHECK((out.row(0) - out.row(1)).cwiseAbs().maxCoeff() > 1e-4f);
    CHECK((out.row(1) - out.row(2)).cwiseAbs().maxCoeff() > 1e-4f);
  }
}

TEST_CASE("denoiser output shape equals the data shape for every variant") {
  Rng rng(15);
  for (const std::string variant :
       {"unconditional", "recon", "leaf", "embed", "path", "recon+leaf", "recon+embed", "recon+path", "leaf+embed+path"}) {
    INFO(variant);
    const DenoiserDims dims = small_dims(variant);
    Denoiser<float> d(dims, rng);
    const Condition<float> c = small_condition(dims, rng);
    const Eigen::MatrixXf out = denoise(d, rng.normal_matrix<float>(4, dims.x_dim), {1, 2, 3, 4}, c);
    CHECK(out.rows() == 4);
    CHECK(out.cols() == dims.x_dim);
    CHECK(d.stem.weight.value.rows() == dims.input_dim());
  }
}

TEST_CASE("conditioning mismatches are rejected") {
  Rng rng(16);
  const DenoiserDims dims = small_dims("recon+leaf");
  Denoiser<float> d(dims, rng);
  Condition<float> c = small_condition(dims, rng);
  const Eigen::MatrixXf x = rng.normal_matrix<float>(4, dims.x_dim);
  c.recon = Eigen::MatrixXf::Zero(4, 5);
  CHECK_THROWS_AS(denoise(d, x, {1, 1, 1, 1}, c), ShapeError);
  c = small_condition(dims, rng);
  c.leaf_slot = {0, 1, 7, 0};
  CHECK_THROWS_AS(denoise(d, x, {1, 1, 1, 1}, c), PreconditionError);
  CHECK_THROWS_AS(denoise(d, rng.normal_matrix<float>(4, 3), {1, 1, 1, 1}, small_condition(dims, rng)), ShapeError);
}

TEST_CASE("conditioning variants parse and print canonically") {
  const auto v = ConditioningVariant::parse("recon+path");
  CHECK(v.recon);
  CHECK(v.path);
  CHECK_FALSE(v.leaf);
  CHECK(v.name() == "recon+path");
  CHECK(ConditioningVariant::parse("path+recon") == v);
  CHECK(ConditioningVariant::parse("unconditional").name() == "unconditional");
  CHECK_FALSE(ConditioningVariant::parse("unconditional").uses_embedding());
  CHECK_THROWS_AS(ConditioningVariant::parse("pathway"), ConfigError);
  CHECK_THROWS_AS(ConditioningVariant::parse("recon+recon"), ConfigError);
  CHECK_THROWS_AS(ConditioningVariant::parse(""), ConfigError);
  CHECK(parse_loss_type("l2") == LossType::L2);
  CHECK_THROWS_AS(parse_loss_type("l1"), ConfigError);
}

TEST_CASE("denoiser checkpoints record the tree they were trained against") {
  Rng rng(17);
  DiffusionConfig cfg;
  cfg.timesteps = 30;
  const Denoiser<float> d(small_dims("recon+path"), rng);
  const Checkpoint c = decode_checkpoint(encode_checkpoint(denoiser_to_checkpoint(d, 1, 0xabc, cfg)));
  const Denoiser<float> back = denoiser_from_checkpoint(c, 0xabc);
  CHECK(back.parameter_values() == d.parameter_values());
  CHECK(back.dims.variant.name() == "recon+path");
  CHECK(schedule_from_checkpoint(c).T == 30);
  CHECK_THROWS_AS(denoiser_from_checkpoint(c, 0xabd), CompatibilityError);
  CHECK_NOTHROW(denoiser_from_checkpoint(c));
}

TEST_CASE("diffusion training reduces the loss and never touches the tree") {
  ExperimentConfig cfg = parse_config("");
  TreeDims td;
  td.height = td.width = 4;
  td.latent_dim = 3;
  td.bottom_up_dim = 4;
  td.hidden_width = 8;
  td.node_width = 4;
  Rng rng(18);
  const auto tree = TreeModel<float>::init_root_tree(td, rng);
  const std::uint64_t before = parameter_hash(tree_to_checkpoint(tree, 0));
  Eigen::MatrixXf data(64, 16);
  for (Index r = 0; r < 64; ++r) data.row(r) = (r % 2 == 0 ? 0.9f : 0.1f) * Eigen::RowVectorXf::Ones(16);
  cfg.diffusion.timesteps = 50;
  cfg.diffusion.base_channels = 8;
  cfg.diffusion.channel_multipliers = {1, 2};
  cfg.diffusion.train_steps = 300;
  cfg.diffusion.warmup_steps = 20;
  cfg.diffusion.batch_size = 16;
  cfg.diffusion.learning_rate = 2e-3;
  cfg.diffusion.dropout = 0.0;
  cfg.diffusion.variant = "recon+path";
  int logged = 0;
  const auto res = train_diffusion(cfg, tree, data, rng, [&](int, double) { ++logged; });
  CHECK(logged == 300);
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) {
    head += res.losses[static_cast<size_t>(i)] / 50;
    tail += res.losses[res.losses.size() - 1 - static_cast<size_t>(i)] / 50;
  }
  INFO("first 50 " << head << " last 50 " << tail);
  CHECK(tail < 0.7 * head);
  CHECK(res.ema.parameter_values() != res.live.parameter_values());
  CHECK(parameter_hash(tree_to_checkpoint(tree, 0)) == before);
  CHECK_THROWS_AS(train_diffusion(cfg, tree, Eigen::MatrixXf::Zero(4, 9), rng), CompatibilityError);
}
