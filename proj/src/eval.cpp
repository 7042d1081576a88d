#include "treediff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>

#include "treediff/errors.hpp"
#include "treediff/optim.hpp"

namespace treediff {

namespace {

// Rows: clusters, columns: classes, in sorted id order.
Eigen::MatrixXd contingency(const std::vector<int>& labels, const std::vector<int>& assignments) {
  if (labels.empty()) throw PreconditionError("metrics need at least one sample");
  if (labels.size() != assignments.size()) throw PreconditionError("labels and assignments differ in length");
  std::map<int, Eigen::Index> rows, cols;
  for (int a : assignments) rows.emplace(a, 0);
  for (int l : labels) cols.emplace(l, 0);
  Eigen::Index i = 0;
  for (auto& [k, v] : rows) v = i++;
  i = 0;
  for (auto& [k, v] : cols) v = i++;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (size_t k = 0; k < labels.size(); ++k) c(rows.at(assignments[k]), cols.at(labels[k])) += 1.0;
  return c;
}

}  // namespace

std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  const bool transposed = cost.rows() > cost.cols();
  const Eigen::MatrixXd a = transposed ? Eigen::MatrixXd(cost.transpose()) : cost;
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  // Potentials method on a 1-indexed n x m problem with n <= m.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0), v(static_cast<size_t>(m) + 1, 0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] != 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  if (!transposed) return row_to_col;
  std::vector<int> out(static_cast<size_t>(cost.rows()), -1);
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(row_to_col[static_cast<size_t>(i)])] = i;
  return out;
}

double cluster_accuracy(const std::vector<int>& labels, const std::vector<int>& assignments) {
  const Eigen::MatrixXd c = contingency(labels, assignments);
  const std::vector<int> match = hungarian(-c);
  double hit = 0;
  for (size_t r = 0; r < match.size(); ++r)
    if (match[r] >= 0) hit += c(static_cast<Eigen::Index>(r), match[r]);
  return hit / static_cast<double>(labels.size());
}

double nmi(const std::vector<int>& labels, const std::vector<int>& assignments) {
  const Eigen::MatrixXd c = contingency(labels, assignments);
  const double n = c.sum();
  const Eigen::VectorXd pa = c.rowwise().sum() / n;
  const Eigen::VectorXd pl = c.colwise().sum().transpose() / n;
  const double ha = entropy(pa), hl = entropy(pl);
  double mi = 0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      const double pij = c(i, j) / n;
      if (pij > 0) mi += pij * std::log(pij / (pa(i) * pl(j)));
    }
  if (ha <= 0 || hl <= 0) {
    // One side is a single block: identical only if both are.
    return (ha <= 0 && hl <= 0) ? 1.0 : 0.0;
  }
  return std::clamp(mi / (0.5 * (ha + hl)), 0.0, 1.0);
}

double entropy(const Eigen::VectorXd& hist) {
  double h = 0;
  for (Eigen::Index i = 0; i < hist.size(); ++i)
    if (hist(i) > 0) h -= hist(i) * std::log(hist(i));
  return std::max(0.0, h);
}

FeatureMoments feature_moments(const Eigen::MatrixXd& feats) {
  if (feats.rows() < 2) throw PreconditionError("Frechet distance needs at least two samples per side");
  FeatureMoments m;
  m.mean = feats.colwise().mean().transpose();
  const Eigen::MatrixXd centered = feats.rowwise() - m.mean.transpose();
  m.cov = centered.transpose() * centered / static_cast<double>(feats.rows() - 1);
  if (!m.mean.allFinite() || !m.cov.allFinite()) throw NumericError("non-finite feature moments");
  return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-6 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol) throw NumericError("matrix square root of a non-PSD matrix");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const FeatureMoments& a, const FeatureMoments& b) {
  if (a.mean.size() != b.mean.size()) throw PreconditionError("feature widths differ");
  const Eigen::MatrixXd sa = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  const double cross = psd_sqrt(inner).trace();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  if (!std::isfinite(d)) throw NumericError("non-finite Frechet distance");
  return std::max(0.0, d);
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return frechet_distance(feature_moments(a), feature_moments(b));
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(int input_dim, int num_classes, Rng& rng)
    : input_dim_(input_dim), num_classes_(num_classes) {
  constexpr int width = 256;
  stem = nn::Dense<float>(input_dim, width, rng);
  for (int i = 0; i < 3; ++i) stages.emplace_back(width, width, nn::Activation::Relu, rng);
  penultimate = nn::Dense<float>(width, kFeatureWidth, rng);
  head = nn::Dense<float>(kFeatureWidth, num_classes, rng);
}

ad::Var<float> FeatureExtractor::forward(ad::Tape<float>& t, const ad::Var<float>& x, ad::Var<float>* feats) const {
  if (x.cols() != input_dim_) throw ShapeError("classifier input width mismatch");
  ad::Var<float> h = ad::relu(stem(t, x));
  for (auto& s : stages) h = s(t, h);
  const ad::Var<float> f = ad::relu(penultimate(t, ad::relu(h)));
  if (feats != nullptr) *feats = f;
  return head(t, f);
}

Eigen::MatrixXf FeatureExtractor::features(const Eigen::MatrixXf& x) const {
  ad::Tape<float> t(false);
  ad::Var<float> f;
  forward(t, t.constant(x), &f);
  return f.value();
}

Eigen::MatrixXf FeatureExtractor::logits(const Eigen::MatrixXf& x) const {
  ad::Tape<float> t(false);
  return forward(t, t.constant(x), nullptr).value();
}

std::vector<int> FeatureExtractor::predict(const Eigen::MatrixXf& x) const {
  const Eigen::MatrixXf z = logits(x);
  std::vector<int> out(static_cast<size_t>(z.rows()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::Index k = 0;
    z.row(r).maxCoeff(&k);
    out[static_cast<size_t>(r)] = static_cast<int>(k);
  }
  return out;
}

double FeatureExtractor::accuracy(const Eigen::MatrixXf& x, const std::vector<int>& labels) const {
  const auto pred = predict(x);
  if (pred.size() != labels.size() || pred.empty()) throw PreconditionError("accuracy needs matching non-empty labels");
  size_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::vector<double> FeatureExtractor::fit(const Eigen::MatrixXf& x, const std::vector<int>& labels, int epochs, Rng& rng,
                                          int batch_size, double lr) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw PreconditionError("one label per row required");
  Adam<float> opt(lr, 0.0);
  std::vector<Eigen::Index> order(static_cast<size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::vector<double> history;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0;
    for (Eigen::Index start = 0; start < x.rows(); start += batch_size) {
      const Eigen::Index len = std::min<Eigen::Index>(batch_size, x.rows() - start);
      Eigen::MatrixXf batch(len, x.cols());
      Eigen::MatrixXf target = Eigen::MatrixXf::Zero(len, num_classes_);
      for (Eigen::Index r = 0; r < len; ++r) {
        const Eigen::Index src = order[static_cast<size_t>(start + r)];
        batch.row(r) = x.row(src);
        target(r, labels[static_cast<size_t>(src)]) = 1.0f;
      }
      ad::Tape<float> t;
      const ad::Var<float> loss = ad::softmax_cross_entropy(forward(t, t.constant(batch), nullptr), target);
      zero_grad(*this);
      t.backward(loss);
      opt.step(*this);
      total += static_cast<double>(loss.value()(0, 0)) * static_cast<double>(len);
    }
    history.push_back(total / static_cast<double>(x.rows()));
  }
  zero_grad(*this);
  return history;
}

Checkpoint FeatureExtractor::to_checkpoint(std::uint64_t config_hash) const {
  Checkpoint c;
  c.manifest.stage = "classifier";
  c.manifest.config_hash = config_hash;
  c.manifest.extra = {{"input_dim", input_dim_}, {"num_classes", num_classes_}};
  const_cast<FeatureExtractor*>(this)->visit(
      [&](const std::string& n, ad::Parameter<float>& p) { c.arrays[n] = to_named_array(p.value); });
  return c;
}

FeatureExtractor FeatureExtractor::from_checkpoint(const Checkpoint& c) {
  if (c.manifest.stage != "classifier") throw CompatibilityError("checkpoint stage is '" + c.manifest.stage + "', not 'classifier'");
  Rng rng(0);
  FeatureExtractor f;
  try {
    f = FeatureExtractor(c.manifest.extra.at("input_dim").get<int>(), c.manifest.extra.at("num_classes").get<int>(), rng);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("classifier manifest malformed: ") + e.what());
  }
  size_t seen = 0;
  f.visit([&](const std::string& n, ad::Parameter<float>& p) {
    auto it = c.arrays.find(n);
    if (it == c.arrays.end()) throw IntegrityError("missing parameter " + n);
    Eigen::MatrixXf v = from_named_array<float>(it->second);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) throw IntegrityError("shape mismatch for parameter " + n);
    p.value = v;
    ++seen;
  });
  if (seen != c.arrays.size()) throw IntegrityError("unexpected extra parameters");
  return f;
}

FeatureExtractor train_feature_extractor(const ImageBatch& train, const ImageBatch& test, const EvalConfig& cfg,
                                         Rng& rng, double* test_accuracy) {
  if (!train.labels || !test.labels) throw PreconditionError("feature extractor needs labelled data");
  const int classes = std::max(train.num_classes, test.num_classes);
  Rng init = rng.split(21);
  FeatureExtractor f(static_cast<int>(train.dim()), classes, init);
  f.fit(train.values, *train.labels, cfg.classifier_epochs, rng);
  const double acc = f.accuracy(test.values, *test.labels);
  if (test_accuracy != nullptr) *test_accuracy = acc;
  if (acc < kMinExtractorAccuracy) {
    throw PreconditionError("feature extractor test accuracy " + std::to_string(acc) + " below " +
                            std::to_string(kMinExtractorAccuracy));
  }
  return f;
}

LeafSpecificity leaf_specificity(const std::map<int, std::vector<int>>& predicted, const std::map<int, double>& prior_mass,
                                 int num_classes, double min_mass) {
  LeafSpecificity out;
  double sum = 0;
  for (const auto& [leaf, classes] : predicted) {
    auto it = prior_mass.find(leaf);
    const double mass = it == prior_mass.end() ? 0.0 : it->second;
    if (mass < min_mass || classes.empty()) {
      out.excluded.push_back(leaf);
      continue;
    }
    Eigen::VectorXd h = Eigen::VectorXd::Zero(num_classes);
    for (int c : classes) {
      if (c < 0 || c >= num_classes) throw PreconditionError("class index out of range");
      h(c) += 1.0;
    }
    h /= static_cast<double>(classes.size());
    out.histograms[leaf] = h;
    out.entropies[leaf] = entropy(h);
    out.included.push_back(leaf);
    sum += out.entropies[leaf];
  }
  if (out.included.empty()) throw PreconditionError("no leaf reaches the inclusion mass");
  out.mean_entropy = sum / static_cast<double>(out.included.size());
  return out;
}

void write_entropy_csv(const std::filesystem::path& path, const LeafSpecificity& spec) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "leaf,entropy";
  const Eigen::Index k = spec.histograms.empty() ? 0 : spec.histograms.begin()->second.size();
  for (Eigen::Index c = 0; c < k; ++c) out << ",p" << c;
  out << '\n' << std::setprecision(9);
  for (int leaf : spec.included) {
    out << leaf << ',' << spec.entropies.at(leaf);
    for (Eigen::Index c = 0; c < k; ++c) out << ',' << spec.histograms.at(leaf)(c);
    out << '\n';
  }
}

Eigen::MatrixXf histogram_chart(const LeafSpecificity& spec, int bar_width, int bar_height) {
  if (spec.included.empty()) throw PreconditionError("no leaf histograms to draw");
  if (bar_width < 1 || bar_height < 1) throw PreconditionError("bar dimensions must be positive");
  const Eigen::Index k = spec.histograms.at(spec.included.front()).size();
  const Eigen::Index panel = bar_height + 4;
  Eigen::MatrixXf img = Eigen::MatrixXf::Ones(panel * static_cast<Eigen::Index>(spec.included.size()), k * (bar_width + 1) + 1);
  for (size_t i = 0; i < spec.included.size(); ++i) {
    const Eigen::VectorXd& h = spec.histograms.at(spec.included[i]);
    const Eigen::Index base = panel * static_cast<Eigen::Index>(i) + 2 + bar_height;
    img.row(base).setConstant(0.5f);
    for (Eigen::Index c = 0; c < k; ++c) {
      const auto len = static_cast<Eigen::Index>(std::lround(std::clamp(h(c), 0.0, 1.0) * bar_height));
      if (len > 0) img.block(base - len, 1 + c * (bar_width + 1), len, bar_width).setZero();
    }
  }
  return img;
}

}  // namespace treediff
