#include "treediff/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "treediff/errors.hpp"

namespace treediff {

void ImageBatch::validate() const {
  if (channels != 1 && channels != 3) throw ValidationError("image channels must be 1 or 3");
  if (values.cols() != static_cast<Eigen::Index>(channels) * height * width) {
    throw ValidationError("image row width does not match channels*height*width");
  }
  if (values.size() > 0 && (values.minCoeff() < 0.0f || values.maxCoeff() > 1.0f || !values.allFinite())) {
    throw ValidationError("image values must lie in [0,1]");
  }
  if (labels) {
    if (static_cast<Eigen::Index>(labels->size()) != values.rows()) throw ValidationError("label count mismatch");
    for (int l : *labels)
      if (l < 0 || l >= num_classes) throw ValidationError("label outside [0, K)");
  }
}

ImageBatch ImageBatch::subset(const std::vector<Eigen::Index>& rows) const {
  ImageBatch out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.num_classes = num_classes;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
  if (labels) out.labels.emplace();
  for (size_t i = 0; i < rows.size(); ++i) {
    out.values.row(static_cast<Eigen::Index>(i)) = values.row(rows[i]);
    if (labels) out.labels->push_back((*labels)[static_cast<size_t>(rows[i])]);
  }
  return out;
}

ImageBatch ImageBatch::head(Eigen::Index n) const {
  std::vector<Eigen::Index> rows(static_cast<size_t>(std::min(n, size())));
  std::iota(rows.begin(), rows.end(), 0);
  return subset(rows);
}

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("IDX file truncated in header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

ImageBatch load_idx_dataset(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels,
                            int max_images) {
  std::ifstream in(images, std::ios::binary);
  if (!in) throw FormatError("cannot open IDX images " + images.string());
  if (read_be32(in) != 0x00000803) throw FormatError("bad IDX image magic in " + images.string());
  const std::uint32_t count = read_be32(in);
  const std::uint32_t rows = read_be32(in);
  const std::uint32_t cols = read_be32(in);
  const std::uint32_t keep = max_images > 0 ? std::min<std::uint32_t>(count, static_cast<std::uint32_t>(max_images)) : count;
  const size_t pixels = static_cast<size_t>(rows) * cols;
  std::vector<unsigned char> raw(pixels * keep);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("IDX image file truncated: " + images.string());
  }
  ImageBatch batch;
  batch.channels = 1;
  batch.height = static_cast<int>(rows);
  batch.width = static_cast<int>(cols);
  batch.values.resize(keep, static_cast<Eigen::Index>(pixels));
  for (size_t n = 0; n < keep; ++n)
    for (size_t p = 0; p < pixels; ++p)
      batch.values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p)) = raw[n * pixels + p] / 255.0f;

  if (labels) {
    std::ifstream lin(*labels, std::ios::binary);
    if (!lin) throw FormatError("cannot open IDX labels " + labels->string());
    if (read_be32(lin) != 0x00000801) throw FormatError("bad IDX label magic in " + labels->string());
    const std::uint32_t lcount = read_be32(lin);
    if (lcount != count) throw FormatError("IDX label count does not match image count");
    std::vector<unsigned char> lraw(keep);
    if (!lin.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()))) {
      throw FormatError("IDX label file truncated: " + labels->string());
    }
    batch.labels.emplace(lraw.begin(), lraw.end());
    batch.num_classes = lraw.empty() ? 0 : *std::max_element(lraw.begin(), lraw.end()) + 1;
  }
  batch.validate();
  return batch;
}

void write_idx_images(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, int count,
                      int rows, int cols) {
  if (pixels.size() != static_cast<size_t>(count) * rows * cols) throw ShapeError("pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  write_be32(out, 0x00000803);
  write_be32(out, static_cast<std::uint32_t>(count));
  write_be32(out, static_cast<std::uint32_t>(rows));
  write_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<unsigned char>& labels) {
  std::ofstream out(path, std::ios::binary);
  write_be32(out, 0x00000801);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Eigen::VectorXf render_template(const ClusterTemplate& t, int size) {
  Eigen::VectorXf img = Eigen::VectorXf::Zero(size * size);
  const float c = (size - 1) / 2.0f;
  const int band = std::max(1, size / 8);
  for (int r = 0; r < size; ++r) {
    for (int col = 0; col < size; ++col) {
      bool on = false;
      switch (t.pattern) {
        case Pattern::HorizontalStripes: on = (r / band) % 2 == 0; break;
        case Pattern::VerticalStripes: on = (col / band) % 2 == 0; break;
        case Pattern::Diagonal: on = std::abs(r - col) <= band; break;
        case Pattern::AntiDiagonal: on = std::abs(r + col - (size - 1)) <= band; break;
        case Pattern::Ring: {
          const float d = std::hypot(r - c, col - c);
          on = std::abs(d - size * 0.35f) <= band;
          break;
        }
        case Pattern::CenterBlob: on = std::hypot(r - c, col - c) <= size * 0.25f; break;
        case Pattern::Checker: on = ((r / (2 * band)) + (col / (2 * band))) % 2 == 0; break;
        case Pattern::LeftHalf: on = col < size / 2; break;
        case Pattern::TopHalf: on = r < size / 2; break;
        case Pattern::Cross: on = std::abs(r - c) <= band || std::abs(col - c) <= band; break;
      }
      img(r * size + col) = on ? t.intensity : 0.0f;
    }
  }
  return img;
}

ImageBatch make_synthetic(const SyntheticClusterSpec& spec, Rng& rng) {
  if (spec.clusters < 2) throw ValidationError("synthetic spec needs at least 2 clusters");
  if (spec.noise_std < 0) throw ValidationError("synthetic noise std must be >= 0");
  std::vector<ClusterTemplate> templates = spec.templates;
  if (templates.empty()) {
    if (spec.clusters > 10) throw ValidationError("at most 10 built-in synthetic patterns");
    for (int k = 0; k < spec.clusters; ++k) templates.push_back({static_cast<Pattern>(k), 0.9f});
  }
  if (static_cast<int>(templates.size()) != spec.clusters) throw ValidationError("template count != clusters");
  std::vector<Eigen::VectorXf> images;
  for (const auto& t : templates) images.push_back(render_template(t, spec.size));
  for (size_t a = 0; a < images.size(); ++a)
    for (size_t b = a + 1; b < images.size(); ++b)
      if ((images[a] - images[b]).squaredNorm() == 0.0f) throw ValidationError("synthetic templates must be distinct");

  const int n = spec.clusters * spec.samples_per_cluster;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  ImageBatch batch;
  batch.channels = 1;
  batch.height = spec.size;
  batch.width = spec.size;
  batch.num_classes = spec.clusters;
  batch.values.resize(n, spec.size * spec.size);
  batch.labels.emplace(static_cast<size_t>(n));
  for (int row = 0; row < n; ++row) {
    const int k = order[static_cast<size_t>(row)] / spec.samples_per_cluster;
    (*batch.labels)[static_cast<size_t>(row)] = k;
    for (int p = 0; p < spec.size * spec.size; ++p) {
      const float noisy = images[static_cast<size_t>(k)](p) + static_cast<float>(spec.noise_std * rng.normal());
      batch.values(row, p) = spec.noise_std > 0 ? std::clamp(noisy, 0.0f, 1.0f) : images[static_cast<size_t>(k)](p);
    }
  }
  batch.validate();
  return batch;
}

Eigen::MatrixXf to_diffusion_range(const Eigen::MatrixXf& x) { return (x.array() * 2.0f - 1.0f).matrix(); }

Eigen::MatrixXf from_diffusion_range(const Eigen::MatrixXf& y, std::size_t* clamped) {
  if (clamped) {
    *clamped += static_cast<std::size_t>((y.array() < -1.0f || y.array() > 1.0f || y.array().isNaN()).count());
  }
  Eigen::MatrixXf out = y.unaryExpr([](float v) {
    if (std::isnan(v)) return 0.5f;
    return (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 0.5f;
  });
  return out;
}

std::pair<ImageBatch, ImageBatch> train_test_split(const ImageBatch& batch, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split fraction must lie in (0,1)");
  const auto n = static_cast<size_t>(batch.size());
  std::vector<std::vector<Eigen::Index>> groups;
  if (batch.labels) {
    groups.resize(static_cast<size_t>(std::max(batch.num_classes, 1)));
    for (size_t i = 0; i < n; ++i) groups[static_cast<size_t>((*batch.labels)[i])].push_back(static_cast<Eigen::Index>(i));
  } else {
    groups.emplace_back(n);
    std::iota(groups[0].begin(), groups[0].end(), 0);
  }
  for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng.engine());

  // Largest-remainder apportionment of the train quota across classes.
  const auto quota = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<size_t> take(groups.size());
  std::vector<std::pair<double, size_t>> remainders;
  size_t assigned = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    const double exact = fraction * static_cast<double>(groups[k].size());
    take[k] = static_cast<size_t>(std::floor(exact));
    assigned += take[k];
    remainders.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (size_t i = 0; assigned < quota && i < remainders.size(); ++i) {
    const size_t k = remainders[i].second;
    if (take[k] < groups[k].size()) {
      ++take[k];
      ++assigned;
    }
  }
  std::vector<Eigen::Index> train, test;
  for (size_t k = 0; k < groups.size(); ++k) {
    train.insert(train.end(), groups[k].begin(), groups[k].begin() + static_cast<std::ptrdiff_t>(take[k]));
    test.insert(test.end(), groups[k].begin() + static_cast<std::ptrdiff_t>(take[k]), groups[k].end());
  }
  std::shuffle(train.begin(), train.end(), rng.engine());
  std::shuffle(test.begin(), test.end(), rng.engine());
  return {batch.subset(train), batch.subset(test)};
}

}  // namespace treediff
