#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to its Vars. Values are computed
// eagerly; backward() replays the recorded closures in reverse order. All
// types are templated on the scalar so the same model code runs in float for
// training and in double for finite-difference checks.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace treediff::ad {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

/// A named trainable array. Gradients accumulate into `grad` on backward().
template <typename S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
class Tape;

template <typename S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<S>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape<S>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix<S>&)>;

  /// With `record` false no backward closures are kept (pure inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<S> constant(Matrix<S> v) {
    nodes_.push_back(Node{std::move(v), {}, {}, nullptr, false});
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<S> parameter(Parameter<S>& p) {
    const bool rg = record_ && !p.frozen;
    nodes_.push_back(Node{p.value, {}, {}, rg ? &p : nullptr, rg});
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Pushes an op result. `backward` is only stored if some input needs grad.
  Var<S> push(Matrix<S> v, bool requires_grad, Backward backward) {
    const bool rg = record_ && requires_grad;
    nodes_.push_back(Node{std::move(v), {}, rg ? std::move(backward) : Backward{}, nullptr, rg});
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix<S>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates from a 1x1 root. Parameter gradients are added to
  /// Parameter::grad (callers zero them between steps).
  void backward(const Var<S>& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw std::invalid_argument("backward() requires a scalar root");
    }
    if (!record_) throw std::logic_error("backward() on a non-recording tape");
    Node& r = nodes_[static_cast<size_t>(root.id())];
    if (!r.requires_grad) return;
    r.grad = Matrix<S>::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      } else if (n.backward) {
        // The closure may read other nodes; copy the grad so pushes to the
        // node vector cannot invalidate it.
        const Matrix<S> g = n.grad;
        n.backward(*this, g);
      }
      n.grad.resize(0, 0);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    Backward backward;
    Parameter<S>* param;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  bool record_;
};

namespace detail {

template <typename S>
void check_same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("vars live on different tapes");
}

template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

template <typename S>
S softplus(S a) {
  return std::max(a, S(0)) + std::log1p(std::exp(-std::abs(a)));
}

template <typename S>
S sigmoid(S a) {
  if (a >= S(0)) {
    const S e = std::exp(-a);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(a);
  return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary ops

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                          if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                          if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                        });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, g);
                        });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, -g);
                        });
}

/// Elementwise product.
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                          if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                          if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                        });
}

/// Elementwise quotient.
template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "div");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseQuotient(b.value()), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                          const auto& bv = t.value(ib);
                          if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
                          if (t.requires_grad(ib)) {
                            t.accumulate(ib, -(g.cwiseProduct(t.value(ia)).cwiseQuotient(bv.cwiseProduct(bv))));
                          }
                        });
}

/// a (N x C) + row (1 x C) broadcast over rows.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  detail::check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const int ia = a.id(), ir = row.id();
  Matrix<S> v = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(v), a.requires_grad() || row.requires_grad(),
                        [ia, ir](Tape<S>& t, const Matrix<S>& g) {
                          t.accumulate(ia, g);
                          if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                        });
}

/// a (N x C) scaled row-wise by col (N x 1).
template <typename S>
Var<S> mul_col(const Var<S>& a, const Var<S>& col) {
  detail::check_same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  const int ia = a.id(), ic = col.id();
  Matrix<S> v = a.value().array().colwise() * col.value().col(0).array();
  return a.tape()->push(std::move(v), a.requires_grad() || col.requires_grad(),
                        [ia, ic](Tape<S>& t, const Matrix<S>& g) {
                          if (t.requires_grad(ia)) {
                            Matrix<S> ga = g.array().colwise() * t.value(ic).col(0).array();
                            t.accumulate(ia, ga);
                          }
                          if (t.requires_grad(ic)) t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
                        });
}

// ---------------------------------------------------------------------------
// Scalar-constant ops

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  const int ia = a.id();
  return a.tape()->push(a.value() * s, a.requires_grad(),
                        [ia, s](Tape<S>& t, const Matrix<S>& g) { t.accumulate(ia, g * s); });
}

template <typename S>
Var<S> shift(const Var<S>& a, S s) {
  const int ia = a.id();
  Matrix<S> v = a.value().array() + s;
  return a.tape()->push(std::move(v), a.requires_grad(),
                        [ia](Tape<S>& t, const Matrix<S>& g) { t.accumulate(ia, g); });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().unaryExpr([](S x) { return detail::sigmoid(x); });
  Matrix<S> y = v;
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, y = std::move(y)](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(y.cwiseProduct((S(1) - y.array()).matrix())));
  });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().unaryExpr([](S x) { return detail::softplus(x); });
  return a.tape()->push(std::move(v), a.requires_grad(), [ia](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([](S x) { return detail::sigmoid(x); })));
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().cwiseMax(S(0));
  return a.tape()->push(std::move(v), a.requires_grad(), [ia](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([](S x) { return x > S(0) ? S(1) : S(0); })));
  });
}

template <typename S>
Var<S> leaky_relu(const Var<S>& a, S slope = S(0.1)) {
  const int ia = a.id();
  Matrix<S> v = a.value().unaryExpr([slope](S x) { return x > S(0) ? x : slope * x; });
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, slope](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([slope](S x) { return x > S(0) ? S(1) : slope; })));
  });
}

/// x * sigmoid(x)
template <typename S>
Var<S> silu(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().unaryExpr([](S x) { return x * detail::sigmoid(x); });
  return a.tape()->push(std::move(v), a.requires_grad(), [ia](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([](S x) {
      const S s = detail::sigmoid(x);
      return s * (S(1) + x * (S(1) - s));
    })));
  });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().array().exp().matrix();
  Matrix<S> y = v;
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, y = std::move(y)](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(y));
  });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().array().log().matrix();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().array().square().matrix();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, S(2) * g.cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().array().sqrt().matrix();
  Matrix<S> y = v;
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, y = std::move(y)](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, (g.array() / (S(2) * y.array())).matrix());
  });
}

template <typename S>
Var<S> reciprocal(const Var<S>& a) {
  const int ia = a.id();
  Matrix<S> v = a.value().cwiseInverse();
  Matrix<S> y = v;
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, y = std::move(y)](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, -(g.cwiseProduct(y.cwiseProduct(y))));
  });
}

/// max(a, floor) elementwise; gradient passes where a > floor.
template <typename S>
Var<S> clamp_min(const Var<S>& a, S floor) {
  const int ia = a.id();
  Matrix<S> v = a.value().cwiseMax(floor);
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, floor](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([floor](S x) { return x > floor ? S(1) : S(0); })));
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename S>
Var<S> sum(const Var<S>& a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, r, c](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, Matrix<S>::Constant(r, c, g(0, 0)));
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

/// Sums each row: (N x C) -> (N x 1).
template <typename S>
Var<S> row_sum(const Var<S>& a) {
  const int ia = a.id();
  const Index c = a.cols();
  Matrix<S> v = a.value().rowwise().sum();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, c](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(ia, g.col(0).replicate(1, c));
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index n = parts.front().rows();
  Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix<S> v(n, total);
  std::vector<std::pair<int, Index>> ids;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    ids.emplace_back(p.id(), p.cols());
    off += p.cols();
  }
  return parts.front().tape()->push(std::move(v), rg, [ids](Tape<S>& t, const Matrix<S>& g) {
    Index o = 0;
    for (const auto& [id, c] : ids) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(o, c));
      o += c;
    }
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix<S> v = a.value().middleCols(start, count);
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, r, c, start, count](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> full = Matrix<S>::Zero(r, c);
    full.middleCols(start, count) = g;
    t.accumulate(ia, full);
  });
}

/// Channel-major image rows (N x C*P) to one row per pixel (N*P x C).
template <typename S>
Var<S> to_pixels(const Var<S>& a, Index channels) {
  if (channels < 1 || a.cols() % channels != 0) throw std::invalid_argument("to_pixels: bad channel count");
  const int ia = a.id();
  const Index n = a.rows(), p = a.cols() / channels;
  Matrix<S> v(n * p, channels);
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < n; ++i) v.col(c).segment(i * p, p) = a.value().row(i).segment(c * p, p).transpose();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, n, p, channels](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> back(n, channels * p);
    for (Index c = 0; c < channels; ++c)
      for (Index i = 0; i < n; ++i) back.row(i).segment(c * p, p) = g.col(c).segment(i * p, p).transpose();
    t.accumulate(ia, back);
  });
}

/// Inverse of to_pixels for `n` images.
template <typename S>
Var<S> from_pixels(const Var<S>& a, Index n) {
  if (n < 1 || a.rows() % n != 0) throw std::invalid_argument("from_pixels: bad image count");
  const int ia = a.id();
  const Index p = a.rows() / n, channels = a.cols();
  Matrix<S> v(n, channels * p);
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < n; ++i) v.row(i).segment(c * p, p) = a.value().col(c).segment(i * p, p).transpose();
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, n, p, channels](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> back(n * p, channels);
    for (Index c = 0; c < channels; ++c)
      for (Index i = 0; i < n; ++i) back.col(c).segment(i * p, p) = g.row(i).segment(c * p, p).transpose();
    t.accumulate(ia, back);
  });
}

/// Zero-padded 3x3 neighbourhoods of pixel rows (N*H*W x C) from to_pixels:
/// column k*C + c holds channel c at offset k = 3*(dy+1) + (dx+1).
template <typename S>
Var<S> patches3x3(const Var<S>& a, Index height, Index width) {
  const Index p = height * width;
  if (p < 1 || a.rows() % p != 0) throw std::invalid_argument("patches3x3: rows are not whole images");
  const int ia = a.id();
  const Index rows = a.rows(), channels = a.cols();
  // src[k * rows + r] is the source row of offset k for pixel row r, or -1.
  auto src = std::make_shared<std::vector<Index>>(static_cast<size_t>(9 * rows), -1);
  for (Index r = 0; r < rows; ++r) {
    const Index base = r - r % p, y = (r % p) / width, x = r % width;
    for (Index k = 0; k < 9; ++k) {
      const Index yy = y + k / 3 - 1, xx = x + k % 3 - 1;
      if (yy >= 0 && yy < height && xx >= 0 && xx < width) (*src)[static_cast<size_t>(k * rows + r)] = base + yy * width + xx;
    }
  }
  Matrix<S> v = Matrix<S>::Zero(rows, 9 * channels);
  for (Index k = 0; k < 9; ++k)
    for (Index c = 0; c < channels; ++c) {
      const auto col = a.value().col(c);
      for (Index r = 0; r < rows; ++r) {
        const Index s = (*src)[static_cast<size_t>(k * rows + r)];
        if (s >= 0) v(r, k * channels + c) = col(s);
      }
    }
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, rows, channels, src](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> back = Matrix<S>::Zero(rows, channels);
    for (Index k = 0; k < 9; ++k)
      for (Index c = 0; c < channels; ++c) {
        const auto col = g.col(k * channels + c);
        for (Index r = 0; r < rows; ++r) {
          const Index s = (*src)[static_cast<size_t>(k * rows + r)];
          if (s >= 0) back(s, c) += col(r);
        }
      }
    t.accumulate(ia, back);
  });
}

/// Each row repeated `times` times consecutively.
template <typename S>
Var<S> repeat_rows(const Var<S>& a, Index times) {
  if (times < 1) throw std::invalid_argument("repeat_rows: times must be positive");
  const int ia = a.id();
  const Index n = a.rows(), c = a.cols();
  Matrix<S> v(n * times, c);
  for (Index i = 0; i < n; ++i) v.middleRows(i * times, times) = a.value().row(i).replicate(times, 1);
  return a.tape()->push(std::move(v), a.requires_grad(), [ia, n, c, times](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> back(n, c);
    for (Index i = 0; i < n; ++i) back.row(i) = g.middleRows(i * times, times).colwise().sum();
    t.accumulate(ia, back);
  });
}

/// Mean over rows of -sum_k y_k log softmax(logits)_k for one-hot (or soft)
/// targets y.
template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const Matrix<S>& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw std::invalid_argument("softmax_cross_entropy: shape mismatch");
  }
  const int ia = logits.id();
  const Matrix<S>& z = logits.value();
  const auto zmax = z.rowwise().maxCoeff();
  Matrix<S> shifted = z.colwise() - zmax;
  const Eigen::Matrix<S, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix<S> logp = shifted.colwise() - lse;
  const S n = static_cast<S>(z.rows());
  Matrix<S> v(1, 1);
  v(0, 0) = -(targets.cwiseProduct(logp)).sum() / n;
  Matrix<S> p = logp.array().exp().matrix();
  return logits.tape()->push(std::move(v), logits.requires_grad(),
                             [ia, p = std::move(p), targets, n](Tape<S>& t, const Matrix<S>& g) {
                               const Matrix<S> rowsum = targets.rowwise().sum();
                               Matrix<S> d = p.array().colwise() * rowsum.col(0).array();
                               t.accumulate(ia, (d - targets) * (g(0, 0) / n));
                             });
}

// ---------------------------------------------------------------------------
// Operators for readability in model code.

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a) {
  return neg(a);
}
template <typename S>
Var<S> operator*(const Var<S>& a, S s) {
  return scale(a, s);
}
template <typename S>
Var<S> operator*(S s, const Var<S>& a) {
  return scale(a, s);
}

}  // namespace treediff::ad
