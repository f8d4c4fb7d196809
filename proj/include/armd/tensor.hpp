#pragma once

// Dense double-precision tensors with a define-by-run reverse-mode tape,
// the layers the detectors are built from, and an Adam optimizer.
//
// A Tensor is a shared handle: copies alias the same storage, like the
// tensor types of the usual deep learning frameworks. Use clone() for a
// deep copy. Every op takes a Graph* first; passing nullptr runs the op
// without recording anything (inference).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "armd/errors.hpp"
#include "armd/rng.hpp"

namespace armd {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
  out << ']';
  return out.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("dimension sizes must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) throw ShapeError("tensor needs at least one dimension");
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                       " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double* ptr() { return impl_->data.data(); }
  const double* ptr() const { return impl_->data.data(); }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }
  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    if (!on) impl_->grad.clear();
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  // The gradient slot is an accumulator shared by every handle, so it stays
  // writable through const handles (backward closures hold const copies).
  std::span<double> grad() const { return impl_->grad; }
  double* grad_ptr() const { return impl_->grad.data(); }
  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  Tensor clone() const {
    Tensor copy(impl_->shape, impl_->data, impl_->requires_grad);
    copy.impl_->grad = impl_->grad;
    return copy;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Recorded execution tape. Nodes are appended in execution order, so the
// vector is already a topological order; backward walks it in reverse.
class Graph {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Tensor loss) {
    if (loss.size() != 1) throw UsageError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.has_grad()) throw UsageError("loss does not require grad; nothing was recorded");
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline bool tracking(Graph* g, std::initializer_list<const Tensor*> ts) {
  return g != nullptr && any_grad(ts);
}

inline void ensure_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

inline void expect_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

inline void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void check_tokens(std::span<const std::int32_t> tokens, std::size_t vocab, const char* op) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab) {
      throw IndexError(std::string(op) + ": token id " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
}

// Logistic function evaluated without overflow. The result is kept inside
// the open interval even where the exact value rounds to 0 or 1.
inline double stable_sigmoid(double x) {
  double y;
  if (x >= 0.0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  return std::clamp(y, lo, hi);
}

}  // namespace detail

/// Row gather: out[i] = table[tokens[i]]. Shape [L, d].
inline Tensor embedding(Graph* g, std::span<const std::int32_t> tokens, const Tensor& table) {
  detail::expect_rank(table, 2, "embedding", "table");
  if (tokens.empty()) throw ShapeError("embedding: empty token sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  detail::check_tokens(tokens, vocab, "embedding");
  const bool track = detail::tracking(g, {&table});
  Tensor out({tokens.size(), d}, track);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::copy_n(table.ptr() + static_cast<std::size_t>(tokens[i]) * d, d, out.ptr() + i * d);
  }
  if (track) {
    g->record([out, table, toks = std::vector<std::int32_t>(tokens.begin(), tokens.end()), d]() mutable {
      for (std::size_t i = 0; i < toks.size(); ++i) {
        double* dst = table.grad_ptr() + static_cast<std::size_t>(toks[i]) * d;
        const double* src = out.grad_ptr() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Strided 1-D convolution over positions.
/// x [L, C_in], kernels [C_out, K, C_in], bias [C_out] -> [(L-K)/stride + 1, C_out].
inline Tensor conv1d(Graph* g, const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride) {
  detail::expect_rank(x, 2, "conv1d", "input");
  detail::expect_rank(kernels, 3, "conv1d", "kernels");
  detail::expect_rank(bias, 1, "conv1d", "bias");
  if (stride == 0) throw ShapeError("conv1d: stride must be >= 1");
  const std::size_t len = x.dim(0), cin = x.dim(1);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(1);
  if (kernels.dim(2) != cin) {
    throw ShapeError("conv1d: kernel channels " + std::to_string(kernels.dim(2)) + " != input channels " +
                     std::to_string(cin));
  }
  if (bias.dim(0) != cout) throw ShapeError("conv1d: bias length must equal output channels");
  if (len < k) {
    throw ShapeError("conv1d: input length " + std::to_string(len) + " is below the kernel size; need at least " +
                     std::to_string(k));
  }
  const std::size_t steps = (len - k) / stride + 1;
  const std::size_t span_len = k * cin;
  const bool track = detail::tracking(g, {&x, &kernels, &bias});
  Tensor out({steps, cout}, track);
  const double* xp = x.ptr();
  const double* kp = kernels.ptr();
  double* op = out.ptr();
  for (std::size_t t = 0; t < steps; ++t) {
    const double* window = xp + t * stride * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const double* kern = kp + o * span_len;
      double acc = bias[o];
      for (std::size_t j = 0; j < span_len; ++j) acc += window[j] * kern[j];
      op[t * cout + o] = acc;
    }
  }
  detail::ensure_finite(out, "conv1d");
  if (track) {
    g->record([out, x, kernels, bias, stride, steps, cout, cin, span_len]() mutable {
      const double* go = out.grad_ptr();
      const double* xd = x.ptr();
      const double* kd = kernels.ptr();
      double* gx = x.has_grad() ? x.grad_ptr() : nullptr;
      double* gk = kernels.has_grad() ? kernels.grad_ptr() : nullptr;
      double* gb = bias.has_grad() ? bias.grad_ptr() : nullptr;
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t base = t * stride * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const double gv = go[t * cout + o];
          if (gv == 0.0) continue;
          if (gb) gb[o] += gv;
          const double* kern = kd + o * span_len;
          if (gx) {
            for (std::size_t j = 0; j < span_len; ++j) gx[base + j] += gv * kern[j];
          }
          if (gk) {
            double* gkern = gk + o * span_len;
            for (std::size_t j = 0; j < span_len; ++j) gkern[j] += gv * xd[base + j];
          }
        }
      }
    });
  }
  return out;
}

/// Folds an embedding table into a convolution's kernels:
/// out[k, v, o] = sum_c table[v, c] * kernels[o, k, c]. Shape [K, V, C_out].
///
/// table_conv1d over this product equals conv1d(embedding(tokens, table)),
/// but costs K*C_out adds per output position instead of K*d*C_out MACs,
/// and the table is shared by every sample of a batch.
inline Tensor embed_conv_table(Graph* g, const Tensor& table, const Tensor& kernels) {
  detail::expect_rank(table, 2, "embed_conv_table", "table");
  detail::expect_rank(kernels, 3, "embed_conv_table", "kernels");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(1);
  if (kernels.dim(2) != d) throw ShapeError("embed_conv_table: kernel channels must equal embedding width");
  const bool track = detail::tracking(g, {&table, &kernels});
  Tensor out({k, vocab, cout}, track);
  // Transposed kernels [K, C_out, d] keep the inner loop contiguous.
  std::vector<double> wt(k * cout * d);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t kk = 0; kk < k; ++kk)
      for (std::size_t c = 0; c < d; ++c) wt[(kk * cout + o) * d + c] = kernels[(o * k + kk) * d + c];
  double* op = out.ptr();
  for (std::size_t kk = 0; kk < k; ++kk) {
    for (std::size_t v = 0; v < vocab; ++v) {
      const double* e = table.ptr() + v * d;
      double* row = op + (kk * vocab + v) * cout;
      for (std::size_t o = 0; o < cout; ++o) {
        const double* w = wt.data() + (kk * cout + o) * d;
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += e[c] * w[c];
        row[o] = acc;
      }
    }
  }
  detail::ensure_finite(out, "embed_conv_table");
  if (track) {
    g->record([out, table, kernels, vocab, d, cout, k, wt = std::move(wt)]() mutable {
      const double* go = out.grad_ptr();
      double* ge = table.has_grad() ? table.grad_ptr() : nullptr;
      double* gw = kernels.has_grad() ? kernels.grad_ptr() : nullptr;
      std::vector<double> gwt(gw ? k * cout * d : 0, 0.0);
      for (std::size_t kk = 0; kk < k; ++kk) {
        for (std::size_t v = 0; v < vocab; ++v) {
          const double* grow = go + (kk * vocab + v) * cout;
          bool any = false;
          for (std::size_t o = 0; o < cout && !any; ++o) any = grow[o] != 0.0;
          if (!any) continue;
          const double* e = table.ptr() + v * d;
          for (std::size_t o = 0; o < cout; ++o) {
            const double gv = grow[o];
            if (gv == 0.0) continue;
            const double* w = wt.data() + (kk * cout + o) * d;
            if (ge) {
              double* gev = ge + v * d;
              for (std::size_t c = 0; c < d; ++c) gev[c] += gv * w[c];
            }
            if (gw) {
              double* gwv = gwt.data() + (kk * cout + o) * d;
              for (std::size_t c = 0; c < d; ++c) gwv[c] += gv * e[c];
            }
          }
        }
      }
      if (gw) {
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t c = 0; c < d; ++c) gw[(o * k + kk) * d + c] += gwt[(kk * cout + o) * d + c];
      }
    });
  }
  return out;
}

/// Convolution of a token sequence through a folded table from
/// embed_conv_table: out[t, o] = bias[o] + sum_k table[k, tokens[t*stride + k], o].
inline Tensor table_conv1d(Graph* g, std::span<const std::int32_t> tokens, const Tensor& table, const Tensor& bias,
                           std::size_t stride) {
  detail::expect_rank(table, 3, "table_conv1d", "table");
  detail::expect_rank(bias, 1, "table_conv1d", "bias");
  if (stride == 0) throw ShapeError("table_conv1d: stride must be >= 1");
  const std::size_t k = table.dim(0), vocab = table.dim(1), cout = table.dim(2);
  if (bias.dim(0) != cout) throw ShapeError("table_conv1d: bias length must equal output channels");
  if (tokens.size() < k) {
    throw ShapeError("table_conv1d: input length " + std::to_string(tokens.size()) +
                     " is below the kernel size; need at least " + std::to_string(k));
  }
  detail::check_tokens(tokens, vocab, "table_conv1d");
  const std::size_t steps = (tokens.size() - k) / stride + 1;
  const bool track = detail::tracking(g, {&table, &bias});
  Tensor out({steps, cout}, track);
  double* op = out.ptr();
  const double* tp = table.ptr();
  for (std::size_t t = 0; t < steps; ++t) {
    double* row = op + t * cout;
    std::copy_n(bias.ptr(), cout, row);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* src = tp + (kk * vocab + static_cast<std::size_t>(tokens[t * stride + kk])) * cout;
      for (std::size_t o = 0; o < cout; ++o) row[o] += src[o];
    }
  }
  detail::ensure_finite(out, "table_conv1d");
  if (track) {
    g->record([out, table, bias, toks = std::vector<std::int32_t>(tokens.begin(), tokens.end()), stride, steps, k,
               vocab, cout]() mutable {
      const double* go = out.grad_ptr();
      double* gt = table.has_grad() ? table.grad_ptr() : nullptr;
      double* gb = bias.has_grad() ? bias.grad_ptr() : nullptr;
      for (std::size_t t = 0; t < steps; ++t) {
        const double* grow = go + t * cout;
        if (gb) {
          for (std::size_t o = 0; o < cout; ++o) gb[o] += grow[o];
        }
        if (gt) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            double* dst = gt + (kk * vocab + static_cast<std::size_t>(toks[t * stride + kk])) * cout;
            for (std::size_t o = 0; o < cout; ++o) dst[o] += grow[o];
          }
        }
      }
    });
  }
  return out;
}

/// Adaptive max pooling over positions. Output row j is the column-wise max
/// of rows [floor(j*L/out_len), floor((j+1)*L/out_len)).
inline Tensor temporal_max_pool(Graph* g, const Tensor& x, std::size_t out_len) {
  detail::expect_rank(x, 2, "temporal_max_pool", "input");
  const std::size_t len = x.dim(0), ch = x.dim(1);
  if (out_len == 0 || out_len > len) {
    throw ShapeError("temporal_max_pool: output length " + std::to_string(out_len) + " must be in [1, " +
                     std::to_string(len) + "]");
  }
  const bool track = detail::tracking(g, {&x});
  Tensor out({out_len, ch}, track);
  std::vector<std::size_t> arg(out_len * ch);
  for (std::size_t j = 0; j < out_len; ++j) {
    const std::size_t lo = j * len / out_len, hi = (j + 1) * len / out_len;
    for (std::size_t c = 0; c < ch; ++c) {
      std::size_t best = lo;
      double bv = x[lo * ch + c];
      for (std::size_t t = lo + 1; t < hi; ++t) {
        if (x[t * ch + c] > bv) {
          bv = x[t * ch + c];
          best = t;
        }
      }
      out[j * ch + c] = bv;
      arg[j * ch + c] = best * ch + c;
    }
  }
  if (track) {
    g->record([out, x, arg = std::move(arg)]() mutable {
      double* gx = x.grad_ptr();
      const double* go = out.grad_ptr();
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
    });
  }
  return out;
}

/// Per-position channel statistics: out[t] = [mean_c x[t,c], max_c x[t,c]].
inline Tensor channel_avg_max_pool(Graph* g, const Tensor& x) {
  detail::expect_rank(x, 2, "channel_avg_max_pool", "input");
  const std::size_t len = x.dim(0), ch = x.dim(1);
  const bool track = detail::tracking(g, {&x});
  Tensor out({len, 2}, track);
  std::vector<std::size_t> arg(len);
  for (std::size_t t = 0; t < len; ++t) {
    const double* row = x.ptr() + t * ch;
    double sum = 0.0;
    std::size_t best = 0;
    for (std::size_t c = 0; c < ch; ++c) {
      sum += row[c];
      if (row[c] > row[best]) best = c;
    }
    out[t * 2] = sum / static_cast<double>(ch);
    out[t * 2 + 1] = row[best];
    arg[t] = best;
  }
  if (track) {
    g->record([out, x, arg = std::move(arg), len, ch]() mutable {
      double* gx = x.grad_ptr();
      const double* go = out.grad_ptr();
      const double inv = 1.0 / static_cast<double>(ch);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < ch; ++c) gx[t * ch + c] += go[t * 2] * inv;
        gx[t * ch + arg[t]] += go[t * 2 + 1];
      }
    });
  }
  return out;
}

/// Dense layer: W [n_out, n_in] * x [n_in] + b [n_out].
inline Tensor affine(Graph* g, const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::expect_rank(x, 1, "affine", "input");
  detail::expect_rank(w, 2, "affine", "weight");
  detail::expect_rank(b, 1, "affine", "bias");
  const std::size_t nout = w.dim(0), nin = w.dim(1);
  if (x.dim(0) != nin || b.dim(0) != nout) {
    throw ShapeError("affine: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()) +
                     " and bias " + shape_str(b.shape()));
  }
  const bool track = detail::tracking(g, {&x, &w, &b});
  Tensor out({nout}, track);
  for (std::size_t o = 0; o < nout; ++o) {
    double acc = b[o];
    const double* row = w.ptr() + o * nin;
    for (std::size_t i = 0; i < nin; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
  detail::ensure_finite(out, "affine");
  if (track) {
    g->record([out, x, w, b, nout, nin]() mutable {
      const double* go = out.grad_ptr();
      for (std::size_t o = 0; o < nout; ++o) {
        if (b.has_grad()) b.grad()[o] += go[o];
        if (w.has_grad()) {
          for (std::size_t i = 0; i < nin; ++i) w.grad()[o * nin + i] += go[o] * x[i];
        }
        if (x.has_grad()) {
          for (std::size_t i = 0; i < nin; ++i) x.grad()[i] += go[o] * w[o * nin + i];
        }
      }
    });
  }
  return out;
}

namespace detail {

// Elementwise unary op; `deriv` maps (input, output) to the local derivative.
template <typename Fwd, typename Deriv>
Tensor unary(Graph* g, const Tensor& x, Fwd fwd, Deriv deriv) {
  const bool track = tracking(g, {&x});
  Tensor out(x.shape(), track);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  if (track) {
    g->record([out, x, deriv]() mutable {
      double* gx = x.grad_ptr();
      const double* go = out.grad_ptr();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += go[i] * deriv(x[i], out[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sigmoid(Graph* g, const Tensor& x) {
  return detail::unary(
      g, x, [](double v) { return detail::stable_sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(Graph* g, const Tensor& x) {
  return detail::unary(
      g, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(Graph* g, const Tensor& x) {
  return detail::unary(
      g, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// 1 - x, elementwise.
inline Tensor one_minus(Graph* g, const Tensor& x) {
  return detail::unary(
      g, x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

inline Tensor scale(Graph* g, const Tensor& x, double factor) {
  return detail::unary(
      g, x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add(Graph* g, const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "add");
  const bool track = detail::tracking(g, {&a, &b});
  Tensor out(a.shape(), track);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  detail::ensure_finite(out, "add");
  if (track) {
    g->record([out, a, b]() mutable {
      const double* go = out.grad_ptr();
      if (a.has_grad())
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
      if (b.has_grad())
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] += go[i];
    });
  }
  return out;
}

inline Tensor mul(Graph* g, const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "mul");
  const bool track = detail::tracking(g, {&a, &b});
  Tensor out(a.shape(), track);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  detail::ensure_finite(out, "mul");
  if (track) {
    g->record([out, a, b]() mutable {
      const double* go = out.grad_ptr();
      if (a.has_grad())
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i] * b[i];
      if (b.has_grad())
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] += go[i] * a[i];
    });
  }
  return out;
}

/// Scales every row of x [L, C] by the matching entry of weights [L, 1].
inline Tensor mul_rows(Graph* g, const Tensor& weights, const Tensor& x) {
  detail::expect_rank(weights, 2, "mul_rows", "weights");
  detail::expect_rank(x, 2, "mul_rows", "input");
  if (weights.dim(1) != 1 || weights.dim(0) != x.dim(0)) {
    throw ShapeError("mul_rows: weights " + shape_str(weights.shape()) + " do not broadcast over " +
                     shape_str(x.shape()));
  }
  const std::size_t len = x.dim(0), ch = x.dim(1);
  const bool track = detail::tracking(g, {&weights, &x});
  Tensor out(x.shape(), track);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < ch; ++c) out[t * ch + c] = weights[t] * x[t * ch + c];
  detail::ensure_finite(out, "mul_rows");
  if (track) {
    g->record([out, weights, x, len, ch]() mutable {
      const double* go = out.grad_ptr();
      for (std::size_t t = 0; t < len; ++t) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ch; ++c) {
          acc += go[t * ch + c] * x[t * ch + c];
          if (x.has_grad()) x.grad()[t * ch + c] += go[t * ch + c] * weights[t];
        }
        if (weights.has_grad()) weights.grad()[t] += acc;
      }
    });
  }
  return out;
}

/// Stacks a [La, C] on top of b [Lb, C].
inline Tensor concat_rows(Graph* g, const Tensor& a, const Tensor& b) {
  detail::expect_rank(a, 2, "concat_rows", "first");
  detail::expect_rank(b, 2, "concat_rows", "second");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_rows: channel counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const bool track = detail::tracking(g, {&a, &b});
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)}, track);
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  if (track) {
    g->record([out, a, b]() mutable {
      const double* go = out.grad_ptr();
      if (a.has_grad())
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
      if (b.has_grad())
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] += go[a.size() + i];
    });
  }
  return out;
}

inline Tensor reshape(Graph* g, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = detail::tracking(g, {&x});
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), track);
  if (track) {
    g->record([out, x]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

inline Tensor sum(Graph* g, const Tensor& x) {
  const bool track = detail::tracking(g, {&x});
  Tensor out({1}, track);
  out[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  if (track) {
    g->record([out, x]() mutable {
      const double go = out.grad()[0];
      for (double& v : x.grad()) v += go;
    });
  }
  return out;
}

struct SoftmaxLoss {
  Tensor loss;           // [1]
  Tensor probabilities;  // [n], never requires grad
};

/// Max-shifted softmax followed by the negative log-likelihood of `label`.
inline SoftmaxLoss softmax_cross_entropy(Graph* g, const Tensor& logits, std::size_t label) {
  detail::expect_rank(logits, 1, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0);
  if (label >= n) throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
  detail::ensure_finite(logits, "softmax_cross_entropy input");
  const double shift = *std::max_element(logits.data().begin(), logits.data().end());
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) denom += std::exp(logits[i] - shift);
  Tensor probs({n});
  for (std::size_t i = 0; i < n; ++i) probs[i] = std::exp(logits[i] - shift) / denom;
  const bool track = detail::tracking(g, {&logits});
  Tensor loss({1}, track);
  loss[0] = -((logits[label] - shift) - std::log(denom));
  if (track) {
    g->record([loss, logits, probs, label, n]() mutable {
      const double go = loss.grad()[0];
      for (std::size_t i = 0; i < n; ++i) logits.grad()[i] += go * (probs[i] - (i == label ? 1.0 : 0.0));
    });
  }
  return {loss, probs};
}

// ---------------------------------------------------------------------------
// Initialization

inline void init_uniform_xavier(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
}

inline void init_normal(Tensor& t, double stddev, Rng& rng) {
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }

  // Applies one bias-corrected update to every parameter and zeroes the grads.
  void step(std::span<Tensor> params) {
    if (first_.empty()) {
      for (const Tensor& p : params) {
        first_.emplace_back(p.size(), 0.0);
        second_.emplace_back(p.size(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw UsageError("adam: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) throw UsageError("adam: parameter " + std::to_string(i) + " has no gradient");
      if (first_[i].size() != params[i].size()) throw UsageError("adam: parameter " + std::to_string(i) + " resized");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      auto grad = p.grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = grad[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
      p.zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t step_ = 0;
};

inline void adam_step(std::span<Tensor> params, AdamState& state) { state.step(params); }

}  // namespace armd
