#pragma once

// Helpers shared by the unit tests and the acceptance runner: random
// tensors, a central-difference gradient checker, naive-loop reference
// implementations and scratch directories.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "armd/rng.hpp"
#include "armd/tensor.hpp"
#include "armd/texe.hpp"

namespace armd::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = static_cast<std::int32_t>(rng.below(vocab));
  return t;
}

// loss = sum(out * weights), with fixed random weights so every output
// element influences the loss differently.
inline Tensor probe_loss(Graph* g, const Tensor& out, const Tensor& weights) {
  return sum(g, mul(g, out, weights));
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t elements = 0;
};

// Relative error |a - n| / max(|a|, |n|), with the denominator floored at
// 1e-6: below that the finite difference itself carries no relative accuracy.
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Compares backprop gradients of `loss_fn` w.r.t. every element of `wrt`
/// against central differences with step h.
inline GradCheck grad_check(const std::function<Tensor(Graph*)>& loss_fn, const std::vector<Tensor>& wrt,
                            double h = 1e-5) {
  for (const Tensor& t : wrt) t.zero_grad();
  Graph g;
  g.backward(loss_fn(&g));
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheck r;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    Tensor t = wrt[i];
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double saved = t[j];
      t[j] = saved + h;
      const double up = loss_fn(nullptr).item();
      t[j] = saved - h;
      const double down = loss_fn(nullptr).item();
      t[j] = saved;
      r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[i][j], (up - down) / (2.0 * h)));
      ++r.elements;
    }
  }
  for (const Tensor& t : wrt) t.zero_grad();
  return r;
}

// ---------------------------------------------------------------------------
// Naive references, written as plain loops over the defining formulas.

inline std::vector<double> naive_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
  const std::size_t L = x.dim(0), cin = x.dim(1), cout = w.dim(0), K = w.dim(1);
  const std::size_t T = (L - K) / stride + 1;
  std::vector<double> out(T * cout);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < cin; ++c) acc += x[(t * stride + k) * cin + c] * w[(o * K + k) * cin + c];
      }
      out[t * cout + o] = acc;
    }
  }
  return out;
}

inline std::vector<double> naive_max_pool(const Tensor& x, std::size_t out_len) {
  const std::size_t L = x.dim(0), C = x.dim(1);
  std::vector<double> out(out_len * C);
  for (std::size_t j = 0; j < out_len; ++j) {
    const std::size_t lo = j * L / out_len, hi = (j + 1) * L / out_len;
    for (std::size_t c = 0; c < C; ++c) {
      double m = -INFINITY;
      for (std::size_t t = lo; t < hi; ++t) m = std::max(m, x[t * C + c]);
      out[j * C + c] = m;
    }
  }
  return out;
}

inline std::vector<double> naive_channel_pool(const Tensor& x) {
  const std::size_t L = x.dim(0), C = x.dim(1);
  std::vector<double> out(L * 2);
  for (std::size_t t = 0; t < L; ++t) {
    double s = 0.0, m = -INFINITY;
    for (std::size_t c = 0; c < C; ++c) {
      s += x[t * C + c];
      m = std::max(m, x[t * C + c]);
    }
    out[t * 2] = s / static_cast<double>(C);
    out[t * 2 + 1] = m;
  }
  return out;
}

inline std::vector<double> naive_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  std::vector<double> out(w.dim(0));
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < w.dim(1); ++i) acc += w[o * w.dim(1) + i] * x[i];
    out[o] = acc;
  }
  return out;
}

// Direct exp / sum, no max shift.
inline std::vector<double> naive_softmax(const Tensor& logits) {
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += std::exp(logits[i]);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i]) / z;
  return p;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------

// Random sections and overlay, laid out consistently.
inline TexeFile random_texe(Rng& rng) {
  TexeFile f;
  f.version = static_cast<std::uint16_t>(rng.below(65536));
  const std::size_t n = rng.below(5);
  for (std::size_t i = 0; i < n; ++i) {
    Section s;
    s.kind = rng.bernoulli(0.5) ? SectionKind::code : SectionKind::data;
    s.payload.resize(rng.below(200));
    for (auto& b : s.payload) b = rng.byte();
    f.sections.push_back(std::move(s));
  }
  f.overlay.resize(rng.bernoulli(0.5) ? rng.below(100) : 0);
  for (auto& b : f.overlay) b = rng.byte();
  relayout(f);
  return f;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "armd") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace armd::testing
