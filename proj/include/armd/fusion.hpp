#pragma once

// Fusion of the two per-view feature maps.
//
// Both maps are [L_f, C]; they are stacked along the position axis (source
// view first) into X [2*L_f, C]. The spatial attention map is
//   Y = sigmoid(conv1x1([mean_c X ; max_c X]))           -> [2*L_f, 1]
// and the highway layer, with the carry gate tied to the transform gate, is
//   highway(V) = T * H + V * (1 - T),  T = sigmoid(W_T V + b_T),
//                                      H = tanh(W_H V + b_H)
// where the dense maps act on the channel axis and are shared by all
// positions (a 1x1 convolution).

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "armd/errors.hpp"
#include "armd/rng.hpp"
#include "armd/tensor.hpp"

namespace armd {

enum class FusionKind { concat, attention, highway, highway_attention, attention_highway };

inline constexpr std::array<FusionKind, 5> kFusionKinds{FusionKind::concat, FusionKind::attention,
                                                        FusionKind::highway, FusionKind::highway_attention,
                                                        FusionKind::attention_highway};

inline std::string_view to_string(FusionKind k) {
  switch (k) {
    case FusionKind::concat: return "concat";
    case FusionKind::attention: return "attention";
    case FusionKind::highway: return "highway";
    case FusionKind::highway_attention: return "highway_attention";
    case FusionKind::attention_highway: return "attention_highway";
  }
  return "concat";
}

// Accepts both `attention_highway` and the CLI spelling `attention-highway`.
inline FusionKind parse_fusion_kind(std::string_view name) {
  std::string norm(name);
  for (char& c : norm) {
    if (c == '-') c = '_';
  }
  for (FusionKind k : kFusionKinds) {
    if (to_string(k) == norm) return k;
  }
  throw ConfigError("unknown fusion kind '" + std::string(name) + "'");
}

inline bool uses_attention(FusionKind k) {
  return k == FusionKind::attention || k == FusionKind::highway_attention || k == FusionKind::attention_highway;
}

inline bool uses_highway(FusionKind k) {
  return k == FusionKind::highway || k == FusionKind::highway_attention || k == FusionKind::attention_highway;
}

struct AttentionParams {
  Tensor weight;  // [1, 1, 2], the 1x1 convolution over [avg; max]
  Tensor bias;    // [1]
};

struct HighwayParams {
  Tensor transform_weight;  // W_H [w, 1, w]
  Tensor transform_bias;    // b_H [w]
  Tensor gate_weight;       // W_T [w, 1, w]
  Tensor gate_bias;         // b_T [w]

  std::size_t width() const { return gate_bias.dim(0); }
};

struct FusionParams {
  FusionKind kind = FusionKind::attention_highway;
  std::optional<AttentionParams> attention;
  std::optional<HighwayParams> highway;
};

inline constexpr double kGateBiasInit = -1.0;

inline AttentionParams make_attention_params(Rng& rng) {
  AttentionParams p{Tensor({1, 1, 2}, true), Tensor({1}, true)};
  init_uniform_xavier(p.weight, 2, 1, rng);
  return p;
}

inline HighwayParams make_highway_params(std::size_t width, Rng& rng) {
  HighwayParams p{Tensor({width, 1, width}, true), Tensor({width}, true), Tensor({width, 1, width}, true),
                  Tensor({width}, true)};
  init_uniform_xavier(p.transform_weight, width, width, rng);
  init_uniform_xavier(p.gate_weight, width, width, rng);
  for (double& v : p.gate_bias.data()) v = kGateBiasInit;
  return p;
}

/// Highway over attention contexts is one channel wide; plain highway fusion
/// is as wide as the feature maps.
inline FusionParams make_fusion_params(FusionKind kind, std::size_t channels, Rng& rng) {
  FusionParams p;
  p.kind = kind;
  if (uses_attention(kind)) p.attention = make_attention_params(rng);
  if (uses_highway(kind)) p.highway = make_highway_params(kind == FusionKind::attention_highway ? 1 : channels, rng);
  return p;
}

inline Tensor concat_fuse(Graph* g, const Tensor& source_view, const Tensor& binary_view) {
  if (source_view.shape() != binary_view.shape()) {
    throw ShapeError("concat_fuse: view feature maps differ " + shape_str(source_view.shape()) + " vs " +
                     shape_str(binary_view.shape()));
  }
  return concat_rows(g, source_view, binary_view);
}

/// Y [L, 1] with Y[t] = sigmoid(w . [mean_c X[t], max_c X[t]] + b).
inline Tensor attention_map(Graph* g, const Tensor& x, const AttentionParams& p) {
  return sigmoid(g, conv1d(g, channel_avg_max_pool(g, x), p.weight, p.bias, 1));
}

inline Tensor highway(Graph* g, const Tensor& input, const HighwayParams& p) {
  detail::expect_rank(input, 2, "highway", "input");
  if (input.dim(1) != p.width()) {
    throw ShapeError("highway: input width " + std::to_string(input.dim(1)) + " != layer width " +
                     std::to_string(p.width()));
  }
  const Tensor h = tanh(g, conv1d(g, input, p.transform_weight, p.transform_bias, 1));
  const Tensor t = sigmoid(g, conv1d(g, input, p.gate_weight, p.gate_bias, 1));
  return add(g, mul(g, t, h), mul(g, input, one_minus(g, t)));
}

inline Tensor fuse(Graph* g, const Tensor& source_view, const Tensor& binary_view, const FusionParams& p) {
  if (uses_attention(p.kind) && !p.attention) throw ConfigError("fusion kind needs attention parameters");
  if (uses_highway(p.kind) && !p.highway) throw ConfigError("fusion kind needs highway parameters");
  const Tensor x = concat_fuse(g, source_view, binary_view);
  switch (p.kind) {
    case FusionKind::concat:
      return x;
    case FusionKind::attention:
      return mul_rows(g, attention_map(g, x, *p.attention), x);
    case FusionKind::highway:
      return highway(g, x, *p.highway);
    case FusionKind::highway_attention: {
      const Tensor xh = highway(g, x, *p.highway);
      return mul_rows(g, attention_map(g, xh, *p.attention), xh);
    }
    case FusionKind::attention_highway: {
      const Tensor y = attention_map(g, x, *p.attention);
      return mul_rows(g, highway(g, y, *p.highway), x);
    }
  }
  throw ConfigError("unknown fusion kind");
}

}  // namespace armd
