#pragma once

// The four detector architectures and their training loop.
//
//   malconv  embed(257,d) -> conv(K, stride, C) -> relu -> max pool to L_f
//            -> global max -> dense(C, 2) -> softmax
//   nonneg   malconv with conv and dense weights projected onto w >= 0
//            after every optimizer step
//   convnet  embed -> 3 x [conv(8, stride 4, C) -> relu] -> global max -> dense
//   armd     one embed/conv/relu/pool extractor per view (no shared weights)
//            -> fuse -> global max -> dense -> softmax
//
// The embedding and the first convolution of every extractor run through
// embed_conv_table/table_conv1d, which computes exactly the same function
// as embedding followed by conv1d.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "armd/corpus.hpp"
#include "armd/errors.hpp"
#include "armd/fusion.hpp"
#include "armd/io.hpp"
#include "armd/metrics.hpp"
#include "armd/rng.hpp"
#include "armd/tensor.hpp"
#include "armd/views.hpp"

namespace armd {

enum class Arch { malconv, nonneg, convnet, armd };

inline constexpr std::array<Arch, 4> kArchs{Arch::malconv, Arch::nonneg, Arch::convnet, Arch::armd};

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::malconv: return "malconv";
    case Arch::nonneg: return "nonneg";
    case Arch::convnet: return "convnet";
    case Arch::armd: return "armd";
  }
  return "malconv";
}

inline Arch parse_arch(std::string_view name) {
  for (Arch a : kArchs) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

inline constexpr std::size_t kConvNetKernel = 8;
inline constexpr std::size_t kConvNetStride = 4;
inline constexpr std::size_t kConvNetLayers = 3;

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t patience = 3;
  std::uint64_t seed = 7;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct DetectorConfig {
  Arch arch = Arch::malconv;
  FusionKind fusion = FusionKind::attention_highway;  // armd only
  std::size_t embedding_dim = 8;
  std::size_t channels = 32;
  std::size_t kernel = 16;
  std::size_t stride = 8;
  std::size_t source_kernel = 4;  // armd source-view extractor
  std::size_t source_stride = 2;
  std::size_t pooled_length = 64;  // L_f
  ViewConfig view;
  TrainConfig train;

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;

  static std::size_t conv_steps(std::size_t len, std::size_t k, std::size_t s) {
    return len < k ? 0 : (len - k) / s + 1;
  }

  void validate() const {
    view.validate();
    if (embedding_dim == 0 || channels == 0 || kernel == 0 || stride == 0 || source_kernel == 0 ||
        source_stride == 0 || pooled_length == 0) {
      throw ConfigError("detector dimensions must be positive");
    }
    if (train.epochs == 0 || train.batch_size == 0 || !(train.lr > 0.0)) {
      throw ConfigError("epochs, batch size and learning rate must be positive");
    }
    if (arch == Arch::convnet) {
      std::size_t len = view.binary_length;
      for (std::size_t i = 0; i < kConvNetLayers; ++i) len = conv_steps(len, kConvNetKernel, kConvNetStride);
      if (len == 0) throw ConfigError("binary view too short for the convnet stack");
      return;
    }
    if (conv_steps(view.binary_length, kernel, stride) < pooled_length) {
      throw ConfigError("binary view convolution yields fewer than pooled_length positions");
    }
    if (arch == Arch::armd && conv_steps(view.source_length, source_kernel, source_stride) < pooled_length) {
      throw ConfigError("source view convolution yields fewer than pooled_length positions");
    }
  }
};

inline nlohmann::json to_json(const DetectorConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  j["fusion"] = to_string(c.fusion);
  j["embedding_dim"] = c.embedding_dim;
  j["channels"] = c.channels;
  j["kernel"] = c.kernel;
  j["stride"] = c.stride;
  j["source_kernel"] = c.source_kernel;
  j["source_stride"] = c.source_stride;
  j["pooled_length"] = c.pooled_length;
  j["view"] = {{"binary_length", c.view.binary_length},
               {"source_length", c.view.source_length},
               {"source_vocab", c.view.source_vocab},
               {"min_string_len", c.view.min_string_len}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"patience", c.train.patience},
                {"seed", c.train.seed}};
  return j;
}

// Missing keys keep their defaults, so partial config files are accepted.
inline DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig c = {}) {
  try {
    if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
    if (j.contains("fusion")) c.fusion = parse_fusion_kind(j.at("fusion").get<std::string>());
    auto take = [&j](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    take("embedding_dim", c.embedding_dim);
    take("channels", c.channels);
    take("kernel", c.kernel);
    take("stride", c.stride);
    take("source_kernel", c.source_kernel);
    take("source_stride", c.source_stride);
    take("pooled_length", c.pooled_length);
    if (j.contains("view")) {
      const auto& v = j.at("view");
      auto takev = [&v](const char* key, auto& field) {
        if (v.contains(key)) field = v.at(key).get<std::remove_reference_t<decltype(field)>>();
      };
      takev("binary_length", c.view.binary_length);
      takev("source_length", c.view.source_length);
      takev("source_vocab", c.view.source_vocab);
      takev("min_string_len", c.view.min_string_len);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      auto taket = [&t](const char* key, auto& field) {
        if (t.contains(key)) field = t.at(key).get<std::remove_reference_t<decltype(field)>>();
      };
      taket("epochs", c.train.epochs);
      taket("batch_size", c.train.batch_size);
      taket("lr", c.train.lr);
      taket("patience", c.train.patience);
      taket("seed", c.train.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct TrainingHistory {
  std::vector<double> train_loss;
  std::vector<double> val_f1;
  std::size_t best_epoch = 0;  // 1-based; 0 before training
  bool stopped_early = false;

  friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

// Copies share parameter storage (Tensor is a handle); use clone() for an
// independent model.
class DetectorModel {
 public:
  DetectorConfig config;
  std::vector<NamedTensor> params;
  TrainingHistory history;

  bool has(std::string_view name) const {
    return std::any_of(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
  }

  const Tensor& param(std::string_view name) const {
    for (const auto& p : params) {
      if (p.name == name) return p.value;
    }
    throw UsageError("model has no parameter '" + std::string(name) + "'");
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.value);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  DetectorModel clone() const {
    DetectorModel m{config, {}, history};
    for (const auto& p : params) m.params.push_back({p.name, p.value.clone()});
    return m;
  }

  void add(std::string name, Tensor t) {
    if (has(name)) throw UsageError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    params.push_back({std::move(name), std::move(t)});
  }
};

namespace detail {

inline Tensor conv_kernel(std::size_t cout, std::size_t k, std::size_t cin, Rng& rng) {
  Tensor t({cout, k, cin});
  init_uniform_xavier(t, cin * k, cout * k, rng);
  return t;
}

inline Tensor dense_weight(std::size_t nout, std::size_t nin, Rng& rng) {
  Tensor t({nout, nin});
  init_uniform_xavier(t, nin, nout, rng);
  return t;
}

inline Tensor embedding_table(std::size_t vocab, std::size_t d, Rng& rng) {
  Tensor t({vocab, d});
  init_normal(t, 0.05, rng);
  return t;
}

inline void add_extractor(DetectorModel& m, const std::string& prefix, std::size_t vocab, std::size_t k, Rng& rng) {
  const auto& c = m.config;
  m.add(prefix + "embed", embedding_table(vocab, c.embedding_dim, rng));
  m.add(prefix + "conv.w", conv_kernel(c.channels, k, c.embedding_dim, rng));
  m.add(prefix + "conv.b", Tensor({c.channels}));
}

}  // namespace detail

inline DetectorModel build(const DetectorConfig& config) {
  config.validate();
  DetectorModel m;
  m.config = config;
  Rng rng(derive_seed(config.train.seed, 0x1417));
  const std::size_t ch = config.channels;
  switch (config.arch) {
    case Arch::malconv:
    case Arch::nonneg:
      detail::add_extractor(m, "", kBinaryVocab, config.kernel, rng);
      break;
    case Arch::convnet:
      m.add("embed", detail::embedding_table(kBinaryVocab, config.embedding_dim, rng));
      for (std::size_t i = 1; i <= kConvNetLayers; ++i) {
        const std::string p = "conv" + std::to_string(i);
        m.add(p + ".w", detail::conv_kernel(ch, kConvNetKernel, i == 1 ? config.embedding_dim : ch, rng));
        m.add(p + ".b", Tensor({ch}));
      }
      break;
    case Arch::armd: {
      detail::add_extractor(m, "bin.", kBinaryVocab, config.kernel, rng);
      detail::add_extractor(m, "src.", config.view.source_vocab, config.source_kernel, rng);
      const FusionParams f = make_fusion_params(config.fusion, ch, rng);
      if (f.attention) {
        m.add("fusion.att.w", f.attention->weight);
        m.add("fusion.att.b", f.attention->bias);
      }
      if (f.highway) {
        m.add("fusion.hw.wh", f.highway->transform_weight);
        m.add("fusion.hw.bh", f.highway->transform_bias);
        m.add("fusion.hw.wt", f.highway->gate_weight);
        m.add("fusion.hw.bt", f.highway->gate_bias);
      }
      break;
    }
  }
  m.add("head.w", detail::dense_weight(2, ch, rng));
  m.add("head.b", Tensor({2}));
  return m;
}

inline FusionParams fusion_params(const DetectorModel& m) {
  FusionParams f;
  f.kind = m.config.fusion;
  if (uses_attention(f.kind)) f.attention = AttentionParams{m.param("fusion.att.w"), m.param("fusion.att.b")};
  if (uses_highway(f.kind)) {
    f.highway = HighwayParams{m.param("fusion.hw.wh"), m.param("fusion.hw.bh"), m.param("fusion.hw.wt"),
                              m.param("fusion.hw.bt")};
  }
  return f;
}

// Embedding tables folded into first-layer kernels. They depend only on the
// weights, so one set serves a whole batch (training) or a whole attack
// campaign (inference).
struct FoldedTables {
  Tensor binary;
  Tensor source;  // armd only
};

inline FoldedTables fold_tables(Graph* g, const DetectorModel& m) {
  FoldedTables t;
  switch (m.config.arch) {
    case Arch::malconv:
    case Arch::nonneg:
      t.binary = embed_conv_table(g, m.param("embed"), m.param("conv.w"));
      break;
    case Arch::convnet:
      t.binary = embed_conv_table(g, m.param("embed"), m.param("conv1.w"));
      break;
    case Arch::armd:
      t.binary = embed_conv_table(g, m.param("bin.embed"), m.param("bin.conv.w"));
      t.source = embed_conv_table(g, m.param("src.embed"), m.param("src.conv.w"));
      break;
  }
  return t;
}

namespace detail {

inline Tensor global_max(Graph* g, const Tensor& x) {
  return reshape(g, temporal_max_pool(g, x, 1), {x.dim(1)});
}

}  // namespace detail

/// Pooled per-view feature map [L_f, C] of one extractor.
inline Tensor view_features(Graph* g, const Tensor& table, const Tensor& bias, std::span<const std::int32_t> tokens,
                            std::size_t stride, std::size_t pooled_length) {
  return temporal_max_pool(g, relu(g, table_conv1d(g, tokens, table, bias, stride)), pooled_length);
}

inline void check_views(const DetectorConfig& c, const SampleViews& v) {
  if (v.binary_tokens.size() != c.view.binary_length) {
    throw ShapeError("binary view has " + std::to_string(v.binary_tokens.size()) + " tokens, model expects " +
                     std::to_string(c.view.binary_length));
  }
  if (c.arch == Arch::armd && v.source_tokens.size() != c.view.source_length) {
    throw ShapeError("source view has " + std::to_string(v.source_tokens.size()) + " tokens, model expects " +
                     std::to_string(c.view.source_length));
  }
}

inline Tensor forward_logits(Graph* g, const DetectorModel& m, const FoldedTables& tables, const SampleViews& v) {
  const DetectorConfig& c = m.config;
  check_views(c, v);
  Tensor pooled;
  switch (c.arch) {
    case Arch::malconv:
    case Arch::nonneg:
      pooled = detail::global_max(
          g, view_features(g, tables.binary, m.param("conv.b"), v.binary_tokens, c.stride, c.pooled_length));
      break;
    case Arch::convnet: {
      Tensor h = relu(g, table_conv1d(g, v.binary_tokens, tables.binary, m.param("conv1.b"), kConvNetStride));
      for (std::size_t i = 2; i <= kConvNetLayers; ++i) {
        const std::string p = "conv" + std::to_string(i);
        h = relu(g, conv1d(g, h, m.param(p + ".w"), m.param(p + ".b"), kConvNetStride));
      }
      pooled = detail::global_max(g, h);
      break;
    }
    case Arch::armd: {
      const Tensor bin =
          view_features(g, tables.binary, m.param("bin.conv.b"), v.binary_tokens, c.stride, c.pooled_length);
      const Tensor src = view_features(g, tables.source, m.param("src.conv.b"), v.source_tokens, c.source_stride,
                                       c.pooled_length);
      pooled = detail::global_max(g, fuse(g, src, bin, fusion_params(m)));
      break;
    }
  }
  return affine(g, pooled, m.param("head.w"), m.param("head.b"));
}

struct Prediction {
  int label = 1;
  std::array<double, 2> probabilities{0.5, 0.5};
};

// An exact 0.5/0.5 split is reported as malicious.
inline Prediction decide(const Tensor& logits) {
  const SoftmaxLoss s = softmax_cross_entropy(nullptr, logits, 0);
  Prediction p;
  p.probabilities = {s.probabilities[0], s.probabilities[1]};
  p.label = p.probabilities[1] >= p.probabilities[0] ? 1 : 0;
  return p;
}

/// Read-only inference over a snapshot of a model's weights. Safe to share
/// between threads.
class Classifier {
 public:
  explicit Classifier(const DetectorModel& model) : model_(model), tables_(fold_tables(nullptr, model_)) {}

  Prediction predict(const SampleViews& v) const { return decide(forward_logits(nullptr, model_, tables_, v)); }

  const DetectorConfig& config() const { return model_.config; }

 private:
  DetectorModel model_;
  FoldedTables tables_;
};

inline Prediction predict(const DetectorModel& model, const SampleViews& v) { return Classifier(model).predict(v); }

// ---------------------------------------------------------------------------
// Training

struct Dataset {
  std::vector<SampleViews> samples;
  std::vector<std::string> paths;

  std::size_t size() const { return samples.size(); }
};

inline Dataset load_dataset(const std::filesystem::path& dir, std::span<const ManifestRecord> records,
                            const ViewConfig& cfg) {
  Dataset d;
  for (const auto& r : records) {
    const std::filesystem::path path = dir / r.path;
    try {
      const Bytes bytes = read_bytes(path);
      d.samples.push_back(make_views(bytes, cfg, r.label));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    d.paths.push_back(path.string());
  }
  return d;
}

inline void project_nonneg(DetectorModel& m) {
  if (m.config.arch != Arch::nonneg) throw UsageError("non-negativity projection applies to the nonneg arch only");
  for (auto& p : m.params) {
    const bool weight = p.name.size() >= 2 && p.name.compare(p.name.size() - 2, 2, ".w") == 0;
    if (!weight) continue;
    for (double& v : p.value.data()) v = std::max(v, 0.0);
  }
}

// Stops once `patience` consecutive epochs fail to beat the best score.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Returns true when `score` is a new best.
  bool update(double score) {
    ++epoch_;
    if (epoch_ == 1 || score > best_) {
      best_ = score;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return patience_ > 0 && stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_score() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = 0.0;
};

inline ConfusionCounts evaluate(const Classifier& clf, const Dataset& data) {
  ConfusionCounts c;
  for (const auto& s : data.samples) {
    if (!s.label) throw DataError("evaluation sample without a label");
    c.add(*s.label, clf.predict(s).label);
  }
  return c;
}

/// Mini-batch Adam on mean cross-entropy with a seeded per-epoch shuffle.
/// Keeps the weights of the epoch with the best validation F1.
inline TrainingHistory train(DetectorModel& model, const Dataset& train_set, const Dataset& val_set) {
  if (train_set.size() == 0) throw DataError("training set is empty");
  if (val_set.size() == 0) throw DataError("validation set is empty");
  for (const auto& s : train_set.samples) {
    if (!s.label) throw DataError("training sample without a label");
  }
  const TrainConfig& tc = model.config.train;
  AdamState adam(AdamConfig{tc.lr});
  std::vector<Tensor> params = model.tensors();
  EarlyStopping stopper(tc.patience);
  TrainingHistory history;
  std::vector<std::vector<double>> best;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(tc.seed, 0x5A5A0000 + epoch));
    shuffle_rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      Graph g;
      const FoldedTables tables = fold_tables(&g, model);
      Tensor total;
      for (std::size_t i = start; i < end; ++i) {
        const SampleViews& s = train_set.samples[order[i]];
        const Tensor logits = forward_logits(&g, model, tables, s);
        const Tensor loss = softmax_cross_entropy(&g, logits, static_cast<std::size_t>(*s.label)).loss;
        total = total.defined() ? add(&g, total, loss) : loss;
      }
      const Tensor mean = scale(&g, total, 1.0 / static_cast<double>(end - start));
      g.backward(mean);
      adam_step(params, adam);
      if (model.config.arch == Arch::nonneg) project_nonneg(model);
      loss_sum += mean.item();
      ++batches;
    }
    history.train_loss.push_back(loss_sum / static_cast<double>(batches));
    const double f1 = compute_metrics(evaluate(Classifier(model), val_set)).f1;
    history.val_f1.push_back(f1);
    if (stopper.update(f1)) {
      best.clear();
      for (const Tensor& p : params) best.emplace_back(p.data().begin(), p.data().end());
    }
    if (stopper.should_stop()) {
      history.stopped_early = true;
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(best[i].begin(), best[i].end(), params[i].data().begin());
  history.best_epoch = stopper.best_epoch();
  model.history = history;
  return history;
}

}  // namespace armd
