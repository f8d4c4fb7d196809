#pragma once

// Experiment drivers (detection, robustness, fusion ablation), the
// checkpoint format and report writers.

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "armd/attack.hpp"
#include "armd/corpus.hpp"
#include "armd/detectors.hpp"
#include "armd/errors.hpp"
#include "armd/io.hpp"
#include "armd/metrics.hpp"
#include "armd/rng.hpp"

namespace armd {

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "ARMDCKPT" | u32 version | u32 n + config JSON | u32 tensor count |
//   per tensor: u16 n + name, u8 rank, u32 dims..., f64 data... | u32 CRC32
//
// All integers little-endian; the CRC covers every byte before it.

inline constexpr std::string_view kCheckpointMagic = "ARMDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { bad_magic, crc_mismatch, version_mismatch, truncated, malformed };

inline std::string_view to_string(CheckpointErrorKind k) {
  switch (k) {
    case CheckpointErrorKind::bad_magic: return "bad magic";
    case CheckpointErrorKind::crc_mismatch: return "CRC mismatch";
    case CheckpointErrorKind::version_mismatch: return "unsupported version";
    case CheckpointErrorKind::truncated: return "truncated";
    case CheckpointErrorKind::malformed: return "malformed";
  }
  return "malformed";
}

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& detail)
      : DataError("checkpoint " + std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay portable.
  std::size_t at = 0;
  while (at < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - at, 1u << 30);
    crc = crc32(crc, bytes.data() + at, static_cast<uInt>(n));
    at += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline Bytes serialize_checkpoint(const DetectorModel& m) {
  Bytes out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u32(out, kCheckpointVersion);
  const std::string cfg = to_json(m.config).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& p : m.params) {
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u8(out, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  put_u32(out, crc32_of(out));
  return out;
}

namespace detail {

class CheckpointReader {
 public:
  explicit CheckpointReader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n) const {
    if (b_.size() - at_ < n) throw CheckpointError(CheckpointErrorKind::truncated, "unexpected end of data");
  }
  std::uint8_t u8() { need(1); return b_[at_++]; }
  std::uint16_t u16() { need(2); auto v = get_u16(b_, at_); at_ += 2; return v; }
  std::uint32_t u32() { need(4); auto v = get_u32(b_, at_); at_ += 4; return v; }
  std::uint64_t u64() { need(8); auto v = get_u64(b_, at_); at_ += 8; return v; }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + at_), n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t at_ = 0;
};

}  // namespace detail

inline DetectorModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw CheckpointError(CheckpointErrorKind::bad_magic, "file does not start with ARMDCKPT");
  }
  if (bytes.size() < kCheckpointMagic.size() + 8) {
    throw CheckpointError(CheckpointErrorKind::truncated, "file too short");
  }
  const auto body = bytes.first(bytes.size() - 4);
  if (crc32_of(body) != get_u32(bytes, bytes.size() - 4)) {
    throw CheckpointError(CheckpointErrorKind::crc_mismatch, "stored CRC does not match contents");
  }
  detail::CheckpointReader r(body.subspan(kCheckpointMagic.size()));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::version_mismatch,
                          "version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  DetectorModel m;
  try {
    m = build(detector_config_from_json(nlohmann::json::parse(r.str(r.u32()))));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("config block: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  if (count != m.params.size()) {
    throw CheckpointError(CheckpointErrorKind::malformed, "expected " + std::to_string(m.params.size()) +
                                                              " tensors, found " + std::to_string(count));
  }
  for (auto& p : m.params) {
    const std::string name = r.str(r.u16());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (name != p.name || shape != p.value.shape()) {
      throw CheckpointError(CheckpointErrorKind::malformed, "tensor '" + name + "' " + shape_str(shape) +
                                                                " does not match '" + p.name + "' " +
                                                                shape_str(p.value.shape()));
    }
    for (double& v : p.value.data()) v = std::bit_cast<double>(r.u64());
  }
  if (!r.done()) throw CheckpointError(CheckpointErrorKind::malformed, "trailing bytes after tensors");
  return m;
}

inline void save_checkpoint(const DetectorModel& m, const std::filesystem::path& path) {
  write_bytes(path, serialize_checkpoint(m));
}

inline DetectorModel load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_bytes(path));
}

// ---------------------------------------------------------------------------
// Corpus bookkeeping

struct Split {
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> val;
};

/// Shuffles each class with `seed` and sends the first `train_fraction` of
/// it to training. Per-class cuts keep the class balance of both halves.
inline Split split_corpus(const CorpusManifest& m, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  Split s;
  for (int label : {0, 1}) {
    std::vector<ManifestRecord> cls;
    for (const auto& r : m.records) {
      if (r.label == label) cls.push_back(r);
    }
    Rng rng(derive_seed(seed, 0x5E11 + static_cast<std::uint64_t>(label)));
    rng.shuffle(std::span(cls));
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(cls.size())));
    if (n_train == 0 || n_train == cls.size()) {
      throw ConfigError(std::string("split leaves no ") + (label ? "malicious" : "benign") +
                        " samples on one side");
    }
    s.train.insert(s.train.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.insert(s.val.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_train), cls.end());
  }
  return s;
}

/// Manifest file names repeat across corpora by design, so overlap is judged
/// on resolved file paths.
inline void check_disjoint(const std::filesystem::path& dir_a, const CorpusManifest& a,
                           const std::filesystem::path& dir_b, const CorpusManifest& b) {
  std::set<std::filesystem::path> seen;
  for (const auto& r : a.records) seen.insert(std::filesystem::weakly_canonical(dir_a / r.path));
  for (const auto& r : b.records) {
    const auto p = std::filesystem::weakly_canonical(dir_b / r.path);
    if (seen.count(p)) throw ProtocolError("attack corpus overlaps the training corpus at " + p.string());
  }
}

/// Git blob id of the manifest text, used to identify a corpus in reports.
inline std::string manifest_hash(const CorpusManifest& m) {
  const std::string text = manifest_csv(m);
  const std::string blob = "blob " + std::to_string(text.size()) + std::string(1, '\0') + text;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw NumericError("SHA-1 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

/// Malware categories present in a manifest, in canonical order.
inline std::vector<Category> manifest_categories(const CorpusManifest& m) {
  std::vector<Category> out;
  for (Category c : kMalwareCategories) {
    for (const auto& r : m.records) {
      if (r.label == 1 && r.category == c) {
        out.push_back(c);
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detectors as the experiments see them

struct FittedDetector {
  std::string name;
  LabelFunction labels;
  std::optional<DetectorModel> model;  // empty for stubs
};

struct DetectorSpec {
  std::string name;
  std::function<FittedDetector(const std::filesystem::path& dir, const Split& split, std::uint64_t seed)> fit;
};

inline DetectorSpec trainable_detector(std::string name, DetectorConfig config) {
  return {name, [name, config](const std::filesystem::path& dir, const Split& split, std::uint64_t seed) {
            DetectorConfig c = config;
            c.train.seed = seed;
            DetectorModel m = build(c);
            train(m, load_dataset(dir, split.train, c.view), load_dataset(dir, split.val, c.view));
            return FittedDetector{name, detector_labels(m), std::move(m)};
          }};
}

// A fixed labelling rule that ignores training data.
inline DetectorSpec stub_detector(std::string name, LabelFunction labels) {
  return {name, [name, labels](const std::filesystem::path&, const Split&, std::uint64_t) {
            return FittedDetector{name, labels, std::nullopt};
          }};
}

// ---------------------------------------------------------------------------
// Experiment 1: detection

struct MetricsReport {
  std::string detector;
  std::uint64_t seed = 0;
  ConfusionCounts counts;
  DetectionMetrics metrics;
};

inline ConfusionCounts evaluate_files(const LabelFunction& labels, const std::filesystem::path& dir,
                                      std::span<const ManifestRecord> records) {
  ConfusionCounts c;
  for (const auto& r : records) {
    const auto path = dir / r.path;
    int predicted;
    try {
      predicted = labels(read_bytes(path)) == 1 ? 1 : 0;
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    c.add(r.label, predicted);
  }
  return c;
}

struct Experiment1Result {
  Split split;
  std::vector<MetricsReport> reports;
  std::vector<FittedDetector> detectors;
};

/// Trains every detector on one shared split and scores it on the held-out part.
inline Experiment1Result run_experiment1(const std::filesystem::path& dir, const CorpusManifest& manifest,
                                         std::span<const DetectorSpec> specs, double split_fraction,
                                         std::uint64_t seed) {
  Experiment1Result out;
  out.split = split_corpus(manifest, split_fraction, seed);
  for (const DetectorSpec& spec : specs) {
    FittedDetector d = spec.fit(dir, out.split, seed);
    MetricsReport r{spec.name, seed, evaluate_files(d.labels, dir, out.split.val), {}};
    r.metrics = compute_metrics(r.counts);
    out.reports.push_back(r);
    out.detectors.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment 2: robustness

struct EvasionRow {
  std::string detector;
  EvasionRates rates;
  std::vector<AttackOutcome> outcomes;
};

struct EvasionTable {
  std::vector<Category> categories;
  std::vector<EvasionRow> rows;
};

struct TrainingCorpus {
  std::filesystem::path dir;
  const CorpusManifest* manifest = nullptr;
};

/// Attacks every detector with the same budget and seed. When the training
/// corpus is given, any shared file is a protocol error.
inline EvasionTable run_experiment2(std::span<const FittedDetector> detectors, const std::filesystem::path& attack_dir,
                                    const CorpusManifest& attack_manifest, const AttackBudget& budget,
                                    std::optional<TrainingCorpus> training = std::nullopt) {
  if (training && training->manifest) check_disjoint(training->dir, *training->manifest, attack_dir, attack_manifest);
  budget.validate();
  EvasionTable t;
  t.categories = manifest_categories(attack_manifest);
  for (const FittedDetector& d : detectors) {
    EvasionRow row{d.name, {}, attack_corpus(d.labels, attack_dir, attack_manifest.records, budget)};
    row.rates = evasion_rate(row.outcomes, t.categories);
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Experiment 3: fusion ablation

struct AblationRow {
  FusionKind fusion = FusionKind::concat;
  MetricsReport detection;
  EvasionRates evasion;
};

struct AblationTable {
  std::uint64_t seed = 0;
  std::vector<Category> categories;
  std::vector<AblationRow> rows;
};

struct MeanAblationRow {
  FusionKind fusion = FusionKind::concat;
  DetectionMetrics detection;
  std::vector<std::optional<double>> category_rates;  // aligned with categories
  std::optional<double> total_rate;
};

struct AblationResult {
  std::vector<Category> categories;
  std::vector<AblationTable> per_seed;
  std::vector<MeanAblationRow> mean;
};

struct AblationConfig {
  DetectorConfig detector;  // arch is forced to armd, fusion varies
  AttackBudget budget;      // seed is replaced by the run seed
  double split_fraction = 0.8;
};

namespace detail {

// Mean over the defined entries; undefined when none is.
inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& xs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x : xs) {
    if (x) {
      sum += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace detail

inline std::vector<MeanAblationRow> aggregate_ablation(std::span<const AblationTable> tables,
                                                       std::span<const Category> categories) {
  std::vector<MeanAblationRow> mean;
  if (tables.empty()) return mean;
  for (std::size_t i = 0; i < tables.front().rows.size(); ++i) {
    MeanAblationRow m;
    m.fusion = tables.front().rows[i].fusion;
    const double n = static_cast<double>(tables.size());
    std::vector<std::optional<double>> total;
    std::vector<std::vector<std::optional<double>>> per_cat(categories.size());
    for (const AblationTable& t : tables) {
      const AblationRow& r = t.rows.at(i);
      if (r.fusion != m.fusion) throw UsageError("ablation tables list fusion kinds in different orders");
      m.detection.accuracy += r.detection.metrics.accuracy / n;
      m.detection.precision += r.detection.metrics.precision / n;
      m.detection.recall += r.detection.metrics.recall / n;
      m.detection.f1 += r.detection.metrics.f1 / n;
      total.push_back(r.evasion.total.rate());
      for (std::size_t c = 0; c < categories.size(); ++c) {
        const auto it = r.evasion.by_category.find(categories[c]);
        per_cat[c].push_back(it == r.evasion.by_category.end() ? std::nullopt : it->second.rate());
      }
    }
    m.total_rate = detail::mean_defined(total);
    for (const auto& xs : per_cat) m.category_rates.push_back(detail::mean_defined(xs));
    mean.push_back(std::move(m));
  }
  return mean;
}

/// For each seed: one shared split, every fusion kind trained on it, scored
/// on the validation part and attacked on the attack corpus.
inline AblationResult run_experiment3(const std::filesystem::path& corpus_dir, const CorpusManifest& corpus,
                                      const std::filesystem::path& attack_dir, const CorpusManifest& attack_corpus,
                                      std::span<const std::uint64_t> seeds, const AblationConfig& cfg) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  check_disjoint(corpus_dir, corpus, attack_dir, attack_corpus);
  AblationResult out;
  out.categories = manifest_categories(attack_corpus);
  for (std::uint64_t seed : seeds) {
    std::vector<DetectorSpec> specs;
    for (FusionKind k : kFusionKinds) {
      DetectorConfig c = cfg.detector;
      c.arch = Arch::armd;
      c.fusion = k;
      specs.push_back(trainable_detector(std::string(to_string(k)), c));
    }
    const Experiment1Result e1 = run_experiment1(corpus_dir, corpus, specs, cfg.split_fraction, seed);
    AttackBudget budget = cfg.budget;
    budget.seed = seed;
    const EvasionTable e2 = run_experiment2(e1.detectors, attack_dir, attack_corpus, budget);
    AblationTable t{seed, out.categories, {}};
    for (std::size_t i = 0; i < kFusionKinds.size(); ++i) {
      t.rows.push_back({kFusionKinds[i], e1.reports[i], e2.rows[i].rates});
    }
    out.per_seed.push_back(std::move(t));
  }
  out.mean = aggregate_ablation(out.per_seed, out.categories);
  return out;
}

// ---------------------------------------------------------------------------
// Reports. Column order is fixed; rates come with the counts they derive from.

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string rate_columns_header(std::span<const Category> cats) {
  std::string s;
  for (Category c : cats) s += "," + std::string(to_string(c));
  s += ",total";
  for (Category c : cats) s += "," + std::string(to_string(c)) + "_detected," + std::string(to_string(c)) + "_evaded";
  return s + ",total_detected,total_evaded";
}

inline std::string rate_columns(const EvasionRates& r, std::span<const Category> cats) {
  std::string s;
  auto cell = [&r](Category c) {
    const auto it = r.by_category.find(c);
    return it == r.by_category.end() ? RateCell{} : it->second;
  };
  for (Category c : cats) s += "," + format_rate(cell(c).rate());
  s += "," + format_rate(r.total.rate());
  for (Category c : cats) s += "," + std::to_string(cell(c).detected) + "," + std::to_string(cell(c).evaded);
  return s + "," + std::to_string(r.total.detected) + "," + std::to_string(r.total.evaded);
}

inline std::string metric_columns(const MetricsReport& r) {
  return fmt(r.metrics.accuracy) + "," + fmt(r.metrics.precision) + "," + fmt(r.metrics.recall) + "," +
         fmt(r.metrics.f1) + "," + std::to_string(r.counts.tp) + "," + std::to_string(r.counts.fp) + "," +
         std::to_string(r.counts.tn) + "," + std::to_string(r.counts.fn);
}

inline constexpr std::string_view kMetricHeader = "accuracy,precision,recall,f1,tp,fp,tn,fn";

}  // namespace detail

inline std::string metrics_csv(std::span<const MetricsReport> reports) {
  std::string s = "detector,seed," + std::string(detail::kMetricHeader) + "\n";
  for (const auto& r : reports) s += r.detector + "," + std::to_string(r.seed) + "," + detail::metric_columns(r) + "\n";
  return s;
}

inline std::string evasion_csv(const EvasionTable& t) {
  std::string s = "detector" + detail::rate_columns_header(t.categories) + "\n";
  for (const auto& row : t.rows) s += row.detector + detail::rate_columns(row.rates, t.categories) + "\n";
  return s;
}

inline std::string ablation_csv(const AblationTable& t) {
  std::string s = "fusion," + std::string(detail::kMetricHeader) + detail::rate_columns_header(t.categories) + "\n";
  for (const auto& row : t.rows) {
    s += std::string(to_string(row.fusion)) + "," + detail::metric_columns(row.detection) +
         detail::rate_columns(row.evasion, t.categories) + "\n";
  }
  return s;
}

inline std::string ablation_mean_csv(const AblationResult& r) {
  std::string s = "fusion,accuracy,precision,recall,f1";
  for (Category c : r.categories) s += "," + std::string(to_string(c));
  s += ",total\n";
  for (const auto& m : r.mean) {
    s += std::string(to_string(m.fusion)) + "," + detail::fmt(m.detection.accuracy) + "," +
         detail::fmt(m.detection.precision) + "," + detail::fmt(m.detection.recall) + "," +
         detail::fmt(m.detection.f1);
    for (const auto& rate : m.category_rates) s += "," + format_rate(rate);
    s += "," + format_rate(m.total_rate) + "\n";
  }
  return s;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"detector", r.detector},
          {"seed", r.seed},
          {"accuracy", r.metrics.accuracy},
          {"precision", r.metrics.precision},
          {"recall", r.metrics.recall},
          {"f1", r.metrics.f1},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn}};
}

inline nlohmann::json to_json(const EvasionRates& r) {
  nlohmann::json j = nlohmann::json::object();
  auto cell = [](const RateCell& c) {
    nlohmann::json x = {{"detected", c.detected}, {"evaded", c.evaded}};
    x["rate"] = c.rate() ? nlohmann::json(*c.rate()) : nlohmann::json(kUndefinedRate);
    return x;
  };
  for (const auto& [cat, c] : r.by_category) j[std::string(to_string(cat))] = cell(c);
  j["total"] = cell(r.total);
  return j;
}

inline nlohmann::json to_json(const AttackBudget& b) {
  return {{"mode", to_string(b.mode)},
          {"max_payload_bytes", b.max_payload_bytes},
          {"max_queries", b.max_queries},
          {"seed", b.seed}};
}

inline nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json j;
  for (const auto& t : r.per_seed) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : t.rows) {
      rows.push_back({{"fusion", to_string(row.fusion)},
                      {"detection", to_json(row.detection)},
                      {"evasion", to_json(row.evasion)}});
    }
    j["per_seed"].push_back({{"seed", t.seed}, {"rows", rows}});
  }
  for (const auto& m : r.mean) {
    nlohmann::json row = {{"fusion", to_string(m.fusion)},
                          {"accuracy", m.detection.accuracy},
                          {"precision", m.detection.precision},
                          {"recall", m.detection.recall},
                          {"f1", m.detection.f1}};
    for (std::size_t i = 0; i < r.categories.size(); ++i) {
      const auto& rate = m.category_rates[i];
      row[std::string(to_string(r.categories[i]))] = rate ? nlohmann::json(*rate) : nlohmann::json(kUndefinedRate);
    }
    row["total"] = m.total_rate ? nlohmann::json(*m.total_rate) : nlohmann::json(kUndefinedRate);
    j["mean"].push_back(row);
  }
  return j;
}

}  // namespace armd
