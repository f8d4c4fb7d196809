#pragma once

// Black-box, hard-label attacks that only add content to a file: overlay
// appends (binary view only) and, in dual-view mode, an extra data section
// holding benign-looking strings (both views). The attacker sees nothing but
// the final verdict of each query.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "armd/corpus.hpp"
#include "armd/detectors.hpp"
#include "armd/errors.hpp"
#include "armd/io.hpp"
#include "armd/rng.hpp"
#include "armd/texe.hpp"
#include "armd/views.hpp"

namespace armd {

enum class AttackMode { append_random, append_benign, hillclimb, dual_view };

inline constexpr std::array<AttackMode, 4> kAttackModes{AttackMode::append_random, AttackMode::append_benign,
                                                        AttackMode::hillclimb, AttackMode::dual_view};

inline std::string_view to_string(AttackMode m) {
  switch (m) {
    case AttackMode::append_random: return "append_random";
    case AttackMode::append_benign: return "append_benign";
    case AttackMode::hillclimb: return "hillclimb";
    case AttackMode::dual_view: return "dual_view";
  }
  return "append_random";
}

inline AttackMode parse_attack_mode(std::string_view name) {
  std::string norm(name);
  for (char& c : norm) {
    if (c == '-') c = '_';
  }
  for (AttackMode m : kAttackModes) {
    if (to_string(m) == norm) return m;
  }
  throw ConfigError("unknown attack mode '" + std::string(name) + "'");
}

struct AttackBudget {
  std::size_t max_payload_bytes = 512;
  std::size_t max_queries = 200;
  AttackMode mode = AttackMode::hillclimb;
  std::uint64_t seed = 1;

  void validate() const {
    if (max_payload_bytes == 0) throw ConfigError("attack budget: max_payload_bytes must be positive");
    if (max_queries == 0) throw ConfigError("attack budget: max_queries must be positive");
  }
};

inline constexpr double kHillclimbMutationRate = 0.10;
inline constexpr std::size_t kHillclimbRestartAfter = 20;
inline constexpr int kDualViewMinStrings = 1;
inline constexpr int kDualViewMaxStrings = 5;

struct AttackOutcome {
  std::string path;
  Category category = Category::none;
  bool detected_before = false;
  bool evaded = false;
  std::size_t queries_used = 0;  // adversarial queries, excluding the clean-file verdict
  std::size_t payload_size = 0;  // overlay bytes of the evading variant, 0 when none

  friend bool operator==(const AttackOutcome&, const AttackOutcome&) = default;
};

// ---------------------------------------------------------------------------
// Oracle

/// Maps a serialized file to a verdict: 1 malicious, 0 benign.
using LabelFunction = std::function<int(std::span<const std::uint8_t>)>;

/// The only channel between attacker and detector. It hands out labels and
/// counts every call; there is no way to reach scores through it.
class HardLabelOracle {
 public:
  explicit HardLabelOracle(LabelFunction fn) : fn_(std::move(fn)) {
    if (!fn_) throw UsageError("HardLabelOracle: empty label function");
  }

  int query(std::span<const std::uint8_t> file) {
    ++queries_;
    return fn_(file) == 1 ? 1 : 0;
  }

  std::size_t queries() const { return queries_; }

 private:
  LabelFunction fn_;
  std::size_t queries_ = 0;
};

inline LabelFunction detector_labels(std::shared_ptr<const Classifier> clf) {
  return [clf = std::move(clf)](std::span<const std::uint8_t> file) {
    return clf->predict(make_views(file, clf->config().view)).label;
  };
}

inline LabelFunction detector_labels(const DetectorModel& model) {
  return detector_labels(std::make_shared<const Classifier>(model));
}

// ---------------------------------------------------------------------------
// Payload sources

/// Section bytes of benign files, the raw material for benign-slice payloads.
class BenignPool {
 public:
  BenignPool() = default;

  void add(const TexeFile& f) {
    Bytes b;
    for (const Section& s : f.sections) b.insert(b.end(), s.payload.begin(), s.payload.end());
    if (!b.empty()) files_.push_back(std::move(b));
  }

  bool empty() const { return files_.empty(); }
  std::size_t size() const { return files_.size(); }

  // A contiguous slice of one benign file of length min(n, file size).
  Bytes slice(std::size_t n, Rng& rng) const {
    if (files_.empty()) throw ConfigError("benign pool is empty");
    const Bytes& src = files_[rng.below(files_.size())];
    const std::size_t len = std::min(n, src.size());
    const std::size_t at = rng.below(src.size() - len + 1);
    return Bytes(src.begin() + static_cast<std::ptrdiff_t>(at), src.begin() + static_cast<std::ptrdiff_t>(at + len));
  }

 private:
  std::vector<Bytes> files_;
};

inline BenignPool load_benign_pool(const std::filesystem::path& dir, std::span<const ManifestRecord> records) {
  BenignPool pool;
  for (const auto& r : records) {
    if (r.label != 0) continue;
    const auto path = dir / r.path;
    try {
      pool.add(parse_texe(read_bytes(path)));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return pool;
}

// Strings the dual-view attacker injects. They are benign-class content,
// never category strings.
inline const std::vector<std::string>& dual_view_string_bank() {
  static const std::vector<std::string> bank = [] {
    const MotifBank& m = motif_bank();
    std::vector<std::string> b = m.benign_strings;
    b.insert(b.end(), m.vendor_strings.begin(), m.vendor_strings.end());
    return b;
  }();
  return bank;
}

namespace detail {

inline Bytes random_payload(std::size_t max_len, Rng& rng) {
  Bytes p(static_cast<std::size_t>(rng.range(1, static_cast<std::int64_t>(max_len))));
  for (auto& b : p) b = rng.byte();
  return p;
}

inline Bytes benign_payload(std::size_t max_len, const BenignPool& pool, Rng& rng) {
  return pool.slice(static_cast<std::size_t>(rng.range(1, static_cast<std::int64_t>(max_len))), rng);
}

// Overwrites ceil(rate * n) distinct positions with random bytes.
inline Bytes mutate(Bytes p, double rate, Rng& rng) {
  const std::size_t n = p.size();
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
    p[idx[i]] = rng.byte();
  }
  return p;
}

inline std::vector<std::string> pick_strings(Rng& rng) {
  const auto& bank = dual_view_string_bank();
  std::vector<std::string> out(static_cast<std::size_t>(rng.range(kDualViewMinStrings, kDualViewMaxStrings)));
  for (auto& s : out) s = bank[rng.below(bank.size())];
  return out;
}

// Serializes a variant and checks that it still parses with the original
// sections intact. Runs on every query.
inline Bytes checked_variant(const TexeFile& original, const TexeFile& variant) {
  Bytes bytes = write_texe(variant);
  const TexeFile reparsed = parse_texe(bytes);
  if (!sections_preserved(original, reparsed)) {
    throw ProtocolError("attack produced a variant that alters the original sections");
  }
  return bytes;
}

}  // namespace detail

/// Attacks one file. The clean file is queried first; files the oracle
/// already calls benign are not attacked.
inline AttackOutcome attack_sample(HardLabelOracle& oracle, const TexeFile& f, const AttackBudget& budget,
                                   const BenignPool& pool = {}) {
  budget.validate();
  if (budget.mode == AttackMode::append_benign && pool.empty()) {
    throw ConfigError("append_benign needs benign files in the attack corpus");
  }
  AttackOutcome out;
  out.detected_before = oracle.query(write_texe(f)) == 1;
  if (!out.detected_before) return out;

  // Payload bytes and dual-view strings use separate streams so that the
  // dual-view overlays are exactly the append_random ones.
  Rng rng(budget.seed);
  Rng string_rng(derive_seed(budget.seed, 0xD0A1));
  Bytes base;
  std::size_t failures = 0;

  for (std::size_t q = 0; q < budget.max_queries; ++q) {
    Bytes payload;
    TexeFile variant;
    switch (budget.mode) {
      case AttackMode::append_random:
        payload = detail::random_payload(budget.max_payload_bytes, rng);
        variant = append_overlay(f, payload);
        break;
      case AttackMode::append_benign:
        payload = detail::benign_payload(budget.max_payload_bytes, pool, rng);
        variant = append_overlay(f, payload);
        break;
      case AttackMode::hillclimb:
        // With labels only there is no score to climb, so a step is kept only
        // if it flips the verdict; otherwise the search restarts from a fresh
        // base after a run of failures.
        if (base.empty() || failures == kHillclimbRestartAfter) {
          base = pool.empty() ? detail::random_payload(budget.max_payload_bytes, rng)
                              : detail::benign_payload(budget.max_payload_bytes, pool, rng);
          failures = 0;
          payload = base;
        } else {
          payload = detail::mutate(base, kHillclimbMutationRate, rng);
        }
        variant = append_overlay(f, payload);
        break;
      case AttackMode::dual_view:
        payload = detail::random_payload(budget.max_payload_bytes, rng);
        variant = append_overlay(inject_data_section(f, detail::pick_strings(string_rng)), payload);
        break;
    }
    const Bytes bytes = detail::checked_variant(f, variant);
    out.queries_used = q + 1;
    if (oracle.query(bytes) == 0) {
      out.evaded = true;
      out.payload_size = payload.size();
      return out;
    }
    ++failures;
  }
  return out;
}

/// Attacks every malicious record of a corpus. Sample i uses the sub-seed
/// derive_seed(budget.seed, i); benign records form the payload pool.
inline std::vector<AttackOutcome> attack_corpus(const LabelFunction& labels, const std::filesystem::path& dir,
                                                std::span<const ManifestRecord> records, const AttackBudget& budget) {
  budget.validate();
  const BenignPool pool = load_benign_pool(dir, records);
  std::vector<AttackOutcome> outcomes;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ManifestRecord& r = records[i];
    if (r.label != 1) continue;
    const auto path = dir / r.path;
    TexeFile f;
    try {
      f = parse_texe(read_bytes(path));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    AttackBudget b = budget;
    b.seed = derive_seed(budget.seed, i);
    HardLabelOracle oracle(labels);
    AttackOutcome o = attack_sample(oracle, f, b, pool);
    o.path = r.path;
    o.category = r.category;
    outcomes.push_back(std::move(o));
  }
  return outcomes;
}

// ---------------------------------------------------------------------------
// Evasion rates

struct RateCell {
  std::size_t detected = 0;
  std::size_t evaded = 0;

  std::optional<double> rate() const {
    if (detected == 0) return std::nullopt;
    return static_cast<double>(evaded) / static_cast<double>(detected);
  }

  friend bool operator==(const RateCell&, const RateCell&) = default;
};

struct EvasionRates {
  std::map<Category, RateCell> by_category;
  RateCell total;
};

inline constexpr std::string_view kUndefinedRate = "undefined";

inline std::string format_rate(const std::optional<double>& r) {
  if (!r) return std::string(kUndefinedRate);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *r);
  return buf;
}

/// Rates over initially-detected samples. Every category listed in
/// `categories` gets a cell even when no outcome mentions it.
inline EvasionRates evasion_rate(std::span<const AttackOutcome> outcomes, std::span<const Category> categories = {}) {
  EvasionRates r;
  for (Category c : categories) r.by_category[c];
  for (const AttackOutcome& o : outcomes) {
    RateCell& cell = r.by_category[o.category];
    if (!o.detected_before) continue;
    ++cell.detected;
    ++r.total.detected;
    if (o.evaded) {
      ++cell.evaded;
      ++r.total.evaded;
    }
  }
  return r;
}

inline std::string outcomes_csv(std::span<const AttackOutcome> outcomes) {
  std::string s = "path,category,detected_before,evaded,queries_used,payload_size\n";
  for (const AttackOutcome& o : outcomes) {
    s += o.path + "," + std::string(to_string(o.category)) + "," + (o.detected_before ? "1" : "0") + "," +
         (o.evaded ? "1" : "0") + "," + std::to_string(o.queries_used) + "," + std::to_string(o.payload_size) + "\n";
  }
  return s;
}

}  // namespace armd
