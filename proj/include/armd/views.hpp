#pragma once

// The two model inputs extracted from one file: the raw byte stream (binary
// view) and hashed printable strings from mapped sections (source view).
// Overlay bytes never reach the source view.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "armd/errors.hpp"
#include "armd/texe.hpp"

namespace armd {

inline constexpr std::int32_t kBinaryPad = 256;
inline constexpr std::size_t kBinaryVocab = 257;
inline constexpr std::int32_t kSourcePad = 0;

struct ViewConfig {
  std::size_t binary_length = 4096;  // 2,000,000 at production scale
  std::size_t source_length = 512;
  std::size_t source_vocab = 4096;
  std::size_t min_string_len = 4;

  void validate() const {
    if (binary_length < 512) throw ConfigError("binary view length must be >= 512");
    if (source_length == 0 || min_string_len == 0) throw ConfigError("view sizes must be positive");
    if (source_vocab < 2) throw ConfigError("source vocabulary needs at least 2 entries");
  }

  friend bool operator==(const ViewConfig&, const ViewConfig&) = default;
};

struct SampleViews {
  std::vector<std::int32_t> binary_tokens;
  std::vector<std::int32_t> source_tokens;
  std::optional<int> label;

  friend bool operator==(const SampleViews&, const SampleViews&) = default;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::int32_t source_token(std::string_view s, std::size_t vocab) {
  return static_cast<std::int32_t>(1 + fnv1a64(s) % (vocab - 1));
}

inline std::vector<std::int32_t> extract_binary_view(std::span<const std::uint8_t> bytes, const ViewConfig& cfg) {
  std::vector<std::int32_t> out(cfg.binary_length, kBinaryPad);
  const std::size_t n = std::min(bytes.size(), cfg.binary_length);
  for (std::size_t i = 0; i < n; ++i) out[i] = bytes[i];
  return out;
}

// Printable runs are found per section; a run never continues across a
// section boundary.
inline std::vector<std::int32_t> extract_source_view(const TexeFile& f, const ViewConfig& cfg) {
  std::vector<std::int32_t> out;
  out.reserve(cfg.source_length);
  for (const Section& s : f.sections) {
    std::size_t i = 0;
    const std::size_t n = s.payload.size();
    while (i < n && out.size() < cfg.source_length) {
      if (!is_printable(s.payload[i])) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < n && is_printable(s.payload[j])) ++j;
      if (j - i >= cfg.min_string_len) {
        const std::string_view run(reinterpret_cast<const char*>(s.payload.data() + i), j - i);
        out.push_back(source_token(run, cfg.source_vocab));
      }
      i = j;
    }
  }
  out.resize(cfg.source_length, kSourcePad);
  return out;
}

/// Parses `bytes` and extracts both views. Throws TexeParseError on bad input.
inline SampleViews make_views(std::span<const std::uint8_t> bytes, const ViewConfig& cfg,
                              std::optional<int> label = std::nullopt) {
  const TexeFile f = parse_texe(bytes);
  return {extract_binary_view(bytes, cfg), extract_source_view(f, cfg), label};
}

}  // namespace armd
