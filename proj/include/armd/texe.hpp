#pragma once

// TEXE: a toy executable container.
//
//   "TEXE" | version u16 | section_count u16
//   | section_count x (kind u8, offset u32, length u32)
//   | section payloads, back to back in table order
//   | overlay (everything after the last section)
//
// All integers are little-endian. The first payload starts right after the
// section table and each following payload starts where the previous one
// ends, which is what makes parse/write a byte-exact round trip.

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "armd/errors.hpp"
#include "armd/io.hpp"

namespace armd {

inline constexpr std::array<std::uint8_t, 4> kTexeMagic{'T', 'E', 'X', 'E'};
inline constexpr std::size_t kTexeFixedHeader = 8;
inline constexpr std::size_t kTexeTableEntry = 9;

enum class SectionKind : std::uint8_t { code = 1, data = 2 };

struct Section {
  SectionKind kind = SectionKind::code;
  std::uint32_t offset = 0;
  std::uint32_t length = 0;
  Bytes payload;

  friend bool operator==(const Section&, const Section&) = default;
};

struct TexeFile {
  std::uint16_t version = 1;
  std::vector<Section> sections;
  Bytes overlay;

  friend bool operator==(const TexeFile&, const TexeFile&) = default;
};

enum class TexeParseErrorKind {
  bad_magic,
  truncated_header,
  section_out_of_bounds,
  overlapping_sections,
  section_gap,
  bad_section_kind,
};

class TexeParseError : public DataError {
 public:
  TexeParseError(TexeParseErrorKind kind, const std::string& what) : DataError("texe: " + what), kind_(kind) {}
  TexeParseErrorKind kind() const noexcept { return kind_; }

 private:
  TexeParseErrorKind kind_;
};

class TexeSerializationError : public Error {
 public:
  explicit TexeSerializationError(const std::string& what)
      : Error("texe serialization: " + what, ExitCode::data) {}
};

inline std::size_t texe_header_size(std::size_t section_count) {
  return kTexeFixedHeader + kTexeTableEntry * section_count;
}

// Recomputes offsets and lengths from the payloads.
inline void relayout(TexeFile& f) {
  std::size_t at = texe_header_size(f.sections.size());
  for (Section& s : f.sections) {
    s.offset = static_cast<std::uint32_t>(at);
    s.length = static_cast<std::uint32_t>(s.payload.size());
    at += s.payload.size();
  }
}

inline TexeFile parse_texe(std::span<const std::uint8_t> bytes) {
  using K = TexeParseErrorKind;
  if (bytes.size() >= 4 && !std::equal(kTexeMagic.begin(), kTexeMagic.end(), bytes.begin())) {
    throw TexeParseError(K::bad_magic, "bad magic");
  }
  if (bytes.size() < kTexeFixedHeader) {
    throw TexeParseError(K::truncated_header, "file shorter than the fixed header");
  }
  TexeFile f;
  f.version = get_u16(bytes, 4);
  const std::size_t count = get_u16(bytes, 6);
  const std::size_t table_end = texe_header_size(count);
  if (bytes.size() < table_end) {
    throw TexeParseError(K::truncated_header, "section table of " + std::to_string(count) +
                                                  " entries runs past end of file");
  }
  std::size_t expected = table_end;
  f.sections.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t entry = kTexeFixedHeader + i * kTexeTableEntry;
    const std::uint8_t kind = bytes[entry];
    if (kind != 1 && kind != 2) {
      throw TexeParseError(K::bad_section_kind, "section " + std::to_string(i) + " has kind " + std::to_string(kind));
    }
    Section s;
    s.kind = static_cast<SectionKind>(kind);
    s.offset = get_u32(bytes, entry + 1);
    s.length = get_u32(bytes, entry + 5);
    if (static_cast<std::uint64_t>(s.offset) + s.length > bytes.size()) {
      throw TexeParseError(K::section_out_of_bounds, "section " + std::to_string(i) + " ends past end of file");
    }
    if (s.offset < expected) {
      throw TexeParseError(K::overlapping_sections,
                           "section " + std::to_string(i) + " overlaps the header or the previous section");
    }
    if (s.offset > expected) {
      throw TexeParseError(K::section_gap, "unaccounted bytes before section " + std::to_string(i));
    }
    s.payload.assign(bytes.begin() + s.offset, bytes.begin() + s.offset + s.length);
    expected = static_cast<std::size_t>(s.offset) + s.length;
    f.sections.push_back(std::move(s));
  }
  f.overlay.assign(bytes.begin() + static_cast<std::ptrdiff_t>(expected), bytes.end());
  return f;
}

inline Bytes write_texe(const TexeFile& f) {
  if (f.sections.size() > UINT16_MAX) throw TexeSerializationError("too many sections");
  std::size_t expected = texe_header_size(f.sections.size());
  for (std::size_t i = 0; i < f.sections.size(); ++i) {
    const Section& s = f.sections[i];
    if (s.kind != SectionKind::code && s.kind != SectionKind::data) {
      throw TexeSerializationError("section " + std::to_string(i) + " has an invalid kind");
    }
    if (s.length != s.payload.size()) {
      throw TexeSerializationError("section " + std::to_string(i) + " length does not match its payload");
    }
    if (s.offset != expected) {
      throw TexeSerializationError("section " + std::to_string(i) + " offset " + std::to_string(s.offset) +
                                   " is not contiguous (expected " + std::to_string(expected) + ")");
    }
    expected += s.payload.size();
    if (expected > UINT32_MAX) throw TexeSerializationError("file exceeds 4 GiB");
  }
  Bytes out(kTexeMagic.begin(), kTexeMagic.end());
  out.reserve(expected + f.overlay.size());
  put_u16(out, f.version);
  put_u16(out, static_cast<std::uint16_t>(f.sections.size()));
  for (const Section& s : f.sections) {
    put_u8(out, static_cast<std::uint8_t>(s.kind));
    put_u32(out, s.offset);
    put_u32(out, s.length);
  }
  for (const Section& s : f.sections) out.insert(out.end(), s.payload.begin(), s.payload.end());
  out.insert(out.end(), f.overlay.begin(), f.overlay.end());
  return out;
}

// ---------------------------------------------------------------------------
// Functionality-preserving mutations. Neither touches an existing payload.

inline TexeFile append_overlay(TexeFile f, std::span<const std::uint8_t> payload) {
  if (payload.empty()) throw UsageError("append_overlay: payload must be non-empty");
  f.overlay.insert(f.overlay.end(), payload.begin(), payload.end());
  return f;
}

inline bool is_printable(std::uint8_t b) { return b >= 0x20 && b <= 0x7E; }

inline bool is_printable(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return is_printable(static_cast<std::uint8_t>(c)); });
}

/// Adds one data section after the last section holding `strings`
/// separated by zero bytes. Offsets of all sections are recomputed.
inline TexeFile inject_data_section(TexeFile f, const std::vector<std::string>& strings) {
  if (strings.empty()) throw ConfigError("inject_data_section: at least one string is required");
  Section s;
  s.kind = SectionKind::data;
  for (std::size_t i = 0; i < strings.size(); ++i) {
    const std::string& str = strings[i];
    if (str.size() < 4 || !is_printable(str)) {
      throw ConfigError("inject_data_section: string " + std::to_string(i) +
                        " must be printable ASCII of length >= 4");
    }
    if (i) s.payload.push_back(0);
    s.payload.insert(s.payload.end(), str.begin(), str.end());
  }
  f.sections.push_back(std::move(s));
  relayout(f);
  return f;
}

// True when every section of `original` appears unchanged (kind and
// payload) at the same index of `variant`.
inline bool sections_preserved(const TexeFile& original, const TexeFile& variant) {
  if (variant.sections.size() < original.sections.size()) return false;
  for (std::size_t i = 0; i < original.sections.size(); ++i) {
    if (original.sections[i].kind != variant.sections[i].kind ||
        original.sections[i].payload != variant.sections[i].payload) {
      return false;
    }
  }
  return true;
}

}  // namespace armd
