#pragma once

// Labeled synthetic TEXE corpus: the motif bank that plants class signal in
// both the raw bytes and the printable strings, the generator, and the
// manifest CSV (`path,label,category`).

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "armd/errors.hpp"
#include "armd/io.hpp"
#include "armd/rng.hpp"
#include "armd/texe.hpp"

namespace armd {

enum class Category : std::uint8_t {
  none,
  adware,
  backdoor,
  botnet,
  dropper,
  ransomware,
  rootkit,
  spyware,
  virus,
};

inline constexpr std::array<Category, 8> kMalwareCategories{
    Category::adware,     Category::backdoor, Category::botnet,  Category::dropper,
    Category::ransomware, Category::rootkit,  Category::spyware, Category::virus,
};

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::none: return "none";
    case Category::adware: return "adware";
    case Category::backdoor: return "backdoor";
    case Category::botnet: return "botnet";
    case Category::dropper: return "dropper";
    case Category::ransomware: return "ransomware";
    case Category::rootkit: return "rootkit";
    case Category::spyware: return "spyware";
    case Category::virus: return "virus";
  }
  return "none";
}

inline Category parse_category(std::string_view name) {
  if (name == "none") return Category::none;
  for (Category c : kMalwareCategories) {
    if (to_string(c) == name) return c;
  }
  throw ConfigError("unknown category '" + std::string(name) + "'");
}

// The five categories the robustness experiments attack by default.
inline std::vector<Category> default_attack_categories() {
  return {Category::botnet, Category::ransomware, Category::rootkit, Category::spyware, Category::virus};
}

inline std::vector<Category> parse_category_list(std::string_view list) {
  std::vector<Category> out;
  std::size_t at = 0;
  while (at <= list.size()) {
    const std::size_t comma = std::min(list.find(',', at), list.size());
    const std::string_view item = list.substr(at, comma - at);
    if (!item.empty()) {
      const Category c = parse_category(item);
      if (c == Category::none) throw ConfigError("'none' is not a malware category");
      out.push_back(c);
    }
    at = comma + 1;
  }
  if (out.empty()) throw ConfigError("category list is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Motif bank

struct CategoryMotifs {
  std::vector<Bytes> code;
  std::vector<std::string> strings;
};

struct MotifBank {
  std::array<CategoryMotifs, 8> categories;  // indexed like kMalwareCategories
  std::vector<Bytes> benign_code;            // common to both classes
  std::vector<std::string> benign_strings;   // common to both classes
  std::vector<Bytes> vendor_code;            // mostly found in benign files
  std::vector<std::string> vendor_strings;   // mostly found in benign files

  const CategoryMotifs& of(Category c) const {
    for (std::size_t i = 0; i < kMalwareCategories.size(); ++i) {
      if (kMalwareCategories[i] == c) return categories[i];
    }
    throw ConfigError("no motifs for category '" + std::string(to_string(c)) + "'");
  }
};

inline const MotifBank& motif_bank() {
  static const MotifBank bank = [] {
    MotifBank b;
    b.categories[0] = {{{0x9C, 0xCE, 0xB6, 0x3C, 0xD0, 0x69, 0xA2},
                        {0x76, 0xF4, 0x70, 0xBF, 0x86, 0x0A, 0x2A, 0xF7},
                        {0x1F, 0x7C, 0x06, 0xC3, 0xA0, 0x84, 0xAC, 0x1E},
                        {0x66, 0xC8, 0x1E, 0x3B, 0x75, 0x5A},
                        {0x61, 0x22, 0x20, 0x14, 0x7C, 0xFD, 0x74},
                        {0x6F, 0xCE, 0xE8, 0xE1, 0xB5, 0xBB}},
                       {"popup_ad_frame", "AdInjectHelper", "click_redirect_url", "BrowserHijackBHO",
                        "sponsored_toolbar", "ad_impression_beacon", "force_homepage", "UnwantedOfferBundle"}};
    b.categories[1] = {{{0x54, 0xB2, 0xA5, 0x23, 0xF3, 0x1F},
                        {0x71, 0x38, 0x77, 0x13, 0xE9, 0x52},
                        {0xF0, 0xF0, 0x7C, 0xB9, 0xFE, 0x5F},
                        {0xAB, 0x51, 0xE2, 0x52, 0xE6, 0xC5, 0x8E, 0x59},
                        {0x8D, 0x82, 0x7F, 0x97, 0x5E, 0x1B, 0xC4, 0xC4},
                        {0x9E, 0x62, 0x4F, 0xEC, 0x5C, 0xBA, 0xAE, 0x0B}},
                       {"bind_shell_port", "RemoteCmdListener", "skip_auth_check", "hidden_admin_pipe",
                        "reverse_connect_back", "BackdoorServiceMain", "magic_password_bypass", "cmd_exec_remote"}};
    b.categories[2] = {{{0x1C, 0x55, 0xAD, 0x8F, 0xC3, 0xEF},
                        {0xAA, 0x27, 0xBB, 0xFC, 0x9E, 0x0E},
                        {0x0F, 0xA1, 0xC4, 0xE2, 0x75, 0xD6, 0xCF},
                        {0x67, 0x01, 0xFE, 0xDB, 0x28, 0x60, 0x2D},
                        {0xE5, 0xDD, 0x97, 0x4F, 0xE9, 0x54},
                        {0x54, 0xF2, 0x9A, 0xD2, 0x7F, 0x91, 0x99, 0xF4}},
                       {"irc_join_channel", "c2_heartbeat", "BotCommandLoop", "ddos_flood_syn", "peer_list_update",
                        "zombie_register", "spread_via_usb", "botmaster_key"}};
    b.categories[3] = {{{0xCC, 0x6F, 0xDF, 0x4A, 0xED, 0xCA, 0x94, 0x07},
                        {0x0D, 0x00, 0xCB, 0x59, 0xBF, 0x48, 0x65, 0x94},
                        {0x62, 0xF0, 0x02, 0xA6, 0x4B, 0x50, 0x39, 0xC1},
                        {0x87, 0xAC, 0xB0, 0x03, 0x8A, 0x5A, 0xB0, 0xE6},
                        {0x4A, 0x36, 0x9B, 0x1D, 0x46, 0x18},
                        {0x13, 0xA7, 0xC9, 0x3C, 0xAE, 0xA7}},
                       {"drop_payload_tmp", "stage2_download", "unpack_embedded_pe", "silent_install_exe",
                        "DropperResourceBlob", "write_to_startup", "execute_dropped", "fetch_next_stage"}};
    b.categories[4] = {{{0xA9, 0xF4, 0x44, 0x58, 0xD2, 0x49, 0x7B, 0xB2},
                        {0xAC, 0x6F, 0x0B, 0xF4, 0x27, 0x3D, 0x29},
                        {0xBF, 0xB4, 0x2C, 0x42, 0xBE, 0xE6, 0x3A, 0x3D},
                        {0x83, 0x4E, 0x91, 0x17, 0x33, 0x1E, 0xAD},
                        {0x53, 0x58, 0x05, 0x38, 0x2B, 0xCC, 0xC5},
                        {0x3F, 0x78, 0x77, 0xB8, 0x4A, 0xAB, 0x36, 0xA0}},
                       {"encrypt_files", "YOUR_FILES_ARE_LOCKED", "bitcoin_ransom_addr", "delete_shadow_copies",
                        "ransom_note.txt", "aes_key_exfil", "decrypt_instructions", "locker_extension"}};
    b.categories[5] = {{{0xB9, 0x40, 0xD2, 0xDE, 0x36, 0xD0, 0xE3, 0xB4},
                        {0xE3, 0x26, 0xCA, 0x34, 0xC3, 0x92, 0x58, 0x0C},
                        {0x71, 0xB4, 0xB7, 0xCB, 0xBF, 0x6A},
                        {0x9D, 0x86, 0xFD, 0xAB, 0x37, 0xEC},
                        {0x31, 0xF1, 0x0B, 0x76, 0x39, 0xEA},
                        {0x7E, 0x41, 0x28, 0xC1, 0x1C, 0x6B, 0xE5}},
                       {"hook_ssdt_entry", "hide_process_list", "KernelDriverStealth", "patch_syscall_table",
                        "unlink_eprocess", "rootkit_filter_io", "hide_registry_key", "dkom_manipulate"}};
    b.categories[6] = {{{0xE3, 0x75, 0xFF, 0xE7, 0xA6, 0x9D, 0x87, 0xE3},
                        {0x16, 0x79, 0xAA, 0x17, 0x95, 0xF4},
                        {0x8B, 0xF0, 0x0C, 0x0B, 0xAA, 0x8C, 0x7F, 0xF2},
                        {0x27, 0x58, 0x68, 0xAA, 0x59, 0x3D, 0x2C},
                        {0x22, 0xFE, 0x7A, 0x54, 0xDE, 0x8C},
                        {0xD9, 0x2A, 0xCC, 0x5B, 0x1E, 0xE3}},
                       {"keylog_buffer", "screenshot_capture", "steal_browser_cookies", "clipboard_monitor",
                        "exfil_upload_ftp", "password_grabber", "webcam_snapshot", "SpyAgentConfig"}};
    b.categories[7] = {{{0xB9, 0x15, 0x92, 0x96, 0xAB, 0xCE, 0x0D, 0x89},
                        {0x9E, 0x04, 0x77, 0x14, 0x6D, 0xB1},
                        {0x4D, 0xDD, 0x94, 0xAF, 0xF7, 0xCE, 0x7C, 0x07},
                        {0x2F, 0xD1, 0x71, 0xF2, 0xEB, 0xE8, 0x2D, 0x55},
                        {0x73, 0x82, 0x85, 0x21, 0x66, 0x64, 0xE4, 0xBD},
                        {0x6C, 0x30, 0xFA, 0x77, 0x67, 0x5C, 0x72}},
                       {"infect_host_exe", "append_virus_body", "polymorph_decryptor", "scan_drive_targets",
                        "overwrite_entrypoint", "VirusMarkerTag", "replicate_to_share", "corrupt_mbr_sector"}};
    b.benign_code = {{0x1C, 0x35, 0x09, 0xB3, 0x05, 0x94, 0x55}, {0xA0, 0xC1, 0x81, 0x6F, 0x5C, 0x7E},
                     {0x82, 0x46, 0x34, 0x63, 0x66, 0x76, 0x10, 0x44}, {0x04, 0xCC, 0x5D, 0x9B, 0x1E, 0xE7, 0xFE},
                     {0xB3, 0xF1, 0x0C, 0xF4, 0x30, 0x37, 0x5E, 0x07}, {0x60, 0x0A, 0xE9, 0xBA, 0x82, 0x86, 0x16, 0x3F},
                     {0x4E, 0x68, 0xEC, 0xB7, 0x79, 0xC4, 0x98},       {0x90, 0x7D, 0x87, 0xE8, 0x3C, 0x6A, 0x7A, 0xF8},
                     {0x28, 0xAD, 0x4D, 0x10, 0x0B, 0x30, 0x1C, 0xE6}, {0xE5, 0x09, 0x3F, 0xF9, 0xAA, 0x39, 0xE7},
                     {0x51, 0x64, 0x8A, 0x00, 0x53, 0x24},             {0x1B, 0xB7, 0x3C, 0x90, 0xF8, 0x74, 0xB9, 0x14},
                     {0x2A, 0x0D, 0xD8, 0x09, 0xF5, 0xC8, 0xBE},       {0x3E, 0x26, 0x03, 0x82, 0x9A, 0xC5, 0xE0},
                     {0xD2, 0x7B, 0x2B, 0x16, 0x6D, 0xB0, 0xCC},       {0x92, 0x62, 0x7D, 0xA8, 0x7D, 0x3D, 0xEE, 0xE4}};
    b.benign_strings = {"GetModuleHandleW", "LoadLibraryExA",   "CreateFileW",      "ReadFile",
                        "CloseHandle",      "HeapAlloc",        "GetLastError",     "msvcrt.dll",
                        "kernel32.dll",     "user32.dll",       "RegOpenKeyExW",    "SetWindowTextW",
                        "MessageBoxW",      "GetSystemTime",    "config.ini",       "Settings saved",
                        "Open document",    "Print preview",    "Help contents",    "Check for updates",
                        "en-US",            "Application data", "Recent files",     "Save as..."};
    b.vendor_code = {{0x2E, 0x0A, 0xA2, 0x8C, 0x43, 0xEF},       {0xC8, 0xDB, 0xF6, 0xA6, 0x5F, 0x5C, 0x55, 0x27},
                     {0x67, 0x61, 0x86, 0xA3, 0x90, 0x8D},       {0x7B, 0x6F, 0x75, 0xFC, 0x41, 0x9B, 0x89, 0x10},
                     {0x14, 0x4D, 0x01, 0x85, 0x90, 0x0C},       {0xBB, 0xBA, 0xB3, 0x32, 0x6A, 0xCB, 0x87, 0x17}};
    b.vendor_strings = {"Contoso Corporation", "VS_VERSION_INFO",        "Signed: Contoso Code Signing CA",
                        "LegalCopyright",      "Windows Installer XML", "ProductVersion 10.0"};
    return b;
  }();
  return bank;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string path;  // relative to the corpus directory
  int label = 0;     // 0 benign, 1 malicious
  Category category = Category::none;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct CorpusManifest {
  std::vector<ManifestRecord> records;

  friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

inline constexpr std::string_view kManifestName = "manifest.csv";

inline std::string manifest_csv(const CorpusManifest& m) {
  std::string out = "path,label,category\n";
  for (const auto& r : m.records) {
    out += r.path;
    out += r.label ? ",malicious," : ",benign,";
    out += to_string(r.category);
    out += '\n';
  }
  return out;
}

inline void validate_manifest(const CorpusManifest& m) {
  std::unordered_set<std::string> seen;
  for (const auto& r : m.records) {
    if (!seen.insert(r.path).second) throw DataError("manifest: duplicate path " + r.path);
    if (r.label == 0 && r.category != Category::none) throw DataError("manifest: benign record " + r.path + " has a category");
    if (r.label == 1 && r.category == Category::none) throw DataError("manifest: malicious record " + r.path + " lacks a category");
  }
}

inline CorpusManifest parse_manifest_csv(std::string_view text) {
  CorpusManifest m;
  std::size_t at = 0;
  bool header = true;
  std::size_t line_no = 0;
  while (at < text.size()) {
    std::size_t nl = text.find('\n', at);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(at, nl - at);
    at = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (header) {
      if (line != "path,label,category") throw DataError("manifest: unexpected header '" + std::string(line) + "'");
      header = false;
      continue;
    }
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = c1 == std::string_view::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string_view::npos) throw DataError("manifest: malformed line " + std::to_string(line_no));
    ManifestRecord r;
    r.path = std::string(line.substr(0, c1));
    const std::string_view label = line.substr(c1 + 1, c2 - c1 - 1);
    if (label == "benign") {
      r.label = 0;
    } else if (label == "malicious") {
      r.label = 1;
    } else {
      throw DataError("manifest: bad label '" + std::string(label) + "' on line " + std::to_string(line_no));
    }
    try {
      r.category = parse_category(line.substr(c2 + 1));
    } catch (const ConfigError&) {
      throw DataError("manifest: bad category on line " + std::to_string(line_no));
    }
    m.records.push_back(std::move(r));
  }
  if (header) throw DataError("manifest: missing header");
  validate_manifest(m);
  return m;
}

inline CorpusManifest read_manifest(const std::filesystem::path& corpus_dir) {
  const Bytes raw = read_bytes(corpus_dir / kManifestName);
  return parse_manifest_csv(std::string_view(reinterpret_cast<const char*>(raw.data()), raw.size()));
}

// ---------------------------------------------------------------------------
// Generator

struct CorpusConfig {
  std::uint64_t seed = 7;
  std::size_t n_benign = 0;
  std::size_t n_malicious = 0;
  std::vector<Category> categories = default_attack_categories();
  std::size_t size_min = 1536;
  std::size_t size_max = 3072;
  std::size_t motif_spacing = 64;         // one category motif per this many code bytes
  std::size_t benign_motif_spacing = 48;  // one common benign motif per this many code bytes
  int benign_strings_min = 5;
  int benign_strings_max = 15;
  int category_strings_min = 1;
  int category_strings_max = 4;
  // Share of files carrying vendor metadata (version info, signer name).
  double benign_vendor_rate = 0.8;
  double malicious_vendor_rate = 0.0;
  // Benign tools whose code looks like malware (packers, admin utilities):
  // category code motifs and vendor metadata, but no category strings.
  double benign_dual_use_rate = 0.5;

  void validate() const {
    if (size_min < 512 || size_max > 16384 || size_min > size_max) {
      throw ConfigError("size range must satisfy 512 <= min <= max <= 16384");
    }
    if (motif_spacing < 16 || benign_motif_spacing < 16) throw ConfigError("motif spacing must be >= 16");
    if (benign_strings_min < 0 || benign_strings_min > benign_strings_max) throw ConfigError("bad benign string range");
    if (category_strings_min < 1 || category_strings_min > category_strings_max) {
      throw ConfigError("bad category string range");
    }
    if (benign_vendor_rate < 0 || benign_vendor_rate > 1 || malicious_vendor_rate < 0 || malicious_vendor_rate > 1) {
      throw ConfigError("vendor rates must lie in [0, 1]");
    }
    if (benign_dual_use_rate < 0 || benign_dual_use_rate > 1) throw ConfigError("dual-use rate must lie in [0, 1]");
    if (n_malicious > 0 && categories.empty()) throw ConfigError("malicious samples need at least one category");
    for (Category c : categories) {
      if (c == Category::none) throw ConfigError("'none' is not a malware category");
    }
  }
};

namespace detail {

// Filler resembling compiled code: mostly a handful of frequent opcode and
// operand bytes, the rest uniform.
inline std::uint8_t code_filler_byte(Rng& rng) {
  static constexpr std::array<std::uint8_t, 16> common{0x00, 0x0F, 0x48, 0x89, 0x8B, 0xC3, 0xE8, 0xFF,
                                                       0x83, 0x85, 0xC0, 0x90, 0xCC, 0x01, 0x04, 0x24};
  if (rng.bernoulli(0.6)) return common[rng.below(common.size())];
  return rng.byte();
}

inline void plant(Bytes& code, const Bytes& motif, std::size_t at) {
  std::copy(motif.begin(), motif.end(), code.begin() + static_cast<std::ptrdiff_t>(at));
}

// One motif per block of `spacing` bytes, at a random offset inside the block.
inline void plant_per_block(Bytes& code, const std::vector<Bytes>& motifs, std::size_t spacing, Rng& rng) {
  for (std::size_t block = 0; block + spacing <= code.size(); block += spacing) {
    const Bytes& m = motifs[rng.below(motifs.size())];
    plant(code, m, block + rng.below(spacing - m.size() + 1));
  }
}

}  // namespace detail

/// Builds one sample in memory.
inline TexeFile generate_sample(const CorpusConfig& cfg, int label, Category category, std::uint64_t seed) {
  const MotifBank& bank = motif_bank();
  Rng rng(seed);
  const std::size_t target = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(cfg.size_min),
                                                                 static_cast<std::int64_t>(cfg.size_max)));
  const bool dual_use = !label && rng.bernoulli(cfg.benign_dual_use_rate);
  const bool vendor = dual_use || rng.bernoulli(label ? cfg.malicious_vendor_rate : cfg.benign_vendor_rate);
  const Category look_alike = dual_use ? kMalwareCategories[rng.below(kMalwareCategories.size())] : Category::none;

  std::vector<std::string> strings;
  const auto n_benign = rng.range(cfg.benign_strings_min, cfg.benign_strings_max);
  for (std::int64_t i = 0; i < n_benign; ++i) strings.push_back(bank.benign_strings[rng.below(bank.benign_strings.size())]);
  if (vendor) {
    const auto n = rng.range(1, 3);
    for (std::int64_t i = 0; i < n; ++i) strings.push_back(bank.vendor_strings[rng.below(bank.vendor_strings.size())]);
  }
  if (label) {
    const auto& cat = bank.of(category).strings;
    const auto n = rng.range(cfg.category_strings_min, cfg.category_strings_max);
    for (std::int64_t i = 0; i < n; ++i) strings.push_back(cat[rng.below(cat.size())]);
  }
  rng.shuffle(std::span(strings));

  Section data;
  data.kind = SectionKind::data;
  for (const std::string& s : strings) {
    data.payload.insert(data.payload.end(), s.begin(), s.end());
    data.payload.push_back(0);
  }

  const std::size_t header = texe_header_size(2);
  const std::size_t used = header + data.payload.size();
  const std::size_t code_len = std::max<std::size_t>(256, target > used ? target - used : 0);
  Section code;
  code.kind = SectionKind::code;
  code.payload.resize(code_len);
  for (auto& b : code.payload) b = detail::code_filler_byte(rng);
  detail::plant_per_block(code.payload, bank.benign_code, cfg.benign_motif_spacing, rng);
  if (vendor) {
    const auto n = rng.range(1, 3);
    for (std::int64_t i = 0; i < n; ++i) {
      const Bytes& m = bank.vendor_code[rng.below(bank.vendor_code.size())];
      detail::plant(code.payload, m, rng.below(code_len - m.size() + 1));
    }
  }
  if (label) detail::plant_per_block(code.payload, bank.of(category).code, cfg.motif_spacing, rng);
  if (dual_use) detail::plant_per_block(code.payload, bank.of(look_alike).code, cfg.motif_spacing, rng);

  TexeFile f;
  f.sections.push_back(std::move(code));
  f.sections.push_back(std::move(data));
  relayout(f);
  return f;
}

/// Writes `n_benign + n_malicious` files plus manifest.csv into `out_dir`.
/// Malicious samples take categories round-robin in the order given.
inline CorpusManifest gen_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  CorpusManifest m;
  const std::size_t total = cfg.n_benign + cfg.n_malicious;
  for (std::size_t i = 0; i < total; ++i) {
    const int label = i < cfg.n_benign ? 0 : 1;
    ManifestRecord r;
    r.label = label;
    char name[64];
    if (label) {
      const std::size_t j = i - cfg.n_benign;
      r.category = cfg.categories[j % cfg.categories.size()];
      std::snprintf(name, sizeof name, "m%05zu_%s.texe", j, std::string(to_string(r.category)).c_str());
    } else {
      std::snprintf(name, sizeof name, "b%05zu.texe", i);
    }
    r.path = name;
    const TexeFile f = generate_sample(cfg, label, r.category, derive_seed(cfg.seed, i));
    write_bytes(out_dir / r.path, write_texe(f));
    m.records.push_back(std::move(r));
  }
  write_text(out_dir / kManifestName, manifest_csv(m));
  return m;
}

// Every malicious file has category code motifs, so this flags all of them;
// dual-use benign files trip it too.
inline bool contains_category_motif(std::span<const std::uint8_t> bytes) {
  for (const auto& cat : motif_bank().categories) {
    for (const Bytes& m : cat.code) {
      if (std::search(bytes.begin(), bytes.end(), m.begin(), m.end()) != bytes.end()) return true;
    }
  }
  return false;
}

// The corpus labelling rule: only malicious files carry category strings.
// Code motifs alone do not decide, since dual-use benign files have them too.
inline bool contains_category_string(const TexeFile& f) {
  for (const Section& s : f.sections) {
    for (const auto& cat : motif_bank().categories) {
      for (const std::string& str : cat.strings) {
        if (std::search(s.payload.begin(), s.payload.end(), str.begin(), str.end()) != s.payload.end()) return true;
      }
    }
  }
  return false;
}

}  // namespace armd
