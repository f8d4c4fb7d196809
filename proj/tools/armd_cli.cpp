// Command-line front end: corpus generation, training, evaluation, attacks
// and the fusion ablation.
//
// Option values resolve as: command-line flag, then the --config JSON file
// (keys are flag names with '_' for '-'), then the built-in default.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "armd/attack.hpp"
#include "armd/corpus.hpp"
#include "armd/detectors.hpp"
#include "armd/errors.hpp"
#include "armd/experiments.hpp"
#include "armd/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  armd::Bytes raw;
  try {
    raw = armd::read_bytes(path);
  } catch (const armd::DataError& e) {
    throw armd::ConfigError(std::string("cannot read config: ") + e.what());
  }
  try {
    json j = json::parse(raw.begin(), raw.end());
    if (!j.is_object()) throw armd::ConfigError("config file must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw armd::ConfigError(std::string("config file: ") + e.what());
  }
}

// Resolves one option by the documented precedence.
class Resolver {
 public:
  explicit Resolver(const json& config) : config_(config) {}

  template <typename T>
  T get(const CLI::Option* opt, const T& flag_value, const std::string& key, const T& fallback) const {
    if (opt->count() > 0) return flag_value;
    if (config_.contains(key)) {
      try {
        return config_.at(key).get<T>();
      } catch (const json::exception& e) {
        throw armd::ConfigError("config key '" + key + "': " + e.what());
      }
    }
    return fallback;
  }

  // Like get(), but the option has no default and must come from somewhere.
  template <typename T>
  T require(const CLI::Option* opt, const T& flag_value, const std::string& key) const {
    if (opt->count() == 0 && !config_.contains(key)) {
      throw armd::ConfigError("missing required option --" + dashed(key));
    }
    return get(opt, flag_value, key, T{});
  }

  const json& section(const std::string& key) const {
    static const json empty = json::object();
    return config_.contains(key) ? config_.at(key) : empty;
  }

 private:
  static std::string dashed(std::string s) {
    for (char& c : s) {
      if (c == '_') c = '-';
    }
    return s;
  }

  const json& config_;
};

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t end = std::min(list.find(',', start), list.size());
    const std::string item = list.substr(start, end - start);
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw armd::ConfigError("bad seed '" + item + "' in --seeds");
    }
    start = end + 1;
  }
  return seeds;
}

std::string detector_name(const armd::DetectorConfig& c) {
  std::string n(armd::to_string(c.arch));
  if (c.arch == armd::Arch::armd) n += "-" + std::string(armd::to_string(c.fusion));
  return n;
}

std::string extension(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

void print_metrics(const armd::MetricsReport& r) {
  std::cout << r.detector << " accuracy=" << r.metrics.accuracy << " precision=" << r.metrics.precision
            << " recall=" << r.metrics.recall << " f1=" << r.metrics.f1 << " (tp=" << r.counts.tp
            << " fp=" << r.counts.fp << " tn=" << r.counts.tn << " fn=" << r.counts.fn << ")\n";
}

// ---------------------------------------------------------------------------

struct GenCorpusArgs {
  std::string out, categories;
  std::size_t n_benign = 0, n_malicious = 0, size_min = 0, size_max = 0;
  std::uint64_t seed = 0;
  CLI::Option *o_out, *o_nb, *o_nm, *o_cat, *o_seed, *o_min, *o_max;
};

int run_gen_corpus(const GenCorpusArgs& a, const Resolver& cfg) {
  armd::CorpusConfig c;
  const std::string out = cfg.require(a.o_out, a.out, "out");
  c.n_benign = cfg.require(a.o_nb, a.n_benign, "n_benign");
  c.n_malicious = cfg.require(a.o_nm, a.n_malicious, "n_malicious");
  c.categories = armd::parse_category_list(cfg.require(a.o_cat, a.categories, "categories"));
  c.seed = cfg.require(a.o_seed, a.seed, "seed");
  c.size_min = cfg.get(a.o_min, a.size_min, "size_min", c.size_min);
  c.size_max = cfg.get(a.o_max, a.size_max, "size_max", c.size_max);
  const json& knobs = cfg.section("corpus");
  try {
    c.benign_vendor_rate = knobs.value("benign_vendor_rate", c.benign_vendor_rate);
    c.malicious_vendor_rate = knobs.value("malicious_vendor_rate", c.malicious_vendor_rate);
    c.benign_dual_use_rate = knobs.value("benign_dual_use_rate", c.benign_dual_use_rate);
  } catch (const json::exception& e) {
    throw armd::ConfigError(std::string("config section 'corpus': ") + e.what());
  }
  const armd::CorpusManifest m = armd::gen_corpus(c, out);
  std::cout << "wrote " << m.records.size() << " files to " << out << " (manifest " << armd::manifest_hash(m)
            << ")\n";
  return 0;
}

struct TrainArgs {
  std::string corpus, arch, fusion, out;
  std::uint64_t seed = 0;
  std::size_t epochs = 0, batch = 0;
  double lr = 0, split = 0;
  CLI::Option *o_corpus, *o_arch, *o_fusion, *o_seed, *o_out, *o_epochs, *o_lr, *o_batch, *o_split;
};

int run_train(const TrainArgs& a, const Resolver& cfg) {
  armd::DetectorConfig c = armd::detector_config_from_json(cfg.section("detector"));
  const fs::path corpus = cfg.require(a.o_corpus, a.corpus, "corpus");
  const std::string out = cfg.require(a.o_out, a.out, "out");
  c.arch = armd::parse_arch(cfg.require(a.o_arch, a.arch, "arch"));
  const std::string fusion = cfg.get(a.o_fusion, a.fusion, "fusion", std::string());
  if (!fusion.empty()) {
    if (c.arch != armd::Arch::armd) throw armd::ConfigError("--fusion applies to --arch armd only");
    c.fusion = armd::parse_fusion_kind(fusion);
  }
  const std::uint64_t seed = cfg.require(a.o_seed, a.seed, "seed");
  c.train.seed = seed;
  c.train.epochs = cfg.get(a.o_epochs, a.epochs, "epochs", c.train.epochs);
  c.train.lr = cfg.get(a.o_lr, a.lr, "lr", c.train.lr);
  c.train.batch_size = cfg.get(a.o_batch, a.batch, "batch", c.train.batch_size);
  const double split_fraction = cfg.get(a.o_split, a.split, "split", 0.8);
  c.validate();

  const armd::CorpusManifest manifest = armd::read_manifest(corpus);
  const armd::Split split = armd::split_corpus(manifest, split_fraction, seed);
  armd::DetectorModel m = armd::build(c);
  const auto& h = armd::train(m, armd::load_dataset(corpus, split.train, c.view),
                              armd::load_dataset(corpus, split.val, c.view));
  for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
    std::cout << "epoch " << e + 1 << " loss=" << h.train_loss[e] << " val_f1=" << h.val_f1[e] << "\n";
  }
  std::cout << "kept epoch " << h.best_epoch << (h.stopped_early ? " (stopped early)" : "") << "\n";
  armd::save_checkpoint(m, out);
  std::cout << "saved " << out << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, corpus, report;
  CLI::Option *o_ckpt, *o_corpus, *o_report;
};

int run_eval(const EvalArgs& a, const Resolver& cfg) {
  const fs::path ckpt = cfg.require(a.o_ckpt, a.ckpt, "ckpt");
  const fs::path corpus = cfg.require(a.o_corpus, a.corpus, "corpus");
  const fs::path report = cfg.require(a.o_report, a.report, "report");
  const std::string ext = extension(report);
  if (ext != ".csv" && ext != ".json") throw armd::ConfigError("--report must end in .csv or .json");

  const armd::DetectorModel m = armd::load_checkpoint(ckpt);
  const armd::CorpusManifest manifest = armd::read_manifest(corpus);
  armd::MetricsReport r{detector_name(m.config), m.config.train.seed,
                        armd::evaluate_files(armd::detector_labels(m), corpus, manifest.records), {}};
  r.metrics = armd::compute_metrics(r.counts);
  print_metrics(r);
  if (ext == ".csv") {
    armd::write_text(report, armd::metrics_csv(std::span(&r, 1)));
  } else {
    json j = {{"detector", armd::to_json(m.config)},
              {"corpus", corpus.string()},
              {"manifest_sha1", armd::manifest_hash(manifest)},
              {"metrics", armd::to_json(r)}};
    armd::write_text(report, j.dump(2) + "\n");
  }
  return 0;
}

struct AttackArgs {
  std::string ckpt, corpus, mode, report;
  std::size_t budget_bytes = 0, max_queries = 0;
  std::uint64_t seed = 0;
  CLI::Option *o_ckpt, *o_corpus, *o_mode, *o_bytes, *o_queries, *o_seed, *o_report;
};

int run_attack(const AttackArgs& a, const Resolver& cfg) {
  const fs::path ckpt = cfg.require(a.o_ckpt, a.ckpt, "ckpt");
  const fs::path corpus = cfg.require(a.o_corpus, a.corpus, "corpus");
  const fs::path report = cfg.require(a.o_report, a.report, "report");
  armd::AttackBudget b;
  b.mode = armd::parse_attack_mode(cfg.require(a.o_mode, a.mode, "mode"));
  b.max_payload_bytes = cfg.get(a.o_bytes, a.budget_bytes, "budget_bytes", b.max_payload_bytes);
  b.max_queries = cfg.get(a.o_queries, a.max_queries, "max_queries", b.max_queries);
  b.seed = cfg.require(a.o_seed, a.seed, "seed");
  b.validate();

  const armd::DetectorModel m = armd::load_checkpoint(ckpt);
  const armd::CorpusManifest manifest = armd::read_manifest(corpus);
  const auto outcomes = armd::attack_corpus(armd::detector_labels(m), corpus, manifest.records, b);
  const auto cats = armd::manifest_categories(manifest);
  const armd::EvasionRates rates = armd::evasion_rate(outcomes, cats);
  for (armd::Category c : cats) {
    const auto& cell = rates.by_category.at(c);
    std::cout << armd::to_string(c) << " " << cell.evaded << "/" << cell.detected << " "
              << armd::format_rate(cell.rate()) << "\n";
  }
  std::cout << "total " << rates.total.evaded << "/" << rates.total.detected << " "
            << armd::format_rate(rates.total.rate()) << "\n";
  if (extension(report) == ".json") {
    json j = {{"detector", armd::to_json(m.config)},
              {"budget", armd::to_json(b)},
              {"manifest_sha1", armd::manifest_hash(manifest)},
              {"evasion", armd::to_json(rates)}};
    armd::write_text(report, j.dump(2) + "\n");
  } else {
    armd::write_text(report, armd::outcomes_csv(outcomes));
  }
  return 0;
}

struct AblateArgs {
  std::string corpus, attack_corpus, seeds, report;
  CLI::Option *o_corpus, *o_attack, *o_seeds, *o_report;
};

int run_ablate(const AblateArgs& a, const Resolver& cfg) {
  const fs::path corpus = cfg.require(a.o_corpus, a.corpus, "corpus");
  const fs::path attack_corpus = cfg.require(a.o_attack, a.attack_corpus, "attack_corpus");
  const fs::path report = cfg.require(a.o_report, a.report, "report");
  const std::vector<std::uint64_t> seeds = parse_seeds(cfg.require(a.o_seeds, a.seeds, "seeds"));

  armd::AblationConfig ac;
  ac.detector = armd::detector_config_from_json(cfg.section("detector"));
  const json& budget = cfg.section("budget");
  try {
    if (budget.contains("mode")) ac.budget.mode = armd::parse_attack_mode(budget.at("mode").get<std::string>());
    ac.budget.max_payload_bytes = budget.value("budget_bytes", ac.budget.max_payload_bytes);
    ac.budget.max_queries = budget.value("max_queries", ac.budget.max_queries);
    ac.split_fraction = cfg.section("split").is_number() ? cfg.section("split").get<double>() : ac.split_fraction;
  } catch (const json::exception& e) {
    throw armd::ConfigError(std::string("config: ") + e.what());
  }
  ac.budget.validate();

  const armd::CorpusManifest cm = armd::read_manifest(corpus);
  const armd::CorpusManifest am = armd::read_manifest(attack_corpus);
  const armd::AblationResult r = armd::run_experiment3(corpus, cm, attack_corpus, am, seeds, ac);

  fs::create_directories(report);
  for (const auto& t : r.per_seed) {
    armd::write_text(report / ("ablation_seed_" + std::to_string(t.seed) + ".csv"), armd::ablation_csv(t));
  }
  armd::write_text(report / "ablation_mean.csv", armd::ablation_mean_csv(r));
  json j = armd::to_json(r);
  j["seeds"] = seeds;
  j["detector"] = armd::to_json(ac.detector);
  j["budget"] = armd::to_json(ac.budget);
  j["budget"].erase("seed");
  j["split"] = ac.split_fraction;
  j["corpus_manifest_sha1"] = armd::manifest_hash(cm);
  j["attack_manifest_sha1"] = armd::manifest_hash(am);
  armd::write_text(report / "ablation.json", j.dump(2) + "\n");
  std::cout << armd::ablation_mean_csv(r);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-view malware detection, append attacks and fusion ablation"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file with option values");

  GenCorpusArgs g;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a labelled synthetic corpus");
  g.o_out = gen->add_option("--out", g.out, "Output directory");
  g.o_nb = gen->add_option("--n-benign", g.n_benign, "Number of benign files");
  g.o_nm = gen->add_option("--n-malicious", g.n_malicious, "Number of malicious files");
  g.o_cat = gen->add_option("--categories", g.categories, "Comma-separated malware categories");
  g.o_seed = gen->add_option("--seed", g.seed, "Generator seed");
  g.o_min = gen->add_option("--size-min", g.size_min, "Smallest file size in bytes");
  g.o_max = gen->add_option("--size-max", g.size_max, "Largest file size in bytes");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a detector and write a checkpoint");
  t.o_corpus = tr->add_option("--corpus", t.corpus, "Corpus directory");
  t.o_arch = tr->add_option("--arch", t.arch, "malconv | nonneg | convnet | armd");
  t.o_fusion = tr->add_option("--fusion", t.fusion, "concat | attention | highway | highway-attention | attention-highway");
  t.o_seed = tr->add_option("--seed", t.seed, "Split, initialisation and shuffle seed");
  t.o_out = tr->add_option("--out", t.out, "Checkpoint path");
  t.o_epochs = tr->add_option("--epochs", t.epochs, "Maximum epochs");
  t.o_lr = tr->add_option("--lr", t.lr, "Adam learning rate");
  t.o_batch = tr->add_option("--batch", t.batch, "Mini-batch size");
  t.o_split = tr->add_option("--split", t.split, "Training fraction of the corpus");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a whole corpus");
  e.o_ckpt = ev->add_option("--ckpt", e.ckpt, "Checkpoint path");
  e.o_corpus = ev->add_option("--corpus", e.corpus, "Corpus directory");
  e.o_report = ev->add_option("--report", e.report, "Report path (.csv or .json)");

  AttackArgs k;
  auto* at = app.add_subcommand("attack", "Run an append attack against a checkpoint");
  k.o_ckpt = at->add_option("--ckpt", k.ckpt, "Checkpoint path");
  k.o_corpus = at->add_option("--corpus", k.corpus, "Attack corpus directory");
  k.o_mode = at->add_option("--mode", k.mode, "append-random | append-benign | hillclimb | dual-view");
  k.o_bytes = at->add_option("--budget-bytes", k.budget_bytes, "Largest payload in bytes");
  k.o_queries = at->add_option("--max-queries", k.max_queries, "Queries per sample");
  k.o_seed = at->add_option("--seed", k.seed, "Attack seed");
  k.o_report = at->add_option("--report", k.report, "Outcome CSV (or .json summary)");

  AblateArgs b;
  auto* ab = app.add_subcommand("ablate", "Train and attack every fusion kind over several seeds");
  b.o_corpus = ab->add_option("--corpus", b.corpus, "Training corpus directory");
  b.o_attack = ab->add_option("--attack-corpus", b.attack_corpus, "Attack corpus directory");
  b.o_seeds = ab->add_option("--seeds", b.seeds, "Comma-separated seeds");
  b.o_report = ab->add_option("--report", b.report, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : static_cast<int>(armd::ExitCode::config);
  }

  try {
    const json config = read_config(config_path);
    const Resolver cfg(config);
    if (*gen) return run_gen_corpus(g, cfg);
    if (*tr) return run_train(t, cfg);
    if (*ev) return run_eval(e, cfg);
    if (*at) return run_attack(k, cfg);
    if (*ab) return run_ablate(b, cfg);
  } catch (const armd::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return static_cast<int>(err.exit_code());
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << "\n";
    return static_cast<int>(armd::ExitCode::internal);
  }
  return 0;
}
