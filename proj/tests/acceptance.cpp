// Acceptance runner. Usage: acceptance <work-dir>
//
// Prints one PASS/FAIL line per criterion on stdout; progress goes to
// stderr. Exits non-zero when any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>

#include "armd/attack.hpp"
#include "armd/corpus.hpp"
#include "armd/experiments.hpp"
#include "armd/views.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace armd;
using namespace armd::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

std::string rate_str(const std::optional<double>& r) { return r ? num(*r) : "undefined"; }

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  Rng rng(1);
  std::size_t instances = 0;
  double worst = 0.0;
  std::string worst_case;
  auto run = [&](const std::vector<GradCase>& cases, int trials) {
    for (const GradCase& c : cases) {
      for (int t = 0; t < trials; ++t) {
        const GradInstance inst = c.make(rng);
        const GradCheck r = grad_check(inst.loss, inst.wrt, 1e-5);
        ++instances;
        if (r.max_rel_error > worst) {
          worst = r.max_rel_error;
          worst_case = c.name;
        }
      }
    }
  };
  run(layer_grad_cases(), 4);
  run(fusion_grad_cases(), 4);
  run(detector_grad_cases(), 2);
  const double secs = seconds_since(t0);
  return {instances >= 100 && worst <= 1e-4 && secs < 60.0,
          std::to_string(instances) + " instances, max rel error " + num(worst) + " (" + worst_case + "), " +
              num(secs, 3) + " s"};
}

Verdict oracle_equivalence() {
  Rng rng(2);
  std::size_t cases = 0;
  double worst = 0.0;
  auto record = [&](double err) {
    ++cases;
    worst = std::max(worst, err);
  };
  for (int i = 0; i < 100; ++i) {
    const std::size_t cin = 1 + rng.below(4), cout = 1 + rng.below(4), k = 1 + rng.below(5);
    const std::size_t stride = 1 + rng.below(4), len = k + rng.below(20);
    const Tensor x = random_tensor({len, cin}, rng), w = random_tensor({cout, k, cin}, rng),
                 b = random_tensor({cout}, rng);
    record(max_abs_diff(conv1d(nullptr, x, w, b, stride).data(), naive_conv1d(x, w, b, stride)));
  }
  for (int i = 0; i < 60; ++i) {
    const std::size_t len = 4 + rng.below(30), c = 1 + rng.below(5);
    const Tensor x = random_tensor({len, c}, rng);
    const std::size_t out_len = 1 + rng.below(len);
    record(max_abs_diff(temporal_max_pool(nullptr, x, out_len).data(), naive_max_pool(x, out_len)));
    const Tensor y = random_tensor({1 + rng.below(10), 1 + rng.below(8)}, rng);
    record(max_abs_diff(channel_avg_max_pool(nullptr, y).data(), naive_channel_pool(y)));
  }
  for (int i = 0; i < 60; ++i) {
    const std::size_t nin = 1 + rng.below(10), nout = 1 + rng.below(6);
    const Tensor x = random_tensor({nin}, rng), w = random_tensor({nout, nin}, rng), b = random_tensor({nout}, rng);
    record(max_abs_diff(affine(nullptr, x, w, b).data(), naive_affine(x, w, b)));
  }
  for (int i = 0; i < 100; ++i) {
    const Tensor logits = random_tensor({2}, rng, -20, 20, false);
    record(max_abs_diff(softmax_cross_entropy(nullptr, logits, rng.below(2)).probabilities.data(),
                        naive_softmax(logits)));
  }
  return {cases >= 200 && worst <= 1e-9, std::to_string(cases) + " cases, max abs error " + num(worst)};
}

Verdict gating_identities() {
  Rng rng(3);
  double highway_err = 0.0, closed_err = 0.0;
  double att_min = 1.0, att_max = 0.0;
  for (std::size_t w : {1u, 4u, 32u}) {
    for (int i = 0; i < 20; ++i) {
      HighwayParams p = make_highway_params(w, rng);
      for (double& v : p.transform_bias.data()) v = rng.uniform(-1, 1);
      for (double& v : p.gate_bias.data()) v = -40.0;
      const Tensor x = random_tensor({1 + rng.below(8), w}, rng);
      highway_err = std::max(highway_err, max_abs_diff(highway(nullptr, x, p).data(), x.data()));
    }
  }
  for (int i = 0; i < 100; ++i) {
    const double spread = i % 10 == 0 ? 1e3 : 30.0;
    const Tensor x = random_tensor({1 + rng.below(10), 1 + rng.below(6)}, rng, -spread, spread);
    AttentionParams p = make_attention_params(rng);
    for (double& v : p.weight.data()) v = rng.uniform(-50, 50);
    p.bias[0] = rng.uniform(-5, 5);
    const Tensor map = attention_map(nullptr, x, p);
    for (double v : map.data()) {
      att_min = std::min(att_min, v);
      att_max = std::max(att_max, v);
    }
  }
  for (int i = 0; i < 50; ++i) {
    const std::size_t len = 1 + rng.below(8), c = 1 + rng.below(6);
    const Tensor a = random_tensor({len, c}, rng), b = random_tensor({len, c}, rng);
    FusionParams ah = make_fusion_params(FusionKind::attention_highway, c, rng);
    ah.attention->weight[0] = rng.uniform(-1, 1);
    ah.attention->bias[0] = rng.uniform(-1, 1);
    ah.highway->gate_bias[0] = -40.0;
    FusionParams at = make_fusion_params(FusionKind::attention, c, rng);
    at.attention = ah.attention;
    closed_err = std::max(closed_err, max_abs_diff(fuse(nullptr, a, b, ah).data(), fuse(nullptr, a, b, at).data()));
  }
  const bool pass = highway_err <= 1e-12 && closed_err <= 1e-12 && att_min > 0.0 && att_max < 1.0;
  return {pass, "highway identity error " + num(highway_err) + ", attention map in [" + num(att_min) + ", " +
                    num(att_max, 17) + "], closed-gate difference " + num(closed_err)};
}

Verdict format_round_trips(const fs::path& work) {
  Rng rng(4);
  std::size_t texe_ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const TexeFile f = random_texe(rng);
    const Bytes once = write_texe(f);
    if (write_texe(parse_texe(once)) == once) ++texe_ok;
  }
  std::size_t ckpt_ok = 0, models = 0, predictions = 0, pred_ok = 0;
  std::vector<DetectorConfig> configs;
  for (Arch a : kArchs) configs.push_back(tiny_detector(a));
  for (FusionKind k : kFusionKinds) configs.push_back(tiny_detector(Arch::armd, k));
  for (DetectorConfig c : configs) {
    c.train.seed = rng.next();
    const DetectorModel m = build(c);
    for (const auto& p : m.params) {
      Tensor t = p.value;
      for (double& v : t.data()) v += rng.uniform(-0.3, 0.3);
    }
    save_checkpoint(m, work / "a.ckpt");
    const DetectorModel back = load_checkpoint(work / "a.ckpt");
    save_checkpoint(back, work / "b.ckpt");
    ++models;
    if (read_bytes(work / "a.ckpt") == read_bytes(work / "b.ckpt")) ++ckpt_ok;
    const Classifier ca(m), cb(back);
    for (int i = 0; i < 20; ++i) {
      const SampleViews v = random_views(c, rng);
      const Prediction pa = ca.predict(v), pb = cb.predict(v);
      ++predictions;
      if (pa.label == pb.label && pa.probabilities == pb.probabilities) ++pred_ok;
    }
  }
  return {texe_ok == 1000 && ckpt_ok == models && pred_ok == predictions,
          std::to_string(texe_ok) + "/1000 TEXE files, " + std::to_string(ckpt_ok) + "/" + std::to_string(models) +
              " checkpoints, " + std::to_string(pred_ok) + "/" + std::to_string(predictions) + " predictions"};
}

Verdict view_asymmetry(const std::vector<std::pair<fs::path, const CorpusManifest*>>& corpora) {
  Rng rng(5);
  const ViewConfig cfg;
  std::size_t files = 0, source_same = 0, short_files = 0, binary_changed = 0;
  for (const auto& [dir, manifest] : corpora) {
    for (const auto& r : manifest->records) {
      const TexeFile f = parse_texe(read_bytes(dir / r.path));
      const Bytes before = write_texe(f);
      Bytes p(1 + rng.below(512));
      for (auto& b : p) b = rng.byte();
      const Bytes after = write_texe(append_overlay(f, p));
      const SampleViews v0 = make_views(before, cfg), v1 = make_views(after, cfg);
      ++files;
      if (v0.source_tokens == v1.source_tokens) ++source_same;
      if (before.size() < cfg.binary_length) {
        ++short_files;
        if (v0.binary_tokens != v1.binary_tokens) ++binary_changed;
      }
    }
  }
  return {files > 0 && source_same == files && binary_changed == short_files,
          std::to_string(files) + " files: source view unchanged on " + std::to_string(source_same) +
              ", binary view changed on " + std::to_string(binary_changed) + "/" + std::to_string(short_files) +
              " files shorter than N_b"};
}

// ---------------------------------------------------------------------------
// Trained detectors shared by the detection, robustness and ablation checks.

DetectorConfig detector(Arch arch, FusionKind fusion = FusionKind::attention_highway) {
  DetectorConfig c;
  c.arch = arch;
  c.fusion = fusion;
  return c;
}

const std::string kMalConv = "malconv";
const std::string kArmd = "armd-attention-highway";
const std::string kAttention = "armd-attention";

struct SeedRun {
  Experiment1Result detection;
  std::map<std::string, EvasionRates> hillclimb;

  const FittedDetector& find(const std::string& name) const {
    for (const auto& d : detection.detectors) {
      if (d.name == name) return d;
    }
    throw UsageError("no detector " + name);
  }
  const MetricsReport& report(const std::string& name) const {
    for (const auto& r : detection.reports) {
      if (r.detector == name) return r;
    }
    throw UsageError("no report " + name);
  }
};

AttackBudget hillclimb_budget(std::uint64_t seed) {
  AttackBudget b;
  b.mode = AttackMode::hillclimb;
  b.max_payload_bytes = 512;
  b.max_queries = 200;
  b.seed = seed;
  return b;
}

struct Workspace {
  fs::path corpus_dir, attack_dir;
  CorpusManifest corpus, attack;
  double corpus_seconds = 0.0;
  std::map<std::uint64_t, SeedRun> runs;

  SeedRun& train_and_attack(std::uint64_t seed, const std::vector<DetectorSpec>& specs) {
    const auto t0 = Clock::now();
    SeedRun& run = runs[seed];
    run.detection = run_experiment1(corpus_dir, corpus, specs, 0.8, seed);
    progress("seed " + std::to_string(seed) + " trained in " + num(seconds_since(t0), 3) + " s");
    const EvasionTable t = run_experiment2(run.detection.detectors, attack_dir, attack, hillclimb_budget(seed),
                                           TrainingCorpus{corpus_dir, &corpus});
    for (const auto& row : t.rows) {
      run.hillclimb[row.detector] = row.rates;
      progress("seed " + std::to_string(seed) + " " + row.detector + " hillclimb " +
               std::to_string(row.rates.total.evaded) + "/" + std::to_string(row.rates.total.detected));
    }
    return run;
  }
};

Verdict detection_performance(Workspace& ws) {
  const auto t0 = Clock::now();
  const std::vector<DetectorSpec> specs{trainable_detector(kMalConv, detector(Arch::malconv)),
                                        trainable_detector(kArmd, detector(Arch::armd))};
  const Experiment1Result r = run_experiment1(ws.corpus_dir, ws.corpus, specs, 0.8, 7);
  const double secs = ws.corpus_seconds + seconds_since(t0);
  ws.runs[7].detection = r;

  const double f_mc = ws.runs[7].report(kMalConv).metrics.f1, f_armd = ws.runs[7].report(kArmd).metrics.f1;
  std::size_t max_epochs = 0;
  for (const auto& d : r.detectors) max_epochs = std::max(max_epochs, d.model->history.train_loss.size());
  const bool sizes = r.split.train.size() == 2000 && r.split.val.size() == 500;
  const bool pass = sizes && f_mc >= 0.90 && f_armd >= 0.90 && f_armd >= f_mc - 0.02 && max_epochs <= 10 &&
                    secs <= 600.0;
  return {pass, "split " + std::to_string(r.split.train.size()) + "/" + std::to_string(r.split.val.size()) +
                    ", F1 malconv " + num(f_mc) + ", armd " + num(f_armd) + ", " + std::to_string(max_epochs) +
                    " epochs max, " + num(secs, 3) + " s"};
}

Verdict robustness_ordering(Workspace& ws, const std::vector<std::uint64_t>& seeds) {
  const std::vector<DetectorSpec> specs{trainable_detector(kMalConv, detector(Arch::malconv)),
                                        trainable_detector(kArmd, detector(Arch::armd))};
  bool pass = true;
  std::string detail;
  for (std::uint64_t s : seeds) {
    SeedRun* run = nullptr;
    if (ws.runs.count(s)) {
      // Models already trained for the detection check; attack them only.
      run = &ws.runs[s];
      const EvasionTable t = run_experiment2(run->detection.detectors, ws.attack_dir, ws.attack, hillclimb_budget(s),
                                             TrainingCorpus{ws.corpus_dir, &ws.corpus});
      for (const auto& row : t.rows) run->hillclimb[row.detector] = row.rates;
    } else {
      run = &ws.train_and_attack(s, specs);
    }
    const RateCell mc = run->hillclimb.at(kMalConv).total, ar = run->hillclimb.at(kArmd).total;
    const bool ok = mc.detected >= 200 && ar.detected >= 200 && mc.rate() && ar.rate() &&
                    *ar.rate() <= 0.5 * *mc.rate();
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": armd " +
              rate_str(ar.rate()) + " (" + std::to_string(ar.detected) + " detected) vs malconv " +
              rate_str(mc.rate()) + " (" + std::to_string(mc.detected) + " detected)";
  }
  return {pass, detail};
}

// Trains `name` for a seed unless it already exists, then attacks it.
const FittedDetector& ensure_detector(Workspace& ws, std::uint64_t seed, const std::string& name,
                                      const DetectorConfig& config) {
  SeedRun& run = ws.runs[seed];
  for (const auto& d : run.detection.detectors) {
    if (d.name == name) return d;
  }
  const auto t0 = Clock::now();
  if (run.detection.detectors.empty()) run.detection.split = split_corpus(ws.corpus, 0.8, seed);
  FittedDetector d = trainable_detector(name, config).fit(ws.corpus_dir, run.detection.split, seed);
  MetricsReport r{name, seed, evaluate_files(d.labels, ws.corpus_dir, run.detection.split.val), {}};
  r.metrics = compute_metrics(r.counts);
  run.detection.reports.push_back(r);
  run.detection.detectors.push_back(std::move(d));
  progress("seed " + std::to_string(seed) + " " + name + " trained in " + num(seconds_since(t0), 3) + " s, F1 " +
           num(r.metrics.f1));
  const FittedDetector& fitted = run.detection.detectors.back();
  const EvasionTable t = run_experiment2(std::span(&fitted, 1), ws.attack_dir, ws.attack, hillclimb_budget(seed),
                                         TrainingCorpus{ws.corpus_dir, &ws.corpus});
  run.hillclimb[name] = t.rows[0].rates;
  progress("seed " + std::to_string(seed) + " " + name + " hillclimb " + std::to_string(t.rows[0].rates.total.evaded) +
           "/" + std::to_string(t.rows[0].rates.total.detected));
  return fitted;
}

Verdict ablation_ordering(Workspace& ws, const std::vector<std::uint64_t>& seeds) {
  std::size_t holds = 0;
  std::string detail;
  for (std::uint64_t s : seeds) {
    ensure_detector(ws, s, kArmd, detector(Arch::armd));
    ensure_detector(ws, s, kAttention, detector(Arch::armd, FusionKind::attention));
    const auto att = ws.runs[s].hillclimb.at(kAttention).total.rate();
    const auto ah = ws.runs[s].hillclimb.at(kArmd).total.rate();
    if (att && ah && *att >= *ah) ++holds;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": attention " +
              rate_str(att) + " vs attention_highway " + rate_str(ah);
  }
  return {holds >= 4, std::to_string(holds) + "/" + std::to_string(seeds.size()) + " seeds hold (" + detail + ")"};
}

Verdict dual_view_sanity(Workspace& ws, const std::vector<std::uint64_t>& seeds) {
  bool pass = true;
  std::string detail;
  for (std::uint64_t s : seeds) {
    const FittedDetector& armd = ensure_detector(ws, s, kArmd, detector(Arch::armd));
    std::optional<double> rates[2];
    const AttackMode modes[2] = {AttackMode::append_random, AttackMode::dual_view};
    for (int i = 0; i < 2; ++i) {
      AttackBudget b = hillclimb_budget(s);
      b.mode = modes[i];
      rates[i] = run_experiment2(std::span(&armd, 1), ws.attack_dir, ws.attack, b,
                                 TrainingCorpus{ws.corpus_dir, &ws.corpus})
                     .rows[0]
                     .rates.total.rate();
    }
    const bool ok = rates[0] && rates[1] && *rates[1] >= *rates[0];
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": dual_view " +
              rate_str(rates[1]) + " vs append_random " + rate_str(rates[0]);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("'") + ARMD_CLI_PATH + "' " + args + " >> '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

Verdict ablate_determinism(const fs::path& work) {
  const fs::path dir = work / "ablate", log = dir / "cli.log";
  fs::create_directories(dir);
  write_text(dir / "config.json", R"({
  "detector": {"embedding_dim": 4, "channels": 8, "pooled_length": 8, "train": {"epochs": 3, "batch_size": 8}},
  "budget": {"mode": "hillclimb", "budget_bytes": 128, "max_queries": 30}
}
)");
  int rc = run_cli("gen-corpus --out " + q(dir / "train") +
                       " --n-benign 40 --n-malicious 40 --categories botnet,ransomware,virus --seed 21",
                   log);
  rc = rc ? rc : run_cli("gen-corpus --out " + q(dir / "attack") +
                             " --n-benign 10 --n-malicious 20 --categories botnet,ransomware,virus --seed 22",
                         log);
  for (const char* report : {"r1", "r2"}) {
    if (rc) break;
    rc = run_cli("--config " + q(dir / "config.json") + " ablate --corpus " + q(dir / "train") +
                     " --attack-corpus " + q(dir / "attack") + " --seeds 1,2 --report " + q(dir / report),
                 log);
  }
  if (rc) return {false, "CLI exited with " + std::to_string(rc) + ", see " + log.string()};

  std::size_t csvs = 0, identical = 0;
  for (const auto& e : fs::directory_iterator(dir / "r1")) {
    if (e.path().extension() != ".csv") continue;
    ++csvs;
    const fs::path twin = dir / "r2" / e.path().filename();
    if (fs::exists(twin) && read_bytes(e.path()) == read_bytes(twin)) ++identical;
  }
  std::size_t csvs2 = 0;
  for (const auto& e : fs::directory_iterator(dir / "r2")) csvs2 += e.path().extension() == ".csv";
  return {csvs == 3 && csvs2 == csvs && identical == csvs,
          std::to_string(identical) + "/" + std::to_string(csvs) + " CSV reports byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <work-dir>\n";
    return 2;
  }
  const fs::path work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);

  Workspace ws;
  ws.corpus_dir = work / "corpus";
  ws.attack_dir = work / "attack";
  const std::vector<std::uint64_t> robustness_seeds{7, 8, 9}, ablation_seeds{7, 8, 9, 10, 11};

  int failures = 0;
  auto check = [&](int id, const char* title, const std::function<Verdict()>& fn) {
    const auto t0 = Clock::now();
    progress("criterion " + std::to_string(id) + ": " + title);
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << title << ": " << v.detail << " ["
              << num(seconds_since(t0), 3) << " s]" << std::endl;
  };

  check(1, "gradient correctness", gradient_correctness);
  check(2, "oracle equivalence", oracle_equivalence);
  check(3, "gating identities", gating_identities);
  check(4, "format round trips", [&] { return format_round_trips(work); });
  check(5, "view asymmetry", [&] {
    const auto t0 = Clock::now();
    CorpusConfig cc;
    cc.seed = 7;
    cc.n_benign = 1250;
    cc.n_malicious = 1250;
    ws.corpus = gen_corpus(cc, ws.corpus_dir);
    ws.corpus_seconds = seconds_since(t0);
    CorpusConfig ac;
    ac.seed = 1001;
    ac.n_benign = 100;
    ac.n_malicious = 300;
    ws.attack = gen_corpus(ac, ws.attack_dir);
    return view_asymmetry({{ws.corpus_dir, &ws.corpus}, {ws.attack_dir, &ws.attack}});
  });
  check(6, "detection performance", [&] { return detection_performance(ws); });
  check(7, "robustness ordering", [&] { return robustness_ordering(ws, robustness_seeds); });
  check(8, "ablation ordering", [&] { return ablation_ordering(ws, ablation_seeds); });
  check(9, "dual-view attack sanity", [&] { return dual_view_sanity(ws, ablation_seeds); });
  check(10, "ablate determinism", [&] { return ablate_determinism(work); });

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
