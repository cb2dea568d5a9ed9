// Runs the nine acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is 0 only if all of them pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "f2at/attacks.hpp"
#include "f2at/bitplane.hpp"
#include "f2at/infotheory.hpp"
#include "f2at/losses.hpp"
#include "f2at/train.hpp"
#include "gradient_cases.hpp"
#include "toy_models.hpp"

namespace f2at {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* format, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// ---- 1. bit-plane exactness ------------------------------------------------

Outcome bitplane_exactness() {
  Outcome o;
  std::vector<std::uint16_t> values(256);
  for (std::size_t v = 0; v < 256; ++v) values[v] = static_cast<std::uint16_t>(v);
  const QuantImage all(8, 1, 16, 16, values);
  std::size_t checked = 0;
  for (unsigned k = 0; k <= 8; ++k) {
    const PatternPair p = slice(all, k);
    const unsigned low_mask = (1u << (8 - k)) - 1u;
    for (std::size_t v = 0; v < 256; ++v) {
      const unsigned nat = p.natural[v], pert = p.perturbed[v];
      o.require(nat + pert == v, fmt("K=%u value %zu: sum %u", k, v, nat + pert));
      o.require((nat & low_mask) == 0, fmt("K=%u value %zu: natural low bits set", k, v));
      o.require((pert & ~low_mask) == 0, fmt("K=%u value %zu: perturbed high bits set", k, v));
      ++checked;
    }
  }
  o.detail = fmt("%zu (value, K) pairs exact", checked) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- 2. information identities ---------------------------------------------

Outcome information_identities() {
  Outcome o;
  static const char* kNames[] = {"X", "Y", "Z"};
  double identity_max = 0.0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    Rng rng(derive_seed(2024, t));
    std::vector<info::Variable> vars;
    const std::size_t n = 2 + t % 2;
    for (std::size_t v = 0; v < n; ++v) vars.push_back({kNames[v], 2 + rng.below(7)});
    identity_max = std::max(identity_max, info::max_residual(info::verify_identities(info::random_table(rng, vars))));
  }
  double five_term_max = 0.0, equality_max = 0.0, triple_lo = 0.0, triple_hi = 0.0, linear_max = 0.0;
  for (std::uint64_t t = 0; t < 50; ++t) {
    Rng rng(derive_seed(2025, t));
    info::SystemOptions opt;
    opt.k = 1 + static_cast<unsigned>(t % 3);
    opt.pixels = 1 + static_cast<unsigned>(t % 2);
    opt.feature_alphabet = 2 + t % 3;
    opt.independent_patterns = t % 4 != 3;
    const info::TheoremReport r = info::verify_theorems(info::make_bitplane_system(rng, opt));
    five_term_max = std::max(five_term_max, r.theorem1_residual);
    equality_max = std::max(equality_max, r.h_equality_residual);
    linear_max = std::max(linear_max, r.linear_approximation_error);
    triple_lo = t == 0 ? r.triple_mi_value : std::min(triple_lo, r.triple_mi_value);
    triple_hi = t == 0 ? r.triple_mi_value : std::max(triple_hi, r.triple_mi_value);
  }
  o.require(identity_max <= 1e-12, "identity residual above 1e-12");
  o.require(five_term_max <= 1e-12, "five-term residual above 1e-12");
  o.require(equality_max <= 1e-12, "entropy equality residual above 1e-12");
  o.detail = fmt("identities max %.2e over 100 tables; five-term max %.2e and entropy equality max %.2e over 50 "
                 "systems; triple MI reported in [%.4f, %.4f] bits, linear approximation error up to %.4f",
                 identity_max, five_term_max, equality_max, triple_lo, triple_hi, linear_max) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- 3. gradient correctness -----------------------------------------------

Outcome gradient_correctness() {
  Outcome o;
  std::vector<testing::GradientCase> cases = testing::primitive_cases();
  for (const auto& c : testing::loss_cases()) cases.push_back(c);
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Rng rng(derive_seed(3003, i));
    for (int trial = 0; trial < 20; ++trial) {
      const auto [point, builder] = testing::draw_smooth(cases[i], rng);
      const GradCheckResult r = grad_check(builder, point, 1e-5);
      o.require(r.finite, cases[i].name + ": " + r.diagnostic);
      if (r.max_relative_error > worst) worst = r.max_relative_error, worst_name = cases[i].name;
    }
  }
  o.require(worst <= 1e-4, "relative error above 1e-4 in " + worst_name);
  o.detail = fmt("%zu cases x 20 points, max relative error %.2e (%s)", cases.size(), worst, worst_name.c_str()) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- 4. loss limits --------------------------------------------------------

double mean_negative_margin(const Tensor& z, const std::vector<std::size_t>& y) {
  const std::size_t c = z.dim(1);
  Tensor m({y.size()});
  for (std::size_t i = 0; i < y.size(); ++i) m[i] = -margin(z.data().subspan(i * c, c), y[i]);
  Graph g;
  return g.value(g.mean(g.constant(std::move(m)))).item();
}

double reference_cross_entropy(const Tensor& z, const std::vector<std::size_t>& y) {
  const std::size_t c = z.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto row = z.data().subspan(i * c, c);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    total += m + std::log(s) - row[y[i]];
  }
  return total / static_cast<double>(y.size());
}

Outcome loss_limits() {
  Outcome o;
  // Generic batches: 1 to 16 rows, 2 to 10 classes, logits uniform in [-5, 5].
  double worst_gap = 0.0;
  std::size_t below = 0, within = 0, over_bound = 0;
  for (std::uint64_t t = 0; t < 50; ++t) {
    Rng rng(derive_seed(4004, t));
    const std::size_t n = 1 + rng.below(16), c = 2 + rng.below(9);
    const Tensor z = testing::random_tensor(rng, {n, c}, -5.0, 5.0);
    const auto y = testing::random_labels(rng, n, c);
    const double soft = soft_margin_loss(z, y, 1e3), hard = mean_negative_margin(z, y);
    worst_gap = std::max(worst_gap, std::abs(soft - hard));
    below += soft < hard;
    within += std::abs(soft - hard) <= 1e-6;
    over_bound += soft - hard > std::log(static_cast<double>(c - 1)) / 1e3 + 1e-12;
  }
  o.require(within == 50, "soft margin further than 1e-6 from -mean(margin)");
  o.require(below == 0, fmt("%zu batches with soft margin below -mean(margin)", below));
  o.require(over_bound == 0, fmt("%zu batches above the log(C-1)/upsilon bound", over_bound));

  double ce_gap = 0.0;
  LossConfig zero;
  zero.alpha = 0.0;
  zero.gamma = 0.0;
  for (std::uint64_t t = 0; t < 20; ++t) {
    Rng rng(derive_seed(4005, t));
    const NetworkParams params = init_network(testing::tiny_network_config(), t);
    const Tensor clean = testing::random_tensor(rng, {4, 1, 8, 8}, 0.0, 1.0);
    Tensor adv = clean;
    for (double& v : adv.data()) v = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);
    const auto y = testing::random_labels(rng, 4, 3);
    const LossBreakdown b = total_loss(params, clean, adv, y, zero, 2);
    const NetworkClassifier model(params);
    ce_gap = std::max(ce_gap, std::abs(b.total - reference_cross_entropy(predict_logits(model, adv), y)));
  }
  o.require(ce_gap <= 1e-12, fmt("total loss %.2e from cross-entropy", ce_gap));
  o.detail = fmt("soft margin: %zu of 50 batches within 1e-6, max gap %.2e, %zu below, all within log(C-1)/upsilon; "
                 "total(alpha=gamma=0) vs cross-entropy max gap %.2e",
                 within, worst_gap, below, ce_gap) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- shared desk models ----------------------------------------------------

struct DeskModels {
  testing::SplitData data = testing::desk_data();
  std::optional<TrainResult> undefended, sat, f2at;
  double undefended_seconds = 0.0, sat_seconds = 0.0, f2at_seconds = 0.0;

  const TrainResult& get(std::optional<TrainResult>& slot, double& seconds, TrainMethod method,
                         const TrainConfig& config) {
    if (!slot) {
      const auto start = Clock::now();
      slot = train(method, config, data.train, data.test);
      seconds = seconds_since(start);
    }
    return *slot;
  }
  const TrainResult& plain() {
    return get(undefended, undefended_seconds, TrainMethod::kSat, testing::undefended_config());
  }
  const TrainResult& standard() { return get(sat, sat_seconds, TrainMethod::kSat, testing::desk_config()); }
  const TrainResult& factorized() { return get(f2at, f2at_seconds, TrainMethod::kF2at, testing::desk_config()); }
};

DeskModels& desk() {
  static DeskModels models;
  return models;
}

// ---- 5. attack contracts ---------------------------------------------------

Outcome attack_contracts() {
  Outcome o;
  DeskModels& d = desk();
  const NetworkClassifier model(d.plain().params);
  const Dataset& test = d.data.test;
  const double eps = 8.0 / 255.0;

  std::size_t batches = 0;
  double worst_linf = 0.0;
  bool in_range = true;
  bool pgd1_is_fgsm = true;
  for (std::size_t begin = 0; begin < test.size(); begin += 100) {
    std::vector<std::size_t> idx(std::min<std::size_t>(100, test.size() - begin));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const Tensor x = to_batch(test, idx);
    const auto y = labels_of(test, idx);
    for (AttackMethod m : {AttackMethod::kFgsm, AttackMethod::kPgd, AttackMethod::kMiFgsm}) {
      AttackConfig c = testing::eval_pgd(m == AttackMethod::kFgsm ? 1 : 20);
      Rng rng(derive_seed(5005, begin));
      const Tensor adv = generate_adversarial(m, model, x, y, c, rng);
      worst_linf = std::max(worst_linf, linf_distance(adv, x));
      for (double v : adv.data()) in_range = in_range && v >= 0.0 && v <= 1.0;
      ++batches;
    }
    AttackConfig one;
    one.epsilon = eps;
    one.steps = 1;
    one.step_size = eps;
    one.random_start = false;
    Rng r1(1), r2(2);
    const Tensor pgd = generate_adversarial(AttackMethod::kPgd, model, x, y, one, r1);
    const Tensor fgsm = generate_adversarial(AttackMethod::kFgsm, model, x, y, one, r2);
    pgd1_is_fgsm = pgd1_is_fgsm && std::equal(pgd.data().begin(), pgd.data().end(), fgsm.data().begin());
  }
  o.require(worst_linf <= eps + 1e-9, fmt("linf %.12f exceeds the budget", worst_linf));
  o.require(in_range, "adversarial entries outside [0,1]");
  o.require(pgd1_is_fgsm, "PGD(1 step, step=eps, no random start) differs from FGSM");

  AttackConfig fgsm_config = testing::eval_pgd(1);
  const double fgsm_success = 1.0 - evaluate_robustness(model, test, AttackMethod::kFgsm, fgsm_config, 0);
  const double pgd_success = 1.0 - evaluate_robustness(model, test, AttackMethod::kPgd, testing::eval_pgd(20), 0);
  o.require(pgd_success >= fgsm_success, "PGD-20 success below FGSM success");
  o.detail = fmt("%zu batches within eps (max linf %.6f), PGD-1 == FGSM bitwise, success over %zu examples: "
                 "PGD-20 %.3f vs FGSM %.3f",
                 batches, worst_linf, test.size(), pgd_success, fgsm_success) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- 6. desk-scale robustness ----------------------------------------------

Outcome desk_robustness() {
  Outcome o;
  DeskModels& d = desk();
  // Training already done by earlier criteria counts toward the budget too.
  const double earlier = d.undefended_seconds + d.sat_seconds + d.f2at_seconds;
  const auto start = Clock::now();
  const auto score = [&](const TrainResult& r) {
    const NetworkClassifier model(r.params);
    return std::pair{clean_accuracy(model, d.data.test),
                     evaluate_robustness(model, d.data.test, AttackMethod::kPgd, testing::eval_pgd(20), 0)};
  };
  const auto [plain_clean, plain_robust] = score(d.plain());
  const auto [sat_clean, sat_robust] = score(d.standard());
  const auto [f2at_clean, f2at_robust] = score(d.factorized());
  const double total = earlier + seconds_since(start);

  o.require(plain_robust <= 0.15, "undefended PGD-20 accuracy above 15%");
  o.require(f2at_robust >= plain_robust + 0.30, "F2AT robust accuracy less than undefended + 30 points");
  o.require(f2at_clean >= sat_clean - 0.02, "F2AT clean accuracy more than 2 points below SAT");
  o.require(total <= 600.0, fmt("%.0f s exceeds 10 minutes", total));
  o.detail = fmt("PGD-20 on 500 test examples: undefended clean %.1f%% robust %.1f%%; SAT clean %.1f%% robust "
                 "%.1f%%; F2AT clean %.1f%% robust %.1f%%; %.0f s",
                 100 * plain_clean, 100 * plain_robust, 100 * sat_clean, 100 * sat_robust, 100 * f2at_clean,
                 100 * f2at_robust, total) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// Reported alongside criterion 6, not asserted.
std::string confidence_report() {
  DeskModels& d = desk();
  const NamedAttack attack = parse_named_attack("pgd20", 8.0 / 255.0, 0.007);
  const auto high = [&](const TrainResult& r) {
    const NetworkClassifier model(r.params);
    const auto conf = diagnostics(model, d.data.test, attack, 0).adversarial_confidence;
    return static_cast<double>(std::count_if(conf.begin(), conf.end(), [](double c) { return c > 0.9; })) /
           static_cast<double>(conf.size());
  };
  return fmt("adversarial predictions with confidence > 0.9: undefended %.3f, SAT %.3f, F2AT %.3f",
             high(d.plain()), high(d.standard()), high(d.factorized()));
}

// ---- 7. discrepancy monotonicity -------------------------------------------

Outcome discrepancy_monotonicity() {
  Outcome o;
  Rng rng(7007);
  std::vector<QuantImage> clean, adv;
  for (int n = 0; n < 1000; ++n) {
    std::vector<std::uint16_t> a(3 * 32 * 32), b(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
      a[j] = static_cast<std::uint16_t>(rng.below(256));
      const int shifted = static_cast<int>(a[j]) + (rng.coin() ? 8 : -8);
      b[j] = static_cast<std::uint16_t>(std::clamp(shifted, 0, 255));
    }
    clean.emplace_back(8, 3, 32, 32, std::move(a));
    adv.emplace_back(8, 3, 32, 32, std::move(b));
  }
  std::vector<double> ratio(9);
  std::string row;
  for (unsigned k = 1; k <= 8; ++k) {
    ratio[k] = discrepancy_ratio(clean, adv, k);
    row += fmt("%sK=%u %.4f", k == 1 ? "" : ", ", k, ratio[k]);
    if (k > 1) o.require(ratio[k] >= ratio[k - 1], fmt("ratio decreases from K=%u to K=%u", k - 1, k));
  }
  o.require(ratio[2] < ratio[8], "ratio(K=2) not below ratio(K=8)");
  o.detail = row + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---- 8 and 9. CLI training runs --------------------------------------------

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int train_cli(const std::string& method, const fs::path& out, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> args = {"train", "--method", method, "--seed", "11", "--epochs", "3", "--batch-size",
                                   "32", "--lr", "0.0015", "--train-size", "400", "--test-size", "100",
                                   "--probe-size", "100", "--out-dir", out.string()};
  args.insert(args.end(), extra.begin(), extra.end());
  std::ostringstream sink, err;
  const int status = cli::run(args, sink, err);
  if (status != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return status;
}

struct ScratchDir {
  fs::path path = fs::temp_directory_path() / "f2at_acceptance";
  ScratchDir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
};

Outcome determinism() {
  Outcome o;
  ScratchDir tmp;
  // Augmentation on, so the seeded crop and flip stream is covered too.
  o.require(train_cli("f2at", tmp.path / "a") == 0, "first run failed");
  o.require(train_cli("f2at", tmp.path / "b") == 0, "second run failed");
  const std::string metrics = read_file(tmp.path / "a" / "metrics.jsonl");
  const std::string ckpt = read_file(tmp.path / "a" / "checkpoint.f2at");
  o.require(!metrics.empty() && metrics == read_file(tmp.path / "b" / "metrics.jsonl"), "metrics files differ");
  o.require(!ckpt.empty() && ckpt == read_file(tmp.path / "b" / "checkpoint.f2at"), "checkpoints differ");
  o.detail = fmt("two `train` runs: metrics.jsonl (%zu bytes) and checkpoint.f2at (%zu bytes) byte-identical",
                 metrics.size(), ckpt.size()) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

std::string checkpoint_bytes(const NetworkParams& p) {
  std::ostringstream out;
  save_checkpoint(out, p);
  return out.str();
}

Outcome degeneracy() {
  Outcome o;
  // Library level: parameters after every epoch.
  const testing::SplitData data = testing::desk_data(9, 400, 100);
  TrainConfig config = testing::desk_config(13, 3);
  config.augment = true;
  config.probe_size = 100;
  TrainConfig zero = config;
  zero.loss.alpha = 0.0;
  zero.loss.gamma = 0.0;
  std::vector<std::string> f2at_trace, sat_trace;
  const auto recorder = [](std::vector<std::string>& trace) {
    return [&trace](const EpochRecord& r, const NetworkParams& p) {
      trace.push_back(metrics_json(r) + checkpoint_bytes(p));
    };
  };
  train_f2at(zero, data.train, data.test, recorder(f2at_trace));
  train_sat(config, data.train, data.test, recorder(sat_trace));
  o.require(f2at_trace.size() == 3 && f2at_trace == sat_trace, "per-epoch trajectories differ");

  // Command level: the two `train` invocations.
  ScratchDir tmp;
  o.require(train_cli("f2at", tmp.path / "f", {"--alpha", "0", "--gamma", "0"}) == 0, "f2at run failed");
  o.require(train_cli("sat", tmp.path / "s") == 0, "sat run failed");
  o.require(read_file(tmp.path / "f" / "metrics.jsonl") == read_file(tmp.path / "s" / "metrics.jsonl"),
            "metrics files differ");
  o.require(read_file(tmp.path / "f" / "checkpoint.f2at") == read_file(tmp.path / "s" / "checkpoint.f2at"),
            "checkpoints differ");
  o.detail = "F2AT(alpha=0, gamma=0) and SAT: per-epoch metrics and parameters bit-identical over 3 epochs; CLI "
             "metrics and checkpoints byte-identical" +
             (o.detail.empty() ? std::string() : "; " + o.detail);
  return o;
}

struct Criterion {
  int number;
  const char* name;
  double time_limit;  // seconds, 0 = none beyond the criterion's own checks
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace f2at

// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
  using namespace f2at;
  const std::vector<Criterion> criteria = {
      {1, "bit-plane exactness", 1.0, bitplane_exactness},
      {2, "information identities", 10.0, information_identities},
      {3, "gradient correctness", 60.0, gradient_correctness},
      {4, "loss limit behaviors", 0.0, loss_limits},
      {5, "attack contracts", 0.0, attack_contracts},
      {6, "desk-scale robustness", 0.0, desk_robustness},
      {7, "discrepancy monotonicity", 0.0, discrepancy_monotonicity},
      {8, "determinism", 0.0, determinism},
      {9, "degeneracy", 0.0, degeneracy},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "acceptance: no criterion '%s' (expected 1 to %zu)\n", argv[i], criteria.size());
      return 2;
    }
    only.insert(n);
  }
  int failures = 0;
  std::size_t ran = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.number)) continue;
    ++ran;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double elapsed = seconds_since(start);
    if (c.time_limit > 0 && elapsed >= c.time_limit) {
      o.pass = false;
      o.detail += fmt("; %.2f s exceeds the %.0f s limit", elapsed, c.time_limit);
    }
    failures += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.number, c.name, o.detail.c_str(),
                elapsed);
    if (c.number == 6) {
      try {
        std::printf("info criterion 6: %s\n", confidence_report().c_str());
      } catch (const std::exception& e) {
        std::printf("info criterion 6: confidence report failed: %s\n", e.what());
      }
    }
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(ran) - failures, ran);
  return failures == 0 ? 0 : 1;
}
