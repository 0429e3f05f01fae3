// Acceptance run: one PASS/FAIL line per criterion. Tolerances and budgets are fixed here.

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "robustfuse/experiment/runner.hpp"
#include "robustfuse/experiment/verify.hpp"
#include "robustfuse/linear_analysis.hpp"
#include "robustfuse/stats.hpp"

namespace {

using namespace robustfuse;
using namespace robustfuse::experiment;
namespace fs = std::filesystem;

// Criterion budgets (seconds) and tolerances.
constexpr double closed_form_tol = 1e-6;
constexpr double balance_tol = 1e-9;
constexpr double gap_tol = 1e-9;
constexpr double grad_tol = 1e-4;
constexpr double asn_weight_tol = 0.1;
constexpr double ssn_norm_tol = 0.2;
constexpr double clean_preservation = 0.05;
// Downsampling ranking: SSN and the best other algorithm are tied when the medians differ by
// less than tie_tol or the t-interval of their paired per-seed differences contains zero.
constexpr double tie_tol = 1e-3;
constexpr double tie_confidence = 0.95;
constexpr double budget_c1 = 10, budget_c2 = 5, budget_c3 = 10, budget_c4 = 30, budget_c5 = 120,
                 budget_c6 = 900;

struct Line {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Line> lines;

void report(int id, bool pass, const std::string& detail) {
  lines.push_back({id, pass, detail});
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const PropertyResult& property(const VerifyReport& r, const std::string& prefix) {
  for (const auto& p : r.properties) {
    if (p.name.rfind(prefix, 0) == 0) return p;
  }
  throw std::runtime_error("verify report has no property '" + prefix + "'");
}

void analytical_criteria() {
  const auto lin = verify_linear();
  const auto& agree = property(lin, "maxssn closed form");
  const auto& balanced = property(lin, "balanced-case per-source");
  report(1, agree.pass && balanced.pass && agree.tolerance <= closed_form_tol && lin.seconds < budget_c1,
         fmt("max rel |closed form - oracle| %.2g (tol %.0e) over %zu specs; balanced losses %.2g (tol %.0e); %.2f s",
             agree.max_deviation, closed_form_tol, agree.cases, balanced.max_deviation, balance_tol, lin.seconds));

  const auto& gap = property(lin, "gap >= lower bound");
  report(2, gap.pass && gap.tolerance <= gap_tol && gap.cases >= 100 && lin.seconds < budget_c2,
         fmt("max shortfall %.2g (tol %.0e); %s; %.2f s", gap.max_deviation, gap_tol, gap.detail.c_str(), lin.seconds));

  const auto adv = verify_adversarial();
  const auto& l1 = property(adv, "l1 closed form");
  const auto& eq = property(adv, "equality when ratio");
  const auto& strict = property(adv, "strict gap");
  report(3, adv.ok() && l1.tolerance <= closed_form_tol && eq.cases + strict.cases == 20 && adv.seconds < budget_c3,
         fmt("l1 agreement %.2g over %zu specs; equality %.2g on %zu specs; %s; %.2f s", l1.max_deviation, l1.cases,
             eq.max_deviation, eq.cases, strict.detail.c_str(), adv.seconds));

  const auto grad = verify_gradients();
  double worst = 0.0;
  std::size_t layers = 0;
  for (const auto& p : grad.properties) {
    worst = std::max(worst, p.max_deviation);
    ++layers;
  }
  report(4, grad.ok() && property(grad, "finite differences: dense").tolerance <= grad_tol && grad.seconds < budget_c4,
         fmt("%zu layer checks x 20 instances, worst relative error %.2g (tol %.0e); %.2f s", layers, worst, grad_tol,
             grad.seconds));
}

ExperimentConfig linear_base(linear::Vector b1, linear::Vector b2, linear::Vector b3) {
  ExperimentConfig c;
  c.task.kind = tasks::TaskKind::linear_regression;
  c.task.latent = linear::LatentSpec{std::move(b1), std::move(b2), std::move(b3), 1.0};
  c.task.n_train = 4000;
  c.task.n_val = 1000;
  c.model.fusion = fusion::FusionKind::concat;
  c.train.iterations = 4000;
  c.train.batch_size = 4000;
  c.train.lr = 0.05;
  c.train.lr_final = 1e-4;
  corruption::CorruptionSpec g;
  g.kind = corruption::CorruptionKind::gaussian;
  g.factor = 0.1;
  c.train.corruption = {g, g};
  c.eval.corruption = {g, g};
  return c;
}

// Shared-weight coordinates of the concat head over [z1, z3 | z2, z3].
std::pair<linear::Vector, linear::Vector> shared_weights(const model::FusionNet& net, const linear::LatentSpec& s) {
  const auto& w = net.params().at("head.dense0.w").value;
  linear::Vector g1(s.d3()), g2(s.d3());
  for (Eigen::Index k = 0; k < s.d3(); ++k) {
    g1(k) = w[static_cast<std::size_t>(s.d1() + k)];
    g2(k) = w[static_cast<std::size_t>(s.d1() + s.d3() + s.d2() + k)];
  }
  return {g1, g2};
}

void linear_training_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  const linear::Vector one = linear::Vector::Constant(1, 1.0);
  double asn_dev = 0.0, ssn_dev = 0.0;
  std::string ssn_values;
  for (std::uint64_t seed : {1, 2, 3}) {
    {
      auto cfg = linear_base(one, one, 2.0 * one);
      cfg.train.algorithm = training::Algorithm::asn;
      const auto data = tasks::make_task(cfg.task);
      auto net = model::build_model(cfg.model, data.train, derive_seed(seed, 1));
      auto tc = cfg.train;
      tc.seed = seed;
      training::train(net, data.train, tc);
      const auto [g1, g2] = shared_weights(net, cfg.task.latent);
      const linear::Vector half = cfg.task.latent.beta3 / 2.0;
      asn_dev = std::max({asn_dev, (g1 - half).cwiseAbs().maxCoeff(), (g2 - half).cwiseAbs().maxCoeff()});
    }
    {
      auto cfg = linear_base(one, 2.0 * one, 3.0 * one);
      cfg.train.algorithm = training::Algorithm::ssn;
      const auto data = tasks::make_task(cfg.task);
      auto net = model::build_model(cfg.model, data.train, derive_seed(seed, 1));
      auto tc = cfg.train;
      tc.seed = seed;
      training::train(net, data.train, tc);
      const auto [g1, g2] = shared_weights(net, cfg.task.latent);
      const auto opt = linear::solve_maxssn(cfg.task.latent);
      ssn_dev = std::max({ssn_dev, std::abs(g1.squaredNorm() - opt.g1.squaredNorm()),
                          std::abs(g2.squaredNorm() - opt.g2.squaredNorm())});
      ssn_values += fmt(" (%.3f, %.3f)", g1.squaredNorm(), g2.squaredNorm());
    }
  }
  const auto opt = linear::solve_maxssn(linear_base(one, 2.0 * one, 3.0 * one).task.latent);
  const double secs = seconds_since(t0);
  report(5, asn_dev <= asn_weight_tol && ssn_dev <= ssn_norm_tol && secs < budget_c5,
         fmt("ASN max |g_i - beta3/2| %.4f (tol %.1f); SSN (|g1|^2, |g2|^2)%s vs optimum (%.3f, %.3f), max dev %.4f "
             "(tol %.1f); 3 seeds; %.1f s",
             asn_dev, asn_weight_tol, ssn_values.c_str(), opt.g1.squaredNorm(), opt.g2.squaredNorm(), ssn_dev,
             ssn_norm_tol, secs));
}

// The conv task shared by the table criteria: 8 x 8 views with 4 and 6 channels.
ExperimentConfig conv_base(corruption::CorruptionKind kind, const fs::path& out) {
  ExperimentConfig c;
  c.task.kind = tasks::TaskKind::conv_classification;
  c.task.n_train = 4000;
  c.task.n_val = 3000;
  c.task.channels = {4, 6};
  c.task.signal = {0.5, 1.0};
  c.task.presence = 0.2;
  c.task.shared_noise = 0.3;
  c.task.private_noise = 1.5;
  c.model.extractor = {{4}, {4}};
  c.model.fusion = fusion::FusionKind::mean;
  c.model.head = {16};
  c.train.iterations = 4000;
  c.train.batch_size = 64;
  c.train.lr = 1e-3;
  corruption::CorruptionSpec s;
  s.kind = kind;
  s.factor = 0.75;
  s.seed = 77;
  c.eval.corruption = {s, s};
  c.eval.corruption[1].seed = 78;
  c.eval.trials = 5;
  c.output = out.string();
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

SweepVariant algorithm_variant(const char* name) { return {name, {{"train.algorithm", name}}}; }

struct Medians {
  double min_metric, max_diff, clean;
};

Medians medians(const RunResult& r) {
  std::vector<double> mins, diffs, cleans;
  for (const auto& s : r.seeds) {
    if (s.failure) continue;
    mins.push_back(s.report.min_metric);
    diffs.push_back(s.report.max_diff);
    cleans.push_back(s.report.clean.mean);
  }
  if (mins.empty()) return {NAN, NAN, NAN};
  return {stats::median(mins), stats::median(diffs), stats::median(cleans)};
}

const RunResult& find(const std::vector<RunResult>& runs, const std::string& name) {
  for (const auto& r : runs) {
    if (r.name == name) return r;
  }
  throw std::runtime_error("no run named " + name);
}

void table_criteria(const fs::path& root, std::size_t jobs, bool c6, bool c7, bool c8) {
  const RunOptions opts{jobs, true};

  // Criteria 6 and 7 share the clean-trained mean-fusion baseline.
  auto t0 = std::chrono::steady_clock::now();
  auto gauss = conv_base(corruption::CorruptionKind::gaussian, root / "gaussian");
  gauss.sweep = {algorithm_variant("clean")};
  if (c6) {
    gauss.sweep.push_back(algorithm_variant("ssn"));
    gauss.sweep.push_back(algorithm_variant("ssn_alt"));
  }
  const auto g_runs = c6 || c7 ? run_sweep(gauss, opts) : std::vector<RunResult>{};
  const double g_secs = seconds_since(t0);
  if (c6) {
    const auto clean = medians(find(g_runs, "clean")), ssn = medians(find(g_runs, "ssn")),
               alt = medians(find(g_runs, "ssn_alt"));
    const bool order = ssn.min_metric > clean.min_metric && alt.min_metric > clean.min_metric;
    const bool balance = ssn.max_diff < clean.max_diff;
    const double rel_clean = std::abs(ssn.clean - clean.clean) / clean.clean;
    report(6, order && balance && rel_clean <= clean_preservation && g_secs < budget_c6,
           fmt("median min-metric ssn %.4f, ssn_alt %.4f vs clean %.4f; max-diff ssn %.4f vs clean %.4f; clean accuracy "
               "ssn %.4f vs %.4f (rel %.3f, tol %.2f); 5 seeds; %.0f s",
               ssn.min_metric, alt.min_metric, clean.min_metric, ssn.max_diff, clean.max_diff, ssn.clean, clean.clean,
               rel_clean, clean_preservation, g_secs));
  }

  if (c7) {
    const auto clean = medians(find(g_runs, "clean"));
    t0 = std::chrono::steady_clock::now();
    auto lel = conv_base(corruption::CorruptionKind::gaussian, root / "lel_clean");
    lel.model.fusion = fusion::FusionKind::lel;
    lel.model.extractor = {{4}, {6}};
    const auto lel_run = run_experiment(lel, opts);
    const double lel_secs = seconds_since(t0) + g_secs / static_cast<double>(gauss.sweep.size());
    const auto l = medians(lel_run);
    const auto& base = find(g_runs, "clean").seeds;
    std::vector<double> diffs;
    for (std::size_t i = 0; i < base.size() && i < lel_run.seeds.size(); ++i) {
      diffs.push_back(lel_run.seeds[i].report.min_metric - base[i].report.min_metric);
    }
    const auto paired = stats::confidence_interval(diffs, tie_confidence);
    report(7, l.min_metric > clean.min_metric && lel_secs < budget_c6,
           fmt("clean-trained median min-metric lel %.4f vs mean %.4f (lel_l1 %.2g); paired lel - mean in [%.4f, %.4f]; "
               "5 seeds; %.0f s",
               l.min_metric, clean.min_metric, lel.model.lel_l1, paired.low.value_or(NAN), paired.high.value_or(NAN),
               lel_secs));
  }
  if (!c8) return;

  t0 = std::chrono::steady_clock::now();
  auto down = conv_base(corruption::CorruptionKind::downsample, root / "downsample");
  down.sweep = {};  // default variants: all four algorithms
  auto d_runs = run_sweep(down, opts);
  struct Ranking {
    double margin = 0.0;  // median of ssn minus the best other median
    std::string best_other;
    stats::Interval paired;  // per-seed ssn minus best other
    std::string detail;
  };
  auto rank = [](const std::vector<RunResult>& runs) {
    Ranking r;
    double best = -INFINITY;
    for (const auto& run : runs) {
      const double m = medians(run).min_metric;
      r.detail += fmt("%s %.4f, ", run.name.c_str(), m);
      if (run.name != "ssn" && m > best) {
        best = m;
        r.best_other = run.name;
      }
    }
    r.margin = medians(find(runs, "ssn")).min_metric - best;
    const auto& a = find(runs, "ssn").seeds;
    const auto& b = find(runs, r.best_other).seeds;
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
      if (!a[i].failure && !b[i].failure) diffs.push_back(a[i].report.min_metric - b[i].report.min_metric);
    }
    r.paired = stats::confidence_interval(diffs, tie_confidence);
    return r;
  };
  auto tied = [](const Ranking& r) {
    return std::abs(r.margin) < tie_tol || (r.paired.low && *r.paired.low <= 0.0 && *r.paired.high >= 0.0);
  };
  Ranking ranking = rank(d_runs);
  std::string note = fmt("5 seeds, paired ssn - %s in [%.4f, %.4f]", ranking.best_other.c_str(),
                         ranking.paired.low.value_or(NAN), ranking.paired.high.value_or(NAN));
  if (tied(ranking)) {
    auto more = down;
    more.seeds = {6, 7, 8, 9, 10};
    more.output = (root / "downsample_rerun").string();
    const auto extra = run_sweep(more, opts);
    for (auto& run : d_runs) {
      const auto& add = find(extra, run.name);
      run.seeds.insert(run.seeds.end(), add.seeds.begin(), add.seeds.end());
    }
    const double first_margin = ranking.margin;
    ranking = rank(d_runs);
    note = fmt("tie on 5 seeds (margin %.4f, paired interval contains 0); reranked over 10 seeds, paired ssn - %s in "
               "[%.4f, %.4f]",
               first_margin, ranking.best_other.c_str(), ranking.paired.low.value_or(NAN),
               ranking.paired.high.value_or(NAN));
  }
  const double margin = ranking.margin;
  const std::string detail = ranking.detail;
  const double d_secs = seconds_since(t0);
  report(8, margin > 0.0 && d_secs < 2 * budget_c6,
         fmt("median min-metric %smargin of ssn over best other %.4f; %s; %.0f s", detail.c_str(), margin, note.c_str(),
             d_secs));
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void determinism_criterion(const fs::path& root) {
  auto cfg = conv_base(corruption::CorruptionKind::gaussian, root / "determinism");
  cfg.train.algorithm = training::Algorithm::ssn;
  cfg.train.iterations = 300;
  cfg.task.n_train = 500;
  cfg.task.n_val = 300;
  cfg.seeds = {1, 2};
  cfg.eval.trials = 2;
  std::vector<std::vector<std::pair<std::string, std::string>>> outputs;
  for (std::size_t jobs : {1, 2}) {
    fs::remove_all(cfg.output);
    run_experiment(cfg, RunOptions{jobs, true});
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(cfg.output)) {
      if (e.path().extension() == ".csv") files.emplace_back(fs::relative(e.path(), cfg.output).string(), slurp(e.path()));
    }
    std::sort(files.begin(), files.end());
    outputs.push_back(std::move(files));
  }
  const bool same = outputs[0] == outputs[1] && !outputs[0].empty();
  report(9, same, fmt("two runs (1 and 2 worker threads) produced %zu CSV files, %s", outputs[0].size(),
                      same ? "byte-identical" : "DIFFERENT"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robustfuse acceptance criteria"};
  std::string out = "acceptance_runs";
  std::size_t jobs = 1;
  std::vector<int> only;
  app.add_option("--out", out, "directory for the training runs");
  app.add_option("--jobs", jobs, "worker threads for the training sweeps")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "run only these criteria (repeatable)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  auto want = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids) {
      if (std::find(only.begin(), only.end(), id) != only.end()) return true;
    }
    return false;
  };

  const fs::path root(out);
  try {
    if (want({1, 2, 3, 4})) analytical_criteria();
    if (want({5})) linear_training_criterion();
    if (want({6, 7, 8})) table_criteria(root, jobs, want({6}), want({7}), want({8}));
    if (want({9})) determinism_criterion(root);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::size_t passed = 0;
  for (const auto& l : lines) passed += l.pass ? 1 : 0;
  std::printf("%zu/%zu criteria passed\n", passed, lines.size());
  return passed == lines.size() ? 0 : 1;
}
