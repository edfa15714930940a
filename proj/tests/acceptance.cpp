// Acceptance suite: one PASS/FAIL line per criterion, followed by the
// measured values behind it. Exit status is non-zero when a check fails
// unless that check id was named with --expect-fail.

#include <Eigen/LU>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normatch/normatch.hpp"
#include "oracles.hpp"

using namespace normatch;
using namespace normatch::harness;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using testutil::random_simplex;
using testutil::uniform;

namespace {

struct Check {
  std::string id;
  bool pass = false;
  std::string detail;
};

struct Criterion {
  Criterion(int n, std::string t) : number(n), title(std::move(t)) {}

  int number;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double pts(double acc) { return 100.0 * acc; }

// ---------------------------------------------------------------------------
// Training runs, each configuration trained once and shared between criteria.

struct Timed {
  ExperimentResult result;
  std::vector<double> seconds;  // per seed
};

class Runs {
 public:
  explicit Runs(ExperimentConfig base) : base_(std::move(base)) {}

  const ExperimentConfig& base() const { return base_; }

  const Timed& get(const std::string& name, const std::function<void(ExperimentConfig&)>& edit) {
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    ExperimentConfig cfg = base_;
    edit(cfg);
    cfg.validate();
    Timed t;
    for (auto seed : cfg.seeds) {
      const auto t0 = Clock::now();
      t.result.seeds.push_back(run_seed(cfg, seed, nullptr));
      t.seconds.push_back(since(t0));
      std::fprintf(stderr, "  [%s] seed %llu: test_acc_ema %.4f  r_hc %.3f  (%.1f s)\n", name.c_str(),
                   static_cast<unsigned long long>(seed), t.result.seeds.back().last().test_acc_ema,
                   t.result.seeds.back().last().r_hc, t.seconds.back());
    }
    return cache_.emplace(name, std::move(t)).first->second;
  }

  const Timed& normatch() {
    return get("normatch", [](ExperimentConfig&) {});
  }

 private:
  ExperimentConfig base_;
  std::map<std::string, Timed> cache_;
};

std::string per_seed(const ExperimentResult& r) {
  std::string s = "[";
  for (std::size_t i = 0; i < r.seeds.size(); ++i)
    s += fmt("%s%.1f", i ? ", " : "", pts(r.seeds[i].last().test_acc_ema));
  return s + "]";
}

// ---------------------------------------------------------------------------

Criterion gradient_oracle() {
  Criterion c{1, "gradient oracle: ops and composite losses vs central differences"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  oracles::GradError ops;
  for (OpKind k : all_op_kinds) ops |= oracles::op_gradient_error(k, 100, rng);
  ops |= oracles::extra_ops_gradient_error(100, rng);
  const auto unlabeled = oracles::weighted_unlabeled_loss_error(100, rng);
  const auto flow_nll = oracles::num_loss_error(100, rng);
  const auto supervised = oracles::supervised_loss_error(100, rng);
  const auto total = oracles::total_loss_error(100, rng);
  c.seconds = since(t0);
  auto add = [&](const char* id, const char* what, const oracles::GradError& e) {
    c.checks.push_back({id, e.resolved <= 1e-4,
                        fmt("%s: max rel err %.2e with rounding-floored denominator, %.2e unfloored (limit 1e-4, "
                            "100 draws)",
                            what, e.resolved, e.strict)});
  };
  add("1.ops", "every op", ops);
  add("1.unlabeled", "weighted unlabeled CE", unlabeled);
  add("1.flow_nll", "flow NLL", flow_nll);
  add("1.supervised", "supervised CEs", supervised);
  add("1.total", "total loss", total);
  c.checks.push_back({"1.time", c.seconds <= 60.0, fmt("runtime %.1f s (limit 60 s)", c.seconds)});
  return c;
}

double numeric_logdet(const flow::FlowStack& s, const Array& row) {
  const std::size_t d = row.cols();
  Eigen::MatrixXd jac(d, d);
  const double h = 1e-6;
  auto fwd = [&](const Array& z) {
    Tape t(false);
    return flow::flow_transform(t, s, t.constant(z)).first.array();
  };
  for (std::size_t j = 0; j < d; ++j) {
    Array plus = row, minus = row;
    plus.values[j] += h;
    minus.values[j] -= h;
    const Array fp = fwd(plus), fm = fwd(minus);
    for (std::size_t i = 0; i < d; ++i) jac(i, j) = (fp.values[i] - fm.values[i]) / (2 * h);
  }
  return std::log(std::abs(jac.partialPivLu().determinant()));
}

void randomize(flow::FlowStack& s, std::mt19937_64& rng, double scale) {
  for (auto& [name, p] : s.params()) {
    if (name.ends_with("scale_bound")) p->values[0] = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
    else *p = uniform(p->shape, rng, -scale, scale);
  }
}

Criterion flow_correctness() {
  Criterion c{2, "flow correctness: inverse, log-det, density normalisation"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  double round_trip = 0.0;
  for (std::size_t d = 2; d <= 16; ++d)
    for (int trial = 0; trial < 10; ++trial) {
      auto s = flow::FlowStack::make(d, 6, 32, rng);
      randomize(s, rng, 0.3);
      const Array z = uniform({8, d}, rng, -3, 3);
      Tape t(false);
      const Array back = flow::flow_inverse(t, s, flow::flow_transform(t, s, t.constant(z)).first).array();
      for (std::size_t i = 0; i < z.size(); ++i) round_trip = std::max(round_trip, std::abs(back.values[i] - z.values[i]));
    }
  double logdet = 0.0;
  for (std::size_t d = 2; d <= 6; ++d)
    for (int trial = 0; trial < 10; ++trial) {
      auto s = flow::FlowStack::make(d, 6, 16, rng);
      randomize(s, rng, 0.4);
      const Array z = uniform({1, d}, rng, -3, 3);
      Tape t(false);
      const double ld = flow::flow_transform(t, s, t.constant(z)).second.values()[0];
      logdet = std::max(logdet, std::abs(ld - numeric_logdet(s, z)));
    }
  flow::FlowStack identity;
  identity.dim = 1;
  const flow::GmmPrior prior{Array::zeros({1, 1}), Array::zeros({1, 1}), Array::zeros({1})};
  const std::size_t n = 16000;
  Array grid = Array::zeros({n + 1, 1});
  for (std::size_t i = 0; i <= n; ++i) grid.values[i] = -8.0 + 1e-3 * static_cast<double>(i);
  Tape t(false);
  const auto lp = flow::marginal_logprob(t, identity, prior, t.constant(grid));
  double integral = 0.0;
  for (std::size_t i = 0; i <= n; ++i) integral += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(lp.values()[i]) * 1e-3;
  c.seconds = since(t0);
  c.checks.push_back({"2.inverse", round_trip <= 1e-8, fmt("round trip max error %.2e for d = 2..16 (limit 1e-8)", round_trip)});
  c.checks.push_back({"2.logdet", logdet <= 1e-5, fmt("log-det vs numeric Jacobian max diff %.2e for d = 2..6 (limit 1e-5)", logdet)});
  c.checks.push_back({"2.density", std::abs(integral - 1.0) <= 1e-3, fmt("1-D density integral %.6f (1 +- 1e-3)", integral)});
  c.checks.push_back({"2.time", c.seconds <= 60.0, fmt("runtime %.1f s (limit 60 s)", c.seconds)});
  return c;
}

Criterion classifier_contracts() {
  Criterion c{3, "classifier contracts: normalisation and Euclidean posterior"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  double nfc_norm = 0.0, head_norm = 0.0, euclid = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Models m = oracles::random_models(trial, rng);
    const Array x = uniform({16, 2}, rng, -3, 3);
    Tape t(false);
    const Tensor z = nn::backbone_forward(t, m.backbone, t.constant(x));
    const Array pn = flow::nfc_posterior(t, m.nfc.stack, m.nfc.prior, z).array();
    const Array pd = predict_proba(m, x);
    for (std::size_t i = 0; i < 16; ++i) {
      double sn = 0.0, sd = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        sn += pn(i, k);
        sd += pd(i, k);
      }
      nfc_norm = std::max(nfc_norm, std::abs(sn - 1.0));
      head_norm = std::max(head_norm, std::abs(sd - 1.0));
    }

    Tape fresh(false);  // parameter names repeat across stacks
    const std::size_t d = 4, classes = 5;
    const auto stack = flow::FlowStack::make(d, 6, 8, rng);
    const flow::GmmPrior prior{uniform({classes, d}, rng, -3, 3), Array::zeros({classes, d}),
                               Array::filled({classes}, -std::log(double(classes)))};
    const Array u = uniform({8, d}, rng, -3, 3);
    const Array post = flow::nfc_posterior(fresh, stack, prior, fresh.constant(u)).array();
    for (std::size_t i = 0; i < 8; ++i) {
      std::vector<double> logit(classes);
      for (std::size_t k = 0; k < classes; ++k) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) d2 += (u(i, j) - prior.means(k, j)) * (u(i, j) - prior.means(k, j));
        logit[k] = -0.5 * d2;
      }
      const double mx = *std::max_element(logit.begin(), logit.end());
      double norm = 0.0;
      for (double l : logit) norm += std::exp(l - mx);
      for (std::size_t k = 0; k < classes; ++k)
        euclid = std::max(euclid, std::abs(post(i, k) - std::exp(logit[k] - mx) / norm));
    }
  }
  c.seconds = since(t0);
  c.checks.push_back({"3.nfc", nfc_norm <= 1e-12, fmt("flow posterior rows sum to 1 within %.1e (limit 1e-12)", nfc_norm)});
  c.checks.push_back({"3.head", head_norm <= 1e-12, fmt("head probabilities rows sum to 1 within %.1e (limit 1e-12)", head_norm)});
  c.checks.push_back({"3.euclid", euclid <= 1e-10, fmt("identity-flow posterior vs softmax(-d^2/2) max diff %.1e (limit 1e-10)", euclid)});
  return c;
}

Criterion consensus_weight() {
  Criterion c{4, "consensus weight: exhaustive property test"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(404);
  std::size_t violations = 0, agree = 0, disagree = 0, zero_bad = 0, thr_bad = 0;
  for (std::size_t classes : {2u, 3u, 4u, 6u, 10u}) {
    for (int rep = 0; rep < 200; ++rep) {
      const double temp = std::uniform_real_distribution<double>(0.1, 3.0)(rng);
      const Array pd = random_simplex(100, classes, rng, temp), pn = random_simplex(100, classes, rng, temp);
      const double thr = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
      const auto tau = ncue_weight(pd, pn, WeightPolicy::ncue());
      const auto zero = ncue_weight(pd, pn, WeightPolicy::ncue_zero());
      const auto fixed = ncue_weight(pd, pn, WeightPolicy::fixed_threshold(thr));
      for (std::size_t i = 0; i < 100; ++i) {
        std::size_t ad = 0, an = 0;
        for (std::size_t k = 1; k < classes; ++k) {
          if (pd(i, k) > pd(i, ad)) ad = k;
          if (pn(i, k) > pn(i, an)) an = k;
        }
        if (ad == an) {
          ++agree;
          violations += tau[i] != 1.0;
          zero_bad += zero[i] != 1.0;
        } else {
          ++disagree;
          const double expect = std::min(pd(i, ad), pn(i, an));
          violations += tau[i] != expect || tau[i] >= 1.0 || tau[i] < 1.0 / double(classes);
          zero_bad += zero[i] != 0.0;
        }
        thr_bad += fixed[i] != (pd(i, ad) >= thr ? 1.0 : 0.0);
      }
    }
  }
  c.seconds = since(t0);
  c.checks.push_back({"4.ncue", violations == 0 && agree > 0 && disagree > 0,
                      fmt("%zu violations over %zu agreeing and %zu disagreeing pairs", violations, agree, disagree)});
  c.checks.push_back({"4.zero", zero_bad == 0, fmt("zero-on-disagreement variant: %zu violations", zero_bad)});
  c.checks.push_back({"4.threshold", thr_bad == 0, fmt("fixed threshold: %zu violations", thr_bad)});
  return c;
}

Criterion stop_gradient(Runs& runs) {
  Criterion c{5, "stop-gradient: exact zeros and the directional analog"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(505);
  std::size_t nonzero = 0, checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Models m = oracles::random_models(trial, rng);
    const auto bp = oracles::random_batch(8, 16, 3, rng);
    LossFlags flags;
    flags.lambda = std::uniform_real_distribution<double>(1e-6, 2.0)(rng);
    Tape t;
    const auto terms = total_loss(t, m, bp, flags, DaState::make(3)).first;
    const auto grads = t.backward(add(terms.sup_n, scale(terms.unsup_n, flags.lambda)));
    for (const auto& [name, p] : m.discriminative_params()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      for (double v : it->second.values) {
        ++checked;
        nonzero += v != 0.0;
      }
    }
  }
  c.checks.push_back({"5.zeros", nonzero == 0,
                      fmt("%zu non-zero backbone/head gradient entries out of %zu", nonzero, checked)});

  const auto& with = runs.normatch().result;
  const auto& without = runs.get("no-stop-gradient", [](ExperimentConfig& cfg) { cfg.train.loss.stop_gradient = false; }).result;
  const double a_with = pts(with.test_acc_ema().mean), a_without = pts(without.test_acc_ema().mean);
  const double h_with = pts(with.r_hc().mean), h_without = pts(without.r_hc().mean);
  c.checks.push_back({"5.accuracy", a_with >= a_without,
                      fmt("accuracy with stop-gradient %.2f vs without %.2f", a_with, a_without)});
  c.checks.push_back({"5.r_hc", h_without < h_with, fmt("r_hc with %.2f vs without %.2f", h_with, h_without)});
  c.seconds = since(t0);
  return c;
}

Criterion ssl_gain(Runs& runs) {
  Criterion c{6, "end-to-end gain on two moons (4 labels per class, 5 seeds)"};
  const auto t0 = Clock::now();
  const auto& full = runs.normatch();
  const auto& sup = runs.get("supervised-8-labels", [](ExperimentConfig& cfg) {
    cfg.mu = 0;
    cfg.train.loss.policy = WeightPolicy::none();
    cfg.train.loss.lambda = 0.0;
  });
  const auto& oracle = runs.get("all-labels", [](ExperimentConfig& cfg) {
    cfg.labels_per_class = cfg.dataset.n / cfg.dataset.classes;
    cfg.train.loss.policy = WeightPolicy::none();
    cfg.train.loss.lambda = 0.0;
  });
  auto one_hot = [](WeightPolicy p, double lambda) {
    return [=](ExperimentConfig& cfg) {
      cfg.train.loss.mode = PseudoLabelMode::one_hot;
      cfg.train.loss.policy = p;
      cfg.train.loss.lambda = lambda;
    };
  };
  const auto& base = runs.get("ablation-threshold", one_hot(WeightPolicy::fixed_threshold(0.95), 0.0));
  const auto& ncue = runs.get("ablation-ncue", one_hot(WeightPolicy::ncue(), 0.0));
  const auto& ncue_num = runs.get("ablation-ncue-num", one_hot(WeightPolicy::ncue(), 1e-6));

  const double a = pts(full.result.test_acc_ema().mean);
  const double s = pts(sup.result.test_acc_ema().mean);
  const double o = pts(oracle.result.test_acc_ema().mean);
  c.checks.push_back({"6a", a >= s + 5.0,
                      fmt("NorMatch %.2f +- %.2f %s vs supervised on 8 labels %.2f %s (need >= +5)", a,
                          pts(full.result.test_acc_ema().std), per_seed(full.result).c_str(), s,
                          per_seed(sup.result).c_str())});
  c.checks.push_back({"6b", a >= o - 3.0,
                      fmt("NorMatch %.2f vs all-labels oracle %.2f %s (need within 3)", a, o,
                          per_seed(oracle.result).c_str())});
  const double b0 = pts(base.result.test_acc_ema().mean), b1 = pts(ncue.result.test_acc_ema().mean),
               b2 = pts(ncue_num.result.test_acc_ema().mean);
  c.checks.push_back({"6c", b1 >= b0 - 0.5 && b2 >= b1 - 0.5,
                      fmt("one-hot ablation threshold %.2f %s -> ncue %.2f %s -> ncue+num %.2f %s (0.5 tolerance)", b0,
                          per_seed(base.result).c_str(), b1, per_seed(ncue.result).c_str(), b2,
                          per_seed(ncue_num.result).c_str())});
  double slowest = 0.0;
  for (const Timed* t : {&full, &sup, &oracle, &base, &ncue, &ncue_num})
    for (double sec : t->seconds) slowest = std::max(slowest, sec);
  c.checks.push_back({"6.time", slowest <= 180.0, fmt("slowest run %.1f s (limit 180 s)", slowest)});
  c.seconds = since(t0);
  return c;
}

Criterion count_relation(Runs& runs) {
  Criterion c{7, "high-confidence counts track correct pseudo-labels"};
  const auto t0 = Clock::now();
  const auto curves = count_curves(runs.normatch().result);
  const std::int64_t after = runs.base().train.total_steps / 3;
  std::size_t intervals = 0, within = 0, threshold_further = 0;
  double worst = 0.0;
  for (const auto& p : curves) {
    if (p.step <= after) continue;
    ++intervals;
    const double ncue_gap = std::abs(p.agree - p.correct);
    worst = std::max(worst, ncue_gap / p.correct);
    within += ncue_gap <= 0.15 * p.correct;
    threshold_further += p.threshold < p.correct && p.correct - p.threshold > ncue_gap;
  }
  const auto& last = curves.back();
  c.checks.push_back({"7.ncue", intervals > 0 && within == intervals,
                      fmt("NCUE count within 15%% of correct count in %zu/%zu intervals after step %lld (worst %.1f%%)",
                          within, intervals, static_cast<long long>(after), 100.0 * worst)});
  c.checks.push_back({"7.threshold", 2 * threshold_further > intervals,
                      fmt("threshold count further below correct count in %zu/%zu intervals; final step: "
                          "ncue %.1f, threshold %.1f, correct %.1f per step",
                          threshold_further, intervals, last.agree, last.threshold, last.correct)});
  c.seconds = since(t0);
  return c;
}

Criterion lambda_behaviour(Runs& runs) {
  Criterion c{8, "NUM weight sweep"};
  const auto t0 = Clock::now();
  const auto& l0 = runs.get("lambda-0", [](ExperimentConfig& cfg) { cfg.train.loss.lambda = 0.0; });
  const auto& l7 = runs.get("lambda-1e-7", [](ExperimentConfig& cfg) { cfg.train.loss.lambda = 1e-7; });
  const auto& l6 = runs.normatch();
  const double a0 = pts(l0.result.test_acc_ema().mean), a7 = pts(l7.result.test_acc_ema().mean),
               a6 = pts(l6.result.test_acc_ema().mean);
  c.checks.push_back({"8.sweep", std::max(a7, a6) >= a0 - 0.3,
                      fmt("lambda 0: %.2f, 1e-7: %.2f, 1e-6: %.2f (best positive >= lambda 0 - 0.3)", a0, a7, a6)});
  try {
    const auto& big = runs.get("lambda-1", [](ExperimentConfig& cfg) { cfg.train.loss.lambda = 1.0; });
    c.checks.push_back({"8.large", true, fmt("lambda 1.0 completed, accuracy %.2f", pts(big.result.test_acc_ema().mean))});
  } catch (const std::exception& e) {
    c.checks.push_back({"8.large", false, std::string("lambda 1.0 failed: ") + e.what()});
  }
  c.seconds = since(t0);
  return c;
}

std::string csv_bytes(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  write_metrics_header(os);
  for (const auto& r : rows) write_metrics_row(os, r);
  return os.str();
}

Criterion determinism(Runs& runs, const fs::path& scratch) {
  Criterion c{9, "determinism and resume"};
  const auto t0 = Clock::now();
  const auto& reference = runs.normatch().result.seeds.front();
  ExperimentConfig cfg = runs.base();

  Run straight(cfg, reference.seed);
  while (!straight.done()) straight.advance();
  c.checks.push_back({"9.repeat", csv_bytes(straight.rows()) == csv_bytes(reference.rows),
                      fmt("second run of seed %llu gives %s metrics CSV",
                          static_cast<unsigned long long>(reference.seed),
                          csv_bytes(straight.rows()) == csv_bytes(reference.rows) ? "byte-identical" : "DIFFERENT")});

  Run first(cfg, reference.seed);
  const std::int64_t half = cfg.train.total_steps / 2;
  while (first.step() < half) first.advance();
  fs::create_directories(scratch);
  const fs::path ckpt = scratch / "acceptance_resume.ckpt";
  save_checkpoint(ckpt, first);
  Run resumed = restore_run(load_checkpoint(ckpt));
  while (!resumed.done()) resumed.advance();
  const bool same_rows = csv_bytes(resumed.rows()) == csv_bytes(straight.rows());
  const bool same_state = checkpoint_arrays(resumed) == checkpoint_arrays(straight);
  c.checks.push_back({"9.resume", same_rows && same_state,
                      fmt("checkpoint at step %lld then resume: metrics %s, final state %s", static_cast<long long>(half),
                          same_rows ? "identical" : "DIFFERENT", same_state ? "identical" : "DIFFERENT")});
  fs::remove(ckpt);
  c.seconds = since(t0);
  return c;
}

Criterion nfc_pseudo_labels(Runs& runs) {
  Criterion c{10, "training the flow classifier on pseudo-labels does not help"};
  const auto t0 = Clock::now();
  const auto& def = runs.normatch();
  const auto& pl = runs.get("nfc-on-pseudo-labels", [](ExperimentConfig& cfg) { cfg.train.loss.train_nfc_on_pseudo_labels = true; });
  const double a = pts(def.result.test_acc_ema().mean), b = pts(pl.result.test_acc_ema().mean);
  c.checks.push_back({"10", a >= b - 0.5,
                      fmt("default %.2f vs pseudo-label-trained flow %.2f %s (need default >= other - 0.5)", a, b,
                          per_seed(pl.result).c_str())});
  c.seconds = since(t0);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<std::string> expect_fail;
  std::set<int> only;
  std::string scratch = (fs::temp_directory_path() / "normatch_acceptance").string();
  std::string report_path;
  app.add_option("--expect-fail", expect_fail, "check ids whose failure is documented and tolerated")->delimiter(',');
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--scratch", scratch, "directory for temporary checkpoint files");
  app.add_option("--report", report_path, "also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  std::ofstream report;
  if (!report_path.empty()) {
    report.open(report_path);
    if (!report) {
      std::fprintf(stderr, "cannot write %s\n", report_path.c_str());
      return 1;
    }
  }
  auto emit = [&](const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (report) report << line << std::flush;
  };

  Runs runs{ExperimentConfig{}};
  const std::vector<std::pair<int, std::function<Criterion()>>> all{
      {1, gradient_oracle},
      {2, flow_correctness},
      {3, classifier_contracts},
      {4, consensus_weight},
      {5, [&] { return stop_gradient(runs); }},
      {6, [&] { return ssl_gain(runs); }},
      {7, [&] { return count_relation(runs); }},
      {8, [&] { return lambda_behaviour(runs); }},
      {9, [&] { return determinism(runs, scratch); }},
      {10, [&] { return nfc_pseudo_labels(runs); }},
  };

  const std::set<std::string> tolerated(expect_fail.begin(), expect_fail.end());
  std::vector<Criterion> results;
  for (const auto& [n, fn] : all) {
    if (!only.empty() && !only.contains(n)) continue;
    std::fprintf(stderr, "criterion %d ...\n", n);
    results.push_back(fn());
    const auto& c = results.back();
    emit(fmt("%s %2d  %s  (%.1f s)\n", c.pass() ? "PASS" : "FAIL", c.number, c.title.c_str(), c.seconds));
    for (const auto& ch : c.checks)
      emit(fmt("         %-5s %-12s %s\n", ch.pass ? "ok" : (tolerated.contains(ch.id) ? "xfail" : "FAIL"),
               ch.id.c_str(), ch.detail.c_str()));
  }

  int passed = 0, unexpected = 0;
  for (const auto& c : results) {
    passed += c.pass();
    for (const auto& ch : c.checks) unexpected += !ch.pass && !tolerated.contains(ch.id);
  }
  std::string summary = fmt("\n%d/%zu criteria passed", passed, results.size());
  if (!tolerated.empty()) {
    summary += "; documented expected failures:";
    for (const auto& id : tolerated) summary += " " + id;
  }
  emit(summary + "\n");
  return unexpected == 0 ? 0 : 1;
}
