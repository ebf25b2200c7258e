// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flashgrpo/config.hpp"
#include "flashgrpo/oracle.hpp"
#include "flashgrpo/runner.hpp"

using namespace flashgrpo;

namespace {

constexpr std::uint64_t kSeed = 7;

constexpr std::size_t kGradTrials = 100;
constexpr double kGradTol = 1e-6;
constexpr double kGradSeconds = 60.0;

constexpr std::size_t kRectTrials = 10;
constexpr double kRectTol = 1e-12;
constexpr double kRectSeconds = 10.0;

constexpr double kFdTol = 1e-4;

constexpr std::size_t kEnergySamples = 4096;
constexpr std::size_t kEnergyPermutations = 500;
constexpr double kEnergyAlpha = 0.01;
constexpr double kEnergyCfg = 1.0;
constexpr double kEnergySeconds = 300.0;

constexpr double kProbeDominance = 10.0;
constexpr std::size_t kVarianceGroups = 2000;
constexpr std::size_t kPilotGroups = 200;
constexpr double kVarianceRatio = 2.0;
constexpr double kVarianceSeconds = 120.0;

constexpr std::size_t kTimingRounds = 40;
constexpr double kWallRatio = 5.0;

constexpr std::size_t kAlignIterations = 300;
constexpr std::size_t kWindow = 50;
constexpr double kAlignLearningRate = AlignConfig{}.learning_rate;
constexpr double kGapFraction = 0.5;
constexpr double kAlignSeconds = 1800.0;

constexpr std::size_t kReproIterations = 20;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void report(int id, const std::string& name, bool passed, const std::string& detail) {
  std::cout << (passed ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail
            << std::endl;
  if (!passed) ++failures;
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(4);
  o << v;
  return o.str();
}

double mean(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double coefficient_of_variation(const std::vector<double>& xs) {
  return std::sqrt(oracle::population_variance(xs)) / mean(xs);
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

void crit_grad_identity(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const auto start = Clock::now();
  const auto rep = oracle::check_grad_identity(model, cfg.make_train_schedule(), kGradTrials, kSeed,
                                               cfg.align.cfg_scale, 1.0, kGradTol);
  const double secs = seconds_since(start);
  report(1, "gradient identity", rep.passed && secs < kGradSeconds,
         "max_rel_err=" + fmt(rep.measured.at("max_rel_err")) + " tol=" + fmt(kGradTol) +
             " trials=" + std::to_string(kGradTrials) + " time=" + fmt(secs) + "s");
}

void crit_rectification(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const auto start = Clock::now();
  LossOptions o;
  o.clip_epsilon = cfg.align.clip_epsilon;
  o.cfg_scale = cfg.align.cfg_scale;
  const auto rep = oracle::check_rectification_law(model, model, cfg.make_train_schedule(),
                                                   cfg.align.group_size, kRectTrials, kSeed, o,
                                                   kRectTol);
  const double secs = seconds_since(start);
  report(2, "rectification law", rep.passed && secs < kRectSeconds,
         "max_rel_err=" + fmt(rep.measured.at("max_rel_err")) + " (vs gradient max-norm) tol=" +
             fmt(kRectTol) + " max_entry_rel_err=" + fmt(rep.measured.at("max_entry_rel_err")) +
             " clipped_terms=" + fmt(rep.measured.at("clipped_terms")) + " time=" + fmt(secs) +
             "s");
}

void crit_finite_differences(const VectorFieldParams& model) {
  double worst = 0.0;
  std::string worst_name;
  bool all = true;
  std::size_t n = 0;
  for (const auto& rep : oracle::finite_difference_suite(kSeed, &model, 8)) {
    const double err = rep.measured.at("max_rel_err");
    all = all && rep.passed && err <= kFdTol;
    if (err >= worst) {
      worst = err;
      worst_name = rep.name;
    }
    ++n;
  }
  report(3, "finite-difference suite", all,
         std::to_string(n) + " checks, worst " + worst_name + " rel_err=" + fmt(worst) +
             " tol=" + fmt(kFdTol));
}

void crit_marginals(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const auto start = Clock::now();
  const NoiseSchedule s = cfg.make_train_schedule();
  bool all = true;
  std::string detail;
  for (std::size_t c = 0; c < cfg.arch.num_classes; ++c) {
    const Tensor sde = oracle::terminal_samples(model, s, Condition::of(c), kEnergyCfg,
                                                kEnergySamples, RolloutKind::kFullSde, 21 + 2 * c);
    const Tensor ode = oracle::terminal_samples(model, s, Condition::of(c), kEnergyCfg,
                                                kEnergySamples, RolloutKind::kOde, 22 + 2 * c);
    const auto rep = oracle::energy_distance_test(sde, ode, kEnergyPermutations, kEnergyAlpha,
                                                  kSeed);
    all = all && rep.passed;
    detail += "class" + std::to_string(c) + " E=" + fmt(rep.measured.at("statistic")) +
              " p=" + fmt(rep.measured.at("p_value")) + "; ";
  }
  const double secs = seconds_since(start);
  report(4, "SDE/ODE marginal match", all && secs < kEnergySeconds,
         detail + "N=" + std::to_string(kEnergySamples) + " perms=" +
             std::to_string(kEnergyPermutations) + " alpha=" + fmt(kEnergyAlpha) +
             " cfg=" + fmt(kEnergyCfg) + " time=" + fmt(secs) + "s");
}

void crit_confounding(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const auto start = Clock::now();
  const NoiseSchedule s = cfg.make_train_schedule();
  const RewardSpec probe =
      oracle::calibrate_probe(cfg.reward_spec(), model, s, cfg.align.group_size, kPilotGroups,
                              kSeed ^ 0x9110, cfg.align.cfg_scale, kProbeDominance);
  const auto rep = oracle::variance_decomposition(probe, model, s, cfg.align.group_size,
                                                  kVarianceGroups, kSeed, cfg.align.cfg_scale);
  const double secs = seconds_since(start);
  const double ratio = rep.measured.at("ratio");
  report(5, "timestep confounding", rep.passed && ratio >= kVarianceRatio && secs < kVarianceSeconds,
         "naive/iso variance ratio=" + fmt(ratio) + " (>= " + fmt(kVarianceRatio) +
             ") naive=" + fmt(rep.measured.at("naive_variance")) +
             " iso=" + fmt(rep.measured.at("iso_variance")) + " probe_amplitude=" +
             fmt(rep.measured.at("probe_amplitude")) + " groups=" +
             std::to_string(kVarianceGroups) + " G=" + std::to_string(cfg.align.group_size) +
             " time=" + fmt(secs) + "s");
}

Aligner make_aligner(const TrainRunConfig& cfg, const VectorFieldParams& start, Method m,
                     std::size_t B, double lr) {
  AlignConfig ac = cfg.align;
  ac.method = m;
  ac.prompts_per_batch = B;
  ac.learning_rate = lr;
  return Aligner(start, ac, cfg.reward_spec(), cfg.make_train_schedule(), kSeed);
}

void crit_cost(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const std::size_t G = cfg.align.group_size;
  bool counts_ok = true;
  std::string detail;
  const std::vector<std::pair<Method, std::uint64_t>> expected{
      {Method::kFlash, G}, {Method::kFlowGrpoFull, G * 20}, {Method::kFlowGrpoHalf, G * 10}};
  for (const auto& [m, want] : expected) {
    Aligner al = make_aligner(cfg, model, m, 1, cfg.align.learning_rate);
    oracle::reset_counter();
    al.step();
    const std::uint64_t got = oracle::backward_pass_counter();
    counts_ok = counts_ok && got == want;
    detail += std::string(to_string(m)) + "=" + std::to_string(got) + " ";
  }

  // Interleaved iterations at the default batch; medians damp machine noise.
  const std::size_t B = cfg.align.prompts_per_batch;
  Aligner flash = make_aligner(cfg, model, Method::kFlash, B, cfg.align.learning_rate);
  Aligner full = make_aligner(cfg, model, Method::kFlowGrpoFull, B, cfg.align.learning_rate);
  flash.step();
  full.step();
  std::vector<double> t_flash;
  std::vector<double> t_full;
  for (std::size_t i = 0; i < kTimingRounds; ++i) {
    t_flash.push_back(flash.step().wall_ms);
    t_full.push_back(full.step().wall_ms);
  }
  const double ratio = median(t_full) / median(t_flash);
  report(6, "cost counting", counts_ok && ratio >= kWallRatio,
         "kernel gradients per iteration (B=1, G=" + std::to_string(G) + "): " + detail +
             "| median wall ms flash=" + fmt(median(t_flash)) + " flowgrpo-full=" +
             fmt(median(t_full)) + " ratio=" + fmt(ratio) + " (>= " + fmt(kWallRatio) + ", B=" +
             std::to_string(B) + ", " + std::to_string(kTimingRounds) + " rounds)");
}

struct AlignTrace {
  std::vector<double> eval;
  std::vector<double> grad_norms;
};

AlignTrace run_alignment(const TrainRunConfig& cfg, const VectorFieldParams& model, Method m) {
  Aligner al = make_aligner(cfg, model, m, cfg.align.prompts_per_batch, kAlignLearningRate);
  const NoiseSchedule eval_schedule = cfg.make_eval_schedule();
  AlignTrace trace;
  for (std::size_t it = 0; it < kAlignIterations; ++it) {
    const MetricsRecord rec = al.step();
    trace.grad_norms.push_back(rec.grad_norm);
    if (it < kWindow || it >= kAlignIterations - kWindow) {
      trace.eval.push_back(evaluate_policy(al.params(), al.reward_spec(), eval_schedule,
                                           cfg.align.cfg_scale, cfg.eval.samples_per_class,
                                           cfg.seed));
    }
  }
  return trace;
}

void crit_alignment(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  const auto start = Clock::now();
  const AlignTrace flash = run_alignment(cfg, model, Method::kFlash);
  const AlignTrace fast1 = run_alignment(cfg, model, Method::kFast1);
  const double secs = seconds_since(start);
  const std::span<const double> ev(flash.eval);
  const double first = mean(ev.subspan(0, kWindow));
  const double last = mean(ev.subspan(kWindow, kWindow));
  const double gap = (last - first) / (RewardSpec::optimum() - first);
  const double cv_flash = coefficient_of_variation(flash.grad_norms);
  const double cv_fast1 = coefficient_of_variation(fast1.grad_norms);
  report(7, "end-to-end alignment",
         gap >= kGapFraction && cv_flash < cv_fast1 && secs < kAlignSeconds,
         "held-out reward first50=" + fmt(first) + " last50=" + fmt(last) +
             " gap_closed=" + fmt(gap) + " (>= " + fmt(kGapFraction) + ") grad_norm_cv flash=" +
             fmt(cv_flash) + " fast1=" + fmt(cv_fast1) + " lr=" + fmt(kAlignLearningRate) +
             " iterations=" + std::to_string(kAlignIterations) + " time=" + fmt(secs) + "s");
}

void crit_invariants(const TrainRunConfig& cfg, const VectorFieldParams& model) {
  Aligner al = make_aligner(cfg, model, Method::kFlash, cfg.align.prompts_per_batch,
                            kAlignLearningRate);
  bool iso_ok = true;
  bool adv_ok = true;
  bool clip_ok = true;
  std::size_t groups_seen = 0;
  std::size_t clipped_seen = 0;
  double worst_mean = 0.0;
  double worst_std = 0.0;
  const double eps = cfg.align.clip_epsilon;
  LossOptions o{eps, 0.0, cfg.align.cfg_scale, nullptr};
  for (std::size_t it = 0; it < 30; ++it) {
    const auto groups = al.collect(it);
    for (const RolloutGroup& g : groups) {
      ++groups_seen;
      const TransitionRecord& head = g.trajectories.front().single_record();
      for (const Trajectory& tr : g.trajectories) {
        const TransitionRecord& r = tr.single_record();
        iso_ok = iso_ok && r.t == head.t && r.dt == head.dt && r.sigma == head.sigma &&
                 r.lambda == head.lambda && tr.transition_index == g.shared_step();
      }
      const double m = mean(g.advantages);
      const double sd = std::sqrt(oracle::population_variance(g.advantages));
      const bool degenerate =
          std::all_of(g.advantages.begin(), g.advantages.end(), [](double a) { return a == 0.0; });
      worst_mean = std::max(worst_mean, std::abs(m));
      if (!degenerate) worst_std = std::max(worst_std, std::abs(sd - 1.0));
      adv_ok = adv_ok && std::abs(m) <= 1e-10 && (degenerate || std::abs(sd - 1.0) <= 1e-6);
    }
    al.step();
    // The same batch under the updated parameters, so ratios leave 1.
    const PolicyLoss loss = flash_loss(groups, al.params(), cfg.make_train_schedule(), o);
    for (std::size_t i = 0; i < loss.ratios.size(); ++i) {
      if (loss.effective_ratios[i] != loss.ratios[i]) {
        ++clipped_seen;
        clip_ok = clip_ok && loss.effective_ratios[i] >= 1.0 - eps &&
                  loss.effective_ratios[i] <= 1.0 + eps;
      }
    }
  }

  auto rerun = [&] {
    Aligner a = make_aligner(cfg, model, Method::kFlash, cfg.align.prompts_per_batch,
                             kAlignLearningRate);
    std::vector<MetricsRecord> recs;
    for (std::size_t i = 0; i < kReproIterations; ++i) {
      MetricsRecord r = a.step();
      r.wall_ms = 0.0;
      r.backward_passes_cumulative = 0;
      recs.push_back(r);
    }
    return std::make_pair(recs, serialize_checkpoint(a.params()));
  };
  const auto run1 = rerun();
  const auto run2 = rerun();
  const bool repro = run1 == run2;

  report(8, "structural invariants", iso_ok && adv_ok && clip_ok && repro && clipped_seen > 0,
         std::string("iso_records=") + (iso_ok ? "shared" : "MISMATCH") + " groups=" +
             std::to_string(groups_seen) + " adv_mean_max=" + fmt(worst_mean) +
             " adv_std_dev_max=" + fmt(worst_std) + " clipped_terms=" +
             std::to_string(clipped_seen) + " within [" + fmt(1.0 - eps) + ", " +
             fmt(1.0 + eps) + "]=" + (clip_ok ? "yes" : "NO") + " rerun_bitwise=" +
             (repro ? "yes" : "NO"));
}

}  // namespace

int main() {
  TrainRunConfig cfg = parse_config("[run]\nseed = 7\n");
  const auto start = Clock::now();
  Rng rng = make_stream(cfg.seed, {0xF10});
  const PretrainResult pre =
      fm_pretrain(init_params(cfg.seed, cfg.arch), cfg.data, cfg.pretrain, rng);
  const double tail =
      std::accumulate(pre.losses.end() - 100, pre.losses.end(), 0.0) / 100.0;
  std::cout << "pretrained " << cfg.pretrain.iterations << " iterations, tail loss " << fmt(tail)
            << ", " << fmt(seconds_since(start)) << "s" << std::endl;
  const VectorFieldParams& model = pre.params;

  crit_grad_identity(cfg, model);
  crit_rectification(cfg, model);
  crit_finite_differences(model);
  crit_marginals(cfg, model);
  crit_confounding(cfg, model);
  crit_cost(cfg, model);
  crit_alignment(cfg, model);
  crit_invariants(cfg, model);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
