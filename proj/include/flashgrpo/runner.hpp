// SPDX-License-Identifier: Apache-2.0
#pragma once

// The four experiment commands. Each owns its output directory, echoes the
// effective configuration there and returns a process exit code.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flashgrpo/config.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/grpo.hpp"
#include "flashgrpo/log.hpp"
#include "flashgrpo/oracle.hpp"
#include "json.hpp"

namespace flashgrpo {

struct CommandOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::string> checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda_fault;
};

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

}  // namespace detail

// Loads the config, applies CLI overrides and prepares the output directory.
inline TrainRunConfig prepare_run(const CommandOptions& opts) {
  TrainRunConfig cfg = load_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.lambda_fault) {
    cfg.verify.lambda_fault = *opts.lambda_fault;
    cfg.validate();
  }
  if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
  if (cfg.output_dir.empty()) throw ConfigError("run.output_dir: no output directory given");
  std::filesystem::create_directories(cfg.output_dir);
  auto out = detail::open_output(std::filesystem::path(cfg.output_dir) / "effective_config.ini");
  out << config_to_ini(cfg);
  return cfg;
}

inline VectorFieldParams load_matching_checkpoint(const std::string& path,
                                                  const TrainRunConfig& cfg) {
  VectorFieldParams p = read_checkpoint(path);
  if (!(p.arch == cfg.arch)) {
    throw ConfigError("checkpoint: architecture in " + path + " does not match the config");
  }
  return p;
}

// ---------------------------------------------------------------------------

struct PretrainOutcome {
  VectorFieldParams params;
  double final_loss = 0.0;
  std::vector<std::string> warnings;
};

inline PretrainOutcome run_pretrain(const TrainRunConfig& cfg) {
  const VectorFieldParams init = init_params(cfg.seed, cfg.arch);
  Rng rng = make_stream(cfg.seed, {0xF10});
  PretrainResult r = fm_pretrain(init, cfg.data, cfg.pretrain, rng);
  const std::filesystem::path dir(cfg.output_dir);
  write_checkpoint((dir / "checkpoint.bin").string(), r.params);
  auto csv = detail::open_output(dir / "pretrain_loss.csv");
  csv << "iteration,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.losses.size(); ++i) csv << i << "," << r.losses[i] << "\n";
  PretrainOutcome out{std::move(r.params), r.losses.empty() ? 0.0 : r.losses.back(),
                      std::move(r.warnings)};
  for (const auto& w : out.warnings) warn(w);
  return out;
}

inline int cmd_pretrain(const CommandOptions& opts) {
  const TrainRunConfig cfg = prepare_run(opts);
  const PretrainOutcome r = run_pretrain(cfg);
  std::cout << "pretrain: " << cfg.pretrain.iterations << " iterations, final loss "
            << r.final_loss << ", checkpoint "
            << (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct AlignOutcome {
  std::vector<MetricsRecord> metrics;
  VectorFieldParams params;
  bool completed = false;
  std::string error;
};

// Runs one method, appending each record to `jsonl` as it is produced.
inline AlignOutcome run_align(const TrainRunConfig& cfg, const VectorFieldParams& start,
                              Method method, std::ostream* jsonl) {
  AlignConfig ac = cfg.align;
  ac.method = method;
  const NoiseSchedule eval_schedule = cfg.make_eval_schedule();
  Aligner aligner(start, ac, cfg.reward_spec(), cfg.make_train_schedule(), cfg.seed);
  AlignOutcome out;
  try {
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      MetricsRecord m = aligner.step();
      const bool last = it + 1 == cfg.iterations;
      if (cfg.eval_every > 0 && (it % cfg.eval_every == 0 || last)) {
        m.eval_reward = evaluate_policy(aligner.params(), aligner.reward_spec(), eval_schedule,
                                        ac.cfg_scale, cfg.eval.samples_per_class, cfg.seed);
      }
      if (jsonl) *jsonl << m.to_json().dump() << "\n" << std::flush;
      out.metrics.push_back(std::move(m));
    }
    out.completed = true;
  } catch (const NumericError& e) {
    out.error = e.what();
  }
  out.params = aligner.params();
  return out;
}

inline int cmd_align(const CommandOptions& opts) {
  const TrainRunConfig cfg = prepare_run(opts);
  if (!opts.checkpoint) throw ConfigError("align: --checkpoint is required");
  const VectorFieldParams start = load_matching_checkpoint(*opts.checkpoint, cfg);
  const std::filesystem::path dir(cfg.output_dir);
  auto jsonl = detail::open_output(dir / "metrics.jsonl");
  AlignOutcome r = run_align(cfg, start, cfg.align.method, &jsonl);
  write_checkpoint((dir / "final_checkpoint.bin").string(), r.params);
  if (!r.completed) {
    std::cerr << "align: aborted: " << r.error << "\n";
    return 3;
  }
  std::cout << "align: " << to_string(cfg.align.method) << ", " << r.metrics.size()
            << " iterations";
  if (!r.metrics.empty() && r.metrics.back().eval_reward) {
    std::cout << ", final eval reward " << *r.metrics.back().eval_reward;
  }
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

// All oracle checks. Model-dependent statistics (marginal test, confounding)
// need a pretrained checkpoint and are skipped without one.
inline std::vector<oracle::VerificationReport> run_verification(
    const TrainRunConfig& cfg, const std::optional<VectorFieldParams>& trained) {
  const VerifyConfig& v = cfg.verify;
  const VectorFieldParams model = trained ? *trained : init_params(cfg.seed, cfg.arch);
  const NoiseSchedule s = cfg.make_train_schedule();
  std::vector<oracle::VerificationReport> reports =
      oracle::finite_difference_suite(cfg.seed, &model, v.fd_directions);
  reports.push_back(oracle::check_grad_identity(model, s, v.grad_trials, cfg.seed,
                                                cfg.align.cfg_scale, v.lambda_fault));
  LossOptions o;
  o.clip_epsilon = cfg.align.clip_epsilon;
  o.cfg_scale = cfg.align.cfg_scale;
  reports.push_back(oracle::check_rectification_law(model, model, s, cfg.align.group_size,
                                                    v.rect_trials, cfg.seed, o));
  if (trained) {
    const RewardSpec probe = oracle::calibrate_probe(
        cfg.reward_spec(), model, s, cfg.align.group_size, std::max<std::size_t>(200, v.variance_groups / 10),
        cfg.seed ^ 0x9110, cfg.align.cfg_scale, v.probe_dominance);
    oracle::VerificationReport var = oracle::variance_decomposition(
        probe, model, s, cfg.align.group_size, v.variance_groups, cfg.seed, cfg.align.cfg_scale);
    var.tolerance = 2.0;
    var.passed = var.passed && var.measured.at("ratio") >= 2.0;
    reports.push_back(std::move(var));
    for (std::size_t c = 0; c < cfg.arch.num_classes; ++c) {
      const Tensor sde = oracle::terminal_samples(model, s, Condition::of(c), v.energy_cfg_scale,
                                                  v.energy_samples, RolloutKind::kFullSde, cfg.seed + 2 * c);
      const Tensor ode = oracle::terminal_samples(model, s, Condition::of(c), v.energy_cfg_scale,
                                                  v.energy_samples, RolloutKind::kOde, cfg.seed + 2 * c + 1);
      reports.push_back(oracle::energy_distance_test(sde, ode, v.energy_permutations,
                                                     v.energy_alpha, cfg.seed,
                                                     "marginal_class" + std::to_string(c)));
    }
  }
  return reports;
}

inline int cmd_verify(const CommandOptions& opts) {
  const TrainRunConfig cfg = prepare_run(opts);
  std::optional<VectorFieldParams> trained;
  if (opts.checkpoint) trained = load_matching_checkpoint(*opts.checkpoint, cfg);
  const auto reports = run_verification(cfg, trained);
  bool all = true;
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["checkpoint"] = opts.checkpoint ? *opts.checkpoint : "";
  j["reports"] = nlohmann::json::array();
  std::ostringstream text;
  for (const auto& r : reports) {
    all = all && r.passed;
    j["reports"].push_back(r.to_json());
    text << (r.passed ? "PASS " : "FAIL ") << r.name;
    for (const auto& [k, val] : r.measured) text << " " << k << "=" << val;
    text << "\n";
  }
  j["passed"] = all;
  const std::filesystem::path dir(cfg.output_dir);
  detail::open_output(dir / "verification.json") << j.dump(2) << "\n";
  detail::open_output(dir / "verification.txt") << text.str();
  std::cout << text.str() << (all ? "verify: all checks passed\n" : "verify: FAILED\n");
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------

inline std::string comparison_csv(const std::vector<MetricsRecord>& rows,
                                  std::uint64_t checkpoint_hash) {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "iteration,wall_ms,method,mean_reward,grad_norm,checkpoint_hash\n";
  const std::string hash = detail::hex64(checkpoint_hash);
  for (const MetricsRecord& m : rows) {
    o << m.iteration << "," << m.wall_ms << "," << m.method << "," << m.mean_reward << ","
      << m.grad_norm << "," << hash << "\n";
  }
  return o.str();
}

inline int cmd_compare(const CommandOptions& opts) {
  const TrainRunConfig cfg = prepare_run(opts);
  if (!opts.checkpoint) throw ConfigError("compare: --checkpoint is required");
  const VectorFieldParams start = load_matching_checkpoint(*opts.checkpoint, cfg);
  const std::uint64_t hash = fnv1a64(serialize_checkpoint(start));
  const std::filesystem::path dir(cfg.output_dir);
  std::vector<MetricsRecord> merged;
  int code = 0;
  for (Method m : cfg.methods) {
    auto jsonl = detail::open_output(dir / ("metrics_" + std::string(to_string(m)) + ".jsonl"));
    AlignOutcome r = run_align(cfg, start, m, &jsonl);
    merged.insert(merged.end(), r.metrics.begin(), r.metrics.end());
    if (!r.completed) {
      std::cerr << "compare: " << to_string(m) << " aborted: " << r.error << "\n";
      code = 3;
    }
    std::cout << "compare: " << to_string(m) << " done (" << r.metrics.size() << " iterations)\n";
  }
  detail::open_output(dir / "comparison.csv") << comparison_csv(merged, hash);
  return code;
}

}  // namespace flashgrpo
