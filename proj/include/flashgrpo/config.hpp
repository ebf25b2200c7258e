// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: an INI file with sections. Every key is optional and
// falls back to the defaults below; unknown keys and bad values are rejected
// with the offending field named.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/grpo.hpp"
#include "flashgrpo/rewards.hpp"
#include "flashgrpo/schedule.hpp"

namespace flashgrpo {

struct ScheduleConfig {
  std::size_t steps = 20;
  double noise_scale = 0.7;
  double t_floor = 1e-3;
};

struct VerifyConfig {
  std::size_t grad_trials = 100;
  std::size_t rect_trials = 10;
  std::size_t fd_directions = 8;
  std::size_t energy_samples = 4096;
  std::size_t energy_permutations = 500;
  double energy_alpha = 0.01;
  double energy_cfg_scale = 1.0;
  std::size_t variance_groups = 2000;
  double probe_dominance = 10.0;
  // Multiplies lambda inside the gradient-identity check; != 1 is a fault.
  double lambda_fault = 1.0;
};

struct TrainRunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  std::size_t iterations = 300;
  std::size_t eval_every = 10;
  std::vector<Method> methods{Method::kFlash, Method::kFast1};
  DataSpec data = default_data_spec();
  Architecture arch;
  ScheduleConfig schedule;
  PretrainConfig pretrain;
  AlignConfig align;
  EvalConfig eval;
  double reward_gamma = 0.5;
  VerifyConfig verify;

  NoiseSchedule make_train_schedule() const {
    return make_schedule(schedule.steps, schedule.noise_scale, schedule.t_floor);
  }
  NoiseSchedule make_eval_schedule() const {
    return make_schedule(eval.steps, schedule.noise_scale, schedule.t_floor);
  }
  RewardSpec reward_spec() const { return reward_spec_from(data, reward_gamma); }

  // Full validation; throws ConfigError naming the field.
  void validate() const {
    data.validate();
    arch.validate();
    if (data.dim() != arch.data_dim) throw ConfigError("data: dimension does not match model.data_dim");
    if (data.num_classes() != arch.num_classes) {
      throw ConfigError("data: class count does not match model.num_classes");
    }
    const NoiseSchedule s = make_train_schedule();
    if (eval.steps < 2) throw ConfigError("eval.steps: must be >= 2");
    make_eval_schedule();
    if (eval.samples_per_class < 1) throw ConfigError("eval.samples: must be >= 1");
    if (pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size: must be >= 1");
    if (!(pretrain.learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate: must be >= 0");
    if (!(pretrain.final_learning_rate >= 0.0)) {
      throw ConfigError("pretrain.final_learning_rate: must be >= 0");
    }
    if (!(pretrain.uncond_prob >= 0.0 && pretrain.uncond_prob <= 1.0)) {
      throw ConfigError("pretrain.uncond_prob: must lie in [0, 1]");
    }
    align.validate(s);
    if (!(reward_gamma > 0.0)) throw ConfigError("reward.gamma: must be > 0");
    if (methods.empty()) throw ConfigError("run.methods: at least one method required");
    if (verify.grad_trials < 1) throw ConfigError("verify.grad_trials: must be >= 1");
    if (verify.energy_samples < 256) throw ConfigError("verify.energy_samples: must be >= 256");
    if (!(verify.energy_alpha > 0.0 && verify.energy_alpha < 1.0)) {
      throw ConfigError("verify.energy_alpha: must lie in (0, 1)");
    }
    if (!(verify.lambda_fault > 0.0)) throw ConfigError("verify.lambda_fault: must be > 0");
    if (!(verify.probe_dominance > 0.0)) throw ConfigError("verify.probe_dominance: must be > 0");
    if (verify.variance_groups < 1) throw ConfigError("verify.variance_groups: must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& field, const std::string& text) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (in.fail() || !(in >> std::ws).eof()) {
    throw ConfigError(field + ": cannot parse '" + text + "'");
  }
  if constexpr (std::is_unsigned_v<T>) {
    if (trim(text).starts_with("-")) throw ConfigError(field + ": must be non-negative");
  }
  return value;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(field + ": expected true/false, got '" + text + "'");
}

// "x,y; x,y" -> list of points.
inline std::vector<std::vector<double>> parse_points(const std::string& field,
                                                     const std::string& text) {
  std::vector<std::vector<double>> pts;
  for (const std::string& p : split(text, ';')) {
    if (p.empty()) continue;
    std::vector<double> v;
    for (const std::string& x : split(p, ',')) v.push_back(parse_number<double>(field, x));
    pts.push_back(std::move(v));
  }
  return pts;
}

// Shortest of 15 or 17 significant digits that reads back exactly.
inline std::string format_double(double v) {
  for (int digits : {15, 17}) {
    std::ostringstream out;
    out << std::setprecision(digits) << v;
    if (std::stod(out.str()) == v || digits == 17) return out.str();
  }
  return {};
}

inline std::string format_points(const std::vector<std::vector<double>>& pts) {
  std::string s;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i) s += "; ";
    for (std::size_t j = 0; j < pts[i].size(); ++j) {
      if (j) s += ",";
      s += format_double(pts[i][j]);
    }
  }
  return s;
}

}  // namespace detail

inline TrainRunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.message() + " at line " +
                      std::to_string(e.line()));
  }
  TrainRunConfig c;
  std::vector<MixtureClass> classes;
  bool classes_given = false;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config: key '" + section + "' outside any section");
    }
    for (const auto& [key, node] : body) {
      const std::string field = section + "." + key;
      const std::string v = detail::trim(node.data());
      using detail::parse_number;
      auto sz = [&] { return parse_number<std::size_t>(field, v); };
      auto dbl = [&] { return parse_number<double>(field, v); };
      bool known = true;
      if (section == "run") {
        if (key == "seed") c.seed = parse_number<std::uint64_t>(field, v);
        else if (key == "output_dir") c.output_dir = v;
        else if (key == "iterations") c.iterations = sz();
        else if (key == "eval_every") c.eval_every = sz();
        else if (key == "method") c.align.method = parse_method(v);
        else if (key == "methods") {
          c.methods.clear();
          for (const std::string& m : detail::split(v, ',')) c.methods.push_back(parse_method(m));
        } else known = false;
      } else if (section == "data") {
        if (key == "component_std") c.data.component_std = dbl();
        else if (key.starts_with("class") && key.ends_with(".preferred")) {
          const std::size_t idx = parse_number<std::size_t>(field, key.substr(5, key.size() - 15));
          if (idx >= classes.size()) classes.resize(idx + 1);
          classes[idx].preferred = sz();
          classes_given = true;
        } else if (key.starts_with("class")) {
          const std::size_t idx = parse_number<std::size_t>(field, key.substr(5));
          if (idx >= classes.size()) classes.resize(idx + 1);
          classes[idx].means = detail::parse_points(field, v);
          classes_given = true;
        } else known = false;
      } else if (section == "model") {
        if (key == "hidden_width") c.arch.hidden_width = sz();
        else if (key == "depth") c.arch.depth = sz();
        else if (key == "embed_dim") c.arch.embed_dim = sz();
        else known = false;
      } else if (section == "schedule") {
        if (key == "steps") c.schedule.steps = sz();
        else if (key == "noise_scale") c.schedule.noise_scale = dbl();
        else if (key == "t_floor") c.schedule.t_floor = dbl();
        else known = false;
      } else if (section == "pretrain") {
        if (key == "iterations") c.pretrain.iterations = sz();
        else if (key == "batch_size") c.pretrain.batch_size = sz();
        else if (key == "learning_rate") c.pretrain.learning_rate = dbl();
        else if (key == "final_learning_rate") c.pretrain.final_learning_rate = dbl();
        else if (key == "uncond_prob") c.pretrain.uncond_prob = dbl();
        else if (key == "loss_threshold") c.pretrain.loss_threshold = dbl();
        else known = false;
      } else if (section == "grpo") {
        if (key == "group_size") c.align.group_size = sz();
        else if (key == "prompts_per_batch") c.align.prompts_per_batch = sz();
        else if (key == "clip_epsilon") c.align.clip_epsilon = dbl();
        else if (key == "kl_beta") c.align.kl_beta = dbl();
        else if (key == "cfg_scale") c.align.cfg_scale = dbl();
        else if (key == "learning_rate") c.align.learning_rate = dbl();
        else if (key == "std_floor") c.align.std_floor = dbl();
        else if (key == "fast1_sliding") c.align.fast1_sliding = detail::parse_bool(field, v);
        else known = false;
      } else if (section == "reward") {
        if (key == "gamma") c.reward_gamma = dbl();
        else known = false;
      } else if (section == "eval") {
        if (key == "samples") c.eval.samples_per_class = sz();
        else if (key == "steps") c.eval.steps = sz();
        else known = false;
      } else if (section == "verify") {
        if (key == "grad_trials") c.verify.grad_trials = sz();
        else if (key == "rect_trials") c.verify.rect_trials = sz();
        else if (key == "fd_directions") c.verify.fd_directions = sz();
        else if (key == "energy_samples") c.verify.energy_samples = sz();
        else if (key == "energy_permutations") c.verify.energy_permutations = sz();
        else if (key == "energy_alpha") c.verify.energy_alpha = dbl();
        else if (key == "energy_cfg_scale") c.verify.energy_cfg_scale = dbl();
        else if (key == "variance_groups") c.verify.variance_groups = sz();
        else if (key == "probe_dominance") c.verify.probe_dominance = dbl();
        else if (key == "lambda_fault") c.verify.lambda_fault = dbl();
        else known = false;
      } else {
        throw ConfigError("config: unknown section [" + section + "]");
      }
      if (!known) throw ConfigError("config: unknown key " + field);
    }
  }
  if (classes_given) {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].means.empty()) {
        throw ConfigError("data.class" + std::to_string(i) + ": means missing");
      }
    }
    c.data.classes = std::move(classes);
  }
  c.arch.num_classes = c.data.num_classes();
  c.arch.data_dim = c.data.dim();
  c.validate();
  return c;
}

inline TrainRunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Effective configuration with every default resolved; parse_config of the
// result reproduces the same configuration.
inline std::string config_to_ini(const TrainRunConfig& c) {
  using detail::format_double;
  std::ostringstream o;
  std::string methods;
  for (std::size_t i = 0; i < c.methods.size(); ++i) {
    if (i) methods += ",";
    methods += to_string(c.methods[i]);
  }
  o << "[run]\n"
    << "seed = " << c.seed << "\n";
  if (!c.output_dir.empty()) o << "output_dir = " << c.output_dir << "\n";
  o << "iterations = " << c.iterations << "\n"
    << "eval_every = " << c.eval_every << "\n"
    << "method = " << to_string(c.align.method) << "\n"
    << "methods = " << methods << "\n\n";
  o << "[data]\n"
    << "component_std = " << format_double(c.data.component_std) << "\n";
  for (std::size_t i = 0; i < c.data.classes.size(); ++i) {
    o << "class" << i << " = " << detail::format_points(c.data.classes[i].means) << "\n"
      << "class" << i << ".preferred = " << c.data.classes[i].preferred << "\n";
  }
  o << "\n[model]\n"
    << "hidden_width = " << c.arch.hidden_width << "\n"
    << "depth = " << c.arch.depth << "\n"
    << "embed_dim = " << c.arch.embed_dim << "\n\n";
  o << "[schedule]\n"
    << "steps = " << c.schedule.steps << "\n"
    << "noise_scale = " << format_double(c.schedule.noise_scale) << "\n"
    << "t_floor = " << format_double(c.schedule.t_floor) << "\n\n";
  o << "[pretrain]\n"
    << "iterations = " << c.pretrain.iterations << "\n"
    << "batch_size = " << c.pretrain.batch_size << "\n"
    << "learning_rate = " << format_double(c.pretrain.learning_rate) << "\n"
    << "final_learning_rate = " << format_double(c.pretrain.final_learning_rate) << "\n"
    << "uncond_prob = " << format_double(c.pretrain.uncond_prob) << "\n"
    << "loss_threshold = " << format_double(c.pretrain.loss_threshold) << "\n\n";
  o << "[grpo]\n"
    << "group_size = " << c.align.group_size << "\n"
    << "prompts_per_batch = " << c.align.prompts_per_batch << "\n"
    << "clip_epsilon = " << format_double(c.align.clip_epsilon) << "\n"
    << "kl_beta = " << format_double(c.align.kl_beta) << "\n"
    << "cfg_scale = " << format_double(c.align.cfg_scale) << "\n"
    << "learning_rate = " << format_double(c.align.learning_rate) << "\n"
    << "std_floor = " << format_double(c.align.std_floor) << "\n"
    << "fast1_sliding = " << (c.align.fast1_sliding ? "true" : "false") << "\n\n";
  o << "[reward]\n"
    << "gamma = " << format_double(c.reward_gamma) << "\n\n";
  o << "[eval]\n"
    << "samples = " << c.eval.samples_per_class << "\n"
    << "steps = " << c.eval.steps << "\n\n";
  o << "[verify]\n"
    << "grad_trials = " << c.verify.grad_trials << "\n"
    << "rect_trials = " << c.verify.rect_trials << "\n"
    << "fd_directions = " << c.verify.fd_directions << "\n"
    << "energy_samples = " << c.verify.energy_samples << "\n"
    << "energy_permutations = " << c.verify.energy_permutations << "\n"
    << "energy_alpha = " << format_double(c.verify.energy_alpha) << "\n"
    << "energy_cfg_scale = " << format_double(c.verify.energy_cfg_scale) << "\n"
    << "variance_groups = " << c.verify.variance_groups << "\n"
    << "probe_dominance = " << format_double(c.verify.probe_dominance) << "\n"
    << "lambda_fault = " << format_double(c.verify.lambda_fault) << "\n";
  return o.str();
}

}  // namespace flashgrpo
