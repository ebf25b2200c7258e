#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "flashgrpo/config.hpp"
#include "flashgrpo/runner.hpp"

using namespace flashgrpo;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
[run]
seed = 5
iterations = 4
eval_every = 2
methods = flash, fast1

[model]
hidden_width = 8
depth = 1

[pretrain]
iterations = 20
batch_size = 16

[grpo]
group_size = 4
prompts_per_batch = 2

[eval]
samples = 16
steps = 10

[verify]
grad_trials = 5
rect_trials = 2
fd_directions = 2
)";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("flashgrpo_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "run.ini";
  std::ofstream(p) << text;
  return p.string();
}

std::string slurp(const fs::path& p) { return read_file_bytes(p.string()); }

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsWhenEmpty) {
  const TrainRunConfig c = parse_config("");
  EXPECT_EQ(c.schedule.steps, 20u);
  EXPECT_EQ(c.schedule.noise_scale, 0.7);
  EXPECT_EQ(c.align.group_size, 8u);
  EXPECT_EQ(c.align.prompts_per_batch, 4u);
  EXPECT_EQ(c.align.clip_epsilon, 1e-3);
  EXPECT_EQ(c.align.cfg_scale, 4.5);
  EXPECT_EQ(c.align.learning_rate, 1e-4);
  EXPECT_EQ(c.pretrain.iterations, 5000u);
  EXPECT_EQ(c.arch.num_classes, 2u);
}

TEST(Config, RoundTrip) {
  const TrainRunConfig c = parse_config(kTinyConfig);
  const std::string ini = config_to_ini(c);
  EXPECT_EQ(config_to_ini(parse_config(ini)), ini);
  EXPECT_EQ(c.methods.size(), 2u);
  EXPECT_EQ(c.arch.hidden_width, 8u);
}

TEST(Config, CustomData) {
  const TrainRunConfig c = parse_config(
      "[data]\nclass0 = -1,0; 1,0\nclass0.preferred = 0\nclass1 = 0,-1; 0,1\n"
      "class2 = 3,3; -3,-3\ncomponent_std = 0.2\n");
  EXPECT_EQ(c.arch.num_classes, 3u);
  EXPECT_EQ(c.data.preferred_mean(0), (std::vector<double>{-1.0, 0.0}));
  EXPECT_EQ(c.data.preferred_mean(2), (std::vector<double>{3.0, 3.0}));
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(error_of("[grpo]\ngroup_size = 1\n").find("grpo.group_size"), std::string::npos);
  EXPECT_NE(error_of("[grpo]\nbogus = 1\n").find("grpo.bogus"), std::string::npos);
  EXPECT_NE(error_of("[nope]\nx = 1\n").find("nope"), std::string::npos);
  EXPECT_NE(error_of("[schedule]\nnoise_scale = abc\n").find("schedule.noise_scale"),
            std::string::npos);
  EXPECT_NE(error_of("[run]\nmethods = flash, sgd\n").find("sgd"), std::string::npos);
  EXPECT_NE(error_of("[grpo]\nprompts_per_batch = 30\n").find("prompts_per_batch"),
            std::string::npos);
  EXPECT_NE(error_of("[data]\nclass1 = 0,0; 1,1\n").find("class0"), std::string::npos);
}

TEST(Runner, PretrainIsByteReproducible) {
  const fs::path dir = scratch("pretrain");
  const std::string cfg = write_config(dir, kTinyConfig);
  CommandOptions a{cfg, (dir / "a").string(), {}, {}, {}};
  CommandOptions b{cfg, (dir / "b").string(), {}, {}, {}};
  ASSERT_EQ(cmd_pretrain(a), 0);
  ASSERT_EQ(cmd_pretrain(b), 0);
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.bin"), slurp(dir / "b" / "checkpoint.bin"));
  EXPECT_EQ(slurp(dir / "a" / "pretrain_loss.csv"), slurp(dir / "b" / "pretrain_loss.csv"));
  EXPECT_TRUE(fs::exists(dir / "a" / "effective_config.ini"));
}

TEST(Runner, ZeroIterationPretrainEqualsInitialization) {
  const fs::path dir = scratch("pretrain0");
  std::string text = kTinyConfig;
  text.replace(text.find("iterations = 20"), 15, "iterations = 0");
  const std::string cfg0 = write_config(dir, text);
  CommandOptions o{cfg0, (dir / "out").string(), {}, {}, {}};
  ASSERT_EQ(cmd_pretrain(o), 0);
  const TrainRunConfig c = load_config(cfg0);
  EXPECT_EQ(read_checkpoint((dir / "out" / "checkpoint.bin").string()),
            init_params(c.seed, c.arch));
}

TEST(Runner, AlignAndCompareOutputs) {
  const fs::path dir = scratch("align");
  const std::string cfg = write_config(dir, kTinyConfig);
  ASSERT_EQ(cmd_pretrain({cfg, (dir / "pre").string(), {}, {}, {}}), 0);
  const std::string ckpt = (dir / "pre" / "checkpoint.bin").string();
  EXPECT_THROW(cmd_align({cfg, (dir / "x").string(), {}, {}, {}}), ConfigError);
  ASSERT_EQ(cmd_align({cfg, (dir / "al").string(), ckpt, {}, {}}), 0);

  std::ifstream jsonl(dir / "al" / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  std::size_t evals = 0;
  while (std::getline(jsonl, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iter"], lines);
    evals += j.contains("eval_reward");
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  EXPECT_EQ(evals, 3u);  // iterations 0, 2 and the last one
  EXPECT_TRUE(fs::exists(dir / "al" / "final_checkpoint.bin"));

  ASSERT_EQ(cmd_compare({cfg, (dir / "cmp").string(), ckpt, {}, {}}), 0);
  std::ifstream csv(dir / "cmp" / "comparison.csv");
  std::getline(csv, line);
  EXPECT_EQ(line, "iteration,wall_ms,method,mean_reward,grad_norm,checkpoint_hash");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 8u);
  EXPECT_TRUE(fs::exists(dir / "cmp" / "metrics_flash.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "cmp" / "metrics_fast1.jsonl"));
}

TEST(Runner, CompareSingletonEqualsAlignRun) {
  const fs::path dir = scratch("singleton");
  std::string text = kTinyConfig;
  text.replace(text.find("methods = flash, fast1"), 22, "methods = flash");
  const std::string cfg = write_config(dir, text);
  ASSERT_EQ(cmd_pretrain({cfg, (dir / "pre").string(), {}, {}, {}}), 0);
  const TrainRunConfig c = load_config(cfg);
  const VectorFieldParams start = read_checkpoint((dir / "pre" / "checkpoint.bin").string());
  const AlignOutcome run = run_align(c, start, Method::kFlash, nullptr);
  ASSERT_EQ(cmd_compare({cfg, (dir / "cmp").string(), (dir / "pre" / "checkpoint.bin").string(),
                         {}, {}}),
            0);
  std::ifstream csv(dir / "cmp" / "comparison.csv");
  std::string line;
  std::getline(csv, line);
  for (const MetricsRecord& m : run.metrics) {
    ASSERT_TRUE(std::getline(csv, line));
    std::istringstream row(line);
    std::string iter, wall, method, reward, norm;
    std::getline(row, iter, ',');
    std::getline(row, wall, ',');
    std::getline(row, method, ',');
    std::getline(row, reward, ',');
    std::getline(row, norm, ',');
    EXPECT_EQ(std::stoul(iter), m.iteration);
    EXPECT_EQ(method, "flash");
    EXPECT_EQ(std::stod(reward), m.mean_reward);
    EXPECT_EQ(std::stod(norm), m.grad_norm);
  }
  EXPECT_FALSE(std::getline(csv, line));
}

TEST(Runner, AlignRunsAreDeterministic) {
  const TrainRunConfig c = parse_config(kTinyConfig);
  const VectorFieldParams start = init_params(c.seed, c.arch);
  AlignOutcome a = run_align(c, start, Method::kFlash, nullptr);
  AlignOutcome b = run_align(c, start, Method::kFlash, nullptr);
  ASSERT_TRUE(a.completed);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    a.metrics[i].wall_ms = b.metrics[i].wall_ms = 0.0;
    a.metrics[i].backward_passes_cumulative = b.metrics[i].backward_passes_cumulative = 0;
    EXPECT_EQ(a.metrics[i], b.metrics[i]);
  }
  EXPECT_EQ(a.params, b.params);
}

TEST(Runner, VerifyPassesAndDetectsFault) {
  const fs::path dir = scratch("verify");
  const std::string cfg = write_config(dir, kTinyConfig);
  EXPECT_EQ(cmd_verify({cfg, (dir / "ok").string(), {}, {}, {}}), 0);
  const auto report = nlohmann::json::parse(slurp(dir / "ok" / "verification.json"));
  EXPECT_EQ(report["passed"], true);
  EXPECT_EQ(cmd_verify({cfg, (dir / "fault").string(), {}, {}, 2.0}), 1);
}
