#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "est/model.hpp"
#include "est/pipeline.hpp"
#include "est/training.hpp"

namespace est {

// Everything a run needs, read from a flat key=value file. `n`, `J` and
// `seed` feed both the model and the pipeline / trainer.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PipelineConfig pipeline;

  std::string train_data;
  std::string test_data;
  std::string out_dir = "run";

  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 0;
  std::uint64_t permutation_seed = 0;

  double gradcheck_step = 1e-4;
  double gradcheck_tolerance = 1e-3;

  // Propagates shared keys and validates every section. Throws ConfigError.
  void finalize();
};

// UTF-8 text, one key=value per line, '#' starts a comment. Unknown keys,
// repeated keys and malformed values throw ConfigError naming the line.
RunConfig parse_run_config(std::string_view text, const std::string& origin = "<config>");
// Throws ConfigError naming the path when the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);
// Applies one "key=value" override on top of a parsed config.
void apply_override(RunConfig& config, std::string_view assignment);
// Every key with its resolved value, in a form parse_run_config accepts.
std::string render_run_config(const RunConfig& config);
std::vector<std::string> run_config_keys();

}  // namespace est
