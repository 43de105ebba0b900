#pragma once

// The run configuration file read by the command-line tool. Sections model,
// data, train, objective and eval; every key optional, unknown keys
// rejected. The normalized form (all defaults filled in) is what gets echoed
// into run directories.

#include <cstdint>
#include <filesystem>
#include <string>

#include "vdpo/model/policy.hpp"
#include "vdpo/trainer/trainer.hpp"
#include "vdpo/world/dataset.hpp"

namespace vdpo::cli {

struct DataSection {
  world::WorldConfig world;
  std::uint64_t seed = 0;
  std::size_t count = 500;
  double response_ratio = 0.5;  // share of response-contrast pairs

  void validate() const;
};

struct EvalSection {
  std::size_t discriminative = 200;
  std::size_t generative = 100;
  std::uint64_t seed = 0;
  bool sample = false;  // greedy decoding unless set
  double temperature = 1.0;

  model::DecodeMode decode_mode() const;
  void validate() const;
};

struct RunConfig {
  model::ModelConfig model;
  DataSection data;
  trainer::TrainConfig train;  // objective and guidance come from the objective section
  EvalSection eval;

  // Cross-section checks: the world's vocabulary and images fit the model.
  void validate() const;
};

// Throws ErrorKind::kConfig on malformed JSON, wrong types, unknown keys or
// invalid values.
RunConfig parse_run_config(const std::string& text);
// A missing file is ErrorKind::kIo.
RunConfig load_run_config(const std::filesystem::path& path);
// Normalized JSON; parse_run_config(to_json(c)) == c field for field.
std::string run_config_to_json(const RunConfig& config);

// Accepts "dynamic"/"static" as well as the long names.
objectives::UncondSource parse_uncond_flag(const std::string& s);

}  // namespace vdpo::cli
