#pragma once

// SFT and preference training loops over the toy policy: Adam with bias
// correction, seeded per-epoch shuffling, per-record gradients evaluated in
// parallel and reduced in a fixed order, and resumable checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vdpo/model/policy.hpp"
#include "vdpo/objectives/objectives.hpp"
#include "vdpo/world/dataset.hpp"

namespace vdpo::trainer {

using model::PolicyParams;
using objectives::PreferenceRecord;

enum class Objective { kDpo, kVdpo };
const char* objective_name(Objective o);
Objective parse_objective(const std::string& s);

struct TrainConfig {
  double learning_rate = 5e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 4;
  std::uint64_t seed = 0;
  Objective objective = Objective::kVdpo;
  objectives::GuidanceConfig guidance;  // beta is shared with plain DPO
  std::size_t checkpoint_interval = 0;  // steps between checkpoints, 0 = end only
  std::size_t eval_interval = 0;        // steps between eval hooks, 0 = never
  double max_grad_norm = 0.0;           // clip threshold, 0 = no clipping
  bool monitor_ratio = true;            // log the winner-branch ratio each step

  void validate() const;
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  PolicyParams m;
  PolicyParams v;
  std::uint64_t step = 0;

  static AdamState zeros(const model::ModelConfig& config);
  // One bias-corrected update of `params` against `grad`.
  void apply(PolicyParams& params, const PolicyParams& grad, double learning_rate);

  bool operator==(const AdamState&) const = default;
};

struct StepRecord {
  std::uint64_t step = 0;  // 1-based optimizer step
  std::uint64_t epoch = 0;
  double loss = 0.0;       // batch mean
  double margin = 0.0;     // batch mean of u; 0 for SFT
  double grad_norm = 0.0;  // L2 norm of the batch gradient before clipping
  double ratio_max = 0.0;  // max exp(uncond - cond) over the batch winners

  bool operator==(const StepRecord&) const = default;
};

struct EvalRecord {
  std::uint64_t step = 0;
  std::map<std::string, double> metrics;
  bool operator==(const EvalRecord&) const = default;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // Monotone step indices and finite entries; throws ErrorKind::kState.
  void validate() const;
  // Mean batch loss over the steps of one epoch.
  double epoch_mean_loss(std::uint64_t epoch) const;
  // step,loss,margin,gradnorm,prop1max
  std::string to_csv() const;
  std::string summary_json() const;

  bool operator==(const TrainLog&) const = default;
};

// What a checkpoint was trained on. Resuming requires an exact match.
struct RunIdentity {
  std::string kind;           // "sft" or "preference"
  std::string data_digest;    // hex SHA-256 over the training records
  std::string config_digest;  // hex SHA-256 over the optimizer-relevant config
  std::string ref_digest;     // frozen reference, preference runs only
  std::string sft_digest;     // frozen SFT policy, static uncond source only

  bool operator==(const RunIdentity&) const = default;
};

struct TrainerState {
  PolicyParams params;
  AdamState optimizer;
  TrainLog log;
  RunIdentity identity;
};

// Per-record loss with gradient at the given parameters.
using RecordLoss = std::function<objectives::LossOutput(const PolicyParams&, std::size_t)>;
// Max winner-branch ratio over the given records.
using RatioProbe = std::function<double(const PolicyParams&, std::span<const std::size_t>)>;
using EvalHook = std::function<std::map<std::string, double>(const PolicyParams&)>;
using CheckpointHook = std::function<void(const TrainerState&)>;

class Trainer {
 public:
  Trainer(TrainConfig config, PolicyParams init, std::size_t records, RecordLoss loss,
          RatioProbe probe, RunIdentity identity, std::function<void()> invariant_check = {});

  const TrainConfig& config() const { return config_; }
  std::uint64_t step() const { return state_.optimizer.step; }
  std::uint64_t steps_per_epoch() const;
  std::uint64_t total_steps() const { return steps_per_epoch() * config_.epochs; }
  bool done() const { return step() >= total_steps(); }

  // Record indices of the batch taken at 0-based step `s`.
  std::vector<std::size_t> batch_indices(std::uint64_t s) const;

  // One optimizer step. Throws ErrorKind::kNumeric on a non-finite gradient.
  const StepRecord& advance();
  // Steps until `until` (or the end), calling the hooks at their intervals
  // and the checkpoint hook once more at the end.
  void run(std::uint64_t until = std::numeric_limits<std::uint64_t>::max(),
           const EvalHook& eval = {}, const CheckpointHook& checkpoint = {});

  const TrainerState& state() const { return state_; }
  const PolicyParams& params() const { return state_.params; }
  const TrainLog& log() const { return state_.log; }

  // Continues from a saved state. Throws ErrorKind::kState when the state
  // belongs to a different run.
  void restore(TrainerState state);

 private:
  TrainConfig config_;
  std::size_t records_;
  RecordLoss loss_;
  RatioProbe probe_;
  std::function<void()> invariant_check_;
  TrainerState state_;
};

std::string digest_records(std::span<const PreferenceRecord> records);
std::string digest_triples(std::span<const world::Triple> triples);

Trainer make_sft_trainer(const TrainConfig& config, std::vector<world::Triple> data,
                         PolicyParams init);
// The reference is frozen from `init`, which is also the starting point.
// `sft` is required when the config asks for the static uncond source.
Trainer make_pref_trainer(const TrainConfig& config, std::vector<PreferenceRecord> records,
                          const PolicyParams& init, std::optional<PolicyParams> sft = std::nullopt);

struct SftResult {
  PolicyParams params;
  model::FrozenPolicy sft;  // tagged "sft"
  TrainLog log;
};
SftResult sft_fit(const TrainConfig& config, std::vector<world::Triple> data,
                  const PolicyParams& init);

struct PrefResult {
  PolicyParams params;
  TrainLog log;
  std::string ref_digest;
};
PrefResult pref_fit(const TrainConfig& config, std::vector<PreferenceRecord> records,
                    const PolicyParams& init, std::optional<PolicyParams> sft = std::nullopt);

// Params, then optimizer state, log and run identity in the trainer section.
void save_checkpoint(const std::filesystem::path& path, const TrainerState& state);
// Throws ErrorKind::kDigest on corruption and ErrorKind::kState when the
// file holds parameters only.
TrainerState load_checkpoint(const std::filesystem::path& path);

}  // namespace vdpo::trainer
