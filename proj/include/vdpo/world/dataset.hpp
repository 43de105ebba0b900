#pragma once

// Preference-pair generation on top of the toy world, dataset JSONL files,
// SFT triples and evaluation probes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vdpo/objectives/objectives.hpp"
#include "vdpo/world/world.hpp"

namespace vdpo::world {

using objectives::PreferenceRecord;
using objectives::RecordKind;

struct WorldConfig {
  std::size_t grid_w = 4;
  std::size_t grid_h = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t image_dim = 16;
  std::uint64_t render_seed = 1;
  std::optional<std::filesystem::path> catalog_path;  // built-in catalog when empty

  // Simulated inpainting: per-component Gaussian noise before
  // renormalization, and a chance of painting a different substitute.
  double inpaint_noise = 0.05;
  double inpaint_failure = 0.1;
  std::size_t max_candidates = 6;  // candidate edits scored together per scene
  double gate_threshold = 1.5;
  double describe_fraction = 0.5;  // response-contrast pairs that use captions
  std::size_t max_attempts = 200;

  void validate() const;
};

// Everything needed to turn scenes into tokens and images.
struct WorldContext {
  ObjectCatalog catalog;
  Vocab vocab;
  RenderConfig render;

  static WorldContext make(const WorldConfig& config);
};

enum class QuestionTemplate {
  kIsThereOld,  // "is there <old>?"  yes for the scene, no for the edit
  kIsThereNew,  // "is there <new>?"  no for the scene, yes for the edit
  kWhatAt,      // "what is at <pos>?"  the original object
};
const char* template_name(QuestionTemplate t);

enum class ResponseTask { kIsThere, kDescribe };

TokenSeq is_there_query(const Vocab& vocab, std::size_t category);
TokenSeq describe_query();
TokenSeq what_at_query(const Vocab& vocab, std::size_t position);
TokenSeq yes_response();
TokenSeq no_response();

// v_w = render(scene), v_l = render(edit); the answer is right for v_w only.
// Throws when the template cannot separate the two scenes (for example the
// replaced kind also appears in another cell).
PreferenceRecord build_image_contrast(const Scene& scene, const Replacement& replacement,
                                      QuestionTemplate question, const WorldContext& ctx);
bool template_applies(const Scene& scene, const Replacement& replacement,
                      QuestionTemplate question);

// Category absent from the scene, or nullopt when every kind is present.
std::optional<std::size_t> sample_distractor(const Scene& scene, const ObjectCatalog& catalog,
                                             Rng& rng);

struct ResponseContrastDraft {
  PreferenceRecord record;
  std::size_t distractor = 0;
};

// is-there: y_w = "no", y_l = "yes" about the absent distractor.
// describe: y_w = caption, y_l = caption with one clause's object swapped for
// the distractor.
ResponseContrastDraft build_response_contrast(const Scene& scene, ResponseTask task, Rng& rng,
                                              const WorldContext& ctx);

// Simulated inpainter output for an edit.
RenderedImage inpaint(const Scene& scene, const Replacement& replacement, const WorldContext& ctx,
                      const WorldConfig& config, Rng& rng);

struct ProvenanceReplacement {
  std::size_t position = 0;
  std::string old_name;
  std::string new_name;
  std::string rationale;
  bool operator==(const ProvenanceReplacement&) const = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string scene_digest;
  std::optional<ProvenanceReplacement> replacement;
  std::optional<double> sim_w;
  std::optional<double> sim_l;
  bool operator==(const Provenance&) const = default;
};

struct DatasetRecord {
  PreferenceRecord record;
  Provenance provenance;
};
bool operator==(const DatasetRecord& a, const DatasetRecord& b);

struct GenStats {
  std::size_t image_records = 0;
  std::size_t response_records = 0;
  std::size_t scenes = 0;
  std::size_t candidates = 0;          // candidate edits scored
  std::size_t filter_accepted = 0;
  std::size_t gate_checked = 0;        // pairs with positive scores reaching the gate
  std::size_t gate_passed = 0;
  std::size_t nonpositive = 0;         // rejected before the gate
  std::size_t template_rejected = 0;

  GenStats& operator+=(const GenStats& o);
  double filter_pass_rate() const;
  double gate_pass_rate() const;
};

struct GeneratedDataset {
  std::vector<DatasetRecord> records;  // sorted by provenance seed
  GenStats stats;
};

// round(count * response_ratio) response-contrast pairs, the rest image
// contrast. A pure function of its arguments.
GeneratedDataset generate_dataset(const WorldConfig& config, const WorldContext& ctx,
                                  std::uint64_t seed, std::size_t count, double response_ratio);

// One JSON object per line; reals with 17 significant digits.
std::string record_to_json(const DatasetRecord& r);
DatasetRecord record_from_json(const std::string& line, std::size_t line_no);
void write_jsonl(const std::vector<DatasetRecord>& records, const std::filesystem::path& path);
std::vector<DatasetRecord> read_jsonl(const std::filesystem::path& path);

std::vector<PreferenceRecord> preference_records(const std::vector<DatasetRecord>& records);

struct Triple {
  RenderedImage image;
  TokenSeq query;
  TokenSeq response;
};

// Accurate (winning) side of each pair.
std::vector<Triple> sft_triples(const std::vector<DatasetRecord>& records);

// --- evaluation probes --------------------------------------------------------

struct DiscriminativeItem {
  RenderedImage image;
  TokenSeq query;
  bool gold_yes = false;
  bool operator==(const DiscriminativeItem&) const = default;
};

struct GenerativeItem {
  RenderedImage image;
  TokenSeq query;
  std::vector<TokenId> truth;        // category tokens present in the scene
  std::vector<TokenId> distractors;  // plausible substitutes that are absent
  bool operator==(const GenerativeItem&) const = default;
};

struct EvalItems {
  std::vector<DiscriminativeItem> discriminative;
  std::vector<GenerativeItem> generative;
  bool operator==(const EvalItems&) const = default;
};

// Half of the discriminative probes ask about a present object.
EvalItems make_eval_items(const WorldConfig& config, const WorldContext& ctx, std::uint64_t seed,
                          std::size_t discriminative, std::size_t generative);
void write_eval_items(const EvalItems& items, const std::filesystem::path& path);
EvalItems read_eval_items(const std::filesystem::path& path);

}  // namespace vdpo::world
