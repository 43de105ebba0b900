#pragma once

// Hallucination metrics on the toy world: yes/no probes, caption object
// mentions, the AMBER score and log-likelihood gap analysis.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vdpo/model/policy.hpp"
#include "vdpo/objectives/objectives.hpp"
#include "vdpo/world/dataset.hpp"

namespace vdpo::eval {

using model::PolicyParams;
using objectives::PreferenceRecord;
using objectives::RecordKind;

// --- discriminative -------------------------------------------------------------

struct DiscrMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0;  // 0 when nothing is predicted "yes"
  double recall = 0.0;     // 0 when no gold "yes"
  double f1 = 0.0;         // in [0, 1]; 0 when precision + recall == 0
  double yes_ratio = 0.0;

  bool operator==(const DiscrMetrics&) const = default;
};

DiscrMetrics discr_metrics(const std::vector<bool>& predicted_yes, const std::vector<bool>& gold_yes);
// "yes" iff log p(yes EOS) > log p(no EOS); ties answer "no".
bool predicts_yes(const PolicyParams& policy, const model::RenderedImage& image,
                  const model::TokenSeq& query);
DiscrMetrics discr_eval(const PolicyParams& policy,
                        const std::vector<world::DiscriminativeItem>& items);

// --- generative -----------------------------------------------------------------

struct MentionTally {
  std::size_t mentions = 0;        // category tokens in the response, with repeats
  std::size_t hallucinated = 0;    // mentions outside the truth set
  std::size_t cognitive = 0;       // hallucinated mentions from the distractor set
  std::size_t truth_covered = 0;   // distinct truth objects mentioned
  std::size_t truth_total = 0;

  bool operator==(const MentionTally&) const = default;
};

MentionTally tally_mentions(const model::TokenSeq& response, const world::GenerativeItem& item,
                            const world::Vocab& vocab);

// Percentages in [0, 100].
struct GenMetrics {
  double chair = 0.0;
  double cover = 0.0;
  double hal = 0.0;
  double cog = 0.0;
  std::size_t responses = 0;
  std::size_t mentions = 0;

  bool operator==(const GenMetrics&) const = default;
};

GenMetrics gen_metrics(const std::vector<MentionTally>& tallies);
GenMetrics gen_eval(const PolicyParams& policy, const std::vector<world::GenerativeItem>& items,
                    const world::Vocab& vocab, const model::DecodeMode& mode);

// (100 - chair + f1) / 2 with both inputs on a 0..100 scale.
double amber_score(double chair, double f1_percent);

// --- gaps -------------------------------------------------------------------------

// 40 bins of width 1 over [-20, 20) plus an underflow and an overflow bin.
struct Histogram {
  static constexpr double kLo = -20.0;
  static constexpr double kHi = 20.0;
  static constexpr std::size_t kBins = 40;

  std::array<std::size_t, kBins> counts{};
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  void add(double x);
  std::size_t total() const;
  static double edge(std::size_t i);  // i in [0, kBins]

  bool operator==(const Histogram&) const = default;
};

struct GapRecord {
  RecordKind kind = RecordKind::kResponseContrast;
  double delta_cond = 0.0;    // log p(preferred) - log p(dispreferred), conditioned
  double delta_uncond = 0.0;  // same under the zero image
  bool operator==(const GapRecord&) const = default;
};

// Preferred/dispreferred follow the record's orientation. Image contrast
// compares (v_w, x, y) with (v_l, x, y); its unconditioned gap is zero.
GapRecord gap_of(const PolicyParams& policy, const PreferenceRecord& record);

struct GapStats {
  std::size_t count = 0;
  double mean_cond = 0.0;
  double mean_uncond = 0.0;
  Histogram hist_cond;
  Histogram hist_uncond;
  // mean(policy) - mean(baseline); only with a baseline.
  std::optional<double> shift_cond;
  std::optional<double> shift_uncond;

  bool operator==(const GapStats&) const = default;
};

struct GapReport {
  std::vector<GapRecord> records;
  GapStats all;
  GapStats image;
  GapStats response;

  bool operator==(const GapReport&) const = default;
};

GapReport gap_analysis(const PolicyParams& policy, const std::vector<PreferenceRecord>& records,
                       const PolicyParams* baseline = nullptr);

// --- report -----------------------------------------------------------------------

struct EvalReport {
  std::optional<DiscrMetrics> discriminative;
  std::optional<GenMetrics> generative;
  std::optional<double> amber;  // needs both of the above
  std::optional<GapReport> gaps;

  bool operator==(const EvalReport&) const = default;
};

// Fills in the AMBER score when both metric groups are present.
EvalReport make_report(std::optional<DiscrMetrics> discr, std::optional<GenMetrics> gen,
                       std::optional<GapReport> gaps);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

// report.json, metrics.csv, gaps.csv, histograms.csv and one SVG per
// histogram that has data. Throws ErrorKind::kIo when the directory cannot
// be written.
std::vector<std::filesystem::path> emit_report(const EvalReport& report,
                                               const std::filesystem::path& dir);

std::string histogram_svg(const Histogram& h, const std::string& title);

}  // namespace vdpo::eval
