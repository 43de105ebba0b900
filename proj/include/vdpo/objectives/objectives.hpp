#pragma once

// Preference losses: DPO, V-DPO with a stop-gradient vision-guidance term,
// its logit-space normalized variant, and a plain SFT likelihood loss.
//
// All log-probabilities are summed over response tokens.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vdpo/model/policy.hpp"

namespace vdpo::objectives {

using model::PolicyParams;
using model::RenderedImage;
using model::TokenSeq;

enum class Variant { kPlain, kNormalized };
enum class UncondSource { kPolicyDynamic, kSftStatic };

const char* variant_name(Variant v);
const char* uncond_source_name(UncondSource s);
Variant parse_variant(const std::string& s);
UncondSource parse_uncond_source(const std::string& s);

struct GuidanceConfig {
  double beta = 0.1;
  double alpha = 0.025;
  double gamma = 0.75;
  Variant variant = Variant::kPlain;
  UncondSource uncond_source = UncondSource::kPolicyDynamic;

  // gamma derived from (beta, alpha).
  static GuidanceConfig from_alpha(double beta, double alpha, Variant variant = Variant::kPlain,
                                   UncondSource source = UncondSource::kPolicyDynamic);
  // alpha derived from (beta, gamma).
  static GuidanceConfig from_gamma(double beta, double gamma, Variant variant = Variant::kPlain,
                                   UncondSource source = UncondSource::kPolicyDynamic);

  void validate() const;
};

enum class RecordKind { kResponseContrast, kImageContrast };
const char* record_kind_name(RecordKind k);

// Response contrast uses (image, query, response_w, response_l).
// Image contrast uses (image_w, image_l, query, response).
struct PreferenceRecord {
  RecordKind kind = RecordKind::kResponseContrast;
  RenderedImage image_w;
  RenderedImage image_l;  // equal to image_w for response contrast
  TokenSeq query;
  TokenSeq response_w;
  TokenSeq response_l;  // equal to response_w for image contrast

  static PreferenceRecord response_contrast(RenderedImage v, TokenSeq x, TokenSeq y_w,
                                            TokenSeq y_l);
  static PreferenceRecord image_contrast(RenderedImage v_w, RenderedImage v_l, TokenSeq x,
                                         TokenSeq y);

  // Winner and loser exchanged.
  PreferenceRecord swapped() const;
  // Structural checks against a model config. Degenerate pairs pass.
  void validate(const model::ModelConfig& config) const;
  bool degenerate() const;
};

struct LossOutput {
  double loss = 0.0;
  double u = 0.0;
  double f_w = 0.0;
  double f_l = 0.0;
  // Keys: policy_cond_{w,l}, ref_cond_{w,l}, and for V-DPO also
  // uncond_{w,l} and logphi_{w,l}.
  std::map<std::string, double> diagnostics;
  std::optional<PolicyParams> grad;
};

// -ln sigma(x), stable for both signs.
double neg_log_sigmoid(double x);
double sigmoid(double x);

double dpo_margin(const PolicyParams& policy, const PolicyParams& ref,
                  const PreferenceRecord& record);
LossOutput dpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                    const PreferenceRecord& record, double beta, bool with_grad = true);

// (gamma - 1) * [log pi(y|v,x) - log pi_u(y|x)], a plain number. pi_u is the
// policy itself unless `uncond` is given.
double guidance_logphi(const PolicyParams& policy, const RenderedImage& v, const TokenSeq& x,
                       const TokenSeq& y, double gamma, const PolicyParams* uncond = nullptr);

// `sft` is required when config.uncond_source is kSftStatic.
double vdpo_margin(const PolicyParams& policy, const PolicyParams& ref,
                   const PreferenceRecord& record, const GuidanceConfig& config,
                   const PolicyParams* sft = nullptr);
// Dispatches on config.variant.
LossOutput vdpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                     const PreferenceRecord& record, const GuidanceConfig& config,
                     const PolicyParams* sft = nullptr, bool with_grad = true);

// log_softmax(h_vx + (gamma - 1) * (h_hat_vx - h_hat_0x)) on plain vectors.
grad::Tensor normalized_guided_step(const grad::Tensor& h_vx, const grad::Tensor& h_hat_vx,
                                    const grad::Tensor& h_hat_0x, double gamma);

LossOutput normalized_vdpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                                const PreferenceRecord& record, const GuidanceConfig& config,
                                const PolicyParams* sft = nullptr, bool with_grad = true);

// Negative conditioned log-likelihood of (v, x, y).
LossOutput sft_loss(const PolicyParams& policy, const RenderedImage& v, const TokenSeq& x,
                    const TokenSeq& y, bool with_grad = true);

// Winner branch of a record: (v_w, x, y_w).
struct RatioStats {
  double max = 0.0;
  double mean = 0.0;
};
RatioStats proposition1_ratio(const PolicyParams& policy,
                              std::span<const PreferenceRecord> records);

// --- tabular world ----------------------------------------------------------

// J = sum_y p [ r - beta ln(p/ref) + alpha ln(p/uncond) ].
double objective_J(std::span<const double> p, std::span<const double> uncond,
                   std::span<const double> ref, std::span<const double> reward, double beta,
                   double alpha);

// Closed-form maximizer of J for beta > alpha:
// p ∝ exp((r + beta ln ref - alpha ln uncond) / (beta - alpha)).
std::vector<double> tabular_maximizer(std::span<const double> uncond,
                                      std::span<const double> ref,
                                      std::span<const double> reward, double beta, double alpha);

// Numerical maximizer of objective_J over the 2- or 3-outcome simplex:
// bisection on its first-order condition in log-odds coordinates, nested for
// three outcomes. Knows nothing of the closed form, so it can serve as an
// independent oracle.
std::vector<double> numeric_maximizer(std::span<const double> uncond,
                                      std::span<const double> ref,
                                      std::span<const double> reward, double beta, double alpha);

// max_y | p^g/uncond^(g-1) / W - ref e^(r/beta) / Z | with g = 1 - alpha/beta
// and W, Z the normalizers of the two sides.
double fixed_point_residual(std::span<const double> p, std::span<const double> uncond,
                            std::span<const double> ref, std::span<const double> reward,
                            double beta, double alpha);

}  // namespace vdpo::objectives
