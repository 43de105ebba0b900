#include "vdpo/objectives/objectives.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include "vdpo/error.hpp"

namespace vdpo::objectives {

using grad::Bindings;
using grad::Graph;
using grad::Tensor;
using grad::Var;
using model::ParamVars;

const char* variant_name(Variant v) { return v == Variant::kPlain ? "plain" : "normalized"; }

const char* uncond_source_name(UncondSource s) {
  return s == UncondSource::kPolicyDynamic ? "policy-dynamic" : "sft-static";
}

Variant parse_variant(const std::string& s) {
  if (s == "plain") return Variant::kPlain;
  if (s == "normalized") return Variant::kNormalized;
  throw Error(ErrorKind::kConfig, "unknown variant '" + s + "' (plain | normalized)");
}

UncondSource parse_uncond_source(const std::string& s) {
  if (s == "policy-dynamic") return UncondSource::kPolicyDynamic;
  if (s == "sft-static") return UncondSource::kSftStatic;
  throw Error(ErrorKind::kConfig,
              "unknown uncond source '" + s + "' (policy-dynamic | sft-static)");
}

GuidanceConfig GuidanceConfig::from_alpha(double beta, double alpha, Variant variant,
                                          UncondSource source) {
  GuidanceConfig c{beta, alpha, 1.0 - alpha / beta, variant, source};
  c.validate();
  return c;
}

GuidanceConfig GuidanceConfig::from_gamma(double beta, double gamma, Variant variant,
                                          UncondSource source) {
  GuidanceConfig c{beta, beta * (1.0 - gamma), gamma, variant, source};
  c.validate();
  return c;
}

void GuidanceConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw Error(ErrorKind::kConfig, "beta must be a positive finite number");
  }
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorKind::kConfig, "alpha must be non-negative");
  }
  if (!std::isfinite(gamma)) throw Error(ErrorKind::kConfig, "gamma must be finite");
  if (std::abs(gamma - (1.0 - alpha / beta)) > 1e-12) {
    throw Error(ErrorKind::kConfig, "gamma must equal 1 - alpha/beta");
  }
}

const char* record_kind_name(RecordKind k) {
  return k == RecordKind::kResponseContrast ? "response-contrast" : "image-contrast";
}

PreferenceRecord PreferenceRecord::response_contrast(RenderedImage v, TokenSeq x, TokenSeq y_w,
                                                     TokenSeq y_l) {
  PreferenceRecord r;
  r.kind = RecordKind::kResponseContrast;
  r.image_w = v;
  r.image_l = std::move(v);
  r.query = std::move(x);
  r.response_w = std::move(y_w);
  r.response_l = std::move(y_l);
  return r;
}

PreferenceRecord PreferenceRecord::image_contrast(RenderedImage v_w, RenderedImage v_l,
                                                  TokenSeq x, TokenSeq y) {
  PreferenceRecord r;
  r.kind = RecordKind::kImageContrast;
  r.image_w = std::move(v_w);
  r.image_l = std::move(v_l);
  r.query = std::move(x);
  r.response_w = y;
  r.response_l = std::move(y);
  return r;
}

PreferenceRecord PreferenceRecord::swapped() const {
  PreferenceRecord r = *this;
  std::swap(r.image_w, r.image_l);
  std::swap(r.response_w, r.response_l);
  return r;
}

void PreferenceRecord::validate(const model::ModelConfig& config) const {
  model::validate_image(config, image_w);
  model::validate_image(config, image_l);
  model::validate_query(config, query);
  model::validate_response(config, response_w);
  model::validate_response(config, response_l);
  if (kind == RecordKind::kResponseContrast && !(image_w == image_l)) {
    throw invalid_argument("response-contrast record must use a single image");
  }
  if (kind == RecordKind::kImageContrast && response_w != response_l) {
    throw invalid_argument("image-contrast record must use a single response");
  }
}

bool PreferenceRecord::degenerate() const {
  return kind == RecordKind::kResponseContrast ? response_w == response_l : image_w == image_l;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double x) {
  // -ln sigma(x) = ln(1 + e^-x)
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

namespace {

void check_same_config(const PolicyParams& a, const PolicyParams& b, const char* what) {
  if (!a.config().same_shape(b.config())) {
    throw Error(ErrorKind::kConfig, std::string("policy and ") + what +
                                        " have different model configs");
  }
}

double cond_lp(const PolicyParams& p, const RenderedImage& v, const TokenSeq& x,
               const TokenSeq& y) {
  return model::seq_logprob(p, v, x, y).total;
}

double uncond_lp(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y) {
  return model::uncond_seq_logprob(p, x, y).total;
}

enum class Mode { kDpo, kPlain, kNormalized };

struct Branch {
  Var f;
  Var cond;    // plain conditioned log-prob of the policy
  Var uncond;  // invalid for DPO
  Var guided;  // normalized variant only
  double ref = 0.0;
};

struct LossGraph {
  const PolicyParams& policy;
  const PolicyParams& ref;
  const PolicyParams* uncond_params;  // sft params under sft-static, else null
  Mode mode;
  double gamma;
  Graph g;
  Bindings bindings;
  ParamVars pv;
  ParamVars uv;  // params feeding the unconditioned path

  LossGraph(const PolicyParams& policy, const PolicyParams& ref, const PolicyParams* uncond_params,
            Mode mode, double gamma)
      : policy(policy), ref(ref), uncond_params(uncond_params), mode(mode), gamma(gamma) {
    pv = model::bind_params(g, bindings, policy, "", true);
    uv = uncond_params ? model::bind_params(g, bindings, *uncond_params, "sft.", false) : pv;
  }

  Var total_of(Var log_probs, const TokenSeq& y) {
    return model::pick_response(g, log_probs, y).total;
  }

  Branch branch(const RenderedImage& v, const TokenSeq& x, const TokenSeq& y) {
    const auto& cfg = policy.config();
    Branch b;
    b.ref = cond_lp(ref, v, x, y);
    Var h = model::response_logits(g, pv, cfg, v, x, y);
    if (mode != Mode::kNormalized) b.cond = total_of(g.log_softmax(h), y);
    if (mode == Mode::kDpo) {
      b.f = g.sub(b.cond, g.constant(Tensor::scalar(b.ref)));
      return b;
    }
    const auto zero = RenderedImage::zeros(cfg.image_dim);
    Var h0 = model::response_logits(g, uv, cfg, zero, x, y);
    if (mode == Mode::kPlain) {
      b.uncond = total_of(g.log_softmax(h0), y);
      Var logphi = g.detach(g.scale(g.sub(b.cond, b.uncond), gamma - 1.0));
      b.f = g.sub(g.add(b.cond, logphi), g.constant(Tensor::scalar(b.ref)));
    } else {
      Var corr = g.scale(g.sub(g.detach(h), g.detach(h0)), gamma - 1.0);
      b.guided = total_of(g.log_softmax(g.add(h, corr)), y);
      b.f = g.sub(b.guided, g.constant(Tensor::scalar(b.ref)));
    }
    return b;
  }

  LossOutput run(const PreferenceRecord& record, double beta, bool with_grad) {
    Branch w = branch(record.image_w, record.query, record.response_w);
    Branch l = branch(record.image_l, record.query, record.response_l);
    Var u = g.sub(w.f, l.f);
    Var loss = g.scale(g.log_sigmoid(g.scale(u, beta)), -1.0);
    g.forward(loss, bindings);

    LossOutput out;
    out.loss = g.value(loss).item();
    out.u = g.value(u).item();
    out.f_w = g.value(w.f).item();
    out.f_l = g.value(l.f).item();
    auto& d = out.diagnostics;
    d["ref_cond_w"] = w.ref;
    d["ref_cond_l"] = l.ref;
    if (mode == Mode::kNormalized) {
      // The plain log-probs are not part of this graph; evaluate them directly.
      const PolicyParams& up = uncond_params ? *uncond_params : policy;
      d["policy_cond_w"] = cond_lp(policy, record.image_w, record.query, record.response_w);
      d["policy_cond_l"] = cond_lp(policy, record.image_l, record.query, record.response_l);
      d["uncond_w"] = uncond_lp(up, record.query, record.response_w);
      d["uncond_l"] = uncond_lp(up, record.query, record.response_l);
      d["policy_guided_w"] = g.value(w.guided).item();
      d["policy_guided_l"] = g.value(l.guided).item();
    } else {
      d["policy_cond_w"] = g.value(w.cond).item();
      d["policy_cond_l"] = g.value(l.cond).item();
    }
    if (mode == Mode::kPlain) {
      d["uncond_w"] = g.value(w.uncond).item();
      d["uncond_l"] = g.value(l.uncond).item();
      d["logphi_w"] = (gamma - 1.0) * (d["policy_cond_w"] - d["uncond_w"]);
      d["logphi_l"] = (gamma - 1.0) * (d["policy_cond_l"] - d["uncond_l"]);
    }
    if (with_grad) {
      g.backward(loss);
      PolicyParams gp = PolicyParams::zeros(policy.config());
      for (std::size_t i = 0; i < model::kParamCount; ++i) gp.tensors()[i] = g.grad(pv.vars[i]);
      out.grad = std::move(gp);
    }
    return out;
  }
};

const PolicyParams* uncond_params_for(const GuidanceConfig& config, const PolicyParams& policy,
                                      const PolicyParams* sft) {
  if (config.uncond_source == UncondSource::kPolicyDynamic) return nullptr;
  if (!sft) throw Error(ErrorKind::kConfig, "sft-static guidance needs the SFT parameters");
  check_same_config(policy, *sft, "SFT model");
  return sft;
}

void check_record(const PolicyParams& policy, const PolicyParams& ref,
                  const PreferenceRecord& record) {
  check_same_config(policy, ref, "reference");
  record.validate(policy.config());
}

}  // namespace

double dpo_margin(const PolicyParams& policy, const PolicyParams& ref,
                  const PreferenceRecord& record) {
  check_record(policy, ref, record);
  const auto& x = record.query;
  const double w = cond_lp(policy, record.image_w, x, record.response_w) -
                   cond_lp(ref, record.image_w, x, record.response_w);
  const double l = cond_lp(policy, record.image_l, x, record.response_l) -
                   cond_lp(ref, record.image_l, x, record.response_l);
  return w - l;
}

LossOutput dpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                    const PreferenceRecord& record, double beta, bool with_grad) {
  if (!(beta > 0.0)) throw Error(ErrorKind::kConfig, "beta must be positive");
  check_record(policy, ref, record);
  LossGraph lg(policy, ref, nullptr, Mode::kDpo, 1.0);
  return lg.run(record, beta, with_grad);
}

double guidance_logphi(const PolicyParams& policy, const RenderedImage& v, const TokenSeq& x,
                       const TokenSeq& y, double gamma, const PolicyParams* uncond) {
  if (!std::isfinite(gamma)) throw invalid_argument("gamma must be finite");
  const PolicyParams& up = uncond ? *uncond : policy;
  if (uncond) check_same_config(policy, *uncond, "SFT model");
  return (gamma - 1.0) * (cond_lp(policy, v, x, y) - uncond_lp(up, x, y));
}

double vdpo_margin(const PolicyParams& policy, const PolicyParams& ref,
                   const PreferenceRecord& record, const GuidanceConfig& config,
                   const PolicyParams* sft) {
  config.validate();
  check_record(policy, ref, record);
  const PolicyParams* up = uncond_params_for(config, policy, sft);
  const auto& x = record.query;
  auto f = [&](const RenderedImage& v, const TokenSeq& y) {
    const double lp = cond_lp(policy, v, x, y);
    const double lpu = uncond_lp(up ? *up : policy, x, y);
    const double logphi = (config.gamma - 1.0) * (lp - lpu);
    return (lp + logphi) - cond_lp(ref, v, x, y);
  };
  return f(record.image_w, record.response_w) - f(record.image_l, record.response_l);
}

LossOutput vdpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                     const PreferenceRecord& record, const GuidanceConfig& config,
                     const PolicyParams* sft, bool with_grad) {
  if (config.variant == Variant::kNormalized) {
    return normalized_vdpo_loss(policy, ref, record, config, sft, with_grad);
  }
  config.validate();
  check_record(policy, ref, record);
  LossGraph lg(policy, ref, uncond_params_for(config, policy, sft), Mode::kPlain, config.gamma);
  return lg.run(record, config.beta, with_grad);
}

Tensor normalized_guided_step(const Tensor& h_vx, const Tensor& h_hat_vx, const Tensor& h_hat_0x,
                              double gamma) {
  if (h_vx.rank() != 1 || h_hat_vx.shape() != h_vx.shape() || h_hat_0x.shape() != h_vx.shape()) {
    throw Error(ErrorKind::kShape, "normalized_guided_step: logit vectors must share length V");
  }
  if (!std::isfinite(gamma)) throw invalid_argument("gamma must be finite");
  Graph g;
  Var corr = g.scale(g.sub(g.constant(h_hat_vx), g.constant(h_hat_0x)), gamma - 1.0);
  Var out = g.log_softmax(g.add(g.constant(h_vx), corr));
  return g.forward(out, {});
}

LossOutput normalized_vdpo_loss(const PolicyParams& policy, const PolicyParams& ref,
                                const PreferenceRecord& record, const GuidanceConfig& config,
                                const PolicyParams* sft, bool with_grad) {
  config.validate();
  if (config.variant != Variant::kNormalized) {
    throw Error(ErrorKind::kConfig, "normalized_vdpo_loss needs the normalized variant");
  }
  check_record(policy, ref, record);
  LossGraph lg(policy, ref, uncond_params_for(config, policy, sft), Mode::kNormalized,
               config.gamma);
  return lg.run(record, config.beta, with_grad);
}

LossOutput sft_loss(const PolicyParams& policy, const RenderedImage& v, const TokenSeq& x,
                    const TokenSeq& y, bool with_grad) {
  LossOutput out;
  if (with_grad) {
    auto r = model::seq_logprob_with_grad(policy, v, x, y);
    out.loss = -r.logprob.total;
    for (auto& t : r.grad.tensors()) {
      for (auto& e : t.values()) e = -e;
    }
    out.grad = std::move(r.grad);
  } else {
    out.loss = -cond_lp(policy, v, x, y);
  }
  out.diagnostics["policy_cond_w"] = -out.loss;
  return out;
}

RatioStats proposition1_ratio(const PolicyParams& policy,
                              std::span<const PreferenceRecord> records) {
  if (records.empty()) throw invalid_argument("proposition1_ratio: empty dataset");
  RatioStats s;
  double sum = 0.0;
  for (const auto& r : records) {
    const double ratio = std::exp(uncond_lp(policy, r.query, r.response_w) -
                                  cond_lp(policy, r.image_w, r.query, r.response_w));
    s.max = std::max(s.max, ratio);
    sum += ratio;
  }
  s.mean = sum / static_cast<double>(records.size());
  return s;
}

// --- tabular ----------------------------------------------------------------

namespace {

void check_distribution(std::span<const double> p, const char* what, std::size_t n) {
  if (p.size() != n) throw invalid_argument(std::string(what) + ": length mismatch");
  double s = 0.0;
  for (double x : p) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw Error(ErrorKind::kNumeric, std::string(what) + ": entries must be positive");
    }
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw invalid_argument(std::string(what) + " must sum to 1");
}

void check_tabular(std::span<const double> uncond, std::span<const double> ref,
                   std::span<const double> reward, double beta, double alpha) {
  if (ref.empty()) throw invalid_argument("tabular world needs at least one outcome");
  check_distribution(uncond, "uncond", ref.size());
  check_distribution(ref, "ref", ref.size());
  if (reward.size() != ref.size()) throw invalid_argument("reward: length mismatch");
  if (!(beta > 0.0)) throw invalid_argument("beta must be positive");
  if (!(alpha >= 0.0)) throw invalid_argument("alpha must be non-negative");
}

}  // namespace

double objective_J(std::span<const double> p, std::span<const double> uncond,
                   std::span<const double> ref, std::span<const double> reward, double beta,
                   double alpha) {
  check_tabular(uncond, ref, reward, beta, alpha);
  check_distribution(p, "policy", ref.size());
  double j = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    j += p[i] * (reward[i] - beta * std::log(p[i] / ref[i]) + alpha * std::log(p[i] / uncond[i]));
  }
  return j;
}

std::vector<double> tabular_maximizer(std::span<const double> uncond, std::span<const double> ref,
                                      std::span<const double> reward, double beta, double alpha) {
  check_tabular(uncond, ref, reward, beta, alpha);
  if (!(beta > alpha)) throw invalid_argument("closed-form maximizer needs beta > alpha");
  std::vector<double> logits(ref.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    logits[i] = (reward[i] + beta * std::log(ref[i]) - alpha * std::log(uncond[i])) /
                (beta - alpha);
    m = std::max(m, logits[i]);
  }
  double s = 0.0;
  for (auto& l : logits) s += (l = std::exp(l - m));
  for (auto& l : logits) l /= s;
  return logits;
}

namespace {

double log_sigmoid(double s) { return s > 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s)); }

// Root of a decreasing function by bisection, clamped to [lo, hi].
double bisect_decreasing(const std::function<double(double)>& h, double lo, double hi) {
  if (h(lo) <= 0.0) return lo;
  if (h(hi) >= 0.0) return hi;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (h(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<double> numeric_maximizer(std::span<const double> uncond, std::span<const double> ref,
                                      std::span<const double> reward, double beta, double alpha) {
  check_tabular(uncond, ref, reward, beta, alpha);
  // dJ/dp_y up to a shared constant, as a function of ln p_y. Working in
  // logs keeps optima near a vertex resolvable, where J itself is too flat
  // to compare in double precision.
  const auto slope = [&](std::size_t y, double log_p) {
    return reward[y] - beta * (log_p - std::log(ref[y])) + alpha * (log_p - std::log(uncond[y]));
  };
  // Log-odds bound; keeps every probability above 1e-261.
  constexpr double kRange = 300.0;
  if (ref.size() == 2) {
    // J is concave on the segment, so slope_0 - slope_1 falls as p_0 grows.
    const double s = bisect_decreasing(
        [&](double s) { return slope(0, log_sigmoid(s)) - slope(1, log_sigmoid(-s)); }, -kRange,
        kRange);
    return {std::exp(log_sigmoid(s)), std::exp(log_sigmoid(-s))};
  }
  if (ref.size() != 3) throw invalid_argument("numeric maximizer handles 2 or 3 outcomes");
  // p_0 = sigmoid(a); the rest splits as sigmoid(+-b). For fixed a the best
  // split equalizes slopes 1 and 2; the outer condition then compares
  // slope 0 with the rest, which is the derivative of the inner maximum.
  const auto inner = [&](double log_rest) {
    return bisect_decreasing(
        [&](double b) {
          return slope(1, log_rest + log_sigmoid(b)) - slope(2, log_rest + log_sigmoid(-b));
        },
        -kRange, kRange);
  };
  const auto rest_slope = [&](double log_rest) {
    const double b = inner(log_rest);
    const double q = std::exp(log_sigmoid(b));
    return q * slope(1, log_rest + log_sigmoid(b)) + (1.0 - q) * slope(2, log_rest + log_sigmoid(-b));
  };
  const double a = bisect_decreasing(
      [&](double a) { return slope(0, log_sigmoid(a)) - rest_slope(log_sigmoid(-a)); }, -kRange,
      kRange);
  const double log_rest = log_sigmoid(-a);
  const double b = inner(log_rest);
  return {std::exp(log_sigmoid(a)), std::exp(log_rest + log_sigmoid(b)),
          std::exp(log_rest + log_sigmoid(-b))};
}

double fixed_point_residual(std::span<const double> p, std::span<const double> uncond,
                            std::span<const double> ref, std::span<const double> reward,
                            double beta, double alpha) {
  check_tabular(uncond, ref, reward, beta, alpha);
  check_distribution(p, "policy", ref.size());
  const double g = 1.0 - alpha / beta;
  const std::size_t n = p.size();
  std::vector<double> lhs(n), rhs(n);
  double w = 0.0, z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lhs[i] = std::exp(g * std::log(p[i]) - (g - 1.0) * std::log(uncond[i]));
    rhs[i] = ref[i] * std::exp(reward[i] / beta);
    w += lhs[i];
    z += rhs[i];
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(lhs[i] / w - rhs[i] / z));
  return worst;
}

}  // namespace vdpo::objectives
