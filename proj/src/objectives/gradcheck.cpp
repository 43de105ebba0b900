#include "vdpo/objectives/gradcheck.hpp"

#include "vdpo/rng.hpp"

namespace vdpo::objectives {

using model::PolicyParams;
using model::RenderedImage;
using model::TokenSeq;

namespace {

constexpr double kBeta = 0.1;
constexpr double kGamma = 0.75;
constexpr std::size_t kDirections = 8;

model::ModelConfig small_config(std::uint64_t seed) {
  model::ModelConfig c;
  c.vocab_size = 8;
  c.image_dim = 4;
  c.embed_dim = 3;
  c.hidden_dim = 5;
  c.max_query_len = 4;
  c.max_response_len = 5;
  c.seed = seed;
  return c;
}

RenderedImage random_image(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return RenderedImage::normalized(std::move(v));
}

TokenSeq random_tokens(Rng& rng, const model::ModelConfig& c, std::size_t max_len, bool eos) {
  const std::size_t len = 1 + rng.below(eos ? max_len - 1 : max_len);
  TokenSeq s;
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(model::kReservedTokens + rng.below(c.vocab_size - model::kReservedTokens));
  }
  if (eos) s.push_back(model::kEos);
  return s;
}

PreferenceRecord random_record(Rng& rng, const model::ModelConfig& c, RecordKind kind) {
  auto x = random_tokens(rng, c, c.max_query_len, false);
  if (kind == RecordKind::kResponseContrast) {
    auto y_w = random_tokens(rng, c, c.max_response_len, true);
    auto y_l = y_w;
    while (y_l == y_w) y_l = random_tokens(rng, c, c.max_response_len, true);
    return PreferenceRecord::response_contrast(random_image(rng, c.image_dim), x, y_w, y_l);
  }
  auto v_w = random_image(rng, c.image_dim);
  auto v_l = random_image(rng, c.image_dim);
  return PreferenceRecord::image_contrast(v_w, v_l, x,
                                          random_tokens(rng, c, c.max_response_len, true));
}

PolicyParams random_params(Rng& rng, const model::ModelConfig& c) {
  auto p = PolicyParams::zeros(c);
  for (auto& t : p.tensors()) {
    for (auto& v : t.values()) v = 0.5 * rng.normal();
  }
  return p;
}

double lp(const PolicyParams& p, const RenderedImage& v, const TokenSeq& x, const TokenSeq& y) {
  return model::seq_logprob(p, v, x, y).total;
}

}  // namespace

const char* checked_loss_name(CheckedLoss l) {
  switch (l) {
    case CheckedLoss::kDpo: return "dpo";
    case CheckedLoss::kVdpoPlain: return "vdpo-plain";
    case CheckedLoss::kVdpoNormalized: return "vdpo-normalized";
    case CheckedLoss::kSft: return "sft";
  }
  return "?";
}

LossGradCheck check_loss_gradient(CheckedLoss loss, std::uint64_t seed, double step) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(loss)}));
  const auto config = small_config(seed);
  const PolicyParams base = random_params(rng, config);
  const PolicyParams ref = random_params(rng, config);
  const RecordKind kind = seed % 2 == 0 ? RecordKind::kResponseContrast : RecordKind::kImageContrast;
  const PreferenceRecord r = random_record(rng, config, kind);

  grad::DifferentiableFn fn;
  switch (loss) {
    case CheckedLoss::kDpo:
      fn = [&](std::span<const double> flat) {
        PolicyParams p = base;
        p.assign_flat(flat);
        auto out = dpo_loss(p, ref, r, kBeta);
        return grad::ValueAndGrad{out.loss, out.grad->flatten()};
      };
      break;
    case CheckedLoss::kVdpoPlain: {
      const auto cfg = GuidanceConfig::from_gamma(kBeta, kGamma);
      const double phi_w = guidance_logphi(base, r.image_w, r.query, r.response_w, kGamma);
      const double phi_l = guidance_logphi(base, r.image_l, r.query, r.response_l, kGamma);
      fn = [&, cfg, phi_w, phi_l](std::span<const double> flat) {
        PolicyParams p = base;
        p.assign_flat(flat);
        const double u = (lp(p, r.image_w, r.query, r.response_w) + phi_w -
                          lp(ref, r.image_w, r.query, r.response_w)) -
                         (lp(p, r.image_l, r.query, r.response_l) + phi_l -
                          lp(ref, r.image_l, r.query, r.response_l));
        auto analytic = vdpo_loss(p, ref, r, cfg);
        return grad::ValueAndGrad{neg_log_sigmoid(kBeta * u), analytic.grad->flatten()};
      };
      break;
    }
    case CheckedLoss::kVdpoNormalized: {
      const auto cfg = GuidanceConfig::from_gamma(kBeta, kGamma, Variant::kNormalized);
      const auto zero = RenderedImage::zeros(config.image_dim);
      fn = [&, cfg, zero](std::span<const double> flat) {
        PolicyParams p = base;
        p.assign_flat(flat);
        // Logit corrections taken from the base point stay constant.
        auto f = [&](const RenderedImage& v, const TokenSeq& y) {
          double total = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i) {
            auto h = model::step_logits(p, v, r.query, y, i);
            auto hv = model::step_logits(base, v, r.query, y, i);
            auto h0 = model::step_logits(base, zero, r.query, y, i);
            total += normalized_guided_step(h, hv, h0, kGamma)[y[i]];
          }
          return total - lp(ref, v, r.query, y);
        };
        const double u = f(r.image_w, r.response_w) - f(r.image_l, r.response_l);
        auto analytic = normalized_vdpo_loss(p, ref, r, cfg);
        return grad::ValueAndGrad{neg_log_sigmoid(kBeta * u), analytic.grad->flatten()};
      };
      break;
    }
    case CheckedLoss::kSft:
      fn = [&](std::span<const double> flat) {
        PolicyParams p = base;
        p.assign_flat(flat);
        auto out = sft_loss(p, r.image_w, r.query, r.response_w);
        return grad::ValueAndGrad{out.loss, out.grad->flatten()};
      };
      break;
  }

  LossGradCheck out;
  out.loss = loss;
  out.kind = kind;
  out.seed = seed;
  const auto flat = base.flatten();
  out.projected = grad::projected_grad_check(fn, flat, kDirections, derive_seed(seed, {7}), step);
  out.coordinate = grad::grad_check(fn, flat, step);
  return out;
}

}  // namespace vdpo::objectives
