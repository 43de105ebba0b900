#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "vdpo/error.hpp"
#include "vdpo/grad/grad_check.hpp"
#include "vdpo/objectives/gradcheck.hpp"
#include "vdpo/objectives/objectives.hpp"

using namespace vdpo;
using namespace vdpo::objectives;
using namespace vdpo::testing;
using model::PolicyParams;
using model::RenderedImage;

namespace {

constexpr RecordKind kKinds[] = {RecordKind::kResponseContrast, RecordKind::kImageContrast};

double lp(const PolicyParams& p, const RenderedImage& v, const model::TokenSeq& x,
          const model::TokenSeq& y) {
  return model::seq_logprob(p, v, x, y).total;
}

double lpu(const PolicyParams& p, const model::TokenSeq& x, const model::TokenSeq& y) {
  return model::uncond_seq_logprob(p, x, y).total;
}

double max_abs_diff(const PolicyParams& a, const PolicyParams& b) {
  auto fa = a.flatten();
  auto fb = b.flatten();
  double m = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, std::abs(fa[i] - fb[i]));
  return m;
}

struct World {
  Rng rng{0};
  model::ModelConfig config = tiny_config();
  PolicyParams policy = PolicyParams::zeros(config);
  PolicyParams ref = PolicyParams::zeros(config);

  explicit World(std::uint64_t seed) : rng(seed) {
    policy = random_params(rng, config, 0.5);
    ref = random_params(rng, config, 0.5);
  }
  PreferenceRecord record(RecordKind k) { return random_record(rng, config, k); }
};

// Finite differences along random directions; single coordinates can have
// exact derivatives far below the round-off of a central difference.
grad::GradCheckReport check_loss(
    const PolicyParams& base,
    const std::function<LossOutput(const PolicyParams&)>& loss) {
  grad::DifferentiableFn fn = [&](std::span<const double> flat) {
    PolicyParams p = base;
    p.assign_flat(flat);
    auto out = loss(p);
    return grad::ValueAndGrad{out.loss, out.grad->flatten()};
  };
  return grad::projected_grad_check(fn, base.flatten(), 8, 99);
}

}  // namespace

TEST(GuidanceConfig, GammaFollowsAlphaAndBeta) {
  auto c = GuidanceConfig::from_gamma(0.1, 0.75);
  EXPECT_NEAR(c.alpha, 0.025, 1e-15);
  auto d = GuidanceConfig::from_alpha(0.1, 0.1);
  EXPECT_EQ(d.gamma, 0.0);
  GuidanceConfig bad{0.1, 0.025, 0.5};
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(GuidanceConfig::from_alpha(0.0, 0.0), Error);
  EXPECT_THROW(GuidanceConfig::from_gamma(0.1, 1.5), Error);  // negative alpha
}

TEST(GuidanceConfig, ParsesNames) {
  EXPECT_EQ(parse_variant("normalized"), Variant::kNormalized);
  EXPECT_EQ(parse_uncond_source("sft-static"), UncondSource::kSftStatic);
  EXPECT_THROW(parse_variant("fancy"), Error);
}

TEST(DpoMargin, IdenticalPolicyAndReferenceGiveZero) {
  World w(1);
  for (auto k : kKinds) {
    auto r = w.record(k);
    EXPECT_EQ(dpo_margin(w.policy, w.policy, r), 0.0);
    auto out = dpo_loss(w.policy, w.policy, r, 0.1);
    EXPECT_NEAR(out.loss, std::log(2.0), 1e-15);
  }
}

TEST(DpoMargin, SwapNegates) {
  World w(2);
  for (int i = 0; i < 10; ++i) {
    for (auto k : kKinds) {
      auto r = w.record(k);
      EXPECT_EQ(dpo_margin(w.policy, w.ref, r), -dpo_margin(w.policy, w.ref, r.swapped()));
      GuidanceConfig g = GuidanceConfig::from_gamma(0.1, 0.75);
      EXPECT_NEAR(vdpo_margin(w.policy, w.ref, r, g),
                  -vdpo_margin(w.policy, w.ref, r.swapped(), g), 1e-14);
    }
  }
}

TEST(DpoMargin, DegenerateImagePairIsZero) {
  World w(3);
  auto r = w.record(RecordKind::kImageContrast);
  r.image_l = r.image_w;
  EXPECT_TRUE(r.degenerate());
  EXPECT_EQ(dpo_margin(w.policy, w.ref, r), 0.0);
  EXPECT_NEAR(dpo_loss(w.policy, w.ref, r, 0.1).loss, std::log(2.0), 1e-15);
}

TEST(DpoMargin, ConfigMismatchIsAnError) {
  World w(4);
  auto other = model::init_params(model::ModelConfig{});
  auto r = w.record(RecordKind::kResponseContrast);
  EXPECT_THROW(dpo_margin(w.policy, other, r), Error);
}

TEST(DpoLoss, MatchesMarginAndSigmoid) {
  World w(5);
  for (auto k : kKinds) {
    auto r = w.record(k);
    auto out = dpo_loss(w.policy, w.ref, r, 0.1);
    EXPECT_EQ(out.u, dpo_margin(w.policy, w.ref, r));
    EXPECT_NEAR(out.loss, -std::log(sigmoid(0.1 * out.u)), 1e-12);
    EXPECT_NEAR(out.u, out.f_w - out.f_l, 1e-15);
  }
}

TEST(DpoLoss, PairSumIsAtLeastTwoLnTwo) {
  World w(6);
  for (int i = 0; i < 20; ++i) {
    auto r = w.record(kKinds[i % 2]);
    const double a = dpo_loss(w.policy, w.ref, r, 0.1, false).loss;
    const double b = dpo_loss(w.policy, w.ref, r.swapped(), 0.1, false).loss;
    EXPECT_GE(a + b, 2.0 * std::log(2.0) - 1e-15);
  }
}

TEST(DpoLoss, GradientPassesGradCheck) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    World w(10 + s);
    auto r = w.record(kKinds[s % 2]);
    auto rep = check_loss(w.policy, [&](const PolicyParams& p) {
      return dpo_loss(p, w.ref, r, 0.1);
    });
    EXPECT_LT(rep.max_relative_error, 1e-5) << "seed " << s;
  }
}

TEST(DpoLoss, ReferenceReceivesNoGradient) {
  // Moving the reference only shifts the margin; gradient direction is unchanged.
  World w(7);
  auto r = w.record(RecordKind::kResponseContrast);
  auto a = dpo_loss(w.policy, w.ref, r, 0.1);
  auto gw = model::seq_logprob_with_grad(w.policy, r.image_w, r.query, r.response_w).grad;
  auto gl = model::seq_logprob_with_grad(w.policy, r.image_l, r.query, r.response_l).grad;
  const double c = -0.1 * sigmoid(-0.1 * a.u);
  auto fw = gw.flatten();
  auto fl = gl.flatten();
  auto fa = a.grad->flatten();
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i], c * (fw[i] - fl[i]), 1e-12);
}

TEST(GuidanceLogPhi, GammaOneIsZero) {
  World w(8);
  auto r = w.record(RecordKind::kResponseContrast);
  EXPECT_EQ(guidance_logphi(w.policy, r.image_w, r.query, r.response_w, 1.0), 0.0);
}

TEST(GuidanceLogPhi, ZeroImageIsZero) {
  World w(9);
  auto r = w.record(RecordKind::kResponseContrast);
  EXPECT_EQ(guidance_logphi(w.policy, RenderedImage::zeros(4), r.query, r.response_w, 0.3), 0.0);
}

TEST(GuidanceLogPhi, GammaZeroMatchesRecomputation) {
  World w(10);
  auto r = w.record(RecordKind::kResponseContrast);
  const double expect = -(lp(w.policy, r.image_w, r.query, r.response_w) -
                          lpu(w.policy, r.query, r.response_w));
  EXPECT_NEAR(guidance_logphi(w.policy, r.image_w, r.query, r.response_w, 0.0), expect, 1e-12);
}

TEST(VdpoMargin, GammaOneEqualsDpo) {
  World w(11);
  for (auto k : kKinds) {
    auto r = w.record(k);
    EXPECT_EQ(vdpo_margin(w.policy, w.ref, r, GuidanceConfig::from_gamma(0.1, 1.0)),
              dpo_margin(w.policy, w.ref, r));
  }
}

TEST(VdpoMargin, ImageContrastIdentity) {
  World w(12);
  for (int i = 0; i < 30; ++i) {
    auto r = w.record(RecordKind::kImageContrast);
    const double gamma = w.rng.uniform(0.0, 1.0);
    auto cfg = GuidanceConfig::from_gamma(0.1, gamma);
    const double d_theta = lp(w.policy, r.image_w, r.query, r.response_w) -
                           lp(w.policy, r.image_l, r.query, r.response_w);
    const double d_ref = lp(w.ref, r.image_w, r.query, r.response_w) -
                         lp(w.ref, r.image_l, r.query, r.response_w);
    const double u = vdpo_margin(w.policy, w.ref, r, cfg);
    EXPECT_NEAR(u - dpo_margin(w.policy, w.ref, r), (gamma - 1.0) * d_theta, 1e-10);
    EXPECT_NEAR(u, gamma * d_theta - d_ref, 1e-10);
  }
}

TEST(VdpoMargin, ResponseContrastIdentity) {
  World w(13);
  for (int i = 0; i < 30; ++i) {
    auto r = w.record(RecordKind::kResponseContrast);
    const double gamma = w.rng.uniform(0.0, 1.0);
    auto cfg = GuidanceConfig::from_gamma(0.1, gamma);
    const auto& v = r.image_w;
    const double expect =
        (gamma - 1.0) * ((lp(w.policy, v, r.query, r.response_w) - lpu(w.policy, r.query, r.response_w)) -
                         (lp(w.policy, v, r.query, r.response_l) - lpu(w.policy, r.query, r.response_l)));
    EXPECT_NEAR(vdpo_margin(w.policy, w.ref, r, cfg) - dpo_margin(w.policy, w.ref, r), expect,
                1e-10);
  }
}

TEST(VdpoLoss, GammaOneIsBitEqualToDpo) {
  World w(14);
  for (auto variant : {Variant::kPlain, Variant::kNormalized}) {
    for (auto k : kKinds) {
      auto r = w.record(k);
      auto a = vdpo_loss(w.policy, w.ref, r, GuidanceConfig::from_gamma(0.1, 1.0, variant));
      auto b = dpo_loss(w.policy, w.ref, r, 0.1);
      EXPECT_NEAR(a.loss, b.loss, 1e-12);
      EXPECT_LT(max_abs_diff(*a.grad, *b.grad), 1e-12);
    }
  }
}

TEST(VdpoLoss, PolicyEqualsReferenceImageContrast) {
  World w(15);
  auto r = w.record(RecordKind::kImageContrast);
  auto out = vdpo_loss(w.policy, w.policy, r, GuidanceConfig::from_gamma(0.1, 0.75));
  const double d = lp(w.policy, r.image_w, r.query, r.response_w) -
                   lp(w.policy, r.image_l, r.query, r.response_w);
  EXPECT_NEAR(out.u, -0.25 * d, 1e-10);
}

TEST(VdpoLoss, GradientIsCollinearWithDpo) {
  World w(16);
  for (int i = 0; i < 20; ++i) {
    auto r = w.record(kKinds[i % 2]);
    auto cfg = GuidanceConfig::from_gamma(0.1, 0.75);
    auto v = vdpo_loss(w.policy, w.ref, r, cfg);
    auto d = dpo_loss(w.policy, w.ref, r, 0.1);
    const double c = sigmoid(-0.1 * v.u) / sigmoid(-0.1 * d.u);
    auto gv = v.grad->flatten();
    auto gd = d.grad->flatten();
    for (std::size_t j = 0; j < gv.size(); ++j) {
      if (std::abs(gd[j]) > 1e-12) EXPECT_NEAR(gv[j] / gd[j], c, 1e-8);
    }
  }
}

TEST(VdpoLoss, StopGradientMatchesConstantSurrogate) {
  World w(17);
  for (int i = 0; i < 10; ++i) {
    auto r = w.record(kKinds[i % 2]);
    auto cfg = GuidanceConfig::from_gamma(0.1, 0.6);
    auto out = vdpo_loss(w.policy, w.ref, r, cfg);
    // Surrogate: f = lp + const - ref, so grad = -beta sigma(-beta u) (grad lp_w - grad lp_l).
    auto gw = model::seq_logprob_with_grad(w.policy, r.image_w, r.query, r.response_w).grad;
    auto gl = model::seq_logprob_with_grad(w.policy, r.image_l, r.query, r.response_l).grad;
    const double c = -0.1 * sigmoid(-0.1 * out.u);
    auto fw = gw.flatten(), fl = gl.flatten(), fo = out.grad->flatten();
    for (std::size_t j = 0; j < fo.size(); ++j) EXPECT_NEAR(fo[j], c * (fw[j] - fl[j]), 1e-12);
  }
}

TEST(VdpoLoss, GradientPassesGradCheck) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    World w(20 + s);
    auto r = w.record(kKinds[s % 2]);
    auto cfg = GuidanceConfig::from_gamma(0.1, 0.75);
    // The guidance term is detached, so finite differences run on the loss
    // with that term frozen at the base point.
    const double logphi_w = guidance_logphi(w.policy, r.image_w, r.query, r.response_w, 0.75);
    const double logphi_l = guidance_logphi(w.policy, r.image_l, r.query, r.response_l, 0.75);
    grad::DifferentiableFn fn = [&](std::span<const double> flat) {
      PolicyParams p = w.policy;
      p.assign_flat(flat);
      // Reference shifted by the frozen guidance values reproduces the surrogate.
      const double u = (lp(p, r.image_w, r.query, r.response_w) + logphi_w -
                        lp(w.ref, r.image_w, r.query, r.response_w)) -
                       (lp(p, r.image_l, r.query, r.response_l) + logphi_l -
                        lp(w.ref, r.image_l, r.query, r.response_l));
      auto analytic = vdpo_loss(p, w.ref, r, cfg);
      return grad::ValueAndGrad{neg_log_sigmoid(0.1 * u), analytic.grad->flatten()};
    };
    auto rep2 = grad::projected_grad_check(fn, w.policy.flatten(), 8, s);
    EXPECT_LT(rep2.max_relative_error, 1e-5) << "seed " << s;
  }
}

TEST(VdpoLoss, SftStaticWithPolicyAsSftMatchesDynamic) {
  World w(18);
  for (auto variant : {Variant::kPlain, Variant::kNormalized}) {
    auto r = w.record(RecordKind::kResponseContrast);
    auto dyn = GuidanceConfig::from_gamma(0.1, 0.75, variant);
    auto stat = GuidanceConfig::from_gamma(0.1, 0.75, variant, UncondSource::kSftStatic);
    auto a = vdpo_loss(w.policy, w.ref, r, dyn);
    auto b = vdpo_loss(w.policy, w.ref, r, stat, &w.policy);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(*a.grad, *b.grad);
    EXPECT_THROW(vdpo_loss(w.policy, w.ref, r, stat), Error);
  }
}

TEST(VdpoLoss, SftStaticUsesSftForUnconditionedTerm) {
  World w(19);
  auto sft = random_params(w.rng, w.config, 0.5);
  auto r = w.record(RecordKind::kResponseContrast);
  auto cfg = GuidanceConfig::from_gamma(0.1, 0.5, Variant::kPlain, UncondSource::kSftStatic);
  auto out = vdpo_loss(w.policy, w.ref, r, cfg, &sft);
  EXPECT_NEAR(out.diagnostics.at("uncond_w"), lpu(sft, r.query, r.response_w), 1e-12);
  EXPECT_NEAR(vdpo_margin(w.policy, w.ref, r, cfg, &sft), out.u, 1e-12);
}

TEST(NormalizedGuidedStep, Examples) {
  Rng rng(20);
  grad::Tensor h({6}, 0.0), a({6}, 0.0), b({6}, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    h[i] = rng.normal();
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  grad::Graph g;
  auto plain = g.forward(g.log_softmax(g.constant(h)), {});
  EXPECT_EQ(normalized_guided_step(h, a, b, 1.0), plain);
  EXPECT_EQ(normalized_guided_step(h, a, a, 0.3), plain);
  auto out = normalized_guided_step(h, a, b, 0.3);
  double s = 0.0;
  for (double x : out.values()) s += std::exp(x);
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_THROW(normalized_guided_step(h, grad::Tensor({5}, 0.0), b, 0.3), Error);
}

TEST(NormalizedVdpoLoss, GradientPassesGradCheck) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    World w(30 + s);
    auto r = w.record(kKinds[s % 2]);
    auto cfg = GuidanceConfig::from_gamma(0.1, 0.75, Variant::kNormalized);
    // Surrogate with the detached logit corrections frozen at the base point:
    // identical to the analytic graph with the correction held constant.
    grad::DifferentiableFn fn = [&](std::span<const double> flat) {
      PolicyParams p = w.policy;
      p.assign_flat(flat);
      auto f = [&](const RenderedImage& v, const model::TokenSeq& y) {
        double total = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
          auto h = model::step_logits(p, v, r.query, y, i);
          auto hv = model::step_logits(w.policy, v, r.query, y, i);
          auto h0 = model::step_logits(w.policy, RenderedImage::zeros(4), r.query, y, i);
          total += normalized_guided_step(h, hv, h0, 0.75)[y[i]];
        }
        return total - lp(w.ref, v, r.query, y);
      };
      const double u = f(r.image_w, r.response_w) - f(r.image_l, r.response_l);
      auto analytic = normalized_vdpo_loss(p, w.ref, r, cfg);
      return grad::ValueAndGrad{neg_log_sigmoid(0.1 * u), analytic.grad->flatten()};
    };
    auto rep = grad::projected_grad_check(fn, w.policy.flatten(), 8, s);
    EXPECT_LT(rep.max_relative_error, 1e-5) << "seed " << s;
  }
}

TEST(NormalizedVdpoLoss, ZeroImagesReduceToDpo) {
  World w(21);
  auto r = w.record(RecordKind::kResponseContrast);
  r.image_w = r.image_l = RenderedImage::zeros(4);
  auto a = normalized_vdpo_loss(w.policy, w.ref, r,
                                GuidanceConfig::from_gamma(0.1, 0.4, Variant::kNormalized));
  auto b = dpo_loss(w.policy, w.ref, r, 0.1);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
}

TEST(NormalizedVdpoLoss, RequiresNormalizedVariant) {
  World w(22);
  auto r = w.record(RecordKind::kResponseContrast);
  EXPECT_THROW(normalized_vdpo_loss(w.policy, w.ref, r, GuidanceConfig::from_gamma(0.1, 0.75)),
               Error);
}

TEST(SftLoss, GradientPassesGradCheck) {
  World w(23);
  auto r = w.record(RecordKind::kResponseContrast);
  auto rep = check_loss(w.policy, [&](const PolicyParams& p) {
    return sft_loss(p, r.image_w, r.query, r.response_w);
  });
  EXPECT_LT(rep.max_relative_error, 1e-5);
}

TEST(Losses, StrictlyPositiveAndMonotone) {
  double prev = neg_log_sigmoid(-50.0);
  for (double x = -50.0; x <= 50.0; x += 0.5) {
    const double l = neg_log_sigmoid(x);
    EXPECT_GT(l, 0.0);
    EXPECT_LE(l, prev);
    prev = l;
  }
  EXPECT_NEAR(neg_log_sigmoid(0.0), std::log(2.0), 1e-16);
  EXPECT_NEAR(neg_log_sigmoid(-800.0), 800.0, 1e-12);
}

TEST(Proposition1Ratio, IgnoredImageGivesOne) {
  World w(24);
  auto& proj = w.policy.tensor(model::ParamId::kImageProj);
  proj = grad::Tensor(proj.shape(), 0.0);
  std::vector<PreferenceRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(w.record(kKinds[i % 2]));
  auto s = proposition1_ratio(w.policy, recs);
  EXPECT_EQ(s.max, 1.0);
  EXPECT_EQ(s.mean, 1.0);
}

TEST(Proposition1Ratio, FiniteAndRecomputable) {
  World w(25);
  std::vector<PreferenceRecord> recs;
  for (int i = 0; i < 8; ++i) recs.push_back(w.record(kKinds[i % 2]));
  auto s = proposition1_ratio(w.policy, recs);
  double mx = 0.0, sum = 0.0;
  for (const auto& r : recs) {
    const double q = std::exp(lpu(w.policy, r.query, r.response_w) -
                              lp(w.policy, r.image_w, r.query, r.response_w));
    mx = std::max(mx, q);
    sum += q;
  }
  EXPECT_TRUE(std::isfinite(s.max));
  EXPECT_GE(s.max, 0.0);
  EXPECT_NEAR(s.max, mx, 1e-12 * mx);
  EXPECT_NEAR(s.mean, sum / recs.size(), 1e-12 * mx);
  EXPECT_THROW(proposition1_ratio(w.policy, {}), Error);
}

TEST(ObjectiveJ, AlphaZeroNoRewardIsNegativeKl) {
  Rng rng(26);
  auto p = random_distribution(rng, 3);
  auto ref = random_distribution(rng, 3);
  auto unc = random_distribution(rng, 3);
  std::vector<double> r(3, 0.0);
  double kl = 0.0;
  for (int i = 0; i < 3; ++i) kl += p[i] * std::log(p[i] / ref[i]);
  EXPECT_NEAR(objective_J(p, unc, ref, r, 0.2, 0.0), -0.2 * kl, 1e-15);
  EXPECT_NEAR(objective_J(ref, unc, ref, r, 0.2, 0.0), 0.0, 1e-15);
}

TEST(ObjectiveJ, ZeroProbabilityIsAnError) {
  std::vector<double> p{1.0, 0.0}, q{0.5, 0.5}, r{0.0, 0.0};
  EXPECT_THROW(objective_J(p, q, q, r, 0.1, 0.0), Error);
}

TEST(ObjectiveJ, NumericMaximizerMatchesClosedFormWithoutGuidance) {
  Rng rng(27);
  for (int t = 0; t < 20; ++t) {
    auto ref = random_distribution(rng, 2);
    auto unc = random_distribution(rng, 2);
    std::vector<double> r{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    const double beta = rng.uniform(0.1, 1.0);
    auto p = numeric_maximizer(unc, ref, r, beta, 0.0);
    // Closed form written out independently of tabular_maximizer.
    const double a = ref[0] * std::exp(r[0] / beta), b = ref[1] * std::exp(r[1] / beta);
    EXPECT_NEAR(p[0], a / (a + b), 1e-6);
    EXPECT_NEAR(tabular_maximizer(unc, ref, r, beta, 0.0)[0], a / (a + b), 1e-12);
  }
}

TEST(ObjectiveJ, NumericMaximizerRejectsLargerWorlds) {
  std::vector<double> q(4, 0.25), r(4, 0.0);
  EXPECT_THROW(numeric_maximizer(q, q, r, 0.1, 0.0), Error);
}

TEST(ObjectiveJ, NumericMaximizerSatisfiesFixedPoint) {
  Rng rng(28);
  for (std::size_t n : {2u, 3u}) {
    for (int t = 0; t < 10; ++t) {
      auto ref = random_distribution(rng, n);
      auto unc = random_distribution(rng, n);
      std::vector<double> r(n);
      for (auto& x : r) x = rng.uniform(-0.3, 0.3);
      const double beta = rng.uniform(0.1, 1.0);
      const double alpha = beta * rng.uniform(0.05, 0.8);
      auto p = numeric_maximizer(unc, ref, r, beta, alpha);
      EXPECT_LT(fixed_point_residual(p, unc, ref, r, beta, alpha), 1e-3);
      auto closed = tabular_maximizer(unc, ref, r, beta, alpha);
      EXPECT_LT(fixed_point_residual(closed, unc, ref, r, beta, alpha), 1e-12);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], closed[i], 1e-5);
    }
  }
}

TEST(GradCheckSuite, EveryLossPassesOnBothRecordKinds) {
  for (auto loss : {CheckedLoss::kDpo, CheckedLoss::kVdpoPlain, CheckedLoss::kVdpoNormalized,
                    CheckedLoss::kSft}) {
    for (std::uint64_t s = 0; s < 4; ++s) {
      const auto c = check_loss_gradient(loss, s);
      EXPECT_LT(c.projected.max_relative_error, 1e-5) << checked_loss_name(loss) << " " << s;
      EXPECT_EQ(c.kind, s % 2 == 0 ? RecordKind::kResponseContrast : RecordKind::kImageContrast);
      EXPECT_EQ(c.projected.coordinates, 8u);
      EXPECT_GT(c.coordinate.coordinates, c.projected.coordinates);
    }
  }
}

TEST(GradCheckSuite, CatchesABrokenGradient) {
  grad::DifferentiableFn fn = [](std::span<const double> p) {
    return grad::ValueAndGrad{p[0] * p[0] + p[1], {2.0 * p[0], 2.0}};
  };
  std::vector<double> at{0.3, -0.2};
  EXPECT_GT(grad::projected_grad_check(fn, at, 2, 1).max_relative_error, 1e-2);
}
