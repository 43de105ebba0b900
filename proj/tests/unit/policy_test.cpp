#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vdpo/error.hpp"
#include "vdpo/grad/grad_check.hpp"
#include "vdpo/model/checkpoint.hpp"
#include "vdpo/model/policy.hpp"
#include "vdpo/rng.hpp"

using namespace vdpo;
using namespace vdpo::model;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
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

// Larger-magnitude parameters so the tests see non-trivial distributions.
PolicyParams scaled_params(const ModelConfig& c, double scale) {
  PolicyParams p = init_params(c);
  for (auto& t : p.tensors()) {
    for (auto& v : t.values()) v *= scale;
  }
  return p;
}

}  // namespace

TEST(InitParams, DeterministicForSameSeed) {
  auto a = init_params(small_config(3));
  auto b = init_params(small_config(3));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.digest(), b.digest());
}

TEST(InitParams, DifferentSeedsDiffer) {
  EXPECT_NE(init_params(small_config(3)).digest(), init_params(small_config(4)).digest());
}

TEST(InitParams, EntriesInRange) {
  auto p = init_params(ModelConfig{});
  for (const auto& t : p.tensors()) {
    for (double v : t.values()) {
      EXPECT_GE(v, -0.08);
      EXPECT_LE(v, 0.08);
    }
  }
}

TEST(InitParams, VocabularyTooSmall) {
  auto c = small_config();
  c.vocab_size = 7;
  EXPECT_THROW(init_params(c), Error);
}

TEST(RenderedImage, RejectsNonUnitVectors) {
  EXPECT_THROW(RenderedImage(std::vector<double>{0.5, 0.5}), Error);
  EXPECT_NO_THROW(RenderedImage(std::vector<double>{0.0, 0.0}));
  EXPECT_NO_THROW(RenderedImage(std::vector<double>{0.6, 0.8}));
}

TEST(StepLogits, ZeroImageMatchesUnconditionedPath) {
  Rng rng(1);
  auto p = scaled_params(small_config(), 10);
  TokenSeq q{5, 6, kEos};
  TokenSeq y{7, 5, kEos};
  auto zero = RenderedImage::zeros(4);
  auto lp = uncond_seq_logprob(p, q, y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto logits = step_logits(p, zero, q, y, i);
    grad::Graph g;
    auto ls = g.forward(g.log_softmax(g.constant(logits)), {});
    EXPECT_EQ(ls[y[i]], lp.per_token[i]);
  }
}

TEST(StepLogits, DeterministicAndNormalizable) {
  Rng rng(2);
  auto p = scaled_params(small_config(), 10);
  auto v = random_image(rng, 4);
  TokenSeq q{5, kEos};
  auto a = step_logits(p, v, q, {6}, 1);
  auto b = step_logits(p, v, q, {6}, 1);
  EXPECT_EQ(a, b);
  double m = a[0];
  for (double x : a.values()) m = std::max(m, x);
  double s = 0.0;
  for (double x : a.values()) s += std::exp(x - m);
  const double lse = m + std::log(s);
  double total = 0.0;
  for (double x : a.values()) total += std::exp(x - lse);
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(StepLogits, RejectsBadInputs) {
  auto p = init_params(small_config());
  auto zero = RenderedImage::zeros(4);
  EXPECT_THROW(step_logits(p, zero, {5, kEos}, {}, 5), Error);
  EXPECT_THROW(step_logits(p, zero, {9, kEos}, {}, 0), Error);
  EXPECT_THROW(step_logits(p, RenderedImage::zeros(3), {5}, {}, 0), Error);
}

TEST(SeqLogProb, UniformLogitsGiveMinusLogV) {
  auto c = small_config();
  auto p = init_params(c);
  p.tensor(ParamId::kOutW) = grad::Tensor(p.tensor(ParamId::kOutW).shape(), 0.0);
  p.tensor(ParamId::kOutB) = grad::Tensor(p.tensor(ParamId::kOutB).shape(), 0.0);
  auto lp = seq_logprob(p, RenderedImage::zeros(4), {5, kEos}, {kEos});
  EXPECT_NEAR(lp.total, -std::log(8.0), 1e-15);
}

TEST(SeqLogProb, TotalIsSumOfPerToken) {
  Rng rng(3);
  auto p = scaled_params(small_config(), 12);
  auto lp = seq_logprob(p, random_image(rng, 4), {5, 6, kEos}, {7, 6, 5, kEos});
  double s = 0.0;
  for (double x : lp.per_token) {
    EXPECT_LE(x, 0.0);
    s += x;
  }
  EXPECT_NEAR(lp.total, s, 1e-12);
  EXPECT_LE(lp.total, 0.0);
}

TEST(SeqLogProb, MatchesBruteForceEnumeration) {
  // V = 8, length-3 response: probability of the whole sequence computed as
  // a product of explicitly normalized per-step softmax entries.
  Rng rng(4);
  auto p = scaled_params(small_config(), 15);
  auto v = random_image(rng, 4);
  TokenSeq q{6, kEos};
  TokenSeq y{5, 7, kEos};
  double prob = 1.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto logits = step_logits(p, v, q, y, i);
    double z = 0.0;
    for (double x : logits.values()) z += std::exp(x);
    prob *= std::exp(logits[y[i]]) / z;
  }
  EXPECT_NEAR(seq_logprob(p, v, q, y).total, std::log(prob), 1e-12);
}

TEST(SeqLogProb, ResponseMustEndWithEos) {
  auto p = init_params(small_config());
  EXPECT_THROW(seq_logprob(p, RenderedImage::zeros(4), {5}, {}), Error);
  EXPECT_THROW(seq_logprob(p, RenderedImage::zeros(4), {5}, {5, 6}), Error);
}

TEST(SeqLogProb, AddingTokensNeverIncreasesLogProb) {
  Rng rng(5);
  auto p = scaled_params(small_config(), 10);
  auto v = random_image(rng, 4);
  TokenSeq q{5, kEos};
  TokenSeq body{6, 7, 5, 6};
  // Prefix log-probability is the partial sum of per-token entries of the
  // longest sequence, so it is non-increasing in length.
  TokenSeq full = body;
  full.push_back(kEos);
  auto lp = seq_logprob(p, v, q, full);
  double prev = 0.0;
  for (double x : lp.per_token) {
    EXPECT_LE(prev + x, prev);
    prev += x;
  }
}

TEST(UncondSeqLogProb, EqualsZeroImageBitExact) {
  Rng rng(6);
  auto p = scaled_params(small_config(), 10);
  TokenSeq q{5, 6, kEos};
  TokenSeq y{7, kEos};
  auto a = uncond_seq_logprob(p, q, y);
  auto b = seq_logprob(p, RenderedImage::zeros(4), q, y);
  EXPECT_EQ(a.total, b.total);
  EXPECT_EQ(a.per_token, b.per_token);
}

TEST(UncondSeqLogProb, IndependentOfImageButNotOfQuery) {
  Rng rng(7);
  auto p = scaled_params(small_config(), 10);
  TokenSeq y{7, kEos};
  auto with_v = seq_logprob(p, random_image(rng, 4), {5, kEos}, y);
  auto u1 = uncond_seq_logprob(p, {5, kEos}, y);
  auto u2 = uncond_seq_logprob(p, {6, kEos}, y);
  EXPECT_NE(with_v.total, u1.total);
  EXPECT_NE(u1.total, u2.total);
}

TEST(SeqLogProb, GradientPassesGradCheck) {
  Rng rng(8);
  auto base = scaled_params(small_config(), 10);
  auto v = random_image(rng, 4);
  TokenSeq q{5, 6, kEos};
  TokenSeq y{7, 6, kEos};
  grad::DifferentiableFn fn = [&](std::span<const double> flat) {
    PolicyParams p = base;
    p.assign_flat(flat);
    auto r = seq_logprob_with_grad(p, v, q, y);
    return grad::ValueAndGrad{r.logprob.total, r.grad.flatten()};
  };
  auto report = grad::grad_check(fn, base.flatten());
  EXPECT_LT(report.max_relative_error, 1e-5) << "coordinate " << report.worst_coordinate;
}

TEST(Decode, SampleIsReproducible) {
  Rng rng(9);
  auto p = scaled_params(small_config(), 10);
  auto v = random_image(rng, 4);
  auto a = decode(p, v, {5, kEos}, DecodeMode::sample(42, 1.0));
  auto b = decode(p, v, {5, kEos}, DecodeMode::sample(42, 1.0));
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.empty());
  EXPECT_LE(a.size(), 5u);
}

TEST(Decode, ColdSamplingMatchesGreedy) {
  Rng rng(10);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto p = scaled_params(small_config(s), 20);
    auto v = random_image(rng, 4);
    auto greedy = decode(p, v, {5, kEos});
    auto cold = decode(p, v, {5, kEos}, DecodeMode::sample(s, 1e-9));
    EXPECT_EQ(greedy, cold);
  }
}

TEST(Decode, GreedyTiesGoToLowerTokenId) {
  auto c = small_config();
  auto p = init_params(c);
  p.tensor(ParamId::kOutW) = grad::Tensor(p.tensor(ParamId::kOutW).shape(), 0.0);
  p.tensor(ParamId::kOutB) = grad::Tensor(p.tensor(ParamId::kOutB).shape(), 0.0);
  auto out = decode(p, RenderedImage::zeros(4), {5, kEos});
  EXPECT_EQ(out, TokenSeq(5, kPad));
}

TEST(Freeze, DigestAndValuesMatchAtCreation) {
  Rng rng(11);
  auto live = scaled_params(small_config(), 10);
  auto frozen = freeze(live, "ref");
  EXPECT_EQ(frozen.digest(), live.digest());
  EXPECT_TRUE(frozen.verify());
  auto v = random_image(rng, 4);
  EXPECT_EQ(seq_logprob(frozen.params(), v, {5, kEos}, {6, kEos}).total,
            seq_logprob(live, v, {5, kEos}, {6, kEos}).total);
  live.tensor(ParamId::kOutB)[0] += 1.0;
  EXPECT_TRUE(frozen.verify());
  EXPECT_NE(frozen.digest(), live.digest());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto p = scaled_params(small_config(12), 3);
  auto path = std::filesystem::temp_directory_path() / "vdpo_policy_rt.ckpt";
  save_params(path, p);
  auto q = load_params(path);
  EXPECT_EQ(p, q);
  EXPECT_EQ(p.digest(), q.digest());
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto p = init_params(small_config(13));
  auto path = std::filesystem::temp_directory_path() / "vdpo_policy_bad.ckpt";
  save_params(path, p);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c = 0;
    f.read(&c, 1);
    f.seekp(200);
    c = static_cast<char>(c ^ 0x5A);
    f.write(&c, 1);
  }
  try {
    load_params(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDigest);
  }
  std::filesystem::resize_file(path, 60);
  EXPECT_THROW(load_params(path), Error);
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  auto p = init_params(small_config(14));
  auto path = std::filesystem::temp_directory_path() / "vdpo_policy_hdr.ckpt";
  save_params(path, p);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "VDPOCKPT");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  EXPECT_EQ(version, 1u);
  std::filesystem::remove(path);
}
