#pragma once

// Shared helpers for the unit and acceptance tests.

#include <cmath>
#include <functional>
#include <vector>

#include "vdpo/model/policy.hpp"
#include "vdpo/objectives/objectives.hpp"
#include "vdpo/rng.hpp"

namespace vdpo::testing {

inline model::ModelConfig tiny_config(std::uint64_t seed = 1) {
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

inline model::RenderedImage random_image(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return model::RenderedImage::normalized(std::move(v));
}

// Parameters with entries N(0, scale^2).
inline model::PolicyParams random_params(Rng& rng, const model::ModelConfig& c, double scale) {
  auto p = model::PolicyParams::zeros(c);
  for (auto& t : p.tensors()) {
    for (auto& v : t.values()) v = scale * rng.normal();
  }
  return p;
}

// Non-empty token sequence over non-reserved ids, EOS-terminated when asked.
inline model::TokenSeq random_tokens(Rng& rng, const model::ModelConfig& c, std::size_t max_len,
                                     bool eos) {
  const std::size_t len = 1 + rng.below(eos ? max_len - 1 : max_len);
  model::TokenSeq s;
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(model::kReservedTokens + rng.below(c.vocab_size - model::kReservedTokens));
  }
  if (eos) s.push_back(model::kEos);
  return s;
}

inline objectives::PreferenceRecord random_record(Rng& rng, const model::ModelConfig& c,
                                                  objectives::RecordKind kind) {
  using objectives::PreferenceRecord;
  auto x = random_tokens(rng, c, c.max_query_len, false);
  if (kind == objectives::RecordKind::kResponseContrast) {
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

inline std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& x : p) s += (x = 0.05 + rng.uniform());
  for (auto& x : p) x /= s;
  return p;
}

}  // namespace vdpo::testing
