#include "vdpo/model/policy.hpp"

#include <cmath>
#include <numeric>

#include "vdpo/error.hpp"
#include "vdpo/model/checkpoint.hpp"
#include "vdpo/rng.hpp"

namespace vdpo::model {

using grad::Bindings;
using grad::Graph;
using grad::Shape;
using grad::Tensor;
using grad::Var;

void ModelConfig::validate() const {
  if (vocab_size < kMinVocab) {
    throw Error(ErrorKind::kConfig, "vocab_size must be at least " + std::to_string(kMinVocab) +
                                        " (reserved token ids)");
  }
  if (image_dim == 0 || embed_dim == 0 || hidden_dim == 0 || max_query_len == 0 ||
      max_response_len == 0) {
    throw Error(ErrorKind::kConfig, "model dimensions must be at least 1");
  }
}

RenderedImage::RenderedImage(std::vector<double> features) : features_(std::move(features)) {
  if (features_.empty()) throw invalid_argument("image has no features");
  if (!is_zero()) {
    const double n = std::sqrt(std::inner_product(features_.begin(), features_.end(),
                                                  features_.begin(), 0.0));
    if (!(std::abs(n - 1.0) <= 1e-9)) {
      throw invalid_argument("image features must have unit norm or be zero");
    }
  }
}

RenderedImage RenderedImage::zeros(std::size_t dim) {
  return RenderedImage(std::vector<double>(dim, 0.0));
}

RenderedImage RenderedImage::normalized(std::vector<double> raw) {
  const double n = std::sqrt(std::inner_product(raw.begin(), raw.end(), raw.begin(), 0.0));
  if (!(n > 0.0) || !std::isfinite(n)) throw invalid_argument("cannot normalize a zero vector");
  for (auto& v : raw) v /= n;
  return RenderedImage(std::move(raw));
}

bool RenderedImage::is_zero() const {
  for (double v : features_) {
    if (v != 0.0) return false;
  }
  return true;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw invalid_argument("cosine of vectors of different length");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw invalid_argument("cosine with a zero vector");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

const char* param_name(ParamId id) {
  switch (id) {
    case ParamId::kTokenEmbedding: return "token_embedding";
    case ParamId::kImageProj: return "image_proj";
    case ParamId::kImageBias: return "image_bias";
    case ParamId::kHiddenW: return "hidden_w";
    case ParamId::kHiddenB: return "hidden_b";
    case ParamId::kOutW: return "out_w";
    case ParamId::kOutB: return "out_b";
    case ParamId::kPosTable: return "pos_table";
  }
  return "unknown";
}

Shape param_shape(const ModelConfig& c, ParamId id) {
  switch (id) {
    case ParamId::kTokenEmbedding: return {c.vocab_size, c.embed_dim};
    case ParamId::kImageProj: return {c.image_dim, c.embed_dim};
    case ParamId::kImageBias: return {c.embed_dim};
    case ParamId::kHiddenW: return {c.feature_dim(), c.hidden_dim};
    case ParamId::kHiddenB: return {c.hidden_dim};
    case ParamId::kOutW: return {c.hidden_dim, c.vocab_size};
    case ParamId::kOutB: return {c.vocab_size};
    case ParamId::kPosTable: return {c.max_response_len, kPosDim};
  }
  return {};
}

PolicyParams::PolicyParams(ModelConfig config, std::vector<Tensor> tensors)
    : config_(config), tensors_(std::move(tensors)) {
  config_.validate();
  if (tensors_.size() != kParamCount) {
    throw Error(ErrorKind::kShape, "expected " + std::to_string(kParamCount) +
                                       " parameter tensors, got " +
                                       std::to_string(tensors_.size()));
  }
  for (std::size_t i = 0; i < kParamCount; ++i) {
    const auto id = static_cast<ParamId>(i);
    if (tensors_[i].shape() != param_shape(config_, id)) {
      throw Error(ErrorKind::kShape, std::string("parameter ") + param_name(id) + " has shape " +
                                         grad::shape_string(tensors_[i].shape()) + ", expected " +
                                         grad::shape_string(param_shape(config_, id)));
    }
  }
}

PolicyParams PolicyParams::zeros(const ModelConfig& config) {
  config.validate();
  std::vector<Tensor> t;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    t.emplace_back(param_shape(config, static_cast<ParamId>(i)), 0.0);
  }
  return PolicyParams(config, std::move(t));
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::vector<double> PolicyParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

void PolicyParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw Error(ErrorKind::kShape, "flat parameter vector has wrong length");
  }
  std::size_t k = 0;
  for (auto& t : tensors_) {
    for (auto& v : t.values()) v = flat[k++];
  }
}

Digest PolicyParams::digest() const {
  ByteWriter w;
  encode_params(w, *this);
  return sha256(w.bytes());
}

PolicyParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<Tensor> t;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    Tensor x(param_shape(config, static_cast<ParamId>(i)));
    for (auto& v : x.values()) v = rng.uniform(-0.08, 0.08);
    t.push_back(std::move(x));
  }
  return PolicyParams(config, std::move(t));
}

FrozenPolicy::FrozenPolicy(const PolicyParams& params, std::string tag)
    : params_(std::make_shared<const PolicyParams>(params)),
      digest_(params_->digest()),
      tag_(std::move(tag)) {}

bool FrozenPolicy::verify() const { return params_->digest() == digest_; }

FrozenPolicy freeze(const PolicyParams& params, std::string tag) {
  return FrozenPolicy(params, std::move(tag));
}

// --- graph construction -----------------------------------------------------

ParamVars bind_params(Graph& g, Bindings& bindings, const PolicyParams& params,
                      const std::string& prefix, bool differentiable) {
  ParamVars pv;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    pv.vars[i] = g.input(prefix + param_name(static_cast<ParamId>(i)), differentiable);
    bindings.bind(pv.vars[i], params.tensors()[i]);
  }
  return pv;
}

void validate_query(const ModelConfig& config, const TokenSeq& query) {
  if (query.empty()) throw invalid_argument("query is empty");
  if (query.size() > config.max_query_len) {
    throw invalid_argument("query longer than max_query_len");
  }
  for (auto t : query) {
    if (t >= config.vocab_size) {
      throw invalid_argument("query token id " + std::to_string(t) + " out of range");
    }
  }
}

void validate_response(const ModelConfig& config, const TokenSeq& response) {
  if (response.empty()) throw invalid_argument("response is empty");
  if (response.size() > config.max_response_len) {
    throw invalid_argument("response longer than max_response_len");
  }
  for (auto t : response) {
    if (t >= config.vocab_size) {
      throw invalid_argument("response token id " + std::to_string(t) + " out of range");
    }
  }
  if (response.back() != kEos) throw invalid_argument("response must end with EOS");
}

void validate_image(const ModelConfig& config, const RenderedImage& image) {
  if (image.dim() != config.image_dim) {
    throw invalid_argument("image has " + std::to_string(image.dim()) + " features, model expects " +
                           std::to_string(config.image_dim));
  }
}

Var logits_rows(Graph& g, const ParamVars& p, const ModelConfig& config,
                const RenderedImage& image, const TokenSeq& query, const TokenSeq& prev_tokens,
                const std::vector<std::size_t>& positions) {
  validate_image(config, image);
  validate_query(config, query);
  const std::size_t rows = prev_tokens.size();
  if (rows == 0 || positions.size() != rows) {
    throw invalid_argument("logits_rows needs one position per previous token");
  }
  for (auto pos : positions) {
    if (pos >= config.max_response_len) {
      throw invalid_argument("position " + std::to_string(pos) + " beyond max_response_len");
    }
  }
  for (auto t : prev_tokens) {
    if (t >= config.vocab_size) {
      throw invalid_argument("token id " + std::to_string(t) + " out of range");
    }
  }

  std::vector<double> feats(image.features().begin(), image.features().end());
  Var v = g.constant(Tensor::matrix(1, config.image_dim, std::move(feats)), "image");
  Var img = g.add(g.matmul(v, p[ParamId::kImageProj]), p[ParamId::kImageBias]);
  Var q = g.mean_rows(g.gather_rows(p[ParamId::kTokenEmbedding], query));
  Var prev = g.gather_rows(p[ParamId::kTokenEmbedding], prev_tokens);
  Var pos = g.gather_rows(p[ParamId::kPosTable], positions);
  Var x = g.concat_cols({g.tile_rows(img, rows), g.tile_rows(q, rows), prev, pos});
  Var h = g.relu(g.add(g.matmul(x, p[ParamId::kHiddenW]), p[ParamId::kHiddenB]));
  return g.add(g.matmul(h, p[ParamId::kOutW]), p[ParamId::kOutB]);
}

Var response_logits(Graph& g, const ParamVars& p, const ModelConfig& config,
                    const RenderedImage& image, const TokenSeq& query, const TokenSeq& response) {
  validate_response(config, response);
  TokenSeq prev;
  prev.reserve(response.size());
  prev.push_back(kBos);
  prev.insert(prev.end(), response.begin(), response.end() - 1);
  std::vector<std::size_t> positions(response.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  return logits_rows(g, p, config, image, query, prev, positions);
}

SeqLogProbVars pick_response(Graph& g, Var log_probs, const TokenSeq& response) {
  Var per = g.pick(log_probs, response);
  return {per, g.sum(per)};
}

// --- numeric API ------------------------------------------------------------

Tensor step_logits(const PolicyParams& params, const RenderedImage& image, const TokenSeq& query,
                   const TokenSeq& prefix, std::size_t position) {
  const auto& config = params.config();
  if (position >= config.max_response_len) {
    throw invalid_argument("position beyond max_response_len");
  }
  if (position > prefix.size()) throw invalid_argument("prefix shorter than position");
  const TokenId prev_token = position == 0 ? kBos : prefix[position - 1];
  Graph g;
  Bindings b;
  auto pv = bind_params(g, b, params, "", false);
  Var logits = logits_rows(g, pv, config, image, query, {prev_token}, {position});
  Tensor row = g.forward(logits, b);
  return Tensor::vector(std::vector<double>(row.values().begin(), row.values().end()));
}

namespace {

SeqLogProb read_logprob(const Graph& g, const SeqLogProbVars& v) {
  SeqLogProb out;
  out.total = g.value(v.total).item();
  const auto& per = g.value(v.per_token);
  out.per_token.assign(per.values().begin(), per.values().end());
  return out;
}

}  // namespace

SeqLogProb seq_logprob(const PolicyParams& params, const RenderedImage& image,
                       const TokenSeq& query, const TokenSeq& response) {
  Graph g;
  Bindings b;
  auto pv = bind_params(g, b, params, "", false);
  Var logits = response_logits(g, pv, params.config(), image, query, response);
  auto lp = pick_response(g, g.log_softmax(logits), response);
  g.forward(lp.total, b);
  return read_logprob(g, lp);
}

SeqLogProb uncond_seq_logprob(const PolicyParams& params, const TokenSeq& query,
                              const TokenSeq& response) {
  return seq_logprob(params, RenderedImage::zeros(params.config().image_dim), query, response);
}

SeqLogProbGrad seq_logprob_with_grad(const PolicyParams& params, const RenderedImage& image,
                                     const TokenSeq& query, const TokenSeq& response) {
  Graph g;
  Bindings b;
  auto pv = bind_params(g, b, params, "", true);
  Var logits = response_logits(g, pv, params.config(), image, query, response);
  auto lp = pick_response(g, g.log_softmax(logits), response);
  g.forward(lp.total, b);
  g.backward(lp.total);
  PolicyParams grad = PolicyParams::zeros(params.config());
  for (std::size_t i = 0; i < kParamCount; ++i) grad.tensors()[i] = g.grad(pv.vars[i]);
  return {read_logprob(g, lp), std::move(grad)};
}

TokenSeq decode(const PolicyParams& params, const RenderedImage& image, const TokenSeq& query,
                const DecodeMode& mode) {
  const auto& config = params.config();
  validate_image(config, image);
  validate_query(config, query);
  if (mode.kind == DecodeMode::Kind::kSample && !(mode.temperature > 0.0)) {
    throw invalid_argument("sampling temperature must be positive");
  }
  Rng rng(mode.seed);
  TokenSeq out;
  for (std::size_t pos = 0; pos < config.max_response_len; ++pos) {
    Tensor logits = step_logits(params, image, query, out, pos);
    TokenId next = 0;
    if (mode.kind == DecodeMode::Kind::kGreedy) {
      for (TokenId t = 1; t < logits.size(); ++t) {
        if (logits[t] > logits[next]) next = t;
      }
    } else {
      double m = logits[0] / mode.temperature;
      for (std::size_t t = 1; t < logits.size(); ++t) m = std::max(m, logits[t] / mode.temperature);
      std::vector<double> w(logits.size());
      double s = 0.0;
      for (std::size_t t = 0; t < logits.size(); ++t) {
        w[t] = std::exp(logits[t] / mode.temperature - m);
        s += w[t];
      }
      double u = rng.uniform() * s;
      next = logits.size() - 1;
      for (std::size_t t = 0; t < logits.size(); ++t) {
        if (u < w[t]) {
          next = t;
          break;
        }
        u -= w[t];
      }
    }
    out.push_back(next);
    if (next == kEos) break;
  }
  return out;
}

}  // namespace vdpo::model
