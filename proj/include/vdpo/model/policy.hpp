#pragma once

// One-hidden-layer vision-conditioned next-token policy.
//
//   h_i = W_o relu(W_h [W_v v + b_v ; mean_t E[x_t] ; E[y_{i-1}] ; P[i]] + b_h) + b_o
//
// with y_{-1} = BOS. The vision-unconditioned distribution is the same
// network fed the literal zero image (bias b_v still applies).

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vdpo/digest.hpp"
#include "vdpo/grad/graph.hpp"
#include "vdpo/grad/tensor.hpp"
#include "vdpo/model/config.hpp"

namespace vdpo::model {

enum class ParamId : std::size_t {
  kTokenEmbedding,  // V x d_e
  kImageProj,       // d_v x d_e
  kImageBias,       // d_e
  kHiddenW,         // (3 d_e + 8) x d_h
  kHiddenB,         // d_h
  kOutW,            // d_h x V
  kOutB,            // V
  kPosTable,        // max_response_len x 8
};
inline constexpr std::size_t kParamCount = 8;

const char* param_name(ParamId id);
grad::Shape param_shape(const ModelConfig& config, ParamId id);

class PolicyParams {
 public:
  PolicyParams(ModelConfig config, std::vector<grad::Tensor> tensors);

  // All-zero parameters of the right shapes (gradient accumulators, moments).
  static PolicyParams zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const grad::Tensor& tensor(ParamId id) const { return tensors_[static_cast<std::size_t>(id)]; }
  grad::Tensor& tensor(ParamId id) { return tensors_[static_cast<std::size_t>(id)]; }
  std::span<const grad::Tensor> tensors() const { return tensors_; }
  std::span<grad::Tensor> tensors() { return tensors_; }

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

  Digest digest() const;

  bool operator==(const PolicyParams&) const = default;

 private:
  ModelConfig config_;
  std::vector<grad::Tensor> tensors_;
};

// Entries uniform in [-0.08, 0.08], drawn from a generator seeded by
// config.seed in ParamId order.
PolicyParams init_params(const ModelConfig& config);

// Immutable snapshot whose digest is recorded at creation.
class FrozenPolicy {
 public:
  explicit FrozenPolicy(const PolicyParams& params, std::string tag = {});

  const PolicyParams& params() const { return *params_; }
  const Digest& digest() const { return digest_; }
  const std::string& tag() const { return tag_; }
  // Recomputes the content digest and compares it with the recorded one.
  bool verify() const;

 private:
  std::shared_ptr<const PolicyParams> params_;
  Digest digest_;
  std::string tag_;
};

FrozenPolicy freeze(const PolicyParams& params, std::string tag = {});

// --- graph construction -----------------------------------------------------

struct ParamVars {
  std::array<grad::Var, kParamCount> vars;
  grad::Var operator[](ParamId id) const { return vars[static_cast<std::size_t>(id)]; }
};

// Adds one input node per parameter tensor and binds it.
ParamVars bind_params(grad::Graph& g, grad::Bindings& bindings, const PolicyParams& params,
                      const std::string& prefix, bool differentiable);

// [T x V] logits for rows with the given previous tokens and positions.
grad::Var logits_rows(grad::Graph& g, const ParamVars& p, const ModelConfig& config,
                      const RenderedImage& image, const TokenSeq& query,
                      const TokenSeq& prev_tokens, const std::vector<std::size_t>& positions);

// Teacher-forced [T x V] logits for every position of `response`.
grad::Var response_logits(grad::Graph& g, const ParamVars& p, const ModelConfig& config,
                          const RenderedImage& image, const TokenSeq& query,
                          const TokenSeq& response);

struct SeqLogProbVars {
  grad::Var per_token;  // [T]
  grad::Var total;      // scalar
};

// Picks the response tokens out of [T x V] log-probabilities.
SeqLogProbVars pick_response(grad::Graph& g, grad::Var log_probs, const TokenSeq& response);

// --- numeric API ------------------------------------------------------------

struct SeqLogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

void validate_query(const ModelConfig& config, const TokenSeq& query);
void validate_response(const ModelConfig& config, const TokenSeq& response);
void validate_image(const ModelConfig& config, const RenderedImage& image);

grad::Tensor step_logits(const PolicyParams& params, const RenderedImage& image,
                         const TokenSeq& query, const TokenSeq& prefix, std::size_t position);

SeqLogProb seq_logprob(const PolicyParams& params, const RenderedImage& image,
                       const TokenSeq& query, const TokenSeq& response);

// seq_logprob with the zero image.
SeqLogProb uncond_seq_logprob(const PolicyParams& params, const TokenSeq& query,
                              const TokenSeq& response);

struct SeqLogProbGrad {
  SeqLogProb logprob;
  PolicyParams grad;
};

SeqLogProbGrad seq_logprob_with_grad(const PolicyParams& params, const RenderedImage& image,
                                     const TokenSeq& query, const TokenSeq& response);

struct DecodeMode {
  enum class Kind { kGreedy, kSample };
  Kind kind = Kind::kGreedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  static DecodeMode greedy() { return {}; }
  static DecodeMode sample(std::uint64_t seed, double temperature) {
    return {Kind::kSample, seed, temperature};
  }
};

// Generates until EOS or max_response_len tokens. Greedy ties go to the
// lower token id.
TokenSeq decode(const PolicyParams& params, const RenderedImage& image, const TokenSeq& query,
                const DecodeMode& mode = DecodeMode::greedy());

}  // namespace vdpo::model
