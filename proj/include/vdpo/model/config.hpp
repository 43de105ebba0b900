#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace vdpo::model {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;

// Reserved vocabulary entries shared by every model and world.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kYes = 3;
inline constexpr TokenId kNo = 4;
inline constexpr std::size_t kReservedTokens = 5;
inline constexpr std::size_t kMinVocab = 8;

inline constexpr std::size_t kPosDim = 8;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t image_dim = 16;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t max_query_len = 8;
  std::size_t max_response_len = 16;
  std::uint64_t seed = 0;

  // Width of the hidden layer input: image, pooled query, previous token,
  // position.
  std::size_t feature_dim() const { return 3 * embed_dim + kPosDim; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
  // Equal up to the initialization seed.
  bool same_shape(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && image_dim == o.image_dim && embed_dim == o.embed_dim &&
           hidden_dim == o.hidden_dim && max_query_len == o.max_query_len &&
           max_response_len == o.max_response_len;
  }
};

// Image feature vector. Either unit L2 norm (within 1e-9) or all zeros.
class RenderedImage {
 public:
  RenderedImage() = default;
  explicit RenderedImage(std::vector<double> features);

  static RenderedImage zeros(std::size_t dim);
  // Normalizes `raw`; throws if it has zero norm.
  static RenderedImage normalized(std::vector<double> raw);

  std::span<const double> features() const { return features_; }
  std::size_t dim() const { return features_.size(); }
  bool is_zero() const;

  bool operator==(const RenderedImage&) const = default;

 private:
  std::vector<double> features_;
};

double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace vdpo::model
