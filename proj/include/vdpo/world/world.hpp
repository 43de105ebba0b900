#pragma once

// Toy visual world: grid scenes of attributed objects, deterministic
// "renders", captions over a shared vocabulary, element replacement and a
// render-cosine similarity used in place of an image-text scorer.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vdpo/model/config.hpp"
#include "vdpo/rng.hpp"

namespace vdpo::world {

using model::RenderedImage;
using model::TokenId;
using model::TokenSeq;

enum class Expectedness { kConventional, kUnconventional };

struct Category {
  std::string name;
  Expectedness expectedness = Expectedness::kConventional;
  std::vector<std::size_t> attributes;  // indices into ObjectCatalog::attributes
  bool operator==(const Category&) const = default;
};

struct Substitute {
  std::size_t target = 0;  // category index
  std::string rationale;
  bool operator==(const Substitute&) const = default;
};

class ObjectCatalog {
 public:
  ObjectCatalog(std::vector<std::string> attributes, std::vector<Category> categories,
                std::vector<std::vector<Substitute>> replacements);

  // Built-in catalog: 6 attributes, 14 everyday and 10 unusual object kinds.
  static ObjectCatalog builtin();
  static ObjectCatalog from_json(const std::string& text);
  static ObjectCatalog load(const std::filesystem::path& path);
  std::string to_json() const;

  const std::vector<std::string>& attributes() const { return attributes_; }
  const std::vector<Category>& categories() const { return categories_; }
  // Substitutes for category `c`, in table order.
  const std::vector<Substitute>& substitutes(std::size_t c) const { return replacements_[c]; }
  std::optional<std::size_t> find_category(const std::string& name) const;
  bool allows(std::size_t category, std::size_t attribute) const;
  bool has_replacement(std::size_t from, std::size_t to) const;
  std::vector<std::size_t> conventional() const;

  bool operator==(const ObjectCatalog&) const = default;

 private:
  std::vector<std::string> attributes_;
  std::vector<Category> categories_;
  std::vector<std::vector<Substitute>> replacements_;
};

// Token layout:
//   0..4   PAD BOS EOS yes no
//   5..7   is-there, describe, what-at question markers
//   then one token per grid cell, per attribute, per category.
inline constexpr TokenId kQIsThere = 5;
inline constexpr TokenId kQDescribe = 6;
inline constexpr TokenId kQWhatAt = 7;

class Vocab {
 public:
  Vocab(const ObjectCatalog& catalog, std::size_t grid_w, std::size_t grid_h);

  std::size_t size() const { return cat_base_ + n_cat_; }
  std::size_t grid_w() const { return grid_w_; }
  std::size_t grid_h() const { return grid_h_; }
  std::size_t cells() const { return grid_w_ * grid_h_; }

  TokenId position_token(std::size_t pos) const;
  TokenId attribute_token(std::size_t attr) const;
  TokenId category_token(std::size_t cat) const;
  std::optional<std::size_t> position_of(TokenId t) const;
  std::optional<std::size_t> attribute_of(TokenId t) const;
  std::optional<std::size_t> category_of(TokenId t) const;

  // Human-readable rendering of a token sequence, for logs and the adapter.
  std::string describe(const TokenSeq& tokens, const ObjectCatalog& catalog) const;

  // Throws ErrorKind::kConfig if the model vocabulary is too small.
  void check_fits(const model::ModelConfig& config) const;

 private:
  std::size_t grid_w_, grid_h_;
  std::size_t n_attr_, n_cat_;
  std::size_t attr_base_, cat_base_;
};

struct Object {
  std::size_t category = 0;
  std::size_t attribute = 0;
  bool operator==(const Object&) const = default;
};

struct Scene {
  std::size_t grid_w = 4;
  std::size_t grid_h = 4;
  std::vector<std::optional<Object>> slots;  // row-major, grid_w * grid_h

  Scene() = default;
  Scene(std::size_t w, std::size_t h);

  std::size_t occupied() const;
  bool contains(std::size_t category) const;
  void validate(const ObjectCatalog& catalog) const;
  std::string digest() const;  // hex SHA-256

  bool operator==(const Scene&) const = default;
};

// `occupancy` everyday objects in distinct cells.
Scene gen_scene(std::uint64_t seed, const ObjectCatalog& catalog, std::size_t occupancy,
                std::size_t grid_w = 4, std::size_t grid_h = 4);

// Each object renders as a unit vector mixing one direction per category,
// per attribute and per cell with a direction unique to the whole triple.
// The shared parts make object kinds readable from a scene; the joint part
// keeps which-object-is-where recoverable.
struct RenderConfig {
  std::size_t dim = 16;
  std::uint64_t seed = 1;
  double category_weight = 1.0;
  double attribute_weight = 0.5;
  double position_weight = 0.5;
  double joint_weight = 0.5;
};

// Unit vector keyed on (category, attribute, position).
std::vector<double> basis_vector(const RenderConfig& config, std::size_t category,
                                 std::size_t attribute, std::size_t position);
RenderedImage render(const Scene& scene, const RenderConfig& config);

// (attribute category position) clauses in row-major order, then EOS.
TokenSeq caption(const Scene& scene, const Vocab& vocab);
// Inverse of caption on canonical captions; anything else throws
// ErrorKind::kParse.
Scene parse_caption(const TokenSeq& tokens, const Vocab& vocab, const ObjectCatalog& catalog);

struct Replacement {
  std::size_t position = 0;
  std::size_t old_category = 0;
  std::size_t new_category = 0;
  std::string rationale;
  bool operator==(const Replacement&) const = default;
};

// Every catalog substitute for every occupied cell, cells in row-major
// order and substitutes in table order.
std::vector<Replacement> propose_replacements(const Scene& scene, const ObjectCatalog& catalog);

// Checks against the scene and the catalog table; throws on violation.
void validate_replacement(const Scene& scene, const ObjectCatalog& catalog, const Replacement& r);

// Swaps the object kind in one cell. The attribute is kept when the new
// kind allows it, otherwise the new kind's first attribute is used.
Scene edit_scene(const Scene& scene, const Replacement& r, const ObjectCatalog& catalog);

// cosine(render(parse(caption)), image)
double similarity(const TokenSeq& caption_tokens, const RenderedImage& image, const Vocab& vocab,
                  const ObjectCatalog& catalog, const RenderConfig& render_config);

// --- external proposer adapter ----------------------------------------------

struct ProposerRequest {
  std::string system;
  std::string user;
  std::string caption_text;
  std::vector<std::string> objects;
};

ProposerRequest make_proposer_request(const Scene& scene, const Vocab& vocab,
                                      const ObjectCatalog& catalog);

struct ProposalRejection {
  std::string line;
  std::string reason;
};

struct ParsedProposals {
  std::vector<Replacement> accepted;
  std::vector<ProposalRejection> rejected;
};

// Parses "[old] -> [new] <one-sentence rationale>" lines. A line outside
// that grammar throws ParseError carrying the raw line; well-formed lines
// naming unknown kinds, kinds absent from the scene or pairs missing from
// the table are rejected with a reason.
ParsedProposals parse_proposer_response(const std::string& text, const Scene& scene,
                                        const ObjectCatalog& catalog);

// --- filtering ----------------------------------------------------------------

// Candidate k is accepted iff column k's strict maximum is at row k and row
// k's strict maximum is at column k. Returns accepted indices ascending.
std::vector<std::size_t> mutual_argmax_filter(const std::vector<std::vector<double>>& scores);

// sim_w / sim_l >= threshold; both scores must be positive.
bool ratio_gate(double sim_w, double sim_l, double threshold = 1.5);

}  // namespace vdpo::world
