#include "vdpo/world/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdpo/digest.hpp"
#include "vdpo/error.hpp"

namespace vdpo::world {

using json = nlohmann::json;

// --- catalog ------------------------------------------------------------------

ObjectCatalog::ObjectCatalog(std::vector<std::string> attributes,
                             std::vector<Category> categories,
                             std::vector<std::vector<Substitute>> replacements)
    : attributes_(std::move(attributes)),
      categories_(std::move(categories)),
      replacements_(std::move(replacements)) {
  if (attributes_.empty()) throw Error(ErrorKind::kConfig, "catalog needs at least one attribute");
  if (categories_.empty()) throw Error(ErrorKind::kConfig, "catalog needs at least one category");
  std::set<std::string> names;
  for (const auto& a : attributes_) {
    if (a.empty() || !names.insert(a).second) {
      throw Error(ErrorKind::kConfig, "duplicate or empty attribute name '" + a + "'");
    }
  }
  names.clear();
  for (const auto& c : categories_) {
    if (c.name.empty() || !names.insert(c.name).second) {
      throw Error(ErrorKind::kConfig, "duplicate or empty category name '" + c.name + "'");
    }
    if (c.attributes.empty()) {
      throw Error(ErrorKind::kConfig, "category '" + c.name + "' allows no attribute");
    }
    for (auto a : c.attributes) {
      if (a >= attributes_.size()) {
        throw Error(ErrorKind::kConfig, "category '" + c.name + "' names an unknown attribute");
      }
    }
  }
  if (replacements_.size() != categories_.size()) {
    throw Error(ErrorKind::kConfig, "replacement table must have one row per category");
  }
  for (std::size_t i = 0; i < replacements_.size(); ++i) {
    std::set<std::size_t> seen;
    for (const auto& s : replacements_[i]) {
      if (s.target >= categories_.size()) {
        throw Error(ErrorKind::kConfig, "replacement target out of range");
      }
      if (s.target == i) {
        throw Error(ErrorKind::kConfig,
                    "replacement table maps '" + categories_[i].name + "' to itself");
      }
      if (!seen.insert(s.target).second) {
        throw Error(ErrorKind::kConfig, "duplicate replacement for '" + categories_[i].name + "'");
      }
    }
  }
}

ObjectCatalog ObjectCatalog::builtin() {
  return from_json(R"({
  "attributes": ["red", "blue", "green", "white", "black", "small"],
  "categories": [
    {"name": "train", "class": "conventional"},
    {"name": "church", "class": "conventional"},
    {"name": "car", "class": "conventional"},
    {"name": "dog", "class": "conventional"},
    {"name": "cat", "class": "conventional"},
    {"name": "chair", "class": "conventional"},
    {"name": "table", "class": "conventional"},
    {"name": "tree", "class": "conventional"},
    {"name": "bus", "class": "conventional"},
    {"name": "bicycle", "class": "conventional"},
    {"name": "cup", "class": "conventional"},
    {"name": "bench", "class": "conventional"},
    {"name": "horse", "class": "conventional"},
    {"name": "boat", "class": "conventional"},
    {"name": "elephant", "class": "unconventional"},
    {"name": "giraffe", "class": "unconventional"},
    {"name": "robot", "class": "unconventional"},
    {"name": "dinosaur", "class": "unconventional"},
    {"name": "cactus", "class": "unconventional"},
    {"name": "rocket", "class": "unconventional"},
    {"name": "octopus", "class": "unconventional"},
    {"name": "piano", "class": "unconventional"},
    {"name": "snowman", "class": "unconventional"},
    {"name": "whale", "class": "unconventional"}
  ],
  "replacements": [
    {"from": "train", "to": "elephant", "rationale": "animal-on-rails"},
    {"from": "train", "to": "rocket", "rationale": "vehicle-out-of-place"},
    {"from": "church", "to": "piano", "rationale": "scale-mismatch"},
    {"from": "church", "to": "snowman", "rationale": "season-mismatch"},
    {"from": "car", "to": "whale", "rationale": "animal-out-of-water"},
    {"from": "car", "to": "piano", "rationale": "object-on-road"},
    {"from": "dog", "to": "robot", "rationale": "machine-for-pet"},
    {"from": "dog", "to": "dinosaur", "rationale": "extinct-animal"},
    {"from": "cat", "to": "octopus", "rationale": "animal-out-of-water"},
    {"from": "cat", "to": "robot", "rationale": "machine-for-pet"},
    {"from": "chair", "to": "cactus", "rationale": "unusable-seat"},
    {"from": "chair", "to": "snowman", "rationale": "season-mismatch"},
    {"from": "table", "to": "piano", "rationale": "function-mismatch"},
    {"from": "table", "to": "octopus", "rationale": "animal-for-furniture"},
    {"from": "tree", "to": "rocket", "rationale": "machine-for-plant"},
    {"from": "tree", "to": "giraffe", "rationale": "animal-for-plant"},
    {"from": "bus", "to": "elephant", "rationale": "animal-on-road"},
    {"from": "bus", "to": "whale", "rationale": "animal-out-of-water"},
    {"from": "bicycle", "to": "dinosaur", "rationale": "extinct-animal"},
    {"from": "bicycle", "to": "giraffe", "rationale": "animal-for-vehicle"},
    {"from": "cup", "to": "cactus", "rationale": "plant-for-tableware"},
    {"from": "cup", "to": "octopus", "rationale": "animal-for-tableware"},
    {"from": "bench", "to": "snowman", "rationale": "season-mismatch"},
    {"from": "bench", "to": "dinosaur", "rationale": "extinct-animal"},
    {"from": "horse", "to": "giraffe", "rationale": "exotic-animal"},
    {"from": "horse", "to": "robot", "rationale": "machine-for-animal"},
    {"from": "boat", "to": "whale", "rationale": "animal-for-vessel"},
    {"from": "boat", "to": "piano", "rationale": "object-on-water"}
  ]
})");
}

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* k) { return it.key() == k; }) == allowed.end()) {
      throw Error(ErrorKind::kConfig, where + ": unknown key '" + it.key() + "'");
    }
  }
}

}  // namespace

ObjectCatalog ObjectCatalog::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("catalog: ") + e.what());
  }
  try {
    if (!j.is_object()) throw Error(ErrorKind::kConfig, "catalog must be a JSON object");
    reject_unknown_keys(j, {"attributes", "categories", "replacements"}, "catalog");
    auto attrs = j.at("attributes").get<std::vector<std::string>>();
    std::map<std::string, std::size_t> attr_index;
    for (std::size_t i = 0; i < attrs.size(); ++i) attr_index[attrs[i]] = i;

    std::vector<Category> cats;
    std::map<std::string, std::size_t> cat_index;
    for (const auto& c : j.at("categories")) {
      reject_unknown_keys(c, {"name", "class", "attributes"}, "catalog category");
      Category cat;
      cat.name = c.at("name").get<std::string>();
      const auto cls = c.value("class", std::string("conventional"));
      if (cls == "conventional") {
        cat.expectedness = Expectedness::kConventional;
      } else if (cls == "unconventional") {
        cat.expectedness = Expectedness::kUnconventional;
      } else {
        throw Error(ErrorKind::kConfig, "category '" + cat.name + "': unknown class '" + cls + "'");
      }
      if (c.contains("attributes")) {
        for (const auto& a : c.at("attributes")) {
          auto it = attr_index.find(a.get<std::string>());
          if (it == attr_index.end()) {
            throw Error(ErrorKind::kConfig, "category '" + cat.name + "': unknown attribute '" +
                                                a.get<std::string>() + "'");
          }
          cat.attributes.push_back(it->second);
        }
      } else {
        for (std::size_t i = 0; i < attrs.size(); ++i) cat.attributes.push_back(i);
      }
      cat_index[cat.name] = cats.size();
      cats.push_back(std::move(cat));
    }

    std::vector<std::vector<Substitute>> table(cats.size());
    if (j.contains("replacements")) {
      for (const auto& r : j.at("replacements")) {
        reject_unknown_keys(r, {"from", "to", "rationale"}, "catalog replacement");
        const auto from = r.at("from").get<std::string>();
        const auto to = r.at("to").get<std::string>();
        auto f = cat_index.find(from);
        auto t = cat_index.find(to);
        if (f == cat_index.end() || t == cat_index.end()) {
          throw Error(ErrorKind::kConfig,
                      "replacement " + from + " -> " + to + " names an unknown category");
        }
        table[f->second].push_back({t->second, r.value("rationale", std::string())});
      }
    }
    return ObjectCatalog(std::move(attrs), std::move(cats), std::move(table));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("catalog: ") + e.what());
  }
}

ObjectCatalog ObjectCatalog::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open catalog " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string ObjectCatalog::to_json() const {
  json j;
  j["attributes"] = attributes_;
  j["categories"] = json::array();
  for (const auto& c : categories_) {
    json cj;
    cj["name"] = c.name;
    cj["class"] = c.expectedness == Expectedness::kConventional ? "conventional" : "unconventional";
    std::vector<std::string> an;
    for (auto a : c.attributes) an.push_back(attributes_[a]);
    cj["attributes"] = an;
    j["categories"].push_back(cj);
  }
  j["replacements"] = json::array();
  for (std::size_t i = 0; i < replacements_.size(); ++i) {
    for (const auto& s : replacements_[i]) {
      j["replacements"].push_back(
          {{"from", categories_[i].name}, {"to", categories_[s.target].name},
           {"rationale", s.rationale}});
    }
  }
  return j.dump(2);
}

std::optional<std::size_t> ObjectCatalog::find_category(const std::string& name) const {
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (categories_[i].name == name) return i;
  }
  return std::nullopt;
}

bool ObjectCatalog::allows(std::size_t category, std::size_t attribute) const {
  const auto& a = categories_.at(category).attributes;
  return std::find(a.begin(), a.end(), attribute) != a.end();
}

bool ObjectCatalog::has_replacement(std::size_t from, std::size_t to) const {
  if (from >= replacements_.size()) return false;
  for (const auto& s : replacements_[from]) {
    if (s.target == to) return true;
  }
  return false;
}

std::vector<std::size_t> ObjectCatalog::conventional() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (categories_[i].expectedness == Expectedness::kConventional) out.push_back(i);
  }
  return out;
}

// --- vocabulary ---------------------------------------------------------------

Vocab::Vocab(const ObjectCatalog& catalog, std::size_t grid_w, std::size_t grid_h)
    : grid_w_(grid_w),
      grid_h_(grid_h),
      n_attr_(catalog.attributes().size()),
      n_cat_(catalog.categories().size()),
      attr_base_(8 + grid_w * grid_h),
      cat_base_(8 + grid_w * grid_h + catalog.attributes().size()) {
  if (grid_w == 0 || grid_h == 0) throw Error(ErrorKind::kConfig, "grid extents must be positive");
}

TokenId Vocab::position_token(std::size_t pos) const {
  if (pos >= cells()) throw invalid_argument("position out of range");
  return 8 + pos;
}

TokenId Vocab::attribute_token(std::size_t attr) const {
  if (attr >= n_attr_) throw invalid_argument("attribute out of range");
  return attr_base_ + attr;
}

TokenId Vocab::category_token(std::size_t cat) const {
  if (cat >= n_cat_) throw invalid_argument("category out of range");
  return cat_base_ + cat;
}

std::optional<std::size_t> Vocab::position_of(TokenId t) const {
  if (t >= 8 && t < attr_base_) return t - 8;
  return std::nullopt;
}

std::optional<std::size_t> Vocab::attribute_of(TokenId t) const {
  if (t >= attr_base_ && t < cat_base_) return t - attr_base_;
  return std::nullopt;
}

std::optional<std::size_t> Vocab::category_of(TokenId t) const {
  if (t >= cat_base_ && t < cat_base_ + n_cat_) return t - cat_base_;
  return std::nullopt;
}

std::string Vocab::describe(const TokenSeq& tokens, const ObjectCatalog& catalog) const {
  std::string out;
  for (auto t : tokens) {
    if (!out.empty()) out += ' ';
    if (auto p = position_of(t)) {
      out += fmt::format("r{}c{}", *p / grid_w_, *p % grid_w_);
    } else if (auto a = attribute_of(t)) {
      out += catalog.attributes()[*a];
    } else if (auto c = category_of(t)) {
      out += catalog.categories()[*c].name;
    } else {
      static const char* names[] = {"<pad>", "<bos>", "<eos>", "yes", "no",
                                    "is-there", "describe", "what-at"};
      out += t < 8 ? names[t] : fmt::format("<{}>", t);
    }
  }
  return out;
}

void Vocab::check_fits(const model::ModelConfig& config) const {
  if (size() > config.vocab_size) {
    throw Error(ErrorKind::kConfig, fmt::format("world needs {} tokens but the model vocabulary "
                                                "has {}",
                                                size(), config.vocab_size));
  }
}

// --- scenes -------------------------------------------------------------------

Scene::Scene(std::size_t w, std::size_t h) : grid_w(w), grid_h(h), slots(w * h) {}

std::size_t Scene::occupied() const {
  return static_cast<std::size_t>(
      std::count_if(slots.begin(), slots.end(), [](const auto& s) { return s.has_value(); }));
}

bool Scene::contains(std::size_t category) const {
  return std::any_of(slots.begin(), slots.end(),
                     [&](const auto& s) { return s && s->category == category; });
}

void Scene::validate(const ObjectCatalog& catalog) const {
  if (slots.size() != grid_w * grid_h) throw invalid_argument("scene slot count mismatch");
  if (occupied() == 0) throw invalid_argument("scene has no objects");
  for (const auto& s : slots) {
    if (!s) continue;
    if (s->category >= catalog.categories().size()) throw invalid_argument("unknown category");
    if (s->attribute >= catalog.attributes().size() || !catalog.allows(s->category, s->attribute)) {
      throw invalid_argument("attribute not allowed for '" +
                             catalog.categories()[s->category].name + "'");
    }
  }
}

std::string Scene::digest() const {
  ByteWriter w;
  w.u64(grid_w);
  w.u64(grid_h);
  for (const auto& s : slots) {
    w.u32(s ? 1 : 0);
    if (s) {
      w.u64(s->category);
      w.u64(s->attribute);
    }
  }
  return to_hex(sha256(w.bytes()));
}

Scene gen_scene(std::uint64_t seed, const ObjectCatalog& catalog, std::size_t occupancy,
                std::size_t grid_w, std::size_t grid_h) {
  Scene scene(grid_w, grid_h);
  if (occupancy < 1 || occupancy > grid_w * grid_h) {
    throw invalid_argument(fmt::format("occupancy {} outside [1, {}]", occupancy, grid_w * grid_h));
  }
  const auto kinds = catalog.conventional();
  if (kinds.empty()) throw Error(ErrorKind::kConfig, "catalog has no conventional categories");
  Rng rng(seed);
  std::vector<std::size_t> cells(grid_w * grid_h);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  for (std::size_t k = 0; k < occupancy; ++k) {
    const auto cat = kinds[rng.below(kinds.size())];
    const auto& attrs = catalog.categories()[cat].attributes;
    scene.slots[cells[k]] = Object{cat, attrs[rng.below(attrs.size())]};
  }
  return scene;
}

namespace {

std::vector<double> unit_direction(const RenderConfig& config, std::uint64_t part,
                                   std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  Rng rng(derive_seed(config.seed, {part, a, b, c}));
  std::vector<double> v(config.dim);
  double n = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace

std::vector<double> basis_vector(const RenderConfig& config, std::size_t category,
                                 std::size_t attribute, std::size_t position) {
  const auto uc = unit_direction(config, 1, category, 0, 0);
  const auto ua = unit_direction(config, 2, attribute, 0, 0);
  const auto up = unit_direction(config, 3, position, 0, 0);
  const auto uj = unit_direction(config, 4, category, attribute, position);
  std::vector<double> v(config.dim);
  double n = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = config.category_weight * uc[i] + config.attribute_weight * ua[i] +
           config.position_weight * up[i] + config.joint_weight * uj[i];
    n += v[i] * v[i];
  }
  if (!(n > 0.0)) throw invalid_argument("render weights give a zero basis vector");
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

RenderedImage render(const Scene& scene, const RenderConfig& config) {
  if (config.dim == 0) throw invalid_argument("render dimension must be positive");
  std::vector<double> sum(config.dim, 0.0);
  bool any = false;
  for (std::size_t p = 0; p < scene.slots.size(); ++p) {
    if (!scene.slots[p]) continue;
    any = true;
    auto b = basis_vector(config, scene.slots[p]->category, scene.slots[p]->attribute, p);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += b[i];
  }
  if (!any) throw invalid_argument("cannot render an empty scene");
  return RenderedImage::normalized(std::move(sum));
}

TokenSeq caption(const Scene& scene, const Vocab& vocab) {
  if (scene.grid_w != vocab.grid_w() || scene.grid_h != vocab.grid_h()) {
    throw invalid_argument("scene grid does not match the vocabulary");
  }
  TokenSeq out;
  for (std::size_t p = 0; p < scene.slots.size(); ++p) {
    if (!scene.slots[p]) continue;
    out.push_back(vocab.attribute_token(scene.slots[p]->attribute));
    out.push_back(vocab.category_token(scene.slots[p]->category));
    out.push_back(vocab.position_token(p));
  }
  out.push_back(model::kEos);
  return out;
}

Scene parse_caption(const TokenSeq& tokens, const Vocab& vocab, const ObjectCatalog& catalog) {
  if (tokens.empty() || tokens.back() != model::kEos) {
    throw Error(ErrorKind::kParse, "caption must end with EOS");
  }
  const std::size_t body = tokens.size() - 1;
  if (body == 0 || body % 3 != 0) {
    throw Error(ErrorKind::kParse, "caption must be a non-empty list of 3-token clauses");
  }
  Scene scene(vocab.grid_w(), vocab.grid_h());
  std::optional<std::size_t> last;
  for (std::size_t i = 0; i < body; i += 3) {
    auto a = vocab.attribute_of(tokens[i]);
    auto c = vocab.category_of(tokens[i + 1]);
    auto p = vocab.position_of(tokens[i + 2]);
    if (!a || !c || !p) {
      throw Error(ErrorKind::kParse, fmt::format("clause {} is not (attribute, category, "
                                                 "position)",
                                                 i / 3));
    }
    if (last && *p <= *last) {
      throw Error(ErrorKind::kParse, "caption clauses are not in row-major order");
    }
    if (!catalog.allows(*c, *a)) {
      throw Error(ErrorKind::kParse, fmt::format("clause {}: attribute not allowed", i / 3));
    }
    last = p;
    scene.slots[*p] = Object{*c, *a};
  }
  return scene;
}

// --- replacements -----------------------------------------------------------

std::vector<Replacement> propose_replacements(const Scene& scene, const ObjectCatalog& catalog) {
  std::vector<Replacement> out;
  for (std::size_t p = 0; p < scene.slots.size(); ++p) {
    if (!scene.slots[p]) continue;
    const auto old = scene.slots[p]->category;
    for (const auto& s : catalog.substitutes(old)) out.push_back({p, old, s.target, s.rationale});
  }
  return out;
}

void validate_replacement(const Scene& scene, const ObjectCatalog& catalog, const Replacement& r) {
  if (r.position >= scene.slots.size()) throw invalid_argument("replacement position out of range");
  if (!scene.slots[r.position]) throw invalid_argument("replacement refers to an empty cell");
  if (scene.slots[r.position]->category != r.old_category) {
    throw invalid_argument("replacement does not match the object in its cell");
  }
  if (r.new_category == r.old_category) throw invalid_argument("replacement keeps the same kind");
  if (!catalog.has_replacement(r.old_category, r.new_category)) {
    throw invalid_argument("replacement is not in the catalog table");
  }
}

Scene edit_scene(const Scene& scene, const Replacement& r, const ObjectCatalog& catalog) {
  if (r.position >= scene.slots.size() || !scene.slots[r.position]) {
    throw invalid_argument("replacement refers to an empty cell");
  }
  if (scene.slots[r.position]->category != r.old_category) {
    throw invalid_argument("replacement does not match the object in its cell");
  }
  if (r.new_category == r.old_category) throw invalid_argument("replacement keeps the same kind");
  if (r.new_category >= catalog.categories().size()) throw invalid_argument("unknown category");
  Scene out = scene;
  auto& obj = *out.slots[r.position];
  obj.category = r.new_category;
  if (!catalog.allows(obj.category, obj.attribute)) {
    obj.attribute = catalog.categories()[obj.category].attributes.front();
  }
  return out;
}

double similarity(const TokenSeq& caption_tokens, const RenderedImage& image, const Vocab& vocab,
                  const ObjectCatalog& catalog, const RenderConfig& render_config) {
  const Scene s = parse_caption(caption_tokens, vocab, catalog);
  const RenderedImage r = render(s, render_config);
  return model::cosine(r.features(), image.features());
}

// --- external proposer ------------------------------------------------------

ProposerRequest make_proposer_request(const Scene& scene, const Vocab& vocab,
                                      const ObjectCatalog& catalog) {
  ProposerRequest req;
  std::vector<std::string> clauses;
  std::set<std::string> seen;
  for (std::size_t p = 0; p < scene.slots.size(); ++p) {
    if (!scene.slots[p]) continue;
    const auto& name = catalog.categories()[scene.slots[p]->category].name;
    clauses.push_back(fmt::format("a {} {} at row {} column {}",
                                  catalog.attributes()[scene.slots[p]->attribute], name,
                                  p / vocab.grid_w(), p % vocab.grid_w()));
    if (seen.insert(name).second) req.objects.push_back(name);
  }
  std::string text;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    text += i == 0 ? clauses[i] : (i + 1 == clauses.size() ? " and " : ", ") + clauses[i];
  }
  text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
  req.caption_text = text + ".";
  std::string list;
  for (std::size_t i = 0; i < req.objects.size(); ++i) {
    list += (i ? ", " : "") + req.objects[i];
  }
  req.system = "You help build image-editing examples for a research dataset.";
  req.user = "Image caption: \"" + req.caption_text +
             "\". For each of these objects, name a replacement that would look out of "
             "place in the scene: " +
             list +
             ". Write one line per object as [what] -> [what], then one sentence on why "
             "the replacement is surprising.";
  return req;
}

ParsedProposals parse_proposer_response(const std::string& text, const Scene& scene,
                                        const ObjectCatalog& catalog) {
  // A name is either bracketed (spaces allowed) or a bare word.
  static const std::regex line_re(
      R"(^\s*(?:\[\s*([^\]]+?)\s*\]|([A-Za-z][A-Za-z_-]*))\s*->\s*)"
      R"((?:\[\s*([^\]]+?)\s*\]|([A-Za-z][A-Za-z_-]*))(?:\s*[:.,;]?\s*(.*?))?\s*$)");
  ParsedProposals out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::smatch m;
    if (!std::regex_match(line, m, line_re)) {
      throw ParseError(line_no, "expected '[what] -> [what]', got '" + line + "'");
    }
    auto lower = [](std::string s) {
      for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      return s;
    };
    const auto old_name = lower(m[1].matched ? m[1].str() : m[2].str());
    const auto new_name = lower(m[3].matched ? m[3].str() : m[4].str());
    auto old_cat = catalog.find_category(old_name);
    auto new_cat = catalog.find_category(new_name);
    if (!old_cat) {
      out.rejected.push_back({line, "unknown category '" + old_name + "'"});
      continue;
    }
    if (!new_cat) {
      out.rejected.push_back({line, "unknown category '" + new_name + "'"});
      continue;
    }
    if (!catalog.has_replacement(*old_cat, *new_cat)) {
      out.rejected.push_back({line, old_name + " -> " + new_name + " is not in the replacement table"});
      continue;
    }
    bool found = false;
    for (std::size_t p = 0; p < scene.slots.size(); ++p) {
      if (scene.slots[p] && scene.slots[p]->category == *old_cat) {
        out.accepted.push_back({p, *old_cat, *new_cat, m[5].str()});
        found = true;
      }
    }
    if (!found) out.rejected.push_back({line, "'" + old_name + "' is not in the scene"});
  }
  return out;
}

// --- filtering ----------------------------------------------------------------

std::vector<std::size_t> mutual_argmax_filter(const std::vector<std::vector<double>>& scores) {
  const std::size_t n = scores.size();
  for (const auto& row : scores) {
    if (row.size() != n) throw invalid_argument("score matrix must be square");
    for (double v : row) {
      if (std::isnan(v)) throw Error(ErrorKind::kNumeric, "score matrix contains NaN");
    }
  }
  std::vector<std::size_t> accepted;
  for (std::size_t k = 0; k < n; ++k) {
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      if (j != k && !(scores[k][j] < scores[k][k])) ok = false;  // caption k's best image
      if (j != k && !(scores[j][k] < scores[k][k])) ok = false;  // image k's best caption
    }
    if (ok) accepted.push_back(k);
  }
  return accepted;
}

bool ratio_gate(double sim_w, double sim_l, double threshold) {
  if (!(sim_w > 0.0) || !(sim_l > 0.0)) {
    throw invalid_argument("ratio gate needs positive similarity scores");
  }
  return sim_w / sim_l >= threshold;
}

}  // namespace vdpo::world
