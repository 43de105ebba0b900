#include "vdpo/world/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdpo/error.hpp"
#include "vdpo/parallel.hpp"

namespace vdpo::world {

using json = nlohmann::json;

void WorldConfig::validate() const {
  if (grid_w == 0 || grid_h == 0) throw Error(ErrorKind::kConfig, "grid extents must be positive");
  if (min_objects < 1 || min_objects > max_objects || max_objects > grid_w * grid_h) {
    throw Error(ErrorKind::kConfig, "need 1 <= min_objects <= max_objects <= grid cells");
  }
  if (image_dim == 0) throw Error(ErrorKind::kConfig, "image_dim must be positive");
  if (!(inpaint_noise >= 0.0) || !std::isfinite(inpaint_noise)) {
    throw Error(ErrorKind::kConfig, "inpaint_noise must be non-negative");
  }
  if (!(inpaint_failure >= 0.0 && inpaint_failure <= 1.0)) {
    throw Error(ErrorKind::kConfig, "inpaint_failure must lie in [0, 1]");
  }
  if (max_candidates == 0) throw Error(ErrorKind::kConfig, "max_candidates must be positive");
  if (!(gate_threshold > 0.0) || !std::isfinite(gate_threshold)) {
    throw Error(ErrorKind::kConfig, "gate_threshold must be positive");
  }
  if (!(describe_fraction >= 0.0 && describe_fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "describe_fraction must lie in [0, 1]");
  }
  if (max_attempts == 0) throw Error(ErrorKind::kConfig, "max_attempts must be positive");
}

WorldContext WorldContext::make(const WorldConfig& config) {
  config.validate();
  ObjectCatalog catalog =
      config.catalog_path ? ObjectCatalog::load(*config.catalog_path) : ObjectCatalog::builtin();
  Vocab vocab(catalog, config.grid_w, config.grid_h);
  return {std::move(catalog), vocab, RenderConfig{config.image_dim, config.render_seed}};
}

const char* template_name(QuestionTemplate t) {
  switch (t) {
    case QuestionTemplate::kIsThereOld: return "is-there-old";
    case QuestionTemplate::kIsThereNew: return "is-there-new";
    case QuestionTemplate::kWhatAt: return "what-at";
  }
  return "?";
}

TokenSeq is_there_query(const Vocab& vocab, std::size_t category) {
  return {kQIsThere, vocab.category_token(category), model::kEos};
}
TokenSeq describe_query() { return {kQDescribe, model::kEos}; }
TokenSeq what_at_query(const Vocab& vocab, std::size_t position) {
  return {kQWhatAt, vocab.position_token(position), model::kEos};
}
TokenSeq yes_response() { return {model::kYes, model::kEos}; }
TokenSeq no_response() { return {model::kNo, model::kEos}; }

namespace {

std::size_t count_kind(const Scene& s, std::size_t category) {
  return static_cast<std::size_t>(std::count_if(
      s.slots.begin(), s.slots.end(), [&](const auto& o) { return o && o->category == category; }));
}

}  // namespace

bool template_applies(const Scene& scene, const Replacement& r, QuestionTemplate q) {
  switch (q) {
    case QuestionTemplate::kIsThereOld: return count_kind(scene, r.old_category) == 1;
    case QuestionTemplate::kIsThereNew: return count_kind(scene, r.new_category) == 0;
    case QuestionTemplate::kWhatAt: return true;
  }
  return false;
}

PreferenceRecord build_image_contrast(const Scene& scene, const Replacement& r,
                                      QuestionTemplate q, const WorldContext& ctx) {
  validate_replacement(scene, ctx.catalog, r);
  if (!template_applies(scene, r, q)) {
    throw invalid_argument(std::string("question template '") + template_name(q) +
                           "' does not separate the scene from its edit");
  }
  const Scene edited = edit_scene(scene, r, ctx.catalog);
  TokenSeq x, y;
  switch (q) {
    case QuestionTemplate::kIsThereOld:
      x = is_there_query(ctx.vocab, r.old_category);
      y = yes_response();
      break;
    case QuestionTemplate::kIsThereNew:
      x = is_there_query(ctx.vocab, r.new_category);
      y = no_response();
      break;
    case QuestionTemplate::kWhatAt: {
      const auto& obj = *scene.slots[r.position];
      x = what_at_query(ctx.vocab, r.position);
      y = {ctx.vocab.attribute_token(obj.attribute), ctx.vocab.category_token(obj.category),
           model::kEos};
      break;
    }
  }
  return PreferenceRecord::image_contrast(render(scene, ctx.render), render(edited, ctx.render),
                                          std::move(x), std::move(y));
}

std::optional<std::size_t> sample_distractor(const Scene& scene, const ObjectCatalog& catalog,
                                             Rng& rng) {
  std::vector<std::size_t> absent;
  for (std::size_t c = 0; c < catalog.categories().size(); ++c) {
    if (!scene.contains(c)) absent.push_back(c);
  }
  if (absent.empty()) return std::nullopt;
  return absent[rng.below(absent.size())];
}

ResponseContrastDraft build_response_contrast(const Scene& scene, ResponseTask task, Rng& rng,
                                              const WorldContext& ctx) {
  scene.validate(ctx.catalog);
  auto d = sample_distractor(scene, ctx.catalog, rng);
  if (!d) throw invalid_argument("no distractor available: every object kind is in the scene");
  const RenderedImage v = render(scene, ctx.render);
  if (task == ResponseTask::kIsThere) {
    return {PreferenceRecord::response_contrast(v, is_there_query(ctx.vocab, *d), no_response(),
                                                yes_response()),
            *d};
  }
  std::vector<std::size_t> cells;
  for (std::size_t p = 0; p < scene.slots.size(); ++p) {
    if (scene.slots[p]) cells.push_back(p);
  }
  const std::size_t p = cells[rng.below(cells.size())];
  Scene wrong = scene;
  auto& obj = *wrong.slots[p];
  obj.category = *d;
  if (!ctx.catalog.allows(obj.category, obj.attribute)) {
    obj.attribute = ctx.catalog.categories()[obj.category].attributes.front();
  }
  return {PreferenceRecord::response_contrast(v, describe_query(), caption(scene, ctx.vocab),
                                              caption(wrong, ctx.vocab)),
          *d};
}

RenderedImage inpaint(const Scene& scene, const Replacement& r, const WorldContext& ctx,
                      const WorldConfig& config, Rng& rng) {
  Scene painted = scene;
  if (rng.uniform() < config.inpaint_failure) {
    std::vector<std::size_t> others;
    for (const auto& s : ctx.catalog.substitutes(r.old_category)) {
      if (s.target != r.new_category) others.push_back(s.target);
    }
    if (!others.empty()) {
      Replacement wrong = r;
      wrong.new_category = others[rng.below(others.size())];
      painted = edit_scene(scene, wrong, ctx.catalog);
    }  // otherwise the edit silently does nothing
  } else {
    painted = edit_scene(scene, r, ctx.catalog);
  }
  const RenderedImage clean = render(painted, ctx.render);
  std::vector<double> v(clean.features().begin(), clean.features().end());
  for (auto& x : v) x += config.inpaint_noise * rng.normal();
  return RenderedImage::normalized(std::move(v));
}

bool operator==(const DatasetRecord& a, const DatasetRecord& b) {
  const auto& x = a.record;
  const auto& y = b.record;
  return x.kind == y.kind && x.image_w == y.image_w && x.image_l == y.image_l &&
         x.query == y.query && x.response_w == y.response_w && x.response_l == y.response_l &&
         a.provenance == b.provenance;
}

GenStats& GenStats::operator+=(const GenStats& o) {
  image_records += o.image_records;
  response_records += o.response_records;
  scenes += o.scenes;
  candidates += o.candidates;
  filter_accepted += o.filter_accepted;
  gate_checked += o.gate_checked;
  gate_passed += o.gate_passed;
  nonpositive += o.nonpositive;
  template_rejected += o.template_rejected;
  return *this;
}

double GenStats::filter_pass_rate() const {
  return candidates ? static_cast<double>(filter_accepted) / static_cast<double>(candidates) : 0.0;
}

double GenStats::gate_pass_rate() const {
  return gate_checked ? static_cast<double>(gate_passed) / static_cast<double>(gate_checked) : 0.0;
}

namespace {

constexpr std::uint64_t kImageStream = 1;
constexpr std::uint64_t kResponseStream = 2;
constexpr std::uint64_t kDiscriminativeStream = 3;
constexpr std::uint64_t kGenerativeStream = 4;

Scene draw_scene(const WorldConfig& config, const WorldContext& ctx, Rng& rng) {
  const std::size_t span = config.max_objects - config.min_objects + 1;
  const std::size_t occupancy = config.min_objects + rng.below(span);
  return gen_scene(rng.next(), ctx.catalog, occupancy, config.grid_w, config.grid_h);
}

struct Attempt {
  std::optional<DatasetRecord> record;
  GenStats stats;
};

Attempt try_image_contrast(const WorldConfig& config, const WorldContext& ctx,
                           std::uint64_t attempt_seed) {
  Attempt out;
  Rng rng(attempt_seed);
  const Scene scene = draw_scene(config, ctx, rng);
  ++out.stats.scenes;
  auto proposals = propose_replacements(scene, ctx.catalog);
  if (proposals.empty()) return out;
  rng.shuffle(proposals);
  if (proposals.size() > config.max_candidates) proposals.resize(config.max_candidates);

  const std::size_t n = proposals.size();
  std::vector<TokenSeq> captions;
  std::vector<RenderedImage> images;
  for (const auto& r : proposals) {
    captions.push_back(caption(edit_scene(scene, r, ctx.catalog), ctx.vocab));
    images.push_back(inpaint(scene, r, ctx, config, rng));
  }
  std::vector<std::vector<double>> scores(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      scores[i][j] = similarity(captions[i], images[j], ctx.vocab, ctx.catalog, ctx.render);
    }
  }
  const auto accepted = mutual_argmax_filter(scores);
  out.stats.candidates += n;
  out.stats.filter_accepted += accepted.size();

  const TokenSeq original_caption = caption(scene, ctx.vocab);
  const RenderedImage original = render(scene, ctx.render);
  for (auto k : accepted) {
    const double sim_w = similarity(original_caption, original, ctx.vocab, ctx.catalog, ctx.render);
    const double sim_l = similarity(original_caption, images[k], ctx.vocab, ctx.catalog, ctx.render);
    if (!(sim_w > 0.0) || !(sim_l > 0.0)) {
      ++out.stats.nonpositive;
      continue;
    }
    ++out.stats.gate_checked;
    if (!ratio_gate(sim_w, sim_l, config.gate_threshold)) continue;
    ++out.stats.gate_passed;

    std::vector<QuestionTemplate> usable;
    for (auto q : {QuestionTemplate::kIsThereOld, QuestionTemplate::kIsThereNew,
                   QuestionTemplate::kWhatAt}) {
      if (template_applies(scene, proposals[k], q)) usable.push_back(q);
    }
    if (usable.empty()) {
      ++out.stats.template_rejected;
      continue;
    }
    const auto q = usable[rng.below(usable.size())];
    const auto& r = proposals[k];
    DatasetRecord rec{build_image_contrast(scene, r, q, ctx), {}};
    rec.provenance.scene_digest = scene.digest();
    rec.provenance.replacement =
        ProvenanceReplacement{r.position, ctx.catalog.categories()[r.old_category].name,
                              ctx.catalog.categories()[r.new_category].name, r.rationale};
    rec.provenance.sim_w = sim_w;
    rec.provenance.sim_l = sim_l;
    out.record = std::move(rec);
    ++out.stats.image_records;
    return out;
  }
  return out;
}

Attempt try_response_contrast(const WorldConfig& config, const WorldContext& ctx,
                              std::uint64_t attempt_seed) {
  Attempt out;
  Rng rng(attempt_seed);
  const Scene scene = draw_scene(config, ctx, rng);
  ++out.stats.scenes;
  const auto task =
      rng.uniform() < config.describe_fraction ? ResponseTask::kDescribe : ResponseTask::kIsThere;
  if (!sample_distractor(scene, ctx.catalog, rng)) return out;
  auto draft = build_response_contrast(scene, task, rng, ctx);
  DatasetRecord rec{std::move(draft.record), {}};
  rec.provenance.scene_digest = scene.digest();
  if (task == ResponseTask::kDescribe) {
    const auto& v = rec.record.image_w;
    const double sim_w = similarity(rec.record.response_w, v, ctx.vocab, ctx.catalog, ctx.render);
    const double sim_l = similarity(rec.record.response_l, v, ctx.vocab, ctx.catalog, ctx.render);
    if (!(sim_w > 0.0) || !(sim_l > 0.0)) {
      ++out.stats.nonpositive;
      return out;
    }
    ++out.stats.gate_checked;
    if (!ratio_gate(sim_w, sim_l, config.gate_threshold)) return out;
    ++out.stats.gate_passed;
    rec.provenance.sim_w = sim_w;
    rec.provenance.sim_l = sim_l;
  }
  out.record = std::move(rec);
  ++out.stats.response_records;
  return out;
}

}  // namespace

GeneratedDataset generate_dataset(const WorldConfig& config, const WorldContext& ctx,
                                  std::uint64_t seed, std::size_t count, double response_ratio) {
  config.validate();
  if (!(response_ratio >= 0.0 && response_ratio <= 1.0)) {
    throw Error(ErrorKind::kConfig, "kind ratio must lie in [0, 1]");
  }
  const auto n_response =
      static_cast<std::size_t>(std::llround(static_cast<double>(count) * response_ratio));
  const std::size_t n_image = count - n_response;

  std::vector<Attempt> results(count);
  parallel_for(count, [&](std::size_t i) {
    const bool image = i < n_image;
    const std::uint64_t record_seed =
        image ? derive_seed(seed, {kImageStream, i}) : derive_seed(seed, {kResponseStream, i - n_image});
    Attempt total;
    for (std::size_t a = 0; a < config.max_attempts; ++a) {
      const std::uint64_t s = derive_seed(record_seed, {a});
      Attempt one = image ? try_image_contrast(config, ctx, s) : try_response_contrast(config, ctx, s);
      total.stats += one.stats;
      if (one.record) {
        total.record = std::move(one.record);
        total.record->provenance.seed = record_seed;
        break;
      }
    }
    if (!total.record) {
      throw Error(ErrorKind::kState,
                  fmt::format("no valid pair after {} attempts (record seed {})",
                              config.max_attempts, record_seed));
    }
    results[i] = std::move(total);
  });

  GeneratedDataset out;
  for (auto& r : results) {
    out.stats += r.stats;
    out.records.push_back(std::move(*r.record));
  }
  std::stable_sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) {
    return a.provenance.seed < b.provenance.seed;
  });
  return out;
}

// --- JSONL --------------------------------------------------------------------

namespace {

std::string real(double v) { return fmt::format("{:.17g}", v); }

std::string reals(std::span<const double> v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + real(v[i]);
  return s + "]";
}

std::string tokens(const TokenSeq& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
  return s + "]";
}

std::string opt_real(const std::optional<double>& v) { return v ? real(*v) : "null"; }

std::string quoted(const std::string& s) { return json(s).dump(); }

RenderedImage image_from(const json& j, const char* key) {
  auto v = j.at(key).get<std::vector<double>>();
  return RenderedImage(std::move(v));
}

TokenSeq tokens_from(const json& j, const char* key) {
  return j.at(key).get<TokenSeq>();
}

void require_keys(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw invalid_argument(std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) ==
        keys.end()) {
      throw invalid_argument(std::string(where) + ": unexpected key '" + it.key() + "'");
    }
  }
}

template <typename F>
auto with_line(std::size_t line_no, F&& f) {
  try {
    return f();
  } catch (const ParseError&) {
    throw;
  } catch (const json::exception& e) {
    throw ParseError(line_no, e.what());
  } catch (const Error& e) {
    throw ParseError(line_no, e.what());
  }
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write to " + path.string() + " failed");
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t") == std::string::npos; }

}  // namespace

std::string record_to_json(const DatasetRecord& r) {
  const auto& p = r.record;
  std::string s = "{\"kind\":" + quoted(objectives::record_kind_name(p.kind));
  if (p.kind == RecordKind::kImageContrast) {
    s += ",\"image_w\":" + reals(p.image_w.features());
    s += ",\"image_l\":" + reals(p.image_l.features());
    s += ",\"query\":" + tokens(p.query);
    s += ",\"response\":" + tokens(p.response_w);
  } else {
    s += ",\"image\":" + reals(p.image_w.features());
    s += ",\"query\":" + tokens(p.query);
    s += ",\"response_w\":" + tokens(p.response_w);
    s += ",\"response_l\":" + tokens(p.response_l);
  }
  const auto& pr = r.provenance;
  s += ",\"provenance\":{\"seed\":" + std::to_string(pr.seed);
  s += ",\"scene_digest\":" + quoted(pr.scene_digest);
  s += ",\"replacement\":";
  if (pr.replacement) {
    const auto& rep = *pr.replacement;
    s += "{\"position\":" + std::to_string(rep.position) + ",\"old\":" + quoted(rep.old_name) +
         ",\"new\":" + quoted(rep.new_name) + ",\"rationale\":" + quoted(rep.rationale) + "}";
  } else {
    s += "null";
  }
  s += ",\"sim_w\":" + opt_real(pr.sim_w) + ",\"sim_l\":" + opt_real(pr.sim_l) + "}}";
  return s;
}

DatasetRecord record_from_json(const std::string& line, std::size_t line_no) {
  return with_line(line_no, [&] {
    const json j = json::parse(line);
    if (!j.is_object()) throw invalid_argument("record must be a JSON object");
    const auto kind = j.at("kind").get<std::string>();
    DatasetRecord r;
    if (kind == "image-contrast") {
      require_keys(j, {"kind", "image_w", "image_l", "query", "response", "provenance"}, "record");
      r.record = PreferenceRecord::image_contrast(image_from(j, "image_w"), image_from(j, "image_l"),
                                                  tokens_from(j, "query"),
                                                  tokens_from(j, "response"));
    } else if (kind == "response-contrast") {
      require_keys(j, {"kind", "image", "query", "response_w", "response_l", "provenance"},
                   "record");
      r.record = PreferenceRecord::response_contrast(image_from(j, "image"),
                                                     tokens_from(j, "query"),
                                                     tokens_from(j, "response_w"),
                                                     tokens_from(j, "response_l"));
    } else {
      throw invalid_argument("unknown record kind '" + kind + "'");
    }
    const json& p = j.at("provenance");
    require_keys(p, {"seed", "scene_digest", "replacement", "sim_w", "sim_l"}, "provenance");
    r.provenance.seed = p.at("seed").get<std::uint64_t>();
    r.provenance.scene_digest = p.at("scene_digest").get<std::string>();
    if (!p.at("replacement").is_null()) {
      const json& rep = p.at("replacement");
      require_keys(rep, {"position", "old", "new", "rationale"}, "replacement");
      r.provenance.replacement =
          ProvenanceReplacement{rep.at("position").get<std::size_t>(), rep.at("old").get<std::string>(),
                                rep.at("new").get<std::string>(), rep.at("rationale").get<std::string>()};
    }
    if (!p.at("sim_w").is_null()) r.provenance.sim_w = p.at("sim_w").get<double>();
    if (!p.at("sim_l").is_null()) r.provenance.sim_l = p.at("sim_l").get<double>();
    return r;
  });
}

void write_jsonl(const std::vector<DatasetRecord>& records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) text += record_to_json(r) + "\n";
  write_text(path, text);
}

std::vector<DatasetRecord> read_jsonl(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  std::vector<DatasetRecord> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    out.push_back(record_from_json(lines[i], i + 1));
  }
  return out;
}

std::vector<PreferenceRecord> preference_records(const std::vector<DatasetRecord>& records) {
  std::vector<PreferenceRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.record);
  return out;
}

std::vector<Triple> sft_triples(const std::vector<DatasetRecord>& records) {
  std::vector<Triple> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({r.record.image_w, r.record.query, r.record.response_w});
  }
  return out;
}

// --- evaluation probes --------------------------------------------------------

EvalItems make_eval_items(const WorldConfig& config, const WorldContext& ctx, std::uint64_t seed,
                          std::size_t discriminative, std::size_t generative) {
  config.validate();
  EvalItems items;
  for (std::size_t i = 0; i < discriminative; ++i) {
    Rng rng(derive_seed(seed, {kDiscriminativeStream, i}));
    const Scene scene = draw_scene(config, ctx, rng);
    DiscriminativeItem item;
    item.image = render(scene, ctx.render);
    const bool ask_present = i % 2 == 0;
    std::size_t category;
    auto absent = sample_distractor(scene, ctx.catalog, rng);
    if (ask_present || !absent) {
      std::vector<std::size_t> present;
      for (const auto& s : scene.slots) {
        if (s) present.push_back(s->category);
      }
      category = present[rng.below(present.size())];
      item.gold_yes = true;
    } else {
      category = *absent;
      item.gold_yes = false;
    }
    item.query = is_there_query(ctx.vocab, category);
    items.discriminative.push_back(std::move(item));
  }
  for (std::size_t i = 0; i < generative; ++i) {
    Rng rng(derive_seed(seed, {kGenerativeStream, i}));
    const Scene scene = draw_scene(config, ctx, rng);
    GenerativeItem item;
    item.image = render(scene, ctx.render);
    item.query = describe_query();
    std::set<TokenId> truth, distractors;
    for (const auto& s : scene.slots) {
      if (!s) continue;
      truth.insert(ctx.vocab.category_token(s->category));
      for (const auto& sub : ctx.catalog.substitutes(s->category)) {
        distractors.insert(ctx.vocab.category_token(sub.target));
      }
    }
    for (auto t : truth) distractors.erase(t);
    item.truth.assign(truth.begin(), truth.end());
    item.distractors.assign(distractors.begin(), distractors.end());
    items.generative.push_back(std::move(item));
  }
  return items;
}

void write_eval_items(const EvalItems& items, const std::filesystem::path& path) {
  std::string text;
  for (const auto& d : items.discriminative) {
    text += "{\"kind\":\"discriminative\",\"image\":" + reals(d.image.features()) +
            ",\"query\":" + tokens(d.query) + ",\"gold\":" + (d.gold_yes ? "\"yes\"" : "\"no\"") +
            "}\n";
  }
  for (const auto& g : items.generative) {
    text += "{\"kind\":\"generative\",\"image\":" + reals(g.image.features()) +
            ",\"query\":" + tokens(g.query) + ",\"truth\":" + tokens(g.truth) +
            ",\"distractors\":" + tokens(g.distractors) + "}\n";
  }
  write_text(path, text);
}

EvalItems read_eval_items(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  EvalItems items;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    with_line(i + 1, [&] {
      const json j = json::parse(lines[i]);
      if (!j.is_object()) throw invalid_argument("item must be a JSON object");
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "discriminative") {
        require_keys(j, {"kind", "image", "query", "gold"}, "item");
        const auto gold = j.at("gold").get<std::string>();
        if (gold != "yes" && gold != "no") throw invalid_argument("gold must be \"yes\" or \"no\"");
        TokenSeq q = tokens_from(j, "query");
        if (q.empty() || q.back() != model::kEos) throw invalid_argument("query must end with EOS");
        items.discriminative.push_back({image_from(j, "image"), std::move(q), gold == "yes"});
      } else if (kind == "generative") {
        require_keys(j, {"kind", "image", "query", "truth", "distractors"}, "item");
        GenerativeItem g{image_from(j, "image"), tokens_from(j, "query"),
                         j.at("truth").get<std::vector<TokenId>>(),
                         j.at("distractors").get<std::vector<TokenId>>()};
        for (auto t : g.truth) {
          if (std::find(g.distractors.begin(), g.distractors.end(), t) != g.distractors.end()) {
            throw invalid_argument("truth and distractor sets overlap");
          }
        }
        items.generative.push_back(std::move(g));
      } else {
        throw invalid_argument("unknown item kind '" + kind + "'");
      }
      return 0;
    });
  }
  return items;
}

}  // namespace vdpo::world
