#include "vdpo/cli/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vdpo/error.hpp"

namespace vdpo::cli {

using json = nlohmann::ordered_json;

namespace {

Error config_error(const std::string& what) { return Error(ErrorKind::kConfig, what); }

// Typed reads from one section, remembering which keys were consumed so
// leftovers can be reported.
class Section {
 public:
  Section(const json& root, const char* name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw config_error(std::string("section '") + name + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const json& v = obj_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw config_error("expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw config_error("expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw config_error("expected a number");
        out = v.get<T>();
      } else {
        if (!v.is_number_unsigned()) throw config_error("expected a non-negative integer");
        out = v.get<T>();
      }
    } catch (const Error& e) {
      throw config_error(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return obj_ && obj_->contains(key); }

  void finish() const {
    if (!obj_) return;
    for (const auto& [k, v] : obj_->items()) {
      if (!seen_.count(k)) throw config_error("unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

void DataSection::validate() const {
  world.validate();
  if (count == 0) throw config_error("data.count must be positive");
  if (!(response_ratio >= 0.0 && response_ratio <= 1.0)) {
    throw config_error("data.response_ratio must lie in [0, 1]");
  }
}

model::DecodeMode EvalSection::decode_mode() const {
  return sample ? model::DecodeMode::sample(seed, temperature) : model::DecodeMode::greedy();
}

void EvalSection::validate() const {
  if (discriminative == 0 && generative == 0) {
    throw config_error("eval needs at least one discriminative or generative item");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw config_error("eval.temperature must be positive");
  }
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  eval.validate();
  if (data.world.image_dim != model.image_dim) {
    throw config_error("data.image_dim must equal model.image_dim");
  }
  const auto ctx = world::WorldContext::make(data.world);
  try {
    ctx.vocab.check_fits(model);
  } catch (const Error& e) {
    throw config_error(e.what());
  }
}

objectives::UncondSource parse_uncond_flag(const std::string& s) {
  if (s == "dynamic") return objectives::UncondSource::kPolicyDynamic;
  if (s == "static") return objectives::UncondSource::kSftStatic;
  return objectives::parse_uncond_source(s);
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw config_error("config must be a JSON object");
  for (const auto& [k, v] : root.items()) {
    static const std::set<std::string> kSections{"model", "data", "train", "objective", "eval"};
    if (!kSections.count(k)) throw config_error("unknown section '" + k + "'");
  }

  RunConfig c;
  {
    Section s(root, "model");
    s.get("vocab_size", c.model.vocab_size);
    s.get("image_dim", c.model.image_dim);
    s.get("embed_dim", c.model.embed_dim);
    s.get("hidden_dim", c.model.hidden_dim);
    s.get("max_query_len", c.model.max_query_len);
    s.get("max_response_len", c.model.max_response_len);
    s.get("seed", c.model.seed);
    s.finish();
  }
  {
    Section s(root, "data");
    auto& w = c.data.world;
    s.get("grid_w", w.grid_w);
    s.get("grid_h", w.grid_h);
    s.get("min_objects", w.min_objects);
    s.get("max_objects", w.max_objects);
    w.image_dim = c.model.image_dim;
    s.get("image_dim", w.image_dim);
    s.get("render_seed", w.render_seed);
    std::string catalog;
    s.get("catalog", catalog);
    if (!catalog.empty()) w.catalog_path = catalog;
    s.get("inpaint_noise", w.inpaint_noise);
    s.get("inpaint_failure", w.inpaint_failure);
    s.get("max_candidates", w.max_candidates);
    s.get("gate_threshold", w.gate_threshold);
    s.get("describe_fraction", w.describe_fraction);
    s.get("max_attempts", w.max_attempts);
    s.get("seed", c.data.seed);
    s.get("count", c.data.count);
    s.get("response_ratio", c.data.response_ratio);
    s.finish();
  }
  {
    Section s(root, "train");
    auto& t = c.train;
    s.get("learning_rate", t.learning_rate);
    s.get("batch_size", t.batch_size);
    s.get("epochs", t.epochs);
    s.get("seed", t.seed);
    s.get("checkpoint_interval", t.checkpoint_interval);
    s.get("eval_interval", t.eval_interval);
    s.get("max_grad_norm", t.max_grad_norm);
    s.get("monitor_ratio", t.monitor_ratio);
    s.finish();
  }
  {
    Section s(root, "objective");
    std::string name = trainer::objective_name(c.train.objective);
    std::string variant = "plain", uncond = "dynamic";
    double beta = 0.1, gamma = 0.75, alpha = 0.0;
    s.get("name", name);
    s.get("beta", beta);
    s.get("gamma", gamma);
    s.get("alpha", alpha);
    s.get("variant", variant);
    s.get("uncond", uncond);
    s.finish();
    if (s.has("gamma") && s.has("alpha")) {
      throw config_error("objective: give gamma or alpha, not both");
    }
    c.train.objective = trainer::parse_objective(name);
    if (c.train.objective == trainer::Objective::kDpo &&
        (s.has("gamma") || s.has("alpha") || s.has("variant") || s.has("uncond"))) {
      throw config_error("objective: guidance settings contradict the dpo objective");
    }
    const auto v = objectives::parse_variant(variant);
    const auto u = parse_uncond_flag(uncond);
    c.train.guidance = s.has("alpha") ? objectives::GuidanceConfig::from_alpha(beta, alpha, v, u)
                                      : objectives::GuidanceConfig::from_gamma(beta, gamma, v, u);
  }
  {
    Section s(root, "eval");
    auto& e = c.eval;
    s.get("discriminative", e.discriminative);
    s.get("generative", e.generative);
    s.get("seed", e.seed);
    std::string decode = "greedy";
    s.get("decode", decode);
    if (decode != "greedy" && decode != "sample") {
      throw config_error("eval.decode must be 'greedy' or 'sample'");
    }
    e.sample = decode == "sample";
    s.get("temperature", e.temperature);
    s.finish();
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& c) {
  const auto& w = c.data.world;
  const auto& g = c.train.guidance;
  json j;
  j["model"] = {{"vocab_size", c.model.vocab_size},     {"image_dim", c.model.image_dim},
                {"embed_dim", c.model.embed_dim},       {"hidden_dim", c.model.hidden_dim},
                {"max_query_len", c.model.max_query_len},
                {"max_response_len", c.model.max_response_len},
                {"seed", c.model.seed}};
  j["data"] = {{"grid_w", w.grid_w},
               {"grid_h", w.grid_h},
               {"min_objects", w.min_objects},
               {"max_objects", w.max_objects},
               {"image_dim", w.image_dim},
               {"render_seed", w.render_seed},
               {"catalog", w.catalog_path ? w.catalog_path->string() : std::string()},
               {"inpaint_noise", w.inpaint_noise},
               {"inpaint_failure", w.inpaint_failure},
               {"max_candidates", w.max_candidates},
               {"gate_threshold", w.gate_threshold},
               {"describe_fraction", w.describe_fraction},
               {"max_attempts", w.max_attempts},
               {"seed", c.data.seed},
               {"count", c.data.count},
               {"response_ratio", c.data.response_ratio}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"checkpoint_interval", c.train.checkpoint_interval},
                {"eval_interval", c.train.eval_interval},
                {"max_grad_norm", c.train.max_grad_norm},
                {"monitor_ratio", c.train.monitor_ratio}};
  json obj = {{"name", trainer::objective_name(c.train.objective)}, {"beta", g.beta}};
  if (c.train.objective == trainer::Objective::kVdpo) {
    // alpha is derived and not echoed, so the echo parses back unchanged.
    obj["gamma"] = g.gamma;
    obj["variant"] = objectives::variant_name(g.variant);
    obj["uncond"] = objectives::uncond_source_name(g.uncond_source);
  }
  j["objective"] = obj;
  j["eval"] = {{"discriminative", c.eval.discriminative},
               {"generative", c.eval.generative},
               {"seed", c.eval.seed},
               {"decode", c.eval.sample ? "sample" : "greedy"},
               {"temperature", c.eval.temperature}};
  return j.dump(2) + "\n";
}

}  // namespace vdpo::cli
