#include "vdpo/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdpo/digest.hpp"
#include "vdpo/error.hpp"
#include "vdpo/model/checkpoint.hpp"
#include "vdpo/parallel.hpp"
#include "vdpo/rng.hpp"

namespace vdpo::trainer {

const char* objective_name(Objective o) { return o == Objective::kDpo ? "dpo" : "vdpo"; }

Objective parse_objective(const std::string& s) {
  if (s == "dpo") return Objective::kDpo;
  if (s == "vdpo") return Objective::kVdpo;
  throw Error(ErrorKind::kConfig, "unknown objective '" + s + "' (expected dpo or vdpo)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::kConfig, "learning rate must be positive");
  }
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "batch size must be at least 1");
  if (!(max_grad_norm >= 0.0) || !std::isfinite(max_grad_norm)) {
    throw Error(ErrorKind::kConfig, "max_grad_norm must be non-negative");
  }
  try {
    guidance.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  if (guidance.gamma > 1.0) throw Error(ErrorKind::kConfig, "gamma must not exceed 1");
}

// --- optimizer ------------------------------------------------------------------

AdamState AdamState::zeros(const model::ModelConfig& config) {
  return {PolicyParams::zeros(config), PolicyParams::zeros(config), 0};
}

void AdamState::apply(PolicyParams& params, const PolicyParams& grad, double learning_rate) {
  ++step;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
  auto pt = params.tensors();
  auto gt = grad.tensors();
  auto mt = m.tensors();
  auto vt = v.tensors();
  for (std::size_t t = 0; t < pt.size(); ++t) {
    auto p = pt[t].values();
    auto g = gt[t].values();
    auto mm = mt[t].values();
    auto vv = vt[t].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      mm[i] = kBeta1 * mm[i] + (1.0 - kBeta1) * g[i];
      vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * g[i] * g[i];
      p[i] -= learning_rate * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + kEpsilon);
    }
  }
}

// --- log ----------------------------------------------------------------------

void TrainLog::validate() const {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    if (i > 0 && s.step <= steps[i - 1].step) {
      throw Error(ErrorKind::kState, "train log step indices are not increasing");
    }
    for (double x : {s.loss, s.margin, s.grad_norm, s.ratio_max}) {
      if (!std::isfinite(x)) {
        throw Error(ErrorKind::kState, fmt::format("non-finite entry at step {}", s.step));
      }
    }
  }
  for (const auto& e : evals) {
    for (const auto& [k, v] : e.metrics) {
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::kState, fmt::format("non-finite metric {} at step {}", k, e.step));
      }
    }
  }
}

double TrainLog::epoch_mean_loss(std::uint64_t epoch) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : steps) {
    if (s.epoch == epoch) {
      sum += s.loss;
      ++n;
    }
  }
  if (n == 0) throw invalid_argument(fmt::format("no steps logged for epoch {}", epoch));
  return sum / static_cast<double>(n);
}

std::string TrainLog::to_csv() const {
  std::string out = "step,loss,margin,gradnorm,prop1max\n";
  for (const auto& s : steps) {
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", s.step, s.loss, s.margin,
                       s.grad_norm, s.ratio_max);
  }
  return out;
}

std::string TrainLog::summary_json() const {
  nlohmann::ordered_json j;
  j["steps"] = steps.size();
  if (!steps.empty()) {
    j["first_loss"] = steps.front().loss;
    j["final_loss"] = steps.back().loss;
    j["final_margin"] = steps.back().margin;
    double worst = 0.0;
    for (const auto& s : steps) worst = std::max(worst, s.ratio_max);
    j["max_prop1_ratio"] = worst;
    auto epochs = nlohmann::ordered_json::array();
    for (std::uint64_t e = 0; e <= steps.back().epoch; ++e) {
      if (std::any_of(steps.begin(), steps.end(), [&](const auto& s) { return s.epoch == e; })) {
        epochs.push_back({{"epoch", e}, {"mean_loss", epoch_mean_loss(e)}});
      }
    }
    j["epochs"] = epochs;
  }
  auto ev = nlohmann::ordered_json::array();
  for (const auto& e : evals) ev.push_back({{"step", e.step}, {"metrics", e.metrics}});
  j["evals"] = ev;
  return j.dump(2) + "\n";
}

// --- trainer ------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, PolicyParams init, std::size_t records, RecordLoss loss,
                 RatioProbe probe, RunIdentity identity, std::function<void()> invariant_check)
    : config_(std::move(config)),
      records_(records),
      loss_(std::move(loss)),
      probe_(std::move(probe)),
      invariant_check_(std::move(invariant_check)),
      state_{init, AdamState::zeros(init.config()), {}, std::move(identity)} {
  config_.validate();
  if (records_ == 0) throw invalid_argument("training data is empty");
}

std::uint64_t Trainer::steps_per_epoch() const {
  return (records_ + config_.batch_size - 1) / config_.batch_size;
}

std::vector<std::size_t> Trainer::batch_indices(std::uint64_t s) const {
  const std::uint64_t per = steps_per_epoch();
  const std::uint64_t epoch = s / per;
  const std::uint64_t b = s % per;
  std::vector<std::size_t> perm(records_);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(config_.seed, {epoch}));
  rng.shuffle(perm);
  const std::size_t lo = b * config_.batch_size;
  const std::size_t hi = std::min(records_, lo + config_.batch_size);
  return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
}

const StepRecord& Trainer::advance() {
  if (done()) throw Error(ErrorKind::kState, "training already finished");
  const std::uint64_t s = step();
  const auto batch = batch_indices(s);

  std::vector<objectives::LossOutput> outs(batch.size());
  const PolicyParams& params = state_.params;
  parallel_for(batch.size(), [&](std::size_t i) { outs[i] = loss_(params, batch[i]); });

  PolicyParams grad = PolicyParams::zeros(params.config());
  double loss = 0.0, margin = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (!outs[i].grad) throw Error(ErrorKind::kState, "record loss returned no gradient");
    loss += outs[i].loss;
    margin += outs[i].u;
    auto dst = grad.tensors();
    auto src = outs[i].grad->tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
      auto d = dst[t].values();
      auto g = src[t].values();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  double norm2 = 0.0;
  for (auto& t : grad.tensors()) {
    for (auto& x : t.values()) {
      x *= inv;
      norm2 += x * x;
    }
  }
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm) || !std::isfinite(loss)) {
    throw Error(ErrorKind::kNumeric,
                fmt::format("non-finite gradient or loss at step {} (batch loss {}, first record {})",
                            s + 1, loss * inv, batch.front()));
  }
  if (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm) {
    const double k = config_.max_grad_norm / norm;
    for (auto& t : grad.tensors()) {
      for (auto& x : t.values()) x *= k;
    }
  }

  StepRecord rec;
  rec.epoch = s / steps_per_epoch();
  rec.loss = loss * inv;
  rec.margin = margin * inv;
  rec.grad_norm = norm;
  rec.ratio_max = config_.monitor_ratio && probe_ ? probe_(params, batch) : 0.0;

  state_.optimizer.apply(state_.params, grad, config_.learning_rate);
  rec.step = state_.optimizer.step;
  if (invariant_check_) invariant_check_();
  state_.log.steps.push_back(rec);
  return state_.log.steps.back();
}

void Trainer::run(std::uint64_t until, const EvalHook& eval, const CheckpointHook& checkpoint) {
  const std::uint64_t end = std::min(until, total_steps());
  while (step() < end) {
    advance();
    if (eval && config_.eval_interval > 0 && step() % config_.eval_interval == 0) {
      state_.log.evals.push_back({step(), eval(state_.params)});
    }
    if (checkpoint && config_.checkpoint_interval > 0 && step() % config_.checkpoint_interval == 0 &&
        step() < end) {
      checkpoint(state_);
    }
  }
  state_.log.validate();
  if (checkpoint) checkpoint(state_);
}

void Trainer::restore(TrainerState state) {
  if (!(state.identity == state_.identity)) {
    std::string field = state.identity.kind != state_.identity.kind ? "kind"
                        : state.identity.data_digest != state_.identity.data_digest ? "data"
                        : state.identity.config_digest != state_.identity.config_digest ? "config"
                        : state.identity.ref_digest != state_.identity.ref_digest ? "reference"
                                                                                  : "sft policy";
    throw Error(ErrorKind::kState, "checkpoint belongs to a different run (" + field + " differs)");
  }
  if (!(state.params.config() == state_.params.config())) {
    throw Error(ErrorKind::kState, "checkpoint model config differs");
  }
  if (state.optimizer.step > total_steps()) {
    throw Error(ErrorKind::kState, "checkpoint is past the end of this schedule");
  }
  if (state.log.steps.size() != state.optimizer.step) {
    throw Error(ErrorKind::kState, "checkpoint log does not match its step counter");
  }
  state_ = std::move(state);
}

// --- data digests and factories ---------------------------------------------

namespace {

void put_image(ByteWriter& w, const model::RenderedImage& v) {
  w.u64(v.dim());
  for (double x : v.features()) w.f64(x);
}

void put_tokens(ByteWriter& w, const model::TokenSeq& t) {
  w.u64(t.size());
  for (auto x : t) w.u64(x);
}

std::string config_digest(const TrainConfig& c) {
  ByteWriter w;
  w.f64(c.learning_rate);
  w.u64(c.batch_size);
  w.u64(c.seed);
  w.str(objective_name(c.objective));
  if (c.objective == Objective::kVdpo) {
    w.f64(c.guidance.beta);
    w.f64(c.guidance.alpha);
    w.f64(c.guidance.gamma);
    w.str(objectives::variant_name(c.guidance.variant));
    w.str(objectives::uncond_source_name(c.guidance.uncond_source));
  } else {
    w.f64(c.guidance.beta);
  }
  w.f64(c.max_grad_norm);
  return to_hex(sha256(w.bytes()));
}

bool uses_sft(const TrainConfig& c) {
  return c.objective == Objective::kVdpo &&
         c.guidance.uncond_source == objectives::UncondSource::kSftStatic;
}

}  // namespace

std::string digest_records(std::span<const PreferenceRecord> records) {
  ByteWriter w;
  w.u64(records.size());
  for (const auto& r : records) {
    w.u32(static_cast<std::uint32_t>(r.kind));
    put_image(w, r.image_w);
    put_image(w, r.image_l);
    put_tokens(w, r.query);
    put_tokens(w, r.response_w);
    put_tokens(w, r.response_l);
  }
  return to_hex(sha256(w.bytes()));
}

std::string digest_triples(std::span<const world::Triple> triples) {
  ByteWriter w;
  w.u64(triples.size());
  for (const auto& t : triples) {
    put_image(w, t.image);
    put_tokens(w, t.query);
    put_tokens(w, t.response);
  }
  return to_hex(sha256(w.bytes()));
}

Trainer make_sft_trainer(const TrainConfig& config, std::vector<world::Triple> data,
                         PolicyParams init) {
  config.validate();
  if (data.empty()) throw invalid_argument("SFT data is empty");
  const auto& mc = init.config();
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      model::validate_image(mc, data[i].image);
      model::validate_query(mc, data[i].query);
      model::validate_response(mc, data[i].response);
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfig, fmt::format("SFT example {}: {}", i, e.what()));
    }
  }
  RunIdentity id{"sft", digest_triples(data), config_digest(config), "", ""};
  auto shared = std::make_shared<const std::vector<world::Triple>>(std::move(data));
  RecordLoss loss = [shared](const PolicyParams& p, std::size_t i) {
    const auto& t = (*shared)[i];
    auto out = objectives::sft_loss(p, t.image, t.query, t.response, true);
    out.u = 0.0;
    return out;
  };
  RatioProbe probe = [shared](const PolicyParams& p, std::span<const std::size_t> idx) {
    double worst = 0.0;
    for (auto i : idx) {
      const auto& t = (*shared)[i];
      const double cond = model::seq_logprob(p, t.image, t.query, t.response).total;
      const double unc = model::uncond_seq_logprob(p, t.query, t.response).total;
      worst = std::max(worst, std::exp(unc - cond));
    }
    return worst;
  };
  const std::size_t n = shared->size();
  return Trainer(config, std::move(init), n, std::move(loss), std::move(probe), std::move(id));
}

Trainer make_pref_trainer(const TrainConfig& config, std::vector<PreferenceRecord> records,
                          const PolicyParams& init, std::optional<PolicyParams> sft) {
  config.validate();
  if (records.empty()) throw invalid_argument("preference data is empty");
  if (uses_sft(config) && !sft) {
    throw Error(ErrorKind::kConfig, "the static uncond source needs an SFT checkpoint");
  }
  if (sft && !sft->config().same_shape(init.config())) {
    throw Error(ErrorKind::kConfig, "SFT and initial checkpoints have different model configs");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      records[i].validate(init.config());
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfig, fmt::format("record {}: {}", i, e.what()));
    }
  }

  auto ref = std::make_shared<const model::FrozenPolicy>(init, "ref");
  std::shared_ptr<const model::FrozenPolicy> frozen_sft;
  if (uses_sft(config)) frozen_sft = std::make_shared<const model::FrozenPolicy>(*sft, "sft");

  RunIdentity id{"preference", digest_records(records), config_digest(config),
                 to_hex(ref->digest()), frozen_sft ? to_hex(frozen_sft->digest()) : ""};
  auto shared = std::make_shared<const std::vector<PreferenceRecord>>(std::move(records));
  const TrainConfig cfg = config;

  RecordLoss loss = [shared, ref, frozen_sft, cfg](const PolicyParams& p, std::size_t i) {
    const auto& r = (*shared)[i];
    if (cfg.objective == Objective::kDpo) {
      return objectives::dpo_loss(p, ref->params(), r, cfg.guidance.beta, true);
    }
    return objectives::vdpo_loss(p, ref->params(), r, cfg.guidance,
                                 frozen_sft ? &frozen_sft->params() : nullptr, true);
  };
  RatioProbe probe = [shared](const PolicyParams& p, std::span<const std::size_t> idx) {
    std::vector<PreferenceRecord> batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back((*shared)[i]);
    return objectives::proposition1_ratio(p, batch).max;
  };
  auto check = [ref, frozen_sft] {
    if (!ref->verify()) throw Error(ErrorKind::kState, "reference policy changed during training");
    if (frozen_sft && !frozen_sft->verify()) {
      throw Error(ErrorKind::kState, "SFT policy changed during training");
    }
  };
  const std::size_t n = shared->size();
  return Trainer(config, init, n, std::move(loss), std::move(probe), std::move(id), check);
}

SftResult sft_fit(const TrainConfig& config, std::vector<world::Triple> data,
                  const PolicyParams& init) {
  Trainer t = make_sft_trainer(config, std::move(data), init);
  t.run();
  return {t.params(), model::freeze(t.params(), "sft"), t.log()};
}

PrefResult pref_fit(const TrainConfig& config, std::vector<PreferenceRecord> records,
                    const PolicyParams& init, std::optional<PolicyParams> sft) {
  Trainer t = make_pref_trainer(config, std::move(records), init, std::move(sft));
  t.run();
  return {t.params(), t.log(), t.state().identity.ref_digest};
}

// --- checkpoints --------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const TrainerState& state) {
  ByteWriter w;
  model::encode_params(w, state.params);
  w.u32(1);  // trainer state follows
  w.u64(state.optimizer.step);
  model::encode_params(w, state.optimizer.m);
  model::encode_params(w, state.optimizer.v);
  w.str(state.identity.kind);
  w.str(state.identity.data_digest);
  w.str(state.identity.config_digest);
  w.str(state.identity.ref_digest);
  w.str(state.identity.sft_digest);
  w.u64(state.log.steps.size());
  for (const auto& s : state.log.steps) {
    w.u64(s.step);
    w.u64(s.epoch);
    w.f64(s.loss);
    w.f64(s.margin);
    w.f64(s.grad_norm);
    w.f64(s.ratio_max);
  }
  w.u64(state.log.evals.size());
  for (const auto& e : state.log.evals) {
    w.u64(e.step);
    w.u64(e.metrics.size());
    for (const auto& [k, v] : e.metrics) {
      w.str(k);
      w.f64(v);
    }
  }
  model::write_container(path, w.bytes());
}

TrainerState load_checkpoint(const std::filesystem::path& path) {
  const auto payload = model::read_container(path);
  ByteReader r(payload);
  PolicyParams params = model::decode_params(r);
  if (r.u32() != 1) throw Error(ErrorKind::kState, path.string() + " holds parameters only");
  AdamState opt{PolicyParams::zeros(params.config()), PolicyParams::zeros(params.config()), 0};
  opt.step = r.u64();
  opt.m = model::decode_params(r);
  opt.v = model::decode_params(r);
  if (!(opt.m.config() == params.config()) || !(opt.v.config() == params.config())) {
    throw Error(ErrorKind::kParse, "optimizer moments do not match the parameters");
  }
  RunIdentity id;
  id.kind = r.str();
  id.data_digest = r.str();
  id.config_digest = r.str();
  id.ref_digest = r.str();
  id.sft_digest = r.str();
  TrainLog log;
  const auto n = r.u64();
  if (n > r.remaining() / 48) throw Error(ErrorKind::kParse, "step count exceeds payload");
  for (std::uint64_t i = 0; i < n; ++i) {
    StepRecord s;
    s.step = r.u64();
    s.epoch = r.u64();
    s.loss = r.f64();
    s.margin = r.f64();
    s.grad_norm = r.f64();
    s.ratio_max = r.f64();
    log.steps.push_back(s);
  }
  const auto ne = r.u64();
  if (ne > r.remaining() / 16) throw Error(ErrorKind::kParse, "eval count exceeds payload");
  for (std::uint64_t i = 0; i < ne; ++i) {
    EvalRecord e;
    e.step = r.u64();
    const auto m = r.u64();
    if (m > r.remaining() / 16) throw Error(ErrorKind::kParse, "metric count exceeds payload");
    for (std::uint64_t k = 0; k < m; ++k) {
      auto key = r.str();
      e.metrics[key] = r.f64();
    }
    log.evals.push_back(std::move(e));
  }
  if (!r.done()) throw Error(ErrorKind::kParse, "trailing bytes after trainer state");
  return {std::move(params), std::move(opt), std::move(log), std::move(id)};
}

}  // namespace vdpo::trainer
