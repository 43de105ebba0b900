// vdpo: data generation, SFT, preference training, evaluation, gap
// analysis, gradient checks and the tabular oracle.
//
// Exit codes: 0 ok, 1 a check failed, 2 configuration error, 3 I/O or
// malformed input.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdpo/cli/run_config.hpp"
#include "vdpo/digest.hpp"
#include "vdpo/error.hpp"
#include "vdpo/eval/eval.hpp"
#include "vdpo/model/checkpoint.hpp"
#include "vdpo/objectives/gradcheck.hpp"
#include "vdpo/rng.hpp"
#include "vdpo/trainer/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace vdpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheck = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

// Tolerances the check commands hold themselves to.
constexpr double kGradTolerance = 1e-5;
constexpr double kClosedFormTolerance = 1e-6;
constexpr double kFixedPointTolerance = 1e-3;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kIo:
    case ErrorKind::kParse:
    case ErrorKind::kDigest:
      return kExitIo;
    case ErrorKind::kNumeric:
      return kExitCheck;
    default:
      return kExitConfig;
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + p.string());
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write to " + p.string() + " failed");
}

std::string file_sha256(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return to_hex(sha256(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size())));
}

void make_run_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error(ErrorKind::kIo, "cannot create run directory " + dir.string());
  }
}

cli::RunConfig load_config(const std::string& path) {
  return path.empty() ? cli::parse_run_config("{}") : cli::load_run_config(path);
}

void echo_config(const fs::path& dir, const std::string& command, const cli::RunConfig& c) {
  write_text(dir / (command + ".config.json"), cli::run_config_to_json(c));
}


// --- gen-data --------------------------------------------------------------------

struct GenDataArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  std::optional<double> kind_ratio;
};

int gen_data(const GenDataArgs& a) {
  auto c = load_config(a.config);
  if (a.seed) c.data.seed = *a.seed;
  if (a.count) c.data.count = *a.count;
  if (a.kind_ratio) c.data.response_ratio = *a.kind_ratio;
  c.validate();
  const fs::path dir = a.out;
  make_run_dir(dir);
  echo_config(dir, "gen-data", c);

  const auto ctx = world::WorldContext::make(c.data.world);
  const auto ds = world::generate_dataset(c.data.world, ctx, c.data.seed, c.data.count,
                                          c.data.response_ratio);
  world::write_jsonl(ds.records, dir / "data.jsonl");
  const auto items = world::make_eval_items(c.data.world, ctx, c.eval.seed,
                                            c.eval.discriminative, c.eval.generative);
  world::write_eval_items(items, dir / "items.jsonl");

  const auto& s = ds.stats;
  json prov;
  prov["seed"] = c.data.seed;
  prov["count"] = c.data.count;
  prov["response_ratio"] = c.data.response_ratio;
  prov["data_sha256"] = file_sha256(dir / "data.jsonl");
  prov["items_sha256"] = file_sha256(dir / "items.jsonl");
  prov["stats"] = {{"image_records", s.image_records},
                   {"response_records", s.response_records},
                   {"scenes", s.scenes},
                   {"candidates", s.candidates},
                   {"filter_accepted", s.filter_accepted},
                   {"nonpositive", s.nonpositive},
                   {"gate_checked", s.gate_checked},
                   {"gate_passed", s.gate_passed},
                   {"template_rejected", s.template_rejected},
                   {"filter_pass_rate", s.filter_pass_rate()},
                   {"gate_pass_rate", s.gate_pass_rate()}};
  write_text(dir / "provenance.json", prov.dump(2) + "\n");

  fmt::print("records: {} image-contrast, {} response-contrast\n", s.image_records,
             s.response_records);
  fmt::print("filter pass rate: {:.4f} ({} of {} candidates)\n", s.filter_pass_rate(),
             s.filter_accepted, s.candidates);
  fmt::print("gate pass rate: {:.4f} ({} of {} checked)\n", s.gate_pass_rate(), s.gate_passed,
             s.gate_checked);
  fmt::print("wrote {}\n", (dir / "data.jsonl").string());
  return kExitOk;
}

// --- sft / train -------------------------------------------------------------------

void write_log(const fs::path& dir, const std::string& stem, const trainer::TrainLog& log) {
  write_text(dir / (stem + "_log.csv"), log.to_csv());
  write_text(dir / (stem + "_summary.json"), log.summary_json());
}

// Runs a trainer to step `until` (or the end), checkpointing into `ckpt` and
// resuming from it when asked and present.
void drive(trainer::Trainer& t, const fs::path& ckpt, bool resume, std::uint64_t until) {
  if (resume && fs::exists(ckpt)) {
    t.restore(trainer::load_checkpoint(ckpt));
    fmt::print("resumed at step {}\n", t.step());
  }
  t.run(until, {},
        [&](const trainer::TrainerState& s) { trainer::save_checkpoint(ckpt, s); });
  const auto& steps = t.log().steps;
  if (!steps.empty()) {
    fmt::print("steps {}: loss {:.6f} -> {:.6f}\n", steps.size(), steps.front().loss,
               steps.back().loss);
  }
}

struct SftArgs {
  std::string config, data, out;
  bool resume = false;
  std::uint64_t until = std::numeric_limits<std::uint64_t>::max();
};

int sft(const SftArgs& a) {
  auto c = load_config(a.config);
  const fs::path dir = a.out;
  const auto records = world::read_jsonl(a.data);
  make_run_dir(dir);
  echo_config(dir, "sft", c);
  auto t = trainer::make_sft_trainer(c.train, world::sft_triples(records),
                                     model::init_params(c.model));
  drive(t, dir / "sft.ckpt", a.resume, a.until);
  write_log(dir, "sft", t.log());
  fmt::print("wrote {}\n", (dir / "sft.ckpt").string());
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, init, out;
  std::optional<std::string> objective, variant, uncond;
  std::optional<double> gamma, beta;
  bool resume = false;
  std::uint64_t until = std::numeric_limits<std::uint64_t>::max();
};

int train(const TrainArgs& a) {
  auto c = load_config(a.config);
  if (a.objective) c.train.objective = trainer::parse_objective(*a.objective);
  const bool dpo = c.train.objective == trainer::Objective::kDpo;
  if (dpo && (a.gamma || a.variant || a.uncond)) {
    throw Error(ErrorKind::kConfig,
                "--gamma, --variant and --uncond apply to vdpo only; they contradict --objective dpo");
  }
  auto& g = c.train.guidance;
  const double beta = a.beta.value_or(g.beta);
  const double gamma = a.gamma.value_or(g.gamma);
  const auto variant = a.variant ? objectives::parse_variant(*a.variant) : g.variant;
  const auto uncond = a.uncond ? cli::parse_uncond_flag(*a.uncond) : g.uncond_source;
  g = objectives::GuidanceConfig::from_gamma(beta, gamma, variant, uncond);
  c.validate();

  const fs::path dir = a.out;
  const auto records = world::preference_records(world::read_jsonl(a.data));
  const auto init = model::load_params(a.init);
  if (!init.config().same_shape(c.model)) {
    throw Error(ErrorKind::kConfig, "--init model shape differs from the config's model section");
  }
  make_run_dir(dir);
  echo_config(dir, "train", c);
  std::optional<model::PolicyParams> sft;
  // The static source uses the initial SFT model.
  if (!dpo && g.uncond_source == objectives::UncondSource::kSftStatic) sft = init;
  auto t = trainer::make_pref_trainer(c.train, records, init, sft);
  drive(t, dir / "policy.ckpt", a.resume, a.until);
  write_log(dir, "train", t.log());
  fmt::print("wrote {}\n", (dir / "policy.ckpt").string());
  return kExitOk;
}

// --- eval / gaps -------------------------------------------------------------------

struct EvalArgs {
  std::string config, ckpt, items, out;
};

int eval_cmd(const EvalArgs& a) {
  auto c = load_config(a.config);
  const auto policy = model::load_params(a.ckpt);
  const auto items = world::read_eval_items(a.items);
  const auto ctx = world::WorldContext::make(c.data.world);
  std::optional<eval::DiscrMetrics> discr;
  std::optional<eval::GenMetrics> gen;
  if (!items.discriminative.empty()) discr = eval::discr_eval(policy, items.discriminative);
  if (!items.generative.empty()) {
    gen = eval::gen_eval(policy, items.generative, ctx.vocab, c.eval.decode_mode());
  }
  const fs::path dir = a.out;
  make_run_dir(dir);
  echo_config(dir, "eval", c);
  const auto report = eval::make_report(discr, gen, std::nullopt);
  eval::emit_report(report, dir);
  if (discr) {
    fmt::print("precision {:.4f} recall {:.4f} f1 {:.4f} yes-ratio {:.4f}\n", discr->precision,
               discr->recall, discr->f1, discr->yes_ratio);
  }
  if (gen) {
    fmt::print("chair {:.2f} cover {:.2f} hal {:.2f} cog {:.2f}\n", gen->chair, gen->cover,
               gen->hal, gen->cog);
  }
  if (report.amber) fmt::print("amber {:.2f}\n", *report.amber);
  return kExitOk;
}

struct GapsArgs {
  std::string ckpt, baseline, pairs, out;
};

int gaps_cmd(const GapsArgs& a) {
  const auto policy = model::load_params(a.ckpt);
  std::optional<model::PolicyParams> base;
  if (a.baseline.empty()) {
    fmt::print(stderr, "warning: no --baseline given; shift columns are omitted\n");
  } else {
    base = model::load_params(a.baseline);
  }
  const auto records = world::preference_records(world::read_jsonl(a.pairs));
  const auto rep = eval::gap_analysis(policy, records, base ? &*base : nullptr);
  const fs::path dir = a.out;
  make_run_dir(dir);
  eval::emit_report(eval::make_report(std::nullopt, std::nullopt, rep), dir);
  const auto line = [](const char* name, const eval::GapStats& s) {
    std::string out = fmt::format("{:<18} n={:<5} cond {:+.4f} uncond {:+.4f}", name, s.count,
                                  s.mean_cond, s.mean_uncond);
    if (s.shift_cond) {
      out += fmt::format("  shift cond {:+.4f} uncond {:+.4f}", *s.shift_cond, *s.shift_uncond);
    }
    fmt::print("{}\n", out);
  };
  line("all", rep.all);
  line("image-contrast", rep.image);
  line("response-contrast", rep.response);
  return kExitOk;
}

// --- gradcheck / oracle ------------------------------------------------------------

int gradcheck(std::uint64_t seed, std::size_t cases) {
  if (cases == 0) throw Error(ErrorKind::kConfig, "--cases must be at least 1");
  double worst = 0.0;
  for (auto loss : {objectives::CheckedLoss::kDpo, objectives::CheckedLoss::kVdpoPlain,
                    objectives::CheckedLoss::kVdpoNormalized, objectives::CheckedLoss::kSft}) {
    double proj = 0.0, coord = 0.0;
    for (std::size_t i = 0; i < cases; ++i) {
      const auto r = objectives::check_loss_gradient(loss, seed + i);
      proj = std::max(proj, r.projected.max_relative_error);
      coord = std::max(coord, r.coordinate.max_relative_error);
    }
    fmt::print("{:<16} cases {:<4} worst relative error {:.3e} (per coordinate {:.3e})\n",
               objectives::checked_loss_name(loss), cases, proj, coord);
    worst = std::max(worst, proj);
  }
  const bool ok = worst < kGradTolerance;
  fmt::print("worst relative error {:.3e}, tolerance {:.0e}: {}\n", worst, kGradTolerance,
             ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitCheck;
}

int oracle(double beta, double alpha, std::size_t outcomes, std::uint64_t seed) {
  if (outcomes != 2 && outcomes != 3) throw Error(ErrorKind::kConfig, "--outcomes must be 2 or 3");
  if (!(beta > 0.0)) throw Error(ErrorKind::kConfig, "--beta must be positive");
  if (!(alpha >= 0.0 && alpha < beta)) {
    throw Error(ErrorKind::kConfig, "--alpha must satisfy 0 <= alpha < beta");
  }
  Rng rng(seed);
  const auto dist = [&] {
    std::vector<double> p(outcomes);
    double s = 0.0;
    for (auto& x : p) s += (x = 0.05 + rng.uniform());
    for (auto& x : p) x /= s;
    return p;
  };
  const auto ref = dist();
  const auto uncond = dist();
  std::vector<double> reward(outcomes);
  for (auto& r : reward) r = rng.uniform(-0.3, 0.3);

  const auto p = objectives::numeric_maximizer(uncond, ref, reward, beta, alpha);
  const auto vec = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ", ") + fmt::format("{:.9f}", x);
    return "[" + s + "]";
  };
  fmt::print("ref {}\nuncond {}\nreward {}\n", vec(ref), vec(uncond), vec(reward));
  fmt::print("numeric maximizer {}\n", vec(p));
  bool ok = true;
  if (alpha == 0.0) {
    std::vector<double> star(outcomes);
    double z = 0.0;
    for (std::size_t i = 0; i < outcomes; ++i) z += (star[i] = ref[i] * std::exp(reward[i] / beta));
    double diff = 0.0;
    for (std::size_t i = 0; i < outcomes; ++i) diff = std::max(diff, std::abs(p[i] - star[i] / z));
    for (auto& x : star) x /= z;
    const bool pass = diff < kClosedFormTolerance;
    fmt::print("closed form ref*exp(r/beta) {}\nmax difference {:.3e}, tolerance {:.0e}: {}\n",
               vec(star), diff, kClosedFormTolerance, pass ? "PASS" : "FAIL");
    ok = ok && pass;
  }
  const double res = objectives::fixed_point_residual(p, uncond, ref, reward, beta, alpha);
  const bool pass = res < kFixedPointTolerance;
  fmt::print("fixed-point residual {:.3e}, tolerance {:.0e}: {}\n", res, kFixedPointTolerance,
             pass ? "PASS" : "FAIL");
  return ok && pass ? kExitOk : kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vdpo: vision-guided preference optimization on a toy world"};
  app.require_subcommand(1);
  int code = kExitOk;

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "generate preference pairs and eval items");
  c_gen->add_option("--config", gd.config, "run config JSON");
  c_gen->add_option("--out", gd.out, "run directory")->required();
  c_gen->add_option("--seed", gd.seed, "data seed");
  c_gen->add_option("--count", gd.count, "number of pairs");
  c_gen->add_option("--kind-ratio", gd.kind_ratio, "share of response-contrast pairs in [0, 1]");

  SftArgs sa;
  auto* c_sft = app.add_subcommand("sft", "supervised fine-tuning on the accurate sides");
  c_sft->add_option("--config", sa.config, "run config JSON");
  c_sft->add_option("--data", sa.data, "dataset JSONL")->required();
  c_sft->add_option("--out", sa.out, "run directory")->required();
  c_sft->add_flag("--resume", sa.resume, "continue from the run directory's checkpoint");
  c_sft->add_option("--until", sa.until, "stop after this optimizer step");

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "preference training (DPO or V-DPO)");
  c_train->add_option("--config", ta.config, "run config JSON");
  c_train->add_option("--data", ta.data, "dataset JSONL")->required();
  c_train->add_option("--init", ta.init, "SFT checkpoint; also the frozen reference")->required();
  c_train->add_option("--out", ta.out, "run directory")->required();
  c_train->add_option("--objective", ta.objective, "dpo | vdpo")
      ->check(CLI::IsMember({"dpo", "vdpo"}));
  c_train->add_option("--variant", ta.variant, "plain | normalized")
      ->check(CLI::IsMember({"plain", "normalized"}));
  c_train->add_option("--uncond", ta.uncond, "dynamic | static")
      ->check(CLI::IsMember({"dynamic", "static"}));
  c_train->add_option("--gamma", ta.gamma, "guidance weight (vdpo only)");
  c_train->add_option("--beta", ta.beta, "KL weight");
  c_train->add_flag("--resume", ta.resume, "continue from the run directory's checkpoint");
  c_train->add_option("--until", ta.until, "stop after this optimizer step");

  EvalArgs ea;
  auto* c_eval = app.add_subcommand("eval", "discriminative and generative metrics");
  c_eval->add_option("--config", ea.config, "run config JSON (world and decoding)");
  c_eval->add_option("--ckpt", ea.ckpt, "policy checkpoint")->required();
  c_eval->add_option("--items", ea.items, "eval items JSONL")->required();
  c_eval->add_option("--out", ea.out, "report directory")->required();

  GapsArgs ga;
  auto* c_gaps = app.add_subcommand("gaps", "log-likelihood gap analysis");
  c_gaps->add_option("--ckpt", ga.ckpt, "policy checkpoint")->required();
  c_gaps->add_option("--baseline", ga.baseline, "baseline checkpoint for shift columns");
  c_gaps->add_option("--pairs", ga.pairs, "held-out dataset JSONL")->required();
  c_gaps->add_option("--out", ga.out, "report directory")->required();

  std::uint64_t gc_seed = 0;
  std::size_t gc_cases = 20;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference checks of every loss");
  c_gc->add_option("--seed", gc_seed, "first case seed");
  c_gc->add_option("--cases", gc_cases, "cases per loss");

  double or_beta = 0.1, or_alpha = 0.025;
  std::size_t or_k = 2;
  std::uint64_t or_seed = 0;
  auto* c_or = app.add_subcommand("oracle", "numerically maximize the tabular objective");
  c_or->add_option("--beta", or_beta, "KL weight");
  c_or->add_option("--alpha", or_alpha, "guidance weight; 0 recovers the plain optimum");
  c_or->add_option("--outcomes", or_k, "2 or 3");
  c_or->add_option("--seed", or_seed, "seed for ref, uncond and reward");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*c_gen) code = gen_data(gd);
    else if (*c_sft) code = sft(sa);
    else if (*c_train) code = train(ta);
    else if (*c_eval) code = eval_cmd(ea);
    else if (*c_gaps) code = gaps_cmd(ga);
    else if (*c_gc) code = gradcheck(gc_seed, gc_cases);
    else if (*c_or) code = oracle(or_beta, or_alpha, or_k, or_seed);
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitConfig;
  }
  return code;
}
