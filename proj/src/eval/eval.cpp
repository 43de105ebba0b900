#include "vdpo/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdpo/error.hpp"
#include "vdpo/parallel.hpp"

namespace vdpo::eval {

using json = nlohmann::ordered_json;

// --- discriminative -------------------------------------------------------------

DiscrMetrics discr_metrics(const std::vector<bool>& predicted_yes,
                           const std::vector<bool>& gold_yes) {
  if (predicted_yes.size() != gold_yes.size()) {
    throw invalid_argument("prediction and gold lists differ in length");
  }
  if (predicted_yes.empty()) throw invalid_argument("no discriminative items");
  DiscrMetrics m;
  for (std::size_t i = 0; i < gold_yes.size(); ++i) {
    if (predicted_yes[i]) {
      gold_yes[i] ? ++m.tp : ++m.fp;
    } else {
      gold_yes[i] ? ++m.fn : ++m.tn;
    }
  }
  const auto d = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  m.precision = d(m.tp, m.tp + m.fp);
  m.recall = d(m.tp, m.tp + m.fn);
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                      : 0.0;
  m.yes_ratio = d(m.tp + m.fp, gold_yes.size());
  return m;
}

bool predicts_yes(const PolicyParams& policy, const model::RenderedImage& image,
                  const model::TokenSeq& query) {
  const double yes = model::seq_logprob(policy, image, query, {model::kYes, model::kEos}).total;
  const double no = model::seq_logprob(policy, image, query, {model::kNo, model::kEos}).total;
  return yes > no;
}

DiscrMetrics discr_eval(const PolicyParams& policy,
                        const std::vector<world::DiscriminativeItem>& items) {
  std::vector<char> pred(items.size());
  parallel_for(items.size(),
               [&](std::size_t i) { pred[i] = predicts_yes(policy, items[i].image, items[i].query); });
  std::vector<bool> p(items.size()), g(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    p[i] = pred[i] != 0;
    g[i] = items[i].gold_yes;
  }
  return discr_metrics(p, g);
}

// --- generative -----------------------------------------------------------------

MentionTally tally_mentions(const model::TokenSeq& response, const world::GenerativeItem& item,
                            const world::Vocab& vocab) {
  const std::set<model::TokenId> truth(item.truth.begin(), item.truth.end());
  const std::set<model::TokenId> distractors(item.distractors.begin(), item.distractors.end());
  MentionTally t;
  t.truth_total = truth.size();
  std::set<model::TokenId> covered;
  for (auto tok : response) {
    if (!vocab.category_of(tok)) continue;
    ++t.mentions;
    if (truth.count(tok)) {
      covered.insert(tok);
    } else {
      ++t.hallucinated;
      if (distractors.count(tok)) ++t.cognitive;
    }
  }
  t.truth_covered = covered.size();
  return t;
}

GenMetrics gen_metrics(const std::vector<MentionTally>& tallies) {
  if (tallies.empty()) throw invalid_argument("no generative items");
  std::size_t mentions = 0, hallucinated = 0, cognitive = 0, covered = 0, truth = 0, bad = 0;
  for (const auto& t : tallies) {
    mentions += t.mentions;
    hallucinated += t.hallucinated;
    cognitive += t.cognitive;
    covered += t.truth_covered;
    truth += t.truth_total;
    bad += t.hallucinated > 0;
  }
  const auto pct = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : 100.0 * static_cast<double>(a) / static_cast<double>(b);
  };
  GenMetrics m;
  m.chair = pct(hallucinated, mentions);
  m.cover = pct(covered, truth);
  m.hal = pct(bad, tallies.size());
  m.cog = pct(cognitive, mentions);
  m.responses = tallies.size();
  m.mentions = mentions;
  return m;
}

GenMetrics gen_eval(const PolicyParams& policy, const std::vector<world::GenerativeItem>& items,
                    const world::Vocab& vocab, const model::DecodeMode& mode) {
  std::vector<MentionTally> tallies(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    model::DecodeMode m = mode;
    if (m.kind == model::DecodeMode::Kind::kSample) m.seed = derive_seed(mode.seed, {i});
    const auto out = model::decode(policy, items[i].image, items[i].query, m);
    tallies[i] = tally_mentions(out, items[i], vocab);
  });
  return gen_metrics(tallies);
}

double amber_score(double chair, double f1_percent) {
  if (!(chair >= 0.0 && chair <= 100.0) || !(f1_percent >= 0.0 && f1_percent <= 100.0)) {
    throw invalid_argument("AMBER inputs must lie in [0, 100]");
  }
  return (100.0 - chair + f1_percent) / 2.0;
}

// --- gaps -------------------------------------------------------------------------

void Histogram::add(double x) {
  if (std::isnan(x)) throw Error(ErrorKind::kNumeric, "NaN gap value");
  if (x < kLo) {
    ++underflow;
  } else if (x >= kHi) {
    ++overflow;
  } else {
    auto i = static_cast<std::size_t>(std::floor((x - kLo) * kBins / (kHi - kLo)));
    ++counts[std::min(i, kBins - 1)];
  }
}

std::size_t Histogram::total() const {
  std::size_t n = underflow + overflow;
  for (auto c : counts) n += c;
  return n;
}

double Histogram::edge(std::size_t i) {
  return kLo + (kHi - kLo) * static_cast<double>(i) / static_cast<double>(kBins);
}

GapRecord gap_of(const PolicyParams& policy, const PreferenceRecord& r) {
  GapRecord g;
  g.kind = r.kind;
  if (r.kind == RecordKind::kImageContrast) {
    g.delta_cond = model::seq_logprob(policy, r.image_w, r.query, r.response_w).total -
                   model::seq_logprob(policy, r.image_l, r.query, r.response_w).total;
    // Identical text on both sides.
    const double u = model::uncond_seq_logprob(policy, r.query, r.response_w).total;
    g.delta_uncond = u - u;
  } else {
    g.delta_cond = model::seq_logprob(policy, r.image_w, r.query, r.response_w).total -
                   model::seq_logprob(policy, r.image_w, r.query, r.response_l).total;
    g.delta_uncond = model::uncond_seq_logprob(policy, r.query, r.response_w).total -
                     model::uncond_seq_logprob(policy, r.query, r.response_l).total;
  }
  return g;
}

namespace {

std::vector<GapRecord> all_gaps(const PolicyParams& policy,
                                const std::vector<PreferenceRecord>& records) {
  std::vector<GapRecord> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) { out[i] = gap_of(policy, records[i]); });
  return out;
}

GapStats stats_of(const std::vector<GapRecord>& gaps, std::optional<RecordKind> kind) {
  GapStats s;
  double sc = 0.0, su = 0.0;
  for (const auto& g : gaps) {
    if (kind && g.kind != *kind) continue;
    ++s.count;
    sc += g.delta_cond;
    su += g.delta_uncond;
    s.hist_cond.add(g.delta_cond);
    s.hist_uncond.add(g.delta_uncond);
  }
  if (s.count > 0) {
    s.mean_cond = sc / static_cast<double>(s.count);
    s.mean_uncond = su / static_cast<double>(s.count);
  }
  return s;
}

}  // namespace

GapReport gap_analysis(const PolicyParams& policy, const std::vector<PreferenceRecord>& records,
                       const PolicyParams* baseline) {
  if (records.empty()) throw invalid_argument("gap analysis needs at least one record");
  GapReport rep;
  rep.records = all_gaps(policy, records);
  rep.all = stats_of(rep.records, std::nullopt);
  rep.image = stats_of(rep.records, RecordKind::kImageContrast);
  rep.response = stats_of(rep.records, RecordKind::kResponseContrast);
  if (baseline) {
    const auto base = all_gaps(*baseline, records);
    const auto set_shift = [](GapStats& now, const GapStats& before) {
      if (now.count == 0) return;
      now.shift_cond = now.mean_cond - before.mean_cond;
      now.shift_uncond = now.mean_uncond - before.mean_uncond;
    };
    set_shift(rep.all, stats_of(base, std::nullopt));
    set_shift(rep.image, stats_of(base, RecordKind::kImageContrast));
    set_shift(rep.response, stats_of(base, RecordKind::kResponseContrast));
  }
  return rep;
}

// --- report -----------------------------------------------------------------------

EvalReport make_report(std::optional<DiscrMetrics> discr, std::optional<GenMetrics> gen,
                       std::optional<GapReport> gaps) {
  EvalReport r{std::move(discr), std::move(gen), std::nullopt, std::move(gaps)};
  if (r.discriminative && r.generative) {
    r.amber = amber_score(r.generative->chair, 100.0 * r.discriminative->f1);
  }
  return r;
}

namespace {

json hist_json(const Histogram& h) {
  json j;
  std::vector<double> edges;
  for (std::size_t i = 0; i <= Histogram::kBins; ++i) edges.push_back(Histogram::edge(i));
  j["edges"] = edges;
  j["counts"] = std::vector<std::size_t>(h.counts.begin(), h.counts.end());
  j["underflow"] = h.underflow;
  j["overflow"] = h.overflow;
  return j;
}

Histogram hist_from(const json& j) {
  Histogram h;
  const auto counts = j.at("counts").get<std::vector<std::size_t>>();
  if (counts.size() != Histogram::kBins) throw invalid_argument("histogram needs 40 counts");
  std::copy(counts.begin(), counts.end(), h.counts.begin());
  h.underflow = j.at("underflow").get<std::size_t>();
  h.overflow = j.at("overflow").get<std::size_t>();
  return h;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json stats_json(const GapStats& s) {
  return {{"count", s.count},
          {"mean_cond", s.mean_cond},
          {"mean_uncond", s.mean_uncond},
          {"shift_cond", opt(s.shift_cond)},
          {"shift_uncond", opt(s.shift_uncond)},
          {"hist_cond", hist_json(s.hist_cond)},
          {"hist_uncond", hist_json(s.hist_uncond)}};
}

GapStats stats_from(const json& j) {
  GapStats s;
  s.count = j.at("count").get<std::size_t>();
  s.mean_cond = j.at("mean_cond").get<double>();
  s.mean_uncond = j.at("mean_uncond").get<double>();
  s.shift_cond = opt_from(j.at("shift_cond"));
  s.shift_uncond = opt_from(j.at("shift_uncond"));
  s.hist_cond = hist_from(j.at("hist_cond"));
  s.hist_uncond = hist_from(j.at("hist_uncond"));
  return s;
}

const char* kind_key(RecordKind k) { return objectives::record_kind_name(k); }

RecordKind kind_from(const std::string& s) {
  if (s == kind_key(RecordKind::kImageContrast)) return RecordKind::kImageContrast;
  if (s == kind_key(RecordKind::kResponseContrast)) return RecordKind::kResponseContrast;
  throw invalid_argument("unknown record kind '" + s + "'");
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + p.string());
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write to " + p.string() + " failed");
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json j;
  if (r.discriminative) {
    const auto& d = *r.discriminative;
    j["discriminative"] = {{"precision", d.precision}, {"recall", d.recall}, {"f1", d.f1},
                           {"yes_ratio", d.yes_ratio}, {"tp", d.tp},         {"fp", d.fp},
                           {"tn", d.tn},               {"fn", d.fn}};
  } else {
    j["discriminative"] = nullptr;
  }
  if (r.generative) {
    const auto& g = *r.generative;
    j["generative"] = {{"chair", g.chair},         {"cover", g.cover},      {"hal", g.hal},
                       {"cog", g.cog},             {"responses", g.responses},
                       {"mentions", g.mentions}};
  } else {
    j["generative"] = nullptr;
  }
  j["amber"] = opt(r.amber);
  if (r.gaps) {
    json g;
    g["all"] = stats_json(r.gaps->all);
    g["image_contrast"] = stats_json(r.gaps->image);
    g["response_contrast"] = stats_json(r.gaps->response);
    auto recs = json::array();
    for (const auto& x : r.gaps->records) {
      recs.push_back({{"kind", kind_key(x.kind)},
                      {"delta_cond", x.delta_cond},
                      {"delta_uncond", x.delta_uncond}});
    }
    g["records"] = recs;
    j["gaps"] = g;
  } else {
    j["gaps"] = nullptr;
  }
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    if (!j.at("discriminative").is_null()) {
      const auto& d = j.at("discriminative");
      DiscrMetrics m;
      m.precision = d.at("precision").get<double>();
      m.recall = d.at("recall").get<double>();
      m.f1 = d.at("f1").get<double>();
      m.yes_ratio = d.at("yes_ratio").get<double>();
      m.tp = d.at("tp").get<std::size_t>();
      m.fp = d.at("fp").get<std::size_t>();
      m.tn = d.at("tn").get<std::size_t>();
      m.fn = d.at("fn").get<std::size_t>();
      r.discriminative = m;
    }
    if (!j.at("generative").is_null()) {
      const auto& g = j.at("generative");
      GenMetrics m;
      m.chair = g.at("chair").get<double>();
      m.cover = g.at("cover").get<double>();
      m.hal = g.at("hal").get<double>();
      m.cog = g.at("cog").get<double>();
      m.responses = g.at("responses").get<std::size_t>();
      m.mentions = g.at("mentions").get<std::size_t>();
      r.generative = m;
    }
    r.amber = opt_from(j.at("amber"));
    if (!j.at("gaps").is_null()) {
      const auto& g = j.at("gaps");
      GapReport rep;
      rep.all = stats_from(g.at("all"));
      rep.image = stats_from(g.at("image_contrast"));
      rep.response = stats_from(g.at("response_contrast"));
      for (const auto& x : g.at("records")) {
        rep.records.push_back({kind_from(x.at("kind").get<std::string>()),
                               x.at("delta_cond").get<double>(), x.at("delta_uncond").get<double>()});
      }
      r.gaps = std::move(rep);
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("report: ") + e.what());
  }
}

std::string histogram_svg(const Histogram& h, const std::string& title) {
  constexpr double kBarW = 12.0, kPlotH = 200.0, kLeft = 40.0, kTop = 30.0;
  const std::size_t cols = Histogram::kBins + 2;  // underflow, bins, overflow
  std::vector<std::size_t> v;
  v.push_back(h.underflow);
  v.insert(v.end(), h.counts.begin(), h.counts.end());
  v.push_back(h.overflow);
  const std::size_t peak = std::max<std::size_t>(1, *std::max_element(v.begin(), v.end()));
  const double width = kLeft * 2 + kBarW * static_cast<double>(cols);
  const double height = kTop + kPlotH + 40.0;

  std::string s = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "viewBox=\"0 0 {:.0f} {:.0f}\">\n",
      width, height, width, height);
  s += fmt::format("<text x=\"{:.0f}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
                   kLeft, xml_escape(title));
  s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n",
                   kLeft, kTop + kPlotH, kLeft + kBarW * static_cast<double>(cols));
  for (std::size_t i = 0; i < cols; ++i) {
    const double bh = kPlotH * static_cast<double>(v[i]) / static_cast<double>(peak);
    const bool edge_bin = i == 0 || i + 1 == cols;
    s += fmt::format(
        "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"><title>{}</title></rect>\n",
        kLeft + kBarW * static_cast<double>(i), kTop + kPlotH - bh, kBarW - 1.0, bh,
        edge_bin ? "#b0b0b0" : "#4a78b5", v[i]);
  }
  for (std::size_t i = 0; i <= Histogram::kBins; i += 10) {
    s += fmt::format(
        "<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"10\" "
        "text-anchor=\"middle\">{:g}</text>\n",
        kLeft + kBarW * static_cast<double>(i + 1), kTop + kPlotH + 14.0, Histogram::edge(i));
  }
  s += "</svg>\n";
  return s;
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report,
                                               const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  const auto put = [&](const std::string& name, const std::string& text) {
    write_file(dir / name, text);
    written.push_back(dir / name);
  };
  put("report.json", report_to_json(report));

  std::string metrics = "metric,value\n";
  const auto row = [&](const char* k, double v) { metrics += fmt::format("{},{:.17g}\n", k, v); };
  if (report.discriminative) {
    row("precision", report.discriminative->precision);
    row("recall", report.discriminative->recall);
    row("f1", report.discriminative->f1);
    row("yes_ratio", report.discriminative->yes_ratio);
  }
  if (report.generative) {
    row("chair", report.generative->chair);
    row("cover", report.generative->cover);
    row("hal", report.generative->hal);
    row("cog", report.generative->cog);
  }
  if (report.amber) row("amber", *report.amber);
  put("metrics.csv", metrics);

  if (report.gaps) {
    const auto& g = *report.gaps;
    std::string rows = "index,kind,delta_cond,delta_uncond\n";
    for (std::size_t i = 0; i < g.records.size(); ++i) {
      rows += fmt::format("{},{},{:.17g},{:.17g}\n", i, kind_key(g.records[i].kind),
                          g.records[i].delta_cond, g.records[i].delta_uncond);
    }
    put("gaps.csv", rows);

    std::string hist = "group,side,bin_lo,bin_hi,count\n";
    const std::pair<const char*, const GapStats*> groups[] = {
        {"all", &g.all}, {"image_contrast", &g.image}, {"response_contrast", &g.response}};
    for (const auto& [name, st] : groups) {
      for (const auto& [side, h] : {std::pair<const char*, const Histogram*>{"cond", &st->hist_cond},
                                    std::pair<const char*, const Histogram*>{"uncond", &st->hist_uncond}}) {
        hist += fmt::format("{},{},-inf,{:g},{}\n", name, side, Histogram::kLo, h->underflow);
        for (std::size_t i = 0; i < Histogram::kBins; ++i) {
          hist += fmt::format("{},{},{:g},{:g},{}\n", name, side, Histogram::edge(i),
                              Histogram::edge(i + 1), h->counts[i]);
        }
        hist += fmt::format("{},{},{:g},inf,{}\n", name, side, Histogram::kHi, h->overflow);
        if (st->count > 0) {
          put(fmt::format("gaps_{}_{}.svg", name, side),
              histogram_svg(*h, fmt::format("{} gap, {} ({} records)", side, name, st->count)));
        }
      }
    }
    put("histograms.csv", hist);
  }
  return written;
}

}  // namespace vdpo::eval
