// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "xopd/errors.hpp"
#include "xopd/rollout.hpp"

namespace xopd {

namespace {

template <class Model>
ScoreResult score_impl(const Model& m, std::span<const PairedExample> split, Modality modality, int max_new) {
  ScoreResult r;
  r.correct.reserve(split.size());
  std::size_t hits = 0;
  for (const auto& e : split) {
    const Prompt p = modality == Modality::kText ? text_prompt_of(e) : speech_prompt_of(e);
    const bool ok = greedy_answer(m, p, max_new) == e.reference_answer;
    r.correct.push_back(ok);
    hits += ok;
  }
  r.accuracy = split.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(split.size());
  return r;
}

template <class Model>
EvalReport evaluate_impl(const Model& m, std::span<const PairedExample> test, const EvalConfig& cfg,
                         const std::string& id, const char* role, bool speech) {
  EvalReport rep;
  rep.model_id = id;
  rep.role = role;
  rep.seed = cfg.seed;
  for (TaskFamily f : cfg.families) {
    auto xs = select_family(test, f, cfg.per_family);
    if (xs.empty()) continue;
    rep.n_eval[f] = static_cast<int>(xs.size());
    rep.accuracy[f][Modality::kText] = score_impl(m, xs, Modality::kText, cfg.max_new).accuracy;
    if (speech) rep.accuracy[f][Modality::kSpeech] = score_impl(m, xs, Modality::kSpeech, cfg.max_new).accuracy;
  }
  return rep;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

ScoreResult score_model(const TeacherModel& m, std::span<const PairedExample> split, Modality modality,
                        int max_new) {
  if (modality == Modality::kSpeech) throw ModalityError("the text-only teacher cannot be scored on speech");
  return score_impl(m, split, modality, max_new);
}

ScoreResult score_model(const StudentModel& m, std::span<const PairedExample> split, Modality modality,
                        int max_new) {
  return score_impl(m, split, modality, max_new);
}

std::vector<PairedExample> select_family(std::span<const PairedExample> xs, TaskFamily f, std::size_t limit) {
  std::vector<PairedExample> out;
  for (const auto& e : xs) {
    if (e.family != f) continue;
    out.push_back(e);
    if (limit && out.size() >= limit) break;
  }
  return out;
}

nlohmann::json to_json(const RetentionRecord& r) {
  return {{"before", r.before}, {"after", r.after}, {"drop", r.drop}, {"flagged", r.flagged}};
}

std::optional<double> EvalReport::score(TaskFamily f, Modality m) const {
  auto it = accuracy.find(f);
  if (it == accuracy.end()) return std::nullopt;
  auto jt = it->second.find(m);
  if (jt == it->second.end()) return std::nullopt;
  return jt->second;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [f, per] : r.accuracy) {
    for (const auto& [m, v] : per) acc[to_string(f)][to_string(m)] = v;
  }
  nlohmann::json n = nlohmann::json::object();
  for (const auto& [f, c] : r.n_eval) n[to_string(f)] = c;
  nlohmann::json j = {{"model_id", r.model_id}, {"role", r.role}, {"accuracy", acc}, {"n_eval", n}, {"seed", r.seed}};
  if (r.avg_drop_speech) j["avg_drop_speech"] = *r.avg_drop_speech;
  if (r.avg_drop_text) j["avg_drop_text"] = *r.avg_drop_text;
  if (!r.drop_base_id.empty()) {
    j["drop_base_id"] = r.drop_base_id;
    j["drop_excluded_families"] = r.drop_excluded_families;
  }
  if (r.acoustic) j["acoustic_retention"] = to_json(*r.acoustic);
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.model_id = j.at("model_id").get<std::string>();
    r.role = j.value("role", std::string("student"));
    r.seed = j.value("seed", std::uint64_t{0});
    for (const auto& fam : j.at("accuracy").items()) {
      for (const auto& mod : fam.value().items()) {
        r.accuracy[task_family_from_string(fam.key())][modality_from_string(mod.key())] = mod.value().get<double>();
      }
    }
    const nlohmann::json counts = j.value("n_eval", nlohmann::json::object());
    for (const auto& c : counts.items()) r.n_eval[task_family_from_string(c.key())] = c.value().get<int>();
    if (j.contains("avg_drop_speech")) r.avg_drop_speech = j["avg_drop_speech"].get<double>();
    if (j.contains("avg_drop_text")) r.avg_drop_text = j["avg_drop_text"].get<double>();
    r.drop_base_id = j.value("drop_base_id", std::string());
    r.drop_excluded_families = j.value("drop_excluded_families", std::vector<std::string>{});
    if (j.contains("acoustic_retention")) {
      const auto& a = j["acoustic_retention"];
      r.acoustic = RetentionRecord{a.at("before"), a.at("after"), a.at("drop"), a.at("flagged")};
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ReportError(std::string("malformed evaluation report: ") + ex.what());
  }
  return r;
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  std::vector<std::string> fams;
  for (TaskFamily f : c.families) fams.push_back(to_string(f));
  j = {{"families", fams}, {"per_family", c.per_family}, {"max_new", c.max_new}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  EvalConfig d;
  c.families.clear();
  if (j.contains("families")) {
    for (const auto& f : j.at("families")) c.families.push_back(task_family_from_string(f.get<std::string>()));
  } else {
    c.families = d.families;
  }
  c.per_family = j.value("per_family", d.per_family);
  c.max_new = j.value("max_new", d.max_new);
  c.seed = j.value("seed", d.seed);
}

EvalReport evaluate_teacher(const TeacherModel& m, std::span<const PairedExample> test, const EvalConfig& cfg,
                            const std::string& model_id) {
  return evaluate_impl(m, test, cfg, model_id, "teacher", false);
}

EvalReport evaluate_student(const StudentModel& m, std::span<const PairedExample> test, const EvalConfig& cfg,
                            const std::string& model_id) {
  return evaluate_impl(m, test, cfg, model_id, "student", true);
}

AvgDrop avg_drop(const EvalReport& model, const EvalReport& base, std::span<const TaskFamily> families,
                 DropReference ref) {
  AvgDrop d;
  double s_sum = 0.0, t_sum = 0.0;
  int used = 0;
  for (TaskFamily f : families) {
    const auto bs_text = base.score(f, Modality::kText);
    const auto bs_speech = ref == DropReference::kBaseText ? bs_text : base.score(f, Modality::kSpeech);
    const auto ms = model.score(f, Modality::kSpeech);
    const auto mt = model.score(f, Modality::kText);
    if (!bs_text || !bs_speech || !ms || !mt) {
      throw ReportError("family " + to_string(f) + " missing from report '" +
                        (!ms || !mt ? model.model_id : base.model_id) + "'");
    }
    if (*bs_text == 0.0 || *bs_speech == 0.0) {
      d.excluded.push_back(to_string(f));
      continue;
    }
    s_sum += (*bs_speech - *ms) / *bs_speech * 100.0;
    t_sum += (*bs_text - *mt) / *bs_text * 100.0;
    ++used;
  }
  if (used == 0) throw ReportError("no family with a nonzero base score");
  d.speech = s_sum / used;
  d.text = t_sum / used;
  return d;
}

void attach_avg_drop(EvalReport& model, const EvalReport& base, std::span<const TaskFamily> families,
                     DropReference ref) {
  AvgDrop d = avg_drop(model, base, families, ref);
  model.avg_drop_speech = d.speech;
  model.avg_drop_text = d.text;
  model.drop_base_id = base.model_id;
  model.drop_excluded_families = d.excluded;
}

RetentionRecord forgetting_eval(const StudentModel& after, const StudentModel& before,
                                std::span<const PairedExample> acoustic_split, int max_new,
                                double flag_threshold_points) {
  auto xs = select_family(acoustic_split, TaskFamily::kAcoustic);
  RetentionRecord r;
  r.before = score_model(before, xs, Modality::kSpeech, max_new).accuracy;
  r.after = score_model(after, xs, Modality::kSpeech, max_new).accuracy;
  r.drop = (r.before - r.after) * 100.0;
  r.flagged = r.drop > flag_threshold_points;
  return r;
}

void write_modality_table_csv(const std::filesystem::path& path, const std::vector<EvalReport>& rows,
                              std::span<const TaskFamily> families) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << "model";
  for (TaskFamily f : families) out << ',' << to_string(f) << "_S," << to_string(f) << "_T";
  out << ",avg_drop_S,avg_drop_T\n";
  auto cell = [&](std::optional<double> v, double mult) { return v ? fmt(*v * mult, 2) : std::string(); };
  for (const auto& r : rows) {
    out << r.model_id;
    for (TaskFamily f : families) {
      out << ',' << cell(r.score(f, Modality::kSpeech), 100.0) << ',' << cell(r.score(f, Modality::kText), 100.0);
    }
    out << ',' << cell(r.avg_drop_speech, 1.0) << ',' << cell(r.avg_drop_text, 1.0) << '\n';
  }
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<CurveSeries>& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << "series,x,y\n";
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      out << s.name << ',' << s.x[i] << ',' << fmt(s.y[i], 6) << '\n';
    }
  }
}

void write_curves_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::vector<CurveSeries>& series) {
  const double W = 640, H = 400, ml = 60, mr = 150, mt = 40, mb = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = y0 + (y1 - y0) * k / 4.0, xv = x0 + (x1 - x0) * k / 4.0;
    out << "<text x=\"" << ml - 5 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv, 3)
        << "</text>\n";
    out << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\">" << fmt(xv, 0)
        << "</text>\n";
  }
  out << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << x_label
      << "</text>\n";
  out << "<text x=\"15\" y=\"" << (mt + H - mb) / 2 << "\" transform=\"rotate(-90 15 " << (mt + H - mb) / 2
      << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* c = colors[si % 7];
    out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (std::isfinite(s.y[i])) out << fmt(px(s.x[i]), 1) << ',' << fmt(py(s.y[i]), 1) << ' ';
    }
    out << "\"/>\n";
    out << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 16 * si << "\" fill=\"" << c << "\">" << s.name
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace xopd
