#include "xsteer/intervention.hpp"

#include <algorithm>
#include <cmath>

namespace xsteer {

std::size_t relative_depth_to_layer(double relative_depth, std::size_t n_layers) {
  if (!(relative_depth > 0.0 && relative_depth <= 1.0)) {
    throw Error("relative_depth_to_layer: depth must lie in (0, 1]");
  }
  if (n_layers < 2) throw Error("relative_depth_to_layer: need at least 2 layers");
  const long idx = std::lround(relative_depth * static_cast<double>(n_layers));
  return static_cast<std::size_t>(std::clamp<long>(idx, 1, static_cast<long>(n_layers)));
}

std::vector<double> project(const Mapper& mapper, std::span<const double> teacher_state) {
  if (teacher_state.size() != mapper.input_dim()) {
    throw Error("project: teacher state has length " + std::to_string(teacher_state.size()) +
                ", mapper expects " + std::to_string(mapper.input_dim()));
  }
  std::vector<double> out(mapper.bias);
  for (std::size_t r = 0; r < mapper.output_dim(); ++r) {
    const auto w = mapper.weights.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < w.size(); ++c) s += w[c] * teacher_state[c];
    out[r] += s;
  }
  return out;
}

std::vector<double> blend(std::span<const double> h_student, std::span<const double> h_projected,
                          double alpha) {
  if (h_student.size() != h_projected.size()) {
    throw Error("blend: student state has length " + std::to_string(h_student.size()) +
                ", projected state " + std::to_string(h_projected.size()));
  }
  const double student_norm = l2_norm(h_student);
  const double projected_norm = l2_norm(h_projected);
  if (!(student_norm > 1e-12)) throw Error("blend: student state has zero norm");
  if (!(projected_norm > 1e-12)) throw Error("blend: projected state has zero norm");
  std::vector<double> out(h_student.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = h_projected[i] / projected_norm;
    out[i] = (1.0 - alpha) * h_student[i] + alpha * (u * student_norm);
  }
  return out;
}

std::vector<std::string> find_opportunity_set(const std::map<std::string, bool>& teacher_scores,
                                              const std::map<std::string, bool>& student_scores) {
  if (teacher_scores.size() != student_scores.size()) {
    throw Error("find_opportunity_set: teacher and student score different item sets");
  }
  std::vector<std::string> out;
  for (const auto& [id, teacher_ok] : teacher_scores) {
    const auto it = student_scores.find(id);
    if (it == student_scores.end()) {
      throw Error("find_opportunity_set: item " + id + " missing from student scores");
    }
    if (teacher_ok && !it->second) out.push_back(id);
  }
  return out;
}

void InterventionConfig::validate() const {
  auto on_grid = [](double l) {
    return std::find(kDepthGrid.begin(), kDepthGrid.end(), l) != kDepthGrid.end();
  };
  if (!on_grid(l_t) || !on_grid(l_s)) throw Error("InterventionConfig: depth not on the depth grid");
  if (std::find(kAlphaGrid.begin(), kAlphaGrid.end(), alpha) == kAlphaGrid.end()) {
    throw Error("InterventionConfig: alpha " + std::to_string(alpha) + " not on the alpha grid");
  }
}

namespace {

std::vector<GeneratedText> generate_impl(const TransformerModel& model, std::span<const QAItem> items,
                                         const GenerationOptions& options, const Tokenizer& tokenizer,
                                         const std::vector<InterventionSpec>* specs) {
  std::vector<GeneratedText> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto prompt = tokenizer.encode(items[i].prompt);
    const auto cont = generate_greedy(model, prompt, options.max_new_tokens, Tokenizer::kEos,
                                      specs ? &(*specs)[i] : nullptr);
    out.push_back({items[i].id, items[i].prompt + tokenizer.decode(cont)});
  }
  return out;
}

}  // namespace

std::vector<GeneratedText> generate_texts(const TransformerModel& model, std::span<const QAItem> items,
                                          const GenerationOptions& options, const Tokenizer& tokenizer) {
  return generate_impl(model, items, options, tokenizer, nullptr);
}

std::vector<GeneratedText> run_intervention(const TransformerModel& student, const Mapper& mapper,
                                            const ActivationSet& teacher_acts,
                                            std::span<const QAItem> items,
                                            const InterventionConfig& config,
                                            const GenerationOptions& options,
                                            const Tokenizer& tokenizer) {
  if (!(config.alpha >= 0.0)) throw Error("run_intervention: alpha must be >= 0");
  const std::size_t layer = relative_depth_to_layer(config.l_s, student.config().n_layers);
  if (mapper.target_layer != 0 && mapper.target_layer != layer) {
    throw Error("run_intervention: mapper targets student layer " +
                std::to_string(mapper.target_layer) + ", config selects layer " + std::to_string(layer));
  }
  if (mapper.source_layer != 0 && mapper.source_layer != teacher_acts.layer_index) {
    throw Error("run_intervention: mapper was fitted on teacher layer " +
                std::to_string(mapper.source_layer) + ", activations come from layer " +
                std::to_string(teacher_acts.layer_index));
  }
  if (mapper.output_dim() != student.config().d_model) {
    throw Error("run_intervention: mapper output width does not match the student");
  }
  std::map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < teacher_acts.item_ids.size(); ++r) row_of[teacher_acts.item_ids[r]] = r;

  std::vector<InterventionSpec> specs;
  specs.reserve(items.size());
  for (const auto& item : items) {
    const auto it = row_of.find(item.id);
    if (it == row_of.end()) throw Error("run_intervention: no teacher activation for item " + item.id);
    const auto raw = teacher_acts.matrix.row(it->second);
    std::vector<double> unit(raw.begin(), raw.end());
    if (!teacher_acts.normalized) {
      const double n = l2_norm(unit);
      if (!(n > 1e-12)) throw Error("run_intervention: zero teacher activation for item " + item.id);
      for (double& v : unit) v /= n;
    }
    InterventionSpec spec;
    spec.layer_index = layer;
    spec.alpha = config.alpha;
    spec.injected_vector = project(mapper, unit);
    spec.scope = options.scope;
    specs.push_back(std::move(spec));
  }
  return generate_impl(student, items, options, tokenizer, &specs);
}

std::map<std::string, bool> score_texts(std::span<const GeneratedText> texts,
                                        std::span<const QAItem> items) {
  std::map<std::string, const QAItem*> by_id;
  for (const auto& it : items) by_id[it.id] = &it;
  std::map<std::string, bool> out;
  for (const auto& t : texts) {
    const auto it = by_id.find(t.item_id);
    if (it == by_id.end()) throw Error("score_texts: unknown item " + t.item_id);
    out[t.item_id] = score_item(t.text, *it->second).correct;
  }
  return out;
}

BaselineScores score_baselines(const TransformerModel& teacher, const TransformerModel& student,
                               std::span<const QAItem> items, const GenerationOptions& options) {
  BaselineScores b;
  b.teacher = score_texts(generate_texts(teacher, items, options), items);
  b.student = score_texts(generate_texts(student, items, options), items);
  return b;
}

std::vector<SweepRecord> sweep(const TransformerModel& teacher, const TransformerModel& student,
                               const MapperGrid& mappers, std::span<const QAItem> items,
                               const SweepGrid& grid, const GenerationOptions& options,
                               const BaselineScores* baseline) {
  BaselineScores computed;
  if (!baseline) {
    computed = score_baselines(teacher, student, items, options);
    baseline = &computed;
  }
  const auto opportunity = find_opportunity_set(baseline->teacher, baseline->student);
  std::vector<QAItem> opp_items;
  for (const auto& it : items)
    if (std::binary_search(opportunity.begin(), opportunity.end(), it.id)) opp_items.push_back(it);

  std::vector<std::size_t> teacher_layers;
  for (double l : grid.depths) teacher_layers.push_back(relative_depth_to_layer(l, teacher.config().n_layers));
  std::vector<ActivationSet> teacher_acts;
  if (!opp_items.empty()) teacher_acts = extract_activations(teacher, opp_items, teacher_layers);

  std::vector<SweepRecord> records;
  for (std::size_t ti = 0; ti < grid.depths.size(); ++ti) {
    for (double l_s : grid.depths) {
      const double l_t = grid.depths[ti];
      const auto mit = mappers.find({l_t, l_s});
      if (mit == mappers.end()) {
        throw Error("sweep: no mapper for l_t=" + std::to_string(l_t) + ", l_s=" + std::to_string(l_s));
      }
      const Mapper& mapper = mit->second;
      for (double alpha : grid.alphas) {
        SweepRecord rec;
        rec.config = {l_t, l_s, alpha};
        rec.teacher_layer = teacher_layers[ti];
        rec.student_layer = relative_depth_to_layer(l_s, student.config().n_layers);
        rec.opportunity_count = opp_items.size();
        rec.r2_ridge = mapper.heldout_r2.value_or(0.0);
        if (!opp_items.empty()) {
          const auto texts = run_intervention(student, mapper, teacher_acts[ti], opp_items, rec.config, options);
          const auto scores = score_texts(texts, opp_items);
          const auto rate = correction_rate(baseline->student, scores, opportunity);
          rec.corrected_count = rate.corrected;
          rec.delta = rate.delta;
        }
        records.push_back(rec);
      }
    }
  }
  return records;
}

std::optional<SweepRecord> peak_record(std::span<const SweepRecord> records) {
  std::optional<SweepRecord> best;
  for (const auto& r : records) {
    if (!r.delta) continue;
    if (!best || *r.delta > *best->delta) best = r;
  }
  return best;
}

std::vector<std::pair<double, double>> alpha_profile(std::span<const SweepRecord> records) {
  std::vector<std::pair<double, double>> out;
  std::vector<double> alphas;
  for (const auto& r : records)
    if (std::find(alphas.begin(), alphas.end(), r.config.alpha) == alphas.end()) alphas.push_back(r.config.alpha);
  for (double a : alphas) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : records) {
      if (r.config.alpha == a && r.delta) {
        sum += *r.delta;
        ++count;
      }
    }
    if (count > 0) out.emplace_back(a, sum / static_cast<double>(count));
  }
  return out;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson_r: length mismatch");
  if (x.size() < 2) throw Error("pearson_r: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw Error("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace xsteer
