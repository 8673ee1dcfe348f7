#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xsteer/alignment.hpp"
#include "xsteer/corpora.hpp"
#include "xsteer/evaluation.hpp"
#include "xsteer/transformer.hpp"

namespace xsteer {

inline constexpr std::array<double, 4> kDepthGrid = {0.25, 0.50, 0.75, 0.90};
inline constexpr std::array<double, 8> kAlphaGrid = {0.25, 0.5, 0.8, 1.0, 2.0, 3.0, 5.0, 10.0};

/// clamp(round(l * n_layers), 1, n_layers), rounding halves away from zero.
std::size_t relative_depth_to_layer(double relative_depth, std::size_t n_layers);

/// W h + b.
std::vector<double> project(const Mapper& mapper, std::span<const double> teacher_state);

/// (1 - alpha) h_student + alpha * ||h_student|| * h_projected / ||h_projected||
std::vector<double> blend(std::span<const double> h_student, std::span<const double> h_projected,
                          double alpha);

/// Items the teacher gets right and the student gets wrong, in key order.
std::vector<std::string> find_opportunity_set(const std::map<std::string, bool>& teacher_scores,
                                              const std::map<std::string, bool>& student_scores);

struct InterventionConfig {
  double l_t = 0.75;
  double l_s = 0.75;
  double alpha = 1.0;

  void validate() const;
};

struct GenerationOptions {
  std::size_t max_new_tokens = 16;
  InterventionScope scope = InterventionScope::prompt_token;
};

struct GeneratedText {
  std::string item_id;
  std::string text;  // prompt followed by the decoded continuation
};

/// Greedy generation for every item, optionally with an intervention.
std::vector<GeneratedText> generate_texts(const TransformerModel& model, std::span<const QAItem> items,
                                          const GenerationOptions& options,
                                          const Tokenizer& tokenizer = Tokenizer());

/// Projects each item's normalized teacher state and injects it into the
/// student at relative_depth_to_layer(l_s) with the configured alpha.
std::vector<GeneratedText> run_intervention(const TransformerModel& student, const Mapper& mapper,
                                            const ActivationSet& teacher_acts,
                                            std::span<const QAItem> items,
                                            const InterventionConfig& config,
                                            const GenerationOptions& options = {},
                                            const Tokenizer& tokenizer = Tokenizer());

std::map<std::string, bool> score_texts(std::span<const GeneratedText> texts,
                                        std::span<const QAItem> items);

struct SweepRecord {
  InterventionConfig config;
  std::size_t teacher_layer = 0;
  std::size_t student_layer = 0;
  std::size_t opportunity_count = 0;
  std::size_t corrected_count = 0;
  std::optional<double> delta;  // percent; empty when there are no opportunities
  double r2_ridge = 0.0;
  bool empty_opportunity() const { return opportunity_count == 0; }
};

struct SweepGrid {
  std::vector<double> depths{kDepthGrid.begin(), kDepthGrid.end()};
  std::vector<double> alphas{kAlphaGrid.begin(), kAlphaGrid.end()};
};

using DepthPair = std::pair<double, double>;  // (l_t, l_s)
using MapperGrid = std::map<DepthPair, Mapper>;

struct BaselineScores {
  std::map<std::string, bool> teacher;
  std::map<std::string, bool> student;
};

BaselineScores score_baselines(const TransformerModel& teacher, const TransformerModel& student,
                               std::span<const QAItem> items, const GenerationOptions& options);

/// Evaluates every (l_t, l_s, alpha) cell on the opportunity set, in grid
/// order. Mapper held-out R^2 (when recorded) is copied into each record.
std::vector<SweepRecord> sweep(const TransformerModel& teacher, const TransformerModel& student,
                               const MapperGrid& mappers, std::span<const QAItem> items,
                               const SweepGrid& grid, const GenerationOptions& options,
                               const BaselineScores* baseline = nullptr);

/// First record with the largest defined delta.
std::optional<SweepRecord> peak_record(std::span<const SweepRecord> records);

/// Mean delta per alpha over records with a defined delta.
std::vector<std::pair<double, double>> alpha_profile(std::span<const SweepRecord> records);

double pearson_r(std::span<const double> x, std::span<const double> y);

}  // namespace xsteer
