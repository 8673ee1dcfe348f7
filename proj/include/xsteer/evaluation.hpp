#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xsteer/corpora.hpp"

namespace xsteer {

struct ScoreReport {
  std::string item_id;
  bool correct = false;
  std::optional<std::string> matched_reference;  // verbal: reference found; math: matched token
  std::string extracted_answer_segment;
  bool delimiter_missing = false;
};

/// Text after the last "Answer:", lowercased and stripped. Without a
/// delimiter the whole text is used and `delimiter_found` is cleared.
std::string answer_segment(std::string_view generated, bool* delimiter_found = nullptr);

/// Binary substring inclusion of best_answer or any correct_answers entry
/// (references lowercased, no punctuation stripping).
ScoreReport score_verbal(std::string_view generated, const QAItem& item);

/// First number after the last "####", with commas and a "$" prefix
/// removed. Throws when no delimiter or number is present.
double extract_numeric_gold(std::string_view solution);

/// All number tokens ("$" optional, comma groups, optional decimals) in the
/// answer segment; trailing ".0" and similar parse to the same value.
std::vector<double> numeric_tokens(std::string_view text);

ScoreReport score_numeric(std::string_view generated, double gold);

/// Dispatches on the item's domain.
ScoreReport score_item(std::string_view generated, const QAItem& item);

struct CorrectionRate {
  std::optional<double> delta;  // percent; empty when the opportunity set is empty
  std::size_t opportunities = 0;
  std::size_t corrected = 0;
};

CorrectionRate correction_rate(const std::map<std::string, bool>& baseline,
                               const std::map<std::string, bool>& intervened,
                               std::span<const std::string> opportunity);

/// One JSON object per line: item_id, condition, correct, matched_reference.
std::string score_dump_jsonl(std::span<const ScoreReport> reports, std::string_view condition);

}  // namespace xsteer
