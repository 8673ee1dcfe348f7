#include "xsteer/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <nlohmann/json.hpp>
#include <regex>

#include "xsteer/numerics.hpp"

namespace xsteer {

namespace {

constexpr std::string_view kAnswerDelimiter = "Answer:";

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view strip(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

const std::regex& number_pattern() {
  static const std::regex re(R"(-?\$?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)");
  return re;
}

double parse_number(std::string token) {
  token.erase(std::remove_if(token.begin(), token.end(), [](char c) { return c == ',' || c == '$'; }),
              token.end());
  return std::stod(token);
}

}  // namespace

std::string answer_segment(std::string_view generated, bool* delimiter_found) {
  const auto pos = generated.rfind(kAnswerDelimiter);
  if (delimiter_found) *delimiter_found = pos != std::string_view::npos;
  const std::string_view tail =
      pos == std::string_view::npos ? generated : generated.substr(pos + kAnswerDelimiter.size());
  return lower(strip(tail));
}

ScoreReport score_verbal(std::string_view generated, const QAItem& item) {
  ScoreReport rep;
  rep.item_id = item.id;
  bool found = false;
  rep.extracted_answer_segment = answer_segment(generated, &found);
  rep.delimiter_missing = !found;
  std::vector<std::string> refs{item.best_answer};
  refs.insert(refs.end(), item.correct_answers.begin(), item.correct_answers.end());
  for (const auto& ref : refs) {
    const std::string r = lower(strip(ref));
    if (!r.empty() && rep.extracted_answer_segment.find(r) != std::string::npos) {
      rep.correct = true;
      rep.matched_reference = ref;
      break;
    }
  }
  return rep;
}

double extract_numeric_gold(std::string_view solution) {
  const auto pos = solution.rfind("####");
  if (pos == std::string_view::npos) {
    throw Error("extract_numeric_gold: no \"####\" delimiter in solution");
  }
  const std::string tail(solution.substr(pos + 4));
  std::smatch m;
  if (!std::regex_search(tail, m, number_pattern())) {
    throw Error("extract_numeric_gold: no number after \"####\"");
  }
  return parse_number(m.str());
}

std::vector<double> numeric_tokens(std::string_view text) {
  std::vector<double> out;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number_pattern());
       it != std::sregex_iterator(); ++it) {
    out.push_back(parse_number(it->str()));
  }
  return out;
}

ScoreReport score_numeric(std::string_view generated, double gold) {
  ScoreReport rep;
  bool found = false;
  rep.extracted_answer_segment = answer_segment(generated, &found);
  rep.delimiter_missing = !found;
  const std::string s = rep.extracted_answer_segment;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number_pattern());
       it != std::sregex_iterator(); ++it) {
    if (parse_number(it->str()) == gold) {
      rep.correct = true;
      rep.matched_reference = it->str();
      break;
    }
  }
  return rep;
}

ScoreReport score_item(std::string_view generated, const QAItem& item) {
  if (item.domain == Domain::verbal) return score_verbal(generated, item);
  if (!item.gold_solution) throw Error("score_item: math item " + item.id + " has no gold solution");
  ScoreReport rep = score_numeric(generated, extract_numeric_gold(*item.gold_solution));
  rep.item_id = item.id;
  return rep;
}

CorrectionRate correction_rate(const std::map<std::string, bool>& baseline,
                               const std::map<std::string, bool>& intervened,
                               std::span<const std::string> opportunity) {
  CorrectionRate out;
  out.opportunities = opportunity.size();
  for (const auto& id : opportunity) {
    const auto b = baseline.find(id);
    const auto v = intervened.find(id);
    if (b == baseline.end() || v == intervened.end()) {
      throw Error("correction_rate: opportunity item " + id + " missing from score maps");
    }
    if (b->second) throw Error("correction_rate: opportunity item " + id + " is correct at baseline");
    if (v->second) ++out.corrected;
  }
  if (out.opportunities > 0) {
    out.delta = 100.0 * static_cast<double>(out.corrected) / static_cast<double>(out.opportunities);
  }
  return out;
}

std::string score_dump_jsonl(std::span<const ScoreReport> reports, std::string_view condition) {
  std::string out;
  for (const auto& r : reports) {
    nlohmann::json j;
    j["item_id"] = r.item_id;
    j["condition"] = condition;
    j["correct"] = r.correct;
    j["matched_reference"] = r.matched_reference ? nlohmann::json(*r.matched_reference) : nlohmann::json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace xsteer
