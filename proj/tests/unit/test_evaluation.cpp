#include <doctest.h>

#include "xsteer/evaluation.hpp"
#include "xsteer/numerics.hpp"

using namespace xsteer;

namespace {

QAItem zorvane() {
  QAItem it;
  it.id = "verbal-0007";
  it.domain = Domain::verbal;
  it.question = "What is the capital of Kelmar?";
  it.prompt = make_prompt(it.question);
  it.best_answer = "Zorvane";
  it.correct_answers = {"Zorvane", "the city of Zorvane"};
  return it;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("verbal substring fixtures") {
  const auto item = zorvane();
  const auto hit = score_verbal("Question: What is the capital of Kelmar? Answer: the capital is Zorvane", item);
  CHECK(hit.correct);
  CHECK(hit.matched_reference == std::optional<std::string>("Zorvane"));
  CHECK(hit.extracted_answer_segment == "the capital is zorvane");
  CHECK(!hit.delimiter_missing);

  CHECK(score_verbal("Answer: zorVANE", item).correct);
  CHECK_FALSE(score_verbal("Answer: Paris is lovely", item).correct);
  CHECK_FALSE(score_verbal("Answer: Paris is lovely", item).matched_reference);
}

TEST_CASE("paraphrase fails the substring test") {
  // Semantically right, lexically different: scored as a miss.
  const auto item = zorvane();
  CHECK_FALSE(score_verbal("Answer: the seat of government sits in Zorvan", item).correct);
  CHECK_FALSE(score_verbal("Answer: Zor vane", item).correct);
}

TEST_CASE("only the last Answer: delimiter counts") {
  const auto item = zorvane();
  CHECK_FALSE(score_verbal("Answer: Zorvane. Question: again? Answer: Mirok", item).correct);
  CHECK(score_verbal("Answer: Mirok. Answer: Zorvane", item).correct);
}

TEST_CASE("missing delimiter scores the whole text and flags it") {
  const auto rep = score_verbal("  it is Zorvane ", zorvane());
  CHECK(rep.correct);
  CHECK(rep.delimiter_missing);
  CHECK(rep.extracted_answer_segment == "it is zorvane");
}

TEST_CASE("verbal scoring ignores outer whitespace and case") {
  const auto item = zorvane();
  for (const std::string text : {"Answer: zorvane", "Answer:   ZORVANE   ", "\tANSWER: Zorvane\n"}) {
    const auto a = score_verbal(text, item);
    CHECK(a.correct == score_verbal("Answer: Zorvane", item).correct);
  }
}

TEST_CASE("numeric gold extraction") {
  CHECK(extract_numeric_gold("steps... #### 82") == 82.0);
  CHECK(extract_numeric_gold("#### $1,234") == 1234.0);
  CHECK(extract_numeric_gold("a #### 1 then #### 7") == 7.0);
  CHECK(extract_numeric_gold("#### -5") == -5.0);
  CHECK_THROWS_AS(extract_numeric_gold("no marker"), Error);
  CHECK_THROWS_AS(extract_numeric_gold("#### none"), Error);
}

TEST_CASE("numeric scoring fixtures") {
  CHECK(score_numeric("Answer: 82 apples", 82).correct);
  CHECK(score_numeric("Answer: $1,234", 1234).correct);
  CHECK_FALSE(score_numeric("Answer: 83", 82).correct);
  CHECK(score_numeric("Answer: 82.0", 82).correct);
  CHECK(score_numeric("Answer: 82.50", 82.5).correct);
  CHECK_FALSE(score_numeric("Answer: 182", 82).correct);
  CHECK_FALSE(score_numeric("Answer: 82. Answer: 9", 82).correct);
  const auto rep = score_numeric("Answer: it is 3 or 82", 82);
  CHECK(rep.matched_reference == std::optional<std::string>("82"));
}

TEST_CASE("numeric tokens") {
  const auto t = numeric_tokens("$1,234 and 5.0 and -7, 12");
  REQUIRE(t.size() == 4);
  CHECK(t[0] == 1234.0);
  CHECK(t[1] == 5.0);
  CHECK(t[2] == -7.0);
  CHECK(t[3] == 12.0);
}

TEST_CASE("score_item dispatches on the domain") {
  QAItem m;
  m.id = "math-0001";
  m.domain = Domain::math;
  m.best_answer = "82";
  m.correct_answers = {"82"};
  m.gold_solution = "37 + 45 = 82. #### 82";
  CHECK(score_item("Question: What is 37 plus 45? Answer: 82", m).correct);
  CHECK(score_item("Question: What is 37 plus 45? Answer: 82", m).item_id == "math-0001");
  m.gold_solution.reset();
  CHECK_THROWS_AS(score_item("Answer: 82", m), Error);
}

TEST_CASE("correction rate arithmetic") {
  std::map<std::string, bool> base, after;
  std::vector<std::string> opp;
  for (int i = 0; i < 20; ++i) {
    const std::string id = "i" + std::to_string(i);
    base[id] = false;
    after[id] = i < 5;
    opp.push_back(id);
  }
  const auto r = correction_rate(base, after, opp);
  CHECK(r.delta == std::optional<double>(25.0));
  CHECK(r.corrected == 5);

  for (auto& [k, v] : after) v = false;
  CHECK(correction_rate(base, after, opp).delta == std::optional<double>(0.0));
  for (auto& [k, v] : after) v = true;
  CHECK(correction_rate(base, after, opp).delta == std::optional<double>(100.0));

  CHECK_FALSE(correction_rate(base, after, {}).delta);

  base["i0"] = true;
  CHECK_THROWS_AS(correction_rate(base, after, opp), Error);
  const std::vector<std::string> ghost = {"nope"};
  CHECK_THROWS_AS(correction_rate(base, after, ghost), Error);
}

TEST_CASE("delta is monotone in corrected items") {
  std::map<std::string, bool> base, after;
  std::vector<std::string> opp;
  for (int i = 0; i < 9; ++i) {
    const std::string id = "i" + std::to_string(i);
    base[id] = false;
    after[id] = false;
    opp.push_back(id);
  }
  double prev = *correction_rate(base, after, opp).delta;
  for (const auto& id : opp) {
    after[id] = true;
    const double now = *correction_rate(base, after, opp).delta;
    CHECK(now >= prev);
    prev = now;
  }
}

TEST_CASE("score dump is one json object per line") {
  std::vector<ScoreReport> reps(2);
  reps[0].item_id = "a";
  reps[0].correct = true;
  reps[0].matched_reference = "x";
  reps[1].item_id = "b";
  CHECK(score_dump_jsonl(reps, "baseline") ==
        "{\"condition\":\"baseline\",\"correct\":true,\"item_id\":\"a\",\"matched_reference\":\"x\"}\n"
        "{\"condition\":\"baseline\",\"correct\":false,\"item_id\":\"b\",\"matched_reference\":null}\n");
}

}  // TEST_SUITE
