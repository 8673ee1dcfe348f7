#include "xsteer/corpora.hpp"

#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "xsteer/io.hpp"
#include "xsteer/numerics.hpp"

namespace xsteer {

using nlohmann::json;

std::string_view to_string(Domain d) { return d == Domain::verbal ? "verbal" : "math"; }

Domain domain_from_string(std::string_view s) {
  if (s == "verbal") return Domain::verbal;
  if (s == "math") return Domain::math;
  throw Error("unknown domain: " + std::string(s));
}

std::string make_prompt(std::string_view question) {
  std::string p = "Question: ";
  p += question;
  p += " Answer:";
  return p;
}

Tokenizer::Tokenizer()
    : alphabet_(
          " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789?:.,#$+-='"),
      lookup_(256, -1) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    lookup_[static_cast<unsigned char>(alphabet_[i])] = static_cast<int>(i + 2);
  }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    const int id = lookup_[static_cast<unsigned char>(c)];
    if (id < 0) throw Error(std::string("tokenizer: character '") + c + "' not in alphabet");
    out.push_back(id);
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t == kPad || t == kEos) continue;
    if (t < 2 || static_cast<std::size_t>(t) >= vocab_size()) {
      throw Error("tokenizer: id " + std::to_string(t) + " out of range");
    }
    out.push_back(alphabet_[static_cast<std::size_t>(t - 2)]);
  }
  return out;
}

namespace {

std::string item_id(std::string_view prefix, std::size_t i, std::size_t n) {
  const int width = std::max(4, static_cast<int>(std::to_string(n).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return std::string(prefix) + "-" + buf;
}

constexpr std::string_view kOnsets = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";
constexpr std::string_view kCodas = "lnrs";

std::string invent_name(SeededRng& rng) {
  std::string s;
  for (int k = 0; k < 2; ++k) {
    s.push_back(kOnsets[rng.uniform_index(kOnsets.size())]);
    s.push_back(kVowels[rng.uniform_index(kVowels.size())]);
  }
  if (rng.uniform() < 0.5) s.push_back(kCodas[rng.uniform_index(kCodas.size())]);
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

}  // namespace

std::vector<QAItem> gen_verbal_task(std::uint64_t seed, std::size_t n_items) {
  if (n_items == 0) throw Error("gen_verbal_task: n_items must be >= 1");
  if (n_items > 20000) throw Error("gen_verbal_task: at most 20000 items are supported");
  SeededRng rng(seed);
  std::set<std::string> used;
  auto fresh = [&] {
    for (;;) {
      std::string name = invent_name(rng);
      if (used.insert(name).second) return name;
    }
  };
  // Places sharing a leading syllable share a capital.
  std::map<std::string, std::string> capital_of;
  for (char o : kOnsets)
    for (char v : kVowels) capital_of[{static_cast<char>(o - 'a' + 'A'), v}] = fresh();
  std::vector<QAItem> items;
  items.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    QAItem it;
    it.id = item_id("verbal", i, n_items);
    it.domain = Domain::verbal;
    const std::string place = fresh();
    const std::string& capital = capital_of.at(place.substr(0, 2));
    it.question = "What is the capital of " + place + "?";
    it.prompt = make_prompt(it.question);
    it.best_answer = capital;
    it.correct_answers = {capital, "the city of " + capital};
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<QAItem> gen_math_task(std::uint64_t seed, std::size_t n_items) {
  if (n_items == 0) throw Error("gen_math_task: n_items must be >= 1");
  // 100 * 100 sums plus 5050 non-negative differences.
  if (n_items > 15050) throw Error("gen_math_task: at most 15050 distinct problems exist");
  SeededRng rng(seed);
  std::set<std::tuple<int, bool, int>> used;
  std::vector<QAItem> items;
  items.reserve(n_items);
  while (items.size() < n_items) {
    int a = static_cast<int>(rng.uniform_index(100));
    int b = static_cast<int>(rng.uniform_index(100));
    const bool add = rng.uniform() < 0.5;
    if (!add && a < b) std::swap(a, b);
    if (!used.insert({a, add, b}).second) continue;
    const int result = add ? a + b : a - b;
    QAItem it;
    it.id = item_id("math", items.size(), n_items);
    it.domain = Domain::math;
    it.question = "What is " + std::to_string(a) + (add ? " plus " : " minus ") +
                  std::to_string(b) + "?";
    it.prompt = make_prompt(it.question);
    it.best_answer = std::to_string(result);
    it.correct_answers = {it.best_answer};
    it.gold_solution = std::to_string(a) + (add ? " + " : " - ") + std::to_string(b) + " = " +
                       std::to_string(result) + ". #### " + std::to_string(result);
    items.push_back(std::move(it));
  }
  return items;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed) {
  if (n < 2) throw Error("split: need at least 2 items, got " + std::to_string(n));
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error("split: train_fraction must lie in (0, 1)");
  }
  SeededRng rng(seed);
  std::vector<std::size_t> order = rng.permutation(n);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return {std::move(train), std::move(test)};
}

Split<QAItem> split_items(std::span<const QAItem> items, double train_fraction,
                          std::uint64_t seed) {
  auto [train_idx, test_idx] = split_indices(items.size(), train_fraction, seed);
  Split<QAItem> out;
  for (std::size_t i : train_idx) out.train.push_back(items[i]);
  for (std::size_t i : test_idx) out.test.push_back(items[i]);
  return out;
}

std::string training_text(const QAItem& item) { return item.prompt + item.best_answer; }

void write_corpus_jsonl(const std::string& path, std::span<const QAItem> items) {
  std::string out;
  for (const auto& it : items) {
    json j;
    j["id"] = it.id;
    j["domain"] = to_string(it.domain);
    j["question"] = it.question;
    j["prompt"] = it.prompt;
    j["best_answer"] = it.best_answer;
    j["correct_answers"] = it.correct_answers;
    j["gold_solution"] = it.gold_solution ? json(*it.gold_solution) : json(nullptr);
    out += j.dump();
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

std::vector<QAItem> read_corpus_jsonl(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<QAItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      QAItem it;
      it.id = j.at("id").get<std::string>();
      it.domain = domain_from_string(j.at("domain").get<std::string>());
      it.question = j.at("question").get<std::string>();
      it.prompt = j.at("prompt").get<std::string>();
      it.best_answer = j.at("best_answer").get<std::string>();
      it.correct_answers = j.at("correct_answers").get<std::vector<std::string>>();
      if (j.contains("gold_solution") && !j["gold_solution"].is_null()) {
        it.gold_solution = j["gold_solution"].get<std::string>();
      }
      items.push_back(std::move(it));
    } catch (const json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

}  // namespace xsteer
