#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xsteer {

enum class Domain { verbal, math };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

struct QAItem {
  std::string id;
  Domain domain = Domain::verbal;
  std::string question;
  std::string prompt;
  std::string best_answer;
  std::vector<std::string> correct_answers;
  std::optional<std::string> gold_solution;

  friend bool operator==(const QAItem&, const QAItem&) = default;
};

/// "Question: {question} Answer:"
std::string make_prompt(std::string_view question);

/// Character-level tokenizer shared by every model in a pairing.
///
/// Ids 0 and 1 are reserved for pad and end-of-sequence; the remaining ids
/// follow the order of `alphabet()`.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;

  Tokenizer();

  std::size_t vocab_size() const { return 2 + alphabet_.size(); }
  const std::string& alphabet() const { return alphabet_; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> tokens) const;  // specials skipped

 private:
  std::string alphabet_;
  std::vector<int> lookup_;
};

std::vector<QAItem> gen_verbal_task(std::uint64_t seed, std::size_t n_items);
std::vector<QAItem> gen_math_task(std::uint64_t seed, std::size_t n_items);

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> test;
};

/// Seeded shuffle then split; train gets round(train_fraction * n) items,
/// clamped so neither side is empty.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed);

Split<QAItem> split_items(std::span<const QAItem> items, double train_fraction,
                          std::uint64_t seed);

/// Training text for an item: the prompt immediately followed by the best
/// answer, so the final prompt token predicts the first answer character.
std::string training_text(const QAItem& item);

// One JSON object per line, UTF-8.
void write_corpus_jsonl(const std::string& path, std::span<const QAItem> items);
std::vector<QAItem> read_corpus_jsonl(const std::string& path);

}  // namespace xsteer
