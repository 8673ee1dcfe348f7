#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "xsteer/corpora.hpp"
#include "xsteer/intervention.hpp"
#include "xsteer/transformer.hpp"

namespace xsteer::pipeline {

/// Stage seeds, all derived from the global seed S.
struct DerivedSeeds {
  std::uint64_t verbal_corpus = 0;   // S
  std::uint64_t math_corpus = 0;     // S + 1
  std::uint64_t teacher_init = 0;    // S + 2
  std::uint64_t student_init = 0;    // S + 3
  std::uint64_t teacher_train = 0;   // S + 4
  std::uint64_t student_train = 0;   // S + 5
  std::uint64_t split = 0;           // S
  std::uint64_t permutation = 0;     // S
  std::uint64_t dissociation = 0;    // S

  static DerivedSeeds from(std::uint64_t seed);
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/seed42";

  ModelConfig teacher;
  ModelConfig student;
  TrainHyper teacher_train;
  TrainHyper student_train;

  std::size_t verbal_items = 817;
  std::size_t math_items = 400;
  std::size_t max_new_tokens = 16;
  InterventionScope scope = InterventionScope::prompt_token;

  std::vector<double> depth_grid{kDepthGrid.begin(), kDepthGrid.end()};
  std::vector<double> alpha_grid{kAlphaGrid.begin(), kAlphaGrid.end()};

  double train_fraction = 0.7;
  double ridge_lambda = 0.1;
  double lasso_lambda = 1e-4;
  std::size_t lasso_max_iter = 5000;
  double lasso_tol = 1e-4;

  double dissociation_lambda = 0.1;
  std::size_t dissociation_train = 200;
  std::size_t dissociation_test = 100;
  double dissociation_l_t = 0.75;
  double dissociation_l_s = 0.75;

  DerivedSeeds seeds() const { return DerivedSeeds::from(seed); }

  /// Copies the derived seeds into the model configs and checks every field.
  void resolve();
};

/// Defaults for the toy pairing at global seed `seed`, already resolved.
RunConfig default_config(std::uint64_t seed = 42);

/// Model seeds are not serialized: they follow from "seed". The derived
/// seeds are written under "derived_seeds" for reference and ignored on read.
nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults. Unknown keys are an error.
RunConfig from_json(const nlohmann::json& j);

RunConfig load_config(const std::string& path);

/// Fixed artifact locations under an output directory.
class Layout {
 public:
  explicit Layout(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::string run_config() const;
  std::string corpus(Domain d) const;
  std::string model(std::string_view role) const;
  std::string loss_curve() const;
  std::string activations(std::string_view role, Domain d, std::size_t layer) const;
  std::string mapper(Domain d, double l_t, double l_s, RegKind kind) const;
  std::string controls() const;
  std::string baseline(Domain d) const;
  std::string accuracy() const;
  std::string sweep(Domain d) const;
  std::string peak() const;
  std::string alpha_profile(Domain d) const;
  std::string correlation() const;
  std::string dissociation() const;
  std::string dissociation_layers() const;
  std::string report() const;

 private:
  std::filesystem::path root_;
};

/// Shortest round-trip decimal form of `v`.
std::string format_number(double v);

void cmd_corpus_gen(const RunConfig& config);
void cmd_train_pair(const RunConfig& config);
void cmd_extract(const RunConfig& config);
void cmd_fit_mappers(const RunConfig& config);
void cmd_sweep(const RunConfig& config);
void cmd_dissociate(const RunConfig& config);
void cmd_report(const RunConfig& config);
/// Every stage above, in order.
void cmd_all(const RunConfig& config);

/// Training sequences for the shared mixed corpus, verbal items first.
std::vector<TrainingSequence> training_corpus(std::span<const QAItem> verbal,
                                              std::span<const QAItem> math,
                                              const Tokenizer& tokenizer = Tokenizer());

/// Unique block indices touched by a depth grid, ascending.
std::vector<std::size_t> grid_layers(std::span<const double> depths, std::size_t n_layers);

}  // namespace xsteer::pipeline
