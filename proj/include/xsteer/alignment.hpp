#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xsteer/corpora.hpp"
#include "xsteer/numerics.hpp"
#include "xsteer/transformer.hpp"

namespace xsteer {

/// Final-token hidden states of one model at one layer over a list of items.
struct ActivationSet {
  std::string model_id;
  std::size_t layer_index = 0;
  double relative_depth = 0.0;
  Domain domain = Domain::verbal;
  std::vector<std::string> item_ids;
  DenseMatrix matrix;  // N x d
  bool normalized = false;

  void validate() const;
  ActivationSet select(std::span<const std::size_t> rows) const;

  friend bool operator==(const ActivationSet&, const ActivationSet&) = default;
};

/// Row i holds the final-token block output for items[i].prompt. Not
/// normalized.
ActivationSet extract_activations(const TransformerModel& model, std::span<const QAItem> items,
                                  std::size_t layer_index, const Tokenizer& tokenizer = Tokenizer());

/// One forward pass per item, capturing every requested layer at once.
std::vector<ActivationSet> extract_activations(const TransformerModel& model,
                                               std::span<const QAItem> items,
                                               std::span<const std::size_t> layer_indices,
                                               const Tokenizer& tokenizer = Tokenizer());

ActivationSet normalize(const ActivationSet& set);

enum class RegKind { ridge, lasso, permutation_ridge };

std::string_view to_string(RegKind k);
RegKind reg_kind_from_string(std::string_view s);

/// Affine map h_student ~ W h_teacher + b.
struct Mapper {
  DenseMatrix weights;  // d_S x d_T
  std::vector<double> bias;
  RegKind reg_kind = RegKind::ridge;
  double lambda = 0.0;

  std::string source_model_id;
  std::size_t source_layer = 0;
  double source_depth = 0.0;
  std::string target_model_id;
  std::size_t target_layer = 0;
  double target_depth = 0.0;
  Domain train_domain = Domain::verbal;
  std::size_t train_item_count = 0;

  std::optional<double> sparsity;   // lasso only: fraction of exactly-zero weights
  bool converged = true;            // lasso non-convergence is a warning, not an error
  std::size_t iterations = 0;
  std::optional<double> heldout_r2;

  std::size_t input_dim() const { return weights.cols(); }
  std::size_t output_dim() const { return weights.rows(); }

  /// Applies the map to every row of `inputs` (N x d_T -> N x d_S).
  DenseMatrix predict(const DenseMatrix& inputs) const;
};

/// Minimizes ||H_S - H_T W^T - 1 b^T||_F^2 + lambda ||W||_F^2 with b
/// unpenalized, via centered normal equations.
Mapper fit_ridge(const ActivationSet& teacher, const ActivationSet& student, double lambda);

struct LassoOptions {
  std::size_t max_iter = 5000;
  double tol = 1e-4;
  bool record_objective = false;
};

/// Coordinate descent for one output column on precomputed statistics:
/// minimizes (1/(2N)) (yty - 2 w.xty + w^T G w) + lambda |w|_1 where G and
/// xty come from centered data.
struct LassoColumnResult {
  std::vector<double> weights;
  std::size_t sweeps = 0;
  bool converged = false;
  std::vector<double> objective;  // after each sweep, when recorded
};

LassoColumnResult lasso_coordinate_descent(const DenseMatrix& gram, std::span<const double> xty,
                                           double yty, std::size_t n, double lambda,
                                           const LassoOptions& options);

double lasso_objective(const DenseMatrix& gram, std::span<const double> xty, double yty,
                       std::size_t n, double lambda, std::span<const double> w);

/// Per-output-dimension coordinate descent with soft-thresholding on
/// (1/(2N)) ||H_S - H_T W^T - 1 b^T||^2 + lambda ||W||_1.
Mapper fit_lasso(const ActivationSet& teacher, const ActivationSet& student, double lambda,
                 const LassoOptions& options = {});

/// Ridge fit against student rows shuffled by SeededRng(seed). The item id
/// pairing used for evaluation is untouched.
Mapper fit_permutation_control(const ActivationSet& teacher, const ActivationSet& student,
                               double lambda, std::uint64_t seed);

struct R2Result {
  double value = 0.0;               // uniform mean over kept output dimensions
  std::size_t excluded_dims = 0;    // zero-variance dimensions skipped
  std::vector<double> per_dimension;
};

R2Result r2_score(const DenseMatrix& predicted, const DenseMatrix& target);
R2Result r2_score(const Mapper& mapper, const ActivationSet& teacher_test,
                  const ActivationSet& student_test);

// Mapper file: "MAPW", u32 version, u32 d_S, u32 d_T, u32 reg_kind, f64
// lambda, f64 weights row-major, f64 bias. Provenance lives in a JSON
// sidecar at <path>.json.
void save_mapper(const Mapper& mapper, const std::string& path);
Mapper load_mapper(const std::string& path);

// Activation cache: "ACTB", u32 version, u32 rows, u32 cols, f32 row-major
// (LE), plus a JSON sidecar at <path>.json.
void save_activations(const ActivationSet& set, const std::string& path, std::uint64_t seed);
ActivationSet load_activations(const std::string& path);

}  // namespace xsteer
