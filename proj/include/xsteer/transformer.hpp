#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xsteer {

// Parameter and gradient storage; Eigen picks reduction order by alignment.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 75;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 1;
  std::string model_id = "student";

  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Where a generation-time intervention writes.
///
/// prompt_token: the final prompt position, once, in the prompt pass. Later
/// decoding steps see the modified state through the cached keys and values.
/// every_token: additionally every generated position, each rescaled to its
/// own residual norm.
enum class InterventionScope { prompt_token, every_token };

struct InterventionSpec {
  std::size_t layer_index = 1;  // 1-based block index
  double alpha = 0.0;
  std::vector<double> injected_vector;
  InterventionScope scope = InterventionScope::prompt_token;

  void validate(const ModelConfig& config) const;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One named slice of the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::string group;  // e.g. "attn.w_qkv", shared across layers
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }

  friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

/// Pre-norm decoder-only transformer with learned positions and an untied
/// unembedding.
///
/// Parameter order (also the checkpoint order): tok_emb [V x d],
/// pos_emb [S x d], then per block ln1.gamma, ln1.beta, attn.w_qkv [d x 3d],
/// attn.w_out [d x d], ln2.gamma, ln2.beta, mlp.w_in [d x f], mlp.b_in,
/// mlp.w_out [f x d], mlp.b_out, then lnf.gamma, lnf.beta, lm_head [d x V].
/// Activations are row vectors multiplied on the left of each weight.
template <typename T>
class BasicTransformer {
 public:
  using Matrix = RowMatrix<T>;
  using Map = Eigen::Map<Matrix>;
  using ConstMap = Eigen::Map<const Matrix>;

  /// Scaled-normal init from SeededRng(config.seed).
  explicit BasicTransformer(ModelConfig config);
  BasicTransformer(ModelConfig config, std::vector<T> parameters);

  const ModelConfig& config() const { return config_; }
  std::span<const T> parameters() const { return params_; }
  std::span<T> parameters() { return params_; }
  const std::vector<ParamBlock>& layout() const { return layout_; }

  ConstMap block(std::size_t index) const;
  Map block(std::size_t index);

  bool all_finite() const;

  friend bool operator==(const BasicTransformer&, const BasicTransformer&) = default;

 private:
  ModelConfig config_;
  std::vector<ParamBlock> layout_;
  AlignedVector<T> params_;
};

using TransformerModel = BasicTransformer<float>;

std::vector<ParamBlock> parameter_layout(const ModelConfig& config);

template <typename T>
struct ForwardOutput {
  RowMatrix<T> logits;                               // seq_len x vocab
  std::map<std::size_t, std::vector<double>> captured;  // layer -> final-token state
};

/// Runs the model over `tokens`. Captured vectors are the block outputs at
/// the final position, taken after any intervention at that layer. An
/// intervention replaces the final-position output of its block before the
/// next block runs.
template <typename T>
ForwardOutput<T> forward(const BasicTransformer<T>& model, std::span<const int> tokens,
                         std::span<const std::size_t> capture_layers = {},
                         const InterventionSpec* intervention = nullptr);

/// Softmax attention probabilities of one block, [head][query][key].
template <typename T>
std::vector<RowMatrix<T>> attention_weights(const BasicTransformer<T>& model,
                                            std::span<const int> tokens, std::size_t layer_index);

struct TrainingSequence {
  std::vector<int> tokens;
  std::size_t loss_begin = 1;  // first position whose token is a prediction target
};

/// Mean next-token cross-entropy over all targets in `batch`; gradient is
/// accumulated into `grad` (resized and zeroed on entry).
template <typename T>
T loss_and_gradient(const BasicTransformer<T>& model, std::span<const TrainingSequence> batch,
                    AlignedVector<T>& grad);

template <typename T>
T loss_only(const BasicTransformer<T>& model, std::span<const TrainingSequence> batch);

struct TrainHyper {
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
  std::size_t warmup_steps = 0;
  double min_lr_ratio = 1.0;  // cosine decay floor; 1.0 keeps lr constant
};

/// Adam with bias correction and global-norm clipping. Returns the mean
/// batch loss of every step. Throws if the loss becomes non-finite.
/// `progress`, when set, is called after every step with (step, loss).
std::vector<double> train(TransformerModel& model, std::span<const TrainingSequence> corpus,
                          const TrainHyper& hyper,
                          const std::function<void(std::size_t, double)>& progress = {});

/// Argmax decoding. Returns only the continuation, without the end token.
std::vector<int> generate_greedy(const TransformerModel& model, std::span<const int> prompt,
                                 std::size_t max_new_tokens, int eos_token,
                                 const InterventionSpec* intervention = nullptr);

// Checkpoint: "TOYM", u32 version, config, u64 count, f32 parameters (LE).
void save_checkpoint(const TransformerModel& model, const std::string& path);
TransformerModel load_checkpoint(const std::string& path);

extern template class BasicTransformer<float>;
extern template class BasicTransformer<double>;

}  // namespace xsteer
