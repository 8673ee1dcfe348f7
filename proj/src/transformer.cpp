#include "xsteer/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xsteer/intervention.hpp"
#include "xsteer/io.hpp"
#include "xsteer/numerics.hpp"

namespace xsteer {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kBlocksPerLayer = 10;

// Offsets inside one decoder layer.
enum LayerPart : std::size_t {
  kLn1Gamma,
  kLn1Beta,
  kWqkv,
  kWo,
  kLn2Gamma,
  kLn2Beta,
  kWin,
  kBin,
  kWout,
  kBout
};

std::size_t layer_block(std::size_t layer, LayerPart part) {
  return 2 + layer * kBlocksPerLayer + part;
}
std::size_t final_block(const ModelConfig& c, std::size_t k) {
  return 2 + c.n_layers * kBlocksPerLayer + k;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 2) throw Error("ModelConfig: n_layers must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_ff == 0) throw Error("ModelConfig: zero dimension");
  if (d_model % n_heads != 0) {
    throw Error("ModelConfig: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                std::to_string(n_heads));
  }
  if (vocab_size < 3) throw Error("ModelConfig: vocab_size too small");
  if (max_seq_len < 2) throw Error("ModelConfig: max_seq_len too small");
}

void InterventionSpec::validate(const ModelConfig& config) const {
  if (layer_index < 1 || layer_index > config.n_layers) {
    throw Error("InterventionSpec: layer_index " + std::to_string(layer_index) +
                " outside [1, " + std::to_string(config.n_layers) + "]");
  }
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error("InterventionSpec: alpha must be >= 0");
  if (injected_vector.size() != config.d_model) {
    throw Error("InterventionSpec: injected vector has length " +
                std::to_string(injected_vector.size()) + ", model width is " +
                std::to_string(config.d_model));
  }
  for (double v : injected_vector)
    if (!std::isfinite(v)) throw Error("InterventionSpec: injected vector is not finite");
}

std::vector<ParamBlock> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamBlock> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::string group, std::size_t rows, std::size_t cols) {
    out.push_back({std::move(name), std::move(group), offset, rows, cols});
    offset += rows * cols;
  };
  const std::size_t d = c.d_model;
  add("tok_emb", "tok_emb", c.vocab_size, d);
  add("pos_emb", "pos_emb", c.max_seq_len, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l + 1) + ".";
    add(p + "ln1.gamma", "ln1.gamma", 1, d);
    add(p + "ln1.beta", "ln1.beta", 1, d);
    add(p + "attn.w_qkv", "attn.w_qkv", d, 3 * d);
    add(p + "attn.w_out", "attn.w_out", d, d);
    add(p + "ln2.gamma", "ln2.gamma", 1, d);
    add(p + "ln2.beta", "ln2.beta", 1, d);
    add(p + "mlp.w_in", "mlp.w_in", d, c.d_ff);
    add(p + "mlp.b_in", "mlp.b_in", 1, c.d_ff);
    add(p + "mlp.w_out", "mlp.w_out", c.d_ff, d);
    add(p + "mlp.b_out", "mlp.b_out", 1, d);
  }
  add("lnf.gamma", "lnf.gamma", 1, d);
  add("lnf.beta", "lnf.beta", 1, d);
  add("lm_head", "lm_head", d, c.vocab_size);
  return out;
}

template <typename T>
BasicTransformer<T>::BasicTransformer(ModelConfig config)
    : config_(std::move(config)), layout_(parameter_layout(config_)) {
  params_.assign(layout_.back().offset + layout_.back().size(), T(0));
  SeededRng rng(config_.seed);
  const double base_std = 0.02;
  const double residual_std = base_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (const auto& b : layout_) {
    const bool is_gamma = b.group.ends_with("gamma");
    const bool is_bias = b.group.ends_with("beta") || b.group.starts_with("mlp.b_");
    const bool is_residual_out = b.group == "attn.w_out" || b.group == "mlp.w_out";
    for (std::size_t i = 0; i < b.size(); ++i) {
      T& p = params_[b.offset + i];
      if (is_gamma) {
        p = T(1);
      } else if (is_bias) {
        p = T(0);
      } else {
        p = static_cast<T>(rng.normal() * (is_residual_out ? residual_std : base_std));
      }
    }
  }
}

template <typename T>
BasicTransformer<T>::BasicTransformer(ModelConfig config, std::vector<T> parameters)
    : config_(std::move(config)), layout_(parameter_layout(config_)), params_(parameters.begin(), parameters.end()) {
  const std::size_t expected = layout_.back().offset + layout_.back().size();
  if (params_.size() != expected) {
    throw Error("BasicTransformer: expected " + std::to_string(expected) + " parameters, got " +
                std::to_string(params_.size()));
  }
}

template <typename T>
typename BasicTransformer<T>::ConstMap BasicTransformer<T>::block(std::size_t index) const {
  const auto& b = layout_.at(index);
  return ConstMap(params_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                  static_cast<Eigen::Index>(b.cols));
}

template <typename T>
typename BasicTransformer<T>::Map BasicTransformer<T>::block(std::size_t index) {
  const auto& b = layout_.at(index);
  return Map(params_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
             static_cast<Eigen::Index>(b.cols));
}

template <typename T>
bool BasicTransformer<T>::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](T v) { return std::isfinite(v); });
}

template class BasicTransformer<float>;
template class BasicTransformer<double>;

namespace {

template <typename T>
using Mat = RowMatrix<T>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T, typename Gamma, typename Beta>
Mat<T> layer_norm(const Mat<T>& x, const Gamma& gamma, const Beta& beta, LayerNormCache<T>* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat<T> xhat(n, d);
  Vec<T> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Mat<T> out = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return out;
}

template <typename T, typename Gamma, typename GradRow>
Mat<T> layer_norm_backward(const Mat<T>& dout, const LayerNormCache<T>& cache, const Gamma& gamma,
                           GradRow dgamma, GradRow dbeta) {
  dgamma.row(0) += (dout.array() * cache.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dout.colwise().sum();
  const Mat<T> dxhat = dout.array().rowwise() * gamma.row(0).array();
  Mat<T> dx(dout.rows(), dout.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    const T mean_d = dxhat.row(i).mean();
    const T mean_dx = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
    dx.row(i) =
        cache.rstd(i) * (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx);
  }
  return dx;
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

/// tanh(k (x + c x^3)), elementwise.
template <typename T>
Mat<T> gelu_tanh(const Mat<T>& x) {
  const T k = static_cast<T>(kGeluK), c = static_cast<T>(kGeluC);
  return (k * (x.array() + c * x.array().cube())).tanh().matrix();
}

/// d gelu / dx from the input and its cached tanh term.
template <typename T>
Mat<T> gelu_grad(const Mat<T>& x, const Mat<T>& th) {
  const T k = static_cast<T>(kGeluK), c3 = static_cast<T>(3 * kGeluC);
  const auto t = th.array();
  return (T(0.5) * (T(1) + t) + T(0.5) * x.array() * (T(1) - t.square()) * k * (T(1) + c3 * x.array().square()))
      .matrix();
}

template <typename T>
struct BlockCache {
  Mat<T> x_in;
  LayerNormCache<T> ln1;
  Mat<T> a;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;
  Mat<T> att;
  LayerNormCache<T> ln2;
  Mat<T> m;
  Mat<T> hpre;
  Mat<T> g;
  Mat<T> th;  // tanh term of the gelu
};

template <typename T>
struct ForwardCache {
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> lnf;
  Mat<T> f;
};

template <typename T>
void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    throw Error("forward: sequence length " + std::to_string(tokens.size()) +
                " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw Error("forward: token id " + std::to_string(t) + " out of vocabulary");
    }
  }
}

/// Keys and values of every processed position, per layer.
template <typename T>
struct KvCache {
  std::vector<Mat<T>> keys;
  std::vector<Mat<T>> values;
  std::size_t length = 0;
};

/// One decoder block over rows that sit at absolute positions [p0, p0+n).
/// With a kv cache the new keys/values are appended and attention spans the
/// cached prefix; without one p0 must be 0. `probs_out` receives the
/// attention probabilities when non-null.
template <typename T>
Mat<T> run_block(const BasicTransformer<T>& model, std::size_t layer, const Mat<T>& x,
                 BlockCache<T>* cache, std::vector<Mat<T>>* probs_out, KvCache<T>* kv = nullptr,
                 std::size_t p0 = 0) {
  const ModelConfig& c = model.config();
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto hd = static_cast<Eigen::Index>(c.d_model / c.n_heads);
  const auto start = static_cast<Eigen::Index>(p0);
  const Eigen::Index total = start + n;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  LayerNormCache<T> ln1;
  Mat<T> a = layer_norm(x, model.block(layer_block(layer, kLn1Gamma)),
                        model.block(layer_block(layer, kLn1Beta)), &ln1);
  Mat<T> qkv(n, 3 * d);
  qkv.noalias() = a * model.block(layer_block(layer, kWqkv));
  if (kv) {
    kv->keys[layer].block(start, 0, n, d) = qkv.block(0, d, n, d);
    kv->values[layer].block(start, 0, n, d) = qkv.block(0, 2 * d, n, d);
  }

  Mat<T> att(n, d);
  std::vector<Mat<T>> probs;
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * hd;
    Mat<T> s(n, total);
    if (kv) {
      s.noalias() = qkv.block(0, off, n, hd) * kv->keys[layer].block(0, off, total, hd).transpose();
    } else {
      s.noalias() = qkv.block(0, off, n, hd) * qkv.block(0, d + off, n, hd).transpose();
    }
    s *= scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index visible = start + i;  // last key position this row may see
      auto row = s.row(i).head(visible + 1).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
      s.row(i).tail(total - visible - 1).setZero();
    }
    if (kv) {
      att.block(0, off, n, hd).noalias() = s * kv->values[layer].block(0, off, total, hd);
    } else {
      att.block(0, off, n, hd).noalias() = s * qkv.block(0, 2 * d + off, n, hd);
    }
    if (cache || probs_out) probs.push_back(std::move(s));
  }

  Mat<T> x_mid = x;
  x_mid.noalias() += att * model.block(layer_block(layer, kWo));

  LayerNormCache<T> ln2;
  Mat<T> m = layer_norm(x_mid, model.block(layer_block(layer, kLn2Gamma)),
                        model.block(layer_block(layer, kLn2Beta)), &ln2);
  Mat<T> hpre(n, static_cast<Eigen::Index>(c.d_ff));
  hpre.noalias() = m * model.block(layer_block(layer, kWin));
  hpre.rowwise() += model.block(layer_block(layer, kBin)).row(0);
  Mat<T> th = gelu_tanh(hpre);
  Mat<T> g = T(0.5) * hpre.array() * (T(1) + th.array());
  Mat<T> out = x_mid;
  out.noalias() += g * model.block(layer_block(layer, kWout));
  out.rowwise() += model.block(layer_block(layer, kBout)).row(0);

  if (probs_out) *probs_out = probs;
  if (cache) {
    cache->x_in = x;
    cache->ln1 = std::move(ln1);
    cache->a = std::move(a);
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->att = std::move(att);
    cache->ln2 = std::move(ln2);
    cache->m = std::move(m);
    cache->hpre = std::move(hpre);
    cache->g = std::move(g);
    cache->th = std::move(th);
  }
  return out;
}

template <typename T>
Mat<T> embed(const BasicTransformer<T>& model, std::span<const int> tokens, std::size_t p0 = 0) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto tok = model.block(0);
  const auto pos = model.block(1);
  Mat<T> x(n, static_cast<Eigen::Index>(model.config().d_model));
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = tok.row(tokens[static_cast<std::size_t>(t)]) + pos.row(static_cast<Eigen::Index>(p0) + t);
  }
  return x;
}

template <typename T>
void intervene_row(Mat<T>& x, Eigen::Index r, const InterventionSpec& spec) {
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = static_cast<double>(x(r, j));
  const std::vector<double> mixed = blend(row, spec.injected_vector, spec.alpha);
  for (Eigen::Index j = 0; j < x.cols(); ++j) x(r, j) = static_cast<T>(mixed[static_cast<std::size_t>(j)]);
}

/// Incremental inference over a growing sequence.
template <typename T>
class Decoder {
 public:
  explicit Decoder(const BasicTransformer<T>& model) : model_(model) {
    const ModelConfig& c = model.config();
    const auto s = static_cast<Eigen::Index>(c.max_seq_len);
    const auto d = static_cast<Eigen::Index>(c.d_model);
    kv_.keys.assign(c.n_layers, Mat<T>::Zero(s, d));
    kv_.values.assign(c.n_layers, Mat<T>::Zero(s, d));
  }

  std::size_t length() const { return kv_.length; }

  /// Appends `tokens` and returns the final hidden states of the new rows.
  /// When `intervene_last` is set the intervention replaces the last new
  /// row's output of its block. Captures read the last new row.
  Mat<T> feed(std::span<const int> tokens, const InterventionSpec* intervention, bool intervene_last,
              std::span<const std::size_t> capture_layers,
              std::map<std::size_t, std::vector<double>>* captured) {
    const ModelConfig& c = model_.config();
    if (tokens.empty()) throw Error("forward: empty token sequence");
    if (kv_.length + tokens.size() > c.max_seq_len) {
      throw Error("forward: sequence length " + std::to_string(kv_.length + tokens.size()) +
                  " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    for (int t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
        throw Error("forward: token id " + std::to_string(t) + " out of vocabulary");
      }
    }
    const std::size_t p0 = kv_.length;
    Mat<T> x = embed(model_, tokens, p0);
    const auto last = static_cast<Eigen::Index>(tokens.size() - 1);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      x = run_block<T>(model_, l, x, nullptr, nullptr, &kv_, p0);
      if (intervention && intervene_last && intervention->layer_index == l + 1) {
        intervene_row(x, last, *intervention);
      }
      if (captured && std::find(capture_layers.begin(), capture_layers.end(), l + 1) != capture_layers.end()) {
        std::vector<double> v(c.d_model);
        for (std::size_t j = 0; j < c.d_model; ++j) v[j] = static_cast<double>(x(last, static_cast<Eigen::Index>(j)));
        (*captured)[l + 1] = std::move(v);
      }
    }
    kv_.length += tokens.size();
    return x;
  }

  Mat<T> logits(const Mat<T>& hidden) const {
    const ModelConfig& c = model_.config();
    return layer_norm<T>(hidden, model_.block(final_block(c, 0)), model_.block(final_block(c, 1)), nullptr) *
           model_.block(final_block(c, 2));
  }

 private:
  const BasicTransformer<T>& model_;
  KvCache<T> kv_;
};

/// Training pass with full caches; returns logits for every position.
template <typename T>
Mat<T> run_training_forward(const BasicTransformer<T>& model, std::span<const int> tokens,
                            ForwardCache<T>& cache) {
  const ModelConfig& c = model.config();
  check_tokens<T>(c, tokens);
  Mat<T> x = embed(model, tokens);
  cache.blocks.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) x = run_block<T>(model, l, x, &cache.blocks[l], nullptr);
  cache.f = layer_norm<T>(x, model.block(final_block(c, 0)), model.block(final_block(c, 1)), &cache.lnf);
  return cache.f * model.block(final_block(c, 2));
}

template <typename T>
auto grad_block(AlignedVector<T>& grad, const BasicTransformer<T>& model, std::size_t index) {
  const auto& b = model.layout()[index];
  return typename BasicTransformer<T>::Map(grad.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                                           static_cast<Eigen::Index>(b.cols));
}

template <typename T>
void check_sequence(const TrainingSequence& s) {
  if (s.tokens.size() < 2) throw Error("training sequence shorter than 2 tokens");
  if (s.loss_begin < 1 || s.loss_begin >= s.tokens.size()) {
    throw Error("training sequence loss_begin out of range");
  }
}

std::size_t count_targets(std::span<const TrainingSequence> batch) {
  std::size_t total = 0;
  for (const auto& s : batch) total += s.tokens.size() - s.loss_begin;
  return total;
}

/// Cross-entropy summed over targets; fills dlogits with the gradient of
/// (sum / total) when non-null.
template <typename T>
T sequence_loss(const Mat<T>& logits, const TrainingSequence& s, T inv_total, Mat<T>* dlogits) {
  T loss = 0;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  for (std::size_t t = s.loss_begin - 1; t + 1 < s.tokens.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    const T mx = logits.row(r).maxCoeff();
    const auto shifted = (logits.row(r).array() - mx).exp();
    const T sum = shifted.sum();
    const int target = s.tokens[t + 1];
    loss += std::log(sum) - (logits(r, target) - mx);
    if (dlogits) {
      dlogits->row(r) = (shifted / sum).matrix() * inv_total;
      (*dlogits)(r, target) -= inv_total;
    }
  }
  return loss;
}

}  // namespace

template <typename T>
ForwardOutput<T> forward(const BasicTransformer<T>& model, std::span<const int> tokens,
                         std::span<const std::size_t> capture_layers,
                         const InterventionSpec* intervention) {
  const ModelConfig& c = model.config();
  for (std::size_t l : capture_layers) {
    if (l < 1 || l > c.n_layers) {
      throw Error("forward: capture layer " + std::to_string(l) + " outside [1, " +
                  std::to_string(c.n_layers) + "]");
    }
  }
  if (intervention) intervention->validate(c);
  Decoder<T> dec(model);
  ForwardOutput<T> out;
  const Mat<T> hidden = dec.feed(tokens, intervention, true, capture_layers, &out.captured);
  out.logits = dec.logits(hidden);
  return out;
}

template <typename T>
std::vector<RowMatrix<T>> attention_weights(const BasicTransformer<T>& model,
                                            std::span<const int> tokens, std::size_t layer_index) {
  const ModelConfig& c = model.config();
  check_tokens<T>(c, tokens);
  if (layer_index < 1 || layer_index > c.n_layers) throw Error("attention_weights: bad layer");
  Mat<T> x = embed(model, tokens);
  std::vector<Mat<T>> probs;
  for (std::size_t l = 0; l < layer_index; ++l) {
    x = run_block<T>(model, l, x, nullptr, l + 1 == layer_index ? &probs : nullptr);
  }
  return probs;
}

template <typename T>
T loss_and_gradient(const BasicTransformer<T>& model, std::span<const TrainingSequence> batch,
                    AlignedVector<T>& grad) {
  const ModelConfig& c = model.config();
  grad.assign(model.parameters().size(), T(0));
  const std::size_t total = count_targets(batch);
  if (total == 0) throw Error("loss_and_gradient: empty batch");
  const T inv_total = T(1) / static_cast<T>(total);
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto hd = static_cast<Eigen::Index>(c.d_model / c.n_heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  T loss_sum = 0;
  ForwardCache<T> cache;
  Mat<T> dlogits;
  for (const auto& seq : batch) {
    check_sequence<T>(seq);
    const Mat<T> logits = run_training_forward(model, seq.tokens, cache);
    loss_sum += sequence_loss(logits, seq, inv_total, &dlogits);
    const auto n = static_cast<Eigen::Index>(seq.tokens.size());

    grad_block(grad, model, final_block(c, 2)).noalias() += cache.f.transpose() * dlogits;
    Mat<T> df = dlogits * model.block(final_block(c, 2)).transpose();
    Mat<T> dx = layer_norm_backward<T>(df, cache.lnf, model.block(final_block(c, 0)),
                                       grad_block(grad, model, final_block(c, 0)),
                                       grad_block(grad, model, final_block(c, 1)));

    for (std::size_t l = c.n_layers; l-- > 0;) {
      const BlockCache<T>& bc = cache.blocks[l];
      // MLP branch.
      grad_block(grad, model, layer_block(l, kWout)).noalias() += bc.g.transpose() * dx;
      grad_block(grad, model, layer_block(l, kBout)) += dx.colwise().sum();
      Mat<T> dg = dx * model.block(layer_block(l, kWout)).transpose();
      Mat<T> dh = dg.array() * gelu_grad<T>(bc.hpre, bc.th).array();
      grad_block(grad, model, layer_block(l, kWin)).noalias() += bc.m.transpose() * dh;
      grad_block(grad, model, layer_block(l, kBin)) += dh.colwise().sum();
      Mat<T> dm = dh * model.block(layer_block(l, kWin)).transpose();
      Mat<T> dx_mid = dx + layer_norm_backward<T>(dm, bc.ln2, model.block(layer_block(l, kLn2Gamma)),
                                                  grad_block(grad, model, layer_block(l, kLn2Gamma)),
                                                  grad_block(grad, model, layer_block(l, kLn2Beta)));
      // Attention branch.
      grad_block(grad, model, layer_block(l, kWo)).noalias() += bc.att.transpose() * dx_mid;
      Mat<T> datt = dx_mid * model.block(layer_block(l, kWo)).transpose();
      Mat<T> dqkv(n, 3 * d);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const Mat<T>& p = bc.probs[h];
        const auto q = bc.qkv.block(0, off, n, hd);
        const auto k = bc.qkv.block(0, d + off, n, hd);
        const auto v = bc.qkv.block(0, 2 * d + off, n, hd);
        const auto d_o = datt.block(0, off, n, hd);
        Mat<T> dp = d_o * v.transpose();
        dqkv.block(0, 2 * d + off, n, hd).noalias() = p.transpose() * d_o;
        Mat<T> ds(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const T s = (p.row(i).array() * dp.row(i).array()).sum();
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - s);
        }
        dqkv.block(0, off, n, hd).noalias() = (ds * k) * scale;
        dqkv.block(0, d + off, n, hd).noalias() = (ds.transpose() * q) * scale;
      }
      grad_block(grad, model, layer_block(l, kWqkv)).noalias() += bc.a.transpose() * dqkv;
      Mat<T> da = dqkv * model.block(layer_block(l, kWqkv)).transpose();
      dx = dx_mid + layer_norm_backward<T>(da, bc.ln1, model.block(layer_block(l, kLn1Gamma)),
                                           grad_block(grad, model, layer_block(l, kLn1Gamma)),
                                           grad_block(grad, model, layer_block(l, kLn1Beta)));
    }
    auto dtok = grad_block(grad, model, 0);
    auto dpos = grad_block(grad, model, 1);
    for (Eigen::Index t = 0; t < n; ++t) {
      dtok.row(seq.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
      dpos.row(t) += dx.row(t);
    }
  }
  return loss_sum * inv_total;
}

template <typename T>
T loss_only(const BasicTransformer<T>& model, std::span<const TrainingSequence> batch) {
  const std::size_t total = count_targets(batch);
  if (total == 0) throw Error("loss_only: empty batch");
  const T inv_total = T(1) / static_cast<T>(total);
  T loss_sum = 0;
  ForwardCache<T> cache;
  for (const auto& seq : batch) {
    check_sequence<T>(seq);
    const Mat<T> logits = run_training_forward(model, seq.tokens, cache);
    loss_sum += sequence_loss<T>(logits, seq, inv_total, nullptr);
  }
  return loss_sum * inv_total;
}

std::vector<double> train(TransformerModel& model, std::span<const TrainingSequence> corpus,
                          const TrainHyper& hyper,
                          const std::function<void(std::size_t, double)>& progress) {
  if (corpus.empty()) throw Error("train: corpus is empty");
  if (hyper.batch_size == 0) throw Error("train: batch_size must be positive");
  SeededRng rng(hyper.seed);
  auto params = model.parameters();
  std::vector<float> m1(params.size(), 0.0f), m2(params.size(), 0.0f);
  AlignedVector<float> grad;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<TrainingSequence> batch;
  std::vector<double> history;
  history.reserve(hyper.steps);

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(hyper.batch_size, corpus.size())) {
      if (cursor == order.size()) {
        order = rng.permutation(corpus.size());
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    const double loss = loss_and_gradient<float>(model, batch, grad);
    if (!std::isfinite(loss)) throw Error("train: loss diverged at step " + std::to_string(step));
    history.push_back(loss);

    double norm2 = 0.0;
    for (float g : grad) norm2 += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm2);
    const double clip = (hyper.grad_clip > 0.0 && norm > hyper.grad_clip) ? hyper.grad_clip / norm : 1.0;

    double lr = hyper.lr;
    if (step < hyper.warmup_steps) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(hyper.warmup_steps);
    } else if (hyper.min_lr_ratio < 1.0 && hyper.steps > hyper.warmup_steps) {
      const double progress = static_cast<double>(step - hyper.warmup_steps) /
                              static_cast<double>(hyper.steps - hyper.warmup_steps);
      const double cosine = 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
      lr *= hyper.min_lr_ratio + (1.0 - hyper.min_lr_ratio) * cosine;
    }
    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i] * clip;
      const double a = hyper.beta1 * m1[i] + (1.0 - hyper.beta1) * g;
      const double b = hyper.beta2 * m2[i] + (1.0 - hyper.beta2) * g * g;
      m1[i] = static_cast<float>(a);
      m2[i] = static_cast<float>(b);
      params[i] -= static_cast<float>(lr * (a / bc1) / (std::sqrt(b / bc2) + hyper.eps));
    }
    if (!model.all_finite()) throw Error("train: parameters became non-finite at step " + std::to_string(step));
    if (progress) progress(step, loss);
  }
  return history;
}

std::vector<int> generate_greedy(const TransformerModel& model, std::span<const int> prompt,
                                 std::size_t max_new_tokens, int eos_token,
                                 const InterventionSpec* intervention) {
  const ModelConfig& c = model.config();
  if (prompt.empty()) throw Error("generate_greedy: empty prompt");
  if (prompt.size() + max_new_tokens > c.max_seq_len) {
    throw Error("generate_greedy: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                std::to_string(max_new_tokens) + " new tokens exceeds max_seq_len " +
                std::to_string(c.max_seq_len));
  }
  if (intervention) intervention->validate(c);
  std::vector<int> out;
  if (max_new_tokens == 0) return out;
  Decoder<float> dec(model);
  Mat<float> hidden = dec.feed(prompt, intervention, true, {}, nullptr);
  const bool every = intervention && intervention->scope == InterventionScope::every_token;
  for (std::size_t k = 0; k < max_new_tokens; ++k) {
    const Mat<float> last = hidden.row(hidden.rows() - 1);
    const Mat<float> row = dec.logits(last);
    int best = 0;
    for (Eigen::Index j = 1; j < row.cols(); ++j)
      if (row(0, j) > row(0, best)) best = static_cast<int>(j);
    if (best == eos_token) break;
    out.push_back(best);
    if (k + 1 == max_new_tokens) break;
    const int next[] = {best};
    hidden = dec.feed(next, intervention, every, {}, nullptr);
  }
  return out;
}

void save_checkpoint(const TransformerModel& model, const std::string& path) {
  const ModelConfig& c = model.config();
  io::ByteWriter w;
  w.magic("TOYM");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(c.n_layers));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.n_heads));
  w.u32(static_cast<std::uint32_t>(c.d_ff));
  w.u32(static_cast<std::uint32_t>(c.vocab_size));
  w.u32(static_cast<std::uint32_t>(c.max_seq_len));
  w.u64(c.seed);
  w.str(c.model_id);
  w.u64(model.parameters().size());
  for (float p : model.parameters()) w.f32(p);
  io::write_file_atomic(path, w.bytes());
}

TransformerModel load_checkpoint(const std::string& path) {
  io::ByteReader r(io::read_file(path), path);
  r.expect_magic("TOYM");
  const std::uint32_t version = r.u32();
  if (version != 1) throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_ff = r.u32();
  c.vocab_size = r.u32();
  c.max_seq_len = r.u32();
  c.seed = r.u64();
  c.model_id = r.str();
  const std::uint64_t count = r.u64();
  std::vector<float> params(count);
  for (auto& p : params) p = r.f32();
  if (!r.at_end()) throw Error(path + ": trailing bytes after parameters");
  return TransformerModel(std::move(c), std::move(params));
}

template ForwardOutput<float> forward(const BasicTransformer<float>&, std::span<const int>,
                                      std::span<const std::size_t>, const InterventionSpec*);
template ForwardOutput<double> forward(const BasicTransformer<double>&, std::span<const int>,
                                       std::span<const std::size_t>, const InterventionSpec*);
template std::vector<RowMatrix<float>> attention_weights(const BasicTransformer<float>&,
                                                         std::span<const int>, std::size_t);
template std::vector<RowMatrix<double>> attention_weights(const BasicTransformer<double>&,
                                                          std::span<const int>, std::size_t);
template float loss_and_gradient(const BasicTransformer<float>&, std::span<const TrainingSequence>,
                                 AlignedVector<float>&);
template double loss_and_gradient(const BasicTransformer<double>&,
                                  std::span<const TrainingSequence>, AlignedVector<double>&);
template float loss_only(const BasicTransformer<float>&, std::span<const TrainingSequence>);
template double loss_only(const BasicTransformer<double>&, std::span<const TrainingSequence>);

}  // namespace xsteer
