#include "xsteer/alignment.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "xsteer/io.hpp"

namespace xsteer {

using nlohmann::json;

void ActivationSet::validate() const {
  if (item_ids.size() != matrix.rows()) {
    throw Error("ActivationSet: " + std::to_string(item_ids.size()) + " item ids for " +
                std::to_string(matrix.rows()) + " rows");
  }
  if (!matrix.all_finite()) throw Error("ActivationSet: non-finite activations");
}

ActivationSet ActivationSet::select(std::span<const std::size_t> rows) const {
  ActivationSet out = *this;
  out.item_ids.clear();
  out.matrix = DenseMatrix(rows.size(), matrix.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= matrix.rows()) throw Error("ActivationSet::select: row out of range");
    out.item_ids.push_back(item_ids[r]);
    std::copy(matrix.row(r).begin(), matrix.row(r).end(), out.matrix.row(i).begin());
  }
  return out;
}

std::vector<ActivationSet> extract_activations(const TransformerModel& model,
                                               std::span<const QAItem> items,
                                               std::span<const std::size_t> layer_indices,
                                               const Tokenizer& tokenizer) {
  if (items.empty()) throw Error("extract_activations: no items");
  const ModelConfig& c = model.config();
  std::vector<ActivationSet> sets(layer_indices.size());
  for (std::size_t k = 0; k < layer_indices.size(); ++k) {
    const std::size_t layer = layer_indices[k];
    if (layer < 1 || layer > c.n_layers) {
      throw Error("extract_activations: layer " + std::to_string(layer) + " outside [1, " +
                  std::to_string(c.n_layers) + "]");
    }
    auto& s = sets[k];
    s.model_id = c.model_id;
    s.layer_index = layer;
    s.relative_depth = static_cast<double>(layer) / static_cast<double>(c.n_layers);
    s.domain = items.front().domain;
    s.matrix = DenseMatrix(items.size(), c.d_model);
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto tokens = tokenizer.encode(items[i].prompt);
    if (tokens.size() > c.max_seq_len) {
      throw Error("extract_activations: prompt of item " + items[i].id + " has " +
                  std::to_string(tokens.size()) + " tokens, context is " +
                  std::to_string(c.max_seq_len));
    }
    const auto out = forward(model, tokens, layer_indices);
    for (std::size_t k = 0; k < layer_indices.size(); ++k) {
      const auto& v = out.captured.at(layer_indices[k]);
      std::copy(v.begin(), v.end(), sets[k].matrix.row(i).begin());
      sets[k].item_ids.push_back(items[i].id);
    }
  }
  for (auto& s : sets) s.validate();
  return sets;
}

ActivationSet extract_activations(const TransformerModel& model, std::span<const QAItem> items,
                                  std::size_t layer_index, const Tokenizer& tokenizer) {
  const std::size_t layers[] = {layer_index};
  return std::move(extract_activations(model, items, layers, tokenizer).front());
}

ActivationSet normalize(const ActivationSet& set) {
  ActivationSet out = set;
  out.matrix = row_l2_normalize(set.matrix);
  out.normalized = true;
  return out;
}

std::string_view to_string(RegKind k) {
  switch (k) {
    case RegKind::ridge: return "ridge";
    case RegKind::lasso: return "lasso";
    case RegKind::permutation_ridge: return "permutation_ridge";
  }
  return "ridge";
}

RegKind reg_kind_from_string(std::string_view s) {
  if (s == "ridge") return RegKind::ridge;
  if (s == "lasso") return RegKind::lasso;
  if (s == "permutation_ridge") return RegKind::permutation_ridge;
  throw Error("unknown regularization kind: " + std::string(s));
}

DenseMatrix Mapper::predict(const DenseMatrix& inputs) const {
  if (inputs.cols() != input_dim()) {
    throw Error("Mapper::predict: input width " + std::to_string(inputs.cols()) +
                " != mapper input dimension " + std::to_string(input_dim()));
  }
  DenseMatrix out = matmul(inputs, weights.transpose());
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias[c];
  return out;
}

namespace {

void check_pair(const ActivationSet& t, const ActivationSet& s, const char* op) {
  t.validate();
  s.validate();
  if (t.item_ids != s.item_ids) {
    throw Error(std::string(op) + ": teacher and student item ids differ");
  }
  if (t.matrix.rows() < 2) throw Error(std::string(op) + ": need at least 2 paired items");
}

std::vector<double> column_means(const DenseMatrix& m) {
  std::vector<double> mean(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) mean[c] += m(r, c);
  for (double& v : mean) v /= static_cast<double>(m.rows());
  return mean;
}

DenseMatrix centered(const DenseMatrix& m, const std::vector<double>& mean) {
  DenseMatrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) -= mean[c];
  return out;
}

void set_provenance(Mapper& m, const ActivationSet& t, const ActivationSet& s) {
  m.source_model_id = t.model_id;
  m.source_layer = t.layer_index;
  m.source_depth = t.relative_depth;
  m.target_model_id = s.model_id;
  m.target_layer = s.layer_index;
  m.target_depth = s.relative_depth;
  m.train_domain = t.domain;
  m.train_item_count = t.matrix.rows();
}

// b = mean_s - W mean_t
std::vector<double> intercept(const DenseMatrix& w, const std::vector<double>& mean_t,
                              const std::vector<double>& mean_s) {
  std::vector<double> b = mean_s;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) b[r] -= w(r, c) * mean_t[c];
  return b;
}

}  // namespace

Mapper fit_ridge(const ActivationSet& teacher, const ActivationSet& student, double lambda) {
  check_pair(teacher, student, "fit_ridge");
  if (!(lambda > 0.0)) throw Error("fit_ridge: lambda must be positive");
  const auto mean_t = column_means(teacher.matrix);
  const auto mean_s = column_means(student.matrix);
  const DenseMatrix xt = centered(teacher.matrix, mean_t).transpose();
  DenseMatrix gram = matmul(xt, centered(teacher.matrix, mean_t));
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += lambda;
  const DenseMatrix rhs = matmul(xt, centered(student.matrix, mean_s));

  Mapper m;
  m.weights = cholesky_solve(gram, rhs).transpose();
  m.bias = intercept(m.weights, mean_t, mean_s);
  m.reg_kind = RegKind::ridge;
  m.lambda = lambda;
  set_provenance(m, teacher, student);
  return m;
}

double lasso_objective(const DenseMatrix& gram, std::span<const double> xty, double yty,
                       std::size_t n, double lambda, std::span<const double> w) {
  double quad = 0.0, lin = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    lin += w[i] * xty[i];
    l1 += std::abs(w[i]);
    double gw = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) gw += gram(i, j) * w[j];
    quad += w[i] * gw;
  }
  return (yty - 2.0 * lin + quad) / (2.0 * static_cast<double>(n)) + lambda * l1;
}

LassoColumnResult lasso_coordinate_descent(const DenseMatrix& gram, std::span<const double> xty,
                                           double yty, std::size_t n, double lambda,
                                           const LassoOptions& options) {
  const std::size_t d = xty.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  LassoColumnResult res;
  res.weights.assign(d, 0.0);
  std::vector<double> gw(d, 0.0);  // gram * w
  auto& w = res.weights;
  while (res.sweeps < options.max_iter) {
    double max_change = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double gjj = gram(j, j);
      if (gjj <= 0.0) continue;
      const double rho = (xty[j] - (gw[j] - gjj * w[j])) * inv_n;
      const double updated = soft_threshold(rho, lambda) / (gjj * inv_n);
      const double delta = updated - w[j];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < d; ++i) gw[i] += delta * gram(i, j);
        w[j] = updated;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    ++res.sweeps;
    if (options.record_objective) {
      res.objective.push_back(lasso_objective(gram, xty, yty, n, lambda, w));
    }
    if (max_change < options.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

Mapper fit_lasso(const ActivationSet& teacher, const ActivationSet& student, double lambda,
                 const LassoOptions& options) {
  check_pair(teacher, student, "fit_lasso");
  if (!(lambda > 0.0)) throw Error("fit_lasso: lambda must be positive");
  const std::size_t n = teacher.matrix.rows();
  const auto mean_t = column_means(teacher.matrix);
  const auto mean_s = column_means(student.matrix);
  const DenseMatrix xc = centered(teacher.matrix, mean_t);
  const DenseMatrix yc = centered(student.matrix, mean_s);
  const DenseMatrix xt = xc.transpose();
  const DenseMatrix gram = matmul(xt, xc);
  const DenseMatrix xty = matmul(xt, yc);  // d_T x d_S

  const std::size_t d_t = xc.cols();
  const std::size_t d_s = yc.cols();
  Mapper m;
  m.weights = DenseMatrix(d_s, d_t);
  m.converged = true;
  std::size_t zeros = 0;
  std::vector<double> col(d_t);
  for (std::size_t k = 0; k < d_s; ++k) {
    double yty = 0.0;
    for (std::size_t r = 0; r < n; ++r) yty += yc(r, k) * yc(r, k);
    for (std::size_t j = 0; j < d_t; ++j) col[j] = xty(j, k);
    const auto res = lasso_coordinate_descent(gram, col, yty, n, lambda, options);
    m.converged = m.converged && res.converged;
    m.iterations = std::max(m.iterations, res.sweeps);
    for (std::size_t j = 0; j < d_t; ++j) {
      m.weights(k, j) = res.weights[j];
      if (res.weights[j] == 0.0) ++zeros;
    }
  }
  m.bias = intercept(m.weights, mean_t, mean_s);
  m.reg_kind = RegKind::lasso;
  m.lambda = lambda;
  m.sparsity = static_cast<double>(zeros) / static_cast<double>(d_s * d_t);
  set_provenance(m, teacher, student);
  return m;
}

Mapper fit_permutation_control(const ActivationSet& teacher, const ActivationSet& student,
                               double lambda, std::uint64_t seed) {
  check_pair(teacher, student, "fit_permutation_control");
  SeededRng rng(seed);
  const auto perm = rng.permutation(student.matrix.rows());
  ActivationSet shuffled = student;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto src = student.matrix.row(perm[i]);
    std::copy(src.begin(), src.end(), shuffled.matrix.row(i).begin());
  }
  Mapper m = fit_ridge(teacher, shuffled, lambda);
  m.reg_kind = RegKind::permutation_ridge;
  return m;
}

R2Result r2_score(const DenseMatrix& predicted, const DenseMatrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw Error("r2_score: prediction and target shapes differ");
  }
  if (target.rows() < 2) throw Error("r2_score: need at least 2 rows");
  const auto mean = column_means(target);
  R2Result res;
  double sum = 0.0;
  for (std::size_t c = 0; c < target.cols(); ++c) {
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t r = 0; r < target.rows(); ++r) {
      const double e = target(r, c) - predicted(r, c);
      const double t = target(r, c) - mean[c];
      ss_res += e * e;
      ss_tot += t * t;
    }
    if (!(ss_tot > 0.0)) {
      ++res.excluded_dims;
      continue;
    }
    const double r2 = 1.0 - ss_res / ss_tot;
    res.per_dimension.push_back(r2);
    sum += r2;
  }
  if (res.per_dimension.empty()) throw Error("r2_score: every output dimension has zero variance");
  res.value = sum / static_cast<double>(res.per_dimension.size());
  return res;
}

R2Result r2_score(const Mapper& mapper, const ActivationSet& teacher_test,
                  const ActivationSet& student_test) {
  teacher_test.validate();
  student_test.validate();
  if (teacher_test.item_ids != student_test.item_ids) {
    throw Error("r2_score: teacher and student test item ids differ");
  }
  return r2_score(mapper.predict(teacher_test.matrix), student_test.matrix);
}

namespace {

json mapper_sidecar(const Mapper& m) {
  json j;
  j["reg_kind"] = to_string(m.reg_kind);
  j["lambda"] = m.lambda;
  j["source_model_id"] = m.source_model_id;
  j["source_layer"] = m.source_layer;
  j["source_depth"] = m.source_depth;
  j["target_model_id"] = m.target_model_id;
  j["target_layer"] = m.target_layer;
  j["target_depth"] = m.target_depth;
  j["train_domain"] = to_string(m.train_domain);
  j["train_item_count"] = m.train_item_count;
  j["sparsity"] = m.sparsity ? json(*m.sparsity) : json(nullptr);
  j["converged"] = m.converged;
  j["iterations"] = m.iterations;
  j["heldout_r2"] = m.heldout_r2 ? json(*m.heldout_r2) : json(nullptr);
  return j;
}

}  // namespace

void save_mapper(const Mapper& m, const std::string& path) {
  io::ByteWriter w;
  w.magic("MAPW");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(m.output_dim()));
  w.u32(static_cast<std::uint32_t>(m.input_dim()));
  w.u32(static_cast<std::uint32_t>(m.reg_kind));
  w.f64(m.lambda);
  for (double v : m.weights.data()) w.f64(v);
  for (double v : m.bias) w.f64(v);
  io::write_file_atomic(path, w.bytes());
  io::write_file_atomic(path + ".json", mapper_sidecar(m).dump(2) + "\n");
}

Mapper load_mapper(const std::string& path) {
  io::ByteReader r(io::read_file(path), path);
  r.expect_magic("MAPW");
  if (const auto v = r.u32(); v != 1) throw Error(path + ": unsupported mapper version " + std::to_string(v));
  const std::size_t d_s = r.u32();
  const std::size_t d_t = r.u32();
  const auto kind = r.u32();
  if (kind > 2) throw Error(path + ": bad reg_kind");
  Mapper m;
  m.reg_kind = static_cast<RegKind>(kind);
  m.lambda = r.f64();
  std::vector<double> w(d_s * d_t);
  for (double& v : w) v = r.f64();
  m.weights = DenseMatrix(d_s, d_t, std::move(w));
  m.bias.resize(d_s);
  for (double& v : m.bias) v = r.f64();
  if (!r.at_end()) throw Error(path + ": trailing bytes");

  const std::string sidecar = path + ".json";
  const json j = json::parse(io::read_file(sidecar));
  m.source_model_id = j.at("source_model_id");
  m.source_layer = j.at("source_layer");
  m.source_depth = j.at("source_depth");
  m.target_model_id = j.at("target_model_id");
  m.target_layer = j.at("target_layer");
  m.target_depth = j.at("target_depth");
  m.train_domain = domain_from_string(j.at("train_domain").get<std::string>());
  m.train_item_count = j.at("train_item_count");
  if (!j.at("sparsity").is_null()) m.sparsity = j["sparsity"].get<double>();
  m.converged = j.at("converged");
  m.iterations = j.at("iterations");
  if (!j.at("heldout_r2").is_null()) m.heldout_r2 = j["heldout_r2"].get<double>();
  return m;
}

void save_activations(const ActivationSet& set, const std::string& path, std::uint64_t seed) {
  set.validate();
  if (set.normalized) throw Error("save_activations: caches hold raw activations only");
  io::ByteWriter w;
  w.magic("ACTB");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(set.matrix.rows()));
  w.u32(static_cast<std::uint32_t>(set.matrix.cols()));
  for (double v : set.matrix.data()) {
    const auto f = static_cast<float>(v);
    if (static_cast<double>(f) != v) {
      throw Error("save_activations: value not representable in 32 bits");
    }
    w.f32(f);
  }
  json j;
  j["model_id"] = set.model_id;
  j["layer_index"] = set.layer_index;
  j["relative_depth"] = set.relative_depth;
  j["domain"] = to_string(set.domain);
  j["item_ids"] = set.item_ids;
  j["seed"] = seed;
  io::write_file_atomic(path, w.bytes());
  io::write_file_atomic(path + ".json", j.dump(2) + "\n");
}

ActivationSet load_activations(const std::string& path) {
  io::ByteReader r(io::read_file(path), path);
  r.expect_magic("ACTB");
  if (const auto v = r.u32(); v != 1) throw Error(path + ": unsupported cache version " + std::to_string(v));
  const std::size_t rows = r.u32();
  const std::size_t cols = r.u32();
  std::vector<double> data(rows * cols);
  for (double& v : data) v = r.f32();
  if (!r.at_end()) throw Error(path + ": trailing bytes");
  const json j = json::parse(io::read_file(path + ".json"));
  ActivationSet s;
  s.model_id = j.at("model_id");
  s.layer_index = j.at("layer_index");
  s.relative_depth = j.at("relative_depth");
  s.domain = domain_from_string(j.at("domain").get<std::string>());
  s.item_ids = j.at("item_ids").get<std::vector<std::string>>();
  s.matrix = DenseMatrix(rows, cols, std::move(data));
  s.validate();
  return s;
}

}  // namespace xsteer
