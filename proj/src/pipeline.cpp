#include "xsteer/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "xsteer/alignment.hpp"
#include "xsteer/dissociation.hpp"
#include "xsteer/evaluation.hpp"
#include "xsteer/io.hpp"

namespace xsteer::pipeline {

using nlohmann::json;

DerivedSeeds DerivedSeeds::from(std::uint64_t s) {
  DerivedSeeds d;
  d.verbal_corpus = s;
  d.math_corpus = s + 1;
  d.teacher_init = s + 2;
  d.student_init = s + 3;
  d.teacher_train = s + 4;
  d.student_train = s + 5;
  d.split = s;
  d.permutation = s;
  d.dissociation = s;
  return d;
}

namespace {

void check_model_id(const std::string& id) {
  if (id.empty()) throw Error("config: model_id must not be empty");
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '_';
    if (!ok) throw Error("config: model_id '" + id + "' may only use letters, digits, '-' and '_'");
  }
}

void check_grid(const std::vector<double>& grid, const char* name, bool depth) {
  if (grid.empty()) throw Error(std::string("config: ") + name + " grid is empty");
  std::set<double> seen;
  for (double v : grid) {
    const bool ok = depth ? (v > 0.0 && v <= 1.0) : (v >= 0.0 && std::isfinite(v));
    if (!ok) throw Error(std::string("config: bad ") + name + " value " + format_number(v));
    if (!seen.insert(v).second) throw Error(std::string("config: duplicate ") + name + " value " + format_number(v));
  }
}

}  // namespace

void RunConfig::resolve() {
  const DerivedSeeds s = seeds();
  teacher.seed = s.teacher_init;
  student.seed = s.student_init;
  teacher_train.seed = s.teacher_train;
  student_train.seed = s.student_train;
  teacher.validate();
  student.validate();
  check_model_id(teacher.model_id);
  check_model_id(student.model_id);
  if (teacher.model_id == student.model_id) throw Error("config: teacher and student need distinct model ids");
  const std::size_t vocab = Tokenizer().vocab_size();
  if (teacher.vocab_size != vocab || student.vocab_size != vocab) {
    throw Error("config: vocab_size must be " + std::to_string(vocab) + " for the shared tokenizer");
  }
  if (verbal_items == 0 || math_items == 0) throw Error("config: corpus sizes must be positive");
  check_grid(depth_grid, "depth", true);
  check_grid(alpha_grid, "alpha", false);
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("config: train_fraction must lie in (0, 1)");
  if (!(ridge_lambda > 0.0) || !(lasso_lambda > 0.0) || !(dissociation_lambda > 0.0)) {
    throw Error("config: regularization strengths must be positive");
  }
  for (const TrainHyper* h : {&teacher_train, &student_train}) {
    if (h->steps == 0 || h->batch_size == 0 || !(h->lr > 0.0)) {
      throw Error("config: training needs positive steps, batch_size and lr");
    }
  }
  if (out_dir.empty()) throw Error("config: out_dir must not be empty");
}

RunConfig default_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.out_dir = "runs/seed" + std::to_string(seed);

  c.teacher.model_id = "teacher";
  c.teacher.n_layers = 8;
  c.teacher.d_model = 128;
  c.teacher.n_heads = 4;
  c.teacher.d_ff = 256;
  c.teacher.vocab_size = Tokenizer().vocab_size();
  c.teacher.max_seq_len = 64;

  c.student.model_id = "student";
  c.student.n_layers = 4;
  c.student.d_model = 64;
  c.student.n_heads = 2;
  c.student.d_ff = 128;
  c.student.vocab_size = Tokenizer().vocab_size();
  c.student.max_seq_len = 64;

  for (TrainHyper* h : {&c.teacher_train, &c.student_train}) {
    h->lr = 1e-3;
    h->batch_size = 32;
    h->warmup_steps = 50;
    h->min_lr_ratio = 0.1;
  }
  c.teacher_train.steps = 1500;
  c.student_train.steps = 300;
  c.student_train.lr = 4e-3;
  c.resolve();
  return c;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json model_json(const ModelConfig& m) {
  return {{"model_id", m.model_id}, {"n_layers", m.n_layers}, {"d_model", m.d_model},
          {"n_heads", m.n_heads},   {"d_ff", m.d_ff},         {"vocab_size", m.vocab_size},
          {"max_seq_len", m.max_seq_len}};
}

json train_json(const TrainHyper& h) {
  return {{"lr", h.lr},       {"batch_size", h.batch_size},     {"steps", h.steps},
          {"beta1", h.beta1}, {"beta2", h.beta2},               {"eps", h.eps},
          {"grad_clip", h.grad_clip}, {"warmup_steps", h.warmup_steps}, {"min_lr_ratio", h.min_lr_ratio}};
}

std::string_view scope_name(InterventionScope s) {
  return s == InterventionScope::prompt_token ? "prompt_token" : "every_token";
}

InterventionScope scope_from(const std::string& s) {
  if (s == "prompt_token") return InterventionScope::prompt_token;
  if (s == "every_token") return InterventionScope::every_token;
  throw Error("config: unknown intervention scope '" + s + "'");
}

// Reads known keys of one JSON object; anything else is rejected.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error("config: '" + name_ + "' must be an object");
  }
  template <typename T>
  Section& get(const char* key, T& out) {
    known_.insert(key);
    if (const auto it = j_.find(key); it != j_.end()) {
      try {
        it->get_to(out);
      } catch (const json::exception& e) {
        throw Error("config: bad value for '" + name_ + "." + key + "': " + e.what());
      }
    }
    return *this;
  }
  const json* child(const char* key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!known_.count(k)) throw Error("config: unknown key '" + (name_.empty() ? k : name_ + "." + k) + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> known_;
};

void read_model(const json& j, const char* name, ModelConfig& m) {
  Section s(j, name);
  s.get("model_id", m.model_id)
      .get("n_layers", m.n_layers)
      .get("d_model", m.d_model)
      .get("n_heads", m.n_heads)
      .get("d_ff", m.d_ff)
      .get("vocab_size", m.vocab_size)
      .get("max_seq_len", m.max_seq_len);
  s.finish();
}

void read_train(const json& j, const char* name, TrainHyper& h) {
  Section s(j, name);
  s.get("lr", h.lr)
      .get("batch_size", h.batch_size)
      .get("steps", h.steps)
      .get("beta1", h.beta1)
      .get("beta2", h.beta2)
      .get("eps", h.eps)
      .get("grad_clip", h.grad_clip)
      .get("warmup_steps", h.warmup_steps)
      .get("min_lr_ratio", h.min_lr_ratio);
  s.finish();
}

}  // namespace

json to_json(const RunConfig& c) {
  const DerivedSeeds s = c.seeds();
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["teacher"] = model_json(c.teacher);
  j["student"] = model_json(c.student);
  j["teacher_train"] = train_json(c.teacher_train);
  j["student_train"] = train_json(c.student_train);
  j["corpus"] = {{"verbal_items", c.verbal_items}, {"math_items", c.math_items}};
  j["generation"] = {{"max_new_tokens", c.max_new_tokens}, {"scope", scope_name(c.scope)}};
  j["grids"] = {{"depth", c.depth_grid}, {"alpha", c.alpha_grid}};
  j["alignment"] = {{"train_fraction", c.train_fraction},
                    {"ridge_lambda", c.ridge_lambda},
                    {"lasso_lambda", c.lasso_lambda},
                    {"lasso_max_iter", c.lasso_max_iter},
                    {"lasso_tol", c.lasso_tol}};
  j["dissociation"] = {{"lambda", c.dissociation_lambda},
                       {"train_items", c.dissociation_train},
                       {"test_items", c.dissociation_test},
                       {"l_t", c.dissociation_l_t},
                       {"l_s", c.dissociation_l_s}};
  j["derived_seeds"] = {{"verbal_corpus", s.verbal_corpus}, {"math_corpus", s.math_corpus},
                        {"teacher_init", s.teacher_init},   {"student_init", s.student_init},
                        {"teacher_train", s.teacher_train}, {"student_train", s.student_train},
                        {"split", s.split},                 {"permutation", s.permutation},
                        {"dissociation", s.dissociation}};
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c = default_config(42);
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("out_dir", c.out_dir);
  if (!j.contains("out_dir")) c.out_dir = "runs/seed" + std::to_string(c.seed);
  if (const json* m = top.child("teacher")) read_model(*m, "teacher", c.teacher);
  if (const json* m = top.child("student")) read_model(*m, "student", c.student);
  if (const json* t = top.child("teacher_train")) read_train(*t, "teacher_train", c.teacher_train);
  if (const json* t = top.child("student_train")) read_train(*t, "student_train", c.student_train);
  if (const json* x = top.child("corpus")) {
    Section s(*x, "corpus");
    s.get("verbal_items", c.verbal_items).get("math_items", c.math_items);
    s.finish();
  }
  if (const json* x = top.child("generation")) {
    Section s(*x, "generation");
    std::string scope(scope_name(c.scope));
    s.get("max_new_tokens", c.max_new_tokens).get("scope", scope);
    s.finish();
    c.scope = scope_from(scope);
  }
  if (const json* x = top.child("grids")) {
    Section s(*x, "grids");
    s.get("depth", c.depth_grid).get("alpha", c.alpha_grid);
    s.finish();
  }
  if (const json* x = top.child("alignment")) {
    Section s(*x, "alignment");
    s.get("train_fraction", c.train_fraction)
        .get("ridge_lambda", c.ridge_lambda)
        .get("lasso_lambda", c.lasso_lambda)
        .get("lasso_max_iter", c.lasso_max_iter)
        .get("lasso_tol", c.lasso_tol);
    s.finish();
  }
  if (const json* x = top.child("dissociation")) {
    Section s(*x, "dissociation");
    s.get("lambda", c.dissociation_lambda)
        .get("train_items", c.dissociation_train)
        .get("test_items", c.dissociation_test)
        .get("l_t", c.dissociation_l_t)
        .get("l_s", c.dissociation_l_s);
    s.finish();
  }
  top.child("derived_seeds");
  top.finish();
  c.resolve();
  return c;
}

RunConfig load_config(const std::string& path) {
  io::require_file(path);
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(path + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Layout

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string role_file(std::string_view role) { return std::string(role); }

std::string layer_tag(std::size_t layer) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "L%02zu", layer);
  return buf;
}

}  // namespace

std::string Layout::run_config() const { return (root_ / "run_config.json").string(); }
std::string Layout::corpus(Domain d) const {
  return (root_ / "corpus" / (std::string(to_string(d)) + ".jsonl")).string();
}
std::string Layout::model(std::string_view role) const {
  return (root_ / "models" / (role_file(role) + ".toym")).string();
}
std::string Layout::loss_curve() const { return (root_ / "training" / "loss_curve.csv").string(); }
std::string Layout::activations(std::string_view role, Domain d, std::size_t layer) const {
  return (root_ / "activations" /
          (role_file(role) + "_" + std::string(to_string(d)) + "_" + layer_tag(layer) + ".actb"))
      .string();
}
std::string Layout::mapper(Domain d, double l_t, double l_s, RegKind kind) const {
  return (root_ / "mappers" /
          (std::string(to_string(d)) + "_lt" + format_number(l_t) + "_ls" + format_number(l_s) + "_" +
           std::string(to_string(kind)) + ".mapw"))
      .string();
}
std::string Layout::controls() const { return (root_ / "controls.csv").string(); }
std::string Layout::baseline(Domain d) const {
  return (root_ / "scores" / ("baseline_" + std::string(to_string(d)) + ".jsonl")).string();
}
std::string Layout::accuracy() const { return (root_ / "accuracy.csv").string(); }
std::string Layout::sweep(Domain d) const {
  return (root_ / ("sweep_" + std::string(to_string(d)) + ".csv")).string();
}
std::string Layout::peak() const { return (root_ / "peak.csv").string(); }
std::string Layout::alpha_profile(Domain d) const {
  return (root_ / ("alpha_profile_" + std::string(to_string(d)) + ".csv")).string();
}
std::string Layout::correlation() const { return (root_ / "correlation.csv").string(); }
std::string Layout::dissociation() const { return (root_ / "dissociation.csv").string(); }
std::string Layout::dissociation_layers() const { return (root_ / "dissociation_layers.csv").string(); }
std::string Layout::report() const { return (root_ / "report.md").string(); }

// ---------------------------------------------------------------------------
// Helpers

std::vector<TrainingSequence> training_corpus(std::span<const QAItem> verbal, std::span<const QAItem> math,
                                              const Tokenizer& tokenizer) {
  std::vector<TrainingSequence> out;
  out.reserve(verbal.size() + math.size());
  for (auto items : {verbal, math}) {
    for (const auto& it : items) {
      TrainingSequence s;
      s.tokens = tokenizer.encode(training_text(it));
      s.tokens.push_back(Tokenizer::kEos);
      // Targets start at the first answer character.
      s.loss_begin = it.prompt.size();
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<std::size_t> grid_layers(std::span<const double> depths, std::size_t n_layers) {
  std::vector<std::size_t> out;
  for (double l : depths) out.push_back(relative_depth_to_layer(l, n_layers));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

constexpr Domain kDomains[] = {Domain::verbal, Domain::math};

void log(std::string_view stage, const std::string& msg) {
  std::fprintf(stderr, "[%.*s] %s\n", static_cast<int>(stage.size()), stage.data(), msg.c_str());
  std::fflush(stderr);
}

class Csv {
 public:
  explicit Csv(std::initializer_list<std::string_view> header) {
    bool first = true;
    for (auto h : header) {
      if (!first) out_ += ',';
      out_ += h;
      first = false;
    }
    out_ += '\n';
  }
  Csv& cell(std::string_view v) {
    if (!line_start_) out_ += ',';
    out_ += v;
    line_start_ = false;
    return *this;
  }
  Csv& cell(double v) { return cell(format_number(v)); }
  Csv& cell(std::size_t v) { return cell(std::to_string(v)); }
  Csv& cell(bool v) { return cell(std::string_view(v ? "true" : "false")); }
  Csv& cell(const char* v) { return cell(std::string_view(v)); }
  Csv& cell(const std::optional<double>& v) { return v ? cell(*v) : cell(std::string_view()); }
  void end() {
    out_ += '\n';
    line_start_ = true;
  }
  void write(const std::string& path) const { io::write_file_atomic(path, out_); }

 private:
  std::string out_;
  bool line_start_ = true;
};

void write_run_config(const RunConfig& c) {
  Layout lay(c.out_dir);
  io::write_file_atomic(lay.run_config(), to_json(c).dump(2) + "\n");
}

std::vector<QAItem> load_corpus(const Layout& lay, Domain d) {
  const std::string path = lay.corpus(d);
  io::require_file(path);
  return read_corpus_jsonl(path);
}

TransformerModel load_model(const Layout& lay, std::string_view role, const ModelConfig& expected) {
  const std::string path = lay.model(role);
  io::require_file(path);
  TransformerModel m = load_checkpoint(path);
  if (!(m.config() == expected)) {
    throw Error(path + ": checkpoint config does not match the run config for " + std::string(role));
  }
  return m;
}

ActivationSet load_acts(const Layout& lay, std::string_view role, Domain d, std::size_t layer) {
  const std::string path = lay.activations(role, d, layer);
  io::require_file(path);
  io::require_file(path + ".json");
  return load_activations(path);
}

Mapper load_map(const Layout& lay, Domain d, double l_t, double l_s, RegKind kind) {
  const std::string path = lay.mapper(d, l_t, l_s, kind);
  io::require_file(path);
  io::require_file(path + ".json");
  return load_mapper(path);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void check_context(const RunConfig& c, std::span<const QAItem> items) {
  const Tokenizer tok;
  for (const auto& it : items) {
    const std::size_t prompt = tok.encode(it.prompt).size();
    const std::size_t train_len = tok.encode(training_text(it)).size() + 1;
    for (const ModelConfig* m : {&c.teacher, &c.student}) {
      if (prompt + c.max_new_tokens > m->max_seq_len || train_len > m->max_seq_len) {
        throw Error("config: item " + it.id + " does not fit max_seq_len " + std::to_string(m->max_seq_len) +
                    " of " + m->model_id + " with " + std::to_string(c.max_new_tokens) + " new tokens");
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

void cmd_corpus_gen(const RunConfig& c) {
  const Layout lay(c.out_dir);
  write_run_config(c);
  const DerivedSeeds s = c.seeds();
  const auto verbal = gen_verbal_task(s.verbal_corpus, c.verbal_items);
  const auto math = gen_math_task(s.math_corpus, c.math_items);
  check_context(c, verbal);
  check_context(c, math);
  write_corpus_jsonl(lay.corpus(Domain::verbal), verbal);
  write_corpus_jsonl(lay.corpus(Domain::math), math);
  log("corpus-gen", std::to_string(verbal.size()) + " verbal and " + std::to_string(math.size()) +
                        " math items written to " + (lay.root() / "corpus").string());
}

void cmd_train_pair(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const auto verbal = load_corpus(lay, Domain::verbal);
  const auto math = load_corpus(lay, Domain::math);
  write_run_config(c);
  check_context(c, verbal);
  check_context(c, math);
  const auto corpus = training_corpus(verbal, math);

  Csv curve({"model_id", "step", "loss"});
  auto run = [&](const ModelConfig& mc, const TrainHyper& h, std::string_view role) {
    TransformerModel model(mc);
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t every = std::max<std::size_t>(1, h.steps / 10);
    const auto history = train(model, corpus, h, [&](std::size_t step, double loss) {
      if ((step + 1) % every == 0 || step + 1 == h.steps) {
        log("train-pair", mc.model_id + " step " + std::to_string(step + 1) + "/" + std::to_string(h.steps) +
                              " loss " + fixed(loss, 4) + " (" + fixed(seconds_since(t0), 1) + " s)");
      }
    });
    for (std::size_t i = 0; i < history.size(); ++i) curve.cell(mc.model_id).cell(i + 1).cell(history[i]).end();
    save_checkpoint(model, lay.model(role));
  };
  run(c.teacher, c.teacher_train, "teacher");
  run(c.student, c.student_train, "student");
  curve.write(lay.loss_curve());
}

void cmd_extract(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const auto teacher = load_model(lay, "teacher", c.teacher);
  const auto student = load_model(lay, "student", c.student);
  write_run_config(c);
  for (Domain d : kDomains) {
    const auto items = load_corpus(lay, d);
    for (const auto& [role, model] : {std::pair<std::string_view, const TransformerModel*>{"teacher", &teacher},
                                      {"student", &student}}) {
      const auto layers = grid_layers(c.depth_grid, model->config().n_layers);
      const auto sets = extract_activations(*model, items, layers);
      for (const auto& s : sets) save_activations(s, lay.activations(role, d, s.layer_index), c.seed);
      log("extract", std::string(role) + " " + std::string(to_string(d)) + ": " + std::to_string(layers.size()) +
                         " layers x " + std::to_string(items.size()) + " items");
    }
  }
}

void cmd_fit_mappers(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const DerivedSeeds seeds = c.seeds();
  // Fail before any fitting when an upstream cache is missing.
  for (Domain d : kDomains) {
    for (std::size_t l : grid_layers(c.depth_grid, c.teacher.n_layers)) {
      io::require_file(lay.activations("teacher", d, l));
      io::require_file(lay.activations("teacher", d, l) + ".json");
    }
    for (std::size_t l : grid_layers(c.depth_grid, c.student.n_layers)) {
      io::require_file(lay.activations("student", d, l));
      io::require_file(lay.activations("student", d, l) + ".json");
    }
  }
  write_run_config(c);

  LassoOptions lasso_opts;
  lasso_opts.max_iter = c.lasso_max_iter;
  lasso_opts.tol = c.lasso_tol;

  Csv controls({"domain", "teacher_id", "student_id", "l_t", "l_s", "teacher_layer", "student_layer", "condition",
                "lambda", "train_items", "test_items", "r2", "excluded_dims", "sparsity", "converged"});
  for (Domain d : kDomains) {
    std::map<std::size_t, ActivationSet> t_norm, s_norm;
    for (std::size_t l : grid_layers(c.depth_grid, c.teacher.n_layers)) {
      t_norm.emplace(l, normalize(load_acts(lay, "teacher", d, l)));
    }
    for (std::size_t l : grid_layers(c.depth_grid, c.student.n_layers)) {
      s_norm.emplace(l, normalize(load_acts(lay, "student", d, l)));
    }
    const std::size_t n = t_norm.begin()->second.matrix.rows();
    const auto [train_rows, test_rows] = split_indices(n, c.train_fraction, seeds.split);

    const auto t0 = std::chrono::steady_clock::now();
    for (double l_t : c.depth_grid) {
      for (double l_s : c.depth_grid) {
        const std::size_t lt = relative_depth_to_layer(l_t, c.teacher.n_layers);
        const std::size_t ls = relative_depth_to_layer(l_s, c.student.n_layers);
        const ActivationSet& t_all = t_norm.at(lt);
        const ActivationSet& s_all = s_norm.at(ls);
        if (t_all.item_ids != s_all.item_ids) {
          throw Error("fit-mappers: teacher and student caches list different items for " +
                      std::string(to_string(d)));
        }
        const ActivationSet t_tr = t_all.select(train_rows), s_tr = s_all.select(train_rows);
        const ActivationSet t_te = t_all.select(test_rows), s_te = s_all.select(test_rows);

        Mapper fits[3] = {fit_ridge(t_tr, s_tr, c.ridge_lambda), fit_lasso(t_tr, s_tr, c.lasso_lambda, lasso_opts),
                          fit_permutation_control(t_tr, s_tr, c.ridge_lambda, seeds.permutation)};
        for (Mapper& m : fits) {
          m.source_depth = l_t;
          m.target_depth = l_s;
          const R2Result r2 = r2_score(m, t_te, s_te);
          m.heldout_r2 = r2.value;
          save_mapper(m, lay.mapper(d, l_t, l_s, m.reg_kind));
          controls.cell(to_string(d))
              .cell(c.teacher.model_id)
              .cell(c.student.model_id)
              .cell(l_t)
              .cell(l_s)
              .cell(lt)
              .cell(ls)
              .cell(to_string(m.reg_kind))
              .cell(m.lambda)
              .cell(train_rows.size())
              .cell(test_rows.size())
              .cell(r2.value)
              .cell(r2.excluded_dims)
              .cell(m.sparsity)
              .cell(m.converged)
              .end();
        }
      }
    }
    log("fit-mappers", std::string(to_string(d)) + ": " + std::to_string(3 * c.depth_grid.size() * c.depth_grid.size()) +
                           " mappers in " + fixed(seconds_since(t0), 1) + " s");
  }
  controls.write(lay.controls());
}

void cmd_sweep(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const auto teacher = load_model(lay, "teacher", c.teacher);
  const auto student = load_model(lay, "student", c.student);
  std::map<Domain, std::vector<QAItem>> corpora;
  std::map<Domain, MapperGrid> mappers;
  for (Domain d : kDomains) {
    corpora[d] = load_corpus(lay, d);
    for (double l_t : c.depth_grid)
      for (double l_s : c.depth_grid) mappers[d].emplace(DepthPair{l_t, l_s}, load_map(lay, d, l_t, l_s, RegKind::ridge));
  }
  write_run_config(c);

  GenerationOptions gen;
  gen.max_new_tokens = c.max_new_tokens;
  gen.scope = c.scope;
  SweepGrid grid;
  grid.depths = c.depth_grid;
  grid.alphas = c.alpha_grid;

  Csv accuracy({"domain", "model_id", "correct", "total", "accuracy"});
  Csv peak({"domain", "teacher_id", "student_id", "l_t", "l_s", "alpha", "opportunities", "corrected", "delta_pct",
            "r2_ridge"});
  Csv corr({"scope", "cells", "pearson_r"});
  std::vector<double> all_r2, all_delta;

  for (Domain d : kDomains) {
    const auto& items = corpora[d];
    const auto t0 = std::chrono::steady_clock::now();
    BaselineScores base;
    std::string dump;
    for (const auto& [name, model, scores] :
         {std::tuple<std::string, const TransformerModel*, std::map<std::string, bool>*>{c.teacher.model_id, &teacher,
                                                                                          &base.teacher},
          {c.student.model_id, &student, &base.student}}) {
      const auto texts = generate_texts(*model, items, gen);
      std::vector<ScoreReport> reports;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < items.size(); ++i) {
        reports.push_back(score_item(texts[i].text, items[i]));
        (*scores)[items[i].id] = reports.back().correct;
        correct += reports.back().correct;
      }
      dump += score_dump_jsonl(reports, name);
      accuracy.cell(to_string(d))
          .cell(name)
          .cell(correct)
          .cell(items.size())
          .cell(static_cast<double>(correct) / static_cast<double>(items.size()))
          .end();
      log("sweep", std::string(to_string(d)) + " baseline " + name + ": " + std::to_string(correct) + "/" +
                       std::to_string(items.size()));
    }
    io::write_file_atomic(lay.baseline(d), dump);

    const auto records = sweep(teacher, student, mappers[d], items, grid, gen, &base);
    Csv out({"teacher_id", "student_id", "l_t", "l_s", "alpha", "opportunities", "corrected", "delta_pct",
             "r2_ridge"});
    std::vector<double> r2s, deltas;
    for (const auto& r : records) {
      out.cell(c.teacher.model_id)
          .cell(c.student.model_id)
          .cell(r.config.l_t)
          .cell(r.config.l_s)
          .cell(r.config.alpha)
          .cell(r.opportunity_count)
          .cell(r.corrected_count)
          .cell(r.delta)
          .cell(r.r2_ridge)
          .end();
      if (r.delta) {
        r2s.push_back(r.r2_ridge);
        deltas.push_back(*r.delta);
      }
    }
    out.write(lay.sweep(d));

    peak.cell(to_string(d)).cell(c.teacher.model_id).cell(c.student.model_id);
    if (const auto p = peak_record(records)) {
      peak.cell(p->config.l_t)
          .cell(p->config.l_s)
          .cell(p->config.alpha)
          .cell(p->opportunity_count)
          .cell(p->corrected_count)
          .cell(p->delta)
          .cell(p->r2_ridge);
    } else {
      peak.cell("").cell("").cell("").cell(records.empty() ? 0 : records.front().opportunity_count).cell("").cell("").cell("");
    }
    peak.end();

    Csv profile({"alpha", "mean_delta_pct", "cells"});
    for (const auto& [alpha, mean] : alpha_profile(records)) {
      std::size_t cells = 0;
      for (const auto& r : records) cells += (r.config.alpha == alpha && r.delta) ? 1 : 0;
      profile.cell(alpha).cell(mean).cell(cells).end();
    }
    profile.write(lay.alpha_profile(d));

    auto add_corr = [&](std::string_view scope, const std::vector<double>& x, const std::vector<double>& y) {
      corr.cell(scope).cell(x.size());
      try {
        corr.cell(pearson_r(x, y));
      } catch (const Error&) {
        corr.cell("");  // undefined: fewer than two cells or zero variance
      }
      corr.end();
    };
    add_corr(to_string(d), r2s, deltas);
    all_r2.insert(all_r2.end(), r2s.begin(), r2s.end());
    all_delta.insert(all_delta.end(), deltas.begin(), deltas.end());

    const std::size_t opp = records.empty() ? 0 : records.front().opportunity_count;
    log("sweep", std::string(to_string(d)) + ": " + std::to_string(records.size()) + " cells over " +
                     std::to_string(opp) + " opportunity items in " + fixed(seconds_since(t0), 1) + " s");
  }
  std::vector<double> x = all_r2, y = all_delta;
  corr.cell("all").cell(x.size());
  try {
    corr.cell(pearson_r(x, y));
  } catch (const Error&) {
    corr.cell("");
  }
  corr.end();

  accuracy.write(lay.accuracy());
  peak.write(lay.peak());
  corr.write(lay.correlation());
}

void cmd_dissociate(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const auto teacher = load_model(lay, "teacher", c.teacher);
  const auto student = load_model(lay, "student", c.student);
  const auto verbal = load_corpus(lay, Domain::verbal);
  const auto math = load_corpus(lay, Domain::math);
  write_run_config(c);

  DissociationProtocol proto;
  proto.train_items = c.dissociation_train;
  proto.test_items = c.dissociation_test;
  proto.seed = c.seeds().dissociation;
  proto.lambda = c.dissociation_lambda;

  std::vector<double> depths = c.depth_grid;
  depths.push_back(c.dissociation_l_t);
  depths.push_back(c.dissociation_l_s);
  const auto t0 = std::chrono::steady_clock::now();
  const DissociationData data(teacher, student, verbal, math, depths, proto);

  auto row = [](Csv& csv, const DissociationResult& r) {
    csv.cell(r.in_domain_a_r2).cell(r.transfer_a_to_b_r2).cell(r.in_domain_b_r2).cell(r.transfer_b_to_a_r2).cell(r.confirmed);
    csv.end();
  };
  Csv main({"teacher", "student", "tqa_in", "tqa_to_gsm", "gsm_in", "gsm_to_tqa", "confirmed"});
  const auto headline = data.cell(c.dissociation_l_t, c.dissociation_l_s, proto.lambda);
  main.cell(headline.teacher_id).cell(headline.student_id);
  row(main, headline);
  main.write(lay.dissociation());

  Csv layers({"teacher", "student", "l_t", "l_s", "tqa_in", "tqa_to_gsm", "gsm_in", "gsm_to_tqa", "confirmed"});
  std::size_t confirmed = 0;
  for (double l_t : c.depth_grid) {
    for (double l_s : c.depth_grid) {
      const auto r = data.cell(l_t, l_s, proto.lambda);
      confirmed += r.confirmed;
      layers.cell(r.teacher_id).cell(r.student_id).cell(l_t).cell(l_s);
      row(layers, r);
    }
  }
  layers.write(lay.dissociation_layers());
  log("dissociate", "confirmed in " + std::to_string(confirmed) + "/" +
                        std::to_string(c.depth_grid.size() * c.depth_grid.size()) + " cells (" +
                        fixed(seconds_since(t0), 1) + " s)");
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  io::require_file(path);
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw Error(path + ": empty CSV");
  return rows;
}

std::string markdown_table(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    out += '|';
    for (const auto& c : cells) out += ' ' + (c.empty() ? std::string("-") : c) + " |";
    out += '\n';
  };
  line(rows[0]);
  out += '|';
  for (std::size_t i = 0; i < rows[0].size(); ++i) out += " --- |";
  out += '\n';
  for (std::size_t r = 1; r < rows.size(); ++r) line(rows[r]);
  return out;
}

std::size_t column(const std::vector<std::string>& header, std::string_view name, const std::string& path) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(path + ": missing column " + std::string(name));
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

void cmd_report(const RunConfig& c) {
  const Layout lay(c.out_dir);
  const auto accuracy = read_csv(lay.accuracy());
  const auto controls = read_csv(lay.controls());
  const auto peak = read_csv(lay.peak());
  const auto corr = read_csv(lay.correlation());
  const auto dis = read_csv(lay.dissociation());
  const auto dis_layers = read_csv(lay.dissociation_layers());
  std::map<Domain, std::vector<std::vector<std::string>>> profiles;
  for (Domain d : kDomains) profiles[d] = read_csv(lay.alpha_profile(d));
  write_run_config(c);

  // Mean held-out R^2 per domain and condition over all layer pairs.
  const std::size_t c_dom = column(controls[0], "domain", lay.controls());
  const std::size_t c_cond = column(controls[0], "condition", lay.controls());
  const std::size_t c_r2 = column(controls[0], "r2", lay.controls());
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> means;
  for (std::size_t r = 1; r < controls.size(); ++r) {
    auto& m = means[{controls[r][c_dom], controls[r][c_cond]}];
    m.first += std::stod(controls[r][c_r2]);
    ++m.second;
  }
  std::vector<std::vector<std::string>> mean_rows = {{"domain", "condition", "mean_r2", "layer_pairs"}};
  for (const auto& [key, v] : means) {
    mean_rows.push_back({key.first, key.second, format_number(v.first / static_cast<double>(v.second)),
                         std::to_string(v.second)});
  }

  const std::size_t c_conf = column(dis_layers[0], "confirmed", lay.dissociation_layers());
  std::size_t confirmed = 0;
  for (std::size_t r = 1; r < dis_layers.size(); ++r) confirmed += dis_layers[r][c_conf] == "true";

  std::string md;
  md += "# Cross-architecture steering run\n\n";
  md += "Teacher `" + c.teacher.model_id + "` (" + std::to_string(c.teacher.n_layers) + " layers, d=" +
        std::to_string(c.teacher.d_model) + ", " + std::to_string(c.teacher_train.steps) + " steps), student `" +
        c.student.model_id + "` (" + std::to_string(c.student.n_layers) + " layers, d=" +
        std::to_string(c.student.d_model) + ", " + std::to_string(c.student_train.steps) + " steps), seed " +
        std::to_string(c.seed) + ".\n\n";
  md += "## Baseline accuracy\n\n" + markdown_table(accuracy) + "\n";
  md += "## Projection quality by regularization\n\nMean held-out R^2 over all layer pairs.\n\n" +
        markdown_table(mean_rows) + "\nPer layer pair: `controls.csv`.\n\n";
  md += "## Peak correction rate\n\n" + markdown_table(peak) + "\n";
  for (Domain d : kDomains) {
    md += "## Alpha profile (" + std::string(to_string(d)) + ")\n\n" + markdown_table(profiles[d]) + "\n";
  }
  md += "## R^2 vs correction rate\n\n" + markdown_table(corr) + "\n";
  md += "## Cross-domain transfer\n\n" + markdown_table(dis) + "\n";
  md += "Dissociation holds in " + std::to_string(confirmed) + " of " + std::to_string(dis_layers.size() - 1) +
        " layer cells (`dissociation_layers.csv`).\n";
  io::write_file_atomic(lay.report(), md);
  log("report", "wrote " + lay.report());
}

void cmd_all(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  cmd_corpus_gen(c);
  cmd_train_pair(c);
  cmd_extract(c);
  cmd_fit_mappers(c);
  cmd_sweep(c);
  cmd_dissociate(c);
  cmd_report(c);
  log("all", "finished in " + fixed(seconds_since(t0), 1) + " s");
}

}  // namespace xsteer::pipeline
