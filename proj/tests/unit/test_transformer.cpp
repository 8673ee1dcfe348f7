#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "xsteer/io.hpp"
#include "xsteer/transformer.hpp"

using namespace xsteer;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 13;
  c.max_seq_len = 24;
  c.seed = 11;
  c.model_id = "small";
  return c;
}

int argmax_last(const RowMatrix<float>& logits) {
  const auto r = logits.rows() - 1;
  int best = 0;
  for (Eigen::Index j = 1; j < logits.cols(); ++j)
    if (logits(r, j) > logits(r, best)) best = static_cast<int>(j);
  return best;
}

// Re-runs the whole prefix at every step; no cache.
std::vector<int> naive_greedy(const TransformerModel& m, std::vector<int> seq, std::size_t max_new, int eos) {
  std::vector<int> out;
  for (std::size_t k = 0; k < max_new; ++k) {
    const int next = argmax_last(forward(m, seq).logits);
    if (next == eos) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace

TEST_SUITE("transformer") {

TEST_CASE("layout covers the parameter vector contiguously") {
  const auto c = small_config();
  const auto layout = parameter_layout(c);
  std::size_t offset = 0;
  for (const auto& b : layout) {
    CHECK(b.offset == offset);
    offset += b.size();
  }
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d + 4 * d * d + 2 * d * f + f + d;
  CHECK(offset == c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d + d * c.vocab_size);
  CHECK(layout.front().name == "tok_emb");
  CHECK(layout.back().name == "lm_head");
  CHECK(TransformerModel(c).parameters().size() == offset);
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.n_layers = 1;
  CHECK_THROWS_AS(TransformerModel{c}, Error);
}

TEST_CASE("init is seeded and has the documented constants") {
  const auto c = small_config();
  TransformerModel a(c), b(c);
  CHECK(a == b);
  auto c2 = c;
  c2.seed = 12;
  CHECK(!(TransformerModel(c2) == a));
  for (std::size_t i = 0; i < a.layout().size(); ++i) {
    const auto& blk = a.layout()[i];
    const auto m = a.block(i);
    if (blk.group.ends_with("gamma")) CHECK(m.isOnes());
    if (blk.group.ends_with("beta") || blk.group.starts_with("mlp.b_")) CHECK(m.isZero());
  }
}

TEST_CASE("analytic gradient matches central differences on every group") {
  const auto checks = oracle::gradient_check();
  CHECK(checks.size() == 15);
  for (const auto& [group, r] : checks) {
    INFO(group);
    CHECK(r.entries > 0);
    CHECK(r.relative_error < 1e-3);
  }
}

TEST_CASE("cached inference agrees with the training pass") {
  BasicTransformer<double> m(oracle::micro_config());
  const auto batch = oracle::micro_batch();
  const auto& seq = batch[0];
  const auto out = forward(m, seq.tokens);
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t t = seq.loss_begin; t < seq.tokens.size(); ++t) {
    const auto row = out.logits.row(static_cast<Eigen::Index>(t - 1));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - row(seq.tokens[t]);
    ++count;
  }
  const std::vector<TrainingSequence> one = {seq};
  CHECK(loss_only<double>(m, one) == doctest::Approx(loss / static_cast<double>(count)).epsilon(1e-12));
}

TEST_CASE("causal masking") {
  const TransformerModel m(small_config());
  const std::vector<int> a = {2, 3, 4, 5, 6, 7};
  std::vector<int> b = a;
  b[4] = 12;
  b[5] = 9;
  const auto la = forward(m, a).logits;
  const auto lb = forward(m, b).logits;
  CHECK(la.topRows(4).isApprox(lb.topRows(4), 0.0f));
  CHECK(!la.row(4).isApprox(lb.row(4)));
}

TEST_CASE("attention rows are causal distributions") {
  const TransformerModel m(small_config());
  const std::vector<int> tokens = {2, 9, 4, 4, 11};
  for (std::size_t layer = 1; layer <= 3; ++layer) {
    const auto probs = attention_weights(m, tokens, layer);
    REQUIRE(probs.size() == 2);
    for (const auto& p : probs) {
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        CHECK(p.row(i).sum() == doctest::Approx(1.0f).epsilon(1e-5));
        for (Eigen::Index j = i + 1; j < p.cols(); ++j) CHECK(p(i, j) == 0.0f);
      }
    }
  }
}

TEST_CASE("forward rejects bad inputs") {
  const TransformerModel m(small_config());
  CHECK_THROWS_AS(forward(m, std::vector<int>{}), Error);
  CHECK_THROWS_AS(forward(m, std::vector<int>{2, 13}), Error);
  CHECK_THROWS_AS(forward(m, std::vector<int>(25, 2)), Error);
  const std::size_t bad_layer[] = {4};
  CHECK_THROWS_AS(forward(m, std::vector<int>{2}, bad_layer), Error);
  InterventionSpec spec;
  spec.layer_index = 1;
  spec.alpha = 1.0;
  spec.injected_vector.assign(15, 1.0);
  CHECK_THROWS_AS(forward(m, std::vector<int>{2}, {}, &spec), Error);
}

TEST_CASE("interventions: alpha zero and self-injection are no-ops") {
  const TransformerModel m(small_config());
  const std::vector<int> tokens = {3, 7, 2, 8, 5};
  for (std::size_t layer = 1; layer <= 3; ++layer) {
    const std::size_t cap[] = {layer};
    const auto base = forward(m, tokens, cap);
    InterventionSpec spec;
    spec.layer_index = layer;
    spec.alpha = 1.0;
    spec.injected_vector = base.captured.at(layer);
    const auto self = forward(m, tokens, {}, &spec);
    CHECK(self.logits.isApprox(base.logits, 1e-6f));

    spec.alpha = 0.0;
    spec.injected_vector.assign(16, 0.0);
    spec.injected_vector[0] = 1.0;
    CHECK(forward(m, tokens, {}, &spec).logits == base.logits);

    spec.alpha = 1.0;
    const auto moved = forward(m, tokens, cap, &spec);
    CHECK(!moved.logits.bottomRows(1).isApprox(base.logits.bottomRows(1)));
    CHECK(moved.logits.topRows(4) == base.logits.topRows(4));
    const auto& h = moved.captured.at(layer);
    CHECK(h[0] == doctest::Approx(l2_norm(base.captured.at(layer))).epsilon(1e-6));
  }
}

TEST_CASE("cached greedy decoding matches re-running the prefix") {
  TransformerModel m(small_config());
  SeededRng rng(8);
  for (float& p : m.parameters()) p += static_cast<float>(0.3 * rng.normal());
  for (int start = 2; start < 8; ++start) {
    const std::vector<int> prompt = {start, 4, 6};
    const auto cached = generate_greedy(m, prompt, 12, 1);
    CHECK(cached == naive_greedy(m, prompt, 12, 1));
    CHECK(cached == generate_greedy(m, prompt, 12, 1));
  }
  CHECK(generate_greedy(m, std::vector<int>{2}, 0, 1).empty());
  CHECK_THROWS_AS(generate_greedy(m, std::vector<int>(20, 2), 5, 1), Error);
}

TEST_CASE("every_token scope differs from prompt_token only after the prompt") {
  TransformerModel m(small_config());
  const std::vector<int> prompt = {3, 4, 5};
  InterventionSpec spec;
  spec.layer_index = 2;
  spec.alpha = 3.0;
  spec.injected_vector.assign(16, 0.0);
  spec.injected_vector[5] = -1.0;
  const auto once = generate_greedy(m, prompt, 6, -1, &spec);
  spec.scope = InterventionScope::every_token;
  const auto every = generate_greedy(m, prompt, 6, -1, &spec);
  REQUIRE(!once.empty());
  REQUIRE(!every.empty());
  CHECK(once.front() == every.front());
}

TEST_CASE("training lowers the loss and is deterministic") {
  const std::vector<TrainingSequence> corpus = {
      {{2, 3, 4, 5, 6, 1}, 1}, {{7, 8, 9, 10, 11, 1}, 1}, {{2, 4, 6, 8, 10, 1}, 1}};
  TrainHyper h;
  h.lr = 1e-2;
  h.steps = 60;
  h.batch_size = 2;
  h.seed = 5;
  TransformerModel a(small_config()), b(small_config());
  const auto ha = train(a, corpus, h);
  const auto hb = train(b, corpus, h);
  CHECK(ha == hb);
  CHECK(a == b);
  CHECK(ha.back() < 0.5 * ha.front());
  CHECK(generate_greedy(a, std::vector<int>{7}, 5, 1) == std::vector<int>{8, 9, 10, 11});
  CHECK_THROWS_AS(train(a, {}, h), Error);
}

TEST_CASE("training does not depend on heap placement") {
  ModelConfig c = small_config();
  c.d_model = 40;
  c.d_ff = 72;
  c.n_heads = 4;
  std::vector<TrainingSequence> corpus;
  for (int i = 0; i < 8; ++i) corpus.push_back({{2 + i % 5, 3 + i % 7, 4, 5 + i % 3, 6, 7 + i % 4, 8, 1}, 2});
  TrainHyper h;
  h.lr = 1e-2;
  h.steps = 15;
  h.batch_size = 4;
  h.seed = 9;
  TransformerModel a(c);
  train(a, corpus, h);
  for (std::size_t shift : {1u, 3u, 5u, 7u}) {
    std::vector<std::vector<float>> pad;
    for (int k = 0; k < 4; ++k) pad.emplace_back(shift + 4 * k);
    TransformerModel b(c);
    train(b, corpus, h);
    CHECK(a == b);
  }
}

TEST_CASE("checkpoint round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "xsteer_ckpt_test";
  std::filesystem::remove_all(dir);
  TransformerModel m(small_config());
  m.parameters()[3] = 0.125f;
  const auto path = (dir / "m.toym").string();
  save_checkpoint(m, path);
  CHECK(load_checkpoint(path) == m);
  CHECK_THROWS_AS(load_checkpoint((dir / "none.toym").string()), Error);
  std::string bytes = io::read_file(path);
  bytes.resize(bytes.size() - 3);
  io::write_file_atomic(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
