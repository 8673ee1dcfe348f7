#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "xsteer/intervention.hpp"

using namespace xsteer;

namespace {

ModelConfig tiny(std::size_t layers, std::size_t d, std::string id, std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.d_ff = 2 * d;
  c.max_seq_len = 64;
  c.seed = seed;
  c.model_id = std::move(id);
  return c;
}

Mapper identity_mapper(std::size_t d) {
  Mapper m;
  m.weights = DenseMatrix::identity(d);
  m.bias.assign(d, 0.0);
  return m;
}

}  // namespace

TEST_SUITE("intervention") {

TEST_CASE("grids are the published values") {
  CHECK(std::vector<double>(kAlphaGrid.begin(), kAlphaGrid.end()) ==
        std::vector<double>{0.25, 0.5, 0.8, 1.0, 2.0, 3.0, 5.0, 10.0});
  CHECK(std::vector<double>(kDepthGrid.begin(), kDepthGrid.end()) ==
        std::vector<double>{0.25, 0.5, 0.75, 0.9});
}

TEST_CASE("relative depth to layer index") {
  CHECK(relative_depth_to_layer(0.75, 32) == 24);
  CHECK(relative_depth_to_layer(0.25, 4) == 1);
  CHECK(relative_depth_to_layer(0.5, 4) == 2);
  CHECK(relative_depth_to_layer(0.75, 4) == 3);
  CHECK(relative_depth_to_layer(0.9, 4) == 4);
  CHECK(relative_depth_to_layer(0.25, 8) == 2);
  CHECK(relative_depth_to_layer(0.9, 8) == 7);
  CHECK(relative_depth_to_layer(1.0, 8) == 8);
  CHECK(relative_depth_to_layer(0.25, 2) == 1);
  CHECK(relative_depth_to_layer(0.75, 2) == 2);
  CHECK(relative_depth_to_layer(0.01, 6) == 1);
  CHECK_THROWS_AS(relative_depth_to_layer(0.0, 4), Error);
  CHECK_THROWS_AS(relative_depth_to_layer(1.1, 4), Error);
  CHECK_THROWS_AS(relative_depth_to_layer(0.5, 1), Error);
}

TEST_CASE("blend hand examples") {
  const std::vector<double> h = {1, 0};
  const std::vector<double> hp = {0, 2};
  CHECK(blend(h, hp, 1.0) == std::vector<double>{0, 1});
  CHECK(blend(h, hp, 2.0) == std::vector<double>{-1, 2});
}

TEST_CASE("project matches a naive loop and simple cases") {
  SeededRng rng(2);
  Mapper m;
  m.weights = oracle::random_matrix(rng, 6, 9);
  m.bias.resize(6);
  for (double& b : m.bias) b = rng.normal();
  std::vector<double> h(9);
  for (double& v : h) v = rng.normal();
  const auto out = project(m, h);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = m.bias[r];
    for (std::size_t c = 0; c < 9; ++c) s += m.weights(r, c) * h[c];
    CHECK(std::abs(out[r] - s) < 1e-12);
  }
  Mapper id;
  id.weights = DenseMatrix::identity(9);
  id.bias.assign(9, 0.0);
  CHECK(project(id, h) == h);
  Mapper zero;
  zero.weights = DenseMatrix(2, 9);
  zero.bias = {1.5, -2.0};
  CHECK(project(zero, h) == zero.bias);
}

TEST_CASE("blend identities") {
  const std::vector<double> h = {0.5, -0.5, 0.5, 0.5};
  const std::vector<double> hp = {0.0, 3.0, 0.0, -4.0};
  CHECK(blend(h, hp, 0.0) == h);

  const auto one = blend(h, hp, 1.0);
  CHECK(std::abs(l2_norm(one) - l2_norm(h)) < 1e-9);
  CHECK(one == std::vector<double>{0.0, 0.6, 0.0, -0.8});

  const auto two = blend(h, hp, 2.0);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(two[i] == 2.0 * (hp[i] / 5.0) - h[i]);

  SeededRng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(16), b(16);
    for (auto& v : a) v = 10.0 * rng.normal();
    for (auto& v : b) v = rng.normal();
    CHECK(std::abs(l2_norm(blend(a, b, 1.0)) - l2_norm(a)) < 1e-9 * l2_norm(a));
    CHECK(blend(a, b, 0.0) == a);
  }
  CHECK_THROWS_AS(blend(h, std::vector<double>{1.0}, 1.0), Error);
  CHECK_THROWS_AS(blend(h, std::vector<double>(4, 0.0), 1.0), Error);
}

TEST_CASE("project applies W h + b") {
  Mapper m;
  m.weights = DenseMatrix{{1, 2, 0}, {0, -1, 3}};
  m.bias = {0.5, -0.5};
  const std::vector<double> h = {1, 1, 2};
  CHECK(project(m, h) == std::vector<double>{3.5, 4.5});
  CHECK_THROWS_AS(project(m, std::vector<double>{1, 2}), Error);
}

TEST_CASE("opportunity set") {
  const std::map<std::string, bool> teacher = {{"a", true}, {"b", true}, {"c", false}, {"d", true}};
  const std::map<std::string, bool> student = {{"a", false}, {"b", true}, {"c", false}, {"d", false}};
  CHECK(find_opportunity_set(teacher, student) == std::vector<std::string>{"a", "d"});
  std::map<std::string, bool> other = student;
  other.erase("a");
  other["z"] = false;
  CHECK_THROWS_AS(find_opportunity_set(teacher, other), Error);
}

TEST_CASE("config must sit on the grids") {
  CHECK_NOTHROW(InterventionConfig{0.25, 0.9, 10.0}.validate());
  CHECK_THROWS_AS((InterventionConfig{0.3, 0.9, 1.0}.validate()), Error);
  CHECK_THROWS_AS((InterventionConfig{0.25, 0.9, 4.0}.validate()), Error);
}

TEST_CASE("self-pairing with the identity map changes nothing") {
  const TransformerModel student(tiny(4, 16, "student", 21));
  const auto items = gen_math_task(3, 20);
  const auto base = generate_texts(student, items, {});
  for (double l : kDepthGrid) {
    const std::size_t layer = relative_depth_to_layer(l, 4);
    const auto acts = extract_activations(student, items, layer);
    Mapper m = identity_mapper(16);
    m.source_layer = m.target_layer = layer;
    const auto texts = run_intervention(student, m, acts, items, {l, l, 1.0});
    for (std::size_t i = 0; i < items.size(); ++i) CHECK(texts[i].text == base[i].text);
  }
}

TEST_CASE("large alpha moves generations") {
  TransformerModel student(tiny(4, 16, "student", 22));
  SeededRng rng(4);
  for (float& p : student.parameters()) p += static_cast<float>(0.2 * rng.normal());
  const auto items = gen_verbal_task(3, 20);
  const auto base = generate_texts(student, items, {});
  const auto acts = extract_activations(student, items, 2);
  Mapper m;
  m.weights = oracle::random_matrix(rng, 16, 16);
  m.bias.assign(16, 0.0);
  const auto texts = run_intervention(student, m, acts, items, {0.5, 0.5, 10.0});
  std::size_t changed = 0;
  for (std::size_t i = 0; i < items.size(); ++i) changed += texts[i].text != base[i].text;
  CHECK(changed > 0);
}

TEST_CASE("run_intervention rejects mismatched inputs") {
  const TransformerModel student(tiny(4, 16, "student", 23));
  const auto items = gen_math_task(3, 4);
  const auto acts = extract_activations(student, items, 3);
  Mapper m = identity_mapper(16);
  m.target_layer = 2;
  CHECK_THROWS_AS(run_intervention(student, m, acts, items, {0.75, 0.75, 1.0}), Error);
  m.target_layer = 3;
  m.source_layer = 1;
  CHECK_THROWS_AS(run_intervention(student, m, acts, items, {0.75, 0.75, 1.0}), Error);
  m.source_layer = 0;
  auto others = items;
  others[2].id = "math-9999";
  CHECK_THROWS_AS(run_intervention(student, m, acts, others, {0.75, 0.75, 1.0}), Error);
  CHECK_THROWS_AS(run_intervention(student, identity_mapper(8), acts, items, {0.75, 0.75, 1.0}), Error);
}

TEST_CASE("sweep emits every cell in grid order") {
  const TransformerModel teacher(tiny(8, 24, "teacher", 31));
  const TransformerModel student(tiny(4, 16, "student", 32));
  const auto items = gen_math_task(5, 12);
  BaselineScores base;
  for (std::size_t i = 0; i < items.size(); ++i) {
    base.teacher[items[i].id] = i % 3 != 0;
    base.student[items[i].id] = i % 2 == 0;
  }
  SeededRng rng(6);
  MapperGrid mappers;
  for (double lt : kDepthGrid)
    for (double ls : kDepthGrid) {
      Mapper m;
      m.weights = oracle::random_matrix(rng, 16, 24);
      m.bias.assign(16, 0.0);
      m.heldout_r2 = lt - ls;
      mappers.emplace(DepthPair{lt, ls}, m);
    }
  const auto records = sweep(teacher, student, mappers, items, SweepGrid{}, {}, &base);
  REQUIRE(records.size() == 128);
  std::size_t k = 0;
  for (double lt : kDepthGrid)
    for (double ls : kDepthGrid)
      for (double a : kAlphaGrid) {
        const auto& r = records[k++];
        CHECK(r.config.l_t == lt);
        CHECK(r.config.l_s == ls);
        CHECK(r.config.alpha == a);
        CHECK(r.teacher_layer == relative_depth_to_layer(lt, 8));
        CHECK(r.student_layer == relative_depth_to_layer(ls, 4));
        CHECK(r.opportunity_count == 4);  // i in {1, 5, 7, 11}
        REQUIRE(r.delta);
        CHECK(*r.delta == doctest::Approx(100.0 * r.corrected_count / 4.0));
        CHECK(r.r2_ridge == lt - ls);
      }

  MapperGrid missing = mappers;
  missing.erase(DepthPair{0.5, 0.9});
  CHECK_THROWS_AS(sweep(teacher, student, missing, items, SweepGrid{}, {}, &base), Error);
}

TEST_CASE("sweep with an empty opportunity set leaves delta undefined") {
  const TransformerModel teacher(tiny(8, 24, "teacher", 31));
  const TransformerModel student(tiny(4, 16, "student", 32));
  const auto items = gen_math_task(5, 3);
  BaselineScores base;
  for (const auto& it : items) base.teacher[it.id] = base.student[it.id] = false;
  MapperGrid mappers;
  SeededRng rng(7);
  for (double lt : kDepthGrid)
    for (double ls : kDepthGrid) {
      Mapper m;
      m.weights = oracle::random_matrix(rng, 16, 24);
      m.bias.assign(16, 0.0);
      mappers.emplace(DepthPair{lt, ls}, m);
    }
  const auto records = sweep(teacher, student, mappers, items, SweepGrid{}, {}, &base);
  CHECK(records.size() == 128);
  for (const auto& r : records) {
    CHECK(r.empty_opportunity());
    CHECK_FALSE(r.delta);
  }
  CHECK_FALSE(peak_record(records));
  CHECK(alpha_profile(records).empty());
}

TEST_CASE("peak record and alpha profile") {
  std::vector<SweepRecord> recs(4);
  recs[0].config = {0.25, 0.25, 0.5};
  recs[0].delta = 10.0;
  recs[1].config = {0.25, 0.5, 0.5};
  recs[1].delta = 30.0;
  recs[2].config = {0.25, 0.25, 1.0};
  recs[2].delta = 30.0;
  recs[3].config = {0.5, 0.25, 1.0};
  const auto peak = peak_record(recs);
  REQUIRE(peak);
  CHECK(peak->config.l_s == 0.5);
  const auto prof = alpha_profile(recs);
  REQUIRE(prof.size() == 2);
  CHECK(prof[0] == std::pair<double, double>{0.5, 20.0});
  CHECK(prof[1] == std::pair<double, double>{1.0, 30.0});
}

TEST_CASE("pearson correlation") {
  const std::vector<double> x = {1, 2, 3};
  const std::vector<double> y = {1, 2, 4};
  CHECK(pearson_r(x, y) == doctest::Approx(3.0 / std::sqrt(2.0 * 42.0 / 9.0)));
  const std::vector<double> neg = {3, 2, 1};
  CHECK(pearson_r(x, neg) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(pearson_r(x, std::vector<double>{1, 1, 1}), Error);
  CHECK_THROWS_AS(pearson_r(x, std::vector<double>{1, 2}), Error);
}

}  // TEST_SUITE
