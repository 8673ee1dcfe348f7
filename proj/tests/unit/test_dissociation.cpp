#include <doctest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "xsteer/dissociation.hpp"
#include "xsteer/intervention.hpp"

using namespace xsteer;

namespace {

ActivationSet synthetic(const DenseMatrix& m, const std::string& prefix) {
  ActivationSet s;
  s.model_id = prefix;
  s.matrix = m;
  for (std::size_t i = 0; i < m.rows(); ++i) s.item_ids.push_back(prefix + std::to_string(i));
  return s;
}

ModelConfig tiny(std::size_t layers, std::size_t d, std::string id, std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.d_ff = 2 * d;
  c.max_seq_len = 48;
  c.seed = seed;
  c.model_id = std::move(id);
  return c;
}

}  // namespace

TEST_SUITE("dissociation") {

TEST_CASE("transfer R2 drops when the domains use different maps") {
  SeededRng rng(1);
  const auto wa = oracle::random_matrix(rng, 5, 8);
  const auto wb = oracle::random_matrix(rng, 5, 8);
  auto draw = [&](const DenseMatrix& w, std::size_t n, const std::string& tag) {
    const auto x = oracle::random_matrix(rng, n, 8);
    auto y = matmul(x, w.transpose());
    for (double& v : y.data()) v += 0.1 * rng.normal();
    return std::pair{synthetic(x, tag), synthetic(y, tag)};
  };
  const auto [ta, sa] = draw(wa, 200, "a");
  const auto [ta_test, sa_test] = draw(wa, 100, "at");
  const auto [tb_test, sb_test] = draw(wb, 100, "bt");
  const auto r = transfer_r2(ta, sa, ta_test, sa_test, tb_test, sb_test, 0.1);
  CHECK(r.in_domain > 0.9);
  CHECK(r.in_domain - r.transfer > 0.3);

  const auto same = transfer_r2(ta, sa, ta_test, sa_test, ta_test, sa_test, 0.1);
  CHECK(same.in_domain == same.transfer);
}

TEST_CASE("protocol draws disjoint seeded splits") {
  const TransformerModel teacher(tiny(4, 12, "teacher", 5));
  const TransformerModel student(tiny(2, 8, "student", 6));
  const auto verbal = gen_verbal_task(1, 320);
  const auto math = gen_math_task(2, 310);
  const DissociationData data(teacher, student, verbal, math, kDepthGrid, {});
  for (Domain d : {Domain::verbal, Domain::math}) {
    const auto& tr = data.train_ids(d);
    const auto& te = data.test_ids(d);
    CHECK(tr.size() == 200);
    CHECK(te.size() == 100);
    std::set<std::string> all(tr.begin(), tr.end());
    all.insert(te.begin(), te.end());
    CHECK(all.size() == 300);
  }
  const DissociationData again(teacher, student, verbal, math, kDepthGrid, {});
  CHECK(again.train_ids(Domain::math) == data.train_ids(Domain::math));
  DissociationProtocol other;
  other.seed = 7;
  const DissociationData shifted(teacher, student, verbal, math, kDepthGrid, other);
  CHECK(shifted.train_ids(Domain::verbal) != data.train_ids(Domain::verbal));

  const auto cell = data.cell(0.75, 0.75, 0.1);
  CHECK(cell.teacher_id == "teacher");
  CHECK(cell.student_id == "student");
  CHECK(cell.confirmed == (cell.margin_a() > 0.0 && cell.margin_b() > 0.0));
  const auto single = run_dissociation(teacher, student, verbal, math);
  CHECK(single.in_domain_a_r2 == cell.in_domain_a_r2);
  CHECK(single.transfer_b_to_a_r2 == cell.transfer_b_to_a_r2);
}

TEST_CASE("layer sweep is l_t-major over the depth grid") {
  const TransformerModel teacher(tiny(4, 12, "teacher", 5));
  const TransformerModel student(tiny(2, 8, "student", 6));
  const auto verbal = gen_verbal_task(1, 300);
  const auto math = gen_math_task(2, 300);
  const auto cells = run_layer_dissociation(teacher, student, verbal, math, kDepthGrid);
  REQUIRE(cells.size() == 16);
  std::size_t k = 0;
  for (double lt : kDepthGrid)
    for (double ls : kDepthGrid) {
      CHECK(cells[k].l_t == lt);
      CHECK(cells[k].l_s == ls);
      ++k;
    }
}

TEST_CASE("too few items is an error") {
  const TransformerModel teacher(tiny(4, 12, "teacher", 5));
  const TransformerModel student(tiny(2, 8, "student", 6));
  const auto verbal = gen_verbal_task(1, 299);
  const auto math = gen_math_task(2, 300);
  CHECK_THROWS_AS(run_dissociation(teacher, student, verbal, math), Error);
}

}  // TEST_SUITE
