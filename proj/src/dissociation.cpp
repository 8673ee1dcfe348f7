#include "xsteer/dissociation.hpp"

#include <algorithm>

#include "xsteer/intervention.hpp"

namespace xsteer {

TransferPair transfer_r2(const ActivationSet& teacher_train, const ActivationSet& student_train,
                         const ActivationSet& teacher_test, const ActivationSet& student_test,
                         const ActivationSet& teacher_other, const ActivationSet& student_other,
                         double lambda) {
  const Mapper m = fit_ridge(teacher_train, student_train, lambda);
  return {r2_score(m, teacher_test, student_test).value,
          r2_score(m, teacher_other, student_other).value};
}

namespace {

std::vector<std::size_t> unique_layers(std::span<const double> depths, std::size_t n_layers) {
  std::vector<std::size_t> out;
  for (double l : depths) out.push_back(relative_depth_to_layer(l, n_layers));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

DissociationData::DissociationData(const TransformerModel& teacher, const TransformerModel& student,
                                   std::span<const QAItem> verbal_items,
                                   std::span<const QAItem> math_items, std::span<const double> depths,
                                   const DissociationProtocol& protocol)
    : teacher_id_(teacher.config().model_id),
      student_id_(student.config().model_id),
      teacher_layers_(teacher.config().n_layers),
      student_layers_(student.config().n_layers) {
  const std::size_t needed = protocol.train_items + protocol.test_items;
  const auto t_layers = unique_layers(depths, teacher_layers_);
  const auto s_layers = unique_layers(depths, student_layers_);

  auto build = [&](std::span<const QAItem> items, DomainData& out) {
    if (items.size() < needed) {
      throw Error("dissociation: need " + std::to_string(needed) + " items per domain, got " +
                  std::to_string(items.size()));
    }
    SeededRng rng(protocol.seed);
    const auto order = rng.permutation(items.size());
    std::vector<QAItem> drawn;
    for (std::size_t i = 0; i < needed; ++i) drawn.push_back(items[order[i]]);
    std::vector<std::size_t> train_rows(protocol.train_items), test_rows(protocol.test_items);
    for (std::size_t i = 0; i < protocol.train_items; ++i) train_rows[i] = i;
    for (std::size_t i = 0; i < protocol.test_items; ++i) test_rows[i] = protocol.train_items + i;

    auto fill = [&](const TransformerModel& model, const std::vector<std::size_t>& layers, Side& side) {
      const auto sets = extract_activations(model, drawn, layers);
      for (std::size_t k = 0; k < layers.size(); ++k) {
        // Normalize once before splitting.
        const ActivationSet norm = normalize(sets[k]);
        side.train.emplace(layers[k], norm.select(train_rows));
        side.test.emplace(layers[k], norm.select(test_rows));
      }
    };
    fill(teacher, t_layers, out.teacher);
    fill(student, s_layers, out.student);
    out.train_ids = out.teacher.train.begin()->second.item_ids;
    out.test_ids = out.teacher.test.begin()->second.item_ids;
  };
  build(verbal_items, verbal_);
  build(math_items, math_);
}

const std::vector<std::string>& DissociationData::train_ids(Domain d) const { return data(d).train_ids; }
const std::vector<std::string>& DissociationData::test_ids(Domain d) const { return data(d).test_ids; }

DissociationResult DissociationData::cell(double l_t, double l_s, double lambda) const {
  const std::size_t lt = relative_depth_to_layer(l_t, teacher_layers_);
  const std::size_t ls = relative_depth_to_layer(l_s, student_layers_);
  auto at = [](const std::map<std::size_t, ActivationSet>& m, std::size_t layer) -> const ActivationSet& {
    const auto it = m.find(layer);
    if (it == m.end()) throw Error("dissociation: layer " + std::to_string(layer) + " was not extracted");
    return it->second;
  };
  const DomainData& a = verbal_;
  const DomainData& b = math_;
  const auto dir_a = transfer_r2(at(a.teacher.train, lt), at(a.student.train, ls), at(a.teacher.test, lt),
                                 at(a.student.test, ls), at(b.teacher.test, lt), at(b.student.test, ls), lambda);
  const auto dir_b = transfer_r2(at(b.teacher.train, lt), at(b.student.train, ls), at(b.teacher.test, lt),
                                 at(b.student.test, ls), at(a.teacher.test, lt), at(a.student.test, ls), lambda);
  DissociationResult r;
  r.teacher_id = teacher_id_;
  r.student_id = student_id_;
  r.l_t = l_t;
  r.l_s = l_s;
  r.in_domain_a_r2 = dir_a.in_domain;
  r.transfer_a_to_b_r2 = dir_a.transfer;
  r.in_domain_b_r2 = dir_b.in_domain;
  r.transfer_b_to_a_r2 = dir_b.transfer;
  r.confirmed = r.in_domain_a_r2 > r.transfer_a_to_b_r2 && r.in_domain_b_r2 > r.transfer_b_to_a_r2;
  return r;
}

DissociationResult run_dissociation(const TransformerModel& teacher, const TransformerModel& student,
                                    std::span<const QAItem> verbal_items,
                                    std::span<const QAItem> math_items, double l_t, double l_s,
                                    const DissociationProtocol& protocol) {
  const double depths[] = {l_t, l_s};
  const DissociationData data(teacher, student, verbal_items, math_items, depths, protocol);
  return data.cell(l_t, l_s, protocol.lambda);
}

std::vector<DissociationResult> run_layer_dissociation(const TransformerModel& teacher,
                                                       const TransformerModel& student,
                                                       std::span<const QAItem> verbal_items,
                                                       std::span<const QAItem> math_items,
                                                       std::span<const double> depths,
                                                       const DissociationProtocol& protocol) {
  const DissociationData data(teacher, student, verbal_items, math_items, depths, protocol);
  std::vector<DissociationResult> out;
  for (double l_t : depths)
    for (double l_s : depths) out.push_back(data.cell(l_t, l_s, protocol.lambda));
  return out;
}

}  // namespace xsteer
