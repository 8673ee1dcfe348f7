#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xsteer/alignment.hpp"
#include "xsteer/corpora.hpp"
#include "xsteer/transformer.hpp"

namespace xsteer {

/// Domain A is verbal, domain B is math.
struct DissociationResult {
  std::string teacher_id;
  std::string student_id;
  double l_t = 0.75;
  double l_s = 0.75;
  double in_domain_a_r2 = 0.0;
  double transfer_a_to_b_r2 = 0.0;
  double in_domain_b_r2 = 0.0;
  double transfer_b_to_a_r2 = 0.0;
  bool confirmed = false;

  double margin_a() const { return in_domain_a_r2 - transfer_a_to_b_r2; }
  double margin_b() const { return in_domain_b_r2 - transfer_b_to_a_r2; }
};

struct DissociationProtocol {
  std::size_t train_items = 200;
  std::size_t test_items = 100;
  std::uint64_t seed = 42;
  double lambda = 0.1;
};

/// Held-out R^2 of one direction: fit on (teacher, student) train sets and
/// score on the in-domain test sets and on the other domain's test sets.
struct TransferPair {
  double in_domain = 0.0;
  double transfer = 0.0;
};

TransferPair transfer_r2(const ActivationSet& teacher_train, const ActivationSet& student_train,
                         const ActivationSet& teacher_test, const ActivationSet& student_test,
                         const ActivationSet& teacher_other, const ActivationSet& student_other,
                         double lambda);

/// Normalized activations of the disjoint train/test draws of both domains at
/// every layer a depth grid touches. Built once, reused by every cell.
class DissociationData {
 public:
  DissociationData(const TransformerModel& teacher, const TransformerModel& student,
                   std::span<const QAItem> verbal_items, std::span<const QAItem> math_items,
                   std::span<const double> depths, const DissociationProtocol& protocol);

  DissociationResult cell(double l_t, double l_s, double lambda) const;

  const std::vector<std::string>& train_ids(Domain d) const;
  const std::vector<std::string>& test_ids(Domain d) const;

 private:
  struct Side {
    std::map<std::size_t, ActivationSet> train, test;  // keyed by layer
  };
  struct DomainData {
    Side teacher, student;
    std::vector<std::string> train_ids, test_ids;
  };
  const DomainData& data(Domain d) const { return d == Domain::verbal ? verbal_ : math_; }

  std::string teacher_id_, student_id_;
  std::size_t teacher_layers_ = 0, student_layers_ = 0;
  DomainData verbal_, math_;
};

DissociationResult run_dissociation(const TransformerModel& teacher, const TransformerModel& student,
                                    std::span<const QAItem> verbal_items,
                                    std::span<const QAItem> math_items, double l_t = 0.75,
                                    double l_s = 0.75, const DissociationProtocol& protocol = {});

/// One result per (l_t, l_s) in depths x depths, l_t-major.
std::vector<DissociationResult> run_layer_dissociation(const TransformerModel& teacher,
                                                       const TransformerModel& student,
                                                       std::span<const QAItem> verbal_items,
                                                       std::span<const QAItem> math_items,
                                                       std::span<const double> depths,
                                                       const DissociationProtocol& protocol = {});

}  // namespace xsteer
