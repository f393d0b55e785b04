#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "kmax/config.hpp"

namespace kmax {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// "[PASS] 3 attention-map invariants: ... (0.4 s)"
std::string format_criterion(const CriterionResult& result);

struct StudyVariant {
  std::string name;
  Config config;
};

struct StudyResult {
  std::string name;
  std::vector<double> pq;  // one per seed
  double median = 0.0;
  double seconds = 0.0;
};

// Trains every variant once per seed (train.seed overridden) and records the
// final validation PQ.
std::vector<StudyResult> run_study(const std::vector<StudyVariant>& variants,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::ostream* progress = nullptr);

std::string format_study(const std::vector<StudyResult>& results);

double median(std::vector<double> values);

CriterionResult check_gradients();
CriterionResult check_kmeans_equivalence();
CriterionResult check_attention_invariants();
CriterionResult check_hungarian_oracle();
CriterionResult check_pq_hand_cases();
CriterionResult check_determinism();
CriterionResult check_deep_supervision();

struct AcceptanceOptions {
  // Base configuration for the training criteria (7-9).
  Config base;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool training = true;
  std::ostream* progress = nullptr;
};

// Criteria 7-9 from one shared study: kmeans (2,2,2), softmax (2,2,2) and
// kmeans (1,1,1) over `seeds`.
std::vector<CriterionResult> check_training_criteria(const AcceptanceOptions& options);

// Runs criteria 1-10 in order, reporting each through `on_result` as it
// completes.
std::vector<CriterionResult> run_acceptance(
    const AcceptanceOptions& options,
    const std::function<void(const CriterionResult&)>& on_result = {});

}  // namespace kmax
