#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clinrl/dataset.hpp"
#include "clinrl/trainer.hpp"

namespace clinrl {

struct DiscrepancyScore {
  std::string episode_id;
  double m_iv = 0.0;
  double m_vaso = 0.0;
  double m = 0.0;
};

struct DiscrepancyWeights {
  double alpha = 0.5;
  double beta = 0.5;

  void validate() const;
};

/// Mean absolute level gap between the policy's action and the logged one,
/// per drug, plus their weighted combination. policy_actions holds one flat
/// action per step.
DiscrepancyScore episode_discrepancy(const Episode& episode, std::span<const int> policy_actions,
                                     const DiscrepancyWeights& w);

/// Scores every episode using the model's own action rule.
std::vector<DiscrepancyScore> discrepancy_scores(const PolicyModel& model, const OfflineDataset& dataset,
                                                 const DiscrepancyWeights& w);

struct CohortSplit {
  std::vector<std::string> low;   // m <= q_low
  std::vector<std::string> high;  // m >= q_high
  double p = 20.0;
  double q_low = 0.0;
  double q_high = 0.0;
  std::optional<std::string> warning;
};

/// Percentiles by linear interpolation between order statistics.
CohortSplit cohort_split(std::span<const DiscrepancyScore> scores, double p = 20.0);

struct CohortRates {
  double low_rate = 0.0;
  double high_rate = 0.0;
};

CohortRates bdesr_rates(const CohortSplit& split, const std::map<std::string, bool>& survival);

std::map<std::string, bool> survival_by_episode(const OfflineDataset& dataset);

struct BdesrReport {
  DiscrepancyWeights weights;
  std::vector<DiscrepancyScore> scores;
  CohortSplit split;
  CohortRates rates;

  nlohmann::json to_json() const;
  /// One row per cohort: group, episodes, survival rate.
  std::string table_csv() const;
};

BdesrReport bdesr_report(const PolicyModel& model, const OfflineDataset& dataset, const DiscrepancyWeights& w,
                         double p = 20.0);

}  // namespace clinrl
