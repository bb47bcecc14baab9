#include "clinrl/bdesr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

namespace clinrl {

using nlohmann::json;

void DiscrepancyWeights::validate() const {
  if (!(alpha >= 0.0 && beta >= 0.0)) throw ConfigError("bdesr.alpha and bdesr.beta must be nonnegative");
  if (std::abs(alpha + beta - 1.0) > 1e-12) throw ConfigError("bdesr.alpha + bdesr.beta must equal 1");
}

DiscrepancyScore episode_discrepancy(const Episode& episode, std::span<const int> policy_actions,
                                     const DiscrepancyWeights& w) {
  w.validate();
  if (episode.transitions.empty()) throw DataError("episode " + episode.episode_id + " is empty");
  if (policy_actions.size() != episode.length()) {
    throw DataError("episode " + episode.episode_id + ": expected one policy action per step");
  }
  DiscrepancyScore s;
  s.episode_id = episode.episode_id;
  for (std::size_t t = 0; t < episode.length(); ++t) {
    const ActionIndex pi = ActionIndex::from_flat(policy_actions[t]);
    const ActionIndex& logged = episode.transitions[t].action;
    s.m_iv += std::abs(pi.iv_level - logged.iv_level);
    s.m_vaso += std::abs(pi.vaso_level - logged.vaso_level);
  }
  const auto T = static_cast<double>(episode.length());
  s.m_iv /= T;
  s.m_vaso /= T;
  s.m = w.alpha * s.m_iv + w.beta * s.m_vaso;
  return s;
}

std::vector<DiscrepancyScore> discrepancy_scores(const PolicyModel& model, const OfflineDataset& dataset,
                                                 const DiscrepancyWeights& w) {
  std::vector<DiscrepancyScore> out;
  out.reserve(dataset.episodes.size());
  for (const auto& ep : dataset.episodes) {
    if (ep.transitions.empty()) throw DataError("episode " + ep.episode_id + " is empty");
    const auto inputs = episode_state_inputs(ep, model.encoder_config().strategy);
    std::vector<const StateInput*> ptrs;
    for (std::size_t t = 0; t < ep.length(); ++t) ptrs.push_back(&inputs[t]);
    out.push_back(episode_discrepancy(ep, model.act(ptrs), w));
  }
  return out;
}

CohortSplit cohort_split(std::span<const DiscrepancyScore> scores, double p) {
  if (scores.empty()) throw DataError("cohort split needs at least one score");
  if (!(p > 0.0 && p < 50.0)) throw ConfigError("bdesr.p must lie in (0, 50)");
  std::vector<double> sorted;
  for (const auto& s : scores) sorted.push_back(s.m);
  std::sort(sorted.begin(), sorted.end());
  CohortSplit c;
  c.p = p;
  c.q_low = percentile_sorted(sorted, p);
  c.q_high = percentile_sorted(sorted, 100.0 - p);
  for (const auto& s : scores) {
    if (s.m <= c.q_low) c.low.push_back(s.episode_id);
    if (s.m >= c.q_high) c.high.push_back(s.episode_id);
  }
  if (sorted.front() == sorted.back()) {
    c.warning = "all discrepancy scores are identical; both cohorts contain every episode";
  }
  return c;
}

CohortRates bdesr_rates(const CohortSplit& split, const std::map<std::string, bool>& survival) {
  auto rate = [&](const std::vector<std::string>& ids, const char* name) {
    if (ids.empty()) throw DataError(std::string(name) + " cohort is empty");
    double alive = 0.0;
    for (const auto& id : ids) {
      const auto it = survival.find(id);
      if (it == survival.end()) throw DataError("no survival outcome for episode " + id);
      alive += it->second ? 1.0 : 0.0;
    }
    return alive / static_cast<double>(ids.size());
  };
  return {rate(split.low, "low-discrepancy"), rate(split.high, "high-discrepancy")};
}

std::map<std::string, bool> survival_by_episode(const OfflineDataset& dataset) {
  std::map<std::string, bool> out;
  for (const auto& ep : dataset.episodes) out[ep.episode_id] = ep.survived;
  return out;
}

BdesrReport bdesr_report(const PolicyModel& model, const OfflineDataset& dataset, const DiscrepancyWeights& w,
                         double p) {
  BdesrReport r;
  r.weights = w;
  r.scores = discrepancy_scores(model, dataset, w);
  r.split = cohort_split(r.scores, p);
  r.rates = bdesr_rates(r.split, survival_by_episode(dataset));
  return r;
}

json BdesrReport::to_json() const {
  json scores_j = json::array();
  for (const auto& s : scores) {
    scores_j.push_back({{"episode_id", s.episode_id}, {"m_iv", s.m_iv}, {"m_vaso", s.m_vaso}, {"m", s.m}});
  }
  json j = {{"alpha", weights.alpha},
            {"beta", weights.beta},
            {"p", split.p},
            {"q_low", split.q_low},
            {"q_high", split.q_high},
            {"low", {{"episodes", split.low}, {"survival_rate", rates.low_rate}}},
            {"high", {{"episodes", split.high}, {"survival_rate", rates.high_rate}}},
            {"scores", scores_j}};
  if (split.warning) j["warning"] = *split.warning;
  return j;
}

std::string BdesrReport::table_csv() const {
  std::ostringstream os;
  os << "group,n_episodes,survival_rate\n";
  os << "Low-BDESR," << split.low.size() << ',' << format_double(rates.low_rate) << '\n';
  os << "High-BDESR," << split.high.size() << ',' << format_double(rates.high_rate) << '\n';
  return os.str();
}

}  // namespace clinrl
