#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clinrl/dataset.hpp"
#include "clinrl/encoder.hpp"
#include "clinrl/net.hpp"
#include "clinrl/synthgym.hpp"
#include "clinrl/trainer.hpp"

namespace clinrl {

/// Per-episode, per-step action tables aligned with a dataset. Row t holds
/// the values at s_t; the extra last row belongs to the state reached after
/// the final transition.
struct StepTable {
  std::vector<std::vector<ActionValues>> rows;

  const ActionValues& at(std::size_t episode, std::size_t step) const { return rows[episode][step]; }
};

/// Target policy pi(.|s_t) along the logged episodes, from state ids.
StepTable tabulate_policy(const StatePolicy& policy, const OfflineDataset& dataset);
/// Target policy from a learned model: its action rule made epsilon-soft.
StepTable tabulate_policy(const PolicyModel& model, const OfflineDataset& dataset, double epsilon_soft);
/// Q values from a state-indexed table.
StepTable tabulate_q(const std::vector<ActionValues>& q, const OfflineDataset& dataset);

/// beta(a_t | s_t) for each logged action.
struct BehaviorModel {
  std::vector<std::vector<double>> taken;

  /// Uses the logged behavior_prob field; throws DataError when it is missing.
  static BehaviorModel from_logged(const OfflineDataset& dataset);
  /// Reads beta(a_t | s_t) from a full table.
  static BehaviorModel from_table(const StepTable& table, const OfflineDataset& dataset);
};

struct BehaviorFitConfig {
  double floor = 1e-3;
  std::size_t hidden = 64;
  long steps = 2000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// 25-way softmax classifier over [structured features; most recent note],
/// probabilities floored as p' = floor + (1 - 25 floor) p.
class BehaviorClassifier {
 public:
  BehaviorClassifier() = default;
  BehaviorClassifier(std::size_t n_features, std::size_t d_n, const BehaviorFitConfig& cfg);

  std::vector<ActionValues> probs(std::span<const StateInput* const> inputs) const;
  double floor() const { return floor_; }
  net::Mlp& network() { return net_; }

 private:
  net::Mlp net_;
  double floor_ = 1e-3;
  std::size_t n_features_ = 0;
  std::size_t d_n_ = 0;
  friend BehaviorClassifier fit_behavior(const OfflineDataset&, const BehaviorFitConfig&);
};

/// Fits on the training split.
BehaviorClassifier fit_behavior(const OfflineDataset& dataset, const BehaviorFitConfig& cfg);
StepTable tabulate_behavior(const BehaviorClassifier& model, const OfflineDataset& dataset);

/// Episode resampling counts; all ones for the point estimate.
using EpisodeCounts = std::vector<double>;

struct WisResult {
  double estimate = 0.0;
  double ess = 0.0;
  std::vector<double> weights;
};

struct WisConfig {
  /// Weights above this percentile of the weight distribution are clipped to it; unset disables clipping.
  std::optional<double> clip_percentile;
};

double discounted_return(const Episode& episode, double gamma);

WisResult wis(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior, double gamma,
              const WisConfig& cfg = {}, const EpisodeCounts* counts = nullptr);

/// Per-decision doubly robust estimate, with the cumulative importance
/// weights normalised by the mean full-trajectory weight. With q_hat = 0 this
/// is exactly the trajectory-level WIS estimate on terminal-reward data.
double doubly_robust(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior,
                     const StepTable& q_hat, double gamma, const EpisodeCounts* counts = nullptr);

/// Mean over episodes of sum_a pi(a|s_0) q_hat(s_0, a).
double direct_estimate(const OfflineDataset& dataset, const StepTable& policy, const StepTable& q_hat,
                       const EpisodeCounts* counts = nullptr);

struct FqeResult {
  double estimate = 0.0;
  StepTable q;  // q_hat along the dataset
  std::vector<double> initial_values;  // per episode
  long iterations = 0;
};

/// Tabular FQE: the empirical backup Q(s,a) <- mean[r + gamma (1 - done) sum_a' pi(a'|s') Q(s',a')]
/// iterated to a sup-norm change below tol. Needs state ids.
FqeResult fqe_tabular(const OfflineDataset& dataset, const StepTable& policy, double gamma, double tol = 1e-12,
                      const EpisodeCounts* counts = nullptr);

struct FqeNetConfig {
  std::size_t hidden = 64;
  std::size_t n_layers = 2;
  int iterations = 30;
  long steps_per_iteration = 200;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Network FQE over [structured features; most recent note].
FqeResult fqe_network(const OfflineDataset& dataset, const StepTable& policy, double gamma,
                      const FqeNetConfig& cfg);

struct OperaInput {
  std::string name;
  double point = 0.0;
  std::vector<double> replicates;
};

struct OperaResult {
  double estimate = 0.0;
  std::vector<double> weights;
  std::vector<std::vector<double>> mse;
  bool fallback = false;
};

/// Convex weights minimising w' M w with M the bootstrap mean-squared-error
/// matrix around the point estimates. A singular M falls back to
/// inverse-variance weights (zero-variance estimators share all weight).
OperaResult opera(const std::vector<OperaInput>& estimates);

struct OpeConfig {
  double gamma = 0.99;
  int n_bootstrap = 200;
  double epsilon_soft = 0.01;
  WisConfig wis;
  std::uint64_t seed = 0;
  bool tabular_fqe = true;
  FqeNetConfig fqe_net;
};

struct OpeReport {
  double wis = 0.0, dr = 0.0, fqe = 0.0, opera = 0.0;
  double wis_se = 0.0, dr_se = 0.0, fqe_se = 0.0, opera_se = 0.0;
  double ess = 0.0;
  std::vector<double> opera_weights;
  bool opera_fallback = false;
  std::string fqe_mode;
  int n_episodes = 0;
  int n_bootstrap = 0;

  nlohmann::json to_json() const;
};

/// WIS, DR, FQE and OPERA with episode-bootstrap standard errors.
OpeReport evaluate_policy(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior,
                          const OpeConfig& cfg);

}  // namespace clinrl
