#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "clinrl/common.hpp"
#include "clinrl/dataset.hpp"

namespace clinrl {

/// Row-per-state action distribution.
using StatePolicy = std::vector<ActionValues>;

StatePolicy deterministic_policy(const std::vector<int>& actions);
StatePolicy uniform_policy(std::size_t n_states);

/// Finite MDP over 25 joint dose actions. Episodes end either by the per
/// (state, action) termination draw or by truncation; at termination the
/// reward is the terminal outcome of the state just entered.
struct TabularMDP {
  int n_states = 0;
  std::vector<double> transition;     // [s][a][s'], row-major
  std::vector<double> terminal_prob;  // [s][a]
  std::vector<double> reward_terminal;
  std::vector<double> initial;
  double gamma = 0.99;

  // Emission model.
  std::size_t n_features = 0;
  std::size_t d_n = 0;
  std::vector<std::vector<double>> structured_mean;
  double structured_noise = 0.0;
  std::vector<std::vector<double>> event_prototype;
  std::vector<std::vector<double>> context_prototype;
  double note_noise = 0.0;
  double note_prob = 1.0;

  // Latent-factor layout of generated MDPs (state = severity * n_context + context).
  // Empty for hand-built MDPs.
  int n_severity = 0;
  int n_context = 0;
  std::vector<int> optimal_iv;    // per severity
  std::vector<int> optimal_vaso;  // per context

  double p(int s, int a, int s2) const {
    return transition[(static_cast<std::size_t>(s) * kNumActions + a) * n_states + s2];
  }
  double& p(int s, int a, int s2) {
    return transition[(static_cast<std::size_t>(s) * kNumActions + a) * n_states + s2];
  }
  double term(int s, int a) const { return terminal_prob[static_cast<std::size_t>(s) * kNumActions + a]; }
  double& term(int s, int a) { return terminal_prob[static_cast<std::size_t>(s) * kNumActions + a]; }

  /// Allocates tensors for n states (zeros, uniform initial distribution).
  static TabularMDP blank(int n_states, std::size_t n_features, std::size_t d_n);

  /// Throws DataError on non-stochastic rows, probabilities outside [0,1] or
  /// non-finite emissions.
  void validate() const;
};

struct SynthConfig {
  int n_severity = 4;
  int n_context = 3;
  std::size_t n_features = 42;
  std::size_t d_n = 64;
  double structured_noise = 0.5;
  double note_noise = 0.02;
  double note_prob = 0.5;
  double terminal_prob = 0.3;
  double transition_jitter = 0.05;
  double gamma = 0.99;
  /// Seed for emissions and optimal treatments; defaults to the MDP seed.
  /// MDPs sharing it differ only in dynamics jitter.
  std::optional<std::uint64_t> family_seed;
  /// Generation fails when the certified modality gap is below this.
  double min_gap = 0.02;

  void validate() const;
};

TabularMDP generate_mdp(const SynthConfig& cfg, std::uint64_t seed);

struct BehaviorPolicy {
  StatePolicy probs;

  /// Rows sum to 1 and every entry is at least `floor` (> 0).
  void validate(double floor) const;
};

/// (1 - eps) on the DP-optimal action plus eps spread uniformly.
BehaviorPolicy make_behavior_policy(const TabularMDP& mdp, double epsilon);

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
};

/// Samples episodes under `policy`. Truncation at max_len terminates with the
/// outcome of the state entered on the last step.
OfflineDataset rollout(const TabularMDP& mdp, const BehaviorPolicy& policy, int n_episodes, int max_len,
                       std::uint64_t seed, SplitFractions splits = {});

JointObservation emit(const TabularMDP& mdp, int state, bool first_frame, std::mt19937_64& rng);

/// Noise-free two-frame history for a state: the context note on frame 0 and
/// the event note on frame 1, structured features at their means. When stats
/// are given the features are normalised with them.
std::vector<JointObservation> canonical_history(const TabularMDP& mdp, int state,
                                                const std::optional<FeatureStats>& stats);

/// Per-state values of a stationary policy by direct linear solve.
std::vector<double> policy_state_values(const TabularMDP& mdp, const StatePolicy& policy, double gamma);
/// Same fixed point by value iteration, stopping when the sup-norm update is below tol.
std::vector<double> policy_state_values_iterative(const TabularMDP& mdp, const StatePolicy& policy,
                                                  double gamma, double tol = 1e-10);
/// Q^pi(s, a) under the infinite-horizon model.
std::vector<ActionValues> policy_q_values(const TabularMDP& mdp, const StatePolicy& policy, double gamma);

/// Initial-distribution-weighted value. Throws ConfigError unless 0 <= gamma < 1.
double exact_policy_value(const TabularMDP& mdp, const StatePolicy& policy, double gamma);

/// Value when episodes are truncated after `horizon` steps, as in rollout().
double finite_horizon_value(const TabularMDP& mdp, const StatePolicy& policy, double gamma, int horizon);
/// Q_t^pi for t = 0..horizon-1 under truncation.
std::vector<std::vector<ActionValues>> finite_horizon_q(const TabularMDP& mdp, const StatePolicy& policy,
                                                        double gamma, int horizon);

/// Q* by value iteration.
std::vector<ActionValues> optimal_q_values(const TabularMDP& mdp, double gamma, double tol = 1e-12);
std::vector<int> greedy_actions(const std::vector<ActionValues>& q);

struct ModalityGap {
  double optimal = 0.0;
  double best_structured_only = 0.0;
  double best_note_only = 0.0;
  double delta = 0.0;
  bool certified = false;
};

/// Compares the optimal value with the best deterministic policies that see
/// only the severity factor or only the context factor.
ModalityGap certify_modality_gap(const TabularMDP& mdp, double gamma);

/// Seeded unit vector for (id, kind). Vectors of the same kind are drawn in id
/// order and redrawn until |cos| < 0.45 against all earlier ids.
enum class EmbedKind { context, event };
std::vector<double> pseudo_embed(int state_id, EmbedKind kind, std::size_t d_n, std::uint64_t seed);

nlohmann::json ground_truth_json(const TabularMDP& mdp, const BehaviorPolicy& behavior, double gamma,
                                 int max_len);

}  // namespace clinrl
