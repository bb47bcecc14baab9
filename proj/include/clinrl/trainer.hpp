#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clinrl/dataset.hpp"
#include "clinrl/encoder.hpp"
#include "clinrl/net.hpp"
#include "clinrl/synthgym.hpp"

namespace clinrl {

enum class Algorithm { dqn, cql, bcq };

std::string to_string(Algorithm algorithm);
Algorithm algorithm_from_string(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 256;
  double learning_rate = 1e-4;
  double gamma = 0.99;
  double cql_alpha = 2.0;
  double bcq_threshold = 0.3;
  /// Hard target copy every this many optimizer steps (ignored when soft_target_rate > 0).
  long target_update_interval = 1000;
  /// Polyak rate applied after every step; 0 selects hard copies.
  double soft_target_rate = 0.0;
  long total_steps = 20000;
  std::uint64_t seed = 0;
  Algorithm algorithm = Algorithm::cql;
  long eval_interval = 1000;
  std::size_t hidden = 512;
  std::size_t n_layers = 3;
  double grad_clip = 0.0;
  bool freeze_encoders = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// y = r when done, otherwise r + gamma * max_a' Q_target(s', a').
double dqn_target(double reward, bool done, double gamma, const ActionValues& next_target_q);

/// Argmax of q over actions whose probability ratio to the most probable
/// action is at least tau. The most probable action always qualifies.
int bcq_constrained_argmax(const ActionValues& q, const ActionValues& behavior_probs, double tau);

struct LossTerms {
  net::Var loss;
  net::Var td;   // 0.5 * mean (Q(s,a) - y)^2
  net::Var reg;  // mean logsumexp Q(s,.) - mean Q(s,a)
  net::Var q_taken;
};

/// 0.5 * mean (Q(s,a) - y)^2.
net::Var dqn_loss(net::Var q, std::span<const int> actions, std::span<const double> targets);
/// dqn_loss + alpha * (mean_s logsumexp_a Q(s,a) - mean Q(s, a_data)).
LossTerms cql_loss(net::Var q, std::span<const int> actions, std::span<const double> targets, double alpha);

/// Encoder, dueling Q-network and (for BCQ) the behavior imitation head,
/// trained jointly. The action rule is greedy, or constrained for BCQ.
class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(const EncoderConfig& enc, const TrainConfig& train, std::uint64_t seed);

  struct Forward {
    net::Var state;
    net::Var q;
    net::Var imitation_logits;  // unset unless BCQ
  };
  Forward forward(net::Graph& g, const StateBatch& batch) const;

  /// Q values and imitation probabilities for many inputs, processed in chunks.
  std::vector<ActionValues> q_values(std::span<const StateInput* const> inputs) const;
  std::vector<ActionValues> behavior_probs(std::span<const StateInput* const> inputs) const;
  std::vector<int> act(std::span<const StateInput* const> inputs) const;
  ActionValues q_values(const StateInput& input) const;
  int act(const StateInput& input) const;

  const EncoderConfig& encoder_config() const { return encoder_.config(); }
  Algorithm algorithm() const { return algorithm_; }
  double bcq_threshold() const { return bcq_threshold_; }
  StateEncoder& encoder() { return encoder_; }
  const StateEncoder& encoder() const { return encoder_; }
  net::DuelingQNetwork& q_network() { return q_; }
  const net::DuelingQNetwork& q_network() const { return q_; }
  bool has_imitation() const { return has_imitation_; }

  void collect(net::ParamList& out);
  void collect(net::ConstParamList& out) const;
  /// Parameters excluding the state encoder.
  void collect_heads(net::ParamList& out);

  nlohmann::json checkpoint(const nlohmann::json& extra_meta = {}) const;
  static PolicyModel from_checkpoint(const nlohmann::json& checkpoint);

 private:
  StateEncoder encoder_;
  net::DuelingQNetwork q_;
  net::Mlp imitation_;
  bool has_imitation_ = false;
  Algorithm algorithm_ = Algorithm::cql;
  double bcq_threshold_ = 0.3;
  std::size_t hidden_ = 512;
  std::size_t n_layers_ = 3;
  std::uint64_t seed_ = 0;
};

/// Transition-level view of a dataset with resolved encoder inputs for s and s'.
struct TransitionTable {
  std::vector<std::vector<StateInput>> inputs;  // per episode, T + 1 entries
  struct Ref {
    std::uint32_t episode;
    std::uint32_t step;
  };
  std::vector<Ref> refs;
  const OfflineDataset* dataset = nullptr;

  static TransitionTable build(const OfflineDataset& dataset, const NoteStrategy& strategy);
  const Transition& transition(const Ref& r) const { return dataset->episodes[r.episode].transitions[r.step]; }
  const StateInput& state(const Ref& r) const { return inputs[r.episode][r.step]; }
  const StateInput& next_state(const Ref& r) const { return inputs[r.episode][r.step + 1]; }
};

struct TrainLogEntry {
  long step = 0;
  double loss = 0.0;
  double mean_q = 0.0;
  double reg_term = 0.0;
  std::optional<double> fqe_val;

  nlohmann::json to_json() const;
};

struct TrainResult {
  PolicyModel model;
  /// Highest-scoring snapshot under the evaluation hook, if one was given.
  std::optional<PolicyModel> best_model;
  std::optional<double> best_score;
  std::vector<TrainLogEntry> log;
};

/// Raised when the loss or a gradient becomes non-finite. Carries the last
/// snapshot taken at an evaluation interval.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::shared_ptr<const PolicyModel> last_good, long step)
      : NumericError(what), last_good_(std::move(last_good)), step_(step) {}
  const PolicyModel* last_good() const { return last_good_.get(); }
  long step() const { return step_; }

 private:
  std::shared_ptr<const PolicyModel> last_good_;
  long step_;
};

using EvalHook = std::function<double(const PolicyModel&)>;

/// Fits on the training split with uniform minibatch sampling.
TrainResult train(const OfflineDataset& dataset, const EncoderConfig& enc, const TrainConfig& cfg,
                  const EvalHook& hook = {});

struct ResidualSummary {
  std::vector<double> samples;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;

  nlohmann::json to_json(bool include_samples) const;
};

/// Q(s,a) - (r + gamma * max_a' Q(s',a')) with the bootstrap dropped on
/// terminal transitions, using the same network for both terms.
std::vector<double> bellman_residual_values(std::span<const ActionValues> q, std::span<const ActionValues> q_next,
                                            std::span<const Transition* const> transitions, double gamma);
ResidualSummary bellman_residuals(const PolicyModel& model, const OfflineDataset& dataset, double gamma,
                                  std::size_t n_bins = 50);
ResidualSummary summarize_residuals(std::vector<double> samples, std::size_t n_bins = 50);

/// Action chosen by the model at each state's canonical observation history.
std::vector<int> tabular_actions(const PolicyModel& model, const TabularMDP& mdp,
                                 const std::optional<FeatureStats>& stats);

}  // namespace clinrl
