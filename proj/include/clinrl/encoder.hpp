#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clinrl/dataset.hpp"
#include "clinrl/net.hpp"

namespace clinrl {

enum class NoteStrategyKind { raw, impute, stack, context };

std::string to_string(NoteStrategyKind kind);
NoteStrategyKind note_strategy_from_string(const std::string& name);

/// How notes enter the state. `window` counts 4-hour frames and is only
/// consulted by the stack strategy.
struct NoteStrategy {
  NoteStrategyKind kind = NoteStrategyKind::context;
  int window = 3;
};

/// Output of note resolution: the event vector f_e and, for the context
/// strategy only, the episode-level context vector f_c.
struct ResolvedNote {
  std::optional<std::vector<double>> context;
  std::vector<double> event;
};

/// Resolves the note inputs for the last frame of `history` (frames 0..t).
///  raw     f_e is the current frame's embedding, zeros when absent
///  impute  f_e is the most recent present embedding, zeros before the first
///  stack   f_e is the mean of present embeddings within the last `window` frames
///  context f_c is the first present embedding of the episode (zeros until one
///          appears), f_e as impute
ResolvedNote resolve_note(std::span<const JointObservation> history, const NoteStrategy& strategy);

/// How the structured and note embeddings are combined into the state.
///  attention        bidirectional cross-modal attention, state is 2d
///  concat           [l; n] without attention, state is 2d
///  structured_only  l, state is d
///  note_only        n, state is d
enum class FusionMode { attention, concat, structured_only, note_only };

std::string to_string(FusionMode mode);
FusionMode fusion_mode_from_string(const std::string& name);

struct EncoderConfig {
  std::size_t n_features = 42;
  std::size_t d_n = 64;
  std::size_t d = 64;
  std::size_t d_k = 32;
  std::size_t mixer_depth = 1;
  NoteStrategy strategy;
  FusionMode fusion = FusionMode::attention;
  /// When set, the fusion gate psi is pinned to this value instead of the
  /// learned sigmoid (0 keeps only f_e, 1 only f_c).
  std::optional<double> gate_override;

  void validate() const;
  std::size_t state_dim() const;
};

/// Residual feature-mixing encoder: an input projection F -> d followed by
/// `depth` blocks h <- h + W2 relu(W1 h + b1) + b2 with a 2d-wide hidden layer.
class StructuredEncoder {
 public:
  StructuredEncoder() = default;
  StructuredEncoder(std::size_t n_features, std::size_t d, std::size_t depth, std::uint64_t seed);

  net::Var forward(net::Graph& g, net::Var features) const;
  std::vector<double> encode(std::span<const double> features) const;

  net::Dense& input() { return input_; }
  struct Block {
    net::Dense expand;
    net::Dense contract;
  };
  std::vector<Block>& blocks() { return blocks_; }

  void collect(net::ParamList& out);
  void collect(net::ConstParamList& out) const;

 private:
  net::Dense input_;
  std::vector<Block> blocks_;
};

/// Gate weights W (d x 2d) and bias b (d) of the context-aware fusion.
struct GateParams {
  net::Dense gate;

  GateParams() = default;
  GateParams(std::size_t d, std::uint64_t seed);
};

/// psi = sigmoid(W [f_c; f_e] + b), n = psi * f_c + (1 - psi) * f_e.
net::Var gated_fusion(net::Graph& g, net::Var context, net::Var event, const GateParams& gp,
                      std::optional<double> gate_override = std::nullopt);

/// Query/key/value projections for both attention directions plus the two
/// output maps. Query and key maps are d_k x d; value maps are d x d so that
/// the attended vector can be stacked with the d-dimensional source.
struct CrossModalParams {
  // (l,v) -> note: queries from the structured embedding, keys/values from the note.
  net::Dense query_l;
  net::Dense key_n;
  net::Dense value_n;
  // note -> (l,v): queries from the note, keys/values from the structured embedding.
  net::Dense query_n;
  net::Dense key_l;
  net::Dense value_l;
  net::Dense out_l;  // d x 2d
  net::Dense out_n;  // d x 2d
  std::size_t d_k = 0;

  CrossModalParams() = default;
  CrossModalParams(std::size_t d, std::size_t d_k, std::uint64_t seed);

  void collect(net::ParamList& out);
  void collect(net::ConstParamList& out) const;
};

struct AttentionOutput {
  net::Var state;        // [l~; n~], B x 2d
  net::Var attn_to_l;    // A for note -> (l,v)
  net::Var attn_to_n;    // A for (l,v) -> note
  net::Var weight_to_l;  // softmax weights, B x 1
  net::Var weight_to_n;
};

/// One token per modality, so each softmax runs over a single key.
AttentionOutput cross_modal_attend(net::Graph& g, net::Var note, net::Var structured,
                                   const CrossModalParams& cp);

/// Per-timestep encoder input, after note resolution.
struct StateInput {
  std::vector<double> structured;
  std::vector<double> context;  // empty unless the context strategy is active
  std::vector<double> event;
};

StateInput make_state_input(std::span<const JointObservation> history, const NoteStrategy& strategy);

/// Inputs for s_0..s_{T-1} plus the terminal next state (index T).
std::vector<StateInput> episode_state_inputs(const Episode& episode, const NoteStrategy& strategy);

/// Row-stacked encoder inputs for a batch.
struct StateBatch {
  net::Matrix structured;
  net::Matrix context;
  net::Matrix event;

  static StateBatch gather(std::span<const StateInput* const> inputs, const EncoderConfig& cfg);
};

/// Full state pipeline: structured encoder, note projection d_n -> d, gated
/// fusion (context strategy only), then the configured fusion mode.
class StateEncoder {
 public:
  StateEncoder() = default;
  StateEncoder(const EncoderConfig& cfg, std::uint64_t seed);

  net::Var encode(net::Graph& g, const StateBatch& batch) const;
  /// Same pipeline with caller-supplied leaves (used for input gradients).
  net::Var encode_vars(net::Graph& g, net::Var structured, net::Var context, net::Var event) const;
  std::vector<double> encode_one(const StateInput& input) const;

  const EncoderConfig& config() const { return cfg_; }
  EncoderConfig& mutable_config() { return cfg_; }
  StructuredEncoder& structured() { return structured_; }
  net::Dense& note_projection() { return note_proj_; }
  GateParams& gate() { return gate_; }
  CrossModalParams& attention() { return attention_; }
  const GateParams& gate() const { return gate_; }
  const CrossModalParams& attention() const { return attention_; }

  void collect(net::ParamList& out);
  void collect(net::ConstParamList& out) const;

 private:
  EncoderConfig cfg_;
  StructuredEncoder structured_;
  net::Dense note_proj_;
  GateParams gate_;
  CrossModalParams attention_;
};

}  // namespace clinrl
