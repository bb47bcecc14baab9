#include "clinrl/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace clinrl {

using net::Graph;
using net::Matrix;
using net::Var;

std::string to_string(NoteStrategyKind kind) {
  switch (kind) {
    case NoteStrategyKind::raw: return "raw";
    case NoteStrategyKind::impute: return "impute";
    case NoteStrategyKind::stack: return "stack";
    case NoteStrategyKind::context: return "context";
  }
  return "unknown";
}

NoteStrategyKind note_strategy_from_string(const std::string& name) {
  if (name == "raw") return NoteStrategyKind::raw;
  if (name == "impute") return NoteStrategyKind::impute;
  if (name == "stack") return NoteStrategyKind::stack;
  if (name == "context") return NoteStrategyKind::context;
  throw ConfigError("unknown note strategy '" + name + "' (expected raw, impute, stack or context)");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::attention: return "attention";
    case FusionMode::concat: return "concat";
    case FusionMode::structured_only: return "structured_only";
    case FusionMode::note_only: return "note_only";
  }
  return "unknown";
}

FusionMode fusion_mode_from_string(const std::string& name) {
  if (name == "attention") return FusionMode::attention;
  if (name == "concat") return FusionMode::concat;
  if (name == "structured_only") return FusionMode::structured_only;
  if (name == "note_only") return FusionMode::note_only;
  throw ConfigError("unknown fusion mode '" + name + "'");
}

ResolvedNote resolve_note(std::span<const JointObservation> history, const NoteStrategy& strategy) {
  if (history.empty()) throw DataError("resolve_note: empty history");
  const std::size_t d_n = history.back().note_embedding.size();
  const std::size_t t = history.size() - 1;
  ResolvedNote out;
  out.event.assign(d_n, 0.0);

  auto most_recent = [&]() {
    for (std::size_t k = history.size(); k-- > 0;) {
      if (history[k].note_present) return history[k].note_embedding;
    }
    return std::vector<double>(d_n, 0.0);
  };

  switch (strategy.kind) {
    case NoteStrategyKind::raw:
      if (history[t].note_present) out.event = history[t].note_embedding;
      break;
    case NoteStrategyKind::impute:
      out.event = most_recent();
      break;
    case NoteStrategyKind::stack: {
      if (strategy.window < 1) throw ConfigError("stack window must be >= 1");
      const std::size_t w = static_cast<std::size_t>(strategy.window);
      const std::size_t first = t + 1 >= w ? t + 1 - w : 0;
      std::size_t count = 0;
      for (std::size_t k = first; k <= t; ++k) {
        if (!history[k].note_present) continue;
        for (std::size_t i = 0; i < d_n; ++i) out.event[i] += history[k].note_embedding[i];
        ++count;
      }
      if (count > 1) {
        for (auto& x : out.event) x /= static_cast<double>(count);
      }
      break;
    }
    case NoteStrategyKind::context: {
      std::vector<double> ctx(d_n, 0.0);
      for (const auto& frame : history) {
        if (frame.note_present) {
          ctx = frame.note_embedding;
          break;
        }
      }
      out.context = std::move(ctx);
      out.event = most_recent();
      break;
    }
  }
  return out;
}

void EncoderConfig::validate() const {
  if (n_features == 0) throw ConfigError("encoder.n_features must be positive");
  if (d_n == 0) throw ConfigError("encoder.d_n must be positive");
  if (d == 0) throw ConfigError("encoder.d must be positive");
  if (d_k == 0) throw ConfigError("encoder.d_k must be positive");
  if (strategy.window < 1) throw ConfigError("encoder.window must be >= 1");
  if (gate_override && (*gate_override < 0.0 || *gate_override > 1.0)) {
    throw ConfigError("encoder.gate_override must lie in [0, 1]");
  }
}

std::size_t EncoderConfig::state_dim() const {
  switch (fusion) {
    case FusionMode::attention:
    case FusionMode::concat: return 2 * d;
    case FusionMode::structured_only:
    case FusionMode::note_only: return d;
  }
  return 2 * d;
}

StructuredEncoder::StructuredEncoder(std::size_t n_features, std::size_t d, std::size_t depth,
                                     std::uint64_t seed)
    : input_("enc.structured.in", n_features, d, true, seed) {
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string name = "enc.structured.mix" + std::to_string(i);
    blocks_.push_back(Block{net::Dense(name + ".expand", d, 2 * d, true, seed),
                            net::Dense(name + ".contract", 2 * d, d, true, seed)});
  }
}

Var StructuredEncoder::forward(Graph& g, Var features) const {
  Var h = input_.forward(g, features);
  for (const auto& b : blocks_) h = net::add(h, b.contract.forward(g, net::relu(b.expand.forward(g, h))));
  return h;
}

std::vector<double> StructuredEncoder::encode(std::span<const double> features) const {
  if (features.size() != input_.in_dim()) {
    throw DataError("structured encoder expects " + std::to_string(input_.in_dim()) + " features, got " +
                    std::to_string(features.size()));
  }
  Graph g;
  Matrix x(1, static_cast<Eigen::Index>(features.size()));
  for (std::size_t i = 0; i < features.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = features[i];
  const Var y = forward(g, g.constant(std::move(x)));
  return {y.value().data(), y.value().data() + y.value().size()};
}

void StructuredEncoder::collect(net::ParamList& out) {
  input_.collect(out);
  for (auto& b : blocks_) {
    b.expand.collect(out);
    b.contract.collect(out);
  }
}

void StructuredEncoder::collect(net::ConstParamList& out) const {
  input_.collect(out);
  for (const auto& b : blocks_) {
    b.expand.collect(out);
    b.contract.collect(out);
  }
}

GateParams::GateParams(std::size_t d, std::uint64_t seed) : gate("enc.gate", 2 * d, d, true, seed) {}

namespace {

// psi * c + (1 - psi) * e, clamped to the closed interval spanned by c and e so
// rounding can never leave it. The gradient is that of the unclamped mix.
Var convex_mix(Var psi, Var context, Var event) {
  const Matrix& p = psi.value();
  const Matrix& c = context.value();
  const Matrix& e = event.value();
  Matrix out = p.cwiseProduct(c) + (1.0 - p.array()).matrix().cwiseProduct(e);
  out = out.cwiseMax(c.cwiseMin(e)).cwiseMin(c.cwiseMax(e));
  return psi.graph->record(std::move(out), {psi.id, context.id, event.id}, [](Graph& gr, int self) {
    const int pi = gr.parent(self, 0);
    const int ci = gr.parent(self, 1);
    const int ei = gr.parent(self, 2);
    const Matrix& dy = gr.grad(self);
    const Matrix& pv = gr.value(pi);
    if (gr.requires_grad(pi)) gr.accumulate(pi, dy.cwiseProduct(gr.value(ci) - gr.value(ei)));
    if (gr.requires_grad(ci)) gr.accumulate(ci, dy.cwiseProduct(pv));
    if (gr.requires_grad(ei)) gr.accumulate(ei, dy.cwiseProduct((1.0 - pv.array()).matrix()));
  });
}

}  // namespace

Var gated_fusion(Graph& g, Var context, Var event, const GateParams& gp, std::optional<double> gate_override) {
  if (context.rows() != event.rows() || context.cols() != event.cols()) {
    throw DataError("gated_fusion: context and event shapes differ");
  }
  if (static_cast<std::size_t>(context.cols()) != gp.gate.out_dim()) {
    throw DataError("gated_fusion: inputs have width " + std::to_string(context.cols()) + ", gate expects " +
                    std::to_string(gp.gate.out_dim()));
  }
  Var psi;
  if (gate_override) {
    psi = g.constant(Matrix::Constant(context.rows(), context.cols(), *gate_override));
  } else {
    psi = net::sigmoid(gp.gate.forward(g, net::concat_cols(context, event)));
  }
  return convex_mix(psi, context, event);
}

CrossModalParams::CrossModalParams(std::size_t d, std::size_t dk, std::uint64_t seed)
    : query_l("enc.attn.query_l", d, dk, false, seed),
      key_n("enc.attn.key_n", d, dk, false, seed),
      value_n("enc.attn.value_n", d, d, false, seed),
      query_n("enc.attn.query_n", d, dk, false, seed),
      key_l("enc.attn.key_l", d, dk, false, seed),
      value_l("enc.attn.value_l", d, d, false, seed),
      out_l("enc.attn.out_l", 2 * d, d, false, seed),
      out_n("enc.attn.out_n", 2 * d, d, false, seed),
      d_k(dk) {}

void CrossModalParams::collect(net::ParamList& out) {
  for (auto* l : {&query_l, &key_n, &value_n, &query_n, &key_l, &value_l, &out_l, &out_n}) l->collect(out);
}

void CrossModalParams::collect(net::ConstParamList& out) const {
  for (const auto* l : {&query_l, &key_n, &value_n, &query_n, &key_l, &value_l, &out_l, &out_n}) l->collect(out);
}

AttentionOutput cross_modal_attend(Graph& g, Var note, Var structured, const CrossModalParams& cp) {
  if (note.rows() != structured.rows() || note.cols() != structured.cols()) {
    throw DataError("cross_modal_attend: note and structured embeddings differ in shape");
  }
  if (static_cast<std::size_t>(note.cols()) != cp.value_n.in_dim()) {
    throw DataError("cross_modal_attend: embedding width does not match the projections");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cp.d_k));

  // Each direction attends over a single key, so the softmax is over a B x 1 score.
  auto attend = [&](const net::Dense& wq, Var q_src, const net::Dense& wk, const net::Dense& wv, Var kv_src) {
    const Var q = wq.forward(g, q_src);
    const Var k = wk.forward(g, kv_src);
    const Var v = wv.forward(g, kv_src);
    const Var alpha = net::softmax_rows(net::affine(net::row_dot(q, k), scale, 0.0));
    return std::pair{net::mul_col(alpha, v), alpha};
  };

  const auto [a_to_n, w_to_n] = attend(cp.query_l, structured, cp.key_n, cp.value_n, note);
  const auto [a_to_l, w_to_l] = attend(cp.query_n, note, cp.key_l, cp.value_l, structured);
  const Var l_tilde = cp.out_l.forward(g, net::concat_cols(structured, a_to_l));
  const Var n_tilde = cp.out_n.forward(g, net::concat_cols(note, a_to_n));
  return AttentionOutput{net::concat_cols(l_tilde, n_tilde), a_to_l, a_to_n, w_to_l, w_to_n};
}

StateInput make_state_input(std::span<const JointObservation> history, const NoteStrategy& strategy) {
  ResolvedNote r = resolve_note(history, strategy);
  StateInput in;
  in.structured = history.back().structured;
  if (r.context) in.context = std::move(*r.context);
  in.event = std::move(r.event);
  return in;
}

std::vector<StateInput> episode_state_inputs(const Episode& episode, const NoteStrategy& strategy) {
  std::vector<JointObservation> frames;
  frames.reserve(episode.length() + 1);
  for (const auto& tr : episode.transitions) frames.push_back(tr.obs);
  if (!episode.transitions.empty()) frames.push_back(episode.transitions.back().next_obs);
  std::vector<StateInput> out;
  out.reserve(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    out.push_back(make_state_input(std::span<const JointObservation>(frames.data(), t + 1), strategy));
  }
  return out;
}

StateBatch StateBatch::gather(std::span<const StateInput* const> inputs, const EncoderConfig& cfg) {
  const auto rows = static_cast<Eigen::Index>(inputs.size());
  StateBatch b;
  b.structured.resize(rows, static_cast<Eigen::Index>(cfg.n_features));
  b.event.resize(rows, static_cast<Eigen::Index>(cfg.d_n));
  const bool with_context = cfg.strategy.kind == NoteStrategyKind::context;
  if (with_context) b.context.resize(rows, static_cast<Eigen::Index>(cfg.d_n));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const StateInput& in = *inputs[static_cast<std::size_t>(i)];
    if (in.structured.size() != cfg.n_features || in.event.size() != cfg.d_n) {
      throw DataError("state input has " + std::to_string(in.structured.size()) + " features and a " +
                      std::to_string(in.event.size()) + "-dim note; encoder expects " +
                      std::to_string(cfg.n_features) + " and " + std::to_string(cfg.d_n));
    }
    b.structured.row(i) = Eigen::Map<const Eigen::RowVectorXd>(in.structured.data(), in.structured.size());
    b.event.row(i) = Eigen::Map<const Eigen::RowVectorXd>(in.event.data(), in.event.size());
    if (with_context) {
      if (in.context.size() != cfg.d_n) throw DataError("state input is missing its context note");
      b.context.row(i) = Eigen::Map<const Eigen::RowVectorXd>(in.context.data(), in.context.size());
    }
  }
  return b;
}

StateEncoder::StateEncoder(const EncoderConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      structured_(cfg.n_features, cfg.d, cfg.mixer_depth, seed),
      note_proj_("enc.note.proj", cfg.d_n, cfg.d, true, seed),
      gate_(cfg.d, seed),
      attention_(cfg.d, cfg.d_k, seed) {
  cfg_.validate();
}

Var StateEncoder::encode(Graph& g, const StateBatch& batch) const {
  const Var s = g.constant(batch.structured);
  const Var e = g.constant(batch.event);
  const Var c = cfg_.strategy.kind == NoteStrategyKind::context ? g.constant(batch.context) : Var{};
  return encode_vars(g, s, c, e);
}

Var StateEncoder::encode_vars(Graph& g, Var structured, Var context, Var event) const {
  const Var l = structured_.forward(g, structured);
  Var n = note_proj_.forward(g, event);
  if (cfg_.strategy.kind == NoteStrategyKind::context) {
    if (context.graph == nullptr) throw DataError("context strategy requires a context note input");
    n = gated_fusion(g, note_proj_.forward(g, context), n, gate_, cfg_.gate_override);
  }
  switch (cfg_.fusion) {
    case FusionMode::attention: return cross_modal_attend(g, n, l, attention_).state;
    case FusionMode::concat: return net::concat_cols(l, n);
    case FusionMode::structured_only: return l;
    case FusionMode::note_only: return n;
  }
  return l;
}

std::vector<double> StateEncoder::encode_one(const StateInput& input) const {
  const StateInput* ptr = &input;
  const StateBatch b = StateBatch::gather(std::span<const StateInput* const>(&ptr, 1), cfg_);
  Graph g;
  const Var s = encode(g, b);
  return {s.value().data(), s.value().data() + s.value().size()};
}

void StateEncoder::collect(net::ParamList& out) {
  structured_.collect(out);
  note_proj_.collect(out);
  if (cfg_.strategy.kind == NoteStrategyKind::context) gate_.gate.collect(out);
  if (cfg_.fusion == FusionMode::attention) attention_.collect(out);
}

void StateEncoder::collect(net::ConstParamList& out) const {
  structured_.collect(out);
  note_proj_.collect(out);
  if (cfg_.strategy.kind == NoteStrategyKind::context) gate_.gate.collect(out);
  if (cfg_.fusion == FusionMode::attention) attention_.collect(out);
}

}  // namespace clinrl
