#include "clinrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <utility>

#include "clinrl/jsonio.hpp"

namespace clinrl {

using net::Graph;
using net::Matrix;
using net::Var;
using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 1024;

}  // namespace

std::string to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::dqn: return "dqn";
    case Algorithm::cql: return "cql";
    case Algorithm::bcq: return "bcq";
  }
  return "unknown";
}

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "dqn") return Algorithm::dqn;
  if (name == "cql") return Algorithm::cql;
  if (name == "bcq") return Algorithm::bcq;
  throw ConfigError("unknown algorithm '" + name + "' (expected dqn, cql or bcq)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("train.gamma must lie in [0, 1)");
  if (!(cql_alpha >= 0.0)) throw ConfigError("train.cql_alpha must be >= 0");
  if (!(bcq_threshold >= 0.0 && bcq_threshold <= 1.0)) throw ConfigError("train.bcq_threshold must lie in [0, 1]");
  if (target_update_interval < 1) throw ConfigError("train.target_update_interval must be >= 1");
  if (!(soft_target_rate >= 0.0 && soft_target_rate <= 1.0)) {
    throw ConfigError("train.soft_target_rate must lie in [0, 1]");
  }
  if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
  if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
  if (hidden == 0) throw ConfigError("train.hidden must be positive");
  if (n_layers == 0) throw ConfigError("train.n_layers must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"gamma", c.gamma},
          {"cql_alpha", c.cql_alpha},
          {"bcq_threshold", c.bcq_threshold},
          {"target_update_interval", c.target_update_interval},
          {"soft_target_rate", c.soft_target_rate},
          {"total_steps", c.total_steps},
          {"seed", c.seed},
          {"algorithm", to_string(c.algorithm)},
          {"eval_interval", c.eval_interval},
          {"hidden", c.hidden},
          {"n_layers", c.n_layers},
          {"grad_clip", c.grad_clip},
          {"freeze_encoders", c.freeze_encoders}};
}

TrainConfig train_config_from_json(const json& j) {
  JsonReader r(j, "train");
  TrainConfig c;
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.learning_rate = r.get<double>("learning_rate", c.learning_rate);
  c.gamma = r.get<double>("gamma", c.gamma);
  c.cql_alpha = r.get<double>("cql_alpha", c.cql_alpha);
  c.bcq_threshold = r.get<double>("bcq_threshold", c.bcq_threshold);
  c.target_update_interval = r.get<long>("target_update_interval", c.target_update_interval);
  c.soft_target_rate = r.get<double>("soft_target_rate", c.soft_target_rate);
  c.total_steps = r.get<long>("total_steps", c.total_steps);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.algorithm = algorithm_from_string(r.get<std::string>("algorithm", to_string(c.algorithm)));
  c.eval_interval = r.get<long>("eval_interval", c.eval_interval);
  c.hidden = r.get<std::size_t>("hidden", c.hidden);
  c.n_layers = r.get<std::size_t>("n_layers", c.n_layers);
  c.grad_clip = r.get<double>("grad_clip", c.grad_clip);
  c.freeze_encoders = r.get<bool>("freeze_encoders", c.freeze_encoders);
  r.finish();
  c.validate();
  return c;
}

json to_json(const EncoderConfig& c) {
  json j = {{"n_features", c.n_features},
            {"d_n", c.d_n},
            {"d", c.d},
            {"d_k", c.d_k},
            {"mixer_depth", c.mixer_depth},
            {"strategy", to_string(c.strategy.kind)},
            {"window", c.strategy.window},
            {"fusion", to_string(c.fusion)}};
  j["gate_override"] = c.gate_override ? json(*c.gate_override) : json(nullptr);
  return j;
}

EncoderConfig encoder_config_from_json(const json& j) {
  JsonReader r(j, "encoder");
  EncoderConfig c;
  c.n_features = r.get<std::size_t>("n_features", c.n_features);
  c.d_n = r.get<std::size_t>("d_n", c.d_n);
  c.d = r.get<std::size_t>("d", c.d);
  c.d_k = r.get<std::size_t>("d_k", c.d_k);
  c.mixer_depth = r.get<std::size_t>("mixer_depth", c.mixer_depth);
  c.strategy.kind = note_strategy_from_string(r.get<std::string>("strategy", to_string(c.strategy.kind)));
  c.strategy.window = r.get<int>("window", c.strategy.window);
  c.fusion = fusion_mode_from_string(r.get<std::string>("fusion", to_string(c.fusion)));
  const bool has_override = r.has("gate_override");
  const double override_value = r.get<double>("gate_override", 0.0);
  if (has_override) c.gate_override = override_value;
  r.finish();
  c.validate();
  return c;
}

double dqn_target(double reward, bool done, double gamma, const ActionValues& next_target_q) {
  if (done) return reward;
  return reward + gamma * *std::max_element(next_target_q.begin(), next_target_q.end());
}

int bcq_constrained_argmax(const ActionValues& q, const ActionValues& behavior_probs, double tau) {
  const double pmax = *std::max_element(behavior_probs.begin(), behavior_probs.end());
  if (!(pmax > 0.0)) throw DataError("behavior probabilities must have a positive maximum");
  int best = -1;
  for (int a = 0; a < kNumActions; ++a) {
    if (behavior_probs[a] / pmax < tau) continue;
    if (best < 0 || q[a] > q[best]) best = a;
  }
  return best;
}

Var dqn_loss(Var q, std::span<const int> actions, std::span<const double> targets) {
  const Var taken = net::gather(q, actions);
  Matrix y(static_cast<Eigen::Index>(targets.size()), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) y(static_cast<Eigen::Index>(i), 0) = targets[i];
  return net::affine(net::mean(net::square(net::sub(taken, q.graph->constant(std::move(y))))), 0.5, 0.0);
}

LossTerms cql_loss(Var q, std::span<const int> actions, std::span<const double> targets, double alpha) {
  LossTerms t;
  t.td = dqn_loss(q, actions, targets);
  t.q_taken = net::gather(q, actions);
  t.reg = net::sub(net::mean(net::logsumexp_rows(q)), net::mean(t.q_taken));
  t.loss = net::add(t.td, net::affine(t.reg, alpha, 0.0));
  return t;
}

PolicyModel::PolicyModel(const EncoderConfig& enc, const TrainConfig& train, std::uint64_t seed)
    : encoder_(enc, seed),
      q_("q", net::DuelingConfig{enc.state_dim(), train.hidden, train.n_layers, kNumActions}, seed),
      has_imitation_(train.algorithm == Algorithm::bcq),
      algorithm_(train.algorithm),
      bcq_threshold_(train.bcq_threshold),
      hidden_(train.hidden),
      n_layers_(train.n_layers),
      seed_(seed) {
  if (has_imitation_) imitation_ = net::Mlp("imitation", enc.state_dim(), {train.hidden}, kNumActions, seed);
}

PolicyModel::Forward PolicyModel::forward(Graph& g, const StateBatch& batch) const {
  Forward f;
  f.state = encoder_.encode(g, batch);
  f.q = q_.forward(g, f.state);
  if (has_imitation_) f.imitation_logits = imitation_.forward(g, f.state);
  return f;
}

namespace {

ActionValues row_of(const Matrix& m, Eigen::Index i) {
  ActionValues out{};
  for (int a = 0; a < kNumActions; ++a) out[a] = m(i, a);
  return out;
}

ActionValues softmax(const ActionValues& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  ActionValues p{};
  double total = 0.0;
  for (int a = 0; a < kNumActions; ++a) {
    p[a] = std::exp(logits[a] - m);
    total += p[a];
  }
  for (auto& v : p) v /= total;
  return p;
}

}  // namespace

std::vector<ActionValues> PolicyModel::q_values(std::span<const StateInput* const> inputs) const {
  std::vector<ActionValues> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
    Graph g;
    const Forward f = forward(g, StateBatch::gather(chunk, encoder_.config()));
    for (Eigen::Index i = 0; i < f.q.rows(); ++i) out.push_back(row_of(f.q.value(), i));
  }
  return out;
}

std::vector<ActionValues> PolicyModel::behavior_probs(std::span<const StateInput* const> inputs) const {
  if (!has_imitation_) throw ConfigError("this policy has no behavior model (only BCQ policies do)");
  std::vector<ActionValues> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
    Graph g;
    const Var state = encoder_.encode(g, StateBatch::gather(chunk, encoder_.config()));
    const Var logits = imitation_.forward(g, state);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) out.push_back(softmax(row_of(logits.value(), i)));
  }
  return out;
}

std::vector<int> PolicyModel::act(std::span<const StateInput* const> inputs) const {
  std::vector<int> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
    Graph g;
    const Forward f = forward(g, StateBatch::gather(chunk, encoder_.config()));
    for (Eigen::Index i = 0; i < f.q.rows(); ++i) {
      const ActionValues q = row_of(f.q.value(), i);
      if (has_imitation_) {
        out.push_back(bcq_constrained_argmax(q, softmax(row_of(f.imitation_logits.value(), i)), bcq_threshold_));
      } else {
        out.push_back(static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin()));
      }
    }
  }
  return out;
}

ActionValues PolicyModel::q_values(const StateInput& input) const {
  const StateInput* p = &input;
  return q_values(std::span<const StateInput* const>(&p, 1)).front();
}

int PolicyModel::act(const StateInput& input) const {
  const StateInput* p = &input;
  return act(std::span<const StateInput* const>(&p, 1)).front();
}

void PolicyModel::collect(net::ParamList& out) {
  encoder_.collect(out);
  collect_heads(out);
}

void PolicyModel::collect(net::ConstParamList& out) const {
  encoder_.collect(out);
  q_.collect(out);
  if (has_imitation_) imitation_.collect(out);
}

void PolicyModel::collect_heads(net::ParamList& out) {
  q_.collect(out);
  if (has_imitation_) imitation_.collect(out);
}

json PolicyModel::checkpoint(const json& extra_meta) const {
  net::ConstParamList params;
  collect(params);
  json meta = {{"encoder", to_json(encoder_.config())},
               {"algorithm", to_string(algorithm_)},
               {"bcq_threshold", bcq_threshold_},
               {"hidden", hidden_},
               {"n_layers", n_layers_},
               {"seed", seed_}};
  if (!extra_meta.is_null()) meta["extra"] = extra_meta;
  return net::checkpoint_json(params, meta);
}

PolicyModel PolicyModel::from_checkpoint(const json& checkpoint) {
  if (!checkpoint.contains("meta")) throw DataError("checkpoint has no model metadata");
  const json& meta = checkpoint.at("meta");
  try {
    TrainConfig t;
    t.algorithm = algorithm_from_string(meta.at("algorithm").get<std::string>());
    t.bcq_threshold = meta.at("bcq_threshold").get<double>();
    t.hidden = meta.at("hidden").get<std::size_t>();
    t.n_layers = meta.at("n_layers").get<std::size_t>();
    PolicyModel m(encoder_config_from_json(meta.at("encoder")), t, meta.at("seed").get<std::uint64_t>());
    net::ParamList params;
    m.collect(params);
    net::load_checkpoint_json(checkpoint, params);
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
  }
}

TransitionTable TransitionTable::build(const OfflineDataset& dataset, const NoteStrategy& strategy) {
  TransitionTable t;
  t.dataset = &dataset;
  t.inputs.reserve(dataset.episodes.size());
  for (std::size_t e = 0; e < dataset.episodes.size(); ++e) {
    const auto& ep = dataset.episodes[e];
    t.inputs.push_back(episode_state_inputs(ep, strategy));
    for (std::size_t s = 0; s < ep.length(); ++s) {
      t.refs.push_back(Ref{static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(s)});
    }
  }
  return t;
}

json TrainLogEntry::to_json() const {
  return {{"step", step},
          {"loss", loss},
          {"mean_q", mean_q},
          {"reg_term", reg_term},
          {"fqe_val", fqe_val ? json(*fqe_val) : json(nullptr)}};
}

TrainResult train(const OfflineDataset& dataset, const EncoderConfig& enc, const TrainConfig& cfg,
                  const EvalHook& hook) {
  cfg.validate();
  enc.validate();
  if (dataset.n_features != enc.n_features || dataset.d_n != enc.d_n) {
    throw ConfigError("encoder dimensions (" + std::to_string(enc.n_features) + ", " + std::to_string(enc.d_n) +
                      ") do not match the dataset (" + std::to_string(dataset.n_features) + ", " +
                      std::to_string(dataset.d_n) + ")");
  }
  const OfflineDataset train_split = dataset.subset(Split::train);
  const TransitionTable table = TransitionTable::build(train_split, enc.strategy);
  if (table.refs.empty()) throw DataError("training split has no transitions");

  TrainResult result;
  PolicyModel model(enc, cfg, cfg.seed);
  PolicyModel target = model;
  net::ParamList params;
  if (cfg.freeze_encoders) {
    model.collect_heads(params);
  } else {
    model.collect(params);
  }
  net::ParamList encoder_params;
  model.encoder().collect(encoder_params);
  net::ParamList target_params;
  target.collect(target_params);
  net::ConstParamList online_params;
  std::as_const(model).collect(online_params);

  net::Adam opt(params, net::AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.grad_clip});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xba7c4ULL));
  std::uniform_int_distribution<std::size_t> pick(0, table.refs.size() - 1);
  const double alpha = cfg.algorithm == Algorithm::cql ? cfg.cql_alpha : 0.0;
  const std::size_t B = cfg.batch_size;

  std::vector<const StateInput*> s_in(B), s_next(B);
  std::vector<int> actions(B);
  std::vector<double> targets(B);
  std::vector<const Transition*> trs(B);
  double sum_loss = 0.0, sum_q = 0.0, sum_reg = 0.0;
  long count = 0;
  auto last_good = std::make_shared<const PolicyModel>(model);

  for (long step = 1; step <= cfg.total_steps; ++step) {
    for (std::size_t i = 0; i < B; ++i) {
      const auto& ref = table.refs[pick(rng)];
      trs[i] = &table.transition(ref);
      s_in[i] = &table.state(ref);
      s_next[i] = &table.next_state(ref);
      actions[i] = trs[i]->action.flat();
    }
    const StateBatch next_batch = StateBatch::gather(s_next, enc);
    Matrix q_next_target;
    {
      Graph tg;
      q_next_target = target.forward(tg, next_batch).q.value();
    }
    Matrix q_next_online, logits_next;
    if (cfg.algorithm == Algorithm::bcq) {
      Graph og;
      const auto f = model.forward(og, next_batch);
      q_next_online = f.q.value();
      logits_next = f.imitation_logits.value();
    }
    for (std::size_t i = 0; i < B; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      if (cfg.algorithm == Algorithm::bcq) {
        const int a = bcq_constrained_argmax(row_of(q_next_online, row), softmax(row_of(logits_next, row)),
                                             cfg.bcq_threshold);
        targets[i] = trs[i]->done ? trs[i]->reward : trs[i]->reward + cfg.gamma * q_next_target(row, a);
      } else {
        targets[i] = dqn_target(trs[i]->reward, trs[i]->done, cfg.gamma, row_of(q_next_target, row));
      }
    }

    Graph g;
    const auto f = model.forward(g, StateBatch::gather(s_in, enc));
    const LossTerms terms = cql_loss(f.q, actions, targets, alpha);
    Var loss = terms.loss;
    if (cfg.algorithm == Algorithm::bcq) {
      const Var ce = net::sub(net::mean(net::logsumexp_rows(f.imitation_logits)),
                              net::mean(net::gather(f.imitation_logits, actions)));
      loss = net::add(loss, ce);
    }
    const double loss_value = loss.value()(0, 0);
    if (!std::isfinite(loss_value)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss " << loss_value << " (td "
          << terms.td.value()(0, 0) << ", reg " << terms.reg.value()(0, 0) << ", mean |y| "
          << Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(B)).cwiseAbs().mean()
          << ")";
      throw TrainingDiverged(msg.str(), last_good, step);
    }
    g.backward(loss);
    if (cfg.freeze_encoders) net::zero_grad(encoder_params);
    try {
      opt.step();
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(),
                             last_good, step);
    }

    if (cfg.soft_target_rate > 0.0) {
      net::soft_update(online_params, target_params, cfg.soft_target_rate);
    } else if (step % cfg.target_update_interval == 0) {
      net::copy_values(online_params, target_params);
    }

    sum_loss += loss_value;
    sum_q += terms.q_taken.value().mean();
    sum_reg += terms.reg.value()(0, 0);
    ++count;
    if (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
      TrainLogEntry entry;
      entry.step = step;
      entry.loss = sum_loss / static_cast<double>(count);
      entry.mean_q = sum_q / static_cast<double>(count);
      entry.reg_term = sum_reg / static_cast<double>(count);
      if (hook) {
        entry.fqe_val = hook(model);
        if (!result.best_score || *entry.fqe_val > *result.best_score) {
          result.best_score = entry.fqe_val;
          result.best_model = model;
        }
      }
      result.log.push_back(entry);
      sum_loss = sum_q = sum_reg = 0.0;
      count = 0;
      last_good = std::make_shared<const PolicyModel>(model);
    }
  }
  result.model = std::move(model);
  return result;
}

json ResidualSummary::to_json(bool include_samples) const {
  json j = {{"count", samples.size()}, {"mean", mean}, {"std", stddev}, {"bin_edges", bin_edges}, {"counts", counts}};
  if (include_samples) j["samples"] = samples;
  return j;
}

ResidualSummary summarize_residuals(std::vector<double> samples, std::size_t n_bins) {
  if (n_bins == 0) throw ConfigError("histogram needs at least one bin");
  ResidualSummary r;
  r.samples = std::move(samples);
  if (r.samples.empty()) return r;
  const auto n = static_cast<double>(r.samples.size());
  for (double v : r.samples) r.mean += v;
  r.mean /= n;
  for (double v : r.samples) r.stddev += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(r.stddev / n);
  auto [lo_it, hi_it] = std::minmax_element(r.samples.begin(), r.samples.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(n_bins);
  r.bin_edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) r.bin_edges[b] = lo + width * static_cast<double>(b);
  r.bin_edges.back() = hi;
  r.counts.assign(n_bins, 0);
  for (double v : r.samples) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    r.counts[std::min(b, n_bins - 1)]++;
  }
  return r;
}

ResidualSummary bellman_residuals(const PolicyModel& model, const OfflineDataset& dataset, double gamma,
                                  std::size_t n_bins) {
  const TransitionTable table = TransitionTable::build(dataset, model.encoder_config().strategy);
  std::vector<const StateInput*> s, s2;
  s.reserve(table.refs.size());
  s2.reserve(table.refs.size());
  for (const auto& ref : table.refs) {
    s.push_back(&table.state(ref));
    s2.push_back(&table.next_state(ref));
  }
  std::vector<const Transition*> trs;
  for (const auto& ref : table.refs) trs.push_back(&table.transition(ref));
  return summarize_residuals(bellman_residual_values(model.q_values(s), model.q_values(s2), trs, gamma), n_bins);
}

std::vector<double> bellman_residual_values(std::span<const ActionValues> q, std::span<const ActionValues> q_next,
                                            std::span<const Transition* const> transitions, double gamma) {
  if (q.size() != transitions.size() || q_next.size() != transitions.size()) {
    throw DataError("residual inputs have mismatched lengths");
  }
  std::vector<double> res(transitions.size());
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const Transition& tr = *transitions[i];
    res[i] = q[i][tr.action.flat()] - dqn_target(tr.reward, tr.done, gamma, q_next[i]);
  }
  return res;
}

std::vector<int> tabular_actions(const PolicyModel& model, const TabularMDP& mdp,
                                 const std::optional<FeatureStats>& stats) {
  std::vector<StateInput> inputs;
  inputs.reserve(static_cast<std::size_t>(mdp.n_states));
  for (int s = 0; s < mdp.n_states; ++s) {
    const auto history = canonical_history(mdp, s, stats);
    inputs.push_back(make_state_input(history, model.encoder_config().strategy));
  }
  std::vector<const StateInput*> ptrs;
  for (const auto& in : inputs) ptrs.push_back(&in);
  return model.act(ptrs);
}

}  // namespace clinrl
