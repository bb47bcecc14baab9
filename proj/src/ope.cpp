#include "clinrl/ope.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

namespace clinrl {

using net::Graph;
using net::Matrix;
using net::Var;
using nlohmann::json;

namespace {

int state_of(const Transition& tr, const std::string& episode_id) {
  if (!tr.state_id) throw DataError("episode " + episode_id + " has no latent state ids (tabular evaluation needs them)");
  return *tr.state_id;
}

int next_state_of(const Transition& tr, const std::string& episode_id) {
  if (!tr.next_state_id) {
    throw DataError("episode " + episode_id + " has no latent state ids (tabular evaluation needs them)");
  }
  return *tr.next_state_id;
}

template <class Row>
StepTable tabulate_by_state(const std::vector<Row>& rows, const OfflineDataset& dataset) {
  StepTable t;
  t.rows.reserve(dataset.episodes.size());
  for (const auto& ep : dataset.episodes) {
    std::vector<ActionValues> r;
    r.reserve(ep.length() + 1);
    for (const auto& tr : ep.transitions) {
      const int s = state_of(tr, ep.episode_id);
      if (s < 0 || static_cast<std::size_t>(s) >= rows.size()) throw DataError("state id outside the table");
      r.push_back(rows[s]);
    }
    const int last = next_state_of(ep.transitions.back(), ep.episode_id);
    if (last < 0 || static_cast<std::size_t>(last) >= rows.size()) throw DataError("state id outside the table");
    r.push_back(rows[last]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

double weight_of(const EpisodeCounts* counts, std::size_t i) { return counts ? (*counts)[i] : 1.0; }

double expected(const ActionValues& p, const ActionValues& q) {
  double v = 0.0;
  for (int a = 0; a < kNumActions; ++a) v += p[a] * q[a];
  return v;
}

void check_aligned(const OfflineDataset& ds, const StepTable& t, const char* what) {
  if (t.rows.size() != ds.episodes.size()) throw DataError(std::string(what) + " is not aligned with the dataset");
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.rows[i].size() != ds.episodes[i].length() + 1) {
      throw DataError(std::string(what) + " has the wrong length for episode " + ds.episodes[i].episode_id);
    }
  }
}

void check_behavior(const OfflineDataset& ds, const BehaviorModel& b) {
  if (b.taken.size() != ds.episodes.size()) throw DataError("behavior model is not aligned with the dataset");
  for (std::size_t i = 0; i < b.taken.size(); ++i) {
    if (b.taken[i].size() != ds.episodes[i].length()) throw DataError("behavior model length mismatch");
    for (std::size_t t = 0; t < b.taken[i].size(); ++t) {
      if (!(b.taken[i][t] > 0.0)) {
        throw DataError("zero behavior probability for the logged action in episode " + ds.episodes[i].episode_id +
                        " step " + std::to_string(t) + " (importance weights need full support)");
      }
    }
  }
}

Matrix encode_inputs(std::span<const StateInput* const> inputs, std::size_t n_features, std::size_t d_n) {
  Matrix x(static_cast<Eigen::Index>(inputs.size()), static_cast<Eigen::Index>(n_features + d_n));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = *inputs[i];
    if (in.structured.size() != n_features || in.event.size() != d_n) throw DataError("input dimension mismatch");
    const auto row = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < n_features; ++k) x(row, static_cast<Eigen::Index>(k)) = in.structured[k];
    for (std::size_t k = 0; k < d_n; ++k) x(row, static_cast<Eigen::Index>(n_features + k)) = in.event[k];
  }
  return x;
}

const NoteStrategy kImpute{NoteStrategyKind::impute, 1};

}  // namespace

StepTable tabulate_policy(const StatePolicy& policy, const OfflineDataset& dataset) {
  return tabulate_by_state(policy, dataset);
}

StepTable tabulate_q(const std::vector<ActionValues>& q, const OfflineDataset& dataset) {
  return tabulate_by_state(q, dataset);
}

StepTable tabulate_policy(const PolicyModel& model, const OfflineDataset& dataset, double epsilon_soft) {
  if (!(epsilon_soft >= 0.0 && epsilon_soft <= 1.0)) throw ConfigError("epsilon_soft must lie in [0, 1]");
  std::vector<std::vector<StateInput>> inputs;
  std::vector<const StateInput*> flat;
  inputs.reserve(dataset.episodes.size());
  for (const auto& ep : dataset.episodes) inputs.push_back(episode_state_inputs(ep, model.encoder_config().strategy));
  for (const auto& ep : inputs) {
    for (const auto& in : ep) flat.push_back(&in);
  }
  const auto actions = model.act(flat);
  StepTable t;
  std::size_t k = 0;
  for (const auto& ep : inputs) {
    std::vector<ActionValues> rows(ep.size());
    for (auto& r : rows) {
      r.fill(epsilon_soft / kNumActions);
      r[actions[k++]] += 1.0 - epsilon_soft;
    }
    t.rows.push_back(std::move(rows));
  }
  return t;
}

BehaviorModel BehaviorModel::from_logged(const OfflineDataset& dataset) {
  BehaviorModel b;
  for (const auto& ep : dataset.episodes) {
    std::vector<double> row;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const auto& p = ep.transitions[t].behavior_prob;
      if (!p) {
        throw DataError("episode " + ep.episode_id + " step " + std::to_string(t) +
                        " has no logged behavior probability; fit a behavior model instead");
      }
      row.push_back(*p);
    }
    b.taken.push_back(std::move(row));
  }
  return b;
}

BehaviorModel BehaviorModel::from_table(const StepTable& table, const OfflineDataset& dataset) {
  check_aligned(dataset, table, "behavior table");
  BehaviorModel b;
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    const auto& ep = dataset.episodes[i];
    std::vector<double> row;
    for (std::size_t t = 0; t < ep.length(); ++t) row.push_back(table.at(i, t)[ep.transitions[t].action.flat()]);
    b.taken.push_back(std::move(row));
  }
  return b;
}

BehaviorClassifier::BehaviorClassifier(std::size_t n_features, std::size_t d_n, const BehaviorFitConfig& cfg)
    : net_("behavior", n_features + d_n, {cfg.hidden}, kNumActions, cfg.seed),
      floor_(cfg.floor),
      n_features_(n_features),
      d_n_(d_n) {
  if (!(cfg.floor > 0.0 && cfg.floor * kNumActions < 1.0)) throw ConfigError("behavior floor must lie in (0, 1/25)");
}

std::vector<ActionValues> BehaviorClassifier::probs(std::span<const StateInput* const> inputs) const {
  std::vector<ActionValues> out;
  out.reserve(inputs.size());
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
    Graph g;
    const Var p = net::softmax_rows(net_.forward(g, g.constant(encode_inputs(chunk, n_features_, d_n_))));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      ActionValues row{};
      for (int a = 0; a < kNumActions; ++a) row[a] = floor_ + (1.0 - kNumActions * floor_) * p.value()(i, a);
      out.push_back(row);
    }
  }
  return out;
}

BehaviorClassifier fit_behavior(const OfflineDataset& dataset, const BehaviorFitConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) {
    throw ConfigError("invalid behavior fitting configuration");
  }
  const OfflineDataset train = dataset.subset(Split::train);
  const TransitionTable table = TransitionTable::build(train, kImpute);
  if (table.refs.empty()) throw DataError("cannot fit a behavior model on an empty training split");
  BehaviorClassifier model(dataset.n_features, dataset.d_n, cfg);
  net::ParamList params;
  model.net_.collect(params);
  net::Adam opt(params, net::AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xbe4a71ULL));
  std::uniform_int_distribution<std::size_t> pick(0, table.refs.size() - 1);
  std::vector<const StateInput*> batch(cfg.batch_size);
  std::vector<int> actions(cfg.batch_size);
  for (long step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const auto& ref = table.refs[pick(rng)];
      batch[i] = &table.state(ref);
      actions[i] = table.transition(ref).action.flat();
    }
    Graph g;
    const Var logits = model.net_.forward(g, g.constant(encode_inputs(batch, model.n_features_, model.d_n_)));
    const Var loss = net::sub(net::mean(net::logsumexp_rows(logits)), net::mean(net::gather(logits, actions)));
    if (!std::isfinite(loss.value()(0, 0))) throw NumericError("behavior model training diverged");
    g.backward(loss);
    opt.step();
  }
  return model;
}

StepTable tabulate_behavior(const BehaviorClassifier& model, const OfflineDataset& dataset) {
  std::vector<std::vector<StateInput>> inputs;
  std::vector<const StateInput*> flat;
  for (const auto& ep : dataset.episodes) inputs.push_back(episode_state_inputs(ep, kImpute));
  for (const auto& ep : inputs) {
    for (const auto& in : ep) flat.push_back(&in);
  }
  const auto p = model.probs(flat);
  StepTable t;
  std::size_t k = 0;
  for (const auto& ep : inputs) {
    std::vector<ActionValues> rows(p.begin() + static_cast<long>(k), p.begin() + static_cast<long>(k + ep.size()));
    k += ep.size();
    t.rows.push_back(std::move(rows));
  }
  return t;
}

double discounted_return(const Episode& episode, double gamma) {
  double g = 0.0, disc = 1.0;
  for (const auto& tr : episode.transitions) {
    g += disc * tr.reward;
    disc *= gamma;
  }
  return g;
}

WisResult wis(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior, double gamma,
              const WisConfig& cfg, const EpisodeCounts* counts) {
  check_aligned(dataset, policy, "target policy table");
  check_behavior(dataset, behavior);
  const std::size_t n = dataset.episodes.size();
  if (n == 0) throw DataError("WIS needs at least one episode");
  WisResult r;
  r.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ep = dataset.episodes[i];
    double w = 1.0;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      w *= policy.at(i, t)[ep.transitions[t].action.flat()] / behavior.taken[i][t];
    }
    r.weights[i] = w;
  }
  if (cfg.clip_percentile) {
    std::vector<double> sorted = r.weights;
    std::sort(sorted.begin(), sorted.end());
    const double cap = percentile_sorted(sorted, *cfg.clip_percentile);
    for (auto& w : r.weights) w = std::min(w, cap);
  }
  double num = 0.0, den = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = weight_of(counts, i);
    num += c * r.weights[i] * discounted_return(dataset.episodes[i], gamma);
    den += c * r.weights[i];
    sq += c * r.weights[i] * r.weights[i];
  }
  if (!(den > 0.0)) throw NumericError("all importance weights are zero; the target policy never takes the logged actions");
  r.estimate = num / den;
  r.ess = den * den / sq;
  return r;
}

double doubly_robust(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior,
                     const StepTable& q_hat, double gamma, const EpisodeCounts* counts) {
  check_aligned(dataset, policy, "target policy table");
  check_aligned(dataset, q_hat, "q_hat table");
  check_behavior(dataset, behavior);
  const std::size_t n = dataset.episodes.size();
  if (n == 0) throw DataError("DR needs at least one episode");

  std::vector<std::vector<double>> cum(n);
  double full_sum = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ep = dataset.episodes[i];
    double w = 1.0;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      w *= policy.at(i, t)[ep.transitions[t].action.flat()] / behavior.taken[i][t];
      cum[i].push_back(w);
    }
    const double c = weight_of(counts, i);
    full_sum += c * w;
    total += c;
  }
  const double mean_full = full_sum / total;
  if (!(mean_full > 0.0)) throw NumericError("all importance weights are zero; the target policy never takes the logged actions");

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = weight_of(counts, i);
    if (c == 0.0) continue;
    const auto& ep = dataset.episodes[i];
    double v = expected(policy.at(i, 0), q_hat.at(i, 0));
    double disc = 1.0;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const auto& tr = ep.transitions[t];
      const double boot = tr.done ? 0.0 : gamma * expected(policy.at(i, t + 1), q_hat.at(i, t + 1));
      v += disc * (cum[i][t] / mean_full) * (tr.reward + boot - q_hat.at(i, t)[tr.action.flat()]);
      disc *= gamma;
    }
    acc += c * v;
  }
  return acc / total;
}

double direct_estimate(const OfflineDataset& dataset, const StepTable& policy, const StepTable& q_hat,
                       const EpisodeCounts* counts) {
  check_aligned(dataset, policy, "target policy table");
  check_aligned(dataset, q_hat, "q_hat table");
  double acc = 0.0, total = 0.0;
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    const double c = weight_of(counts, i);
    acc += c * expected(policy.at(i, 0), q_hat.at(i, 0));
    total += c;
  }
  if (!(total > 0.0)) throw DataError("direct estimate needs at least one episode");
  return acc / total;
}

FqeResult fqe_tabular(const OfflineDataset& dataset, const StepTable& policy, double gamma, double tol,
                      const EpisodeCounts* counts) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("FQE gamma must lie in [0, 1)");
  check_aligned(dataset, policy, "target policy table");
  int n_states = 0;
  for (const auto& ep : dataset.episodes) {
    for (const auto& tr : ep.transitions) {
      n_states = std::max({n_states, state_of(tr, ep.episode_id) + 1, next_state_of(tr, ep.episode_id) + 1});
    }
  }
  if (n_states > 80) throw ConfigError("tabular FQE supports at most 80 latent states");
  const int dim = n_states * kNumActions;
  Eigen::VectorXd count = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd reward = Eigen::VectorXd::Zero(dim);
  Eigen::MatrixXd kernel = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    const double c = weight_of(counts, i);
    if (c == 0.0) continue;
    const auto& ep = dataset.episodes[i];
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const auto& tr = ep.transitions[t];
      const int sa = *tr.state_id * kNumActions + tr.action.flat();
      count(sa) += c;
      reward(sa) += c * tr.reward;
      if (tr.done) continue;
      const auto& pi = policy.at(i, t + 1);
      const int base = *tr.next_state_id * kNumActions;
      for (int a = 0; a < kNumActions; ++a) kernel(sa, base + a) += c * pi[a];
    }
  }
  for (int sa = 0; sa < dim; ++sa) {
    if (count(sa) > 0.0) {
      reward(sa) /= count(sa);
      kernel.row(sa) *= gamma / count(sa);
    }
  }

  FqeResult r;
  Eigen::VectorXd q = Eigen::VectorXd::Zero(dim);
  for (r.iterations = 1; r.iterations <= 10'000'000; ++r.iterations) {
    Eigen::VectorXd next = reward + kernel * q;
    const double diff = (next - q).cwiseAbs().maxCoeff();
    q.swap(next);
    if (diff < tol) break;
  }
  if (r.iterations > 10'000'000) throw NumericError("tabular FQE did not converge");
  if (!q.allFinite()) throw NumericError("tabular FQE diverged");

  std::vector<ActionValues> table(static_cast<std::size_t>(n_states));
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < kNumActions; ++a) table[s][a] = q(s * kNumActions + a);
  }
  r.q = tabulate_q(table, dataset);
  double acc = 0.0, total = 0.0;
  r.initial_values.resize(dataset.episodes.size());
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    r.initial_values[i] = expected(policy.at(i, 0), r.q.at(i, 0));
    const double c = weight_of(counts, i);
    acc += c * r.initial_values[i];
    total += c;
  }
  r.estimate = acc / total;
  return r;
}

FqeResult fqe_network(const OfflineDataset& dataset, const StepTable& policy, double gamma,
                      const FqeNetConfig& cfg) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("FQE gamma must lie in [0, 1)");
  if (cfg.iterations < 1 || cfg.steps_per_iteration < 1 || cfg.batch_size == 0 || cfg.n_layers == 0) {
    throw ConfigError("invalid network FQE configuration");
  }
  check_aligned(dataset, policy, "target policy table");
  const TransitionTable table = TransitionTable::build(dataset, kImpute);
  if (table.refs.empty()) throw DataError("FQE needs at least one transition");
  const std::size_t F = dataset.n_features, D = dataset.d_n;

  std::vector<const StateInput*> flat;
  std::vector<std::size_t> offset(dataset.episodes.size());
  for (std::size_t e = 0; e < table.inputs.size(); ++e) {
    offset[e] = flat.size();
    for (const auto& in : table.inputs[e]) flat.push_back(&in);
  }
  const Matrix x_all = encode_inputs(flat, F, D);

  net::Mlp model("fqe", F + D, std::vector<std::size_t>(cfg.n_layers, cfg.hidden), kNumActions, cfg.seed);
  net::ParamList params;
  model.collect(params);
  net::Adam opt(params, net::AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xf0e0ULL));
  std::uniform_int_distribution<std::size_t> pick(0, table.refs.size() - 1);

  auto predict_all = [&](const net::Mlp& m) {
    Matrix out(x_all.rows(), kNumActions);
    constexpr Eigen::Index kChunk = 4096;
    for (Eigen::Index start = 0; start < x_all.rows(); start += kChunk) {
      const Eigen::Index len = std::min(kChunk, x_all.rows() - start);
      Graph g;
      out.middleRows(start, len) = m.forward(g, g.constant(x_all.middleRows(start, len))).value();
    }
    return out;
  };

  std::vector<double> y(table.refs.size());
  std::vector<int> actions(cfg.batch_size);
  std::vector<double> batch_y(cfg.batch_size);
  Matrix xb(static_cast<Eigen::Index>(cfg.batch_size), static_cast<Eigen::Index>(F + D));
  for (int it = 0; it < cfg.iterations; ++it) {
    const Matrix q_prev = predict_all(model);
    for (std::size_t k = 0; k < table.refs.size(); ++k) {
      const auto& ref = table.refs[k];
      const auto& tr = table.transition(ref);
      double boot = 0.0;
      if (!tr.done) {
        const auto row = static_cast<Eigen::Index>(offset[ref.episode] + ref.step + 1);
        const auto& pi = policy.at(ref.episode, ref.step + 1);
        for (int a = 0; a < kNumActions; ++a) boot += pi[a] * q_prev(row, a);
      }
      y[k] = tr.reward + gamma * boot;
    }
    for (long step = 0; step < cfg.steps_per_iteration; ++step) {
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t k = pick(rng);
        const auto& ref = table.refs[k];
        xb.row(static_cast<Eigen::Index>(i)) = x_all.row(static_cast<Eigen::Index>(offset[ref.episode] + ref.step));
        actions[i] = table.transition(ref).action.flat();
        batch_y[i] = y[k];
      }
      Graph g;
      const Var loss = dqn_loss(model.forward(g, g.constant(xb)), actions, batch_y);
      if (!std::isfinite(loss.value()(0, 0))) {
        throw NumericError("network FQE diverged at iteration " + std::to_string(it) + ", step " + std::to_string(step));
      }
      g.backward(loss);
      opt.step();
    }
  }

  const Matrix q_final = predict_all(model);
  FqeResult r;
  r.iterations = cfg.iterations;
  r.initial_values.resize(dataset.episodes.size());
  double acc = 0.0;
  for (std::size_t e = 0; e < dataset.episodes.size(); ++e) {
    std::vector<ActionValues> rows;
    for (std::size_t t = 0; t < table.inputs[e].size(); ++t) {
      ActionValues v{};
      for (int a = 0; a < kNumActions; ++a) v[a] = q_final(static_cast<Eigen::Index>(offset[e] + t), a);
      rows.push_back(v);
    }
    r.q.rows.push_back(std::move(rows));
    r.initial_values[e] = expected(policy.at(e, 0), r.q.at(e, 0));
    acc += r.initial_values[e];
  }
  r.estimate = acc / static_cast<double>(dataset.episodes.size());
  return r;
}

OperaResult opera(const std::vector<OperaInput>& estimates) {
  const std::size_t k = estimates.size();
  if (k < 2) throw ConfigError("OPERA needs at least two estimators");
  const std::size_t b = estimates.front().replicates.size();
  if (b < 2) throw ConfigError("OPERA needs at least two bootstrap replicates");
  for (const auto& e : estimates) {
    if (e.replicates.size() != b) throw ConfigError("OPERA estimators have different replicate counts");
  }
  OperaResult r;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t rep = 0; rep < b; ++rep) {
    Eigen::VectorXd dev(static_cast<Eigen::Index>(k));
    for (std::size_t j = 0; j < k; ++j) dev(static_cast<Eigen::Index>(j)) = estimates[j].replicates[rep] - estimates[j].point;
    m += dev * dev.transpose();
  }
  m /= static_cast<double>(b);
  r.mse.assign(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) r.mse[i][j] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const double top = eig.eigenvalues().maxCoeff();
  const bool singular = !(top > 0.0) || eig.eigenvalues().minCoeff() <= 1e-12 * top;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  if (!singular) {
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask < (1u << k); ++mask) {
      std::vector<Eigen::Index> idx;
      for (std::size_t j = 0; j < k; ++j) {
        if (mask & (1u << j)) idx.push_back(static_cast<Eigen::Index>(j));
      }
      const auto n = static_cast<Eigen::Index>(idx.size());
      Eigen::MatrixXd sub(n, n);
      for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index c = 0; c < n; ++c) sub(a, c) = m(idx[a], idx[c]);
      }
      const Eigen::VectorXd sol = sub.ldlt().solve(Eigen::VectorXd::Ones(n));
      const double total = sol.sum();
      if (!(total > 0.0) || (sol.array() < 0.0).any()) continue;
      Eigen::VectorXd cand = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
      for (Eigen::Index a = 0; a < n; ++a) cand(idx[a]) = sol(a) / total;
      const double obj = cand.dot(m * cand);
      if (obj < best) {
        best = obj;
        w = cand;
      }
    }
  }
  if (singular || w.sum() == 0.0) {
    r.fallback = true;
    std::vector<double> var(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      double mean = 0.0;
      for (double v : estimates[j].replicates) mean += v;
      mean /= static_cast<double>(b);
      for (double v : estimates[j].replicates) var[j] += (v - mean) * (v - mean);
      var[j] /= static_cast<double>(b - 1);
    }
    const std::size_t zero = static_cast<std::size_t>(std::count(var.begin(), var.end(), 0.0));
    for (std::size_t j = 0; j < k; ++j) {
      w(static_cast<Eigen::Index>(j)) = zero > 0 ? (var[j] == 0.0 ? 1.0 : 0.0) : 1.0 / var[j];
    }
    w /= w.sum();
  }
  r.weights.assign(w.data(), w.data() + w.size());
  for (std::size_t j = 0; j < k; ++j) r.estimate += r.weights[j] * estimates[j].point;
  return r;
}

namespace {

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

bool has_state_ids(const OfflineDataset& ds) {
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      if (!tr.state_id || !tr.next_state_id) return false;
    }
  }
  return !ds.episodes.empty();
}

}  // namespace

OpeReport evaluate_policy(const OfflineDataset& dataset, const StepTable& policy, const BehaviorModel& behavior,
                          const OpeConfig& cfg) {
  if (cfg.n_bootstrap < 2) throw ConfigError("ope.n_bootstrap must be >= 2");
  OpeReport rep;
  rep.n_episodes = static_cast<int>(dataset.episodes.size());
  rep.n_bootstrap = cfg.n_bootstrap;
  const bool tabular = cfg.tabular_fqe && has_state_ids(dataset);
  rep.fqe_mode = tabular ? "tabular" : "network";

  const WisResult w = wis(dataset, policy, behavior, cfg.gamma, cfg.wis);
  const FqeResult f = tabular ? fqe_tabular(dataset, policy, cfg.gamma) : fqe_network(dataset, policy, cfg.gamma, cfg.fqe_net);
  rep.wis = w.estimate;
  rep.ess = w.ess;
  rep.fqe = f.estimate;
  rep.dr = doubly_robust(dataset, policy, behavior, f.q, cfg.gamma);

  std::vector<double> wis_b, dr_b, fqe_b;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xb0075ULL));
  const std::size_t n = dataset.episodes.size();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  EpisodeCounts counts(n);
  for (int b = 0; b < cfg.n_bootstrap; ++b) {
    std::fill(counts.begin(), counts.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) counts[pick(rng)] += 1.0;
    wis_b.push_back(wis(dataset, policy, behavior, cfg.gamma, cfg.wis, &counts).estimate);
    dr_b.push_back(doubly_robust(dataset, policy, behavior, f.q, cfg.gamma, &counts));
    if (tabular) {
      fqe_b.push_back(fqe_tabular(dataset, policy, cfg.gamma, 1e-12, &counts).estimate);
    } else {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += counts[i] * f.initial_values[i];
      fqe_b.push_back(acc / static_cast<double>(n));
    }
  }
  rep.wis_se = sample_sd(wis_b);
  rep.dr_se = sample_sd(dr_b);
  rep.fqe_se = sample_sd(fqe_b);

  const OperaResult o = opera({{"wis", rep.wis, wis_b}, {"dr", rep.dr, dr_b}, {"fqe", rep.fqe, fqe_b}});
  rep.opera = o.estimate;
  rep.opera_weights = o.weights;
  rep.opera_fallback = o.fallback;
  std::vector<double> opera_b(wis_b.size());
  for (std::size_t b = 0; b < wis_b.size(); ++b) {
    opera_b[b] = o.weights[0] * wis_b[b] + o.weights[1] * dr_b[b] + o.weights[2] * fqe_b[b];
  }
  rep.opera_se = sample_sd(opera_b);
  return rep;
}

json OpeReport::to_json() const {
  return {{"wis", {{"estimate", wis}, {"se", wis_se}, {"ess", ess}}},
          {"dr", {{"estimate", dr}, {"se", dr_se}}},
          {"fqe", {{"estimate", fqe}, {"se", fqe_se}, {"mode", fqe_mode}}},
          {"opera",
           {{"estimate", opera},
            {"se", opera_se},
            {"weights", {{"wis", opera_weights.at(0)}, {"dr", opera_weights.at(1)}, {"fqe", opera_weights.at(2)}}},
            {"fallback", opera_fallback}}},
          {"n_episodes", n_episodes},
          {"n_bootstrap", n_bootstrap}};
}

}  // namespace clinrl
