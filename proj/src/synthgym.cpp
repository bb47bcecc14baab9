#include "clinrl/synthgym.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <tuple>

#include <Eigen/Dense>

namespace clinrl {

using nlohmann::json;

StatePolicy deterministic_policy(const std::vector<int>& actions) {
  StatePolicy pi(actions.size());
  for (std::size_t s = 0; s < actions.size(); ++s) {
    if (actions[s] < 0 || actions[s] >= kNumActions) throw ConfigError("action index out of range");
    pi[s].fill(0.0);
    pi[s][actions[s]] = 1.0;
  }
  return pi;
}

StatePolicy uniform_policy(std::size_t n_states) {
  StatePolicy pi(n_states);
  for (auto& row : pi) row.fill(1.0 / kNumActions);
  return pi;
}

TabularMDP TabularMDP::blank(int n, std::size_t n_features, std::size_t d_n) {
  if (n < 1) throw ConfigError("an MDP needs at least one state");
  TabularMDP m;
  m.n_states = n;
  const auto ns = static_cast<std::size_t>(n);
  m.transition.assign(ns * kNumActions * ns, 0.0);
  m.terminal_prob.assign(ns * kNumActions, 0.0);
  m.reward_terminal.assign(ns, 0.0);
  m.initial.assign(ns, 1.0 / static_cast<double>(n));
  m.n_features = n_features;
  m.d_n = d_n;
  m.structured_mean.assign(ns, std::vector<double>(n_features, 0.0));
  m.event_prototype.assign(ns, std::vector<double>(d_n, 0.0));
  m.context_prototype.assign(ns, std::vector<double>(d_n, 0.0));
  return m;
}

void TabularMDP::validate() const {
  const auto ns = static_cast<std::size_t>(n_states);
  if (transition.size() != ns * kNumActions * ns || terminal_prob.size() != ns * kNumActions ||
      reward_terminal.size() != ns || initial.size() != ns) {
    throw DataError("MDP tensors do not match n_states");
  }
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      double total = 0.0;
      for (int s2 = 0; s2 < n_states; ++s2) {
        const double v = p(s, a, s2);
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("transition probability outside [0,1]");
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw DataError("transition row (" + std::to_string(s) + ", " + std::to_string(a) + ") sums to " +
                        std::to_string(total));
      }
      const double t = term(s, a);
      if (!(t >= 0.0 && t <= 1.0)) throw DataError("termination probability outside [0,1]");
    }
  }
  const double init_total = std::accumulate(initial.begin(), initial.end(), 0.0);
  if (std::abs(init_total - 1.0) > 1e-9) throw DataError("initial distribution does not sum to 1");
  auto finite_rows = [](const std::vector<std::vector<double>>& rows, std::size_t width, const char* what) {
    for (const auto& r : rows) {
      if (r.size() != width) throw DataError(std::string(what) + " has the wrong width");
      for (double v : r) {
        if (!std::isfinite(v)) throw DataError(std::string(what) + " is not finite");
      }
    }
  };
  finite_rows(structured_mean, n_features, "structured emission mean");
  finite_rows(event_prototype, d_n, "event note prototype");
  finite_rows(context_prototype, d_n, "context note prototype");
  if (structured_mean.size() != ns || event_prototype.size() != ns || context_prototype.size() != ns) {
    throw DataError("emission tables do not match n_states");
  }
}

void SynthConfig::validate() const {
  if (n_severity < 1 || n_severity > kDoseLevels) throw ConfigError("synth.n_severity must lie in [1, 5]");
  if (n_context < 1 || n_context > kDoseLevels) throw ConfigError("synth.n_context must lie in [1, 5]");
  if (n_severity * n_context < 2) throw ConfigError("synth: the MDP needs at least 2 states");
  if (n_features == 0) throw ConfigError("synth.n_features must be positive");
  if (d_n == 0) throw ConfigError("synth.d_n must be positive");
  if (!(structured_noise >= 0.0)) throw ConfigError("synth.structured_noise must be >= 0");
  if (!(note_noise >= 0.0)) throw ConfigError("synth.note_noise must be >= 0");
  if (!(note_prob >= 0.0 && note_prob <= 1.0)) throw ConfigError("synth.note_prob must lie in [0, 1]");
  if (!(terminal_prob > 0.0 && terminal_prob <= 1.0)) throw ConfigError("synth.terminal_prob must lie in (0, 1]");
  if (!(transition_jitter >= 0.0)) throw ConfigError("synth.transition_jitter must be >= 0");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("synth.gamma must lie in [0, 1)");
}

namespace {

// Severity drift (down, stay, up) indexed by [iv correct][vaso correct].
constexpr std::array<std::array<std::array<double, 3>, 2>, 2> kDrift{{
    {{{0.05, 0.25, 0.70}, {0.25, 0.45, 0.30}}},
    {{{0.25, 0.45, 0.30}, {0.70, 0.25, 0.05}}},
}};

int sample_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
}

void check_policy(const TabularMDP& mdp, const StatePolicy& policy) {
  if (policy.size() != static_cast<std::size_t>(mdp.n_states)) {
    throw ConfigError("policy covers " + std::to_string(policy.size()) + " states, MDP has " +
                      std::to_string(mdp.n_states));
  }
}

// Expected reward collected if taking a in s ends the episode, weighted by the termination probability.
double terminal_payoff(const TabularMDP& mdp, int s, int a) {
  double r = 0.0;
  for (int s2 = 0; s2 < mdp.n_states; ++s2) r += mdp.p(s, a, s2) * mdp.reward_terminal[s2];
  return r * mdp.term(s, a);
}

}  // namespace

TabularMDP generate_mdp(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int S = cfg.n_severity;
  const int C = cfg.n_context;
  const std::uint64_t family = cfg.family_seed.value_or(seed);
  std::mt19937_64 fam_rng(mix_seed(family, 0x5eed0001ULL));
  std::mt19937_64 dyn_rng(mix_seed(seed, 0x5eed0002ULL));

  TabularMDP m = TabularMDP::blank(S * C, cfg.n_features, cfg.d_n);
  m.gamma = cfg.gamma;
  m.n_severity = S;
  m.n_context = C;
  m.structured_noise = cfg.structured_noise;
  m.note_noise = cfg.note_noise;
  m.note_prob = cfg.note_prob;

  std::array<int, kDoseLevels> levels{0, 1, 2, 3, 4};
  std::shuffle(levels.begin(), levels.end(), fam_rng);
  m.optimal_iv.assign(levels.begin(), levels.begin() + S);
  std::shuffle(levels.begin(), levels.end(), fam_rng);
  m.optimal_vaso.assign(levels.begin(), levels.begin() + C);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> severity_mean(S, std::vector<double>(cfg.n_features));
  for (auto& row : severity_mean) {
    for (auto& v : row) v = normal(fam_rng);
  }

  // Per (severity, pattern) next-severity distribution with seeded jitter.
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::array<std::array<std::vector<double>, 2>, 2>> drift(S);
  for (int s = 0; s < S; ++s) {
    for (int iv_ok = 0; iv_ok < 2; ++iv_ok) {
      for (int vaso_ok = 0; vaso_ok < 2; ++vaso_ok) {
        std::vector<double> row(S, 0.0);
        const auto& d = kDrift[iv_ok][vaso_ok];
        row[std::max(s - 1, 0)] += d[0];
        row[s] += d[1];
        row[std::min(s + 1, S - 1)] += d[2];
        for (auto& v : row) v += cfg.transition_jitter * unit(dyn_rng);
        const double total = std::accumulate(row.begin(), row.end(), 0.0);
        for (auto& v : row) v /= total;
        drift[s][iv_ok][vaso_ok] = std::move(row);
      }
    }
  }

  const int good_cut = (S + 1) / 2;
  for (int s = 0; s < S; ++s) {
    for (int c = 0; c < C; ++c) {
      const int state = s * C + c;
      m.reward_terminal[state] = s < good_cut ? 1.0 : -1.0;
      m.structured_mean[state] = severity_mean[s];
      m.context_prototype[state] = pseudo_embed(c, EmbedKind::context, cfg.d_n, family);
      m.event_prototype[state] = pseudo_embed(c, EmbedKind::event, cfg.d_n, family);
      for (int a = 0; a < kNumActions; ++a) {
        const ActionIndex act = ActionIndex::from_flat(a);
        const int iv_ok = act.iv_level == m.optimal_iv[s] ? 1 : 0;
        const int vaso_ok = act.vaso_level == m.optimal_vaso[c] ? 1 : 0;
        const auto& row = drift[s][iv_ok][vaso_ok];
        for (int s2 = 0; s2 < S; ++s2) m.p(state, a, s2 * C + c) = row[s2];
        m.term(state, a) = cfg.terminal_prob;
      }
    }
  }
  m.validate();

  const ModalityGap gap = certify_modality_gap(m, cfg.gamma);
  if (gap.certified && gap.delta < cfg.min_gap) {
    throw ConfigError("generated MDP has modality gap " + std::to_string(gap.delta) + " below synth.min_gap " +
                      std::to_string(cfg.min_gap));
  }
  return m;
}

void BehaviorPolicy::validate(double floor) const {
  for (std::size_t s = 0; s < probs.size(); ++s) {
    double total = 0.0;
    for (double v : probs[s]) {
      if (!(v >= floor)) throw DataError("behavior policy entry below floor in state " + std::to_string(s));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DataError("behavior policy row " + std::to_string(s) + " does not sum to 1");
  }
}

BehaviorPolicy make_behavior_policy(const TabularMDP& mdp, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("behavior epsilon must lie in (0, 1]");
  const auto best = greedy_actions(optimal_q_values(mdp, mdp.gamma));
  BehaviorPolicy b;
  b.probs.resize(best.size());
  for (std::size_t s = 0; s < best.size(); ++s) {
    b.probs[s].fill(epsilon / kNumActions);
    b.probs[s][best[s]] += 1.0 - epsilon;
  }
  return b;
}

JointObservation emit(const TabularMDP& mdp, int state, bool first_frame, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  JointObservation o;
  o.structured = mdp.structured_mean[state];
  if (mdp.structured_noise > 0.0) {
    for (auto& v : o.structured) v += mdp.structured_noise * normal(rng);
  }
  o.note_present = first_frame || unit(rng) < mdp.note_prob;
  if (o.note_present) {
    o.note_embedding = first_frame ? mdp.context_prototype[state] : mdp.event_prototype[state];
    if (mdp.note_noise > 0.0) {
      for (auto& v : o.note_embedding) v += mdp.note_noise * normal(rng);
    }
  } else {
    o.note_embedding.assign(mdp.d_n, 0.0);
  }
  return o;
}

OfflineDataset rollout(const TabularMDP& mdp, const BehaviorPolicy& policy, int n_episodes, int max_len,
                       std::uint64_t seed, SplitFractions splits) {
  if (n_episodes < 1) throw ConfigError("rollout needs at least one episode");
  if (max_len < 1) throw ConfigError("rollout max_len must be >= 1");
  if (!(splits.train >= 0.0 && splits.val >= 0.0 && splits.train + splits.val <= 1.0)) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  check_policy(mdp, policy.probs);
  std::mt19937_64 rng(mix_seed(seed, 0x0011a5eedULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  OfflineDataset ds;
  ds.n_features = mdp.n_features;
  ds.d_n = mdp.d_n;
  const auto n_train = static_cast<int>(std::llround(splits.train * n_episodes));
  const auto n_val = static_cast<int>(std::llround(splits.val * n_episodes));
  const int width = std::max(6, static_cast<int>(std::to_string(n_episodes).size()));

  std::vector<double> row(static_cast<std::size_t>(mdp.n_states));
  ds.episodes.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    Episode ep;
    std::string num = std::to_string(i);
    ep.episode_id = "ep" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
    ep.split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);

    int state = sample_index(mdp.initial, unit(rng));
    JointObservation obs = emit(mdp, state, true, rng);
    for (int t = 0; t < max_len; ++t) {
      Transition tr;
      const int a = sample_index(policy.probs[state], unit(rng));
      for (int s2 = 0; s2 < mdp.n_states; ++s2) row[s2] = mdp.p(state, a, s2);
      const int next = sample_index(row, unit(rng));
      const bool done = unit(rng) < mdp.term(state, a) || t + 1 == max_len;
      tr.action = ActionIndex::from_flat(a);
      tr.behavior_prob = policy.probs[state][a];
      tr.state_id = state;
      tr.next_state_id = next;
      tr.done = done;
      tr.reward = done ? mdp.reward_terminal[next] : 0.0;
      tr.doses.iv = tr.action.iv_level == 0 ? 0.0 : tr.action.iv_level + unit(rng);
      tr.doses.vaso = tr.action.vaso_level == 0 ? 0.0 : tr.action.vaso_level + unit(rng);
      tr.obs = std::move(obs);
      if (done) {
        tr.next_obs = tr.obs;
        ep.survived = tr.reward > 0.0;
      } else {
        tr.next_obs = emit(mdp, next, false, rng);
        obs = tr.next_obs;
      }
      ep.transitions.push_back(std::move(tr));
      state = next;
      if (done) break;
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

std::vector<JointObservation> canonical_history(const TabularMDP& mdp, int state,
                                                const std::optional<FeatureStats>& stats) {
  if (state < 0 || state >= mdp.n_states) throw ConfigError("state id out of range");
  std::vector<JointObservation> frames(2);
  for (int k = 0; k < 2; ++k) {
    frames[k].structured = mdp.structured_mean[state];
    if (stats) apply_feature_stats(frames[k].structured, *stats);
    frames[k].note_present = true;
    frames[k].note_embedding = k == 0 ? mdp.context_prototype[state] : mdp.event_prototype[state];
  }
  return frames;
}

std::vector<double> policy_state_values(const TabularMDP& mdp, const StatePolicy& policy, double gamma) {
  check_gamma(gamma);
  check_policy(mdp, policy);
  const int n = mdp.n_states;
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      const double w = policy[s][a];
      if (w == 0.0) continue;
      r(s) += w * terminal_payoff(mdp, s, a);
      const double cont = gamma * (1.0 - mdp.term(s, a));
      for (int s2 = 0; s2 < n; ++s2) A(s, s2) -= w * cont * mdp.p(s, a, s2);
    }
  }
  const Eigen::VectorXd v = A.partialPivLu().solve(r);
  return {v.data(), v.data() + v.size()};
}

std::vector<double> policy_state_values_iterative(const TabularMDP& mdp, const StatePolicy& policy, double gamma,
                                                  double tol) {
  check_gamma(gamma);
  check_policy(mdp, policy);
  const int n = mdp.n_states;
  std::vector<double> v(n, 0.0), next(n, 0.0);
  for (long iter = 0; iter < 10'000'000; ++iter) {
    double diff = 0.0;
    for (int s = 0; s < n; ++s) {
      double total = 0.0;
      for (int a = 0; a < kNumActions; ++a) {
        const double w = policy[s][a];
        if (w == 0.0) continue;
        double cont = 0.0;
        for (int s2 = 0; s2 < n; ++s2) cont += mdp.p(s, a, s2) * v[s2];
        total += w * (terminal_payoff(mdp, s, a) + gamma * (1.0 - mdp.term(s, a)) * cont);
      }
      next[s] = total;
      diff = std::max(diff, std::abs(total - v[s]));
    }
    v.swap(next);
    if (diff < tol) return v;
  }
  throw NumericError("policy evaluation by value iteration did not converge");
}

std::vector<ActionValues> policy_q_values(const TabularMDP& mdp, const StatePolicy& policy, double gamma) {
  const auto v = policy_state_values(mdp, policy, gamma);
  std::vector<ActionValues> q(static_cast<std::size_t>(mdp.n_states));
  for (int s = 0; s < mdp.n_states; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      double cont = 0.0;
      for (int s2 = 0; s2 < mdp.n_states; ++s2) cont += mdp.p(s, a, s2) * v[s2];
      q[s][a] = terminal_payoff(mdp, s, a) + gamma * (1.0 - mdp.term(s, a)) * cont;
    }
  }
  return q;
}

double exact_policy_value(const TabularMDP& mdp, const StatePolicy& policy, double gamma) {
  const auto v = policy_state_values(mdp, policy, gamma);
  double total = 0.0;
  for (int s = 0; s < mdp.n_states; ++s) total += mdp.initial[s] * v[s];
  return total;
}

std::vector<std::vector<ActionValues>> finite_horizon_q(const TabularMDP& mdp, const StatePolicy& policy,
                                                        double gamma, int horizon) {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  check_policy(mdp, policy);
  const int n = mdp.n_states;
  std::vector<std::vector<ActionValues>> q(static_cast<std::size_t>(horizon),
                                           std::vector<ActionValues>(static_cast<std::size_t>(n)));
  std::vector<double> v_next(n, 0.0);
  for (int t = horizon - 1; t >= 0; --t) {
    const bool last = t == horizon - 1;
    for (int s = 0; s < n; ++s) {
      for (int a = 0; a < kNumActions; ++a) {
        double payoff = 0.0;
        double cont = 0.0;
        for (int s2 = 0; s2 < n; ++s2) {
          payoff += mdp.p(s, a, s2) * mdp.reward_terminal[s2];
          cont += mdp.p(s, a, s2) * v_next[s2];
        }
        q[t][s][a] = last ? payoff : mdp.term(s, a) * payoff + (1.0 - mdp.term(s, a)) * gamma * cont;
      }
    }
    for (int s = 0; s < n; ++s) {
      double v = 0.0;
      for (int a = 0; a < kNumActions; ++a) v += policy[s][a] * q[t][s][a];
      v_next[s] = v;
    }
  }
  return q;
}

double finite_horizon_value(const TabularMDP& mdp, const StatePolicy& policy, double gamma, int horizon) {
  const auto q = finite_horizon_q(mdp, policy, gamma, horizon);
  double total = 0.0;
  for (int s = 0; s < mdp.n_states; ++s) {
    double v = 0.0;
    for (int a = 0; a < kNumActions; ++a) v += policy[s][a] * q[0][s][a];
    total += mdp.initial[s] * v;
  }
  return total;
}

std::vector<ActionValues> optimal_q_values(const TabularMDP& mdp, double gamma, double tol) {
  check_gamma(gamma);
  const int n = mdp.n_states;
  std::vector<ActionValues> q(static_cast<std::size_t>(n));
  for (auto& row : q) row.fill(0.0);
  std::vector<double> v(n, 0.0);
  for (long iter = 0; iter < 10'000'000; ++iter) {
    double diff = 0.0;
    for (int s = 0; s < n; ++s) {
      for (int a = 0; a < kNumActions; ++a) {
        double cont = 0.0;
        for (int s2 = 0; s2 < n; ++s2) cont += mdp.p(s, a, s2) * v[s2];
        const double updated = terminal_payoff(mdp, s, a) + gamma * (1.0 - mdp.term(s, a)) * cont;
        diff = std::max(diff, std::abs(updated - q[s][a]));
        q[s][a] = updated;
      }
    }
    for (int s = 0; s < n; ++s) v[s] = *std::max_element(q[s].begin(), q[s].end());
    if (diff < tol) return q;
  }
  throw NumericError("value iteration did not converge");
}

std::vector<int> greedy_actions(const std::vector<ActionValues>& q) {
  std::vector<int> out(q.size());
  for (std::size_t s = 0; s < q.size(); ++s) {
    out[s] = static_cast<int>(std::max_element(q[s].begin(), q[s].end()) - q[s].begin());
  }
  return out;
}

namespace {

// Best value over policies that assign one action per class, where the
// candidate actions of class k are options[k]. Dynamics depend on actions only
// through which factors are matched, so the candidates cover every
// distinguishable choice.
double best_class_policy(const TabularMDP& mdp, double gamma, const std::vector<int>& class_of_state,
                         const std::vector<std::vector<int>>& options) {
  std::vector<std::size_t> digit(options.size(), 0);
  std::vector<int> actions(static_cast<std::size_t>(mdp.n_states));
  double best = -std::numeric_limits<double>::infinity();
  while (true) {
    for (int s = 0; s < mdp.n_states; ++s) actions[s] = options[class_of_state[s]][digit[class_of_state[s]]];
    best = std::max(best, exact_policy_value(mdp, deterministic_policy(actions), gamma));
    std::size_t k = 0;
    while (k < digit.size() && ++digit[k] == options[k].size()) digit[k++] = 0;
    if (k == digit.size()) break;
  }
  return best;
}

int unused_level(const std::vector<int>& used) {
  for (int l = 0; l < kDoseLevels; ++l) {
    if (std::find(used.begin(), used.end(), l) == used.end()) return l;
  }
  return -1;
}

}  // namespace

ModalityGap certify_modality_gap(const TabularMDP& mdp, double gamma) {
  ModalityGap gap;
  gap.optimal = exact_policy_value(mdp, deterministic_policy(greedy_actions(optimal_q_values(mdp, gamma))), gamma);
  const int S = mdp.n_severity;
  const int C = mdp.n_context;
  if (S < 2 || C < 2 || mdp.n_states != S * C) {
    gap.best_structured_only = gap.optimal;
    gap.best_note_only = gap.optimal;
    return gap;
  }

  std::vector<int> by_severity(static_cast<std::size_t>(mdp.n_states));
  std::vector<int> by_context(static_cast<std::size_t>(mdp.n_states));
  for (int s = 0; s < S; ++s) {
    for (int c = 0; c < C; ++c) {
      by_severity[s * C + c] = s;
      by_context[s * C + c] = c;
    }
  }

  std::vector<int> vaso_choices = mdp.optimal_vaso;
  if (int u = unused_level(mdp.optimal_vaso); u >= 0) vaso_choices.push_back(u);
  std::vector<std::vector<int>> structured_opts(S);
  for (int s = 0; s < S; ++s) {
    for (int iv : {mdp.optimal_iv[s], (mdp.optimal_iv[s] + 1) % kDoseLevels}) {
      for (int vaso : vaso_choices) structured_opts[s].push_back(ActionIndex::from_levels(iv, vaso).flat());
    }
  }

  std::vector<int> iv_choices = mdp.optimal_iv;
  if (int u = unused_level(mdp.optimal_iv); u >= 0) iv_choices.push_back(u);
  std::vector<std::vector<int>> note_opts(C);
  for (int c = 0; c < C; ++c) {
    for (int vaso : {mdp.optimal_vaso[c], (mdp.optimal_vaso[c] + 1) % kDoseLevels}) {
      for (int iv : iv_choices) note_opts[c].push_back(ActionIndex::from_levels(iv, vaso).flat());
    }
  }

  gap.best_structured_only = best_class_policy(mdp, gamma, by_severity, structured_opts);
  gap.best_note_only = best_class_policy(mdp, gamma, by_context, note_opts);
  gap.delta = gap.optimal - std::max(gap.best_structured_only, gap.best_note_only);
  gap.certified = true;
  return gap;
}

std::vector<double> pseudo_embed(int state_id, EmbedKind kind, std::size_t d_n, std::uint64_t seed) {
  if (state_id < 0) throw ConfigError("pseudo_embed: state id must be nonnegative");
  if (d_n == 0) throw ConfigError("pseudo_embed: d_n must be positive");
  static std::mutex mu;
  static std::map<std::tuple<std::uint64_t, int, std::size_t>, std::vector<std::vector<double>>> cache;
  const int kind_tag = kind == EmbedKind::context ? 1 : 2;

  std::lock_guard<std::mutex> lock(mu);
  auto& vecs = cache[{seed, kind_tag, d_n}];
  constexpr double kMaxCos = 0.45;
  constexpr int kAttempts = 500;
  std::normal_distribution<double> normal(0.0, 1.0);
  while (vecs.size() <= static_cast<std::size_t>(state_id)) {
    const auto id = static_cast<std::uint64_t>(vecs.size());
    std::vector<double> best;
    double best_cos = std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      std::mt19937_64 rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(kind_tag)), id * 1'000'003ULL + attempt));
      std::vector<double> v(d_n);
      double norm = 0.0;
      for (auto& x : v) {
        x = normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (auto& x : v) x /= norm;
      double worst = 0.0;
      for (const auto& w : vecs) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d_n; ++i) dot += v[i] * w[i];
        worst = std::max(worst, std::abs(dot));
      }
      if (worst < best_cos) {
        best_cos = worst;
        best = std::move(v);
      }
      if (best_cos < kMaxCos) break;
    }
    vecs.push_back(std::move(best));
  }
  return vecs[static_cast<std::size_t>(state_id)];
}

json ground_truth_json(const TabularMDP& mdp, const BehaviorPolicy& behavior, double gamma, int max_len) {
  json j;
  j["n_states"] = mdp.n_states;
  j["n_actions"] = kNumActions;
  j["gamma"] = gamma;
  j["max_len"] = max_len;
  json trans = json::array();
  json term = json::array();
  for (int s = 0; s < mdp.n_states; ++s) {
    json rows = json::array();
    json trow = json::array();
    for (int a = 0; a < kNumActions; ++a) {
      std::vector<double> r(static_cast<std::size_t>(mdp.n_states));
      for (int s2 = 0; s2 < mdp.n_states; ++s2) r[s2] = mdp.p(s, a, s2);
      rows.push_back(r);
      trow.push_back(mdp.term(s, a));
    }
    trans.push_back(rows);
    term.push_back(trow);
  }
  j["transition"] = trans;
  j["terminal_prob"] = term;
  j["reward_terminal"] = mdp.reward_terminal;
  j["initial"] = mdp.initial;
  json bp = json::array();
  for (const auto& row : behavior.probs) bp.push_back(std::vector<double>(row.begin(), row.end()));
  j["behavior_probs"] = bp;
  if (mdp.n_severity > 0) {
    j["n_severity"] = mdp.n_severity;
    j["n_context"] = mdp.n_context;
    j["optimal_iv"] = mdp.optimal_iv;
    j["optimal_vaso"] = mdp.optimal_vaso;
  }
  const auto q_star = optimal_q_values(mdp, gamma);
  const auto best = greedy_actions(q_star);
  j["optimal_actions"] = best;
  j["optimal_value"] = exact_policy_value(mdp, deterministic_policy(best), gamma);
  j["behavior_value"] = exact_policy_value(mdp, behavior.probs, gamma);
  j["behavior_value_truncated"] = finite_horizon_value(mdp, behavior.probs, gamma, max_len);
  const auto gap = certify_modality_gap(mdp, gamma);
  j["modality_gap"] = {{"certified", gap.certified},
                       {"delta", gap.delta},
                       {"optimal", gap.optimal},
                       {"best_structured_only", gap.best_structured_only},
                       {"best_note_only", gap.best_note_only}};
  return j;
}

}  // namespace clinrl
