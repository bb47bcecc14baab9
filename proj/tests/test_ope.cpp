#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "clinrl/ope.hpp"
#include "support.hpp"

using namespace clinrl;
using clinrl::testing::empirical_mdp_value;
using clinrl::testing::random_mdp;
using clinrl::testing::random_policy;

namespace {

double mean_return(const OfflineDataset& ds, double gamma) {
  double s = 0.0;
  for (const auto& ep : ds.episodes) s += discounted_return(ep, gamma);
  return s / static_cast<double>(ds.episodes.size());
}

/// Three-state deterministic chain that always ends within three steps,
/// started from state 0.
TabularMDP deterministic_chain() {
  TabularMDP m = TabularMDP::blank(3, 2, 2);
  for (int a = 0; a < kNumActions; ++a) {
    m.p(0, a, a % 2 == 0 ? 1 : 2) = 1.0;
    m.p(1, a, a % 3 == 0 ? 2 : 0) = 1.0;
    m.term(1, a) = a % 3 == 0 ? 0.0 : 1.0;
    m.p(2, a, a % 4 == 0 ? 0 : 1) = 1.0;
    m.term(2, a) = 1.0;
  }
  m.reward_terminal = {1.0, -1.0, 0.5};
  m.initial = {1.0, 0.0, 0.0};
  return m;
}

/// Per-step table filled from a time-indexed state table.
StepTable step_table(const OfflineDataset& ds, const std::function<ActionValues(std::size_t t, int s)>& f) {
  StepTable t;
  for (const auto& ep : ds.episodes) {
    std::vector<ActionValues> rows;
    for (std::size_t k = 0; k < ep.length(); ++k) rows.push_back(f(k, *ep.transitions[k].state_id));
    rows.push_back(f(ep.length(), *ep.transitions.back().next_state_id));
    t.rows.push_back(rows);
  }
  return t;
}

OpeConfig quick_ope(double gamma) {
  OpeConfig c;
  c.gamma = gamma;
  c.n_bootstrap = 50;
  return c;
}

}  // namespace

TEST_CASE("WIS with the behavior policy as target has unit weights") {
  const auto m = random_mdp(4, 1);
  const BehaviorPolicy beh{random_policy(4, 2)};
  const auto ds = rollout(m, beh, 200, 10, 3);
  const auto r = wis(ds, tabulate_policy(beh.probs, ds), BehaviorModel::from_logged(ds), 0.9);
  for (double w : r.weights) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.estimate == doctest::Approx(mean_return(ds, 0.9)).epsilon(1e-12));
  CHECK(r.ess == doctest::Approx(200.0).epsilon(1e-9));
}

TEST_CASE("WIS on a single episode returns that episode's return") {
  const auto m = random_mdp(3, 4);
  const BehaviorPolicy beh{random_policy(3, 5)};
  auto ds = rollout(m, beh, 1, 10, 6);
  const auto target = random_policy(3, 7);
  const auto r = wis(ds, tabulate_policy(target, ds), BehaviorModel::from_logged(ds), 0.95);
  CHECK(r.estimate == doctest::Approx(discounted_return(ds.episodes[0], 0.95)).epsilon(1e-12));
}

TEST_CASE("WIS lies within the range of returns") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = random_mdp(3 + static_cast<int>(seed % 3), seed);
    const BehaviorPolicy beh{random_policy(m.n_states, seed + 1)};
    const auto ds = rollout(m, beh, 50, 12, seed + 2);
    const auto target = random_policy(m.n_states, seed + 3);
    const auto behavior = BehaviorModel::from_logged(ds);
    double lo = 1e9, hi = -1e9;
    for (const auto& ep : ds.episodes) {
      lo = std::min(lo, discounted_return(ep, 0.9));
      hi = std::max(hi, discounted_return(ep, 0.9));
    }
    for (std::optional<double> clip : {std::optional<double>{}, std::optional<double>{90.0}}) {
      const double est = wis(ds, tabulate_policy(target, ds), behavior, 0.9, WisConfig{clip}).estimate;
      CHECK(est >= lo - 1e-12);
      CHECK(est <= hi + 1e-12);
    }
  }
}

TEST_CASE("zero behavior probability violates support") {
  const auto m = random_mdp(3, 8);
  const BehaviorPolicy beh{random_policy(3, 9)};
  const auto ds = rollout(m, beh, 5, 5, 10);
  auto b = BehaviorModel::from_logged(ds);
  b.taken[2][0] = 0.0;
  CHECK_THROWS_AS(wis(ds, tabulate_policy(beh.probs, ds), b, 0.9), DataError);
  auto stripped = ds;
  stripped.episodes[0].transitions[0].behavior_prob.reset();
  CHECK_THROWS_AS(BehaviorModel::from_logged(stripped), DataError);
}

TEST_CASE("DR with a zero model equals WIS") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_mdp(4, 20 + seed);
    const BehaviorPolicy beh{random_policy(4, 30 + seed)};
    const auto ds = rollout(m, beh, 300, 15, 40 + seed);
    const auto pi = tabulate_policy(random_policy(4, 50 + seed), ds);
    const auto b = BehaviorModel::from_logged(ds);
    ActionValues zero;
    zero.fill(0.0);
    const auto q0 = step_table(ds, [&](std::size_t, int) { return zero; });
    CHECK(doubly_robust(ds, pi, b, q0, 0.9) == doctest::Approx(wis(ds, pi, b, 0.9).estimate).epsilon(1e-12));
  }
}

TEST_CASE("DR with the true Q on a deterministic MDP is exact") {
  const auto m = deterministic_chain();
  const double gamma = 0.9;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const BehaviorPolicy beh{random_policy(3, 60 + seed)};
    const auto ds = rollout(m, beh, 100, 10, 70 + seed);
    const auto target = random_policy(3, 80 + seed);
    const auto q = policy_q_values(m, target, gamma);
    const auto q_hat = step_table(ds, [&](std::size_t, int s) { return q[s]; });
    const double dr = doubly_robust(ds, tabulate_policy(target, ds), BehaviorModel::from_logged(ds), q_hat, gamma);
    CHECK(std::abs(dr - exact_policy_value(m, target, gamma)) <= 1e-6);
  }
}

TEST_CASE("DR corrects a biased model better than the direct method") {
  const double gamma = 0.9;
  const int horizon = 12;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_mdp(4, 90 + seed);
    const BehaviorPolicy beh{random_policy(4, 100 + seed)};
    const auto ds = rollout(m, beh, 3000, horizon, 110 + seed);
    const auto target = random_policy(4, 120 + seed);
    const auto qt = finite_horizon_q(m, target, gamma, horizon);
    const auto biased = step_table(ds, [&](std::size_t t, int s) {
      ActionValues row = qt[std::min<std::size_t>(t, horizon - 1)][s];
      for (double& v : row) v += 0.2;
      return row;
    });
    const auto pi = tabulate_policy(target, ds);
    const double truth = finite_horizon_value(m, target, gamma, horizon);
    const double dr = doubly_robust(ds, pi, BehaviorModel::from_logged(ds), biased, gamma);
    const double dm = direct_estimate(ds, pi, biased);
    CHECK(std::abs(dr - truth) < std::abs(dm - truth));
  }
}

TEST_CASE("tabular FQE equals the value of the empirical MDP") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_mdp(3, 130 + seed);
    const BehaviorPolicy beh{random_policy(3, 140 + seed)};
    const auto ds = rollout(m, beh, 500, 20, 150 + seed);
    const auto target = random_policy(3, 160 + seed);
    const auto fqe = fqe_tabular(ds, tabulate_policy(target, ds), 0.9);
    CHECK(std::abs(fqe.estimate - empirical_mdp_value(ds, target, 0.9, 3)) <= 1e-6);
  }
}

TEST_CASE("tabular FQE with gamma 0 is the mean immediate reward at the start") {
  const auto m = random_mdp(3, 170);
  const BehaviorPolicy beh{random_policy(3, 171)};
  const auto ds = rollout(m, beh, 400, 10, 172);
  const auto target = random_policy(3, 173);
  std::map<int, std::pair<double, double>> r;  // (s, a) -> (sum, count)
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      auto& e = r[*tr.state_id * kNumActions + tr.action.flat()];
      e.first += tr.reward;
      e.second += 1;
    }
  }
  double expect = 0.0;
  for (const auto& ep : ds.episodes) {
    const int s = *ep.transitions[0].state_id;
    for (int a = 0; a < kNumActions; ++a) {
      const auto it = r.find(s * kNumActions + a);
      if (it != r.end()) expect += target[s][a] * it->second.first / it->second.second;
    }
  }
  expect /= static_cast<double>(ds.episodes.size());
  CHECK(fqe_tabular(ds, tabulate_policy(target, ds), 0.0).estimate == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("OPERA") {
  SUBCASE("identical estimators give their common value") {
    const std::vector<double> reps{0.1, 0.3, 0.2, 0.25};
    const auto r = opera({{"a", 0.2, reps}, {"b", 0.2, reps}, {"c", 0.2, reps}});
    CHECK(r.estimate == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(std::accumulate(r.weights.begin(), r.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("a zero-variance estimator takes all the weight") {
    const auto r = opera({{"noisy", 0.5, {0.2, 0.9, 0.4, 0.6}}, {"flat", 0.3, {0.3, 0.3, 0.3, 0.3}}});
    CHECK(r.weights[1] == 1.0);
    CHECK(r.weights[0] == 0.0);
    CHECK(r.estimate == 0.3);
    CHECK(r.fallback);
  }
  SUBCASE("two estimators match the closed-form minimiser") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> a(200), b(200);
      const double rho = 0.6 * (2.0 * (trial % 2) - 1.0);
      for (int i = 0; i < 200; ++i) {
        const double z1 = n(rng), z2 = n(rng);
        a[i] = 1.0 + 0.3 * z1;
        b[i] = 1.1 + 0.5 * (rho * z1 + std::sqrt(1 - rho * rho) * z2);
      }
      const auto r = opera({{"a", 1.0, a}, {"b", 1.1, b}});
      double m11 = 0, m22 = 0, m12 = 0;
      for (int i = 0; i < 200; ++i) {
        m11 += (a[i] - 1.0) * (a[i] - 1.0);
        m22 += (b[i] - 1.1) * (b[i] - 1.1);
        m12 += (a[i] - 1.0) * (b[i] - 1.1);
      }
      const double w1 = std::clamp((m22 - m12) / (m11 + m22 - 2 * m12), 0.0, 1.0);
      CHECK(r.weights[0] == doctest::Approx(w1).epsilon(1e-9));
      CHECK(r.estimate == doctest::Approx(w1 * 1.0 + (1 - w1) * 1.1).epsilon(1e-9));
    }
  }
  SUBCASE("three estimators beat every point of a simplex grid") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<OperaInput> in{{"a", 0.0, {}}, {"b", 0.1, {}}, {"c", -0.1, {}}};
      for (int i = 0; i < 100; ++i) {
        const double z = n(rng);
        in[0].replicates.push_back(0.2 * z + 0.1 * n(rng));
        in[1].replicates.push_back(0.1 + 0.4 * n(rng));
        in[2].replicates.push_back(-0.1 - 0.3 * z + 0.2 * n(rng));
      }
      const auto r = opera(in);
      CHECK_FALSE(r.fallback);
      for (double w : r.weights) CHECK(w >= 0.0);
      CHECK(std::abs(std::accumulate(r.weights.begin(), r.weights.end(), 0.0) - 1.0) <= 1e-9);
      auto objective = [&](double w0, double w1, double w2) {
        const double w[3] = {w0, w1, w2};
        double s = 0.0;
        for (int i = 0; i < 3; ++i) {
          for (int j = 0; j < 3; ++j) s += w[i] * w[j] * r.mse[i][j];
        }
        return s;
      };
      const double got = objective(r.weights[0], r.weights[1], r.weights[2]);
      for (int i = 0; i <= 100; ++i) {
        for (int j = 0; i + j <= 100; ++j) {
          CHECK(got <= objective(i / 100.0, j / 100.0, (100 - i - j) / 100.0) + 1e-12);
        }
      }
    }
  }
  CHECK_THROWS_AS(opera({{"a", 0.0, {1.0, 2.0}}}), ConfigError);
}

TEST_CASE("fitted behavior probabilities are floored and close to the truth") {
  SynthConfig sc;
  sc.n_severity = 2;
  sc.n_context = 2;
  sc.n_features = 4;
  sc.d_n = 8;
  // Low observation noise so the latent state is recoverable from one frame.
  sc.structured_noise = 0.1;
  const auto mdp = generate_mdp(sc, 7);
  const auto beh = make_behavior_policy(mdp, 0.3);
  const auto ds = normalize(rollout(mdp, beh, 10000, 18, 8));
  BehaviorFitConfig cfg;
  const auto model = fit_behavior(ds, cfg);

  const auto test = ds.subset(Split::test);
  std::vector<ActionValues> mean_probs(4);
  for (auto& row : mean_probs) row.fill(0.0);
  std::vector<double> visits(4, 0.0);
  double min_p = 1.0;
  for (const auto& ep : test.episodes) {
    const auto inputs = episode_state_inputs(ep, {NoteStrategyKind::impute});
    std::vector<const StateInput*> ptrs;
    for (std::size_t t = 0; t < ep.length(); ++t) ptrs.push_back(&inputs[t]);
    const auto p = model.probs(ptrs);
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const int s = *ep.transitions[t].state_id;
      double total = 0.0;
      for (int a = 0; a < kNumActions; ++a) {
        mean_probs[s][a] += p[t][a];
        min_p = std::min(min_p, p[t][a]);
        total += p[t][a];
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
      visits[s] += 1;
    }
  }
  CHECK(min_p >= cfg.floor);
  for (int s = 0; s < 4; ++s) {
    double tv = 0.0;
    for (int a = 0; a < kNumActions; ++a) tv += std::abs(mean_probs[s][a] / visits[s] - beh.probs[s][a]);
    INFO("state " << s);
    CHECK(0.5 * tv <= 0.05);
  }
}

TEST_CASE("a single logged action gives a floored point mass") {
  SynthConfig sc;
  sc.n_severity = 2;
  sc.n_context = 2;
  sc.n_features = 3;
  sc.d_n = 4;
  const auto mdp = generate_mdp(sc, 9);
  BehaviorPolicy only;
  only.probs.resize(4);
  for (auto& row : only.probs) {
    row.fill(0.0);
    row[6] = 1.0;
  }
  const auto ds = rollout(mdp, only, 300, 10, 10);
  BehaviorFitConfig cfg;
  cfg.steps = 500;
  cfg.floor = 0.01;
  const auto model = fit_behavior(ds, cfg);
  const auto inputs = episode_state_inputs(ds.episodes[0], {NoteStrategyKind::impute});
  const StateInput* p0 = &inputs[0];
  const auto p = model.probs(std::span<const StateInput* const>(&p0, 1))[0];
  // The floor caps the mode at 0.01 + 0.75.
  CHECK(p[6] >= 0.76 - 1e-3);
  for (int a = 0; a < kNumActions; ++a) {
    if (a == 6) continue;
    CHECK(p[a] >= 0.01);
    CHECK(p[a] <= 0.01 + 1e-3);
  }
}

TEST_CASE("evaluate_policy produces a consistent, deterministic report") {
  const auto m = random_mdp(4, 200);
  const BehaviorPolicy beh{random_policy(4, 201)};
  const auto ds = rollout(m, beh, 400, 15, 202);
  const auto pi = tabulate_policy(random_policy(4, 203), ds);
  const auto b = BehaviorModel::from_logged(ds);
  const auto r1 = evaluate_policy(ds, pi, b, quick_ope(0.9));
  const auto r2 = evaluate_policy(ds, pi, b, quick_ope(0.9));
  CHECK(r1.to_json() == r2.to_json());
  CHECK(r1.fqe_mode == "tabular");
  CHECK(r1.wis == doctest::Approx(wis(ds, pi, b, 0.9).estimate).epsilon(1e-12));
  CHECK(r1.fqe == doctest::Approx(fqe_tabular(ds, pi, 0.9).estimate).epsilon(1e-12));
  for (double se : {r1.wis_se, r1.dr_se, r1.fqe_se, r1.opera_se}) CHECK(se > 0.0);
  double total = 0.0;
  for (double w : r1.opera_weights) {
    CHECK(w >= 0.0);
    total += w;
  }
  CHECK(std::abs(total - 1.0) <= 1e-9);
  const double lo = std::min({r1.wis, r1.dr, r1.fqe}), hi = std::max({r1.wis, r1.dr, r1.fqe});
  CHECK(r1.opera >= lo - 1e-12);
  CHECK(r1.opera <= hi + 1e-12);
  const auto j = r1.to_json();
  for (const char* k : {"wis", "dr", "fqe", "opera", "n_episodes", "n_bootstrap"}) CHECK(j.contains(k));
}

TEST_CASE("network FQE approaches the true value") {
  SynthConfig sc;
  sc.n_severity = 2;
  sc.n_context = 2;
  sc.n_features = 4;
  sc.d_n = 8;
  const double gamma = 0.9;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto mdp = generate_mdp(sc, 300 + seed);
    const auto beh = make_behavior_policy(mdp, 0.3);
    const auto ds = normalize(rollout(mdp, beh, 10000, 18, 310 + seed));
    const auto target = random_policy(4, 320 + seed);
    FqeNetConfig cfg;
    cfg.seed = seed;
    const auto r = fqe_network(ds, tabulate_policy(target, ds), gamma, cfg);
    const double truth = finite_horizon_value(mdp, target, gamma, 18);
    MESSAGE("seed " << seed << ": network FQE " << r.estimate << ", true " << truth);
    if (std::abs(r.estimate - truth) <= 0.1) ++ok;
  }
  CHECK(ok == 5);
}
