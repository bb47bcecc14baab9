#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "clinrl/trainer.hpp"
#include "support.hpp"

using namespace clinrl;
using clinrl::testing::random_matrix;
using net::Graph;
using net::Matrix;

namespace {

ActionValues filled(double v) {
  ActionValues a;
  a.fill(v);
  return a;
}

double oracle_lse(const Matrix& row) {
  const double m = row.maxCoeff();
  double s = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) s += std::exp(row(0, i) - m);
  return m + std::log(s);
}

struct TinySetup {
  TabularMDP mdp;
  OfflineDataset data;
  EncoderConfig enc;
  TrainConfig train;
  std::vector<std::array<bool, kNumActions>> in_support;
};

/// 2 x 2 latent MDP logged by a behavior policy that only ever uses two
/// actions per state, so the other 23 are out of distribution.
TinySetup tiny_setup() {
  TinySetup t;
  SynthConfig sc;
  sc.n_severity = 2;
  sc.n_context = 2;
  sc.n_features = 4;
  sc.d_n = 8;
  sc.gamma = 0.9;
  t.mdp = generate_mdp(sc, 5);
  const auto best = greedy_actions(optimal_q_values(t.mdp, 0.9));
  BehaviorPolicy b;
  b.probs.resize(4);
  t.in_support.resize(4);
  for (int s = 0; s < 4; ++s) {
    b.probs[s].fill(0.0);
    t.in_support[s].fill(false);
    const int other = (best[s] + 7) % kNumActions;
    b.probs[s][best[s]] = 0.5;
    b.probs[s][other] = 0.5;
    t.in_support[s][best[s]] = t.in_support[s][other] = true;
  }
  t.data = normalize(rollout(t.mdp, b, 300, 10, 6));
  t.enc.n_features = 4;
  t.enc.d_n = 8;
  t.enc.d = 8;
  t.enc.d_k = 4;
  t.enc.strategy.kind = NoteStrategyKind::impute;
  t.enc.fusion = FusionMode::concat;
  t.train.batch_size = 64;
  t.train.learning_rate = 1e-3;
  t.train.gamma = 0.9;
  t.train.hidden = 32;
  t.train.n_layers = 2;
  t.train.total_steps = 1500;
  t.train.target_update_interval = 100;
  t.train.eval_interval = 500;
  t.train.seed = 3;
  return t;
}

/// Mean Q over logged states, split by whether the action is in the behavior support.
std::pair<double, double> mean_q_by_support(const PolicyModel& model, const TinySetup& t) {
  const OfflineDataset train_split = t.data.subset(Split::train);
  const auto table = TransitionTable::build(train_split, t.enc.strategy);
  std::vector<const StateInput*> inputs;
  std::vector<int> states;
  for (const auto& ref : table.refs) {
    inputs.push_back(&table.state(ref));
    states.push_back(*table.transition(ref).state_id);
  }
  const auto q = model.q_values(inputs);
  double in_sum = 0, in_n = 0, out_sum = 0, out_n = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    for (int a = 0; a < kNumActions; ++a) {
      if (t.in_support[states[i]][a]) {
        in_sum += q[i][a];
        in_n += 1;
      } else {
        out_sum += q[i][a];
        out_n += 1;
      }
    }
  }
  return {in_sum / in_n, out_sum / out_n};
}

double mean_q_all(const PolicyModel& model, const TinySetup& t) {
  const auto [in, out] = mean_q_by_support(model, t);
  return (2.0 * in + 23.0 * out) / 25.0;
}

}  // namespace

TEST_CASE("DQN targets") {
  ActionValues next = filled(-5.0);
  next[3] = 2.0;
  next[17] = 1.5;
  CHECK(dqn_target(1.0, true, 0.99, next) == 1.0);
  CHECK(dqn_target(0.0, false, 0.0, next) == 0.0);
  CHECK(dqn_target(-1.0, false, 0.0, next) == -1.0);
  CHECK(dqn_target(0.0, false, 0.9, next) == doctest::Approx(0.9 * 2.0).epsilon(1e-15));
  CHECK(dqn_target(0.5, false, 0.5, next) == doctest::Approx(0.5 + 0.5 * 2.0).epsilon(1e-15));

  SUBCASE("terminal targets never read the next-state values") {
    const ActionValues poison = filled(std::numeric_limits<double>::quiet_NaN());
    CHECK(dqn_target(1.0, true, 0.99, poison) == 1.0);
    CHECK(dqn_target(-1.0, true, 0.99, poison) == -1.0);
  }
  SUBCASE("two states, two usable actions") {
    // Q(s0) = (1, 3), Q(s1) = (4, -2); other actions are far below.
    std::array<ActionValues, 2> q{filled(-100.0), filled(-100.0)};
    q[0][0] = 1.0;
    q[0][1] = 3.0;
    q[1][0] = 4.0;
    q[1][1] = -2.0;
    CHECK(dqn_target(0.0, false, 0.9, q[1]) == doctest::Approx(3.6).epsilon(1e-15));
    CHECK(dqn_target(0.25, false, 0.8, q[0]) == doctest::Approx(0.25 + 2.4).epsilon(1e-15));
  }
}

TEST_CASE("CQL loss with alpha 0 is the DQN loss on random batches") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> act(0, kNumActions - 1);
  std::normal_distribution<double> n(0.0, 2.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int B = 1 + trial % 17;
    const Matrix qm = random_matrix(B, kNumActions, rng, 3.0);
    std::vector<int> a(B);
    std::vector<double> y(B);
    for (int i = 0; i < B; ++i) {
      a[i] = act(rng);
      y[i] = n(rng);
    }
    Graph g;
    const auto q = g.constant(qm);
    const double dqn = dqn_loss(q, a, y).value()(0, 0);
    const double cql = cql_loss(q, a, y, 0.0).loss.value()(0, 0);
    double oracle = 0.0;
    for (int i = 0; i < B; ++i) oracle += 0.5 * (qm(i, a[i]) - y[i]) * (qm(i, a[i]) - y[i]);
    oracle /= B;
    CHECK(dqn == doctest::Approx(oracle).epsilon(1e-13));
    worst = std::max(worst, std::abs(dqn - cql));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("CQL loss by hand on a single transition") {
  std::mt19937_64 rng(4);
  const Matrix qm = random_matrix(1, kNumActions, rng);
  const int a = 11;
  const double y = 0.3, alpha = 2.0;
  Graph g;
  const auto terms = cql_loss(g.constant(qm), std::vector<int>{a}, std::vector<double>{y}, alpha);
  const double td = 0.5 * (qm(0, a) - y) * (qm(0, a) - y);
  const double reg = oracle_lse(qm) - qm(0, a);
  CHECK(std::abs(terms.td.value()(0, 0) - td) <= 1e-10);
  CHECK(std::abs(terms.reg.value()(0, 0) - reg) <= 1e-10);
  CHECK(std::abs(terms.loss.value()(0, 0) - (td + alpha * reg)) <= 1e-10);
  CHECK(terms.reg.value()(0, 0) > 0.0);
}

TEST_CASE("regularizer vanishes when the action distribution is a point mass on the data action") {
  Matrix qm = Matrix::Constant(3, kNumActions, -1000.0);
  const std::vector<int> a{2, 9, 24};
  for (int i = 0; i < 3; ++i) qm(i, a[i]) = 0.5 * i;
  Graph g;
  const auto terms = cql_loss(g.constant(qm), a, std::vector<double>{0, 0, 0}, 5.0);
  CHECK(terms.reg.value()(0, 0) == 0.0);
}

TEST_CASE("CQL gradient matches finite differences") {
  std::mt19937_64 rng(9);
  const Matrix qm = random_matrix(4, kNumActions, rng);
  const std::vector<int> a{0, 5, 5, 24};
  const std::vector<double> y{0.1, -0.4, 1.0, 0.0};
  const auto gc = clinrl::testing::check_gradients(
      {qm}, [&](Graph&, const std::vector<net::Var>& x) { return cql_loss(x[0], a, y, 1.5).loss; }, {}, 9);
  INFO(gc.worst);
  CHECK(gc.max_rel <= 1e-4);
}

TEST_CASE("BCQ constrained argmax") {
  ActionValues q = filled(0.0);
  q[4] = 10.0;
  q[7] = 5.0;
  ActionValues p = filled(0.01);
  p[7] = 0.5;
  p[4] = 0.02;
  double total = 0.0;
  for (double v : p) total += v;
  for (double& v : p) v /= total;

  CHECK(bcq_constrained_argmax(q, p, 0.0) == 4);
  CHECK(bcq_constrained_argmax(q, p, 1.0) == 7);
  CHECK(bcq_constrained_argmax(q, p, 0.3) == 7);
  CHECK(bcq_constrained_argmax(q, p, 0.02 / 0.5) == 4);  // ratio exactly at the threshold qualifies
  CHECK(bcq_constrained_argmax(q, filled(1.0 / kNumActions), 1.0) == 4);
  CHECK(bcq_constrained_argmax(q, filled(1.0 / kNumActions), 0.3) == 4);

  SUBCASE("ties at the top probability all qualify at tau = 1") {
    ActionValues p2 = filled(0.0);
    p2[1] = p2[2] = 0.5;
    ActionValues q2 = filled(0.0);
    q2[2] = 1.0;
    q2[9] = 50.0;
    CHECK(bcq_constrained_argmax(q2, p2, 1.0) == 2);
  }
  SUBCASE("the selected action always meets the ratio") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    int bad = 0;
    for (int draw = 0; draw < 10000; ++draw) {
      ActionValues qq, pp;
      double s = 0.0;
      for (int k = 0; k < kNumActions; ++k) {
        qq[k] = n(rng);
        s += (pp[k] = std::pow(u(rng), 3.0));
      }
      for (double& v : pp) v /= s;
      const double tau = u(rng);
      const int a = bcq_constrained_argmax(qq, pp, tau);
      if (pp[a] / *std::max_element(pp.begin(), pp.end()) < tau) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("train config parsing is strict") {
  TrainConfig c;
  c.algorithm = Algorithm::bcq;
  c.cql_alpha = 0.7;
  c.total_steps = 123;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  auto j = to_json(c);
  j["learning_rte"] = 0.1;
  try {
    train_config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rte") != std::string::npos);
  }
  j = to_json(c);
  j["gamma"] = "high";
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["gamma"] = 1.0;
  CHECK_THROWS_AS(train_config_from_json(j).validate(), ConfigError);
  j = to_json(c);
  j["algorithm"] = "sarsa";
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);

  EncoderConfig e;
  e.strategy = {NoteStrategyKind::stack, 5};
  e.fusion = FusionMode::note_only;
  CHECK(to_json(encoder_config_from_json(to_json(e))) == to_json(e));
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  auto t = tiny_setup();
  t.train.total_steps = 200;
  t.train.eval_interval = 50;
  const auto a = train(t.data, t.enc, t.train);
  const auto b = train(t.data, t.enc, t.train);
  REQUIRE(a.log.size() == 4);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].to_json() == b.log[i].to_json());
  CHECK(a.model.checkpoint() == b.model.checkpoint());

  const auto restored = PolicyModel::from_checkpoint(a.model.checkpoint());
  const auto inputs = episode_state_inputs(t.data.episodes[0], t.enc.strategy);
  for (const auto& in : inputs) CHECK(restored.q_values(in) == a.model.q_values(in));

  t.train.seed = 4;
  const auto c = train(t.data, t.enc, t.train);
  CHECK(c.log.back().loss != a.log.back().loss);
}

TEST_CASE("the evaluation hook selects the best snapshot") {
  auto t = tiny_setup();
  t.train.total_steps = 60;
  t.train.eval_interval = 20;
  int calls = 0;
  const auto r = train(t.data, t.enc, t.train, [&](const PolicyModel&) {
    ++calls;
    return calls == 2 ? 1.0 : 0.0;
  });
  CHECK(calls == 3);
  REQUIRE(r.best_score);
  CHECK(*r.best_score == 1.0);
  REQUIRE(r.log[1].fqe_val);
  CHECK(*r.log[1].fqe_val == 1.0);
}

TEST_CASE("divergence aborts with the last snapshot") {
  auto t = tiny_setup();
  t.train.learning_rate = 1e300;
  t.train.total_steps = 50;
  try {
    train(t.data, t.enc, t.train);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.last_good() != nullptr);
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("conservatism grows with alpha") {
  auto t = tiny_setup();
  std::vector<double> all_q, ood_q;
  for (double alpha : {0.0, 0.5, 2.0, 8.0}) {
    t.train.cql_alpha = alpha;
    const auto r = train(t.data, t.enc, t.train);
    const auto [in, out] = mean_q_by_support(r.model, t);
    ood_q.push_back(out);
    all_q.push_back(mean_q_all(r.model, t));
    MESSAGE("alpha " << alpha << ": in-support Q " << in << ", OOD Q " << out);
  }
  CHECK(ood_q[2] < ood_q[0]);
  for (std::size_t k = 1; k < all_q.size(); ++k) CHECK(all_q[k] <= all_q[k - 1]);
}

TEST_CASE("Bellman residuals at the fixed point of a deterministic MDP") {
  // Chain 0 -> 1 -> 2; from 2 every action terminates. Action parity picks
  // whether state 0 skips ahead.
  TabularMDP m = TabularMDP::blank(3, 1, 1);
  for (int a = 0; a < kNumActions; ++a) {
    m.p(0, a, a % 2 == 0 ? 1 : 2) = 1.0;
    m.p(1, a, 2) = 1.0;
    m.p(2, a, a % 3 == 0 ? 0 : 2) = 1.0;
    m.term(2, a) = 1.0;
  }
  m.reward_terminal = {1.0, -1.0, -1.0};
  const double gamma = 0.9;
  const auto q = optimal_q_values(m, gamma, 1e-14);

  std::vector<Transition> trs;
  std::vector<ActionValues> qs, qn;
  for (int s = 0; s < 3; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      int next = 0;
      while (m.p(s, a, next) != 1.0) ++next;
      Transition tr;
      tr.action = ActionIndex::from_flat(a);
      tr.done = m.term(s, a) == 1.0;
      tr.reward = tr.done ? m.reward_terminal[next] : 0.0;
      trs.push_back(tr);
      qs.push_back(q[s]);
      qn.push_back(q[next]);
    }
  }
  std::vector<const Transition*> ptrs;
  for (const auto& tr : trs) ptrs.push_back(&tr);
  const auto res = bellman_residual_values(qs, qn, ptrs, gamma);
  for (double r : res) CHECK(std::abs(r) <= 1e-8);

  SUBCASE("inflating the left term shifts the mean by c times the affected fraction") {
    const double c = 0.7;
    std::size_t affected = 0;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      if (i % 3 != 0) continue;
      for (auto& v : qs[i]) v += c;
      ++affected;
    }
    const auto shifted = summarize_residuals(bellman_residual_values(qs, qn, ptrs, gamma));
    const double base_mean = summarize_residuals(res).mean;
    CHECK(shifted.mean - base_mean ==
          doctest::Approx(c * static_cast<double>(affected) / static_cast<double>(qs.size())).epsilon(1e-10));
  }
}

TEST_CASE("residual summary") {
  const auto s = summarize_residuals({1.0, 2.0, 3.0, 4.0}, 3);
  CHECK(s.mean == 2.5);
  CHECK(s.stddev == doctest::Approx(std::sqrt(1.25)));  // population form
  REQUIRE(s.bin_edges.size() == 4);
  std::size_t total = 0;
  for (auto c : s.counts) total += c;
  CHECK(total == 4);
}
