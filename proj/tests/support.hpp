#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clinrl/net.hpp"
#include "clinrl/synthgym.hpp"

namespace clinrl::testing {

using net::Graph;
using net::Matrix;
using net::Var;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Central-difference comparison. Each entry's error is |a - n| / max(|a|, |n|, floor),
/// so gradients far below `floor` are held to an absolute tolerance instead.
struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;

  void record(double analytic, double numeric, const std::string& where, double floor = 1e-6) {
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    ++checked;
    if (rel > max_rel) {
      max_rel = rel;
      worst = where + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
  }
};

/// Scalarises an output with a fixed random projection so every output entry
/// contributes to the gradient.
inline Var project(Graph& g, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return net::sum(net::mul(out, g.constant(random_matrix(out.rows(), out.cols(), rng))));
}

using OutputFn = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Central difference of loss() in the coordinate x. When the two one-sided
/// slopes disagree the step straddles a ReLU kink, so the step is shrunk until
/// they agree (or down to 1e-4 h) rather than reporting the average of two slopes.
inline double central_difference(double& x, const std::function<double()>& loss, double h) {
  const double x0 = x;
  const double f0 = loss();
  double numeric = 0.0;
  for (double step = h; step >= h * 1e-4; step *= 0.01) {
    x = x0 + step;
    const double up = loss();
    x = x0 - step;
    const double down = loss();
    x = x0;
    numeric = (up - down) / (2 * step);
    const double fwd = up - f0, bwd = f0 - down;
    if (std::abs(fwd - bwd) <= 1e-3 * std::max({std::abs(fwd), std::abs(bwd), step * 1e-3})) break;
  }
  return numeric;
}

/// Gradients with respect to input leaves and every parameter in `params`.
inline GradCheck check_gradients(std::vector<Matrix> inputs, const OutputFn& f, const net::ParamList& params,
                                 std::uint64_t seed, double h = 1e-5) {
  auto loss_at = [&]() {
    Graph g;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(g.constant(x));
    return project(g, f(g, vars), seed).value()(0, 0);
  };
  Graph g;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.input(x));
  net::zero_grad(params);
  g.backward(project(g, f(g, vars), seed));

  GradCheck gc;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    // Inputs the output never touches have no gradient buffer.
    Matrix analytic = g.grad(vars[k]);
    if (analytic.size() == 0) analytic = Matrix::Zero(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      gc.record(analytic.data()[i], central_difference(inputs[k].data()[i], loss_at, h),
                "input" + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      gc.record(analytic.data()[i], central_difference(p->value.data()[i], loss_at, h),
                p->name + "[" + std::to_string(i) + "]");
    }
  }
  return gc;
}

/// Two states; action 0 in state 0 moves to state 1, everything else stays.
/// State 1 terminates with +1, state 0 terminates with -1 at rate 0.5.
inline TabularMDP tiny_mdp() {
  TabularMDP m = TabularMDP::blank(2, 2, 2);
  for (int a = 0; a < kNumActions; ++a) {
    m.p(0, a, a == 0 ? 1 : 0) = 1.0;
    m.p(1, a, 1) = 1.0;
    m.term(0, a) = 0.5;
    m.term(1, a) = 1.0;
  }
  m.reward_terminal = {-1.0, 1.0};
  m.initial = {1.0, 0.0};
  return m;
}

/// Random dense MDP with full-support transitions.
inline TabularMDP random_mdp(int n, std::uint64_t seed, std::size_t n_features = 4, std::size_t d_n = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  TabularMDP m = TabularMDP::blank(n, n_features, d_n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      double total = 0.0;
      for (int s2 = 0; s2 < n; ++s2) total += (m.p(s, a, s2) = u(rng));
      for (int s2 = 0; s2 < n; ++s2) m.p(s, a, s2) /= total;
      m.term(s, a) = 0.1 + 0.5 * u(rng);
    }
    m.reward_terminal[s] = (s % 2 == 0) ? 1.0 : -1.0;
  }
  double total = 0.0;
  for (int s = 0; s < n; ++s) total += (m.initial[s] = u(rng));
  for (auto& p : m.initial) p /= total;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int s = 0; s < n; ++s) {
    for (auto& x : m.structured_mean[s]) x = nd(rng);
    for (auto& x : m.event_prototype[s]) x = nd(rng);
    for (auto& x : m.context_prototype[s]) x = nd(rng);
  }
  return m;
}

inline StatePolicy random_policy(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  StatePolicy p(static_cast<std::size_t>(n));
  for (auto& row : p) {
    double total = 0.0;
    for (auto& x : row) total += (x = u(rng));
    for (auto& x : row) x /= total;
  }
  return p;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("clinrl_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Value of the empirical MDP by direct linear solve over observed (s, a) pairs.
inline double empirical_mdp_value(const OfflineDataset& ds, const StatePolicy& pi, double gamma, int n_states) {
  const int dim = n_states * kNumActions;
  Eigen::VectorXd n = Eigen::VectorXd::Zero(dim), r = Eigen::VectorXd::Zero(dim);
  Eigen::MatrixXd cont = Eigen::MatrixXd::Zero(dim, n_states);
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      const int sa = *tr.state_id * kNumActions + tr.action.flat();
      n(sa) += 1;
      r(sa) += tr.reward;
      if (!tr.done) cont(sa, *tr.next_state_id) += 1;
    }
  }
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);
  for (int sa = 0; sa < dim; ++sa) {
    if (n(sa) == 0) continue;
    b(sa) = r(sa) / n(sa);
    for (int s2 = 0; s2 < n_states; ++s2) {
      for (int a2 = 0; a2 < kNumActions; ++a2) A(sa, s2 * kNumActions + a2) -= gamma * cont(sa, s2) / n(sa) * pi[s2][a2];
    }
  }
  const Eigen::VectorXd q = A.fullPivLu().solve(b);
  double v = 0.0;
  for (const auto& ep : ds.episodes) {
    const int s0 = *ep.transitions[0].state_id;
    for (int a = 0; a < kNumActions; ++a) v += pi[s0][a] * q(s0 * kNumActions + a);
  }
  return v / static_cast<double>(ds.episodes.size());
}

}  // namespace clinrl::testing
