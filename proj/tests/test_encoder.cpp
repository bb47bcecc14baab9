#include <doctest.h>

#include <random>

#include "clinrl/encoder.hpp"
#include "support.hpp"

using namespace clinrl;
using clinrl::testing::check_gradients;
using clinrl::testing::random_matrix;
using net::Graph;
using net::Matrix;
using net::Var;

namespace {

JointObservation frame(double f, std::optional<std::vector<double>> note) {
  JointObservation o;
  o.structured = {f, -f};
  o.note_present = note.has_value();
  o.note_embedding = note.value_or(std::vector<double>{0.0, 0.0});
  return o;
}

/// Frames 0..4 with notes on frames 1 and 3 only.
std::vector<JointObservation> sparse_history() {
  return {frame(0, std::nullopt), frame(1, std::vector<double>{1, 2}), frame(2, std::nullopt),
          frame(3, std::vector<double>{3, 6}), frame(4, std::nullopt)};
}

ResolvedNote resolve_at(const std::vector<JointObservation>& h, std::size_t t, NoteStrategy s) {
  return resolve_note(std::span<const JointObservation>(h.data(), t + 1), s);
}

Matrix row_of(std::span<const double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

Eigen::VectorXd bias_of(const net::Dense& d) {
  const auto& b = d.bias().value;
  return Eigen::Map<const Eigen::VectorXd>(b.data(), b.size());
}

EncoderConfig small_config(NoteStrategyKind kind, FusionMode fusion) {
  EncoderConfig c;
  c.n_features = 5;
  c.d_n = 6;
  c.d = 4;
  c.d_k = 3;
  c.strategy.kind = kind;
  c.fusion = fusion;
  return c;
}

}  // namespace

TEST_CASE("note strategies on a sparse history") {
  const auto h = sparse_history();
  using V = std::vector<double>;

  SUBCASE("raw") {
    const NoteStrategy s{NoteStrategyKind::raw};
    CHECK(resolve_at(h, 0, s).event == V{0, 0});
    CHECK(resolve_at(h, 1, s).event == V{1, 2});
    CHECK(resolve_at(h, 2, s).event == V{0, 0});
    CHECK(resolve_at(h, 3, s).event == V{3, 6});
    CHECK_FALSE(resolve_at(h, 3, s).context.has_value());
  }
  SUBCASE("impute") {
    const NoteStrategy s{NoteStrategyKind::impute};
    CHECK(resolve_at(h, 0, s).event == V{0, 0});
    CHECK(resolve_at(h, 2, s).event == V{1, 2});
    CHECK(resolve_at(h, 4, s).event == V{3, 6});
  }
  SUBCASE("stack over three frames") {
    const NoteStrategy s{NoteStrategyKind::stack, 3};
    CHECK(resolve_at(h, 0, s).event == V{0, 0});
    CHECK(resolve_at(h, 2, s).event == V{1, 2});
    CHECK(resolve_at(h, 3, s).event == V{2, 4});
    CHECK(resolve_at(h, 4, s).event == V{3, 6});
  }
  SUBCASE("context") {
    const NoteStrategy s{NoteStrategyKind::context};
    CHECK(*resolve_at(h, 0, s).context == V{0, 0});
    CHECK(*resolve_at(h, 1, s).context == V{1, 2});
    CHECK(*resolve_at(h, 4, s).context == V{1, 2});
    CHECK(resolve_at(h, 4, s).event == V{3, 6});
  }
  CHECK_THROWS_AS(resolve_note({}, NoteStrategy{}), DataError);
}

TEST_CASE("a one-frame stack equals the raw strategy") {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution present(0.4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<JointObservation> h;
  for (int t = 0; t < 40; ++t) {
    if (present(rng)) {
      h.push_back(frame(t, std::vector<double>{n(rng), n(rng)}));
    } else {
      h.push_back(frame(t, std::nullopt));
    }
  }
  for (std::size_t t = 0; t < h.size(); ++t) {
    CHECK(resolve_at(h, t, {NoteStrategyKind::stack, 1}).event == resolve_at(h, t, {NoteStrategyKind::raw}).event);
  }
}

TEST_CASE("episode inputs cover every step plus the terminal next state") {
  Episode ep;
  const auto h = sparse_history();
  for (std::size_t t = 0; t + 1 < h.size(); ++t) {
    Transition tr;
    tr.obs = h[t];
    tr.next_obs = h[t + 1];
    tr.done = t + 2 == h.size();
    ep.transitions.push_back(tr);
  }
  const auto inputs = episode_state_inputs(ep, {NoteStrategyKind::impute});
  REQUIRE(inputs.size() == 5);
  CHECK(inputs[4].structured == h[4].structured);
  CHECK(inputs[4].event == std::vector<double>{3, 6});
  CHECK(inputs[0].context.empty());
}

TEST_CASE("gated fusion identities") {
  const std::size_t d = 4;
  GateParams gp(d, 3);
  std::mt19937_64 rng(8);
  const Matrix c = random_matrix(3, d, rng);
  const Matrix e = random_matrix(3, d, rng);
  auto fuse = [&](const Matrix& cm, const Matrix& em, std::optional<double> ov = std::nullopt) {
    Graph g;
    return Matrix(gated_fusion(g, g.constant(cm), g.constant(em), gp, ov).value());
  };

  SUBCASE("zero gate weights average the two notes") {
    gp.gate.weight().value.setZero();
    gp.gate.bias().value.setZero();
    CHECK((fuse(c, e) - 0.5 * (c + e)).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("a large bias selects the context note") {
    gp.gate.weight().value.setZero();
    gp.gate.bias().value.setConstant(20.0);
    const double tol = 1.0 / (1.0 + std::exp(20.0)) * (c - e).cwiseAbs().maxCoeff() + 1e-15;
    CHECK((fuse(c, e) - c).cwiseAbs().maxCoeff() <= tol);
  }
  SUBCASE("identical inputs pass through exactly") {
    CHECK(fuse(c, c) == c);
  }
  SUBCASE("pinned gate") {
    CHECK(fuse(c, e, 0.0) == e);
    CHECK(fuse(c, e, 1.0) == c);
  }
  SUBCASE("output stays between the inputs") {
    std::mt19937_64 r2(99);
    int violations = 0;
    for (int draw = 0; draw < 10000; ++draw) {
      const Matrix cc = random_matrix(1, d, r2, 10.0);
      const Matrix ee = random_matrix(1, d, r2, 10.0);
      const Matrix out = fuse(cc, ee);
      for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d); ++i) {
        if (out(0, i) < std::min(cc(0, i), ee(0, i)) || out(0, i) > std::max(cc(0, i), ee(0, i))) ++violations;
      }
    }
    CHECK(violations == 0);
  }
  CHECK_THROWS_AS(fuse(random_matrix(3, 5, rng), random_matrix(3, 5, rng)), DataError);
}

TEST_CASE("single-token attention reduces to the value maps") {
  const std::size_t d = 4, dk = 3;
  const CrossModalParams cp(d, dk, 12);
  std::mt19937_64 rng(13);
  const Matrix note = random_matrix(5, d, rng);
  const Matrix l = random_matrix(5, d, rng);
  Graph g;
  const auto out = cross_modal_attend(g, g.constant(note), g.constant(l), cp);

  CHECK((out.weight_to_l.value().array() == 1.0).all());
  CHECK((out.weight_to_n.value().array() == 1.0).all());

  const Matrix& Wvl = cp.value_l.weight().value;
  const Matrix& Wvn = cp.value_n.weight().value;
  for (Eigen::Index r = 0; r < 5; ++r) {
    const Eigen::VectorXd lv = l.row(r).transpose();
    const Eigen::VectorXd nv = note.row(r).transpose();
    Eigen::VectorXd lcat(2 * d), ncat(2 * d);
    lcat << lv, Wvl * lv;
    ncat << nv, Wvn * nv;
    const Eigen::VectorXd l_tilde = cp.out_l.weight().value * lcat;
    const Eigen::VectorXd n_tilde = cp.out_n.weight().value * ncat;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d); ++i) {
      CHECK(out.state.value()(r, i) == doctest::Approx(l_tilde(i)).epsilon(1e-12));
      CHECK(out.state.value()(r, d + i) == doctest::Approx(n_tilde(i)).epsilon(1e-12));
    }
  }

  SUBCASE("query and key weights do not change the output") {
    CrossModalParams other = cp;
    std::mt19937_64 r2(77);
    for (auto* dense : {&other.query_l, &other.key_n, &other.query_n, &other.key_l}) {
      dense->weight().value = random_matrix(dense->weight().value.rows(), dense->weight().value.cols(), r2, 5.0);
    }
    Graph g2;
    const auto out2 = cross_modal_attend(g2, g2.constant(note), g2.constant(l), other);
    CHECK((out2.state.value() - out.state.value()).cwiseAbs().maxCoeff() <= 1e-14);
  }
  CHECK_THROWS_AS(cross_modal_attend(g, g.constant(note), g.constant(random_matrix(5, 3, rng)), cp), DataError);
}

TEST_CASE("context strategy with the gate pinned at zero equals impute bit for bit") {
  auto ctx_cfg = small_config(NoteStrategyKind::context, FusionMode::attention);
  ctx_cfg.gate_override = 0.0;
  const auto imp_cfg = small_config(NoteStrategyKind::impute, FusionMode::attention);
  const StateEncoder ctx(ctx_cfg, 21);
  const StateEncoder imp(imp_cfg, 21);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int k = 0; k < 20; ++k) {
    StateInput in;
    for (int i = 0; i < 5; ++i) in.structured.push_back(n(rng));
    for (int i = 0; i < 6; ++i) in.event.push_back(n(rng));
    StateInput with_ctx = in;
    for (int i = 0; i < 6; ++i) with_ctx.context.push_back(n(rng));
    CHECK(ctx.encode_one(with_ctx) == imp.encode_one(in));
  }
}

TEST_CASE("state dimension per fusion mode") {
  for (auto [mode, dim] : {std::pair{FusionMode::attention, 8}, {FusionMode::concat, 8},
                           {FusionMode::structured_only, 4}, {FusionMode::note_only, 4}}) {
    const auto cfg = small_config(NoteStrategyKind::impute, mode);
    CHECK(cfg.state_dim() == static_cast<std::size_t>(dim));
    const StateEncoder enc(cfg, 1);
    StateInput in{std::vector<double>(5, 0.3), {}, std::vector<double>(6, -0.2)};
    CHECK(enc.encode_one(in).size() == static_cast<std::size_t>(dim));
  }
  auto bad = small_config(NoteStrategyKind::impute, FusionMode::concat);
  bad.d_k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config(NoteStrategyKind::impute, FusionMode::concat);
  bad.gate_override = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  StateInput wrong{std::vector<double>(4, 0.0), {}, std::vector<double>(6, 0.0)};
  CHECK_THROWS_AS(StateEncoder(small_config(NoteStrategyKind::impute, FusionMode::concat), 1).encode_one(wrong),
                  DataError);
}

TEST_CASE("gradients of the gate") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GateParams gp(4, seed);
    net::ParamList params;
    gp.gate.collect(params);
    std::mt19937_64 rng(seed + 50);
    const auto gc = check_gradients(
        {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
        [&](Graph& g, const std::vector<Var>& x) { return gated_fusion(g, x[0], x[1], gp); }, params, seed);
    INFO(gc.worst);
    CHECK(gc.max_rel <= 1e-4);
  }
}

TEST_CASE("gradients of cross-modal attention") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CrossModalParams cp(4, 3, seed);
    net::ParamList params;
    cp.collect(params);
    std::mt19937_64 rng(seed + 60);
    const auto gc = check_gradients(
        {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
        [&](Graph& g, const std::vector<Var>& x) { return cross_modal_attend(g, x[0], x[1], cp).state; }, params,
        seed);
    INFO(gc.worst);
    CHECK(gc.max_rel <= 1e-4);
  }
}

TEST_CASE("gradients of the full state pipeline") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto kind : {NoteStrategyKind::context, NoteStrategyKind::impute}) {
      for (auto mode : {FusionMode::attention, FusionMode::concat, FusionMode::note_only}) {
        auto cfg = small_config(kind, mode);
        cfg.mixer_depth = 2;
        StateEncoder enc(cfg, seed);
        net::ParamList params;
        enc.collect(params);
        std::mt19937_64 rng(seed + 100);
        std::vector<Matrix> inputs{random_matrix(3, 5, rng), random_matrix(3, 6, rng)};
        const bool ctx = kind == NoteStrategyKind::context;
        if (ctx) inputs.push_back(random_matrix(3, 6, rng));
        const auto gc = check_gradients(
            inputs,
            [&](Graph& g, const std::vector<Var>& x) { return enc.encode_vars(g, x[0], ctx ? x[2] : Var{}, x[1]); },
            params, seed);
        INFO(to_string(kind), " ", to_string(mode), " ", gc.worst);
        CHECK(gc.max_rel <= 1e-4);
      }
    }
  }
}

TEST_CASE("structured encoder matches a hand-written residual block") {
  StructuredEncoder enc(3, 4, 1, 40);
  std::mt19937_64 rng(41);
  const Matrix x = random_matrix(1, 3, rng);
  const auto out = enc.encode(std::span<const double>(x.data(), 3));

  const Eigen::VectorXd xin = x.row(0).transpose();
  Eigen::VectorXd h = enc.input().weight().value * xin + bias_of(enc.input());
  auto& b = enc.blocks()[0];
  const Eigen::VectorXd hidden = (b.expand.weight().value * h + bias_of(b.expand)).cwiseMax(0.0);
  h += b.contract.weight().value * hidden + bias_of(b.contract);
  REQUIRE(out.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(h(i)).epsilon(1e-12));
  CHECK(row_of(out).cols() == 4);
}
