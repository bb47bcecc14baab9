#include "clinrl/net.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>

namespace clinrl::net {

using nlohmann::json;

ParamTensor::ParamTensor(std::string name_, std::vector<std::size_t> shape_)
    : name(std::move(name_)), shape(std::move(shape_)) {
  const auto rows = shape.size() == 2 ? shape[0] : 1;
  const auto cols = shape.size() == 2 ? shape[1] : shape.at(0);
  value = Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  grad = Matrix::Zero(value.rows(), value.cols());
}

const Matrix& Var::value() const { return graph->value(id); }

Var Graph::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(const ParamTensor& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Matrix value, std::vector<int> parents, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(int id) const {
  const auto& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

const Matrix& Graph::grad(int id) const { return nodes_[id].grad; }

void Graph::accumulate(int id, const Matrix& delta) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw NumericError("backward called with a variable from another graph");
  const auto& v = value(loss.id);
  if (v.rows() != 1 || v.cols() != 1) throw NumericError("backward requires a scalar loss");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.id].grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      auto& g = n.param->grad;
      if (g.rows() != n.grad.rows() || g.cols() != n.grad.cols()) {
        g = n.grad;
      } else {
        g += n.grad;
      }
    }
  }
}

namespace {

Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw NumericError("operands belong to different graphs");
  return *a.graph;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DataError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()) + ")");
  }
}

}  // namespace

Var linear(Var x, Var weight, const Var* bias) {
  Graph& g = same_graph(x, weight);
  const Matrix& xv = x.value();
  const Matrix& wv = weight.value();
  if (xv.cols() != wv.cols()) {
    throw DataError("linear: input has " + std::to_string(xv.cols()) + " features, layer expects " +
                    std::to_string(wv.cols()));
  }
  Matrix out = xv * wv.transpose();
  std::vector<int> parents{x.id, weight.id};
  if (bias) {
    const Matrix& bv = bias->value();
    if (bv.rows() != 1 || bv.cols() != wv.rows()) throw DataError("linear: bias shape mismatch");
    out.rowwise() += bv.row(0);
    parents.push_back(bias->id);
  }
  return g.record(std::move(out), std::move(parents), [](Graph& gr, int self) {
    const Matrix& dy = gr.grad(self);
    const int xi = gr.parent(self, 0);
    const int wi = gr.parent(self, 1);
    if (gr.requires_grad(xi)) gr.accumulate(xi, dy * gr.value(wi));
    if (gr.requires_grad(wi)) gr.accumulate(wi, dy.transpose() * gr.value(xi));
    if (gr.num_parents(self) == 3) gr.accumulate(gr.parent(self, 2), dy.colwise().sum());
  });
}

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "add");
  return g.record(a.value() + b.value(), {a.id, b.id}, [](Graph& gr, int self) {
    gr.accumulate(gr.parent(self, 0), gr.grad(self));
    gr.accumulate(gr.parent(self, 1), gr.grad(self));
  });
}

Var sub(Var a, Var b) {
  Graph& g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  return g.record(a.value() - b.value(), {a.id, b.id}, [](Graph& gr, int self) {
    gr.accumulate(gr.parent(self, 0), gr.grad(self));
    gr.accumulate(gr.parent(self, 1), -gr.grad(self));
  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  return g.record(a.value().cwiseProduct(b.value()), {a.id, b.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const int bi = gr.parent(self, 1);
    const Matrix& dy = gr.grad(self);
    if (gr.requires_grad(ai)) gr.accumulate(ai, dy.cwiseProduct(gr.value(bi)));
    if (gr.requires_grad(bi)) gr.accumulate(bi, dy.cwiseProduct(gr.value(ai)));
  });
}

Var affine(Var a, double scale, double shift) {
  Matrix out = (a.value().array() * scale + shift).matrix();
  return a.graph->record(std::move(out), {a.id}, [scale](Graph& gr, int self) {
    gr.accumulate(gr.parent(self, 0), gr.grad(self) * scale);
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const Matrix mask = (gr.value(ai).array() > 0.0).cast<double>().matrix();
    gr.accumulate(ai, gr.grad(self).cwiseProduct(mask));
  });
}

Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const Matrix& y = gr.value(self);
    const Matrix local = (y.array() * (1.0 - y.array())).matrix();
    gr.accumulate(gr.parent(self, 0), gr.grad(self).cwiseProduct(local));
  });
}

Var square(Var a) {
  return a.graph->record(a.value().cwiseAbs2(), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    gr.accumulate(ai, 2.0 * gr.grad(self).cwiseProduct(gr.value(ai)));
  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) throw DataError("concat_cols: row count mismatch");
  Matrix out(av.rows(), av.cols() + bv.cols());
  out.leftCols(av.cols()) = av;
  out.rightCols(bv.cols()) = bv;
  const auto split = av.cols();
  return g.record(std::move(out), {a.id, b.id}, [split](Graph& gr, int self) {
    const Matrix& dy = gr.grad(self);
    gr.accumulate(gr.parent(self, 0), dy.leftCols(split));
    gr.accumulate(gr.parent(self, 1), dy.rightCols(dy.cols() - split));
  });
}

Var row_dot(Var a, Var b) {
  Graph& g = same_graph(a, b);
  check_same_shape(a.value(), b.value(), "row_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return g.record(std::move(out), {a.id, b.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const int bi = gr.parent(self, 1);
    const Eigen::VectorXd dy = gr.grad(self).col(0);
    if (gr.requires_grad(ai)) gr.accumulate(ai, gr.value(bi).array().colwise() * dy.array());
    if (gr.requires_grad(bi)) gr.accumulate(bi, gr.value(ai).array().colwise() * dy.array());
  });
}

Var mul_col(Var c, Var x) {
  Graph& g = same_graph(c, x);
  if (c.value().cols() != 1 || c.value().rows() != x.value().rows()) {
    throw DataError("mul_col: expected a B x 1 column");
  }
  Matrix out = x.value().array().colwise() * c.value().col(0).array();
  return g.record(std::move(out), {c.id, x.id}, [](Graph& gr, int self) {
    const int ci = gr.parent(self, 0);
    const int xi = gr.parent(self, 1);
    const Matrix& dy = gr.grad(self);
    if (gr.requires_grad(ci)) gr.accumulate(ci, dy.cwiseProduct(gr.value(xi)).rowwise().sum());
    if (gr.requires_grad(xi)) gr.accumulate(xi, dy.array().colwise() * gr.value(ci).col(0).array());
  });
}

Var add_col(Var x, Var c) {
  Graph& g = same_graph(x, c);
  if (c.value().cols() != 1 || c.value().rows() != x.value().rows()) {
    throw DataError("add_col: expected a B x 1 column");
  }
  Matrix out = x.value();
  out.colwise() += c.value().col(0);
  return g.record(std::move(out), {x.id, c.id}, [](Graph& gr, int self) {
    const Matrix& dy = gr.grad(self);
    gr.accumulate(gr.parent(self, 0), dy);
    gr.accumulate(gr.parent(self, 1), dy.rowwise().sum());
  });
}

Var row_mean(Var a) {
  Matrix out = a.value().rowwise().mean();
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const auto k = gr.value(ai).cols();
    Matrix d(gr.value(ai).rows(), k);
    d.colwise() = gr.grad(self).col(0) / static_cast<double>(k);
    gr.accumulate(ai, d);
  });
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const Matrix& y = gr.value(self);
    const Matrix& dy = gr.grad(self);
    const Eigen::VectorXd inner = dy.cwiseProduct(y).rowwise().sum();
    Matrix d = dy;
    d.colwise() -= inner;
    gr.accumulate(gr.parent(self, 0), d.cwiseProduct(y));
  });
}

Var logsumexp_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const Matrix& x = gr.value(ai);
    const Matrix& lse = gr.value(self);
    Matrix p = x;
    p.colwise() -= lse.col(0);
    p = p.array().exp().matrix();
    gr.accumulate(ai, p.array().colwise() * gr.grad(self).col(0).array());
  });
}

Var gather(Var a, std::span<const int> index) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(index.size()) != x.rows()) throw DataError("gather: index length mismatch");
  Matrix out(x.rows(), 1);
  std::vector<int> idx(index.begin(), index.end());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.cols()) throw DataError("gather: column index out of range");
    out(i, 0) = x(i, idx[i]);
  }
  return a.graph->record(std::move(out), {a.id}, [idx = std::move(idx)](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    Matrix d = Matrix::Zero(gr.value(ai).rows(), gr.value(ai).cols());
    const Matrix& dy = gr.grad(self);
    for (std::size_t i = 0; i < idx.size(); ++i) d(static_cast<Eigen::Index>(i), idx[i]) = dy(i, 0);
    gr.accumulate(ai, d);
  });
}

Var dueling_combine(Var value, Var advantage) {
  Graph& g = same_graph(value, advantage);
  const Matrix& v = value.value();
  const Matrix& adv = advantage.value();
  if (v.cols() != 1 || v.rows() != adv.rows()) throw DataError("dueling_combine: value must be B x 1");
  Matrix out = adv;
  const Eigen::VectorXd shift = v.col(0) - adv.rowwise().mean();
  out.colwise() += shift;
  return g.record(std::move(out), {value.id, advantage.id}, [](Graph& gr, int self) {
    const Matrix& dy = gr.grad(self);
    const Eigen::VectorXd row_sum = dy.rowwise().sum();
    gr.accumulate(gr.parent(self, 0), row_sum);
    Matrix da = dy;
    da.colwise() -= row_sum / static_cast<double>(dy.cols());
    gr.accumulate(gr.parent(self, 1), da);
  });
}

Var mean(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    const auto n = static_cast<double>(gr.value(ai).size());
    gr.accumulate(ai, Matrix::Constant(gr.value(ai).rows(), gr.value(ai).cols(), gr.grad(self)(0, 0) / n));
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->record(std::move(out), {a.id}, [](Graph& gr, int self) {
    const int ai = gr.parent(self, 0);
    gr.accumulate(ai, Matrix::Constant(gr.value(ai).rows(), gr.value(ai).cols(), gr.grad(self)(0, 0)));
  });
}

std::uint64_t stable_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Dense::Dense(const std::string& name, std::size_t in, std::size_t out, bool use_bias, std::uint64_t seed)
    : weight_(name + ".W", {out, in}), bias_(name + ".b", {out}), has_bias_(use_bias) {
  std::mt19937_64 rng(mix_seed(seed, stable_hash(name)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = dist(rng);
  if (has_bias_) {
    for (Eigen::Index i = 0; i < bias_.value.size(); ++i) bias_.value.data()[i] = dist(rng);
  }
}

Var Dense::forward(Graph& g, Var x) const {
  const Var w = g.param(weight_);
  if (has_bias_) {
    const Var b = g.param(bias_);
    return linear(x, w, &b);
  }
  return linear(x, w);
}

void Dense::collect(ParamList& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

void Dense::collect(ConstParamList& out) const {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Mlp::Mlp(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
         std::uint64_t seed) {
  std::size_t width = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers_.emplace_back(prefix + ".hidden" + std::to_string(i), width, hidden[i], true, seed);
    width = hidden[i];
  }
  layers_.emplace_back(prefix + ".out", width, out, true, seed);
}

Var Mlp::forward(Graph& g, Var x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(g, h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

void Mlp::collect(ParamList& out) {
  for (auto& l : layers_) l.collect(out);
}

void Mlp::collect(ConstParamList& out) const {
  for (const auto& l : layers_) l.collect(out);
}

DuelingQNetwork::DuelingQNetwork(const std::string& prefix, const DuelingConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg.input_dim == 0 || cfg.hidden == 0 || cfg.n_actions == 0) {
    throw ConfigError("dueling network dimensions must be positive");
  }
  std::size_t in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    trunk_.emplace_back(prefix + ".trunk" + std::to_string(i), in, cfg.hidden, true, seed);
    in = cfg.hidden;
  }
  value_ = Dense(prefix + ".value", in, 1, true, seed);
  advantage_ = Dense(prefix + ".advantage", in, cfg.n_actions, true, seed);
}

DuelingQNetwork::Output DuelingQNetwork::forward_parts(Graph& g, Var state) const {
  if (static_cast<std::size_t>(state.cols()) != cfg_.input_dim) {
    throw DataError("Q-network expects state of length " + std::to_string(cfg_.input_dim) + ", got " +
                    std::to_string(state.cols()));
  }
  Var h = state;
  for (const auto& layer : trunk_) h = relu(layer.forward(g, h));
  const Var v = value_.forward(g, h);
  const Var a = advantage_.forward(g, h);
  return Output{dueling_combine(v, a), v, a};
}

ActionValues DuelingQNetwork::forward_q(std::span<const double> state) const {
  if (state.size() != cfg_.input_dim) {
    throw DataError("Q-network expects state of length " + std::to_string(cfg_.input_dim) + ", got " +
                    std::to_string(state.size()));
  }
  if (cfg_.n_actions != static_cast<std::size_t>(kNumActions)) {
    throw DataError("forward_q requires a 25-action head");
  }
  Graph g;
  Matrix x(1, static_cast<Eigen::Index>(state.size()));
  for (std::size_t i = 0; i < state.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = state[i];
  const Var q = forward(g, g.constant(std::move(x)));
  ActionValues out{};
  for (int a = 0; a < kNumActions; ++a) out[a] = q.value()(0, a);
  return out;
}

void DuelingQNetwork::collect(ParamList& out) {
  for (auto& l : trunk_) l.collect(out);
  value_.collect(out);
  advantage_.collect(out);
}

void DuelingQNetwork::collect(ConstParamList& out) const {
  for (const auto& l : trunk_) l.collect(out);
  value_.collect(out);
  advantage_.collect(out);
}

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::rebind(ParamList params) {
  if (params.size() != params_.size()) throw ConfigError("Adam::rebind: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.rows() != m_[i].rows() || params[i]->value.cols() != m_[i].cols()) {
      throw ConfigError("Adam::rebind: shape changed for " + params[i]->name);
    }
  }
  params_ = std::move(params);
}

void Adam::step() {
  double sq_norm = 0.0;
  for (const auto* p : params_) {
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    if (!p->grad.allFinite()) throw NumericError("non-finite gradient in parameter " + p->name);
    sq_norm += p->grad.squaredNorm();
  }
  double clip_scale = 1.0;
  if (cfg_.grad_clip > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    const Matrix g = p->grad * clip_scale;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    const auto m_hat = m_[i].array() / bc1;
    const auto v_hat = v_[i].array() / bc2;
    p->value.array() -= cfg_.learning_rate * m_hat / (v_hat.sqrt() + cfg_.epsilon);
    p->zero_grad();
  }
}

void zero_grad(const ParamList& params) {
  for (const auto* p : params) p->zero_grad();
}

void copy_values(const ConstParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw ConfigError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value;
}

void soft_update(const ConstParamList& from, const ParamList& to, double tau) {
  if (from.size() != to.size()) throw ConfigError("soft_update: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    to[i]->value = (1.0 - tau) * to[i]->value + tau * from[i]->value;
  }
}

json checkpoint_json(const ConstParamList& params, const json& meta) {
  json j;
  j["format"] = "clinrl-checkpoint";
  j["version"] = 1;
  json list = json::array();
  for (const auto* p : params) {
    std::vector<double> values(p->value.data(), p->value.data() + p->value.size());
    list.push_back({{"name", p->name}, {"shape", p->shape}, {"values", std::move(values)}});
  }
  j["params"] = std::move(list);
  j["meta"] = meta.is_null() ? json::object() : meta;
  return j;
}

void load_checkpoint_json(const json& checkpoint, const ParamList& params) {
  if (checkpoint.value("format", std::string()) != "clinrl-checkpoint") {
    throw DataError("not a clinrl checkpoint");
  }
  if (checkpoint.value("version", 0) != 1) throw DataError("unsupported checkpoint version");
  std::map<std::string, const json*> by_name;
  for (const auto& entry : checkpoint.at("params")) by_name[entry.at("name").get<std::string>()] = &entry;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint is missing parameter " + p->name);
    const auto shape = it->second->at("shape").get<std::vector<std::size_t>>();
    if (shape != p->shape) throw DataError("checkpoint shape mismatch for " + p->name);
    const auto values = it->second->at("values").get<std::vector<double>>();
    if (values.size() != p->size()) throw DataError("checkpoint value count mismatch for " + p->name);
    std::copy(values.begin(), values.end(), p->value.data());
    p->zero_grad();
  }
}

void save_checkpoint(const std::filesystem::path& path, const ConstParamList& params, const json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << checkpoint_json(params, meta).dump() << '\n';
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw DataError(path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace clinrl::net
