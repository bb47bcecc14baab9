#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clinrl/common.hpp"

namespace clinrl::net {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor. Weights are stored as rows x cols, biases as a
/// single row. `grad` is scratch space filled by Graph::backward and cleared
/// by the optimizer.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  Matrix value;
  mutable Matrix grad;

  ParamTensor() = default;
  ParamTensor(std::string name, std::vector<std::size_t> shape);

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

using ParamList = std::vector<ParamTensor*>;
using ConstParamList = std::vector<const ParamTensor*>;

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape over dense matrices (rows are batch entries). Nodes are
/// appended in evaluation order, so reverse insertion order is a valid
/// topological order for the backward sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  Var constant(Matrix value);
  /// Leaf whose gradient is kept and can be read back with grad().
  Var input(Matrix value);
  /// Leaf bound to a parameter; backward() adds into param.grad.
  Var param(const ParamTensor& p);

  Var record(Matrix value, std::vector<int> parents, BackwardFn backward);

  const Matrix& value(int id) const;
  const Matrix& grad(int id) const;
  const Matrix& grad(Var v) const { return grad(v.id); }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  int parent(int id, std::size_t k) const { return nodes_[id].parents[k]; }
  std::size_t num_parents(int id) const { return nodes_[id].parents.size(); }

  /// Adds delta into the gradient buffer of node id if it needs one.
  void accumulate(int id, const Matrix& delta);

  /// Seeds d(loss)/d(loss) = 1 and sweeps back. loss must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    std::vector<int> parents;
    BackwardFn backward;
    const ParamTensor* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Differentiable operations. Shapes follow Eigen (rows x cols).

/// x * W^T + b, with W stored out x in and b a 1 x out row (bias optional).
Var linear(Var x, Var weight, const Var* bias = nullptr);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// scale * a + shift, elementwise.
Var affine(Var a, double scale, double shift);
Var relu(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var concat_cols(Var a, Var b);
/// Rowwise dot product of two B x k matrices, giving B x 1.
Var row_dot(Var a, Var b);
/// Scales each row of x (B x k) by the matching entry of c (B x 1).
Var mul_col(Var c, Var x);
/// x (B x k) plus c (B x 1) broadcast across columns.
Var add_col(Var x, Var c);
Var row_mean(Var a);
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);
/// Picks column index[i] of row i, giving B x 1.
Var gather(Var a, std::span<const int> index);
/// Q = V + A - mean_a A, V is B x 1 and A is B x K.
Var dueling_combine(Var value, Var advantage);
Var mean(Var a);
Var sum(Var a);

/// Fan-in scaled uniform initialisation, U(-1/sqrt(in), 1/sqrt(in)).
class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, bool use_bias, std::uint64_t seed);

  Var forward(Graph& g, Var x) const;
  std::size_t in_dim() const { return static_cast<std::size_t>(weight_.value.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight_.value.rows()); }
  bool has_bias() const { return has_bias_; }

  ParamTensor& weight() { return weight_; }
  const ParamTensor& weight() const { return weight_; }
  ParamTensor& bias() { return bias_; }
  const ParamTensor& bias() const { return bias_; }

  void collect(ParamList& out);
  void collect(ConstParamList& out) const;

 private:
  ParamTensor weight_;
  ParamTensor bias_;
  bool has_bias_ = true;
};

/// Plain ReLU perceptron: hidden layers followed by a linear output layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
      std::uint64_t seed);

  Var forward(Graph& g, Var x) const;
  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  std::vector<Dense>& layers() { return layers_; }

  void collect(ParamList& out);
  void collect(ConstParamList& out) const;

 private:
  std::vector<Dense> layers_;
};

struct DuelingConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 512;
  std::size_t n_layers = 3;
  std::size_t n_actions = kNumActions;
};

/// ReLU trunk followed by a scalar value stream and a per-action advantage
/// stream, combined as V + A - mean(A).
class DuelingQNetwork {
 public:
  DuelingQNetwork() = default;
  DuelingQNetwork(const std::string& prefix, const DuelingConfig& cfg, std::uint64_t seed);

  struct Output {
    Var q;
    Var value;
    Var advantage;
  };

  Output forward_parts(Graph& g, Var state) const;
  Var forward(Graph& g, Var state) const { return forward_parts(g, state).q; }
  /// Single-state convenience; throws DataError on a length mismatch.
  ActionValues forward_q(std::span<const double> state) const;

  const DuelingConfig& config() const { return cfg_; }
  std::vector<Dense>& trunk() { return trunk_; }
  Dense& value_head() { return value_; }
  Dense& advantage_head() { return advantage_; }
  const std::vector<Dense>& trunk() const { return trunk_; }
  const Dense& value_head() const { return value_; }
  const Dense& advantage_head() const { return advantage_; }

  void collect(ParamList& out);
  void collect(ConstParamList& out) const;

 private:
  DuelingConfig cfg_;
  std::vector<Dense> trunk_;
  Dense value_;
  Dense advantage_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 0.0;
};

/// Bias-corrected Adam. step() consumes and clears the parameter gradients.
class Adam {
 public:
  Adam() = default;
  Adam(ParamList params, AdamConfig cfg);

  void step();
  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  /// Rebinds to a structurally identical parameter list (after a model copy).
  void rebind(ParamList params);

 private:
  ParamList params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig cfg_;
  long t_ = 0;
};

void zero_grad(const ParamList& params);
void copy_values(const ConstParamList& from, const ParamList& to);
/// to <- (1 - tau) * to + tau * from
void soft_update(const ConstParamList& from, const ParamList& to, double tau);

/// JSON checkpoint: {"format", "version", "params": [{name, shape, values}], "meta"}.
nlohmann::json checkpoint_json(const ConstParamList& params, const nlohmann::json& meta = {});
/// Loads values by name; every parameter in `params` must be present with the same shape.
void load_checkpoint_json(const nlohmann::json& checkpoint, const ParamList& params);
void save_checkpoint(const std::filesystem::path& path, const ConstParamList& params,
                     const nlohmann::json& meta = {});
nlohmann::json read_json_file(const std::filesystem::path& path);

std::uint64_t stable_hash(const std::string& text);

}  // namespace clinrl::net
