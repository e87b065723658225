#pragma once

// Tape-based reverse-mode automatic differentiation over dense 2D tensors.
//
// A Tape records every operation applied to Vars in creation order, so node
// ids are already a topological order. backward() walks the tape in reverse
// and only visits nodes that received a gradient from the loss.

#include "narf/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace narf::ad {

// A named learnable tensor together with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Ordered parameter collection with stable element addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

// Per-parameter gradient accumulators kept outside the parameters, so that
// independent tapes can run concurrently and be reduced in a fixed order.
using GradientBuffer = std::unordered_map<const Parameter*, Tensor>;

// Adds buffer gradients into Parameter::grad in ParameterSet order.
void accumulate(ParameterSet& params, const GradientBuffer& buffer);

class Tape;

// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// What a backward function sees for one node.
class BackwardContext {
 public:
  const Tensor& output() const;
  const Tensor& output_grad() const;
  const Tensor& input(std::size_t k) const;
  // Accumulator for the k-th input's gradient, or nullptr when that input
  // does not need one.
  Tensor* input_grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, int node) : tape_(tape), node_(node) {}
  Tape& tape_;
  int node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  struct Options {
    // When false no backward closures are stored; used for inference.
    bool record_gradients = true;
    // Record which side of every ReLU kink each element landed on so that
    // finite-difference checks can detect perturbations crossing a kink.
    bool track_kinks = false;
  };

  Tape() = default;
  explicit Tape(Options options) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Parameter& param);

  // Back-propagates from a 1x1 loss and adds the result into Parameter::grad
  // of every parameter bound on this tape, or into `sink` when given.
  void backward(Var loss, GradientBuffer* sink = nullptr);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target with respect to v (empty if v was
  // not reached).
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  const Options& options() const { return options_; }
  std::span<const std::uint8_t> kink_signature() const { return kinks_; }
  void append_kinks(std::span<const std::uint8_t> bits);

  // Appends a node. fn is dropped when no input requires a gradient.
  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn);

 private:
  friend class BackwardContext;
  friend class Var;

  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Tensor& ensure_grad(int id);

  Options options_;
  std::vector<Node> nodes_;
  std::vector<std::uint8_t> kinks_;
};

// ---- operations ----------------------------------------------------------
// Shapes are written [rows x cols]. Every op throws ShapeError naming itself
// and the offending shapes when operands do not fit.

Var matmul(Var a, Var b);
// scale * (x W) + b, with W [in x out] and b [1 x out] broadcast over rows.
Var affine(Var x, Var weight, Var bias, double scale = 1.0);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var neg(Var x);
Var square(Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
// Row-wise softmax with max subtraction.
Var softmax_rows(Var x);
// x [n x k] times a per-row scalar c [n x 1].
Var mul_col(Var x, Var c);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var reshape(Var x, std::size_t rows, std::size_t cols);
// Sum of all elements, [1 x 1].
Var sum(Var x);
// Per-row sum over columns, [n x 1].
Var sum_cols(Var x);
// Sums consecutive groups of `group` rows: [n x k] -> [n/group x k].
Var segment_sum_rows(Var x, std::size_t group);
// Per-row exclusive prefix sum along columns.
Var exclusive_cumsum_cols(Var x);
// Row i of the result is row indices[i] of table.
Var gather_rows(Var table, std::span<const std::size_t> indices);

}  // namespace narf::ad
