#include "narf/autodiff.hpp"

#include "narf/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace narf::ad {

// ---- ParameterSet ----------------------------------------------------------

Parameter& ParameterSet::add(std::string name, Tensor init) {
  if (contains(name)) throw Error("ParameterSet: duplicate parameter '" + name + "'");
  Tensor grad(init.rows(), init.cols());
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return params_.back();
}

Parameter& ParameterSet::get(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("ParameterSet: unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterSet::get(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->get(name);
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) {
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.rows(), p.value.cols());
    p.grad.fill(0.0);
  }
}

// ---- Var / BackwardContext -------------------------------------------------

const Tensor& Var::value() const { return tape_->value(*this); }

bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const Tensor& BackwardContext::output_grad() const { return tape_.nodes_[node_].grad; }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}

Tensor* BackwardContext::input_grad(std::size_t k) {
  const int id = tape_.nodes_[node_].inputs[k];
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return &tape_.ensure_grad(id);
}

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& param) {
  Node n;
  n.op = "parameter";
  n.value = param.value;
  n.param = &param;
  n.requires_grad = options_.record_gradients;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  bool any = false;
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw Error(std::string(op) + ": operand belongs to a different tape");
    n.inputs.push_back(v.id_);
    any = any || nodes_[v.id_].requires_grad;
  }
  if (any && options_.record_gradients) {
    n.requires_grad = true;
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw Error("Tape: invalid Var");
  }
  return nodes_[v.id_];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const { return node(v).grad; }

Tensor& Tape::ensure_grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::append_kinks(std::span<const std::uint8_t> bits) {
  kinks_.insert(kinks_.end(), bits.begin(), bits.end());
}

void accumulate(ParameterSet& params, const GradientBuffer& buffer) {
  for (auto& p : params) {
    const auto it = buffer.find(&p);
    if (it != buffer.end()) p.grad.mat() += it->second.mat();
  }
}

void Tape::backward(Var loss, GradientBuffer* sink) {
  const Node& l = node(loss);
  if (l.value.rows() != 1 || l.value.cols() != 1) {
    throw ShapeError("backward: loss must be a [1x1] scalar, got " + l.value.shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!l.requires_grad) return;
  ensure_grad(loss.id_)[0] = 1.0;
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      if (sink != nullptr) {
        Tensor& acc = (*sink)[n.param];
        if (acc.empty()) {
          acc = n.grad;
        } else {
          acc.mat() += n.grad.mat();
        }
      } else {
        n.param->grad.mat() += n.grad.mat();
      }
      continue;
    }
    if (n.backward) {
      BackwardContext ctx(*this, id);
      n.backward(ctx);
    }
  }
}

// ---- operations ------------------------------------------------------------

namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& what, const Tensor& a,
                             const Tensor& b) {
  throw ShapeError(std::string(op) + ": " + what + ", got " + a.shape_string() + " and " +
                   b.shape_string());
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_fail(op, "expected equal shapes", a, b);
}

Tape& tape_of(Var v) {
  if (!v.valid()) throw Error("operation on an unbound Var");
  return *v.tape();
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_fail("matmul", "expected a.cols == b.rows", av, bv);
  Tensor out(av.rows(), bv.cols());
  out.mat().noalias() = av.mat() * bv.mat();
  return tape_of(a).record("matmul", std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.output_grad();
    if (Tensor* ga = ctx.input_grad(0)) ga->mat().noalias() += g.mat() * ctx.input(1).mat().transpose();
    if (Tensor* gb = ctx.input_grad(1)) gb->mat().noalias() += ctx.input(0).mat().transpose() * g.mat();
  });
}

Var affine(Var x, Var weight, Var bias, double scale) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.cols() != wv.rows()) shape_fail("affine", "expected x.cols == W.rows", xv, wv);
  if (bv.rows() != 1 || bv.cols() != wv.cols()) {
    shape_fail("affine", "expected bias [1 x W.cols]", bv, wv);
  }
  Tensor out(xv.rows(), wv.cols());
  out.mat().noalias() = xv.mat() * wv.mat();
  if (scale != 1.0) out.mat() *= scale;
  out.mat().rowwise() += bv.mat().row(0);
  return tape_of(x).record("affine", std::move(out), {x, weight, bias},
                           [scale](BackwardContext& ctx) {
                             const Tensor& g = ctx.output_grad();
                             if (Tensor* gx = ctx.input_grad(0)) {
                               gx->mat().noalias() += scale * (g.mat() * ctx.input(1).mat().transpose());
                             }
                             if (Tensor* gw = ctx.input_grad(1)) {
                               gw->mat().noalias() += scale * (ctx.input(0).mat().transpose() * g.mat());
                             }
                             if (Tensor* gb = ctx.input_grad(2)) {
                               gb->mat().row(0) += g.mat().colwise().sum();
                             }
                           });
}

Var add(Var a, Var b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  out.mat() += b.value().mat();
  return tape_of(a).record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = ctx.input_grad(k)) g->mat() += ctx.output_grad().mat();
    }
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  out.mat() -= b.value().mat();
  return tape_of(a).record("sub", std::move(out), {a, b}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) g->mat() += ctx.output_grad().mat();
    if (Tensor* g = ctx.input_grad(1)) g->mat() -= ctx.output_grad().mat();
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  out.mat().array() *= b.value().mat().array();
  return tape_of(a).record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
    const auto g = ctx.output_grad().mat().array();
    if (Tensor* ga = ctx.input_grad(0)) ga->mat().array() += g * ctx.input(1).mat().array();
    if (Tensor* gb = ctx.input_grad(1)) gb->mat().array() += g * ctx.input(0).mat().array();
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  out.mat() *= s;
  return tape_of(x).record("scale", std::move(out), {x}, [s](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) g->mat() += s * ctx.output_grad().mat();
  });
}

Var add_scalar(Var x, double s) {
  Tensor out = x.value();
  out.mat().array() += s;
  return tape_of(x).record("add_scalar", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) g->mat() += ctx.output_grad().mat();
  });
}

Var neg(Var x) { return scale(x, -1.0); }

Var square(Var x) {
  Tensor out = x.value();
  out.mat().array() = out.mat().array().square();
  return tape_of(x).record("square", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      g->mat().array() += 2.0 * ctx.input(0).mat().array() * ctx.output_grad().mat().array();
    }
  });
}

Var relu(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (tape.options().track_kinks) {
    std::vector<std::uint8_t> bits(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) bits[i] = xv[i] > 0.0 ? 1 : 0;
    tape.append_kinks(bits);
  }
  // The subgradient at exactly zero is taken as 0.
  return tape.record("relu", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      const Tensor& in = ctx.input(0);
      const Tensor& og = ctx.output_grad();
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] > 0.0) (*g)[i] += og[i];
      }
    }
  });
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    // Split by sign so exp never overflows.
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return tape_of(x).record("sigmoid", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      const auto y = ctx.output().mat().array();
      g->mat().array() += ctx.output_grad().mat().array() * y * (1.0 - y);
    }
  });
}

Var exp(Var x) {
  Tensor out = x.value();
  out.mat().array() = out.mat().array().exp();
  return tape_of(x).record("exp", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      g->mat().array() += ctx.output_grad().mat().array() * ctx.output().mat().array();
    }
  });
}

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.row_ptr(r);
    double* o = out.row_ptr(r);
    const double m = *std::max_element(in, in + xv.cols());
    double total = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      o[c] = std::exp(in[c] - m);
      total += o[c];
    }
    for (std::size_t c = 0; c < xv.cols(); ++c) o[c] /= total;
  }
  return tape_of(x).record("softmax_rows", std::move(out), {x}, [](BackwardContext& ctx) {
    Tensor* g = ctx.input_grad(0);
    if (g == nullptr) return;
    const Tensor& y = ctx.output();
    const Tensor& og = ctx.output_grad();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.row_ptr(r);
      const double* gr = og.row_ptr(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += yr[c] * gr[c];
      double* out = g->row_ptr(r);
      for (std::size_t c = 0; c < y.cols(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var mul_col(Var x, Var c) {
  const Tensor& xv = x.value();
  const Tensor& cv = c.value();
  if (cv.cols() != 1 || cv.rows() != xv.rows()) {
    shape_fail("mul_col", "expected c [x.rows x 1]", xv, cv);
  }
  Tensor out = xv;
  out.mat().array().colwise() *= cv.mat().col(0).array();
  return tape_of(x).record("mul_col", std::move(out), {x, c}, [](BackwardContext& ctx) {
    const Tensor& og = ctx.output_grad();
    if (Tensor* gx = ctx.input_grad(0)) {
      gx->mat().array() += og.mat().array().colwise() * ctx.input(1).mat().col(0).array();
    }
    if (Tensor* gc = ctx.input_grad(1)) {
      gc->mat().col(0).array() +=
          (og.mat().array() * ctx.input(0).mat().array()).rowwise().sum();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", "expected equal row counts", parts[0].value(), p.value());
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    out.mat().middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(p.cols())) =
        p.value().mat();
    offset += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record("concat_cols", std::move(out), std::move(inputs),
                                  [n = parts.size()](BackwardContext& ctx) {
                                    std::size_t off = 0;
                                    for (std::size_t k = 0; k < n; ++k) {
                                      const auto w = static_cast<Eigen::Index>(ctx.input(k).cols());
                                      if (Tensor* g = ctx.input_grad(k)) {
                                        g->mat() += ctx.output_grad().mat().middleCols(
                                            static_cast<Eigen::Index>(off), w);
                                      }
                                      off += static_cast<std::size_t>(w);
                                    }
                                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_fail("concat_rows", "expected equal column counts", parts[0].value(), p.value());
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.row_ptr(offset));
    offset += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record("concat_rows", std::move(out), std::move(inputs),
                                  [n = parts.size()](BackwardContext& ctx) {
                                    std::size_t off = 0;
                                    for (std::size_t k = 0; k < n; ++k) {
                                      const std::size_t r = ctx.input(k).rows();
                                      if (Tensor* g = ctx.input_grad(k)) {
                                        const double* src = ctx.output_grad().row_ptr(off);
                                        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += src[i];
                                      }
                                      off += r;
                                    }
                                  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + xv.shape_string());
  }
  Tensor out(xv.rows(), count);
  out.mat() = xv.mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return tape_of(x).record("slice_cols", std::move(out), {x}, [begin, count](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      g->mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
          ctx.output_grad().mat();
    }
  });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  Tensor out = x.value();
  out.reshape(rows, cols);
  return tape_of(x).record("reshape", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      const Tensor& og = ctx.output_grad();
      for (std::size_t i = 0; i < og.size(); ++i) (*g)[i] += og[i];
    }
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return tape_of(x).record("sum", Tensor::scalar(total), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) g->mat().array() += ctx.output_grad()[0];
  });
}

Var sum_cols(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* row = xv.row_ptr(r);
    double total = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) total += row[c];
    out[r] = total;
  }
  return tape_of(x).record("sum_cols", std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      g->mat().colwise() += ctx.output_grad().mat().col(0);
    }
  });
}

Var segment_sum_rows(Var x, std::size_t group) {
  const Tensor& xv = x.value();
  if (group == 0 || xv.rows() % group != 0) {
    throw ShapeError("segment_sum_rows: " + std::to_string(xv.rows()) +
                     " rows not divisible into groups of " + std::to_string(group));
  }
  const std::size_t n = xv.rows() / group;
  Tensor out(n, xv.cols());
  for (std::size_t s = 0; s < n; ++s) {
    double* o = out.row_ptr(s);
    for (std::size_t j = 0; j < group; ++j) {
      const double* in = xv.row_ptr(s * group + j);
      for (std::size_t c = 0; c < xv.cols(); ++c) o[c] += in[c];
    }
  }
  return tape_of(x).record("segment_sum_rows", std::move(out), {x}, [group](BackwardContext& ctx) {
    Tensor* g = ctx.input_grad(0);
    if (g == nullptr) return;
    const Tensor& og = ctx.output_grad();
    for (std::size_t r = 0; r < g->rows(); ++r) {
      const double* src = og.row_ptr(r / group);
      double* dst = g->row_ptr(r);
      for (std::size_t c = 0; c < g->cols(); ++c) dst[c] += src[c];
    }
  });
}

Var exclusive_cumsum_cols(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.row_ptr(r);
    double* o = out.row_ptr(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      o[c] = acc;
      acc += in[c];
    }
  }
  return tape_of(x).record("exclusive_cumsum_cols", std::move(out), {x}, [](BackwardContext& ctx) {
    Tensor* g = ctx.input_grad(0);
    if (g == nullptr) return;
    const Tensor& og = ctx.output_grad();
    for (std::size_t r = 0; r < og.rows(); ++r) {
      const double* gr = og.row_ptr(r);
      double* dst = g->row_ptr(r);
      // d out[c] / d in[k] = 1 for c > k.
      double acc = 0.0;
      for (std::size_t c = og.cols(); c-- > 0;) {
        dst[c] += acc;
        acc += gr[c];
      }
    }
  });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  Tensor out(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       tv.shape_string());
    }
    std::copy_n(tv.row_ptr(indices[i]), tv.cols(), out.row_ptr(i));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return tape_of(table).record("gather_rows", std::move(out), {table},
                               [idx = std::move(idx)](BackwardContext& ctx) {
                                 Tensor* g = ctx.input_grad(0);
                                 if (g == nullptr) return;
                                 const Tensor& og = ctx.output_grad();
                                 for (std::size_t i = 0; i < idx.size(); ++i) {
                                   const double* src = og.row_ptr(i);
                                   double* dst = g->row_ptr(idx[i]);
                                   for (std::size_t c = 0; c < og.cols(); ++c) dst[c] += src[c];
                                 }
                               });
}

}  // namespace narf::ad
