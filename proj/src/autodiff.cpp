#include "udah/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "udah/errors.hpp"

namespace udah::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + shape_string(a) + " " + why);
}

void same_tape(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::logic_error(std::string(op) + ": operands live on different tapes");
  }
}

enum class Broadcast { kNone, kRows };

Broadcast binary_shapes(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.cols()) return Broadcast::kRows;
  shape_fail(op, a.shape(), b.shape());
}

template <typename F>
Var unary(Var a, F&& f, BackwardFn backward) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape().record(std::move(out), {a}, std::move(backward));
}

}  // namespace

// ---- Var / context -------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(*this); }

const Tensor& BackwardContext::out_value() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::in_value(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}
Tensor* BackwardContext::in_grad(std::size_t k) {
  const std::size_t id = tape_.nodes_[node_].inputs[k];
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return &tape_.grad_buffer(id);
}

// ---- Tape ----------------------------------------------------------------

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Tensor& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  Var v = leaf(p);
  params_.emplace(&p, v.id_);
  return v;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()) return n.grad;
  return Tensor(n.value.shape());
}

Tensor Tape::grad_of(const Tensor& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return Tensor(p.shape());
  return grad(Var(const_cast<Tape*>(this), it->second));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw std::logic_error("tape: input recorded on a different tape");
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor();
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss lives on a different tape");
  const Node& root = nodes_[loss.id_];
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(root.value.shape()));
  }
  if (!root.requires_grad) return;
  for (Node& n : nodes_) {
    if (!n.leaf) n.grad = Tensor();
  }
  grad_buffer(loss.id_)[0] += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.leaf || !n.requires_grad || n.grad.size() != n.value.size()) continue;
    BackwardContext ctx(*this, i);
    n.backward(ctx);
  }
}

// ---- ops -----------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape("matmul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) shape_fail("matmul", x.shape(), y.shape());
  const std::size_t n = x.dim(0), k = x.dim(1), m = y.dim(1);
  Tensor out(Shape{n, m});
  MutMap(out.data().data(), n, m).noalias() = ConstMap(x.data().data(), n, k) * ConstMap(y.data().data(), k, m);
  return a.tape().record(std::move(out), {a, b}, [n, k, m](BackwardContext& ctx) {
    ConstMap g(ctx.out_grad().data().data(), n, m);
    if (Tensor* ga = ctx.in_grad(0)) {
      MutMap(ga->data().data(), n, k).noalias() += g * ConstMap(ctx.in_value(1).data().data(), k, m).transpose();
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      MutMap(gb->data().data(), k, m).noalias() += ConstMap(ctx.in_value(0).data().data(), n, k).transpose() * g;
    }
  });
}

Var add(Var a, Var b) {
  same_tape("add", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast mode = binary_shapes("add", x, y);
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += mode == Broadcast::kRows ? y[i % c] : y[i];
  return a.tape().record(std::move(out), {a, b}, [mode, c](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[mode == Broadcast::kRows ? i % c : i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  same_tape("sub", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast mode = binary_shapes("sub", x, y);
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= mode == Broadcast::kRows ? y[i % c] : y[i];
  return a.tape().record(std::move(out), {a, b}, [mode, c](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[mode == Broadcast::kRows ? i % c : i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_tape("mul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) shape_fail("mul", x.shape(), y.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) {
      const Tensor& y = ctx.in_value(1);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      const Tensor& x = ctx.in_value(0);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
    }
  });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double v) { return v + c; }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double v) { return v * c; }, [c](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  });
}

Var relu(Var a) {
  return unary(a, [](double v) { return v > 0.0 ? v : 0.0; }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) (*ga)[i] += g[i];
    }
  });
}

Var exp(Var a) {
  return unary(a, [](double v) { return std::exp(v); }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& y = ctx.out_value();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  return unary(a, [](double v) { return std::log(v); }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
  });
}

Var square(Var a) {
  return unary(a, [](double v) { return v * v; }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * x[i] * g[i];
  });
}

Var clamp_min(Var a, double floor) {
  return unary(a, [floor](double v) { return std::max(v, floor); }, [floor](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > floor) (*ga)[i] += g[i];
    }
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    Tensor* ga = ctx.in_grad(0);
    for (double& v : ga->data()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) shape_fail("mean", a.shape(), "is empty");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var row_sum(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) shape_fail("row_sum", x.shape(), "has no last dimension");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out(out_shape);
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[r * c + j];
    out[r] = s;
  }
  return a.tape().record(std::move(out), {a}, [c](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i / c];
  });
}

Var row_softmax(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) shape_fail("row_softmax", x.shape(), "has no last dimension");
  Tensor out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = &x[r * c];
    double* o = &out[r * c];
    const double peak = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - peak));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return a.tape().record(std::move(out), {a}, [c](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& y = ctx.out_value();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape("layer_norm", x, gain);
  same_tape("layer_norm", x, bias);
  const Tensor& in = x.value();
  const std::size_t c = in.cols();
  if (in.rank() == 0) shape_fail("layer_norm", in.shape(), "has no last dimension");
  if (gain.shape() != Shape{c}) shape_fail("layer_norm", in.shape(), gain.shape());
  if (bias.shape() != Shape{c}) shape_fail("layer_norm", in.shape(), bias.shape());
  const std::size_t rows = in.rows();
  Tensor normed(in.shape());
  std::vector<double> inv_std(rows);
  Tensor out(in.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[r * c + j] - mu) * (in[r * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normed[r * c + j] = (in[r * c + j] - mu) * inv_std[r];
      out[r * c + j] = gv[j] * normed[r * c + j] + bv[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [c, rows, normed = std::move(normed), inv_std = std::move(inv_std)](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        const Tensor& gv = ctx.in_value(1);
        if (Tensor* gg = ctx.in_grad(1)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % c] += g[i] * normed[i];
        }
        if (Tensor* gb = ctx.in_grad(2)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % c] += g[i];
        }
        if (Tensor* gx = ctx.in_grad(0)) {
          const double n = static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dn = 0.0, sum_dn_n = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dn = g[r * c + j] * gv[j];
              sum_dn += dn;
              sum_dn_n += dn * normed[r * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double dn = g[r * c + j] * gv[j];
              (*gx)[r * c + j] += inv_std[r] / n * (n * dn - sum_dn - normed[r * c + j] * sum_dn_n);
            }
          }
        }
      });
}

Var dropout(Var x, double rate, bool train, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  const Tensor& in = x.value();
  const double keep = 1.0 - rate;
  std::bernoulli_distribution coin(keep);
  Tensor mask(in.shape());
  for (double& m : mask.data()) m = coin(rng) ? 1.0 / keep : 0.0;
  return mul(x, x.tape().constant(std::move(mask)));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts[0].value();
  if (first.rank() == 0) shape_fail("concat", first.shape(), "has no last dimension");
  const std::size_t rows = first.rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_tape("concat", parts[0], p);
    const Tensor& t = p.value();
    if (t.rank() != first.rank() || !std::equal(t.shape().begin(), t.shape().end() - 1, first.shape().begin())) {
      shape_fail("concat", first.shape(), t.shape());
    }
    widths.push_back(t.cols());
    total += t.cols();
  }
  Shape out_shape = first.shape();
  out_shape.back() = total;
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(&t[r * widths[k]], widths[k], &out[r * total + offset]);
    }
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), std::move(inputs), [widths, total, rows](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* gk = ctx.in_grad(k)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) (*gk)[r * widths[k] + j] += g[r * total + offset + j];
        }
      }
      offset += widths[k];
    }
  });
}

Var slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || begin > end || end > x.cols()) {
    shape_fail("slice", x.shape(), "cannot take columns [" + std::to_string(begin) + ", " + std::to_string(end) + ")");
  }
  const std::size_t c = x.cols(), w = end - begin, rows = x.rows();
  Shape out_shape = x.shape();
  out_shape.back() = w;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x[r * c + begin], w, &out[r * w]);
  return a.tape().record(std::move(out), {a}, [c, w, rows, begin](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) (*ga)[r * c + begin + j] += g[r * w + j];
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  if (x.rank() != 2) shape_fail("gather_rows", x.shape(), "is not a matrix");
  const std::size_t c = x.cols();
  for (std::size_t r : rows) {
    if (r >= x.dim(0)) shape_fail("gather_rows", x.shape(), "has no row " + std::to_string(r));
  }
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(&x[rows[i] * c], c, &out[i * c]);
  return a.tape().record(std::move(out), {a},
                         [c, idx = std::vector<std::size_t>(rows.begin(), rows.end())](BackwardContext& ctx) {
                           const Tensor& g = ctx.out_grad();
                           Tensor* ga = ctx.in_grad(0);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             for (std::size_t j = 0; j < c; ++j) (*ga)[idx[i] * c + j] += g[i * c + j];
                           }
                         });
}

Var reshape(Var a, Shape shape) {
  const Tensor& x = a.value();
  if (shape_size(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  return a.tape().record(std::move(out), {a}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var sign_ste(Var a) {
  return unary(a, [](double v) { return v >= 0.0 ? 1.0 : -1.0; }, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    Tensor* ga = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = std::tanh(x[i]);
      (*ga)[i] += g[i] * (1.0 - t * t);
    }
  });
}

}  // namespace udah::ad
