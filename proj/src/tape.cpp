#include "subnetscope/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

#include "subnetscope/error.hpp"

namespace subnetscope {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

const Tape& owner(Var v) {
  if (v.tape == nullptr) throw TapeError("variable is not attached to a tape");
  v.tape->check_owned(v);
  return *v.tape;
}

Tape& mutable_owner(Var v) { return const_cast<Tape&>(owner(v)); }

void same_tape(Var a, Var b, std::string_view op) {
  if (a.tape != b.tape) throw TapeError(std::string(op) + ": operands recorded on different tapes");
}

}  // namespace

std::string_view to_string(BackwardRule rule) {
  switch (rule) {
    case BackwardRule::standard: return "standard";
    case BackwardRule::deconv: return "deconv";
    case BackwardRule::guided: return "guided";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw TapeError("variable is detached from this tape (id " + std::to_string(v.id) + ")");
  }
}

Var Tape::constant(Tensor value) { return record("constant", {}, std::move(value), {}); }

Var Tape::variable(Tensor value) {
  Var v = record("variable", {}, std::move(value), {});
  nodes_[v.id].requires_grad = true;
  return v;
}

const Tensor& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id].requires_grad;
}

Var Tape::record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": produced non-finite values");
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  for (Var in : inputs) {
    check_owned(in);
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

GradientMap Tape::backward(Var loss) const {
  check_owned(loss);
  const Tensor& v = nodes_[loss.id].value;
  if (v.numel() != 1) throw TapeError("backward: loss must be scalar, got shape " + shape_to_string(v.shape()));
  return backward(loss, Tensor(v.shape(), 1.0));
}

GradientMap Tape::backward(Var output, const Tensor& seed) const {
  check_owned(output);
  if (seed.shape() != nodes_[output.id].value.shape()) {
    shape_mismatch("backward seed", seed.shape(), nodes_[output.id].value.shape());
  }
  GradientMap map;
  map.tape_ = this;
  map.grads_.resize(nodes_.size());
  if (!nodes_[output.id].requires_grad) return map;
  map.grads_[output.id] = seed;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!map.grads_[id] || !node.backward) continue;
    BackwardContext ctx(this, &node, &*map.grads_[id], &map.grads_);
    node.backward(ctx);
  }
  return map;
}

const Tensor* GradientMap::find(Var v) const {
  if (v.tape != tape_ || v.id >= grads_.size() || !grads_[v.id]) return nullptr;
  return &*grads_[v.id];
}

const Tensor& GradientMap::at(Var v) const {
  const Tensor* g = find(v);
  if (g == nullptr) throw TapeError("no gradient recorded for node " + std::to_string(v.id));
  return *g;
}

const Tensor& BackwardContext::input(std::size_t i) const { return tape_->nodes_[node_->inputs.at(i)].value; }

bool BackwardContext::needs_grad(std::size_t i) const { return tape_->nodes_[node_->inputs.at(i)].requires_grad; }

Tensor& BackwardContext::grad(std::size_t i) {
  std::size_t id = node_->inputs.at(i);
  auto& slot = (*grads_)[id];
  if (!slot) slot = Tensor(tape_->nodes_[id].value.shape(), 0.0);
  return *slot;
}

// ---------------------------------------------------------------------------
// Primitive operations

namespace ops {

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  Tape& t = mutable_owner(a);
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.shape() != y.shape()) shape_mismatch("add", x.shape(), y.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
  return t.record("add", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      Tensor& d = ctx.grad(k);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b, "sub");
  Tape& t = mutable_owner(a);
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.shape() != y.shape()) shape_mismatch("sub", x.shape(), y.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= y[i];
  return t.record("sub", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.grad(0);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.grad(1);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  Tape& t = mutable_owner(a);
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.shape() != y.shape()) shape_mismatch("mul", x.shape(), y.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
  return t.record("mul", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.grad(0);
      const Tensor& y = ctx.input(1);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * y[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.grad(1);
      const Tensor& x = ctx.input(0);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = mutable_owner(a);
  Tensor out = t.value(a);
  for (double& v : out.storage()) v *= s;
  return t.record("scale", {a}, std::move(out), [s](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& d = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += s * g[i];
  });
}

Var abs(Var a) {
  Tape& t = mutable_owner(a);
  Tensor out = t.value(a);
  for (double& v : out.storage()) v = std::abs(v);
  return t.record("abs", {a}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& x = ctx.input(0);
    Tensor& d = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      d[i] += s * g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  Tape& t = mutable_owner(a);
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) shape_mismatch("matmul", x.shape(), y.shape());
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out(Shape{m, n});
  MapMat(out.data().data(), m, n).noalias() = ConstMapMat(x.data().data(), m, k) * ConstMapMat(y.data().data(), k, n);
  return t.record("matmul", {a, b}, std::move(out), [m, k, n](BackwardContext& ctx) {
    ConstMapMat g(ctx.grad_output().data().data(), m, n);
    if (ctx.needs_grad(0)) {
      MapMat(ctx.grad(0).data().data(), m, k).noalias() += g * ConstMapMat(ctx.input(1).data().data(), k, n).transpose();
    }
    if (ctx.needs_grad(1)) {
      MapMat(ctx.grad(1).data().data(), k, n).noalias() += ConstMapMat(ctx.input(0).data().data(), m, k).transpose() * g;
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, k, kh, kw, oh, ow;
  int stride, pad;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  if (stride <= 0) throw AttributeError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (pad < 0) throw AttributeError("conv2d: padding must be non-negative, got " + std::to_string(pad));
  if (x.rank() != 4 || kernel.rank() != 4 || x.dim(1) != kernel.dim(1)) {
    shape_mismatch("conv2d", x.shape(), kernel.shape());
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0, stride, pad};
  const long eh = static_cast<long>(g.h) + 2 * pad - static_cast<long>(g.kh);
  const long ew = static_cast<long>(g.w) + 2 * pad - static_cast<long>(g.kw);
  if (eh < 0 || ew < 0) shape_mismatch("conv2d", x.shape(), kernel.shape());
  g.oh = static_cast<std::size_t>(eh / stride + 1);
  g.ow = static_cast<std::size_t>(ew / stride + 1);
  return g;
}

// Fills cols ((C*kh*kw) x (oh*ow)) for sample n.
void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const double* xc = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long ii = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
          double* dst = row + oi * g.ow;
          if (ii < 0 || ii >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = xc + ii * g.w;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long jj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
            dst[oj] = (jj < 0 || jj >= static_cast<long>(g.w)) ? 0.0 : src[jj];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* cols, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    double* xc = dx + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long ii = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          double* dst = xc + ii * g.w;
          const double* src = row + oi * g.ow;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long jj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
            if (jj >= 0 && jj < static_cast<long>(g.w)) dst[jj] += src[oj];
          }
        }
      }
    }
  }
}

void conv_forward_im2col(const ConvGeom& g, const Tensor& x, const Tensor& kernel, Tensor& out) {
  const std::size_t patch = g.c * g.kh * g.kw;
  const std::size_t plane = g.oh * g.ow;
  std::vector<double> cols(patch * plane);
  ConstMapMat wk(kernel.data().data(), g.k, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x.data().data() + n * g.c * g.h * g.w, cols.data());
    MapMat(out.data().data() + n * g.k * plane, g.k, plane).noalias() = wk * ConstMapMat(cols.data(), patch, plane);
  }
}

void conv_forward_direct(const ConvGeom& g, const Tensor& x, const Tensor& kernel, Tensor& out) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t ko = 0; ko < g.k; ++ko)
      for (std::size_t oi = 0; oi < g.oh; ++oi)
        for (std::size_t oj = 0; oj < g.ow; ++oj) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < g.c; ++ci)
            for (std::size_t ki = 0; ki < g.kh; ++ki)
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const long ii = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
                const long jj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(g.h) || jj >= static_cast<long>(g.w)) continue;
                acc += x[((n * g.c + ci) * g.h + ii) * g.w + jj] * kernel[((ko * g.c + ci) * g.kh + ki) * g.kw + kj];
              }
          out[((n * g.k + ko) * g.oh + oi) * g.ow + oj] = acc;
        }
}

void conv_backward_direct(const ConvGeom& g, BackwardContext& ctx) {
  const Tensor& gout = ctx.grad_output();
  const Tensor& x = ctx.input(0);
  const Tensor& kernel = ctx.input(1);
  Tensor* dx = ctx.needs_grad(0) ? &ctx.grad(0) : nullptr;
  Tensor* dk = ctx.needs_grad(1) ? &ctx.grad(1) : nullptr;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t ko = 0; ko < g.k; ++ko)
      for (std::size_t oi = 0; oi < g.oh; ++oi)
        for (std::size_t oj = 0; oj < g.ow; ++oj) {
          const double go = gout[((n * g.k + ko) * g.oh + oi) * g.ow + oj];
          for (std::size_t ci = 0; ci < g.c; ++ci)
            for (std::size_t ki = 0; ki < g.kh; ++ki)
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const long ii = static_cast<long>(oi) * g.stride - g.pad + static_cast<long>(ki);
                const long jj = static_cast<long>(oj) * g.stride - g.pad + static_cast<long>(kj);
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(g.h) || jj >= static_cast<long>(g.w)) continue;
                const std::size_t xi = ((n * g.c + ci) * g.h + ii) * g.w + jj;
                const std::size_t wi = ((ko * g.c + ci) * g.kh + ki) * g.kw + kj;
                if (dx) (*dx)[xi] += go * kernel[wi];
                if (dk) (*dk)[wi] += go * x[xi];
              }
        }
}

void conv_backward_im2col(const ConvGeom& g, BackwardContext& ctx) {
  const std::size_t patch = g.c * g.kh * g.kw;
  const std::size_t plane = g.oh * g.ow;
  const bool want_x = ctx.needs_grad(0);
  const bool want_k = ctx.needs_grad(1);
  std::vector<double> cols(patch * plane);
  const Tensor& gout = ctx.grad_output();
  ConstMapMat wk(ctx.input(1).data().data(), g.k, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    ConstMapMat gn(gout.data().data() + n * g.k * plane, g.k, plane);
    if (want_k) {
      im2col(g, ctx.input(0).data().data() + n * g.c * g.h * g.w, cols.data());
      MapMat(ctx.grad(1).data().data(), g.k, patch).noalias() += gn * ConstMapMat(cols.data(), patch, plane).transpose();
    }
    if (want_x) {
      MapMat(cols.data(), patch, plane).noalias() = wk.transpose() * gn;
      col2im(g, cols.data(), ctx.grad(0).data().data() + n * g.c * g.h * g.w);
    }
  }
}

}  // namespace

Var conv2d(Var x, Var kernel, int stride, int padding, ConvAlgo algo) {
  same_tape(x, kernel, "conv2d");
  Tape& t = mutable_owner(x);
  const Tensor& xv = t.value(x);
  const Tensor& kv = t.value(kernel);
  const ConvGeom g = conv_geometry(xv, kv, stride, padding);
  Tensor out(Shape{g.n, g.k, g.oh, g.ow});
  if (algo == ConvAlgo::im2col) {
    conv_forward_im2col(g, xv, kv, out);
  } else {
    conv_forward_direct(g, xv, kv, out);
  }
  return t.record("conv2d", {x, kernel}, std::move(out), [g, algo](BackwardContext& ctx) {
    if (algo == ConvAlgo::im2col) {
      conv_backward_im2col(g, ctx);
    } else {
      conv_backward_direct(g, ctx);
    }
  });
}

Var maxpool2x2(Var x) {
  Tape& t = mutable_owner(x);
  const Tensor& v = t.value(x);
  if (v.rank() != 4 || v.dim(2) < 2 || v.dim(3) < 2) {
    throw ShapeError("maxpool2x2: expected N x C x H x W with H, W >= 2, got " + shape_to_string(v.shape()));
  }
  const std::size_t n = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out(Shape{n, c, oh, ow});
  std::vector<std::uint32_t> argmax(out.numel());
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = v.data().data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            std::size_t idx = (2 * i + di) * w + 2 * j + dj;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
  }
  return t.record("maxpool2x2", {x}, std::move(out), [argmax = std::move(argmax)](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& d = ctx.grad(0);
    for (std::size_t o = 0; o < g.numel(); ++o) d[argmax[o]] += g[o];
  });
}

Var relu(Var x) {
  Tape& t = mutable_owner(x);
  Tensor out = t.value(x);
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return t.record("relu", {x}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& in = ctx.input(0);
    Tensor& d = ctx.grad(0);
    switch (ctx.rule()) {
      case BackwardRule::standard:
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += in[i] > 0.0 ? g[i] : 0.0;
        break;
      case BackwardRule::deconv:
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] > 0.0 ? g[i] : 0.0;
        break;
      case BackwardRule::guided:
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += (g[i] > 0.0 && in[i] > 0.0) ? g[i] : 0.0;
        break;
    }
  });
}

namespace {

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Var sigmoid(Var x) {
  Tape& t = mutable_owner(x);
  Tensor out = t.value(x);
  for (double& v : out.storage()) v = stable_sigmoid(v);
  return t.record("sigmoid", {x}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.output();
    Tensor& d = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax(Var x) {
  Tape& t = mutable_owner(x);
  const Tensor& v = t.value(x);
  if (v.rank() != 2) throw ShapeError("softmax: expected 2-D input, got " + shape_to_string(v.shape()));
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  Tensor out(v.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = v.data().data() + r * cols;
    double* dst = out.data().data() + r * cols;
    const double mx = *std::max_element(src, src + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (dst[j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) dst[j] /= z;
  }
  return t.record("softmax", {x}, std::move(out), [rows, cols](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.output();
    Tensor& d = ctx.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
    }
  });
}

Var sum(Var x) {
  Tape& t = mutable_owner(x);
  double s = 0.0;
  for (double v : t.value(x).data()) s += v;
  return t.record("sum", {x}, Tensor::scalar(s), [](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    for (double& v : ctx.grad(0).storage()) v += g;
  });
}

Var mean(Var x) {
  Tape& t = mutable_owner(x);
  const Tensor& v = t.value(x);
  double s = 0.0;
  for (double e : v.data()) s += e;
  const double n = static_cast<double>(v.numel());
  return t.record("mean", {x}, Tensor::scalar(s / n), [n](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0] / n;
    for (double& e : ctx.grad(0).storage()) e += g;
  });
}

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Tape& t = mutable_owner(xs[0]);
  const Shape& first = t.value(xs[0]).shape();
  if (axis >= first.size()) throw AttributeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (Var v : xs) {
    same_tape(xs[0], v, "concat");
    const Shape& s = t.value(v).shape();
    if (s.size() != first.size()) shape_mismatch("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) shape_mismatch("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
  const std::size_t inner = shape_numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
  Tensor out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (Var v : xs) {
    const Tensor& in = t.value(v);
    const std::size_t wdt = in.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.data().data() + o * wdt, wdt, out.data().data() + o * out_shape[axis] * inner + offset);
    }
    widths.push_back(wdt);
    offset += wdt;
  }
  const std::size_t row = out_shape[axis] * inner;
  return t.record("concat", std::vector<Var>(xs.begin(), xs.end()), std::move(out),
                  [widths, outer, row](BackwardContext& ctx) {
                    const Tensor& g = ctx.grad_output();
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      if (ctx.needs_grad(k)) {
                        Tensor& d = ctx.grad(k);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t i = 0; i < widths[k]; ++i) d[o * widths[k] + i] += g[o * row + off + i];
                      }
                      off += widths[k];
                    }
                  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = mutable_owner(x);
  Tensor out = t.value(x).reshaped(std::move(shape));
  return t.record("reshape", {x}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& d = ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
  });
}

namespace {

// Returns (outer, channels, inner) for broadcasting a per-channel vector on axis 1.
std::array<std::size_t, 3> channel_layout(std::string_view op, const Tensor& x, const Tensor& v) {
  if (x.rank() < 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) shape_mismatch(op, x.shape(), v.shape());
  std::size_t inner = 1;
  for (std::size_t d = 2; d < x.rank(); ++d) inner *= x.dim(d);
  return {x.dim(0), x.dim(1), inner};
}

}  // namespace

Var add_bias(Var x, Var b) {
  same_tape(x, b, "add_bias");
  Tape& t = mutable_owner(x);
  const auto [outer, ch, inner] = channel_layout("add_bias", t.value(x), t.value(b));
  Tensor out = t.value(x);
  const Tensor& bv = t.value(b);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = out.data().data() + (o * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  return t.record("add_bias", {x, b}, std::move(out), [outer, ch, inner](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.grad(0);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.grad(1);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < ch; ++c) {
          const double* p = g.data().data() + (o * ch + c) * inner;
          double s = 0.0;
          for (std::size_t i = 0; i < inner; ++i) s += p[i];
          d[c] += s;
        }
    }
  });
}

Var channel_scale(Var x, Var gate) {
  same_tape(x, gate, "channel_scale");
  Tape& t = mutable_owner(x);
  const auto [outer, ch, inner] = channel_layout("channel_scale", t.value(x), t.value(gate));
  Tensor out = t.value(x);
  const Tensor& gv = t.value(gate);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = out.data().data() + (o * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] *= gv[c];
    }
  return t.record("channel_scale", {x, gate}, std::move(out), [outer, ch, inner](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      const Tensor& gv = ctx.input(1);
      Tensor& d = ctx.grad(0);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t base = (o * ch + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) d[base + i] += g[base + i] * gv[c];
        }
    }
    if (ctx.needs_grad(1)) {
      const Tensor& xv = ctx.input(0);
      Tensor& d = ctx.grad(1);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t base = (o * ch + c) * inner;
          double s = 0.0;
          for (std::size_t i = 0; i < inner; ++i) s += g[base + i] * xv[base + i];
          d[c] += s;
        }
    }
  });
}

Var gather_cols(Var x, std::vector<std::size_t> cols) {
  Tape& t = mutable_owner(x);
  const Tensor& v = t.value(x);
  if (v.rank() != 2 || cols.size() != v.dim(0)) {
    throw ShapeError("gather_cols: expected N x K input with N indices, got " + shape_to_string(v.shape()) +
                     " and " + std::to_string(cols.size()) + " indices");
  }
  const std::size_t k = v.dim(1);
  Tensor out(Shape{cols.size()});
  for (std::size_t n = 0; n < cols.size(); ++n) {
    if (cols[n] >= k) throw AttributeError("gather_cols: column " + std::to_string(cols[n]) + " out of range");
    out[n] = v[n * k + cols[n]];
  }
  return t.record("gather_cols", {x}, std::move(out), [cols = std::move(cols), k](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& d = ctx.grad(0);
    for (std::size_t n = 0; n < cols.size(); ++n) d[n * k + cols[n]] += g[n];
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = mutable_owner(logits);
  const Tensor& v = t.value(logits);
  if (v.rank() != 2 || labels.size() != v.dim(0)) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_to_string(v.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor probs(v.shape());
  double loss = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= k) {
      throw AttributeError("softmax_cross_entropy: label " + std::to_string(lab[r]) + " out of range");
    }
    const double* src = v.data().data() + r * k;
    double* p = probs.data().data() + r * k;
    const double mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (p[j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[j] /= z;
    loss += -(src[lab[r]] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  return t.record("softmax_cross_entropy", {logits}, Tensor::scalar(loss),
                  [probs = std::move(probs), lab = std::move(lab), n, k](BackwardContext& ctx) {
                    const double g = ctx.grad_output()[0] / static_cast<double>(n);
                    Tensor& d = ctx.grad(0);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < k; ++j) {
                        const double target = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
                        d[r * k + j] += g * (probs[r * k + j] - target);
                      }
                  });
}

Var bce_with_logits(Var student_logits, Var target_probs, double clamp) {
  same_tape(student_logits, target_probs, "bce_with_logits");
  Tape& t = mutable_owner(student_logits);
  const Tensor& s = t.value(student_logits);
  const Tensor& a = t.value(target_probs);
  if (s.shape() != a.shape()) shape_mismatch("bce_with_logits", s.shape(), a.shape());
  Tensor out(s.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double b = std::clamp(stable_sigmoid(s[i]), clamp, 1.0 - clamp);
    out[i] = -a[i] * std::log(b) - (1.0 - a[i]) * std::log(1.0 - b);
  }
  return t.record("bce_with_logits", {student_logits, target_probs}, std::move(out), [clamp](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& s = ctx.input(0);
    const Tensor& a = ctx.input(1);
    // touch the student gradient so fully clamped inputs still get an explicit zero
    if (ctx.needs_grad(0)) ctx.grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double raw = stable_sigmoid(s[i]);
      const double b = std::clamp(raw, clamp, 1.0 - clamp);
      if (ctx.needs_grad(0) && raw == b) ctx.grad(0)[i] += g[i] * (b - a[i]);
      if (ctx.needs_grad(1)) ctx.grad(1)[i] += g[i] * (std::log(1.0 - b) - std::log(b));
    }
  });
}

}  // namespace ops

Var forward_op(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n, std::string_view name) {
    if (in.size() != n) {
      throw ShapeError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2, "add"); return ops::add(in[0], in[1]);
    case OpKind::sub: need(2, "sub"); return ops::sub(in[0], in[1]);
    case OpKind::mul: need(2, "mul"); return ops::mul(in[0], in[1]);
    case OpKind::matmul: need(2, "matmul"); return ops::matmul(in[0], in[1]);
    case OpKind::conv2d: need(2, "conv2d"); return ops::conv2d(in[0], in[1], attrs.stride, attrs.padding, attrs.conv_algo);
    case OpKind::maxpool2x2: need(1, "maxpool2x2"); return ops::maxpool2x2(in[0]);
    case OpKind::relu: need(1, "relu"); return ops::relu(in[0]);
    case OpKind::sigmoid: need(1, "sigmoid"); return ops::sigmoid(in[0]);
    case OpKind::softmax: need(1, "softmax"); return ops::softmax(in[0]);
    case OpKind::mean: need(1, "mean"); return ops::mean(in[0]);
    case OpKind::sum: need(1, "sum"); return ops::sum(in[0]);
    case OpKind::scale: need(1, "scale"); return ops::scale(in[0], attrs.factor);
    case OpKind::concat: return ops::concat(in, attrs.axis);
    case OpKind::add_bias: need(2, "add_bias"); return ops::add_bias(in[0], in[1]);
    case OpKind::channel_scale: need(2, "channel_scale"); return ops::channel_scale(in[0], in[1]);
    case OpKind::abs: need(1, "abs"); return ops::abs(in[0]);
  }
  throw AttributeError("forward_op: unknown op kind");
}

}  // namespace subnetscope
