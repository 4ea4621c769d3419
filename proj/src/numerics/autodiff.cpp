#include "ctflab/numerics/autodiff.hpp"

#include <cmath>

#include "ctflab/error.hpp"

namespace ctflab::numerics {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw Error("use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const std::string& name, Tensor value) {
  if (params_.contains(name)) throw Error("parameter registered twice on tape: " + name);
  require_finite(value, "parameter");
  nodes_.push_back(Node{std::move(value), {}, nullptr, recording_, "parameter"});
  params_.emplace(name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  require_finite(value, op);
  Node node;
  node.value = std::move(value);
  node.op = op;
  if (recording_) {
    for (const Var& p : parents) {
      if (p.tape_ != this) throw Error(std::string("operand from a different tape in ") + op);
      node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
      node.parents.push_back(p.id_);
    }
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var root) {
  if (!recording_) throw Error("backward() on a tape that does not record gradients");
  if (root.tape_ != this) throw Error("backward root belongs to a different tape");
  if (nodes_.at(root.id_).value.size() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " +
                     shape_string(nodes_[root.id_].value.shape()));
  }
  std::vector<Tensor> grads(root.id_ + 1);
  std::vector<bool> has_grad(root.id_ + 1, false);
  grads[root.id_] = Tensor(nodes_[root.id_].value.shape(), 1.0);
  has_grad[root.id_] = true;

  std::vector<Tensor*> parent_grads;
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    if (!has_grad[i]) continue;
    Node& node = nodes_[i];
    if (!node.backward) continue;
    parent_grads.clear();
    for (std::size_t p : node.parents) {
      if (!nodes_[p].requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      if (!has_grad[p]) {
        grads[p] = Tensor(nodes_[p].value.shape(), 0.0);
        has_grad[p] = true;
      }
      parent_grads.push_back(&grads[p]);
    }
    node.backward(grads[i], parent_grads);
  }

  Gradients out;
  for (const auto& [name, id] : params_) {
    if (id <= root.id_ && has_grad[id]) {
      out.emplace(name, std::move(grads[id]));
    } else {
      out.emplace(name, Tensor(nodes_[id].value.shape(), 0.0));
    }
  }
  return out;
}

namespace {

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw Error("use of an unbound Var");
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return tape_of(a).record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        for (Tensor* t : pg) {
          if (!t) continue;
          for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
        }
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return tape_of(a).record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const Tensor* x = &a.value();
  const Tensor* y = &b.value();
  Tensor out(x->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*x)[i] * (*y)[i];
  return tape_of(a).record(
      std::move(out), {a, b},
      [x, y](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (*y)[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * (*x)[i];
      },
      "mul");
}

Var scale(Var a, double factor) {
  Tensor out = map_values(a.value(), [factor](double v) { return v * factor; });
  return tape_of(a).record(
      std::move(out), {a},
      [factor](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += factor * g[i];
      },
      "scale");
}

Var relu(Var a) {
  const Tensor* x = &a.value();
  Tensor out = map_values(*x, [](double v) { return v > 0.0 ? v : 0.0; });
  return tape_of(a).record(
      std::move(out), {a},
      [x](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if ((*x)[i] > 0.0) (*pg[0])[i] += g[i];
      },
      "relu");
}

namespace {

double stable_sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

Var sigmoid(Var a) {
  const Tensor* x = &a.value();
  return tape_of(a).record(
      map_values(*x, stable_sigmoid), {a},
      [x](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = stable_sigmoid((*x)[i]);
          (*pg[0])[i] += g[i] * s * (1.0 - s);
        }
      },
      "sigmoid");
}

Var exp(Var a) {
  const Tensor* x = &a.value();
  return tape_of(a).record(
      map_values(*x, [](double v) { return std::exp(v); }), {a},
      [x](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * std::exp((*x)[i]);
      },
      "exp");
}

Var log(Var a) {
  const Tensor* x = &a.value();
  for (double v : x->values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  Tensor out = map_values(*x, [](double v) { return std::log(v); });
  return tape_of(a).record(
      std::move(out), {a},
      [x](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / (*x)[i];
      },
      "log");
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return tape_of(a).record(
      Tensor::scalar(total), {a},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        const double gv = g[0];
        for (double& v : pg[0]->values()) v += gv;
      },
      "sum");
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return tape_of(a).record(
      Tensor::scalar(total / n), {a},
      [n](const Tensor& g, std::span<Tensor* const> pg) {
        const double gv = g[0] / n;
        for (double& v : pg[0]->values()) v += gv;
      },
      "mean");
}

Var add_bias(Var x, Var bias) {
  const Tensor& in = x.value();
  const Tensor& b = bias.value();
  if (b.rank() != 1 || in.rank() == 0 || in.shape().back() != b.size()) {
    throw ShapeError("add_bias: bias " + shape_string(b.shape()) + " does not match input " +
                     shape_string(in.shape()));
  }
  const std::size_t c = b.size();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + b[i % c];
  return tape_of(x).record(
      std::move(out), {x, bias},
      [c](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i % c] += g[i];
      },
      "add_bias");
}

namespace {

struct ConvGeometry {
  std::size_t h, w, cin, kh, kw, cout, oh, ow, stride, pad;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride,
                           std::size_t pad) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects HxWxC input and khxkwxCinxCout kernel, got " +
                     shape_string(input.shape()) + " and " + shape_string(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{};
  g.h = input.extent(0);
  g.w = input.extent(1);
  g.cin = input.extent(2);
  g.kh = kernel.extent(0);
  g.kw = kernel.extent(1);
  g.cout = kernel.extent(3);
  g.stride = stride;
  g.pad = pad;
  if (kernel.extent(2) != g.cin) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(input.shape()) +
                     ", kernel " + shape_string(kernel.shape()));
  }
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw ShapeError("conv2d kernel " + shape_string(kernel.shape()) +
                     " larger than padded input " + shape_string(input.shape()));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                      std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
  Tensor out(Shape{g.oh, g.ow, g.cout});
  const double* in = input.data();
  const double* k = kernel.data();
  double* o = out.data();
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      double* op = o + (oy * g.ow + ox) * g.cout;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
          const double* ip = in + (iy * g.w + ix) * g.cin;
          const double* kp = k + (ky * g.kw + kx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double v = ip[ci];
            const double* kr = kp + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) op[co] += v * kr[co];
          }
        }
      }
    }
  }
  return out;
}

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad) {
  const Tensor* in = &input.value();
  const Tensor* k = &kernel.value();
  const ConvGeometry g = conv_geometry(*in, *k, stride, pad);
  return tape_of(input).record(
      conv2d_forward(*in, *k, stride, pad), {input, kernel},
      [in, k, g](const Tensor& grad, std::span<Tensor* const> pg) {
        double* gin = pg[0] ? pg[0]->data() : nullptr;
        double* gk = pg[1] ? pg[1]->data() : nullptr;
        const double* ind = in->data();
        const double* kd = k->data();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const double* gp = grad.data() + (oy * g.ow + ox) * g.cout;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                const std::size_t ioff = (iy * g.w + ix) * g.cin;
                const std::size_t koff = (ky * g.kw + kx) * g.cin * g.cout;
                for (std::size_t ci = 0; ci < g.cin; ++ci) {
                  const double* kr = kd + koff + ci * g.cout;
                  if (gin) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < g.cout; ++co) acc += gp[co] * kr[co];
                    gin[ioff + ci] += acc;
                  }
                  if (gk) {
                    const double v = ind[ioff + ci];
                    double* gkr = gk + koff + ci * g.cout;
                    for (std::size_t co = 0; co < g.cout; ++co) gkr[co] += v * gp[co];
                  }
                }
              }
            }
          }
        }
      },
      "conv2d");
}

}  // namespace ctflab::numerics
