#include "stgcn/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "stgcn/errors.hpp"

namespace stgcn::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return ConstMatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MatMap(t.data().data() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

Eigen::Map<const Eigen::RowVectorXd> as_row(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

Eigen::Map<Eigen::RowVectorXd> as_row(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.size())}; }

Var make_result(Tensor value, std::vector<Var> parents, const char* op,
                std::function<void(Node&)> backward) {
  if (!value.all_finite()) throw NonFiniteValue(op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward);
  }
  return Var(std::move(node));
}

/// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// out[b] += s * in[b] for each of `blocks` row-major [n, c] slabs.
template <std::size_t C>
void apply_sparse_fixed(const SparseMatrix& s, const double* src, double* dst, std::size_t n, std::size_t c,
                        std::size_t blocks) {
  const std::size_t width = C ? C : c;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t off = b * n * width;
    for (Eigen::Index r = 0; r < s.outerSize(); ++r) {
      double* row = dst + off + static_cast<std::size_t>(r) * width;
      for (SparseMatrix::InnerIterator it(s, r); it; ++it) {
        const double v = it.value();
        const double* from = src + off + static_cast<std::size_t>(it.col()) * width;
        for (std::size_t k = 0; k < width; ++k) row[k] += v * from[k];
      }
    }
  }
}

void apply_sparse(const SparseMatrix& s, const Tensor& in, Tensor& out, std::size_t n, std::size_t c,
                  std::size_t blocks) {
  const double* src = in.data().data();
  double* dst = out.data().data();
  switch (c) {
    case 1: return apply_sparse_fixed<1>(s, src, dst, n, c, blocks);
    case 4: return apply_sparse_fixed<4>(s, src, dst, n, c, blocks);
    case 8: return apply_sparse_fixed<8>(s, src, dst, n, c, blocks);
    case 16: return apply_sparse_fixed<16>(s, src, dst, n, c, blocks);
    default: return apply_sparse_fixed<0>(s, src, dst, n, c, blocks);
  }
}

}  // namespace

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Tensor value, Tensor* grad_sink) {
  if (grad_sink && grad_sink->shape() != value.shape()) {
    throw ShapeMismatch("gradient sink " + shape_str(grad_sink->shape()) + " for leaf " +
                        shape_str(value.shape()));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->sink = grad_sink;
  return Var(std::move(node));
}

void Var::backward() const {
  if (value().size() != 1) throw ShapeMismatch("backward() without seed needs a single-element value");
  backward(Tensor(shape(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  if (seed.shape() != shape()) throw ShapeMismatch("backward seed shape mismatch");
  if (!requires_grad()) return;

  // Iterative post-order DFS yields a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad = Tensor();
  node_->grad_ref() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->sink) *n->sink += n->grad;
  }
}

Var matmul(const Var& a, const Var& b) {
  const auto& as = a.shape();
  if (as.size() < 2 || b.shape().size() != 2 || as.back() != b.shape()[0]) {
    throw ShapeMismatch("matmul: " + shape_str(as) + " x " + shape_str(b.shape()));
  }
  const std::size_t k = as.back(), n = b.shape()[1];
  const std::size_t m = a.value().size() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  auto out = Tensor::uninitialized(std::move(out_shape));
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return make_result(std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    auto g = as_matrix(self.grad, m, n);
    if (pa.requires_grad) as_matrix(pa.grad_ref(), m, k).noalias() += g * as_matrix(pb.value, k, n).transpose();
    if (pb.requires_grad) as_matrix(pb.grad_ref(), k, n).noalias() += as_matrix(pa.value, m, k).transpose() * g;
  });
}

Var sparse_dense_matmul(std::shared_ptr<const SparseMatrix> s, const Var& x) {
  const auto& shape = x.shape();
  if (shape.size() < 2 || static_cast<std::size_t>(s->cols()) != shape[shape.size() - 2] ||
      s->rows() != s->cols()) {
    throw ShapeMismatch("sparse_dense_matmul: " + std::to_string(s->rows()) + "x" +
                        std::to_string(s->cols()) + " with " + shape_str(shape));
  }
  const std::size_t n = shape[shape.size() - 2];
  const std::size_t c = shape.back();
  const std::size_t blocks = x.value().size() / (n * c);
  Tensor out(shape);
  apply_sparse(*s, x.value(), out, n, c, blocks);
  return make_result(std::move(out), {x}, "sparse_dense_matmul", [s, n, c, blocks](Node& self) {
    const SparseMatrix st = s->transpose();
    apply_sparse(st, self.grad, parent(self, 0).grad_ref(), n, c, blocks);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, "add", [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->grad_ref() += self.grad;
    }
  });
}

Var scalar_mul(const Var& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= c;
  return make_result(std::move(out), {x}, "scalar_mul", [c](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

Var scale_by(const Var& x, const Var& s) {
  if (s.value().size() != 1) throw ShapeMismatch("scale_by: scale must hold one element");
  const double c = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.data()) v *= c;
  return make_result(std::move(out), {x, s}, "scale_by", [](Node& self) {
    Node& px = parent(self, 0);
    Node& ps = parent(self, 1);
    const double c = ps.value[0];
    if (px.requires_grad) {
      auto& g = px.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.value[i];
      ps.grad_ref()[0] += acc;
    }
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeMismatch("concat rank mismatch");
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
    s[ax] = first[ax];
    if (s != first) throw ShapeMismatch("concat: " + shape_str(p.shape()) + " vs " + shape_str(first));
  }
  const auto split = split_axis(out_shape, ax);
  auto out = Tensor::uninitialized(out_shape);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = lens[k] * split.inner;
    const auto& src = parts[k].value();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data().data() + o * w, w, out.data().data() + o * split.len * split.inner + col);
    }
    col += w;
  }
  return make_result(std::move(out), parts, "concat", [split, lens](Node& self) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t w = lens[k] * split.inner;
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        auto& g = p.grad_ref();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = self.grad.data().data() + o * split.len * split.inner + col;
          double* dst = g.data().data() + o * w;
          for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
        }
      }
      col += w;
    }
  });
}

Var slice(const Var& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeMismatch("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                        shape_str(x.shape()));
  }
  const auto split = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t row = split.len * split.inner;
  const std::size_t off = begin * split.inner;
  auto out = Tensor::uninitialized(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.value().data().data() + o * row + off, w, out.data().data() + o * w);
  }
  return make_result(std::move(out), {x}, "slice", [split, w, row, off](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t o = 0; o < split.outer; ++o) {
      const double* src = self.grad.data().data() + o * w;
      double* dst = g.data().data() + o * row + off;
      for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, "reshape", [](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var transpose(const Var& x) {
  if (x.shape().size() != 2) throw ShapeMismatch("transpose needs rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({n, m});
  as_matrix(out, n, m) = as_matrix(x.value(), m, n).transpose();
  return make_result(std::move(out), {x}, "transpose", [m, n](Node& self) {
    as_matrix(parent(self, 0).grad_ref(), m, n) += as_matrix(self.grad, n, m).transpose();
  });
}

Var conv1d_same(const Var& x, const Var& w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 3 || ws[1] != xs[3] || ws[0] % 2 == 0) {
    throw ShapeMismatch("conv1d_same: signal " + shape_str(xs) + " kernel " + shape_str(ws));
  }
  const std::size_t batch = xs[0], steps = xs[1], m = xs[2], cin = xs[3];
  const std::size_t kt = ws[0], cout = ws[2];
  const auto pad = static_cast<long>(kt / 2);

  // im2col: row (b, t, i) holds x[b, t + k - pad, i, :] for every tap k (zero
  // outside the signal), so the whole convolution is one GEMM.
  const std::size_t rows = batch * steps * m;
  const std::size_t width = kt * cin;
  auto col = std::make_shared<Tensor>(Shape{rows, width});
  const double* src = x.value().data().data();
  double* dst = col->data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t k = 0; k < kt; ++k) {
        const long ts = static_cast<long>(t) + static_cast<long>(k) - pad;
        if (ts < 0 || ts >= static_cast<long>(steps)) continue;
        const double* from = src + ((b * steps + static_cast<std::size_t>(ts)) * m) * cin;
        double* to = dst + ((b * steps + t) * m) * width + k * cin;
        for (std::size_t i = 0; i < m; ++i) std::copy_n(from + i * cin, cin, to + i * width);
      }
    }
  }
  auto out = Tensor::uninitialized({batch, steps, m, cout});
  as_matrix(out, rows, cout).noalias() = as_matrix(*col, rows, width) * as_matrix(w.value(), width, cout);
  return make_result(std::move(out), {x, w}, "conv1d_same",
                     [col, batch, steps, m, cin, cout, kt, pad, rows, width](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pw = parent(self, 1);
                       auto g = as_matrix(self.grad, rows, cout);
                       if (pw.requires_grad) {
                         as_matrix(pw.grad_ref(), width, cout).noalias() += as_matrix(*col, rows, width).transpose() * g;
                       }
                       if (!px.requires_grad) return;
                       auto gcol = Tensor::uninitialized({rows, width});
                       as_matrix(gcol, rows, width).noalias() = g * as_matrix(pw.value, width, cout).transpose();
                       double* gx = px.grad_ref().data().data();
                       const double* from_base = gcol.data().data();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t t = 0; t < steps; ++t) {
                           for (std::size_t k = 0; k < kt; ++k) {
                             const long ts = static_cast<long>(t) + static_cast<long>(k) - pad;
                             if (ts < 0 || ts >= static_cast<long>(steps)) continue;
                             double* to = gx + ((b * steps + static_cast<std::size_t>(ts)) * m) * cin;
                             const double* from = from_base + ((b * steps + t) * m) * width + k * cin;
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t c = 0; c < cin; ++c) to[i * cin + c] += from[i * width + c];
                             }
                           }
                         }
                       }
                     });
}

Var conv1d_same_1d(const Var& signal, const Var& kernel) {
  if (signal.shape().size() != 1 || kernel.shape().size() != 1) {
    throw ShapeMismatch("conv1d_same_1d expects rank-1 signal and kernel");
  }
  const std::size_t steps = signal.shape()[0];
  auto y = conv1d_same(reshape(signal, {1, steps, 1, 1}), reshape(kernel, {kernel.shape()[0], 1, 1}));
  return reshape(y, {steps});
}

Var sigmoid(const Var& x) {
  auto out = Tensor::uninitialized(x.shape());
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Eigen::Map<const Eigen::ArrayXd> in(x.value().data().data(), n);
  // exp(-|v|) never overflows; fold the sign back in afterwards.
  const Eigen::ArrayXd e = (-in.abs()).exp();
  Eigen::Map<Eigen::ArrayXd>(out.data().data(), n) = (in >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
  return make_result(std::move(out), {x}, "sigmoid", [](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var elementwise_mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "elementwise_mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, "elementwise_mul", [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var layer_norm(const Var& x, int axis, double eps) {
  if (!(eps > 0)) throw InvalidConfig("layer_norm needs eps > 0");
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const auto sp = split_axis(x.shape(), ax);
  const double* in = x.value().data().data();
  auto out = Tensor::uninitialized(x.shape());
  double* po = out.data().data();
  std::vector<double> inv_std(sp.outer * sp.inner);
  const double len = static_cast<double>(sp.len);
  const std::size_t stride = sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const double* src = in + o * sp.len * stride + i;
      double* dst = po + o * sp.len * stride + i;
      double mean = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) mean += src[k * stride];
      mean /= len;
      double var = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const double d = src[k * stride] - mean;
        var += d * d;
      }
      var /= len;
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[o * stride + i] = r;
      for (std::size_t k = 0; k < sp.len; ++k) dst[k * stride] = (src[k * stride] - mean) * r;
    }
  }
  return make_result(std::move(out), {x}, "layer_norm", [sp, inv_std = std::move(inv_std)](Node& self) {
    double* g = parent(self, 0).grad_ref().data().data();
    const double* gy = self.grad.data().data();
    const double* y = self.value.data().data();
    const double len = static_cast<double>(sp.len);
    const std::size_t stride = sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * stride + i;
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t j = base + k * stride;
          mean_g += gy[j];
          mean_gy += gy[j] * y[j];
        }
        mean_g /= len;
        mean_gy /= len;
        const double r = inv_std[o * stride + i];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t j = base + k * stride;
          g[j] += r * (gy[j] - mean_g - y[j] * mean_gy);
        }
      }
    }
  });
}

Var scale_shift(const Var& x, const Var& gamma, const Var& beta) {
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeMismatch("scale_shift: " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                        " beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.value().size() / c;
  auto out = Tensor::uninitialized(x.shape());
  const auto row_gamma = as_row(gamma.value()).array();
  const auto row_beta = as_row(beta.value()).array();
  as_matrix(out, rows, c).array() =
      (as_matrix(x.value(), rows, c).array().rowwise() * row_gamma).rowwise() + row_beta;
  return make_result(std::move(out), {x, gamma, beta}, "scale_shift", [rows, c](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    const auto gy = as_matrix(self.grad, rows, c).array();
    if (px.requires_grad) {
      as_matrix(px.grad_ref(), rows, c).array() += gy.rowwise() * as_row(pg.value).array();
    }
    if (pg.requires_grad) {
      as_row(pg.grad_ref()).array() += (gy * as_matrix(px.value, rows, c).array()).colwise().sum();
    }
    if (pb.requires_grad) as_row(pb.grad_ref()).array() += gy.colwise().sum();
  });
}

Var mean_over_axis(const Var& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const auto sp = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(sp.len);
  const auto& in = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.len; ++k) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        out[o * sp.inner + i] += in[(o * sp.len + k) * sp.inner + i] * inv;
      }
    }
  }
  return make_result(std::move(out), {x}, "mean_over_axis", [sp, inv](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.len; ++k) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          g[(o * sp.len + k) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
        }
      }
    }
  });
}

Var abs_forward(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::abs(v);
  return make_result(std::move(out), {x}, "abs", [](Node& self) {
    Node& px = parent(self, 0);
    auto& g = px.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.value[i];
      const double sign = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
      g[i] += sign * self.grad[i];
    }
  });
}

Var softmax(const Var& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const auto sp = split_axis(x.shape(), ax);
  const auto& in = x.value();
  auto out = Tensor::uninitialized(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < sp.len; ++k) mx = std::max(mx, in[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const double e = std::exp(in[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= z;
    }
  }
  return make_result(std::move(out), {x}, "softmax", [sp](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.len; ++k) dot += self.grad[base + k * sp.inner] * self.value[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t j = base + k * sp.inner;
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Var dropout(const Var& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidConfig("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(std::move(out), {x}, "dropout", [mask = std::move(mask)](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor::scalar(s), {x}, "sum_all", [](Node& self) {
    auto& g = parent(self, 0).grad_ref();
    const double d = self.grad[0];
    for (auto& v : g.data()) v += d;
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeMismatch("cross_entropy: logits " + shape_str(s) + " for " + std::to_string(labels.size()) +
                        " labels");
  }
  const std::size_t batch = s[0], classes = s[1];
  const auto& z = logits.value();
  Tensor probs({batch, classes});
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= classes) throw ShapeMismatch("cross_entropy: label out of range");
    double mx = z[b * classes];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[b * classes + c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[b * classes + c] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(z[b * classes + c] - lse);
    loss += lse - z[b * classes + y];
  }
  loss /= static_cast<double>(batch);
  return make_result(Tensor::scalar(loss), {logits}, "cross_entropy",
                     [probs = std::move(probs), labels, batch, classes](Node& self) {
                       auto& g = parent(self, 0).grad_ref();
                       const double scale = self.grad[0] / static_cast<double>(batch);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t c = 0; c < classes; ++c) {
                           const double target = static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0;
                           g[b * classes + c] += scale * (probs[b * classes + c] - target);
                         }
                       }
                     });
}

Var glu(const Var& x) {
  const std::size_t c = x.shape().back();
  if (c % 2 != 0) throw ShapeMismatch("glu needs an even last axis, got " + shape_str(x.shape()));
  const std::size_t h = c / 2;
  const std::size_t rows = x.value().size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = h;
  auto out = Tensor::uninitialized(out_shape);
  auto gate = std::make_shared<Tensor>(Tensor::uninitialized(out_shape));
  const auto in = as_matrix(x.value(), rows, c);
  auto g = as_matrix(*gate, rows, h);
  // exp(-|v|) never overflows; fold the sign back in afterwards.
  g = (-in.rightCols(h).array().abs()).exp().matrix();
  g.array() = (in.rightCols(h).array() >= 0.0).select(1.0, g.array()) / (1.0 + g.array());
  as_matrix(out, rows, h) = (in.leftCols(h).array() * g.array()).matrix();
  return make_result(std::move(out), {x}, "glu", [gate, rows, h, c](Node& self) {
    Node& px = parent(self, 0);
    const auto gy = as_matrix(self.grad, rows, h).array();
    const auto s = as_matrix(*gate, rows, h).array();
    const auto a = as_matrix(px.value, rows, c).leftCols(h).array();
    auto gx = as_matrix(px.grad_ref(), rows, c);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto gs = (gy.row(static_cast<Eigen::Index>(r)) * s.row(static_cast<Eigen::Index>(r))).eval();
      gx.row(static_cast<Eigen::Index>(r)).leftCols(h).array() += gs;
      gx.row(static_cast<Eigen::Index>(r)).rightCols(h).array() +=
          gs * a.row(static_cast<Eigen::Index>(r)) * (1.0 - s.row(static_cast<Eigen::Index>(r)));
    }
  });
}

}  // namespace stgcn::ad
