// SPDX-License-Identifier: Apache-2.0
#include "memprop/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace memprop {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor& grad_buffer(Node& node) {
  if (node.grad.empty() && node.value.numel() > 0) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_var(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& v : inputs) node->inputs.push_back(v.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.value().numel() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grad_buffer(*root.node())[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release intermediate gradients; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

namespace ag {

Var constant(Tensor t) { return Var(std::move(t), false); }
Var parameter(Tensor t) { return Var(std::move(t), true); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      Tensor& g = grad_buffer(*in);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[1]);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[1]);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

namespace {

// Maps a flat index of `full` onto the flat index of a broadcast operand.
struct BroadcastIndex {
  std::vector<std::size_t> full_strides;
  std::vector<std::size_t> small_strides;  // 0 on broadcast dims
  std::vector<int> full_shape;

  BroadcastIndex(const Shape& full, const Shape& small) : full_shape(full) {
    if (full.size() != small.size()) throw ShapeError("mul_bcast: rank mismatch " + shape_str(full) + " vs " + shape_str(small));
    const std::size_t r = full.size();
    full_strides.assign(r, 1);
    small_strides.assign(r, 0);
    std::size_t fs = 1, ss = 1;
    for (std::size_t k = r; k-- > 0;) {
      if (small[k] != full[k] && small[k] != 1) {
        throw ShapeError("mul_bcast: cannot broadcast " + shape_str(small) + " to " + shape_str(full));
      }
      full_strides[k] = fs;
      small_strides[k] = small[k] == 1 ? 0 : ss;
      fs *= static_cast<std::size_t>(full[k]);
      ss *= static_cast<std::size_t>(small[k]);
    }
  }

  std::size_t map(std::size_t flat) const {
    std::size_t out = 0;
    for (std::size_t k = 0; k < full_strides.size(); ++k) {
      const std::size_t idx = (flat / full_strides[k]) % static_cast<std::size_t>(full_shape[k]);
      out += idx * small_strides[k];
    }
    return out;
  }
};

}  // namespace

Var mul_bcast(const Var& a, const Var& b) {
  BroadcastIndex bi(a.shape(), b.shape());
  std::vector<std::size_t> map(a.value().numel());
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = bi.map(i);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[map[i]];
  return make_var(std::move(out), {a, b}, [map = std::move(map)](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[map[i]];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& g = grad_buffer(*self.inputs[1]);
      for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_var(std::move(out), {a}, [s](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  return make_var(std::move(out), {a}, [](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_var(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > 0.0) g[i] += self.grad[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return make_var(std::move(out), {a}, [](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_var(std::move(out), {a}, [](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var sum(const Var& a) {
  Tensor out({1}, a.value().sum());
  return make_var(std::move(out), {a}, [](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    const double s = self.grad[0];
    for (auto& v : g.values()) v += s;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_all of nothing");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Shape& ref = parts[0].shape();
  const int r = static_cast<int>(ref.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis for " + shape_str(ref));
  std::size_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= static_cast<std::size_t>(ref[static_cast<std::size_t>(k)]);
  for (int k = axis + 1; k < r; ++k) inner *= static_cast<std::size_t>(ref[static_cast<std::size_t>(k)]);
  Shape out_shape = ref;
  int total = 0;
  std::vector<int> sizes;
  std::vector<Var> inputs;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = static_cast<int>(s.size()) == r;
    for (int k = 0; ok && k < r; ++k)
      if (k != axis && s[static_cast<std::size_t>(k)] != ref[static_cast<std::size_t>(k)]) ok = false;
    if (!ok) throw ShapeError("concat: incompatible " + shape_str(s) + " vs " + shape_str(ref));
    sizes.push_back(s[static_cast<std::size_t>(axis)]);
    total += sizes.back();
    inputs.push_back(p);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& v = parts[pi].value();
    const std::size_t chunk = static_cast<std::size_t>(sizes[pi]) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(v.data() + o * chunk, v.data() + (o + 1) * chunk,
                out.data() + o * static_cast<std::size_t>(total) * inner + offset);
    }
    offset += chunk;
  }
  return make_var(std::move(out), std::move(inputs), [sizes, outer, inner, total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
      const std::size_t chunk = static_cast<std::size_t>(sizes[pi]) * inner;
      if (self.inputs[pi]->requires_grad) {
        Tensor& g = grad_buffer(*self.inputs[pi]);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * static_cast<std::size_t>(total) * inner + offset;
          double* dst = g.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

namespace {

struct ConvGeom {
  int n, ci, h, w, co, kh, kw, stride, pad, ho, wo;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::size_t krows() const { return static_cast<std::size_t>(ci) * kh * kw; }
  std::size_t cols() const { return static_cast<std::size_t>(ho) * wo; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t hw_out = g.cols();
  for (int c = 0; c < g.ci; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        double* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * hw_out;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          double* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox - g.pad + j;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
            }
          } else {
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + j;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* dx) {
  const std::size_t hw_out = g.cols();
  for (int c = 0; c < g.ci; ++c) {
    double* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const double* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * hw_out;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.wo;
          double* dst = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x.value(), 4, "conv2d input");
  require_rank(w.value(), 4, "conv2d weight");
  ConvGeom g{};
  g.n = x.dim(0);
  g.ci = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.co = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.ci) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (b.value().numel() != static_cast<std::size_t>(g.co)) throw ShapeError("conv2d: bias size mismatch");
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input too small " + shape_str(x.shape()));

  Tensor out({g.n, g.co, g.ho, g.wo});
  const std::size_t in_stride = static_cast<std::size_t>(g.ci) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.co) * g.cols();
  std::vector<double> col(g.pointwise() ? 0 : g.krows() * g.cols());
  CMapMat wm(w.value().data(), g.co, static_cast<Eigen::Index>(g.krows()));
  Eigen::Map<const Eigen::VectorXd> bv(b.value().data(), g.co);
  for (int n = 0; n < g.n; ++n) {
    const double* xn = x.value().data() + n * in_stride;
    const double* colp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.data());
      colp = col.data();
    }
    CMapMat cm(colp, static_cast<Eigen::Index>(g.krows()), static_cast<Eigen::Index>(g.cols()));
    MapMat om(out.data() + n * out_stride, g.co, static_cast<Eigen::Index>(g.cols()));
    om.noalias() = wm * cm;
    om.colwise() += bv;
  }

  return make_var(std::move(out), {x, w, b}, [g, in_stride, out_stride](Node& self) {
    Node& xn_node = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node& bn = *self.inputs[2];
    std::vector<double> col(g.pointwise() ? 0 : g.krows() * g.cols());
    std::vector<double> dcol(g.pointwise() ? 0 : g.krows() * g.cols());
    CMapMat wm(wn.value.data(), g.co, static_cast<Eigen::Index>(g.krows()));
    for (int n = 0; n < g.n; ++n) {
      CMapMat dout(self.grad.data() + n * out_stride, g.co, static_cast<Eigen::Index>(g.cols()));
      const double* xin = xn_node.value.data() + n * in_stride;
      if (wn.requires_grad) {
        const double* colp = xin;
        if (!g.pointwise()) {
          im2col(xin, g, col.data());
          colp = col.data();
        }
        CMapMat cm(colp, static_cast<Eigen::Index>(g.krows()), static_cast<Eigen::Index>(g.cols()));
        MapMat dw(grad_buffer(wn).data(), g.co, static_cast<Eigen::Index>(g.krows()));
        dw.noalias() += dout * cm.transpose();
      }
      if (bn.requires_grad) {
        Eigen::Map<Eigen::VectorXd> db(grad_buffer(bn).data(), g.co);
        db += dout.rowwise().sum();
      }
      if (xn_node.requires_grad) {
        double* dx = grad_buffer(xn_node).data() + n * in_stride;
        if (g.pointwise()) {
          MapMat dxm(dx, static_cast<Eigen::Index>(g.krows()), static_cast<Eigen::Index>(g.cols()));
          dxm.noalias() += wm.transpose() * dout;
        } else {
          MapMat dcm(dcol.data(), static_cast<Eigen::Index>(g.krows()), static_cast<Eigen::Index>(g.cols()));
          dcm.noalias() = wm.transpose() * dout;
          col2im_add(dcol.data(), g, dx);
        }
      }
    }
  });
}

Var avg_pool(const Var& x, int factor) {
  require_rank(x.value(), 4, "avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw ShapeError("avg_pool: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  }
  const int ho = h / factor, wo = w / factor;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  Tensor out({n, c, ho, wo});
  const Tensor& xv = x.value();
  for (int p = 0; p < n * c; ++p) {
    const double* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) dst[(y / factor) * wo + xx / factor] += src[y * w + xx];
    for (int i = 0; i < ho * wo; ++i) dst[i] *= inv;
  }
  return make_var(std::move(out), {x}, [n, c, h, w, ho, wo, factor, inv](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int p = 0; p < n * c; ++p) {
      const double* src = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) dst[y * w + xx] += inv * src[(y / factor) * wo + xx / factor];
    }
  });
}

namespace {

// Source taps for bilinear x2 along one axis of length n.
struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

Taps bilinear_taps(int n) {
  Taps t;
  const int m = 2 * n;
  t.i0.resize(m);
  t.i1.resize(m);
  t.w0.resize(m);
  t.w1.resize(m);
  for (int o = 0; o < m; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > n - 1) lo = n - 1;
    const int hi = std::min(lo + 1, n - 1);
    const double frac = src - lo;
    t.i0[o] = lo;
    t.i1[o] = hi;
    t.w0[o] = 1.0 - frac;
    t.w1[o] = frac;
  }
  return t;
}

}  // namespace

Var upsample_bilinear2x(const Var& x) {
  require_rank(x.value(), 4, "upsample_bilinear2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  Taps ty = bilinear_taps(h), tx = bilinear_taps(w);
  Tensor out({n, c, ho, wo});
  const Tensor& xv = x.value();
  for (int p = 0; p < n * c; ++p) {
    const double* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const double* r0 = src + ty.i0[oy] * w;
      const double* r1 = src + ty.i1[oy] * w;
      for (int ox = 0; ox < wo; ++ox) {
        const double top = tx.w0[ox] * r0[tx.i0[ox]] + tx.w1[ox] * r0[tx.i1[ox]];
        const double bot = tx.w0[ox] * r1[tx.i0[ox]] + tx.w1[ox] * r1[tx.i1[ox]];
        dst[oy * wo + ox] = ty.w0[oy] * top + ty.w1[oy] * bot;
      }
    }
  }
  return make_var(std::move(out), {x}, [n, c, h, w, ho, wo, ty, tx](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int p = 0; p < n * c; ++p) {
      const double* src = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        double* r0 = dst + ty.i0[oy] * w;
        double* r1 = dst + ty.i1[oy] * w;
        for (int ox = 0; ox < wo; ++ox) {
          const double go = src[oy * wo + ox];
          const double gt = ty.w0[oy] * go, gb = ty.w1[oy] * go;
          r0[tx.i0[ox]] += tx.w0[ox] * gt;
          r0[tx.i1[ox]] += tx.w1[ox] * gt;
          r1[tx.i0[ox]] += tx.w0[ox] * gb;
          r1[tx.i1[ox]] += tx.w1[ox] * gb;
        }
      }
    }
  });
}

Var to_tokens(const Var& x) {
  require_rank(x.value(), 4, "to_tokens");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, hw, c});
  const Tensor& xv = x.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < hw; ++t)
        out[(static_cast<std::size_t>(b) * hw + t) * c + ch] = xv[(static_cast<std::size_t>(b) * c + ch) * hw + t];
  return make_var(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < hw; ++t)
          g[(static_cast<std::size_t>(b) * c + ch) * hw + t] += self.grad[(static_cast<std::size_t>(b) * hw + t) * c + ch];
  });
}

Var from_tokens(const Var& t, int height, int width) {
  require_rank(t.value(), 3, "from_tokens");
  const int n = t.dim(0), hw = t.dim(1), c = t.dim(2);
  if (hw != height * width) throw ShapeError("from_tokens: token count does not match grid");
  Tensor out({n, c, height, width});
  const Tensor& tv = t.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < hw; ++i)
        out[(static_cast<std::size_t>(b) * c + ch) * hw + i] = tv[(static_cast<std::size_t>(b) * hw + i) * c + ch];
  return make_var(std::move(out), {t}, [n, c, hw](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < hw; ++i)
          g[(static_cast<std::size_t>(b) * hw + i) * c + ch] += self.grad[(static_cast<std::size_t>(b) * c + ch) * hw + i];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x.value(), 3, "linear input");
  const int n = x.dim(0), t = x.dim(1), ci = x.dim(2);
  if (w.value().rank() != 2 || w.dim(0) != ci) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const int co = w.dim(1);
  if (b.value().numel() != static_cast<std::size_t>(co)) throw ShapeError("linear: bias size mismatch");
  Tensor out({n, t, co});
  CMapMat xm(x.value().data(), static_cast<Eigen::Index>(n) * t, ci);
  CMapMat wm(w.value().data(), ci, co);
  MapMat om(out.data(), static_cast<Eigen::Index>(n) * t, co);
  om.noalias() = xm * wm;
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), co);
  return make_var(std::move(out), {x, w, b}, [n, t, ci, co](Node& self) {
    CMapMat dout(self.grad.data(), static_cast<Eigen::Index>(n) * t, co);
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node& bn = *self.inputs[2];
    CMapMat xm(xn.value.data(), static_cast<Eigen::Index>(n) * t, ci);
    CMapMat wm(wn.value.data(), ci, co);
    if (xn.requires_grad) {
      MapMat dx(grad_buffer(xn).data(), static_cast<Eigen::Index>(n) * t, ci);
      dx.noalias() += dout * wm.transpose();
    }
    if (wn.requires_grad) {
      MapMat dw(grad_buffer(wn).data(), ci, co);
      dw.noalias() += xm.transpose() * dout;
    }
    if (bn.requires_grad) {
      Eigen::Map<Eigen::RowVectorXd> db(grad_buffer(bn).data(), co);
      db += dout.colwise().sum();
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  require_rank(a.value(), 3, "bmm lhs");
  require_rank(b.value(), 3, "bmm rhs");
  const int n = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
  if (b.dim(0) != n || b.dim(1) != q) throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, p, r});
  for (int k = 0; k < n; ++k) {
    CMapMat am(a.value().data() + static_cast<std::size_t>(k) * p * q, p, q);
    CMapMat bm(b.value().data() + static_cast<std::size_t>(k) * q * r, q, r);
    MapMat om(out.data() + static_cast<std::size_t>(k) * p * r, p, r);
    om.noalias() = am * bm;
  }
  return make_var(std::move(out), {a, b}, [n, p, q, r](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    for (int k = 0; k < n; ++k) {
      CMapMat dout(self.grad.data() + static_cast<std::size_t>(k) * p * r, p, r);
      CMapMat am(an.value.data() + static_cast<std::size_t>(k) * p * q, p, q);
      CMapMat bm(bn.value.data() + static_cast<std::size_t>(k) * q * r, q, r);
      if (an.requires_grad) {
        MapMat da(grad_buffer(an).data() + static_cast<std::size_t>(k) * p * q, p, q);
        da.noalias() += dout * bm.transpose();
      }
      if (bn.requires_grad) {
        MapMat db(grad_buffer(bn).data() + static_cast<std::size_t>(k) * q * r, q, r);
        db.noalias() += am.transpose() * dout;
      }
    }
  });
}

Var bmm_nt(const Var& a, const Var& b) {
  require_rank(a.value(), 3, "bmm_nt lhs");
  require_rank(b.value(), 3, "bmm_nt rhs");
  const int n = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(1);
  if (b.dim(0) != n || b.dim(2) != q) throw ShapeError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({n, p, r});
  for (int k = 0; k < n; ++k) {
    CMapMat am(a.value().data() + static_cast<std::size_t>(k) * p * q, p, q);
    CMapMat bm(b.value().data() + static_cast<std::size_t>(k) * r * q, r, q);
    MapMat om(out.data() + static_cast<std::size_t>(k) * p * r, p, r);
    om.noalias() = am * bm.transpose();
  }
  return make_var(std::move(out), {a, b}, [n, p, q, r](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    for (int k = 0; k < n; ++k) {
      CMapMat dout(self.grad.data() + static_cast<std::size_t>(k) * p * r, p, r);
      CMapMat am(an.value.data() + static_cast<std::size_t>(k) * p * q, p, q);
      CMapMat bm(bn.value.data() + static_cast<std::size_t>(k) * r * q, r, q);
      if (an.requires_grad) {
        MapMat da(grad_buffer(an).data() + static_cast<std::size_t>(k) * p * q, p, q);
        da.noalias() += dout * bm;
      }
      if (bn.requires_grad) {
        MapMat db(grad_buffer(bn).data() + static_cast<std::size_t>(k) * r * q, r, q);
        db.noalias() += dout.transpose() * am;
      }
    }
  });
}

Var neg_sq_dist(const Var& q, const Var& k, double scale) {
  require_rank(q.value(), 3, "neg_sq_dist query");
  require_rank(k.value(), 3, "neg_sq_dist keys");
  const int n = q.dim(0), p = q.dim(1), c = q.dim(2), r = k.dim(1);
  if (k.dim(0) != n || k.dim(2) != c) throw ShapeError("neg_sq_dist: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  Tensor out({n, p, r});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < p; ++i) {
      const double* qi = qv.data() + (static_cast<std::size_t>(b) * p + i) * c;
      for (int j = 0; j < r; ++j) {
        const double* kj = kv.data() + (static_cast<std::size_t>(b) * r + j) * c;
        double d = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double diff = qi[ch] - kj[ch];
          d += diff * diff;
        }
        out[(static_cast<std::size_t>(b) * p + i) * r + j] = -scale * d;
      }
    }
  }
  return make_var(std::move(out), {q, k}, [n, p, c, r, scale](Node& self) {
    Node& qn = *self.inputs[0];
    Node& kn = *self.inputs[1];
    const Tensor& qv = qn.value;
    const Tensor& kv = kn.value;
    double* dq = qn.requires_grad ? grad_buffer(qn).data() : nullptr;
    double* dk = kn.requires_grad ? grad_buffer(kn).data() : nullptr;
    for (int b = 0; b < n; ++b) {
      for (int i = 0; i < p; ++i) {
        const double* qi = qv.data() + (static_cast<std::size_t>(b) * p + i) * c;
        for (int j = 0; j < r; ++j) {
          const double go = self.grad[(static_cast<std::size_t>(b) * p + i) * r + j];
          if (go == 0.0) continue;
          const double* kj = kv.data() + (static_cast<std::size_t>(b) * r + j) * c;
          const double f = -2.0 * scale * go;
          for (int ch = 0; ch < c; ++ch) {
            const double diff = qi[ch] - kj[ch];
            if (dq) dq[(static_cast<std::size_t>(b) * p + i) * c + ch] += f * diff;
            if (dk) dk[(static_cast<std::size_t>(b) * r + j) * c + ch] -= f * diff;
          }
        }
      }
    }
  });
}

Var softmax_last(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) throw ShapeError("softmax_last on scalar");
  const int last = xv.dim(-1);
  if (last < 1) throw ShapeError("softmax_last over empty axis");
  const std::size_t rows = xv.numel() / static_cast<std::size_t>(last);
  Tensor out = xv;
  for (std::size_t rI = 0; rI < rows; ++rI) {
    double* row = out.data() + rI * last;
    const double mx = *std::max_element(row, row + last);
    double s = 0.0;
    for (int j = 0; j < last; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j < last; ++j) row[j] /= s;
  }
  return make_var(std::move(out), {x}, [rows, last](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (std::size_t rI = 0; rI < rows; ++rI) {
      const double* y = self.value.data() + rI * last;
      const double* gy = self.grad.data() + rI * last;
      double dot = 0.0;
      for (int j = 0; j < last; ++j) dot += y[j] * gy[j];
      double* gx = g.data() + rI * last;
      for (int j = 0; j < last; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

constexpr double kBinomial5[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

// One separable blur pass along rows (axis 0) or columns (axis 1) of every
// HxW plane. `adjoint` scatters instead of gathers.
void blur_pass(const double* src, double* dst, int planes, int h, int w, bool along_rows, bool adjoint) {
  const int n = along_rows ? h : w;
  for (int p = 0; p < planes; ++p) {
    const double* s = src + static_cast<std::size_t>(p) * h * w;
    double* d = dst + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int o = along_rows ? y : x;
        for (int k = 0; k < 5; ++k) {
          const int src_i = reflect_index(o + k - 2, n);
          const int sy = along_rows ? src_i : y;
          const int sx = along_rows ? x : src_i;
          if (!adjoint) {
            d[y * w + x] += kBinomial5[k] * s[sy * w + sx];
          } else {
            d[sy * w + sx] += kBinomial5[k] * s[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace

Var blur5_reflect(const Var& x) {
  require_rank(x.value(), 4, "blur5_reflect");
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor tmp(x.shape());
  Tensor out(x.shape());
  blur_pass(x.value().data(), tmp.data(), planes, h, w, false, false);
  blur_pass(tmp.data(), out.data(), planes, h, w, true, false);
  return make_var(std::move(out), {x}, [planes, h, w](Node& self) {
    Tensor tmp(self.value.shape());
    blur_pass(self.grad.data(), tmp.data(), planes, h, w, true, true);
    blur_pass(tmp.data(), grad_buffer(*self.inputs[0]).data(), planes, h, w, false, true);
  });
}

Var subsample2(const Var& x) {
  require_rank(x.value(), 4, "subsample2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 1) / 2, wo = (w + 1) / 2;
  Tensor out({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] = x.value()[(static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx];
  return make_var(std::move(out), {x}, [n, c, h, w, ho, wo](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx)
          g[(static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx] += self.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
  });
}

Var zero_upsample2(const Var& x) {
  require_rank(x.value(), 4, "zero_upsample2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  Tensor out({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::size_t>(p) * ho + 2 * y) * wo + 2 * xx] = 4.0 * x.value()[(static_cast<std::size_t>(p) * h + y) * w + xx];
  return make_var(std::move(out), {x}, [n, c, h, w, ho, wo](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          g[(static_cast<std::size_t>(p) * h + y) * w + xx] += 4.0 * self.grad[(static_cast<std::size_t>(p) * ho + 2 * y) * wo + 2 * xx];
  });
}

Var crop_even(const Var& x) {
  require_rank(x.value(), 4, "crop_even");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h - h % 2, wo = w - w % 2;
  if (ho == h && wo == w) return x;
  Tensor out({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] = x.value()[(static_cast<std::size_t>(p) * h + y) * w + xx];
  return make_var(std::move(out), {x}, [n, c, h, w, ho, wo](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx)
          g[(static_cast<std::size_t>(p) * h + y) * w + xx] += self.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
  });
}

}  // namespace ag
}  // namespace memprop
