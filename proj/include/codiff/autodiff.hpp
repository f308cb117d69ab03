#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "codiff/gemm.hpp"
#include "codiff/tensor.hpp"

namespace codiff::ad {

// Reverse-mode autodiff over Tensor<T>. Graphs are built dynamically;
// each op allocates its output and captures a backward closure. Gradients
// accumulate into Node::grad, so several backward() calls over graphs that
// share leaves behave like gradient accumulation.

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;
  bool requires_grad = false;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <typename T>
Var<T> leaf(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Topological backward pass from a scalar root (seeds grad = 1).
template <typename T>
void backward(const Var<T>& root) {
  if (!root->requires_grad) return;
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && n->grad.defined()) n->backprop(*n);
  }
}

namespace detail {

template <typename T>
std::vector<T>& scratch(size_t need) {
  static thread_local std::vector<T> buf;
  if (buf.size() < need) buf.resize(need);
  return buf;
}

template <typename T>
void im2col(const T* x, int c_in, int h, int w, int k, int stride, int pad,
            int dil, int ho, int wo, T* col) {
  for (int ci = 0; ci < c_in; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) *
                           (static_cast<int64_t>(ho) * wo);
        const T* src = x + static_cast<int64_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky * dil;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) *dst++ = T(0);
            continue;
          }
          int ix0 = -pad + kx * dil;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + ix0;
            *dst++ = (ix >= 0 && ix < w) ? src[static_cast<int64_t>(iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, int c_in, int h, int w, int k, int stride,
                int pad, int dil, int ho, int wo, T* dx) {
  for (int ci = 0; ci < c_in; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) *
                                 (static_cast<int64_t>(ho) * wo);
        T* dst = dx + static_cast<int64_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky * dil;
          if (iy < 0 || iy >= h) {
            src += wo;
            continue;
          }
          int ix0 = -pad + kx * dil;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + ix0;
            if (ix >= 0 && ix < w) dst[static_cast<int64_t>(iy) * w + ix] += src[ox];
            ++src;
          }
        }
      }
    }
  }
}

inline int conv_out(int in, int k, int stride, int pad, int dil) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

}  // namespace detail

// 2-D convolution, input {Cin,H,W}, weight {Cout,Cin,K,K}, optional bias {Cout}.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = -1,
              int dil = 1) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 4 || xs[0] != ws[1])
    throw std::invalid_argument("conv2d: bad shapes " + x->value.shape_str() +
                                " " + w->value.shape_str());
  int c_in = xs[0], h = xs[1], wd = xs[2];
  int c_out = ws[0], k = ws[2];
  if (pad < 0) pad = dil * (k - 1) / 2;  // "same" for odd k at stride 1
  int ho = detail::conv_out(h, k, stride, pad, dil);
  int wo = detail::conv_out(wd, k, stride, pad, dil);
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

  int64_t ck = static_cast<int64_t>(c_in) * k * k;
  int64_t hw = static_cast<int64_t>(ho) * wo;
  Tensor<T> out({c_out, ho, wo});
  {
    auto& col = detail::scratch<T>(static_cast<size_t>(ck * hw));
    detail::im2col(x->value.data(), c_in, h, wd, k, stride, pad, dil, ho, wo,
                   col.data());
    gemm(false, false, c_out, static_cast<int>(hw), static_cast<int>(ck), T(1),
         w->value.data(), static_cast<int>(ck), col.data(),
         static_cast<int>(hw), T(0), out.data(), static_cast<int>(hw));
    if (b) {
      for (int co = 0; co < c_out; ++co) {
        T bias = b->value[co];
        T* o = out.data() + co * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] += bias;
      }
    }
  }

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b}
                                  : std::vector<Var<T>>{x, w};
  return make_node<T>(
      std::move(out), std::move(parents),
      [x, w, b, stride, pad, dil, c_in, h, wd, c_out, k, ho, wo, ck,
       hw](Node<T>& n) {
        const T* dy = n.grad.data();
        if (b && b->requires_grad) {
          T* db = b->ensure_grad().data();
          for (int co = 0; co < c_out; ++co) {
            T acc = 0;
            const T* g = dy + co * hw;
            for (int64_t i = 0; i < hw; ++i) acc += g[i];
            db[co] += acc;
          }
        }
        bool need_x = x->requires_grad;
        bool need_w = w->requires_grad;
        if (!need_x && !need_w) return;
        if (need_w) {
          auto& col = detail::scratch<T>(static_cast<size_t>(ck * hw));
          detail::im2col(x->value.data(), c_in, h, wd, k, stride, pad, dil, ho,
                         wo, col.data());
          gemm(false, true, c_out, static_cast<int>(ck), static_cast<int>(hw),
               T(1), dy, static_cast<int>(hw), col.data(),
               static_cast<int>(hw), T(1), w->ensure_grad().data(),
               static_cast<int>(ck));
        }
        if (need_x) {
          auto& dcol = detail::scratch<T>(static_cast<size_t>(ck * hw));
          gemm(true, false, static_cast<int>(ck), static_cast<int>(hw), c_out,
               T(1), w->value.data(), static_cast<int>(ck), dy,
               static_cast<int>(hw), T(0), dcol.data(), static_cast<int>(hw));
          detail::col2im_acc(dcol.data(), c_in, h, wd, k, stride, pad, dil, ho,
                             wo, x->ensure_grad().data());
        }
      });
}

// GroupNorm over {C,H,W} with affine parameters gamma/beta of shape {C}.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups,
                  T eps = T(1e-5)) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3) throw std::invalid_argument("group_norm: expect {C,H,W}");
  int c = xs[0], h = xs[1], w = xs[2];
  if (c % groups != 0)
    throw std::invalid_argument("group_norm: channels not divisible by groups");
  int cpg = c / groups;
  int64_t hw = static_cast<int64_t>(h) * w;
  int64_t m = cpg * hw;

  auto mean = std::make_shared<std::vector<T>>(groups);
  auto invstd = std::make_shared<std::vector<T>>(groups);
  Tensor<T> out({c, h, w});
  const T* xd = x->value.data();
  for (int g = 0; g < groups; ++g) {
    const T* xg = xd + static_cast<int64_t>(g) * m;
    T mu = 0;
    for (int64_t i = 0; i < m; ++i) mu += xg[i];
    mu /= static_cast<T>(m);
    T var = 0;
    for (int64_t i = 0; i < m; ++i) {
      T d = xg[i] - mu;
      var += d * d;
    }
    var /= static_cast<T>(m);
    (*mean)[g] = mu;
    (*invstd)[g] = T(1) / std::sqrt(var + eps);
  }
  for (int ci = 0; ci < c; ++ci) {
    int g = ci / cpg;
    T mu = (*mean)[g], is = (*invstd)[g];
    T ga = gamma->value[ci], be = beta->value[ci];
    const T* xi = xd + ci * hw;
    T* oi = out.data() + ci * hw;
    for (int64_t i = 0; i < hw; ++i) oi[i] = (xi[i] - mu) * is * ga + be;
  }

  return make_node<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, groups, cpg, hw, m, mean, invstd, c](Node<T>& n) {
        const T* dy = n.grad.data();
        const T* xd = x->value.data();
        T* dga = gamma->requires_grad ? gamma->ensure_grad().data() : nullptr;
        T* dbe = beta->requires_grad ? beta->ensure_grad().data() : nullptr;
        if (dga || dbe) {
          for (int ci = 0; ci < c; ++ci) {
            int g = ci / cpg;
            T mu = (*mean)[g], is = (*invstd)[g];
            const T* xi = xd + ci * hw;
            const T* gi = dy + ci * hw;
            T sg = 0, sb = 0;
            for (int64_t i = 0; i < hw; ++i) {
              sg += gi[i] * (xi[i] - mu) * is;
              sb += gi[i];
            }
            if (dga) dga[ci] += sg;
            if (dbe) dbe[ci] += sb;
          }
        }
        if (!x->requires_grad) return;
        T* dx = x->ensure_grad().data();
        for (int g = 0; g < groups; ++g) {
          T mu = (*mean)[g], is = (*invstd)[g];
          const T* xg = xd + static_cast<int64_t>(g) * m;
          const T* dyg = dy + static_cast<int64_t>(g) * m;
          // s1 = sum(dy*gamma), s2 = sum(dy*gamma*xhat) over the group
          T s1 = 0, s2 = 0;
          for (int cc = 0; cc < cpg; ++cc) {
            T ga = gamma->value[g * cpg + cc];
            const T* xi = xg + cc * hw;
            const T* gi = dyg + cc * hw;
            for (int64_t i = 0; i < hw; ++i) {
              T dxh = gi[i] * ga;
              s1 += dxh;
              s2 += dxh * (xi[i] - mu) * is;
            }
          }
          T inv_m = T(1) / static_cast<T>(m);
          T* dxg = dx + static_cast<int64_t>(g) * m;
          for (int cc = 0; cc < cpg; ++cc) {
            T ga = gamma->value[g * cpg + cc];
            const T* xi = xg + cc * hw;
            const T* gi = dyg + cc * hw;
            T* di = dxg + cc * hw;
            for (int64_t i = 0; i < hw; ++i) {
              T xhat = (xi[i] - mu) * is;
              di[i] += is * (gi[i] * ga - inv_m * (s1 + xhat * s2));
            }
          }
        }
      });
}

template <typename T>
Var<T> silu(Var<T> x) {
  Tensor<T> out(x->value.shape());
  const T* xd = x->value.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    T s = T(1) / (T(1) + std::exp(-xd[i]));
    out[i] = xd[i] * s;
  }
  return make_node<T>(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    T* dx = x->ensure_grad().data();
    const T* xd = x->value.data();
    const T* dy = n.grad.data();
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      T s = T(1) / (T(1) + std::exp(-xd[i]));
      dx[i] += dy[i] * s * (T(1) + xd[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out(x->value.shape());
  const T* xd = x->value.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  return make_node<T>(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    T* dx = x->ensure_grad().data();
    const T* y = n.value.data();
    const T* dy = n.grad.data();
    for (int64_t i = 0; i < n.value.numel(); ++i)
      dx[i] += dy[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("add: shape mismatch " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    const T* dy = n.grad.data();
    if (a->requires_grad) {
      T* da = a->ensure_grad().data();
      for (int64_t i = 0; i < n.value.numel(); ++i) da[i] += dy[i];
    }
    if (b->requires_grad) {
      T* db = b->ensure_grad().data();
      for (int64_t i = 0; i < n.value.numel(); ++i) db[i] += dy[i];
    }
  });
}

// x {C,H,W} plus per-channel bias v {C}.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> v) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3 || v->value.numel() != xs[0])
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  int c = xs[0];
  int64_t hw = static_cast<int64_t>(xs[1]) * xs[2];
  Tensor<T> out(xs);
  for (int ci = 0; ci < c; ++ci) {
    T bv = v->value[ci];
    const T* xi = x->value.data() + ci * hw;
    T* oi = out.data() + ci * hw;
    for (int64_t i = 0; i < hw; ++i) oi[i] = xi[i] + bv;
  }
  return make_node<T>(std::move(out), {x, v}, [x, v, c, hw](Node<T>& n) {
    const T* dy = n.grad.data();
    if (x->requires_grad) {
      T* dx = x->ensure_grad().data();
      for (int64_t i = 0; i < n.value.numel(); ++i) dx[i] += dy[i];
    }
    if (v->requires_grad) {
      T* dv = v->ensure_grad().data();
      for (int ci = 0; ci < c; ++ci) {
        T acc = 0;
        const T* g = dy + ci * hw;
        for (int64_t i = 0; i < hw; ++i) acc += g[i];
        dv[ci] += acc;
      }
    }
  });
}

// x {C,H,W} times a single-channel mask m {1,H,W} broadcast over channels.
template <typename T>
Var<T> mul_mask(Var<T> x, Var<T> m) {
  const auto& xs = x->value.shape();
  const auto& ms = m->value.shape();
  if (xs.size() != 3 || ms.size() != 3 || ms[0] != 1 || ms[1] != xs[1] ||
      ms[2] != xs[2])
    throw std::invalid_argument("mul_mask: shape mismatch " +
                                x->value.shape_str() + " vs " +
                                m->value.shape_str());
  int c = xs[0];
  int64_t hw = static_cast<int64_t>(xs[1]) * xs[2];
  Tensor<T> out(xs);
  for (int ci = 0; ci < c; ++ci) {
    const T* xi = x->value.data() + ci * hw;
    T* oi = out.data() + ci * hw;
    const T* md = m->value.data();
    for (int64_t i = 0; i < hw; ++i) oi[i] = xi[i] * md[i];
  }
  return make_node<T>(std::move(out), {x, m}, [x, m, c, hw](Node<T>& n) {
    const T* dy = n.grad.data();
    const T* md = m->value.data();
    if (x->requires_grad) {
      T* dx = x->ensure_grad().data();
      for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) dx[ci * hw + i] += dy[ci * hw + i] * md[i];
    }
    if (m->requires_grad) {
      T* dm = m->ensure_grad().data();
      const T* xd = x->value.data();
      for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) dm[i] += dy[ci * hw + i] * xd[ci * hw + i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
  int h = xs[0]->value.dim(1), w = xs[0]->value.dim(2);
  int c = 0;
  for (const auto& x : xs) {
    if (x->value.rank() != 3 || x->value.dim(1) != h || x->value.dim(2) != w)
      throw std::invalid_argument("concat_channels: spatial mismatch");
    c += x->value.dim(0);
  }
  int64_t hw = static_cast<int64_t>(h) * w;
  Tensor<T> out({c, h, w});
  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t nel = x->value.numel();
    std::copy(x->value.data(), x->value.data() + nel, out.data() + off);
    off += nel;
  }
  std::vector<Var<T>> parents(xs.begin(), xs.end());
  return make_node<T>(std::move(out), std::move(parents), [xs, hw](Node<T>& n) {
    const T* dy = n.grad.data();
    int64_t off = 0;
    for (const auto& x : xs) {
      int64_t nel = x->value.numel();
      if (x->requires_grad) {
        T* dx = x->ensure_grad().data();
        for (int64_t i = 0; i < nel; ++i) dx[i] += dy[off + i];
      }
      off += nel;
    }
  });
}

// Average pooling with kernel == stride. Requires divisibility.
template <typename T>
Var<T> avg_pool(Var<T> x, int k) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3) throw std::invalid_argument("avg_pool: expect {C,H,W}");
  if (xs[1] % k != 0 || xs[2] % k != 0)
    throw std::invalid_argument("avg_pool: size not divisible by kernel");
  int c = xs[0], ho = xs[1] / k, wo = xs[2] / k, w = xs[2];
  Tensor<T> out({c, ho, wo});
  T inv = T(1) / static_cast<T>(k * k);
  for (int ci = 0; ci < c; ++ci) {
    const T* xi = x->value.data() + static_cast<int64_t>(ci) * xs[1] * w;
    T* oi = out.data() + static_cast<int64_t>(ci) * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            acc += xi[static_cast<int64_t>(oy * k + dy) * w + ox * k + dx];
        oi[static_cast<int64_t>(oy) * wo + ox] = acc * inv;
      }
  }
  return make_node<T>(std::move(out), {x}, [x, k, c, ho, wo](Node<T>& n) {
    if (!x->requires_grad) return;
    int w = x->value.dim(2);
    T inv = T(1) / static_cast<T>(k * k);
    T* dx = x->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int ci = 0; ci < c; ++ci) {
      const T* gi = dy + static_cast<int64_t>(ci) * ho * wo;
      T* di = dx + static_cast<int64_t>(ci) * x->value.dim(1) * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T g = gi[static_cast<int64_t>(oy) * wo + ox] * inv;
          for (int ddy = 0; ddy < k; ++ddy)
            for (int ddx = 0; ddx < k; ++ddx)
              di[static_cast<int64_t>(oy * k + ddy) * w + ox * k + ddx] += g;
        }
    }
  });
}

namespace detail {

struct Lerp {
  int i0, i1;
  double w0, w1;
};

// Half-pixel source coordinate with edge clamping (preserves constants).
inline Lerp lerp_coeff(int out_i, int in_n, int out_n) {
  double src = (out_i + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
  if (src < 0) src = 0;
  if (src > in_n - 1) src = in_n - 1;
  int i0 = static_cast<int>(std::floor(src));
  int i1 = i0 + 1 < in_n ? i0 + 1 : in_n - 1;
  double w1 = src - i0;
  return {i0, i1, 1.0 - w1, w1};
}

}  // namespace detail

// Bilinear resize (half-pixel centers, edges clamped).
template <typename T>
Var<T> resize_bilinear(Var<T> x, int oh, int ow) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3) throw std::invalid_argument("resize_bilinear: expect {C,H,W}");
  int c = xs[0], h = xs[1], w = xs[2];
  if (oh == h && ow == w) return x;
  std::vector<detail::Lerp> ly(oh), lx(ow);
  for (int i = 0; i < oh; ++i) ly[i] = detail::lerp_coeff(i, h, oh);
  for (int j = 0; j < ow; ++j) lx[j] = detail::lerp_coeff(j, w, ow);
  Tensor<T> out({c, oh, ow});
  for (int ci = 0; ci < c; ++ci) {
    const T* xi = x->value.data() + static_cast<int64_t>(ci) * h * w;
    T* oi = out.data() + static_cast<int64_t>(ci) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const auto& a = ly[oy];
      for (int ox = 0; ox < ow; ++ox) {
        const auto& b = lx[ox];
        double v = a.w0 * (b.w0 * xi[static_cast<int64_t>(a.i0) * w + b.i0] +
                           b.w1 * xi[static_cast<int64_t>(a.i0) * w + b.i1]) +
                   a.w1 * (b.w0 * xi[static_cast<int64_t>(a.i1) * w + b.i0] +
                           b.w1 * xi[static_cast<int64_t>(a.i1) * w + b.i1]);
        oi[static_cast<int64_t>(oy) * ow + ox] = static_cast<T>(v);
      }
    }
  }
  return make_node<T>(std::move(out), {x},
                      [x, ly, lx, c, h, w, oh, ow](Node<T>& n) {
                        if (!x->requires_grad) return;
                        T* dx = x->ensure_grad().data();
                        const T* dy = n.grad.data();
                        for (int ci = 0; ci < c; ++ci) {
                          T* di = dx + static_cast<int64_t>(ci) * h * w;
                          const T* gi = dy + static_cast<int64_t>(ci) * oh * ow;
                          for (int oy = 0; oy < oh; ++oy) {
                            const auto& a = ly[oy];
                            for (int ox = 0; ox < ow; ++ox) {
                              const auto& b = lx[ox];
                              T g = gi[static_cast<int64_t>(oy) * ow + ox];
                              di[static_cast<int64_t>(a.i0) * w + b.i0] += static_cast<T>(a.w0 * b.w0) * g;
                              di[static_cast<int64_t>(a.i0) * w + b.i1] += static_cast<T>(a.w0 * b.w1) * g;
                              di[static_cast<int64_t>(a.i1) * w + b.i0] += static_cast<T>(a.w1 * b.w0) * g;
                              di[static_cast<int64_t>(a.i1) * w + b.i1] += static_cast<T>(a.w1 * b.w1) * g;
                            }
                          }
                        }
                      });
}

// Nearest-neighbour resize (pixel-center rule, same as OpenCV INTER_NEAREST
// for integer scale factors).
template <typename T>
Var<T> resize_nearest(Var<T> x, int oh, int ow) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3) throw std::invalid_argument("resize_nearest: expect {C,H,W}");
  int c = xs[0], h = xs[1], w = xs[2];
  if (oh == h && ow == w) return x;
  std::vector<int> iy(oh), ix(ow);
  for (int i = 0; i < oh; ++i)
    iy[i] = std::min(h - 1, static_cast<int>(i * static_cast<double>(h) / oh));
  for (int j = 0; j < ow; ++j)
    ix[j] = std::min(w - 1, static_cast<int>(j * static_cast<double>(w) / ow));
  Tensor<T> out({c, oh, ow});
  for (int ci = 0; ci < c; ++ci) {
    const T* xi = x->value.data() + static_cast<int64_t>(ci) * h * w;
    T* oi = out.data() + static_cast<int64_t>(ci) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        oi[static_cast<int64_t>(oy) * ow + ox] = xi[static_cast<int64_t>(iy[oy]) * w + ix[ox]];
  }
  return make_node<T>(std::move(out), {x}, [x, iy, ix, c, h, w, oh, ow](Node<T>& n) {
    if (!x->requires_grad) return;
    T* dx = x->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int ci = 0; ci < c; ++ci) {
      T* di = dx + static_cast<int64_t>(ci) * h * w;
      const T* gi = dy + static_cast<int64_t>(ci) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
          di[static_cast<int64_t>(iy[oy]) * w + ix[ox]] += gi[static_cast<int64_t>(oy) * ow + ox];
    }
  });
}

// Dense vector transform: x {In} -> {Out} with W {Out,In}, optional b {Out}.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  int in = static_cast<int>(x->value.numel());
  const auto& ws = w->value.shape();
  if (ws.size() != 2 || ws[1] != in)
    throw std::invalid_argument("linear: shape mismatch");
  int out_n = ws[0];
  Tensor<T> out({out_n});
  for (int o = 0; o < out_n; ++o) {
    T acc = b ? b->value[o] : T(0);
    const T* wr = w->value.data() + static_cast<int64_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wr[i] * x->value[i];
    out[o] = acc;
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b}
                                  : std::vector<Var<T>>{x, w};
  return make_node<T>(std::move(out), std::move(parents),
                      [x, w, b, in, out_n](Node<T>& n) {
                        const T* dy = n.grad.data();
                        if (b && b->requires_grad) {
                          T* db = b->ensure_grad().data();
                          for (int o = 0; o < out_n; ++o) db[o] += dy[o];
                        }
                        if (w->requires_grad) {
                          T* dw = w->ensure_grad().data();
                          for (int o = 0; o < out_n; ++o)
                            for (int i = 0; i < in; ++i)
                              dw[static_cast<int64_t>(o) * in + i] += dy[o] * x->value[i];
                        }
                        if (x->requires_grad) {
                          T* dx = x->ensure_grad().data();
                          for (int o = 0; o < out_n; ++o) {
                            const T* wr = w->value.data() + static_cast<int64_t>(o) * in;
                            for (int i = 0; i < in; ++i) dx[i] += dy[o] * wr[i];
                          }
                        }
                      });
}

// All-pairs self-similarity of x {C,H,W}: out {H*W, H, W} with
// out[p,q] = <x[:,p], x[:,q]> / sqrt(C).
template <typename T>
Var<T> self_correlation(Var<T> x) {
  const auto& xs = x->value.shape();
  if (xs.size() != 3) throw std::invalid_argument("self_correlation: expect {C,H,W}");
  int c = xs[0], h = xs[1], w = xs[2];
  int p = h * w;
  T scale = T(1) / std::sqrt(static_cast<T>(c));
  Tensor<T> out({p, h, w});
  // x viewed as {C,P}: V = X^T X * scale
  gemm(true, false, p, p, c, scale, x->value.data(), p, x->value.data(), p,
       T(0), out.data(), p);
  return make_node<T>(std::move(out), {x}, [x, c, p, scale](Node<T>& n) {
    if (!x->requires_grad) return;
    const T* dv = n.grad.data();
    // dX = X * (dV + dV^T) * scale
    std::vector<T> s(static_cast<size_t>(p) * p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j)
        s[static_cast<int64_t>(i) * p + j] =
            dv[static_cast<int64_t>(i) * p + j] + dv[static_cast<int64_t>(j) * p + i];
    gemm(false, false, c, p, p, scale, x->value.data(), p, s.data(), p, T(1),
         x->ensure_grad().data(), p);
  });
}

// Multi-level grid lookup over pooled correlation volumes.
// levels[l] has shape {P, H/k_l, W/k_l}; base grid is H×W with P == H*W.
// For pixel (u,v) and offset (du,dv), samples channel u*W+v of level l at
// real coordinates (u/k_l + du, v/k_l + dv), bilinear, zero outside.
template <typename T>
Var<T> corr_lookup(const std::vector<Var<T>>& levels,
                   const std::vector<int>& factors, int radius, int h, int w) {
  if (radius < 1) throw std::invalid_argument("corr_lookup: radius must be >= 1");
  if (levels.size() != factors.size())
    throw std::invalid_argument("corr_lookup: levels/factors mismatch");
  int side = 2 * radius + 1;
  int per = side * side;
  int c_out = static_cast<int>(levels.size()) * per;
  int p = h * w;
  for (const auto& lv : levels)
    if (lv->value.dim(0) != p)
      throw std::invalid_argument("corr_lookup: level channel count mismatch");

  Tensor<T> out({c_out, h, w});
  for (size_t l = 0; l < levels.size(); ++l) {
    const auto& vol = levels[l]->value;
    int vh = vol.dim(1), vw = vol.dim(2);
    double inv_k = 1.0 / factors[l];
    for (int u = 0; u < h; ++u) {
      for (int v = 0; v < w; ++v) {
        int chan = u * w + v;
        const T* vp = vol.data() + static_cast<int64_t>(chan) * vh * vw;
        for (int du = -radius; du <= radius; ++du) {
          double cy = u * inv_k + du;
          int y0 = static_cast<int>(std::floor(cy));
          double fy = cy - y0;
          for (int dv = -radius; dv <= radius; ++dv) {
            double cx = v * inv_k + dv;
            int x0 = static_cast<int>(std::floor(cx));
            double fx = cx - x0;
            double acc = 0;
            for (int oy = 0; oy <= 1; ++oy) {
              int yy = y0 + oy;
              if (yy < 0 || yy >= vh) continue;
              double wy = oy ? fy : 1.0 - fy;
              for (int ox = 0; ox <= 1; ++ox) {
                int xx = x0 + ox;
                if (xx < 0 || xx >= vw) continue;
                double wx = ox ? fx : 1.0 - fx;
                acc += wy * wx * vp[static_cast<int64_t>(yy) * vw + xx];
              }
            }
            int oc = static_cast<int>(l) * per + (du + radius) * side + (dv + radius);
            out.at(oc, u, v) = static_cast<T>(acc);
          }
        }
      }
    }
  }

  std::vector<Var<T>> parents(levels.begin(), levels.end());
  return make_node<T>(
      std::move(out), std::move(parents),
      [levels, factors, radius, h, w, side, per](Node<T>& n) {
        for (size_t l = 0; l < levels.size(); ++l) {
          if (!levels[l]->requires_grad) continue;
          const auto& vol = levels[l]->value;
          int vh = vol.dim(1), vw = vol.dim(2);
          T* dvol = levels[l]->ensure_grad().data();
          double inv_k = 1.0 / factors[l];
          for (int u = 0; u < h; ++u) {
            for (int v = 0; v < w; ++v) {
              int chan = u * w + v;
              T* dp = dvol + static_cast<int64_t>(chan) * vh * vw;
              for (int du = -radius; du <= radius; ++du) {
                double cy = u * inv_k + du;
                int y0 = static_cast<int>(std::floor(cy));
                double fy = cy - y0;
                for (int dv = -radius; dv <= radius; ++dv) {
                  double cx = v * inv_k + dv;
                  int x0 = static_cast<int>(std::floor(cx));
                  double fx = cx - x0;
                  int oc = static_cast<int>(l) * per + (du + radius) * side + (dv + radius);
                  T g = n.grad.at(oc, u, v);
                  if (g == T(0)) continue;
                  for (int oy = 0; oy <= 1; ++oy) {
                    int yy = y0 + oy;
                    if (yy < 0 || yy >= vh) continue;
                    double wy = oy ? fy : 1.0 - fy;
                    for (int ox = 0; ox <= 1; ++ox) {
                      int xx = x0 + ox;
                      if (xx < 0 || xx >= vw) continue;
                      double wx = ox ? fx : 1.0 - fx;
                      dp[static_cast<int64_t>(yy) * vw + xx] += static_cast<T>(wy * wx) * g;
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// y = clamp(a*x + c, 0, 1); gradient passes only strictly inside the clamp.
template <typename T>
Var<T> affine_clamp01(Var<T> x, T a, T c) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    T t = a * x->value[i] + c;
    out[i] = t < T(0) ? T(0) : (t > T(1) ? T(1) : t);
  }
  return make_node<T>(std::move(out), {x}, [x, a, c](Node<T>& n) {
    if (!x->requires_grad) return;
    T* dx = x->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int64_t i = 0; i < n.value.numel(); ++i) {
      T t = a * x->value[i] + c;
      if (t > T(0) && t < T(1)) dx[i] += dy[i] * a;
    }
  });
}

// Scalar mean squared error against a constant target.
template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target) {
  if (!pred->value.same_shape(target))
    throw std::invalid_argument("mse_loss: shape mismatch");
  int64_t n = pred->value.numel();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    T d = pred->value[i] - target[i];
    acc += d * d;
  }
  Tensor<T> out({1});
  out[0] = acc / static_cast<T>(n);
  return make_node<T>(std::move(out), {pred}, [pred, target, n](Node<T>& n_) {
    if (!pred->requires_grad) return;
    T* dp = pred->ensure_grad().data();
    T g = n_.grad[0] * T(2) / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) dp[i] += g * (pred->value[i] - target[i]);
  });
}

// Scalar binary cross entropy of probabilities p against a constant target,
// with p clamped to (eps, 1-eps) for the logarithms.
template <typename T>
Var<T> bce_loss(Var<T> p, const Tensor<T>& target, T eps = T(1e-6)) {
  if (!p->value.same_shape(target))
    throw std::invalid_argument("bce_loss: shape mismatch");
  int64_t n = p->value.numel();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    T pi = p->value[i];
    pi = pi < eps ? eps : (pi > T(1) - eps ? T(1) - eps : pi);
    acc -= target[i] * std::log(pi) + (T(1) - target[i]) * std::log(T(1) - pi);
  }
  Tensor<T> out({1});
  out[0] = acc / static_cast<T>(n);
  return make_node<T>(std::move(out), {p}, [p, target, eps, n](Node<T>& n_) {
    if (!p->requires_grad) return;
    T* dp = p->ensure_grad().data();
    T g = n_.grad[0] / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
      T pi = p->value[i];
      if (pi <= eps || pi >= T(1) - eps) continue;
      dp[i] += g * (pi - target[i]) / (pi * (T(1) - pi));
    }
  });
}

// Soft IoU loss: 1 - (sum(p*g)+eps) / (sum(p)+sum(g)-sum(p*g)+eps).
template <typename T>
Var<T> soft_iou_loss(Var<T> p, const Tensor<T>& target, T eps = T(1e-6)) {
  if (!p->value.same_shape(target))
    throw std::invalid_argument("soft_iou_loss: shape mismatch");
  int64_t n = p->value.numel();
  T inter = 0, sp = 0, sg = 0;
  for (int64_t i = 0; i < n; ++i) {
    inter += p->value[i] * target[i];
    sp += p->value[i];
    sg += target[i];
  }
  T uni = sp + sg - inter;
  Tensor<T> out({1});
  out[0] = T(1) - (inter + eps) / (uni + eps);
  return make_node<T>(std::move(out), {p},
                      [p, target, eps, n, inter, uni](Node<T>& n_) {
                        if (!p->requires_grad) return;
                        T* dp = p->ensure_grad().data();
                        T g = n_.grad[0];
                        T denom = (uni + eps) * (uni + eps);
                        for (int64_t i = 0; i < n; ++i) {
                          T gi = target[i];
                          T d = (gi * (uni + eps) - (inter + eps) * (T(1) - gi)) / denom;
                          dp[i] += -g * d;
                        }
                      });
}

// y = sum_i w_i * s_i over scalar vars.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& ws) {
  if (xs.size() != ws.size())
    throw std::invalid_argument("weighted_sum: size mismatch");
  Tensor<T> out({1});
  for (size_t i = 0; i < xs.size(); ++i) out[0] += ws[i] * xs[i]->value[0];
  std::vector<Var<T>> parents(xs.begin(), xs.end());
  return make_node<T>(std::move(out), std::move(parents), [xs, ws](Node<T>& n) {
    for (size_t i = 0; i < xs.size(); ++i)
      if (xs[i]->requires_grad) xs[i]->ensure_grad()[0] += ws[i] * n.grad[0];
  });
}

// Scalar dot product with a constant tensor (test utility for grad checks).
template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& r) {
  if (!x->value.same_shape(r)) throw std::invalid_argument("dot_const: shape mismatch");
  Tensor<T> out({1});
  for (int64_t i = 0; i < x->value.numel(); ++i) out[0] += x->value[i] * r[i];
  return make_node<T>(std::move(out), {x}, [x, r](Node<T>& n) {
    if (!x->requires_grad) return;
    T* dx = x->ensure_grad().data();
    for (int64_t i = 0; i < x->value.numel(); ++i) dx[i] += n.grad[0] * r[i];
  });
}

}  // namespace codiff::ad
