#include "lbc/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace lbc {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);

}  // namespace lbc

namespace lbc::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Index mapping for size-1 broadcasting between two same-rank operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;  // empty when a matches out exactly
  std::vector<std::size_t> b_index;
};

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  if (shape_numel(in) == 1) {
    std::fill(idx.begin(), idx.end(), 0);
    return idx;
  }
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = in[d] == 1 ? 0 : s;
    s *= static_cast<std::size_t>(in[d]);
  }
  std::vector<std::int64_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      pos += in_stride[d];
      if (counter[d] < out[d]) break;
      pos -= in_stride[d] * static_cast<std::size_t>(out[d]);
      counter[d] = 0;
    }
  }
  return idx;
}

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    return bc;
  }
  const bool a_scalar = shape_numel(a) == 1;
  const bool b_scalar = shape_numel(b) == 1;
  if (b_scalar && !a_scalar) {
    bc.out = a;
  } else if (a_scalar && !b_scalar) {
    bc.out = b;
  } else if (a.size() == b.size()) {
    bc.out.resize(a.size());
    for (std::size_t d = 0; d < a.size(); ++d) {
      if (a[d] == b[d] || b[d] == 1) {
        bc.out[d] = a[d];
      } else if (a[d] == 1) {
        bc.out[d] = b[d];
      } else {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
      }
    }
  } else {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                         shape_str(b));
  }
  if (a != bc.out) bc.a_index = broadcast_index(a, bc.out);
  if (b != bc.out) bc.b_index = broadcast_index(b, bc.out);
  return bc;
}

template <typename T, typename F, typename GA, typename GB>
Var<T> binary_op(const char* name, const Var<T>& a, const Var<T>& b, F f, GA dfa, GB dfb) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape(), name));
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(bc->out);
  const std::size_t n = out.numel();
  const bool ai = !bc->a_index.empty();
  const bool bi = !bc->b_index.empty();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[ai ? bc->a_index[i] : i], bv[bi ? bc->b_index[i] : i]);
  }
  return make_op<T>(name, std::move(out), {a, b}, [a, b, bc, dfa, dfb](const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const bool ai = !bc->a_index.empty();
    const bool bi = !bc->b_index.empty();
    const std::size_t n = g.numel();
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = ai ? bc->a_index[i] : i;
        const std::size_t ib = bi ? bc->b_index[i] : i;
        ga[ia] += g[i] * dfa(av[ia], bv[ib]);
      }
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = ai ? bc->a_index[i] : i;
        const std::size_t ib = bi ? bc->b_index[i] : i;
        gb[ib] += g[i] * dfb(av[ia], bv[ib]);
      }
    }
  });
}

// f computes the value, df the local derivative from (input, output).
template <typename T, typename F, typename DF>
Var<T> unary_op(const char* name, const Var<T>& a, F f, DF df) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
  auto out_ptr = std::make_shared<Tensor<T>>(out);
  return make_op<T>(name, std::move(out), {a}, [a, df, out_ptr](const Tensor<T>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_buffer();
    const auto& av = a.value();
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * df(av[i], (*out_ptr)[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> make_op(const char* name, Tensor<T> value, const std::vector<Var<T>>& inputs,
               std::function<void(const Tensor<T>&)> backward) {
  ensure_finite(value, name);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->is_leaf = false;
  n->op = name;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) n->parents.push_back(in.shared());
    }
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  for (T v : b.value().data()) {
    if (v == T(0)) throw NumericError("div: division by zero");
  }
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary_op<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return unary_op<T>(
      "add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary_op<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  for (T v : a.value().data()) {
    if (v < T(0)) throw NumericError("sqrt: negative input");
  }
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return unary_op<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  for (T v : a.value().data()) {
    if (!(v > T(0))) throw NumericError("log: nonpositive input");
  }
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary_op<T>(
      "leaky_relu", a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, T c) {
  return unary_op<T>(
      "clamp_min", a, [c](T x) { return x < c ? c : x; },
      [c](T x, T) { return x < c ? T(0) : T(1); });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary_op<T>(
      "clamp", a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x < lo || x > hi) ? T(0) : T(1); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  if (a.numel() == 0) throw DimensionError("sum: empty tensor");
  double acc = 0.0;
  for (T v : a.value().data()) acc += static_cast<double>(v);
  return make_op<T>("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](const Tensor<T>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_buffer();
    const T gv = g[0];
    for (auto& v : ga.data()) v += gv;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  double acc = 0.0;
  for (T v : a.value().data()) acc += static_cast<double>(v);
  const double n = static_cast<double>(a.numel());
  return make_op<T>("mean", Tensor<T>::scalar(static_cast<T>(acc / n)), {a},
                    [a, n](const Tensor<T>& g) {
                      if (!a.requires_grad()) return;
                      auto& ga = a.node()->grad_buffer();
                      const T gv = static_cast<T>(static_cast<double>(g[0]) / n);
                      for (auto& v : ga.data()) v += gv;
                    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return make_op<T>("reshape", a.value().reshaped(std::move(shape)), {a},
                    [a](const Tensor<T>& g) {
                      if (!a.requires_grad()) return;
                      auto& ga = a.node()->grad_buffer();
                      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, std::int64_t begin, std::int64_t end) {
  if (a.shape().size() != 3 || begin < 0 || end > a.shape()[0] || begin >= end) {
    throw DimensionError("slice_channels: bad range on " + shape_str(a.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(a.shape()[1] * a.shape()[2]);
  const std::size_t off = static_cast<std::size_t>(begin) * plane;
  const std::size_t len = static_cast<std::size_t>(end - begin) * plane;
  const auto& av = a.value();
  std::vector<T> data(av.data().begin() + off, av.data().begin() + off + len);
  Tensor<T> out(Shape{end - begin, a.shape()[1], a.shape()[2]}, std::move(data));
  return make_op<T>("slice_channels", std::move(out), {a}, [a, off, len](const Tensor<T>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < len; ++i) ga[off + i] += g[i];
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int padding,
              const TapMask& mask) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.size() != 3 || ws.size() != 4 || ws[1] != is[0]) {
    throw DimensionError("conv2d: input " + shape_str(is) + " incompatible with weight " +
                         shape_str(ws));
  }
  const std::int64_t cin = is[0], h = is[1], w = is[2];
  const std::int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  if (bias && (bias.shape().size() != 1 || bias.shape()[0] != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                         std::to_string(cout) + " output channels");
  }
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(kh * kw)) {
    throw DimensionError("conv2d: tap mask size does not match kernel");
  }
  const std::int64_t ho = h + 2 * padding - kh + 1;
  const std::int64_t wo = w + 2 * padding - kw + 1;
  if (padding < 0 || ho <= 0 || wo <= 0) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(is));
  }

  struct Tap {
    std::int64_t dy, dx, k;
  };
  std::vector<Tap> taps;
  for (std::int64_t y = 0; y < kh; ++y) {
    for (std::int64_t x = 0; x < kw; ++x) {
      const std::int64_t k = y * kw + x;
      if (mask.empty() || mask[static_cast<std::size_t>(k)]) taps.push_back({y, x, k});
    }
  }
  const std::int64_t nt = static_cast<std::int64_t>(taps.size());
  const std::int64_t p = ho * wo;
  const std::int64_t rows = cin * nt;
  const bool direct = (kh == 1 && kw == 1 && padding == 0 && nt == 1);

  // Column matrix [cin * nt, p]; row ci * nt + t holds tap t of channel ci.
  auto col = std::make_shared<std::vector<T>>();
  if (!direct) {
    col->assign(static_cast<std::size_t>(rows * p), T(0));
    const auto& iv = input.value();
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      for (std::int64_t t = 0; t < nt; ++t) {
        T* dst = col->data() + (ci * nt + t) * p;
        const std::int64_t oy = taps[t].dy - padding, ox = taps[t].dx - padding;
        for (std::int64_t y = 0; y < ho; ++y) {
          const std::int64_t sy = y + oy;
          if (sy < 0 || sy >= h) continue;
          const T* src = iv.data().data() + (ci * h + sy) * w;
          for (std::int64_t x = 0; x < wo; ++x) {
            const std::int64_t sx = x + ox;
            if (sx >= 0 && sx < w) dst[y * wo + x] = src[sx];
          }
        }
      }
    }
  }
  auto wmat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(cout * rows));
  {
    const auto& wv = weight.value();
    for (std::int64_t co = 0; co < cout; ++co) {
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        for (std::int64_t t = 0; t < nt; ++t) {
          (*wmat)[static_cast<std::size_t>(co * rows + ci * nt + t)] =
              wv[static_cast<std::size_t>((co * cin + ci) * kh * kw + taps[t].k)];
        }
      }
    }
  }

  Tensor<T> out(Shape{cout, ho, wo});
  {
    const T* colp = direct ? input.value().data().data() : col->data();
    CMapMat<T> cm(colp, rows, p);
    CMapMat<T> wm(wmat->data(), cout, rows);
    MapMat<T> om(out.data().data(), cout, p);
    om.noalias() = wm * cm;
    if (bias) {
      const auto& bv = bias.value();
      for (std::int64_t co = 0; co < cout; ++co) om.row(co).array() += bv[co];
    }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(bias);
  return make_op<T>(
      "conv2d", std::move(out), inputs,
      [=](const Tensor<T>& g) {
        CMapMat<T> gm(g.data().data(), cout, p);
        const T* colp = direct ? input.value().data().data() : col->data();
        CMapMat<T> cm(colp, rows, p);
        if (bias && bias.requires_grad()) {
          auto& gb = bias.node()->grad_buffer();
          for (std::int64_t co = 0; co < cout; ++co) gb[co] += gm.row(co).sum();
        }
        if (weight.requires_grad()) {
          RowMat<T> gw = gm * cm.transpose();
          auto& gwt = weight.node()->grad_buffer();
          for (std::int64_t co = 0; co < cout; ++co) {
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              for (std::int64_t t = 0; t < nt; ++t) {
                gwt[static_cast<std::size_t>((co * cin + ci) * kh * kw + taps[t].k)] +=
                    gw(co, ci * nt + t);
              }
            }
          }
        }
        if (input.requires_grad()) {
          CMapMat<T> wm(wmat->data(), cout, rows);
          RowMat<T> gc = wm.transpose() * gm;
          auto& gi = input.node()->grad_buffer();
          if (direct) {
            for (std::int64_t i = 0; i < rows * p; ++i) gi[i] += gc.data()[i];
            return;
          }
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            for (std::int64_t t = 0; t < nt; ++t) {
              const T* src = gc.data() + (ci * nt + t) * p;
              const std::int64_t oy = taps[t].dy - padding, ox = taps[t].dx - padding;
              for (std::int64_t y = 0; y < ho; ++y) {
                const std::int64_t sy = y + oy;
                if (sy < 0 || sy >= h) continue;
                T* dst = gi.data().data() + (ci * h + sy) * w;
                for (std::int64_t x = 0; x < wo; ++x) {
                  const std::int64_t sx = x + ox;
                  if (sx >= 0 && sx < w) dst[sx] += src[y * wo + x];
                }
              }
            }
          }
        }
      });
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss) throw DimensionError("backward: null loss");
  if (loss.numel() != 1) {
    throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad = Tensor<T>();
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf || !n->backward || n->grad.numel() == 0) continue;
    n->backward(n->grad);
  }
}

double grad_check(const std::function<Var<double>()>& f, std::span<Var<double>> params,
                  double eps) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  double worst = 0.0;
  for (auto& p : params) {
    const std::size_t n = p.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.has_grad()) {
      for (std::size_t i = 0; i < n; ++i) analytic[i] = p.grad()[i];
    }
    double max_diff = 0.0, max_mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double& v = p.mutable_value()[i];
      const double saved = v;
      v = saved + eps;
      const double fp = f().value().item();
      v = saved - eps;
      const double fm = f().value().item();
      v = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      max_diff = std::max(max_diff, std::abs(analytic[i] - numeric));
      max_mag = std::max({max_mag, std::abs(analytic[i]), std::abs(numeric)});
    }
    if (max_mag > 0.0) worst = std::max(worst, max_diff / max_mag);
  }
  return worst;
}

#define LBC_INSTANTIATE(T)                                                                    \
  template void ensure_finite(const Tensor<T>&, const char*);                                \
  template Var<T> constant(Tensor<T>);                                                       \
  template Var<T> parameter(Tensor<T>);                                                      \
  template Var<T> make_op(const char*, Tensor<T>, const std::vector<Var<T>>&,                \
                          std::function<void(const Tensor<T>&)>);                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                         \
  template Var<T> div(const Var<T>&, const Var<T>&);                                         \
  template Var<T> scale(const Var<T>&, T);                                                   \
  template Var<T> add_scalar(const Var<T>&, T);                                              \
  template Var<T> square(const Var<T>&);                                                     \
  template Var<T> sqrt(const Var<T>&);                                                       \
  template Var<T> abs(const Var<T>&);                                                        \
  template Var<T> log(const Var<T>&);                                                        \
  template Var<T> leaky_relu(const Var<T>&, T);                                              \
  template Var<T> clamp_min(const Var<T>&, T);                                               \
  template Var<T> clamp(const Var<T>&, T, T);                                                \
  template Var<T> sum(const Var<T>&);                                                        \
  template Var<T> mean(const Var<T>&);                                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                             \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, const TapMask&); \
  template void backward(const Var<T>&);

LBC_INSTANTIATE(float)
LBC_INSTANTIATE(double)

#undef LBC_INSTANTIATE

}  // namespace lbc::ad
