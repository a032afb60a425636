#include "omnidit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "omnidit/fastmath.hpp"
#include "omnidit/kernels.hpp"

namespace omnidit::ad {

namespace {

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_no_grad = false;

struct Broadcast {
  Shape out;
  std::size_t a_len;
  std::size_t b_len;
};

Shape strip_leading_ones(const Shape& s) {
  auto it = std::find_if(s.begin(), s.end(), [](std::size_t e) { return e != 1; });
  return Shape(it, s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t na = numel(a), nb = numel(b);
  if (a == b) return {a, na, nb};
  if (na >= nb && is_suffix(strip_leading_ones(b), a)) return {a, na, nb};
  if (nb > na && is_suffix(strip_leading_ones(a), b)) return {b, na, nb};
  throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                       " are not broadcast-compatible");
}

// Calls f(i, ia, ib) for every output element i, where the shorter operand
// repeats with its own length as period.
template <typename F>
void broadcast_loop(std::size_t a_len, std::size_t b_len, F&& f) {
  const std::size_t total = std::max(a_len, b_len), inner = std::min(a_len, b_len);
  if (a_len == b_len) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
  } else if (a_len == total) {
    for (std::size_t base = 0; base < total; base += inner)
      for (std::size_t j = 0; j < inner; ++j) f(base + j, base + j, j);
  } else {
    for (std::size_t base = 0; base < total; base += inner)
      for (std::size_t j = 0; j < inner; ++j) f(base + j, j, base + j);
  }
}

template <typename T>
void accumulate_broadcast(std::vector<T>& dst, const std::vector<T>& g, T sign) {
  T* d = dst.data();
  const T* gv = g.data();
  broadcast_loop(g.size(), dst.size(), [&](std::size_t, std::size_t ig, std::size_t id) { d[id] += sign * gv[ig]; });
}

template <typename T>
void accumulate_product(std::vector<T>& dst, const std::vector<T>& g, const std::vector<T>& other) {
  T* d = dst.data();
  const T* gv = g.data();
  const T* ov = other.data();
  if (dst.size() == g.size()) {
    broadcast_loop(g.size(), other.size(),
                   [&](std::size_t i, std::size_t, std::size_t io) { d[i] += gv[i] * ov[io]; });
  } else {
    broadcast_loop(g.size(), dst.size(),
                   [&](std::size_t i, std::size_t, std::size_t id) { d[id] += gv[i] * ov[i]; });
  }
}

template <typename T>
Node<T>& parent(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}

template <typename T>
Tensor<T> unary_map(const Tensor<T>& a, auto&& f) {
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = T(0.044715);

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }
NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }
bool NoGradGuard::active() noexcept { return t_no_grad; }

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  n->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Var<T>(std::move(n));
}

template <typename T>
Tensor<T>& Var<T>::mutable_value() {
  if (!node_->is_leaf) throw GraphError("mutable_value() is only allowed on leaves");
  return node_->value;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
  return Tensor<T>(node_->value.shape(), node_->grad);
}

template <typename T>
void Var<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> fn) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  n->is_leaf = false;
  n->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  const bool any = !t_no_grad && std::any_of(parents.begin(), parents.end(),
                                             [](const Var<T>& p) { return p.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(fn);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T>& loss) {
  Node<T>* root = loss.node();
  if (!root) throw GraphError("backward() on an undefined Var");
  if (root->value.numel() != 1)
    throw DimensionError("backward() needs a scalar loss, got shape " + to_string(root->value.shape()));
  if (root->consumed) throw GraphError("backward() called twice on the same graph; recompute the forward first");
  root->consumed = true;
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::vector<Node<T>*> stack{root};
  std::unordered_set<Node<T>*> seen;
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (!n->requires_grad) continue;
    if (n != root && !n->is_leaf && n->consumed)
      throw GraphError("backward() reached a node from an already differentiated graph");
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  root->grad_buffer()[0] += T{1};
  for (Node<T>* n : order) {
    if (n->is_leaf || !n->backward || n->grad.empty()) continue;
    n->backward(*n);
  }
  // Releasing parents can free nodes later in `order`; keep them alive here.
  std::vector<std::shared_ptr<Node<T>>> released;
  for (Node<T>* n : order) {
    if (n->is_leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    for (auto& p : n->parents) released.push_back(std::move(p));
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw DimensionError("matmul: shapes " + to_string(sa) + " and " + to_string(sb) + " do not chain");
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out(Shape{m, n});
  kernels::parallel::gemm(m, k, n, a.value().data(), b.value().data(), out.data(), false);
  return make_result<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& pa = parent(self, 0);
    Node<T>& pb = parent(self, 1);
    if (pa.requires_grad)
      kernels::parallel::gemm_nt(m, n, k, self.grad.data(), pb.value.data(), pa.grad_buffer().data(), true);
    if (pb.requires_grad)
      kernels::parallel::gemm_tn(k, m, n, pa.value.data(), self.grad.data(), pb.grad_buffer().data(), true);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
    throw DimensionError("linear: input " + to_string(sx) + " vs weight " + to_string(sw));
  const std::size_t in = sw[0], outd = sw[1], rows = x.numel() / in;
  if (bias && (bias->numel() != outd))
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " vs weight " + to_string(sw));
  Shape so = sx;
  so.back() = outd;
  Tensor<T> out(so);
  if (bias) {
    const T* bv = bias->value().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv, bv + outd, out.data() + r * outd);
  }
  kernels::parallel::gemm(rows, in, outd, x.value().data(), w.value().data(), out.data(), bias != nullptr);
  std::vector<Var<T>> parents{x, w};
  if (bias) parents.push_back(*bias);
  return make_result<T>("linear", std::move(out), std::move(parents), [rows, in, outd](Node<T>& self) {
    Node<T>& px = parent(self, 0);
    Node<T>& pw = parent(self, 1);
    if (px.requires_grad)
      kernels::parallel::gemm_nt(rows, outd, in, self.grad.data(), pw.value.data(), px.grad_buffer().data(), true);
    if (pw.requires_grad)
      kernels::parallel::gemm_tn(in, rows, outd, px.value.data(), self.grad.data(), pw.grad_buffer().data(), true);
    if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
      auto& gb = parent(self, 2).grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < outd; ++c) gb[c] += self.grad[r * outd + c];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto bc = broadcast("add", a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& va = a.value().vec();
  const auto& vb = b.value().vec();
  T* o = out.data();
  broadcast_loop(bc.a_len, bc.b_len,
                 [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = va[ia] + vb[ib]; });
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (parent(self, p).requires_grad) accumulate_broadcast(parent(self, p).grad_buffer(), self.grad, T{1});
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto bc = broadcast("sub", a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& va = a.value().vec();
  const auto& vb = b.value().vec();
  T* o = out.data();
  broadcast_loop(bc.a_len, bc.b_len,
                 [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = va[ia] - vb[ib]; });
  return make_result<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    if (parent(self, 0).requires_grad) accumulate_broadcast(parent(self, 0).grad_buffer(), self.grad, T{1});
    if (parent(self, 1).requires_grad) accumulate_broadcast(parent(self, 1).grad_buffer(), self.grad, T{-1});
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto bc = broadcast("mul", a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const auto& va = a.value().vec();
  const auto& vb = b.value().vec();
  T* o = out.data();
  broadcast_loop(bc.a_len, bc.b_len,
                 [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = va[ia] * vb[ib]; });
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = parent(self, 0);
    Node<T>& pb = parent(self, 1);
    if (pa.requires_grad) accumulate_product(pa.grad_buffer(), self.grad, pb.value.vec());
    if (pb.requires_grad) accumulate_product(pb.grad_buffer(), self.grad, pa.value.vec());
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = unary_map<T>(a.value(), [factor](T v) { return v * factor; });
  return make_result<T>("scale", std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out = unary_map<T>(a.value(), [c](T v) { return v + c; });
  return make_result<T>("add_scalar", std::move(out), {a}, [](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = unary_map<T>(a.value(), [](T v) { return v * v; });
  return make_result<T>("square", std::move(out), {a}, [](Node<T>& self) {
    Node<T>& p = parent(self, 0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T{2} * p.value[i] * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().span()) s += static_cast<double>(v);
  return make_result<T>("sum", Tensor<T>::scalar(static_cast<T>(s)), {a}, [](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    const T go = self.grad[0];
    for (auto& v : g) v += go;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.numel();
  double s = 0.0;
  for (T v : a.value().span()) s += static_cast<double>(v);
  return make_result<T>("mean", Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {a},
                        [n](Node<T>& self) {
                          auto& g = parent(self, 0).grad_buffer();
                          const T go = self.grad[0] / static_cast<T>(n);
                          for (auto& v : g) v += go;
                        });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = unary_map<T>(a.value(), [](T x) {
    return T(0.5) * x * (T{1} + fastmath::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x)));
  });
  return make_result<T>("gelu", std::move(out), {a}, [](Node<T>& self) {
    Node<T>& p = parent(self, 0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p.value[i];
      const T th = fastmath::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x));
      const T d = T(0.5) * (T{1} + th) +
                  T(0.5) * x * (T{1} - th * th) * kGeluC<T> * (T{1} + T{3} * kGeluA<T> * x * x);
      g[i] += d * self.grad[i];
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out = unary_map<T>(a.value(), [](T x) { return x / (T{1} + fastmath::exp(-x)); });
  return make_result<T>("silu", std::move(out), {a}, [](Node<T>& self) {
    Node<T>& p = parent(self, 0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p.value[i];
      const T s = T{1} / (T{1} + fastmath::exp(-x));
      g[i] += self.grad[i] * s * (T{1} + x * (T{1} - s));
    }
  });
}

template <typename T>
Var<T> layernorm_affine(const Var<T>& x, const Var<T>* gamma, const Var<T>* beta, T eps) {
  const auto& sx = x.shape();
  if (sx.empty()) throw DimensionError("layernorm: scalar input");
  const std::size_t n = sx.back(), rows = x.numel() / n;
  if (gamma && gamma->numel() != n) throw DimensionError("layernorm: gamma " + to_string(gamma->shape()) + " vs " + to_string(sx));
  if (beta && beta->numel() != n) throw DimensionError("layernorm: beta " + to_string(beta->shape()) + " vs " + to_string(sx));
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(sx);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv[r * n + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xv[r * n + c] - static_cast<T>(mu)) * is;
      (*xhat)[r * n + c] = h;
      T y = h;
      if (gamma) y *= gamma->value()[c];
      if (beta) y += beta->value()[c];
      out[r * n + c] = y;
    }
  }
  std::vector<Var<T>> parents{x};
  if (gamma) parents.push_back(*gamma);
  if (beta) parents.push_back(*beta);
  const bool has_g = gamma != nullptr, has_b = beta != nullptr;
  return make_result<T>("layernorm", std::move(out), std::move(parents),
                        [=](Node<T>& self) {
                          const std::vector<T>& gy = self.grad;
                          const T* gv = has_g ? parent(self, 1).value.data() : nullptr;
                          if (has_g && parent(self, 1).requires_grad) {
                            auto& gg = parent(self, 1).grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < n; ++c) gg[c] += gy[r * n + c] * (*xhat)[r * n + c];
                          }
                          if (has_b && parent(self, has_g ? 2 : 1).requires_grad) {
                            auto& gb = parent(self, has_g ? 2 : 1).grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < n; ++c) gb[c] += gy[r * n + c];
                          }
                          Node<T>& px = parent(self, 0);
                          if (!px.requires_grad) return;
                          auto& gx = px.grad_buffer();
                          std::vector<T> dh(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T m1 = 0, m2 = 0;
                            for (std::size_t c = 0; c < n; ++c) {
                              dh[c] = gy[r * n + c] * (gv ? gv[c] : T{1});
                              m1 += dh[c];
                              m2 += dh[c] * (*xhat)[r * n + c];
                            }
                            m1 /= static_cast<T>(n);
                            m2 /= static_cast<T>(n);
                            for (std::size_t c = 0; c < n; ++c)
                              gx[r * n + c] += (*inv_std)[r] * (dh[c] - m1 - (*xhat)[r * n + c] * m2);
                          }
                        });
}

template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  if (a.numel() != b.numel())
    throw DimensionError("cosine_similarity: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  double ab = 0, aa = 0, bb = 0;
  const auto& va = a.value().vec();
  const auto& vb = b.value().vec();
  for (std::size_t i = 0; i < va.size(); ++i) {
    ab += static_cast<double>(va[i]) * vb[i];
    aa += static_cast<double>(va[i]) * va[i];
    bb += static_cast<double>(vb[i]) * vb[i];
  }
  if (aa == 0.0 || bb == 0.0) throw NumericError("cosine_similarity: zero-norm input has no direction");
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double c = std::clamp(ab / (na * nb), -1.0, 1.0);
  return make_result<T>("cosine_similarity", Tensor<T>::scalar(static_cast<T>(c)), {a, b},
                        [=](Node<T>& self) {
                          const double go = self.grad[0];
                          Node<T>& pa = parent(self, 0);
                          Node<T>& pb = parent(self, 1);
                          const double inv = 1.0 / (na * nb);
                          if (pa.requires_grad) {
                            auto& g = pa.grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += static_cast<T>(go * (pb.value[i] * inv - c * pa.value[i] / aa));
                          }
                          if (pb.requires_grad) {
                            auto& g = pb.grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += static_cast<T>(go * (pa.value[i] * inv - c * pb.value[i] / bb));
                          }
                        });
}

template <typename T>
Var<T> softmax(const Var<T>& x, const std::vector<std::uint8_t>* mask) {
  const auto& sx = x.shape();
  if (sx.empty()) throw DimensionError("softmax: scalar input");
  const std::size_t n = sx.back(), rows = x.numel() / n;
  if (mask && mask->size() != x.numel() && mask->size() != n)
    throw DimensionError("softmax: mask of length " + std::to_string(mask->size()) + " vs input " + to_string(sx));
  auto allowed = [&](std::size_t r, std::size_t c) {
    if (!mask) return true;
    return (*mask)[mask->size() == n ? c : r * n + c] != 0;
  };
  Tensor<T> out(sx);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < n; ++c)
      if (allowed(r, c)) {
        mx = std::max(mx, xv[r * n + c]);
        any = true;
      }
    if (!any) throw NumericError("softmax: row " + std::to_string(r) + " is fully masked");
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T e = allowed(r, c) ? fastmath::exp(xv[r * n + c] - mx) : T{0};
      out[r * n + c] = e;
      s += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= s;
  }
  return make_result<T>("softmax", std::move(out), {x}, [rows, n](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * self.grad[r * n + c];
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[r * n + c] * (self.grad[r * n + c] - dot);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out(std::move(shape), a.value().vec());
  return make_result<T>("reshape", std::move(out), {a}, [](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (numel(shape) != index->size())
    throw DimensionError("gather: index of length " + std::to_string(index->size()) + " vs shape " + to_string(shape));
  Tensor<T> out(std::move(shape));
  const T* src = a.value().data();
  const std::size_t limit = a.numel();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= limit) throw DimensionError("gather: index " + std::to_string(j) + " out of range for " + to_string(a.shape()));
    out[i] = src[j];
  }
  return make_result<T>("gather", std::move(out), {a}, [index](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + to_string(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) ok = false;
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape so = s0;
  so[axis] = total;
  Tensor<T> out(so);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].value().data();
    const std::size_t chunk = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + o * total * inner + off * inner);
    off += lens[p];
  }
  return make_result<T>("concat", std::move(out), parts, [lens, outer, inner, total](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      Node<T>& pn = parent(self, p);
      const std::size_t chunk = lens[p] * inner;
      if (pn.requires_grad) {
        auto& g = pn.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += self.grad[o * total * inner + off * inner + i];
      }
      off += lens[p];
    }
  });
}

template <typename T>
Var<T> repeat_rows(const Var<T>& a, std::size_t times) {
  const auto& s = a.shape();
  if (s.size() != 2) throw DimensionError("repeat_rows: expects [B, D], got " + to_string(s));
  const std::size_t b = s[0], d = s[1];
  Tensor<T> out(Shape{b, times, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t l = 0; l < times; ++l)
      std::copy(a.value().data() + i * d, a.value().data() + (i + 1) * d, out.data() + (i * times + l) * d);
  return make_result<T>("repeat_rows", std::move(out), {a}, [b, d, times](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t l = 0; l < times; ++l)
        for (std::size_t c = 0; c < d; ++c) g[i * d + c] += self.grad[(i * times + l) * d + c];
  });
}

template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t begin, std::size_t count) {
  const auto& s = a.shape();
  if (s.empty() || begin + count > s.back() || count == 0)
    throw DimensionError("slice_last: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + to_string(s));
  const std::size_t n = s.back(), rows = a.numel() / n;
  Shape so = s;
  so.back() = count;
  Tensor<T> out(so);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(a.value().data() + r * n + begin, a.value().data() + r * n + begin + count, out.data() + r * count);
  return make_result<T>("slice_last", std::move(out), {a}, [rows, n, begin, count](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) g[r * n + begin + c] += self.grad[r * count + c];
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

template <typename T>
double grad_norm(std::span<const Var<T>> params) {
  double s = 0.0;
  for (const auto& p : params)
    for (T g : p.grad_span()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

#define OMNIDIT_AD_INSTANTIATE(T)                                                                            \
  template class Var<T>;                                                                                     \
  template Var<T> make_result<T>(const char*, Tensor<T>, std::vector<Var<T>>, std::function<void(Node<T>&)>); \
  template void backward<T>(const Var<T>&);                                                                  \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>*);                                    \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale<T>(const Var<T>&, T);                                                                \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                                           \
  template Var<T> square<T>(const Var<T>&);                                                                  \
  template Var<T> sum<T>(const Var<T>&);                                                                     \
  template Var<T> mean<T>(const Var<T>&);                                                                    \
  template Var<T> gelu<T>(const Var<T>&);                                                                    \
  template Var<T> silu<T>(const Var<T>&);                                                                    \
  template Var<T> layernorm_affine<T>(const Var<T>&, const Var<T>*, const Var<T>*, T);                       \
  template Var<T> cosine_similarity<T>(const Var<T>&, const Var<T>&);                                        \
  template Var<T> softmax<T>(const Var<T>&, const std::vector<std::uint8_t>*);                               \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                          \
  template Var<T> gather<T>(const Var<T>&, std::shared_ptr<const std::vector<std::size_t>>, Shape);          \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);                                        \
  template Var<T> repeat_rows<T>(const Var<T>&, std::size_t);                                                \
  template Var<T> slice_last<T>(const Var<T>&, std::size_t, std::size_t);                                    \
  template Var<T> detach<T>(const Var<T>&);                                                                  \
  template double grad_norm<T>(std::span<const Var<T>>);

OMNIDIT_AD_INSTANTIATE(float)
OMNIDIT_AD_INSTANTIATE(double)

}  // namespace omnidit::ad
