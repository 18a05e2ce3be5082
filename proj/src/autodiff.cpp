#include "musicssl/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "musicssl/common.hpp"

namespace musicssl::ad {

namespace {

#ifdef NDEBUG
bool g_nan_check = false;
#else
bool g_nan_check = true;
#endif

void init_blas() {
  static std::once_flag once;
  // Single-threaded BLAS keeps the reduction order fixed.
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

// Row-major C[M,N] = alpha * op(A) op(B) + beta * C.
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    return;
  }
  init_blas();
  const auto to = [](bool t) { return t ? CblasTrans : CblasNoTrans; };
  const auto i = [](std::size_t v) { return static_cast<blasint>(v); };
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, to(ta), to(tb), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb),
                beta, c, i(ldc));
  } else {
    cblas_dgemm(CblasRowMajor, to(ta), to(tb), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb),
                beta, c, i(ldc));
  }
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::invalid_argument("axis out of range");
  return static_cast<std::size_t>(a);
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
}

// Product of dims [from, to).
std::size_t span_prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

// b broadcasts over a when b's shape equals a trailing suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

std::size_t count_selected(const std::vector<bool>& mask, std::size_t rows) {
  if (mask.empty()) return rows;
  if (mask.size() != rows) throw std::invalid_argument("loss mask length does not match rows");
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

bool selected(const std::vector<bool>& mask, std::size_t i) { return mask.empty() || mask[i]; }

}  // namespace

std::size_t numel(const Shape& s) { return span_prod(s, 0, s.size()); }

std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

void set_nan_check(bool enabled) { g_nan_check = enabled; }
bool nan_check_enabled() { return g_nan_check; }

std::uint64_t dropout_seed(std::uint64_t global_seed, std::uint64_t op_id, std::uint64_t step) {
  return mix64(mix64(mix64(global_seed) ^ op_id) ^ step);
}

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

template <typename T>
const Shape& Var<T>::shape() const { return tape_->node(id_).shape; }

template <typename T>
std::size_t Var<T>::dim(int axis) const {
  return shape()[norm_axis(axis, shape().size())];
}

template <typename T>
std::size_t Var<T>::numel() const { return tape_->node(id_).value.size(); }

template <typename T>
std::span<const T> Var<T>::value() const { return tape_->node(id_).value; }

template <typename T>
std::span<const T> Var<T>::grad() const { return tape_->node(id_).grad; }

template <typename T>
bool Var<T>::requires_grad() const { return tape_->node(id_).requires_grad; }

template <typename T>
T Var<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on a non-scalar tensor");
  return value()[0];
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size())
    throw std::invalid_argument("value size does not match shape " + ad::to_string(shape));
  auto n = std::make_unique<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Shape shape, std::vector<T> value) {
  auto v = constant(std::move(shape), std::move(value));
  node(v.id()).requires_grad = grad_enabled_;
  return v;
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  auto v = constant(p.shape, p.value);
  auto& n = node(v.id());
  n.requires_grad = grad_enabled_ && p.requires_grad;
  n.param = &p;
  n.op = "param";
  param_nodes_.emplace(&p, v.id());
  return v;
}

template <typename T>
std::vector<T>& Tape<T>::grad_of(std::size_t id) {
  auto& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
Var<T> Tape<T>::push(Shape shape, std::vector<T> value, std::span<const Var<T>> parents,
                     std::function<void(Tape<T>&, Node<T>&)> fn, const char* op) {
  if (g_nan_check)
    for (const T& v : value)
      if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite value after ") + op);
  auto n = std::make_unique<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || node(p.id()).requires_grad;
  if (grad_enabled_ && needs) {
    n->requires_grad = true;
    n->backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (!grad_enabled_) throw std::logic_error("backward on a tape with gradients disabled");
  if (consumed_) throw std::logic_error("backward called twice on the same tape; re-run forward");
  if (loss.tape() != this) throw std::invalid_argument("loss belongs to another tape");
  if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
  consumed_ = true;
  grad_of(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = node(i);
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, n);
    if (n.param) {
      auto& g = n.param->grad;
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() != 2 || as.back() != bs[0])
    throw std::invalid_argument("matmul shape mismatch " + to_string(as) + " x " + to_string(bs));
  const std::size_t k = bs[0], n = bs[1], m = a.numel() / k;
  std::vector<T> out(m * n, T(0));
  gemm<T>(false, false, m, n, k, T(1), a.value().data(), k, b.value().data(), n, T(0), out.data(), n);
  Shape os = as;
  os.back() = n;
  const std::size_t ia = a.id(), ib = b.id();
  const Var<T> parents[] = {a, b};
  return a.tape()->push(std::move(os), std::move(out), parents,
      [ia, ib, m, n, k](Tape<T>& t, Node<T>& self) {
        if (t.node(ia).requires_grad)
          gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n, t.node(ib).value.data(), n, T(1),
                  t.grad_of(ia).data(), k);
        if (t.node(ib).requires_grad)
          gemm<T>(true, false, k, n, m, T(1), t.node(ia).value.data(), k, self.grad.data(), n, T(1),
                  t.grad_of(ib).data(), n);
      }, "matmul");
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b) {
  require_same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
    throw std::invalid_argument("bmm expects [B,M,K] x [B,K,N]");
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = trans_b ? bs[1] : bs[2];
  if ((trans_b ? bs[2] : bs[1]) != k)
    throw std::invalid_argument("bmm inner dimension mismatch " + to_string(as) + " x " + to_string(bs));
  std::vector<T> out(batch * m * n, T(0));
  const std::size_t ldb = trans_b ? k : n;
  for (std::size_t i = 0; i < batch; ++i)
    gemm<T>(false, trans_b, m, n, k, T(1), a.value().data() + i * m * k, k,
            b.value().data() + i * k * n, ldb, T(0), out.data() + i * m * n, n);
  const std::size_t ia = a.id(), ib = b.id();
  const Var<T> parents[] = {a, b};
  return a.tape()->push({batch, m, n}, std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * n;
          const T* av = t.node(ia).value.data() + i * m * k;
          const T* bv = t.node(ib).value.data() + i * k * n;
          if (t.node(ia).requires_grad)  // dA = G op(B)^T
            gemm<T>(false, !trans_b, m, k, n, T(1), g, n, bv, ldb, T(1),
                    t.grad_of(ia).data() + i * m * k, k);
          if (t.node(ib).requires_grad) {
            T* gb = t.grad_of(ib).data() + i * k * n;
            if (trans_b)  // dB[N,K] = G^T A
              gemm<T>(true, false, n, k, m, T(1), g, n, av, k, T(1), gb, k);
            else  // dB[K,N] = A^T G
              gemm<T>(true, false, k, n, m, T(1), av, k, g, n, T(1), gb, n);
          }
        }
      }, "bmm");
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename T, typename Fwd, typename Bwd>
Var<T> binary(Var<T> a, Var<T> b, Fwd fwd, Bwd bwd, const char* name) {
  require_same_tape(a, b);
  if (!is_suffix(a.shape(), b.shape()))
    throw std::invalid_argument(std::string(name) + " shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<T> out(na);
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < na; ++i) out[i] = fwd(av[i], bv[i % nb]);
  const std::size_t ia = a.id(), ib = b.id();
  const Var<T> parents[] = {a, b};
  return a.tape()->push(a.shape(), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        const bool ga = t.node(ia).requires_grad, gb = t.node(ib).requires_grad;
        T* da = ga ? t.grad_of(ia).data() : nullptr;
        T* db = gb ? t.grad_of(ib).data() : nullptr;
        const auto& x = t.node(ia).value;
        const auto& y = t.node(ib).value;
        for (std::size_t i = 0; i < na; ++i) {
          auto [dx, dy] = bwd(x[i], y[i % nb], self.grad[i]);
          if (ga) da[i] += dx;
          if (gb) db[i % nb] += dy;
        }
      }, name);
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary(Var<T> a, Fwd fwd, Bwd bwd, const char* name) {
  std::vector<T> out(a.numel());
  const auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(a.shape(), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        auto& da = t.grad_of(ia);
        const auto& x = t.node(ia).value;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += bwd(x[i], self.value[i], self.grad[i]);
      }, name);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, [](T x, T y) { return x + y; },
                [](T, T, T g) { return std::pair{g, g}; }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, [](T x, T y) { return x - y; },
                [](T, T, T g) { return std::pair{g, -g}; }, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, [](T x, T y) { return x * y; },
                [](T x, T y, T g) { return std::pair{g * y, g * x}; }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T, T g) { return g * s; }, "scale");
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
               [](T x, T, T g) {
                 const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
                 return g * (cdf + x * kInvSqrt2Pi * std::exp(T(-0.5) * x * x));
               }, "gelu");
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T, T g) { return x > T(0) ? g : T(0); }, "relu");
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(a, [](T x) {
                 return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
               },
               [](T, T y, T g) { return g * y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Var<T> dropout(Var<T> a, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout p must lie in [0, 1)");
  if (p == 0.0) return a;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(a.numel());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = unit_from_hash(mix64(seed ^ mix64(i))) >= p ? keep_scale : T(0);
  std::vector<T> out(a.numel());
  const auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(a.shape(), std::move(out), parents,
      [ia, mask = std::move(mask)](Tape<T>& t, Node<T>& self) {
        auto& da = t.grad_of(ia);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i] * mask[i];
      }, "dropout");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.numel())
    throw std::invalid_argument("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<T> out(a.value().begin(), a.value().end());
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(std::move(shape), std::move(out), parents,
      [ia](Tape<T>& t, Node<T>& self) {
        auto& da = t.grad_of(ia);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i];
      }, "reshape");
}

template <typename T>
Var<T> transpose(Var<T> a, int axis0, int axis1) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  const std::size_t x0 = norm_axis(axis0, r), x1 = norm_axis(axis1, r);
  Shape os = in;
  std::swap(os[x0], os[x1]);
  // Input strides permuted into output axis order.
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  std::vector<std::size_t> perm_stride = in_stride;
  std::swap(perm_stride[x0], perm_stride[x1]);
  const std::size_t total = a.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < total; ++o) {
    src[o] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += perm_stride[d];
      if (idx[d] < os[d]) break;
      off -= perm_stride[d] * os[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(total);
  const auto av = a.value();
  for (std::size_t o = 0; o < total; ++o) out[o] = av[src[o]];
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(std::move(os), std::move(out), parents,
      [ia, src = std::move(src)](Tape<T>& t, Node<T>& self) {
        auto& da = t.grad_of(ia);
        for (std::size_t o = 0; o < src.size(); ++o) da[src[o]] += self.grad[o];
      }, "transpose");
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size());
  Shape os = s0;
  os[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw std::invalid_argument("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != ax && s[d] != s0[d]) throw std::invalid_argument("concat shape mismatch");
    os[ax] += s[ax];
    widths.push_back(s[ax] * span_prod(s, ax + 1, s.size()));
  }
  const std::size_t outer = span_prod(s0, 0, ax);
  const std::size_t row = span_prod(os, ax, os.size());
  std::vector<T> out(numel(os));
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * widths[p], widths[p], out.data() + o * row + col);
    col += widths[p];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape()->push(std::move(os), std::move(out), parts,
      [ids, widths, outer, row](Tape<T>& t, Node<T>& self) {
        std::size_t c = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (t.node(ids[p]).requires_grad) {
            auto& g = t.grad_of(ids[p]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < widths[p]; ++j) g[o * widths[p] + j] += self.grad[o * row + c + j];
          }
          c += widths[p];
        }
      }, "concat");
}

template <typename T>
Var<T> slice(Var<T> a, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  const std::size_t ax = norm_axis(axis, s.size());
  if (begin > end || end > s[ax]) throw std::invalid_argument("slice bounds out of range");
  Shape os = s;
  os[ax] = end - begin;
  const std::size_t outer = span_prod(s, 0, ax), inner = span_prod(s, ax + 1, s.size());
  const std::size_t in_row = s[ax] * inner, out_row = os[ax] * inner;
  std::vector<T> out(outer * out_row);
  const auto v = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.data() + o * in_row + begin * inner, out_row, out.data() + o * out_row);
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(std::move(os), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(ia);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < out_row; ++j) g[o * in_row + begin * inner + j] += self.grad[o * out_row + j];
      }, "slice");
}

template <typename T>
Var<T> sum(Var<T> a, int axis) {
  const Shape& s = a.shape();
  const std::size_t ax = norm_axis(axis, s.size());
  const std::size_t outer = span_prod(s, 0, ax), n = s[ax], inner = span_prod(s, ax + 1, s.size());
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> out(outer * inner, T(0));
  const auto v = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + j) * inner + i];
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(std::move(os), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(ia);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i) g[(o * n + j) * inner + i] += self.grad[o * inner + i];
      }, "sum");
}

template <typename T>
Var<T> mean(Var<T> a, int axis) {
  const std::size_t n = a.dim(axis);
  if (n == 0) throw std::invalid_argument("mean over an empty axis");
  return scale(sum(a, axis), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  T acc = T(0);
  for (T v : a.value()) acc += v;
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push({}, {acc}, parents,
      [ia](Tape<T>& t, Node<T>& self) {
        for (auto& g : t.grad_of(ia)) g += self.grad[0];
      }, "sum_all");
}

// ---------------------------------------------------------------------------
// Convolution / normalization / softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, std::size_t stride) {
  require_same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 3 || ws[1] != xs[1])
    throw std::invalid_argument("conv1d expects x[T, C_in] and w[kernel, C_in, C_out], got " +
                                to_string(xs) + " and " + to_string(ws));
  if (stride == 0) throw std::invalid_argument("conv1d stride must be positive");
  const std::size_t len = xs[0], cin = xs[1], kernel = ws[0], cout = ws[2];
  if (len < kernel) throw std::invalid_argument("conv1d input shorter than kernel");
  const std::size_t tout = (len - kernel) / stride + 1, patch = kernel * cin;
  std::vector<T> cols(tout * patch);
  const auto xv = x.value();
  for (std::size_t t = 0; t < tout; ++t)
    std::copy_n(xv.data() + t * stride * cin, patch, cols.data() + t * patch);
  std::vector<T> out(tout * cout, T(0));
  if (bias) {
    if (bias->numel() != cout) throw std::invalid_argument("conv1d bias size mismatch");
    const auto bv = bias->value();
    for (std::size_t t = 0; t < tout; ++t) std::copy_n(bv.data(), cout, out.data() + t * cout);
  }
  gemm<T>(false, false, tout, cout, patch, T(1), cols.data(), patch, w.value().data(), cout,
          T(bias ? 1 : 0), out.data(), cout);
  const std::size_t ix = x.id(), iw = w.id();
  const std::optional<std::size_t> ib = bias ? std::optional(bias->id()) : std::nullopt;
  std::vector<Var<T>> parents = {x, w};
  if (bias) parents.push_back(*bias);
  return x.tape()->push({tout, cout}, std::move(out), parents,
      [=, cols = std::move(cols)](Tape<T>& t, Node<T>& self) {
        const T* g = self.grad.data();
        if (t.node(iw).requires_grad)
          gemm<T>(true, false, patch, cout, tout, T(1), cols.data(), patch, g, cout, T(1),
                  t.grad_of(iw).data(), cout);
        if (ib && t.node(*ib).requires_grad) {
          auto& gb = t.grad_of(*ib);
          for (std::size_t r = 0; r < tout; ++r)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g[r * cout + c];
        }
        if (t.node(ix).requires_grad) {
          std::vector<T> dcols(tout * patch, T(0));
          gemm<T>(false, true, tout, patch, cout, T(1), g, cout, t.node(iw).value.data(), cout,
                  T(0), dcols.data(), patch);
          auto& gx = t.grad_of(ix);
          for (std::size_t r = 0; r < tout; ++r) {
            T* dst = gx.data() + r * stride * cin;
            const T* src = dcols.data() + r * patch;
            for (std::size_t j = 0; j < patch; ++j) dst[j] += src[j];
          }
        }
      }, "conv1d");
}

template <typename T>
Var<T> layer_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta, T eps) {
  const std::size_t d = x.dim(-1), rows = x.numel() / std::max<std::size_t>(d, 1);
  if (gamma && gamma->numel() != d) throw std::invalid_argument("layer_norm gamma size mismatch");
  if (beta && beta->numel() != d) throw std::invalid_argument("layer_norm beta size mismatch");
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  const auto xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (src[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      T y = h;
      if (gamma) y *= gamma->value()[j];
      if (beta) y += beta->value()[j];
      out[r * d + j] = y;
    }
  }
  const std::size_t ix = x.id();
  const auto ig = gamma ? std::optional(gamma->id()) : std::nullopt;
  const auto ibt = beta ? std::optional(beta->id()) : std::nullopt;
  std::vector<Var<T>> parents = {x};
  if (gamma) parents.push_back(*gamma);
  if (beta) parents.push_back(*beta);
  return x.tape()->push(x.shape(), std::move(out), parents,
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, Node<T>& self) {
        const T* g = self.grad.data();
        if (ig && t.node(*ig).requires_grad) {
          auto& gg = t.grad_of(*ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (ibt && t.node(*ibt).requires_grad) {
          auto& gb = t.grad_of(*ibt);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (!t.node(ix).requires_grad) return;
        auto& gx = t.grad_of(ix);
        const T* gam = ig ? t.node(*ig).value.data() : nullptr;
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = T(0), m2 = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[r * d + j] * (gam ? gam[j] : T(1));
            m1 += dh[j];
            m2 += dh[j] * xhat[r * d + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += inv_std[r] * (dh[j] - m1 - xhat[r * d + j] * m2);
        }
      }, "layer_norm");
}

template <typename T>
Var<T> softmax(Var<T> a) {
  const std::size_t d = a.dim(-1), rows = a.numel() / std::max<std::size_t>(d, 1);
  std::vector<T> out(a.numel());
  const auto v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = v.data() + r * d;
    const T mx = *std::max_element(src, src + d);
    T z = T(0);
    for (std::size_t j = 0; j < d; ++j) z += (out[r * d + j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= z;
  }
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(a.shape(), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(ia);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            g[r * d + j] += self.value[r * d + j] * (self.grad[r * d + j] - dot);
        }
      }, "softmax");
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const std::size_t d = a.dim(-1), rows = a.numel() / std::max<std::size_t>(d, 1);
  std::vector<T> out(a.numel());
  const auto v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = v.data() + r * d;
    const T mx = *std::max_element(src, src + d);
    T z = T(0);
    for (std::size_t j = 0; j < d; ++j) z += std::exp(src[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = src[j] - lse;
  }
  const std::size_t ia = a.id();
  const Var<T> parents[] = {a};
  return a.tape()->push(a.shape(), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(ia);
        for (std::size_t r = 0; r < rows; ++r) {
          T gs = T(0);
          for (std::size_t j = 0; j < d; ++j) gs += self.grad[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            g[r * d + j] += self.grad[r * d + j] - std::exp(self.value[r * d + j]) * gs;
        }
      }, "log_softmax");
}

// ---------------------------------------------------------------------------
// Gather / row ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::uint32_t> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw std::invalid_argument("embedding table must be [K, D]");
  const std::size_t k = s[0], d = s[1];
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  const auto v = table.value();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= k) throw std::invalid_argument("embedding id out of range");
    std::copy_n(v.data() + idx[i] * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id(), n = idx.size();
  const Var<T> parents[] = {table};
  return table.tape()->push({n, d}, std::move(out), parents,
      [it, d, idx = std::move(idx)](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(it);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
      }, "embedding_lookup");
}

template <typename T>
Var<T> normalize_rows(Var<T> x) {
  if (x.shape().size() != 2) throw std::invalid_argument("normalize_rows expects [N, D]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel(), T(0)), norms(n, T(0));
  const auto v = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    norms[r] = std::sqrt(s);
    if (norms[r] > T(0))
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = v[r * d + j] / norms[r];
  }
  const std::size_t ix = x.id();
  const Var<T> parents[] = {x};
  return x.tape()->push(x.shape(), std::move(out), parents,
      [=, norms = std::move(norms)](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(ix);
        for (std::size_t r = 0; r < n; ++r) {
          if (!(norms[r] > T(0))) continue;
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += self.value[r * d + j] * self.grad[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            g[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / norms[r];
        }
      }, "normalize_rows");
}

template <typename T>
Var<T> replace_rows(Var<T> x, const std::vector<bool>& mask, Var<T> row) {
  require_same_tape(x, row);
  if (x.shape().size() != 2) throw std::invalid_argument("replace_rows expects [N, D]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (mask.size() != n || row.numel() != d) throw std::invalid_argument("replace_rows size mismatch");
  std::vector<T> out(x.value().begin(), x.value().end());
  const auto rv = row.value();
  for (std::size_t r = 0; r < n; ++r)
    if (mask[r]) std::copy_n(rv.data(), d, out.data() + r * d);
  const std::size_t ix = x.id(), ir = row.id();
  const Var<T> parents[] = {x, row};
  return x.tape()->push(x.shape(), std::move(out), parents,
      [=](Tape<T>& t, Node<T>& self) {
        const bool gx = t.node(ix).requires_grad, gr = t.node(ir).requires_grad;
        for (std::size_t r = 0; r < n; ++r) {
          if (mask[r]) {
            if (gr) {
              auto& g = t.grad_of(ir);
              for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
            }
          } else if (gx) {
            auto& g = t.grad_of(ix);
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r * d + j];
          }
        }
      }, "replace_rows");
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets,
                     const std::vector<bool>& mask) {
  if (logits.shape().size() != 2) throw std::invalid_argument("cross_entropy expects logits [N, K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n) throw std::invalid_argument("cross_entropy target count mismatch");
  const std::size_t sel = count_selected(mask, n);
  if (sel == 0) throw std::invalid_argument("cross_entropy: empty mask");
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  std::vector<T> probs(n * k, T(0));
  const auto v = logits.value();
  T loss = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    if (!selected(mask, r)) continue;
    if (tgt[r] >= k) throw std::invalid_argument("cross_entropy target out of range");
    const T* z = v.data() + r * k;
    const T mx = *std::max_element(z, z + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += (probs[r * k + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
    loss += mx + std::log(s) - z[tgt[r]];
  }
  loss /= static_cast<T>(sel);
  const std::size_t il = logits.id();
  const Var<T> parents[] = {logits};
  return logits.tape()->push({}, {loss}, parents,
      [=, probs = std::move(probs), tgt = std::move(tgt)](Tape<T>& t, Node<T>& self) {
        auto& g = t.grad_of(il);
        const T s = self.grad[0] / static_cast<T>(sel);
        for (std::size_t r = 0; r < n; ++r) {
          if (!selected(mask, r)) continue;
          for (std::size_t j = 0; j < k; ++j)
            g[r * k + j] += s * (probs[r * k + j] - (j == tgt[r] ? T(1) : T(0)));
        }
      }, "cross_entropy");
}

namespace {

// Shared driver for elementwise regression losses over selected rows.
template <typename T, typename Loss, typename Grad>
Var<T> rowwise_loss(Var<T> pred, Var<T> target, const std::vector<bool>& mask, Loss loss_fn,
                    Grad grad_fn, const char* name) {
  require_same_tape(pred, target);
  if (pred.shape() != target.shape())
    throw std::invalid_argument(std::string(name) + " shape mismatch " + to_string(pred.shape()) +
                                " vs " + to_string(target.shape()));
  if (pred.shape().empty()) throw std::invalid_argument(std::string(name) + " needs rows");
  const std::size_t n = pred.dim(0), d = n ? pred.numel() / n : 0;
  const std::size_t sel = count_selected(mask, n);
  if (sel == 0) throw std::invalid_argument(std::string(name) + ": empty mask");
  const T denom = static_cast<T>(sel * d);
  T total = T(0);
  const auto p = pred.value();
  const auto y = target.value();
  for (std::size_t r = 0; r < n; ++r)
    if (selected(mask, r))
      for (std::size_t j = 0; j < d; ++j) total += loss_fn(p[r * d + j], y[r * d + j]);
  const std::size_t ip = pred.id(), iy = target.id();
  const Var<T> parents[] = {pred, target};
  return pred.tape()->push({}, {total / denom}, parents,
      [=](Tape<T>& t, Node<T>& self) {
        const bool gp = t.node(ip).requires_grad, gy = t.node(iy).requires_grad;
        const auto& pv = t.node(ip).value;
        const auto& yv = t.node(iy).value;
        const T s = self.grad[0] / denom;
        for (std::size_t r = 0; r < n; ++r) {
          if (!selected(mask, r)) continue;
          for (std::size_t j = 0; j < d; ++j) {
            const auto [dp, dy] = grad_fn(pv[r * d + j], yv[r * d + j]);
            if (gp) t.grad_of(ip)[r * d + j] += s * dp;
            if (gy) t.grad_of(iy)[r * d + j] += s * dy;
          }
        }
      }, name);
}

}  // namespace

template <typename T>
Var<T> mse(Var<T> pred, Var<T> target, const std::vector<bool>& mask) {
  return rowwise_loss(pred, target, mask, [](T p, T y) { return (p - y) * (p - y); },
                      [](T p, T y) { return std::pair{T(2) * (p - y), T(-2) * (p - y)}; }, "mse");
}

template <typename T>
Var<T> smooth_l1(Var<T> pred, Var<T> target, T beta, const std::vector<bool>& mask) {
  if (!(beta > T(0))) throw std::invalid_argument("smooth_l1 beta must be positive");
  return rowwise_loss(pred, target, mask,
      [beta](T p, T y) {
        const T a = std::abs(p - y);
        return a < beta ? T(0.5) * a * a / beta : a - T(0.5) * beta;
      },
      [beta](T p, T y) {
        const T dlt = p - y;
        const T g = std::abs(dlt) < beta ? dlt / beta : (dlt > T(0) ? T(1) : T(-1));
        return std::pair{g, -g};
      }, "smooth_l1");
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets, const std::vector<bool>& mask) {
  return rowwise_loss(logits, targets, mask,
      [](T z, T y) { return std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z))); },
      [](T z, T y) {
        const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
        return std::pair{s - y, -z};
      }, "bce_with_logits");
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt, std::int64_t step) {
  if (step < 1) throw std::invalid_argument("adam step must be >= 1");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr), wd = static_cast<T>(opt.weight_decay);
  const T eps = static_cast<T>(opt.eps);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (auto* p : params) {
    if (!p->requires_grad) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T g = p->grad[i];
      p->m[i] = b1 * p->m[i] + (T(1) - b1) * g;
      p->v[i] = b2 * p->v[i] + (T(1) - b2) * g * g;
      const T mhat = p->m[i] * ic1, vhat = p->v[i] * ic2;
      p->value[i] -= lr * (wd * p->value[i] + mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define MUSICSSL_INSTANTIATE(T)                                                              \
  template class Var<T>;                                                                      \
  template class Tape<T>;                                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                                     \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> transpose(Var<T>, int, int);                                                \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> concat(std::span<const Var<T>>, int);                                       \
  template Var<T> slice(Var<T>, int, std::size_t, std::size_t);                               \
  template Var<T> sum(Var<T>, int);                                                           \
  template Var<T> mean(Var<T>, int);                                                          \
  template Var<T> sum_all(Var<T>);                                                            \
  template Var<T> conv1d(Var<T>, Var<T>, std::optional<Var<T>>, std::size_t);                 \
  template Var<T> layer_norm(Var<T>, std::optional<Var<T>>, std::optional<Var<T>>, T);        \
  template Var<T> gelu(Var<T>);                                                               \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> sigmoid(Var<T>);                                                            \
  template Var<T> softmax(Var<T>);                                                            \
  template Var<T> log_softmax(Var<T>);                                                        \
  template Var<T> dropout(Var<T>, double, std::uint64_t);                                     \
  template Var<T> embedding_lookup(Var<T>, std::span<const std::uint32_t>);                   \
  template Var<T> normalize_rows(Var<T>);                                                     \
  template Var<T> replace_rows(Var<T>, const std::vector<bool>&, Var<T>);                     \
  template Var<T> cross_entropy(Var<T>, std::span<const std::uint32_t>, const std::vector<bool>&); \
  template Var<T> mse(Var<T>, Var<T>, const std::vector<bool>&);                              \
  template Var<T> smooth_l1(Var<T>, Var<T>, T, const std::vector<bool>&);                     \
  template Var<T> bce_with_logits(Var<T>, Var<T>, const std::vector<bool>&);                  \
  template void adam_step(std::span<Parameter<T>* const>, const AdamOptions&, std::int64_t);

MUSICSSL_INSTANTIATE(float)
MUSICSSL_INSTANTIATE(double)

#undef MUSICSSL_INSTANTIATE

}  // namespace musicssl::ad
