#pragma once

// Dense n-d tensor with reverse-mode automatic differentiation.
//
// Scalar type is a template parameter: float is the working precision,
// double instantiations exist for finite-difference verification. Tensors
// are immutable once created; every op returns a fresh tensor and records
// the backward closure needed for the reverse sweep. backward() walks the
// recorded graph in reverse topological order exactly once, accumulating
// gradients additively across fan-out.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sinuscl::nd {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Thread-local switch for graph recording (off during inference).
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized lazily by backward()
  bool requires_grad = false;
  // Parents that require grad; traversed by the reverse sweep. The closure
  // captures whatever saved state (including non-grad inputs) it needs.
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(const Node<S>&)> backprop;
  const char* op = "leaf";

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
using NodePtr = std::shared_ptr<Node<S>>;

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(0), requires_grad);
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value.assign(static_cast<size_t>(numel_of(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }
  int64_t extent(int64_t axis) const { return n_->shape[static_cast<size_t>(axis)]; }
  bool requires_grad() const { return n_->requires_grad; }

  std::span<const S> data() const { return {n_->value.data(), n_->value.size()}; }
  std::span<const S> grad() const { return {n_->grad.data(), n_->grad.size()}; }
  bool has_grad() const { return !n_->grad.empty(); }

  S item() const {
    if (numel() != 1)
      throw std::invalid_argument("item() called on non-scalar tensor of shape " +
                                  shape_str(shape()));
    return n_->value[0];
  }

  // Leaf copy that shares no graph history.
  Tensor detach() const {
    auto n = std::make_shared<Node<S>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  void backward() const;

  const NodePtr<S>& node() const { return n_; }
  explicit Tensor(NodePtr<S> n) : n_(std::move(n)) {}

 private:
  NodePtr<S> n_;
};

namespace detail {

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Result node wiring. `parents` lists only grad-requiring inputs; when grad
// recording is off, no history is attached at all.
template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> value, const char* op,
                      std::vector<NodePtr<S>> grad_parents,
                      std::function<void(const Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (grad_mode_flag() && !grad_parents.empty()) {
    n->requires_grad = true;
    n->parents = std::move(grad_parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
std::vector<NodePtr<S>> grad_parents_of(std::initializer_list<const Tensor<S>*> ts) {
  std::vector<NodePtr<S>> ps;
  for (const Tensor<S>* t : ts)
    if (t->requires_grad()) ps.push_back(t->node());
  return ps;
}

// Trailing-dimension broadcast: result rank = max rank, each aligned pair of
// extents must match or one of them must be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(a) +
                                  " vs " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides padded to `rank`, with 0 on broadcast axes.
inline std::vector<int64_t> broadcast_strides(const Shape& s, size_t rank, const Shape& out) {
  std::vector<int64_t> strides(rank, 0);
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    size_t oi = i + (rank - s.size());
    strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return strides;
}

// Walks the broadcast output space once, handing (out, a, b) flat offsets to
// `fn` with a contiguous inner loop over the last axis.
template <class S, class Fn>
void broadcast_walk(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  size_t rank = out.size();
  if (rank == 0) {
    fn(int64_t{0}, int64_t{0}, int64_t{0}, int64_t{1}, int64_t{0}, int64_t{0});
    return;
  }
  auto stra = broadcast_strides(sa, rank, out);
  auto strb = broadcast_strides(sb, rank, out);
  int64_t inner = out[rank - 1];
  int64_t ia = stra[rank - 1], ib = strb[rank - 1];
  int64_t outer = numel_of(out) / std::max<int64_t>(inner, 1);
  std::vector<int64_t> idx(rank > 1 ? rank - 1 : 0, 0);
  int64_t off = 0;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t offa = 0, offb = 0;
    for (size_t d = 0; d + 1 < rank; ++d) {
      offa += idx[d] * stra[d];
      offb += idx[d] * strb[d];
    }
    fn(off, offa, offb, inner, ia, ib);
    off += inner;
    for (size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

template <class S>
void check_same_numel(const Tensor<S>& t, const char* what) {
  (void)t;
  (void)what;
}

enum class BinKind { Add, Sub, Mul, Div };

template <class S>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, BinKind kind, const char* name) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<S> out(static_cast<size_t>(numel_of(out_shape)));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  broadcast_walk<S>(out_shape, a.shape(), b.shape(),
                    [&](int64_t o, int64_t oa, int64_t ob, int64_t n, int64_t ia, int64_t ib) {
                      S* po = out.data() + o;
                      const S* qa = pa + oa;
                      const S* qb = pb + ob;
                      switch (kind) {
                        case BinKind::Add:
                          for (int64_t i = 0; i < n; ++i) po[i] = qa[i * ia] + qb[i * ib];
                          break;
                        case BinKind::Sub:
                          for (int64_t i = 0; i < n; ++i) po[i] = qa[i * ia] - qb[i * ib];
                          break;
                        case BinKind::Mul:
                          for (int64_t i = 0; i < n; ++i) po[i] = qa[i * ia] * qb[i * ib];
                          break;
                        case BinKind::Div:
                          for (int64_t i = 0; i < n; ++i) po[i] = qa[i * ia] / qb[i * ib];
                          break;
                      }
                    });

  auto an = a.node();
  auto bn = b.node();
  auto backprop = [an, bn, kind, out_shape](const Node<S>& res) {
    const S* g = res.grad.data();
    const S* va = an->value.data();
    const S* vb = bn->value.data();
    bool ga = an->requires_grad, gb = bn->requires_grad;
    if (ga) an->ensure_grad();
    if (gb) bn->ensure_grad();
    S* da = an->grad.data();
    S* db = bn->grad.data();
    broadcast_walk<S>(out_shape, an->shape, bn->shape,
                      [&](int64_t o, int64_t oa, int64_t ob, int64_t n, int64_t ia, int64_t ib) {
                        const S* pg = g + o;
                        for (int64_t i = 0; i < n; ++i) {
                          int64_t ja = oa + i * ia, jb = ob + i * ib;
                          S gv = pg[i];
                          switch (kind) {
                            case BinKind::Add:
                              if (ga) da[ja] += gv;
                              if (gb) db[jb] += gv;
                              break;
                            case BinKind::Sub:
                              if (ga) da[ja] += gv;
                              if (gb) db[jb] -= gv;
                              break;
                            case BinKind::Mul:
                              if (ga) da[ja] += gv * vb[jb];
                              if (gb) db[jb] += gv * va[ja];
                              break;
                            case BinKind::Div: {
                              S bv = vb[jb];
                              if (ga) da[ja] += gv / bv;
                              if (gb) db[jb] -= gv * va[ja] / (bv * bv);
                              break;
                            }
                          }
                        }
                      });
  };
  return make_result<S>(std::move(out_shape), std::move(out), name,
                        grad_parents_of<S>({&a, &b}), std::move(backprop));
}

}  // namespace detail

// ---- elementwise binary ops (trailing-dimension broadcasting) ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}
template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Div, "div");
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (S& v : out) v *= c;
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), "mul_scalar", detail::grad_parents_of<S>({&a}),
      [an, c](const Node<S>& res) {
        an->ensure_grad();
        for (size_t i = 0; i < res.grad.size(); ++i) an->grad[i] += res.grad[i] * c;
      });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (S& v : out) v += c;
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), "add_scalar", detail::grad_parents_of<S>({&a}),
      [an](const Node<S>& res) {
        an->ensure_grad();
        for (size_t i = 0; i < res.grad.size(); ++i) an->grad[i] += res.grad[i];
      });
}

// ---- elementwise unary ops ----

namespace detail {
template <class S, class FwdFn, class BwdFn>
Tensor<S> unary_op(const Tensor<S>& a, const char* name, FwdFn fwd, BwdFn bwd) {
  std::vector<S> out(a.data().size());
  const S* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
  auto an = a.node();
  return make_result<S>(a.shape(), std::move(out), name, grad_parents_of<S>({&a}),
                        [an, bwd](const Node<S>& res) {
                          an->ensure_grad();
                          const S* g = res.grad.data();
                          const S* x = an->value.data();
                          const S* y = res.value.data();
                          S* d = an->grad.data();
                          for (size_t i = 0; i < res.grad.size(); ++i)
                            d[i] += g[i] * bwd(x[i], y[i]);
                        });
}
}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  // subgradient at 0 is 0
  return detail::unary_op(
      a, "relu", [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary_op(
      a, "exp", [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  for (S v : a.data())
    if (!(v > S(0)))
      throw std::domain_error("log requires strictly positive input, got " +
                              std::to_string(static_cast<double>(v)));
  return detail::unary_op(
      a, "log", [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  for (S v : a.data())
    if (v < S(0))
      throw std::domain_error("sqrt requires non-negative input, got " +
                              std::to_string(static_cast<double>(v)));
  return detail::unary_op(
      a, "sqrt", [](S x) { return std::sqrt(x); },
      [](S, S y) { return S(1) / (S(2) * y); });
}

// ---- reductions ----

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0;
  for (S v : a.data()) acc += static_cast<double>(v);
  auto an = a.node();
  return detail::make_result<S>({}, {static_cast<S>(acc)}, "sum",
                                detail::grad_parents_of<S>({&a}),
                                [an](const Node<S>& res) {
                                  an->ensure_grad();
                                  S g = res.grad[0];
                                  for (S& d : an->grad) d += g;
                                });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  double acc = 0;
  for (S v : a.data()) acc += static_cast<double>(v);
  S inv = S(1) / static_cast<S>(a.numel());
  auto an = a.node();
  return detail::make_result<S>({}, {static_cast<S>(acc / static_cast<double>(a.numel()))},
                                "mean", detail::grad_parents_of<S>({&a}),
                                [an, inv](const Node<S>& res) {
                                  an->ensure_grad();
                                  S g = res.grad[0] * inv;
                                  for (S& d : an->grad) d += g;
                                });
}

namespace detail {
inline void reduce_geometry(const Shape& s, int64_t axis, int64_t& outer, int64_t& n,
                            int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  n = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

inline Shape reduced_shape(const Shape& s, int64_t axis, bool keepdims) {
  Shape out = s;
  if (keepdims) {
    out[static_cast<size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

inline void check_axis(const Shape& s, int64_t axis) {
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(s));
}
}  // namespace detail

template <class S>
Tensor<S> sum_along(const Tensor<S>& a, int64_t axis, bool keepdims = false) {
  detail::check_axis(a.shape(), axis);
  int64_t outer, n, inner;
  detail::reduce_geometry(a.shape(), axis, outer, n, inner);
  std::vector<S> out(static_cast<size_t>(outer * inner), S(0));
  const S* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const S* src = p + (o * n + k) * inner;
      S* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto an = a.node();
  return detail::make_result<S>(
      detail::reduced_shape(a.shape(), axis, keepdims), std::move(out), "sum_along",
      detail::grad_parents_of<S>({&a}), [an, outer, n, inner](const Node<S>& res) {
        an->ensure_grad();
        const S* g = res.grad.data();
        S* d = an->grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t k = 0; k < n; ++k) {
            S* dst = d + (o * n + k) * inner;
            const S* src = g + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      });
}

template <class S>
Tensor<S> mean_along(const Tensor<S>& a, int64_t axis, bool keepdims = false) {
  int64_t n = a.shape()[static_cast<size_t>(axis)];
  return mul_scalar(sum_along(a, axis, keepdims), S(1) / static_cast<S>(n));
}

// Max over one axis; gradient routes to the first maximal element (ties
// broken toward the lowest index).
template <class S>
Tensor<S> max_along(const Tensor<S>& a, int64_t axis, bool keepdims = false) {
  detail::check_axis(a.shape(), axis);
  int64_t outer, n, inner;
  detail::reduce_geometry(a.shape(), axis, outer, n, inner);
  if (n == 0) throw std::invalid_argument("max_along over empty axis");
  std::vector<S> out(static_cast<size_t>(outer * inner));
  std::vector<int64_t> argmax(out.size());
  const S* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      S best = p[(o * n) * inner + i];
      int64_t bk = 0;
      for (int64_t k = 1; k < n; ++k) {
        S v = p[(o * n + k) * inner + i];
        if (v > best) {
          best = v;
          bk = k;
        }
      }
      out[static_cast<size_t>(o * inner + i)] = best;
      argmax[static_cast<size_t>(o * inner + i)] = bk;
    }
  auto an = a.node();
  return detail::make_result<S>(
      detail::reduced_shape(a.shape(), axis, keepdims), std::move(out), "max_along",
      detail::grad_parents_of<S>({&a}),
      [an, outer, n, inner, argmax](const Node<S>& res) {
        an->ensure_grad();
        const S* g = res.grad.data();
        S* d = an->grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < inner; ++i) {
            int64_t k = argmax[static_cast<size_t>(o * inner + i)];
            d[(o * n + k) * inner + i] += g[o * inner + i];
          }
      });
}

// [batch, channels, spatial...] -> [batch, channels], mean over all spatial axes.
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& a) {
  if (a.ndim() < 3)
    throw std::invalid_argument("global_avg_pool expects [batch,channels,spatial...], got " +
                                shape_str(a.shape()));
  int64_t b = a.extent(0), c = a.extent(1);
  int64_t spatial = a.numel() / (b * c);
  std::vector<S> out(static_cast<size_t>(b * c));
  const S* p = a.data().data();
  for (int64_t i = 0; i < b * c; ++i) {
    double acc = 0;
    const S* src = p + i * spatial;
    for (int64_t k = 0; k < spatial; ++k) acc += static_cast<double>(src[k]);
    out[static_cast<size_t>(i)] = static_cast<S>(acc / static_cast<double>(spatial));
  }
  auto an = a.node();
  return detail::make_result<S>(
      {b, c}, std::move(out), "global_avg_pool", detail::grad_parents_of<S>({&a}),
      [an, b, c, spatial](const Node<S>& res) {
        an->ensure_grad();
        S inv = S(1) / static_cast<S>(spatial);
        const S* g = res.grad.data();
        S* d = an->grad.data();
        for (int64_t i = 0; i < b * c; ++i) {
          S gv = g[i] * inv;
          S* dst = d + i * spatial;
          for (int64_t k = 0; k < spatial; ++k) dst[k] += gv;
        }
      });
}

// ---- shape ops ----

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  std::vector<S> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return detail::make_result<S>(std::move(shape), std::move(out), "reshape",
                                detail::grad_parents_of<S>({&a}),
                                [an](const Node<S>& res) {
                                  an->ensure_grad();
                                  for (size_t i = 0; i < res.grad.size(); ++i)
                                    an->grad[i] += res.grad[i];
                                });
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.ndim() != 2)
    throw std::invalid_argument("transpose2d expects a matrix, got " + shape_str(a.shape()));
  int64_t r = a.extent(0), c = a.extent(1);
  std::vector<S> out(static_cast<size_t>(r * c));
  const S* p = a.data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = p[i * c + j];
  auto an = a.node();
  return detail::make_result<S>({c, r}, std::move(out), "transpose2d",
                                detail::grad_parents_of<S>({&a}),
                                [an, r, c](const Node<S>& res) {
                                  an->ensure_grad();
                                  const S* g = res.grad.data();
                                  S* d = an->grad.data();
                                  for (int64_t j = 0; j < c; ++j)
                                    for (int64_t i = 0; i < r; ++i) d[i * c + j] += g[j * r + i];
                                });
}

// ---- matmul ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul expects matrices, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw std::invalid_argument("matmul inner dimensions differ: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<S> out(static_cast<size_t>(m * n));
  {
    detail::ConstMatMap<S> A(a.data().data(), m, k), B(b.data().data(), k, n);
    detail::MatMap<S> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      {m, n}, std::move(out), "matmul", detail::grad_parents_of<S>({&a, &b}),
      [an, bn, m, k, n](const Node<S>& res) {
        detail::ConstMatMap<S> G(res.grad.data(), m, n);
        detail::ConstMatMap<S> A(an->value.data(), m, k), B(bn->value.data(), k, n);
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MatMap<S> dA(an->grad.data(), m, k);
          dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::MatMap<S> dB(bn->grad.data(), k, n);
          dB.noalias() += A.transpose() * G;
        }
      });
}

// ---- conv3d ----

namespace detail {

struct Conv3dDims {
  int64_t batch, cin, in_d, in_h, in_w;
  int64_t cout, kd, kh, kw;
  int64_t stride, padding;
  int64_t out_d, out_h, out_w;
  int64_t patch() const { return cin * kd * kh * kw; }
  int64_t voxels() const { return out_d * out_h * out_w; }
};

inline int64_t conv_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// COL layout: [out voxel (z,y,x row-major)][cin,kz,ky,kx], zero-padded reads.
template <class S>
void im2col(const S* in, const Conv3dDims& d, S* col) {
  int64_t ck = d.patch();
  for (int64_t oz = 0; oz < d.out_d; ++oz)
    for (int64_t oy = 0; oy < d.out_h; ++oy)
      for (int64_t ox = 0; ox < d.out_w; ++ox) {
        S* row = col + ((oz * d.out_h + oy) * d.out_w + ox) * ck;
        int64_t z0 = oz * d.stride - d.padding;
        int64_t y0 = oy * d.stride - d.padding;
        int64_t x0 = ox * d.stride - d.padding;
        for (int64_t c = 0; c < d.cin; ++c) {
          const S* chan = in + c * d.in_d * d.in_h * d.in_w;
          for (int64_t kz = 0; kz < d.kd; ++kz) {
            int64_t z = z0 + kz;
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t y = y0 + ky;
              S* dst = row + ((c * d.kd + kz) * d.kh + ky) * d.kw;
              if (z < 0 || z >= d.in_d || y < 0 || y >= d.in_h) {
                for (int64_t kx = 0; kx < d.kw; ++kx) dst[kx] = S(0);
                continue;
              }
              const S* src = chan + (z * d.in_h + y) * d.in_w;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t x = x0 + kx;
                dst[kx] = (x >= 0 && x < d.in_w) ? src[x] : S(0);
              }
            }
          }
        }
      }
}

template <class S>
void col2im_add(const S* col, const Conv3dDims& d, S* din) {
  int64_t ck = d.patch();
  for (int64_t oz = 0; oz < d.out_d; ++oz)
    for (int64_t oy = 0; oy < d.out_h; ++oy)
      for (int64_t ox = 0; ox < d.out_w; ++ox) {
        const S* row = col + ((oz * d.out_h + oy) * d.out_w + ox) * ck;
        int64_t z0 = oz * d.stride - d.padding;
        int64_t y0 = oy * d.stride - d.padding;
        int64_t x0 = ox * d.stride - d.padding;
        for (int64_t c = 0; c < d.cin; ++c) {
          S* chan = din + c * d.in_d * d.in_h * d.in_w;
          for (int64_t kz = 0; kz < d.kd; ++kz) {
            int64_t z = z0 + kz;
            if (z < 0 || z >= d.in_d) continue;
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t y = y0 + ky;
              if (y < 0 || y >= d.in_h) continue;
              const S* src = row + ((c * d.kd + kz) * d.kh + ky) * d.kw;
              S* dst = chan + (z * d.in_h + y) * d.in_w;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t x = x0 + kx;
                if (x >= 0 && x < d.in_w) dst[x] += src[kx];
              }
            }
          }
        }
      }
}

}  // namespace detail

// Cross-correlation (no kernel flip), scalar stride and zero padding on all
// three spatial axes. input [batch,cin,d,h,w], kernel [cout,cin,kd,kh,kw].
template <class S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, int64_t stride,
                 int64_t padding) {
  if (input.ndim() != 5 || kernel.ndim() != 5)
    throw std::invalid_argument("conv3d expects 5-d input and kernel, got " +
                                shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  if (stride < 1) throw std::invalid_argument("conv3d stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv3d padding must be >= 0");
  detail::Conv3dDims d;
  d.batch = input.extent(0);
  d.cin = input.extent(1);
  d.in_d = input.extent(2);
  d.in_h = input.extent(3);
  d.in_w = input.extent(4);
  d.cout = kernel.extent(0);
  d.kd = kernel.extent(2);
  d.kh = kernel.extent(3);
  d.kw = kernel.extent(4);
  d.stride = stride;
  d.padding = padding;
  if (kernel.extent(1) != d.cin)
    throw std::invalid_argument("conv3d channel mismatch: input " + shape_str(input.shape()) +
                                " vs kernel " + shape_str(kernel.shape()));
  if (d.kd > d.in_d + 2 * padding || d.kh > d.in_h + 2 * padding || d.kw > d.in_w + 2 * padding)
    throw std::invalid_argument("conv3d kernel larger than padded input: kernel " +
                                shape_str(kernel.shape()) + ", input " +
                                shape_str(input.shape()) + ", padding " +
                                std::to_string(padding));
  d.out_d = detail::conv_extent(d.in_d, d.kd, stride, padding);
  d.out_h = detail::conv_extent(d.in_h, d.kh, stride, padding);
  d.out_w = detail::conv_extent(d.in_w, d.kw, stride, padding);

  const int64_t P = d.voxels(), CK = d.patch();
  const int64_t in_sample = d.cin * d.in_d * d.in_h * d.in_w;
  const int64_t out_sample = d.cout * P;
  std::vector<S> out(static_cast<size_t>(d.batch * out_sample));
  {
    std::vector<S> col(static_cast<size_t>(P * CK));
    std::vector<S> prod(static_cast<size_t>(P * d.cout));
    detail::ConstMatMap<S> W(kernel.data().data(), d.cout, CK);
    for (int64_t b = 0; b < d.batch; ++b) {
      detail::im2col(input.data().data() + b * in_sample, d, col.data());
      detail::ConstMatMap<S> COL(col.data(), P, CK);
      detail::MatMap<S> OUT(prod.data(), P, d.cout);
      OUT.noalias() = COL * W.transpose();
      // [P, cout] -> [cout, P] slab of the channel-major output
      detail::MatMap<S>(out.data() + b * out_sample, d.cout, P).noalias() = OUT.transpose();
    }
  }

  auto in_node = input.node();
  auto k_node = kernel.node();
  return detail::make_result<S>(
      {d.batch, d.cout, d.out_d, d.out_h, d.out_w}, std::move(out), "conv3d",
      detail::grad_parents_of<S>({&input, &kernel}),
      [in_node, k_node, d, P, CK, in_sample, out_sample](const Node<S>& res) {
        bool need_dx = in_node->requires_grad;
        bool need_dw = k_node->requires_grad;
        if (need_dx) in_node->ensure_grad();
        if (need_dw) k_node->ensure_grad();
        detail::ConstMatMap<S> W(k_node->value.data(), d.cout, CK);
        std::vector<S> col(static_cast<size_t>(P * CK));
        std::vector<S> dcol(need_dx ? static_cast<size_t>(P * CK) : 0);
        for (int64_t b = 0; b < d.batch; ++b) {
          detail::ConstMatMap<S> G(res.grad.data() + b * out_sample, d.cout, P);
          if (need_dw) {
            detail::im2col(in_node->value.data() + b * in_sample, d, col.data());
            detail::ConstMatMap<S> COL(col.data(), P, CK);
            detail::MatMap<S> dW(k_node->grad.data(), d.cout, CK);
            dW.noalias() += G * COL;
          }
          if (need_dx) {
            detail::MatMap<S> dCOL(dcol.data(), P, CK);
            dCOL.noalias() = G.transpose() * W;
            detail::col2im_add(dcol.data(), d, in_node->grad.data() + b * in_sample);
          }
        }
      });
}

// ---- l2 normalization over rows ----

template <class S>
Tensor<S> l2_normalize(const Tensor<S>& a, S min_norm = S(1e-12)) {
  if (a.ndim() != 2)
    throw std::invalid_argument("l2_normalize expects [batch,dim], got " +
                                shape_str(a.shape()));
  int64_t b = a.extent(0), dim = a.extent(1);
  std::vector<S> out(static_cast<size_t>(b * dim));
  std::vector<S> norms(static_cast<size_t>(b));
  const S* p = a.data().data();
  for (int64_t i = 0; i < b; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < dim; ++j) acc += double(p[i * dim + j]) * double(p[i * dim + j]);
    S norm = static_cast<S>(std::sqrt(acc));
    if (norm < min_norm)
      throw std::invalid_argument("l2_normalize: degenerate row " + std::to_string(i) +
                                  " with norm " + std::to_string(static_cast<double>(norm)));
    norms[static_cast<size_t>(i)] = norm;
    for (int64_t j = 0; j < dim; ++j) out[i * dim + j] = p[i * dim + j] / norm;
  }
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), "l2_normalize", detail::grad_parents_of<S>({&a}),
      [an, b, dim, norms](const Node<S>& res) {
        // dx = (g - y * <g, y>) / |x| per row
        an->ensure_grad();
        const S* g = res.grad.data();
        const S* y = res.value.data();
        S* dx = an->grad.data();
        for (int64_t i = 0; i < b; ++i) {
          double dot = 0;
          for (int64_t j = 0; j < dim; ++j) dot += double(g[i * dim + j]) * double(y[i * dim + j]);
          S inv = S(1) / norms[static_cast<size_t>(i)];
          for (int64_t j = 0; j < dim; ++j)
            dx[i * dim + j] += (g[i * dim + j] - static_cast<S>(dot) * y[i * dim + j]) * inv;
        }
      });
}

// ---- backward ----

template <class S>
void Tensor<S>::backward() const {
  if (numel() != 1)
    throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                shape_str(shape()));
  // Iterative post-order DFS: children before parents in `topo`.
  std::vector<Node<S>*> topo;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(n_.get(), 0);
  visited.insert(n_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<S>* node : topo) {
    node->ensure_grad();
    std::fill(node->grad.begin(), node->grad.end(), S(0));
  }
  n_->grad[0] = S(1);
  // topo is post-order, so iterating from the back visits each node after
  // everything that consumes it: gradients are complete when used.
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

template <class S>
void backward(const Tensor<S>& loss) {
  loss.backward();
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace sinuscl::nd
