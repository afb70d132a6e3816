#pragma once

// Dense tensors with reverse-mode differentiation on an explicit tape.
// Scalar type is a template parameter: float is the training default,
// double is used for gradient checking.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vapaad/common.hpp"

namespace vapaad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <typename T>
class Tape;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward first touches this node
  bool requires_grad = false;
  Tape<T>* producer = nullptr;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Handle with shared ownership of the underlying node. Copies alias the
// same buffer; use clone()/detached() for an independent copy.
template <typename T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode<T>>()) {}
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }
  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    for (int64_t d : shape) require(d > 0, "tensor extents must be positive, got " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    require(shape_numel(shape) == static_cast<int64_t>(data.size()),
            "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(T v) { return from({}, {v}); }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  T* grad_data() { return node_->grad.data(); }
  const T* grad_data() const { return node_->grad.data(); }
  const std::vector<T>& grad() const { return node_->grad; }
  void ensure_grad() { node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    require(numel() == 1, "item() requires a single-element tensor, shape is " + shape_str(shape()));
    return node_->value[0];
  }

  // Independent deep copy that keeps the requires_grad flag (a fresh leaf).
  Tensor clone() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of executed differentiable operations. backward() replays
// the record in exact reverse execution order, accumulating into .grad
// buffers; calling it twice without a grad reset therefore accumulates.
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const std::shared_ptr<TensorNode<T>>& out, std::function<void()> fn) {
    out->producer = this;
    steps_.push_back(Step{out, std::move(fn)});
  }

  size_t size() const { return steps_.size(); }

  // Clears gradients of every recorded output. Leaf tensors (parameters)
  // are reset by the caller via zero_grad.
  void reset_grads() {
    for (auto& s : steps_) s.out->grad.clear();
  }

  // Replays the record in reverse. Intermediate (recorded) gradients are
  // rebuilt from scratch on every call while leaf gradients accumulate, so
  // calling backward twice doubles parameter gradients.
  void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, "backward: loss must be a scalar, shape is " + shape_str(loss.shape()));
    require(loss.node()->producer == this, "backward: loss was not produced on this tape");
    for (auto& s : steps_) s.out->grad.clear();
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
  }

 private:
  struct Step {
    std::shared_ptr<TensorNode<T>> out;
    std::function<void()> fn;
  };
  std::vector<Step> steps_;
  Tape* prev_ = nullptr;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

namespace detail {

template <typename T, typename Fn>
void record_op(const Tensor<T>& out, Fn&& fn) {
  if (out.requires_grad()) {
    if (Tape<T>* t = Tape<T>::active()) t->record(out.node(), std::forward<Fn>(fn));
  }
}

// Broadcast of two shapes under the trailing-dimension rule, with adjacent
// dimensions coalesced so the inner loops stay long and contiguous.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<int64_t> extent;  // coalesced loop extents, outermost first
  std::vector<int64_t> sa, sb, so;
};

inline BroadcastPlan make_broadcast(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape ea(rank, 1), eb(rank, 1);
  std::copy(a.begin(), a.end(), ea.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), eb.begin() + (rank - b.size()));

  BroadcastPlan plan;
  plan.out_shape.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (ea[i] == eb[i]) {
      plan.out_shape[i] = ea[i];
    } else if (ea[i] == 1 || eb[i] == 1) {
      plan.out_shape[i] = std::max(ea[i], eb[i]);
    } else {
      fail("shapes " + shape_str(a) + " and " + shape_str(b) +
           " are not broadcastable under the trailing-dimension rule");
    }
  }

  const Shape stra = row_major_strides(ea);
  const Shape strb = row_major_strides(eb);
  const Shape stro = row_major_strides(plan.out_shape);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t n = plan.out_shape[i];
    const int64_t va = (ea[i] == 1 && n > 1) ? 0 : stra[i];
    const int64_t vb = (eb[i] == 1 && n > 1) ? 0 : strb[i];
    if (!plan.extent.empty()) {
      // merge with previous dim when both stride patterns stay contiguous
      const size_t k = plan.extent.size() - 1;
      if (plan.sa[k] == va * n && plan.sb[k] == vb * n && plan.so[k] == stro[i] * n) {
        plan.extent[k] *= n;
        plan.sa[k] = va;
        plan.sb[k] = vb;
        plan.so[k] = stro[i];
        continue;
      }
    }
    plan.extent.push_back(n);
    plan.sa.push_back(va);
    plan.sb.push_back(vb);
    plan.so.push_back(stro[i]);
  }
  if (plan.extent.empty()) {  // two scalars
    plan.extent.push_back(1);
    plan.sa.push_back(0);
    plan.sb.push_back(0);
    plan.so.push_back(0);
  }
  return plan;
}

// Walks all outer dims of a plan, invoking fn(offset_a, offset_b, offset_o)
// once per innermost row.
template <typename Fn>
void for_each_row(const BroadcastPlan& p, Fn&& fn) {
  const size_t nd = p.extent.size();
  std::vector<int64_t> idx(nd, 0);
  for (;;) {
    int64_t oa = 0, ob = 0, oo = 0;
    for (size_t i = 0; i + 1 < nd; ++i) {
      oa += idx[i] * p.sa[i];
      ob += idx[i] * p.sb[i];
      oo += idx[i] * p.so[i];
    }
    fn(oa, ob, oo);
    int i = static_cast<int>(nd) - 2;
    for (; i >= 0; --i) {
      if (++idx[i] < p.extent[i]) break;
      idx[i] = 0;
    }
    if (i < 0) return;
  }
}

template <typename T, typename Op>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Op op) {
  const BroadcastPlan plan = make_broadcast(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(plan.out_shape, a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const size_t last = plan.extent.size() - 1;
  const int64_t n = plan.extent[last];
  const int64_t sa = plan.sa[last], sb = plan.sb[last];
  for_each_row(plan, [&](int64_t oa, int64_t ob, int64_t oo) {
    const T* ra = pa + oa;
    const T* rb = pb + ob;
    T* ro = po + oo;
    if (sa == 1 && sb == 1) {
      for (int64_t i = 0; i < n; ++i) ro[i] = op(ra[i], rb[i]);
    } else if (sa == 1 && sb == 0) {
      const T v = rb[0];
      for (int64_t i = 0; i < n; ++i) ro[i] = op(ra[i], v);
    } else if (sa == 0 && sb == 1) {
      const T v = ra[0];
      for (int64_t i = 0; i < n; ++i) ro[i] = op(v, rb[i]);
    } else {
      for (int64_t i = 0; i < n; ++i) ro[i] = op(ra[i * sa], rb[i * sb]);
    }
  });
  return out;
}

// Accumulates d_out into d_a through the broadcast pattern; the element
// visit order is fixed row-major so repeated runs are bitwise identical.
template <typename T, typename Fn>
void accumulate_broadcast(const BroadcastPlan& plan, bool into_a, std::vector<T>& dst,
                          const T* go, Fn&& contrib) {
  const size_t last = plan.extent.size() - 1;
  const int64_t n = plan.extent[last];
  const int64_t sd = into_a ? plan.sa[last] : plan.sb[last];
  for_each_row(plan, [&](int64_t oa, int64_t ob, int64_t oo) {
    const int64_t od = into_a ? oa : ob;
    T* rd = dst.data() + od;
    const T* rg = go + oo;
    if (sd == 1) {
      for (int64_t i = 0; i < n; ++i) rd[i] += contrib(rg[i], oo + i, oa, ob, i);
    } else if (sd == 0) {
      T acc = 0;
      for (int64_t i = 0; i < n; ++i) acc += contrib(rg[i], oo + i, oa, ob, i);
      rd[0] += acc;
    } else {
      for (int64_t i = 0; i < n; ++i) rd[i * sd] += contrib(rg[i], oo + i, oa, ob, i);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// binary elementwise ops (trailing-dimension broadcasting)

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x + y; });
  detail::record_op(out, [an = a.node(), bn = b.node(), on = out.node(),
                          plan = detail::make_broadcast(a.shape(), b.shape())]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      detail::accumulate_broadcast<T>(plan, true, an->grad, go,
                                      [](T g, int64_t, int64_t, int64_t, int64_t) { return g; });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::accumulate_broadcast<T>(plan, false, bn->grad, go,
                                      [](T g, int64_t, int64_t, int64_t, int64_t) { return g; });
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x - y; });
  detail::record_op(out, [an = a.node(), bn = b.node(), on = out.node(),
                          plan = detail::make_broadcast(a.shape(), b.shape())]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      detail::accumulate_broadcast<T>(plan, true, an->grad, go,
                                      [](T g, int64_t, int64_t, int64_t, int64_t) { return g; });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::accumulate_broadcast<T>(plan, false, bn->grad, go,
                                      [](T g, int64_t, int64_t, int64_t, int64_t) { return -g; });
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::BroadcastPlan plan = detail::make_broadcast(a.shape(), b.shape());
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x * y; });
  detail::record_op(out, [an = a.node(), bn = b.node(), on = out.node(), plan]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    const size_t last = plan.extent.size() - 1;
    const int64_t isa = plan.sa[last], isb = plan.sb[last];
    if (an->requires_grad) {
      an->ensure_grad();
      const T* pb = bn->value.data();
      detail::accumulate_broadcast<T>(plan, true, an->grad, go,
                                      [&](T g, int64_t, int64_t, int64_t ob, int64_t i) {
                                        return g * pb[ob + i * isb];
                                      });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const T* pa = an->value.data();
      detail::accumulate_broadcast<T>(plan, false, bn->grad, go,
                                      [&](T g, int64_t, int64_t oa, int64_t, int64_t i) {
                                        return g * pa[oa + i * isa];
                                      });
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::BroadcastPlan plan = detail::make_broadcast(a.shape(), b.shape());
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x / y; });
  detail::record_op(out, [an = a.node(), bn = b.node(), on = out.node(), plan]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    const size_t last = plan.extent.size() - 1;
    const int64_t isa = plan.sa[last], isb = plan.sb[last];
    const T* pa = an->value.data();
    const T* pb = bn->value.data();
    if (an->requires_grad) {
      an->ensure_grad();
      detail::accumulate_broadcast<T>(plan, true, an->grad, go,
                                      [&](T g, int64_t, int64_t, int64_t ob, int64_t i) {
                                        return g / pb[ob + i * isb];
                                      });
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::accumulate_broadcast<T>(plan, false, bn->grad, go,
                                      [&](T g, int64_t, int64_t oa, int64_t ob, int64_t i) {
                                        const T d = pb[ob + i * isb];
                                        return -g * pa[oa + i * isa] / (d * d);
                                      });
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// unary elementwise ops

namespace detail {

template <typename T, typename Fwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  return out;
}

// Backward where the local derivative is a function of (input, output).
template <typename T, typename Dfn>
void record_unary(const Tensor<T>& a, const Tensor<T>& out, Dfn dfn) {
  detail::record_op(out, [an = a.node(), on = out.node(), dfn]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* go = on->grad.data();
    const T* px = an->value.data();
    const T* py = on->value.data();
    T* gx = an->grad.data();
    const int64_t n = an->numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * dfn(px[i], py[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return -x; });
  detail::record_unary(a, out, [](T, T) { return T(-1); });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return ScalarMath<T>::sigmoid(x); });
  detail::record_unary(a, out, [](T, T y) { return y * (T(1) - y); });
  return out;
}

template <typename T>
Tensor<T> tanh_(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return ScalarMath<T>::tanh(x); });
  detail::record_unary(a, out, [](T, T y) { return T(1) - y * y; });
  return out;
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return ScalarMath<T>::exp(x); });
  detail::record_unary(a, out, [](T, T y) { return y; });
  return out;
}

template <typename T>
Tensor<T> log_(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return ScalarMath<T>::log(x); });
  detail::record_unary(a, out, [](T x, T) { return T(1) / x; });
  return out;
}

template <typename T>
Tensor<T> sqrt_(const Tensor<T>& a) {
  Tensor<T> out = detail::unary_op(a, [](T x) { return std::sqrt(x); });
  detail::record_unary(a, out, [](T, T y) { return T(1) / (T(2) * y); });
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T alpha) {
  Tensor<T> out = detail::unary_op(a, [alpha](T x) { return x > T(0) ? x : alpha * x; });
  detail::record_unary(a, out, [alpha](T x, T) { return x > T(0) ? T(1) : alpha; });
  return out;
}

// Clamp with pass-through gradient strictly inside (lo, hi). Loss code uses
// this to keep log() away from 0 and 1; the log primitive itself is exact.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  Tensor<T> out = detail::unary_op(a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); });
  detail::record_unary(a, out, [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::unary_op(a, [s](T x) { return x * s; });
  detail::record_unary(a, out, [s](T, T) { return s; });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::unary_op(a, [s](T x) { return x + s; });
  detail::record_unary(a, out, [](T, T) { return T(1); });
  return out;
}

// Copy that drops graph connectivity: gradients never flow through it.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

// Output offset strides for a reduction: reduced axes contribute stride 0.
inline Shape reduction_strides(const Shape& in_shape, const std::vector<int>& axes, bool keepdims,
                               Shape* out_shape) {
  std::vector<bool> reduced(in_shape.size(), false);
  for (int a : axes) {
    require(a >= 0 && a < static_cast<int>(in_shape.size()),
            "reduction axis " + std::to_string(a) + " out of range for " + shape_str(in_shape));
    reduced[static_cast<size_t>(a)] = true;
  }
  Shape kept;
  for (size_t i = 0; i < in_shape.size(); ++i) {
    if (!reduced[i]) kept.push_back(in_shape[i]);
  }
  Shape full(in_shape.size());
  {
    Shape kept_strides = row_major_strides(kept);
    size_t k = 0;
    for (size_t i = 0; i < in_shape.size(); ++i) full[i] = reduced[i] ? 0 : kept_strides[k++];
  }
  if (keepdims) {
    out_shape->assign(in_shape.begin(), in_shape.end());
    for (size_t i = 0; i < in_shape.size(); ++i)
      if (reduced[i]) (*out_shape)[i] = 1;
  } else {
    *out_shape = kept;
  }
  return full;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, const std::vector<int>& axes, bool keepdims) {
  Shape out_shape;
  const Shape ostr = detail::reduction_strides(a.shape(), axes, keepdims, &out_shape);
  Tensor<T> out = Tensor<T>::zeros(out_shape, a.requires_grad());
  const Shape in_shape = a.shape();
  const size_t rank = in_shape.size();
  const T* pa = a.data();
  T* po = out.data();
  {
    std::vector<int64_t> idx(rank, 0);
    const int64_t n = a.numel();
    int64_t ooff = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
      po[ooff] += pa[flat];
      for (int i = static_cast<int>(rank) - 1; i >= 0; --i) {
        ooff += ostr[i];
        if (++idx[i] < in_shape[i]) break;
        idx[i] = 0;
        ooff -= ostr[i] * in_shape[i];
      }
    }
  }
  detail::record_op(out, [an = a.node(), on = out.node(), ostr, in_shape]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* go = on->grad.data();
    T* ga = an->grad.data();
    const size_t rank = in_shape.size();
    std::vector<int64_t> idx(rank, 0);
    const int64_t n = an->numel();
    int64_t ooff = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
      ga[flat] += go[ooff];
      for (int i = static_cast<int>(rank) - 1; i >= 0; --i) {
        ooff += ostr[i];
        if (++idx[i] < in_shape[i]) break;
        idx[i] = 0;
        ooff -= ostr[i] * in_shape[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, const std::vector<int>& axes, bool keepdims) {
  Tensor<T> s = reduce_sum(a, axes, keepdims);
  const T inv = T(1) / T(a.numel() / std::max<int64_t>(1, s.numel()));
  return scale(s, inv);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::from({}, {T(0)}, a.requires_grad());
  out.data()[0] = blocked_sum(a.data(), a.numel());
  detail::record_op(out, [an = a.node(), on = out.node()]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T g = on->grad[0];
    T* ga = an->grad.data();
    const int64_t n = an->numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  require(shape_numel(new_shape) == a.numel(),
          "reshape from " + shape_str(a.shape()) + " to " + shape_str(new_shape) + " changes element count");
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), a.values(), a.requires_grad());
  detail::record_op(out, [an = a.node(), on = out.node()]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* go = on->grad.data();
    T* ga = an->grad.data();
    const int64_t n = an->numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
  });
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose2d expects a rank-2 tensor, got " + shape_str(a.shape()));
  const int64_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out = Tensor<T>::zeros({c, r}, a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) po[j * r + i] = pa[i * c + j];
  detail::record_op(out, [an = a.node(), on = out.node(), r, c]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* go = on->grad.data();
    T* ga = an->grad.data();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
  });
  return out;
}

// x[i] along axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int64_t i) {
  require(a.rank() >= 1, "slice0 needs rank >= 1");
  require(i >= 0 && i < a.shape()[0], "slice0 index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  Shape sub(a.shape().begin() + 1, a.shape().end());
  const int64_t block = shape_numel(sub);
  std::vector<T> data(a.data() + i * block, a.data() + (i + 1) * block);
  Tensor<T> out = Tensor<T>::from(std::move(sub), std::move(data), a.requires_grad());
  detail::record_op(out, [an = a.node(), on = out.node(), i, block]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* go = on->grad.data();
    T* ga = an->grad.data() + i * block;
    for (int64_t k = 0; k < block; ++k) ga[k] += go[k];
  });
  return out;
}

// Stacks equally-shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack0(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "stack0 needs at least one tensor");
  const Shape& base = xs[0].shape();
  bool rg = false;
  for (const auto& x : xs) {
    require(x.shape() == base, "stack0: mismatched shapes " + shape_str(base) + " vs " + shape_str(x.shape()));
    rg = rg || x.requires_grad();
  }
  Shape out_shape;
  out_shape.push_back(static_cast<int64_t>(xs.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  Tensor<T> out = Tensor<T>::zeros(out_shape, rg);
  const int64_t block = shape_numel(base);
  for (size_t k = 0; k < xs.size(); ++k)
    std::copy(xs[k].data(), xs[k].data() + block, out.data() + static_cast<int64_t>(k) * block);
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  nodes.reserve(xs.size());
  for (const auto& x : xs) nodes.push_back(x.node());
  detail::record_op(out, [nodes, on = out.node(), block]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    for (size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      nodes[k]->ensure_grad();
      T* ga = nodes[k]->grad.data();
      const T* g = go + static_cast<int64_t>(k) * block;
      for (int64_t i = 0; i < block; ++i) ga[i] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul and softmax

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  require(a.shape()[1] == b.shape()[0],
          "matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.shape()[0], kk = a.shape()[1], n = b.shape()[1];
  Tensor<T> out = Tensor<T>::zeros({m, n}, a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    T* ro = po + i * n;
    for (int64_t k = 0; k < kk; ++k) {
      const T w = pa[i * kk + k];
      const T* rb = pb + k * n;
      for (int64_t j = 0; j < n; ++j) ro[j] += w * rb[j];
    }
  }
  detail::record_op(out, [an = a.node(), bn = b.node(), on = out.node(), m, kk, n]() {
    if (on->grad.empty()) return;
    const T* go = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      const T* pb = bn->value.data();
      T* ga = an->grad.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t k = 0; k < kk; ++k) ga[i * kk + k] += blocked_dot(go + i * n, pb + k * n, n);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const T* pa = an->value.data();
      T* gb = bn->grad.data();
      for (int64_t k = 0; k < kk; ++k)
        for (int64_t i = 0; i < m; ++i) {
          const T w = pa[i * kk + k];
          const T* rg = go + i * n;
          T* rb = gb + k * n;
          for (int64_t j = 0; j < n; ++j) rb[j] += w * rg[j];
        }
    }
  });
  return out;
}

// Softmax along one axis, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  require(axis >= 0 && axis < a.rank(),
          "softmax axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
  const int64_t len = s[axis];
  Tensor<T> out = Tensor<T>::zeros(s, a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < inner; ++j) {
      const T* x = pa + o * len * inner + j;
      T* y = po + o * len * inner + j;
      T mx = x[0];
      for (int64_t k = 1; k < len; ++k) mx = std::max(mx, x[k * inner]);
      T sum = 0;
      for (int64_t k = 0; k < len; ++k) {
        const T e = ScalarMath<T>::exp(x[k * inner] - mx);
        y[k * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int64_t k = 0; k < len; ++k) y[k * inner] *= inv;
    }
  }
  detail::record_op(out, [an = a.node(), on = out.node(), outer, inner, len]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    const T* py = on->value.data();
    const T* go = on->grad.data();
    T* ga = an->grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t j = 0; j < inner; ++j) {
        const T* y = py + o * len * inner + j;
        const T* g = go + o * len * inner + j;
        T* d = ga + o * len * inner + j;
        T dot = 0;
        for (int64_t k = 0; k < len; ++k) dot += y[k * inner] * g[k * inner];
        for (int64_t k = 0; k < len; ++k) d[k * inner] += y[k * inner] * (g[k * inner] - dot);
      }
    }
  });
  return out;
}

// operator sugar used by layer and loss code
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}

}  // namespace vapaad
