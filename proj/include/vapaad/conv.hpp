#pragma once

// Direct 2-D and 3-D convolutions over channel-major feature maps, with
// reverse-mode support. Inputs are zero-padded into a scratch buffer so the
// inner loops are branch-free row operations the compiler can vectorize.

#include <vector>

#include "vapaad/tensor.hpp"

namespace vapaad {

enum class Pad { same, valid };

namespace detail {

struct ConvDim {
  int64_t in = 0, k = 0, stride = 1, pad_lo = 0, out = 0, padded = 0;
};

inline ConvDim conv_dim(int64_t in, int64_t k, int64_t stride, Pad pad, const char* what) {
  require(in >= 1, std::string(what) + ": zero-sized spatial dimension");
  ConvDim d;
  d.in = in;
  d.k = k;
  d.stride = stride;
  if (pad == Pad::same) {
    d.out = (in + stride - 1) / stride;
    const int64_t total = std::max<int64_t>((d.out - 1) * stride + k - in, 0);
    d.pad_lo = total / 2;
    d.padded = in + total;
  } else {
    require(in >= k, std::string(what) + ": kernel larger than input in valid mode");
    d.out = (in - k) / stride + 1;
    d.padded = in;
  }
  return d;
}

// ---------------------------------------------------------------------- 2-D

struct Conv2dPlan {
  int64_t cin, cout, kh, kw;
  ConvDim y, x;
};

template <typename T>
void conv2d_pad(const T* src, const Conv2dPlan& p, std::vector<T>& dst) {
  dst.assign(static_cast<size_t>(p.cin * p.y.padded * p.x.padded), T(0));
  for (int64_t c = 0; c < p.cin; ++c)
    for (int64_t yy = 0; yy < p.y.in; ++yy) {
      const T* s = src + (c * p.y.in + yy) * p.x.in;
      T* d = dst.data() + (c * p.y.padded + yy + p.y.pad_lo) * p.x.padded + p.x.pad_lo;
      std::copy(s, s + p.x.in, d);
    }
}

template <typename T>
void conv2d_forward(const T* pad, const T* k, const T* bias, T* out, const Conv2dPlan& p) {
  const int64_t oh = p.y.out, ow = p.x.out;
  for (int64_t co = 0; co < p.cout; ++co) {
    T* plane = out + co * oh * ow;
    const T b = bias ? bias[co] : T(0);
    for (int64_t i = 0; i < oh * ow; ++i) plane[i] = b;
    for (int64_t ci = 0; ci < p.cin; ++ci)
      for (int64_t ky = 0; ky < p.kh; ++ky)
        for (int64_t kx = 0; kx < p.kw; ++kx) {
          const T w = k[((co * p.cin + ci) * p.kh + ky) * p.kw + kx];
          for (int64_t yo = 0; yo < oh; ++yo) {
            const T* row = pad + (ci * p.y.padded + yo + ky) * p.x.padded + kx;
            T* orow = plane + yo * ow;
            for (int64_t xo = 0; xo < ow; ++xo) orow[xo] += w * row[xo];
          }
        }
  }
}

template <typename T>
void conv2d_backward(const T* pad, const T* k, const T* go, const Conv2dPlan& p, T* dx, T* dk,
                     T* dbias, std::vector<T>& dpad_scratch) {
  const int64_t oh = p.y.out, ow = p.x.out;
  if (dx) {
    dpad_scratch.assign(static_cast<size_t>(p.cin * p.y.padded * p.x.padded), T(0));
    for (int64_t ci = 0; ci < p.cin; ++ci) {
      for (int64_t co = 0; co < p.cout; ++co)
        for (int64_t ky = 0; ky < p.kh; ++ky)
          for (int64_t kx = 0; kx < p.kw; ++kx) {
            const T w = k[((co * p.cin + ci) * p.kh + ky) * p.kw + kx];
            for (int64_t yo = 0; yo < oh; ++yo) {
              const T* grow = go + (co * oh + yo) * ow;
              T* drow = dpad_scratch.data() + (ci * p.y.padded + yo + ky) * p.x.padded + kx;
              for (int64_t xo = 0; xo < ow; ++xo) drow[xo] += w * grow[xo];
            }
          }
      for (int64_t yy = 0; yy < p.y.in; ++yy) {
        const T* s = dpad_scratch.data() + (ci * p.y.padded + yy + p.y.pad_lo) * p.x.padded + p.x.pad_lo;
        T* d = dx + (ci * p.y.in + yy) * p.x.in;
        for (int64_t xx = 0; xx < p.x.in; ++xx) d[xx] += s[xx];
      }
    }
  }
  if (dk) {
    for (int64_t co = 0; co < p.cout; ++co)
      for (int64_t ci = 0; ci < p.cin; ++ci)
        for (int64_t ky = 0; ky < p.kh; ++ky)
          for (int64_t kx = 0; kx < p.kw; ++kx) {
            T acc = 0;
            for (int64_t yo = 0; yo < oh; ++yo)
              acc += blocked_dot(go + (co * oh + yo) * ow,
                                 pad + (ci * p.y.padded + yo + ky) * p.x.padded + kx, ow);
            dk[((co * p.cin + ci) * p.kh + ky) * p.kw + kx] += acc;
          }
  }
  if (dbias) {
    for (int64_t co = 0; co < p.cout; ++co) dbias[co] += blocked_sum(go + co * oh * ow, oh * ow);
  }
}

// ---------------------------------------------------------------------- 3-D

struct Conv3dPlan {
  int64_t cin, cout, kt, kh, kw;
  ConvDim t, y, x;
};

// Source layout is (T, C, H, W); padding transposes to channel-major
// (C, Tp, Hp, Wp) so the hot loops stream within one channel.
template <typename T>
void conv3d_pad(const T* src, const Conv3dPlan& p, std::vector<T>& dst) {
  dst.assign(static_cast<size_t>(p.cin * p.t.padded * p.y.padded * p.x.padded), T(0));
  for (int64_t tt = 0; tt < p.t.in; ++tt)
    for (int64_t c = 0; c < p.cin; ++c)
      for (int64_t yy = 0; yy < p.y.in; ++yy) {
        const T* s = src + ((tt * p.cin + c) * p.y.in + yy) * p.x.in;
        T* d = dst.data() +
               ((c * p.t.padded + tt + p.t.pad_lo) * p.y.padded + yy + p.y.pad_lo) * p.x.padded +
               p.x.pad_lo;
        std::copy(s, s + p.x.in, d);
      }
}

template <typename T>
void conv3d_forward(const T* pad, const T* k, const T* bias, T* out, const Conv3dPlan& p) {
  const int64_t ot = p.t.out, oh = p.y.out, ow = p.x.out;
  const int64_t st = p.t.stride, sh = p.y.stride, sw = p.x.stride;
  for (int64_t to = 0; to < ot; ++to)
    for (int64_t co = 0; co < p.cout; ++co) {
      T* plane = out + (to * p.cout + co) * oh * ow;
      const T b = bias ? bias[co] : T(0);
      for (int64_t i = 0; i < oh * ow; ++i) plane[i] = b;
      for (int64_t ci = 0; ci < p.cin; ++ci)
        for (int64_t kt = 0; kt < p.kt; ++kt)
          for (int64_t ky = 0; ky < p.kh; ++ky)
            for (int64_t kx = 0; kx < p.kw; ++kx) {
              const T w = k[(((co * p.cin + ci) * p.kt + kt) * p.kh + ky) * p.kw + kx];
              const int64_t ts = to * st + kt;
              for (int64_t yo = 0; yo < oh; ++yo) {
                const T* row = pad + ((ci * p.t.padded + ts) * p.y.padded + yo * sh + ky) * p.x.padded + kx;
                T* orow = plane + yo * ow;
                if (sw == 1) {
                  for (int64_t xo = 0; xo < ow; ++xo) orow[xo] += w * row[xo];
                } else {
                  for (int64_t xo = 0; xo < ow; ++xo) orow[xo] += w * row[xo * sw];
                }
              }
            }
    }
}

template <typename T>
void conv3d_backward(const T* pad, const T* k, const T* go, const Conv3dPlan& p, T* dx, T* dk,
                     T* dbias, std::vector<T>& dpad_scratch) {
  const int64_t ot = p.t.out, oh = p.y.out, ow = p.x.out;
  const int64_t st = p.t.stride, sh = p.y.stride, sw = p.x.stride;
  if (dx) {
    dpad_scratch.assign(static_cast<size_t>(p.cin * p.t.padded * p.y.padded * p.x.padded), T(0));
    for (int64_t to = 0; to < ot; ++to)
      for (int64_t co = 0; co < p.cout; ++co) {
        const T* gplane = go + (to * p.cout + co) * oh * ow;
        for (int64_t ci = 0; ci < p.cin; ++ci)
          for (int64_t kt = 0; kt < p.kt; ++kt)
            for (int64_t ky = 0; ky < p.kh; ++ky)
              for (int64_t kx = 0; kx < p.kw; ++kx) {
                const T w = k[(((co * p.cin + ci) * p.kt + kt) * p.kh + ky) * p.kw + kx];
                const int64_t ts = to * st + kt;
                for (int64_t yo = 0; yo < oh; ++yo) {
                  const T* grow = gplane + yo * ow;
                  T* drow = dpad_scratch.data() +
                            ((ci * p.t.padded + ts) * p.y.padded + yo * sh + ky) * p.x.padded + kx;
                  for (int64_t xo = 0; xo < ow; ++xo) drow[xo * sw] += w * grow[xo];
                }
              }
      }
    for (int64_t tt = 0; tt < p.t.in; ++tt)
      for (int64_t c = 0; c < p.cin; ++c)
        for (int64_t yy = 0; yy < p.y.in; ++yy) {
          const T* s = dpad_scratch.data() +
                       ((c * p.t.padded + tt + p.t.pad_lo) * p.y.padded + yy + p.y.pad_lo) * p.x.padded +
                       p.x.pad_lo;
          T* d = dx + ((tt * p.cin + c) * p.y.in + yy) * p.x.in;
          for (int64_t xx = 0; xx < p.x.in; ++xx) d[xx] += s[xx];
        }
  }
  if (dk) {
    for (int64_t co = 0; co < p.cout; ++co)
      for (int64_t ci = 0; ci < p.cin; ++ci)
        for (int64_t kt = 0; kt < p.kt; ++kt)
          for (int64_t ky = 0; ky < p.kh; ++ky)
            for (int64_t kx = 0; kx < p.kw; ++kx) {
              T acc = 0;
              for (int64_t to = 0; to < ot; ++to) {
                const T* gplane = go + (to * p.cout + co) * oh * ow;
                const int64_t ts = to * st + kt;
                for (int64_t yo = 0; yo < oh; ++yo) {
                  const T* grow = gplane + yo * ow;
                  const T* row =
                      pad + ((ci * p.t.padded + ts) * p.y.padded + yo * sh + ky) * p.x.padded + kx;
                  if (sw == 1) {
                    acc += blocked_dot(grow, row, ow);
                  } else {
                    for (int64_t xo = 0; xo < ow; ++xo) acc += grow[xo] * row[xo * sw];
                  }
                }
              }
              dk[(((co * p.cin + ci) * p.kt + kt) * p.kh + ky) * p.kw + kx] += acc;
            }
  }
  if (dbias) {
    for (int64_t co = 0; co < p.cout; ++co) {
      T acc = 0;
      for (int64_t to = 0; to < ot; ++to)
        acc += blocked_sum(go + (to * p.cout + co) * oh * ow, oh * ow);
      dbias[co] += acc;
    }
  }
}

template <typename T>
std::vector<T>& conv_scratch(int which) {
  thread_local std::vector<T> bufs[4];
  return bufs[which];
}

}  // namespace detail

// conv2d over (C_in, H, W) with kernel (C_out, C_in, kH, kW), stride 1.
// `same` keeps H and W (odd kernels only); `valid` shrinks them.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias, Pad pad) {
  require(x.rank() == 3, "conv2d input must be (C,H,W), got " + shape_str(x.shape()));
  require(kernel.rank() == 4, "conv2d kernel must be (C_out,C_in,kH,kW), got " + shape_str(kernel.shape()));
  require(kernel.shape()[1] == x.shape()[0],
          "conv2d channel mismatch: input " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  detail::Conv2dPlan p;
  p.cin = x.shape()[0];
  p.cout = kernel.shape()[0];
  p.kh = kernel.shape()[2];
  p.kw = kernel.shape()[3];
  if (pad == Pad::same)
    require(p.kh % 2 == 1 && p.kw % 2 == 1, "conv2d same-padding requires odd kernel extents");
  p.y = detail::conv_dim(x.shape()[1], p.kh, 1, pad, "conv2d");
  p.x = detail::conv_dim(x.shape()[2], p.kw, 1, pad, "conv2d");
  if (bias) require(bias->rank() == 1 && bias->shape()[0] == p.cout, "conv2d bias must be (C_out)");

  bool rg = x.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
  Tensor<T> out = Tensor<T>::zeros({p.cout, p.y.out, p.x.out}, rg);
  auto& padded = detail::conv_scratch<T>(0);
  detail::conv2d_pad(x.data(), p, padded);
  detail::conv2d_forward(padded.data(), kernel.data(), bias ? bias->data() : nullptr, out.data(), p);

  auto bn = bias ? bias->node() : nullptr;
  detail::record_op(out, [xn = x.node(), kn = kernel.node(), bn, on = out.node(), p]() {
    if (on->grad.empty()) return;
    const bool need_dx = xn->requires_grad;
    const bool need_dk = kn->requires_grad;
    const bool need_db = bn && bn->requires_grad;
    if (!need_dx && !need_dk && !need_db) return;
    auto& padded = detail::conv_scratch<T>(0);
    auto& dpad = detail::conv_scratch<T>(1);
    detail::conv2d_pad(xn->value.data(), p, padded);
    if (need_dx) xn->ensure_grad();
    if (need_dk) kn->ensure_grad();
    if (need_db) bn->ensure_grad();
    detail::conv2d_backward(padded.data(), kn->value.data(), on->grad.data(), p,
                            need_dx ? xn->grad.data() : nullptr, need_dk ? kn->grad.data() : nullptr,
                            need_db ? bn->grad.data() : nullptr, dpad);
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, Pad pad) {
  return conv2d(x, kernel, &bias, pad);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, Pad pad) {
  return conv2d(x, kernel, static_cast<const Tensor<T>*>(nullptr), pad);
}

// conv3d over (T, C_in, H, W) with kernel (C_out, C_in, kT, kH, kW) and
// per-axis strides (time, height, width).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias, Pad pad,
                 int64_t stride_t = 1, int64_t stride_h = 1, int64_t stride_w = 1) {
  require(x.rank() == 4, "conv3d input must be (T,C,H,W), got " + shape_str(x.shape()));
  require(kernel.rank() == 5, "conv3d kernel must be (C_out,C_in,kT,kH,kW), got " + shape_str(kernel.shape()));
  require(kernel.shape()[1] == x.shape()[1],
          "conv3d channel mismatch: input " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  detail::Conv3dPlan p;
  p.cin = x.shape()[1];
  p.cout = kernel.shape()[0];
  p.kt = kernel.shape()[2];
  p.kh = kernel.shape()[3];
  p.kw = kernel.shape()[4];
  p.t = detail::conv_dim(x.shape()[0], p.kt, stride_t, pad, "conv3d");
  p.y = detail::conv_dim(x.shape()[2], p.kh, stride_h, pad, "conv3d");
  p.x = detail::conv_dim(x.shape()[3], p.kw, stride_w, pad, "conv3d");
  if (bias) require(bias->rank() == 1 && bias->shape()[0] == p.cout, "conv3d bias must be (C_out)");

  bool rg = x.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
  Tensor<T> out = Tensor<T>::zeros({p.t.out, p.cout, p.y.out, p.x.out}, rg);
  auto& padded = detail::conv_scratch<T>(2);
  detail::conv3d_pad(x.data(), p, padded);
  detail::conv3d_forward(padded.data(), kernel.data(), bias ? bias->data() : nullptr, out.data(), p);

  auto bn = bias ? bias->node() : nullptr;
  detail::record_op(out, [xn = x.node(), kn = kernel.node(), bn, on = out.node(), p]() {
    if (on->grad.empty()) return;
    const bool need_dx = xn->requires_grad;
    const bool need_dk = kn->requires_grad;
    const bool need_db = bn && bn->requires_grad;
    if (!need_dx && !need_dk && !need_db) return;
    auto& padded = detail::conv_scratch<T>(2);
    auto& dpad = detail::conv_scratch<T>(3);
    detail::conv3d_pad(xn->value.data(), p, padded);
    if (need_dx) xn->ensure_grad();
    if (need_dk) kn->ensure_grad();
    if (need_db) bn->ensure_grad();
    detail::conv3d_backward(padded.data(), kn->value.data(), on->grad.data(), p,
                            need_dx ? xn->grad.data() : nullptr, need_dk ? kn->grad.data() : nullptr,
                            need_db ? bn->grad.data() : nullptr, dpad);
  });
  return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, Pad pad,
                 int64_t stride_t = 1, int64_t stride_h = 1, int64_t stride_w = 1) {
  return conv3d(x, kernel, &bias, pad, stride_t, stride_h, stride_w);
}

}  // namespace vapaad
