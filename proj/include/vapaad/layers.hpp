#pragma once

// Neural building blocks: ConvLSTM cell and sequence scan, batch
// normalization, spatial self-attention with residual re-injection, the
// sigmoid Conv3D output head, and rotation augmentation.

#include <cmath>
#include <random>
#include <string>

#include "vapaad/conv.hpp"
#include "vapaad/tensor.hpp"

namespace vapaad {

enum class Mode { train, infer };

template <typename T>
Tensor<T> glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, std::mt19937& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> glorot_conv_kernel(int64_t cout, int64_t cin, int64_t kh, int64_t kw, std::mt19937& rng) {
  return glorot_uniform<T>({cout, cin, kh, kw}, cin * kh * kw, cout * kh * kw, rng);
}

// ---------------------------------------------------------------------------
// ConvLSTM

template <typename T>
struct ConvLSTMParams {
  int64_t in_channels = 0;
  int64_t filters = 0;
  int64_t kernel = 0;
  Tensor<T> w_xi, w_xf, w_xc, w_xo;  // input kernels (F, C_in, k, k)
  Tensor<T> w_hi, w_hf, w_hc, w_ho;  // recurrent kernels (F, F, k, k)
  Tensor<T> b_i, b_f, b_c, b_o;      // gate biases (F)

  static ConvLSTMParams glorot(int64_t in_channels, int64_t filters, int64_t kernel,
                               std::mt19937& rng) {
    require(kernel % 2 == 1, "convlstm kernel extent must be odd (same padding)");
    ConvLSTMParams p;
    p.in_channels = in_channels;
    p.filters = filters;
    p.kernel = kernel;
    p.w_xi = glorot_conv_kernel<T>(filters, in_channels, kernel, kernel, rng);
    p.w_xf = glorot_conv_kernel<T>(filters, in_channels, kernel, kernel, rng);
    p.w_xc = glorot_conv_kernel<T>(filters, in_channels, kernel, kernel, rng);
    p.w_xo = glorot_conv_kernel<T>(filters, in_channels, kernel, kernel, rng);
    p.w_hi = glorot_conv_kernel<T>(filters, filters, kernel, kernel, rng);
    p.w_hf = glorot_conv_kernel<T>(filters, filters, kernel, kernel, rng);
    p.w_hc = glorot_conv_kernel<T>(filters, filters, kernel, kernel, rng);
    p.w_ho = glorot_conv_kernel<T>(filters, filters, kernel, kernel, rng);
    p.b_i = Tensor<T>::zeros({filters}, true);
    p.b_f = Tensor<T>::zeros({filters}, true);
    p.b_c = Tensor<T>::zeros({filters}, true);
    p.b_o = Tensor<T>::zeros({filters}, true);
    return p;
  }

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w_xi", w_xi);
    fn(prefix + ".w_xf", w_xf);
    fn(prefix + ".w_xc", w_xc);
    fn(prefix + ".w_xo", w_xo);
    fn(prefix + ".w_hi", w_hi);
    fn(prefix + ".w_hf", w_hf);
    fn(prefix + ".w_hc", w_hc);
    fn(prefix + ".w_ho", w_ho);
    fn(prefix + ".b_i", b_i);
    fn(prefix + ".b_f", b_f);
    fn(prefix + ".b_c", b_c);
    fn(prefix + ".b_o", b_o);
  }
};

template <typename T>
struct ConvLSTMState {
  Tensor<T> h, c;  // both (F, H, W)

  static ConvLSTMState zeros(int64_t filters, int64_t height, int64_t width) {
    return {Tensor<T>::zeros({filters, height, width}), Tensor<T>::zeros({filters, height, width})};
  }
};

// One recurrence step. Standard gate equations without peephole terms:
//   i = sigmoid(Wxi*x + Whi*h + bi)   f = sigmoid(Wxf*x + Whf*h + bf)
//   g = tanh(Wxc*x + Whc*h + bc)      o = sigmoid(Wxo*x + Who*h + bo)
//   c' = f.c + i.g                    h' = o.tanh(c')
template <typename T>
ConvLSTMState<T> convlstm_step(const Tensor<T>& x, const ConvLSTMState<T>& state,
                               const ConvLSTMParams<T>& p) {
  require(x.rank() == 3, "convlstm_step input must be (C,H,W)");
  require(x.shape()[1] == state.h.shape()[1] && x.shape()[2] == state.h.shape()[2],
          "convlstm_step: spatial mismatch between input " + shape_str(x.shape()) + " and state " +
              shape_str(state.h.shape()));
  auto i = sigmoid(conv2d(x, p.w_xi, p.b_i, Pad::same) + conv2d(state.h, p.w_hi, Pad::same));
  auto f = sigmoid(conv2d(x, p.w_xf, p.b_f, Pad::same) + conv2d(state.h, p.w_hf, Pad::same));
  auto g = tanh_(conv2d(x, p.w_xc, p.b_c, Pad::same) + conv2d(state.h, p.w_hc, Pad::same));
  auto o = sigmoid(conv2d(x, p.w_xo, p.b_o, Pad::same) + conv2d(state.h, p.w_ho, Pad::same));
  auto c_next = f * state.c + i * g;
  auto h_next = o * tanh_(c_next);
  return {h_next, c_next};
}

// Left-to-right scan from a zero state, emitting the hidden map at every
// step (one output frame per input frame).
template <typename T>
Tensor<T> convlstm_sequence(const Tensor<T>& xs, const ConvLSTMParams<T>& p) {
  require(xs.rank() == 4, "convlstm_sequence input must be (T,C,H,W)");
  const int64_t steps = xs.shape()[0];
  auto state = ConvLSTMState<T>::zeros(p.filters, xs.shape()[2], xs.shape()[3]);
  std::vector<Tensor<T>> hs;
  hs.reserve(static_cast<size_t>(steps));
  for (int64_t t = 0; t < steps; ++t) {
    state = convlstm_step(slice0(xs, t), state, p);
    hs.push_back(state.h);
  }
  return stack0(hs);
}

// ---------------------------------------------------------------------------
// Batch normalization (per-channel statistics over all other axes)

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta;                // (C,1,1), trainable
  Tensor<T> running_mean, running_var;  // (C,1,1), updated in train mode
  T momentum = T(0.9);
  T epsilon = T(1e-5);
  int64_t updates = 0;
  bool stats_initialized = false;

  static BatchNormParams init(int64_t channels) {
    BatchNormParams p;
    p.gamma = Tensor<T>::filled({channels, 1, 1}, T(1), true);
    p.beta = Tensor<T>::zeros({channels, 1, 1}, true);
    p.running_mean = Tensor<T>::zeros({channels, 1, 1});
    p.running_var = Tensor<T>::filled({channels, 1, 1}, T(1));
    p.stats_initialized = true;
    return p;
  }

  int64_t channels() const { return gamma.numel(); }

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
  template <typename Fn>
  void for_each_state(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".running_mean", running_mean);
    fn(prefix + ".running_var", running_var);
  }
};

// x has channels at axis rank-3, i.e. (..., C, H, W) with at least one
// leading batch axis. Train mode normalizes by batch statistics taken over
// every non-channel axis and folds them into the running estimates; infer
// mode normalizes by the running estimates.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  require(x.rank() >= 4, "batchnorm input must be (batch..., C, H, W), got " + shape_str(x.shape()));
  const int channel_axis = x.rank() - 3;
  require(x.shape()[channel_axis] == p.channels(),
          "batchnorm channel count mismatch: input " + shape_str(x.shape()) + " vs " +
              std::to_string(p.channels()) + " parameters");
  Tensor<T> norm;
  if (mode == Mode::train) {
    require(x.numel() / x.shape()[channel_axis] > 1,
            "batchnorm train mode needs more than one statistical element per channel");
    std::vector<int> axes;
    for (int i = 0; i < x.rank(); ++i)
      if (i != channel_axis) axes.push_back(i);
    auto mu = reduce_mean(x, axes, true);
    auto centered = x - mu;
    auto var = reduce_mean(centered * centered, axes, true);
    norm = centered / sqrt_(add_scalar(var, p.epsilon));
    // fold batch statistics into the running estimates (no gradient)
    const T m = p.momentum;
    for (int64_t c = 0; c < p.channels(); ++c) {
      p.running_mean.data()[c] = m * p.running_mean.data()[c] + (T(1) - m) * mu.data()[c];
      p.running_var.data()[c] = m * p.running_var.data()[c] + (T(1) - m) * var.data()[c];
    }
    p.updates += 1;
    p.stats_initialized = true;
  } else {
    require(p.stats_initialized,
            "batchnorm infer mode called before any train-mode update with uninitialized running stats");
    norm = (x - p.running_mean) / sqrt_(add_scalar(p.running_var, p.epsilon));
  }
  return norm * p.gamma + p.beta;
}

// ---------------------------------------------------------------------------
// Spatial self-attention

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v;  // 1x1 projections (C, C, 1, 1), bias-free
  bool stop_qk_gradient = false;

  static AttentionParams glorot(int64_t channels, std::mt19937& rng, bool stop_qk = false) {
    AttentionParams p;
    p.w_q = glorot_conv_kernel<T>(channels, channels, 1, 1, rng);
    p.w_k = glorot_conv_kernel<T>(channels, channels, 1, 1, rng);
    p.w_v = glorot_conv_kernel<T>(channels, channels, 1, 1, rng);
    p.stop_qk_gradient = stop_qk;
    return p;
  }

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w_q", w_q);
    fn(prefix + ".w_k", w_k);
    fn(prefix + ".w_v", w_v);
  }
};

namespace detail {

template <typename T>
void transpose_into(const T* src, int64_t rows, int64_t cols, std::vector<T>& dst) {
  dst.resize(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) dst[static_cast<size_t>(j * rows + i)] = src[i * cols + j];
}

// Row-streamed scaled dot-product attention over (N,C) position matrices:
// out_i = sum_j softmax_j(scale * q_i . k_j) v_j. Score rows are produced,
// softmaxed and consumed one at a time, and recomputed the same way in the
// backward pass, so memory stays O(N*C) instead of O(N^2).
template <typename T>
void attention_rows(const T* q, const std::vector<T>& kt, int64_t n, int64_t c, T scale,
                    int64_t row, std::vector<T>& s) {
  s.resize(static_cast<size_t>(n));
  T* sd = s.data();
  std::fill(sd, sd + n, T(0));
  for (int64_t cc = 0; cc < c; ++cc) {
    const T w = scale * q[row * c + cc];
    const T* kr = kt.data() + cc * n;
    for (int64_t j = 0; j < n; ++j) sd[j] += w * kr[j];
  }
  const T mx = blocked_max(sd, n);
  for (int64_t j = 0; j < n; ++j) sd[j] = ScalarMath<T>::exp(sd[j] - mx);
  const T inv = T(1) / blocked_sum(sd, n);
  for (int64_t j = 0; j < n; ++j) sd[j] *= inv;
}

}  // namespace detail

template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention_core expects (N,C) matrices");
  require(q.shape() == k.shape() && q.shape() == v.shape(),
          "attention_core: q/k/v shapes must match, got " + shape_str(q.shape()) + " " +
              shape_str(k.shape()) + " " + shape_str(v.shape()));
  const int64_t n = q.shape()[0], c = q.shape()[1];
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({n, c}, rg);
  {
    thread_local std::vector<T> kt, vt, a;
    detail::transpose_into(k.data(), n, c, kt);
    detail::transpose_into(v.data(), n, c, vt);
    for (int64_t i = 0; i < n; ++i) {
      detail::attention_rows(q.data(), kt, n, c, scale, i, a);
      for (int64_t cc = 0; cc < c; ++cc)
        out.data()[i * c + cc] = blocked_dot(a.data(), vt.data() + cc * n, n);
    }
  }
  detail::record_op(out, [qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(), n, c,
                          scale]() {
    if (on->grad.empty()) return;
    const bool dq = qn->requires_grad, dk = kn->requires_grad, dv = vn->requires_grad;
    if (!dq && !dk && !dv) return;
    thread_local std::vector<T> kt, vt, a, da, dkt, dvt;
    detail::transpose_into(kn->value.data(), n, c, kt);
    detail::transpose_into(vn->value.data(), n, c, vt);
    if (dk) dkt.assign(static_cast<size_t>(c * n), T(0));
    if (dv) dvt.assign(static_cast<size_t>(c * n), T(0));
    const T* g = on->grad.data();
    const T* qd = qn->value.data();
    if (dq) qn->ensure_grad();
    da.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      detail::attention_rows(qd, kt, n, c, scale, i, a);
      T* dad = da.data();
      std::fill(dad, dad + n, T(0));
      for (int64_t cc = 0; cc < c; ++cc) {
        const T w = g[i * c + cc];
        const T* vr = vt.data() + cc * n;
        for (int64_t j = 0; j < n; ++j) dad[j] += w * vr[j];
      }
      if (dv) {
        const T* ad = a.data();
        for (int64_t cc = 0; cc < c; ++cc) {
          const T w = g[i * c + cc];
          T* dvr = dvt.data() + cc * n;
          for (int64_t j = 0; j < n; ++j) dvr[j] += w * ad[j];
        }
      }
      if (dq || dk) {
        const T rho = blocked_dot(a.data(), dad, n);
        const T* ad = a.data();
        // da becomes the score gradient with the scale folded in
        for (int64_t j = 0; j < n; ++j) dad[j] = scale * ad[j] * (dad[j] - rho);
        if (dq) {
          for (int64_t cc = 0; cc < c; ++cc)
            qn->grad[static_cast<size_t>(i * c + cc)] += blocked_dot(dad, kt.data() + cc * n, n);
        }
        if (dk) {
          for (int64_t cc = 0; cc < c; ++cc) {
            const T w = qd[i * c + cc];
            T* dkr = dkt.data() + cc * n;
            for (int64_t j = 0; j < n; ++j) dkr[j] += w * dad[j];
          }
        }
      }
    }
    if (dk) {
      kn->ensure_grad();
      for (int64_t j = 0; j < n; ++j)
        for (int64_t cc = 0; cc < c; ++cc)
          kn->grad[static_cast<size_t>(j * c + cc)] += dkt[static_cast<size_t>(cc * n + j)];
    }
    if (dv) {
      vn->ensure_grad();
      for (int64_t j = 0; j < n; ++j)
        for (int64_t cc = 0; cc < c; ++cc)
          vn->grad[static_cast<size_t>(j * c + cc)] += dvt[static_cast<size_t>(cc * n + j)];
    }
  });
  return out;
}

// Residual spatial self-attention over one (C,H,W) feature map. Positions
// are flattened to N = H*W vectors of length C; scores are scaled by
// 1/sqrt(C). With stop_qk_gradient the attention matrix acts as a constant
// in the backward pass: no gradient reaches w_q, w_k, or x via the scores.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  require(x.rank() == 3, "self_attention input must be (C,H,W), got " + shape_str(x.shape()));
  const int64_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int64_t n = h * w;
  Tensor<T> xq = x, wq = p.w_q, wk = p.w_k;
  if (p.stop_qk_gradient) {
    xq = detach(x);
    wq = detach(p.w_q);
    wk = detach(p.w_k);
  }
  auto q = transpose2d(reshape(conv2d(xq, wq, Pad::same), {c, n}));
  auto k = transpose2d(reshape(conv2d(xq, wk, Pad::same), {c, n}));
  auto v = transpose2d(reshape(conv2d(x, p.w_v, Pad::same), {c, n}));
  auto att = attention_core(q, k, v, T(1) / std::sqrt(static_cast<T>(c)));
  return x + reshape(transpose2d(att), {c, h, w});
}

// ---------------------------------------------------------------------------
// Conv3D output head

// (T,C,H,W) -> (T,1,H,W) through a same-padded 3-D convolution and sigmoid,
// so every emitted pixel lies strictly inside (0,1).
template <typename T>
Tensor<T> conv3d_head(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  return sigmoid(conv3d(x, kernel, bias, Pad::same));
}

// ---------------------------------------------------------------------------
// Rotation augmentation

// Rotates every frame of (T,C,H,W) by the same angle about the frame center
// using bilinear interpolation with zero fill. Linear in the input, so the
// backward pass (used only when feature maps are rotated) is a scatter of
// the same four tap weights.
template <typename T>
Tensor<T> rotate_frames(const Tensor<T>& seq, double angle_deg) {
  require(seq.rank() == 4, "rotate_frames input must be (T,C,H,W)");
  const int64_t tt = seq.shape()[0], c = seq.shape()[1], h = seq.shape()[2], w = seq.shape()[3];
  require(h == w, "rotate_frames requires square frames, got " + shape_str(seq.shape()));

  struct Tap {
    int64_t y0, x0;
    T w00, w01, w10, w11;
  };
  std::vector<Tap> taps(static_cast<size_t>(h * w));
  {
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double sx = cx + cs * (x - cx) + sn * (y - cy);
        const double sy = cy - sn * (x - cx) + cs * (y - cy);
        Tap t;
        const double fx0 = std::floor(sx), fy0 = std::floor(sy);
        t.x0 = static_cast<int64_t>(fx0);
        t.y0 = static_cast<int64_t>(fy0);
        const double fx = sx - fx0, fy = sy - fy0;
        t.w00 = static_cast<T>((1 - fy) * (1 - fx));
        t.w01 = static_cast<T>((1 - fy) * fx);
        t.w10 = static_cast<T>(fy * (1 - fx));
        t.w11 = static_cast<T>(fy * fx);
        taps[static_cast<size_t>(y * w + x)] = t;
      }
  }

  auto inside = [h, w](int64_t y, int64_t x) { return y >= 0 && y < h && x >= 0 && x < w; };
  Tensor<T> out = Tensor<T>::zeros(seq.shape(), seq.requires_grad());
  for (int64_t t = 0; t < tt; ++t)
    for (int64_t cc = 0; cc < c; ++cc) {
      const T* plane = seq.data() + (t * c + cc) * h * w;
      T* oplane = out.data() + (t * c + cc) * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const Tap& tp = taps[static_cast<size_t>(y * w + x)];
          T acc = 0;
          if (inside(tp.y0, tp.x0)) acc += tp.w00 * plane[tp.y0 * w + tp.x0];
          if (inside(tp.y0, tp.x0 + 1)) acc += tp.w01 * plane[tp.y0 * w + tp.x0 + 1];
          if (inside(tp.y0 + 1, tp.x0)) acc += tp.w10 * plane[(tp.y0 + 1) * w + tp.x0];
          if (inside(tp.y0 + 1, tp.x0 + 1)) acc += tp.w11 * plane[(tp.y0 + 1) * w + tp.x0 + 1];
          oplane[y * w + x] = acc;
        }
    }
  detail::record_op(out, [sn = seq.node(), on = out.node(), taps, inside, tt, c, h, w]() {
    if (on->grad.empty() || !sn->requires_grad) return;
    sn->ensure_grad();
    for (int64_t t = 0; t < tt; ++t)
      for (int64_t cc = 0; cc < c; ++cc) {
        const T* gplane = on->grad.data() + (t * c + cc) * h * w;
        T* dplane = sn->grad.data() + (t * c + cc) * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            const Tap& tp = taps[static_cast<size_t>(y * w + x)];
            const T g = gplane[y * w + x];
            if (inside(tp.y0, tp.x0)) dplane[tp.y0 * w + tp.x0] += tp.w00 * g;
            if (inside(tp.y0, tp.x0 + 1)) dplane[tp.y0 * w + tp.x0 + 1] += tp.w01 * g;
            if (inside(tp.y0 + 1, tp.x0)) dplane[(tp.y0 + 1) * w + tp.x0] += tp.w10 * g;
            if (inside(tp.y0 + 1, tp.x0 + 1)) dplane[(tp.y0 + 1) * w + tp.x0 + 1] += tp.w11 * g;
          }
      }
  });
  return out;
}

// Training-time augmentation: one uniform angle in [-max_deg, +max_deg] per
// sequence, identity in infer mode.
template <typename T>
Tensor<T> random_rotation(const Tensor<T>& seq, double max_deg, std::mt19937& rng, Mode mode) {
  if (mode == Mode::infer) return seq;
  std::uniform_real_distribution<double> dist(-max_deg, max_deg);
  return rotate_frames(seq, dist(rng));
}

}  // namespace vapaad
