#pragma once

// The next-frame generator (stacked ConvLSTM -> batch norm -> self-attention
// blocks with a sigmoid Conv3D head) and the sequence instructor that scores
// whole sequences as real or generated.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vapaad/layers.hpp"

namespace vapaad {

struct VapaadConfig {
  int64_t frame_size = 64;  // frames are square
  int blocks = 3;
  std::vector<int64_t> filters{64, 64, 64};
  std::vector<int64_t> kernels{5, 3, 1};
  double max_rotation_deg = 15.0;
  bool stop_grad = false;       // freeze the attention score path (q/k)
  bool attention = true;        // ablation switch: drop the attention stage
  bool interior_augmentation = false;

  static VapaadConfig desk_scale() {
    VapaadConfig c;
    c.frame_size = 32;
    c.filters = {8, 8, 8};
    return c;
  }

  void validate() const {
    require(blocks >= 1, "config: blocks must be >= 1");
    require(static_cast<int>(filters.size()) == blocks && static_cast<int>(kernels.size()) == blocks,
            "config: filters and kernels lists must have one entry per block");
    require(frame_size >= 1, "config: frame_size must be >= 1");
    for (int64_t f : filters) require(f >= 1, "config: filters must be >= 1");
    for (int64_t k : kernels) require(k >= 1 && k % 2 == 1, "config: kernels must be odd and >= 1");
  }
};

inline int64_t vapaad_parameter_count(const VapaadConfig& cfg) {
  int64_t total = 0;
  int64_t cin = 1;
  for (int b = 0; b < cfg.blocks; ++b) {
    const int64_t f = cfg.filters[static_cast<size_t>(b)];
    const int64_t k = cfg.kernels[static_cast<size_t>(b)];
    total += 4 * f * cin * k * k + 4 * f * f * k * k + 4 * f;  // lstm kernels + biases
    total += 2 * f;                                            // bn gamma/beta
    if (cfg.attention) total += 3 * f * f;                     // 1x1 q/k/v
    cin = f;
  }
  total += cin * 27 + 1;  // conv3d head
  return total;
}

template <typename T>
struct VapaadModel {
  VapaadConfig config;
  struct Block {
    ConvLSTMParams<T> lstm;
    BatchNormParams<T> bn;
    AttentionParams<T> attn;
  };
  std::vector<Block> blocks;
  Tensor<T> head_kernel;  // (1, C_last, 3, 3, 3)
  Tensor<T> head_bias;    // (1)

  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    for (size_t b = 0; b < blocks.size(); ++b) {
      const std::string prefix = "gen.block" + std::to_string(b);
      blocks[b].lstm.for_each_parameter(prefix + ".lstm", fn);
      blocks[b].bn.for_each_parameter(prefix + ".bn", fn);
      if (config.attention) blocks[b].attn.for_each_parameter(prefix + ".attn", fn);
    }
    fn("gen.head.kernel", head_kernel);
    fn("gen.head.bias", head_bias);
  }

  template <typename Fn>
  void for_each_state(Fn&& fn) {
    for (size_t b = 0; b < blocks.size(); ++b)
      blocks[b].bn.for_each_state("gen.block" + std::to_string(b) + ".bn", fn);
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for_each_parameter([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }
};

template <typename T>
VapaadModel<T> build_vapaad(const VapaadConfig& cfg, std::mt19937& rng) {
  cfg.validate();
  VapaadModel<T> model;
  model.config = cfg;
  int64_t cin = 1;
  for (int b = 0; b < cfg.blocks; ++b) {
    const int64_t f = cfg.filters[static_cast<size_t>(b)];
    const int64_t k = cfg.kernels[static_cast<size_t>(b)];
    typename VapaadModel<T>::Block block;
    block.lstm = ConvLSTMParams<T>::glorot(cin, f, k, rng);
    block.bn = BatchNormParams<T>::init(f);
    if (cfg.attention) block.attn = AttentionParams<T>::glorot(f, rng, cfg.stop_grad);
    model.blocks.push_back(std::move(block));
    cin = f;
  }
  model.head_kernel = glorot_uniform<T>({1, cin, 3, 3, 3}, cin * 27, 27, rng);
  model.head_bias = Tensor<T>::zeros({1}, true);
  return model;
}

// Forward over a (B,T,1,H,W) batch. Train mode rotates each input sequence
// by one random angle and normalizes by batch statistics; infer mode is a
// pure function of (input, parameters, running stats).
template <typename T>
Tensor<T> vapaad_forward(VapaadModel<T>& model, const Tensor<T>& x, Mode mode,
                         std::mt19937* rng = nullptr) {
  const VapaadConfig& cfg = model.config;
  require(x.rank() == 5, "forward input must be (B,T,1,H,W), got " + shape_str(x.shape()));
  require(x.shape()[2] == 1, "forward input must have a single channel");
  require(x.shape()[3] == cfg.frame_size && x.shape()[4] == cfg.frame_size,
          "forward input frames " + shape_str(x.shape()) + " do not match configured frame size " +
              std::to_string(cfg.frame_size));
  require(mode == Mode::infer || rng != nullptr, "train-mode forward needs a random generator");

  const int64_t batch = x.shape()[0];
  std::vector<Tensor<T>> seqs;
  seqs.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    Tensor<T> s = slice0(x, b);
    if (mode == Mode::train) s = random_rotation(s, cfg.max_rotation_deg, *rng, mode);
    seqs.push_back(s);
  }

  for (int bi = 0; bi < cfg.blocks; ++bi) {
    auto& block = model.blocks[static_cast<size_t>(bi)];
    if (bi > 0 && cfg.interior_augmentation && mode == Mode::train)
      for (auto& s : seqs) s = random_rotation(s, cfg.max_rotation_deg, *rng, mode);
    for (auto& s : seqs) s = convlstm_sequence(s, block.lstm);
    auto normed = batchnorm(stack0(seqs), block.bn, mode);
    for (int64_t b = 0; b < batch; ++b) {
      auto sb = slice0(normed, b);
      if (cfg.attention) {
        std::vector<Tensor<T>> frames;
        frames.reserve(static_cast<size_t>(sb.shape()[0]));
        for (int64_t t = 0; t < sb.shape()[0]; ++t)
          frames.push_back(self_attention(slice0(sb, t), block.attn));
        seqs[static_cast<size_t>(b)] = stack0(frames);
      } else {
        seqs[static_cast<size_t>(b)] = sb;
      }
    }
  }

  std::vector<Tensor<T>> outs;
  outs.reserve(static_cast<size_t>(batch));
  for (auto& s : seqs) outs.push_back(conv3d_head(s, model.head_kernel, model.head_bias));
  return stack0(outs);
}

// Closed-loop generation: repeatedly run infer-mode forward on the growing
// context and feed the last predicted frame back in. Returns the `horizon`
// generated frames as (horizon,1,H,W).
template <typename T>
Tensor<T> rollout(VapaadModel<T>& model, const Tensor<T>& seed_frames, int64_t horizon) {
  require(seed_frames.rank() == 4 && seed_frames.shape()[1] == 1,
          "rollout seed must be (T0,1,H,W), got " + shape_str(seed_frames.shape()));
  require(horizon >= 1, "rollout horizon must be >= 1");
  const int64_t h = seed_frames.shape()[2], w = seed_frames.shape()[3];
  const int64_t frame = h * w;
  std::vector<T> ctx = seed_frames.values();
  int64_t t = seed_frames.shape()[0];
  std::vector<Tensor<T>> generated;
  for (int64_t step = 0; step < horizon; ++step) {
    auto cur = Tensor<T>::from({1, t, 1, h, w}, ctx);
    auto out = vapaad_forward(model, cur, Mode::infer);
    const T* last = out.data() + (t - 1) * frame;
    std::vector<T> next(last, last + frame);
    generated.push_back(Tensor<T>::from({1, h, w}, next));
    ctx.insert(ctx.end(), next.begin(), next.end());
    ++t;
  }
  return stack0(generated);
}

// ---------------------------------------------------------------------------
// Instructor: a small strided 3-D conv discriminator producing one
// real-vs-generated score per sequence.

template <typename T>
struct InstructorModel {
  Tensor<T> k1, b1;  // (8,1,3,3,3)
  Tensor<T> k2, b2;  // (16,8,3,3,3)
  Tensor<T> k3, b3;  // (32,16,3,3,3)
  Tensor<T> fc_w;    // (1,32)
  Tensor<T> fc_b;    // (1)

  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    fn("inst.conv1.kernel", k1);
    fn("inst.conv1.bias", b1);
    fn("inst.conv2.kernel", k2);
    fn("inst.conv2.bias", b2);
    fn("inst.conv3.kernel", k3);
    fn("inst.conv3.bias", b3);
    fn("inst.fc.weight", fc_w);
    fn("inst.fc.bias", fc_b);
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for_each_parameter([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }
};

inline int64_t instructor_parameter_count() {
  return 8 * 1 * 27 + 8 + 16 * 8 * 27 + 16 + 32 * 16 * 27 + 32 + 32 + 1;
}

template <typename T>
InstructorModel<T> build_instructor(std::mt19937& rng) {
  InstructorModel<T> m;
  m.k1 = glorot_uniform<T>({8, 1, 3, 3, 3}, 1 * 27, 8 * 27, rng);
  m.b1 = Tensor<T>::zeros({8}, true);
  m.k2 = glorot_uniform<T>({16, 8, 3, 3, 3}, 8 * 27, 16 * 27, rng);
  m.b2 = Tensor<T>::zeros({16}, true);
  m.k3 = glorot_uniform<T>({32, 16, 3, 3, 3}, 16 * 27, 32 * 27, rng);
  m.b3 = Tensor<T>::zeros({32}, true);
  m.fc_w = glorot_uniform<T>({1, 32}, 32, 1, rng);
  m.fc_b = Tensor<T>::zeros({1}, true);
  return m;
}

// Scores each sequence of a (B,T,1,H,W) batch in (0,1). With freeze_params
// the instructor weights are treated as constants, so gradients reach only
// the input sequences.
template <typename T>
Tensor<T> instructor_score(const InstructorModel<T>& inst, const Tensor<T>& seq,
                           bool freeze_params = false) {
  require(seq.rank() == 5 && seq.shape()[2] == 1,
          "instructor input must be (B,T,1,H,W), got " + shape_str(seq.shape()));
  Tensor<T> k1 = inst.k1, b1 = inst.b1, k2 = inst.k2, b2 = inst.b2, k3 = inst.k3, b3 = inst.b3;
  Tensor<T> fc_w = inst.fc_w, fc_b = inst.fc_b;
  if (freeze_params) {
    k1 = detach(k1);
    b1 = detach(b1);
    k2 = detach(k2);
    b2 = detach(b2);
    k3 = detach(k3);
    b3 = detach(b3);
    fc_w = detach(fc_w);
    fc_b = detach(fc_b);
  }
  const T slope = T(0.2);
  std::vector<Tensor<T>> scores;
  scores.reserve(static_cast<size_t>(seq.shape()[0]));
  for (int64_t b = 0; b < seq.shape()[0]; ++b) {
    auto s = slice0(seq, b);
    auto h1 = leaky_relu(conv3d(s, k1, b1, Pad::same, 1, 2, 2), slope);
    auto h2 = leaky_relu(conv3d(h1, k2, b2, Pad::same, 1, 2, 2), slope);
    auto h3 = leaky_relu(conv3d(h2, k3, b3, Pad::same, 1, 2, 2), slope);
    auto feat = reduce_mean(h3, {0, 2, 3}, false);  // global average pool -> (32)
    auto z = matmul(fc_w, reshape(feat, {feat.numel(), 1})) + fc_b;
    scores.push_back(reshape(sigmoid(z), {}));
  }
  return stack0(scores);
}

}  // namespace vapaad
