#include <doctest.h>

#include <cmath>
#include <random>

#include "vapaad/gradcheck.hpp"
#include "vapaad/layers.hpp"

using namespace vapaad;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937& rng, bool requires_grad = false, T lo = T(-1),
                        T hi = T(1)) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
ConvLSTMParams<T> zero_lstm(int64_t cin, int64_t f, int64_t k) {
  std::mt19937 rng(0);
  auto p = ConvLSTMParams<T>::glorot(cin, f, k, rng);
  p.for_each_parameter("", [](const std::string&, Tensor<T>& t) {
    std::fill(t.values().begin(), t.values().end(), T(0));
  });
  return p;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("convlstm_step with zero parameters") {
  std::mt19937 rng(1);
  auto p = zero_lstm<double>(1, 2, 3);
  auto x = random_tensor<double>({1, 4, 4}, rng);

  auto s0 = ConvLSTMState<double>::zeros(2, 4, 4);
  auto s1 = convlstm_step(x, s0, p);
  CHECK(s1.h.shape() == Shape{2, 4, 4});
  for (int64_t i = 0; i < s1.h.numel(); ++i) {
    CHECK(s1.h.data()[i] == 0.0);  // o=0.5, tanh(c'=0)=0
    CHECK(s1.c.data()[i] == 0.0);
  }

  // arbitrary carried cell state halves: c' = f*c with f = sigmoid(0) = 0.5
  auto c = random_tensor<double>({2, 4, 4}, rng);
  ConvLSTMState<double> sc{Tensor<double>::zeros({2, 4, 4}), c};
  auto s2 = convlstm_step(x, sc, p);
  for (int64_t i = 0; i < c.numel(); ++i)
    CHECK(s2.c.data()[i] == doctest::Approx(0.5 * c.data()[i]).epsilon(1e-12));
}

TEST_CASE("convlstm_step shape preservation and bounded hidden state") {
  std::mt19937 rng(2);
  auto p = ConvLSTMParams<double>::glorot(3, 4, 3, rng);
  auto x = random_tensor<double>({3, 5, 6}, rng, false, -3.0, 3.0);
  auto s = ConvLSTMState<double>::zeros(4, 5, 6);
  for (int step = 0; step < 3; ++step) {
    s = convlstm_step(x, s, p);
    CHECK(s.h.shape() == Shape{4, 5, 6});
    for (int64_t i = 0; i < s.h.numel(); ++i) CHECK(std::abs(s.h.data()[i]) < 1.0);
  }
  auto bad = ConvLSTMState<double>::zeros(4, 6, 6);
  CHECK_THROWS_AS(convlstm_step(x, bad, p), std::invalid_argument);
}

TEST_CASE("convlstm_sequence unrolls the step") {
  std::mt19937 rng(3);
  auto p = ConvLSTMParams<double>::glorot(2, 3, 3, rng);
  auto xs = random_tensor<double>({3, 2, 4, 4}, rng);

  auto out = convlstm_sequence(xs, p);
  CHECK(out.shape() == Shape{3, 3, 4, 4});

  auto state = ConvLSTMState<double>::zeros(3, 4, 4);
  for (int64_t t = 0; t < 3; ++t) {
    state = convlstm_step(slice0(xs, t), state, p);
    for (int64_t i = 0; i < state.h.numel(); ++i)
      CHECK(out.data()[t * state.h.numel() + i] == state.h.data()[i]);
  }

  auto single = convlstm_sequence(random_tensor<double>({1, 2, 4, 4}, rng), p);
  CHECK(single.shape() == Shape{1, 3, 4, 4});

  auto zp = zero_lstm<double>(2, 3, 3);
  auto zout = convlstm_sequence(xs, zp);
  for (int64_t i = 0; i < zout.numel(); ++i) CHECK(zout.data()[i] == 0.0);

  // a zero-length sequence is not even constructible
  CHECK_THROWS_AS(Tensor<double>::zeros({0, 2, 4, 4}), std::invalid_argument);
}

TEST_CASE("convlstm gradients pass finite differences") {
  std::mt19937 rng(4);
  auto p = ConvLSTMParams<double>::glorot(2, 2, 3, rng);
  auto xs = random_tensor<double>({2, 2, 5, 5}, rng, true);
  std::vector<Tensor<double>> params{xs};
  p.for_each_parameter("", [&](const std::string&, Tensor<double>& t) { params.push_back(t); });
  auto f = [&]() {
    auto out = convlstm_sequence(xs, p);
    return mean_all(mul(out, out));
  };
  auto report = finite_diff_check<double>(f, params, 1e-4, 1e-4);
  CHECK_MESSAGE(report.pass, report.worst, " rel err ", report.max_rel_err);
}

TEST_CASE("attention with zero queries and identity values adds the position mean") {
  // W_q = 0 makes all scores equal, so A is uniform; W_v = identity keeps
  // v = x. Each output position then receives x_i + mean_j x_j per channel.
  auto x = Tensor<double>::from({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  AttentionParams<double> p;
  p.w_q = Tensor<double>::zeros({1, 1, 1, 1}, true);
  p.w_k = Tensor<double>::from({1, 1, 1, 1}, {0.7}, true);
  p.w_v = Tensor<double>::from({1, 1, 1, 1}, {1.0}, true);
  auto y = self_attention(x, p);
  const double mean = (1.0 + 2.0 + 3.0 + 4.0) / 4.0;
  for (int64_t i = 0; i < 4; ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i] + mean).epsilon(1e-12));
}

TEST_CASE("attention zero propagation and shape contract") {
  std::mt19937 rng(5);
  {
    auto p = AttentionParams<double>::glorot(3, rng);
    auto x = Tensor<double>::zeros({3, 2, 4});
    auto y = self_attention(x, p);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
  }
  for (int trial = 0; trial < 6; ++trial) {
    std::uniform_int_distribution<int64_t> d(1, 5);
    const int64_t c = d(rng), h = d(rng), w = d(rng);
    auto p = AttentionParams<float>::glorot(c, rng);
    auto x = random_tensor<float>({c, h, w}, rng);
    CHECK(self_attention(x, p).shape() == x.shape());
  }
}

TEST_CASE("attention rows are a softmax: sum to one, shift invariant") {
  std::mt19937 rng(6);
  const int64_t n = 4, c = 4;
  auto q = random_tensor<double>({n, c}, rng);
  auto k = random_tensor<double>({n, c}, rng);
  // identity v extracts the attention matrix itself
  std::vector<double> eye(n * c, 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * c + i)] = 1.0;
  auto v = Tensor<double>::from({n, c}, eye);
  auto a = attention_core(q, k, v, 0.5);
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      CHECK(a.data()[i * c + j] >= 0.0);
      sum += a.data()[i * c + j];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  // adding a constant vector to every key shifts each score row by a
  // per-row constant and must leave the attention weights unchanged
  auto shift = Tensor<double>::filled({1, c}, 3.0);
  auto a2 = attention_core(q, add(k, shift), v, 0.5);
  for (int64_t i = 0; i < n * c; ++i)
    CHECK(a2.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-6));
}

TEST_CASE("attention_core agrees with a composed matmul+softmax oracle") {
  std::mt19937 rng(7);
  const int64_t n = 6, c = 3;
  auto q = random_tensor<double>({n, c}, rng, true);
  auto k = random_tensor<double>({n, c}, rng, true);
  auto v = random_tensor<double>({n, c}, rng, true);
  const double scl = 1.0 / std::sqrt(static_cast<double>(c));

  auto fused = [&]() { return attention_core(q, k, v, scl); };
  auto composed = [&]() {
    auto scores = scale(matmul(q, transpose2d(k)), scl);
    return matmul(softmax(scores, 1), v);
  };

  auto yf = fused();
  auto yc = composed();
  for (int64_t i = 0; i < yf.numel(); ++i)
    CHECK(yf.data()[i] == doctest::Approx(yc.data()[i]).epsilon(1e-12));

  // same gradients through both routes
  auto w = random_tensor<double>({n, c}, rng);
  std::vector<double> gq, gk, gv;
  {
    q.zero_grad();
    k.zero_grad();
    v.zero_grad();
    Tape<double> tape;
    tape.backward(sum_all(mul(fused(), w)));
    gq = q.grad();
    gk = k.grad();
    gv = v.grad();
  }
  {
    q.zero_grad();
    k.zero_grad();
    v.zero_grad();
    Tape<double> tape;
    tape.backward(sum_all(mul(composed(), w)));
    for (size_t i = 0; i < gq.size(); ++i) {
      CHECK(q.grad()[i] == doctest::Approx(gq[i]).epsilon(1e-10));
      CHECK(k.grad()[i] == doctest::Approx(gk[i]).epsilon(1e-10));
      CHECK(v.grad()[i] == doctest::Approx(gv[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("self_attention gradients pass finite differences") {
  std::mt19937 rng(8);
  auto p = AttentionParams<double>::glorot(2, rng);
  auto x = random_tensor<double>({2, 3, 4}, rng, true);
  auto f = [&]() {
    auto y = self_attention(x, p);
    return mean_all(mul(y, y));
  };
  auto report = finite_diff_check<double>(f, {x, p.w_q, p.w_k, p.w_v}, 1e-4, 1e-4);
  CHECK_MESSAGE(report.pass, report.worst, " rel err ", report.max_rel_err);
}

TEST_CASE("stop_qk_gradient keeps the score path out of backward") {
  std::mt19937 rng(9);
  auto p = AttentionParams<double>::glorot(3, rng, /*stop_qk=*/true);
  auto x = random_tensor<double>({3, 4, 4}, rng, true);
  for (auto* t : {&p.w_q, &p.w_k, &p.w_v}) t->zero_grad();
  x.zero_grad();
  Tape<double> tape;
  auto y = self_attention(x, p);
  tape.backward(mean_all(mul(y, y)));
  for (int64_t i = 0; i < p.w_q.numel(); ++i) {
    CHECK(p.w_q.grad()[i] == 0.0);
    CHECK(p.w_k.grad()[i] == 0.0);
  }
  bool any_v = false;
  for (int64_t i = 0; i < p.w_v.numel(); ++i) any_v = any_v || p.w_v.grad()[i] != 0.0;
  CHECK(any_v);
}

TEST_CASE("batchnorm hand-computed normalization") {
  // channel values {1,3}: mean 2, population variance 1
  auto p = BatchNormParams<double>::init(1);
  auto x = Tensor<double>::from({2, 1, 1, 1}, {1.0, 3.0});
  auto y = batchnorm(x, p, Mode::train);
  CHECK(y.data()[0] == doctest::Approx(-0.999995).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(+0.999995).epsilon(1e-6));

  // constant input collapses to beta
  auto pc = BatchNormParams<double>::init(2);
  std::fill(pc.beta.values().begin(), pc.beta.values().end(), 0.25);
  auto xc = Tensor<double>::filled({3, 2, 2, 2}, 5.0);
  auto yc = batchnorm(xc, pc, Mode::train);
  for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc.data()[i] == doctest::Approx(0.25).epsilon(1e-9));

  // gamma/beta are a plain affine map of the normalized values
  auto pa = BatchNormParams<double>::init(1);
  auto pb = BatchNormParams<double>::init(1);
  pb.gamma.data()[0] = 2.0;
  pb.beta.data()[0] = 1.0;
  std::mt19937 rng(10);
  auto xr = random_tensor<double>({4, 1, 3, 3}, rng);
  auto base = batchnorm(xr, pa, Mode::train);
  auto affine = batchnorm(xr, pb, Mode::train);
  for (int64_t i = 0; i < base.numel(); ++i)
    CHECK(affine.data()[i] == doctest::Approx(2.0 * base.data()[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("batchnorm train statistics and running estimates") {
  std::mt19937 rng(11);
  auto p = BatchNormParams<double>::init(3);
  auto x = random_tensor<double>({4, 3, 5, 5}, rng, false, -2.0, 3.0);
  auto y = batchnorm(x, p, Mode::train);
  // per channel: mean ~0, variance ~1 before gamma/beta
  const int64_t per = 4 * 5 * 5;
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 25; ++i) mean += y.data()[(b * 3 + c) * 25 + i];
    mean /= per;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 25; ++i) {
        const double d = y.data()[(b * 3 + c) * 25 + i] - mean;
        var += d * d;
      }
    var /= per;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
  CHECK(p.updates == 1);

  // infer mode normalizes by running stats and is repeatable
  auto i1 = batchnorm(x, p, Mode::infer);
  auto i2 = batchnorm(x, p, Mode::infer);
  for (int64_t i = 0; i < i1.numel(); ++i) CHECK(i1.data()[i] == i2.data()[i]);

  BatchNormParams<double> uninit;
  uninit.gamma = Tensor<double>::filled({3, 1, 1}, 1.0, true);
  uninit.beta = Tensor<double>::zeros({3, 1, 1}, true);
  CHECK_THROWS_AS(batchnorm(x, uninit, Mode::infer), std::invalid_argument);
  CHECK_THROWS_AS(batchnorm(Tensor<double>::filled({1, 3, 1, 1}, 1.0), p, Mode::train),
                  std::invalid_argument);  // a single statistical element per channel
}

TEST_CASE("batchnorm gradients pass finite differences") {
  std::mt19937 rng(12);
  auto p = BatchNormParams<double>::init(2);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng, true);
  auto f = [&]() {
    auto y = batchnorm(x, p, Mode::train);
    return mean_all(mul(y, add_scalar(y, 0.3)));
  };
  auto report = finite_diff_check<double>(f, {x, p.gamma, p.beta}, 1e-4, 1e-4);
  CHECK_MESSAGE(report.pass, report.worst, " rel err ", report.max_rel_err);
}

TEST_CASE("conv3d_head saturates to one half on zero parameters") {
  std::mt19937 rng(13);
  auto x = random_tensor<double>({3, 2, 4, 4}, rng, false, -2.0, 2.0);
  auto k = Tensor<double>::zeros({1, 2, 3, 3, 3}, true);
  auto b = Tensor<double>::zeros({1}, true);
  auto y = conv3d_head(x, k, b);
  CHECK(y.shape() == Shape{3, 1, 4, 4});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.5).epsilon(1e-12));

  std::mt19937 rng2(14);
  auto kr = glorot_uniform<double>({1, 2, 3, 3, 3}, 54, 27, rng2);
  auto yr = conv3d_head(x, kr, b);
  for (int64_t i = 0; i < yr.numel(); ++i) {
    CHECK(yr.data()[i] > 0.0);
    CHECK(yr.data()[i] < 1.0);
  }
  auto f = [&]() { return mean_all(mul(conv3d_head(x, kr, b), x)); };
  auto report = finite_diff_check<double>(f, {kr, b}, 1e-4, 1e-4);
  CHECK_MESSAGE(report.pass, report.worst, " rel err ", report.max_rel_err);
}

TEST_CASE("rotation by zero is the identity") {
  std::mt19937 rng(15);
  auto x = random_tensor<float>({3, 1, 6, 6}, rng);
  auto y = rotate_frames(x, 0.0);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  std::mt19937 r2(1);
  auto z = random_rotation(x, 10.0, r2, Mode::infer);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(z.data()[i] == x.data()[i]);
}

TEST_CASE("rotation keeps the center pixel of odd frames") {
  std::mt19937 rng(16);
  auto x = random_tensor<double>({1, 1, 5, 5}, rng);
  for (double deg : {13.0, 45.0, 90.0, -77.5}) {
    auto y = rotate_frames(x, deg);
    CHECK(y.data()[2 * 5 + 2] == x.data()[2 * 5 + 2]);
  }
}

TEST_CASE("rotation by 90 degrees matches the index remap oracle") {
  std::mt19937 rng(17);
  auto x = random_tensor<double>({1, 1, 4, 4}, rng);
  auto y = rotate_frames(x, 90.0);
  // with the inverse-mapping convention used here, out(y,x) = in(3-x, y)
  for (int64_t yy = 0; yy < 4; ++yy)
    for (int64_t xx = 0; xx < 4; ++xx)
      CHECK(y.data()[yy * 4 + xx] == doctest::Approx(x.data()[(3 - xx) * 4 + yy]).epsilon(1e-9));
}

TEST_CASE("one angle rotates every frame of a sequence identically") {
  std::mt19937 rng(18);
  auto frame = random_tensor<double>({1, 1, 8, 8}, rng);
  std::vector<double> rep;
  for (int t = 0; t < 4; ++t) rep.insert(rep.end(), frame.values().begin(), frame.values().end());
  auto seq = Tensor<double>::from({4, 1, 8, 8}, rep);
  std::mt19937 r2(5);
  auto y = random_rotation(seq, 20.0, r2, Mode::train);
  for (int t = 1; t < 4; ++t)
    for (int64_t i = 0; i < 64; ++i) CHECK(y.data()[t * 64 + i] == y.data()[i]);
}

TEST_CASE("rotation input gradients pass finite differences") {
  std::mt19937 rng(19);
  auto x = random_tensor<double>({2, 1, 5, 5}, rng, true);
  auto f = [&]() {
    auto y = rotate_frames(x, 30.0);
    return mean_all(mul(y, y));
  };
  auto report = finite_diff_check<double>(f, {x}, 1e-5, 1e-6);
  CHECK_MESSAGE(report.pass, report.worst, " rel err ", report.max_rel_err);

  CHECK_THROWS_AS(rotate_frames(random_tensor<double>({1, 1, 4, 5}, rng), 5.0),
                  std::invalid_argument);
}

}  // TEST_SUITE
