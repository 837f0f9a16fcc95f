#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tigan/attention.hpp"

using namespace tigan;
using ag::Var;

namespace {
Var<double> randn(ag::Shape shape, Rng& rng, bool grad = false, double s = 1.0) {
  auto v = Var<double>::leaf(shape, grad);
  for (auto& x : v.val()) x = rng.normal(0.0, s);
  return v;
}
}  // namespace

TEST_CASE("word attention: identical projected words give uniform weights") {
  Rng rng(3);
  nn::ParamStore<double> ps;
  attn::WordAttention<double> wam(ps, "wam", 5, 4, rng);

  // two identical word columns -> identical projections -> theta = 0.5
  Var<double> words = Var<double>::leaf({1, 5, 2});
  for (int d = 0; d < 5; ++d) {
    double v = rng.normal();
    words.val()[size_t(d * 2 + 0)] = v;
    words.val()[size_t(d * 2 + 1)] = v;
  }
  Var<double> hidden = randn({1, 4, 2, 2}, rng);
  auto out = wam(words, hidden);
  for (double th : out.theta.val()) CHECK(th == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("word attention: zero sub-region feature gives uniform 1/T row") {
  Rng rng(4);
  nn::ParamStore<double> ps;
  attn::WordAttention<double> wam(ps, "wam", 3, 4, rng);
  Var<double> words = randn({1, 3, 4}, rng);
  Var<double> hidden = randn({1, 4, 2, 2}, rng);
  // zero out sub-region j=1 (h,w) = (0,1)
  for (int c = 0; c < 4; ++c) hidden.val()[size_t(c * 4 + 1)] = 0.0;
  auto out = wam(words, hidden);
  for (int i = 0; i < 4; ++i)
    CHECK(out.theta.val()[size_t(1 * 4 + i)] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("word attention matches the nested-loop oracle") {
  Rng rng(5);
  const int B = 2, D = 3, C = 3, T = 4, h = 1, w = 2, N = h * w;
  nn::ParamStore<double> ps;
  attn::WordAttention<double> wam(ps, "wam", D, C, rng);
  Var<double> words = randn({B, D, T}, rng);
  Var<double> hidden = randn({B, C, h, w}, rng);
  auto out = wam(words, hidden);

  // oracle input: projected words computed with a plain loop
  std::vector<double> wp(size_t(B) * C * T, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < T; ++t) {
        double acc = 0;
        for (int d = 0; d < D; ++d)
          acc += wam.proj.val()[size_t(c * D + d)] * words.val()[size_t((b * D + d) * T + t)];
        wp[size_t((b * C + c) * T + t)] = acc;
      }
  std::vector<double> q_ref, theta_ref;
  oracle::word_attention(hidden.val(), wp, B, C, N, T, q_ref, theta_ref);
  for (size_t i = 0; i < q_ref.size(); ++i)
    CHECK(out.context.val()[i] == doctest::Approx(q_ref[i]).epsilon(1e-12));
  for (size_t i = 0; i < theta_ref.size(); ++i)
    CHECK(out.theta.val()[i] == doctest::Approx(theta_ref[i]).epsilon(1e-12));
}

TEST_CASE("property: attention rows sum to 1 and contexts stay in the convex hull") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int B = 1 + int(rng.below(3)), D = 2 + int(rng.below(5)), C = 2 + int(rng.below(5));
    const int T = 1 + int(rng.below(6)), h = 2, w = 2;
    nn::ParamStore<double> ps;
    attn::WordAttention<double> wam(ps, "wam", D, C, rng);
    Var<double> words = randn({B, D, T}, rng, false, 2.0);
    Var<double> hidden = randn({B, C, h, w}, rng, false, 2.0);
    auto out = wam(words, hidden);

    const int N = h * w;
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < N; ++j) {
        double s = 0;
        for (int t = 0; t < T; ++t) s += out.theta.val()[size_t((b * N + j) * T + t)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    // per-channel convex hull of projected words bounds each context column
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double lo = 1e300, hi = -1e300;
        for (int t = 0; t < T; ++t) {
          double v = out.words_projected.val()[size_t((b * C + c) * T + t)];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        for (int j = 0; j < N; ++j) {
          double q = out.context.val()[size_t((b * C + c) * N + j)];
          CHECK(q >= lo - 1e-9);
          CHECK(q <= hi + 1e-9);
        }
      }
  }
}

TEST_CASE("word attention gradients w.r.t. projection and hidden features") {
  Rng rng(8);
  nn::ParamStore<double> ps;
  attn::WordAttention<double> wam(ps, "wam", 4, 3, rng);
  Var<double> words = randn({2, 4, 3}, rng, true);
  Var<double> hidden = randn({2, 3, 2, 2}, rng, true);
  Var<double> coef = randn({2, 3, 2, 2}, rng);
  auto loss = [&] { return ag::sum_all(ag::mul(wam(words, hidden).context, coef)); };
  CHECK(oracle::max_grad_rel_err({wam.proj, hidden, words}, loss, rng) < 1e-4);
}

TEST_CASE("spatial mask: zero-initialised convolutions give exactly 0.5") {
  Rng rng(9);
  nn::ParamStore<double> ps;
  attn::SpatialGate<double> gate(ps, "gate", 3, 2, rng);
  for (auto& [name, p] : ps.items()) std::fill(p.val().begin(), p.val().end(), 0.0);
  Var<double> f = randn({2, 3, 4, 4}, rng);
  auto mask = gate(f);
  CHECK(mask.shape() == ag::Shape{2, 1, 4, 4});
  for (double v : mask.val()) CHECK(v == 0.5);
}

TEST_CASE("spatial mask stays in (0,1) and matches the convolution oracle") {
  Rng rng(10);
  nn::ParamStore<double> ps;
  attn::SpatialGate<double> gate(ps, "gate", 2, 3, rng);
  Var<double> f = randn({1, 2, 4, 4}, rng, false, 2.0);
  auto mask = gate(f);
  for (double v : mask.val()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // straight-line oracle: conv3x3 -> relu -> conv1x1 -> sigmoid
  int ho, wo;
  auto mid = oracle::conv2d(f.val(), 1, 2, 4, 4, gate.c3.w.val(), 3, 3, 3, gate.c3.b.val(), 1, 1,
                            ho, wo);
  for (auto& v : mid) v = std::max(v, 0.0);
  auto out = oracle::conv2d(mid, 1, 3, 4, 4, gate.c1.w.val(), 1, 1, 1, gate.c1.b.val(), 1, 0, ho,
                            wo);
  for (size_t i = 0; i < out.size(); ++i) {
    double want = 1.0 / (1.0 + std::exp(-out[i]));
    CHECK(mask.val()[i] == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("split_features: halves at 0.5, vanishing non-key at saturation, exact reconstruction") {
  Rng rng(11);
  Var<double> f = randn({2, 3, 4, 4}, rng);
  Var<double> half = Var<double>::leaf({2, 1, 4, 4});
  std::fill(half.val().begin(), half.val().end(), 0.5);
  auto [p, m] = attn::split_features(f, half);
  for (size_t i = 0; i < f.val().size(); ++i) {
    CHECK(p.val()[i] == doctest::Approx(f.val()[i] / 2).epsilon(1e-15));
    CHECK(m.val()[i] == doctest::Approx(f.val()[i] / 2).epsilon(1e-15));
  }

  Var<double> sat = Var<double>::leaf({2, 1, 4, 4});
  std::fill(sat.val().begin(), sat.val().end(), 1.0 - 1e-12);
  auto [p2, m2] = attn::split_features(f, sat);
  for (size_t i = 0; i < f.val().size(); ++i) CHECK(std::abs(m2.val()[i]) < 1e-10);

  // reconstruction identity, bit-exact
  Var<double> mask = Var<double>::leaf({2, 1, 4, 4});
  for (auto& v : mask.val()) v = rng.uniform(0.01, 0.99);
  auto [p3, m3] = attn::split_features(f, mask);
  for (size_t i = 0; i < f.val().size(); ++i) CHECK(p3.val()[i] + m3.val()[i] == f.val()[i]);

  Var<double> wrong = Var<double>::leaf({2, 1, 2, 2});
  CHECK_THROWS(attn::split_features(f, wrong));
}

TEST_CASE("refine block: zero weights give the identity, general case matches the oracle") {
  Rng rng(12);
  nn::ParamStore<double> ps;
  attn::RefineBlock<double> rb(ps, "rb", 3, rng);
  Var<double> q = randn({2, 3, 4, 4}, rng);

  nn::ParamStore<double> psz;
  attn::RefineBlock<double> rbz(psz, "rb", 3, rng);
  for (auto& [name, p] : psz.items()) std::fill(p.val().begin(), p.val().end(), 0.0);
  auto idq = rbz(q);
  CHECK(idq.val() == q.val());
  CHECK(idq.shape() == q.shape());

  auto refined = rb(q);
  int ho, wo;
  auto mid = oracle::conv2d(q.val(), 2, 3, 4, 4, rb.c1.w.val(), 3, 3, 3, rb.c1.b.val(), 1, 1, ho, wo);
  for (auto& v : mid) v = std::max(v, 0.0);
  auto out = oracle::conv2d(mid, 2, 3, 4, 4, rb.c2.w.val(), 3, 3, 3, rb.c2.b.val(), 1, 1, ho, wo);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(refined.val()[i] == doctest::Approx(q.val()[i] + out[i]).epsilon(1e-10));
}
