#pragma once

// Word-level attention and the spatial self-attention gates used by every
// generation stage.

#include <string>
#include <utility>

#include "tigan/nn.hpp"
#include "tigan/tensor.hpp"

namespace tigan::attn {

using ag::Var;

template <typename T>
struct WordAttentionOut {
  Var<T> context;  // Q' [B, C, h, w] — each column a convex mix of projected words
  Var<T> theta;    // attention weights [B, N, T], rows sum to 1
  Var<T> words_projected;  // W' = U W, [B, C, T]
};

// For every sub-region j the projected words are scored by h_j . w'_i,
// softmax-normalized over words, and mixed into the context column q_j.
template <typename T>
struct WordAttention {
  Var<T> proj;  // U [C, D]

  WordAttention() = default;
  WordAttention(nn::ParamStore<T>& ps, const std::string& name, int text_dim, int channels,
                Rng& rng)
      : proj(ps.add(name + ".proj", {channels, text_dim}, nn::Init::kHe, rng)) {}

  WordAttentionOut<T> operator()(const Var<T>& words, const Var<T>& hidden) const {
    using namespace ag;
    check(words.shape().size() == 3, "word_attention: words must be [B, D, T]");
    check(hidden.shape().size() == 4, "word_attention: hidden must be [B, C, h, w]");
    check(words.dim(1) == proj.dim(1), "word_attention: text width mismatch with projection");
    check(hidden.dim(1) == proj.dim(0), "word_attention: channel mismatch with projection");
    check(words.dim(0) == hidden.dim(0), "word_attention: batch mismatch");
    const int b = hidden.dim(0), c = hidden.dim(1), h = hidden.dim(2), w = hidden.dim(3);
    const int n = h * w;

    Var<T> wp = matmul_left(proj, words);                       // [B, C, T]
    Var<T> flat = reshape(hidden, {b, c, n});                   // [B, C, N]
    Var<T> logits = bmm(transpose_last2(flat), wp);             // [B, N, T]
    Var<T> theta = softmax_lastdim(logits);
    Var<T> ctx = bmm(wp, transpose_last2(theta));               // [B, C, N]
    return {reshape(ctx, {b, c, h, w}), theta, wp};
  }
};

// Mask(F) = Sigmoid(Conv1x1(ReLU(Conv3x3(F)))), one channel, entries in (0,1).
template <typename T>
struct SpatialGate {
  nn::Conv2d<T> c3, c1;

  SpatialGate() = default;
  SpatialGate(nn::ParamStore<T>& ps, const std::string& name, int channels, int hidden, Rng& rng)
      : c3(ps, name + ".c3", channels, hidden, 3, 1, 1, rng),
        c1(ps, name + ".c1", hidden, 1, 1, 1, 0, rng) {}

  Var<T> operator()(const Var<T>& f) const { return ag::sigmoid(c1(ag::relu(c3(f)))); }
};

// F+ = mask .* F, F- = F - F+, with F+ nudged onto the representable value
// F - fl(F - mask*F) so that the reconstruction F+ + F- = F is bit-exact in
// floating point (Fast2Sum: |mask*F| <= |F| makes F - fl(F - mask*F) exact).
// The nudge is below one ulp; gradients are those of mask .* F.
template <typename T>
std::pair<Var<T>, Var<T>> split_features(const Var<T>& f, const Var<T>& mask) {
  using namespace ag;
  check(f.shape().size() == 4 && mask.shape().size() == 4, "split_features: expected 4-d");
  check(mask.dim(1) == 1 && f.dim(0) == mask.dim(0) && f.dim(2) == mask.dim(2) &&
            f.dim(3) == mask.dim(3),
        "split_features: mask must be [B,1,H,W] matching the features");
  const int64_t b = f.dim(0), c = f.dim(1), hw = int64_t(f.dim(2)) * f.dim(3);
  Var<T> plus = make_node<T>(f.shape(), {f.node(), mask.node()},
                             [fp = f.node(), mp = mask.node(), b, c, hw](Node<T>& self) {
                               for (int64_t ib = 0; ib < b; ++ib) {
                                 const T* mv = mp->val.data() + ib * hw;
                                 for (int64_t ic = 0; ic < c; ++ic) {
                                   const int64_t off = (ib * c + ic) * hw;
                                   if (fp->needs_grad) {
                                     fp->ensure_grad();
                                     for (int64_t i = 0; i < hw; ++i)
                                       fp->grad[size_t(off + i)] += self.grad[size_t(off + i)] * mv[i];
                                   }
                                   if (mp->needs_grad) {
                                     mp->ensure_grad();
                                     for (int64_t i = 0; i < hw; ++i)
                                       mp->grad[size_t(ib * hw + i)] +=
                                           self.grad[size_t(off + i)] * fp->val[size_t(off + i)];
                                   }
                                 }
                               }
                             });
  for (int64_t ib = 0; ib < b; ++ib) {
    const T* mv = mask.val().data() + ib * hw;
    for (int64_t ic = 0; ic < c; ++ic) {
      const int64_t off = (ib * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const T fv = f.val()[size_t(off + i)];
        const T residual = fv - mv[i] * fv;  // representable complement
        plus.val()[size_t(off + i)] = fv - residual;
      }
    }
  }
  return {plus, sub(f, plus)};
}

// Gives the word-context matrix spatial structure: Q = Q' + Conv(ReLU(Conv(Q'))).
template <typename T>
using RefineBlock = nn::ResBlock<T>;

}  // namespace tigan::attn
