#pragma once

// Loss definitions: the semantic disentangling loss over batch feature
// statistics, the adversarial cross-entropy pair, the contrastive
// image-text matching loss, and the stage-summed total objectives.

#include <vector>

#include "tigan/nn.hpp"
#include "tigan/tensor.hpp"

namespace tigan::losses {

using ag::Var;

template <typename T>
struct LossWeights {
  T lambda1 = T(1e-3);  // SDL on H
  T lambda2 = T(1e-1);  // SDL on Q
  T lambda3 = T(1e-5);  // RIRM reconstruction
  T lambda4 = T(1.0);   // generator-side distribution loss
  T lambda5 = T(1.0);   // discriminator-side distribution loss
  T alpha = T(5.0);     // image-text matching loss
};

// Log arguments are clamped to [1e-8, 1]; a numerical guard, not part of
// the loss definitions.
template <typename T>
inline constexpr T kLogEps = T(1e-8);

template <typename T>
Var<T> neg_mean_log(const Var<T>& p) {
  return ag::neg(ag::mean_all(ag::log_(ag::clamp(p, kLogEps<T>, T(1)))));
}

// ---------------------------------------------------------------------------
// Batch feature statistics: per-channel mean and population variance pooled
// over batch and spatial positions. Needs at least two samples.

template <typename T>
struct BatchStats {
  Var<T> mean;    // [C]
  Var<T> spread;  // [C]; variance by default, std when use_std
};

template <typename T>
BatchStats<T> batch_stats(const Var<T>& x, bool use_std = false) {
  using namespace ag;
  check(x.shape().size() == 4, "batch_stats: expected [B,C,H,W]");
  check(x.dim(0) >= 2, "batch_stats: need a batch of at least 2");
  Var<T> m = channel_mean(x);
  Var<T> centered = sub(x, broadcast_channel(m, x.dim(0), x.dim(2), x.dim(3)));
  Var<T> var = channel_mean(square(centered));
  return {m, use_std ? sqrt_(add_scalar(var, T(1e-12))) : var};
}

template <typename T>
Var<T> euclidean(const Var<T>& a, const Var<T>& b) {
  // tiny epsilon keeps the sqrt gradient finite if two statistics coincide
  return ag::sqrt_(ag::add_scalar(ag::sum_all(ag::square(ag::sub(a, b))), T(1e-12)));
}

// SP(||mu(P)-mu(S)|| - ||mu(M)-mu(S)||) + SP(||sig(P)-sig(S)|| - ||sig(M)-sig(S)||):
// pulls the key split's statistics toward the real features and pushes the
// non-key split away. Spatial sizes may differ (stats pool over space); the
// channel counts must agree.
template <typename T>
Var<T> sdl(const Var<T>& key, const Var<T>& nonkey, const Var<T>& real_feats,
           bool use_std = false) {
  using namespace ag;
  check(key.shape() == nonkey.shape(), "sdl: key/non-key shape mismatch");
  check(key.dim(1) == real_feats.dim(1), "sdl: channel count mismatch with real features");
  auto p = batch_stats(key, use_std);
  auto m = batch_stats(nonkey, use_std);
  auto s = batch_stats(real_feats, use_std);
  Var<T> mean_term = softplus(sub(euclidean(p.mean, s.mean), euclidean(m.mean, s.mean)));
  Var<T> spread_term = softplus(sub(euclidean(p.spread, s.spread), euclidean(m.spread, s.spread)));
  return add(mean_term, spread_term);
}

// Stage SDL total: lambda1 * sdl_H + lambda2 * sdl_Q + lambda3 * rirm_l1.
template <typename T>
Var<T> sdm_loss(const Var<T>& sdl_h, const Var<T>& sdl_q, const Var<T>& rirm_l1,
                const LossWeights<T>& w) {
  using namespace ag;
  return add(add(scale(sdl_h, w.lambda1), scale(sdl_q, w.lambda2)), scale(rirm_l1, w.lambda3));
}

// ---------------------------------------------------------------------------
// Adversarial pair. Probabilities come in as (0,1) tensors of shape [B].

template <typename T>
Var<T> adv_generator_loss(const Var<T>& p_uncond_fake, const Var<T>& p_cond_fake) {
  using namespace ag;
  return scale(add(neg_mean_log(p_uncond_fake), neg_mean_log(p_cond_fake)), T(0.5));
}

template <typename T>
Var<T> adv_discriminator_loss(const Var<T>& p_uncond_real, const Var<T>& p_uncond_fake,
                              const Var<T>& p_cond_real, const Var<T>& p_cond_fake) {
  using namespace ag;
  Var<T> uncond = add(neg_mean_log(p_uncond_real),
                      neg_mean_log(add_scalar(neg(p_uncond_fake), T(1))));
  Var<T> cond = add(neg_mean_log(p_cond_real),
                    neg_mean_log(add_scalar(neg(p_cond_fake), T(1))));
  return scale(add(uncond, cond), T(0.5));
}

// ---------------------------------------------------------------------------
// Contrastive image-text matching over a batch: symmetric cross-entropy on
// the cosine-similarity matrix at temperature tau, diagonal as targets.

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  using namespace ag;
  Var<T> norms = sqrt_(add_scalar(sum_lastdim(square(x)), T(1e-12)));
  return rows_scale(x, recip(norms));
}

template <typename T>
Var<T> contrastive_match_loss(const Var<T>& img_emb, const Var<T>& txt_emb, T tau) {
  using namespace ag;
  check(img_emb.shape() == txt_emb.shape(), "matching loss: embedding shape mismatch");
  check(img_emb.dim(0) >= 2, "matching loss: need a batch of at least 2");
  Var<T> sim = scale(matmul(l2_normalize_rows(img_emb), transpose2d(l2_normalize_rows(txt_emb))),
                     T(1) / tau);
  Var<T> img_to_txt = neg_mean_log(take_diag(softmax_lastdim(sim)));
  Var<T> txt_to_img = neg_mean_log(take_diag(softmax_lastdim(transpose2d(sim))));
  return scale(add(img_to_txt, txt_to_img), T(0.5));
}

// ---------------------------------------------------------------------------
// Total objectives.

template <typename T>
struct StageGenTerms {
  Var<T> adv;  // adversarial generator term
  Var<T> dal;  // generator-side distribution loss (undefined when DNM off)
  Var<T> sdl;  // combined stage SDL (undefined when SDM off / stage 0)
};

template <typename T>
struct StageDiscTerms {
  Var<T> adv;
  Var<T> dal;  // discriminator-side distribution loss (undefined when DNM off)
};

// sum_i (L_Gi + lambda4 * L_Gi_D + L_SDLi) + alpha * L_match
template <typename T>
Var<T> total_generator_loss(const std::vector<StageGenTerms<T>>& stages, const Var<T>& match,
                            const LossWeights<T>& w) {
  using namespace ag;
  Var<T> total = Var<T>::scalar(T(0));
  for (const auto& st : stages) {
    total = add(total, st.adv);
    if (st.dal.defined()) total = add(total, scale(st.dal, w.lambda4));
    if (st.sdl.defined()) total = add(total, st.sdl);
  }
  if (match.defined()) total = add(total, scale(match, w.alpha));
  return total;
}

// sum_i (L_Di + lambda5 * L_Di_D)
template <typename T>
Var<T> total_discriminator_loss(const std::vector<StageDiscTerms<T>>& stages,
                                const LossWeights<T>& w) {
  using namespace ag;
  Var<T> total = Var<T>::scalar(T(0));
  for (const auto& st : stages) {
    total = add(total, st.adv);
    if (st.dal.defined()) total = add(total, scale(st.dal, w.lambda5));
  }
  return total;
}

}  // namespace tigan::losses
