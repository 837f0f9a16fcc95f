#pragma once

// The cascaded generator: an initial convolutional stage (noise + sentence
// -> H0), semantic disentangling stages (H_{i-1}, words [, real image] ->
// H_i), per-stage image heads, and the real-image reconstruction module
// whose decoder shares parameters with the image head (Siamese).

#include <optional>
#include <string>
#include <vector>

#include "tigan/attention.hpp"
#include "tigan/config.hpp"
#include "tigan/nn.hpp"
#include "tigan/tensor.hpp"

namespace tigan::gen {

using ag::Var;

// Initial stage: FC from (z, s) to a 4x4 grid, then upsample+conv chains
// until the stage-0 resolution.
template <typename T>
struct Sdm0 {
  nn::Linear<T> fc;
  std::vector<nn::Conv2d<T>> ups;
  int channels = 0;

  Sdm0() = default;
  Sdm0(nn::ParamStore<T>& ps, const std::string& name, const StageConfig& cfg, Rng& rng)
      : fc(ps, name + ".fc", cfg.z_dim + cfg.ca_dim, cfg.channels * 16, rng),
        channels(cfg.channels) {
    for (int r = 4; r < cfg.resolutions[0]; r *= 2)
      ups.emplace_back(ps, name + ".up" + std::to_string(ups.size()), cfg.channels, cfg.channels,
                       3, 1, 1, rng);
  }

  Var<T> operator()(const Var<T>& z, const Var<T>& s) const {
    using namespace ag;
    check(z.dim(0) == s.dim(0), "sdm0: batch mismatch");
    Var<T> x = relu(reshape(fc(concat_lastdim(z, s)), {z.dim(0), channels, 4, 4}));
    for (const auto& conv : ups) x = relu(conv(upsample_nearest2x(x)));
    return x;
  }
};

// What a disentangling stage hands to the loss side when a real image was
// provided (training mode).
template <typename T>
struct SdlInputs {
  Var<T> h_plus, h_minus;  // split of H_{i-1}
  Var<T> q_plus, q_minus;  // split of refined context Q_i
  Var<T> mask_h, mask_q;
};

template <typename T>
struct SdmStageOut {
  Var<T> hidden;                       // H_i
  Var<T> theta;                        // word attention weights [B, N, T]
  Var<T> context;                      // refined Q_i
  std::optional<SdlInputs<T>> sdl;     // present only when splitting is active
};

// One disentangling stage. With `use_split` off it degrades to the plain
// attentional stage (context and hidden concatenated unmasked), which is
// the baseline configuration of the ablations.
template <typename T>
struct SdmStage {
  attn::WordAttention<T> wam;
  attn::RefineBlock<T> refine;
  attn::SpatialGate<T> gate_h, gate_q;
  nn::Conv2d<T> fuse;
  nn::ResBlock<T> fuse_rb;
  nn::Conv2d<T> up_conv;

  SdmStage() = default;
  SdmStage(nn::ParamStore<T>& ps, const std::string& name, const StageConfig& cfg, Rng& rng)
      : wam(ps, name + ".wam", cfg.text_dim, cfg.channels, rng),
        refine(ps, name + ".refine", cfg.channels, rng),
        gate_h(ps, name + ".gate_h", cfg.channels, cfg.mask_hidden, rng),
        gate_q(ps, name + ".gate_q", cfg.channels, cfg.mask_hidden, rng),
        fuse(ps, name + ".fuse", 2 * cfg.channels, cfg.channels, 3, 1, 1, rng),
        fuse_rb(ps, name + ".fuse_rb", cfg.channels, rng),
        up_conv(ps, name + ".up", cfg.channels, cfg.channels, 3, 1, 1, rng) {}

  SdmStageOut<T> operator()(const Var<T>& h_prev, const Var<T>& words, bool use_split) const {
    using namespace ag;
    SdmStageOut<T> out;
    auto att = wam(words, h_prev);
    out.theta = att.theta;
    Var<T> q = refine(att.context);
    out.context = q;

    Var<T> fused_in;
    if (use_split) {
      SdlInputs<T> s;
      s.mask_h = gate_h(h_prev);
      s.mask_q = gate_q(q);
      auto [hp, hm] = attn::split_features(h_prev, s.mask_h);
      auto [qp, qm] = attn::split_features(q, s.mask_q);
      s.h_plus = hp;
      s.h_minus = hm;
      s.q_plus = qp;
      s.q_minus = qm;
      fused_in = concat_channels(qp, hp);
      out.sdl = std::move(s);
    } else {
      fused_in = concat_channels(q, h_prev);
    }
    Var<T> x = fuse_rb(relu(fuse(fused_in)));
    out.hidden = relu(up_conv(upsample_nearest2x(x)));
    return out;
  }
};

// Image head G_i^o: 3x3 conv to RGB, tanh-bounded.
template <typename T>
struct GHead {
  nn::Conv2d<T> conv;
  GHead() = default;
  GHead(nn::ParamStore<T>& ps, const std::string& name, int channels, Rng& rng)
      : conv(ps, name + ".conv", channels, 3, 3, 1, 1, rng) {}
  Var<T> operator()(const Var<T>& hidden) const { return ag::tanh_(conv(hidden)); }
};

// Real-image reconstruction: encoder mirrors the head; the decoder IS the
// stage head (same parameter tensors, second call site).
template <typename T>
struct Rirm {
  nn::Conv2d<T> enc;
  GHead<T> decoder;  // shares Var storage with the stage's image head

  Rirm() = default;
  Rirm(nn::ParamStore<T>& ps, const std::string& name, int channels, const GHead<T>& shared_head,
       Rng& rng)
      : enc(ps, name + ".enc", 3, channels, 3, 1, 1, rng), decoder(shared_head) {}

  struct Out {
    Var<T> features;  // H*_i, shaped like H_i
    Var<T> recon;     // decoder(H*_i)
    Var<T> l1;        // mean |recon - real|
  };

  Out operator()(const Var<T>& real_image) const {
    using namespace ag;
    Var<T> h_star = relu(enc(real_image));
    Var<T> rec = decoder(h_star);
    Var<T> l1 = mean_all(abs_(sub(rec, real_image)));
    return {h_star, rec, l1};
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct StageBundle {
  Var<T> hidden;                     // H_i
  Var<T> image;                      // generated image at this stage
  Var<T> theta;                      // attention weights (undefined for stage 0)
  std::optional<SdlInputs<T>> sdl;   // split tensors (stages >= 1, training, use_sdm)
  std::optional<typename Rirm<T>::Out> rirm;  // real-image features (training)
};

template <typename T>
struct GeneratorNet {
  StageConfig cfg;
  Sdm0<T> sdm0;
  std::vector<SdmStage<T>> stages;  // stages 1..m-1
  std::vector<GHead<T>> heads;      // one per stage
  std::vector<Rirm<T>> rirms;       // stages 1..m-1, decoder shared with head i

  GeneratorNet() = default;
  GeneratorNet(nn::ParamStore<T>& ps, const StageConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    sdm0 = Sdm0<T>(ps, "g.sdm0", cfg, rng);
    for (int i = 0; i < cfg.num_stages; ++i)
      heads.emplace_back(ps, "g.head" + std::to_string(i), cfg.channels, rng);
    for (int i = 1; i < cfg.num_stages; ++i) {
      stages.emplace_back(ps, "g.sdm" + std::to_string(i), cfg, rng);
      rirms.emplace_back(ps, "g.rirm" + std::to_string(i), cfg.channels, heads[size_t(i)], rng);
    }
  }

  // Training mode passes the per-stage real images; testing mode passes
  // nullptr and consumes no real image anywhere.
  std::vector<StageBundle<T>> forward(const Var<T>& z, const Var<T>& s, const Var<T>& words,
                                      const std::vector<Var<T>>* real_images, bool use_sdm) const {
    using namespace ag;
    if (real_images)
      check(int(real_images->size()) == cfg.num_stages, "generator: need one real image per stage");
    std::vector<StageBundle<T>> out(size_t(cfg.num_stages));
    Var<T> h = sdm0(z, s);
    out[0].hidden = h;
    out[0].image = heads[0](h);
    for (int i = 1; i < cfg.num_stages; ++i) {
      auto& stage = stages[size_t(i - 1)];
      auto res = stage(h, words, use_sdm);
      h = res.hidden;
      out[size_t(i)].hidden = h;
      out[size_t(i)].image = heads[size_t(i)](h);
      out[size_t(i)].theta = res.theta;
      out[size_t(i)].sdl = std::move(res.sdl);
      if (real_images) {
        const Var<T>& real = (*real_images)[size_t(i)];
        check(real.dim(2) == cfg.resolutions[size_t(i)] && real.dim(3) == cfg.resolutions[size_t(i)],
              "generator: real image resolution does not match stage " + std::to_string(i));
        out[size_t(i)].rirm = rirms[size_t(i - 1)](real);
      }
    }
    return out;
  }
};

}  // namespace tigan::gen
