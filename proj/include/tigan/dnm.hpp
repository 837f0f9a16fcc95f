#pragma once

// Per-stage distribution normalization module: a discriminator (encoder +
// conditional/unconditional classifiers) paired with a VAE over the same
// encoder that pulls the image latent distribution toward a standard
// normal. Also carries the plain-autoencoder variant used by the DNM*
// ablation (no sampling, no KL).

#include <string>
#include <vector>

#include "tigan/config.hpp"
#include "tigan/nn.hpp"
#include "tigan/tensor.hpp"

namespace tigan::dnm {

using ag::Var;

template <typename T>
struct VaeOut {
  Var<T> mu, logvar, sigma;  // [B, L]
  Var<T> z_star;             // sampled (or mean) latent
  Var<T> recon;              // decoded image
  Var<T> kl;                 // scalar; defined() only when sampling is active
};

template <typename T>
struct Dnm {
  int resolution = 0;
  int v_dim = 0, latent = 0;

  std::vector<nn::Conv2d<T>> enc;  // stride-2 stack down to 4x4
  nn::Linear<T> to_v;              // flatten -> embedding v
  nn::Linear<T> uncond1, uncond2;  // psi-hat
  nn::Linear<T> cond1, cond2;      // psi, on concat(v, s)
  nn::Linear<T> phi;               // v -> (mu, logvar)
  nn::Linear<T> dec_fc;            // concat(z*, s) -> 4x4 grid
  std::vector<nn::Conv2d<T>> dec;  // upsample chain back to the resolution
  nn::Conv2d<T> dec_head;          // -> RGB, tanh

  Dnm() = default;
  Dnm(nn::ParamStore<T>& ps, const std::string& name, const StageConfig& cfg, int stage, Rng& rng)
      : resolution(cfg.resolutions[size_t(stage)]),
        v_dim(cfg.disc_embed),
        latent(cfg.vae_latent) {
    int ch = 3, width = 16;
    for (int r = resolution; r > 4; r /= 2) {
      enc.emplace_back(ps, name + ".enc" + std::to_string(enc.size()), ch, width, 3, 2, 1, rng);
      ch = width;
      width = std::min(width * 2, 64);
    }
    to_v = nn::Linear<T>(ps, name + ".to_v", ch * 16, v_dim, rng);
    uncond1 = nn::Linear<T>(ps, name + ".uncond1", v_dim, 32, rng);
    uncond2 = nn::Linear<T>(ps, name + ".uncond2", 32, 1, rng);
    cond1 = nn::Linear<T>(ps, name + ".cond1", v_dim + cfg.ca_dim, 32, rng);
    cond2 = nn::Linear<T>(ps, name + ".cond2", 32, 1, rng);
    phi = nn::Linear<T>(ps, name + ".phi", v_dim, 2 * latent, rng, nn::Init::kSmallNormal);
    dec_fc = nn::Linear<T>(ps, name + ".dec_fc", latent + cfg.ca_dim, 32 * 16, rng);
    int dch = 32;
    for (int r = 4; r < resolution; r *= 2) {
      int next = std::max(dch / 2, 8);
      dec.emplace_back(ps, name + ".dec" + std::to_string(dec.size()), dch, next, 3, 1, 1, rng);
      dch = next;
    }
    dec_head = nn::Conv2d<T>(ps, name + ".dec_head", dch, 3, 3, 1, 1, rng);
  }

  // E^D: image -> embedding vector v.
  Var<T> encode(const Var<T>& image) const {
    using namespace ag;
    check(image.shape().size() == 4 && image.dim(1) == 3 && image.dim(2) == resolution &&
              image.dim(3) == resolution,
          "disc_encode: image must be [B,3," + std::to_string(resolution) + "," +
              std::to_string(resolution) + "]");
    Var<T> x = image;
    for (const auto& conv : enc) x = leaky_relu(conv(x));
    return to_v(reshape(x, {image.dim(0), x.dim(1) * 16}));
  }

  // Unconditional and conditional real/fake probabilities in (0,1).
  Var<T> classify(const Var<T>& v) const {
    return ag::reshape(ag::sigmoid(uncond2(ag::leaky_relu(uncond1(v)))), {v.dim(0)});
  }
  Var<T> classify(const Var<T>& v, const Var<T>& s) const {
    Var<T> in = ag::concat_lastdim(v, s);
    return ag::reshape(ag::sigmoid(cond2(ag::leaky_relu(cond1(in)))), {v.dim(0)});
  }

  // phi + re-sampling: z* = z .* sigma + mu. With `mean_latent` the sampler
  // is bypassed (z* = mu), which is both the DNM* path and the mean-decode
  // option. `with_kl` controls whether the closed-form KL is produced.
  VaeOut<T> variational(const Var<T>& v, const Var<T>& noise, bool mean_latent,
                        bool with_kl) const {
    using namespace ag;
    VaeOut<T> out;
    Var<T> p = phi(v);
    out.mu = slice_lastdim(p, 0, latent);
    out.logvar = slice_lastdim(p, latent, 2 * latent);
    out.sigma = exp_(scale(out.logvar, T(0.5)));
    if (mean_latent) {
      out.z_star = out.mu;
    } else {
      check(noise.shape() == out.mu.shape(), "variational_sample: noise must be [B, latent]");
      out.z_star = add(out.mu, mul(out.sigma, noise));
    }
    if (with_kl) out.kl = nn::gauss_kl_from_logvar(out.mu, out.logvar);
    return out;
  }

  // D^E: decode concat(z*, s) back to an image at the stage resolution.
  Var<T> decode(const Var<T>& z_star, const Var<T>& s) const {
    using namespace ag;
    Var<T> x = leaky_relu(reshape(dec_fc(concat_lastdim(z_star, s)), {z_star.dim(0), 32, 4, 4}));
    for (const auto& conv : dec) x = leaky_relu(conv(upsample_nearest2x(x)));
    return tanh_(dec_head(x));
  }

  // Full VAE (or AE) pass over one image batch.
  VaeOut<T> vae(const Var<T>& image, const Var<T>& s, const Var<T>& noise, bool mean_latent,
                bool with_kl) const {
    VaeOut<T> out = variational(encode(image), noise, mean_latent, with_kl);
    out.recon = decode(out.z_star, s);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Distribution adversarial loss terms.

template <typename T>
struct DnmLossOptions {
  bool dnm_star = false;    // plain autoencoder variant: mean latent, no KL
  bool mean_latent = false; // decode from the mean instead of the sample
};

template <typename T>
struct DalParts {
  Var<T> recon_fake, recon_real;  // L1 reconstruction terms (pixel means)
  Var<T> kl_fake, kl_real;        // defined() only in the VAE configuration
  Var<T> total;
};

template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
  return ag::mean_all(ag::abs_(ag::sub(a, b)));
}

// Discriminator-side VAE bound: both reconstructions plus both KL terms.
template <typename T>
DalParts<T> dal_discriminator_loss(const Dnm<T>& d, const Var<T>& fake, const Var<T>& real,
                                   const Var<T>& s, const Var<T>& noise_fake,
                                   const Var<T>& noise_real,
                                   const DnmLossOptions<T>& opt = {}) {
  using namespace ag;
  const bool mean_latent = opt.dnm_star || opt.mean_latent;
  const bool with_kl = !opt.dnm_star;
  DalParts<T> parts;
  auto vf = d.vae(fake, s, noise_fake, mean_latent, with_kl);
  auto vr = d.vae(real, s, noise_real, mean_latent, with_kl);
  parts.recon_fake = l1_mean(vf.recon, fake);
  parts.recon_real = l1_mean(vr.recon, real);
  parts.total = add(parts.recon_fake, parts.recon_real);
  if (with_kl) {
    parts.kl_fake = vf.kl;
    parts.kl_real = vr.kl;
    parts.total = add(parts.total, add(parts.kl_fake, parts.kl_real));
  }
  return parts;
}

// Generator-side distribution consistency: KL of the fake latent plus the
// fake latent decoded against the *real* image.
template <typename T>
DalParts<T> dal_generator_loss(const Dnm<T>& d, const Var<T>& fake, const Var<T>& real,
                               const Var<T>& s, const Var<T>& noise_fake,
                               const DnmLossOptions<T>& opt = {}) {
  using namespace ag;
  const bool mean_latent = opt.dnm_star || opt.mean_latent;
  const bool with_kl = !opt.dnm_star;
  DalParts<T> parts;
  auto vf = d.vae(fake, s, noise_fake, mean_latent, with_kl);
  parts.recon_real = l1_mean(vf.recon, real);
  parts.total = parts.recon_real;
  if (with_kl) {
    parts.kl_fake = vf.kl;
    parts.total = add(parts.total, parts.kl_fake);
  }
  return parts;
}

// DNM* ablation losses: the reconstructions only, no KL anywhere. Errors
// when the autoencoder mode is not enabled.
template <typename T>
std::pair<DalParts<T>, DalParts<T>> ae_losses(const Dnm<T>& d, const Var<T>& fake,
                                              const Var<T>& real, const Var<T>& s,
                                              const DnmLossOptions<T>& opt) {
  ag::check(opt.dnm_star, "ae_losses: requires the autoencoder (dnm_star) mode");
  Var<T> none = Var<T>::leaf({fake.dim(0), 1});  // mean path draws no noise
  auto d_loss = dal_discriminator_loss(d, fake, real, s, none, none, opt);
  auto g_loss = dal_generator_loss(d, fake, real, s, none, opt);
  return {d_loss, g_loss};
}

}  // namespace tigan::dnm
