#pragma once

// The full model bundle: generator-side networks (text encoder, conditioning
// augmentation, generator cascade, image-text matcher) and the
// discriminator-side per-stage normalization modules, with their two
// parameter registries.

#include <string>
#include <vector>

#include "tigan/config.hpp"
#include "tigan/dnm.hpp"
#include "tigan/generator.hpp"
#include "tigan/losses.hpp"
#include "tigan/nn.hpp"
#include "tigan/text.hpp"

namespace tigan {

using ag::Var;

// Image branch of the lite image-text matcher: stride-2 convs, global mean
// pool, linear projection to the text width. The text branch is the
// encoder's sentence feature itself.
template <typename T>
struct Matcher {
  std::vector<nn::Conv2d<T>> convs;
  nn::Linear<T> to_emb;

  Matcher() = default;
  Matcher(nn::ParamStore<T>& ps, const std::string& name, int resolution, int out_dim, Rng& rng) {
    int ch = 3, width = 16;
    for (int r = resolution; r > 4; r /= 2) {
      convs.emplace_back(ps, name + ".conv" + std::to_string(convs.size()), ch, width, 3, 2, 1, rng);
      ch = width;
      width = std::min(width * 2, 64);
    }
    to_emb = nn::Linear<T>(ps, name + ".to_emb", ch, out_dim, rng);
  }

  Var<T> embed(const Var<T>& images) const {
    using namespace ag;
    Var<T> x = images;
    for (const auto& conv : convs) x = leaky_relu(conv(x));
    return to_emb(global_avg_pool(x));
  }
};

template <typename T>
struct Model {
  StageConfig cfg;
  nn::ParamStore<T> g_params, d_params;

  text::TextEncoder<T> text_enc;
  text::CondAug<T> cond_aug;
  gen::GeneratorNet<T> generator;
  Matcher<T> matcher;
  std::vector<dnm::Dnm<T>> dnms;

  Model(const StageConfig& config, int vocab_size, uint64_t init_seed) : cfg(config) {
    cfg.validate();
    Rng rng(init_seed);
    text_enc = text::TextEncoder<T>(g_params, "text", vocab_size, cfg.text_dim, rng);
    cond_aug = text::CondAug<T>(g_params, "ca", cfg.text_dim, cfg.ca_dim, rng);
    generator = gen::GeneratorNet<T>(g_params, cfg, rng);
    matcher = Matcher<T>(g_params, "matcher", cfg.resolutions.back(), cfg.damsm_dim, rng);
    for (int i = 0; i < cfg.num_stages; ++i)
      dnms.emplace_back(d_params, "d.stage" + std::to_string(i), cfg, i, rng);
  }

  // Generator-side parameter list, optionally excluding the text encoder.
  std::vector<Var<T>> g_param_list(bool freeze_text_encoder = false) const {
    std::vector<Var<T>> out;
    for (const auto& [name, p] : g_params.items()) {
      if (freeze_text_encoder && name.rfind("text.", 0) == 0) continue;
      out.push_back(p);
    }
    return out;
  }

  std::vector<Var<T>> d_param_list() const { return d_params.tensors(); }
};

// Deterministic fingerprint of a parameter set (FNV-1a over the value bytes).
template <typename T>
uint64_t param_fingerprint(const nn::ParamStore<T>& ps) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : ps.items()) {
    for (char c : name) {
      h ^= uint64_t(uint8_t(c));
      h *= 1099511628211ULL;
    }
    const auto& v = p.val();
    const uint8_t* bytes = reinterpret_cast<const uint8_t*>(v.data());
    for (size_t i = 0; i < v.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace tigan
