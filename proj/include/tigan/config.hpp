#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace tigan {

// Network geometry shared by the generator cascade, the per-stage
// discriminators and the dataset (which renders one real image per stage
// resolution).
//
// The hidden channel width is the same at every stage: the key/non-key
// statistics are compared per channel against the real-image features H*,
// and the reconstruction decoder shares its parameters with the stage image
// head, so differing widths would not typecheck.
struct StageConfig {
  int num_stages = 3;
  std::vector<int> resolutions = {8, 16, 32};
  int channels = 16;      // hidden width of every H_i
  int z_dim = 16;         // noise width
  int ca_dim = 16;        // width of the conditioning sentence feature s
  int text_dim = 32;      // D: word/sentence feature width
  int t_max = 8;          // caption length cap
  int mask_hidden = 8;    // hidden width inside the spatial gates
  int disc_embed = 64;    // V: discriminator embedding width
  int vae_latent = 32;    // latent width of the normalizing VAE
  int damsm_dim = 32;     // image-text matching embedding width (= text_dim)
  double damsm_tau = 0.1; // contrastive temperature

  void validate() const {
    if (num_stages < 1) throw std::invalid_argument("config: need at least one stage");
    if (int(resolutions.size()) != num_stages)
      throw std::invalid_argument("config: one resolution per stage");
    for (int i = 0; i < num_stages; ++i) {
      if (resolutions[size_t(i)] < 4 || (resolutions[size_t(i)] & (resolutions[size_t(i)] - 1)))
        throw std::invalid_argument("config: resolutions must be powers of two >= 4");
      if (i > 0 && resolutions[size_t(i)] != 2 * resolutions[size_t(i - 1)])
        throw std::invalid_argument("config: resolutions must double per stage");
    }
    if (channels < 1 || z_dim < 1 || ca_dim < 1 || text_dim < 1 || t_max < 1)
      throw std::invalid_argument("config: bad widths");
    if (damsm_dim != text_dim)
      throw std::invalid_argument("config: matcher embedding must equal text width");
  }
};

}  // namespace tigan
