#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tigan/dnm.hpp"

using namespace tigan;
using ag::Var;

namespace {

// Smallest legal geometry: stage 0 at 4x4 so the encoder is linear-only and
// the straight-line oracle stays short.
StageConfig micro_cfg() {
  StageConfig cfg;
  cfg.num_stages = 2;
  cfg.resolutions = {4, 8};
  cfg.channels = 3;
  cfg.z_dim = 4;
  cfg.ca_dim = 3;
  cfg.text_dim = 5;
  cfg.damsm_dim = 5;
  cfg.disc_embed = 6;
  cfg.vae_latent = 4;
  return cfg;
}

Var<double> randn(ag::Shape shape, Rng& rng, bool grad = false, double s = 1.0) {
  auto v = Var<double>::leaf(shape, grad);
  for (auto& x : v.val()) x = rng.normal(0.0, s);
  return v;
}

}  // namespace

TEST_CASE("disc_encode: determinism, embedding width, resolution check") {
  Rng rng(1);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage1", cfg, 1, rng);

  Var<double> img = randn({3, 3, 8, 8}, rng);
  auto v1 = d.encode(img);
  auto v2 = d.encode(img);
  CHECK(v1.val() == v2.val());
  CHECK(v1.shape() == ag::Shape{3, 6});

  Var<double> wrong = randn({3, 3, 4, 4}, rng);
  CHECK_THROWS(d.encode(wrong));
}

TEST_CASE("disc_encode on the 4x4 stage matches the linear-path oracle") {
  Rng rng(2);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);
  CHECK(d.enc.empty());  // 4x4 input needs no downsampling stack

  Var<double> img = randn({2, 3, 4, 4}, rng);
  auto v = d.encode(img);
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < 6; ++o) {
      double acc = d.to_v.b.val()[size_t(o)];
      for (int i = 0; i < 48; ++i)
        acc += d.to_v.w.val()[size_t(o * 48 + i)] * img.val()[size_t(b * 48 + i)];
      CHECK(v.val()[size_t(b * 6 + o)] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("disc_encode with a conv stack matches the conv oracle") {
  Rng rng(3);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage1", cfg, 1, rng);
  REQUIRE(d.enc.size() == 1);

  Var<double> img = randn({2, 3, 8, 8}, rng);
  int ho, wo;
  auto mid = oracle::conv2d(img.val(), 2, 3, 8, 8, d.enc[0].w.val(), 16, 3, 3, d.enc[0].b.val(),
                            2, 1, ho, wo);
  for (auto& x : mid) x = x > 0 ? x : 0.2 * x;  // leaky relu
  auto v = d.encode(img);
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < 6; ++o) {
      double acc = d.to_v.b.val()[size_t(o)];
      for (int i = 0; i < 16 * 16; ++i)
        acc += d.to_v.w.val()[size_t(o * 256 + i)] * mid[size_t(b * 256 + i)];
      CHECK(v.val()[size_t(b * 6 + o)] == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("classify: zero weights give 0.5, probabilities stay in (0,1), s matters") {
  Rng rng(4);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);

  Var<double> v = randn({2, 6}, rng);
  Var<double> s = randn({2, 3}, rng);

  nn::ParamStore<double> psz;
  Rng rng2(4);
  dnm::Dnm<double> dz(psz, "d.stage0", cfg, 0, rng2);
  for (auto& [name, p] : psz.items()) std::fill(p.val().begin(), p.val().end(), 0.0);
  for (double pv : dz.classify(v).val()) CHECK(pv == 0.5);
  for (double pv : dz.classify(v, s).val()) CHECK(pv == 0.5);

  for (double pv : d.classify(v).val()) {
    CHECK(pv > 0.0);
    CHECK(pv < 1.0);
  }
  auto p1 = d.classify(v, s);
  Var<double> s2 = Var<double>::leaf(s.shape(), s.val());
  s2.val()[0] += 0.5;
  auto p2 = d.classify(v, s2);
  CHECK(p1.val()[0] != p2.val()[0]);
}

TEST_CASE("variational sample: fixed points, closed-form KL, reparameterization statistics") {
  Rng rng(5);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);

  // zero phi -> mu = 0, sigma = 1: kl = 0 and z* = z
  std::fill(d.phi.w.val().begin(), d.phi.w.val().end(), 0.0);
  std::fill(d.phi.b.val().begin(), d.phi.b.val().end(), 0.0);
  Var<double> v = randn({2, 6}, rng);
  Var<double> z = randn({2, 4}, rng);
  auto out = d.variational(v, z, false, true);
  CHECK(out.kl.item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out.z_star.val() == z.val());

  // z = 0 -> z* = mu
  for (auto& x : d.phi.w.val()) x = rng.normal(0.0, 0.3);
  Var<double> z0 = Var<double>::leaf({2, 4});
  auto out2 = d.variational(v, z0, false, true);
  CHECK(out2.z_star.val() == out2.mu.val());

  // mu=(1,0), sigma=(1,1) -> kl = 0.5 (same closed form as the CA module)
  Var<double> mu = Var<double>::leaf({1, 2}, {1.0, 0.0});
  Var<double> lv = Var<double>::leaf({1, 2}, {0.0, 0.0});
  CHECK(nn::gauss_kl_from_logvar(mu, lv).item() == doctest::Approx(0.5).epsilon(1e-12));

  // statistics over 1e5 draws: mean within 4 standard errors, std within 2%
  const double want_mu = 0.6, want_sigma = 1.3;
  Rng draw(99);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double zs = draw.normal() * want_sigma + want_mu;
    sum += zs;
    sumsq += zs * zs;
  }
  double mean = sum / n;
  double stddev = std::sqrt(sumsq / n - mean * mean);
  CHECK(std::abs(mean - want_mu) < 4.0 * want_sigma / std::sqrt(double(n)));
  CHECK(std::abs(stddev - want_sigma) / want_sigma < 0.02);
}

TEST_CASE("vae decode: stage resolution, sensitivity to s, zero weights") {
  Rng rng(6);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage1", cfg, 1, rng);

  Var<double> zs = randn({2, 4}, rng);
  Var<double> s = randn({2, 3}, rng);
  auto img = d.decode(zs, s);
  CHECK(img.shape() == ag::Shape{2, 3, 8, 8});

  Var<double> s2 = Var<double>::leaf(s.shape(), s.val());
  s2.val()[1] += 0.4;
  auto img2 = d.decode(zs, s2);
  CHECK(img.val() != img2.val());

  for (auto& [name, p] : ps.items()) std::fill(p.val().begin(), p.val().end(), 0.0);
  auto img0 = d.decode(zs, s);
  for (double x : img0.val()) CHECK(x == 0.0);
}

TEST_CASE("discriminator-side distribution loss: non-negative, zero structure, oracle") {
  Rng rng(7);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);

  Var<double> fake = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> real = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> s = randn({2, 3}, rng);
  Var<double> nf = randn({2, 4}, rng);
  Var<double> nr = randn({2, 4}, rng);

  auto parts = dnm::dal_discriminator_loss(d, fake, real, s, nf, nr);
  CHECK(parts.total.item() >= 0.0);
  CHECK(parts.total.item() ==
        doctest::Approx(parts.recon_fake.item() + parts.recon_real.item() + parts.kl_fake.item() +
                        parts.kl_real.item())
            .epsilon(1e-12));

  // straight-line double oracle for the whole composition (4x4 stage:
  // encoder and decoder are affine, so every step is a plain loop)
  auto affine = [&](const nn::Linear<double>& l, const std::vector<double>& x, int b, int in) {
    const int out = l.w.dim(0);
    std::vector<double> y(size_t(b) * out);
    for (int ib = 0; ib < b; ++ib)
      for (int o = 0; o < out; ++o) {
        double acc = l.b.val()[size_t(o)];
        for (int i = 0; i < in; ++i)
          acc += l.w.val()[size_t(o * in + i)] * x[size_t(ib * in + i)];
        y[size_t(ib * out + o)] = acc;
      }
    return y;
  };
  auto vae_pass = [&](const Var<double>& img, const Var<double>& noise, double& kl_out) {
    auto v = affine(d.to_v, img.val(), 2, 48);
    auto p = affine(d.phi, v, 2, 6);
    std::vector<double> zs(8), mu(8), sig(8);
    kl_out = 0;
    for (int ib = 0; ib < 2; ++ib)
      for (int i = 0; i < 4; ++i) {
        mu[size_t(ib * 4 + i)] = p[size_t(ib * 8 + i)];
        double lv = p[size_t(ib * 8 + 4 + i)];
        sig[size_t(ib * 4 + i)] = std::exp(0.5 * lv);
        zs[size_t(ib * 4 + i)] = noise.val()[size_t(ib * 4 + i)] * sig[size_t(ib * 4 + i)] +
                                 mu[size_t(ib * 4 + i)];
        kl_out += 0.5 * (mu[size_t(ib * 4 + i)] * mu[size_t(ib * 4 + i)] + std::exp(lv) - 1 - lv);
      }
    kl_out /= 2.0;  // batch mean
    std::vector<double> zcat(size_t(2) * 7);
    for (int ib = 0; ib < 2; ++ib) {
      for (int i = 0; i < 4; ++i) zcat[size_t(ib * 7 + i)] = zs[size_t(ib * 4 + i)];
      for (int i = 0; i < 3; ++i) zcat[size_t(ib * 7 + 4 + i)] = s.val()[size_t(ib * 3 + i)];
    }
    auto grid = affine(d.dec_fc, zcat, 2, 7);
    for (auto& x : grid) x = x > 0 ? x : 0.2 * x;
    int ho, wo;
    auto recon = oracle::conv2d(grid, 2, 32, 4, 4, d.dec_head.w.val(), 3, 3, 3,
                                d.dec_head.b.val(), 1, 1, ho, wo);
    for (auto& x : recon) x = std::tanh(x);
    double l1 = 0;
    for (size_t i = 0; i < recon.size(); ++i) l1 += std::abs(recon[i] - img.val()[i]);
    return l1 / double(recon.size());
  };
  double klf, klr;
  double rf = vae_pass(fake, nf, klf);
  double rr = vae_pass(real, nr, klr);
  CHECK(parts.total.item() == doctest::Approx(rf + rr + klf + klr).epsilon(1e-9));
}

TEST_CASE("generator-side distribution loss: fake latent KL plus cross reconstruction") {
  Rng rng(8);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);
  Var<double> fake = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> real = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> s = randn({2, 3}, rng);
  Var<double> nf = randn({2, 4}, rng);

  auto parts = dnm::dal_generator_loss(d, fake, real, s, nf);
  CHECK(parts.total.item() >= 0.0);
  CHECK(parts.total.item() ==
        doctest::Approx(parts.kl_fake.item() + parts.recon_real.item()).epsilon(1e-12));
  CHECK_FALSE(parts.recon_fake.defined());

  // the reconstruction compares against the REAL image while the latent
  // comes from the fake: swapping the images must change the loss
  auto swapped = dnm::dal_generator_loss(d, real, fake, s, nf);
  CHECK(parts.total.item() != swapped.total.item());
}

TEST_CASE("autoencoder ablation drops exactly the KL terms and demands its mode") {
  Rng rng(9);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);
  Var<double> fake = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> real = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> s = randn({2, 3}, rng);
  Var<double> none = Var<double>::leaf({2, 4});

  dnm::DnmLossOptions<double> star;
  star.dnm_star = true;
  auto [d_loss, g_loss] = dnm::ae_losses(d, fake, real, s, star);
  CHECK_FALSE(d_loss.kl_fake.defined());
  CHECK_FALSE(d_loss.kl_real.defined());
  CHECK_FALSE(g_loss.kl_fake.defined());
  CHECK(g_loss.total.item() >= 0.0);

  // with the sigma path bypassed (mean latent), dal == ae + kl terms
  dnm::DnmLossOptions<double> mean_only;
  mean_only.mean_latent = true;
  auto dal_d = dnm::dal_discriminator_loss(d, fake, real, s, none, none, mean_only);
  CHECK(d_loss.total.item() ==
        doctest::Approx(dal_d.total.item() - dal_d.kl_fake.item() - dal_d.kl_real.item())
            .epsilon(1e-10));
  auto dal_g = dnm::dal_generator_loss(d, fake, real, s, none, mean_only);
  CHECK(g_loss.total.item() ==
        doctest::Approx(dal_g.total.item() - dal_g.kl_fake.item()).epsilon(1e-10));

  dnm::DnmLossOptions<double> off;
  CHECK_THROWS(dnm::ae_losses(d, fake, real, s, off));
}

TEST_CASE("distribution loss gradients match finite differences for every parameter group") {
  Rng rng(10);
  auto cfg = micro_cfg();
  nn::ParamStore<double> ps;
  dnm::Dnm<double> d(ps, "d.stage0", cfg, 0, rng);
  Var<double> fake = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> real = randn({2, 3, 4, 4}, rng, false, 0.5);
  Var<double> s = randn({2, 3}, rng);
  Var<double> nf = randn({2, 4}, rng);
  Var<double> nr = randn({2, 4}, rng);

  auto d_loss = [&] { return dnm::dal_discriminator_loss(d, fake, real, s, nf, nr).total; };
  CHECK(oracle::max_grad_rel_err(ps.tensors(), d_loss, rng, 4) < 1e-3);

  auto g_loss = [&] { return dnm::dal_generator_loss(d, fake, real, s, nf).total; };
  CHECK(oracle::max_grad_rel_err(ps.tensors(), g_loss, rng, 4) < 1e-3);
}
