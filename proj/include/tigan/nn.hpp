#pragma once

// Parameter bookkeeping, layer building blocks and the Adam optimizer.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tigan/rng.hpp"
#include "tigan/tensor.hpp"

namespace tigan::nn {

using ag::Shape;
using ag::Var;

enum class Init { kZero, kHe, kSmallNormal, kUniformFanIn };

template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Shape shape, Init init, Rng& rng) {
    Var<T> p = Var<T>::leaf(shape, /*needs_grad=*/true);
    int64_t fan_in = 1;
    if (shape.size() >= 2) {
      fan_in = 1;
      for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    }
    switch (init) {
      case Init::kZero:
        break;
      case Init::kHe: {
        const double s = std::sqrt(2.0 / double(fan_in));
        for (auto& v : p.val()) v = T(rng.normal(0.0, s));
        break;
      }
      case Init::kSmallNormal:
        for (auto& v : p.val()) v = T(rng.normal(0.0, 0.02));
        break;
      case Init::kUniformFanIn: {
        const double s = 1.0 / std::sqrt(double(fan_in));
        for (auto& v : p.val()) v = T(rng.uniform(-s, s));
        break;
      }
    }
    items_.emplace_back(name, p);
    return p;
  }

  // Registers an externally created (e.g. shared) tensor without re-initialising.
  void adopt(const std::string& name, Var<T> p) { items_.emplace_back(name, std::move(p)); }

  std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }

  Var<T> find(const std::string& name) const {
    for (auto& [n, p] : items_)
      if (n == name) return p;
    throw std::invalid_argument("parameter not found: " + name);
  }

  std::vector<Var<T>> tensors() const {
    std::vector<Var<T>> out;
    out.reserve(items_.size());
    for (auto& [n, p] : items_) out.push_back(p);
    return out;
  }

  int64_t count() const {
    int64_t n = 0;
    for (auto& [name, p] : items_) n += p.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Var<T> w, b;
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng,
         Init init = Init::kHe)
      : w(ps.add(name + ".w", {out, in}, init, rng)),
        b(ps.add(name + ".b", {out}, Init::kZero, rng)) {}
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, w, b); }
};

template <typename T>
struct Conv2d {
  Var<T> w, b;
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_,
         int pad_, Rng& rng, Init init = Init::kHe)
      : w(ps.add(name + ".w", {out_ch, in_ch, k, k}, init, rng)),
        b(ps.add(name + ".b", {out_ch}, Init::kZero, rng)),
        stride(stride_),
        pad(pad_) {}
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

// x + conv(act(conv(x))), channel-preserving.
template <typename T>
struct ResBlock {
  Conv2d<T> c1, c2;
  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, int ch, Rng& rng)
      : c1(ps, name + ".c1", ch, ch, 3, 1, 1, rng),
        c2(ps, name + ".c2", ch, ch, 3, 1, 1, rng) {}
  Var<T> operator()(const Var<T>& x) const { return ag::add(x, c2(ag::relu(c1(x)))); }
};

// Single GRU cell; the text encoder unrolls it over caption tokens.
template <typename T>
struct GruCell {
  Linear<T> ih, hh;  // input->3H and hidden->3H, gate order (r, z, n)
  int hidden = 0;
  GruCell() = default;
  GruCell(ParamStore<T>& ps, const std::string& name, int in, int hidden_, Rng& rng)
      : ih(ps, name + ".ih", in, 3 * hidden_, rng, Init::kUniformFanIn),
        hh(ps, name + ".hh", hidden_, 3 * hidden_, rng, Init::kUniformFanIn),
        hidden(hidden_) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& h) const {
    using namespace ag;
    Var<T> gi = ih(x), gh = hh(h);
    Var<T> r = sigmoid(add(slice_lastdim(gi, 0, hidden), slice_lastdim(gh, 0, hidden)));
    Var<T> z = sigmoid(
        add(slice_lastdim(gi, hidden, 2 * hidden), slice_lastdim(gh, hidden, 2 * hidden)));
    Var<T> n = tanh_(add(slice_lastdim(gi, 2 * hidden, 3 * hidden),
                         mul(r, slice_lastdim(gh, 2 * hidden, 3 * hidden))));
    // h' = n + z*(h - n)
    return add(n, mul(z, sub(h, n)));
  }
};

// ---------------------------------------------------------------------------

// Batch-mean closed-form KL(N(mu, sigma^2) || N(0, I)) with sigma^2 = e^logvar:
// 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma), averaged over the batch.
template <typename T>
Var<T> gauss_kl_from_logvar(const Var<T>& mu, const Var<T>& logvar) {
  using namespace ag;
  Var<T> terms = sub(add_scalar(add(square(mu), exp_(logvar)), T(-1)), logvar);
  return scale(mean_all(sum_lastdim(terms)), T(0.5));
}

// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Var<T>> params, T lr, T beta1 = T(0.5), T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      auto& g = p.grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(b1_, T(t_));
    const T bc2 = T(1) - std::pow(b2_, T(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& val = params_[i].val();
      auto& g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        m[j] = b1_ * m[j] + (T(1) - b1_) * g[j];
        v[j] = b2_ * v[j] + (T(1) - b2_) * g[j] * g[j];
        val[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<std::vector<T>>& moment1() { return m_; }
  std::vector<std::vector<T>>& moment2() { return v_; }
  const std::vector<Var<T>>& params() const { return params_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_ = T(2e-4), b1_ = T(0.5), b2_ = T(0.999), eps_ = T(1e-8);
  int64_t t_ = 0;
};

}  // namespace tigan::nn
