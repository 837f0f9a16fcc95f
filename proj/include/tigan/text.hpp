#pragma once

// Caption handling: vocabulary, tokenizer, the trainable text encoder
// (token embedding + one GRU layer) and conditioning augmentation.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tigan/config.hpp"
#include "tigan/nn.hpp"
#include "tigan/tensor.hpp"

namespace tigan::text {

using ag::Var;

constexpr const char* kUnkToken = "<unk>";
constexpr int kUnkIndex = 0;

class Vocabulary {
 public:
  Vocabulary() { add_unk(); }

  // Builds from a word list; indices follow sorted token order, <unk> first.
  static Vocabulary build(const std::vector<std::string>& words) {
    Vocabulary v;
    std::vector<std::string> uniq = words;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& w : uniq)
      if (w != kUnkToken) {
        v.index_.emplace(w, int(v.tokens_.size()));
        v.tokens_.push_back(w);
      }
    return v;
  }

  int index_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkIndex : it->second;
  }

  const std::string& token_at(int i) const { return tokens_[size_t(i)]; }
  int size() const { return int(tokens_.size()); }

  // One "token<TAB>index" line per entry, sorted by token.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write vocabulary: " + path);
    std::vector<std::pair<std::string, int>> rows(index_.begin(), index_.end());
    rows.emplace_back(kUnkToken, kUnkIndex);
    std::sort(rows.begin(), rows.end());
    for (auto& [tok, idx] : rows) f << tok << '\t' << idx << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocabulary: " + path);
    std::map<int, std::string> by_index;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw std::runtime_error("bad vocabulary line: " + line);
      by_index[std::stoi(line.substr(tab + 1))] = line.substr(0, tab);
    }
    Vocabulary v;
    v.tokens_.clear();
    v.index_.clear();
    for (auto& [idx, tok] : by_index) {
      if (idx != int(v.tokens_.size())) throw std::runtime_error("vocabulary has index gaps");
      if (tok != kUnkToken) v.index_.emplace(tok, idx);
      v.tokens_.push_back(tok);
    }
    if (v.tokens_.empty() || v.tokens_[0] != kUnkToken)
      throw std::runtime_error("vocabulary must reserve index 0 for " + std::string(kUnkToken));
    return v;
  }

 private:
  void add_unk() { tokens_.push_back(kUnkToken); }
  std::map<std::string, int> index_;
  std::vector<std::string> tokens_;  // index -> token
};

struct Caption {
  std::vector<int> tokens;
  std::string raw_text;
  int length() const { return int(tokens.size()); }
};

// Lowercased whitespace tokenization; unknown words map to <unk>; captions
// longer than t_max are truncated. Empty text is an error.
inline Caption tokenize(const std::string& raw_text, const Vocabulary& vocab, int t_max) {
  Caption c;
  c.raw_text = raw_text;
  std::string word;
  std::istringstream in(raw_text);
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char ch) { return char(std::tolower(ch)); });
    c.tokens.push_back(vocab.index_of(word));
    if (int(c.tokens.size()) == t_max) break;
  }
  if (c.tokens.empty()) throw std::invalid_argument("empty caption");
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
struct TextOut {
  Var<T> sentence;  // s' [B, D]
  Var<T> words;     // W  [B, D, T]
};

// Token embedding + single GRU; word features are the per-step hidden
// states, the sentence feature is the last one.
template <typename T>
struct TextEncoder {
  Var<T> table;  // [vocab, D]
  nn::GruCell<T> gru;
  int dim = 0;

  TextEncoder() = default;
  TextEncoder(nn::ParamStore<T>& ps, const std::string& name, int vocab_size, int text_dim,
              Rng& rng)
      : table(ps.add(name + ".emb", {vocab_size, text_dim}, nn::Init::kUniformFanIn, rng)),
        gru(ps, name + ".gru", text_dim, text_dim, rng),
        dim(text_dim) {}

  // All captions in a batch must share one length (the synthetic templates do).
  TextOut<T> operator()(const std::vector<Caption>& batch) const {
    ag::check(!batch.empty(), "encode_text: empty batch");
    const int t = batch[0].length();
    for (const auto& c : batch)
      ag::check(c.length() == t, "encode_text: captions in a batch must share a length");
    const int b = int(batch.size());

    Var<T> h = Var<T>::leaf({b, dim});
    std::vector<Var<T>> steps;
    steps.reserve(size_t(t));
    for (int step = 0; step < t; ++step) {
      std::vector<int> ids(size_t(b), 0);
      for (int i = 0; i < b; ++i) ids[size_t(i)] = batch[size_t(i)].tokens[size_t(step)];
      Var<T> e = ag::embedding(table, ids, {b});
      h = gru(e, h);
      steps.push_back(h);
    }
    return {h, ag::stack_lastdim(steps)};
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct CondSentence {
  Var<T> s;        // [B, ca_dim]
  Var<T> mu;       // [B, ca_dim]
  Var<T> sigma;    // [B, ca_dim], strictly positive
  Var<T> kl;       // scalar: batch mean of per-sample KL(N(mu,sigma)||N(0,1))
};

// Conditioning augmentation: a linear layer predicts (mu, logvar); sigma is
// exp(logvar/2) so positivity is structural; s = mu + sigma .* noise.
template <typename T>
struct CondAug {
  nn::Linear<T> fc;
  int latent = 0;

  CondAug() = default;
  CondAug(nn::ParamStore<T>& ps, const std::string& name, int text_dim, int ca_dim, Rng& rng)
      : fc(ps, name + ".fc", text_dim, 2 * ca_dim, rng, nn::Init::kSmallNormal), latent(ca_dim) {}

  CondSentence<T> operator()(const Var<T>& s_prime, const Var<T>& noise) const {
    using namespace ag;
    for (T v : s_prime.val())
      check(std::isfinite(double(v)), "conditioning_augmentation: non-finite sentence feature");
    check(noise.shape() == Shape{s_prime.dim(0), latent},
          "conditioning_augmentation: noise must be [B, ca_dim]");
    Var<T> out = fc(s_prime);
    Var<T> mu = slice_lastdim(out, 0, latent);
    Var<T> logvar = slice_lastdim(out, latent, 2 * latent);
    Var<T> sigma = exp_(scale(logvar, T(0.5)));
    Var<T> s = add(mu, mul(sigma, noise));
    return {s, mu, sigma, nn::gauss_kl_from_logvar(mu, logvar)};
  }
};

}  // namespace tigan::text
