#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "itexp/error.hpp"
#include "itexp/leveler.hpp"
#include "itexp/predictor.hpp"
#include "itexp/random.hpp"
#include "itexp/treebank.hpp"
#include "itexp/vocab.hpp"

namespace itexp {

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 2;
  int embed_size = 32;
  int ff_size = 64;
  int exp_layer = -1;  // -1 means num_layers / 2
  int max_len = 128;
  int vocab_tokens = 0;
  int vocab_exps = 0;
  double learning_rate = 3e-3;
  int epochs = 50;
  int batch_size = 16;
  std::uint64_t seed = 0;

  int expansion_layer() const { return exp_layer < 0 ? num_layers / 2 : exp_layer; }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(Errc::invalid_argument, m); };
    if (num_layers < 2) bad("num_layers must be >= 2");
    if (num_heads < 1 || embed_size < 1 || embed_size % num_heads != 0)
      bad("embed_size must be a positive multiple of num_heads");
    if (ff_size < 1) bad("ff_size must be >= 1");
    const int le = expansion_layer();
    if (le < 1 || le >= num_layers) bad("expansion layer must satisfy 1 <= L_exp < num_layers");
    if (max_len < 1) bad("max_len must be >= 1");
    if (vocab_tokens < 4 || vocab_exps < 2) bad("vocabulary sizes are too small");
    if (!(learning_rate >= 0)) bad("learning rate must be >= 0");
    if (epochs < 0 || batch_size < 1) bad("epochs must be >= 0 and batch_size >= 1");
  }

  nlohmann::ordered_json to_json() const {
    return {{"num_layers", num_layers}, {"num_heads", num_heads}, {"embed_size", embed_size},
            {"ff_size", ff_size},       {"exp_layer", expansion_layer()}, {"max_len", max_len},
            {"vocab_tokens", vocab_tokens}, {"vocab_exps", vocab_exps}, {"learning_rate", learning_rate},
            {"epochs", epochs},         {"batch_size", batch_size}, {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.num_layers = j.at("num_layers").get<int>();
      c.num_heads = j.at("num_heads").get<int>();
      c.embed_size = j.at("embed_size").get<int>();
      c.ff_size = j.at("ff_size").get<int>();
      c.exp_layer = j.at("exp_layer").get<int>();
      c.max_len = j.at("max_len").get<int>();
      c.vocab_tokens = j.at("vocab_tokens").get<int>();
      c.vocab_exps = j.at("vocab_exps").get<int>();
      c.learning_rate = j.at("learning_rate").get<double>();
      c.epochs = j.at("epochs").get<int>();
      c.batch_size = j.at("batch_size").get<int>();
      c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::schema_mismatch, std::string("model config: ") + e.what());
    }
    return c;
  }
};

// One level transition in ID space. Heads use kRootHead for the root.
struct Sequence {
  std::vector<int> tokens;
  std::vector<int> heads;
  std::size_t size() const noexcept { return tokens.size(); }
};

// Targets; 0 ([pad]) marks positions that take no loss.
struct Example {
  Sequence input;
  std::vector<int> token_targets;
  std::vector<int> exp_targets;
};

inline Sequence encode_input(const LevelInput& input, const SymbolTable& st) {
  Sequence s;
  s.heads = input.heads;
  for (const auto& sym : input.i_tok) {
    if (!sym.placeholder) {
      s.tokens.push_back(st.terminal_id(sym.text));
      continue;
    }
    const auto id = st.placeholder_id(sym.text);
    if (!id) throw Error(Errc::invalid_argument, "placeholder " + sym.render() + " not in vocabulary");
    s.tokens.push_back(*id);
  }
  return s;
}

inline Example encode_transition(const LevelTransition& t, const SymbolTable& st) {
  Example ex{encode_input(t.input, st), {}, {}};
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t.o_tok[i]) {
      ex.token_targets.push_back(SymbolTable::kPadId);
      ex.exp_targets.push_back(SymbolTable::kExpPadId);
      continue;
    }
    ex.token_targets.push_back(st.terminal_id(*t.o_tok[i]));
    const auto exp = st.expansion_id(t.o_exp[i]->render());
    if (!exp) throw Error(Errc::invalid_argument, "expansion " + t.o_exp[i]->render() + " not in vocabulary");
    ex.exp_targets.push_back(*exp);
  }
  return ex;
}

inline std::vector<Example> encode_levels(const LevelCorpus& levels, const SymbolTable& st) {
  std::vector<Example> out;
  for (const auto& sent : levels)
    for (const auto& t : sent) out.push_back(encode_transition(t, st));
  return out;
}

// Token IDs whose logits are forced to -inf: dependency placeholders.
inline std::vector<char> placeholder_mask(const SymbolTable& st) {
  std::vector<char> m(st.num_tokens(), 0);
  for (std::size_t id = 0; id < m.size(); ++id) m[id] = st.is_placeholder(static_cast<int>(id)) ? 1 : 0;
  return m;
}

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

// y[n,m] = x[n,k] w[k,m] + b
template <class T>
void affine(const T* x, const T* w, const T* b, T* y, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    T* yi = y + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) yi[j] = b ? b[j] : T(0);
    for (int p = 0; p < k; ++p) {
      const T xv = x[static_cast<std::size_t>(i) * k + p];
      const T* wr = w + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) yi[j] += xv * wr[j];
    }
  }
}

// Accumulates dx += dy w^T, dw += x^T dy, db += sum(dy). dx may be null.
template <class T>
void affine_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const T* dyi = dy + static_cast<std::size_t>(i) * m;
    if (db)
      for (int j = 0; j < m; ++j) db[j] += dyi[j];
    for (int p = 0; p < k; ++p) {
      const T xv = x[static_cast<std::size_t>(i) * k + p];
      const T* wr = w + static_cast<std::size_t>(p) * m;
      T* dwr = dw + static_cast<std::size_t>(p) * m;
      T s = 0;
      for (int j = 0; j < m; ++j) {
        s += dyi[j] * wr[j];
        dwr[j] += xv * dyi[j];
      }
      if (dx) dx[static_cast<std::size_t>(i) * k + p] += s;
    }
  }
}

template <class T>
void layer_norm(const T* x, const T* g, const T* b, T* y, T* xhat, T* rstd, int n, int d) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * d;
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= d;
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[i] = r;
    for (int j = 0; j < d; ++j) {
      const T h = (xi[j] - mean) * r;
      xhat[static_cast<std::size_t>(i) * d + j] = h;
      y[static_cast<std::size_t>(i) * d + j] = h * g[j] + b[j];
    }
  }
}

// Accumulates into dx, dg, db.
template <class T>
void layer_norm_backward(const T* dy, const T* g, const T* xhat, const T* rstd, T* dx, T* dg, T* db, int n, int d) {
  std::vector<T> dh(d);
  for (int i = 0; i < n; ++i) {
    const T* dyi = dy + static_cast<std::size_t>(i) * d;
    const T* hi = xhat + static_cast<std::size_t>(i) * d;
    T m1 = 0, m2 = 0;
    for (int j = 0; j < d; ++j) {
      dh[j] = dyi[j] * g[j];
      dg[j] += dyi[j] * hi[j];
      db[j] += dyi[j];
      m1 += dh[j];
      m2 += dh[j] * hi[j];
    }
    m1 /= d;
    m2 /= d;
    for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(i) * d + j] += rstd[i] * (dh[j] - m1 - hi[j] * m2);
  }
}

// tanh approximation of GELU and its derivative.
template <class T>
T gelu(T u) {
  const T c = T(0.7978845608028654);
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
  const T c = T(0.7978845608028654);
  const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * u * u);
}

// Softmax over the unmasked entries of one row; masked entries get 0.
template <class T>
void masked_softmax(const T* logits, const char* mask, double* p, int m) {
  double peak = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j)
    if (!(mask && mask[j])) peak = std::max(peak, static_cast<double>(logits[j]));
  double z = 0;
  for (int j = 0; j < m; ++j) {
    p[j] = (mask && mask[j]) ? 0.0 : std::exp(static_cast<double>(logits[j]) - peak);
    z += p[j];
  }
  for (int j = 0; j < m; ++j) p[j] /= z;
}

}  // namespace nn

template <class T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::size_t size() const noexcept { return value.size(); }
};

template <class T>
using Gradients = std::vector<std::vector<T>>;

struct LossParts {
  double token = 0;  // mean over non-pad token targets
  double exp = 0;    // mean over non-pad expansion targets
  std::size_t token_count = 0, exp_count = 0;
  double total() const noexcept { return token + exp; }
};

// Pre-LN transformer over one level transition. The expansion head reads the
// hidden state after block L_exp; the chosen expansion's embedding is then
// added to that state before the remaining blocks. Attention is unmasked.
template <class T>
class Model {
 public:
  struct Output {
    int n = 0;
    std::vector<T> token_logits;  // n x V_tok, placeholders at -inf
    std::vector<T> exp_logits;    // n x V_exp
    std::vector<int> exps;        // expansion IDs the token layers were conditioned on
  };

  // All parameters zero except layer-norm gains.
  Model(const ModelConfig& config, std::vector<char> token_mask) : config_(config), mask_(std::move(token_mask)) {
    config_.validate();
    if (static_cast<int>(mask_.size()) != config_.vocab_tokens)
      throw Error(Errc::shape_mismatch, "token mask size differs from vocab_tokens");
    build();
  }

  // Gaussian weights and embeddings from config.seed; gains 1, biases 0.
  // With zero_output the two output projections start at zero, so the
  // initial logits are exactly uniform.
  static Model initialized(const ModelConfig& config, std::vector<char> token_mask, double stddev = 0.02,
                           bool zero_output = true) {
    Model m(config, std::move(token_mask));
    std::mt19937_64 rng(config.seed);
    for (auto& p : m.params_) {
      if (p.name.ends_with(".g") || p.name.ends_with(".b")) continue;
      if (zero_output && (p.name == "tok_out.w" || p.name == "exp_out.w")) continue;
      for (auto& v : p.value) v = static_cast<T>(stddev * standard_normal(rng));
    }
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<char>& token_mask() const noexcept { return mask_; }
  std::vector<Param<T>>& params() noexcept { return params_; }
  const std::vector<Param<T>>& params() const noexcept { return params_; }

  Param<T>& param(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw Error(Errc::invalid_argument, "no parameter named " + std::string(name));
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto& p : params_) g.emplace_back(p.size(), T(0));
    return g;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m(config_, mask_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      std::transform(params_[i].value.begin(), params_[i].value.end(), m.params()[i].value.begin(),
                     [](T v) { return static_cast<U>(v); });
    return m;
  }

  // Without `exps`, each position is conditioned on its argmax expansion.
  Output forward(const Sequence& seq, const std::vector<int>* exps = nullptr) const {
    return run(seq, exps, nullptr);
  }

  // Stops after the expansion head; token_logits stay empty.
  Output forward_expansions(const Sequence& seq) const {
    Output out;
    Cache cache;
    check(seq, nullptr);
    out.n = static_cast<int>(seq.size());
    std::vector<T> x = embed(seq);
    for (int l = 0; l < config_.expansion_layer(); ++l) block_forward(l, x, out.n, cache);
    out.exp_logits = expansion_head(x, out.n, cache);
    return out;
  }

  // Mean cross-entropies with gold expansions teacher-forced; adds the
  // gradient of their sum into `grads` when given.
  LossParts loss(std::span<const Example> batch, Gradients<T>* grads = nullptr) const {
    LossParts parts;
    for (const auto& ex : batch) {
      if (ex.token_targets.size() != ex.input.size() || ex.exp_targets.size() != ex.input.size())
        throw Error(Errc::shape_mismatch, "targets and input differ in length");
      for (int t : ex.token_targets) parts.token_count += t != SymbolTable::kPadId;
      for (int t : ex.exp_targets) parts.exp_count += t != SymbolTable::kExpPadId;
    }
    const int vt = config_.vocab_tokens, ve = config_.vocab_exps;
    std::vector<double> p;
    for (const auto& ex : batch) {
      Cache cache;
      Output out = run(ex.input, &ex.exp_targets, grads ? &cache : nullptr);
      const int n = out.n;
      std::vector<T> dtok(grads ? static_cast<std::size_t>(n) * vt : 0, T(0));
      std::vector<T> dexp(grads ? static_cast<std::size_t>(n) * ve : 0, T(0));
      for (int i = 0; i < n; ++i) {
        if (const int t = ex.token_targets[i]; t != SymbolTable::kPadId) {
          if (mask_.at(t)) throw Error(Errc::invalid_argument, "token target is a masked placeholder");
          p.resize(vt);
          nn::masked_softmax(out.token_logits.data() + static_cast<std::size_t>(i) * vt, mask_.data(), p.data(), vt);
          parts.token -= std::log(p[t]);
          if (grads) {
            const double s = 1.0 / static_cast<double>(parts.token_count);
            for (int j = 0; j < vt; ++j)
              dtok[static_cast<std::size_t>(i) * vt + j] = static_cast<T>((p[j] - (j == t)) * s);
          }
        }
        if (const int e = ex.exp_targets[i]; e != SymbolTable::kExpPadId) {
          p.resize(ve);
          nn::masked_softmax(out.exp_logits.data() + static_cast<std::size_t>(i) * ve, static_cast<const char*>(nullptr),
                             p.data(), ve);
          parts.exp -= std::log(p[e]);
          if (grads) {
            const double s = 1.0 / static_cast<double>(parts.exp_count);
            for (int j = 0; j < ve; ++j)
              dexp[static_cast<std::size_t>(i) * ve + j] = static_cast<T>((p[j] - (j == e)) * s);
          }
        }
      }
      if (grads) backward(cache, dtok, dexp, *grads);
    }
    if (parts.token_count) parts.token /= static_cast<double>(parts.token_count);
    if (parts.exp_count) parts.exp /= static_cast<double>(parts.exp_count);
    return parts;
  }

 private:
  struct BlockIdx {
    int ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  struct BlockCache {
    std::vector<T> xhat1, rstd1, h1, q, k, v, att, ctx, xhat2, rstd2, h2, u, g;
  };

  struct Cache {
    std::vector<int> tokens, heads, exps;
    std::vector<BlockCache> blocks;
    std::vector<T> xhat_e, rstd_e, he, xhat_f, rstd_f, hf;
  };

  int add(std::string name, std::vector<std::size_t> shape, T fill = T(0)) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill)});
    return static_cast<int>(params_.size() - 1);
  }

  void build() {
    const std::size_t d = config_.embed_size, f = config_.ff_size;
    const std::size_t vt = config_.vocab_tokens, ve = config_.vocab_exps, s = config_.max_len;
    tok_emb_ = add("tok_emb", {vt, d});
    pos_emb_ = add("pos_emb", {s, d});
    head_emb_ = add("head_emb", {s + 1, d});  // row 0 is the root sentinel
    exp_emb_ = add("exp_emb", {ve, d});
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      BlockIdx b{};
      b.ln1_g = add(p + "ln1.g", {d}, T(1));
      b.ln1_b = add(p + "ln1.b", {d});
      b.wq = add(p + "attn.wq", {d, d});
      b.bq = add(p + "attn.bq", {d});
      // No key bias: it shifts every score in a row equally and cancels in the softmax.
      b.wk = add(p + "attn.wk", {d, d});
      b.wv = add(p + "attn.wv", {d, d});
      b.bv = add(p + "attn.bv", {d});
      b.wo = add(p + "attn.wo", {d, d});
      b.bo = add(p + "attn.bo", {d});
      b.ln2_g = add(p + "ln2.g", {d}, T(1));
      b.ln2_b = add(p + "ln2.b", {d});
      b.w1 = add(p + "ffn.w1", {d, f});
      b.b1 = add(p + "ffn.b1", {f});
      b.w2 = add(p + "ffn.w2", {f, d});
      b.b2 = add(p + "ffn.b2", {d});
      blocks_.push_back(b);
    }
    exp_ln_g_ = add("exp_ln.g", {d}, T(1));
    exp_ln_b_ = add("exp_ln.b", {d});
    exp_w_ = add("exp_out.w", {d, ve});
    exp_b_ = add("exp_out.b", {ve});
    fin_ln_g_ = add("final_ln.g", {d}, T(1));
    fin_ln_b_ = add("final_ln.b", {d});
    tok_w_ = add("tok_out.w", {d, vt});
    tok_b_ = add("tok_out.b", {vt});
  }

  const T* P(int i) const { return params_[i].value.data(); }

  void check(const Sequence& seq, const std::vector<int>* exps) const {
    const int n = static_cast<int>(seq.size());
    if (n == 0) throw Error(Errc::shape_mismatch, "empty sequence");
    if (n > config_.max_len)
      throw Error(Errc::sequence_too_long,
                  "sequence of length " + std::to_string(n) + " exceeds max_len " + std::to_string(config_.max_len));
    if (seq.heads.size() != seq.tokens.size()) throw Error(Errc::shape_mismatch, "heads and tokens differ in length");
    for (int i = 0; i < n; ++i) {
      if (seq.tokens[i] < 0 || seq.tokens[i] >= config_.vocab_tokens)
        throw Error(Errc::shape_mismatch, "token ID out of range");
      if (seq.heads[i] < kRootHead || seq.heads[i] >= n) throw Error(Errc::shape_mismatch, "head index out of range");
    }
    if (exps) {
      if (static_cast<int>(exps->size()) != n) throw Error(Errc::shape_mismatch, "expansions and tokens differ in length");
      for (int e : *exps)
        if (e < 0 || e >= config_.vocab_exps) throw Error(Errc::shape_mismatch, "expansion ID out of range");
    }
  }

  std::vector<T> embed(const Sequence& seq) const {
    const int n = static_cast<int>(seq.size()), d = config_.embed_size;
    std::vector<T> x(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
      const T* te = P(tok_emb_) + static_cast<std::size_t>(seq.tokens[i]) * d;
      const T* pe = P(pos_emb_) + static_cast<std::size_t>(i) * d;
      const T* he = P(head_emb_) + static_cast<std::size_t>(seq.heads[i] + 1) * d;
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(i) * d + j] = te[j] + pe[j] + he[j];
    }
    return x;
  }

  void block_forward(int l, std::vector<T>& x, int n, Cache& cache) const {
    const BlockIdx& b = blocks_[l];
    const int d = config_.embed_size, f = config_.ff_size, nh = config_.num_heads, dh = d / nh;
    const std::size_t nd = static_cast<std::size_t>(n) * d;
    BlockCache c;
    c.xhat1.resize(nd);
    c.rstd1.resize(n);
    c.h1.resize(nd);
    nn::layer_norm(x.data(), P(b.ln1_g), P(b.ln1_b), c.h1.data(), c.xhat1.data(), c.rstd1.data(), n, d);
    c.q.resize(nd);
    c.k.resize(nd);
    c.v.resize(nd);
    nn::affine(c.h1.data(), P(b.wq), P(b.bq), c.q.data(), n, d, d);
    nn::affine(c.h1.data(), P(b.wk), static_cast<const T*>(nullptr), c.k.data(), n, d, d);
    nn::affine(c.h1.data(), P(b.wv), P(b.bv), c.v.data(), n, d, d);
    c.att.assign(static_cast<std::size_t>(nh) * n * n, T(0));
    c.ctx.assign(nd, T(0));
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (int h = 0; h < nh; ++h)
      for (int i = 0; i < n; ++i) {
        T* a = c.att.data() + (static_cast<std::size_t>(h) * n + i) * n;
        T peak = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < n; ++j) {
          T s = 0;
          for (int t = 0; t < dh; ++t) s += c.q[i * d + h * dh + t] * c.k[j * d + h * dh + t];
          a[j] = s * scale;
          peak = std::max(peak, a[j]);
        }
        T z = 0;
        for (int j = 0; j < n; ++j) z += (a[j] = std::exp(a[j] - peak));
        for (int j = 0; j < n; ++j) {
          a[j] /= z;
          for (int t = 0; t < dh; ++t) c.ctx[i * d + h * dh + t] += a[j] * c.v[j * d + h * dh + t];
        }
      }
    std::vector<T> y(nd);
    nn::affine(c.ctx.data(), P(b.wo), P(b.bo), y.data(), n, d, d);
    for (std::size_t i = 0; i < nd; ++i) x[i] += y[i];

    c.xhat2.resize(nd);
    c.rstd2.resize(n);
    c.h2.resize(nd);
    nn::layer_norm(x.data(), P(b.ln2_g), P(b.ln2_b), c.h2.data(), c.xhat2.data(), c.rstd2.data(), n, d);
    c.u.resize(static_cast<std::size_t>(n) * f);
    nn::affine(c.h2.data(), P(b.w1), P(b.b1), c.u.data(), n, d, f);
    c.g.resize(c.u.size());
    for (std::size_t i = 0; i < c.u.size(); ++i) c.g[i] = nn::gelu(c.u[i]);
    nn::affine(c.g.data(), P(b.w2), P(b.b2), y.data(), n, f, d);
    for (std::size_t i = 0; i < nd; ++i) x[i] += y[i];
    cache.blocks.push_back(std::move(c));
  }

  // dx holds the gradient w.r.t. the block output on entry and w.r.t. its input on exit.
  void block_backward(int l, std::vector<T>& dx, int n, const BlockCache& c, Gradients<T>& G) const {
    const BlockIdx& b = blocks_[l];
    const int d = config_.embed_size, f = config_.ff_size, nh = config_.num_heads, dh = d / nh;
    const std::size_t nd = static_cast<std::size_t>(n) * d;

    std::vector<T> dg(static_cast<std::size_t>(n) * f, T(0));
    nn::affine_backward(c.g.data(), P(b.w2), dx.data(), dg.data(), G[b.w2].data(), G[b.b2].data(), n, f, d);
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= nn::gelu_grad(c.u[i]);
    std::vector<T> dh2(nd, T(0));
    nn::affine_backward(c.h2.data(), P(b.w1), dg.data(), dh2.data(), G[b.w1].data(), G[b.b1].data(), n, d, f);
    nn::layer_norm_backward(dh2.data(), P(b.ln2_g), c.xhat2.data(), c.rstd2.data(), dx.data(), G[b.ln2_g].data(),
                            G[b.ln2_b].data(), n, d);

    std::vector<T> dctx(nd, T(0));
    nn::affine_backward(c.ctx.data(), P(b.wo), dx.data(), dctx.data(), G[b.wo].data(), G[b.bo].data(), n, d, d);
    std::vector<T> dq(nd, T(0)), dk(nd, T(0)), dv(nd, T(0)), da(n), ds(n);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (int h = 0; h < nh; ++h)
      for (int i = 0; i < n; ++i) {
        const T* a = c.att.data() + (static_cast<std::size_t>(h) * n + i) * n;
        T dot = 0;
        for (int j = 0; j < n; ++j) {
          T s = 0;
          for (int t = 0; t < dh; ++t) {
            s += dctx[i * d + h * dh + t] * c.v[j * d + h * dh + t];
            dv[j * d + h * dh + t] += a[j] * dctx[i * d + h * dh + t];
          }
          da[j] = s;
          dot += a[j] * s;
        }
        for (int j = 0; j < n; ++j) {
          ds[j] = a[j] * (da[j] - dot) * scale;
          for (int t = 0; t < dh; ++t) {
            dq[i * d + h * dh + t] += ds[j] * c.k[j * d + h * dh + t];
            dk[j * d + h * dh + t] += ds[j] * c.q[i * d + h * dh + t];
          }
        }
      }
    std::vector<T> dh1(nd, T(0));
    nn::affine_backward(c.h1.data(), P(b.wq), dq.data(), dh1.data(), G[b.wq].data(), G[b.bq].data(), n, d, d);
    nn::affine_backward(c.h1.data(), P(b.wk), dk.data(), dh1.data(), G[b.wk].data(), static_cast<T*>(nullptr), n, d, d);
    nn::affine_backward(c.h1.data(), P(b.wv), dv.data(), dh1.data(), G[b.wv].data(), G[b.bv].data(), n, d, d);
    nn::layer_norm_backward(dh1.data(), P(b.ln1_g), c.xhat1.data(), c.rstd1.data(), dx.data(), G[b.ln1_g].data(),
                            G[b.ln1_b].data(), n, d);
  }

  std::vector<T> expansion_head(const std::vector<T>& x, int n, Cache& cache) const {
    const int d = config_.embed_size, ve = config_.vocab_exps;
    cache.xhat_e.resize(x.size());
    cache.rstd_e.resize(n);
    cache.he.resize(x.size());
    nn::layer_norm(x.data(), P(exp_ln_g_), P(exp_ln_b_), cache.he.data(), cache.xhat_e.data(), cache.rstd_e.data(), n, d);
    std::vector<T> logits(static_cast<std::size_t>(n) * ve);
    nn::affine(cache.he.data(), P(exp_w_), P(exp_b_), logits.data(), n, d, ve);
    return logits;
  }

  Output run(const Sequence& seq, const std::vector<int>* exps, Cache* keep) const {
    check(seq, exps);
    Cache local;
    Cache& cache = keep ? *keep : local;
    const int n = static_cast<int>(seq.size()), d = config_.embed_size;
    const int vt = config_.vocab_tokens, ve = config_.vocab_exps;
    Output out;
    out.n = n;
    cache.tokens = seq.tokens;
    cache.heads = seq.heads;
    std::vector<T> x = embed(seq);
    for (int l = 0; l < config_.num_layers; ++l) {
      if (l == config_.expansion_layer()) {
        out.exp_logits = expansion_head(x, n, cache);
        if (exps) {
          out.exps = *exps;
        } else {
          for (int i = 0; i < n; ++i) {
            const T* r = out.exp_logits.data() + static_cast<std::size_t>(i) * ve;
            out.exps.push_back(static_cast<int>(std::max_element(r, r + ve) - r));
          }
        }
        cache.exps = out.exps;
        for (int i = 0; i < n; ++i) {
          const T* e = P(exp_emb_) + static_cast<std::size_t>(out.exps[i]) * d;
          for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(i) * d + j] += e[j];
        }
      }
      block_forward(l, x, n, cache);
      if (!keep) cache.blocks.clear();
    }
    cache.xhat_f.resize(x.size());
    cache.rstd_f.resize(n);
    cache.hf.resize(x.size());
    nn::layer_norm(x.data(), P(fin_ln_g_), P(fin_ln_b_), cache.hf.data(), cache.xhat_f.data(), cache.rstd_f.data(), n, d);
    out.token_logits.resize(static_cast<std::size_t>(n) * vt);
    nn::affine(cache.hf.data(), P(tok_w_), P(tok_b_), out.token_logits.data(), n, d, vt);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < vt; ++j)
        if (mask_[j]) out.token_logits[static_cast<std::size_t>(i) * vt + j] = -std::numeric_limits<T>::infinity();
    return out;
  }

  void backward(const Cache& c, const std::vector<T>& dtok, const std::vector<T>& dexp, Gradients<T>& G) const {
    const int n = static_cast<int>(c.tokens.size()), d = config_.embed_size;
    const int vt = config_.vocab_tokens, ve = config_.vocab_exps;
    std::vector<T> dx(static_cast<std::size_t>(n) * d, T(0)), dh(dx.size(), T(0));
    nn::affine_backward(c.hf.data(), P(tok_w_), dtok.data(), dh.data(), G[tok_w_].data(), G[tok_b_].data(), n, d, vt);
    nn::layer_norm_backward(dh.data(), P(fin_ln_g_), c.xhat_f.data(), c.rstd_f.data(), dx.data(), G[fin_ln_g_].data(),
                            G[fin_ln_b_].data(), n, d);
    for (int l = config_.num_layers - 1; l >= 0; --l) {
      block_backward(l, dx, n, c.blocks[l], G);
      if (l != config_.expansion_layer()) continue;
      for (int i = 0; i < n; ++i) {
        T* ge = G[exp_emb_].data() + static_cast<std::size_t>(c.exps[i]) * d;
        for (int j = 0; j < d; ++j) ge[j] += dx[static_cast<std::size_t>(i) * d + j];
      }
      std::fill(dh.begin(), dh.end(), T(0));
      nn::affine_backward(c.he.data(), P(exp_w_), dexp.data(), dh.data(), G[exp_w_].data(), G[exp_b_].data(), n, d, ve);
      nn::layer_norm_backward(dh.data(), P(exp_ln_g_), c.xhat_e.data(), c.rstd_e.data(), dx.data(),
                              G[exp_ln_g_].data(), G[exp_ln_b_].data(), n, d);
    }
    for (int i = 0; i < n; ++i) {
      const T* g = dx.data() + static_cast<std::size_t>(i) * d;
      T* gt = G[tok_emb_].data() + static_cast<std::size_t>(c.tokens[i]) * d;
      T* gp = G[pos_emb_].data() + static_cast<std::size_t>(i) * d;
      T* gh = G[head_emb_].data() + static_cast<std::size_t>(c.heads[i] + 1) * d;
      for (int j = 0; j < d; ++j) {
        gt[j] += g[j];
        gp[j] += g[j];
        gh[j] += g[j];
      }
    }
  }

  ModelConfig config_;
  std::vector<char> mask_;
  std::vector<Param<T>> params_;
  std::vector<BlockIdx> blocks_;
  int tok_emb_ = 0, pos_emb_ = 0, head_emb_ = 0, exp_emb_ = 0;
  int exp_ln_g_ = 0, exp_ln_b_ = 0, exp_w_ = 0, exp_b_ = 0;
  int fin_ln_g_ = 0, fin_ln_b_ = 0, tok_w_ = 0, tok_b_ = 0;
};

// Mean CE of already computed logits, for callers outside the training loop.
// An all-pad batch has loss 0.
template <class T>
LossParts cross_entropy(const std::vector<typename Model<T>::Output>& outputs, const std::vector<Example>& targets,
                        int vocab_tokens, int vocab_exps) {
  if (outputs.size() != targets.size()) throw Error(Errc::shape_mismatch, "outputs and targets differ in count");
  LossParts parts;
  std::vector<double> p;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    const auto& out = outputs[b];
    const auto& ex = targets[b];
    for (int i = 0; i < out.n; ++i) {
      if (const int t = ex.token_targets.at(i); t != SymbolTable::kPadId) {
        p.resize(vocab_tokens);
        const T* row = out.token_logits.data() + static_cast<std::size_t>(i) * vocab_tokens;
        std::vector<char> mask(vocab_tokens);
        for (int j = 0; j < vocab_tokens; ++j) mask[j] = std::isinf(row[j]) && row[j] < 0;
        nn::masked_softmax(row, mask.data(), p.data(), vocab_tokens);
        parts.token -= std::log(p[t]);
        ++parts.token_count;
      }
      if (const int e = ex.exp_targets.at(i); e != SymbolTable::kExpPadId) {
        p.resize(vocab_exps);
        nn::masked_softmax(out.exp_logits.data() + static_cast<std::size_t>(i) * vocab_exps,
                           static_cast<const char*>(nullptr), p.data(), vocab_exps);
        parts.exp -= std::log(p[e]);
        ++parts.exp_count;
      }
    }
  }
  if (parts.token_count) parts.token /= static_cast<double>(parts.token_count);
  if (parts.exp_count) parts.exp /= static_cast<double>(parts.exp_count);
  return parts;
}

// ---------------------------------------------------------------------------
// Training

struct Accuracy {
  double token = 0, exp = 0;
  std::size_t token_count = 0, exp_count = 0;
};

// Teacher-forced argmax accuracy over non-pad targets.
template <class T>
Accuracy accuracy(const Model<T>& model, std::span<const Example> data) {
  Accuracy acc;
  std::size_t tok_ok = 0, exp_ok = 0;
  const int vt = model.config().vocab_tokens, ve = model.config().vocab_exps;
  for (const auto& ex : data) {
    const auto out = model.forward(ex.input, &ex.exp_targets);
    for (int i = 0; i < out.n; ++i) {
      if (ex.token_targets[i] != SymbolTable::kPadId) {
        const T* r = out.token_logits.data() + static_cast<std::size_t>(i) * vt;
        tok_ok += (std::max_element(r, r + vt) - r) == ex.token_targets[i];
        ++acc.token_count;
      }
      if (ex.exp_targets[i] != SymbolTable::kExpPadId) {
        const T* r = out.exp_logits.data() + static_cast<std::size_t>(i) * ve;
        exp_ok += (std::max_element(r, r + ve) - r) == ex.exp_targets[i];
        ++acc.exp_count;
      }
    }
  }
  if (acc.token_count) acc.token = static_cast<double>(tok_ok) / static_cast<double>(acc.token_count);
  if (acc.exp_count) acc.exp = static_cast<double>(exp_ok) / static_cast<double>(acc.exp_count);
  return acc;
}

struct TrainOptions {
  // Called after every epoch with the mean minibatch loss.
  std::function<void(int epoch, double loss)> on_epoch;
  // If > 0, accuracy is checked every `check_every` epochs and training
  // stops once both token and expansion accuracy reach it.
  double stop_at_accuracy = 0;
  int check_every = 10;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  int epochs_run = 0;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) on minibatches of transitions drawn
// from all sentences, reshuffled each epoch from config.seed.
template <class T>
TrainResult train(Model<T>& model, const std::vector<Example>& data, const TrainOptions& opt = {}) {
  if (data.empty()) throw Error(Errc::empty_corpus, "no training transitions");
  const ModelConfig& cfg = model.config();
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto& params = model.params();
  std::vector<std::vector<double>> m, v;
  for (const auto& p : params) {
    m.emplace_back(p.size(), 0.0);
    v.emplace_back(p.size(), 0.0);
  }
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  TrainResult result;
  long step = 0;
  std::vector<Example> batch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    portable_shuffle(order, rng);
    double sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) batch.push_back(data[order[k]]);
      auto grads = model.zero_gradients();
      const LossParts lp = model.loss(batch, &grads);
      if (!std::isfinite(lp.total()))
        throw Error(Errc::divergence, "loss is not finite at epoch " + std::to_string(epoch));
      sum += lp.total();
      ++batches;
      ++step;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t a = 0; a < params.size(); ++a)
        for (std::size_t i = 0; i < params[a].size(); ++i) {
          const double g = static_cast<double>(grads[a][i]);
          m[a][i] = b1 * m[a][i] + (1 - b1) * g;
          v[a][i] = b2 * v[a][i] + (1 - b2) * g * g;
          const double upd = cfg.learning_rate * (m[a][i] / c1) / (std::sqrt(v[a][i] / c2) + eps);
          params[a].value[i] -= static_cast<T>(upd);
        }
    }
    const double mean = sum / static_cast<double>(batches);
    result.epoch_loss.push_back(mean);
    result.epochs_run = epoch;
    if (opt.on_epoch) opt.on_epoch(epoch, mean);
    if (opt.stop_at_accuracy > 0 && epoch % opt.check_every == 0) {
      const auto acc = accuracy(model, data);
      if (acc.token >= opt.stop_at_accuracy && acc.exp >= opt.stop_at_accuracy) break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  struct Entry {
    std::string name;
    double rel_error = 0;
  };
  std::vector<Entry> arrays;
  double max_rel_error = 0;
};

template <class T>
Gradients<double> analytic_gradient(const Model<T>& model, std::span<const Example> batch) {
  auto g = model.zero_gradients();
  model.loss(batch, &g);
  Gradients<double> out;
  for (auto& a : g) out.emplace_back(a.begin(), a.end());
  return out;
}

// Central differences of the total loss, in double precision.
inline Gradients<double> numeric_gradient(const Model<double>& model, std::span<const Example> batch,
                                          double step = 1e-5) {
  Model<double> probe = model;
  Gradients<double> out;
  for (auto& p : probe.params()) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double up = probe.loss(batch).total();
      p.value[i] = orig - step;
      const double down = probe.loss(batch).total();
      p.value[i] = orig;
      g[i] = (up - down) / (2 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Per array: max |a - n| / max(max |a|, max |n|); 0 when both vanish.
template <class T>
GradCheckReport compare_gradients(const std::vector<Param<T>>& params, const Gradients<double>& analytic,
                                  const Gradients<double>& numeric) {
  if (analytic.size() != params.size() || numeric.size() != params.size())
    throw Error(Errc::shape_mismatch, "gradient array count differs");
  GradCheckReport rep;
  for (std::size_t a = 0; a < params.size(); ++a) {
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < analytic[a].size(); ++i) {
      diff = std::max(diff, std::abs(analytic[a][i] - numeric[a][i]));
      scale = std::max({scale, std::abs(analytic[a][i]), std::abs(numeric[a][i])});
    }
    const double rel = scale > 0 ? diff / scale : 0.0;
    rep.arrays.push_back({params[a].name, rel});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
  }
  return rep;
}

// Analytic gradients in T against double-precision finite differences.
template <class T>
GradCheckReport grad_check(const Model<double>& reference, std::span<const Example> batch, double step = 1e-5) {
  const auto numeric = numeric_gradient(reference, batch, step);
  if constexpr (std::is_same_v<T, double>) {
    return compare_gradients(reference.params(), analytic_gradient(reference, batch), numeric);
  } else {
    const Model<T> low = reference.template cast<T>();
    return compare_gradients(reference.params(), analytic_gradient(low, batch), numeric);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON header line {format, version, config, vocab}, then per
// array a JSON line {name, shape} followed by its row-major float32
// little-endian values.

inline constexpr std::string_view kCheckpointFormat = "itexp-ckpt";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  SymbolTable symbols;
  Model<double> model;
};

inline Model<double> make_model(ModelConfig config, const SymbolTable& symbols, double init_std = 0.02,
                                bool zero_output = true) {
  config.vocab_tokens = static_cast<int>(symbols.num_tokens());
  config.vocab_exps = static_cast<int>(symbols.num_expansions());
  return Model<double>::initialized(config, placeholder_mask(symbols), init_std, zero_output);
}

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

}  // namespace detail

template <class T>
void write_checkpoint(std::ostream& out, const Model<T>& model, const SymbolTable& symbols) {
  std::ostringstream vocab;
  write_vocab(vocab, symbols);
  nlohmann::ordered_json head{{"format", kCheckpointFormat},
                              {"version", kCheckpointVersion},
                              {"config", model.config().to_json()},
                              {"vocab", vocab.str()}};
  out << head.dump() << '\n';
  std::vector<std::uint32_t> buf;
  for (const auto& p : model.params()) {
    out << nlohmann::ordered_json{{"name", p.name}, {"shape", p.shape}}.dump() << '\n';
    buf.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      buf[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(p.value[i])));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!out) throw Error(Errc::io_failure, "checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::schema_mismatch, "empty checkpoint");
  const auto head = detail::parse_json_line(line, 1);
  if (head.value("format", "") != kCheckpointFormat || head.value("version", 0) != kCheckpointVersion)
    throw Error(Errc::schema_mismatch, "not an itexp-ckpt version 1 file");
  const ModelConfig cfg = ModelConfig::from_json(head.at("config"));
  std::istringstream vocab(head.at("vocab").get<std::string>());
  SymbolTable symbols = read_vocab(vocab);
  if (static_cast<int>(symbols.num_tokens()) != cfg.vocab_tokens ||
      static_cast<int>(symbols.num_expansions()) != cfg.vocab_exps)
    throw Error(Errc::shape_mismatch, "checkpoint vocabulary disagrees with its config");
  Model<double> model(cfg, placeholder_mask(symbols));
  std::vector<std::uint32_t> buf;
  std::size_t lineno = 1;
  for (auto& p : model.params()) {
    ++lineno;
    if (!std::getline(in, line)) throw Error(Errc::schema_mismatch, "checkpoint ends before array " + p.name);
    const auto rec = detail::parse_json_line(line, lineno);
    const auto name = rec.value("name", "");
    const auto shape = rec.value("shape", std::vector<std::size_t>{});
    if (name != p.name) throw Error(Errc::schema_mismatch, "expected array " + p.name + ", found " + name);
    if (shape != p.shape) throw Error(Errc::shape_mismatch, "array " + p.name + " has the wrong shape");
    buf.resize(p.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!in) throw Error(Errc::schema_mismatch, "truncated data for array " + p.name);
    for (std::size_t i = 0; i < p.size(); ++i)
      p.value[i] = static_cast<double>(std::bit_cast<float>(detail::to_little_endian(buf[i])));
  }
  return Checkpoint{std::move(symbols), std::move(model)};
}

template <class T>
void write_checkpoint_file(const std::string& path, const Model<T>& model, const SymbolTable& symbols) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  write_checkpoint(out, model, symbols);
}

inline Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Predictor adapter

class NeuralPredictor final : public Predictor {
 public:
  NeuralPredictor(const Model<double>& model, SymbolTable symbols)
      : model_(model.cast<float>()), symbols_(std::move(symbols)) {
    if (static_cast<int>(symbols_.num_tokens()) != model_.config().vocab_tokens ||
        static_cast<int>(symbols_.num_expansions()) != model_.config().vocab_exps)
      throw Error(Errc::shape_mismatch, "symbol table does not match the model");
  }
  explicit NeuralPredictor(const Checkpoint& ckpt) : NeuralPredictor(ckpt.model, ckpt.symbols) {}

  const SymbolTable& symbols() const override { return symbols_; }
  bool conditions_on_expansion() const override { return true; }
  std::size_t max_input_length() const override { return static_cast<std::size_t>(model_.config().max_len); }

  std::vector<PositionPrediction> predict(const LevelInput& input) const override {
    const auto out = model_.forward(encode_input(input, symbols_));
    const int vt = model_.config().vocab_tokens, ve = model_.config().vocab_exps;
    std::vector<PositionPrediction> preds(input.size());
    for (int i = 0; i < out.n; ++i) {
      if (!input.i_tok[i].placeholder) continue;
      preds[i].token_dist.resize(vt);
      preds[i].exp_dist.resize(ve);
      nn::masked_softmax(out.token_logits.data() + static_cast<std::size_t>(i) * vt, model_.token_mask().data(),
                         preds[i].token_dist.data(), vt);
      nn::masked_softmax(out.exp_logits.data() + static_cast<std::size_t>(i) * ve, static_cast<const char*>(nullptr),
                         preds[i].exp_dist.data(), ve);
    }
    return preds;
  }

  std::vector<std::vector<double>> predict_tokens(const LevelInput& input, std::span<const int> exp_ids) const override {
    const std::vector<int> exps(exp_ids.begin(), exp_ids.end());
    const auto out = model_.forward(encode_input(input, symbols_), &exps);
    const int vt = model_.config().vocab_tokens;
    std::vector<std::vector<double>> dists(input.size());
    for (int i = 0; i < out.n; ++i) {
      if (!input.i_tok[i].placeholder) continue;
      dists[i].resize(vt);
      nn::masked_softmax(out.token_logits.data() + static_cast<std::size_t>(i) * vt, model_.token_mask().data(),
                         dists[i].data(), vt);
    }
    return dists;
  }

 private:
  Model<float> model_;
  SymbolTable symbols_;
};

}  // namespace itexp
