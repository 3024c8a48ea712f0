#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "itexp/error.hpp"
#include "itexp/leveler.hpp"
#include "itexp/predictor.hpp"
#include "itexp/random.hpp"
#include "itexp/vocab.hpp"

namespace itexp {

struct StyleRule {
  std::string label;  // matched as a substring of the rendered expansion
  double factor = 1.0;
};

struct GenerationSettings {
  double temperature = 1.0;
  double top_p = 0.9;
  std::vector<StyleRule> style;
  std::uint64_t seed = 0;
  int max_iterations = 64;
  // When false, temperature scales only the token softmax.
  bool temperature_on_expansions = true;

  void validate() const {
    if (!(temperature > 0)) throw Error(Errc::invalid_argument, "temperature must be > 0");
    if (!(top_p > 0 && top_p <= 1)) throw Error(Errc::invalid_argument, "top-p must be in (0, 1]");
    if (max_iterations < 1) throw Error(Errc::invalid_argument, "max_iterations must be >= 1");
    for (const auto& r : style)
      if (!(r.factor > 0)) throw Error(Errc::invalid_argument, "style factor must be > 0");
  }
};

namespace detail {

inline void normalize(std::vector<double>& v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  if (s > 0)
    for (auto& x : v) x /= s;
}

}  // namespace detail

// p_i^(1/tau), renormalized. Computed relative to the largest entry so small
// temperatures collapse onto the argmax instead of underflowing to zero.
inline std::vector<double> temperature_scale(std::span<const double> dist, double tau) {
  if (!(tau > 0)) throw Error(Errc::invalid_argument, "temperature must be > 0");
  std::vector<double> out(dist.begin(), dist.end());
  if (tau == 1.0) return out;
  double peak = 0;
  for (double p : dist) peak = std::max(peak, p);
  if (peak <= 0) return out;
  const double log_peak = std::log(peak);
  for (auto& p : out)
    if (p > 0) p = std::exp((std::log(p) - log_peak) / tau);
  detail::normalize(out);
  return out;
}

// Keeps the smallest highest-probability prefix reaching mass p (ties to the
// lower index) and renormalizes.
inline std::vector<double> nucleus_filter(std::span<const double> dist, double p) {
  std::vector<double> out(dist.begin(), dist.end());
  if (p >= 1.0) return out;
  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  double cum = 0;
  std::size_t keep = 0;
  while (keep < order.size() && cum < p) cum += dist[order[keep++]];
  for (std::size_t k = keep; k < order.size(); ++k) out[order[k]] = 0.0;
  detail::normalize(out);
  return out;
}

// Multiplier per expansion ID; 1 where no rule matches.
inline std::vector<double> style_weights(const SymbolTable& symbols, const std::vector<StyleRule>& rules) {
  std::vector<double> w(symbols.num_expansions(), 1.0);
  for (std::size_t id = 0; id < w.size(); ++id)
    for (const auto& r : rules)
      if (symbols.expansion(static_cast<int>(id)).find(r.label) != std::string::npos) w[id] *= r.factor;
  return w;
}

inline std::vector<double> style_reweight(std::span<const double> exp_dist, std::span<const double> weights) {
  std::vector<double> out(exp_dist.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = exp_dist[i] * weights[i];
  detail::normalize(out);
  return out;
}

inline std::vector<double> style_reweight(std::span<const double> exp_dist, const SymbolTable& symbols,
                                          const std::vector<StyleRule>& rules) {
  const auto w = style_weights(symbols, rules);
  return style_reweight(exp_dist, w);
}

inline int sample_index(std::span<const double> dist, std::mt19937_64& rng) {
  const double u = uniform01(rng);
  double cum = 0;
  int last = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0) continue;
    cum += dist[i];
    last = static_cast<int>(i);
    if (u < cum) return last;
  }
  return last;
}

struct Generated {
  std::vector<std::string> sentence;
  DepTree tree;
  int iterations = 0;
  std::vector<LevelTransition> transitions;
};

// Iterative decoder. Per position: style reweight, temperature, nucleus,
// sample; the expansion is drawn first so conditioning predictors see it.
class Generator {
 public:
  Generator(const Predictor& predictor, GenerationSettings settings)
      : predictor_(predictor), settings_(std::move(settings)) {
    settings_.validate();
    const auto& st = predictor_.symbols();
    weights_ = style_weights(st, settings_.style);
    const auto head = st.expansion_id("[HEAD]");
    if (!head) throw Error(Errc::invalid_argument, "expansion vocabulary lacks [HEAD]");
    head_id_ = *head;
  }

  Generated generate_one(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const auto& st = predictor_.symbols();
    std::vector<LevelTransition> transitions;
    LevelInput input = LevelInput::initial();
    for (int iter = 1;; ++iter) {
      const bool last = iter >= settings_.max_iterations;
      auto preds = predictor_.predict(input);
      if (preds.size() != input.size()) throw Error(Errc::predictor_failure, "prediction count differs from input length");

      std::vector<int> exp_ids(input.size(), SymbolTable::kExpPadId);
      for (std::size_t i = 0; i < input.size(); ++i) {
        if (!input.i_tok[i].placeholder) continue;
        if (last) {
          exp_ids[i] = head_id_;
          continue;
        }
        auto dist = preds[i].exp_dist;
        if (dist.size() != st.num_expansions()) throw Error(Errc::predictor_failure, "expansion distribution has wrong size");
        dist[SymbolTable::kExpPadId] = 0;
        dist = style_reweight(dist, weights_);
        exp_ids[i] = draw(dist, rng, settings_.temperature_on_expansions ? settings_.temperature : 1.0);
      }

      // A level that would outgrow the predictor ends the tree instead.
      if (const std::size_t cap = predictor_.max_input_length(); cap && !last) {
        std::size_t next = 0;
        for (std::size_t i = 0; i < input.size(); ++i) {
          const auto& pat = st.pattern(exp_ids[i]);
          next += input.i_tok[i].placeholder ? 1 + pat.left.size() + pat.right.size() : 1;
        }
        if (next > cap)
          for (std::size_t i = 0; i < input.size(); ++i)
            if (input.i_tok[i].placeholder) exp_ids[i] = head_id_;
      }

      std::vector<std::vector<double>> tok_dists;
      if (predictor_.conditions_on_expansion()) {
        tok_dists = predictor_.predict_tokens(input, exp_ids);
      } else {
        for (auto& p : preds) tok_dists.push_back(std::move(p.token_dist));
      }
      if (tok_dists.size() != input.size()) throw Error(Errc::predictor_failure, "token prediction count differs");

      LevelTransition t;
      t.input = input;
      for (std::size_t i = 0; i < input.size(); ++i) {
        if (!input.i_tok[i].placeholder) {
          t.o_tok.emplace_back();
          t.o_exp.emplace_back();
          continue;
        }
        auto& dist = tok_dists[i];
        if (dist.size() != st.num_tokens()) throw Error(Errc::predictor_failure, "token distribution has wrong size");
        for (std::size_t id = 0; id < dist.size(); ++id)
          if (!st.is_terminal(static_cast<int>(id))) dist[id] = 0;
        const int tok = draw(dist, rng, settings_.temperature);
        t.o_tok.emplace_back(st.token(tok));
        t.o_exp.emplace_back(st.pattern(exp_ids[i]));
      }
      input = expand(t);
      transitions.push_back(std::move(t));
      if (input.finished()) break;
    }
    auto r = replay(transitions);
    const int iters = static_cast<int>(transitions.size());
    return Generated{std::move(r.sentence), std::move(r.tree), iters, std::move(transitions)};
  }

  // Sentence k uses seed + k, so the result does not depend on `workers`.
  std::vector<Generated> generate(std::size_t count, std::size_t workers = 1) const {
    std::vector<std::optional<Generated>> slots(count);
    workers = std::max<std::size_t>(1, std::min(workers, count));
    auto run = [&](std::size_t w) {
      for (std::size_t k = w; k < count; k += workers) slots[k] = generate_one(settings_.seed + k);
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::exception_ptr> errors(workers);
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            run(w);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    std::vector<Generated> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
  }

 private:
  int draw(std::vector<double>& dist, std::mt19937_64& rng, double tau) const {
    double mass = 0;
    for (double p : dist) {
      if (!(p >= 0) || !std::isfinite(p)) throw Error(Errc::predictor_failure, "distribution has a negative or non-finite entry");
      mass += p;
    }
    if (!(mass > 0)) throw Error(Errc::zero_mass_after_masking, "no probability mass left after masking");
    detail::normalize(dist);
    dist = temperature_scale(dist, tau);
    dist = nucleus_filter(dist, settings_.top_p);
    return sample_index(dist, rng);
  }

  const Predictor& predictor_;
  GenerationSettings settings_;
  std::vector<double> weights_;
  int head_id_ = 0;
};

inline std::vector<Generated> generate(const Predictor& predictor, const GenerationSettings& settings,
                                       std::size_t count, std::size_t workers = 1) {
  return Generator(predictor, settings).generate(count, workers);
}

}  // namespace itexp
