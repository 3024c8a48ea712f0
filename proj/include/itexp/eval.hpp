#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "itexp/error.hpp"
#include "itexp/generate.hpp"
#include "itexp/transform.hpp"
#include "itexp/treebank.hpp"

namespace itexp {

using Sentence = std::vector<std::string>;

// ---------------------------------------------------------------------------
// BLEU

// Reference side of corpus BLEU: per-order maximum n-gram counts over all
// references plus the sorted reference lengths.
class BleuReferences {
 public:
  BleuReferences(const std::vector<Sentence>& refs, int max_n) : max_n_(max_n), max_counts_(max_n) {
    if (max_n < 1) throw Error(Errc::invalid_argument, "max_n must be >= 1");
    for (const auto& r : refs) add(r);
    std::sort(lengths_.begin(), lengths_.end());
  }

  int max_n() const noexcept { return max_n_; }

  int count(int n, const std::string& gram) const {
    const auto& m = max_counts_[n - 1];
    auto it = m.find(gram);
    return it == m.end() ? 0 : it->second;
  }

  // Closest reference length; ties go to the shorter one.
  std::size_t closest_length(std::size_t c) const {
    if (lengths_.empty()) return 0;
    auto it = std::lower_bound(lengths_.begin(), lengths_.end(), c);
    if (it == lengths_.end()) return lengths_.back();
    if (it == lengths_.begin()) return *it;
    const std::size_t hi = *it, lo = *(it - 1);
    return (c - lo <= hi - c) ? lo : hi;
  }

  static std::unordered_map<std::string, int> ngrams(const Sentence& s, int n) {
    std::unordered_map<std::string, int> out;
    if (static_cast<int>(s.size()) < n) return out;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      std::string key = s[i];
      for (int k = 1; k < n; ++k) {
        key += '\x1f';
        key += s[i + k];
      }
      ++out[key];
    }
    return out;
  }

 private:
  void add(const Sentence& r) {
    lengths_.push_back(r.size());
    for (int n = 1; n <= max_n_; ++n)
      for (const auto& [g, c] : ngrams(r, n)) {
        int& m = max_counts_[n - 1][g];
        m = std::max(m, c);
      }
  }

  int max_n_;
  std::vector<std::unordered_map<std::string, int>> max_counts_;
  std::vector<std::size_t> lengths_;
};

namespace detail {

inline double bleu_from_counts(const std::vector<double>& matched, const std::vector<double>& total, double c_len,
                               double r_len) {
  const std::size_t max_n = matched.size();
  double log_sum = 0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (matched[n] == 0) return 0.0;
    log_sum += std::log(matched[n] / total[n]);
  }
  const double bp = c_len < r_len ? std::exp(1.0 - r_len / c_len) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

}  // namespace detail

// Corpus BLEU without smoothing: clipped n-gram precisions pooled over all
// candidates, uniform geometric mean, brevity penalty on pooled lengths.
inline double bleu(const std::vector<Sentence>& candidates, const BleuReferences& refs) {
  if (candidates.empty()) throw Error(Errc::invalid_argument, "bleu needs at least one candidate");
  const int max_n = refs.max_n();
  std::vector<double> matched(max_n, 0), total(max_n, 0);
  double c_len = 0, r_len = 0;
  for (const auto& c : candidates) {
    c_len += static_cast<double>(c.size());
    r_len += static_cast<double>(refs.closest_length(c.size()));
    for (int n = 1; n <= max_n; ++n)
      for (const auto& [g, cnt] : BleuReferences::ngrams(c, n)) {
        matched[n - 1] += std::min(cnt, refs.count(n, g));
        total[n - 1] += cnt;
      }
  }
  return detail::bleu_from_counts(matched, total, c_len, r_len);
}

inline double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int max_n) {
  return bleu(candidates, BleuReferences(references, max_n));
}

// Per-sentence BLEU of each candidate against all the others. One pass:
// for every n-gram the two largest per-candidate counts are kept, which is
// enough to clip against "everyone but me".
inline std::vector<double> self_bleu_scores(const std::vector<Sentence>& candidates, int max_n) {
  if (candidates.size() < 2) throw Error(Errc::invalid_argument, "self-BLEU needs at least two candidates");
  if (max_n < 1) throw Error(Errc::invalid_argument, "max_n must be >= 1");
  struct Top {
    int first = 0, owner = -1, second = 0;
  };
  const std::size_t m = candidates.size();
  std::vector<std::vector<std::unordered_map<std::string, int>>> grams(m);
  std::vector<std::unordered_map<std::string, Top>> tops(max_n);
  std::map<std::size_t, int> lengths;
  for (std::size_t i = 0; i < m; ++i) {
    ++lengths[candidates[i].size()];
    for (int n = 1; n <= max_n; ++n) {
      grams[i].push_back(BleuReferences::ngrams(candidates[i], n));
      for (const auto& [g, c] : grams[i].back()) {
        Top& t = tops[n - 1][g];
        if (c > t.first) {
          t.second = t.first;
          t.first = c;
          t.owner = static_cast<int>(i);
        } else if (c > t.second) {
          t.second = c;
        }
      }
    }
  }
  auto closest_other = [&](std::size_t len) {
    if (--lengths[len] == 0) lengths.erase(len);
    auto hi = lengths.lower_bound(len);
    std::size_t r;
    if (hi == lengths.end()) r = std::prev(hi)->first;
    else if (hi == lengths.begin()) r = hi->first;
    else r = (len - std::prev(hi)->first <= hi->first - len) ? std::prev(hi)->first : hi->first;
    ++lengths[len];
    return r;
  };
  std::vector<double> out;
  out.reserve(m);
  std::vector<double> matched(max_n), total(max_n);
  for (std::size_t i = 0; i < m; ++i) {
    for (int n = 0; n < max_n; ++n) {
      matched[n] = total[n] = 0;
      for (const auto& [g, c] : grams[i][n]) {
        const Top& t = tops[n].at(g);
        matched[n] += std::min(c, t.owner == static_cast<int>(i) ? t.second : t.first);
        total[n] += c;
      }
    }
    const double len = static_cast<double>(candidates[i].size());
    out.push_back(detail::bleu_from_counts(matched, total, len, static_cast<double>(closest_other(candidates[i].size()))));
  }
  return out;
}

inline double self_bleu(const std::vector<Sentence>& candidates, int max_n) {
  const auto s = self_bleu_scores(candidates, max_n);
  double sum = 0;
  for (double v : s) sum += v;
  return sum / static_cast<double>(s.size());
}

// ---------------------------------------------------------------------------
// Temperature sweep

struct SweepRow {
  double temperature = 0;
  double bleu_mean = 0, bleu_std = 0;
  double self_bleu_mean = 0, self_bleu_std = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
};

struct SweepOptions {
  std::vector<double> temperatures;
  std::size_t samples = 5;
  std::size_t sentences_per_sample = 100;
  int max_n = 5;
  std::size_t workers = 1;
};

namespace detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace detail

// Sample s of every temperature uses seeds base + s * sentences_per_sample + k,
// so temperatures are compared on common random numbers.
inline SweepReport sweep(const Predictor& predictor, const GenerationSettings& base, const SweepOptions& opt,
                         const std::vector<Sentence>& validation) {
  if (opt.samples == 0 || opt.sentences_per_sample < 2)
    throw Error(Errc::invalid_argument, "sweep needs >= 1 sample of >= 2 sentences");
  const BleuReferences refs(validation, opt.max_n);
  SweepReport report;
  for (double tau : opt.temperatures) {
    std::vector<double> b, sb;
    for (std::size_t s = 0; s < opt.samples; ++s) {
      GenerationSettings gs = base;
      gs.temperature = tau;
      gs.seed = base.seed + s * opt.sentences_per_sample;
      std::vector<Sentence> cands;
      for (auto& g : generate(predictor, gs, opt.sentences_per_sample, opt.workers))
        cands.push_back(merge_subwords(g.sentence));
      b.push_back(bleu(cands, refs));
      sb.push_back(self_bleu(cands, opt.max_n));
    }
    SweepRow row;
    row.temperature = tau;
    detail::mean_std(b, row.bleu_mean, row.bleu_std);
    detail::mean_std(sb, row.self_bleu_mean, row.self_bleu_std);
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Decoding-step ratios

// Smallest depth of a binary tree holding n nodes: ceil(log2(n + 1)).
inline int ideal_depth(std::size_t n) {
  int d = 0;
  std::uint64_t cap = 0;
  while (cap < n) {
    cap = cap * 2 + 1;
    ++d;
  }
  return d;
}

struct SpeedupRow {
  std::size_t length = 0;
  int natural = 0, binarized = 0, ideal = 0;
  double natural_ratio() const { return static_cast<double>(natural) / static_cast<double>(length); }
  double binarized_ratio() const { return static_cast<double>(binarized) / static_cast<double>(length); }
  double ideal_ratio() const { return static_cast<double>(ideal) / static_cast<double>(length); }
};

struct HistogramBin {
  double low = 0, high = 0;
  std::size_t natural = 0, binarized = 0, ideal = 0;
};

struct SpeedupReport {
  std::vector<SpeedupRow> rows;
  std::vector<HistogramBin> histogram;
  double mean_length = 0;
  double mean_natural = 0, mean_binarized = 0, mean_ideal = 0;
};

inline SpeedupReport speedup_stats(const Corpus& corpus, std::size_t bins = 20) {
  SpeedupReport rep;
  rep.histogram.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    rep.histogram[b].low = static_cast<double>(b) / static_cast<double>(bins);
    rep.histogram[b].high = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  auto bin_of = [&](double r) { return std::min(bins - 1, static_cast<std::size_t>(r * static_cast<double>(bins))); };
  for (const auto& t : corpus.sentences) {
    SpeedupRow row;
    row.length = t.size();
    row.natural = depth(t);
    row.binarized = depth(binarize(t));
    row.ideal = ideal_depth(t.size());
    rep.mean_length += static_cast<double>(row.length);
    rep.mean_natural += row.natural_ratio();
    rep.mean_binarized += row.binarized_ratio();
    rep.mean_ideal += row.ideal_ratio();
    ++rep.histogram[bin_of(row.natural_ratio())].natural;
    ++rep.histogram[bin_of(row.binarized_ratio())].binarized;
    ++rep.histogram[bin_of(row.ideal_ratio())].ideal;
    rep.rows.push_back(row);
  }
  if (!rep.rows.empty()) {
    const auto n = static_cast<double>(rep.rows.size());
    rep.mean_length /= n;
    rep.mean_natural /= n;
    rep.mean_binarized /= n;
    rep.mean_ideal /= n;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Style

// Mean number of tokens per tree attached through an amod-like relation.
inline double adjective_rate(const std::vector<DepTree>& trees, std::string_view label = "amod") {
  if (trees.empty()) return 0.0;
  std::size_t count = 0;
  for (const auto& t : trees)
    for (const auto& tok : t.tokens())
      if (tok.deprel.find(label) != std::string::npos) ++count;
  return static_cast<double>(count) / static_cast<double>(trees.size());
}

}  // namespace itexp
