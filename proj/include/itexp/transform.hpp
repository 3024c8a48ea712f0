#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "itexp/error.hpp"
#include "itexp/treebank.hpp"

namespace itexp {

// ---------------------------------------------------------------------------
// Binarization

// Rewrites the tree so every node has at most one left and one right
// dependent. The earliest same-side sibling stays on the head; each later
// sibling becomes the right dependent of the one before it. Labels and
// surface order are untouched.
inline DepTree binarize(const DepTree& tree) {
  if (!is_projective(tree)) throw Error(Errc::non_projective_input, "binarize needs a projective tree");
  const int n = static_cast<int>(tree.size());
  std::vector<int> head(n);
  for (int i = 0; i < n; ++i) head[i] = tree[i].head;
  auto kids = tree.children();

  std::deque<int> queue{tree.root()};
  while (!queue.empty()) {
    const int h = queue.front();
    queue.pop_front();
    std::vector<int> left, right;
    for (int c : kids[h]) (c < h ? left : right).push_back(c);
    std::sort(left.begin(), left.end());
    std::sort(right.begin(), right.end());
    for (auto* side : {&left, &right}) {
      for (std::size_t i = 1; i < side->size(); ++i) {
        const int prev = (*side)[i - 1], cur = (*side)[i];
        head[cur] = prev;
        auto& pk = kids[prev];
        pk.insert(std::upper_bound(pk.begin(), pk.end(), cur), cur);
      }
    }
    kids[h].clear();
    if (!left.empty()) kids[h].push_back(left.front());
    if (!right.empty()) kids[h].push_back(right.front());
    for (int c : kids[h]) queue.push_back(c);
  }

  std::vector<Token> toks = tree.tokens();
  for (int i = 0; i < n; ++i) toks[i].head = head[i];
  return DepTree::make(std::move(toks));
}

// ---------------------------------------------------------------------------
// Byte-pair encoding

// Splits a UTF-8 string into code points; invalid lead bytes are kept as
// single-byte symbols.
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

using MergeRule = std::pair<std::string, std::string>;

class BpeMerges {
 public:
  static constexpr std::string_view kEndOfWord = "</w>";
  static constexpr std::string_view kContinuation = "@@";

  BpeMerges() = default;
  explicit BpeMerges(std::vector<MergeRule> rules) : rules_(std::move(rules)) {
    for (std::size_t r = 0; r < rules_.size(); ++r)
      rank_.emplace(key(rules_[r].first, rules_[r].second), static_cast<int>(r));
  }

  const std::vector<MergeRule>& rules() const noexcept { return rules_; }
  std::size_t size() const noexcept { return rules_.size(); }

  // Symbols of `word` after applying every rule in priority order. The last
  // symbol carries the end-of-word marker.
  std::vector<std::string> symbols(std::string_view word) const {
    auto syms = utf8_chars(word);
    if (syms.empty()) return syms;
    syms.back() += kEndOfWord;
    while (syms.size() > 1) {
      int best = std::numeric_limits<int>::max();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find(key(syms[i], syms[i + 1]));
        if (it != rank_.end()) best = std::min(best, it->second);
      }
      if (best == std::numeric_limits<int>::max()) break;
      const auto& [a, b] = rules_[best];
      std::vector<std::string> merged;
      merged.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          merged.push_back(a + b);
          ++i;
        } else {
          merged.push_back(std::move(syms[i]));
        }
      }
      syms = std::move(merged);
    }
    return syms;
  }

  // Surface pieces: end marker stripped, continuation marker on all but the last.
  std::vector<std::string> segment(std::string_view word) const {
    auto pieces = symbols(word);
    if (pieces.empty()) return {std::string(word)};
    for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pieces[i] += kContinuation;
    auto& last = pieces.back();
    last.erase(last.size() - kEndOfWord.size());
    return pieces;
  }

  friend bool operator==(const BpeMerges& a, const BpeMerges& b) { return a.rules_ == b.rules_; }

 private:
  static std::string key(const std::string& a, const std::string& b) {
    std::string k;
    k.reserve(a.size() + b.size() + 1);
    k += a;
    k += '\x1f';
    k += b;
    return k;
  }

  std::vector<MergeRule> rules_;
  std::unordered_map<std::string, int> rank_;
};

// Greedy most-frequent-pair learning over word types of the corpus. Ties go
// to the lexicographically smallest pair. Stops early when no pair is left.
inline BpeMerges learn_bpe(const Corpus& corpus, std::size_t num_merges) {
  if (corpus.sentences.empty()) throw Error(Errc::empty_corpus, "learn_bpe needs a non-empty corpus");
  std::map<std::string, long> type_counts;
  for (const auto& s : corpus.sentences)
    for (const auto& t : s.tokens()) ++type_counts[t.form];

  struct Word {
    std::vector<std::string> syms;
    long count;
  };
  std::vector<Word> words;
  words.reserve(type_counts.size());
  for (const auto& [form, count] : type_counts) {
    auto syms = utf8_chars(form);
    if (syms.empty()) continue;
    syms.back() += BpeMerges::kEndOfWord;
    words.push_back({std::move(syms), count});
  }

  std::map<MergeRule, long> pair_count;
  std::map<MergeRule, std::set<std::size_t>> where;
  auto add_pairs = [&](std::size_t w, long sign) {
    const auto& syms = words[w].syms;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      MergeRule p{syms[i], syms[i + 1]};
      auto it = pair_count.emplace(p, 0).first;
      it->second += sign * words[w].count;
      if (it->second == 0) pair_count.erase(it);
      if (sign > 0) where[p].insert(w);
    }
  };
  for (std::size_t w = 0; w < words.size(); ++w) add_pairs(w, +1);

  std::vector<MergeRule> rules;
  while (rules.size() < num_merges && !pair_count.empty()) {
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = pair_count.begin();
    for (auto it = pair_count.begin(); it != pair_count.end(); ++it)
      if (it->second > best->second) best = it;
    const MergeRule rule = best->first;
    rules.push_back(rule);

    const auto affected = std::move(where[rule]);
    where.erase(rule);
    for (std::size_t w : affected) {
      auto& syms = words[w].syms;
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        if (syms[i] == rule.first && syms[i + 1] == rule.second) present = true;
      if (!present) continue;
      add_pairs(w, -1);
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == rule.first && syms[i + 1] == rule.second) {
          merged.push_back(rule.first + rule.second);
          ++i;
        } else {
          merged.push_back(std::move(syms[i]));
        }
      }
      syms = std::move(merged);
      add_pairs(w, +1);
    }
    pair_count.erase(rule);
  }
  return BpeMerges(std::move(rules));
}

// Where dependents of a split word go. `last` moves every dependent to the
// last piece; `split` keeps left dependents on the first piece, which is the
// only placement that stays projective for a non-root word with left
// dependents.
enum class SubwordAttach { last, split };

inline constexpr std::string_view kSubwordLabel = "subword";

inline DepTree apply_subword(const DepTree& tree, const BpeMerges& merges,
                             SubwordAttach attach = SubwordAttach::last) {
  const int n = static_cast<int>(tree.size());
  std::vector<std::vector<std::string>> pieces(n);
  std::vector<int> first(n), last(n);
  int next = 0;
  for (int i = 0; i < n; ++i) {
    pieces[i] = merges.segment(tree[i].form);
    first[i] = next;
    next += static_cast<int>(pieces[i].size());
    last[i] = next - 1;
  }

  std::vector<Token> out;
  out.reserve(next);
  for (int i = 0; i < n; ++i) {
    const Token& t = tree[i];
    for (std::size_t p = 0; p < pieces[i].size(); ++p) {
      Token nt;
      nt.index = static_cast<int>(out.size());
      nt.form = pieces[i][p];
      if (p == 0) {
        nt.deprel = t.deprel;
        if (t.head == kRootHead) nt.head = kRootHead;
        else if (attach == SubwordAttach::split && i < t.head) nt.head = first[t.head];
        else nt.head = last[t.head];
      } else {
        nt.deprel = std::string(kSubwordLabel);
        nt.head = nt.index - 1;
      }
      out.push_back(std::move(nt));
    }
  }
  return DepTree::make(std::move(out));
}

// Joins continuation pieces back into words.
inline std::vector<std::string> merge_subwords(const std::vector<std::string>& forms) {
  std::vector<std::string> words;
  std::string pending;
  bool open = false;
  for (const auto& f : forms) {
    const bool cont = f.size() >= BpeMerges::kContinuation.size() &&
                      f.compare(f.size() - BpeMerges::kContinuation.size(),
                                BpeMerges::kContinuation.size(), BpeMerges::kContinuation) == 0;
    if (cont) {
      pending += f.substr(0, f.size() - BpeMerges::kContinuation.size());
      open = true;
    } else {
      words.push_back(pending + f);
      pending.clear();
      open = false;
    }
  }
  if (open) words.push_back(pending);
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

inline std::string detokenize(const std::vector<std::string>& forms) {
  return join_words(merge_subwords(forms));
}

// ---------------------------------------------------------------------------
// Merge-rules file

inline constexpr std::string_view kBpeHeader = "#version: itexp-bpe 1";

inline void write_merges(std::ostream& out, const BpeMerges& merges) {
  out << kBpeHeader << '\n';
  for (const auto& [a, b] : merges.rules()) out << a << ' ' << b << '\n';
  if (!out) throw Error(Errc::io_failure, "write failed");
}

inline BpeMerges read_merges(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kBpeHeader)
    throw Error(Errc::schema_mismatch, "expected merge file header '" + std::string(kBpeHeader) + "'");
  std::vector<MergeRule> rules;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
        line.find(' ', sp + 1) != std::string::npos)
      throw Error(Errc::schema_mismatch, "bad merge rule on line " + std::to_string(lineno));
    rules.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeMerges(std::move(rules));
}

inline void write_merges_file(const std::string& path, const BpeMerges& merges) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  write_merges(out, merges);
}

inline BpeMerges read_merges_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return read_merges(in);
}

}  // namespace itexp
