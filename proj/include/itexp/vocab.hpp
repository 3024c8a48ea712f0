#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "itexp/error.hpp"
#include "itexp/treebank.hpp"

namespace itexp {

inline constexpr std::string_view kHeadMarker = "HEAD";
inline constexpr std::string_view kPad = "[pad]";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kRootSymbol = "[ROOT]";

// Left and right dependent labels around a head, each in surface order.
struct ExpansionPattern {
  std::vector<std::string> left;
  std::vector<std::string> right;

  bool is_leaf() const noexcept { return left.empty() && right.empty(); }

  std::string render() const {
    std::string out = "[";
    for (const auto& l : left) out += l + "-";
    out += kHeadMarker;
    for (const auto& r : right) out += "-" + r;
    out += "]";
    return out;
  }

  friend bool operator==(const ExpansionPattern&, const ExpansionPattern&) = default;
};

inline ExpansionPattern compose_expansion(const DepTree& tree, int node) {
  ExpansionPattern p;
  for (const auto& t : tree.tokens()) {
    if (t.head != node) continue;
    (t.index < node ? p.left : p.right).push_back(t.deprel);
  }
  return p;
}

inline ExpansionPattern parse_expansion(std::string_view token) {
  const std::string text(token);
  if (token.size() < 2 || token.front() != '[' || token.back() != ']')
    throw Error(Errc::malformed_pattern, "not bracketed: " + text);
  const auto body = token.substr(1, token.size() - 2);
  ExpansionPattern p;
  bool seen_head = false;
  std::size_t start = 0;
  while (true) {
    const auto dash = body.find('-', start);
    const auto part = body.substr(start, dash == body.npos ? body.npos : dash - start);
    if (part.empty()) throw Error(Errc::malformed_pattern, "empty component in " + text);
    if (part == kHeadMarker) {
      if (seen_head) throw Error(Errc::malformed_pattern, "two HEAD components in " + text);
      seen_head = true;
    } else {
      (seen_head ? p.right : p.left).emplace_back(part);
    }
    if (dash == body.npos) break;
    start = dash + 1;
  }
  if (!seen_head) throw Error(Errc::malformed_pattern, "no HEAD component in " + text);
  return p;
}

// Input-side symbol for a not-yet-generated dependent.
inline std::string placeholder_symbol(std::string_view label) {
  if (label == kRootLabel) return std::string(kRootSymbol);
  return "[" + std::string(label) + "]";
}

// Token IDs share one space for terminals and dependency placeholders:
//   0 [pad], 1 <unk>, 2 [ROOT], then terminals, then the other placeholders.
// Expansion IDs live in their own space with 0 = [pad].
class SymbolTable {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr int kRootId = 2;
  static constexpr int kExpPadId = 0;

  struct Entry {
    std::string symbol;
    long count = 0;
  };

  SymbolTable() { rebuild({}, {}, {}, 0, 0); }

  // Entries must already be in ID order (reserved entries excluded).
  static SymbolTable from_entries(std::vector<Entry> terminals, std::vector<Entry> labels,
                                  std::vector<Entry> expansions, long unk_count, long root_count) {
    SymbolTable t;
    t.rebuild(std::move(terminals), std::move(labels), std::move(expansions), unk_count, root_count);
    return t;
  }

  std::size_t num_tokens() const noexcept { return tokens_.size(); }
  std::size_t num_expansions() const noexcept { return expansions_.size(); }
  std::size_t num_terminals() const noexcept { return num_terminals_; }

  const std::string& token(int id) const { return tokens_.at(id).symbol; }
  const std::string& expansion(int id) const { return expansions_.at(id).symbol; }
  const ExpansionPattern& pattern(int id) const { return patterns_.at(id); }
  long token_count(int id) const { return tokens_.at(id).count; }
  long expansion_count(int id) const { return expansions_.at(id).count; }

  // Terminal ID, or <unk> when the form is not in the vocabulary.
  int terminal_id(std::string_view form) const {
    auto it = terminal_ids_.find(std::string(form));
    return it == terminal_ids_.end() ? kUnkId : it->second;
  }
  bool has_terminal(std::string_view form) const { return terminal_ids_.count(std::string(form)) != 0; }

  std::optional<int> placeholder_id(std::string_view label) const {
    auto it = label_ids_.find(std::string(label));
    if (it == label_ids_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<int> expansion_id(std::string_view rendered) const {
    auto it = expansion_ids_.find(std::string(rendered));
    if (it == expansion_ids_.end()) return std::nullopt;
    return it->second;
  }

  bool is_placeholder(int id) const noexcept {
    return id == kRootId || id >= static_cast<int>(3 + num_terminals_);
  }
  bool is_terminal(int id) const noexcept {
    return id >= 3 && id < static_cast<int>(3 + num_terminals_);
  }

  // Relation label of a placeholder ID ("root" for [ROOT]).
  const std::string& label(int id) const { return labels_.at(id); }

  // Dependency-placeholder symbols, [ROOT] first.
  std::vector<std::string> placeholders() const {
    std::vector<std::string> out{std::string(kRootSymbol)};
    for (std::size_t id = 3 + num_terminals_; id < tokens_.size(); ++id) out.push_back(tokens_[id].symbol);
    return out;
  }

  const std::vector<Entry>& token_entries() const noexcept { return tokens_; }
  const std::vector<Entry>& expansion_entries() const noexcept { return expansions_; }

  friend bool operator==(const SymbolTable& a, const SymbolTable& b) {
    auto same = [](const std::vector<Entry>& x, const std::vector<Entry>& y) {
      return std::equal(x.begin(), x.end(), y.begin(), y.end(), [](const Entry& p, const Entry& q) {
        return p.symbol == q.symbol && p.count == q.count;
      });
    };
    return a.num_terminals_ == b.num_terminals_ && same(a.tokens_, b.tokens_) &&
           same(a.expansions_, b.expansions_);
  }

 private:
  void rebuild(std::vector<Entry> terminals, std::vector<Entry> labels, std::vector<Entry> expansions,
               long unk_count, long root_count) {
    tokens_.clear();
    tokens_.push_back({std::string(kPad), 0});
    tokens_.push_back({std::string(kUnk), unk_count});
    tokens_.push_back({std::string(kRootSymbol), root_count});
    num_terminals_ = terminals.size();
    terminal_ids_.clear();
    label_ids_.clear();
    labels_.assign(3, std::string{});
    labels_[kRootId] = std::string(kRootLabel);
    label_ids_[std::string(kRootLabel)] = kRootId;
    for (auto& e : terminals) {
      terminal_ids_.emplace(e.symbol, static_cast<int>(tokens_.size()));
      labels_.emplace_back();
      tokens_.push_back(std::move(e));
    }
    for (auto& e : labels) {
      if (e.symbol == kRootLabel) {
        tokens_[kRootId].count += e.count;
        continue;
      }
      label_ids_.emplace(e.symbol, static_cast<int>(tokens_.size()));
      labels_.push_back(e.symbol);
      tokens_.push_back({placeholder_symbol(e.symbol), e.count});
    }
    expansions_.clear();
    patterns_.clear();
    expansion_ids_.clear();
    expansions_.push_back({std::string(kPad), 0});
    patterns_.emplace_back();
    for (auto& e : expansions) {
      patterns_.push_back(parse_expansion(e.symbol));
      expansion_ids_.emplace(e.symbol, static_cast<int>(expansions_.size()));
      expansions_.push_back(std::move(e));
    }
  }

  std::vector<Entry> tokens_;
  std::vector<std::string> labels_;
  std::size_t num_terminals_ = 0;
  std::unordered_map<std::string, int> terminal_ids_;
  std::unordered_map<std::string, int> label_ids_;
  std::vector<Entry> expansions_;
  std::vector<ExpansionPattern> patterns_;
  std::unordered_map<std::string, int> expansion_ids_;
};

namespace detail {

// Frequency descending, then symbol ascending.
inline std::vector<SymbolTable::Entry> rank_entries(const std::map<std::string, long>& counts) {
  std::vector<SymbolTable::Entry> out;
  out.reserve(counts.size());
  for (const auto& [s, c] : counts) out.push_back({s, c});
  std::stable_sort(out.begin(), out.end(),
                   [](const SymbolTable::Entry& a, const SymbolTable::Entry& b) { return a.count > b.count; });
  return out;
}

}  // namespace detail

// Terminal threshold applies to terminals only; every observed expansion
// pattern and relation label gets an entry.
inline SymbolTable induce_vocabs(const Corpus& corpus, long min_freq = 1) {
  std::map<std::string, long> forms, labels, patterns;
  long roots = 0;
  for (const auto& tree : corpus.sentences) {
    for (const auto& t : tree.tokens()) {
      ++forms[t.form];
      if (t.head == kRootHead) ++roots;
      else ++labels[t.deprel];
      ++patterns[compose_expansion(tree, t.index).render()];
    }
  }
  std::vector<SymbolTable::Entry> kept;
  long unk = 0;
  for (auto& e : detail::rank_entries(forms)) {
    if (e.count >= min_freq) kept.push_back(std::move(e));
    else unk += e.count;
  }
  return SymbolTable::from_entries(std::move(kept), detail::rank_entries(labels),
                                   detail::rank_entries(patterns), unk, roots);
}

// ---------------------------------------------------------------------------
// Vocab file: `symbol<TAB>count`, three sections, reserved entries included.

inline void write_vocab(std::ostream& out, const SymbolTable& table) {
  const auto& toks = table.token_entries();
  const std::size_t term_end = 3 + table.num_terminals();
  out << "##terminals\n";
  for (std::size_t i = 0; i < term_end; ++i)
    if (i != SymbolTable::kRootId) out << toks[i].symbol << '\t' << toks[i].count << '\n';
  out << "##dep_placeholders\n";
  out << toks[SymbolTable::kRootId].symbol << '\t' << toks[SymbolTable::kRootId].count << '\n';
  for (std::size_t i = term_end; i < toks.size(); ++i) out << toks[i].symbol << '\t' << toks[i].count << '\n';
  out << "##expansions\n";
  for (const auto& e : table.expansion_entries()) out << e.symbol << '\t' << e.count << '\n';
  if (!out) throw Error(Errc::io_failure, "write failed");
}

inline SymbolTable read_vocab(std::istream& in) {
  enum { none, terminals, deps, exps } section = none;
  std::vector<SymbolTable::Entry> term, lab, exp;
  long unk = 0, root = 0;
  bool saw[3] = {false, false, false};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line == "##terminals") { section = terminals; saw[0] = true; continue; }
    if (line == "##dep_placeholders") { section = deps; saw[1] = true; continue; }
    if (line == "##expansions") { section = exps; saw[2] = true; continue; }
    const auto tab = line.rfind('\t');
    if (section == none || tab == std::string::npos)
      throw Error(Errc::schema_mismatch, "vocab line " + std::to_string(lineno));
    std::string sym = line.substr(0, tab);
    long count = 0;
    try {
      count = std::stol(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw Error(Errc::schema_mismatch, "bad count on vocab line " + std::to_string(lineno));
    }
    switch (section) {
      case terminals:
        if (sym == kPad) break;
        if (sym == kUnk) unk = count;
        else term.push_back({std::move(sym), count});
        break;
      case deps:
        if (sym == kRootSymbol) {
          root = count;
        } else {
          if (sym.size() < 3 || sym.front() != '[' || sym.back() != ']')
            throw Error(Errc::schema_mismatch, "bad placeholder on vocab line " + std::to_string(lineno));
          lab.push_back({sym.substr(1, sym.size() - 2), count});
        }
        break;
      case exps:
        if (sym != kPad) exp.push_back({std::move(sym), count});
        break;
      case none: break;
    }
  }
  if (!saw[0] || !saw[1] || !saw[2]) throw Error(Errc::schema_mismatch, "vocab file is missing a section");
  return SymbolTable::from_entries(std::move(term), std::move(lab), std::move(exp), unk, root);
}

inline void write_vocab_file(const std::string& path, const SymbolTable& table) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  write_vocab(out, table);
}

inline SymbolTable read_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return read_vocab(in);
}

}  // namespace itexp
