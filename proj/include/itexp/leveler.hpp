#pragma once

#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "itexp/error.hpp"
#include "itexp/treebank.hpp"
#include "itexp/vocab.hpp"

namespace itexp {

// One input position: a generated terminal or a dependency placeholder.
struct Symbol {
  std::string text;  // form, or relation label for a placeholder
  bool placeholder = false;

  static Symbol terminal(std::string form) { return {std::move(form), false}; }
  static Symbol dependent(std::string label) { return {std::move(label), true}; }

  std::string render() const { return placeholder ? placeholder_symbol(text) : text; }

  // Inverse of render(); anything bracketed is read as a placeholder.
  static Symbol parse(std::string_view s) {
    if (s.size() >= 3 && s.front() == '[' && s.back() == ']') {
      const auto inner = s.substr(1, s.size() - 2);
      if (s == kRootSymbol) return dependent(std::string(kRootLabel));
      return dependent(std::string(inner));
    }
    return terminal(std::string(s));
  }

  friend bool operator==(const Symbol&, const Symbol&) = default;
};

struct LevelInput {
  std::vector<Symbol> i_tok;
  std::vector<int> heads;  // positions in i_tok, kRootHead for the root

  std::size_t size() const noexcept { return i_tok.size(); }

  bool finished() const {
    for (const auto& s : i_tok)
      if (s.placeholder) return false;
    return true;
  }

  static LevelInput initial() { return {{Symbol::dependent(std::string(kRootLabel))}, {kRootHead}}; }

  friend bool operator==(const LevelInput&, const LevelInput&) = default;
};

// One decoding step. Terminal inputs carry no outputs (nullopt is [pad]).
struct LevelTransition {
  LevelInput input;
  std::vector<std::optional<std::string>> o_tok;
  std::vector<std::optional<ExpansionPattern>> o_exp;

  std::size_t size() const noexcept { return input.size(); }

  friend bool operator==(const LevelTransition&, const LevelTransition&) = default;
};

// Throws on any violated structural invariant of a transition.
inline void check_transition(const LevelTransition& t) {
  const std::size_t n = t.input.i_tok.size();
  if (t.input.heads.size() != n || t.o_tok.size() != n || t.o_exp.size() != n)
    throw Error(Errc::shape_mismatch, "transition sequences differ in length");
  for (std::size_t i = 0; i < n; ++i) {
    const bool ph = t.input.i_tok[i].placeholder;
    if (ph && !t.o_tok[i]) throw Error(Errc::pad_at_placeholder, "[pad] token at placeholder " + std::to_string(i));
    if (ph && !t.o_exp[i]) throw Error(Errc::pad_at_placeholder, "[pad] expansion at placeholder " + std::to_string(i));
    if (!ph && (t.o_tok[i] || t.o_exp[i]))
      throw Error(Errc::shape_mismatch, "output at terminal position " + std::to_string(i));
    const int h = t.input.heads[i];
    if (h == kRootHead) continue;
    if (h < 0 || h >= static_cast<int>(n) || t.input.i_tok[h].placeholder)
      throw Error(Errc::shape_mismatch, "head of position " + std::to_string(i) + " is not a terminal");
  }
}

// Splits a projective tree into depth(tree) transitions. Step k holds nodes
// shallower than k as terminals and nodes at depth k as placeholders.
inline std::vector<LevelTransition> levelize(const DepTree& tree) {
  if (!is_projective(tree)) throw Error(Errc::non_projective_input, "levelize needs a projective tree");
  const auto depth = node_depths(tree);
  int max_depth = 0;
  for (int d : depth) max_depth = std::max(max_depth, d);
  const int n = static_cast<int>(tree.size());

  std::vector<LevelTransition> out;
  out.reserve(max_depth);
  std::vector<int> pos(n, -1);
  for (int k = 1; k <= max_depth; ++k) {
    LevelTransition t;
    int p = 0;
    for (int i = 0; i < n; ++i) pos[i] = depth[i] <= k ? p++ : -1;
    for (int i = 0; i < n; ++i) {
      if (pos[i] < 0) continue;
      const Token& tok = tree[i];
      const bool ph = depth[i] == k;
      const std::string& label = tok.head == kRootHead ? std::string(kRootLabel) : tok.deprel;
      t.input.i_tok.push_back(ph ? Symbol::dependent(label) : Symbol::terminal(tok.form));
      t.input.heads.push_back(tok.head == kRootHead ? kRootHead : pos[tok.head]);
      if (ph) {
        t.o_tok.emplace_back(tok.form);
        t.o_exp.emplace_back(compose_expansion(tree, i));
      } else {
        t.o_tok.emplace_back();
        t.o_exp.emplace_back();
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Builds the next input: every placeholder becomes its left dependents, the
// emitted terminal, then its right dependents.
inline LevelInput expand(const LevelTransition& t) {
  check_transition(t);
  const auto& in = t.input;
  const std::size_t n = in.size();
  std::vector<int> new_pos(n);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (in.i_tok[i].placeholder) {
      new_pos[i] = static_cast<int>(total + t.o_exp[i]->left.size());
      total += t.o_exp[i]->left.size() + 1 + t.o_exp[i]->right.size();
    } else {
      new_pos[i] = static_cast<int>(total);
      ++total;
    }
  }
  LevelInput next;
  next.i_tok.reserve(total);
  next.heads.reserve(total);
  auto remap = [&](int h) { return h == kRootHead ? kRootHead : new_pos[h]; };
  for (std::size_t i = 0; i < n; ++i) {
    if (!in.i_tok[i].placeholder) {
      next.i_tok.push_back(in.i_tok[i]);
      next.heads.push_back(remap(in.heads[i]));
      continue;
    }
    const auto& pat = *t.o_exp[i];
    for (const auto& l : pat.left) {
      next.i_tok.push_back(Symbol::dependent(l));
      next.heads.push_back(new_pos[i]);
    }
    next.i_tok.push_back(Symbol::terminal(*t.o_tok[i]));
    next.heads.push_back(remap(in.heads[i]));
    for (const auto& r : pat.right) {
      next.i_tok.push_back(Symbol::dependent(r));
      next.heads.push_back(new_pos[i]);
    }
  }
  return next;
}

struct Replay {
  std::vector<std::string> sentence;
  DepTree tree;
};

// Rebuilds the sentence and its tree from a chain of transitions starting at
// the initial [ROOT] input.
inline Replay replay(const std::vector<LevelTransition>& transitions) {
  if (transitions.empty()) throw Error(Errc::chain_mismatch, "no transitions");
  if (!(transitions.front().input == LevelInput::initial()))
    throw Error(Errc::chain_mismatch, "first transition does not start from [ROOT]");

  struct Node {
    std::string form;
    std::string deprel;
    int head_node;
  };
  std::vector<Node> nodes;
  // Node id behind every terminal position of the current input.
  std::vector<int> node_at(1, -1);

  LevelInput current = transitions.front().input;
  for (std::size_t step = 0; step < transitions.size(); ++step) {
    const auto& t = transitions[step];
    if (!(t.input == current))
      throw Error(Errc::chain_mismatch, "transition " + std::to_string(step) + " does not follow its predecessor");
    check_transition(t);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!t.input.i_tok[i].placeholder) continue;
      const int h = t.input.heads[i];
      node_at[i] = static_cast<int>(nodes.size());
      nodes.push_back({*t.o_tok[i], t.input.i_tok[i].text, h == kRootHead ? kRootHead : node_at[h]});
    }
    LevelInput next = expand(t);
    std::vector<int> next_at;
    next_at.reserve(next.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!t.input.i_tok[i].placeholder) {
        next_at.push_back(node_at[i]);
        continue;
      }
      next_at.insert(next_at.end(), t.o_exp[i]->left.size(), -1);
      next_at.push_back(node_at[i]);
      next_at.insert(next_at.end(), t.o_exp[i]->right.size(), -1);
    }
    current = std::move(next);
    node_at = std::move(next_at);
  }
  if (!current.finished()) throw Error(Errc::chain_mismatch, "chain ends with unexpanded placeholders");

  std::vector<int> index_of(nodes.size());
  for (std::size_t i = 0; i < node_at.size(); ++i) index_of[node_at[i]] = static_cast<int>(i);
  std::vector<Token> toks(node_at.size());
  std::vector<std::string> sentence;
  for (std::size_t i = 0; i < node_at.size(); ++i) {
    const Node& nd = nodes[node_at[i]];
    toks[i] = Token{static_cast<int>(i), nd.form, nd.deprel,
                    nd.head_node == kRootHead ? kRootHead : index_of[nd.head_node]};
    sentence.push_back(nd.form);
  }
  return Replay{std::move(sentence), DepTree::make(std::move(toks))};
}

// ---------------------------------------------------------------------------
// itexp-levels persistence

inline constexpr std::string_view kLevelsFormat = "itexp-levels";
inline constexpr int kLevelsVersion = 1;

inline nlohmann::ordered_json transition_to_json(const LevelTransition& t, std::size_t sent_id, std::size_t step) {
  using nlohmann::ordered_json;
  ordered_json i_tok = ordered_json::array(), o_tok = ordered_json::array(), o_exp = ordered_json::array();
  for (std::size_t i = 0; i < t.size(); ++i) {
    i_tok.push_back(t.input.i_tok[i].render());
    o_tok.push_back(t.o_tok[i] ? *t.o_tok[i] : std::string(kPad));
    o_exp.push_back(t.o_exp[i] ? t.o_exp[i]->render() : std::string(kPad));
  }
  return ordered_json{{"sent_id", sent_id}, {"step", step},     {"i_tok", std::move(i_tok)},
                      {"heads", t.input.heads}, {"o_tok", std::move(o_tok)}, {"o_exp", std::move(o_exp)}};
}

inline LevelTransition transition_from_json(const nlohmann::json& j) {
  LevelTransition t;
  for (const auto& s : j.at("i_tok")) t.input.i_tok.push_back(Symbol::parse(s.get<std::string>()));
  t.input.heads = j.at("heads").get<std::vector<int>>();
  for (const auto& s : j.at("o_tok")) {
    auto v = s.get<std::string>();
    if (v == kPad) t.o_tok.emplace_back();
    else t.o_tok.emplace_back(std::move(v));
  }
  for (const auto& s : j.at("o_exp")) {
    auto v = s.get<std::string>();
    if (v == kPad) t.o_exp.emplace_back();
    else t.o_exp.emplace_back(parse_expansion(v));
  }
  check_transition(t);
  return t;
}

// One inner vector per sentence.
using LevelCorpus = std::vector<std::vector<LevelTransition>>;

inline void write_levels(std::ostream& out, const LevelCorpus& levels) {
  out << nlohmann::ordered_json{{"format", kLevelsFormat}, {"version", kLevelsVersion}}.dump() << '\n';
  for (std::size_t s = 0; s < levels.size(); ++s)
    for (std::size_t k = 0; k < levels[s].size(); ++k) out << transition_to_json(levels[s][k], s, k + 1).dump() << '\n';
  if (!out) throw Error(Errc::io_failure, "write failed");
}

inline LevelCorpus read_levels(std::istream& in) {
  detail::expect_header(in, kLevelsFormat, kLevelsVersion);
  LevelCorpus levels;
  std::string line;
  std::size_t lineno = 1;
  long last_id = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = detail::parse_json_line(line, lineno);
    try {
      const long id = j.at("sent_id").get<long>();
      if (id != last_id) {
        levels.emplace_back();
        last_id = id;
      }
      levels.back().push_back(transition_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::schema_mismatch, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return levels;
}

inline void write_levels_file(const std::string& path, const LevelCorpus& levels) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  write_levels(out, levels);
}

inline LevelCorpus read_levels_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return read_levels(in);
}

}  // namespace itexp
