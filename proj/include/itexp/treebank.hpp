#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "itexp/error.hpp"

namespace itexp {

// Head value of the root token. Never a valid index.
inline constexpr int kRootHead = -1;

// Relation label carried by the root token after ingestion.
inline constexpr std::string_view kRootLabel = "root";

struct Token {
  int index = 0;
  std::string form;
  std::string deprel;
  int head = kRootHead;

  friend bool operator==(const Token&, const Token&) = default;
};

// A validated single-rooted dependency tree over 0-based token indices.
class DepTree {
 public:
  // Validates index contiguity, a single root, head range and acyclicity.
  static DepTree make(std::vector<Token> tokens) {
    if (tokens.empty()) throw Error(Errc::malformed_tree, "tree has no tokens");
    const int n = static_cast<int>(tokens.size());
    int root = kRootHead;
    for (int i = 0; i < n; ++i) {
      const Token& t = tokens[i];
      if (t.index != i) throw Error(Errc::malformed_tree, "token indices are not contiguous from 0");
      if (t.head == kRootHead) {
        if (root != kRootHead) throw Error(Errc::malformed_tree, "more than one root");
        root = i;
      } else if (t.head < 0 || t.head >= n) {
        throw Error(Errc::malformed_tree, "head index out of range at token " + std::to_string(i));
      } else if (t.head == i) {
        throw Error(Errc::cyclic_tree, "token " + std::to_string(i) + " heads itself");
      }
    }
    if (root == kRootHead) throw Error(Errc::malformed_tree, "no root token");

    // 0 = unvisited, 1 = on current path, 2 = reaches root
    std::vector<char> state(n, 0);
    state[root] = 2;
    std::vector<int> path;
    for (int i = 0; i < n; ++i) {
      int cur = i;
      path.clear();
      while (state[cur] == 0) {
        state[cur] = 1;
        path.push_back(cur);
        cur = tokens[cur].head;
      }
      if (state[cur] == 1) throw Error(Errc::cyclic_tree, "head links contain a cycle");
      for (int p : path) state[p] = 2;
    }
    DepTree tree;
    tree.tokens_ = std::move(tokens);
    tree.root_ = root;
    return tree;
  }

  const std::vector<Token>& tokens() const noexcept { return tokens_; }
  const Token& operator[](std::size_t i) const { return tokens_[i]; }
  std::size_t size() const noexcept { return tokens_.size(); }
  int root() const noexcept { return root_; }

  std::vector<std::string> forms() const {
    std::vector<std::string> out;
    out.reserve(tokens_.size());
    for (const auto& t : tokens_) out.push_back(t.form);
    return out;
  }

  // Dependents of every node, in surface order.
  std::vector<std::vector<int>> children() const {
    std::vector<std::vector<int>> out(tokens_.size());
    for (const auto& t : tokens_)
      if (t.head != kRootHead) out[t.head].push_back(t.index);
    return out;
  }

  friend bool operator==(const DepTree& a, const DepTree& b) { return a.tokens_ == b.tokens_; }

 private:
  DepTree() = default;

  std::vector<Token> tokens_;
  int root_ = kRootHead;
};

// Depth of every node; the root has depth 1.
inline std::vector<int> node_depths(const DepTree& tree) {
  const int n = static_cast<int>(tree.size());
  std::vector<int> depth(n, 0);
  depth[tree.root()] = 1;
  std::vector<int> path;
  for (int i = 0; i < n; ++i) {
    int cur = i;
    path.clear();
    while (depth[cur] == 0) {
      path.push_back(cur);
      cur = tree[cur].head;
    }
    int d = depth[cur];
    for (auto it = path.rbegin(); it != path.rend(); ++it) depth[*it] = ++d;
  }
  return depth;
}

inline int depth(const DepTree& tree) {
  const auto d = node_depths(tree);
  return *std::max_element(d.begin(), d.end());
}

// True iff every subtree covers a contiguous span of indices.
inline bool is_projective(const DepTree& tree) {
  const int n = static_cast<int>(tree.size());
  std::vector<int> lo(n), hi(n), count(n, 1);
  for (int i = 0; i < n; ++i) lo[i] = hi[i] = i;
  // Children have larger depth than their head, so deepest-first is a post-order.
  const auto depth = node_depths(tree);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return depth[a] > depth[b]; });
  for (int v : order) {
    if (hi[v] - lo[v] + 1 != count[v]) return false;
    const int h = tree[v].head;
    if (h == kRootHead) continue;
    lo[h] = std::min(lo[h], lo[v]);
    hi[h] = std::max(hi[h], hi[v]);
    count[h] += count[v];
  }
  return true;
}

struct Provenance {
  std::string source;
  std::size_t kept = 0;
  std::size_t dropped_nonprojective = 0;
  std::size_t dropped_malformed = 0;
};

struct Corpus {
  std::vector<DepTree> sentences;
  Provenance provenance;
};

namespace detail {

inline bool parse_int(std::string_view s, int& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    cols.push_back(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cols;
}

}  // namespace detail

// Reads CoNLL-U (ID, FORM, HEAD, DEPREL columns). Malformed, cyclic and
// non-projective sentences are dropped and counted in the provenance.
inline Corpus parse_conllu(std::istream& in, std::string source = {}) {
  Corpus corpus;
  corpus.provenance.source = std::move(source);

  std::vector<Token> block;
  bool malformed = false;
  bool any_line = false;

  auto flush = [&] {
    if (!any_line) return;
    if (malformed || block.empty()) {
      ++corpus.provenance.dropped_malformed;
    } else {
      try {
        for (auto& t : block)
          if (t.head == kRootHead) t.deprel = std::string(kRootLabel);
        DepTree tree = DepTree::make(std::move(block));
        if (is_projective(tree)) {
          corpus.sentences.push_back(std::move(tree));
          ++corpus.provenance.kept;
        } else {
          ++corpus.provenance.dropped_nonprojective;
        }
      } catch (const Error&) {
        ++corpus.provenance.dropped_malformed;
      }
    }
    block.clear();
    malformed = false;
    any_line = false;
  };

  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    any_line = true;
    if (line.front() == '#') continue;
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 10) {
      malformed = true;
      continue;
    }
    // Multiword ranges and empty nodes.
    if (cols[0].find('-') != std::string_view::npos || cols[0].find('.') != std::string_view::npos)
      continue;
    int id = 0, head = 0;
    if (!detail::parse_int(cols[0], id) || !detail::parse_int(cols[6], head) || id < 1 || head < 0) {
      malformed = true;
      continue;
    }
    Token t;
    t.index = id - 1;
    t.form = std::string(cols[1]);
    t.head = head == 0 ? kRootHead : head - 1;
    t.deprel = std::string(cols[7]);
    block.push_back(std::move(t));
  }
  flush();
  return corpus;
}

inline Corpus parse_conllu_text(std::string_view text, std::string source = {}) {
  std::istringstream in{std::string(text)};
  return parse_conllu(in, std::move(source));
}

inline Corpus read_conllu_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return parse_conllu(in, path);
}

// ---------------------------------------------------------------------------
// itexp-trees persistence: a header line then one JSON object per sentence.

inline constexpr std::string_view kTreesFormat = "itexp-trees";
inline constexpr int kTreesVersion = 1;

inline void write_trees(std::ostream& out, const Corpus& corpus) {
  using nlohmann::ordered_json;
  out << ordered_json{{"format", kTreesFormat}, {"version", kTreesVersion}}.dump() << '\n';
  for (std::size_t s = 0; s < corpus.sentences.size(); ++s) {
    ordered_json toks = ordered_json::array();
    for (const auto& t : corpus.sentences[s].tokens())
      toks.push_back(ordered_json{{"form", t.form}, {"head", t.head}, {"deprel", t.deprel}});
    out << ordered_json{{"id", s}, {"tokens", std::move(toks)}}.dump() << '\n';
  }
  if (!out) throw Error(Errc::io_failure, "write failed");
}

namespace detail {

inline nlohmann::json parse_json_line(const std::string& line, std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::schema_mismatch, "line " + std::to_string(lineno) + ": " + e.what());
  }
}

inline void expect_header(std::istream& in, std::string_view format, int version) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::schema_mismatch, "missing header line");
  const auto header = parse_json_line(line, 1);
  if (!header.is_object() || header.value("format", std::string{}) != format)
    throw Error(Errc::schema_mismatch, "expected format " + std::string(format));
  if (header.value("version", -1) != version)
    throw Error(Errc::schema_mismatch, "unsupported " + std::string(format) + " version");
}

}  // namespace detail

inline Corpus read_trees(std::istream& in, std::string source = {}) {
  detail::expect_header(in, kTreesFormat, kTreesVersion);
  Corpus corpus;
  corpus.provenance.source = std::move(source);
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto rec = detail::parse_json_line(line, lineno);
    try {
      std::vector<Token> toks;
      for (const auto& j : rec.at("tokens")) {
        Token t;
        t.index = static_cast<int>(toks.size());
        t.form = j.at("form").get<std::string>();
        t.head = j.at("head").get<int>();
        t.deprel = j.at("deprel").get<std::string>();
        toks.push_back(std::move(t));
      }
      corpus.sentences.push_back(DepTree::make(std::move(toks)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::schema_mismatch, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  corpus.provenance.kept = corpus.sentences.size();
  return corpus;
}

inline void write_trees_file(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  write_trees(out, corpus);
}

inline Corpus read_trees_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  return read_trees(in, path);
}

}  // namespace itexp
