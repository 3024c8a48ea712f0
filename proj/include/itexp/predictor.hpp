#pragma once

#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "itexp/error.hpp"
#include "itexp/leveler.hpp"
#include "itexp/treebank.hpp"
#include "itexp/vocab.hpp"

namespace itexp {

// Distributions for one input position, indexed by the predictor's
// SymbolTable token and expansion IDs.
struct PositionPrediction {
  std::vector<double> token_dist;
  std::vector<double> exp_dist;
};

// What the generation engine needs from a model. Implementations must be
// safe to call concurrently.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual const SymbolTable& symbols() const = 0;

  // Longest input the predictor accepts; 0 means unbounded.
  virtual std::size_t max_input_length() const { return 0; }

  // One prediction per input position. Terminal positions may carry empty
  // vectors; only placeholder positions are read.
  virtual std::vector<PositionPrediction> predict(const LevelInput& input) const = 0;

  // Predictors that condition tokens on the chosen expansions override both.
  virtual bool conditions_on_expansion() const { return false; }
  virtual std::vector<std::vector<double>> predict_tokens(const LevelInput& input,
                                                          std::span<const int> exp_ids) const {
    (void)exp_ids;
    std::vector<std::vector<double>> out;
    for (auto& p : predict(input)) out.push_back(std::move(p.token_dist));
    return out;
  }
};

namespace detail {

inline std::vector<double> one_hot(std::size_t size, int id) {
  std::vector<double> v(size, 0.0);
  v.at(id) = 1.0;
  return v;
}

inline PositionPrediction pad_prediction(const SymbolTable& st) {
  return {one_hot(st.num_tokens(), SymbolTable::kPadId), one_hot(st.num_expansions(), SymbolTable::kExpPadId)};
}

}  // namespace detail

// Replays one reference tree with one-hot distributions.
class OraclePredictor final : public Predictor {
 public:
  explicit OraclePredictor(const DepTree& reference)
      : levels_(levelize(reference)), symbols_(induce_vocabs(Corpus{{reference}, {}})) {}

  const SymbolTable& symbols() const override { return symbols_; }
  const std::vector<LevelTransition>& transitions() const noexcept { return levels_; }

  std::vector<PositionPrediction> predict(const LevelInput& input) const override {
    for (const auto& t : levels_) {
      if (!(t.input == input)) continue;
      std::vector<PositionPrediction> out;
      out.reserve(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (!t.o_tok[i]) {
          out.push_back(detail::pad_prediction(symbols_));
          continue;
        }
        const auto exp = symbols_.expansion_id(t.o_exp[i]->render());
        out.push_back({detail::one_hot(symbols_.num_tokens(), symbols_.terminal_id(*t.o_tok[i])),
                       detail::one_hot(symbols_.num_expansions(), exp.value())});
      }
      return out;
    }
    throw Error(Errc::query_off_reference_path, "input is not a step of the reference tree");
  }

 private:
  std::vector<LevelTransition> levels_;
  SymbolTable symbols_;
};

// Count-based stand-in for the neural model. Context is the placeholder
// label plus the head terminal, backing off to the label alone and then to
// global counts.
class EmpiricalModel final : public Predictor {
 public:
  static constexpr int kNoHead = -1;

  struct Context {
    int label;  // placeholder token ID
    int head;   // terminal token ID, or kNoHead under [ROOT]
    friend auto operator<=>(const Context&, const Context&) = default;
  };
  // (token ID, expansion ID) -> count
  using Joint = std::map<std::pair<int, int>, long>;

  EmpiricalModel() = default;

  // Adds one count; the back-off tables are kept as marginals of the full table.
  void add(Context ctx, int token, int exp, long count = 1) {
    full_[ctx][{token, exp}] += count;
    by_label_[ctx.label][{token, exp}] += count;
    global_[{token, exp}] += count;
  }

  static EmpiricalModel fit(const LevelCorpus& levels, const SymbolTable& symbols) {
    EmpiricalModel m;
    m.symbols_ = symbols;
    for (const auto& sent : levels)
      for (const auto& t : sent)
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (!t.input.i_tok[i].placeholder) continue;
          const int tok = symbols.terminal_id(*t.o_tok[i]);
          // <unk> is never emitted, so its counts would only mask back-off.
          if (tok == SymbolTable::kUnkId) continue;
          const auto exp = symbols.expansion_id(t.o_exp[i]->render());
          if (!exp) throw Error(Errc::invalid_argument, "expansion " + t.o_exp[i]->render() + " not in vocabulary");
          m.add(m.context_of(t.input, i), tok, *exp);
        }
    if (m.global_.empty()) throw Error(Errc::empty_corpus, "no placeholder positions to fit");
    return m;
  }

  const SymbolTable& symbols() const override { return symbols_; }

  Context context_of(const LevelInput& input, std::size_t i) const {
    const auto label = symbols_.placeholder_id(input.i_tok[i].text);
    const int h = input.heads[i];
    return {label.value_or(-1), h == kRootHead ? kNoHead : symbols_.terminal_id(input.i_tok[h].text)};
  }

  // First table in the back-off chain with a count for this context.
  const Joint& table_for(const Context& ctx) const {
    if (auto it = full_.find(ctx); it != full_.end()) return it->second;
    if (auto it = by_label_.find(ctx.label); it != by_label_.end()) return it->second;
    return global_;
  }

  // 0 = (label, head), 1 = label, 2 = global.
  int backoff_level(const Context& ctx) const {
    if (full_.count(ctx)) return 0;
    if (by_label_.count(ctx.label)) return 1;
    return 2;
  }

  std::vector<PositionPrediction> predict(const LevelInput& input) const override {
    std::vector<PositionPrediction> out;
    out.reserve(input.size());
    for (std::size_t i = 0; i < input.size(); ++i) {
      if (!input.i_tok[i].placeholder) {
        out.emplace_back();
        continue;
      }
      const Joint& joint = table_for(context_of(input, i));
      PositionPrediction p{std::vector<double>(symbols_.num_tokens(), 0.0),
                           std::vector<double>(symbols_.num_expansions(), 0.0)};
      double total = 0;
      for (const auto& [key, c] : joint) {
        p.token_dist[key.first] += c;
        p.exp_dist[key.second] += c;
        total += c;
      }
      for (auto& v : p.token_dist) v /= total;
      for (auto& v : p.exp_dist) v /= total;
      out.push_back(std::move(p));
    }
    return out;
  }

  const std::map<Context, Joint>& full_table() const noexcept { return full_; }
  const std::map<int, Joint>& label_table() const noexcept { return by_label_; }
  const Joint& global_table() const noexcept { return global_; }

  friend bool operator==(const EmpiricalModel& a, const EmpiricalModel& b) {
    return a.symbols_ == b.symbols_ && a.full_ == b.full_;
  }

  // -------------------------------------------------------------------------
  // Persistence: header line then {label, head, token, exp, count} records.
  // The symbol table is rebuilt from the records on load.

  static constexpr std::string_view kFormat = "itexp-empirical";
  static constexpr int kVersion = 1;

  void write(std::ostream& out) const {
    using nlohmann::ordered_json;
    out << ordered_json{{"format", kFormat}, {"version", kVersion}}.dump() << '\n';
    for (const auto& [ctx, joint] : full_)
      for (const auto& [key, c] : joint) {
        ordered_json rec;
        rec["label"] = symbols_.token(ctx.label);
        rec["head"] = ctx.head == kNoHead ? ordered_json(nullptr) : ordered_json(symbols_.token(ctx.head));
        rec["token"] = symbols_.token(key.first);
        rec["exp"] = symbols_.expansion(key.second);
        rec["count"] = c;
        out << rec.dump() << '\n';
      }
    if (!out) throw Error(Errc::io_failure, "write failed");
  }

  static EmpiricalModel read(std::istream& in) {
    detail::expect_header(in, kFormat, kVersion);
    struct Rec {
      std::string label;
      std::optional<std::string> head;
      std::string token, exp;
      long count;
    };
    std::vector<Rec> recs;
    std::map<std::string, long> terms, labels, exps;
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = detail::parse_json_line(line, lineno);
      try {
        Rec r;
        r.label = j.at("label").get<std::string>();
        if (!j.at("head").is_null()) r.head = j.at("head").get<std::string>();
        r.token = j.at("token").get<std::string>();
        r.exp = j.at("exp").get<std::string>();
        r.count = j.at("count").get<long>();
        const Symbol ph = Symbol::parse(r.label);
        if (!ph.placeholder) throw Error(Errc::schema_mismatch, "label is not a placeholder on line " + std::to_string(lineno));
        terms[r.token] += r.count;
        if (r.head) terms.emplace(*r.head, 0);
        if (ph.text != kRootLabel) labels[ph.text] += r.count;
        exps[r.exp] += r.count;
        recs.push_back(std::move(r));
      } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::schema_mismatch, "line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    terms.erase(std::string(kUnk));
    long roots = 0;
    for (const auto& r : recs)
      if (r.label == kRootSymbol) roots += r.count;
    EmpiricalModel m;
    m.symbols_ = SymbolTable::from_entries(detail::rank_entries(terms), detail::rank_entries(labels),
                                           detail::rank_entries(exps), 0, roots);
    for (const auto& r : recs) {
      const int label = m.symbols_.placeholder_id(Symbol::parse(r.label).text).value();
      const int head = r.head ? m.symbols_.terminal_id(*r.head) : kNoHead;
      m.add({label, head}, m.symbols_.terminal_id(r.token), m.symbols_.expansion_id(r.exp).value(), r.count);
    }
    if (m.global_.empty()) throw Error(Errc::empty_corpus, "empirical model file has no records");
    return m;
  }

 private:
  SymbolTable symbols_;
  std::map<Context, Joint> full_;
  std::map<int, Joint> by_label_;
  Joint global_;
};

inline EmpiricalModel fit_empirical(const LevelCorpus& levels, const SymbolTable& symbols) {
  return EmpiricalModel::fit(levels, symbols);
}

}  // namespace itexp
