#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "test_util.hpp"

using namespace itexp;
using namespace itexp::testing;

namespace {

DepTree first_tree(const std::string& file) { return read_conllu_file(data_path(file)).sentences.at(0); }

const Corpus& fixture32() {
  static const Corpus c = read_conllu_file(data_path("fixture32.conllu"));
  return c;
}

const Corpus& news() {
  static const Corpus c = read_conllu_file(data_path("news.conllu"));
  return c;
}

struct Fitted {
  SymbolTable symbols;
  EmpiricalModel model;
};

Fitted fit_on(const Corpus& c) {
  auto st = induce_vocabs(c);
  auto m = fit_empirical(levelize_all(c), st);
  return {std::move(st), std::move(m)};
}

const Fitted& news_model() {
  static const Fitted f = fit_on(news());
  return f;
}

Sentence words(const std::string& s) {
  std::istringstream in(s);
  Sentence out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Hands out fixed distributions regardless of the input.
class FixedPredictor final : public Predictor {
 public:
  FixedPredictor(SymbolTable st, std::vector<double> tok, std::vector<double> exp)
      : st_(std::move(st)), tok_(std::move(tok)), exp_(std::move(exp)) {}
  const SymbolTable& symbols() const override { return st_; }
  std::vector<PositionPrediction> predict(const LevelInput& input) const override {
    return std::vector<PositionPrediction>(input.size(), PositionPrediction{tok_, exp_});
  }

 private:
  SymbolTable st_;
  std::vector<double> tok_, exp_;
};

}  // namespace

// ---------------------------------------------------------------------------
// sampler math

TEST(Sampler, NucleusKeepsSmallestPrefix) {
  const std::vector<double> d{0.5, 0.3, 0.15, 0.05};
  const auto f = nucleus_filter(d, 0.9);
  EXPECT_NEAR(f[0], 0.5 / 0.95, 1e-12);
  EXPECT_NEAR(f[1], 0.3 / 0.95, 1e-12);
  EXPECT_NEAR(f[2], 0.15 / 0.95, 1e-12);
  EXPECT_EQ(f[3], 0.0);
  EXPECT_EQ(nucleus_filter(d, 1.0), d);
  const std::vector<double> one_hot{0, 1, 0};
  EXPECT_EQ(nucleus_filter(one_hot, 0.3), one_hot);
}

TEST(Sampler, NucleusBreaksTiesByLowerIndex) {
  const auto f = nucleus_filter(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.5);
  EXPECT_EQ(f, (std::vector<double>{0.5, 0.5, 0, 0}));
}

TEST(Sampler, Temperature) {
  const std::vector<double> d{0.5, 0.3, 0.15, 0.05};
  const auto same = temperature_scale(d, 1.0);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(same[i], d[i], 1e-12);
  for (double tau : {0.1, 0.7, 3.0}) {
    const auto h = temperature_scale(std::vector<double>{0.5, 0.5}, tau);
    EXPECT_NEAR(h[0], 0.5, 1e-12);
  }
  const auto cold = temperature_scale(d, 1e-3);
  EXPECT_NEAR(cold[0], 1.0, 1e-12);
  const auto hot = temperature_scale(d, 2.0);
  const double z = std::sqrt(0.5) + std::sqrt(0.3) + std::sqrt(0.15) + std::sqrt(0.05);
  EXPECT_NEAR(hot[3], std::sqrt(0.05) / z, 1e-12);
  EXPECT_THROW(temperature_scale(d, 0.0), Error);
  EXPECT_THROW(temperature_scale(d, -1.0), Error);
}

TEST(Sampler, StyleReweight) {
  const std::vector<double> d{0.1, 0.9};
  const std::vector<double> w{10.0, 1.0};
  const auto r = style_reweight(d, w);
  EXPECT_NEAR(r[0], 1.0 / 1.9, 1e-12);
  EXPECT_NEAR(r[1], 0.9 / 1.9, 1e-12);
  EXPECT_EQ(style_reweight(d, std::vector<double>{1.0, 1.0}), d);
}

TEST(Sampler, StyleRulesMatchRenderedExpansions) {
  const auto& st = news_model().symbols;
  const auto w = style_weights(st, {{"amod", 10.0}});
  std::size_t hits = 0;
  for (std::size_t id = 0; id < w.size(); ++id) {
    const bool has = st.expansion(static_cast<int>(id)).find("amod") != std::string::npos;
    EXPECT_EQ(w[id], has ? 10.0 : 1.0);
    hits += has;
  }
  EXPECT_GT(hits, 0u);
  for (double x : style_weights(st, {{"no-such-label", 5.0}})) EXPECT_EQ(x, 1.0);

  // Mass on amod-bearing expansions grows with the factor.
  std::vector<double> dist(st.num_expansions(), 1.0 / static_cast<double>(st.num_expansions()));
  double prev = 0;
  for (double f : {1.0, 2.0, 10.0, 50.0}) {
    const auto r = style_reweight(dist, st, {{"amod", f}});
    double mass = 0;
    for (std::size_t id = 0; id < r.size(); ++id)
      if (st.expansion(static_cast<int>(id)).find("amod") != std::string::npos) mass += r[id];
    EXPECT_GE(mass, prev);
    prev = mass;
  }
}

TEST(Sampler, SampleIndexFollowsDistribution) {
  std::mt19937_64 rng(1);
  std::vector<int> hits(3);
  const std::vector<double> d{0.2, 0.0, 0.8};
  for (int i = 0; i < 20000; ++i) ++hits[sample_index(d, rng)];
  EXPECT_EQ(hits[1], 0);
  EXPECT_NEAR(hits[0] / 20000.0, 0.2, 0.015);
}

TEST(Sampler, SettingsValidate) {
  auto bad = [](auto mutate) {
    GenerationSettings s;
    mutate(s);
    EXPECT_THROW(s.validate(), Error);
  };
  bad([](auto& s) { s.temperature = 0; });
  bad([](auto& s) { s.top_p = 0; });
  bad([](auto& s) { s.top_p = 1.5; });
  bad([](auto& s) { s.max_iterations = 0; });
  bad([](auto& s) { s.style = {{"amod", 0.0}}; });
}

// ---------------------------------------------------------------------------
// oracle predictor

TEST(Oracle, RegeneratesDogSentenceInThreeIterations) {
  const OraclePredictor oracle(first_tree("dog.conllu"));
  GenerationSettings gs;
  gs.temperature = 1.7;
  const auto g = Generator(oracle, gs).generate_one(0);
  EXPECT_EQ(join_words(g.sentence), "My dog also likes eating sausage");
  EXPECT_EQ(g.iterations, 3);
  EXPECT_EQ(g.tree, first_tree("dog.conllu"));
}

TEST(Oracle, SingleTokenAndLongSentence) {
  const auto single = DepTree::make({Token{0, "Hello", "root", kRootHead}});
  auto g = Generator(OraclePredictor(single), {}).generate_one(3);
  EXPECT_EQ(g.sentence, Sentence{"Hello"});
  EXPECT_EQ(g.iterations, 1);

  const auto app = first_tree("failure.conllu");
  g = Generator(OraclePredictor(app), {}).generate_one(3);
  EXPECT_EQ(g.iterations, 10);
  EXPECT_EQ(g.tree, app);
}

TEST(Oracle, RegeneratesEveryFixtureSentence) {
  for (const auto& t : fixture32().sentences) {
    const OraclePredictor oracle(t);
    const auto g = Generator(oracle, {}).generate_one(9);
    ASSERT_EQ(g.tree, t);
    ASSERT_EQ(g.iterations, depth(t));
  }
}

TEST(Oracle, RejectsOffPathQueries) {
  const OraclePredictor oracle(first_tree("dog.conllu"));
  LevelInput off{{Symbol::dependent("nsubj")}, {kRootHead}};
  try {
    oracle.predict(off);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::query_off_reference_path);
  }
}

// ---------------------------------------------------------------------------
// empirical model

TEST(Empirical, ArgmaxReproducesSingleSentence) {
  const Corpus c{{first_tree("dog.conllu")}, {}};
  const auto f = fit_on(c);
  GenerationSettings gs;
  gs.temperature = 1e-3;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto g = Generator(f.model, gs).generate_one(seed);
    EXPECT_EQ(join_words(g.sentence), "My dog also likes eating sausage");
  }
}

TEST(Empirical, BacksOffToLabelThenGlobal) {
  const auto f = fit_on(Corpus{{first_tree("dog.conllu")}, {}});
  const auto& st = f.symbols;
  LevelInput in{{Symbol::terminal("purple"), Symbol::dependent("nsubj")}, {kRootHead, 0}};
  const auto ctx = f.model.context_of(in, 1);
  EXPECT_EQ(f.model.backoff_level(ctx), 1);
  const auto p = f.model.predict(in)[1];
  EXPECT_NEAR(p.token_dist[st.terminal_id("dog")], 1.0, 1e-12);

  LevelInput unseen{{Symbol::terminal("likes"), Symbol::dependent("zzz")}, {kRootHead, 0}};
  EXPECT_EQ(f.model.backoff_level(f.model.context_of(unseen, 1)), 2);
  const auto g = f.model.predict(unseen)[1];
  // Six placeholder outcomes in the global table, one per token.
  EXPECT_NEAR(g.token_dist[st.terminal_id("sausage")], 1.0 / 6.0, 1e-12);
}

TEST(Empirical, BackoffTablesAreMarginals) {
  const auto& m = news_model().model;
  std::map<int, EmpiricalModel::Joint> by_label;
  EmpiricalModel::Joint global;
  for (const auto& [ctx, joint] : m.full_table())
    for (const auto& [k, c] : joint) {
      by_label[ctx.label][k] += c;
      global[k] += c;
    }
  EXPECT_EQ(by_label, m.label_table());
  EXPECT_EQ(global, m.global_table());
}

TEST(Empirical, DistributionsAreProper) {
  const auto& f = news_model();
  for (std::size_t k = 0; k < 50; ++k)
    for (const auto& t : levelize(news().sentences[k])) {
      const auto preds = f.model.predict(t.input);
      ASSERT_EQ(preds.size(), t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (!t.input.i_tok[i].placeholder) continue;
        const double ts = std::accumulate(preds[i].token_dist.begin(), preds[i].token_dist.end(), 0.0);
        const double es = std::accumulate(preds[i].exp_dist.begin(), preds[i].exp_dist.end(), 0.0);
        ASSERT_NEAR(ts, 1.0, 1e-6);
        ASSERT_NEAR(es, 1.0, 1e-6);
        ASSERT_EQ(preds[i].token_dist[SymbolTable::kUnkId], 0.0);
      }
    }
}

TEST(Empirical, ArgmaxMatchesUnambiguousContexts) {
  const auto f = fit_on(fixture32());
  std::size_t checked = 0;
  for (const auto& t : fixture32().sentences)
    for (const auto& lv : levelize(t)) {
      const auto preds = f.model.predict(lv.input);
      for (std::size_t i = 0; i < lv.size(); ++i) {
        if (!lv.input.i_tok[i].placeholder) continue;
        const auto ctx = f.model.context_of(lv.input, i);
        if (f.model.full_table().at(ctx).size() != 1) continue;
        const auto& td = preds[i].token_dist;
        const auto& ed = preds[i].exp_dist;
        ASSERT_EQ(f.symbols.token(static_cast<int>(std::max_element(td.begin(), td.end()) - td.begin())), *lv.o_tok[i]);
        ASSERT_EQ(f.symbols.expansion(static_cast<int>(std::max_element(ed.begin(), ed.end()) - ed.begin())),
                  lv.o_exp[i]->render());
        ++checked;
      }
    }
  EXPECT_GT(checked, 150u);
}

TEST(Empirical, FileRoundTrip) {
  const auto f = fit_on(fixture32());
  std::stringstream ss;
  f.model.write(ss);
  const auto back = EmpiricalModel::read(ss);
  EXPECT_EQ(back, f.model);
  EXPECT_EQ(back.symbols(), f.symbols);
}

TEST(Empirical, RejectsEmptyCorpus) {
  try {
    fit_empirical({}, SymbolTable{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_corpus);
  }
}

// ---------------------------------------------------------------------------
// generation engine

TEST(Generate, DeterministicAndWorkerIndependent) {
  GenerationSettings gs;
  gs.seed = 42;
  const auto a = generate(news_model().model, gs, 24, 1);
  const auto b = generate(news_model().model, gs, 24, 1);
  const auto c = generate(news_model().model, gs, 24, 4);
  ASSERT_EQ(a.size(), 24u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].sentence, b[k].sentence);
    EXPECT_EQ(a[k].sentence, c[k].sentence);
    EXPECT_EQ(a[k].tree, c[k].tree);
  }
  gs.seed = 43;
  const auto d = generate(news_model().model, gs, 24, 1);
  EXPECT_EQ(d[0].sentence, a[1].sentence);
}

TEST(Generate, OutputsAreWellFormed) {
  GenerationSettings gs;
  gs.seed = 5;
  gs.temperature = 1.3;
  const auto& st = news_model().symbols;
  for (const auto& g : generate(news_model().model, gs, 100)) {
    ASSERT_TRUE(is_projective(g.tree));
    ASSERT_EQ(g.iterations, depth(g.tree));
    ASSERT_EQ(g.sentence, g.tree.forms());
    for (const auto& w : g.sentence) ASSERT_TRUE(st.has_terminal(w)) << w;
    ASSERT_EQ(replay(g.transitions).tree, g.tree);
  }
}

TEST(Generate, IterationCapForcesHead) {
  GenerationSettings gs;
  gs.max_iterations = 1;
  for (const auto& g : generate(news_model().model, gs, 20)) {
    EXPECT_EQ(g.sentence.size(), 1u);
    EXPECT_EQ(g.iterations, 1);
  }
  gs.max_iterations = 3;
  for (const auto& g : generate(news_model().model, gs, 20)) EXPECT_LE(depth(g.tree), 3);
}

TEST(Generate, MasksNonTerminalTokens) {
  const auto st = induce_vocabs(Corpus{{first_tree("dog.conllu")}, {}});
  // Almost all mass on <unk> and [pad]; only "dog" is a legal choice.
  std::vector<double> tok(st.num_tokens(), 0.0);
  tok[SymbolTable::kUnkId] = 0.6;
  tok[SymbolTable::kPadId] = 0.3;
  tok[st.terminal_id("dog")] = 0.1;
  std::vector<double> exp(st.num_expansions(), 0.0);
  exp[SymbolTable::kExpPadId] = 0.9;
  exp[*st.expansion_id("[HEAD]")] = 0.1;
  const FixedPredictor p(st, tok, exp);
  const auto g = Generator(p, {}).generate_one(0);
  EXPECT_EQ(g.sentence, Sentence{"dog"});
}

TEST(Generate, ReportsDegeneratePredictors) {
  const auto st = induce_vocabs(Corpus{{first_tree("dog.conllu")}, {}});
  std::vector<double> tok(st.num_tokens(), 0.0);
  tok[SymbolTable::kUnkId] = 1.0;
  std::vector<double> exp(st.num_expansions(), 0.0);
  exp[*st.expansion_id("[HEAD]")] = 1.0;
  try {
    Generator(FixedPredictor(st, tok, exp), {}).generate_one(0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::zero_mass_after_masking);
  }
  try {
    Generator(FixedPredictor(st, {1.0}, exp), {}).generate_one(0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::predictor_failure);
  }
}

TEST(Generate, StyleRaisesAdjectiveRate) {
  double prev = -1;
  for (double f : {1.0, 10.0, 50.0}) {
    GenerationSettings gs;
    gs.seed = 11;
    gs.style = {{"amod", f}};
    std::vector<DepTree> trees;
    for (auto& g : generate(news_model().model, gs, 60)) trees.push_back(g.tree);
    const double rate = adjective_rate(trees);
    EXPECT_GE(rate, prev);
    prev = rate;
  }
}

// ---------------------------------------------------------------------------
// BLEU

TEST(Bleu, UnitExamples) {
  const std::vector<Sentence> refs{words("the cat sat on the mat"), words("a dog barked")};
  EXPECT_NEAR(bleu(refs, refs, 5), 1.0, 1e-12);
  EXPECT_NEAR(bleu({words("the the the")}, {words("the cat")}, 1), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(bleu({words("zebra quokka")}, refs, 1), 0.0);
  EXPECT_THROW(bleu({}, refs, 4), Error);
  EXPECT_THROW(bleu(refs, refs, 0), Error);
}

TEST(Bleu, BrevityPenalty) {
  // c = 2 < r = 4 with full unigram precision.
  const double b = bleu({words("the cat")}, {words("the cat sat down")}, 1);
  EXPECT_NEAR(b, std::exp(1.0 - 4.0 / 2.0), 1e-12);
  // Closest length ties go to the shorter reference: c = 3, refs 2 and 4.
  const BleuReferences r({words("a b"), words("a b c d")}, 1);
  EXPECT_EQ(r.closest_length(3), 2u);
}

TEST(Bleu, HandComputedBigram) {
  // Unigrams 4/5 ("blue" misses); bigrams 2/4 ("the cat", "cat is").
  const double b = bleu({words("the cat is blue .")}, {words("the cat is on the mat .")}, 2);
  const double p1 = 4.0 / 5.0, p2 = 2.0 / 4.0;
  EXPECT_NEAR(b, std::exp(1.0 - 7.0 / 5.0) * std::sqrt(p1 * p2), 1e-12);
}

TEST(Bleu, CandidateOrderInvariant) {
  std::vector<Sentence> cands;
  for (std::size_t k = 0; k < 40; ++k) cands.push_back(news().sentences[k].forms());
  std::vector<Sentence> refs;
  for (std::size_t k = 40; k < 400; ++k) refs.push_back(news().sentences[k].forms());
  const double a = bleu(cands, refs, 4);
  std::reverse(cands.begin(), cands.end());
  EXPECT_NEAR(bleu(cands, refs, 4), a, 1e-12);
  EXPECT_GT(a, 0.0);
}

TEST(SelfBleu, Examples) {
  const std::vector<Sentence> same(4, words("one two three four five six"));
  EXPECT_NEAR(self_bleu(same, 5), 1.0, 1e-12);
  EXPECT_EQ(self_bleu({words("a b c"), words("d e f"), words("g h i")}, 1), 0.0);
  EXPECT_THROW(self_bleu({words("a")}, 1), Error);
}

TEST(SelfBleu, MatchesDefinition) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<Sentence> cands(2 + rng() % 8);
    for (auto& s : cands) {
      s.resize(1 + rng() % 9);
      for (auto& w : s) w = std::string(1, static_cast<char>('a' + rng() % 4));
    }
    const int max_n = 1 + static_cast<int>(rng() % 4);
    const auto scores = self_bleu_scores(cands, max_n);
    double sum = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      std::vector<Sentence> others = cands;
      others.erase(others.begin() + static_cast<long>(i));
      ASSERT_NEAR(scores[i], bleu({cands[i]}, others, max_n), 1e-12);
      sum += scores[i];
    }
    const double mean = self_bleu(cands, max_n);
    ASSERT_NEAR(mean, sum / static_cast<double>(cands.size()), 1e-12);
    ASSERT_GE(mean, *std::min_element(scores.begin(), scores.end()) - 1e-12);
    ASSERT_LE(mean, *std::max_element(scores.begin(), scores.end()) + 1e-12);
    std::reverse(cands.begin(), cands.end());
    ASSERT_NEAR(self_bleu(cands, max_n), mean, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// sweep, speedup, adjectives

TEST(Sweep, SingleSampleHasZeroStd) {
  SweepOptions so;
  so.temperatures = {1.0, 0.8};
  so.samples = 1;
  so.sentences_per_sample = 20;
  std::vector<Sentence> refs;
  for (std::size_t k = 0; k < 200; ++k) refs.push_back(news().sentences[k].forms());
  GenerationSettings gs;
  gs.seed = 3;
  const auto rep = sweep(news_model().model, gs, so, refs);
  ASSERT_EQ(rep.rows.size(), 2u);
  for (const auto& r : rep.rows) {
    EXPECT_EQ(r.bleu_std, 0.0);
    EXPECT_EQ(r.self_bleu_std, 0.0);
    EXPECT_GE(r.bleu_mean, 0.0);
    EXPECT_LE(r.bleu_mean, 1.0);
  }
  EXPECT_EQ(rep.rows[1].temperature, 0.8);
  so.sentences_per_sample = 1;
  EXPECT_THROW(sweep(news_model().model, gs, so, refs), Error);
}

TEST(Sweep, OracleReplayMatchesReferences) {
  const auto& t = fixture32().sentences[0];
  SweepOptions so;
  so.temperatures = {1.0};
  so.samples = 2;
  so.sentences_per_sample = 3;
  so.max_n = 4;
  const auto rep = sweep(OraclePredictor(t), GenerationSettings{}, so, {t.forms()});
  EXPECT_NEAR(rep.rows[0].bleu_mean, 1.0, 1e-12);
  EXPECT_NEAR(rep.rows[0].self_bleu_mean, 1.0, 1e-12);
}

TEST(Speedup, KnownSentences) {
  Corpus c{{first_tree("dog.conllu"), first_tree("failure.conllu"), DepTree::make({Token{0, "Hi", "root", kRootHead}})},
           {}};
  const auto rep = speedup_stats(c);
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rep.rows[0].natural_ratio(), 0.5);
  EXPECT_DOUBLE_EQ(rep.rows[0].ideal_ratio(), 0.5);
  EXPECT_EQ(rep.rows[1].length, 21u);
  EXPECT_EQ(rep.rows[1].binarized, 10);
  EXPECT_NEAR(rep.rows[1].binarized_ratio(), 10.0 / 21.0, 1e-12);
  EXPECT_EQ(rep.rows[2].natural_ratio(), 1.0);
  EXPECT_EQ(rep.rows[2].binarized_ratio(), 1.0);
  EXPECT_EQ(rep.rows[2].ideal_ratio(), 1.0);
  EXPECT_EQ(ideal_depth(6), 3);
  EXPECT_EQ(ideal_depth(7), 3);
  EXPECT_EQ(ideal_depth(8), 4);
}

TEST(Speedup, RatioBoundsHoldCorpusWide) {
  const auto rep = speedup_stats(news());
  std::size_t binned = 0;
  for (const auto& b : rep.histogram) binned += b.binarized;
  EXPECT_EQ(binned, rep.rows.size());
  for (const auto& r : rep.rows) {
    ASSERT_LE(r.ideal_ratio(), r.binarized_ratio());
    ASSERT_LE(r.binarized_ratio(), 1.0);
    ASSERT_LE(r.natural_ratio(), r.binarized_ratio());
  }
}

TEST(Adjectives, CountsAmodArcs) {
  const auto one = DepTree::make({Token{0, "red", "amod", 1}, Token{1, "car", "root", kRootHead}});
  const auto none = DepTree::make({Token{0, "the", "det", 1}, Token{1, "car", "root", kRootHead}});
  EXPECT_EQ(adjective_rate({one}), 1.0);
  EXPECT_EQ(adjective_rate({none}), 0.0);
  EXPECT_EQ(adjective_rate({one, none}), 0.5);
  EXPECT_EQ(adjective_rate({}), 0.0);
}
