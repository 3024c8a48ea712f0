// itexp: command-line front end for the iterative-expansion pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "itexp/itexp.hpp"

using namespace itexp;
using json = nlohmann::ordered_json;

namespace {

// Every run prints its resolved configuration to stderr.
void print_config(const std::string& command, const json& cfg) {
  std::cerr << "itexp " << command << " config: " << cfg.dump() << '\n';
}

// --seed, then ITEXP_SEED, then 0.
std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t flag_value) {
  if (opt->count() > 0) return flag_value;
  if (const char* env = std::getenv("ITEXP_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(Errc::invalid_argument, std::string("ITEXP_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
  return out;
}

std::vector<Sentence> read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  std::vector<Sentence> out;
  std::string line, w;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    Sentence s;
    while (ss >> w) s.push_back(w);
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

std::vector<StyleRule> parse_style(const std::vector<std::string>& specs) {
  std::vector<StyleRule> rules;
  for (const auto& s : specs) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0)
      throw Error(Errc::invalid_argument, "style rule must look like label:factor, got " + s);
    StyleRule r;
    r.label = s.substr(0, colon);
    try {
      r.factor = std::stod(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "style factor is not a number in " + s);
    }
    rules.push_back(r);
  }
  return rules;
}

json style_json(const std::vector<StyleRule>& rules) {
  json out = json::array();
  for (const auto& r : rules) out.push_back({{"label", r.label}, {"factor", r.factor}});
  return out;
}

// A neural checkpoint or an empirical model, told apart by the header line.
struct LoadedModel {
  std::string kind;
  std::unique_ptr<Predictor> predictor;
};

LoadedModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path);
  std::string first;
  std::getline(in, first);
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(first);
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::schema_mismatch, path + " is not an itexp model file");
  }
  const std::string format = head.is_object() ? head.value("format", "") : "";
  in.clear();
  in.seekg(0);
  if (format == kCheckpointFormat) return {"neural", std::make_unique<NeuralPredictor>(read_checkpoint(in))};
  if (format == EmpiricalModel::kFormat) return {"empirical", std::make_unique<EmpiricalModel>(EmpiricalModel::read(in))};
  throw Error(Errc::schema_mismatch, path + " has unknown model format '" + format + "'");
}

// Flags shared by generate, sweep and style-eval.
struct GenFlags {
  std::string model;
  double temperature = 1.0;
  double top_p = 0.9;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int max_iterations = 64;
  std::size_t workers = 1;
  bool tokens_only = false;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Checkpoint or empirical model file")->required()->check(CLI::ExistingFile);
    app->add_option("--top-p", top_p, "Nucleus mass")->capture_default_str();
    seed_opt = app->add_option("--seed", seed, "Base seed (falls back to ITEXP_SEED)");
    app->add_option("--max-iterations", max_iterations, "Iteration cap")->capture_default_str();
    app->add_option("--workers", workers, "Parallel workers")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_flag("--temperature-tokens-only", tokens_only, "Leave expansion softmaxes unscaled");
  }

  GenerationSettings settings() const {
    GenerationSettings gs;
    gs.temperature = temperature;
    gs.top_p = top_p;
    gs.seed = resolve_seed(seed_opt, seed);
    gs.max_iterations = max_iterations;
    gs.temperature_on_expansions = !tokens_only;
    gs.validate();
    return gs;
  }

  json to_json(const GenerationSettings& gs) const {
    return {{"model", model},
            {"temperature", gs.temperature},
            {"top_p", gs.top_p},
            {"seed", gs.seed},
            {"max_iterations", gs.max_iterations},
            {"temperature_on_expansions", gs.temperature_on_expansions},
            {"style", style_json(gs.style)},
            {"workers", workers}};
  }
};

void print_speedup(const SpeedupReport& rep, std::ostream& out) {
  out << "sentences\t" << rep.rows.size() << '\n';
  out << "mean_length\t" << rep.mean_length << '\n';
  out << "mean_natural_ratio\t" << rep.mean_natural << '\n';
  out << "mean_binarized_ratio\t" << rep.mean_binarized << '\n';
  out << "mean_ideal_ratio\t" << rep.mean_ideal << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Syntax-driven iterative expansion: treebank tools, models, generation and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // ingest
  std::string in_path, out_path;
  auto* ingest = app.add_subcommand("ingest", "CoNLL-U to itexp-trees; drops malformed and non-projective sentences");
  ingest->add_option("--input", in_path, "CoNLL-U file")->required()->check(CLI::ExistingFile);
  ingest->add_option("--output", out_path, "itexp-trees output")->required();

  // binarize
  auto* bin = app.add_subcommand("binarize", "Chain same-side siblings so every node has <= 1 dependent per side");
  bin->add_option("--input", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  bin->add_option("--output", out_path, "itexp-trees output")->required();

  // bpe-learn
  std::size_t num_merges = 10000;
  auto* bpe_learn = app.add_subcommand("bpe-learn", "Learn BPE merges from tree forms");
  bpe_learn->add_option("--input", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  bpe_learn->add_option("--merges", num_merges, "Number of merges")->capture_default_str();
  bpe_learn->add_option("--output", out_path, "Merges file")->required();

  // bpe-apply
  std::string merges_path;
  bool left_first = false;
  auto* bpe_apply = app.add_subcommand("bpe-apply", "Split tree tokens into subword pieces");
  bpe_apply->add_option("--input", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  bpe_apply->add_option("--merges", merges_path, "Merges file")->required()->check(CLI::ExistingFile);
  bpe_apply->add_option("--output", out_path, "itexp-trees output")->required();
  bpe_apply->add_flag("--left-deps-first", left_first,
                      "Attach left dependents to the first piece (keeps trees projective)");

  // vocab
  long min_freq = 1;
  auto* vocab = app.add_subcommand("vocab", "Induce token and expansion vocabularies");
  vocab->add_option("--input", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  vocab->add_option("--min-freq", min_freq, "Minimum terminal count")->capture_default_str()->check(CLI::PositiveNumber);
  vocab->add_option("--output", out_path, "Vocabulary file")->required();

  // levelize
  auto* lvl = app.add_subcommand("levelize", "Split trees into level transitions");
  lvl->add_option("--input", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  lvl->add_option("--output", out_path, "itexp-levels output")->required();

  // fit-empirical
  std::string levels_path, vocab_path;
  auto* fit = app.add_subcommand("fit-empirical", "Fit the count-based back-off predictor");
  fit->add_option("--levels", levels_path, "itexp-levels file")->required()->check(CLI::ExistingFile);
  fit->add_option("--vocab", vocab_path, "Vocabulary file")->required()->check(CLI::ExistingFile);
  fit->add_option("--output", out_path, "Model output")->required();

  // train
  ModelConfig mc;
  double init_std = 0.02;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train the transformer predictor with teacher forcing");
  train_cmd->add_option("--levels", levels_path, "itexp-levels file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--vocab", vocab_path, "Vocabulary file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--output", out_path, "Checkpoint output")->required();
  train_cmd->add_option("--layers", mc.num_layers)->capture_default_str();
  train_cmd->add_option("--heads", mc.num_heads)->capture_default_str();
  train_cmd->add_option("--embed", mc.embed_size)->capture_default_str();
  train_cmd->add_option("--ff", mc.ff_size)->capture_default_str();
  train_cmd->add_option("--exp-layer", mc.exp_layer, "Expansion head layer (-1: layers/2)")->capture_default_str();
  train_cmd->add_option("--max-len", mc.max_len)->capture_default_str();
  train_cmd->add_option("--lr", mc.learning_rate)->capture_default_str();
  train_cmd->add_option("--epochs", mc.epochs)->capture_default_str();
  train_cmd->add_option("--batch", mc.batch_size)->capture_default_str();
  train_cmd->add_option("--init-std", init_std)->capture_default_str();
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Init and shuffle seed (falls back to ITEXP_SEED)");

  // grad-check
  int precision = 64;
  std::size_t gc_batch = 3;
  double tolerance = 0;
  ModelConfig gc;
  gc.embed_size = 8;
  gc.ff_size = 16;
  gc.max_len = 32;
  std::uint64_t gc_seed = 0;
  auto* grad = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  grad->add_option("--levels", levels_path, "itexp-levels file")->required()->check(CLI::ExistingFile);
  grad->add_option("--vocab", vocab_path, "Vocabulary file")->required()->check(CLI::ExistingFile);
  grad->add_option("--precision", precision, "32 or 64")->capture_default_str()->check(CLI::IsMember({32, 64}));
  grad->add_option("--batch", gc_batch, "Transitions in the batch")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--embed", gc.embed_size)->capture_default_str();
  grad->add_option("--ff", gc.ff_size)->capture_default_str();
  grad->add_option("--tolerance", tolerance, "Exit nonzero above this error (0: report only)")->capture_default_str();
  auto* gc_seed_opt = grad->add_option("--seed", gc_seed, "Init seed (falls back to ITEXP_SEED)");

  // generate
  GenFlags gen;
  std::vector<std::string> style_specs;
  std::size_t count = 10;
  std::string trees_out;
  auto* generate_cmd = app.add_subcommand("generate", "Sample sentences");
  gen.add(generate_cmd);
  generate_cmd->add_option("--temperature", gen.temperature, "Softmax temperature")->capture_default_str();
  generate_cmd->add_option("--count", count, "Sentences to generate")->capture_default_str();
  generate_cmd->add_option("--style", style_specs, "label:factor expansion reweighting, repeatable");
  generate_cmd->add_option("--output", out_path, "Sentence file (default stdout)");
  generate_cmd->add_option("--trees-out", trees_out, "itexp-trees sidecar with the generated trees");

  // eval-bleu
  std::string cand_path, ref_path;
  int max_n = 5;
  auto* eval_bleu = app.add_subcommand("eval-bleu", "BLEU of candidates against references, and self-BLEU");
  eval_bleu->add_option("--candidates", cand_path, "Candidate sentences, one per line")->required()->check(CLI::ExistingFile);
  eval_bleu->add_option("--references", ref_path, "Reference sentences, one per line")->check(CLI::ExistingFile);
  eval_bleu->add_option("--max-n", max_n, "Largest n-gram order")->capture_default_str()->check(CLI::PositiveNumber);

  // sweep
  GenFlags sw;
  SweepOptions so;
  so.temperatures = {0.7, 1.0, 1.2};
  auto* sweep_cmd = app.add_subcommand("sweep", "Validation BLEU and self-BLEU across temperatures");
  sw.add(sweep_cmd);
  sweep_cmd->add_option("--references", ref_path, "Validation sentences, one per line")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--temperatures", so.temperatures, "Temperatures")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--samples", so.samples, "Samples per temperature")->capture_default_str();
  sweep_cmd->add_option("--sentences", so.sentences_per_sample, "Sentences per sample")->capture_default_str();
  sweep_cmd->add_option("--max-n", so.max_n, "Largest n-gram order")->capture_default_str();

  // speedup
  std::size_t bins = 20;
  std::string hist_path;
  auto* speed = app.add_subcommand("speedup", "Decoding-step ratios of natural, binarized and ideal trees");
  speed->add_option("--trees", in_path, "itexp-trees file")->required()->check(CLI::ExistingFile);
  speed->add_option("--bins", bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
  speed->add_option("--histogram", hist_path, "Write histogram rows (bin_low, bin_high, natural, binarized, ideal)");

  // style-eval
  GenFlags se;
  std::vector<double> factors{1, 10, 20, 50};
  std::string style_label = "amod";
  std::size_t se_count = 200;
  auto* style_cmd = app.add_subcommand("style-eval", "Adjective rate of generated trees across style factors");
  se.add(style_cmd);
  style_cmd->add_option("--temperature", se.temperature, "Softmax temperature")->capture_default_str();
  style_cmd->add_option("--factors", factors, "Multipliers")->delimiter(',')->capture_default_str();
  style_cmd->add_option("--label", style_label, "Relation substring")->capture_default_str();
  style_cmd->add_option("--count", se_count, "Sentences per factor")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*ingest) {
      print_config("ingest", {{"input", in_path}, {"output", out_path}});
      const auto corpus = read_conllu_file(in_path);
      write_trees_file(out_path, corpus);
      const auto& p = corpus.provenance;
      std::cout << "kept\t" << p.kept << "\ndropped_nonprojective\t" << p.dropped_nonprojective
                << "\ndropped_malformed\t" << p.dropped_malformed << '\n';
    } else if (*bin) {
      print_config("binarize", {{"input", in_path}, {"output", out_path}});
      auto corpus = read_trees_file(in_path);
      for (auto& t : corpus.sentences) t = binarize(t);
      write_trees_file(out_path, corpus);
      std::cout << "binarized\t" << corpus.sentences.size() << '\n';
    } else if (*bpe_learn) {
      print_config("bpe-learn", {{"input", in_path}, {"merges", num_merges}, {"output", out_path}});
      const auto merges = learn_bpe(read_trees_file(in_path), num_merges);
      write_merges_file(out_path, merges);
      std::cout << "merges\t" << merges.rules().size() << '\n';
    } else if (*bpe_apply) {
      print_config("bpe-apply", {{"input", in_path},
                                 {"merges", merges_path},
                                 {"output", out_path},
                                 {"attach", left_first ? "split" : "last"}});
      const auto merges = read_merges_file(merges_path);
      auto corpus = read_trees_file(in_path);
      std::size_t pieces = 0;
      for (auto& t : corpus.sentences) {
        t = apply_subword(t, merges, left_first ? SubwordAttach::split : SubwordAttach::last);
        pieces += t.size();
      }
      write_trees_file(out_path, corpus);
      std::cout << "sentences\t" << corpus.sentences.size() << "\npieces\t" << pieces << '\n';
    } else if (*vocab) {
      print_config("vocab", {{"input", in_path}, {"min_freq", min_freq}, {"output", out_path}});
      const auto st = induce_vocabs(read_trees_file(in_path), min_freq);
      write_vocab_file(out_path, st);
      std::cout << "tokens\t" << st.num_tokens() << "\nterminals\t" << st.num_terminals() << "\nexpansions\t"
                << st.num_expansions() << '\n';
    } else if (*lvl) {
      print_config("levelize", {{"input", in_path}, {"output", out_path}});
      const auto corpus = read_trees_file(in_path);
      LevelCorpus levels;
      std::size_t steps = 0;
      for (const auto& t : corpus.sentences) {
        levels.push_back(levelize(t));
        steps += levels.back().size();
      }
      write_levels_file(out_path, levels);
      std::cout << "sentences\t" << levels.size() << "\ntransitions\t" << steps << '\n';
    } else if (*fit) {
      print_config("fit-empirical", {{"levels", levels_path}, {"vocab", vocab_path}, {"output", out_path}});
      const auto model = fit_empirical(read_levels_file(levels_path), read_vocab_file(vocab_path));
      auto out = open_out(out_path);
      model.write(out);
      std::cout << "contexts\t" << model.full_table().size() << '\n';
    } else if (*train_cmd) {
      mc.seed = resolve_seed(train_seed_opt, train_seed);
      const auto st = read_vocab_file(vocab_path);
      const auto data = encode_levels(read_levels_file(levels_path), st);
      auto model = make_model(mc, st, init_std);
      json cfg = model.config().to_json();
      cfg["levels"] = levels_path;
      cfg["vocab"] = vocab_path;
      cfg["output"] = out_path;
      cfg["init_std"] = init_std;
      print_config("train", cfg);
      TrainOptions opt;
      opt.on_epoch = [](int epoch, double loss) { std::cout << "epoch\t" << epoch << "\tloss\t" << loss << '\n'; };
      train(model, data, opt);
      const auto acc = accuracy(model, data);
      std::cout << "token_accuracy\t" << acc.token << "\nexpansion_accuracy\t" << acc.exp << '\n';
      auto out = open_out(out_path, true);
      write_checkpoint(out, model, st);
    } else if (*grad) {
      gc.seed = resolve_seed(gc_seed_opt, gc_seed);
      const auto st = read_vocab_file(vocab_path);
      auto data = encode_levels(read_levels_file(levels_path), st);
      if (data.size() > gc_batch) data.resize(gc_batch);
      const auto model = make_model(gc, st, 0.3, false);
      json cfg = model.config().to_json();
      cfg["precision"] = precision;
      cfg["batch"] = data.size();
      cfg["init_std"] = 0.3;
      cfg["step"] = 1e-5;
      print_config("grad-check", cfg);
      const auto rep = precision == 64 ? grad_check<double>(model, data) : grad_check<float>(model, data);
      for (const auto& e : rep.arrays) std::cout << e.name << '\t' << e.rel_error << '\n';
      std::cout << "max_rel_error\t" << rep.max_rel_error << '\n';
      if (tolerance > 0 && !(rep.max_rel_error < tolerance)) {
        std::cerr << "error: gradient check above tolerance " << tolerance << '\n';
        return 4;
      }
    } else if (*generate_cmd) {
      auto gs = gen.settings();
      gs.style = parse_style(style_specs);
      gs.validate();
      json cfg = gen.to_json(gs);
      cfg["count"] = count;
      cfg["output"] = out_path.empty() ? "-" : out_path;
      cfg["trees_out"] = trees_out;
      print_config("generate", cfg);
      const auto loaded = load_model(gen.model);
      const auto results = generate(*loaded.predictor, gs, count, gen.workers);
      std::ofstream file;
      if (!out_path.empty()) file = open_out(out_path);
      std::ostream& out = out_path.empty() ? std::cout : file;
      Corpus trees;
      for (const auto& g : results) {
        out << join_words(merge_subwords(g.sentence)) << '\n';
        trees.sentences.push_back(g.tree);
      }
      if (!trees_out.empty()) write_trees_file(trees_out, trees);
    } else if (*eval_bleu) {
      print_config("eval-bleu", {{"candidates", cand_path}, {"references", ref_path}, {"max_n", max_n}});
      const auto cands = read_text(cand_path);
      if (!ref_path.empty()) std::cout << "bleu\t" << bleu(cands, read_text(ref_path), max_n) << '\n';
      std::cout << "self_bleu\t" << self_bleu(cands, max_n) << '\n';
    } else if (*sweep_cmd) {
      const auto gs = sw.settings();
      so.workers = sw.workers;
      json cfg = sw.to_json(gs);
      cfg.erase("temperature");
      cfg["temperatures"] = so.temperatures;
      cfg["samples"] = so.samples;
      cfg["sentences"] = so.sentences_per_sample;
      cfg["max_n"] = so.max_n;
      cfg["references"] = ref_path;
      print_config("sweep", cfg);
      const auto loaded = load_model(sw.model);
      const auto rep = sweep(*loaded.predictor, gs, so, read_text(ref_path));
      std::cout << "temperature\tbleu_mean\tbleu_std\tself_bleu_mean\tself_bleu_std\n";
      for (const auto& r : rep.rows)
        std::cout << r.temperature << '\t' << r.bleu_mean << '\t' << r.bleu_std << '\t' << r.self_bleu_mean << '\t'
                  << r.self_bleu_std << '\n';
    } else if (*speed) {
      print_config("speedup", {{"trees", in_path}, {"bins", bins}, {"histogram", hist_path}});
      const auto rep = speedup_stats(read_trees_file(in_path), bins);
      print_speedup(rep, std::cout);
      if (!hist_path.empty()) {
        auto out = open_out(hist_path);
        out << "bin_low\tbin_high\tnatural\tbinarized\tideal\n";
        for (const auto& b : rep.histogram)
          out << b.low << '\t' << b.high << '\t' << b.natural << '\t' << b.binarized << '\t' << b.ideal << '\n';
      }
    } else if (*style_cmd) {
      const auto base = se.settings();
      json cfg = se.to_json(base);
      cfg["factors"] = factors;
      cfg["label"] = style_label;
      cfg["count"] = se_count;
      print_config("style-eval", cfg);
      const auto loaded = load_model(se.model);
      std::cout << "factor\tadjective_rate\n";
      for (double f : factors) {
        auto gs = base;
        gs.style = {{style_label, f}};
        gs.validate();
        std::vector<DepTree> trees;
        for (auto& g : generate(*loaded.predictor, gs, se_count, se.workers)) trees.push_back(std::move(g.tree));
        std::cout << f << '\t' << adjective_rate(trees, style_label) << '\n';
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 10 + static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
