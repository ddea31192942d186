#include "p2mam/cli.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "p2mam/checkpoint.hpp"
#include "p2mam/corpus.hpp"
#include "p2mam/errors.hpp"
#include "p2mam/evaluation.hpp"
#include "p2mam/parallel.hpp"
#include "p2mam/rng.hpp"
#include "p2mam/training.hpp"

namespace p2mam::cli {

namespace {

// Flags shared by the commands that build or check a model.
struct ModelFlags {
  std::string config;
  std::string variant;
  std::uint64_t seed = 0;
  bool no_pad_mask = false;
  bool no_position_embeddings = false;
  std::string scale;
  std::size_t threads = 0;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* scale_opt = nullptr;
  CLI::Option* no_pad_opt = nullptr;
  CLI::Option* no_pe_opt = nullptr;
  CLI::Option* threads_opt = nullptr;

  void attach(CLI::App* app, bool with_config) {
    if (with_config) app->add_option("--config", config, "key=value configuration file")->check(CLI::ExistingFile);
    variant_opt = app->add_option("--variant", variant, "o|p|op|last|oracle|mean|pop");
    seed_opt = app->add_option("--seed", seed, "seed for initialization and shuffling");
    no_pad_opt = app->add_flag("--no-pad-mask", no_pad_mask, "attend over padding slots too");
    no_pe_opt = app->add_flag("--no-position-embeddings", no_position_embeddings, "drop position embeddings");
    scale_opt = app->add_option("--scale", scale, "multi-head attention scale: full-d|per-head")
                    ->check(CLI::IsMember({"full-d", "per-head"}));
    threads_opt = app->add_option("--threads", threads, "worker threads (default: all cores)");
  }

  // defaults < config file < P2MAM_* environment < flags
  TrainConfig build() const {
    TrainConfig cfg;
    cfg.threads = default_threads();
    if (!config.empty())
      for (const auto& [k, v] : parse_config_file(config)) apply_setting(cfg, k, v);
    for (const auto& [k, v] : environment_overrides()) apply_setting(cfg, k, v);
    if (variant_opt->count() > 0) cfg.hp.variant = parse_variant(variant);
    if (seed_opt->count() > 0) {
      cfg.hp.seed = seed;
      cfg.shuffle_seed = seed;
    }
    if (no_pad_mask) cfg.hp.use_pad_mask = false;
    if (no_position_embeddings) cfg.hp.use_position_embeddings = false;
    if (scale_opt->count() > 0) apply_setting(cfg, "scale", scale);
    if (threads_opt->count() > 0) cfg.threads = threads;
    if (cfg.threads < 1) throw ConfigError("--threads must be >= 1");
    return cfg;
  }

  // Architecture comes from the checkpoint; any flag that was given must agree.
  void check_against(const CheckpointHeader& h) const {
    if (variant_opt->count() > 0 && parse_variant(variant) != h.variant) {
      throw FormatError(fmt::format("--variant {} but the checkpoint was trained as {}", variant,
                                    variant_name(h.variant)));
    }
    if (no_position_embeddings && h.use_position_embeddings) {
      throw FormatError("--no-position-embeddings, but the checkpoint was trained with position embeddings");
    }
    if (no_pad_mask && h.use_pad_mask) {
      throw FormatError("--no-pad-mask, but the checkpoint was trained with pad masking");
    }
    if (scale_opt->count() > 0) {
      const ScaleMode want = scale == "per-head" ? ScaleMode::PerHead : ScaleMode::FullD;
      if (want != h.attention_scale_mode) throw FormatError("--scale disagrees with the checkpoint");
    }
  }
};

class Output {
 public:
  Output(const std::string& path, std::ostream& fallback) : fallback_(fallback) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
      if (!*file_) throw IoError(fmt::format("cannot write '{}'", path));
    }
  }
  std::ostream& stream() { return file_ ? *file_ : fallback_; }
  void finish() {
    if (file_) {
      file_->flush();
      if (!*file_) throw IoError("error writing output file");
    }
  }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream& fallback_;
};

const std::vector<Example>& pick_split(const Corpus& corpus, const std::string& split) {
  if (split == "test") return corpus.test;
  if (split == "train") return corpus.train;
  throw ConfigError(fmt::format("--split must be test or train, not '{}'", split));
}

struct LoadedModel {
  HyperParams hp;
  std::optional<ModelParams> params;
};

// Loads and cross-checks a checkpoint, or sets up the parameter-free pop
// baseline. pop scores full sessions, so n covers the longest input.
LoadedModel load_model(const ModelFlags& flags, const std::string& checkpoint, const Corpus& corpus,
                       const std::vector<Example>& examples) {
  LoadedModel model;
  const bool pop = flags.variant_opt->count() > 0 && parse_variant(flags.variant) == Variant::Pop;
  if (pop) {
    if (!checkpoint.empty()) throw ConfigError("pop takes no --checkpoint");
    model.hp.variant = Variant::Pop;
    std::size_t longest = 1;
    for (const auto& e : examples) longest = std::max(longest, e.input.size());
    model.hp.n = longest;
    model.hp.d = 1;
    model.hp.b = 1;
    return model;
  }
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required for learned variants");
  Checkpoint ck = load_checkpoint(checkpoint);
  flags.check_against(ck.header);
  if (ck.header.m != corpus.m) {
    throw FormatError(fmt::format("checkpoint has m = {}, corpus has {} items", ck.header.m, corpus.m));
  }
  ck.header.apply_to(model.hp);
  model.params = std::move(ck.params);
  return model;
}

std::vector<std::size_t> parse_cutoffs(const std::string& text) {
  std::vector<std::size_t> ks;
  for (const auto& item : split_list(text)) {
    std::size_t pos = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || k == 0) throw ConfigError(fmt::format("--k: bad cutoff '{}'", item));
    ks.push_back(k);
  }
  std::sort(ks.begin(), ks.end());
  return ks;
}

std::string eval_label(Variant v) {
  // The oracle reads the label; its numbers are analysis, never a result.
  return v == Variant::Oracle ? "oracle:analysis" : std::string(variant_name(v));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Session-based next-item recommendation with position-sensitive and prospective attention",
               "p2mam"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "filter, index, split and augment session files");
  std::string input, test_file, out_dir;
  double holdout = 0.2;
  FilterOptions filter;
  prepare->add_option("--input", input, "session file (one session per line)")->required();
  auto* test_opt = prepare->add_option("--test", test_file, "separate test session file");
  auto* holdout_opt = prepare->add_option("--holdout", holdout, "fraction of trailing sessions held out");
  test_opt->excludes(holdout_opt);
  prepare->add_option("--min-item-count", filter.min_item_count, "drop items seen fewer times")->capture_default_str();
  prepare->add_option("--min-session-len", filter.min_session_len, "drop shorter sessions")->capture_default_str();
  prepare->add_option("--out", out_dir, "output corpus directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a prepared corpus");
  ModelFlags train_flags;
  std::string corpus_dir, checkpoint, out_path;
  bool validate = false;
  train_flags.attach(train_cmd, true);
  train_cmd->add_option("--corpus", corpus_dir)->required();
  train_cmd->add_option("--checkpoint", checkpoint, "checkpoint to write")->required();
  train_cmd->add_option("--out", out_path, "training log (TSV); default stdout");
  train_cmd->add_flag("--validate", validate,
                      "hold out the last 20% of training sessions and keep the best epoch in <checkpoint>.best");

  // grid
  auto* grid_cmd = app.add_subcommand("grid", "grid search on the training sessions");
  ModelFlags grid_flags;
  grid_flags.attach(grid_cmd, true);
  grid_cmd->add_option("--corpus", corpus_dir)->required();
  grid_cmd->add_option("--out", out_path, "grid table (TSV); default stdout");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "ranking metrics on a corpus split");
  ModelFlags eval_flags;
  std::string k_text = "5,10,20", split = "test";
  bool analysis = false;
  eval_flags.attach(eval_cmd, false);
  eval_cmd->add_option("--corpus", corpus_dir)->required();
  eval_cmd->add_option("--checkpoint", checkpoint);
  eval_cmd->add_option("--k", k_text, "comma-separated cutoffs")->capture_default_str();
  eval_cmd->add_option("--split", split, "test|train")->capture_default_str();
  eval_cmd->add_option("--out", out_path, "metrics (TSV); default stdout");
  eval_cmd->add_flag("--analysis", analysis, "allow the label-reading oracle variant");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "single-threaded inference latency");
  ModelFlags bench_flags;
  std::size_t repetitions = 3, limit = 1000, random_items = 0, rand_d = 128, rand_n = 10, rand_b = 2;
  bench_flags.attach(bench_cmd, false);
  bench_cmd->add_option("--corpus", corpus_dir);
  bench_cmd->add_option("--checkpoint", checkpoint);
  bench_cmd->add_option("--repetitions", repetitions)->capture_default_str();
  bench_cmd->add_option("--limit", limit, "examples to time")->capture_default_str();
  bench_cmd->add_option("--split", split)->capture_default_str();
  auto* random_opt = bench_cmd->add_option("--random-items", random_items,
                                           "benchmark randomly initialized parameters with this many items");
  bench_cmd->add_option("--d", rand_d)->capture_default_str();
  bench_cmd->add_option("--n", rand_n)->capture_default_str();
  bench_cmd->add_option("--b", rand_b)->capture_default_str();
  bench_cmd->add_option("--out", out_path);

  // export-attention
  auto* attn_cmd = app.add_subcommand("export-attention", "mean attention by session length and position");
  ModelFlags attn_flags;
  std::size_t max_len = 8;
  attn_flags.attach(attn_cmd, false);
  attn_cmd->add_option("--corpus", corpus_dir)->required();
  attn_cmd->add_option("--checkpoint", checkpoint)->required();
  attn_cmd->add_option("--split", split)->capture_default_str();
  attn_cmd->add_option("--max-len", max_len)->capture_default_str();
  attn_cmd->add_option("--out", out_path);

  // cosine
  auto* cos_cmd = app.add_subcommand("cosine", "cosine similarity of predictions to item embeddings");
  ModelFlags cos_flags;
  cos_flags.attach(cos_cmd, false);
  cos_cmd->add_option("--corpus", corpus_dir)->required();
  cos_cmd->add_option("--checkpoint", checkpoint)->required();
  cos_cmd->add_option("--split", split)->capture_default_str();
  cos_cmd->add_option("--out", out_path);

  // inspect-checkpoint
  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print a checkpoint header");
  inspect_cmd->add_option("--checkpoint", checkpoint)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kBadFlags;
  }

  try {
    if (prepare->parsed()) {
      const auto raw = parse_sessions(input);
      if (raw.skipped_blank_lines > 0) err << "warning: skipped " << raw.skipped_blank_lines << " blank lines\n";
      Corpus corpus;
      if (test_opt->count() > 0) {
        const auto raw_test = parse_sessions(test_file);
        corpus = build_corpus(raw.sessions, raw_test.sessions, filter);
      } else {
        corpus = build_corpus(raw.sessions, SplitRule::fraction(holdout), filter);
      }
      save_corpus(corpus, out_dir);
      const CorpusStats s = corpus_stats(corpus);
      out << fmt::format("items\t{}\ntrain\t{}\ntest\t{}\navg_length\t{:.2f}\naug_train\t{}\naug_test\t{}\n"
                         "aug_avg_length\t{:.2f}\n",
                         s.items, s.train_sessions, s.test_sessions, s.avg_length, s.aug_train, s.aug_test,
                         s.aug_avg_length);
      return kOk;
    }

    if (train_cmd->parsed()) {
      TrainConfig cfg = train_flags.build();
      cfg.checkpoint_path = checkpoint;
      cfg.validate();
      const Corpus corpus = load_corpus(corpus_dir);
      Output log(out_path, out);
      TrainResult result;
      if (validate) {
        const SplitResult split_sessions = split_holdout(corpus.train_sessions, SplitRule::fraction(0.2));
        const auto valid = augment_all(split_sessions.test);
        result = train(augment_all(split_sessions.train), corpus.m, cfg, &valid, &log.stream());
      } else {
        result = train(corpus.train, corpus.m, cfg, nullptr, &log.stream());
      }
      log.finish();
      return kOk;
    }

    if (grid_cmd->parsed()) {
      const TrainConfig cfg = grid_flags.build();
      cfg.validate();
      const Corpus corpus = load_corpus(corpus_dir);
      const GridResult result = grid_search(corpus, cfg);
      Output table(out_path, out);
      write_grid_tsv(table.stream(), result);
      table.finish();
      for (const auto& w : result.warnings) err << "warning: " << w << '\n';
      return kOk;
    }

    if (eval_cmd->parsed()) {
      const auto ks = parse_cutoffs(k_text);
      const Corpus corpus = load_corpus(corpus_dir);
      const auto& examples = pick_split(corpus, split);
      const LoadedModel model = load_model(eval_flags, checkpoint, corpus, examples);
      if (model.hp.variant == Variant::Oracle && !analysis) {
        throw ConfigError("the oracle variant reads the ground-truth label; pass --analysis to run it");
      }
      const std::size_t threads = eval_flags.threads_opt->count() > 0 ? eval_flags.threads : default_threads();
      const MetricsReport report =
          evaluate(examples, model.params ? &*model.params : nullptr, model.hp, corpus.m, ks, threads);
      Output metrics(out_path, out);
      write_metrics_tsv(metrics.stream(), eval_label(model.hp.variant), report);
      metrics.finish();
      return kOk;
    }

    if (bench_cmd->parsed()) {
      LoadedModel model;
      std::vector<Example> examples;
      std::size_t m = 0;
      if (random_opt->count() > 0) {
        if (!checkpoint.empty()) throw ConfigError("--random-items excludes --checkpoint");
        m = random_items;
        model.hp.variant = bench_flags.variant_opt->count() > 0 ? parse_variant(bench_flags.variant) : Variant::OP;
        model.hp.d = rand_d;
        model.hp.n = rand_n;
        model.hp.b = rand_b;
        model.hp.validate();
        if (m == 0) throw ConfigError("--random-items must be >= 1");
        if (has_parameters(model.hp.variant)) model.params = init_params(m, model.hp, bench_flags.seed);
        Rng rng(bench_flags.seed);
        for (std::size_t i = 0; i < limit; ++i) {
          Example e;
          const std::size_t len = 1 + rng.below(rand_n);
          for (std::size_t j = 0; j < len; ++j) e.input.push_back(static_cast<ItemId>(1 + rng.below(m)));
          e.target = static_cast<ItemId>(1 + rng.below(m));
          examples.push_back(std::move(e));
        }
      } else {
        if (corpus_dir.empty()) throw ConfigError("bench needs --corpus or --random-items");
        const Corpus corpus = load_corpus(corpus_dir);
        m = corpus.m;
        const auto& all = pick_split(corpus, split);
        examples.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(limit, all.size())));
        model = load_model(bench_flags, checkpoint, corpus, examples);
      }
      const BenchReport report =
          bench_inference(model.params ? &*model.params : nullptr, model.hp, m, examples, repetitions);
      Output bench(out_path, out);
      write_bench_tsv(bench.stream(), std::string(variant_name(model.hp.variant)), report);
      bench.finish();
      return kOk;
    }

    if (attn_cmd->parsed() || cos_cmd->parsed()) {
      const ModelFlags& flags = attn_cmd->parsed() ? attn_flags : cos_flags;
      const Corpus corpus = load_corpus(corpus_dir);
      const auto& examples = pick_split(corpus, split);
      const LoadedModel model = load_model(flags, checkpoint, corpus, examples);
      Output report(out_path, out);
      if (attn_cmd->parsed()) {
        write_attention_csv(report.stream(), attention_trace_export(*model.params, model.hp, examples, max_len));
      } else {
        const CosineReport c = cosine_analysis(*model.params, model.hp, examples);
        write_cosine_tsv(report.stream(), eval_label(model.hp.variant), c);
        if (c.skipped_pairs > 0) err << "warning: skipped " << c.skipped_pairs << " zero-norm pairs\n";
      }
      report.finish();
      return kOk;
    }

    if (inspect_cmd->parsed()) {
      const CheckpointHeader h = read_checkpoint_header(checkpoint);
      const Checkpoint ck = load_checkpoint(checkpoint);
      std::size_t values = 0;
      for (const Matrix* t : ck.params.tensors()) values += t->size();
      out << fmt::format(
          "variant\t{}\nm\t{}\nd\t{}\nn\t{}\nb\t{}\nposition_embeddings\t{}\npad_mask\t{}\nscale\t{}\n"
          "parameters\t{}\n",
          variant_name(h.variant), h.m, h.d, h.n, h.b, h.use_position_embeddings, h.use_pad_mask,
          h.attention_scale_mode == ScaleMode::PerHead ? "per-head" : "full-d", values);
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kBadFlags;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kFormatError;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  }
  return kBadFlags;
}

}  // namespace p2mam::cli
