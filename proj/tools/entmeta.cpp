// Command line driver: corpus -> split -> tasks -> meta-train -> meta-test -> report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "entmeta/checkpoint.hpp"
#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "entmeta/pipeline.hpp"

namespace {

using namespace entmeta;

constexpr const char* kToolVersion = "0.1.0";

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kBadInput = 3,
  kIo = 4,
  kInfeasible = 5,
  kNumeric = 6,
  kOther = 7,
};

int exit_code(Errc c) {
  switch (c) {
    case Errc::config_error:
    case Errc::invalid_arch:
      return kUsage;
    case Errc::parse_error:
    case Errc::schema_error:
    case Errc::empty_corpus:
    case Errc::token_out_of_vocab:
    case Errc::layout_mismatch:
      return kBadInput;
    case Errc::io_error:
      return kIo;
    case Errc::infeasible_config:
    case Errc::task_infeasible:
    case Errc::class_pool_too_small:
    case Errc::dataset_infeasible:
      return kInfeasible;
    case Errc::non_finite:
    case Errc::non_psd:
    case Errc::non_finite_loss:
      return kNumeric;
    default:
      return kOther;
  }
}

/// Long-form flags; each one that is given overrides the config file.
struct Flags {
  std::string config;
  std::optional<std::string> output, corpus, method, outer_rule;
  std::optional<std::size_t> n_way, k_shot, k_query, max_docs, train_tasks, test_tasks, inner_steps, meta_steps,
      meta_batch, workers, aggregation_interval, threads, u_threshold;
  std::optional<double> rho, inner_lr, meta_lr, gamma, threshold_quantile, threshold_margin, ridge;
  std::optional<std::uint64_t> seed;
  bool plain_mean_validation = false;
  bool no_embeddings = false;
  bool quiet = false;
};

void add_flags(CLI::App& app, Flags& f) {
  app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("-o,--output", f.output, "Run directory for all artifacts");
  app.add_option("--corpus", f.corpus, "Corpus JSON file (synthetic corpus when absent)");
  app.add_option("--method", f.method,
                 "protonet | protonet_eod | contrastproto | anil | anil_hc | reptile | reptile_hc");
  app.add_option("--n-way", f.n_way, "Classes per task");
  app.add_option("--k-shot", f.k_shot, "Minimum support occurrences per class");
  app.add_option("--k-query", f.k_query, "Minimum query occurrences per class");
  app.add_option("--rho", f.rho, "Soft-shot ratio, occurrences per class are capped at floor(rho*K)");
  app.add_option("--max-docs", f.max_docs, "Document cap for each of support and query");
  app.add_option("--train-tasks", f.train_tasks, "Number of meta-training tasks");
  app.add_option("--test-tasks", f.test_tasks, "Number of meta-testing tasks");
  app.add_option("--gamma", f.gamma, "Fraction of classes held out as novel");
  app.add_option("--u-threshold", f.u_threshold, "Classes in fewer documents are forced novel");
  app.add_option("--inner-steps", f.inner_steps, "Inner-loop SGD steps");
  app.add_option("--inner-lr", f.inner_lr, "Inner-loop learning rate");
  app.add_option("--meta-steps", f.meta_steps, "Meta-training steps");
  app.add_option("--meta-batch", f.meta_batch, "Tasks per meta-step");
  app.add_option("--meta-lr", f.meta_lr, "Outer learning rate");
  app.add_option("--outer", f.outer_rule, "Outer update rule: adam | sgd");
  app.add_option("--threshold-quantile", f.threshold_quantile, "contrastproto: support score quantile");
  app.add_option("--threshold-margin", f.threshold_margin, "contrastproto: threshold multiplier");
  app.add_option("--ridge", f.ridge, "Relative covariance ridge");
  app.add_option("--workers", f.workers, "Simulated workers per task");
  app.add_option("--aggregation-interval", f.aggregation_interval, "Local steps between parameter averages");
  app.add_flag("--plain-mean-validation", f.plain_mean_validation, "Average worker losses without token weights");
  app.add_option("--threads", f.threads, "Worker threads for per-task work");
  app.add_option("--seed", f.seed, "Global seed");
  app.add_flag("--no-embeddings", f.no_embeddings, "Skip the embedding dump");
  app.add_flag("-q,--quiet", f.quiet, "No progress output");
}

// Stages after gen-corpus start from the run directory's config.json, so flags
// given to an earlier stage carry over.
RunConfig resolve(const Flags& f, bool inherit) {
  RunConfig c;
  const auto recorded = RunPaths{f.output.value_or(c.output_dir.string())}.config();
  if (!f.config.empty()) {
    c = load_run_config(f.config);
  } else if (inherit && std::filesystem::exists(recorded)) {
    c = load_run_config(recorded);
  }
  if (f.output) c.output_dir = *f.output;
  if (f.corpus) c.corpus_path = *f.corpus;
  if (f.method) c.method = parse_method(*f.method);
  if (f.n_way) c.task.n_way = *f.n_way;
  if (f.k_shot) c.task.k_shot = *f.k_shot;
  if (f.k_query) c.task.k_query = *f.k_query;
  if (f.rho) c.task.rho = *f.rho;
  if (f.max_docs) c.task.max_docs = *f.max_docs;
  if (f.train_tasks) c.n_train_tasks = *f.train_tasks;
  if (f.test_tasks) c.n_test_tasks = *f.test_tasks;
  if (f.gamma) c.gamma = *f.gamma;
  if (f.u_threshold) c.u_threshold = *f.u_threshold;
  if (f.inner_steps) c.inner.steps = *f.inner_steps;
  if (f.inner_lr) c.inner.lr = *f.inner_lr;
  if (f.meta_steps) c.meta_steps = *f.meta_steps;
  if (f.meta_batch) c.meta_batch = *f.meta_batch;
  if (f.meta_lr) c.outer.lr = *f.meta_lr;
  if (f.outer_rule) {
    if (*f.outer_rule == "adam") {
      c.outer.rule = OuterRule::adam;
    } else if (*f.outer_rule == "sgd") {
      c.outer.rule = OuterRule::sgd;
    } else {
      throw Error(Errc::config_error, "--outer must be adam or sgd");
    }
  }
  if (f.threshold_quantile) {
    c.metric.threshold.quantile = *f.threshold_quantile;
    c.threshold_given = true;
  }
  if (f.threshold_margin) {
    c.metric.threshold.margin = *f.threshold_margin;
    c.threshold_given = true;
  }
  if (f.ridge) c.metric.shrinkage.relative = *f.ridge;
  if (f.workers) c.federated.n_workers = *f.workers;
  if (f.aggregation_interval) c.federated.aggregation_interval = *f.aggregation_interval;
  if (f.plain_mean_validation) c.federated.plain_mean_validation = true;
  if (f.threads) c.threads = *f.threads;
  if (f.seed) c.seed = *f.seed;
  if (f.no_embeddings) c.dump_embeddings = false;
  validate_run_config(c);
  return c;
}

TrainObserver progress_printer(const RunConfig& cfg, bool quiet) {
  if (quiet) return {};
  const std::size_t every = std::max<std::size_t>(1, cfg.meta_steps / 20);
  return [every, total = cfg.meta_steps](const TrainLogRecord& r) {
    if ((r.step + 1) % every == 0 || r.step + 1 == total) {
      std::fprintf(stderr, "step %zu/%zu  meta-loss %.5f  grad-norm %.4g\n", r.step + 1, total, r.report.meta_loss,
                   r.report.grad_norm);
    }
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot document entity retrieval: episode sampling, meta-training and evaluation"};
  app.require_subcommand(0, 1);
  bool show_version = false;
  app.add_flag("--version", show_version, "Print tool and schema versions");

  Flags flags;
  auto* gen = app.add_subcommand("gen-corpus", "Write the corpus (synthetic or normalized from --corpus)");
  auto* split = app.add_subcommand("split", "Split classes into base and novel pools");
  auto* sample = app.add_subcommand("sample-tasks", "Sample meta-training and meta-testing tasks");
  auto* train = app.add_subcommand("meta-train", "Meta-train and write a checkpoint and training log");
  auto* test = app.add_subcommand("meta-test", "Evaluate a checkpoint on the meta-testing tasks");
  auto* report = app.add_subcommand("report", "Summarize metrics.json");
  auto* run = app.add_subcommand("run", "All stages in order");
  for (auto* sub : {gen, split, sample, train, test, report, run}) add_flags(*sub, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (show_version) {
    std::printf("entmeta %s\ncorpus schema %d\ntask schema %d\ncheckpoint %d\nrun config %d\n", kToolVersion,
                kCorpusSchemaVersion, kTaskSchemaVersion, kCheckpointVersion, kRunConfigVersion);
    return kOk;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return kUsage;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const RunConfig cfg = resolve(flags, sub != gen && sub != run);
    if (sub == gen) {
      cmd_gen_corpus(cfg);
    } else if (sub == split) {
      cmd_split(cfg);
    } else if (sub == sample) {
      cmd_sample_tasks(cfg);
    } else if (sub == train) {
      cmd_meta_train(cfg, progress_printer(cfg, flags.quiet));
    } else if (sub == test) {
      cmd_meta_test(cfg);
    } else if (sub == report) {
      std::cout << cmd_report(cfg);
    } else if (sub == run) {
      cmd_run(cfg, progress_printer(cfg, flags.quiet));
      if (!flags.quiet) std::cout << read_file(RunPaths{cfg.output_dir}.summary());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
  return kOk;
}
