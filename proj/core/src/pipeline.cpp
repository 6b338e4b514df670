#include "entmeta/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <numeric>
#include <set>

#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "entmeta/parallel.hpp"
#include "entmeta/rng.hpp"
#include "json_codec.hpp"

namespace entmeta {

using detail::json;

void validate_run_config(const RunConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(Errc::config_error, msg); };
  validate_task_spec(cfg.task);
  validate_inner_config(cfg.inner);
  validate_federated_config(cfg.federated);
  if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0)) fail("gamma must lie in (0, 1)");
  if (cfg.n_train_tasks == 0 || cfg.n_test_tasks == 0) fail("task counts must be >= 1");
  if (cfg.meta_batch == 0) fail("meta batch size must be >= 1");
  if (cfg.threads == 0) fail("threads must be >= 1");
  if (!(cfg.outer.lr > 0.0)) fail("meta learning rate must be > 0");
  if (!(cfg.metric.threshold.quantile >= 0.0 && cfg.metric.threshold.quantile <= 1.0)) {
    fail("threshold quantile must lie in [0, 1]");
  }
  if (!(cfg.metric.threshold.margin > 0.0)) fail("threshold margin must be > 0");
  if (!(cfg.metric.shrinkage.relative >= 0.0 && cfg.metric.shrinkage.absolute > 0.0)) {
    fail("ridge must be non-negative with a positive absolute floor");
  }
  if (cfg.threshold_given && cfg.method != Method::contrastproto) {
    fail("threshold settings apply to contrastproto only");
  }
  EncoderArch probe = cfg.arch;
  if (probe.vocab_size == 0) probe.vocab_size = 1;
  validate_arch(probe);
}

namespace {

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw Error(Errc::config_error, std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(Errc::config_error, "unknown config key '" + std::string(where) + "." + key + "'");
    }
  }
}

template <class T>
void take(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::config_error, std::string("bad config value for '") + key + "': " + e.what());
  }
}

template <class T>
void take_range(const json& j, const char* key, Range<T>& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  std::vector<T> v;
  take(j, key, v);
  if (v.size() != 2) throw Error(Errc::config_error, std::string("'") + key + "' must be [min, max]");
  out = {v[0], v[1]};
}

}  // namespace

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["version"] = kRunConfigVersion;
  const auto& s = c.synthetic;
  j["corpus"] = {
      {"path", c.corpus_path ? json(c.corpus_path->string()) : json(nullptr)},
      {"synthetic",
       {{"n_classes", s.n_classes},
        {"n_documents", s.n_documents},
        {"doc_length", {s.doc_length_range.min, s.doc_length_range.max}},
        {"occurrences_per_doc", {s.occurrences_per_doc_range.min, s.occurrences_per_doc_range.max}},
        {"class_frequency_skew", s.class_frequency_skew},
        {"feature_noise", s.feature_noise},
        {"span_length", {s.span_length_range.min, s.span_length_range.max}},
        {"background_vocab", s.background_vocab},
        {"tokens_per_class", s.tokens_per_class},
        {"key_token_prob", s.key_token_prob},
        {"grid_columns", s.grid_columns}}}};
  j["split"] = {{"gamma", c.gamma}, {"u_threshold", c.u_threshold}};
  j["task"] = {{"n_way", c.task.n_way},         {"k_shot", c.task.k_shot},
               {"k_query", c.task.k_query},     {"rho", c.task.rho},
               {"max_docs", c.task.max_docs},   {"n_train_tasks", c.n_train_tasks},
               {"n_test_tasks", c.n_test_tasks}, {"retry_budget", c.retry_budget}};
  j["method"] = method_name(c.method);
  j["inner"] = {{"steps", c.inner.steps}, {"lr", c.inner.lr}};
  j["outer"] = {{"rule", c.outer.rule == OuterRule::adam ? "adam" : "sgd"},
                {"lr", c.outer.lr},
                {"beta1", c.outer.beta1},
                {"beta2", c.outer.beta2},
                {"eps", c.outer.eps},
                {"meta_steps", c.meta_steps},
                {"meta_batch", c.meta_batch}};
  j["encoder"] = {{"vocab_size", c.arch.vocab_size}, {"input_dim", c.arch.input_dim},
                  {"hidden_dim", c.arch.hidden_dim}, {"depth", c.arch.depth},
                  {"output_dim", c.arch.output_dim}, {"window", c.arch.window}};
  j["metric"] = {{"ridge_relative", c.metric.shrinkage.relative}, {"ridge_absolute", c.metric.shrinkage.absolute}};
  if (c.threshold_given) {
    j["metric"]["threshold_quantile"] = c.metric.threshold.quantile;
    j["metric"]["threshold_margin"] = c.metric.threshold.margin;
  }
  j["federated"] = {{"workers", c.federated.n_workers},
                    {"aggregation_interval", c.federated.aggregation_interval},
                    {"plain_mean_validation", c.federated.plain_mean_validation}};
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir.string();
  j["dump_embeddings"] = c.dump_embeddings;
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(std::string_view text, const RunConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::config_error, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = base;
  check_keys(j, "config",
             {"version", "corpus", "split", "task", "method", "inner", "outer", "encoder", "metric", "federated", "seed",
              "threads", "output_dir", "dump_embeddings"});
  if (j.contains("version") && j["version"] != kRunConfigVersion) {
    throw Error(Errc::config_error, "unsupported config version");
  }
  if (auto it = j.find("corpus"); it != j.end()) {
    check_keys(*it, "corpus", {"path", "synthetic"});
    if (it->contains("path")) {
      const auto& p = (*it)["path"];
      if (p.is_null()) {
        c.corpus_path.reset();
      } else {
        std::string s;
        take(*it, "path", s);
        c.corpus_path = s;
      }
    }
    if (auto st = it->find("synthetic"); st != it->end()) {
      check_keys(*st, "corpus.synthetic",
                 {"n_classes", "n_documents", "doc_length", "occurrences_per_doc", "class_frequency_skew",
                  "feature_noise", "span_length", "background_vocab", "tokens_per_class", "key_token_prob",
                  "grid_columns"});
      auto& s = c.synthetic;
      take(*st, "n_classes", s.n_classes);
      take(*st, "n_documents", s.n_documents);
      take_range(*st, "doc_length", s.doc_length_range);
      take_range(*st, "occurrences_per_doc", s.occurrences_per_doc_range);
      take(*st, "class_frequency_skew", s.class_frequency_skew);
      take(*st, "feature_noise", s.feature_noise);
      take_range(*st, "span_length", s.span_length_range);
      take(*st, "background_vocab", s.background_vocab);
      take(*st, "tokens_per_class", s.tokens_per_class);
      take(*st, "key_token_prob", s.key_token_prob);
      take(*st, "grid_columns", s.grid_columns);
    }
  }
  if (auto it = j.find("split"); it != j.end()) {
    check_keys(*it, "split", {"gamma", "u_threshold"});
    take(*it, "gamma", c.gamma);
    take(*it, "u_threshold", c.u_threshold);
  }
  if (auto it = j.find("task"); it != j.end()) {
    check_keys(*it, "task",
               {"n_way", "k_shot", "k_query", "rho", "max_docs", "n_train_tasks", "n_test_tasks", "retry_budget"});
    take(*it, "n_way", c.task.n_way);
    take(*it, "k_shot", c.task.k_shot);
    take(*it, "k_query", c.task.k_query);
    take(*it, "rho", c.task.rho);
    take(*it, "max_docs", c.task.max_docs);
    take(*it, "n_train_tasks", c.n_train_tasks);
    take(*it, "n_test_tasks", c.n_test_tasks);
    take(*it, "retry_budget", c.retry_budget);
  }
  if (j.contains("method")) {
    std::string m;
    take(j, "method", m);
    c.method = parse_method(m);
  }
  if (auto it = j.find("inner"); it != j.end()) {
    check_keys(*it, "inner", {"steps", "lr"});
    take(*it, "steps", c.inner.steps);
    take(*it, "lr", c.inner.lr);
  }
  if (auto it = j.find("outer"); it != j.end()) {
    check_keys(*it, "outer", {"rule", "lr", "beta1", "beta2", "eps", "meta_steps", "meta_batch"});
    if (it->contains("rule")) {
      std::string r;
      take(*it, "rule", r);
      if (r == "adam") {
        c.outer.rule = OuterRule::adam;
      } else if (r == "sgd") {
        c.outer.rule = OuterRule::sgd;
      } else {
        throw Error(Errc::config_error, "outer.rule must be adam or sgd");
      }
    }
    take(*it, "lr", c.outer.lr);
    take(*it, "beta1", c.outer.beta1);
    take(*it, "beta2", c.outer.beta2);
    take(*it, "eps", c.outer.eps);
    take(*it, "meta_steps", c.meta_steps);
    take(*it, "meta_batch", c.meta_batch);
  }
  if (auto it = j.find("encoder"); it != j.end()) {
    check_keys(*it, "encoder", {"vocab_size", "input_dim", "hidden_dim", "depth", "output_dim", "window"});
    take(*it, "vocab_size", c.arch.vocab_size);
    take(*it, "input_dim", c.arch.input_dim);
    take(*it, "hidden_dim", c.arch.hidden_dim);
    take(*it, "depth", c.arch.depth);
    take(*it, "output_dim", c.arch.output_dim);
    take(*it, "window", c.arch.window);
  }
  if (auto it = j.find("metric"); it != j.end()) {
    check_keys(*it, "metric", {"ridge_relative", "ridge_absolute", "threshold_quantile", "threshold_margin"});
    take(*it, "ridge_relative", c.metric.shrinkage.relative);
    take(*it, "ridge_absolute", c.metric.shrinkage.absolute);
    if (it->contains("threshold_quantile") || it->contains("threshold_margin")) c.threshold_given = true;
    take(*it, "threshold_quantile", c.metric.threshold.quantile);
    take(*it, "threshold_margin", c.metric.threshold.margin);
  }
  if (auto it = j.find("federated"); it != j.end()) {
    check_keys(*it, "federated", {"workers", "aggregation_interval", "plain_mean_validation"});
    take(*it, "workers", c.federated.n_workers);
    take(*it, "aggregation_interval", c.federated.aggregation_interval);
    take(*it, "plain_mean_validation", c.federated.plain_mean_validation);
  }
  take(j, "seed", c.seed);
  take(j, "threads", c.threads);
  if (j.contains("output_dir")) {
    std::string o;
    take(j, "output_dir", o);
    c.output_dir = o;
  }
  take(j, "dump_embeddings", c.dump_embeddings);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  return run_config_from_json(read_file(path), base);
}

std::uint64_t stage_seed(const RunConfig& cfg, Stage stage) noexcept {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(stage));
}

Corpus make_corpus(const RunConfig& cfg) {
  if (cfg.corpus_path) return load_corpus(*cfg.corpus_path);
  SyntheticConfig s = cfg.synthetic;
  s.seed = stage_seed(cfg, Stage::corpus);
  return generate_synthetic_corpus(s);
}

ClassSplit make_split(const Corpus& corpus, const RunConfig& cfg) {
  return split_classes(corpus, cfg.gamma, cfg.u_threshold, stage_seed(cfg, Stage::split));
}

EpisodeDataset make_tasks(const Corpus& corpus, const ClassSplit& split, const RunConfig& cfg, Phase phase) {
  TaskSpec spec = cfg.task;
  spec.phase = phase;
  spec.seed = stage_seed(cfg, phase == Phase::train ? Stage::train_tasks : Stage::test_tasks);
  const std::size_t n = phase == Phase::train ? cfg.n_train_tasks : cfg.n_test_tasks;
  return sample_meta_dataset(corpus, split, spec, n, cfg.retry_budget, cfg.threads);
}

std::size_t corpus_vocab_size(const Corpus& corpus) {
  std::int64_t top = -1;
  for (const auto& d : corpus.documents) {
    for (const auto& t : d.tokens) top = std::max<std::int64_t>(top, t.token_id);
  }
  return static_cast<std::size_t>(top + 1);
}

EncoderArch resolve_arch(const RunConfig& cfg, const Corpus& corpus) {
  EncoderArch a = cfg.arch;
  const std::size_t need = corpus_vocab_size(corpus);
  if (a.vocab_size == 0) a.vocab_size = need;
  if (a.vocab_size < need) {
    throw Error(Errc::token_out_of_vocab, "corpus token ids exceed the configured vocabulary size");
  }
  validate_arch(a);
  return a;
}

std::string train_log_line(const TrainLogRecord& rec) {
  json j;
  j["step"] = rec.step;
  j["task_losses"] = rec.report.task_losses;
  j["meta_loss"] = rec.report.meta_loss;
  j["grad_norm"] = rec.report.grad_norm;
  j["wall_seconds"] = rec.wall_seconds;
  if (!rec.worker_losses.empty()) j["worker_losses"] = rec.worker_losses;
  return j.dump() + "\n";
}

namespace {

std::vector<TaskPartition> partitions_for(const RunConfig& cfg, std::span<const Task> tasks, std::uint64_t salt) {
  std::vector<TaskPartition> out;
  if (cfg.federated.n_workers <= 1) return out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto shards =
        partition_task(tasks[i], cfg.federated.n_workers, derive_seed(stage_seed(cfg, Stage::partition), salt + i));
    out.push_back(to_partition(shards));
  }
  return out;
}

std::vector<WorkerShard> shards_from(const TaskPartition& p) {
  std::vector<WorkerShard> out;
  for (std::size_t w = 0; w < p.support.size(); ++w) out.push_back({w, p.support[w], p.query[w]});
  return out;
}

}  // namespace

MetaParams meta_train(const RunConfig& cfg, const EncoderArch& arch, const EpisodeDataset& train,
                      const TrainObserver& observer) {
  validate_run_config(cfg);
  if (train.tasks.empty()) throw Error(Errc::config_error, "no training tasks");
  MetaParams params = init_meta_params(arch, cfg.task.n_way, stage_seed(cfg, Stage::init));
  MetaOptimizer optimizer(params, cfg.outer);
  const std::size_t n = train.tasks.size();
  std::vector<std::size_t> order;
  std::size_t cursor = n;
  std::size_t epoch = 0;
  for (std::size_t step = 0; step < cfg.meta_steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<Task> batch;
    for (std::size_t b = 0; b < cfg.meta_batch; ++b) {
      if (cursor == n) {
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(stage_seed(cfg, Stage::batch_order), epoch++));
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(train.tasks[order[cursor++]]);
    }
    const auto parts = partitions_for(cfg, batch, step * cfg.meta_batch);
    TrainLogRecord rec;
    rec.step = step;
    if (!parts.empty() && uses_decoder(cfg.method)) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::vector<double> losses;
        for (const auto& w : worker_query_losses(params, batch[i], shards_from(parts[i]), method_head(cfg.method))) {
          losses.push_back(w.loss);
        }
        rec.worker_losses.push_back(std::move(losses));
      }
    }
    MetaStepOptions opts;
    opts.threads = cfg.threads;
    opts.partitions = parts;
    rec.report = meta_step(cfg.method, params, batch, cfg.inner, optimizer, opts);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (observer) observer(rec);
  }
  return params;
}

TestOutcome meta_test(const RunConfig& cfg, const MetaParams& params, const EpisodeDataset& test) {
  validate_run_config(cfg);
  const auto parts = partitions_for(cfg, test.tasks, std::uint64_t{1} << 40);
  std::vector<TaskPrediction> preds(test.tasks.size());
  std::vector<TaskEvaluation> evals(test.tasks.size());
  parallel_for(test.tasks.size(), cfg.threads, [&](std::size_t i) {
    preds[i] = predict_task(cfg.method, params, test.tasks[i], cfg.inner, cfg.metric,
                            parts.empty() ? nullptr : &parts[i]);
    evals[i] = evaluate_task(test.tasks[i], preds[i].labels, preds[i].itd_score);
  });
  TestOutcome out;
  out.report = micro_prf1(evals);
  for (std::size_t i = 0; i < evals.size(); ++i) {
    if (evals[i].auroc) out.roc.push_back(roc_points(evals[i].itd_scores, evals[i].is_itd, i));
    if (cfg.dump_embeddings) {
      auto recs = embedding_records(i, test.tasks[i], preds[i].query_embeddings, preds[i].labels, preds[i].itd_score);
      out.embeddings.insert(out.embeddings.end(), std::make_move_iterator(recs.begin()),
                            std::make_move_iterator(recs.end()));
    }
  }
  return out;
}

namespace {

RunPaths paths(const RunConfig& cfg) { return RunPaths{cfg.output_dir}; }

void require_input(const std::filesystem::path& p, std::string_view producer) {
  if (!std::filesystem::exists(p)) {
    throw Error(Errc::io_error, "missing " + p.string() + " (run '" + std::string(producer) + "' first)");
  }
}

}  // namespace

void cmd_gen_corpus(const RunConfig& cfg) {
  validate_run_config(cfg);
  const auto p = paths(cfg);
  write_file_atomic(p.config(), run_config_to_json(cfg));
  save_corpus(make_corpus(cfg), p.corpus());
}

void cmd_split(const RunConfig& cfg) {
  validate_run_config(cfg);
  const auto p = paths(cfg);
  require_input(p.corpus(), "gen-corpus");
  write_file_atomic(p.config(), run_config_to_json(cfg));
  save_split(make_split(load_corpus(p.corpus()), cfg), p.split());
}

void cmd_sample_tasks(const RunConfig& cfg) {
  validate_run_config(cfg);
  const auto p = paths(cfg);
  require_input(p.corpus(), "gen-corpus");
  require_input(p.split(), "split");
  const Corpus corpus = load_corpus(p.corpus());
  const ClassSplit split = load_split(p.split());
  write_file_atomic(p.config(), run_config_to_json(cfg));
  save_episode_dataset(make_tasks(corpus, split, cfg, Phase::train), p.train_tasks());
  save_episode_dataset(make_tasks(corpus, split, cfg, Phase::test), p.test_tasks());
}

void cmd_meta_train(const RunConfig& cfg, const TrainObserver& progress) {
  validate_run_config(cfg);
  const auto p = paths(cfg);
  require_input(p.corpus(), "gen-corpus");
  require_input(p.train_tasks() / "manifest.json", "sample-tasks");
  const EncoderArch arch = resolve_arch(cfg, load_corpus(p.corpus()));
  const EpisodeDataset train = load_episode_dataset(p.train_tasks());
  write_file_atomic(p.config(), run_config_to_json(cfg));
  std::string log;
  const MetaParams params = meta_train(cfg, arch, train, [&](const TrainLogRecord& r) {
    log += train_log_line(r);
    if (progress) progress(r);
  });
  write_file_atomic(p.train_log(), log);
  save_checkpoint(p.checkpoint(), params, {cfg.seed, std::string(method_name(cfg.method)), cfg.meta_steps});
}

void cmd_meta_test(const RunConfig& cfg) {
  validate_run_config(cfg);
  const auto p = paths(cfg);
  require_input(p.checkpoint(), "meta-train");
  require_input(p.test_tasks() / "manifest.json", "sample-tasks");
  const Checkpoint ckpt = load_checkpoint(p.checkpoint());
  if (ckpt.info.method != method_name(cfg.method)) {
    throw Error(Errc::config_error, "checkpoint was trained with method '" + ckpt.info.method + "', not '" +
                                        std::string(method_name(cfg.method)) + "'");
  }
  const EpisodeDataset test = load_episode_dataset(p.test_tasks());
  write_file_atomic(p.config(), run_config_to_json(cfg));
  const TestOutcome out = meta_test(cfg, ckpt.params, test);
  write_file_atomic(p.metrics(), report_to_json(out.report));
  std::filesystem::remove_all(p.roc_dir());
  for (const auto& c : out.roc) {
    char name[32];
    std::snprintf(name, sizeof name, "task_%05zu.csv", c.task_id);
    write_file_atomic(p.roc_dir() / name, roc_to_csv(c));
  }
  if (cfg.dump_embeddings) dump_embeddings(p.embeddings(), out.embeddings);
}

std::string cmd_report(const RunConfig& cfg) {
  const auto p = paths(cfg);
  require_input(p.metrics(), "meta-test");
  const MetricsReport r = report_from_json(read_file(p.metrics()));
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "method        %s\n"
                "tasks         %zu\n"
                "precision     %.4f\n"
                "recall        %.4f\n"
                "micro F1      %.4f\n"
                "mean AUROC    %.4f  (%zu single-class tasks skipped)\n"
                "pooled AUROC  %s\n"
                "spans         true %zu  predicted %zu  matched %zu\n",
                std::string(method_name(cfg.method)).c_str(), r.n_tasks, r.precision, r.recall, r.micro_f1,
                r.mean_auroc, r.n_auroc_skipped,
                r.pooled_auroc ? std::to_string(*r.pooled_auroc).c_str() : "n/a", r.counts.n_true, r.counts.n_pred,
                r.counts.n_matched);
  std::string text = buf;
  write_file_atomic(p.summary(), text);
  return text;
}

void cmd_run(const RunConfig& cfg, const TrainObserver& progress) {
  cmd_gen_corpus(cfg);
  cmd_split(cfg);
  cmd_sample_tasks(cfg);
  cmd_meta_train(cfg, progress);
  cmd_meta_test(cfg);
  cmd_report(cfg);
}

}  // namespace entmeta
