#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "entmeta/checkpoint.hpp"
#include "entmeta/corpus.hpp"
#include "entmeta/eval.hpp"
#include "entmeta/fedsim.hpp"
#include "entmeta/meta.hpp"
#include "entmeta/sampler.hpp"

namespace entmeta {

inline constexpr int kRunConfigVersion = 1;

/// Everything a run depends on. One seed fans out to the stage seeds below.
struct RunConfig {
  std::optional<std::filesystem::path> corpus_path;  // synthetic when empty
  SyntheticConfig synthetic;

  double gamma = 0.6;
  std::size_t u_threshold = 20;

  TaskSpec task;  // seed and phase are set per stage
  std::size_t n_train_tasks = 256;
  std::size_t n_test_tasks = 64;
  std::size_t retry_budget = 64;

  Method method = Method::contrastproto;
  InnerLoopConfig inner;
  std::size_t meta_steps = 300;
  std::size_t meta_batch = 4;
  MetaOptimizerConfig outer;

  EncoderArch arch;  // vocab_size 0 means "derive from the corpus"
  MetricTestConfig metric;
  /// Set when a threshold field was given explicitly; only contrastproto uses it.
  bool threshold_given = false;

  FederatedConfig federated;
  std::size_t threads = 1;
  std::uint64_t seed = 42;
  std::filesystem::path output_dir = "run";
  bool dump_embeddings = true;

  RunConfig() { arch.vocab_size = 0; }
};

/// Throws ConfigError on the first invalid field.
void validate_run_config(const RunConfig& cfg);

std::string run_config_to_json(const RunConfig& cfg);
/// Fields absent from the JSON keep the values of `base`. Unknown keys are
/// rejected.
RunConfig run_config_from_json(std::string_view text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});

enum class Stage : std::uint64_t {
  corpus = 1,
  split = 2,
  train_tasks = 3,
  test_tasks = 4,
  init = 5,
  batch_order = 6,
  partition = 7,
};

std::uint64_t stage_seed(const RunConfig& cfg, Stage stage) noexcept;

Corpus make_corpus(const RunConfig& cfg);
ClassSplit make_split(const Corpus& corpus, const RunConfig& cfg);
EpisodeDataset make_tasks(const Corpus& corpus, const ClassSplit& split, const RunConfig& cfg, Phase phase);

/// Largest token id + 1 over the corpus.
std::size_t corpus_vocab_size(const Corpus& corpus);
EncoderArch resolve_arch(const RunConfig& cfg, const Corpus& corpus);

struct TrainLogRecord {
  std::size_t step = 0;
  MetaStepReport report;
  double wall_seconds = 0.0;
  /// Per task of the batch, per worker query loss (only with several workers).
  std::vector<std::vector<double>> worker_losses;
};

std::string train_log_line(const TrainLogRecord& rec);

using TrainObserver = std::function<void(const TrainLogRecord&)>;

/// Meta-trains from a fresh initialization on the training tasks. Batch b of
/// epoch k takes consecutive tasks of a seeded permutation of the task list.
MetaParams meta_train(const RunConfig& cfg, const EncoderArch& arch, const EpisodeDataset& train,
                      const TrainObserver& observer = {});

struct TestOutcome {
  MetricsReport report;
  std::vector<RocCurve> roc;  // tasks with a single class are absent
  std::vector<EmbeddingRecord> embeddings;
};

/// Adapts on each test task's support set and evaluates its query set.
TestOutcome meta_test(const RunConfig& cfg, const MetaParams& params, const EpisodeDataset& test);

// Artifact layout under cfg.output_dir.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus() const { return root / "corpus.json"; }
  std::filesystem::path split() const { return root / "split.json"; }
  std::filesystem::path train_tasks() const { return root / "tasks_train"; }
  std::filesystem::path test_tasks() const { return root / "tasks_test"; }
  std::filesystem::path checkpoint() const { return root / "checkpoint.bin"; }
  std::filesystem::path train_log() const { return root / "train_log.jsonl"; }
  std::filesystem::path metrics() const { return root / "metrics.json"; }
  std::filesystem::path roc_dir() const { return root / "roc"; }
  std::filesystem::path embeddings() const { return root / "embeddings.jsonl"; }
  std::filesystem::path summary() const { return root / "report.txt"; }
};

// File-level stages. Each reads what the previous ones wrote, so any stage can
// be replayed in isolation.
void cmd_gen_corpus(const RunConfig& cfg);
void cmd_split(const RunConfig& cfg);
void cmd_sample_tasks(const RunConfig& cfg);
void cmd_meta_train(const RunConfig& cfg, const TrainObserver& progress = {});
void cmd_meta_test(const RunConfig& cfg);
/// Human-readable summary of metrics.json; returns the text it wrote.
std::string cmd_report(const RunConfig& cfg);
void cmd_run(const RunConfig& cfg, const TrainObserver& progress = {});

}  // namespace entmeta
