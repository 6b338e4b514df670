#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "entmeta/corpus.hpp"
#include "entmeta/rng.hpp"

namespace entmeta {

inline constexpr int kTaskSchemaVersion = 1;

enum class Phase { train, test };

std::string_view phase_name(Phase p) noexcept;
Phase parse_phase(std::string_view name);

struct ClassSplit {
  std::vector<Label> base_classes;   // sorted
  std::vector<Label> novel_classes;  // sorted
  double gamma = 0.6;
  std::size_t u_threshold = 20;
  /// Non-fatal conditions, e.g. more rare classes than novel slots.
  std::vector<std::string> warnings;

  const std::vector<Label>& pool(Phase phase) const {
    return phase == Phase::train ? base_classes : novel_classes;
  }
};

struct TaskSpec {
  std::size_t n_way = 4;
  std::size_t k_shot = 4;
  std::size_t k_query = 4;
  double rho = 3.0;
  std::uint64_t seed = 0;
  Phase phase = Phase::train;
  std::size_t max_docs = 32;  // cap on support and on query documents

  /// Occurrence ceilings floor(rho*K) and floor(rho*K_q).
  std::size_t support_ceiling() const;
  std::size_t query_ceiling() const;
};

/// Throws ConfigError unless N, K, K_q >= 1 and rho > 1.
void validate_task_spec(const TaskSpec& spec);

/// One N-way soft-K-shot episode. Document labels are relative ids 0..N-1,
/// kOutside, or kMasked; the masks mirror the kMasked positions.
struct Task {
  std::vector<Label> target_classes;  // catalog ids, relative id = position
  std::vector<Document> support;
  std::vector<Document> query;
  std::vector<std::vector<bool>> support_mask;
  std::vector<std::vector<bool>> query_mask;
  std::map<Label, Label> provenance;  // relative id -> catalog id

  std::size_t n_way() const noexcept { return target_classes.size(); }

  friend bool operator==(const Task&, const Task&) = default;
};

/// Book-keeping of one XDR draw, before masking.
struct XdrTrace {
  std::vector<std::size_t> raw_support_counts;  // per target class
  std::vector<std::size_t> raw_query_counts;
  std::size_t masked_support_occurrences = 0;
  std::size_t masked_query_occurrences = 0;
};

struct EpisodeDataset {
  std::vector<Task> tasks;
  TaskSpec spec;
  ClassSplit split;
};

ClassSplit split_classes(const Corpus& corpus, double gamma, std::size_t u_threshold, std::uint64_t seed);

/// class -> indices of the documents containing at least one occurrence.
using CandidateIndex = std::map<Label, std::vector<std::size_t>>;

CandidateIndex build_candidate_index(const Corpus& corpus, std::span<const Label> classes);

/// Precomputes per-document occurrence counts so repeated draws from the
/// same corpus skip the label scan.
class TaskSampler {
 public:
  TaskSampler(const Corpus& corpus, ClassSplit split);

  /// Draws the N target classes from the phase pool, then runs XDR.
  Task sample(const TaskSpec& spec, XdrTrace* trace = nullptr) const;

  /// XDR with a caller-chosen target class list (in relative-id order).
  Task sample_with_classes(std::span<const Label> target_classes, const TaskSpec& spec,
                           XdrTrace* trace = nullptr) const;

  const Corpus& corpus() const noexcept { return corpus_; }
  const ClassSplit& split() const noexcept { return split_; }

 private:
  Task run_xdr(std::span<const Label> target_classes, const TaskSpec& spec, Rng& rng,
               XdrTrace* trace) const;

  const Corpus& corpus_;
  ClassSplit split_;
  std::vector<std::vector<std::size_t>> class_docs_;  // catalog id -> documents
  std::vector<std::map<Label, std::size_t>> doc_counts_;  // document -> class -> occurrences
};

Task xdr_sample_task(const Corpus& corpus, const ClassSplit& split, const TaskSpec& spec,
                     XdrTrace* trace = nullptr);

/// Relabels a task whose documents still carry catalog ids (plus kMasked):
/// target classes become 0..N-1, every other class becomes kOutside.
/// Fills provenance and masks.
Task convert_labels(Task task);

/// Inverse of the relative-id mapping on in-task tokens; other labels unchanged.
std::vector<Label> restore_labels(const Task& task, std::span<const Label> relative);

/// Task i is drawn with seed spec.seed + i; an infeasible draw is retried with
/// derived seeds (fresh class sets) up to `retry_budget` times.
EpisodeDataset sample_meta_dataset(const Corpus& corpus, const ClassSplit& split, const TaskSpec& spec,
                                   std::size_t n_tasks, std::size_t retry_budget = 64,
                                   std::size_t threads = 1);

// Task files: masked labels are written as -1 and "O" as N.
std::string task_to_json(const Task& task);
Task task_from_json(std::string_view text);
std::string split_to_json(const ClassSplit& split);
ClassSplit split_from_json(std::string_view text);
void save_split(const ClassSplit& split, const std::filesystem::path& path);
ClassSplit load_split(const std::filesystem::path& path);

/// Writes `dir/manifest.json` and `dir/tasks/task_NNNNN.json`.
void save_episode_dataset(const EpisodeDataset& dataset, const std::filesystem::path& dir);
EpisodeDataset load_episode_dataset(const std::filesystem::path& dir);

}  // namespace entmeta
