#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "entmeta/corpus.hpp"
#include "entmeta/encoder.hpp"
#include "entmeta/sampler.hpp"

namespace entmeta {

struct EntitySpan {
  Label cls = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive

  friend auto operator<=>(const EntitySpan&, const EntitySpan&) = default;
};

/// Maximal runs of one identical label >= 0; O and masked tokens end a run.
std::vector<EntitySpan> decode_spans(std::span<const Label> labels);

/// Inverse of decode_spans: a sequence of `length` O labels with the spans
/// written in.
std::vector<Label> spans_to_labels(std::span<const EntitySpan> spans, std::size_t length);

struct SpanCounts {
  std::size_t n_true = 0;
  std::size_t n_pred = 0;
  std::size_t n_matched = 0;

  SpanCounts& operator+=(const SpanCounts& o) {
    n_true += o.n_true;
    n_pred += o.n_pred;
    n_matched += o.n_matched;
    return *this;
  }
};

/// Exact-match span counts of one document. Predictions at positions masked
/// in the truth are ignored.
SpanCounts count_spans(std::span<const Label> truth, std::span<const Label> predicted);

/// Mann-Whitney probability that an in-task token outscores an out-of-task
/// token, ties counting one half. Throws SingleClass unless both are present.
double auroc(std::span<const double> scores, std::span<const char> is_itd);

struct RocCurve {
  std::size_t task_id = 0;
  std::vector<std::pair<double, double>> points;  // (fpr, tpr)
};

/// One point per distinct score threshold, from (0,0) to (1,1).
RocCurve roc_points(std::span<const double> scores, std::span<const char> is_itd, std::size_t task_id = 0);
double roc_area(const RocCurve& curve);
std::string roc_to_csv(const RocCurve& curve);

/// Unmasked query tokens of one evaluated task.
struct TaskEvaluation {
  SpanCounts counts;
  std::optional<double> auroc;  // empty when the task has a single class
  std::vector<double> itd_scores;
  std::vector<char> is_itd;
};

TaskEvaluation evaluate_task(const Task& task, const std::vector<std::vector<Label>>& predicted,
                             const std::vector<std::vector<double>>& itd_scores);

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double micro_f1 = 0.0;
  std::vector<std::optional<double>> task_auroc;
  double mean_auroc = 0.0;  // over tasks with both classes
  std::optional<double> pooled_auroc;
  SpanCounts counts;
  std::size_t n_tasks = 0;
  std::size_t n_auroc_skipped = 0;
};

/// precision = matched / predicted, recall = matched / true over all documents
/// of all tasks; F1 = 2PR / (P + R), or 0 when P + R = 0.
MetricsReport micro_prf1(std::span<const TaskEvaluation> tasks);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(std::string_view text);

struct EmbeddingRecord {
  std::size_t task = 0;
  std::size_t doc = 0;
  std::size_t token = 0;
  std::string doc_id;
  Label truth = 0;
  Label predicted = 0;
  double itd_score = 0.0;
  std::vector<double> vector;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

/// One record per unmasked query token.
std::vector<EmbeddingRecord> embedding_records(std::size_t task_id, const Task& task,
                                               std::span<const RowMatrix> query_embeddings,
                                               const std::vector<std::vector<Label>>& predicted,
                                               const std::vector<std::vector<double>>& itd_scores);

std::string embedding_records_to_jsonl(std::span<const EmbeddingRecord> records);
void dump_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> load_embedding_dump(const std::filesystem::path& path);

}  // namespace entmeta
