#include "entmeta/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>

#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "json_codec.hpp"

namespace entmeta {

using detail::json;

std::vector<EntitySpan> decode_spans(std::span<const Label> labels) {
  std::vector<EntitySpan> out;
  std::size_t i = 0;
  while (i < labels.size()) {
    if (labels[i] < 0) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < labels.size() && labels[j + 1] == labels[i]) ++j;
    out.push_back({labels[i], i, j});
    i = j + 1;
  }
  return out;
}

std::vector<Label> spans_to_labels(std::span<const EntitySpan> spans, std::size_t length) {
  std::vector<Label> out(length, kOutside);
  for (const auto& s : spans) {
    if (s.end >= length || s.start > s.end) throw Error(Errc::shape_mismatch, "span outside the sequence");
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(s.start), out.begin() + static_cast<std::ptrdiff_t>(s.end) + 1,
              s.cls);
  }
  return out;
}

SpanCounts count_spans(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.size() != predicted.size()) throw Error(Errc::shape_mismatch, "prediction length differs from truth");
  std::vector<Label> pred(predicted.begin(), predicted.end());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == kMasked) pred[i] = kMasked;
  }
  const auto t = decode_spans(truth);
  const auto p = decode_spans(pred);
  SpanCounts c{t.size(), p.size(), 0};
  // both lists are sorted by start and non-overlapping
  std::size_t a = 0;
  for (const auto& s : p) {
    while (a < t.size() && t[a].start < s.start) ++a;
    if (a < t.size() && t[a] == s) ++c.n_matched;
  }
  return c;
}

namespace {

void require_both(std::span<const double> scores, std::span<const char> is_itd, std::size_t& n_pos,
                  std::size_t& n_neg) {
  if (scores.size() != is_itd.size()) throw Error(Errc::shape_mismatch, "score and label lists differ in length");
  n_pos = static_cast<std::size_t>(std::count_if(is_itd.begin(), is_itd.end(), [](char c) { return c != 0; }));
  n_neg = is_itd.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(Errc::single_class, "AUROC needs both in-task and out-of-task tokens");
  for (auto s : scores) {
    if (std::isnan(s)) throw Error(Errc::non_finite, "NaN ITD score");
  }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const char> is_itd) {
  std::size_t n_pos = 0, n_neg = 0;
  require_both(scores, is_itd, n_pos, n_neg);
  const auto idx = order_by_score(scores);
  // Twice the Mann-Whitney count, kept integral so ties stay exact.
  std::uint64_t twice_wins = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, q = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (is_itd[idx[j]] ? p : q) += 1;
      ++j;
    }
    twice_wins += 2 * p * neg_below + p * q;
    neg_below += q;
    i = j;
  }
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

RocCurve roc_points(std::span<const double> scores, std::span<const char> is_itd, std::size_t task_id) {
  std::size_t n_pos = 0, n_neg = 0;
  require_both(scores, is_itd, n_pos, n_neg);
  auto idx = order_by_score(scores);
  std::reverse(idx.begin(), idx.end());
  RocCurve c{task_id, {{0.0, 0.0}}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (is_itd[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    c.points.emplace_back(static_cast<double>(fp) / static_cast<double>(n_neg),
                          static_cast<double>(tp) / static_cast<double>(n_pos));
    i = j;
  }
  return c;
}

double roc_area(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto [x0, y0] = curve.points[i - 1];
    const auto [x1, y1] = curve.points[i];
    area += (x1 - x0) * (y0 + y1) * 0.5;
  }
  return area;
}

std::string roc_to_csv(const RocCurve& curve) {
  std::string out = "fpr,tpr\n";
  char buf[64];
  for (const auto& [x, y] : curve.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", x, y);
    out += buf;
  }
  return out;
}

TaskEvaluation evaluate_task(const Task& task, const std::vector<std::vector<Label>>& predicted,
                             const std::vector<std::vector<double>>& itd_scores) {
  if (predicted.size() != task.query.size() || itd_scores.size() != task.query.size()) {
    throw Error(Errc::shape_mismatch, "one prediction per query document is required");
  }
  TaskEvaluation ev;
  for (std::size_t d = 0; d < task.query.size(); ++d) {
    const auto& truth = task.query[d].labels;
    if (itd_scores[d].size() != truth.size()) throw Error(Errc::shape_mismatch, "score length differs from truth");
    ev.counts += count_spans(truth, predicted[d]);
    for (std::size_t l = 0; l < truth.size(); ++l) {
      if (truth[l] == kMasked) continue;
      ev.itd_scores.push_back(itd_scores[d][l]);
      ev.is_itd.push_back(truth[l] >= 0 ? 1 : 0);
    }
  }
  const auto n_pos = std::count(ev.is_itd.begin(), ev.is_itd.end(), 1);
  if (n_pos > 0 && static_cast<std::size_t>(n_pos) < ev.is_itd.size()) ev.auroc = auroc(ev.itd_scores, ev.is_itd);
  return ev;
}

MetricsReport micro_prf1(std::span<const TaskEvaluation> tasks) {
  MetricsReport r;
  r.n_tasks = tasks.size();
  std::vector<double> pooled_scores;
  std::vector<char> pooled_labels;
  double auroc_sum = 0.0;
  std::size_t auroc_n = 0;
  for (const auto& t : tasks) {
    r.counts += t.counts;
    r.task_auroc.push_back(t.auroc);
    if (t.auroc) {
      auroc_sum += *t.auroc;
      ++auroc_n;
    } else {
      ++r.n_auroc_skipped;
    }
    pooled_scores.insert(pooled_scores.end(), t.itd_scores.begin(), t.itd_scores.end());
    pooled_labels.insert(pooled_labels.end(), t.is_itd.begin(), t.is_itd.end());
  }
  const auto& c = r.counts;
  r.precision = c.n_pred > 0 ? static_cast<double>(c.n_matched) / static_cast<double>(c.n_pred) : 0.0;
  r.recall = c.n_true > 0 ? static_cast<double>(c.n_matched) / static_cast<double>(c.n_true) : 0.0;
  r.micro_f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  r.mean_auroc = auroc_n > 0 ? auroc_sum / static_cast<double>(auroc_n) : 0.0;
  const auto n_pos = std::count(pooled_labels.begin(), pooled_labels.end(), 1);
  if (n_pos > 0 && static_cast<std::size_t>(n_pos) < pooled_labels.size()) {
    r.pooled_auroc = auroc(pooled_scores, pooled_labels);
  }
  return r;
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["schema_version"] = 1;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["micro_f1"] = r.micro_f1;
  j["mean_auroc"] = r.mean_auroc;
  j["pooled_auroc"] = r.pooled_auroc ? json(*r.pooled_auroc) : json(nullptr);
  json per_task = json::array();
  for (const auto& a : r.task_auroc) per_task.push_back(a ? json(*a) : json(nullptr));
  j["task_auroc"] = std::move(per_task);
  j["n_true_spans"] = r.counts.n_true;
  j["n_pred_spans"] = r.counts.n_pred;
  j["n_matched_spans"] = r.counts.n_matched;
  j["n_tasks"] = r.n_tasks;
  j["n_auroc_skipped"] = r.n_auroc_skipped;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "metrics report");
  MetricsReport r;
  r.precision = detail::require<double>(j, "precision", "metrics report");
  r.recall = detail::require<double>(j, "recall", "metrics report");
  r.micro_f1 = detail::require<double>(j, "micro_f1", "metrics report");
  r.mean_auroc = detail::require<double>(j, "mean_auroc", "metrics report");
  if (j.contains("pooled_auroc") && !j["pooled_auroc"].is_null()) r.pooled_auroc = j["pooled_auroc"].get<double>();
  for (const auto& a : detail::require<json>(j, "task_auroc", "metrics report")) {
    r.task_auroc.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
  }
  r.counts.n_true = detail::require<std::size_t>(j, "n_true_spans", "metrics report");
  r.counts.n_pred = detail::require<std::size_t>(j, "n_pred_spans", "metrics report");
  r.counts.n_matched = detail::require<std::size_t>(j, "n_matched_spans", "metrics report");
  r.n_tasks = detail::require<std::size_t>(j, "n_tasks", "metrics report");
  r.n_auroc_skipped = detail::require<std::size_t>(j, "n_auroc_skipped", "metrics report");
  return r;
}

std::vector<EmbeddingRecord> embedding_records(std::size_t task_id, const Task& task,
                                               std::span<const RowMatrix> query_embeddings,
                                               const std::vector<std::vector<Label>>& predicted,
                                               const std::vector<std::vector<double>>& itd_scores) {
  if (query_embeddings.size() != task.query.size() || predicted.size() != task.query.size() ||
      itd_scores.size() != task.query.size()) {
    throw Error(Errc::shape_mismatch, "one embedding matrix per query document is required");
  }
  std::vector<EmbeddingRecord> out;
  for (std::size_t d = 0; d < task.query.size(); ++d) {
    const auto& doc = task.query[d];
    const auto& m = query_embeddings[d];
    for (std::size_t l = 0; l < doc.labels.size(); ++l) {
      if (doc.labels[l] == kMasked) continue;
      EmbeddingRecord r;
      r.task = task_id;
      r.doc = d;
      r.token = l;
      r.doc_id = doc.doc_id;
      r.truth = doc.labels[l];
      r.predicted = predicted[d][l];
      r.itd_score = itd_scores[d][l];
      const auto row = m.row(static_cast<Eigen::Index>(l));
      r.vector.assign(row.data(), row.data() + row.size());
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::string embedding_records_to_jsonl(std::span<const EmbeddingRecord> records) {
  std::string out;
  for (const auto& r : records) {
    json j;
    j["task"] = r.task;
    j["doc"] = r.doc;
    j["token"] = r.token;
    j["doc_id"] = r.doc_id;
    j["label"] = r.truth;
    j["predicted"] = r.predicted;
    j["itd_score"] = r.itd_score;
    j["embedding"] = r.vector;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void dump_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRecord> records) {
  write_file_atomic(path, embedding_records_to_jsonl(records));
}

std::vector<EmbeddingRecord> load_embedding_dump(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<EmbeddingRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = detail::parse_json(line, "embedding dump");
    EmbeddingRecord r;
    r.task = detail::require<std::size_t>(j, "task", "embedding record");
    r.doc = detail::require<std::size_t>(j, "doc", "embedding record");
    r.token = detail::require<std::size_t>(j, "token", "embedding record");
    r.doc_id = detail::require<std::string>(j, "doc_id", "embedding record");
    r.truth = detail::require<Label>(j, "label", "embedding record");
    r.predicted = detail::require<Label>(j, "predicted", "embedding record");
    r.itd_score = detail::require<double>(j, "itd_score", "embedding record");
    r.vector = detail::require<std::vector<double>>(j, "embedding", "embedding record");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace entmeta
