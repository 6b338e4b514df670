#include "entmeta/metric.hpp"

#include <algorithm>
#include <cmath>

#include "entmeta/error.hpp"

namespace entmeta {

TaskEmbeddings encode_task(const EncoderParams& params, const Task& task) {
  TaskEmbeddings emb;
  emb.support.reserve(task.support.size());
  emb.query.reserve(task.query.size());
  for (const auto& d : task.support) emb.support.push_back(encode_document(params, d));
  for (const auto& d : task.query) emb.query.push_back(encode_document(params, d));
  return emb;
}

TokenSets token_sets(const Task& task) {
  TokenSets s;
  s.support_by_class.resize(task.n_way());
  for (std::size_t d = 0; d < task.support.size(); ++d) {
    const auto& labels = task.support[d].labels;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const Label l = labels[p];
      if (l == kMasked) continue;
      s.support_all.push_back({d, p});
      if (l == kOutside) {
        s.support_otd.push_back({d, p});
      } else {
        s.support_by_class.at(static_cast<std::size_t>(l)).push_back({d, p});
      }
    }
  }
  for (std::size_t d = 0; d < task.query.size(); ++d) {
    const auto& labels = task.query[d].labels;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const Label l = labels[p];
      if (l == kMasked) continue;
      s.query_all.push_back({d, p});
      if (l >= 0) s.query_itd.push_back({d, p});
    }
  }
  return s;
}

namespace {

Eigen::VectorXd row_of(std::span<const RowMatrix> docs, const TokenRef& r) {
  return docs[r.doc].row(static_cast<Eigen::Index>(r.pos)).transpose();
}

Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> h) {
  return {h.data(), static_cast<Eigen::Index>(h.size())};
}

std::size_t embedding_dim(const TaskEmbeddings& emb) {
  if (!emb.support.empty()) return static_cast<std::size_t>(emb.support.front().cols());
  if (!emb.query.empty()) return static_cast<std::size_t>(emb.query.front().cols());
  return 0;
}

}  // namespace

TaskStatistics compute_prototypes(const TaskEmbeddings& emb, const Task& task) {
  const auto sets = token_sets(task);
  const auto dim = static_cast<Eigen::Index>(embedding_dim(emb));
  TaskStatistics stats;
  for (std::size_t e = 0; e < task.n_way(); ++e) {
    const auto& refs = sets.support_by_class[e];
    if (refs.empty()) {
      throw Error(Errc::empty_class, "class " + std::to_string(e) + " has no unmasked support token");
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    for (const auto& r : refs) sum += row_of(emb.support, r);
    stats.prototypes.push_back(sum / static_cast<double>(refs.size()));
    stats.class_counts.push_back(refs.size());
  }
  return stats;
}

Eigen::VectorXd compute_otd_prototype(const TaskEmbeddings& emb, const Task& task) {
  const auto sets = token_sets(task);
  if (sets.support_otd.empty()) throw Error(Errc::no_otd_tokens, "support set has no unmasked O token");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(embedding_dim(emb)));
  for (const auto& r : sets.support_otd) sum += row_of(emb.support, r);
  return sum / static_cast<double>(sets.support_otd.size());
}

std::vector<double> protonet_probabilities(std::span<const double> h, const TaskStatistics& stats,
                                           bool include_otd) {
  if (include_otd && !stats.otd_prototype) {
    throw Error(Errc::missing_otd_prototype, "O prototype requested but not computed");
  }
  const auto x = as_vector(h);
  std::vector<double> logits;
  for (const auto& mu : stats.prototypes) logits.push_back(-(x - mu).squaredNorm());
  if (include_otd) logits.push_back(-(x - *stats.otd_prototype).squaredNorm());
  const double shift = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - shift);
    total += l;
  }
  for (auto& l : logits) l /= total;
  return logits;
}

std::vector<std::vector<Label>> protonet_classify(std::span<const RowMatrix> query, const TaskStatistics& stats,
                                                  bool include_otd) {
  std::vector<std::vector<Label>> out;
  for (const auto& doc : query) {
    std::vector<Label> labels(static_cast<std::size_t>(doc.rows()));
    for (Eigen::Index l = 0; l < doc.rows(); ++l) {
      const auto probs = protonet_probabilities({doc.row(l).data(), static_cast<std::size_t>(doc.cols())}, stats,
                                                include_otd);
      const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      labels[static_cast<std::size_t>(l)] = best == stats.n_way() ? kOutside : static_cast<Label>(best);
    }
    out.push_back(std::move(labels));
  }
  return out;
}

std::vector<std::vector<Label>> nn_classify(std::span<const RowMatrix> query, std::span<const RowMatrix> support,
                                            const Task& task) {
  const auto sets = token_sets(task);
  if (sets.support_all.empty()) throw Error(Errc::empty_class, "support set has no unmasked token");
  RowMatrix bank(static_cast<Eigen::Index>(sets.support_all.size()), support.front().cols());
  std::vector<Label> bank_labels;
  for (std::size_t i = 0; i < sets.support_all.size(); ++i) {
    const auto& r = sets.support_all[i];
    bank.row(static_cast<Eigen::Index>(i)) = support[r.doc].row(static_cast<Eigen::Index>(r.pos));
    bank_labels.push_back(task.support[r.doc].labels[r.pos]);
  }
  std::vector<std::vector<Label>> out;
  for (const auto& doc : query) {
    const RowMatrix sims = doc * bank.transpose();
    std::vector<Label> labels(static_cast<std::size_t>(doc.rows()));
    for (Eigen::Index l = 0; l < doc.rows(); ++l) {
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < sims.cols(); ++j) {
        if (sims(l, j) > sims(l, best)) best = j;
      }
      labels[static_cast<std::size_t>(l)] = bank_labels[static_cast<std::size_t>(best)];
    }
    out.push_back(std::move(labels));
  }
  return out;
}

void set_class_covariance(TaskStatistics& stats, std::size_t cls, Eigen::MatrixXd covariance,
                          const Shrinkage& shrinkage) {
  const auto dim = covariance.rows();
  const double ridge = shrinkage.relative * covariance.trace() / static_cast<double>(dim) + shrinkage.absolute;
  covariance.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(covariance);
  if (llt.info() != Eigen::Success) {
    throw Error(Errc::non_psd, "covariance of class " + std::to_string(cls) + " is not positive definite");
  }
  if (stats.covariances.size() <= cls) {
    stats.covariances.resize(cls + 1);
    stats.factors.resize(cls + 1);
  }
  stats.covariances[cls] = std::move(covariance);
  stats.factors[cls] = std::move(llt);
}

void fit_covariance(const TaskEmbeddings& emb, TaskStatistics& stats, const Task& task, const Shrinkage& shrinkage) {
  const auto sets = token_sets(task);
  const auto dim = static_cast<Eigen::Index>(embedding_dim(emb));
  stats.covariances.assign(task.n_way(), Eigen::MatrixXd());
  stats.factors.assign(task.n_way(), Eigen::LLT<Eigen::MatrixXd>());
  for (std::size_t e = 0; e < task.n_way(); ++e) {
    const auto& refs = sets.support_by_class[e];
    if (refs.empty()) throw Error(Errc::empty_class, "class " + std::to_string(e) + " has no support token");
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
    for (const auto& r : refs) {
      const Eigen::VectorXd diff = row_of(emb.support, r) - stats.prototypes[e];
      scatter.noalias() += diff * diff.transpose();
    }
    set_class_covariance(stats, e, scatter / static_cast<double>(refs.size()), shrinkage);
  }
}

MahalanobisResult mahalanobis(std::span<const double> h, const TaskStatistics& stats) {
  if (stats.factors.size() != stats.prototypes.size() || stats.prototypes.empty()) {
    throw Error(Errc::shape_mismatch, "covariances have not been fitted");
  }
  const auto x = as_vector(h);
  MahalanobisResult best{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t e = 0; e < stats.prototypes.size(); ++e) {
    const Eigen::VectorXd z = stats.factors[e].matrixL().solve(x - stats.prototypes[e]);
    const double r = z.squaredNorm();
    if (r < best.score) best = {r, e};
  }
  return best;
}

double mahalanobis_score(std::span<const double> h, const TaskStatistics& stats) {
  return mahalanobis(h, stats).score;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::empty_class, "quantile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double calibrate_threshold(std::span<const RowMatrix> support, const TaskStatistics& stats, const Task& task,
                           const ThresholdConfig& cfg) {
  const auto sets = token_sets(task);
  std::vector<double> scores;
  for (const auto& refs : sets.support_by_class) {
    for (const auto& r : refs) {
      const auto& m = support[r.doc];
      scores.push_back(mahalanobis_score({m.row(static_cast<Eigen::Index>(r.pos)).data(),
                                          static_cast<std::size_t>(m.cols())},
                                         stats));
    }
  }
  return cfg.margin * quantile(std::move(scores), cfg.quantile);
}

OtdPrediction otd_detect_and_classify(std::span<const RowMatrix> query, std::span<const RowMatrix> support,
                                      const TaskStatistics& stats, const Task& task) {
  OtdPrediction out;
  out.labels = nn_classify(query, support, task);
  for (std::size_t d = 0; d < query.size(); ++d) {
    const auto& m = query[d];
    std::vector<double> scores(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index l = 0; l < m.rows(); ++l) {
      const double r = mahalanobis_score({m.row(l).data(), static_cast<std::size_t>(m.cols())}, stats);
      scores[static_cast<std::size_t>(l)] = -r;
      if (r >= stats.threshold) out.labels[d][static_cast<std::size_t>(l)] = kOutside;
    }
    out.itd_score.push_back(std::move(scores));
  }
  return out;
}

}  // namespace entmeta
