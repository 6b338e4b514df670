#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "entmeta/encoder.hpp"
#include "entmeta/sampler.hpp"

namespace entmeta {

/// Embeddings of every support and query document of one task.
struct TaskEmbeddings {
  std::vector<RowMatrix> support;
  std::vector<RowMatrix> query;
};

TaskEmbeddings encode_task(const EncoderParams& params, const Task& task);

struct TokenRef {
  std::size_t doc = 0;
  std::size_t pos = 0;

  friend auto operator<=>(const TokenRef&, const TokenRef&) = default;
};

/// Token index sets of a task, all excluding masked tokens and in
/// (document, position) order.
struct TokenSets {
  std::vector<std::vector<TokenRef>> support_by_class;  // I^trn_e
  std::vector<TokenRef> support_otd;                    // I^trn_OTD
  std::vector<TokenRef> support_all;                    // I^trn_ALL
  std::vector<TokenRef> query_itd;                      // I^val_ITD
  std::vector<TokenRef> query_all;
};

TokenSets token_sets(const Task& task);

struct Shrinkage {
  /// ridge = relative * trace(scatter / n) / d + absolute
  double relative = 1.0;
  double absolute = 1e-9;
};

struct ThresholdConfig {
  double quantile = 1.0;
  double margin = 1.5;
};

/// Per-task embedding-space statistics: prototypes, optional O prototype,
/// regularized class covariances with their Cholesky factors, OTD threshold.
struct TaskStatistics {
  std::vector<Eigen::VectorXd> prototypes;
  std::vector<std::size_t> class_counts;
  std::optional<Eigen::VectorXd> otd_prototype;
  std::vector<Eigen::MatrixXd> covariances;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> factors;
  double threshold = std::numeric_limits<double>::infinity();

  std::size_t n_way() const noexcept { return prototypes.size(); }
};

/// Mean support embedding per task class. Throws EmptyClass when a class has
/// no unmasked support token.
TaskStatistics compute_prototypes(const TaskEmbeddings& emb, const Task& task);

/// Mean of the unmasked O-labelled support embeddings. Throws NoOtdTokens.
Eigen::VectorXd compute_otd_prototype(const TaskEmbeddings& emb, const Task& task);

/// Softmax over negative squared distances to the class prototypes, plus the
/// O prototype in the last column when include_otd. Throws MissingOtdPrototype.
std::vector<double> protonet_probabilities(std::span<const double> h, const TaskStatistics& stats,
                                           bool include_otd);

/// Per query document, per token: the argmax label of protonet_probabilities
/// (kOutside for the O column, lowest class id on ties).
std::vector<std::vector<Label>> protonet_classify(std::span<const RowMatrix> query, const TaskStatistics& stats,
                                                  bool include_otd);

/// Label of the unmasked support token with the largest inner product; ties
/// go to the lowest (document, position).
std::vector<std::vector<Label>> nn_classify(std::span<const RowMatrix> query, std::span<const RowMatrix> support,
                                            const Task& task);

/// Fills covariances and Cholesky factors:
/// Omega_e = (1/n_e) sum (h - mu_e)(h - mu_e)^T + ridge_e I. Throws NonPsd if
/// a factorization fails (possible only with a zero ridge).
void fit_covariance(const TaskEmbeddings& emb, TaskStatistics& stats, const Task& task,
                    const Shrinkage& shrinkage = {});

/// Regularizes a class scatter (already divided by its count) and factorizes it.
void set_class_covariance(TaskStatistics& stats, std::size_t cls, Eigen::MatrixXd covariance,
                          const Shrinkage& shrinkage);

struct MahalanobisResult {
  double score = 0.0;  // r(h) >= 0
  std::size_t nearest_class = 0;
};

/// r(h) = min_e (h - mu_e)^T Omega_e^{-1} (h - mu_e) by triangular solves.
MahalanobisResult mahalanobis(std::span<const double> h, const TaskStatistics& stats);
double mahalanobis_score(std::span<const double> h, const TaskStatistics& stats);

/// Linear-interpolated quantile of a non-empty list.
double quantile(std::vector<double> values, double q);

/// R = margin * quantile_q of r(h) over the unmasked support ITD tokens.
double calibrate_threshold(std::span<const RowMatrix> support, const TaskStatistics& stats, const Task& task,
                           const ThresholdConfig& cfg = {});

struct OtdPrediction {
  std::vector<std::vector<Label>> labels;      // per query document
  std::vector<std::vector<double>> itd_score;  // -r(h), higher is more in-task
};

/// O where r(h) >= R, nearest-neighbour label otherwise.
OtdPrediction otd_detect_and_classify(std::span<const RowMatrix> query, std::span<const RowMatrix> support,
                                      const TaskStatistics& stats, const Task& task);

}  // namespace entmeta
