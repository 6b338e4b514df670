#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "entmeta/meta.hpp"
#include "entmeta/metric.hpp"

namespace entmeta {

/// Documents of one task held by one logical worker (indices into the task's
/// support and query lists, ascending).
struct WorkerShard {
  std::size_t worker_id = 0;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;

  friend bool operator==(const WorkerShard&, const WorkerShard&) = default;
};

struct FederatedConfig {
  std::size_t n_workers = 1;
  /// Local inner steps between two parameter averages.
  std::size_t aggregation_interval = 1;
  /// Plain mean of per-worker validation losses instead of token weighting.
  bool plain_mean_validation = false;
};

void validate_federated_config(const FederatedConfig& cfg);

/// Seeded shuffle, then round-robin over workers, separately for the support
/// and the query documents. Throws ConfigError for zero workers.
std::vector<WorkerShard> partition_task(const Task& task, std::size_t n_workers, std::uint64_t seed);

TaskPartition to_partition(std::span<const WorkerShard> shards);

struct FederatedAdaptResult {
  MetaParams params;
  /// Local losses at the start of each aggregation round, one per worker
  /// (NaN for a worker whose shard is empty).
  std::vector<std::vector<double>> round_worker_losses;
};

/// Gradient-based path: every round each worker adapts locally on its shard
/// from the shared parameters, then the parameters are averaged over the
/// workers with a non-empty shard. `include_query` adapts on support and
/// query shards together.
FederatedAdaptResult federated_adapt(const MetaParams& params, const Task& task, std::span<const WorkerShard> shards,
                                     const InnerLoopConfig& inner, bool adapt_encoder, const FederatedConfig& cfg = {},
                                     bool include_query = false);

/// Sufficient statistics of one worker's support shard.
struct WorkerStatistics {
  std::vector<Eigen::VectorXd> sums;
  std::vector<std::size_t> counts;
  std::vector<Eigen::MatrixXd> scatter;  // about the worker-local class mean
  Eigen::VectorXd otd_sum;
  std::size_t otd_count = 0;
};

WorkerStatistics local_statistics(const TaskEmbeddings& emb, const Task& task, const WorkerShard& shard);

/// Count-weighted prototypes and pooled covariances (parallel-axis
/// combination of worker scatters). Throws EmptyClass if a class has no
/// token on any worker.
TaskStatistics aggregate_statistics(std::span<const WorkerStatistics> workers, bool with_covariance,
                                    const Shrinkage& shrinkage = {});

/// Metric-based path: aggregated prototypes, O prototype when present,
/// covariances and the calibrated threshold.
TaskStatistics federated_statistics(const TaskEmbeddings& emb, const Task& task,
                                    std::span<const WorkerShard> shards, const MetricTestConfig& metric = {});

struct WorkerLoss {
  std::size_t worker_id = 0;
  double loss = 0.0;
  std::size_t n_tokens = 0;
};

/// Token-weighted (or plain) mean over workers with at least one token.
double combine_worker_losses(std::span<const WorkerLoss> losses, bool plain_mean = false);

std::vector<WorkerLoss> worker_query_losses(const MetaParams& adapted, const Task& task,
                                            std::span<const WorkerShard> shards, HeadKind head);

double federated_validate(const MetaParams& adapted, const Task& task, std::span<const WorkerShard> shards,
                          HeadKind head, bool plain_mean = false);

}  // namespace entmeta
