#include "entmeta/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "entmeta/error.hpp"
#include "entmeta/rng.hpp"

namespace entmeta {

void validate_federated_config(const FederatedConfig& cfg) {
  if (cfg.n_workers == 0) throw Error(Errc::config_error, "number of workers must be >= 1");
  if (cfg.aggregation_interval == 0) throw Error(Errc::config_error, "aggregation interval must be >= 1");
}

namespace {

std::vector<std::vector<std::size_t>> deal(std::size_t n_docs, std::size_t n_workers, std::uint64_t seed) {
  std::vector<std::size_t> order(n_docs);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out(n_workers);
  for (std::size_t i = 0; i < order.size(); ++i) out[i % n_workers].push_back(order[i]);
  for (auto& s : out) std::sort(s.begin(), s.end());
  return out;
}

bool has_tokens(const std::vector<Document>& docs, const std::vector<std::size_t>& subset) {
  for (auto d : subset) {
    for (auto l : docs[d].labels) {
      if (l != kMasked) return true;
    }
  }
  return false;
}

std::vector<Document> pick(const std::vector<Document>& docs, const std::vector<std::size_t>& subset) {
  std::vector<Document> out;
  out.reserve(subset.size());
  for (auto d : subset) out.push_back(docs.at(d));
  return out;
}

}  // namespace

std::vector<WorkerShard> partition_task(const Task& task, std::size_t n_workers, std::uint64_t seed) {
  if (n_workers == 0) throw Error(Errc::config_error, "number of workers must be >= 1");
  auto support = deal(task.support.size(), n_workers, derive_seed(seed, 0));
  auto query = deal(task.query.size(), n_workers, derive_seed(seed, 1));
  std::vector<WorkerShard> shards(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) {
    shards[w] = {w, std::move(support[w]), std::move(query[w])};
  }
  return shards;
}

TaskPartition to_partition(std::span<const WorkerShard> shards) {
  TaskPartition p;
  for (const auto& s : shards) {
    p.support.push_back(s.support);
    p.query.push_back(s.query);
  }
  return p;
}

FederatedAdaptResult federated_adapt(const MetaParams& params, const Task& task, std::span<const WorkerShard> shards,
                                     const InnerLoopConfig& inner, bool adapt_encoder, const FederatedConfig& cfg,
                                     bool include_query) {
  validate_federated_config(cfg);
  validate_inner_config(inner);
  std::vector<std::vector<Document>> local_docs;
  for (const auto& s : shards) {
    auto docs = pick(task.support, s.support);
    if (include_query) {
      auto q = pick(task.query, s.query);
      docs.insert(docs.end(), q.begin(), q.end());
    }
    local_docs.push_back(std::move(docs));
  }
  std::vector<bool> active(shards.size());
  bool any = false;
  for (std::size_t w = 0; w < shards.size(); ++w) {
    const auto all = [&] {
      std::vector<std::size_t> v(local_docs[w].size());
      std::iota(v.begin(), v.end(), std::size_t{0});
      return v;
    }();
    active[w] = has_tokens(local_docs[w], all);
    any = any || active[w];
  }
  if (!any) throw Error(Errc::shape_mismatch, "every worker shard is empty");

  FederatedAdaptResult out{params, {}};
  for (std::size_t done = 0; done < inner.steps;) {
    const std::size_t k = std::min(cfg.aggregation_interval, inner.steps - done);
    InnerLoopConfig local = inner;
    local.steps = k;
    std::vector<MetaParams> results;
    std::vector<double> losses(shards.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t w = 0; w < shards.size(); ++w) {
      if (!active[w]) continue;
      auto r = inner_loop_sgd(out.params.encoder, out.params.decoder, local_docs[w], task.n_way(), local,
                              adapt_encoder);
      losses[w] = r.losses.front();
      results.push_back(std::move(r.params));
    }
    out.round_worker_losses.push_back(std::move(losses));
    if (results.size() == 1) {
      out.params = std::move(results.front());
    } else {
      std::vector<EncoderParams> enc;
      std::vector<DecoderParams> dec;
      for (auto& r : results) {
        enc.push_back(std::move(r.encoder));
        dec.push_back(std::move(r.decoder));
      }
      if (adapt_encoder) out.params.encoder = param_average(enc);
      out.params.decoder = param_average(dec);
    }
    done += k;
  }
  return out;
}

WorkerStatistics local_statistics(const TaskEmbeddings& emb, const Task& task, const WorkerShard& shard) {
  const Eigen::Index dim = emb.support.empty() ? 0 : emb.support.front().cols();
  const std::size_t n_way = task.n_way();
  WorkerStatistics ws;
  ws.sums.assign(n_way, Eigen::VectorXd::Zero(dim));
  ws.counts.assign(n_way, 0);
  ws.scatter.assign(n_way, Eigen::MatrixXd::Zero(dim, dim));
  ws.otd_sum = Eigen::VectorXd::Zero(dim);
  std::vector<std::vector<Eigen::VectorXd>> members(n_way);
  for (auto d : shard.support) {
    const auto& labels = task.support.at(d).labels;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const Label l = labels[p];
      if (l == kMasked) continue;
      const Eigen::VectorXd h = emb.support[d].row(static_cast<Eigen::Index>(p)).transpose();
      if (l == kOutside) {
        ws.otd_sum += h;
        ++ws.otd_count;
      } else {
        const auto e = static_cast<std::size_t>(l);
        ws.sums[e] += h;
        ++ws.counts[e];
        members[e].push_back(h);
      }
    }
  }
  for (std::size_t e = 0; e < n_way; ++e) {
    if (ws.counts[e] == 0) continue;
    const Eigen::VectorXd mean = ws.sums[e] / static_cast<double>(ws.counts[e]);
    for (const auto& h : members[e]) ws.scatter[e].noalias() += (h - mean) * (h - mean).transpose();
  }
  return ws;
}

TaskStatistics aggregate_statistics(std::span<const WorkerStatistics> workers, bool with_covariance,
                                    const Shrinkage& shrinkage) {
  if (workers.empty()) throw Error(Errc::shape_mismatch, "no worker statistics to aggregate");
  const std::size_t n_way = workers.front().sums.size();
  const Eigen::Index dim = workers.front().otd_sum.size();
  TaskStatistics stats;
  for (std::size_t e = 0; e < n_way; ++e) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    std::size_t count = 0;
    for (const auto& w : workers) {
      sum += w.sums[e];
      count += w.counts[e];
    }
    if (count == 0) throw Error(Errc::empty_class, "class " + std::to_string(e) + " has no support token");
    stats.prototypes.push_back(sum / static_cast<double>(count));
    stats.class_counts.push_back(count);
  }
  Eigen::VectorXd otd_sum = Eigen::VectorXd::Zero(dim);
  std::size_t otd_count = 0;
  for (const auto& w : workers) {
    otd_sum += w.otd_sum;
    otd_count += w.otd_count;
  }
  if (otd_count > 0) stats.otd_prototype = otd_sum / static_cast<double>(otd_count);
  if (with_covariance) {
    for (std::size_t e = 0; e < n_way; ++e) {
      Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
      for (const auto& w : workers) {
        if (w.counts[e] == 0) continue;
        const Eigen::VectorXd shift = w.sums[e] / static_cast<double>(w.counts[e]) - stats.prototypes[e];
        scatter += w.scatter[e];
        scatter.noalias() += static_cast<double>(w.counts[e]) * shift * shift.transpose();
      }
      set_class_covariance(stats, e, scatter / static_cast<double>(stats.class_counts[e]), shrinkage);
    }
  }
  return stats;
}

TaskStatistics federated_statistics(const TaskEmbeddings& emb, const Task& task,
                                    std::span<const WorkerShard> shards, const MetricTestConfig& metric) {
  std::vector<WorkerStatistics> local;
  for (const auto& s : shards) local.push_back(local_statistics(emb, task, s));
  TaskStatistics stats = aggregate_statistics(local, true, metric.shrinkage);
  // The threshold quantile needs every worker's support scores under the
  // aggregated statistics; the simulator gathers them directly.
  stats.threshold = calibrate_threshold(emb.support, stats, task, metric.threshold);
  return stats;
}

double combine_worker_losses(std::span<const WorkerLoss> losses, bool plain_mean) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& w : losses) {
    if (w.n_tokens == 0) continue;
    const double weight = plain_mean ? 1.0 : static_cast<double>(w.n_tokens);
    num += weight * w.loss;
    den += weight;
  }
  return den > 0.0 ? num / den : 0.0;
}

std::vector<WorkerLoss> worker_query_losses(const MetaParams& adapted, const Task& task,
                                            std::span<const WorkerShard> shards, HeadKind head) {
  std::vector<WorkerLoss> out;
  for (const auto& s : shards) {
    const auto docs = pick(task.query, s.query);
    std::size_t n = 0;
    for (const auto& d : docs) {
      for (auto l : d.labels) n += l != kMasked ? 1 : 0;
    }
    out.push_back({s.worker_id, n > 0 ? token_loss(adapted, docs, task.n_way(), head) : 0.0, n});
  }
  return out;
}

double federated_validate(const MetaParams& adapted, const Task& task, std::span<const WorkerShard> shards,
                          HeadKind head, bool plain_mean) {
  return combine_worker_losses(worker_query_losses(adapted, task, shards, head), plain_mean);
}

}  // namespace entmeta
