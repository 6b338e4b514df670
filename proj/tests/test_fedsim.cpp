#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>

#include "entmeta/error.hpp"
#include "entmeta/fedsim.hpp"
#include "entmeta/sampler.hpp"
#include "testkit.hpp"

using namespace entmeta;

namespace {

Task background_task(std::size_t n_support, std::size_t n_query) {
  testkit::Gen g(1);
  Task t;
  t.target_classes = {0};
  const std::vector<Label> labels{kOutside, 0, kOutside};
  for (std::size_t i = 0; i < n_support; ++i) t.support.push_back(testkit::random_document(g, labels, 8, "s" + std::to_string(i)));
  for (std::size_t i = 0; i < n_query; ++i) t.query.push_back(testkit::random_document(g, labels, 8, "q" + std::to_string(i)));
  return t;
}

const std::vector<Task>& xdr_tasks() {
  static const std::vector<Task> tasks = [] {
    SyntheticConfig cfg;
    cfg.n_documents = 160;
    static const Corpus corpus = generate_synthetic_corpus(cfg);
    const auto split = split_classes(corpus, 0.5, 1, 4);
    TaskSpec spec;
    spec.seed = 9;
    return sample_meta_dataset(corpus, split, spec, 6).tasks;
  }();
  return tasks;
}

EncoderArch arch_for_synthetic() {
  EncoderArch a;
  a.vocab_size = SyntheticConfig{}.vocab_size();
  a.input_dim = a.hidden_dim = 12;
  a.output_dim = 8;
  return a;
}

std::vector<std::size_t> sizes(const std::vector<WorkerShard>& shards, bool support) {
  std::vector<std::size_t> s;
  for (const auto& w : shards) s.push_back(support ? w.support.size() : w.query.size());
  return s;
}

double max_abs(const Eigen::MatrixXd& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Partition, EvenSplit) {
  const auto shards = partition_task(background_task(8, 8), 4, 3);
  EXPECT_EQ(sizes(shards, true), (std::vector<std::size_t>{2, 2, 2, 2}));
}

TEST(Partition, RoundRobinRemainder) {
  const auto shards = partition_task(background_task(5, 3), 4, 3);
  EXPECT_EQ(sizes(shards, true), (std::vector<std::size_t>{2, 1, 1, 1}));
  EXPECT_EQ(sizes(shards, false), (std::vector<std::size_t>{1, 1, 1, 0}));
}

TEST(Partition, SingleWorkerGetsEverything) {
  const auto shards = partition_task(background_task(5, 3), 1, 3);
  ASSERT_EQ(shards.size(), 1u);
  EXPECT_EQ(shards[0].support, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(shards[0].query, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Partition, ShardsPartitionTheDocuments) {
  const auto t = background_task(13, 9);
  for (std::size_t w : {2u, 3u, 8u}) {
    const auto shards = partition_task(t, w, 11);
    EXPECT_EQ(shards, partition_task(t, w, 11));
    std::vector<std::size_t> s, q;
    for (const auto& sh : shards) {
      EXPECT_TRUE(std::is_sorted(sh.support.begin(), sh.support.end()));
      s.insert(s.end(), sh.support.begin(), sh.support.end());
      q.insert(q.end(), sh.query.begin(), sh.query.end());
    }
    std::sort(s.begin(), s.end());
    std::sort(q.begin(), q.end());
    EXPECT_EQ(s.size(), 13u);
    EXPECT_EQ(std::unique(s.begin(), s.end()), s.end());
    EXPECT_EQ(q.size(), 9u);
    EXPECT_EQ(std::unique(q.begin(), q.end()), q.end());
  }
  EXPECT_THROW(partition_task(t, 0, 1), Error);
}

TEST(FederatedStatistics, EqualCentralizedForRandomPartitions) {
  const auto enc = init_params(arch_for_synthetic(), 5);
  std::uint64_t seed = 0;
  for (const auto& task : xdr_tasks()) {
    const auto emb = encode_task(enc, task);
    auto central = compute_prototypes(emb, task);
    central.otd_prototype = compute_otd_prototype(emb, task);
    fit_covariance(emb, central, task);
    central.threshold = calibrate_threshold(emb.support, central, task);
    for (std::size_t w : {2u, 4u, 8u}) {
      const auto shards = partition_task(task, w, ++seed);
      const auto fed = federated_statistics(emb, task, shards);
      for (std::size_t c = 0; c < task.n_way(); ++c) {
        EXPECT_LT(max_abs(fed.prototypes[c] - central.prototypes[c]), 1e-12);
        EXPECT_LT(max_abs(fed.covariances[c] - central.covariances[c]), 1e-12);
        EXPECT_EQ(fed.class_counts[c], central.class_counts[c]);
      }
      ASSERT_TRUE(fed.otd_prototype.has_value());
      EXPECT_LT(max_abs(*fed.otd_prototype - *central.otd_prototype), 1e-12);
      EXPECT_NEAR(fed.threshold, central.threshold, 1e-12 * std::max(1.0, central.threshold));
    }
  }
}

TEST(FederatedStatistics, WorkerOrderIrrelevant) {
  const auto enc = init_params(arch_for_synthetic(), 5);
  const auto& task = xdr_tasks()[0];
  const auto emb = encode_task(enc, task);
  auto shards = partition_task(task, 3, 2);
  const auto a = federated_statistics(emb, task, shards);
  std::reverse(shards.begin(), shards.end());
  const auto b = federated_statistics(emb, task, shards);
  for (std::size_t c = 0; c < task.n_way(); ++c) EXPECT_LT(max_abs(a.covariances[c] - b.covariances[c]), 1e-12);
}

TEST(FederatedAdapt, SingleWorkerIsPlainInnerLoop) {
  const auto params = init_meta_params(arch_for_synthetic(), 4, 6);
  InnerLoopConfig cfg;
  cfg.steps = 4;
  for (const auto& task : xdr_tasks()) {
    const auto shards = partition_task(task, 1, 3);
    for (bool enc : {false, true}) {
      const auto fed = federated_adapt(params, task, shards, cfg, enc);
      const auto plain = inner_loop_sgd(params.encoder, params.decoder, task.support, task.n_way(), cfg, enc);
      EXPECT_TRUE(bitwise_equal(fed.params.encoder.flat(), plain.params.encoder.flat()));
      EXPECT_TRUE(bitwise_equal(fed.params.decoder.flat(), plain.params.decoder.flat()));
    }
  }
}

TEST(FederatedAdapt, ReplicatedShardsMatchSingleWorker) {
  const auto params = init_meta_params(arch_for_synthetic(), 4, 6);
  InnerLoopConfig cfg;
  cfg.steps = 3;
  const auto& task = xdr_tasks()[1];
  const auto one = partition_task(task, 1, 0);
  std::vector<WorkerShard> replicated(3, one[0]);
  for (std::size_t w = 0; w < 3; ++w) replicated[w].worker_id = w;
  for (bool enc : {false, true}) {
    const auto a = federated_adapt(params, task, one, cfg, enc);
    const auto b = federated_adapt(params, task, replicated, cfg, enc);
    for (std::size_t i = 0; i < a.params.decoder.size(); ++i)
      EXPECT_NEAR(a.params.decoder.flat()[i], b.params.decoder.flat()[i], 1e-9);
    for (std::size_t i = 0; i < a.params.encoder.size(); ++i)
      EXPECT_NEAR(a.params.encoder.flat()[i], b.params.encoder.flat()[i], 1e-9);
  }
}

TEST(FederatedAdapt, RecordsRoundLosses) {
  const auto params = init_meta_params(arch_for_synthetic(), 4, 6);
  InnerLoopConfig cfg;
  cfg.steps = 4;
  FederatedConfig fc;
  fc.n_workers = 4;
  fc.aggregation_interval = 2;
  const auto& task = xdr_tasks()[2];
  const auto r = federated_adapt(params, task, partition_task(task, 4, 1), cfg, false, fc);
  ASSERT_EQ(r.round_worker_losses.size(), 2u);
  EXPECT_EQ(r.round_worker_losses[0].size(), 4u);
}

TEST(FederatedValidate, WeightedMean) {
  const std::vector<WorkerLoss> equal{{0, 1.0, 5}, {1, 3.0, 5}};
  EXPECT_DOUBLE_EQ(combine_worker_losses(equal), 2.0);
  const std::vector<WorkerLoss> with_empty{{0, 1.0, 5}, {1, 0.0, 0}, {2, 3.0, 5}};
  EXPECT_DOUBLE_EQ(combine_worker_losses(with_empty), 2.0);
  EXPECT_DOUBLE_EQ(combine_worker_losses(with_empty, true), 2.0);
  const std::vector<WorkerLoss> unequal{{0, 1.0, 1}, {1, 3.0, 3}};
  EXPECT_DOUBLE_EQ(combine_worker_losses(unequal), 2.5);
  EXPECT_DOUBLE_EQ(combine_worker_losses(unequal, true), 2.0);
}

TEST(FederatedValidate, EqualsWholeQueryLoss) {
  const auto params = init_meta_params(arch_for_synthetic(), 4, 6);
  for (const auto& task : xdr_tasks()) {
    for (auto head : {HeadKind::plain, HeadKind::hierarchical}) {
      const double whole = token_loss(params, task.query, task.n_way(), head);
      for (std::size_t w : {1u, 2u, 4u, 8u}) {
        const auto shards = partition_task(task, w, w);
        EXPECT_NEAR(federated_validate(params, task, shards, head), whole, 1e-12);
      }
    }
  }
}
