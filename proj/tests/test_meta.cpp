#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "entmeta/decoder.hpp"
#include "entmeta/error.hpp"
#include "entmeta/losses.hpp"
#include "entmeta/meta.hpp"
#include "entmeta/sampler.hpp"
#include "testkit.hpp"

using namespace entmeta;

namespace {

EncoderArch tiny_arch() {
  EncoderArch a;
  a.vocab_size = 32;
  a.input_dim = 10;
  a.hidden_dim = 10;
  a.depth = 2;
  a.output_dim = 6;
  a.window = 2;
  return a;
}

/// Tasks drawn from a small synthetic corpus, 2-way 2-shot.
const std::vector<Task>& corpus_tasks() {
  static const std::vector<Task> tasks = [] {
    SyntheticConfig cfg;
    cfg.n_classes = 6;
    cfg.n_documents = 120;
    cfg.doc_length_range = {16, 24};
    cfg.occurrences_per_doc_range = {2, 4};
    cfg.background_vocab = 20;
    cfg.tokens_per_class = 1;
    static const Corpus corpus = generate_synthetic_corpus(cfg);
    const auto split = split_classes(corpus, 0.5, 1, 1);
    TaskSpec spec;
    spec.n_way = 2;
    spec.k_shot = spec.k_query = 2;
    spec.rho = 1.5;
    return sample_meta_dataset(corpus, split, spec, 8).tasks;
  }();
  return tasks;
}

MetaParams tiny_params(std::uint64_t seed = 3) {
  auto p = init_meta_params(tiny_arch(), 4, seed);
  // a random decoder start keeps every head coordinate in play
  testkit::Gen g(seed);
  for (double& v : p.decoder.flat()) v = g.real(-0.5, 0.5);
  return p;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(HierarchicalHead, SaturatedGateTakesAllMass) {
  DecoderParams d(3, 4);
  d.flat()[d.layout().binary_bias()] = 800.0;
  const auto p = hc_forward(std::vector<double>{0.1, 0.2, 0.3}, d, 4);
  EXPECT_EQ(p[0], 1.0);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_EQ(p[i], 0.0);
  EXPECT_EQ(predict_label(p), kOutside);
}

TEST(HierarchicalHead, ZeroLogits) {
  DecoderParams d(3, 4);
  const auto p = hc_forward(std::vector<double>{0.4, -1, 2}, d, 4);
  EXPECT_EQ(p, (std::vector<double>{0.5, 0.125, 0.125, 0.125, 0.125}));
  EXPECT_EQ(predict_label(p), kOutside);
}

TEST(HierarchicalHead, SimplexProperty) {
  testkit::Gen g(31);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t max_way = 1 + g.index(5), n = 1 + g.index(max_way), dim = 1 + g.index(6);
    DecoderParams d(dim, max_way);
    const double scale = g.real(0.1, 30.0);
    for (double& v : d.flat()) v = g.real(-scale, scale);
    std::vector<double> h(dim);
    for (double& v : h) v = g.real(-3, 3);
    for (auto kind : {HeadKind::hierarchical, HeadKind::plain}) {
      const auto p = head_forward(kind, h, d, n);
      ASSERT_EQ(p.size(), n + 1);
      for (double v : p) EXPECT_GE(v, 0.0);
      EXPECT_LT(std::abs(sum(p) - 1.0), 1e-12);
    }
  }
}

TEST(HierarchicalHead, OnlyTaskClassesCompete) {
  DecoderParams d(2, 4);
  d.flat()[d.layout().entity_bias(3)] = 50.0;  // class outside a 2-way task
  const auto p = hc_forward(std::vector<double>{0, 0}, d, 2);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_DOUBLE_EQ(p[1], 0.25);
}

TEST(InnerLoop, ZeroStepsIsIdentity) {
  const auto p = tiny_params();
  const auto& t = corpus_tasks()[0];
  InnerLoopConfig cfg;
  cfg.steps = 0;
  for (bool enc : {false, true}) {
    const auto r = inner_loop_sgd(p.encoder, p.decoder, t.support, t.n_way(), cfg, enc);
    EXPECT_EQ(r.params, p);
    EXPECT_EQ(r.losses.size(), 1u);
  }
}

TEST(InnerLoop, LossDecreasesOnSupport) {
  const auto p = tiny_params();
  for (auto head : {HeadKind::plain, HeadKind::hierarchical}) {
    for (bool enc : {false, true}) {
      InnerLoopConfig cfg;
      cfg.head = head;
      cfg.lr = 0.1;
      for (const auto& t : corpus_tasks()) {
        const auto r = inner_loop_sgd(p.encoder, p.decoder, t.support, t.n_way(), cfg, enc);
        ASSERT_EQ(r.losses.size(), 16u);
        EXPECT_LT(r.losses.back(), r.losses.front());
        EXPECT_NEAR(r.losses.back(), token_loss(r.params, t.support, t.n_way(), head), 1e-12);
      }
    }
  }
}

TEST(InnerLoop, AnilNeverTouchesEncoder) {
  const auto p = tiny_params();
  for (const auto& t : corpus_tasks()) {
    const auto r = inner_loop_sgd(p.encoder, p.decoder, t.support, t.n_way(), InnerLoopConfig{}, false);
    EXPECT_TRUE(bitwise_equal(r.params.encoder.flat(), p.encoder.flat()));
    EXPECT_FALSE(bitwise_equal(r.params.decoder.flat(), p.decoder.flat()));
  }
}

TEST(InnerLoop, BadLearningRate) {
  const auto p = tiny_params();
  InnerLoopConfig cfg;
  cfg.lr = 0.0;
  const auto& t = corpus_tasks()[0];
  EXPECT_THROW(inner_loop_sgd(p.encoder, p.decoder, t.support, 2, cfg, false), Error);
}

TEST(Anil, MetaGradientMatchesFiniteDifferences) {
  testkit::Gen g(32);
  for (auto head : {HeadKind::hierarchical, HeadKind::plain}) {
    for (std::size_t steps : {1u, 3u}) {
      InnerLoopConfig cfg;
      cfg.steps = steps;
      cfg.head = head;
      cfg.lr = 0.3;
      auto p = tiny_params(40 + steps);
      const auto& t = corpus_tasks()[steps];
      const auto grad = anil_task_gradient(p, t, cfg);
      EXPECT_NEAR(grad.loss, anil_objective(p, t, cfg), 1e-12);
      auto f = [&] { return anil_objective(p, t, cfg); };
      for (int k = 0; k < 10; ++k) {
        const bool enc = k % 2 == 0;
        const auto& gv = enc ? grad.encoder : grad.decoder;
        std::size_t i;
        do i = g.index(gv.size());
        while (std::abs(gv[i]) < 1e-7);
        double& x = enc ? p.encoder.flat()[i] : p.decoder.flat()[i];
        const double fd = testkit::central_difference(f, x, 1e-5);
        EXPECT_LT(testkit::relative_error(gv[i], fd, 1e-7), 1e-3)
            << (enc ? "encoder " : "decoder ") << i << ": " << gv[i] << " vs " << fd;
      }
    }
  }
}

TEST(Anil, ZeroStepsIsJointTraining) {
  InnerLoopConfig cfg;
  cfg.steps = 0;
  const auto p = tiny_params();
  const auto& t = corpus_tasks()[2];
  EXPECT_DOUBLE_EQ(anil_objective(p, t, cfg), token_loss(p, t.query, t.n_way(), cfg.head));
}

TEST(Anil, MetaLossTrendsDown) {
  auto p = tiny_params(5);
  InnerLoopConfig cfg;
  cfg.steps = 5;
  cfg.lr = 0.1;
  MetaOptimizerConfig oc;
  oc.lr = 0.01;
  MetaOptimizer opt(p, oc);
  const auto& tasks = corpus_tasks();
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    const std::span<const Task> batch(&tasks[static_cast<std::size_t>(step) % 4 * 2], 2);
    const auto r = anil_meta_step(p, batch, cfg, opt);
    if (step < 5) first += r.meta_loss;
    if (step >= 45) last += r.meta_loss;
  }
  EXPECT_LT(last, first);
}

TEST(Reptile, ZeroStepsLeavesParams) {
  auto p = tiny_params();
  const auto before = p;
  InnerLoopConfig cfg;
  cfg.steps = 0;
  MetaOptimizer opt(p, {});
  reptile_meta_step(p, std::span<const Task>(corpus_tasks().data(), 2), cfg, opt);
  EXPECT_EQ(p, before);
}

TEST(Reptile, UnitStepLandsOnAdaptedParams) {
  auto p = tiny_params();
  const auto& t = corpus_tasks()[1];
  InnerLoopConfig cfg;
  cfg.steps = 4;
  std::vector<Document> docs = t.support;
  docs.insert(docs.end(), t.query.begin(), t.query.end());
  const auto adapted = inner_loop_sgd(p.encoder, p.decoder, docs, t.n_way(), cfg, true).params;

  MetaOptimizerConfig oc;
  oc.rule = OuterRule::sgd;
  oc.lr = 1.0;
  MetaOptimizer opt(p, oc);
  reptile_meta_step(p, std::span<const Task>(&t, 1), cfg, opt);
  for (std::size_t i = 0; i < p.encoder.size(); ++i) EXPECT_NEAR(p.encoder.flat()[i], adapted.encoder.flat()[i], 1e-12);
  for (std::size_t i = 0; i < p.decoder.size(); ++i) EXPECT_NEAR(p.decoder.flat()[i], adapted.decoder.flat()[i], 1e-12);
}

TEST(Reptile, BatchDirectionIsTheMeanDelta) {
  auto p = tiny_params();
  const auto init = p;
  InnerLoopConfig cfg;
  cfg.steps = 2;
  const std::span<const Task> batch(corpus_tasks().data(), 2);
  const auto d0 = reptile_task_delta(p, batch[0], cfg), d1 = reptile_task_delta(p, batch[1], cfg);
  MetaOptimizerConfig oc;
  oc.rule = OuterRule::sgd;
  oc.lr = 1.0;
  MetaOptimizer opt(p, oc);
  reptile_meta_step(p, batch, cfg, opt);
  for (std::size_t i = 0; i < p.encoder.size(); ++i)
    EXPECT_NEAR(p.encoder.flat()[i], init.encoder.flat()[i] + 0.5 * (d0.encoder[i] + d1.encoder[i]), 1e-12);
}

TEST(ContrastProto, EncoderGradientMatchesFiniteDifferences) {
  testkit::Gen g(33);
  auto p = tiny_params();
  const auto& t = corpus_tasks()[3];
  const auto grad = contrastproto_task_gradient(p.encoder, t);
  auto f = [&] {
    const auto emb = encode_task(p.encoder, t);
    return mcon_loss(emb, compute_prototypes(emb, t), t).loss;
  };
  EXPECT_NEAR(grad.loss, f(), 1e-12);
  for (int k = 0; k < 10; ++k) {
    std::size_t i;
    do i = g.index(grad.encoder.size());
    while (std::abs(grad.encoder[i]) < 1e-6);
    const double fd = testkit::central_difference(f, p.encoder.flat()[i], 1e-5);
    EXPECT_LT(testkit::relative_error(grad.encoder[i], fd, 1e-6), 1e-4) << grad.encoder[i] << " vs " << fd;
  }
}

TEST(ContrastProto, DuplicatedTaskSameUpdate) {
  const auto& t = corpus_tasks()[0];
  auto a = tiny_params(), b = tiny_params();
  MetaOptimizer oa(a, {}), ob(b, {});
  const std::vector<Task> one{t}, two{t, t};
  contrastproto_meta_step(a, one, oa);
  contrastproto_meta_step(b, two, ob);
  EXPECT_EQ(a, b);
}

TEST(ContrastProto, LossDecreasesOverTraining) {
  auto p = tiny_params(7);
  MetaOptimizerConfig oc;
  oc.lr = 0.01;
  MetaOptimizer opt(p, oc);
  const auto& tasks = corpus_tasks();
  double first = 0, last = 0;
  for (int step = 0; step < 100; ++step) {
    const std::span<const Task> batch(&tasks[static_cast<std::size_t>(step) % 4 * 2], 2);
    const auto r = contrastproto_meta_step(p, batch, opt);
    if (step < 10) first += r.meta_loss;
    if (step >= 90) last += r.meta_loss;
  }
  EXPECT_LT(last, first);
}

TEST(MetaOptimizer, FirstAdamStepIsSignedLearningRate) {
  auto p = tiny_params();
  const auto init = p;
  MetaOptimizerConfig oc;
  oc.lr = 0.05;
  MetaOptimizer opt(p, oc);
  std::vector<double> ge(p.encoder.size()), gd(p.decoder.size());
  testkit::Gen g(34);
  for (double& v : ge) v = g.real(-2, 2);
  for (double& v : gd) v = g.real(-2, 2);
  opt.apply(p, ge, gd);
  EXPECT_EQ(opt.step_count(), 1u);
  for (std::size_t i = 0; i < ge.size(); ++i)
    EXPECT_NEAR(p.encoder.flat()[i], init.encoder.flat()[i] - 0.05 * ge[i] / (std::abs(ge[i]) + 1e-8), 1e-12);
  for (std::size_t i = 0; i < gd.size(); ++i)
    EXPECT_NEAR(p.decoder.flat()[i], init.decoder.flat()[i] - 0.05 * gd[i] / (std::abs(gd[i]) + 1e-8), 1e-12);
}

TEST(MetaStep, ThreadCountDoesNotChangeResult) {
  const std::span<const Task> batch(corpus_tasks().data(), 4);
  for (auto m : {Method::contrastproto, Method::anil_hc, Method::reptile}) {
    auto a = tiny_params(), b = tiny_params();
    MetaOptimizer oa(a, {}), ob(b, {});
    InnerLoopConfig cfg;
    cfg.steps = 2;
    meta_step(m, a, batch, cfg, oa, {1, {}});
    meta_step(m, b, batch, cfg, ob, {3, {}});
    EXPECT_EQ(a, b) << method_name(m);
  }
}

TEST(Methods, NamesRoundTrip) {
  for (auto m : {Method::protonet, Method::protonet_eod, Method::contrastproto, Method::anil, Method::anil_hc,
                 Method::reptile, Method::reptile_hc})
    EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("maml"), Error);
}

TEST(Predict, EveryMethodLabelsEveryQueryToken) {
  const auto p = tiny_params();
  const auto& t = corpus_tasks()[4];
  for (auto m : {Method::protonet, Method::protonet_eod, Method::contrastproto, Method::anil, Method::anil_hc,
                 Method::reptile, Method::reptile_hc}) {
    const auto pred = predict_task(m, p, t, InnerLoopConfig{});
    ASSERT_EQ(pred.labels.size(), t.query.size());
    for (std::size_t d = 0; d < t.query.size(); ++d) {
      ASSERT_EQ(pred.labels[d].size(), t.query[d].size());
      for (std::size_t i = 0; i < pred.labels[d].size(); ++i) {
        const Label l = pred.labels[d][i];
        EXPECT_TRUE(l == kOutside || (l >= 0 && l < 2)) << method_name(m);
        EXPECT_TRUE(std::isfinite(pred.itd_score[d][i]));
      }
    }
    if (m == Method::protonet) {
      for (const auto& d : pred.labels) EXPECT_EQ(std::count(d.begin(), d.end(), kOutside), 0);
    }
  }
}
