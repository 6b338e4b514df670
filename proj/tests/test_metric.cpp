#include <gtest/gtest.h>

#include <cmath>

#include "entmeta/error.hpp"
#include "entmeta/metric.hpp"
#include "testkit.hpp"

using namespace entmeta;

namespace {

constexpr Label O = kOutside;

/// Support labels and embeddings in one document, query in another.
struct Toy {
  Task task;
  TaskEmbeddings emb;
};

Toy toy(std::size_t n_way, std::vector<Label> support_labels, const RowMatrix& support,
        std::vector<Label> query_labels = {}, const RowMatrix& query = {}) {
  testkit::Gen g(1);
  Toy t;
  for (std::size_t c = 0; c < n_way; ++c) t.task.target_classes.push_back(static_cast<Label>(c));
  t.task.support.push_back(testkit::random_document(g, support_labels, 8, "s"));
  std::vector<bool> m;
  for (Label l : support_labels) m.push_back(l == kMasked);
  t.task.support_mask.push_back(m);
  t.emb.support.push_back(support);
  if (!query_labels.empty()) {
    t.task.query.push_back(testkit::random_document(g, query_labels, 8, "q"));
    std::vector<bool> qm;
    for (Label l : query_labels) qm.push_back(l == kMasked);
    t.task.query_mask.push_back(qm);
    t.emb.query.push_back(query);
  }
  return t;
}

RowMatrix rows(std::initializer_list<std::initializer_list<double>> r) {
  RowMatrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

std::span<const double> row_span(const RowMatrix& m, Eigen::Index r) {
  return {m.row(r).data(), static_cast<std::size_t>(m.cols())};
}

std::span<const double> vec_span(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

TEST(Prototypes, MeanOfOne) {
  const auto t = toy(1, {0, O}, rows({{1.5, -2.0}, {9, 9}}));
  const auto s = compute_prototypes(t.emb, t.task);
  EXPECT_EQ(s.prototypes[0], Eigen::Vector2d(1.5, -2.0));
}

TEST(Prototypes, SymmetricPairCancels) {
  const auto t = toy(1, {0, 0}, rows({{1, 0}, {-1, 0}}));
  EXPECT_EQ(compute_prototypes(t.emb, t.task).prototypes[0], Eigen::Vector2d::Zero());
}

TEST(Prototypes, MatchSummationOracle) {
  testkit::Gen g(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto tt = testkit::random_tiny_task(g, 3, 30, 5);
    const auto s = compute_prototypes(tt.emb, tt.task);
    const auto expect = testkit::mean_per_class(tt.emb, tt.task);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_LT((s.prototypes[c] - expect[c]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Prototypes, MaskedTokensExcluded) {
  const auto t = toy(1, {0, kMasked}, rows({{2, 2}, {100, 100}}));
  EXPECT_EQ(compute_prototypes(t.emb, t.task).prototypes[0], Eigen::Vector2d(2, 2));
}

TEST(Prototypes, EmptyClassThrows) {
  const auto t = toy(2, {0, kMasked, O}, rows({{1, 1}, {1, 1}, {0, 0}}));
  try {
    compute_prototypes(t.emb, t.task);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_class);
  }
}

TEST(Prototypes, PermutationInvariant) {
  testkit::Gen g(3);
  auto tt = testkit::random_tiny_task(g, 2, 30, 4);
  const auto a = compute_prototypes(tt.emb, tt.task);
  auto& doc = tt.task.support[0];
  auto& m = tt.emb.support[0];
  for (Eigen::Index i = m.rows() - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(g.index(static_cast<std::size_t>(i) + 1));
    m.row(i).swap(m.row(j));
    std::swap(doc.labels[static_cast<std::size_t>(i)], doc.labels[static_cast<std::size_t>(j)]);
  }
  const auto b = compute_prototypes(tt.emb, tt.task);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_LT((a.prototypes[c] - b.prototypes[c]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(OtdPrototype, MeanOfOutsideTokens) {
  auto t = toy(1, {0, O, O, kMasked}, rows({{5, 5}, {1, 0}, {-1, 2}, {50, 50}}));
  EXPECT_EQ(compute_otd_prototype(t.emb, t.task), Eigen::Vector2d(0, 1));
  t = toy(1, {0, O}, rows({{5, 5}, {3, -4}}));
  EXPECT_EQ(compute_otd_prototype(t.emb, t.task), Eigen::Vector2d(3, -4));
}

TEST(OtdPrototype, NoneThrows) {
  const auto t = toy(1, {0, 0}, rows({{1, 1}, {2, 2}}));
  try {
    compute_otd_prototype(t.emb, t.task);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::no_otd_tokens);
  }
}

TEST(Protonet, HandComputedSoftmax) {
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 2)};
  const std::vector<double> h{0.5, 0.5};
  const double d0 = 0.5, d1 = 0.5, d2 = 0.25 + 2.25;
  const double z = std::exp(-d0) + std::exp(-d1) + std::exp(-d2);
  const auto p = protonet_probabilities(h, s, false);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_NEAR(p[0], std::exp(-d0) / z, 1e-12);
  EXPECT_NEAR(p[1], std::exp(-d1) / z, 1e-12);
  EXPECT_NEAR(p[2], std::exp(-d2) / z, 1e-12);
}

TEST(Protonet, ExactPrototypeWinsAndTiesGoLow) {
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0), Eigen::Vector2d(10, 0)};
  const std::vector<RowMatrix> q{rows({{0, 0}, {5, 0}})};
  const auto labels = protonet_classify(q, s, false);
  EXPECT_EQ(labels[0][0], 0);
  EXPECT_EQ(labels[0][1], 0);
  const auto p = protonet_probabilities(row_span(q[0], 1), s, false);
  EXPECT_EQ(p[0], p[1]);
}

TEST(Protonet, OtdColumn) {
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0)};
  try {
    protonet_probabilities(std::vector<double>{1, 1}, s, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_otd_prototype);
  }
  s.otd_prototype = Eigen::Vector2d(5, 5);
  const std::vector<RowMatrix> q{rows({{4.9, 5.2}})};
  EXPECT_EQ(protonet_classify(q, s, true)[0][0], kOutside);
  EXPECT_EQ(protonet_classify(q, s, false)[0][0], 0);
}

TEST(NearestNeighbour, ExactMatchTakesItsLabel) {
  const auto t = toy(2, {0, 1, O}, rows({{1, 0}, {0, 1}, {-1, -1}}));
  const std::vector<RowMatrix> q{rows({{0, 1}, {-1, -1}})};
  const auto labels = nn_classify(q, t.emb.support, t.task);
  EXPECT_EQ(labels[0][0], 1);
  EXPECT_EQ(labels[0][1], kOutside);
}

TEST(NearestNeighbour, OrthogonalTieGoesToFirst) {
  const auto t = toy(2, {kMasked, 1, 0}, rows({{0, 5}, {0, 1}, {0, 2}}));
  const std::vector<RowMatrix> q{rows({{3, 0}})};
  EXPECT_EQ(nn_classify(q, t.emb.support, t.task)[0][0], 1);  // the masked token never votes
}

TEST(NearestNeighbour, MatchesExhaustiveArgmax) {
  testkit::Gen g(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto tt = testkit::random_tiny_task(g, 3, 24, 4);
    const auto got = nn_classify(tt.emb.query, tt.emb.support, tt.task);
    for (std::size_t qd = 0; qd < tt.emb.query.size(); ++qd) {
      for (Eigen::Index ql = 0; ql < tt.emb.query[qd].rows(); ++ql) {
        double best = -INFINITY;
        Label label = kOutside;
        for (std::size_t sd = 0; sd < tt.emb.support.size(); ++sd)
          for (Eigen::Index sl = 0; sl < tt.emb.support[sd].rows(); ++sl) {
            const Label l = tt.task.support[sd].labels[static_cast<std::size_t>(sl)];
            if (l == kMasked) continue;
            const double ip = tt.emb.query[qd].row(ql).dot(tt.emb.support[sd].row(sl));
            if (ip > best) best = ip, label = l;
          }
        EXPECT_EQ(got[qd][static_cast<std::size_t>(ql)], label);
      }
    }
  }
}

TEST(Covariance, SingleTokenIsRidge) {
  const auto t = toy(1, {0}, rows({{3, 4, 5}}));
  auto s = compute_prototypes(t.emb, t.task);
  fit_covariance(t.emb, s, t.task, Shrinkage{0.0, 0.5});
  EXPECT_EQ(s.covariances[0], 0.5 * Eigen::Matrix3d::Identity());
}

TEST(Covariance, OneDimensionalUnitVariance) {
  const auto t = toy(1, {0, 0}, rows({{-1}, {1}}));
  auto s = compute_prototypes(t.emb, t.task);
  fit_covariance(t.emb, s, t.task, Shrinkage{0.0, 0.0});
  EXPECT_DOUBLE_EQ(s.covariances[0](0, 0), 1.0);
}

TEST(Covariance, MatchesTextbookFormula) {
  testkit::Gen g(5);
  RowMatrix x(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g.real(-2, 2);
  const auto t = toy(1, {0, 0, 0, 0, 0}, x);
  auto s = compute_prototypes(t.emb, t.task);
  const Shrinkage sh{0.3, 1e-3};
  fit_covariance(t.emb, s, t.task, sh);

  Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(4, 4);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 5; ++i) ma += x(i, a) / 5, mb += x(i, b) / 5;
      for (int i = 0; i < 5; ++i) expect(a, b) += (x(i, a) - ma) * (x(i, b) - mb) / 5;
    }
  const double ridge = 0.3 * expect.trace() / 4 + 1e-3;
  expect += ridge * Eigen::MatrixXd::Identity(4, 4);
  EXPECT_LT((s.covariances[0] - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((s.covariances[0] - s.covariances[0].transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Covariance, ZeroRidgeRankDeficientIsNonPsd) {
  const auto t = toy(1, {0, 0}, rows({{1, 1}, {-1, -1}}));
  auto s = compute_prototypes(t.emb, t.task);
  try {
    fit_covariance(t.emb, s, t.task, Shrinkage{0.0, 0.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::non_psd);
  }
}

TEST(Mahalanobis, ZeroAtPrototype) {
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(1, 2), Eigen::Vector2d(-3, 0)};
  for (std::size_t c = 0; c < 2; ++c) set_class_covariance(s, c, Eigen::Matrix2d::Identity(), Shrinkage{0, 0});
  EXPECT_EQ(mahalanobis_score(vec_span(s.prototypes[1]), s), 0.0);
  const auto r = mahalanobis(vec_span(s.prototypes[1]), s);
  EXPECT_EQ(r.nearest_class, 1u);
}

TEST(Mahalanobis, EuclideanCase) {
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0), Eigen::Vector2d(20, 20)};
  for (std::size_t c = 0; c < 2; ++c) set_class_covariance(s, c, Eigen::Matrix2d::Identity(), Shrinkage{0, 0});
  EXPECT_NEAR(mahalanobis_score(std::vector<double>{3, 4}, s), 25.0, 1e-12);
}

TEST(Mahalanobis, MatchesExplicitInverse) {
  testkit::Gen g(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int dim = g.between(1, 6);
    TaskStatistics s;
    std::vector<Eigen::MatrixXd> cov;
    for (int c = 0; c < 3; ++c) {
      Eigen::MatrixXd a(dim, dim);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g.real(-1, 1);
      Eigen::VectorXd mu(dim);
      for (auto& v : mu) v = g.real(-2, 2);
      s.prototypes.push_back(mu);
      set_class_covariance(s, static_cast<std::size_t>(c), a * a.transpose() / dim, Shrinkage{0.1, 1e-3});
      cov.push_back(s.covariances.back());
    }
    Eigen::VectorXd h(dim);
    for (auto& v : h) v = g.real(-3, 3);
    EXPECT_NEAR(mahalanobis_score(vec_span(h), s), testkit::explicit_inverse_mahalanobis(h, s.prototypes, cov), 1e-10);
  }
}

TEST(Mahalanobis, MonotoneAlongRay) {
  testkit::Gen g(7);
  TaskStatistics s;
  Eigen::MatrixXd a(3, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g.real(-1, 1);
  s.prototypes = {Eigen::Vector3d(0.5, -1, 2)};
  set_class_covariance(s, 0, a * a.transpose(), Shrinkage{0.1, 1e-3});
  for (int dir = 0; dir < 10; ++dir) {
    Eigen::Vector3d u(g.real(-1, 1), g.real(-1, 1), g.real(-1, 1));
    double prev = -1;
    for (double t = 0; t < 5; t += 0.25) {
      const Eigen::VectorXd h = s.prototypes[0] + t * u;
      const double r = mahalanobis_score(vec_span(h), s);
      EXPECT_GE(r, prev);
      prev = r;
    }
  }
}

TEST(Threshold, QuantileAndMargin) {
  EXPECT_DOUBLE_EQ(1.5 * quantile({1, 2, 3}, 1.0), 4.5);
  EXPECT_DOUBLE_EQ(quantile({3, 1, 2}, 0.5), 2.0);
}

TEST(Threshold, CalibratedFromSupportScores) {
  // unit covariance around prototypes 0 and (10,0): support ITD scores are 1, 1 and 4; the O token is ignored
  auto t = toy(2, {0, 0, 1, O}, rows({{1, 0}, {-1, 0}, {10, 2}, {50, 50}}));
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0), Eigen::Vector2d(10, 0)};
  for (std::size_t c = 0; c < 2; ++c) set_class_covariance(s, c, Eigen::Matrix2d::Identity(), Shrinkage{0, 0});
  EXPECT_NEAR(calibrate_threshold(t.emb.support, s, t.task), 6.0, 1e-12);
  EXPECT_NEAR(calibrate_threshold(t.emb.support, s, t.task, {0.5, 1.0}), 1.0, 1e-12);
}

TEST(Threshold, LargerMarginNeverFlagsMore) {
  testkit::Gen g(8);
  auto tt = testkit::random_tiny_task(g, 3, 30, 4);
  auto s = compute_prototypes(tt.emb, tt.task);
  fit_covariance(tt.emb, s, tt.task);
  std::size_t prev = SIZE_MAX;
  for (double m = 0.25; m <= 4.0; m += 0.25) {
    s.threshold = calibrate_threshold(tt.emb.support, s, tt.task, {1.0, m});
    const auto pred = otd_detect_and_classify(tt.emb.query, tt.emb.support, s, tt.task);
    std::size_t flagged = 0;
    for (const auto& d : pred.labels) flagged += static_cast<std::size_t>(std::count(d.begin(), d.end(), kOutside));
    EXPECT_LE(flagged, prev);
    prev = flagged;
  }
}

TEST(OtdDetect, BoundaryIsInclusive) {
  const auto t = toy(1, {0, 0}, rows({{0, 0}, {0, 0}}));
  TaskStatistics s;
  s.prototypes = {Eigen::Vector2d(0, 0)};
  set_class_covariance(s, 0, Eigen::Matrix2d::Identity(), Shrinkage{0, 0});
  s.threshold = 4.0;
  const std::vector<RowMatrix> q{rows({{0, 0}, {2, 0}, {0, 1.999}})};
  const auto pred = otd_detect_and_classify(q, t.emb.support, s, t.task);
  EXPECT_EQ(pred.labels[0], (std::vector<Label>{0, kOutside, 0}));
  EXPECT_DOUBLE_EQ(pred.itd_score[0][1], -4.0);
}

TEST(OtdDetect, MatchesTwoStageOracle) {
  testkit::Gen g(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto tt = testkit::random_tiny_task(g, 3, 30, 3);
    auto s = compute_prototypes(tt.emb, tt.task);
    fit_covariance(tt.emb, s, tt.task);
    s.threshold = calibrate_threshold(tt.emb.support, s, tt.task);
    std::vector<Eigen::MatrixXd> cov(s.covariances.begin(), s.covariances.end());
    const auto pred = otd_detect_and_classify(tt.emb.query, tt.emb.support, s, tt.task);
    const auto nn = nn_classify(tt.emb.query, tt.emb.support, tt.task);
    for (std::size_t d = 0; d < tt.emb.query.size(); ++d)
      for (Eigen::Index l = 0; l < tt.emb.query[d].rows(); ++l) {
        const double r = testkit::explicit_inverse_mahalanobis(tt.emb.query[d].row(l).transpose(), s.prototypes, cov);
        const auto i = static_cast<std::size_t>(l);
        if (std::abs(r - s.threshold) < 1e-9) continue;  // too close to call with a different solver
        EXPECT_EQ(pred.labels[d][i], r >= s.threshold ? kOutside : nn[d][i]);
      }
  }
}
