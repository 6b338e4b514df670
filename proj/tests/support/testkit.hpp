#pragma once

// Independent reference implementations and seeded generators shared by the
// unit tests and the acceptance binary. Nothing here calls the library
// routine it is meant to check.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "entmeta/corpus.hpp"
#include "entmeta/encoder.hpp"
#include "entmeta/metric.hpp"
#include "entmeta/sampler.hpp"

namespace testkit {

using entmeta::Label;

/// Small self-contained generator so test inputs do not depend on the
/// library's own Rng.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : e_(seed) {}
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(e_() % n); }
  int between(int lo, int hi) { return lo + static_cast<int>(e_() % static_cast<std::uint64_t>(hi - lo + 1)); }
  double real(double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(e_() >> 11) * 0x1.0p-53); }
  bool coin(double p) { return real(0.0, 1.0) < p; }

 private:
  std::mt19937_64 e_;
};

/// Random document of `length` tokens with the given labels.
entmeta::Document random_document(Gen& g, std::span<const Label> labels, std::size_t vocab, const std::string& id);

struct TinyTask {
  entmeta::Task task;
  entmeta::TaskEmbeddings emb;
};

/// Random task with relative labels (every class has a support token and an
/// in-task query token) and random embeddings of dimension `dim`.
TinyTask random_tiny_task(Gen& g, std::size_t n_way, std::size_t max_tokens, std::size_t dim,
                          std::size_t vocab = 32, double scale = 1.0);

std::vector<Eigen::VectorXd> mean_per_class(const entmeta::TaskEmbeddings& emb, const entmeta::Task& task);

/// Literal double loop over anchors, positives and candidates.
double brute_mcon(const entmeta::TaskEmbeddings& emb, const entmeta::Task& task);

/// Gauss-Jordan inverse with partial pivoting.
Eigen::MatrixXd gauss_jordan_inverse(Eigen::MatrixXd a);

double explicit_inverse_mahalanobis(const Eigen::VectorXd& h, const std::vector<Eigen::VectorXd>& mu,
                                    const std::vector<Eigen::MatrixXd>& cov);

/// Counts ITD/OTD pairs directly.
double pairwise_auroc(std::span<const double> scores, std::span<const char> is_itd);

using SpanKey = std::tuple<std::size_t, Label, std::size_t, std::size_t>;  // doc, class, start, end

/// Runs of identical labels >= 0, written independently of the library.
std::set<SpanKey> span_set(std::size_t doc, std::span<const Label> labels);

struct Prf {
  std::size_t n_true = 0, n_pred = 0, n_matched = 0;
  double precision = 0, recall = 0, f1 = 0;
};

/// Predictions at positions masked in the truth are dropped first.
Prf set_intersection_prf(const std::vector<std::vector<Label>>& truth, const std::vector<std::vector<Label>>& pred);

/// Empty string when the task satisfies the soft-shot contract, else the
/// first violation.
std::string check_task_contract(const entmeta::Task& task, const entmeta::TaskSpec& spec);

/// Central difference of f along one coordinate of x.
double central_difference(const std::function<double()>& f, double& x, double eps);

double relative_error(double a, double b, double floor = 1e-8);

}  // namespace testkit
