#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "entmeta/metric.hpp"

namespace entmeta {

struct McOnOptions {
  /// With prototypes disabled an anchor whose class has no other query token
  /// has no positive and is skipped.
  bool include_prototypes = true;
};

struct McOnResult {
  double loss = 0.0;
  std::size_t n_anchors = 0;
  std::size_t n_skipped = 0;
  /// Total gradient per support token, including the path through the
  /// prototypes (each class token receives grad_mu / count).
  std::vector<RowMatrix> grad_support;
  std::vector<RowMatrix> grad_query;
  /// Partial gradient with the prototypes treated as free inputs.
  std::vector<Eigen::VectorXd> grad_prototypes;
};

/// Meta contrastive loss summed over the in-task query tokens (anchors).
/// Positives: same-class query tokens other than the anchor and the class
/// prototype. Candidates: every unmasked support and query token except the
/// anchor and all prototypes. Throws NonFinite on non-finite embeddings.
McOnResult mcon_loss(const TaskEmbeddings& emb, const TaskStatistics& stats, const Task& task,
                     const McOnOptions& options = {});

struct ProtoLossResult {
  double loss = 0.0;
  std::size_t n_tokens = 0;
  std::vector<RowMatrix> grad_support;  // including the path through prototypes
  std::vector<RowMatrix> grad_query;
};

/// Mean cross-entropy of protonet_probabilities over query tokens: the
/// in-task ones only, or every unmasked one when include_otd (the O prototype
/// is then a trainable class).
ProtoLossResult protonet_loss(const TaskEmbeddings& emb, const Task& task, bool include_otd);

}  // namespace entmeta
