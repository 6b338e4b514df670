#include "entmeta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "entmeta/error.hpp"

namespace entmeta {

namespace {

std::vector<RowMatrix> zeros_like(const std::vector<RowMatrix>& docs) {
  std::vector<RowMatrix> out;
  out.reserve(docs.size());
  for (const auto& m : docs) out.push_back(RowMatrix::Zero(m.rows(), m.cols()));
  return out;
}

void require_finite(const TaskEmbeddings& emb) {
  for (const auto* side : {&emb.support, &emb.query}) {
    for (const auto& m : *side) {
      if (!m.allFinite()) throw Error(Errc::non_finite, "non-finite token embedding");
    }
  }
}

/// Adds grad_mu[e] / count_e to every support token of class e.
void fold_prototype_gradient(const std::vector<Eigen::VectorXd>& grad_mu, const TokenSets& sets,
                             std::vector<RowMatrix>& grad_support) {
  for (std::size_t e = 0; e < grad_mu.size(); ++e) {
    const auto& refs = sets.support_by_class[e];
    const Eigen::RowVectorXd share = grad_mu[e].transpose() / static_cast<double>(refs.size());
    for (const auto& r : refs) grad_support[r.doc].row(static_cast<Eigen::Index>(r.pos)) += share;
  }
}

}  // namespace

McOnResult mcon_loss(const TaskEmbeddings& emb, const TaskStatistics& stats, const Task& task,
                     const McOnOptions& options) {
  require_finite(emb);
  const auto sets = token_sets(task);
  if (sets.query_itd.empty()) throw Error(Errc::shape_mismatch, "task has no in-task query token");

  // Candidate bank: support tokens, then query tokens.
  const std::size_t n_support = sets.support_all.size();
  const std::size_t n_tokens = n_support + sets.query_all.size();
  const Eigen::Index dim = emb.query.front().cols();
  RowMatrix bank(static_cast<Eigen::Index>(n_tokens), dim);
  std::vector<Label> bank_label(n_tokens);
  std::vector<std::size_t> query_slot;  // query_all index -> bank row
  for (std::size_t i = 0; i < n_support; ++i) {
    const auto& r = sets.support_all[i];
    bank.row(static_cast<Eigen::Index>(i)) = emb.support[r.doc].row(static_cast<Eigen::Index>(r.pos));
    bank_label[i] = task.support[r.doc].labels[r.pos];
  }
  for (std::size_t i = 0; i < sets.query_all.size(); ++i) {
    const auto& r = sets.query_all[i];
    bank.row(static_cast<Eigen::Index>(n_support + i)) = emb.query[r.doc].row(static_cast<Eigen::Index>(r.pos));
    bank_label[n_support + i] = task.query[r.doc].labels[r.pos];
  }
  const std::size_t n_way = stats.n_way();
  RowMatrix protos(static_cast<Eigen::Index>(n_way), dim);
  for (std::size_t e = 0; e < n_way; ++e) protos.row(static_cast<Eigen::Index>(e)) = stats.prototypes[e].transpose();

  RowMatrix grad_bank = RowMatrix::Zero(bank.rows(), dim);
  RowMatrix grad_protos = RowMatrix::Zero(protos.rows(), dim);

  McOnResult out;
  const bool use_protos = options.include_prototypes;
  for (std::size_t a = n_support; a < n_tokens; ++a) {
    const Label y = bank_label[a];
    if (y < 0) continue;
    std::vector<std::size_t> positives;
    for (std::size_t u = n_support; u < n_tokens; ++u) {
      if (u != a && bank_label[u] == y) positives.push_back(u);
    }
    const std::size_t n_pos = positives.size() + (use_protos ? 1 : 0);
    if (n_pos == 0) {
      ++out.n_skipped;
      continue;
    }
    ++out.n_anchors;
    const Eigen::RowVectorXd h = bank.row(static_cast<Eigen::Index>(a));
    const Eigen::VectorXd s_tok = bank * h.transpose();
    Eigen::VectorXd s_proto;
    if (use_protos) s_proto = protos * h.transpose();

    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < n_tokens; ++u) {
      if (u != a) shift = std::max(shift, s_tok[static_cast<Eigen::Index>(u)]);
    }
    if (use_protos) shift = std::max(shift, s_proto.maxCoeff());
    double total = 0.0;
    Eigen::VectorXd w_tok = (s_tok.array() - shift).exp();
    w_tok[static_cast<Eigen::Index>(a)] = 0.0;
    total += w_tok.sum();
    Eigen::VectorXd w_proto;
    if (use_protos) {
      w_proto = (s_proto.array() - shift).exp();
      total += w_proto.sum();
    }
    const double lse = shift + std::log(total);
    w_tok /= total;
    if (use_protos) w_proto /= total;

    double pos_mean = 0.0;
    for (auto v : positives) pos_mean += s_tok[static_cast<Eigen::Index>(v)];
    if (use_protos) pos_mean += s_proto[y];
    pos_mean /= static_cast<double>(n_pos);
    out.loss += lse - pos_mean;

    // d/dh of lse is the softmax-weighted candidate mean; each candidate u
    // receives its weight times h. Positives contribute -1/|A+| on both sides.
    const double inv_pos = 1.0 / static_cast<double>(n_pos);
    Eigen::RowVectorXd gh = w_tok.transpose() * bank;
    grad_bank.noalias() += w_tok * h;
    if (use_protos) {
      gh.noalias() += w_proto.transpose() * protos;
      grad_protos.noalias() += w_proto * h;
      gh -= inv_pos * protos.row(y);
      grad_protos.row(y) -= inv_pos * h;
    }
    for (auto v : positives) {
      gh -= inv_pos * bank.row(static_cast<Eigen::Index>(v));
      grad_bank.row(static_cast<Eigen::Index>(v)) -= inv_pos * h;
    }
    grad_bank.row(static_cast<Eigen::Index>(a)) += gh;
  }
  if (!std::isfinite(out.loss)) throw Error(Errc::non_finite, "contrastive loss is not finite");

  out.grad_support = zeros_like(emb.support);
  out.grad_query = zeros_like(emb.query);
  for (std::size_t i = 0; i < n_support; ++i) {
    const auto& r = sets.support_all[i];
    out.grad_support[r.doc].row(static_cast<Eigen::Index>(r.pos)) += grad_bank.row(static_cast<Eigen::Index>(i));
  }
  for (std::size_t i = 0; i < sets.query_all.size(); ++i) {
    const auto& r = sets.query_all[i];
    out.grad_query[r.doc].row(static_cast<Eigen::Index>(r.pos)) +=
        grad_bank.row(static_cast<Eigen::Index>(n_support + i));
  }
  for (std::size_t e = 0; e < n_way; ++e) {
    out.grad_prototypes.push_back(grad_protos.row(static_cast<Eigen::Index>(e)).transpose());
  }
  if (use_protos) fold_prototype_gradient(out.grad_prototypes, sets, out.grad_support);
  return out;
}

ProtoLossResult protonet_loss(const TaskEmbeddings& emb, const Task& task, bool include_otd) {
  require_finite(emb);
  const auto sets = token_sets(task);
  TaskStatistics stats = compute_prototypes(emb, task);
  if (include_otd) stats.otd_prototype = compute_otd_prototype(emb, task);
  std::vector<Eigen::VectorXd> centers = stats.prototypes;
  if (include_otd) centers.push_back(*stats.otd_prototype);

  ProtoLossResult out;
  out.grad_support = zeros_like(emb.support);
  out.grad_query = zeros_like(emb.query);
  const auto& tokens = include_otd ? sets.query_all : sets.query_itd;
  out.n_tokens = tokens.size();
  if (tokens.empty()) return out;
  const double scale = 1.0 / static_cast<double>(tokens.size());
  const Eigen::Index dim = emb.query.front().cols();
  std::vector<Eigen::VectorXd> grad_centers(centers.size(), Eigen::VectorXd::Zero(dim));

  for (const auto& r : tokens) {
    const Eigen::RowVectorXd hrow = emb.query[r.doc].row(static_cast<Eigen::Index>(r.pos));
    const Label y = task.query[r.doc].labels[r.pos];
    const std::size_t target = y == kOutside ? stats.n_way() : static_cast<std::size_t>(y);
    const auto probs = protonet_probabilities({hrow.data(), static_cast<std::size_t>(dim)}, stats, include_otd);
    out.loss -= std::log(probs[target]) * scale;
    const Eigen::VectorXd h = hrow.transpose();
    Eigen::VectorXd gh = Eigen::VectorXd::Zero(dim);
    for (std::size_t c = 0; c < centers.size(); ++c) {
      // logit_c = -|h - mu_c|^2
      const double dlogit = (probs[c] - (c == target ? 1.0 : 0.0)) * scale;
      const Eigen::VectorXd diff = h - centers[c];
      gh -= 2.0 * dlogit * diff;
      grad_centers[c] += 2.0 * dlogit * diff;
    }
    out.grad_query[r.doc].row(static_cast<Eigen::Index>(r.pos)) += gh.transpose();
  }
  if (!std::isfinite(out.loss)) throw Error(Errc::non_finite, "prototype loss is not finite");

  const std::vector<Eigen::VectorXd> grad_mu(grad_centers.begin(), grad_centers.begin() + stats.n_way());
  fold_prototype_gradient(grad_mu, sets, out.grad_support);
  if (include_otd) {
    const Eigen::RowVectorXd share =
        grad_centers.back().transpose() / static_cast<double>(sets.support_otd.size());
    for (const auto& r : sets.support_otd) out.grad_support[r.doc].row(static_cast<Eigen::Index>(r.pos)) += share;
  }
  return out;
}

}  // namespace entmeta
