#include "entmeta/meta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "entmeta/error.hpp"
#include "entmeta/head_loss.hpp"
#include "entmeta/losses.hpp"
#include "entmeta/parallel.hpp"
#include "entmeta/rng.hpp"

namespace entmeta {

std::string_view method_name(Method m) noexcept {
  switch (m) {
    case Method::protonet: return "protonet";
    case Method::protonet_eod: return "protonet_eod";
    case Method::contrastproto: return "contrastproto";
    case Method::anil: return "anil";
    case Method::anil_hc: return "anil_hc";
    case Method::reptile: return "reptile";
    case Method::reptile_hc: return "reptile_hc";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::protonet, Method::protonet_eod, Method::contrastproto, Method::anil, Method::anil_hc,
                 Method::reptile, Method::reptile_hc}) {
    if (method_name(m) == name) return m;
  }
  throw Error(Errc::config_error, "unknown method '" + std::string(name) +
                                      "' (expected protonet, protonet_eod, contrastproto, anil, anil_hc, reptile, "
                                      "reptile_hc)");
}

bool uses_decoder(Method m) noexcept {
  return m == Method::anil || m == Method::anil_hc || m == Method::reptile || m == Method::reptile_hc;
}

HeadKind method_head(Method m) noexcept {
  return m == Method::anil_hc || m == Method::reptile_hc ? HeadKind::hierarchical : HeadKind::plain;
}

MetaParams init_meta_params(const EncoderArch& arch, std::size_t max_way, std::uint64_t seed) {
  return {init_params(arch, derive_seed(seed, 1)), init_decoder(arch.output_dim, max_way, derive_seed(seed, 2))};
}

void validate_inner_config(const InnerLoopConfig& cfg) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw Error(Errc::config_error, "inner learning rate must be > 0");
}

namespace {

/// Unmasked tokens of a document subset, gathered into one feature matrix.
struct Batch {
  RowMatrix x;
  std::vector<Label> y;
  std::vector<TokenRef> refs;  // doc indexes into the full document list
};

Batch gather(std::span<const RowMatrix> emb, std::span<const Document> docs, std::span<const std::size_t> subset) {
  Batch b;
  std::size_t n = 0;
  for (auto d : subset) {
    for (auto l : docs[d].labels) n += l != kMasked ? 1 : 0;
  }
  const Eigen::Index dim = emb.empty() ? 0 : emb[subset.empty() ? 0 : subset.front()].cols();
  b.x.resize(static_cast<Eigen::Index>(n), dim);
  b.y.reserve(n);
  b.refs.reserve(n);
  for (auto d : subset) {
    const auto& labels = docs[d].labels;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      if (labels[p] == kMasked) continue;
      b.x.row(static_cast<Eigen::Index>(b.y.size())) = emb[d].row(static_cast<Eigen::Index>(p));
      b.y.push_back(labels[p]);
      b.refs.push_back({d, p});
    }
  }
  return b;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

bool has_tokens(std::span<const Document> docs, std::span<const std::size_t> subset) {
  for (auto d : subset) {
    for (auto l : docs[d].labels) {
      if (l != kMasked) return true;
    }
  }
  return false;
}

/// The groups that carry at least one unmasked token.
DocGroups active_groups(std::span<const Document> docs, const DocGroups* groups) {
  DocGroups out;
  if (groups == nullptr) {
    auto all = iota(docs.size());
    if (has_tokens(docs, all)) out.push_back(std::move(all));
    return out;
  }
  for (const auto& g : *groups) {
    for (auto d : g) {
      if (d >= docs.size()) throw Error(Errc::shape_mismatch, "document group index out of range");
    }
    if (has_tokens(docs, g)) out.push_back(g);
  }
  return out;
}

std::vector<RowMatrix> encode_docs(const EncoderParams& enc, std::span<const Document> docs,
                                   std::span<const std::size_t> subset) {
  std::vector<RowMatrix> emb(docs.size());
  for (auto d : subset) emb[d] = encode_document(enc, docs[d]);
  return emb;
}

double batch_loss(HeadKind kind, std::span<const double> psi, const DecoderLayout& layout, const Batch& b,
                  std::size_t n_way, std::span<double> grad_psi, RowMatrix& grad_x) {
  grad_x.resize(b.x.rows(), b.x.cols());
  return head_loss<double>(kind, layout, psi, {b.x.data(), static_cast<std::size_t>(b.x.size())}, b.y, n_way,
                           grad_psi, {grad_x.data(), static_cast<std::size_t>(grad_x.size())});
}

void check_loss(double loss) {
  if (!std::isfinite(loss)) throw Error(Errc::non_finite_loss, "inner-loop loss is not finite");
}

/// One SGD step of the decoder alone. Every group steps from the same
/// parameters; with several groups the stepped parameters are averaged.
double decoder_step(HeadKind kind, DecoderParams& dec, const std::vector<Batch>& batches, std::size_t n_way,
                    double lr) {
  const auto& layout = dec.layout();
  RowMatrix gx;
  if (batches.size() == 1) {
    std::vector<double> g(dec.size(), 0.0);
    const double loss = batch_loss(kind, dec.flat(), layout, batches[0], n_way, g, gx);
    check_loss(loss);
    auto flat = dec.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= lr * g[i];
    return loss;
  }
  std::vector<std::vector<double>> stepped;
  double loss = 0.0;
  for (const auto& b : batches) {
    std::vector<double> g(dec.size(), 0.0);
    const double l = batch_loss(kind, dec.flat(), layout, b, n_way, g, gx);
    check_loss(l);
    loss += l;
    stepped.push_back(param_axpy(-lr, g, dec.flat()));
  }
  const std::vector<std::span<const double>> views(stepped.begin(), stepped.end());
  const auto avg = param_average(views);
  std::copy(avg.begin(), avg.end(), dec.flat().begin());
  return loss / static_cast<double>(batches.size());
}

/// Loss and full gradient (encoder and decoder) on one document group.
double group_gradient(HeadKind kind, const MetaParams& p, std::span<const Document> docs,
                      std::span<const std::size_t> group, std::size_t n_way, std::vector<double>& g_enc,
                      std::vector<double>& g_dec) {
  const auto emb = encode_docs(p.encoder, docs, group);
  const Batch b = gather(emb, docs, group);
  g_enc.assign(p.encoder.size(), 0.0);
  g_dec.assign(p.decoder.size(), 0.0);
  RowMatrix gx;
  const double loss = batch_loss(kind, p.decoder.flat(), p.decoder.layout(), b, n_way, g_dec, gx);
  check_loss(loss);
  std::vector<RowMatrix> upstream(docs.size());
  for (auto d : group) upstream[d] = RowMatrix::Zero(emb[d].rows(), emb[d].cols());
  for (std::size_t t = 0; t < b.refs.size(); ++t) {
    upstream[b.refs[t].doc].row(static_cast<Eigen::Index>(b.refs[t].pos)) = gx.row(static_cast<Eigen::Index>(t));
  }
  for (auto d : group) backward(p.encoder, docs[d], upstream[d], g_enc);
  return loss;
}

double full_step(HeadKind kind, MetaParams& p, std::span<const Document> docs, const DocGroups& groups,
                 std::size_t n_way, double lr) {
  std::vector<double> g_enc, g_dec;
  if (groups.size() == 1) {
    const double loss = group_gradient(kind, p, docs, groups[0], n_way, g_enc, g_dec);
    auto fe = p.encoder.flat();
    for (std::size_t i = 0; i < fe.size(); ++i) fe[i] -= lr * g_enc[i];
    auto fd = p.decoder.flat();
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] -= lr * g_dec[i];
    return loss;
  }
  std::vector<std::vector<double>> enc_steps, dec_steps;
  double loss = 0.0;
  for (const auto& g : groups) {
    loss += group_gradient(kind, p, docs, g, n_way, g_enc, g_dec);
    enc_steps.push_back(param_axpy(-lr, g_enc, p.encoder.flat()));
    dec_steps.push_back(param_axpy(-lr, g_dec, p.decoder.flat()));
  }
  const std::vector<std::span<const double>> ev(enc_steps.begin(), enc_steps.end());
  const std::vector<std::span<const double>> dv(dec_steps.begin(), dec_steps.end());
  const auto ea = param_average(ev);
  const auto da = param_average(dv);
  std::copy(ea.begin(), ea.end(), p.encoder.flat().begin());
  std::copy(da.begin(), da.end(), p.decoder.flat().begin());
  return loss / static_cast<double>(groups.size());
}

double grouped_loss(HeadKind kind, const MetaParams& p, std::span<const Document> docs, const DocGroups& groups,
                    std::size_t n_way) {
  double loss = 0.0;
  std::vector<double> g;
  RowMatrix gx;
  for (const auto& grp : groups) {
    const auto emb = encode_docs(p.encoder, docs, grp);
    g.assign(p.decoder.size(), 0.0);
    loss += batch_loss(kind, p.decoder.flat(), p.decoder.layout(), gather(emb, docs, grp), n_way, g, gx);
  }
  return loss / static_cast<double>(groups.size());
}

}  // namespace

AdaptResult inner_loop_sgd(const EncoderParams& encoder, const DecoderParams& decoder, std::span<const Document> docs,
                           std::size_t n_way, const InnerLoopConfig& cfg, bool adapt_encoder,
                           const DocGroups* groups) {
  validate_inner_config(cfg);
  const DocGroups active = active_groups(docs, groups);
  if (active.empty()) throw Error(Errc::shape_mismatch, "adaptation set has no unmasked token");
  AdaptResult r{MetaParams{encoder, decoder}, {}};
  r.losses.reserve(cfg.steps + 1);
  if (!adapt_encoder) {
    const auto emb = encode_docs(encoder, docs, iota(docs.size()));
    std::vector<Batch> batches;
    for (const auto& g : active) batches.push_back(gather(emb, docs, g));
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      r.losses.push_back(decoder_step(cfg.head, r.params.decoder, batches, n_way, cfg.lr));
    }
    double final_loss = 0.0;
    std::vector<double> g;
    RowMatrix gx;
    for (const auto& b : batches) {
      g.assign(decoder.size(), 0.0);
      final_loss += batch_loss(cfg.head, r.params.decoder.flat(), decoder.layout(), b, n_way, g, gx);
    }
    r.losses.push_back(final_loss / static_cast<double>(batches.size()));
  } else {
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      r.losses.push_back(full_step(cfg.head, r.params, docs, active, n_way, cfg.lr));
    }
    r.losses.push_back(grouped_loss(cfg.head, r.params, docs, active, n_way));
  }
  check_loss(r.losses.back());
  return r;
}

double token_loss(const MetaParams& params, std::span<const Document> docs, std::size_t n_way, HeadKind head) {
  const DocGroups active = active_groups(docs, nullptr);
  if (active.empty()) return 0.0;
  return grouped_loss(head, params, docs, active, n_way);
}

namespace {

struct AnilForward {
  std::vector<RowMatrix> support_emb, query_emb;
  std::vector<Batch> support_batches;
  Batch query_batch;
  std::vector<std::vector<double>> trajectory;  // psi_0 .. psi_T
  double query_loss = 0.0;
  RowMatrix query_grad_x;
  std::vector<double> query_grad_psi;
};

AnilForward anil_forward(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                         const DocGroups* support_groups) {
  validate_inner_config(cfg);
  AnilForward f;
  const auto all_s = iota(task.support.size());
  const auto all_q = iota(task.query.size());
  f.support_emb = encode_docs(params.encoder, task.support, all_s);
  f.query_emb = encode_docs(params.encoder, task.query, all_q);
  const DocGroups active = active_groups(task.support, support_groups);
  if (active.empty()) throw Error(Errc::shape_mismatch, "support set has no unmasked token");
  for (const auto& g : active) f.support_batches.push_back(gather(f.support_emb, task.support, g));
  f.query_batch = gather(f.query_emb, task.query, all_q);

  DecoderParams dec = params.decoder;
  f.trajectory.emplace_back(dec.flat().begin(), dec.flat().end());
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    decoder_step(cfg.head, dec, f.support_batches, task.n_way(), cfg.lr);
    f.trajectory.emplace_back(dec.flat().begin(), dec.flat().end());
  }
  f.query_grad_psi.assign(dec.size(), 0.0);
  f.query_loss =
      batch_loss(cfg.head, dec.flat(), dec.layout(), f.query_batch, task.n_way(), f.query_grad_psi, f.query_grad_x);
  check_loss(f.query_loss);
  return f;
}

}  // namespace

double anil_objective(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                      const DocGroups* support_groups) {
  return anil_forward(params, task, cfg, support_groups).query_loss;
}

TaskGradient anil_task_gradient(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                                const DocGroups* support_groups) {
  AnilForward f = anil_forward(params, task, cfg, support_groups);
  const auto& layout = params.decoder.layout();
  const std::size_t n_psi = layout.size();
  const std::size_t n_way = task.n_way();
  const double step_scale = cfg.lr / static_cast<double>(f.support_batches.size());

  // Reverse pass: psi_{t+1} = psi_t - (lr / G) sum_g grad L_g(psi_t, X_g).
  // Seeding the parameter tangent with the adjoint turns the gradient routine
  // into the Hessian-vector products needed by the vector-Jacobian product.
  std::vector<double> psi_bar = f.query_grad_psi;
  std::vector<RowMatrix> x_bar;
  for (const auto& b : f.support_batches) x_bar.push_back(RowMatrix::Zero(b.x.rows(), b.x.cols()));
  std::vector<Dual> psi_dual(n_psi), grad_psi_dual(n_psi), x_dual, grad_x_dual;
  std::vector<double> hv(n_psi);
  for (std::size_t t = cfg.steps; t-- > 0;) {
    for (std::size_t i = 0; i < n_psi; ++i) psi_dual[i] = Dual(f.trajectory[t][i], psi_bar[i]);
    std::fill(hv.begin(), hv.end(), 0.0);
    for (std::size_t g = 0; g < f.support_batches.size(); ++g) {
      const auto& b = f.support_batches[g];
      const auto n = static_cast<std::size_t>(b.x.size());
      x_dual.assign(b.x.data(), b.x.data() + n);
      grad_x_dual.assign(n, Dual());
      std::fill(grad_psi_dual.begin(), grad_psi_dual.end(), Dual());
      head_loss<Dual>(cfg.head, layout, psi_dual, x_dual, b.y, n_way, grad_psi_dual, grad_x_dual);
      for (std::size_t i = 0; i < n_psi; ++i) hv[i] += grad_psi_dual[i].d;
      double* xb = x_bar[g].data();
      for (std::size_t i = 0; i < n; ++i) xb[i] -= step_scale * grad_x_dual[i].d;
    }
    for (std::size_t i = 0; i < n_psi; ++i) psi_bar[i] -= step_scale * hv[i];
  }

  TaskGradient out;
  out.loss = f.query_loss;
  out.decoder = std::move(psi_bar);
  out.encoder.assign(params.encoder.size(), 0.0);
  std::vector<RowMatrix> up_s, up_q;
  for (const auto& m : f.support_emb) up_s.push_back(RowMatrix::Zero(m.rows(), m.cols()));
  for (const auto& m : f.query_emb) up_q.push_back(RowMatrix::Zero(m.rows(), m.cols()));
  for (std::size_t g = 0; g < f.support_batches.size(); ++g) {
    const auto& refs = f.support_batches[g].refs;
    for (std::size_t t = 0; t < refs.size(); ++t) {
      up_s[refs[t].doc].row(static_cast<Eigen::Index>(refs[t].pos)) += x_bar[g].row(static_cast<Eigen::Index>(t));
    }
  }
  const auto& qrefs = f.query_batch.refs;
  for (std::size_t t = 0; t < qrefs.size(); ++t) {
    up_q[qrefs[t].doc].row(static_cast<Eigen::Index>(qrefs[t].pos)) += f.query_grad_x.row(static_cast<Eigen::Index>(t));
  }
  for (std::size_t d = 0; d < task.support.size(); ++d) backward(params.encoder, task.support[d], up_s[d], out.encoder);
  for (std::size_t d = 0; d < task.query.size(); ++d) backward(params.encoder, task.query[d], up_q[d], out.encoder);
  return out;
}

TaskGradient reptile_task_delta(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                                const DocGroups* groups) {
  std::vector<Document> docs = task.support;
  docs.insert(docs.end(), task.query.begin(), task.query.end());
  const auto adapted = inner_loop_sgd(params.encoder, params.decoder, docs, task.n_way(), cfg, true, groups);
  TaskGradient out;
  out.loss = adapted.losses.front();
  out.encoder = param_axpy(-1.0, params.encoder.flat(), adapted.params.encoder.flat());
  out.decoder = param_axpy(-1.0, params.decoder.flat(), adapted.params.decoder.flat());
  return out;
}

namespace {

std::vector<double> encoder_backward(const EncoderParams& encoder, const Task& task,
                                     const std::vector<RowMatrix>& grad_support,
                                     const std::vector<RowMatrix>& grad_query) {
  std::vector<double> g(encoder.size(), 0.0);
  for (std::size_t d = 0; d < task.support.size(); ++d) backward(encoder, task.support[d], grad_support[d], g);
  for (std::size_t d = 0; d < task.query.size(); ++d) backward(encoder, task.query[d], grad_query[d], g);
  return g;
}

}  // namespace

TaskGradient contrastproto_task_gradient(const EncoderParams& encoder, const Task& task) {
  const auto emb = encode_task(encoder, task);
  const auto stats = compute_prototypes(emb, task);
  const auto r = mcon_loss(emb, stats, task);
  return {r.loss, encoder_backward(encoder, task, r.grad_support, r.grad_query), {}};
}

TaskGradient protonet_task_gradient(const EncoderParams& encoder, const Task& task, bool include_otd) {
  const auto emb = encode_task(encoder, task);
  const auto r = protonet_loss(emb, task, include_otd);
  return {r.loss, encoder_backward(encoder, task, r.grad_support, r.grad_query), {}};
}

MetaOptimizer::MetaOptimizer(const MetaParams& params, const MetaOptimizerConfig& cfg)
    : cfg_(cfg),
      n_encoder_(params.encoder.size()),
      m_(params.encoder.size() + params.decoder.size(), 0.0),
      v_(m_.size(), 0.0) {
  if (!(cfg.lr > 0.0)) throw Error(Errc::config_error, "meta learning rate must be > 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0 && cfg.eps > 0.0)) {
    throw Error(Errc::config_error, "Adam hyperparameters out of range");
  }
}

void MetaOptimizer::update(std::span<double> params, std::span<const double> grad, std::size_t offset) {
  if (cfg_.rule == OuterRule::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg_.lr * grad[i];
    return;
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = m_[offset + i];
    double& v = v_[offset + i];
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad[i];
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    params[i] -= cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
  }
}

void MetaOptimizer::apply(MetaParams& params, std::span<const double> grad_encoder,
                          std::span<const double> grad_decoder) {
  if (params.encoder.size() != n_encoder_ || n_encoder_ + params.decoder.size() != m_.size()) {
    throw Error(Errc::layout_mismatch, "optimizer state does not match the parameters");
  }
  if (grad_encoder.size() != params.encoder.size() ||
      (!grad_decoder.empty() && grad_decoder.size() != params.decoder.size())) {
    throw Error(Errc::layout_mismatch, "gradient does not match the parameters");
  }
  ++t_;
  update(params.encoder.flat(), grad_encoder, 0);
  if (!grad_decoder.empty()) update(params.decoder.flat(), grad_decoder, n_encoder_);
}

namespace {

DocGroups joint_groups(const TaskPartition& p, std::size_t n_support) {
  DocGroups out(std::max(p.support.size(), p.query.size()));
  for (std::size_t w = 0; w < out.size(); ++w) {
    if (w < p.support.size()) out[w] = p.support[w];
    if (w < p.query.size()) {
      for (auto d : p.query[w]) out[w].push_back(n_support + d);
    }
  }
  return out;
}

}  // namespace

MetaStepReport meta_step(Method method, MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                         MetaOptimizer& optimizer, const MetaStepOptions& options) {
  if (batch.empty()) throw Error(Errc::config_error, "meta batch is empty");
  if (!options.partitions.empty() && options.partitions.size() != batch.size()) {
    throw Error(Errc::shape_mismatch, "one partition per task is required");
  }
  InnerLoopConfig inner = cfg;
  inner.head = method_head(method);
  std::vector<TaskGradient> slots(batch.size());
  const MetaParams& frozen = params;
  parallel_for(batch.size(), options.threads, [&](std::size_t i) {
    const TaskPartition* part = options.partitions.empty() ? nullptr : &options.partitions[i];
    const Task& task = batch[i];
    switch (method) {
      case Method::anil:
      case Method::anil_hc:
        slots[i] = anil_task_gradient(frozen, task, inner, part ? &part->support : nullptr);
        break;
      case Method::reptile:
      case Method::reptile_hc: {
        if (part) {
          const DocGroups groups = joint_groups(*part, task.support.size());
          slots[i] = reptile_task_delta(frozen, task, inner, &groups);
        } else {
          slots[i] = reptile_task_delta(frozen, task, inner);
        }
        break;
      }
      case Method::contrastproto:
        slots[i] = contrastproto_task_gradient(frozen.encoder, task);
        break;
      case Method::protonet:
      case Method::protonet_eod:
        slots[i] = protonet_task_gradient(frozen.encoder, task, method == Method::protonet_eod);
        break;
    }
  });

  MetaStepReport report;
  const bool with_decoder = uses_decoder(method);
  std::vector<double> g_enc(params.encoder.size(), 0.0);
  std::vector<double> g_dec(with_decoder ? params.decoder.size() : 0, 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  // Reptile's direction (adapted - init) enters the optimizer as a negative gradient.
  const double sign = method == Method::reptile || method == Method::reptile_hc ? -1.0 : 1.0;
  for (const auto& s : slots) {
    if (!std::isfinite(s.loss)) throw Error(Errc::non_finite_loss, "task loss is not finite");
    report.task_losses.push_back(s.loss);
    report.meta_loss += s.loss * inv;
    for (std::size_t i = 0; i < g_enc.size(); ++i) g_enc[i] += sign * inv * s.encoder[i];
    for (std::size_t i = 0; i < g_dec.size(); ++i) g_dec[i] += sign * inv * s.decoder[i];
  }
  double sq = 0.0;
  for (auto v : g_enc) sq += v * v;
  for (auto v : g_dec) sq += v * v;
  report.grad_norm = std::sqrt(sq);
  if (!std::isfinite(report.grad_norm)) throw Error(Errc::non_finite_loss, "meta-gradient is not finite");
  optimizer.apply(params, g_enc, g_dec);
  return report;
}

MetaStepReport anil_meta_step(MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                              MetaOptimizer& optimizer, const MetaStepOptions& options) {
  return meta_step(cfg.head == HeadKind::hierarchical ? Method::anil_hc : Method::anil, params, batch, cfg, optimizer,
                   options);
}

MetaStepReport reptile_meta_step(MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                                 MetaOptimizer& optimizer, const MetaStepOptions& options) {
  return meta_step(cfg.head == HeadKind::hierarchical ? Method::reptile_hc : Method::reptile, params, batch, cfg,
                   optimizer, options);
}

MetaStepReport contrastproto_meta_step(MetaParams& params, std::span<const Task> batch, MetaOptimizer& optimizer,
                                       const MetaStepOptions& options) {
  return meta_step(Method::contrastproto, params, batch, InnerLoopConfig{}, optimizer, options);
}

TaskPrediction predict_task(Method method, const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                            const MetricTestConfig& metric, const TaskPartition* partition) {
  TaskPrediction out;
  InnerLoopConfig inner = cfg;
  inner.head = method_head(method);
  const std::size_t n_way = task.n_way();
  switch (method) {
    case Method::contrastproto: {
      auto emb = encode_task(params.encoder, task);
      auto stats = compute_prototypes(emb, task);
      fit_covariance(emb, stats, task, metric.shrinkage);
      stats.threshold = calibrate_threshold(emb.support, stats, task, metric.threshold);
      auto pred = otd_detect_and_classify(emb.query, emb.support, stats, task);
      out.labels = std::move(pred.labels);
      out.itd_score = std::move(pred.itd_score);
      out.query_embeddings = std::move(emb.query);
      return out;
    }
    case Method::protonet:
    case Method::protonet_eod: {
      const bool eod = method == Method::protonet_eod;
      auto emb = encode_task(params.encoder, task);
      auto stats = compute_prototypes(emb, task);
      if (eod) stats.otd_prototype = compute_otd_prototype(emb, task);
      out.labels = protonet_classify(emb.query, stats, eod);
      for (const auto& m : emb.query) {
        std::vector<double> scores(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index l = 0; l < m.rows(); ++l) {
          const std::span<const double> h{m.row(l).data(), static_cast<std::size_t>(m.cols())};
          if (eod) {
            scores[static_cast<std::size_t>(l)] = 1.0 - protonet_probabilities(h, stats, true).back();
          } else {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& mu : stats.prototypes) best = std::min(best, (m.row(l).transpose() - mu).squaredNorm());
            scores[static_cast<std::size_t>(l)] = -best;
          }
        }
        out.itd_score.push_back(std::move(scores));
      }
      out.query_embeddings = std::move(emb.query);
      return out;
    }
    case Method::anil:
    case Method::anil_hc:
    case Method::reptile:
    case Method::reptile_hc: {
      const bool full = method == Method::reptile || method == Method::reptile_hc;
      const auto adapted = inner_loop_sgd(params.encoder, params.decoder, task.support, n_way, inner, full,
                                          partition ? &partition->support : nullptr);
      for (const auto& doc : task.query) {
        RowMatrix emb = encode_document(adapted.params.encoder, doc);
        std::vector<Label> labels(static_cast<std::size_t>(emb.rows()));
        std::vector<double> scores(labels.size());
        for (Eigen::Index l = 0; l < emb.rows(); ++l) {
          const auto probs = head_forward(inner.head, {emb.row(l).data(), static_cast<std::size_t>(emb.cols())},
                                          adapted.params.decoder, n_way);
          labels[static_cast<std::size_t>(l)] = predict_label(probs);
          double inside = 0.0;
          for (std::size_t e = 1; e < probs.size(); ++e) inside += probs[e];
          scores[static_cast<std::size_t>(l)] = inside;
        }
        out.labels.push_back(std::move(labels));
        out.itd_score.push_back(std::move(scores));
        out.query_embeddings.push_back(std::move(emb));
      }
      return out;
    }
  }
  return out;
}

}  // namespace entmeta
