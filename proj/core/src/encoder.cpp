#include "entmeta/encoder.hpp"

#include <cmath>

#include "entmeta/error.hpp"
#include "entmeta/rng.hpp"

namespace entmeta {

void validate_arch(const EncoderArch& arch) {
  if (arch.vocab_size == 0 || arch.input_dim == 0 || arch.hidden_dim == 0 || arch.output_dim == 0) {
    throw Error(Errc::invalid_arch, "encoder sizes must be positive");
  }
  if (arch.depth == 0) throw Error(Errc::invalid_arch, "encoder needs at least one layer");
}

EncoderParams::EncoderParams(const EncoderArch& arch) : arch_(arch) {
  validate_arch(arch);
  std::size_t offset = 0;
  auto take = [&](std::size_t rows, std::size_t cols) {
    Block b{offset, rows, cols};
    offset += rows * cols;
    return b;
  };
  embedding_ = take(arch.vocab_size, arch.input_dim);
  pos2d_ = take(4, arch.input_dim);
  for (std::size_t k = 0; k < arch.depth; ++k) {
    weights_.push_back(take(layer_out(k), layer_in(k)));
    biases_.push_back(take(1, layer_out(k)));
  }
  flat_.assign(offset, 0.0);
}

std::size_t EncoderParams::layer_in(std::size_t k) const {
  return k == 0 ? arch_.input_dim : arch_.hidden_dim;
}

std::size_t EncoderParams::layer_out(std::size_t k) const {
  return k + 1 == arch_.depth ? arch_.output_dim : arch_.hidden_dim;
}

Eigen::Map<RowMatrix> EncoderParams::token_embedding() {
  return {flat_.data() + embedding_.offset, static_cast<Eigen::Index>(embedding_.rows),
          static_cast<Eigen::Index>(embedding_.cols)};
}
Eigen::Map<const RowMatrix> EncoderParams::token_embedding() const {
  return {flat_.data() + embedding_.offset, static_cast<Eigen::Index>(embedding_.rows),
          static_cast<Eigen::Index>(embedding_.cols)};
}
Eigen::Map<RowMatrix> EncoderParams::pos2d_projection() {
  return {flat_.data() + pos2d_.offset, 4, static_cast<Eigen::Index>(pos2d_.cols)};
}
Eigen::Map<const RowMatrix> EncoderParams::pos2d_projection() const {
  return {flat_.data() + pos2d_.offset, 4, static_cast<Eigen::Index>(pos2d_.cols)};
}
Eigen::Map<RowMatrix> EncoderParams::layer_weight(std::size_t k) {
  const auto& b = weights_.at(k);
  return {flat_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}
Eigen::Map<const RowMatrix> EncoderParams::layer_weight(std::size_t k) const {
  const auto& b = weights_.at(k);
  return {flat_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}
Eigen::Map<Eigen::RowVectorXd> EncoderParams::layer_bias(std::size_t k) {
  const auto& b = biases_.at(k);
  return {flat_.data() + b.offset, static_cast<Eigen::Index>(b.cols)};
}
Eigen::Map<const Eigen::RowVectorXd> EncoderParams::layer_bias(std::size_t k) const {
  const auto& b = biases_.at(k);
  return {flat_.data() + b.offset, static_cast<Eigen::Index>(b.cols)};
}

EncoderParams init_params(const EncoderArch& arch, std::uint64_t seed) {
  EncoderParams p(arch);
  Rng rng(seed);
  auto fill = [&](auto&& m, double scale) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-scale, scale);
  };
  // A table lookup has fan-in 1.
  fill(p.token_embedding(), 1.0);
  fill(p.pos2d_projection(), 1.0 / std::sqrt(4.0));
  for (std::size_t k = 0; k < arch.depth; ++k) {
    fill(p.layer_weight(k), 1.0 / std::sqrt(static_cast<double>(p.layer_in(k))));
  }
  return p;
}

Eigen::RowVectorXd sinusoidal_position(std::size_t pos, std::size_t dim) {
  Eigen::RowVectorXd pe(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    const double angle = static_cast<double>(pos) * rate;
    pe(static_cast<Eigen::Index>(i)) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

namespace {

struct ForwardCache {
  RowMatrix input;             // L x input_dim
  RowMatrix first;             // first layer activation before mixing
  std::vector<RowMatrix> out;  // out[k] = layer k output (out[0] after mixing)
  RowMatrix emb;               // out.back() normalized per token
  Eigen::VectorXd inv_std;
};

constexpr double kNormEps = 1e-6;

bool is_last(const EncoderArch& arch, std::size_t k) { return k + 1 == arch.depth; }

std::pair<Eigen::Index, Eigen::Index> window_of(Eigen::Index l, Eigen::Index len, std::size_t w) {
  const auto wi = static_cast<Eigen::Index>(w);
  return {std::max<Eigen::Index>(0, l - wi), std::min<Eigen::Index>(len - 1, l + wi)};
}

/// out[l] = mean of h over the window of l
RowMatrix window_mean(const RowMatrix& h, std::size_t w) {
  const Eigen::Index len = h.rows();
  RowMatrix prefix = RowMatrix::Zero(len + 1, h.cols());
  for (Eigen::Index l = 0; l < len; ++l) prefix.row(l + 1) = prefix.row(l) + h.row(l);
  RowMatrix out(len, h.cols());
  for (Eigen::Index l = 0; l < len; ++l) {
    auto [lo, hi] = window_of(l, len, w);
    out.row(l) = (prefix.row(hi + 1) - prefix.row(lo)) / static_cast<double>(hi - lo + 1);
  }
  return out;
}

/// Adjoint of window_mean.
RowMatrix window_mean_adjoint(const RowMatrix& g, std::size_t w) {
  const Eigen::Index len = g.rows();
  RowMatrix scaled(len, g.cols());
  for (Eigen::Index l = 0; l < len; ++l) {
    auto [lo, hi] = window_of(l, len, w);
    scaled.row(l) = g.row(l) / static_cast<double>(hi - lo + 1);
  }
  // Token k receives from every l with |l - k| <= w, the same index set as
  // the window of k.
  return window_mean(scaled, w).array().colwise() *
         Eigen::VectorXd::NullaryExpr(len, [&](Eigen::Index k) {
           auto [lo, hi] = window_of(k, len, w);
           return static_cast<double>(hi - lo + 1);
         }).array();
}

ForwardCache forward(const EncoderParams& params, const Document& doc) {
  const auto& arch = params.arch();
  const auto len = static_cast<Eigen::Index>(doc.size());
  if (len == 0) throw Error(Errc::shape_mismatch, "cannot encode an empty document");
  ForwardCache c;
  c.input.resize(len, static_cast<Eigen::Index>(arch.input_dim));
  const auto table = params.token_embedding();
  const auto proj = params.pos2d_projection();
  for (Eigen::Index l = 0; l < len; ++l) {
    const auto& t = doc.tokens[static_cast<std::size_t>(l)];
    if (t.token_id >= arch.vocab_size) {
      throw Error(Errc::token_out_of_vocab, "token id " + std::to_string(t.token_id) + " in document '" +
                                                doc.doc_id + "' exceeds vocabulary " +
                                                std::to_string(arch.vocab_size));
    }
    Eigen::RowVector4d box(t.bbox[0], t.bbox[1], t.bbox[2], t.bbox[3]);
    c.input.row(l) = table.row(t.token_id) + sinusoidal_position(t.pos_1d, arch.input_dim) + box * proj;
  }
  c.out.resize(arch.depth);
  for (std::size_t k = 0; k < arch.depth; ++k) {
    const RowMatrix& in = k == 0 ? c.input : c.out[k - 1];
    RowMatrix pre = in * params.layer_weight(k).transpose();
    pre.rowwise() += params.layer_bias(k);
    RowMatrix act = is_last(arch, k) ? pre : RowMatrix(pre.array().tanh());
    if (k == 0) {
      c.first = act;
      c.out[0] = act + window_mean(act, arch.window);
    } else {
      c.out[k] = std::move(act);
    }
  }
  const RowMatrix& last = c.out.back();
  const auto d = static_cast<double>(last.cols());
  c.emb.resize(last.rows(), last.cols());
  c.inv_std.resize(last.rows());
  for (Eigen::Index l = 0; l < last.rows(); ++l) {
    const Eigen::RowVectorXd centered = last.row(l).array() - last.row(l).mean();
    c.inv_std(l) = 1.0 / std::sqrt(centered.squaredNorm() / d + kNormEps);
    c.emb.row(l) = centered * c.inv_std(l);
  }
  return c;
}

}  // namespace

EmbeddingBatch encode_document(const EncoderParams& params, const Document& doc) {
  return std::move(forward(params, doc).emb);
}

void backward(const EncoderParams& params, const Document& doc, const RowMatrix& upstream,
              std::span<double> grad) {
  const auto& arch = params.arch();
  if (grad.size() != params.size()) throw Error(Errc::layout_mismatch, "gradient buffer size mismatch");
  if (upstream.rows() != static_cast<Eigen::Index>(doc.size()) ||
      upstream.cols() != static_cast<Eigen::Index>(arch.output_dim)) {
    throw Error(Errc::shape_mismatch, "upstream gradient shape does not match the encoder output");
  }
  const ForwardCache c = forward(params, doc);

  // Views of the gradient with the parameter layout.
  const auto& view_shape = params;
  auto offset_of = [&](const double* p) { return static_cast<std::size_t>(p - params.flat().data()); };
  auto grad_map = [&](auto m) {
    return Eigen::Map<RowMatrix>(grad.data() + offset_of(m.data()), m.rows(), m.cols());
  };

  RowMatrix g(upstream.rows(), upstream.cols());
  for (Eigen::Index l = 0; l < g.rows(); ++l) {
    const auto y = c.emb.row(l);
    const auto gy = upstream.row(l);
    g.row(l) = c.inv_std(l) * (gy.array() - gy.mean() - y.array() * gy.dot(y) / static_cast<double>(y.size()));
  }
  for (std::size_t k = arch.depth; k-- > 0;) {
    RowMatrix d_pre;
    if (k == 0) {
      const RowMatrix d_first = g + window_mean_adjoint(g, arch.window);
      d_pre = is_last(arch, 0) ? d_first : RowMatrix(d_first.array() * (1.0 - c.first.array().square()));
    } else {
      d_pre = is_last(arch, k) ? g : RowMatrix(g.array() * (1.0 - c.out[k].array().square()));
    }
    const RowMatrix& in = k == 0 ? c.input : c.out[k - 1];
    grad_map(view_shape.layer_weight(k)).noalias() += d_pre.transpose() * in;
    auto gb = view_shape.layer_bias(k);
    Eigen::Map<Eigen::RowVectorXd>(grad.data() + offset_of(gb.data()), gb.size()) += d_pre.colwise().sum();
    g = d_pre * params.layer_weight(k);
  }

  auto g_table = grad_map(view_shape.token_embedding());
  auto g_proj = grad_map(view_shape.pos2d_projection());
  for (Eigen::Index l = 0; l < g.rows(); ++l) {
    const auto& t = doc.tokens[static_cast<std::size_t>(l)];
    g_table.row(t.token_id) += g.row(l);
    for (Eigen::Index i = 0; i < 4; ++i) g_proj.row(i) += t.bbox[static_cast<std::size_t>(i)] * g.row(l);
  }
}

GradientBuffer backward(const EncoderParams& params, const Document& doc, const RowMatrix& upstream) {
  GradientBuffer grad(params.size(), 0.0);
  backward(params, doc, upstream, grad);
  return grad;
}

std::vector<double> param_axpy(double a, std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::layout_mismatch, "axpy operands differ in size");
  std::vector<double> out(y.begin(), y.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * x[i];
  return out;
}

std::vector<double> param_average(std::span<const std::span<const double>> items) {
  if (items.empty()) throw Error(Errc::layout_mismatch, "cannot average an empty list");
  // running mean, so averaging copies of one vector returns it bit for bit
  std::vector<double> out(items[0].begin(), items[0].end());
  for (std::size_t k = 1; k < items.size(); ++k) {
    const auto& item = items[k];
    if (item.size() != out.size()) throw Error(Errc::layout_mismatch, "average operands differ in size");
    const double n = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (item[i] - out[i]) / n;
  }
  return out;
}

EncoderParams param_axpy(double a, const EncoderParams& x, const EncoderParams& y) {
  if (!(x.arch() == y.arch())) throw Error(Errc::layout_mismatch, "encoder architectures differ");
  EncoderParams out(y.arch());
  auto v = param_axpy(a, x.flat(), y.flat());
  std::copy(v.begin(), v.end(), out.flat().begin());
  return out;
}

EncoderParams param_average(std::span<const EncoderParams> items) {
  if (items.empty()) throw Error(Errc::layout_mismatch, "cannot average an empty list");
  std::vector<std::span<const double>> views;
  for (const auto& p : items) {
    if (!(p.arch() == items[0].arch())) throw Error(Errc::layout_mismatch, "encoder architectures differ");
    views.push_back(p.flat());
  }
  EncoderParams out(items[0].arch());
  auto v = param_average(views);
  std::copy(v.begin(), v.end(), out.flat().begin());
  return out;
}

}  // namespace entmeta
