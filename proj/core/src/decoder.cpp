#include "entmeta/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "entmeta/encoder.hpp"
#include "entmeta/error.hpp"
#include "entmeta/head_loss.hpp"
#include "entmeta/rng.hpp"

namespace entmeta {

std::string_view head_kind_name(HeadKind kind) noexcept {
  return kind == HeadKind::plain ? "plain" : "hierarchical";
}

DecoderParams::DecoderParams(std::size_t dim, std::size_t max_way) : layout_{dim, max_way} {
  if (dim == 0 || max_way == 0) throw Error(Errc::invalid_arch, "decoder sizes must be positive");
  flat_.assign(layout_.size(), 0.0);
}

DecoderParams init_decoder(std::size_t dim, std::size_t max_way, std::uint64_t seed) {
  DecoderParams p(dim, max_way);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  const auto& lay = p.layout();
  auto flat = p.flat();
  for (std::size_t k = 0; k < dim; ++k) flat[lay.binary_weight() + k] = rng.uniform(-scale, scale);
  for (std::size_t e = 0; e < max_way; ++e)
    for (std::size_t k = 0; k < dim; ++k) flat[lay.entity_weight(e) + k] = rng.uniform(-scale, scale);
  for (std::size_t c = 0; c <= max_way; ++c)
    for (std::size_t k = 0; k < dim; ++k) flat[lay.plain_weight(c) + k] = rng.uniform(-scale, scale);
  return p;
}

namespace {

double dot(std::span<const double> params, std::size_t offset, std::span<const double> h) {
  double s = 0.0;
  for (std::size_t k = 0; k < h.size(); ++k) s += params[offset + k] * h[k];
  return s;
}

void check(std::span<const double> embedding, const DecoderParams& params, std::size_t n_way) {
  if (embedding.size() != params.dim()) throw Error(Errc::shape_mismatch, "embedding width differs from decoder");
  if (n_way == 0 || n_way > params.max_way()) throw Error(Errc::shape_mismatch, "n_way exceeds decoder capacity");
}

}  // namespace

std::vector<double> hc_forward(std::span<const double> embedding, const DecoderParams& params, std::size_t n_way) {
  check(embedding, params, n_way);
  const auto& lay = params.layout();
  const auto flat = params.flat();
  const double z = flat[lay.binary_bias()] + dot(flat, lay.binary_weight(), embedding);
  const double p_outside = detail::sigmoid(z);
  std::vector<double> logits(n_way), probs(n_way);
  for (std::size_t e = 0; e < n_way; ++e) {
    logits[e] = flat[lay.entity_bias(e)] + dot(flat, lay.entity_weight(e), embedding);
  }
  detail::softmax<double>(logits, probs);
  std::vector<double> out(n_way + 1);
  out[0] = p_outside;
  // 1 - sigmoid(z) = sigmoid(-z) keeps precision when P(O) is close to 1
  const double p_inside = detail::sigmoid(-z);
  for (std::size_t e = 0; e < n_way; ++e) out[e + 1] = p_inside * probs[e];
  return out;
}

std::vector<double> plain_forward(std::span<const double> embedding, const DecoderParams& params,
                                  std::size_t n_way) {
  check(embedding, params, n_way);
  const auto& lay = params.layout();
  const auto flat = params.flat();
  std::vector<double> logits(n_way + 1), probs(n_way + 1);
  logits[0] = flat[lay.plain_bias(lay.max_way)] + dot(flat, lay.plain_weight(lay.max_way), embedding);
  for (std::size_t e = 0; e < n_way; ++e) {
    logits[e + 1] = flat[lay.plain_bias(e)] + dot(flat, lay.plain_weight(e), embedding);
  }
  detail::softmax<double>(logits, probs);
  return probs;
}

std::vector<double> head_forward(HeadKind kind, std::span<const double> embedding, const DecoderParams& params,
                                 std::size_t n_way) {
  return kind == HeadKind::plain ? plain_forward(embedding, params, n_way) : hc_forward(embedding, params, n_way);
}

Label predict_label(std::span<const double> probabilities) {
  const auto best = static_cast<std::size_t>(std::max_element(probabilities.begin(), probabilities.end()) -
                                             probabilities.begin());
  return best == 0 ? kOutside : static_cast<Label>(best - 1);
}

DecoderParams param_axpy(double a, const DecoderParams& x, const DecoderParams& y) {
  if (!(x.layout() == y.layout())) throw Error(Errc::layout_mismatch, "decoder layouts differ");
  DecoderParams out(y.dim(), y.max_way());
  auto v = param_axpy(a, x.flat(), y.flat());
  std::copy(v.begin(), v.end(), out.flat().begin());
  return out;
}

DecoderParams param_average(std::span<const DecoderParams> items) {
  if (items.empty()) throw Error(Errc::layout_mismatch, "cannot average an empty list");
  std::vector<std::span<const double>> views;
  for (const auto& p : items) {
    if (!(p.layout() == items[0].layout())) throw Error(Errc::layout_mismatch, "decoder layouts differ");
    views.push_back(p.flat());
  }
  DecoderParams out(items[0].dim(), items[0].max_way());
  auto v = param_average(views);
  std::copy(v.begin(), v.end(), out.flat().begin());
  return out;
}

}  // namespace entmeta
