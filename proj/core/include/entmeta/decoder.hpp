#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "entmeta/corpus.hpp"

namespace entmeta {

enum class HeadKind {
  plain,         // softmax over the N task classes plus O
  hierarchical,  // binary O gate times a softmax over the N task classes
};

std::string_view head_kind_name(HeadKind kind) noexcept;

/// Offsets of the three heads inside DecoderParams::flat().
struct DecoderLayout {
  std::size_t dim = 0;
  std::size_t max_way = 0;

  std::size_t binary_weight() const { return 0; }
  std::size_t binary_bias() const { return dim; }
  std::size_t entity_weight(std::size_t e) const { return dim + 1 + e * dim; }
  std::size_t entity_bias(std::size_t e) const { return dim + 1 + max_way * dim + e; }
  /// column max_way is the O class
  std::size_t plain_weight(std::size_t c) const { return dim + 1 + max_way * (dim + 1) + c * dim; }
  std::size_t plain_bias(std::size_t c) const {
    return dim + 1 + max_way * (dim + 1) + (max_way + 1) * dim + c;
  }
  std::size_t size() const { return dim + 1 + max_way * (dim + 1) + (max_way + 1) * (dim + 1); }

  friend bool operator==(const DecoderLayout&, const DecoderLayout&) = default;
};

/// Decoder psi = {binary head psi1, entity head psi2} plus the plain head used
/// by the vanilla baselines, stored in one flat vector.
class DecoderParams {
 public:
  DecoderParams(std::size_t dim, std::size_t max_way);

  const DecoderLayout& layout() const noexcept { return layout_; }
  std::size_t dim() const noexcept { return layout_.dim; }
  std::size_t max_way() const noexcept { return layout_.max_way; }

  std::span<double> flat() noexcept { return flat_; }
  std::span<const double> flat() const noexcept { return flat_; }
  std::size_t size() const noexcept { return flat_.size(); }

  friend bool operator==(const DecoderParams&, const DecoderParams&) = default;

 private:
  DecoderLayout layout_;
  std::vector<double> flat_;
};

DecoderParams init_decoder(std::size_t dim, std::size_t max_way, std::uint64_t seed);

/// Probability vector over {O, 0..N-1}: P(O) = sigmoid(binary logit),
/// P(e) = (1 - P(O)) * softmax(entity logits over the N task classes)_e.
std::vector<double> hc_forward(std::span<const double> embedding, const DecoderParams& params,
                               std::size_t n_way);

/// Same ordering as hc_forward, from the plain (N+1)-way softmax head.
std::vector<double> plain_forward(std::span<const double> embedding, const DecoderParams& params,
                                  std::size_t n_way);

std::vector<double> head_forward(HeadKind kind, std::span<const double> embedding, const DecoderParams& params,
                                 std::size_t n_way);

/// Argmax of a probability vector in hc_forward order, as a label
/// (kOutside or a relative class id). Ties go to the lowest index.
Label predict_label(std::span<const double> probabilities);

DecoderParams param_axpy(double a, const DecoderParams& x, const DecoderParams& y);
DecoderParams param_average(std::span<const DecoderParams> items);

}  // namespace entmeta
