#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "entmeta/corpus.hpp"

namespace entmeta {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EncoderArch {
  std::size_t vocab_size = 256;
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t depth = 2;  // number of mixing layers
  std::size_t output_dim = 16;
  std::size_t window = 4;  // context window is [l - window, l + window]

  friend bool operator==(const EncoderArch&, const EncoderArch&) = default;
};

/// Throws InvalidArch for zero sizes or depth.
void validate_arch(const EncoderArch& arch);

/// All encoder parameters live in one contiguous vector; the accessors return
/// views into it, so writes through either side are visible in both.
class EncoderParams {
 public:
  explicit EncoderParams(const EncoderArch& arch);

  const EncoderArch& arch() const noexcept { return arch_; }

  std::span<double> flat() noexcept { return flat_; }
  std::span<const double> flat() const noexcept { return flat_; }
  std::size_t size() const noexcept { return flat_.size(); }

  /// vocab_size x input_dim
  Eigen::Map<RowMatrix> token_embedding();
  Eigen::Map<const RowMatrix> token_embedding() const;
  /// 4 x input_dim, applied to the bbox row vector
  Eigen::Map<RowMatrix> pos2d_projection();
  Eigen::Map<const RowMatrix> pos2d_projection() const;
  /// out x in
  Eigen::Map<RowMatrix> layer_weight(std::size_t k);
  Eigen::Map<const RowMatrix> layer_weight(std::size_t k) const;
  Eigen::Map<Eigen::RowVectorXd> layer_bias(std::size_t k);
  Eigen::Map<const Eigen::RowVectorXd> layer_bias(std::size_t k) const;

  std::size_t layer_in(std::size_t k) const;
  std::size_t layer_out(std::size_t k) const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;

 private:
  struct Block {
    std::size_t offset, rows, cols;

    friend bool operator==(const Block&, const Block&) = default;
  };

  EncoderArch arch_;
  Block embedding_{}, pos2d_{};
  std::vector<Block> weights_, biases_;
  std::vector<double> flat_;
};

/// Gradient with the layout of EncoderParams::flat().
using GradientBuffer = std::vector<double>;

/// Per-document token embeddings, row l belongs to token l.
using EmbeddingBatch = RowMatrix;

EncoderParams init_params(const EncoderArch& arch, std::uint64_t seed);

/// Each output row is standardized to zero mean and unit variance over its
/// features (a layer norm without gain or shift).
/// Masked tokens are ordinary context here; masking only matters downstream.
EmbeddingBatch encode_document(const EncoderParams& params, const Document& doc);

/// Gradient of <upstream, encode_document(params, doc)> with respect to the
/// flat parameters, accumulated into `grad` (which must have params.size()).
void backward(const EncoderParams& params, const Document& doc, const RowMatrix& upstream,
              std::span<double> grad);

GradientBuffer backward(const EncoderParams& params, const Document& doc, const RowMatrix& upstream);

/// Fixed 1D sinusoidal position features.
Eigen::RowVectorXd sinusoidal_position(std::size_t pos, std::size_t dim);

// Flat parameter arithmetic. Operands must share one layout.
std::vector<double> param_axpy(double a, std::span<const double> x, std::span<const double> y);
std::vector<double> param_average(std::span<const std::span<const double>> items);
EncoderParams param_axpy(double a, const EncoderParams& x, const EncoderParams& y);
EncoderParams param_average(std::span<const EncoderParams> items);

}  // namespace entmeta
