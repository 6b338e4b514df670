#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "entmeta/decoder.hpp"
#include "entmeta/encoder.hpp"
#include "entmeta/metric.hpp"
#include "entmeta/sampler.hpp"

namespace entmeta {

enum class Method {
  protonet,
  protonet_eod,
  contrastproto,
  anil,
  anil_hc,
  reptile,
  reptile_hc,
};

std::string_view method_name(Method m) noexcept;
Method parse_method(std::string_view name);
/// True for the ANIL and Reptile families, which own a decoder.
bool uses_decoder(Method m) noexcept;
HeadKind method_head(Method m) noexcept;

struct MetaParams {
  EncoderParams encoder;
  DecoderParams decoder;

  friend bool operator==(const MetaParams&, const MetaParams&) = default;
};

MetaParams init_meta_params(const EncoderArch& arch, std::size_t max_way, std::uint64_t seed);

struct InnerLoopConfig {
  std::size_t steps = 15;
  double lr = 0.015;
  HeadKind head = HeadKind::hierarchical;
};

/// Throws ConfigError unless lr > 0.
void validate_inner_config(const InnerLoopConfig& cfg);

/// Document index groups. With more than one non-empty group each inner step
/// is taken independently per group from the shared parameters and the
/// results are averaged; empty groups are skipped.
using DocGroups = std::vector<std::vector<std::size_t>>;

struct AdaptResult {
  MetaParams params;
  /// Loss before each step, then the loss of the adapted parameters
  /// (steps + 1 entries).
  std::vector<double> losses;
};

/// Full-batch SGD on the mean token loss of `docs` (masked tokens excluded).
/// With adapt_encoder = false the features are computed once and the encoder
/// is returned bitwise unchanged. Throws NonFiniteLoss.
AdaptResult inner_loop_sgd(const EncoderParams& encoder, const DecoderParams& decoder, std::span<const Document> docs,
                           std::size_t n_way, const InnerLoopConfig& cfg, bool adapt_encoder,
                           const DocGroups* groups = nullptr);

/// Mean head loss of `docs` under the given parameters.
double token_loss(const MetaParams& params, std::span<const Document> docs, std::size_t n_way, HeadKind head);

struct TaskGradient {
  double loss = 0.0;
  std::vector<double> encoder;
  std::vector<double> decoder;  // empty for encoder-only methods
};

/// Query loss after a decoder-only inner loop on the support set, as a
/// function of the encoder and the decoder initialization.
double anil_objective(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                      const DocGroups* support_groups = nullptr);

/// Exact gradient of anil_objective by reverse differentiation through the
/// unrolled inner loop.
TaskGradient anil_task_gradient(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                                const DocGroups* support_groups = nullptr);

/// Adapted minus initial parameters after adapting encoder and decoder on
/// support and query; `loss` is the pre-adaptation loss.
TaskGradient reptile_task_delta(const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                                const DocGroups* groups = nullptr);

TaskGradient contrastproto_task_gradient(const EncoderParams& encoder, const Task& task);
TaskGradient protonet_task_gradient(const EncoderParams& encoder, const Task& task, bool include_otd);

enum class OuterRule { adam, sgd };

struct MetaOptimizerConfig {
  OuterRule rule = OuterRule::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam (or plain SGD) over the concatenation encoder | decoder.
class MetaOptimizer {
 public:
  MetaOptimizer(const MetaParams& params, const MetaOptimizerConfig& cfg);

  void apply(MetaParams& params, std::span<const double> grad_encoder, std::span<const double> grad_decoder);

  const MetaOptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t step_count() const noexcept { return t_; }
  const std::vector<double>& first_moment() const noexcept { return m_; }
  const std::vector<double>& second_moment() const noexcept { return v_; }

 private:
  void update(std::span<double> params, std::span<const double> grad, std::size_t offset);

  MetaOptimizerConfig cfg_;
  std::size_t n_encoder_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// Support and query document groups of one task (one entry per worker).
struct TaskPartition {
  DocGroups support;
  DocGroups query;
};

struct MetaStepOptions {
  std::size_t threads = 1;
  /// One entry per task of the batch, or empty for centralized training.
  std::span<const TaskPartition> partitions;
};

struct MetaStepReport {
  std::vector<double> task_losses;
  double meta_loss = 0.0;
  double grad_norm = 0.0;
};

/// Computes per-task gradients (concurrently when threads > 1), averages them
/// in batch order and commits one optimizer update.
MetaStepReport meta_step(Method method, MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                         MetaOptimizer& optimizer, const MetaStepOptions& options = {});

MetaStepReport anil_meta_step(MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                              MetaOptimizer& optimizer, const MetaStepOptions& options = {});
/// The averaged (adapted - init) direction is fed to the optimizer negated.
MetaStepReport reptile_meta_step(MetaParams& params, std::span<const Task> batch, const InnerLoopConfig& cfg,
                                 MetaOptimizer& optimizer, const MetaStepOptions& options = {});
MetaStepReport contrastproto_meta_step(MetaParams& params, std::span<const Task> batch, MetaOptimizer& optimizer,
                                       const MetaStepOptions& options = {});

struct MetricTestConfig {
  Shrinkage shrinkage;
  ThresholdConfig threshold;
};

struct TaskPrediction {
  std::vector<std::vector<Label>> labels;      // per query document
  std::vector<std::vector<double>> itd_score;  // higher means more in-task
  std::vector<RowMatrix> query_embeddings;
};

/// Test-time pipeline: adapt on the support set only, then label the query.
TaskPrediction predict_task(Method method, const MetaParams& params, const Task& task, const InnerLoopConfig& cfg,
                            const MetricTestConfig& metric = {}, const TaskPartition* partition = nullptr);

}  // namespace entmeta
