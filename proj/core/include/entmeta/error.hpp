#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace entmeta {

enum class Errc {
  parse_error,
  schema_error,
  empty_corpus,
  infeasible_config,
  task_infeasible,
  class_pool_too_small,
  dataset_infeasible,
  invalid_arch,
  token_out_of_vocab,
  shape_mismatch,
  layout_mismatch,
  empty_class,
  no_otd_tokens,
  missing_otd_prototype,
  non_finite,
  non_psd,
  non_finite_loss,
  single_class,
  io_error,
  config_error,
};

std::string_view errc_name(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace entmeta
