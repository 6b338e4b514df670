#include "entmeta/error.hpp"

namespace entmeta {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::parse_error: return "ParseError";
    case Errc::schema_error: return "SchemaError";
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::infeasible_config: return "InfeasibleConfig";
    case Errc::task_infeasible: return "TaskInfeasible";
    case Errc::class_pool_too_small: return "ClassPoolTooSmall";
    case Errc::dataset_infeasible: return "DatasetInfeasible";
    case Errc::invalid_arch: return "InvalidArch";
    case Errc::token_out_of_vocab: return "TokenOutOfVocab";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::layout_mismatch: return "LayoutMismatch";
    case Errc::empty_class: return "EmptyClass";
    case Errc::no_otd_tokens: return "NoOtdTokens";
    case Errc::missing_otd_prototype: return "MissingOtdPrototype";
    case Errc::non_finite: return "NonFinite";
    case Errc::non_psd: return "NonPsd";
    case Errc::non_finite_loss: return "NonFiniteLoss";
    case Errc::single_class: return "SingleClass";
    case Errc::io_error: return "IoError";
    case Errc::config_error: return "ConfigError";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

}  // namespace entmeta
