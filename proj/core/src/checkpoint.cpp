#include "entmeta/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "json_codec.hpp"

namespace entmeta {

using detail::json;

namespace {

constexpr std::string_view kFormat = "entmeta-checkpoint";

void append_le(std::string& out, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
  }
}

void read_le(std::string_view bytes, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + static_cast<std::size_t>(b)]))
              << (8 * b);
    }
    out[i] = std::bit_cast<double>(bits);
  }
}

}  // namespace

std::string checkpoint_to_bytes(const MetaParams& params, const CheckpointInfo& info) {
  const auto& a = params.encoder.arch();
  json h;
  h["format"] = kFormat;
  h["version"] = kCheckpointVersion;
  h["arch"] = {{"vocab_size", a.vocab_size}, {"input_dim", a.input_dim}, {"hidden_dim", a.hidden_dim},
               {"depth", a.depth},           {"output_dim", a.output_dim}, {"window", a.window}};
  h["decoder"] = {{"dim", params.decoder.dim()}, {"max_way", params.decoder.max_way()}};
  h["encoder_size"] = params.encoder.size();
  h["decoder_size"] = params.decoder.size();
  h["seed"] = info.seed;
  h["method"] = info.method;
  h["meta_steps"] = info.meta_steps;
  std::string out = h.dump();
  out.push_back('\n');
  append_le(out, params.encoder.flat());
  append_le(out, params.decoder.flat());
  return out;
}

Checkpoint checkpoint_from_bytes(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw Error(Errc::parse_error, "checkpoint: missing header line");
  const json h = detail::parse_json(bytes.substr(0, nl), "checkpoint header");
  if (detail::require<std::string>(h, "format", "checkpoint") != kFormat) {
    throw Error(Errc::schema_error, "checkpoint: unknown format");
  }
  if (detail::require<int>(h, "version", "checkpoint") != kCheckpointVersion) {
    throw Error(Errc::schema_error, "checkpoint: unsupported version");
  }
  const json a = detail::require<json>(h, "arch", "checkpoint");
  EncoderArch arch;
  arch.vocab_size = detail::require<std::size_t>(a, "vocab_size", "checkpoint arch");
  arch.input_dim = detail::require<std::size_t>(a, "input_dim", "checkpoint arch");
  arch.hidden_dim = detail::require<std::size_t>(a, "hidden_dim", "checkpoint arch");
  arch.depth = detail::require<std::size_t>(a, "depth", "checkpoint arch");
  arch.output_dim = detail::require<std::size_t>(a, "output_dim", "checkpoint arch");
  arch.window = detail::require<std::size_t>(a, "window", "checkpoint arch");
  validate_arch(arch);
  const json d = detail::require<json>(h, "decoder", "checkpoint");
  MetaParams params{EncoderParams(arch), DecoderParams(detail::require<std::size_t>(d, "dim", "checkpoint decoder"),
                                                       detail::require<std::size_t>(d, "max_way", "checkpoint decoder"))};
  if (detail::require<std::size_t>(h, "encoder_size", "checkpoint") != params.encoder.size() ||
      detail::require<std::size_t>(h, "decoder_size", "checkpoint") != params.decoder.size()) {
    throw Error(Errc::layout_mismatch, "checkpoint: sizes do not match the architecture");
  }
  const auto body = bytes.substr(nl + 1);
  if (body.size() != 8 * (params.encoder.size() + params.decoder.size())) {
    throw Error(Errc::layout_mismatch, "checkpoint: payload length does not match the header");
  }
  read_le(body, params.encoder.flat());
  read_le(body.substr(8 * params.encoder.size()), params.decoder.flat());
  CheckpointInfo info;
  info.seed = detail::require<std::uint64_t>(h, "seed", "checkpoint");
  info.method = detail::require<std::string>(h, "method", "checkpoint");
  info.meta_steps = detail::require<std::size_t>(h, "meta_steps", "checkpoint");
  return {std::move(params), std::move(info)};
}

void save_checkpoint(const std::filesystem::path& path, const MetaParams& params, const CheckpointInfo& info) {
  write_file_atomic(path, checkpoint_to_bytes(params, info));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_bytes(read_file(path)); }

}  // namespace entmeta
