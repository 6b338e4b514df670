#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace entmeta {

/// Token label. Non-negative values are class ids (catalog indices in a
/// corpus, relative ids 0..N-1 inside a task); the two sentinels below are
/// never valid class ids.
using Label = std::int32_t;
inline constexpr Label kOutside = -1;  // background / "O"
inline constexpr Label kMasked = -2;   // surplus occurrence hidden by the sampler

inline constexpr std::size_t kDefaultMaxSeqLen = 512;
inline constexpr int kCorpusSchemaVersion = 1;

struct TokenFeatures {
  std::uint32_t token_id = 0;
  std::uint32_t pos_1d = 0;
  std::array<double, 4> bbox{};  // normalized x0, y0, x1, y1

  friend bool operator==(const TokenFeatures&, const TokenFeatures&) = default;
};

struct Document {
  std::string doc_id;
  std::string domain_tag;
  std::vector<TokenFeatures> tokens;
  std::vector<Label> labels;

  std::size_t size() const noexcept { return tokens.size(); }

  friend bool operator==(const Document&, const Document&) = default;
};

/// Immutable after construction; safe to share between readers.
struct Corpus {
  std::vector<std::string> class_catalog;
  std::vector<Document> documents;

  std::size_t n_classes() const noexcept { return class_catalog.size(); }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct EntityOccurrence {
  std::string doc_id;
  Label entity_type = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive

  friend bool operator==(const EntityOccurrence&, const EntityOccurrence&) = default;
};

struct ClassCount {
  std::size_t n_occurrences = 0;
  std::size_t n_documents = 0;

  friend bool operator==(const ClassCount&, const ClassCount&) = default;
};

template <class T>
struct Range {
  T min{};
  T max{};
};

struct SyntheticConfig {
  std::size_t n_classes = 8;
  std::size_t n_documents = 400;
  Range<std::size_t> doc_length_range{40, 72};
  Range<std::size_t> occurrences_per_doc_range{4, 8};
  double class_frequency_skew = 0.0;
  double feature_noise = 0.05;
  std::uint64_t seed = 7;

  // Layout of the generated vocabulary and documents.
  Range<std::size_t> span_length_range{1, 3};
  std::size_t background_vocab = 96;
  std::size_t tokens_per_class = 3;
  std::size_t grid_columns = 8;
  double key_token_prob = 0.6;

  /// background words, then tokens_per_class words per class, then one key
  /// word per class
  std::size_t vocab_size() const noexcept {
    return background_vocab + n_classes * tokens_per_class + n_classes;
  }
};

/// Throws SchemaError on the first violated document or corpus invariant.
void validate_corpus(const Corpus& corpus, std::size_t max_seq_len = kDefaultMaxSeqLen);

Corpus parse_corpus(std::string_view json_text, std::size_t max_seq_len = kDefaultMaxSeqLen);
Corpus load_corpus(const std::filesystem::path& path, std::size_t max_seq_len = kDefaultMaxSeqLen);
std::string corpus_to_json(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

Corpus generate_synthetic_corpus(const SyntheticConfig& cfg);

/// Maximal runs of one non-negative label, in increasing start order.
/// Sentinel labels (background, masked) never belong to a run.
std::vector<EntityOccurrence> extract_occurrences(const Document& doc);

/// Same runs over a bare label sequence (doc_id left empty).
std::vector<EntityOccurrence> label_runs(std::span<const Label> labels);

/// Indexed by catalog id.
std::vector<ClassCount> count_occurrences(const Corpus& corpus);

}  // namespace entmeta
