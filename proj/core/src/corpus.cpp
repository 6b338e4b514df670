#include "entmeta/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "entmeta/rng.hpp"
#include "json_codec.hpp"

namespace entmeta {

namespace detail {

json document_to_json(const Document& doc, const LabelEncoder& encode) {
  json tokens = json::array();
  for (const auto& t : doc.tokens) {
    tokens.push_back({{"token_id", t.token_id},
                      {"bbox", {t.bbox[0], t.bbox[1], t.bbox[2], t.bbox[3]}}});
  }
  json labels = json::array();
  for (Label l : doc.labels) labels.push_back(encode(l));
  return {{"doc_id", doc.doc_id},
          {"domain_tag", doc.domain_tag},
          {"tokens", std::move(tokens)},
          {"labels", std::move(labels)}};
}

Document document_from_json(const json& j, const LabelDecoder& decode) {
  if (!j.is_object()) throw Error(Errc::schema_error, "document is not an object");
  Document doc;
  doc.doc_id = require<std::string>(j, "doc_id", "document");
  const std::string what = "document '" + doc.doc_id + "'";
  doc.domain_tag = j.contains("domain_tag") ? require<std::string>(j, "domain_tag", what) : "";
  const auto& tokens = j.find("tokens");
  if (tokens == j.end() || !tokens->is_array()) {
    throw Error(Errc::schema_error, what + ": missing field 'tokens'");
  }
  doc.tokens.reserve(tokens->size());
  for (std::size_t i = 0; i < tokens->size(); ++i) {
    const auto& tj = (*tokens)[i];
    if (!tj.is_object()) throw Error(Errc::schema_error, what + ": token is not an object");
    TokenFeatures t;
    auto id = require<std::int64_t>(tj, "token_id", what);
    if (id < 0 || id > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(Errc::schema_error, what + ": token_id out of range");
    }
    t.token_id = static_cast<std::uint32_t>(id);
    t.pos_1d = static_cast<std::uint32_t>(i);
    if (tj.contains("pos_1d") && require<std::int64_t>(tj, "pos_1d", what) != static_cast<std::int64_t>(i)) {
      throw Error(Errc::schema_error, what + ": pos_1d must equal the token index");
    }
    auto bbox = require<std::vector<double>>(tj, "bbox", what);
    if (bbox.size() != 4) throw Error(Errc::schema_error, what + ": bbox needs 4 coordinates");
    std::copy(bbox.begin(), bbox.end(), t.bbox.begin());
    doc.tokens.push_back(t);
  }
  for (auto raw : require<std::vector<std::int64_t>>(j, "labels", what)) {
    doc.labels.push_back(decode(raw));
  }
  return doc;
}

json parse_json(std::string_view text, std::string_view what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::parse_error, std::string(what) + ": " + e.what());
  }
}

}  // namespace detail

namespace {

using detail::json;

void validate_document(const Document& doc, std::size_t n_classes, std::size_t max_seq_len) {
  const std::string what = "document '" + doc.doc_id + "'";
  if (doc.tokens.size() != doc.labels.size()) {
    throw Error(Errc::schema_error, what + ": token and label counts differ");
  }
  if (doc.tokens.empty() || doc.tokens.size() > max_seq_len) {
    throw Error(Errc::schema_error, what + ": length " + std::to_string(doc.tokens.size()) +
                                        " outside [1, " + std::to_string(max_seq_len) + "]");
  }
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    const auto& t = doc.tokens[i];
    if (t.pos_1d != i) throw Error(Errc::schema_error, what + ": pos_1d out of order");
    const auto& b = t.bbox;
    for (double c : b) {
      if (!std::isfinite(c) || c < 0.0 || c > 1.0) {
        throw Error(Errc::schema_error, what + ": bbox coordinate outside [0,1]");
      }
    }
    if (b[0] > b[2] || b[1] > b[3]) {
      throw Error(Errc::schema_error, what + ": bbox has x0 > x1 or y0 > y1");
    }
    const Label l = doc.labels[i];
    if (l != kOutside && (l < 0 || static_cast<std::size_t>(l) >= n_classes)) {
      throw Error(Errc::schema_error, what + ": label " + std::to_string(l) +
                                          " outside catalog of size " + std::to_string(n_classes));
    }
  }
}

}  // namespace

void validate_corpus(const Corpus& corpus, std::size_t max_seq_len) {
  if (corpus.documents.empty()) throw Error(Errc::empty_corpus, "corpus has no documents");
  std::set<std::string_view> ids;
  for (const auto& doc : corpus.documents) {
    validate_document(doc, corpus.n_classes(), max_seq_len);
    if (!ids.insert(doc.doc_id).second) {
      throw Error(Errc::schema_error, "duplicate doc_id '" + doc.doc_id + "'");
    }
  }
}

Corpus parse_corpus(std::string_view json_text, std::size_t max_seq_len) {
  const json j = detail::parse_json(json_text, "corpus");
  if (!j.is_object()) throw Error(Errc::schema_error, "corpus: top level must be an object");
  const auto docs = j.find("documents");
  if (docs == j.end() || !docs->is_array()) {
    throw Error(Errc::schema_error, "corpus: missing field 'documents'");
  }
  if (docs->empty()) throw Error(Errc::empty_corpus, "corpus: no documents");
  Corpus corpus;
  corpus.class_catalog = detail::require<std::vector<std::string>>(j, "class_catalog", "corpus");
  const auto decode = [](std::int64_t raw) -> Label {
    if (raw == -1) return kOutside;
    if (raw < 0 || raw > std::numeric_limits<Label>::max()) {
      throw Error(Errc::schema_error, "corpus: label " + std::to_string(raw) + " is not a class id or -1");
    }
    return static_cast<Label>(raw);
  };
  for (const auto& dj : *docs) corpus.documents.push_back(detail::document_from_json(dj, decode));
  validate_corpus(corpus, max_seq_len);
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, std::size_t max_seq_len) {
  return parse_corpus(read_file(path), max_seq_len);
}

std::string corpus_to_json(const Corpus& corpus) {
  json docs = json::array();
  const auto encode = [](Label l) -> std::int64_t { return l == kOutside ? -1 : l; };
  for (const auto& doc : corpus.documents) docs.push_back(detail::document_to_json(doc, encode));
  json j = {{"schema_version", kCorpusSchemaVersion},
            {"class_catalog", corpus.class_catalog},
            {"documents", std::move(docs)}};
  return j.dump() + "\n";
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  write_file_atomic(path, corpus_to_json(corpus));
}

std::vector<EntityOccurrence> label_runs(std::span<const Label> labels) {
  std::vector<EntityOccurrence> runs;
  std::size_t i = 0;
  while (i < labels.size()) {
    if (labels[i] < 0) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < labels.size() && labels[j + 1] == labels[i]) ++j;
    runs.push_back({std::string{}, labels[i], i, j});
    i = j + 1;
  }
  return runs;
}

std::vector<EntityOccurrence> extract_occurrences(const Document& doc) {
  auto runs = label_runs(doc.labels);
  for (auto& r : runs) r.doc_id = doc.doc_id;
  return runs;
}

std::vector<ClassCount> count_occurrences(const Corpus& corpus) {
  std::vector<ClassCount> counts(corpus.n_classes());
  std::vector<bool> seen(corpus.n_classes());
  for (const auto& doc : corpus.documents) {
    std::fill(seen.begin(), seen.end(), false);
    for (const auto& occ : label_runs(doc.labels)) {
      auto c = static_cast<std::size_t>(occ.entity_type);
      if (c >= counts.size()) continue;
      ++counts[c].n_occurrences;
      if (!seen[c]) {
        seen[c] = true;
        ++counts[c].n_documents;
      }
    }
  }
  return counts;
}

namespace {

void check_synthetic_config(const SyntheticConfig& cfg) {
  auto bad = [](const std::string& m) { throw Error(Errc::config_error, "synthetic config: " + m); };
  if (cfg.n_classes < 2) bad("n_classes must be at least 2");
  if (cfg.n_documents < 1) bad("n_documents must be at least 1");
  if (cfg.doc_length_range.min < 1 || cfg.doc_length_range.min > cfg.doc_length_range.max) {
    bad("doc_length_range is empty");
  }
  if (cfg.occurrences_per_doc_range.min > cfg.occurrences_per_doc_range.max) {
    bad("occurrences_per_doc_range is empty");
  }
  if (cfg.span_length_range.min < 1 || cfg.span_length_range.min > cfg.span_length_range.max) {
    bad("span_length_range is empty");
  }
  if (!(cfg.class_frequency_skew >= 0.0) || !(cfg.feature_noise >= 0.0)) {
    bad("skew and noise must be non-negative");
  }
  if (cfg.background_vocab < 1 || cfg.tokens_per_class < 1 || cfg.grid_columns < 1) {
    bad("vocabulary and grid sizes must be positive");
  }
  if (cfg.doc_length_range.max > kDefaultMaxSeqLen) bad("documents longer than the max sequence length");
  // Every occurrence needs one token and consecutive occurrences need a
  // separating background token.
  const std::size_t occ = cfg.occurrences_per_doc_range.max;
  if (occ > 0 && 2 * occ - 1 > cfg.doc_length_range.min) {
    throw Error(Errc::infeasible_config,
                std::to_string(occ) + " occurrences cannot fit in documents of length " +
                    std::to_string(cfg.doc_length_range.min));
  }
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticConfig& cfg) {
  check_synthetic_config(cfg);
  Rng rng(cfg.seed);

  std::vector<double> cdf(cfg.n_classes);
  double total = 0.0;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    total += std::pow(static_cast<double>(c + 1), -cfg.class_frequency_skew);
    cdf[c] = total;
  }
  auto sample_class = [&]() -> std::size_t {
    const double u = rng.uniform01() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cfg.n_classes - 1);
  };
  const std::size_t class_vocab0 = cfg.background_vocab;
  const std::size_t key_vocab0 = class_vocab0 + cfg.n_classes * cfg.tokens_per_class;

  Corpus corpus;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%02zu", c);
    corpus.class_catalog.emplace_back(name);
  }

  struct Planted {
    std::size_t cls;
    std::size_t length;
  };

  for (std::size_t d = 0; d < cfg.n_documents; ++d) {
    const auto length = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.doc_length_range.min),
                        static_cast<std::int64_t>(cfg.doc_length_range.max)));
    const auto n_occ = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.occurrences_per_doc_range.min),
                        static_cast<std::int64_t>(cfg.occurrences_per_doc_range.max)));

    std::vector<Planted> planted(n_occ);
    for (auto& p : planted) {
      p.cls = sample_class();
      p.length = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(cfg.span_length_range.min),
                          static_cast<std::int64_t>(cfg.span_length_range.max)));
    }
    auto needed = [&]() {
      std::size_t s = n_occ == 0 ? 0 : n_occ - 1;
      for (const auto& p : planted) s += p.length;
      return s;
    };
    while (needed() > length) {
      std::max_element(planted.begin(), planted.end(),
                       [](const Planted& a, const Planted& b) { return a.length < b.length; })
          ->length -= 1;
    }
    // Occurrences appear in class order so every class keeps a vertical band.
    std::stable_sort(planted.begin(), planted.end(),
                     [](const Planted& a, const Planted& b) { return a.cls < b.cls; });

    std::vector<std::size_t> gaps(n_occ + 1, 0);
    for (std::size_t g = 1; g < n_occ; ++g) gaps[g] = 1;
    for (std::size_t extra = length - needed(); extra > 0; --extra) ++gaps[rng.uniform_index(n_occ + 1)];

    Document doc;
    char id[32];
    std::snprintf(id, sizeof(id), "doc%05zu", d);
    doc.doc_id = id;
    doc.domain_tag = "synthetic";
    doc.labels.assign(length, kOutside);
    std::vector<std::size_t> starts;
    std::size_t pos = gaps[0];
    for (std::size_t k = 0; k < n_occ; ++k) {
      starts.push_back(pos);
      for (std::size_t t = 0; t < planted[k].length; ++t) {
        doc.labels[pos + t] = static_cast<Label>(planted[k].cls);
      }
      pos += planted[k].length + gaps[k + 1];
    }

    doc.tokens.resize(length);
    for (std::size_t p = 0; p < length; ++p) {
      auto& t = doc.tokens[p];
      t.pos_1d = static_cast<std::uint32_t>(p);
      const Label l = doc.labels[p];
      t.token_id = l == kOutside
                       ? static_cast<std::uint32_t>(rng.uniform_index(cfg.background_vocab))
                       : static_cast<std::uint32_t>(class_vocab0 + static_cast<std::size_t>(l) * cfg.tokens_per_class +
                                                    rng.uniform_index(cfg.tokens_per_class));
    }
    for (std::size_t k = 0; k < n_occ; ++k) {
      const bool has_key = rng.uniform01() < cfg.key_token_prob;
      if (has_key && starts[k] > 0 && doc.labels[starts[k] - 1] == kOutside) {
        doc.tokens[starts[k] - 1].token_id = static_cast<std::uint32_t>(key_vocab0 + planted[k].cls);
      }
    }

    const double cell_w = 1.0 / static_cast<double>(cfg.grid_columns);
    const std::size_t rows = (length + cfg.grid_columns - 1) / cfg.grid_columns;
    const double cell_h = 1.0 / static_cast<double>(rows);
    for (std::size_t p = 0; p < length; ++p) {
      const double col = static_cast<double>(p % cfg.grid_columns);
      const double row = static_cast<double>(p / cfg.grid_columns);
      const Label l = doc.labels[p];
      const double height =
          l == kOutside ? 0.5 * cell_h
                        : cell_h * (0.3 + 0.6 * (static_cast<double>(l % 4) + 0.5) / 4.0);
      const double jx = rng.normal() * cfg.feature_noise * cell_w;
      const double jy = rng.normal() * cfg.feature_noise * cell_h;
      auto& b = doc.tokens[p].bbox;
      b[0] = clamp01(col * cell_w + 0.1 * cell_w + jx);
      b[1] = clamp01(row * cell_h + 0.1 * cell_h + jy);
      b[2] = clamp01(b[0] + 0.8 * cell_w);
      b[3] = clamp01(b[1] + height);
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

}  // namespace entmeta
