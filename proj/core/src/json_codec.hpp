#pragma once

// Shared JSON encoding of documents for corpus and task files.

#include <functional>

#include "entmeta/corpus.hpp"
#include "entmeta/error.hpp"
#include "json.hpp"

namespace entmeta::detail {

using json = nlohmann::json;

/// Maps an in-memory label to its on-disk integer and back.
using LabelEncoder = std::function<std::int64_t(Label)>;
using LabelDecoder = std::function<Label(std::int64_t)>;

json document_to_json(const Document& doc, const LabelEncoder& encode);

/// Fills pos_1d from the token index; a present "pos_1d" field must match it.
Document document_from_json(const json& j, const LabelDecoder& decode);

json parse_json(std::string_view text, std::string_view what);

template <class T>
T require(const json& j, const char* key, std::string_view what) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw Error(Errc::schema_error, std::string(what) + ": missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::schema_error, std::string(what) + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace entmeta::detail
