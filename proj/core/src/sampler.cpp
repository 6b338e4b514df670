#include "entmeta/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "entmeta/parallel.hpp"
#include "json_codec.hpp"

namespace entmeta {

using detail::json;

std::string_view phase_name(Phase p) noexcept { return p == Phase::train ? "train" : "test"; }

Phase parse_phase(std::string_view name) {
  if (name == "train") return Phase::train;
  if (name == "test") return Phase::test;
  throw Error(Errc::config_error, "phase must be 'train' or 'test', got '" + std::string(name) + "'");
}

std::size_t TaskSpec::support_ceiling() const {
  return static_cast<std::size_t>(std::floor(rho * static_cast<double>(k_shot)));
}

std::size_t TaskSpec::query_ceiling() const {
  return static_cast<std::size_t>(std::floor(rho * static_cast<double>(k_query)));
}

void validate_task_spec(const TaskSpec& spec) {
  if (spec.n_way < 1) throw Error(Errc::config_error, "n_way must be at least 1");
  if (spec.k_shot < 1 || spec.k_query < 1) throw Error(Errc::config_error, "k_shot and k_query must be at least 1");
  if (!(spec.rho > 1.0)) throw Error(Errc::config_error, "rho must exceed 1");
  if (spec.max_docs < 1) throw Error(Errc::config_error, "max_docs must be at least 1");
}

ClassSplit split_classes(const Corpus& corpus, double gamma, std::size_t u_threshold, std::uint64_t seed) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error(Errc::config_error, "gamma must lie in (0, 1)");
  const std::size_t n_classes = corpus.n_classes();
  if (n_classes == 0) throw Error(Errc::config_error, "class catalog is empty");

  ClassSplit split;
  split.gamma = gamma;
  split.u_threshold = u_threshold;
  const auto n_novel = static_cast<std::size_t>(std::lround(gamma * static_cast<double>(n_classes)));
  const auto counts = count_occurrences(corpus);

  std::vector<Label> forced, free;
  for (std::size_t c = 0; c < n_classes; ++c) {
    (counts[c].n_documents < u_threshold ? forced : free).push_back(static_cast<Label>(c));
  }
  std::vector<Label> novel = forced;
  if (forced.size() > n_novel) {
    split.warnings.push_back("SplitInfeasible: " + std::to_string(forced.size()) +
                             " classes occur in fewer than " + std::to_string(u_threshold) +
                             " documents but only " + std::to_string(n_novel) +
                             " novel slots exist; all of them are kept novel");
  } else {
    Rng rng(seed);
    rng.shuffle(free.begin(), free.end());
    novel.insert(novel.end(), free.begin(), free.begin() + static_cast<std::ptrdiff_t>(n_novel - forced.size()));
  }
  std::sort(novel.begin(), novel.end());
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (!std::binary_search(novel.begin(), novel.end(), static_cast<Label>(c))) {
      split.base_classes.push_back(static_cast<Label>(c));
    }
  }
  split.novel_classes = std::move(novel);
  if (split.base_classes.empty()) split.warnings.push_back("base class set is empty");
  return split;
}

CandidateIndex build_candidate_index(const Corpus& corpus, std::span<const Label> classes) {
  CandidateIndex index;
  for (Label c : classes) index[c];
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    std::set<Label> present;
    for (const auto& occ : label_runs(corpus.documents[d].labels)) present.insert(occ.entity_type);
    for (Label c : present) {
      auto it = index.find(c);
      if (it != index.end()) it->second.push_back(d);
    }
  }
  return index;
}

TaskSampler::TaskSampler(const Corpus& corpus, ClassSplit split)
    : corpus_(corpus), split_(std::move(split)), class_docs_(corpus.n_classes()),
      doc_counts_(corpus.documents.size()) {
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    for (const auto& occ : label_runs(corpus.documents[d].labels)) ++doc_counts_[d][occ.entity_type];
    for (const auto& [c, n] : doc_counts_[d]) {
      if (static_cast<std::size_t>(c) < class_docs_.size()) class_docs_[c].push_back(d);
    }
  }
}

namespace {

/// Masks the last `count` occurrences of `cls` in reading order.
void mask_surplus(Document& doc, Label cls, std::size_t count) {
  auto runs = label_runs(doc.labels);
  for (auto it = runs.rbegin(); it != runs.rend() && count > 0; ++it) {
    if (it->entity_type != cls) continue;
    for (std::size_t p = it->start; p <= it->end; ++p) doc.labels[p] = kMasked;
    --count;
  }
}

}  // namespace

Task TaskSampler::run_xdr(std::span<const Label> classes, const TaskSpec& spec, Rng& rng,
                          XdrTrace* trace) const {
  const std::size_t n_way = classes.size();
  std::vector<std::vector<std::size_t>> candidates(n_way);
  for (std::size_t e = 0; e < n_way; ++e) {
    const auto c = static_cast<std::size_t>(classes[e]);
    if (c < class_docs_.size()) candidates[e] = class_docs_[c];
  }

  XdrTrace local;
  Task task;
  task.target_classes.assign(classes.begin(), classes.end());

  auto fill = [&](std::vector<Document>& out, std::size_t min_count, std::size_t ceiling,
                  std::vector<std::size_t>& raw, std::size_t& masked, const char* side) {
    std::vector<std::size_t> count(n_way, 0);
    raw.assign(n_way, 0);
    while (*std::min_element(count.begin(), count.end()) < min_count) {
      const auto least = static_cast<std::size_t>(std::min_element(count.begin(), count.end()) - count.begin());
      if (candidates[least].empty()) {
        throw Error(Errc::task_infeasible, std::string("no ") + side + " documents left for class " +
                                              std::to_string(classes[least]));
      }
      if (out.size() >= spec.max_docs) {
        throw Error(Errc::task_infeasible, std::string(side) + " set reached the document cap of " +
                                               std::to_string(spec.max_docs));
      }
      const std::size_t doc_index = candidates[least][rng.uniform_index(candidates[least].size())];
      for (auto& list : candidates) {
        auto it = std::lower_bound(list.begin(), list.end(), doc_index);
        if (it != list.end() && *it == doc_index) list.erase(it);
      }
      Document doc = corpus_.documents[doc_index];
      for (std::size_t e = 0; e < n_way; ++e) {
        auto found = doc_counts_[doc_index].find(classes[e]);
        const std::size_t n = found == doc_counts_[doc_index].end() ? 0 : found->second;
        raw[e] += n;
        count[e] += n;
        if (count[e] > ceiling) {
          const std::size_t surplus = count[e] - ceiling;
          mask_surplus(doc, classes[e], surplus);
          masked += surplus;
          count[e] = ceiling;
        }
      }
      out.push_back(std::move(doc));
    }
  };

  fill(task.support, spec.k_shot, spec.support_ceiling(), local.raw_support_counts,
       local.masked_support_occurrences, "support");
  fill(task.query, spec.k_query, spec.query_ceiling(), local.raw_query_counts,
       local.masked_query_occurrences, "query");
  if (trace != nullptr) *trace = std::move(local);
  return convert_labels(std::move(task));
}

Task TaskSampler::sample(const TaskSpec& spec, XdrTrace* trace) const {
  validate_task_spec(spec);
  const auto& pool = split_.pool(spec.phase);
  if (pool.size() < spec.n_way) {
    throw Error(Errc::class_pool_too_small,
                std::string(phase_name(spec.phase)) + " pool has " + std::to_string(pool.size()) +
                    " classes, need " + std::to_string(spec.n_way));
  }
  Rng rng(spec.seed);
  std::vector<Label> classes = pool;
  for (std::size_t i = 0; i < spec.n_way; ++i) {
    std::swap(classes[i], classes[i + rng.uniform_index(classes.size() - i)]);
  }
  classes.resize(spec.n_way);
  return run_xdr(classes, spec, rng, trace);
}

Task TaskSampler::sample_with_classes(std::span<const Label> target_classes, const TaskSpec& spec,
                                      XdrTrace* trace) const {
  validate_task_spec(spec);
  std::set<Label> distinct(target_classes.begin(), target_classes.end());
  if (distinct.size() != target_classes.size() || target_classes.empty()) {
    throw Error(Errc::config_error, "target classes must be distinct and non-empty");
  }
  for (Label c : target_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= corpus_.n_classes()) {
      throw Error(Errc::config_error, "target class " + std::to_string(c) + " is not in the catalog");
    }
  }
  Rng rng(spec.seed);
  return run_xdr(target_classes, spec, rng, trace);
}

Task xdr_sample_task(const Corpus& corpus, const ClassSplit& split, const TaskSpec& spec, XdrTrace* trace) {
  return TaskSampler(corpus, split).sample(spec, trace);
}

Task convert_labels(Task task) {
  std::map<Label, Label> relative;
  task.provenance.clear();
  for (std::size_t e = 0; e < task.target_classes.size(); ++e) {
    relative[task.target_classes[e]] = static_cast<Label>(e);
    task.provenance[static_cast<Label>(e)] = task.target_classes[e];
  }
  auto convert = [&](std::vector<Document>& docs, std::vector<std::vector<bool>>& masks) {
    masks.clear();
    for (auto& doc : docs) {
      std::vector<bool> mask(doc.labels.size(), false);
      for (std::size_t p = 0; p < doc.labels.size(); ++p) {
        Label& l = doc.labels[p];
        if (l == kMasked) {
          mask[p] = true;
        } else if (auto it = relative.find(l); it != relative.end()) {
          l = it->second;
        } else {
          l = kOutside;
        }
      }
      masks.push_back(std::move(mask));
    }
  };
  convert(task.support, task.support_mask);
  convert(task.query, task.query_mask);
  return task;
}

std::vector<Label> restore_labels(const Task& task, std::span<const Label> relative) {
  std::vector<Label> out(relative.begin(), relative.end());
  for (auto& l : out) {
    if (l >= 0) l = task.provenance.at(l);
  }
  return out;
}

EpisodeDataset sample_meta_dataset(const Corpus& corpus, const ClassSplit& split, const TaskSpec& spec,
                                   std::size_t n_tasks, std::size_t retry_budget, std::size_t threads) {
  if (n_tasks < 1) throw Error(Errc::config_error, "n_tasks must be at least 1");
  validate_task_spec(spec);
  const TaskSampler sampler(corpus, split);
  EpisodeDataset dataset;
  dataset.spec = spec;
  dataset.split = split;
  dataset.tasks.resize(n_tasks);
  parallel_for(n_tasks, threads, [&](std::size_t i) {
    const std::uint64_t base = spec.seed + i;
    for (std::size_t attempt = 0; attempt <= retry_budget; ++attempt) {
      TaskSpec s = spec;
      s.seed = attempt == 0 ? base : derive_seed(base, attempt);
      try {
        dataset.tasks[i] = sampler.sample(s);
        return;
      } catch (const Error& e) {
        if (e.code() != Errc::task_infeasible) throw;
      }
    }
    throw Error(Errc::dataset_infeasible, "task " + std::to_string(i) + " stayed infeasible after " +
                                              std::to_string(retry_budget) + " retries");
  });
  return dataset;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json spec_to_json(const TaskSpec& s) {
  return {{"n_way", s.n_way}, {"k_shot", s.k_shot}, {"k_query", s.k_query}, {"rho", s.rho},
          {"seed", s.seed},   {"phase", phase_name(s.phase)}, {"max_docs", s.max_docs}};
}

TaskSpec spec_from_json(const json& j) {
  TaskSpec s;
  s.n_way = detail::require<std::size_t>(j, "n_way", "task spec");
  s.k_shot = detail::require<std::size_t>(j, "k_shot", "task spec");
  s.k_query = detail::require<std::size_t>(j, "k_query", "task spec");
  s.rho = detail::require<double>(j, "rho", "task spec");
  s.seed = detail::require<std::uint64_t>(j, "seed", "task spec");
  s.phase = parse_phase(detail::require<std::string>(j, "phase", "task spec"));
  s.max_docs = j.value("max_docs", std::size_t{32});
  return s;
}

json split_json(const ClassSplit& s) {
  return {{"gamma", s.gamma},
          {"u_threshold", s.u_threshold},
          {"base_classes", s.base_classes},
          {"novel_classes", s.novel_classes},
          {"warnings", s.warnings}};
}

ClassSplit split_from(const json& j) {
  ClassSplit s;
  s.gamma = detail::require<double>(j, "gamma", "class split");
  s.u_threshold = detail::require<std::size_t>(j, "u_threshold", "class split");
  s.base_classes = detail::require<std::vector<Label>>(j, "base_classes", "class split");
  s.novel_classes = detail::require<std::vector<Label>>(j, "novel_classes", "class split");
  s.warnings = j.value("warnings", std::vector<std::string>{});
  return s;
}

}  // namespace

std::string split_to_json(const ClassSplit& split) { return split_json(split).dump(2) + "\n"; }

ClassSplit split_from_json(std::string_view text) { return split_from(detail::parse_json(text, "class split")); }

void save_split(const ClassSplit& split, const std::filesystem::path& path) {
  write_file_atomic(path, split_to_json(split));
}

ClassSplit load_split(const std::filesystem::path& path) { return split_from_json(read_file(path)); }

std::string task_to_json(const Task& task) {
  const auto n_way = static_cast<std::int64_t>(task.n_way());
  const auto encode = [n_way](Label l) -> std::int64_t {
    if (l == kMasked) return -1;
    if (l == kOutside) return n_way;
    return l;
  };
  json support = json::array(), query = json::array(), mask = json::array();
  for (const auto& d : task.support) support.push_back(detail::document_to_json(d, encode));
  for (const auto& d : task.query) query.push_back(detail::document_to_json(d, encode));
  for (const auto& m : task.support_mask) mask.push_back(m);
  for (const auto& m : task.query_mask) mask.push_back(m);
  json provenance = json::object();
  for (const auto& [rel, orig] : task.provenance) provenance[std::to_string(rel)] = orig;
  json j = {{"schema_version", kTaskSchemaVersion},
            {"n_way", task.n_way()},
            {"target_classes", task.target_classes},
            {"provenance", std::move(provenance)},
            {"support", std::move(support)},
            {"query", std::move(query)},
            {"mask", std::move(mask)}};
  return j.dump() + "\n";
}

Task task_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "task");
  Task task;
  task.target_classes = detail::require<std::vector<Label>>(j, "target_classes", "task");
  const auto n_way = static_cast<std::int64_t>(task.target_classes.size());
  const auto decode = [n_way](std::int64_t raw) -> Label {
    if (raw == -1) return kMasked;
    if (raw == n_way) return kOutside;
    if (raw < 0 || raw > n_way) throw Error(Errc::schema_error, "task: label " + std::to_string(raw) + " out of range");
    return static_cast<Label>(raw);
  };
  for (const auto& d : detail::require<json>(j, "support", "task")) {
    task.support.push_back(detail::document_from_json(d, decode));
  }
  for (const auto& d : detail::require<json>(j, "query", "task")) {
    task.query.push_back(detail::document_from_json(d, decode));
  }
  const auto masks = detail::require<std::vector<std::vector<bool>>>(j, "mask", "task");
  if (masks.size() != task.support.size() + task.query.size()) {
    throw Error(Errc::schema_error, "task: one mask per document required");
  }
  task.support_mask.assign(masks.begin(), masks.begin() + static_cast<std::ptrdiff_t>(task.support.size()));
  task.query_mask.assign(masks.begin() + static_cast<std::ptrdiff_t>(task.support.size()), masks.end());
  auto check = [](const std::vector<Document>& docs, const std::vector<std::vector<bool>>& ms) {
    for (std::size_t d = 0; d < docs.size(); ++d) {
      if (ms[d].size() != docs[d].labels.size()) throw Error(Errc::schema_error, "task: mask length mismatch");
      for (std::size_t p = 0; p < ms[d].size(); ++p) {
        if (ms[d][p] != (docs[d].labels[p] == kMasked)) {
          throw Error(Errc::schema_error, "task: mask disagrees with masked labels");
        }
      }
    }
  };
  check(task.support, task.support_mask);
  check(task.query, task.query_mask);
  const json provenance = detail::require<json>(j, "provenance", "task");
  for (const auto& [key, value] : provenance.items()) {
    task.provenance[static_cast<Label>(std::stol(key))] = value.get<Label>();
  }
  return task;
}

void save_episode_dataset(const EpisodeDataset& dataset, const std::filesystem::path& dir) {
  json files = json::array();
  for (std::size_t i = 0; i < dataset.tasks.size(); ++i) {
    char name[48];
    std::snprintf(name, sizeof(name), "tasks/task_%05zu.json", i);
    write_file_atomic(dir / name, task_to_json(dataset.tasks[i]));
    files.push_back(name);
  }
  json manifest = {{"schema_version", kTaskSchemaVersion},
                   {"spec", spec_to_json(dataset.spec)},
                   {"split", split_json(dataset.split)},
                   {"tasks", std::move(files)}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

EpisodeDataset load_episode_dataset(const std::filesystem::path& dir) {
  const json manifest = detail::parse_json(read_file(dir / "manifest.json"), "manifest");
  EpisodeDataset dataset;
  dataset.spec = spec_from_json(detail::require<json>(manifest, "spec", "manifest"));
  dataset.split = split_from(detail::require<json>(manifest, "split", "manifest"));
  for (const auto& name : detail::require<std::vector<std::string>>(manifest, "tasks", "manifest")) {
    dataset.tasks.push_back(task_from_json(read_file(dir / name)));
  }
  return dataset;
}

}  // namespace entmeta
