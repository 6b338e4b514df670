#include <benchmark/benchmark.h>

#include <random>

#include "entmeta/encoder.hpp"
#include "entmeta/eval.hpp"
#include "entmeta/losses.hpp"
#include "entmeta/metric.hpp"
#include "entmeta/sampler.hpp"

using namespace entmeta;

namespace {

const Corpus& corpus() {
  static const Corpus c = generate_synthetic_corpus(SyntheticConfig{});
  return c;
}

const ClassSplit& split() {
  static const ClassSplit s = split_classes(corpus(), 0.5, 20, 1);
  return s;
}

const Task& task() {
  static const Task t = sample_meta_dataset(corpus(), split(), TaskSpec{}, 1).tasks.front();
  return t;
}

EncoderArch arch(std::size_t depth, std::size_t dim) {
  EncoderArch a;
  a.vocab_size = SyntheticConfig{}.vocab_size();
  a.input_dim = a.hidden_dim = a.output_dim = dim;
  a.depth = depth;
  return a;
}

void BM_EncoderForward(benchmark::State& st) {
  const auto p = init_params(arch(static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1))), 1);
  const auto& doc = task().support.front();
  for (auto _ : st) benchmark::DoNotOptimize(encode_document(p, doc));
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(doc.tokens.size()));
}
BENCHMARK(BM_EncoderForward)->Args({2, 32})->Args({2, 64})->Args({4, 64});

void BM_EncoderBackward(benchmark::State& st) {
  const auto p = init_params(arch(static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1))), 1);
  const auto& doc = task().support.front();
  RowMatrix up = RowMatrix::Ones(static_cast<Eigen::Index>(doc.tokens.size()), static_cast<Eigen::Index>(st.range(1)));
  for (auto _ : st) benchmark::DoNotOptimize(backward(p, doc, up));
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(doc.tokens.size()));
}
BENCHMARK(BM_EncoderBackward)->Args({2, 32})->Args({2, 64})->Args({4, 64});

void BM_McOnLoss(benchmark::State& st) {
  const auto p = init_params(arch(2, static_cast<std::size_t>(st.range(0))), 1);
  const auto emb = encode_task(p, task());
  const auto stats = compute_prototypes(emb, task());
  for (auto _ : st) benchmark::DoNotOptimize(mcon_loss(emb, stats, task()));
}
BENCHMARK(BM_McOnLoss)->Arg(16)->Arg(64);

void BM_XdrSample(benchmark::State& st) {
  TaskSpec spec;
  std::uint64_t seed = 0;
  for (auto _ : st) {
    spec.seed = ++seed;
    benchmark::DoNotOptimize(sample_meta_dataset(corpus(), split(), spec, 1));
  }
}
BENCHMARK(BM_XdrSample);

void BM_Auroc(benchmark::State& st) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto n = static_cast<std::size_t>(st.range(0));
  std::vector<double> s(n);
  std::vector<char> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = u(rng) < 0.5;
    s[i] = u(rng) + (y[i] ? 0.2 : 0.0);
  }
  y[0] = 1;
  y[1] = 0;
  for (auto _ : st) benchmark::DoNotOptimize(auroc(s, y));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_Auroc)->Arg(1 << 10)->Arg(1 << 16);

}  // namespace
BENCHMARK_MAIN();
