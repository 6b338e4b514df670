#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>

#include <sys/wait.h>

#include "entmeta/checkpoint.hpp"
#include "entmeta/error.hpp"
#include "entmeta/io.hpp"
#include "entmeta/pipeline.hpp"

using namespace entmeta;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(const fs::path& out, Method m = Method::anil_hc) {
  RunConfig c;
  c.synthetic.n_documents = 120;
  c.gamma = 0.5;
  c.n_train_tasks = 6;
  c.n_test_tasks = 4;
  c.meta_steps = 4;
  c.meta_batch = 2;
  c.inner.steps = 3;
  c.arch.input_dim = c.arch.hidden_dim = 12;
  c.arch.output_dim = 8;
  c.method = m;
  c.output_dir = out;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("entmeta_" + name);
  fs::remove_all(p);
  return p;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no entmeta::Error thrown";
  return Errc::io_error;
}

}  // namespace

TEST(RunConfig, JsonRoundTrip) {
  auto c = small_config("somewhere", Method::reptile);
  c.task.rho = 2.5;
  c.federated.n_workers = 4;
  c.metric.threshold.margin = 2.0;
  c.threshold_given = true;
  const auto back = run_config_from_json(run_config_to_json(c));
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
  EXPECT_EQ(back.method, Method::reptile);
  EXPECT_EQ(back.task.rho, 2.5);
}

TEST(RunConfig, AbsentFieldsKeepBase) {
  RunConfig base;
  base.meta_steps = 17;
  const auto c = run_config_from_json(R"({"seed": 9})", base);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.meta_steps, 17u);
}

TEST(RunConfig, UnknownKeyRejected) {
  EXPECT_EQ(code_of([] { run_config_from_json(R"({"sed": 9})"); }), Errc::config_error);
}

TEST(RunConfig, Validation) {
  auto c = small_config("x");
  EXPECT_NO_THROW(validate_run_config(c));
  c.task.rho = 0.5;
  EXPECT_EQ(code_of([&] { validate_run_config(c); }), Errc::config_error);
  c = small_config("x");
  c.gamma = 1.0;
  EXPECT_EQ(code_of([&] { validate_run_config(c); }), Errc::config_error);
  c = small_config("x", Method::anil);
  c.threshold_given = true;  // threshold settings belong to contrastproto only
  EXPECT_EQ(code_of([&] { validate_run_config(c); }), Errc::config_error);
}

TEST(Seeds, StagesAreDistinctAndFollowTheRunSeed) {
  RunConfig c;
  std::set<std::uint64_t> seen;
  for (auto s : {Stage::corpus, Stage::split, Stage::train_tasks, Stage::test_tasks, Stage::init, Stage::batch_order,
                 Stage::partition})
    seen.insert(stage_seed(c, s));
  EXPECT_EQ(seen.size(), 7u);
  auto d = c;
  d.seed = c.seed + 1;
  EXPECT_NE(stage_seed(c, Stage::init), stage_seed(d, Stage::init));
}

TEST(Checkpoint, BytesRoundTrip) {
  EncoderArch a;
  a.vocab_size = 30;
  const auto p = init_meta_params(a, 4, 2);
  const CheckpointInfo info{42, "anil_hc", 300};
  const auto bytes = checkpoint_to_bytes(p, info);
  const auto back = checkpoint_from_bytes(bytes);
  EXPECT_EQ(back.params, p);
  EXPECT_EQ(back.info, info);
  EXPECT_EQ(checkpoint_to_bytes(back.params, back.info), bytes);
}

TEST(Checkpoint, RoundTripPreservesForward) {
  EncoderArch a;
  a.vocab_size = 30;
  const auto p = init_meta_params(a, 4, 2);
  const auto path = scratch("ckpt.bin");
  save_checkpoint(path, p, {1, "contrastproto", 0});
  const auto back = load_checkpoint(path);
  Document d;
  d.doc_id = "x";
  for (std::uint32_t i = 0; i < 9; ++i) {
    d.tokens.push_back({i * 3, i, {0.1, 0.1 * i, 0.2, 0.1 * i + 0.05}});
    d.labels.push_back(kOutside);
  }
  EXPECT_EQ(encode_document(back.params.encoder, d), encode_document(p.encoder, d));
  fs::remove(path);
}

TEST(Checkpoint, TruncatedFileRejected) {
  EncoderArch a;
  a.vocab_size = 30;
  const auto bytes = checkpoint_to_bytes(init_meta_params(a, 4, 2), {});
  EXPECT_THROW(checkpoint_from_bytes(bytes.substr(0, bytes.size() - 8)), Error);
}

TEST(Pipeline, StagesReplayFromFiles) {
  const auto dir = scratch("stages");
  auto c = small_config(dir);
  cmd_gen_corpus(c);
  cmd_split(c);
  cmd_sample_tasks(c);
  cmd_meta_train(c);
  cmd_meta_test(c);
  const RunPaths paths{dir};
  for (const auto& f : {paths.config(), paths.corpus(), paths.split(), paths.checkpoint(), paths.train_log(),
                        paths.metrics(), paths.embeddings()})
    EXPECT_TRUE(fs::exists(f)) << f;
  const auto report = cmd_report(c);
  EXPECT_NE(report.find("F1"), std::string::npos);
  const auto first = read_file(paths.metrics());
  cmd_meta_test(c);
  EXPECT_EQ(read_file(paths.metrics()), first);
  fs::remove_all(dir);
}

TEST(Pipeline, SameSeedSameArtifacts) {
  for (auto m : {Method::contrastproto, Method::reptile_hc}) {
    const auto a = scratch("det_a"), b = scratch("det_b");
    auto ca = small_config(a, m), cb = small_config(b, m);
    cmd_run(ca);
    cb.threads = 2;
    cmd_run(cb);
    const RunPaths pa{a}, pb{b};
    EXPECT_EQ(read_file(pa.checkpoint()), read_file(pb.checkpoint()));
    EXPECT_EQ(read_file(pa.metrics()), read_file(pb.metrics()));
    EXPECT_EQ(read_file(pa.test_tasks() / "tasks" / "task_00000.json"),
              read_file(pb.test_tasks() / "tasks" / "task_00000.json"));
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(Pipeline, MissingInputIsIoError) {
  auto c = small_config(scratch("missing"));
  EXPECT_EQ(code_of([&] { cmd_meta_test(c); }), Errc::io_error);
}

#ifdef ENTMETA_CLI
namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ENTMETA_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, RhoBelowOneIsConfigError) { EXPECT_EQ(run_cli("sample-tasks --rho 0.5 -o " + scratch("cli_rho").string()), 2); }

TEST(Cli, AcceptsInnerLoopFlags) {
  const auto dir = scratch("cli_flags");
  EXPECT_EQ(run_cli("run --method anil --n-way 4 --k-shot 4 --inner-steps 15 --inner-lr 0.015 --meta-steps 1 "
                    "--train-tasks 2 --test-tasks 1 --gamma 0.5 -q -o " +
                    dir.string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "metrics.json"));
  fs::remove_all(dir);
}

TEST(Cli, LaterStagesInheritEarlierFlags) {
  const auto dir = scratch("cli_stages").string();
  EXPECT_EQ(run_cli("gen-corpus -o " + dir), 0);
  EXPECT_EQ(run_cli("split --gamma 0.5 -o " + dir), 0);
  EXPECT_EQ(run_cli("sample-tasks --train-tasks 4 --test-tasks 2 -o " + dir), 0);
  EXPECT_EQ(run_cli("meta-train --method anil_hc --meta-steps 1 -q -o " + dir), 0);
  EXPECT_EQ(run_cli("meta-test -o " + dir), 0);
  EXPECT_EQ(run_config_from_json(read_file(RunPaths{dir}.config())).method, Method::anil_hc);
  fs::remove_all(dir);
}

TEST(Cli, VersionAndUnknownMethod) {
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli("split --method maml -o " + scratch("cli_m").string()), 2);
}
#endif
