#include "support.hpp"

#include "d2l/checkpoint.hpp"
#include "d2l/harness.hpp"

#include <filesystem>
#include <fstream>
#include <thread>

using namespace d2l;
using namespace d2l::test;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("d2l_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ExperimentConfig micro_experiment(const fs::path& dir) {
    ExperimentConfig c;
    c.name = "micro";
    c.run_dir = dir.string();
    c.lm = micro_lm();
    c.hypernet = micro_hypernet();
    c.pretrain.steps = 6;
    c.pretrain.corpus_size = 30;
    c.pretrain.batch_tokens = 400;
    c.pretrain.max_len = 64;
    c.pretrain.extend_steps = 2;
    c.pretrain.extend_corpus_size = 10;
    c.pretrain.extend_batch_tokens = 300;
    c.pretrain.extend_max_len = 128;
    c.data.n_contexts = 12;
    c.data.max_len = 64;
    c.data.max_new = 4;
    c.schedule.stage1_steps = 3;
    c.schedule.stage2_steps = 3;
    c.schedule.batch_context_tokens = 200;
    c.schedule.max_batch_contexts = 4;
    c.eval.lengths = {40, 96};
    c.eval.n_per_length = 2;
    c.eval.cd_n_per_length = 1;
    c.eval.cd_max_length = 40;
    c.eval.cd_steps = 3;
    c.eval.n_generated_queries = 2;
    c.eval.methods = {"in_context", "hypernet-batched", "hypernet-iterative", "cd-oracle", "cd-generated-q"};
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config json round trip through the strict parser") {
    ExperimentConfig c = micro_experiment("/tmp/x");
    c.loss = "ntp";
    const nlohmann::json j = c;
    const ExperimentConfig back = parse_experiment(j);
    CHECK(nlohmann::json(back) == j);
    CHECK(parse_experiment(nlohmann::json::object()).name == "default");
}

TEST_CASE("invalid configs list every offending field") {
    nlohmann::json j = nlohmann::json(ExperimentConfig{});
    j["schedule"]["lr"] = "fast";
    j["hypernet"]["bogus"] = 1;
    j["loss"] = "mse";
    try {
        (void)parse_experiment(j);
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        const std::string m = e.what();
        CHECK(m.find("schedule.lr") != std::string::npos);
        CHECK(m.find("hypernet.bogus") != std::string::npos);
    }
    nlohmann::json k = nlohmann::json(ExperimentConfig{});
    k["loss"] = "mse";
    k["eval"]["methods"] = {"in_context", "telepathy"};
    k["data"]["needle_digits"] = 0;
    try {
        (void)parse_experiment(k);
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        const std::string m = e.what();
        CHECK(m.find("loss") != std::string::npos);
        CHECK(m.find("telepathy") != std::string::npos);
        CHECK(m.find("data.needle_digits") != std::string::npos);
    }
}

TEST_CASE("dotted overrides") {
    nlohmann::json j = nlohmann::json::object();
    apply_override(j, "schedule.lr=5e-4");
    apply_override(j, "name=abc");
    apply_override(j, "eval.lengths=[32,64]");
    apply_override(j, "hypernet.latent_self_attention=true");
    const ExperimentConfig c = parse_experiment(j);
    CHECK(c.schedule.lr == doctest::Approx(5e-4f));
    CHECK(c.name == "abc");
    CHECK(c.eval.lengths == std::vector<int>{32, 64});
    CHECK(c.hypernet.latent_self_attention);
    CHECK_THROWS_AS(apply_override(j, "novalue"), ConfigError);
}

TEST_CASE("run directory resolution") {
    ExperimentConfig c;
    c.name = "exp";
    c.run_dir = "/tmp/explicit";
    CHECK(resolve_run_dir(c) == "/tmp/explicit");
    c.run_dir.clear();
    ::setenv("D2L_RUN_DIR", "/tmp/root", 1);
    CHECK(resolve_run_dir(c) == "/tmp/root/exp");
    ::unsetenv("D2L_RUN_DIR");
    CHECK(resolve_run_dir(c) == "runs/exp");
    CHECK(teacher_path(c) == "runs/exp/teacher.d2lt");
}

TEST_CASE("latency measurement excludes warm-up and reports sample std") {
    int calls = 0;
    const LatencyStats one = measure_update_latency([&] { ++calls; }, 1);
    CHECK(calls == 2);
    CHECK(one.std_ms == 0.0);
    CHECK(one.n == 1);
    int k = 0;
    const LatencyStats s = measure_update_latency(
        [&] {
            if (k++ == 0) std::this_thread::sleep_for(std::chrono::milliseconds(50));
        },
        5);
    CHECK(s.mean_ms < 25.0);
    CHECK(s.n == 5);
    CHECK_THROWS(measure_update_latency([] {}, 0));
}

TEST_CASE("metrics csv is versioned and round trips") {
    std::vector<MetricsRow> rows{{"in_context", 64, 50, 0.98, 0.0, 0.0, 0, 12345, false},
                                 {"hypernet-batched", 8192, 50, 0.5, 12.5, 0.25, 999, 100, false}};
    const std::string csv = metrics_csv(rows);
    CHECK(csv.rfind("schema_version,1\n", 0) == 0);
    const auto back = parse_metrics_csv(csv);
    REQUIRE(back.size() == 2u);
    CHECK(back[1].method == "hypernet-batched");
    CHECK(back[1].length == 8192);
    CHECK(back[1].latency_ms_std == doctest::Approx(0.25));
    std::string old = csv;
    old.replace(0, 16, "schema_version,0");
    CHECK_THROWS_AS(parse_metrics_csv(old), FormatError);
    CHECK(metrics_json(rows)["schema_version"] == 1);
}

TEST_CASE("footprint accounting: internalized constant, in-context linear") {
    const LMConfig c;
    const std::uint64_t q = 60;
    CHECK(internalized_footprint(c, 0, q, 6) == internalized_footprint(c, 0, q, 6));
    CHECK(icl_footprint(c, 2000, q, 6) - icl_footprint(c, 1000, q, 6) == icl_footprint(c, 1000, q, 6) - icl_footprint(c, 0, q, 6));
    CHECK(icl_footprint(c, 1000, q, 6) > internalized_footprint(c, 0, q, 6));
    const HypernetParams hp = init_hypernet(HypernetConfig{}, c, 1);
    CHECK(hypernet_update_memory(hp, 4096) > hypernet_update_memory(hp, 256));
    CHECK(cd_update_memory(c, CdOptions{}, 80) > 0);
}

TEST_CASE("sample json round trip") {
    const TinyLMParams lm = random_lm(micro_lm(), 1);
    Rng rng(1);
    const NiahInstance inst = gen_niah_sample(rng, 50, 4);
    const DistillSample s = make_sample(lm, inst.haystack, inst.query, inst.answer);
    const DistillSample back = sample_from_json(sample_to_json(s, {{"k", 1}}));
    CHECK(back.context == s.context);
    CHECK(back.response == s.response);
    REQUIRE(back.targets.positions.size() == s.targets.positions.size());
    CHECK(back.targets.positions[0].tokens == s.targets.positions[0].tokens);
    CHECK(back.targets.positions[0].logits == s.targets.positions[0].logits);
    CHECK_THROWS_AS(sample_from_json(nlohmann::json{{"context", "x"}}), FormatError);
}

TEST_CASE("tensor container header and corruption") {
    TensorFile f;
    f.metadata = {{"kind", "test"}};
    f.tensors.push_back({"w", Matrix::Constant(2, 3, 1.5f)});
    f.tensors.push_back({"b", Matrix::Constant(1, 3, -2.0f)});
    const auto bytes = encode_tensor_file(f);
    std::uint64_t hl = 0;
    for (int i = 0; i < 8; ++i) hl |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i)]) << (8 * i);
    const auto header = nlohmann::json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(hl)));
    CHECK(header["__metadata__"]["kind"] == "test");
    CHECK(header["w"]["dtype"] == "F32");
    CHECK(header["w"]["shape"] == nlohmann::json::array({2, 3}));
    CHECK(header["b"]["data_offsets"] == nlohmann::json::array({24, 36}));
    CHECK(bytes.size() == 8 + hl + 36);
    const TensorFile back = decode_tensor_file(bytes);
    CHECK(back.at("w") == f.tensors[0].second);
    auto cut = bytes;
    cut.resize(cut.size() - 4);
    CHECK_THROWS_AS(decode_tensor_file(cut), FormatError);
}

TEST_CASE("model checkpoints verify their checksum") {
    const TinyLMParams lm = random_lm(micro_lm(), 2);
    const auto path = (fs::temp_directory_path() / "d2l_test_lm.d2lt").string();
    save_lm(path, lm);
    CHECK(load_lm(path) == lm);
    auto bytes = read_file(path);
    bytes[bytes.size() - 3] ^= 0x40;
    write_file_atomic(path, bytes);
    CHECK_THROWS_AS(load_lm(path), FormatError);
    fs::remove(path);
    CHECK_THROWS(load_lm(path));
}

TEST_CASE("pipeline commands on a micro experiment") {
    const fs::path dir = fresh_dir("pipeline");
    ExperimentConfig c = micro_experiment(dir);
    CommandContext quiet;
    quiet.log = [](const std::string&) {};

    CHECK_THROWS_WITH_AS(cmd_gen_data(c, quiet), doctest::Contains("missing teacher"), Error);
    CHECK(fs::exists(dir / "config.json"));
    CHECK(parse_experiment(nlohmann::json::parse(slurp(dir / "config.json"))).name == "micro");

    const PretrainResult pre = cmd_pretrain_lm(c, quiet);
    CHECK(fs::exists(teacher_path(c)));
    CHECK(load_lm(teacher_path(c)).checksum() == pre.params.checksum());
    const auto log = slurp(dir / "pretrain_log.jsonl");
    CHECK(std::count(log.begin(), log.end(), '\n') == c.pretrain.steps + c.pretrain.extend_steps);
    CHECK(log.find("\"stage\":\"extend\"") != std::string::npos);

    const GenDataResult g1 = cmd_gen_data(c, quiet);
    const auto manifest = nlohmann::json::parse(slurp(fs::path(data_path(c)).parent_path() / "manifest.json"));
    CHECK(manifest["count"] == g1.count);
    CHECK(manifest["seed"] == c.data.seed);
    const GenDataResult g2 = cmd_gen_data(c, quiet);
    CHECK(g1.file_hash == g2.file_hash);
    // Stored top-k logits agree with a fresh teacher forward.
    const MetaDataset ds = read_meta_dataset(data_path(c));
    for (const auto& mc : ds.contexts) {
        const DistillSample& s = mc.samples[0];
        std::vector<int> seq = teacher_prompt(Tokenizer::instance().decode(s.context), Tokenizer::instance().decode(s.query));
        const int first = static_cast<int>(seq.size()) - 1;
        seq.insert(seq.end(), s.response.begin(), s.response.end() - 1);
        const Matrix lg = forward_with_activations(pre.params, seq).logits;
        const auto fresh = topk_targets(lg.middleRows(first, static_cast<Eigen::Index>(s.response.size())), c.data.topk);
        for (std::size_t p = 0; p < fresh.positions.size(); ++p) {
            CHECK(fresh.positions[p].tokens == s.targets.positions[p].tokens);
            for (std::size_t q = 0; q < fresh.positions[p].logits.size(); ++q) {
                CHECK(std::abs(fresh.positions[p].logits[q] - s.targets.positions[p].logits[q]) < 1e-4f);
            }
        }
    }

    // An interrupted run leaves a checkpoint and resumes to the same result.
    std::atomic<bool> stop{true};
    CommandContext interrupted = quiet;
    interrupted.interrupt = &stop;
    const MetaTrainRun cut = cmd_meta_train(c, interrupted);
    CHECK(cut.interrupted);
    CHECK(fs::exists(dir / "hypernet.ckpt"));
    const MetaTrainRun full = cmd_meta_train(c, quiet);
    CHECK_FALSE(full.interrupted);
    CHECK(full.steps_done == 6);
    CHECK(fs::exists(hypernet_path(c)));
    CHECK_FALSE(fs::exists(dir / "hypernet.ckpt"));
    const auto mlog = slurp(dir / "meta_train_log.jsonl");
    CHECK(mlog.find("\"stage\":2") != std::string::npos);

    const auto rows = cmd_eval(c, quiet);
    // in_context + two hypernet modes at two lengths, plus CD at one length.
    CHECK(rows.size() == 2 * 3 + 2);
    for (const auto& r : rows) {
        CHECK(r.n > 0);
        if (r.method.rfind("hypernet", 0) == 0) CHECK(r.latency_ms_mean > 0.0);
    }
    CHECK(fs::exists(dir / "metrics.csv"));
    CHECK(fs::exists(dir / "metrics.json"));

    const fs::path out = fresh_dir("report");
    const auto merged = cmd_report({dir.string()}, out.string());
    CHECK(merged.size() == rows.size());
    CHECK(merged[0].method.rfind("micro/", 0) == 0);
    CHECK(fs::exists(out / "accuracy_vs_length.csv"));
    CHECK(fs::exists(out / "latency_memory.csv"));

    // Mixed schema versions are refused.
    const fs::path other = fresh_dir("oldrun");
    std::ofstream(other / "metrics.csv") << "schema_version,0\n";
    CHECK_THROWS_AS(cmd_report({dir.string(), other.string()}, out.string()), FormatError);
    fs::remove_all(dir);
    fs::remove_all(out);
    fs::remove_all(other);
}
