#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "fedattn/fedattn.h"

namespace {

const char* kModelJson = R"({"d":8,"d_ff":16,"M":4,"vocab":32,"seed":11})";
const char* kCorpusJson = R"({"shots":2,"unit_len_min":5,"unit_len_max":5,"vocab":32,"seed":4})";

}  // namespace

TEST_CASE("c api: version and error reporting") {
    CHECK(std::string(fa_version()).rfind("fedattn", 0) == 0);
    fa_model* model = nullptr;
    CHECK(fa_model_create("{not json", &model) == FA_ERR_CONFIG);
    CHECK(std::string(fa_last_error()).find("JSON") != std::string::npos);
}

TEST_CASE("c api: model round trip through the fixture format") {
    fa_model* model = nullptr;
    REQUIRE(fa_model_create(kModelJson, &model) == FA_OK);
    const auto path = std::filesystem::temp_directory_path() / "fedattn_capi_weights.bin";
    REQUIRE(fa_model_save(model, path.string().c_str()) == FA_OK);
    fa_model* loaded = nullptr;
    REQUIRE(fa_model_load(path.string().c_str(), &loaded) == FA_OK);
    fa_model_free(model);
    fa_model_free(loaded);
    std::filesystem::remove(path);

    fa_model* missing = nullptr;
    CHECK(fa_model_load("/nonexistent/path.bin", &missing) == FA_ERR_IO);
}

TEST_CASE("c api: corpus, partition and run") {
    fa_corpus* corpus = nullptr;
    REQUIRE(fa_corpus_generate(kCorpusJson, &corpus) == FA_OK);
    int64_t length = 0;
    REQUIRE(fa_corpus_length(corpus, &length) == FA_OK);
    CHECK(length == 15);

    fa_partition* partition = nullptr;
    REQUIRE(fa_partition_create(corpus, 3, "tokseg_qag", 0, &partition) == FA_OK);

    char json_buf[4096];
    size_t needed = 0;
    REQUIRE(fa_partition_to_json(partition, json_buf, sizeof(json_buf), &needed) == FA_OK);
    CHECK(needed <= sizeof(json_buf));
    fa_partition* reparsed = nullptr;
    REQUIRE(fa_partition_from_json(json_buf, &reparsed) == FA_OK);
    fa_partition_free(reparsed);

    fa_model* model = nullptr;
    REQUIRE(fa_model_create(kModelJson, &model) == FA_OK);

    fa_trace* trace = nullptr;
    REQUIRE(fa_run(model, corpus, partition, R"({"H":2,"seed":5})", &trace) == FA_OK);

    char summary[8192];
    REQUIRE(fa_trace_summary_json(trace, summary, sizeof(summary), &needed) == FA_OK);
    const auto j = nlohmann::json::parse(summary);
    CHECK(j["N"] == 3);
    CHECK(j["rounds"] == 2);

    double deviation = -1.0;
    REQUIRE(fa_trace_final_deviation(trace, model, &deviation) == FA_OK);
    CHECK(deviation >= 0.0);

    int tokens[8];
    size_t count = 0;
    REQUIRE(fa_decode_greedy(trace, model, 8, tokens, 8, &count) == FA_OK);
    CHECK(count == 8);

    const auto msg_path = std::filesystem::temp_directory_path() / "fedattn_capi_msgs.bin";
    REQUIRE(fa_trace_dump_messages(trace, msg_path.string().c_str()) == FA_OK);
    CHECK(std::filesystem::file_size(msg_path) > 0);
    std::filesystem::remove(msg_path);

    fa_trace_free(trace);
    fa_model_free(model);
    fa_partition_free(partition);
    fa_corpus_free(corpus);
}

TEST_CASE("c api: H=1 run has zero deviation from the reference") {
    fa_corpus* corpus = nullptr;
    REQUIRE(fa_corpus_generate(kCorpusJson, &corpus) == FA_OK);
    fa_partition* partition = nullptr;
    REQUIRE(fa_partition_create(corpus, 2, "semseg_qex", 0, &partition) == FA_OK);
    fa_model* model = nullptr;
    REQUIRE(fa_model_create(kModelJson, &model) == FA_OK);
    fa_trace* trace = nullptr;
    REQUIRE(fa_run(model, corpus, partition, R"({"H":1})", &trace) == FA_OK);
    double deviation = -1.0;
    REQUIRE(fa_trace_final_deviation(trace, model, &deviation) == FA_OK);
    CHECK(deviation <= 1e-9);
    fa_trace_free(trace);
    fa_model_free(model);
    fa_partition_free(partition);
    fa_corpus_free(corpus);
}

TEST_CASE("c api: experiment driver writes CSVs and maps config errors") {
    const auto dir = std::filesystem::temp_directory_path() / "fedattn_capi_exp";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const auto spec_path = dir / "spec.json";
    {
        std::ofstream os(spec_path);
        os << R"({
            "model": {"d": 8, "d_ff": 16, "M": 4, "vocab": 32},
            "corpus": {"shots": 2, "unit_len_min": 5, "unit_len_max": 5},
            "strategies": ["tokseg_qag"],
            "sweep": {"H": [1, 2], "N": [2]},
            "max_new": 2,
            "seeds": [1]
        })";
    }
    REQUIRE(fa_run_experiment(spec_path.string().c_str(), (dir / "out").string().c_str(),
                              "1,2", 2) == FA_OK);
    CHECK(std::filesystem::exists(dir / "out" / "results.csv"));
    CHECK(std::filesystem::exists(dir / "out" / "summary.csv"));
    REQUIRE(fa_emit_bounds(spec_path.string().c_str(), (dir / "out").string().c_str(), nullptr,
                           1) == FA_OK);
    CHECK(std::filesystem::exists(dir / "out" / "bounds.csv"));

    CHECK(fa_run_experiment("/nonexistent/spec.json", nullptr, nullptr, 1) == FA_ERR_CONFIG);
    std::filesystem::remove_all(dir);
}

TEST_CASE("c api: marginal communication constants") {
    double reduction = 0.0, error_level = 0.0;
    REQUIRE(fa_marginal_comm(1, &reduction, &error_level) == FA_OK);
    CHECK(reduction == 0.5);
    CHECK(error_level == 0.5);
    CHECK(fa_marginal_comm(0, &reduction, &error_level) == FA_ERR_CONFIG);
}
