#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tivat/cli.hpp"

using namespace tivat;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "tivat_cli_tests";
    fs::create_directories(dir);
    return dir;
}

json micro_run_config(const std::string& out_dir) {
    json doc;
    doc["num_blocks"] = 1;
    doc["patch"] = 4;
    doc["stride"] = 2;
    doc["model_dim"] = 4;
    doc["ffn_dim"] = 8;
    doc["learning_rate"] = 0.005;
    doc["per_delta_t"] = 0.4;
    doc["per_delta_v"] = 0.5;
    doc["num_rq_self"] = 3;
    doc["num_rq"] = 2;
    doc["lookback"] = 8;
    doc["horizon"] = 4;
    doc["ma_kernel"] = 3;
    doc["batch_size"] = 8;
    doc["seed"] = 17;
    doc["data"] = {{"synth", {{"variates", 2},
                              {"length", 120},
                              {"lag", 2},
                              {"coupling", 0.7},
                              {"noise_std", 0.1},
                              {"seed", 5}}},
                   {"train_len", 80},
                   {"val_len", 20},
                   {"test_len", 20}};
    doc["output_dir"] = out_dir;
    return doc;
}

std::string write_config(const json& doc, const std::string& name) {
    auto path = work_dir() / name;
    std::ofstream out(path);
    out << doc.dump(2);
    return path.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli_run(args, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

}  // namespace

TEST_CASE("config parsing", "[cli]") {
    const std::string out_dir = (work_dir() / "out_parse").string();
    SECTION("missing required key is named") {
        json doc = micro_run_config(out_dir);
        doc.erase("patch");
        REQUIRE_THROWS_WITH(parse_run_config(doc), Catch::Contains("patch"));
    }
    SECTION("unknown keys rejected") {
        json doc = micro_run_config(out_dir);
        doc["patch_size"] = 4;
        REQUIRE_THROWS_WITH(parse_run_config(doc), Catch::Contains("patch_size"));
        json doc2 = micro_run_config(out_dir);
        doc2["data"]["frequency"] = "hourly";
        REQUIRE_THROWS_WITH(parse_run_config(doc2), Catch::Contains("frequency"));
    }
    SECTION("exactly one data source") {
        json doc = micro_run_config(out_dir);
        doc["data"]["csv_path"] = "also.csv";
        REQUIRE_THROWS_WITH(parse_run_config(doc), Catch::Contains("exactly one"));
        json doc2 = micro_run_config(out_dir);
        doc2["data"].erase("synth");
        REQUIRE_THROWS(parse_run_config(doc2));
    }
    SECTION("known dataset names preload hyperparameters and splits") {
        json doc;
        doc["data"] = {{"dataset_name", "ETTh1"}, {"csv_path", "etth1.csv"}};
        doc["output_dir"] = out_dir;
        RunConfig rc = parse_run_config(doc);
        CHECK(rc.model.num_blocks == 2);
        CHECK(rc.model.patch_len == 8);
        CHECK(rc.model.stride == 4);
        CHECK(rc.model.model_dim == 128);
        CHECK(rc.model.ffn_dim == 1024);
        CHECK(rc.model.learning_rate == Approx(1e-4));
        CHECK(rc.model.num_rq_self == 40);
        CHECK(rc.model.num_rq == 20);
        CHECK(rc.data.splits.train_len == 8545);
        CHECK(rc.data.splits.val_len == 2881);
        CHECK(rc.data.splits.test_len == 2881);
        CHECK(rc.model.lookback == 96);
        CHECK(rc.model.horizon == 96);
        SECTION("file values override the preset") {
            doc["model_dim"] = 64;
            doc["data"]["train_len"] = 500;
            RunConfig rc2 = parse_run_config(doc);
            CHECK(rc2.model.model_dim == 64);
            CHECK(rc2.data.splits.train_len == 500);
            CHECK(rc2.data.splits.val_len == 2881);
        }
    }
    SECTION("echoed config re-parses to the identical model config") {
        RunConfig rc = parse_run_config(micro_run_config(out_dir));
        json echo = run_config_to_json(rc);
        RunConfig back = parse_run_config(echo);
        CHECK(model_config_to_json(back.model) == model_config_to_json(rc.model));
        CHECK(back.output_dir == rc.output_dir);
    }
}

TEST_CASE("synth command", "[cli]") {
    const std::string out_path = (work_dir() / "synth.csv").string();
    std::string out;
    const int code = run({"synth", "--v", "3", "--len", "60", "--lag", "4", "--coupling",
                          "0.9", "--noise", "0.05", "--seed", "7", "--out", out_path},
                         &out);
    REQUIRE(code == 0);
    SeriesFrame f = load_csv(out_path);
    CHECK(f.cols() == 3);
    CHECK(f.rows() == 60);

    SECTION("same seed gives identical file bytes") {
        const std::string again = (work_dir() / "synth2.csv").string();
        REQUIRE(run({"synth", "--v", "3", "--len", "60", "--lag", "4", "--coupling", "0.9",
                     "--noise", "0.05", "--seed", "7", "--out", again}) == 0);
        CHECK(slurp(out_path) == slurp(again));
    }
    SECTION("invalid generator parameters fail with the error prefix") {
        std::string err;
        const int bad = run({"synth", "--v", "1", "--len", "60", "--lag", "4", "--out",
                             (work_dir() / "bad.csv").string()},
                            nullptr, &err);
        CHECK(bad != 0);
        CHECK(err.rfind("error:", 0) == 0);
    }
}

TEST_CASE("train, eval, export pipeline", "[cli][slow]") {
    const std::string out_dir = (work_dir() / "run1").string();
    fs::remove_all(out_dir);
    const std::string cfg_path = write_config(micro_run_config(out_dir), "train.json");

    std::string out;
    REQUIRE(run({"train", "--config", cfg_path}, &out) == 0);
    CHECK(fs::exists(out_dir + "/checkpoint.json"));
    CHECK(fs::exists(out_dir + "/history.json"));
    CHECK(fs::exists(out_dir + "/eval_val.json"));
    CHECK(fs::exists(out_dir + "/config.json"));

    SECTION("repeat run is byte-identical") {
        const std::string out_dir2 = (work_dir() / "run2").string();
        fs::remove_all(out_dir2);
        json doc = micro_run_config(out_dir2);
        const std::string cfg2 = write_config(doc, "train2.json");
        REQUIRE(run({"train", "--config", cfg2}) == 0);
        CHECK(slurp(out_dir + "/history.json") == slurp(out_dir2 + "/history.json"));
        CHECK(slurp(out_dir + "/eval_val.json") == slurp(out_dir2 + "/eval_val.json"));
    }
    SECTION("eval emits the exact report schema and is reproducible") {
        std::string text;
        REQUIRE(run({"eval", "--config", cfg_path, "--checkpoint",
                     out_dir + "/checkpoint.json"},
                    &text) == 0);
        json report = json::parse(text);
        REQUIRE(report.size() == 5);
        for (const char* key : {"mse", "mae", "horizon", "dataset", "config_fingerprint"}) {
            CHECK(report.contains(key));
        }
        std::string text2;
        REQUIRE(run({"eval", "--config", cfg_path, "--checkpoint",
                     out_dir + "/checkpoint.json"},
                    &text2) == 0);
        CHECK(text == text2);
    }
    SECTION("horizon override hits the projector shape check") {
        std::string err;
        const int code = run({"eval", "--config", cfg_path, "--checkpoint",
                              out_dir + "/checkpoint.json", "--horizon", "6"},
                             nullptr, &err);
        CHECK(code != 0);
        CHECK(err.rfind("error:", 0) == 0);
        CHECK(err.find("shape") != std::string::npos);
    }
    SECTION("embeddings export covers the token grid") {
        const std::string exp_path = (work_dir() / "emb.json").string();
        REQUIRE(run({"export", "--checkpoint", out_dir + "/checkpoint.json", "--what",
                     "embeddings", "--ref", "1,1", "--window", "0", "--out", exp_path}) == 0);
        json doc = json::parse(slurp(exp_path));
        REQUIRE(doc.contains("trend"));
        REQUIRE(doc.contains("seasonality"));
        const std::size_t patches = (8 - 4) / 2 + 1;  // lookback 8, patch 4, stride 2
        CHECK(doc["trend"].size() == patches * 2);
        bool found_ref = false;
        for (const auto& row : doc["trend"]) {
            if (row["grid"][0] == 1 && row["grid"][1] == 1) {
                CHECK(row["cosine_to_ref"].get<double>() == Approx(1.0));
                found_ref = true;
            }
        }
        CHECK(found_ref);
    }
    SECTION("guideline export keeps selection inside the pools") {
        const std::string exp_path = (work_dir() / "guide.json").string();
        REQUIRE(run({"export", "--checkpoint", out_dir + "/checkpoint.json", "--what",
                     "guidelines", "--ref", "0,1", "--out", exp_path}) == 0);
        json doc = json::parse(slurp(exp_path));
        for (const char* branch : {"trend", "seasonality"}) {
            const json& mask = doc[branch];
            CHECK(mask["reference"] == json::array({0, 1}));
            std::set<std::pair<std::size_t, std::size_t>> pool_points;
            auto as_pair = [](const json& pt) {
                return std::make_pair(pt[0].get<std::size_t>(), pt[1].get<std::size_t>());
            };
            for (const auto& pt : mask["cross_axis"]) pool_points.insert(as_pair(pt));
            for (const auto& pt : mask["self_axis"]) pool_points.insert(as_pair(pt));
            REQUIRE(!mask["selected"].empty());
            for (const auto& pt : mask["selected"]) {
                CHECK(pool_points.count(as_pair(pt)) == 1);
            }
        }
    }
    SECTION("out-of-grid reference is rejected") {
        std::string err;
        const int code = run({"export", "--checkpoint", out_dir + "/checkpoint.json",
                              "--what", "guidelines", "--ref", "99,0"},
                             nullptr, &err);
        CHECK(code != 0);
        CHECK(err.rfind("error:", 0) == 0);
    }
}

TEST_CASE("ablate command", "[cli][slow]") {
    const std::string out_dir = (work_dir() / "ablate_run").string();
    fs::remove_all(out_dir);
    json doc = micro_run_config(out_dir);
    doc["data"]["synth"]["length"] = 80;
    doc["data"]["train_len"] = 48;
    doc["data"]["val_len"] = 16;
    doc["data"]["test_len"] = 16;
    const std::string cfg_path = write_config(doc, "ablate.json");

    std::string out;
    REQUIRE(run({"ablate", "--config", cfg_path, "--axis", "offset"}, &out) == 0);
    const std::string csv = slurp(out_dir + "/ablation_offset.csv");
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 4);  // header + three variants
    CHECK(csv.rfind("variant,mse,mae", 0) == 0);
    CHECK(csv.find("guidelines_with_sampling") != std::string::npos);

    SECTION("unknown axis lists the valid ones") {
        std::string err;
        const int code = run({"ablate", "--config", cfg_path, "--axis", "nope"}, nullptr, &err);
        CHECK(code != 0);
        CHECK(err.rfind("error:", 0) == 0);
        CHECK(err.find("sampling_mode") != std::string::npos);
    }
}

TEST_CASE("cli error handling", "[cli]") {
    SECTION("missing config file") {
        std::string err;
        CHECK(run({"train", "--config", "/no/such/config.json"}, nullptr, &err) != 0);
        CHECK(err.rfind("error:", 0) == 0);
    }
    SECTION("bad subcommand") {
        std::string err;
        CHECK(run({"frobnicate"}, nullptr, &err) != 0);
        CHECK(err.rfind("error:", 0) == 0);
    }
    SECTION("config parse errors name the offending key") {
        json doc = micro_run_config((work_dir() / "x").string());
        doc.erase("num_rq");
        const std::string cfg = write_config(doc, "broken.json");
        std::string err;
        CHECK(run({"train", "--config", cfg}, nullptr, &err) != 0);
        CHECK(err.find("num_rq") != std::string::npos);
    }
    SECTION("help exits zero") {
        std::string out;
        CHECK(run({"--help"}, &out) == 0);
        CHECK(out.find("train") != std::string::npos);
    }
}
