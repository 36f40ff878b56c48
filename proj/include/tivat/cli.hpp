#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tivat/data.hpp"
#include "tivat/model.hpp"
#include "tivat/trainer.hpp"

namespace tivat {

struct SynthSpec {
    std::size_t variates = 2;
    std::size_t length = 1000;
    std::size_t lag = 8;
    double coupling = 0.8;
    double noise_std = 0.1;
    std::uint64_t seed = 0;
};

struct DataSpec {
    std::string dataset_name;
    std::optional<std::string> csv_path;
    std::optional<SynthSpec> synth;
    SplitSpec splits;
};

struct RunConfig {
    ModelConfig model;
    DataSpec data;
    std::string output_dir;
};

// Built-in defaults for the published benchmark datasets: split lengths and
// per-dataset hyperparameters, all overridable from the config file.
struct DatasetPreset {
    std::size_t train_len, val_len, test_len;
    std::size_t num_blocks, patch, stride, model_dim, ffn_dim;
    double learning_rate, per_delta_t, per_delta_v;
    std::size_t num_rq_self, num_rq;
};

inline const std::map<std::string, DatasetPreset>& dataset_presets() {
    static const std::map<std::string, DatasetPreset> presets = {
        {"ETTh1", {8545, 2881, 2881, 2, 8, 4, 128, 1024, 1e-4, 0.2, 0.2, 40, 20}},
        {"ETTh2", {8545, 2881, 2881, 2, 8, 4, 128, 256, 1e-4, 0.6, 0.4, 20, 20}},
        {"ETTm1", {34465, 11521, 11521, 2, 8, 4, 128, 1024, 1e-4, 0.6, 0.2, 40, 40}},
        {"ETTm2", {34465, 11521, 11521, 2, 8, 4, 128, 256, 1e-4, 0.2, 0.2, 20, 40}},
        {"Exchange", {5120, 665, 1422, 2, 8, 4, 128, 256, 1e-4, 0.2, 0.2, 40, 40}},
        {"Weather", {36792, 5271, 10540, 3, 16, 8, 512, 1024, 1e-4, 0.4, 0.8, 40, 40}},
        {"ECL", {18317, 2633, 5261, 3, 16, 8, 512, 512, 5e-4, 0.2, 0.2, 40, 40}},
        {"Traffic", {12185, 1757, 3509, 4, 16, 8, 128, 512, 1e-3, 0.1, 0.2, 40, 40}},
    };
    return presets;
}

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                                const char* where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw std::invalid_argument(msg("config: unknown key '", it.key(), "' in ", where));
        }
    }
}

inline std::size_t get_count(const json& obj, const std::string& key) {
    const json& v = obj.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw std::invalid_argument(msg("config: key '", key, "' must be an integer"));
    }
    const auto n = v.get<long long>();
    if (n < 0) throw std::invalid_argument(msg("config: key '", key, "' must be >= 0"));
    return static_cast<std::size_t>(n);
}

inline double get_real(const json& obj, const std::string& key) {
    const json& v = obj.at(key);
    if (!v.is_number()) {
        throw std::invalid_argument(msg("config: key '", key, "' must be a number"));
    }
    return v.get<double>();
}

}  // namespace detail

// Strict parse of the run-configuration document. Unknown keys are rejected;
// the ten per-dataset hyperparameters are required unless a known
// dataset_name provides preset values.
inline RunConfig parse_run_config(const json& doc) {
    static const std::set<std::string> top_keys = {
        "num_blocks",   "patch",         "stride",        "model_dim",     "ffn_dim",
        "learning_rate", "per_delta_t",  "per_delta_v",   "num_rq_self",   "num_rq",
        "lookback",     "horizon",       "ma_kernel",     "batch_size",    "attention_mode",
        "offset_mode",  "sampler_self",  "sampler_cross", "sampling_mode", "residual_mode",
        "soft_scores",  "seed",          "data",          "output_dir"};
    if (!doc.is_object()) throw std::invalid_argument("config: document must be a JSON object");
    detail::reject_unknown_keys(doc, top_keys, "config");

    RunConfig rc;
    if (!doc.contains("data") || !doc["data"].is_object()) {
        throw std::invalid_argument("config: missing required key 'data'");
    }
    const json& data = doc["data"];
    detail::reject_unknown_keys(
        data, {"dataset_name", "csv_path", "synth", "train_len", "val_len", "test_len"},
        "data");
    if (data.contains("dataset_name")) rc.data.dataset_name = data["dataset_name"].get<std::string>();

    const DatasetPreset* preset = nullptr;
    if (!rc.data.dataset_name.empty()) {
        auto it = dataset_presets().find(rc.data.dataset_name);
        if (it != dataset_presets().end()) preset = &it->second;
    }

    if (data.contains("csv_path")) rc.data.csv_path = data["csv_path"].get<std::string>();
    if (data.contains("synth")) {
        const json& s = data["synth"];
        detail::reject_unknown_keys(
            s, {"variates", "length", "lag", "coupling", "noise_std", "seed"}, "data.synth");
        SynthSpec spec;
        spec.variates = detail::get_count(s, "variates");
        spec.length = detail::get_count(s, "length");
        spec.lag = detail::get_count(s, "lag");
        spec.coupling = detail::get_real(s, "coupling");
        spec.noise_std = detail::get_real(s, "noise_std");
        spec.seed = s.contains("seed") ? s["seed"].get<std::uint64_t>() : 0;
        rc.data.synth = spec;
    }
    if (rc.data.csv_path.has_value() == rc.data.synth.has_value()) {
        throw std::invalid_argument(
            "config: data must declare exactly one of 'csv_path' or 'synth'");
    }

    auto split_len = [&](const char* key, std::size_t preset_value) {
        if (data.contains(key)) return detail::get_count(data, key);
        if (preset) return preset_value;
        throw std::invalid_argument(detail::msg("config: missing required key '", key, "'"));
    };
    rc.data.splits.train_len = split_len("train_len", preset ? preset->train_len : 0);
    rc.data.splits.val_len = split_len("val_len", preset ? preset->val_len : 0);
    rc.data.splits.test_len = split_len("test_len", preset ? preset->test_len : 0);

    ModelConfig& m = rc.model;
    auto count_field = [&](const char* key, std::size_t* preset_value) {
        if (doc.contains(key)) return detail::get_count(doc, key);
        if (preset_value) return *preset_value;
        throw std::invalid_argument(detail::msg("config: missing required key '", key, "'"));
    };
    auto real_field = [&](const char* key, const double* preset_value) {
        if (doc.contains(key)) return detail::get_real(doc, key);
        if (preset_value) return *preset_value;
        throw std::invalid_argument(detail::msg("config: missing required key '", key, "'"));
    };
    std::size_t pv;
    double pd;
    auto pc = [&](std::size_t v) {
        pv = v;
        return preset ? &pv : nullptr;
    };
    auto pr = [&](double v) {
        pd = v;
        return preset ? &pd : nullptr;
    };
    m.num_blocks = count_field("num_blocks", pc(preset ? preset->num_blocks : 0));
    m.patch_len = count_field("patch", pc(preset ? preset->patch : 0));
    m.stride = count_field("stride", pc(preset ? preset->stride : 0));
    m.model_dim = count_field("model_dim", pc(preset ? preset->model_dim : 0));
    m.ffn_dim = count_field("ffn_dim", pc(preset ? preset->ffn_dim : 0));
    m.learning_rate = real_field("learning_rate", pr(preset ? preset->learning_rate : 0));
    m.per_delta_t = real_field("per_delta_t", pr(preset ? preset->per_delta_t : 0));
    m.per_delta_v = real_field("per_delta_v", pr(preset ? preset->per_delta_v : 0));
    m.num_rq_self = count_field("num_rq_self", pc(preset ? preset->num_rq_self : 0));
    m.num_rq = count_field("num_rq", pc(preset ? preset->num_rq : 0));
    if (doc.contains("lookback")) m.lookback = detail::get_count(doc, "lookback");
    if (doc.contains("horizon")) m.horizon = detail::get_count(doc, "horizon");
    if (doc.contains("ma_kernel")) m.ma_kernel = detail::get_count(doc, "ma_kernel");
    if (doc.contains("batch_size")) m.batch_size = detail::get_count(doc, "batch_size");
    if (doc.contains("attention_mode"))
        m.attention_mode = parse_attention_mode(doc["attention_mode"].get<std::string>());
    if (doc.contains("offset_mode"))
        m.offset_mode = parse_offset_mode(doc["offset_mode"].get<std::string>());
    if (doc.contains("sampler_self"))
        m.sampler_self = parse_sampler(doc["sampler_self"].get<std::string>(), "sampler_self");
    if (doc.contains("sampler_cross"))
        m.sampler_cross = parse_sampler(doc["sampler_cross"].get<std::string>(), "sampler_cross");
    if (doc.contains("sampling_mode"))
        m.sampling_mode = parse_sampling_mode(doc["sampling_mode"].get<std::string>());
    if (doc.contains("residual_mode"))
        m.residual_mode = parse_residual_mode(doc["residual_mode"].get<std::string>());
    if (doc.contains("soft_scores")) m.soft_scores = doc["soft_scores"].get<bool>();
    if (doc.contains("seed")) m.seed = doc["seed"].get<std::uint64_t>();

    if (!doc.contains("output_dir")) {
        throw std::invalid_argument("config: missing required key 'output_dir'");
    }
    rc.output_dir = doc["output_dir"].get<std::string>();
    return rc;
}

inline RunConfig parse_run_config_file(const std::string& path) {
    return parse_run_config(read_json_file(path));
}

// Resolved config echoed back as a document that re-parses identically.
inline json run_config_to_json(const RunConfig& rc) {
    json doc = model_config_to_json(rc.model);
    json data;
    if (!rc.data.dataset_name.empty()) data["dataset_name"] = rc.data.dataset_name;
    if (rc.data.csv_path) data["csv_path"] = *rc.data.csv_path;
    if (rc.data.synth) {
        json s;
        s["variates"] = rc.data.synth->variates;
        s["length"] = rc.data.synth->length;
        s["lag"] = rc.data.synth->lag;
        s["coupling"] = rc.data.synth->coupling;
        s["noise_std"] = rc.data.synth->noise_std;
        s["seed"] = rc.data.synth->seed;
        data["synth"] = std::move(s);
    }
    data["train_len"] = rc.data.splits.train_len;
    data["val_len"] = rc.data.splits.val_len;
    data["test_len"] = rc.data.splits.test_len;
    doc["data"] = std::move(data);
    doc["output_dir"] = rc.output_dir;
    return doc;
}

inline SeriesFrame load_frame(const DataSpec& data) {
    if (data.csv_path) return load_csv(*data.csv_path);
    const SynthSpec& s = *data.synth;
    return synth_leadlag(s.variates, s.length, s.lag, s.coupling, s.noise_std, s.seed);
}

struct LoadedData {
    WindowBatch train, val, test;
    std::size_t variates = 0;
};

inline LoadedData load_windows(const RunConfig& rc) {
    SeriesFrame frame = load_frame(rc.data);
    auto parts = chronological_split(frame, rc.data.splits);
    LoadedData out;
    out.variates = frame.cols();
    out.train = make_windows(parts[0], rc.model.lookback, rc.model.horizon);
    out.val = make_windows(parts[1], rc.model.lookback, rc.model.horizon);
    out.test = make_windows(parts[2], rc.model.lookback, rc.model.horizon);
    return out;
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(msg("cannot write '", path, "'"));
    out << text;
}

inline void write_json_file(const std::string& path, const json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, std::ostream& out,
                     const TrainOptions& options = {}) {
    RunConfig rc = parse_run_config_file(config_path);
    LoadedData data = load_windows(rc);
    rc.model.variates = data.variates;
    rc.model.validate();
    std::filesystem::create_directories(rc.output_dir);

    FitResult result = fit(rc.model, data.train, data.val, options);
    EvalReport val_report =
        evaluate_model(result.params, rc.model, data.val, rc.data.dataset_name);

    const json config_echo = run_config_to_json(rc);
    detail::write_json_file(rc.output_dir + "/config.json", config_echo);
    detail::write_json_file(rc.output_dir + "/history.json", history_to_json(result));
    detail::write_json_file(rc.output_dir + "/eval_val.json", eval_report_to_json(val_report));
    save_checkpoint(rc.output_dir + "/checkpoint.json", config_echo, result.params);

    out << "trained " << result.history.size() << " epoch(s), best epoch "
        << result.best_epoch << ", val mse " << val_report.mse << "\n";
    out << "wrote " << rc.output_dir << "/checkpoint.json, history.json, eval_val.json\n";
    return 0;
}

inline int cmd_eval(const std::string& config_path, const std::string& checkpoint_path,
                    std::optional<std::size_t> horizon_override, std::ostream& out) {
    RunConfig rc = parse_run_config_file(config_path);
    if (horizon_override) rc.model.horizon = *horizon_override;
    LoadedData data = load_windows(rc);
    rc.model.variates = data.variates;
    rc.model.validate();

    json ckpt = read_json_file(checkpoint_path);
    TiVaTParams params = load_checkpoint_params(ckpt, rc.model);
    EvalReport report = evaluate_model(params, rc.model, data.test, rc.data.dataset_name);
    const json report_json = eval_report_to_json(report);
    std::filesystem::create_directories(rc.output_dir);
    detail::write_json_file(rc.output_dir + "/eval_report.json", report_json);
    out << report_json.dump(2) << "\n";
    return 0;
}

inline int cmd_ablate(const std::string& config_path, const std::string& axis,
                      std::ostream& out, const TrainOptions& options = {}) {
    RunConfig rc = parse_run_config_file(config_path);
    LoadedData data = load_windows(rc);
    rc.model.variates = data.variates;
    rc.model.validate();
    std::filesystem::create_directories(rc.output_dir);

    auto rows = run_ablation(rc.model, axis, data.train, data.val, data.test,
                             rc.data.dataset_name, options);
    const std::string csv_path = rc.output_dir + "/ablation_" + axis + ".csv";
    write_ablation_csv(rows, csv_path);
    detail::write_json_file(rc.output_dir + "/ablation_" + axis + ".json",
                            ablation_to_json(rows));
    out << "variant,mse,mae\n";
    for (const AblationRow& r : rows) {
        out << r.variant << ',' << r.report.mse << ',' << r.report.mae << "\n";
    }
    out << "wrote " << csv_path << "\n";
    return 0;
}

inline int cmd_synth(const SynthSpec& spec, const std::string& out_path, std::ostream& out) {
    SeriesFrame frame =
        synth_leadlag(spec.variates, spec.length, spec.lag, spec.coupling, spec.noise_std,
                      spec.seed);
    write_csv(frame, out_path);
    out << "wrote " << out_path << " (" << frame.rows() << " rows, " << frame.cols()
        << " variates)\n";
    return 0;
}

namespace detail {

inline json guideline_to_json(const QuerySelection& sel, const GridPoint& ref) {
    auto points = [](const std::vector<GridPoint>& pts) {
        json arr = json::array();
        for (const GridPoint& g : pts) arr.push_back({g.p, g.v});
        return arr;
    };
    json j;
    j["reference"] = {ref.p, ref.v};
    j["cross_axis"] = points(sel.cross_pool);
    j["self_axis"] = points(sel.self_pool);
    std::vector<GridPoint> selected = sel.sampled.cross_points;
    selected.insert(selected.end(), sel.sampled.self_points.begin(),
                    sel.sampled.self_points.end());
    j["selected"] = points(selected);
    return j;
}

inline json embedding_to_json(const std::vector<TokenEmbedding2D>& rows) {
    json arr = json::array();
    for (const TokenEmbedding2D& r : rows) {
        json e;
        e["grid"] = {r.grid.p, r.grid.v};
        e["xy"] = {r.x, r.y};
        e["cosine_to_ref"] = r.cosine_to_ref;
        arr.push_back(std::move(e));
    }
    return arr;
}

// Block-0 input tokens of both branches for one test window.
struct BranchTokens {
    Tensor trend, season;
};

inline BranchTokens branch_tokens(const RunConfig& rc, const TiVaTParams& params,
                                  const WindowBatch& test, std::size_t window_index) {
    if (window_index >= test.count) {
        throw std::out_of_range(msg("export: window ", window_index, " out of range [0, ",
                                    test.count, ")"));
    }
    NoGradGuard no_grad;
    const ModelConfig& cfg = rc.model;
    const double* window = test.input(window_index);
    const auto stats = window_stats(window, cfg.lookback, cfg.variates);
    Tensor x(Shape{cfg.lookback, cfg.variates},
             normalize_window(window, cfg.lookback, cfg.variates, stats));
    DecompPair pair = st_decompose(x, cfg.ma_kernel);
    RefineParams refine_params{params.trend.refine_weight, params.trend.refine_bias,
                               params.season.refine_weight, params.season.refine_bias,
                               cfg.residual_mode};
    pair = refine(pair, refine_params);
    BranchTokens tokens;
    tokens.trend = embed(patch(pair.trend, cfg.patch_len, cfg.stride), params.trend.embed);
    tokens.season =
        embed(patch(pair.seasonality, cfg.patch_len, cfg.stride), params.season.embed);
    return tokens;
}

}  // namespace detail

inline int cmd_export(const std::string& checkpoint_path, const std::string& what,
                      const GridPoint& ref, std::size_t window_index,
                      const std::string& out_path, std::ostream& out) {
    json ckpt = read_json_file(checkpoint_path);
    if (!ckpt.contains("config")) throw std::runtime_error("export: checkpoint has no config");
    RunConfig rc = parse_run_config(ckpt["config"]);
    LoadedData data = load_windows(rc);
    rc.model.variates = data.variates;
    rc.model.validate();
    TiVaTParams params = load_checkpoint_params(ckpt, rc.model);
    auto tokens = detail::branch_tokens(rc, params, data.test, window_index);

    json doc;
    if (what == "guidelines") {
        const SampleSpec spec = rc.model.sample_spec();
        const SampleContext ctx{rc.model.seed, 0, window_index};
        doc["trend"] = detail::guideline_to_json(
            trace_query(tokens.trend, params.trend.blocks[0], spec, ctx, 0, ref), ref);
        doc["seasonality"] = detail::guideline_to_json(
            trace_query(tokens.season, params.season.blocks[0], spec, ctx, 0, ref), ref);
    } else if (what == "embeddings") {
        doc["trend"] = detail::embedding_to_json(
            embedding_map_2d(tokens.trend, params.trend.blocks[0], ref));
        doc["seasonality"] = detail::embedding_to_json(
            embedding_map_2d(tokens.season, params.season.blocks[0], ref));
    } else {
        throw std::invalid_argument(detail::msg("export: unknown kind '", what,
                                                "', expected 'embeddings' or 'guidelines'"));
    }
    detail::write_json_file(out_path, doc);
    out << "wrote " << out_path << "\n";
    return 0;
}

// Argv-style entry point shared by the binary and the tests. Returns the
// process exit code; every failure prints one `error:` line to `err`.
inline int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"TiVaT multivariate time-series forecaster"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, axis, what, out_path, ref_text;
    std::size_t window_index = 0;
    std::optional<std::size_t> horizon_override;

    auto* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("--config", config_path, "Run configuration JSON")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    eval->add_option("--config", config_path, "Run configuration JSON")->required();
    eval->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required();
    std::size_t horizon_flag = 0;
    auto* horizon_opt = eval->add_option("--horizon", horizon_flag, "Override the horizon");

    auto* ablate = app.add_subcommand("ablate", "Train and compare config variants");
    ablate->add_option("--config", config_path, "Run configuration JSON")->required();
    ablate->add_option("--axis", axis,
                       "One of attention, offset, sampler, sampling_mode, residual")
        ->required();

    SynthSpec synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic lead-lag CSV");
    synth_cmd->add_option("--v", synth.variates, "Variate count")->required();
    synth_cmd->add_option("--len", synth.length, "Total time points")->required();
    synth_cmd->add_option("--lag", synth.lag, "Lag steps between variates")->required();
    synth_cmd->add_option("--coupling", synth.coupling, "Driver coupling factor");
    synth_cmd->add_option("--noise", synth.noise_std, "Noise standard deviation");
    synth_cmd->add_option("--seed", synth.seed, "Generator seed");
    synth_cmd->add_option("--out", out_path, "Output CSV path")->required();

    auto* exp = app.add_subcommand("export", "Export guideline masks or 2-D embeddings");
    exp->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required();
    exp->add_option("--what", what, "embeddings or guidelines")->required();
    exp->add_option("--ref", ref_text, "Reference grid point as p,v")->required();
    exp->add_option("--window", window_index, "Test-split window index");
    exp->add_option("--out", out_path, "Output JSON path");

    std::vector<const char*> argv;
    argv.push_back("tivat");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
        if (*horizon_opt) horizon_override = horizon_flag;
        if (train->parsed()) return cmd_train(config_path, out);
        if (eval->parsed()) return cmd_eval(config_path, checkpoint_path, horizon_override, out);
        if (ablate->parsed()) return cmd_ablate(config_path, axis, out);
        if (synth_cmd->parsed()) return cmd_synth(synth, out_path, out);
        if (exp->parsed()) {
            GridPoint ref;
            if (std::sscanf(ref_text.c_str(), "%zu,%zu", &ref.p, &ref.v) != 2) {
                throw std::invalid_argument(
                    detail::msg("export: --ref expects 'p,v', got '", ref_text, "'"));
            }
            if (out_path.empty()) out_path = what + ".json";
            return cmd_export(checkpoint_path, what, ref, window_index, out_path, out);
        }
        throw std::invalid_argument("no subcommand given");
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace tivat
