#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tivat/data.hpp"
#include "tivat/decompose.hpp"
#include "tivat/ja_attention.hpp"
#include "tivat/patch_embed.hpp"
#include "tivat/tensor.hpp"
#include "tivat/util.hpp"

namespace tivat {

using json = nlohmann::ordered_json;

inline const char* attention_mode_name(AttentionMode m) {
    return m == AttentionMode::ja ? "ja" : "full";
}
inline const char* offset_mode_name(OffsetMode m) {
    switch (m) {
        case OffsetMode::points: return "points";
        case OffsetMode::guidelines_no_sampling: return "guidelines_no_sampling";
        case OffsetMode::guidelines_with_sampling: return "guidelines_with_sampling";
    }
    return "?";
}
inline const char* sampling_mode_name(SamplingMode m) {
    switch (m) {
        case SamplingMode::separate: return "separate";
        case SamplingMode::common: return "common";
        case SamplingMode::none: return "none";
    }
    return "?";
}
inline const char* sampler_name(Sampler s) { return s == Sampler::dtv ? "dtv" : "random"; }

template <typename Enum>
Enum parse_enum(const std::string& value, const char* field,
                const std::vector<std::pair<std::string, Enum>>& table) {
    for (const auto& [name, e] : table) {
        if (name == value) return e;
    }
    std::string known;
    for (const auto& [name, e] : table) {
        if (!known.empty()) known += ", ";
        known += name;
    }
    throw std::invalid_argument(detail::msg("config: ", field, " '", value,
                                            "' is not one of {", known, "}"));
}

inline AttentionMode parse_attention_mode(const std::string& v) {
    return parse_enum<AttentionMode>(v, "attention_mode",
                                     {{"ja", AttentionMode::ja}, {"full", AttentionMode::full}});
}
inline OffsetMode parse_offset_mode(const std::string& v) {
    return parse_enum<OffsetMode>(
        v, "offset_mode",
        {{"points", OffsetMode::points},
         {"guidelines_no_sampling", OffsetMode::guidelines_no_sampling},
         {"guidelines_with_sampling", OffsetMode::guidelines_with_sampling}});
}
inline SamplingMode parse_sampling_mode(const std::string& v) {
    return parse_enum<SamplingMode>(v, "sampling_mode",
                                    {{"separate", SamplingMode::separate},
                                     {"common", SamplingMode::common},
                                     {"none", SamplingMode::none}});
}
inline Sampler parse_sampler(const std::string& v, const char* field) {
    return parse_enum<Sampler>(v, field, {{"dtv", Sampler::dtv}, {"random", Sampler::random}});
}
inline ResidualMode parse_residual_mode(const std::string& v) {
    return parse_enum<ResidualMode>(v, "residual_mode",
                                    {{"none", ResidualMode::none},
                                     {"trend", ResidualMode::trend_only},
                                     {"season", ResidualMode::season_only},
                                     {"both", ResidualMode::both}});
}

// Everything the model needs to be built and run; `variates` comes from the
// dataset. `use_cross_pool` is an in-code experiment switch, not part of the
// config file schema.
struct ModelConfig {
    std::size_t num_blocks = 2;
    std::size_t patch_len = 8;
    std::size_t stride = 4;
    std::size_t model_dim = 128;
    std::size_t ffn_dim = 256;
    double learning_rate = 1e-4;
    double per_delta_t = 0.2;
    double per_delta_v = 0.2;
    std::size_t num_rq_self = 40;
    std::size_t num_rq = 20;
    std::size_t lookback = 96;
    std::size_t horizon = 96;
    std::size_t variates = 0;
    std::size_t ma_kernel = 25;
    std::size_t batch_size = 32;
    AttentionMode attention_mode = AttentionMode::ja;
    OffsetMode offset_mode = OffsetMode::guidelines_with_sampling;
    Sampler sampler_self = Sampler::dtv;
    Sampler sampler_cross = Sampler::dtv;
    SamplingMode sampling_mode = SamplingMode::separate;
    ResidualMode residual_mode = ResidualMode::both;
    bool soft_scores = false;
    std::uint64_t seed = 0;
    bool use_cross_pool = true;

    std::size_t patches() const { return patch_count(lookback, patch_len, stride); }

    SampleSpec sample_spec() const {
        SampleSpec s;
        s.offset_mode = offset_mode;
        s.sampling_mode = sampling_mode;
        s.sampler_self = sampler_self;
        s.sampler_cross = sampler_cross;
        s.k_self = num_rq_self;
        s.k_cross = num_rq;
        s.soft_scores = soft_scores;
        s.use_cross_pool = use_cross_pool;
        return s;
    }

    void validate() const {
        if (variates == 0) throw std::invalid_argument("config: variate count not set");
        if (num_blocks == 0) throw std::invalid_argument("config: num_blocks must be >= 1");
        if (patch_len == 0 || patch_len > lookback) {
            throw std::invalid_argument(detail::msg("config: patch ", patch_len,
                                                    " must be in [1, lookback ", lookback, "]"));
        }
        if (stride == 0) throw std::invalid_argument("config: stride must be >= 1");
        if (model_dim == 0 || model_dim % 2 != 0) {
            throw std::invalid_argument(detail::msg("config: model_dim ", model_dim,
                                                    " must be positive and even"));
        }
        if (ffn_dim == 0) throw std::invalid_argument("config: ffn_dim must be >= 1");
        if (num_rq_self == 0 || num_rq == 0) {
            throw std::invalid_argument("config: num_rq_self and num_rq must be >= 1");
        }
        if (!(per_delta_t > 0.0) || per_delta_t > 1.0 || !(per_delta_v > 0.0) ||
            per_delta_v > 1.0) {
            throw std::invalid_argument("config: per_delta_t/per_delta_v must lie in (0, 1]");
        }
        if (horizon == 0) throw std::invalid_argument("config: horizon must be >= 1");
        if (ma_kernel == 0 || ma_kernel % 2 == 0) {
            throw std::invalid_argument("config: ma_kernel must be odd and positive");
        }
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
        if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
            throw std::invalid_argument("config: learning_rate must be finite and >= 0");
        }
    }
};

inline json model_config_to_json(const ModelConfig& c) {
    json j;
    j["num_blocks"] = c.num_blocks;
    j["patch"] = c.patch_len;
    j["stride"] = c.stride;
    j["model_dim"] = c.model_dim;
    j["ffn_dim"] = c.ffn_dim;
    j["learning_rate"] = c.learning_rate;
    j["per_delta_t"] = c.per_delta_t;
    j["per_delta_v"] = c.per_delta_v;
    j["num_rq_self"] = c.num_rq_self;
    j["num_rq"] = c.num_rq;
    j["lookback"] = c.lookback;
    j["horizon"] = c.horizon;
    j["ma_kernel"] = c.ma_kernel;
    j["batch_size"] = c.batch_size;
    j["attention_mode"] = attention_mode_name(c.attention_mode);
    j["offset_mode"] = offset_mode_name(c.offset_mode);
    j["sampler_self"] = sampler_name(c.sampler_self);
    j["sampler_cross"] = sampler_name(c.sampler_cross);
    j["sampling_mode"] = sampling_mode_name(c.sampling_mode);
    j["residual_mode"] = residual_mode_name(c.residual_mode);
    j["soft_scores"] = c.soft_scores;
    j["seed"] = c.seed;
    return j;
}

inline std::string config_fingerprint(const ModelConfig& c) {
    json j = model_config_to_json(c);
    j["variates"] = c.variates;
    return detail::fnv1a_hex(j.dump());
}

// One trend/seasonality sibling: refinement linear, embedding, attention
// blocks, and the flatten projector. Branches never share tensors.
struct BranchParams {
    Tensor refine_weight;  // L_H x L_H
    Tensor refine_bias;    // L_H
    EmbedParams embed;
    std::vector<JABlockParams> blocks;
    Tensor proj_weight;  // (L_N * D) x L_F
    Tensor proj_bias;    // L_F
};

struct TiVaTParams {
    BranchParams trend;
    BranchParams season;
};

namespace detail {

inline Tensor init_linear_weight(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), true);
}

inline BranchParams init_branch(const ModelConfig& cfg, std::mt19937_64& rng) {
    const std::size_t lh = cfg.lookback, d = cfg.model_dim, lf = cfg.horizon;
    const std::size_t ln = cfg.patches();
    BranchParams b;
    b.refine_weight = init_linear_weight({lh, lh}, lh, rng);
    b.refine_bias = Tensor({lh}, 0.0, true);
    b.embed.weight = init_linear_weight({cfg.patch_len, d}, cfg.patch_len, rng);
    b.embed.bias = Tensor({d}, 0.0, true);
    b.embed.pos = positional_encoding(ln, d);
    const std::size_t n_dt = offset_slot_count(cfg.per_delta_t, ln);
    const std::size_t n_dv = offset_slot_count(cfg.per_delta_v, cfg.variates);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
        JABlockParams blk;
        blk.ln1_gamma = Tensor({d}, 1.0, true);
        blk.ln1_beta = Tensor({d}, 0.0, true);
        blk.ln2_gamma = Tensor({d}, 1.0, true);
        blk.ln2_beta = Tensor({d}, 0.0, true);
        blk.q_weight = init_linear_weight({d, d}, d, rng);
        blk.q_bias = Tensor({d}, 0.0, true);
        blk.k_weight = init_linear_weight({d, d}, d, rng);
        blk.k_bias = Tensor({d}, 0.0, true);
        blk.v_weight = init_linear_weight({d, d}, d, rng);
        blk.v_bias = Tensor({d}, 0.0, true);
        blk.proj_2d = init_linear_weight({d, 2}, d, rng);
        blk.offsets.t_weight = init_linear_weight({d, n_dt}, d, rng);
        blk.offsets.t_bias = Tensor({n_dt}, 0.0, true);
        blk.offsets.v_weight = init_linear_weight({d, n_dv}, d, rng);
        blk.offsets.v_bias = Tensor({n_dv}, 0.0, true);
        blk.ffn_w1 = init_linear_weight({d, cfg.ffn_dim}, d, rng);
        blk.ffn_b1 = Tensor({cfg.ffn_dim}, 0.0, true);
        blk.ffn_w2 = init_linear_weight({cfg.ffn_dim, d}, cfg.ffn_dim, rng);
        blk.ffn_b2 = Tensor({d}, 0.0, true);
        b.blocks.push_back(std::move(blk));
    }
    b.proj_weight = init_linear_weight({ln * d, lf}, ln * d, rng);
    b.proj_bias = Tensor({lf}, 0.0, true);
    return b;
}

}  // namespace detail

inline TiVaTParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    TiVaTParams p;
    p.trend = detail::init_branch(cfg, rng);
    p.season = detail::init_branch(cfg, rng);
    return p;
}

// Fixed traversal order: drives Adam state, checkpoints, and init draws.
inline std::vector<std::pair<std::string, Tensor>> named_parameters(TiVaTParams& params) {
    std::vector<std::pair<std::string, Tensor>> out;
    auto visit_branch = [&](const std::string& prefix, BranchParams& b) {
        out.emplace_back(prefix + ".refine.weight", b.refine_weight);
        out.emplace_back(prefix + ".refine.bias", b.refine_bias);
        out.emplace_back(prefix + ".embed.weight", b.embed.weight);
        out.emplace_back(prefix + ".embed.bias", b.embed.bias);
        for (std::size_t i = 0; i < b.blocks.size(); ++i) {
            const std::string bp = prefix + ".block" + std::to_string(i);
            JABlockParams& blk = b.blocks[i];
            out.emplace_back(bp + ".ln1_gamma", blk.ln1_gamma);
            out.emplace_back(bp + ".ln1_beta", blk.ln1_beta);
            out.emplace_back(bp + ".ln2_gamma", blk.ln2_gamma);
            out.emplace_back(bp + ".ln2_beta", blk.ln2_beta);
            out.emplace_back(bp + ".q_weight", blk.q_weight);
            out.emplace_back(bp + ".q_bias", blk.q_bias);
            out.emplace_back(bp + ".k_weight", blk.k_weight);
            out.emplace_back(bp + ".k_bias", blk.k_bias);
            out.emplace_back(bp + ".v_weight", blk.v_weight);
            out.emplace_back(bp + ".v_bias", blk.v_bias);
            out.emplace_back(bp + ".proj_2d", blk.proj_2d);
            out.emplace_back(bp + ".offset_t_weight", blk.offsets.t_weight);
            out.emplace_back(bp + ".offset_t_bias", blk.offsets.t_bias);
            out.emplace_back(bp + ".offset_v_weight", blk.offsets.v_weight);
            out.emplace_back(bp + ".offset_v_bias", blk.offsets.v_bias);
            out.emplace_back(bp + ".ffn_w1", blk.ffn_w1);
            out.emplace_back(bp + ".ffn_b1", blk.ffn_b1);
            out.emplace_back(bp + ".ffn_w2", blk.ffn_w2);
            out.emplace_back(bp + ".ffn_b2", blk.ffn_b2);
        }
        out.emplace_back(prefix + ".proj.weight", b.proj_weight);
        out.emplace_back(prefix + ".proj.bias", b.proj_bias);
    };
    visit_branch("trend", params.trend);
    visit_branch("season", params.season);
    return out;
}

// Flatten each variate's L_N x D token slab and map it to the horizon with
// one projector shared across variates.
inline Tensor project(const Tensor& tokens, const Tensor& weight, const Tensor& bias) {
    if (tokens.rank() != 3) {
        throw std::invalid_argument(detail::msg("project: expected L_N x V x D tokens, got ",
                                                shape_str(tokens.shape())));
    }
    const std::size_t n = tokens.dim(0), variates = tokens.dim(1), d = tokens.dim(2);
    if (weight.rank() != 2 || weight.dim(0) != n * d) {
        throw std::invalid_argument(detail::msg("project: weight ", shape_str(weight.shape()),
                                                " incompatible with flattened tokens of ",
                                                n * d));
    }
    Tensor per_variate = reshape(permute(tokens, {1, 0, 2}), {variates, n * d});
    Tensor mapped = linear(per_variate, weight, bias);  // V x L_F
    return transpose(mapped);                           // L_F x V
}

// Vanilla single-head self-attention over the flattened grid, with the same
// pre-norm encoder wiring as the JA block.
inline Tensor full_attention_block_forward(const Tensor& z, const JABlockParams& params) {
    if (z.rank() != 3) {
        throw std::invalid_argument(detail::msg("full attention: expected L_N x V x D, got ",
                                                shape_str(z.shape())));
    }
    const std::size_t n = z.dim(0) * z.dim(1), dim = z.dim(2);
    Tensor z_flat = reshape(z, {n, dim});
    Tensor normed = layer_norm(z_flat, params.ln1_gamma, params.ln1_beta);
    Tensor q = linear(normed, params.q_weight, params.q_bias);
    Tensor k = linear(normed, params.k_weight, params.k_bias);
    Tensor v = linear(normed, params.v_weight, params.v_bias);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
    Tensor weights = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
    Tensor attn = matmul(weights, v);
    Tensor z1 = add(z_flat, attn);
    Tensor h = layer_norm(z1, params.ln2_gamma, params.ln2_beta);
    h = linear(h, params.ffn_w1, params.ffn_b1);
    h = gelu(h);
    h = linear(h, params.ffn_w2, params.ffn_b2);
    return reshape(add(z1, h), {z.dim(0), z.dim(1), dim});
}

namespace detail {

inline Tensor branch_forward(const Tensor& component, const BranchParams& branch,
                             const ModelConfig& cfg, const SampleContext& ctx) {
    Tensor z = embed(patch(component, cfg.patch_len, cfg.stride), branch.embed);
    const SampleSpec spec = cfg.sample_spec();
    for (std::size_t i = 0; i < branch.blocks.size(); ++i) {
        z = cfg.attention_mode == AttentionMode::ja
                ? ja_block_forward(z, branch.blocks[i], spec, ctx, i)
                : full_attention_block_forward(z, branch.blocks[i]);
    }
    return project(z, branch.proj_weight, branch.proj_bias);
}

}  // namespace detail

// Forward pass for one raw lookback window: instance-normalize, decompose and
// refine, run both branches, sum, then invert the normalization.
inline Tensor forward_window(const double* window, const TiVaTParams& params,
                             const ModelConfig& cfg, const SampleContext& ctx) {
    const std::size_t lh = cfg.lookback, v_count = cfg.variates, lf = cfg.horizon;
    const auto stats = window_stats(window, lh, v_count);
    Tensor x(Shape{lh, v_count}, normalize_window(window, lh, v_count, stats));

    DecompPair pair = st_decompose(x, cfg.ma_kernel);
    RefineParams refine_params{params.trend.refine_weight, params.trend.refine_bias,
                               params.season.refine_weight, params.season.refine_bias,
                               cfg.residual_mode};
    pair = refine(pair, refine_params);

    Tensor summed = add(detail::branch_forward(pair.trend, params.trend, cfg, ctx),
                        detail::branch_forward(pair.seasonality, params.season, cfg, ctx));

    std::vector<double> std_rep(lf * v_count), mean_rep(lf * v_count);
    for (std::size_t t = 0; t < lf; ++t) {
        for (std::size_t vi = 0; vi < v_count; ++vi) {
            std_rep[t * v_count + vi] = stats[vi].std;
            mean_rep[t * v_count + vi] = stats[vi].mean;
        }
    }
    return add(mul(summed, Tensor(Shape{lf, v_count}, std::move(std_rep))),
               Tensor(Shape{lf, v_count}, std::move(mean_rep)));
}

// Stacks per-window predictions into B x L_F x V. `window_ids` index into the
// batch and also key the per-sample sampling context.
inline Tensor forward_batch(const WindowBatch& batch, const std::vector<std::size_t>& window_ids,
                            const TiVaTParams& params, const ModelConfig& cfg,
                            std::uint64_t step) {
    if (batch.lookback != cfg.lookback || batch.variates != cfg.variates ||
        batch.horizon != cfg.horizon) {
        throw std::invalid_argument(detail::msg(
            "forward: batch windows are ", batch.lookback, "x", batch.variates, " -> ",
            batch.horizon, " but config expects ", cfg.lookback, "x", cfg.variates, " -> ",
            cfg.horizon));
    }
    std::vector<Tensor> rows;
    rows.reserve(window_ids.size());
    for (std::size_t id : window_ids) {
        if (id >= batch.count) {
            throw std::out_of_range(detail::msg("forward: window ", id, " out of range [0, ",
                                                batch.count, ")"));
        }
        SampleContext ctx{cfg.seed, step, id};
        rows.push_back(reshape(forward_window(batch.input(id), params, cfg, ctx),
                               {1, cfg.horizon, cfg.variates}));
    }
    return concat(rows, 0);
}

inline Tensor target_batch(const WindowBatch& batch, const std::vector<std::size_t>& window_ids) {
    std::vector<double> data;
    data.reserve(window_ids.size() * batch.horizon * batch.variates);
    for (std::size_t id : window_ids) {
        const double* t = batch.target(id);
        data.insert(data.end(), t, t + batch.horizon * batch.variates);
    }
    return Tensor(Shape{window_ids.size(), batch.horizon, batch.variates}, std::move(data));
}

inline Tensor loss_mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument(detail::msg("loss: prediction ", shape_str(pred.shape()),
                                                " vs target ", shape_str(target.shape())));
    }
    Tensor diff = sub(pred, target);
    return mean_all(mul(diff, diff));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

// Self-describing JSON document: the run configuration plus every trainable
// tensor with its shape. JSON doubles use shortest-round-trip formatting, so
// float64 payloads survive write/read bit-exactly.
inline json checkpoint_to_json(const json& config_doc, TiVaTParams& params) {
    json doc;
    doc["format"] = "tivat-checkpoint-v1";
    doc["config"] = config_doc;
    json tensors;
    for (auto& [name, tensor] : named_parameters(params)) {
        json entry;
        entry["shape"] = tensor.shape();
        entry["data"] = tensor.data();
        tensors[name] = std::move(entry);
    }
    doc["params"] = std::move(tensors);
    return doc;
}

inline void save_checkpoint(const std::string& path, const json& config_doc,
                            TiVaTParams& params) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(detail::msg("checkpoint: cannot write '", path, "'"));
    out << checkpoint_to_json(config_doc, params).dump(2) << '\n';
}

// Loads tensors into a freshly initialized parameter set for `cfg`. Every
// stored tensor must exist and match shapes exactly.
inline TiVaTParams load_checkpoint_params(const json& doc, const ModelConfig& cfg) {
    if (!doc.contains("params") || !doc["params"].is_object()) {
        throw std::runtime_error("checkpoint: missing params object");
    }
    TiVaTParams params = init_params(cfg);
    auto named = named_parameters(params);
    const json& tensors = doc["params"];
    if (tensors.size() != named.size()) {
        throw std::runtime_error(detail::msg("checkpoint: holds ", tensors.size(),
                                             " tensors, model expects ", named.size()));
    }
    for (auto& [name, tensor] : named) {
        if (!tensors.contains(name)) {
            throw std::runtime_error(detail::msg("checkpoint: missing tensor '", name, "'"));
        }
        const json& entry = tensors[name];
        const auto shape = entry["shape"].get<Shape>();
        if (shape != tensor.shape()) {
            throw std::runtime_error(detail::msg("checkpoint: tensor '", name, "' has shape ",
                                                 shape_str(shape), ", model expects ",
                                                 shape_str(tensor.shape())));
        }
        auto values = entry["data"].get<std::vector<double>>();
        if (values.size() != tensor.size()) {
            throw std::runtime_error(detail::msg("checkpoint: tensor '", name,
                                                 "' data length mismatch"));
        }
        tensor.data() = std::move(values);
    }
    return params;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(detail::msg("cannot open '", path, "'"));
    json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        throw std::runtime_error(detail::msg("failed to parse '", path, "': ", e.what()));
    }
    return doc;
}

}  // namespace tivat
