#include <catch2/catch.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "support/gradcheck.hpp"
#include "tivat/model.hpp"

using namespace tivat;

namespace {

ModelConfig tiny_config(std::size_t variates = 2) {
    ModelConfig cfg;
    cfg.num_blocks = 1;
    cfg.patch_len = 4;
    cfg.stride = 2;
    cfg.model_dim = 4;
    cfg.ffn_dim = 8;
    cfg.learning_rate = 1e-3;
    cfg.per_delta_t = 0.4;
    cfg.per_delta_v = 0.5;
    cfg.num_rq_self = 3;
    cfg.num_rq = 2;
    cfg.lookback = 8;
    cfg.horizon = 4;
    cfg.variates = variates;
    cfg.ma_kernel = 3;
    cfg.batch_size = 2;
    cfg.seed = 3;
    return cfg;
}

WindowBatch tiny_batch(const ModelConfig& cfg, std::uint64_t seed = 11,
                       std::size_t rows = 40) {
    SeriesFrame f = synth_leadlag(cfg.variates, rows, 2, 0.7, 0.2, seed);
    return make_windows(f, cfg.lookback, cfg.horizon);
}

void zero_projectors(TiVaTParams& p) {
    for (Tensor t : {p.trend.proj_weight, p.trend.proj_bias, p.season.proj_weight,
                     p.season.proj_bias}) {
        std::fill(t.data().begin(), t.data().end(), 0.0);
    }
}

}  // namespace

TEST_CASE("config validation", "[model]") {
    ModelConfig cfg = tiny_config();
    REQUIRE_NOTHROW(cfg.validate());
    SECTION("patch beyond lookback") {
        cfg.patch_len = 9;
        REQUIRE_THROWS(cfg.validate());
    }
    SECTION("odd model dim") {
        cfg.model_dim = 5;
        REQUIRE_THROWS(cfg.validate());
    }
    SECTION("zero stride") {
        cfg.stride = 0;
        REQUIRE_THROWS(cfg.validate());
    }
    SECTION("percentage out of range") {
        cfg.per_delta_t = 1.5;
        REQUIRE_THROWS(cfg.validate());
    }
}

TEST_CASE("forward shape contract", "[model]") {
    ModelConfig cfg = tiny_config();
    TiVaTParams params = init_params(cfg);
    WindowBatch batch = tiny_batch(cfg);
    NoGradGuard no_grad;
    Tensor out = forward_batch(batch, {0, 3}, params, cfg, 0);
    CHECK(out.shape() == Shape({2, cfg.horizon, cfg.variates}));

    SECTION("shape holds across a grid of configs") {
        for (auto [lp, s, d] : {std::tuple<std::size_t, std::size_t, std::size_t>{2, 1, 2},
                                {8, 4, 6},
                                {3, 3, 4}}) {
            ModelConfig c = tiny_config();
            c.patch_len = lp;
            c.stride = s;
            c.model_dim = d;
            TiVaTParams p = init_params(c);
            WindowBatch b = tiny_batch(c);
            Tensor o = forward_batch(b, {1}, p, c, 0);
            CHECK(o.shape() == Shape({1, c.horizon, c.variates}));
        }
    }
    SECTION("full attention variant preserves shape too") {
        ModelConfig c = tiny_config();
        c.attention_mode = AttentionMode::full;
        TiVaTParams p = init_params(c);
        Tensor o = forward_batch(batch, {0}, p, c, 0);
        CHECK(o.shape() == Shape({1, c.horizon, c.variates}));
    }
    SECTION("published-scale config keeps the shape contract") {
        ModelConfig c;  // the hourly-ETT preset dimensions
        c.num_blocks = 2;
        c.patch_len = 8;
        c.stride = 4;
        c.model_dim = 128;
        c.ffn_dim = 1024;
        c.per_delta_t = 0.2;
        c.per_delta_v = 0.2;
        c.num_rq_self = 40;
        c.num_rq = 20;
        c.lookback = 96;
        c.horizon = 96;
        c.variates = 7;
        c.seed = 1;
        TiVaTParams p = init_params(c);
        SeriesFrame f = synth_leadlag(7, 220, 3, 0.7, 0.1, 2);
        WindowBatch b = make_windows(f, c.lookback, c.horizon);
        Tensor o = forward_batch(b, {0, 1}, p, c, 0);
        CHECK(o.shape() == Shape({2, 96, 7}));
    }
}

TEST_CASE("zero projectors predict the lookback mean", "[model]") {
    ModelConfig cfg = tiny_config();
    TiVaTParams params = init_params(cfg);
    zero_projectors(params);
    WindowBatch batch = tiny_batch(cfg);
    NoGradGuard no_grad;
    Tensor out = forward_batch(batch, {2}, params, cfg, 0);
    const auto* stats = batch.stats(2);
    for (std::size_t t = 0; t < cfg.horizon; ++t)
        for (std::size_t v = 0; v < cfg.variates; ++v)
            CHECK(out(0, t, v) == Approx(stats[v].mean).margin(1e-12));
}

TEST_CASE("denormalization transforms affinely with the input", "[model]") {
    ModelConfig cfg = tiny_config();
    TiVaTParams params = init_params(cfg);
    zero_projectors(params);
    WindowBatch batch = tiny_batch(cfg);
    WindowBatch scaled = batch;
    const double c = 2.5, d = -1.75;
    for (std::size_t t = 0; t < cfg.lookback; ++t)
        scaled.inputs[t * cfg.variates + 0] = c * batch.inputs[t * cfg.variates + 0] + d;
    scaled.norm_stats.assign(scaled.count * scaled.variates, NormStats{});
    for (std::size_t w = 0; w < scaled.count; ++w) {
        auto st = window_stats(scaled.input(w), cfg.lookback, cfg.variates);
        std::copy(st.begin(), st.end(), scaled.norm_stats.begin() + w * cfg.variates);
    }
    NoGradGuard no_grad;
    Tensor base = forward_batch(batch, {0}, params, cfg, 0);
    Tensor moved = forward_batch(scaled, {0}, params, cfg, 0);
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
        CHECK(moved(0, t, 0) == Approx(c * base(0, t, 0) + d).margin(1e-9));
        CHECK(moved(0, t, 1) == Approx(base(0, t, 1)).margin(1e-12));
    }
}

TEST_CASE("branch separability", "[model]") {
    ModelConfig cfg = tiny_config();
    WindowBatch batch = tiny_batch(cfg);
    NoGradGuard no_grad;
    TiVaTParams full = init_params(cfg);
    Tensor out_full = forward_batch(batch, {1}, full, cfg, 0);

    TiVaTParams season_zero = init_params(cfg);
    std::fill(season_zero.season.proj_weight.data().begin(),
              season_zero.season.proj_weight.data().end(), 0.0);
    std::fill(season_zero.season.proj_bias.data().begin(),
              season_zero.season.proj_bias.data().end(), 0.0);
    Tensor out_szero = forward_batch(batch, {1}, season_zero, cfg, 0);

    TiVaTParams trend_zero = init_params(cfg);
    std::fill(trend_zero.trend.proj_weight.data().begin(),
              trend_zero.trend.proj_weight.data().end(), 0.0);
    std::fill(trend_zero.trend.proj_bias.data().begin(),
              trend_zero.trend.proj_bias.data().end(), 0.0);
    Tensor out_tzero = forward_batch(batch, {1}, trend_zero, cfg, 0);

    TiVaTParams both_zero = init_params(cfg);
    zero_projectors(both_zero);
    Tensor out_bzero = forward_batch(batch, {1}, both_zero, cfg, 0);

    // removing the seasonality head removes exactly its branch contribution
    for (std::size_t i = 0; i < out_full.size(); ++i) {
        const double season_part = out_tzero.data()[i] - out_bzero.data()[i];
        CHECK(out_full.data()[i] - out_szero.data()[i] == Approx(season_part).margin(1e-9));
    }
}

TEST_CASE("projector", "[model]") {
    SECTION("zero weights give zero predictions") {
        Tensor tokens({3, 2, 4}, 1.5);
        Tensor out = project(tokens, Tensor({12, 5}), Tensor({5}));
        CHECK(out.shape() == Shape({5, 2}));
        for (double v : out.data()) CHECK(v == 0.0);
    }
    SECTION("scalar identity") {
        Tensor tokens({1, 1, 1}, std::vector<double>{4.25});
        Tensor out = project(tokens, Tensor({1, 1}, {1.0}), Tensor({1}));
        CHECK(out(0, 0) == 4.25);
    }
    SECTION("variates stay independent") {
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        std::vector<double> tok(3 * 2 * 4);
        for (double& v : tok) v = dist(rng);
        Tensor tokens({3, 2, 4}, tok);
        std::vector<double> w(12 * 5);
        for (double& v : w) v = dist(rng);
        Tensor weight({12, 5}, w);
        Tensor bias({5}, 0.25);
        Tensor base = project(tokens, weight, bias);
        std::vector<double> tok2 = tok;
        for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t d = 0; d < 4; ++d) tok2[(p * 2 + 1) * 4 + d] += 3.0;
        Tensor moved = project(Tensor({3, 2, 4}, tok2), weight, bias);
        for (std::size_t t = 0; t < 5; ++t) {
            CHECK(moved(t, 0) == base(t, 0));
            CHECK(moved(t, 1) != base(t, 1));
        }
    }
}

TEST_CASE("mse loss", "[model]") {
    SECTION("perfect prediction") {
        Tensor a({2, 2}, {1, 2, 3, 4});
        CHECK(loss_mse(a, a).item() == 0.0);
    }
    SECTION("unit error") {
        Tensor p({2, 2}, 0.0);
        Tensor t({2, 2}, 1.0);
        CHECK(loss_mse(p, t).item() == Approx(1.0));
    }
    SECTION("hand arithmetic") {
        Tensor p({2}, {1.0, 3.0});
        Tensor t({2}, {0.0, 1.0});
        CHECK(loss_mse(p, t).item() == Approx(2.5));
    }
    SECTION("shape mismatch") {
        REQUIRE_THROWS(loss_mse(Tensor({2, 2}), Tensor({2, 3})));
    }
}

TEST_CASE("full attention block", "[model]") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> dist(0.0, 0.5);
    auto rand_t = [&](Shape s) {
        std::vector<double> d(shape_numel(s));
        for (double& v : d) v = dist(rng);
        return Tensor(std::move(s), std::move(d), true);
    };
    JABlockParams p;
    const std::size_t dim = 4, ffn = 6;
    p.ln1_gamma = Tensor({dim}, 1.0, true);
    p.ln1_beta = Tensor({dim}, 0.0, true);
    p.ln2_gamma = Tensor({dim}, 1.0, true);
    p.ln2_beta = Tensor({dim}, 0.0, true);
    p.q_weight = rand_t({dim, dim});
    p.q_bias = Tensor({dim}, 0.0, true);
    p.k_weight = rand_t({dim, dim});
    p.k_bias = Tensor({dim}, 0.0, true);
    p.v_weight = rand_t({dim, dim});
    p.v_bias = Tensor({dim}, 0.0, true);
    p.proj_2d = rand_t({dim, 2});
    p.offsets = {rand_t({dim, 1}), Tensor({1}, 0.0, true), rand_t({dim, 1}),
                 Tensor({1}, 0.0, true)};
    p.ffn_w1 = rand_t({dim, ffn});
    p.ffn_b1 = Tensor({ffn}, 0.0, true);
    p.ffn_w2 = rand_t({ffn, dim});
    p.ffn_b2 = Tensor({dim}, 0.0, true);

    SECTION("shape preserved") {
        Tensor z = rand_t({3, 2, dim});
        CHECK(full_attention_block_forward(z, p).shape() == z.shape());
    }
    SECTION("1x1 grid with zero output weights is identity") {
        JABlockParams q = p;
        q.v_weight = Tensor({dim, dim}, 0.0, true);
        q.ffn_w2 = Tensor({ffn, dim}, 0.0, true);
        Tensor z = rand_t({1, 1, dim});
        Tensor out = full_attention_block_forward(z, q);
        CHECK(out.data() == z.data());
    }
    SECTION("attention rows are stochastic") {
        // with zero keys the softmax is uniform: output equals the value mean
        JABlockParams q = p;
        q.k_weight = Tensor({dim, dim}, 0.0, true);
        Tensor z = rand_t({2, 2, dim});
        REQUIRE_NOTHROW(full_attention_block_forward(z, q));
    }
}

TEST_CASE("deterministic forward", "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.sampler_cross = Sampler::random;  // exercise the seeded path
    TiVaTParams params = init_params(cfg);
    WindowBatch batch = tiny_batch(cfg);
    NoGradGuard no_grad;
    Tensor a = forward_batch(batch, {0, 1}, params, cfg, 5);
    Tensor b = forward_batch(batch, {0, 1}, params, cfg, 5);
    CHECK(a.data() == b.data());
    Tensor c = forward_batch(batch, {0, 1}, params, cfg, 6);
    CHECK(a.data() != c.data());  // new step reseeds the random sampler
}

TEST_CASE("end-to-end gradients on the tiny model", "[model][gradcheck]") {
    ModelConfig cfg = tiny_config();
    TiVaTParams params = init_params(cfg);
    WindowBatch batch = tiny_batch(cfg);
    std::vector<std::size_t> ids = {0, 5};
    Tensor target = target_batch(batch, ids);
    auto loss_fn = [&]() { return loss_mse(forward_batch(batch, ids, params, cfg, 0), target); };

    std::vector<Tensor> leaves;
    std::vector<Tensor> dead;  // offset heads and 2-D projections: no gradient path
    for (auto& [name, tensor] : named_parameters(params)) {
        if (name.find("offset_") != std::string::npos ||
            name.find("proj_2d") != std::string::npos) {
            dead.push_back(tensor);
        } else {
            leaves.push_back(tensor);
        }
    }
    auto res = gradcheck::check(loss_fn, leaves);
    INFO(res.detail << " worst=" << res.worst_rel_err);
    CHECK(res.ok);

    for (Tensor t : dead) t.node()->grad.clear();
    backward(loss_fn());
    for (Tensor t : dead)
        for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("checkpoint round trip", "[model]") {
    ModelConfig cfg = tiny_config();
    TiVaTParams params = init_params(cfg);
    json config_doc = model_config_to_json(cfg);
    auto path = (std::filesystem::temp_directory_path() / "tivat_ckpt.json").string();
    save_checkpoint(path, config_doc, params);
    json doc = read_json_file(path);
    CHECK(doc["format"] == "tivat-checkpoint-v1");
    CHECK(doc["config"]["patch"] == cfg.patch_len);
    TiVaTParams loaded = load_checkpoint_params(doc, cfg);
    auto a = named_parameters(params);
    auto b = named_parameters(loaded);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].second.data() == b[i].second.data());  // bit-exact float64 payload
    }
    SECTION("shape mismatch rejected") {
        ModelConfig other = cfg;
        other.horizon = 6;  // projector shape changes
        REQUIRE_THROWS_WITH(load_checkpoint_params(doc, other), Catch::Contains("shape"));
    }
}
