#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tivat/model.hpp"

namespace tivat {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    explicit AdamState(const std::vector<Tensor>& params) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const Tensor& p : params) {
            m.emplace_back(p.size(), 0.0);
            v.emplace_back(p.size(), 0.0);
        }
    }
};

// Bias-corrected Adam update over the collected parameter tensors.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (params.size() != state.m.size()) {
        throw std::invalid_argument("adam: state does not match parameter count");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const auto& grad = p.node()->grad;
        if (grad.size() != p.size()) {
            throw std::runtime_error(detail::msg("adam: parameter ", i,
                                                 " has no gradient buffer"));
        }
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto& theta = p.data();
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

inline double global_grad_norm(const std::vector<Tensor>& params) {
    double acc = 0.0;
    for (const Tensor& p : params) {
        for (double g : p.node()->grad) acc += g * g;
    }
    return std::sqrt(acc);
}

inline void clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const double factor = max_norm / norm;
    for (Tensor& p : params)
        for (double& g : p.node()->grad_buffer()) g *= factor;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    double mse = 0.0;
    double mae = 0.0;
    std::size_t horizon = 0;
    std::string dataset;
    std::string config_fingerprint;
};

inline json eval_report_to_json(const EvalReport& r) {
    json j;
    j["mse"] = r.mse;
    j["mae"] = r.mae;
    j["horizon"] = r.horizon;
    j["dataset"] = r.dataset;
    j["config_fingerprint"] = r.config_fingerprint;
    return j;
}

using Forecaster =
    std::function<Tensor(const WindowBatch&, const std::vector<std::size_t>&)>;

// MSE/MAE over every element of every window, on the original scale.
inline EvalReport evaluate_forecaster(const Forecaster& forecast, const WindowBatch& test,
                                      std::size_t batch_size) {
    if (test.count == 0) throw std::invalid_argument("evaluate: empty window stream");
    if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be >= 1");
    NoGradGuard no_grad;
    double se = 0.0, ae = 0.0;
    std::size_t elements = 0;
    for (std::size_t begin = 0; begin < test.count; begin += batch_size) {
        const std::size_t end = std::min(test.count, begin + batch_size);
        std::vector<std::size_t> ids(end - begin);
        std::iota(ids.begin(), ids.end(), begin);
        Tensor pred = forecast(test, ids);
        for (std::size_t b = 0; b < ids.size(); ++b) {
            const double* want = test.target(ids[b]);
            const double* got = pred.data().data() + b * test.horizon * test.variates;
            for (std::size_t i = 0; i < test.horizon * test.variates; ++i) {
                const double d = got[i] - want[i];
                se += d * d;
                ae += std::fabs(d);
                ++elements;
            }
        }
    }
    EvalReport report;
    report.mse = se / static_cast<double>(elements);
    report.mae = ae / static_cast<double>(elements);
    report.horizon = test.horizon;
    return report;
}

inline EvalReport evaluate_model(const TiVaTParams& params, const ModelConfig& cfg,
                                 const WindowBatch& test, const std::string& dataset = "") {
    EvalReport report = evaluate_forecaster(
        [&](const WindowBatch& batch, const std::vector<std::size_t>& ids) {
            return forward_batch(batch, ids, params, cfg, 0);
        },
        test, cfg.batch_size);
    report.dataset = dataset;
    report.config_fingerprint = config_fingerprint(cfg);
    return report;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::size_t max_epochs = 20;
    std::size_t patience = 3;
    double clip_norm = 5.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_mse = 0.0;
    double val_mae = 0.0;
};

struct FitResult {
    TiVaTParams params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_mse = std::numeric_limits<double>::infinity();
};

inline json history_to_json(const FitResult& fit) {
    json epochs = json::array();
    for (const EpochRecord& r : fit.history) {
        json e;
        e["epoch"] = r.epoch;
        e["train_loss"] = r.train_loss;
        e["val_mse"] = r.val_mse;
        e["val_mae"] = r.val_mae;
        epochs.push_back(std::move(e));
    }
    json j;
    j["epochs"] = std::move(epochs);
    j["best_epoch"] = fit.best_epoch;
    j["best_val_mse"] = fit.best_val_mse;
    return j;
}

namespace detail {

inline std::vector<std::vector<double>> snapshot_params(std::vector<Tensor>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (Tensor& p : params) snap.push_back(p.data());
    return snap;
}

inline void restore_params(std::vector<Tensor>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].data() = snap[i];
}

}  // namespace detail

// Seeded shuffled mini-batches, early stopping on validation MSE with
// best-checkpoint restore.
inline FitResult fit(const ModelConfig& cfg, const WindowBatch& train, const WindowBatch& val,
                     const TrainOptions& options = {}) {
    if (train.count == 0 || val.count == 0) {
        throw std::invalid_argument("fit: empty train or validation stream");
    }
    FitResult result;
    result.params = init_params(cfg);
    std::vector<Tensor> tensors;
    for (auto& [name, t] : named_parameters(result.params)) tensors.push_back(t);
    AdamState adam(tensors);
    std::mt19937_64 shuffle_rng(detail::splitmix64(cfg.seed ^ 0x9e3779b97f4a7c15ULL));

    std::vector<std::vector<double>> best = detail::snapshot_params(tensors);
    std::size_t patience_counter = 0;
    std::uint64_t step = 0;

    std::vector<std::size_t> order(train.count);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < train.count; begin += cfg.batch_size) {
            const std::size_t end = std::min(train.count, begin + cfg.batch_size);
            std::vector<std::size_t> ids(order.begin() + begin, order.begin() + end);
            double loss_value = 0.0;
            try {
                for (Tensor& t : tensors) t.zero_grad();
                Tensor loss = loss_mse(forward_batch(train, ids, result.params, cfg, step),
                                       target_batch(train, ids));
                loss_value = loss.item();
                backward(loss);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error(detail::msg("fit: training diverged at step ", step,
                                                     ": ", e.what()));
            }
            clip_grad_norm(tensors, options.clip_norm);
            adam_step(tensors, adam, cfg.learning_rate);
            loss_sum += loss_value;
            ++batches;
            ++step;
        }
        EvalReport val_report = evaluate_model(result.params, cfg, val);
        result.history.push_back(
            {epoch, loss_sum / static_cast<double>(batches), val_report.mse, val_report.mae});
        if (val_report.mse < result.best_val_mse) {
            result.best_val_mse = val_report.mse;
            result.best_epoch = epoch;
            best = detail::snapshot_params(tensors);
            patience_counter = 0;
        } else {
            ++patience_counter;
            if (patience_counter >= options.patience) break;
        }
    }
    detail::restore_params(tensors, best);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string variant;
    EvalReport report;
};

inline std::vector<std::pair<std::string, ModelConfig>> ablation_variants(
    const ModelConfig& base, const std::string& axis) {
    std::vector<std::pair<std::string, ModelConfig>> rows;
    auto with = [&](const std::string& name, auto&& mutate) {
        ModelConfig cfg = base;
        mutate(cfg);
        rows.emplace_back(name, cfg);
    };
    if (axis == "attention") {
        with("full_attention", [](ModelConfig& c) { c.attention_mode = AttentionMode::full; });
        with("ja_attention", [](ModelConfig& c) { c.attention_mode = AttentionMode::ja; });
    } else if (axis == "offset") {
        with("points", [](ModelConfig& c) { c.offset_mode = OffsetMode::points; });
        with("guidelines_no_sampling",
             [](ModelConfig& c) { c.offset_mode = OffsetMode::guidelines_no_sampling; });
        with("guidelines_with_sampling",
             [](ModelConfig& c) { c.offset_mode = OffsetMode::guidelines_with_sampling; });
    } else if (axis == "sampler") {
        auto set = [](ModelConfig& c, Sampler self, Sampler cross) {
            c.offset_mode = OffsetMode::guidelines_with_sampling;
            c.sampler_self = self;
            c.sampler_cross = cross;
        };
        with("self_random_cross_random",
             [&](ModelConfig& c) { set(c, Sampler::random, Sampler::random); });
        with("self_random_cross_dtv",
             [&](ModelConfig& c) { set(c, Sampler::random, Sampler::dtv); });
        with("self_dtv_cross_random",
             [&](ModelConfig& c) { set(c, Sampler::dtv, Sampler::random); });
        with("self_dtv_cross_dtv",
             [&](ModelConfig& c) { set(c, Sampler::dtv, Sampler::dtv); });
    } else if (axis == "sampling_mode") {
        auto set = [](ModelConfig& c, SamplingMode m) {
            c.offset_mode = m == SamplingMode::none ? OffsetMode::guidelines_no_sampling
                                                    : OffsetMode::guidelines_with_sampling;
            c.sampling_mode = m;
        };
        with("none", [&](ModelConfig& c) { set(c, SamplingMode::none); });
        with("common", [&](ModelConfig& c) { set(c, SamplingMode::common); });
        with("separate", [&](ModelConfig& c) { set(c, SamplingMode::separate); });
    } else if (axis == "residual") {
        with("none", [](ModelConfig& c) { c.residual_mode = ResidualMode::none; });
        with("trend", [](ModelConfig& c) { c.residual_mode = ResidualMode::trend_only; });
        with("season", [](ModelConfig& c) { c.residual_mode = ResidualMode::season_only; });
        with("both", [](ModelConfig& c) { c.residual_mode = ResidualMode::both; });
    } else {
        throw std::invalid_argument(detail::msg(
            "ablation: unknown axis '", axis,
            "', expected one of {attention, offset, sampler, sampling_mode, residual}"));
    }
    return rows;
}

// Trains one model per variant with the shared seed and data, so metric
// differences are attributable to the switch alone.
inline std::vector<AblationRow> run_ablation(const ModelConfig& base, const std::string& axis,
                                             const WindowBatch& train, const WindowBatch& val,
                                             const WindowBatch& test,
                                             const std::string& dataset = "",
                                             const TrainOptions& options = {}) {
    std::vector<AblationRow> rows;
    for (auto& [name, cfg] : ablation_variants(base, axis)) {
        FitResult fitted = fit(cfg, train, val, options);
        rows.push_back({name, evaluate_model(fitted.params, cfg, test, dataset)});
    }
    return rows;
}

inline json ablation_to_json(const std::vector<AblationRow>& rows) {
    json out = json::array();
    for (const AblationRow& r : rows) {
        json e;
        e["variant"] = r.variant;
        e["mse"] = r.report.mse;
        e["mae"] = r.report.mae;
        out.push_back(std::move(e));
    }
    return out;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(detail::msg("ablation: cannot write '", path, "'"));
    out << "variant,mse,mae\n";
    char buf[64];
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.report.mse, r.report.mae);
        out << r.variant << ',' << buf << '\n';
    }
}

}  // namespace tivat
