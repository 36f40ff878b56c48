#pragma once

#include <stdexcept>
#include <vector>

#include "tivat/tensor.hpp"

namespace tivat {

enum class ResidualMode { none, trend_only, season_only, both };

inline const char* residual_mode_name(ResidualMode m) {
    switch (m) {
        case ResidualMode::none: return "none";
        case ResidualMode::trend_only: return "trend";
        case ResidualMode::season_only: return "season";
        case ResidualMode::both: return "both";
    }
    return "?";
}

struct DecompPair {
    Tensor trend;        // L_H x V
    Tensor seasonality;  // L_H x V
};

// Time-axis linear refinement applied per component, weights shared across
// variates. `mode` selects which component keeps its residual connection.
struct RefineParams {
    Tensor trend_weight;   // L_H x L_H
    Tensor trend_bias;     // L_H
    Tensor season_weight;  // L_H x L_H
    Tensor season_bias;    // L_H
    ResidualMode mode = ResidualMode::both;
};

// Centered moving average along time expressed as a fixed L x L matrix.
// Replicate padding folds the out-of-range taps onto the edge columns, so the
// smoothed output keeps full length.
inline Tensor moving_average_matrix(std::size_t len, std::size_t kernel) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw std::invalid_argument(detail::msg("moving_average: kernel must be odd and "
                                                "positive, got ", kernel));
    }
    if (kernel > 2 * len - 1) {
        throw std::invalid_argument(detail::msg("moving_average: kernel ", kernel,
                                                " too large for length ", len));
    }
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(kernel / 2);
    const double w = 1.0 / static_cast<double>(kernel);
    std::vector<double> m(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::ptrdiff_t o = -half; o <= half; ++o) {
            std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + o;
            if (j < 0) j = 0;
            if (j >= static_cast<std::ptrdiff_t>(len)) j = static_cast<std::ptrdiff_t>(len) - 1;
            m[i * len + static_cast<std::size_t>(j)] += w;
        }
    }
    return Tensor(Shape{len, len}, std::move(m));
}

inline Tensor moving_average(const Tensor& x, std::size_t kernel) {
    if (x.rank() != 2) {
        throw std::invalid_argument(detail::msg("moving_average: expected L_H x V input, got ",
                                                shape_str(x.shape())));
    }
    return matmul(moving_average_matrix(x.dim(0), kernel), x);
}

inline DecompPair st_decompose(const Tensor& x, std::size_t kernel) {
    Tensor trend = moving_average(x, kernel);
    return DecompPair{trend, sub(x, trend)};
}

// Applies the per-component time-axis linear, re-adding the component itself
// where its residual connection is active.
inline DecompPair refine(const DecompPair& pair, const RefineParams& params) {
    auto apply = [](const Tensor& comp, const Tensor& w, const Tensor& b, bool residual) {
        // comp is L_H x V; the linear maps along time, shared across variates.
        Tensor lin = transpose(linear(transpose(comp), w, b));
        return residual ? add(comp, lin) : lin;
    };
    const bool trend_res =
        params.mode == ResidualMode::both || params.mode == ResidualMode::trend_only;
    const bool season_res =
        params.mode == ResidualMode::both || params.mode == ResidualMode::season_only;
    return DecompPair{
        apply(pair.trend, params.trend_weight, params.trend_bias, trend_res),
        apply(pair.seasonality, params.season_weight, params.season_bias, season_res)};
}

}  // namespace tivat
