#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "tivat/tensor.hpp"

namespace tivat {

inline std::size_t patch_count(std::size_t lookback, std::size_t patch_len,
                               std::size_t stride) {
    if (patch_len == 0 || patch_len > lookback) {
        throw std::invalid_argument(detail::msg("patch: patch length ", patch_len,
                                                " invalid for lookback ", lookback));
    }
    if (stride == 0) throw std::invalid_argument("patch: stride must be positive");
    return (lookback - patch_len) / stride + 1;
}

// Slices x: L_H x V into overlapping temporal patches, giving L_N x V x L_P.
// A trailing remainder that no full patch covers is dropped.
inline Tensor patch(const Tensor& x, std::size_t patch_len, std::size_t stride) {
    if (x.rank() != 2) {
        throw std::invalid_argument(detail::msg("patch: expected L_H x V input, got ",
                                                shape_str(x.shape())));
    }
    const std::size_t lookback = x.dim(0), variates = x.dim(1);
    const std::size_t n = patch_count(lookback, patch_len, stride);
    std::vector<std::size_t> rows;
    rows.reserve(n * patch_len);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t j = 0; j < patch_len; ++j) rows.push_back(p * stride + j);
    Tensor stacked = gather(x, rows);                        // (L_N*L_P) x V
    Tensor grouped = reshape(stacked, {n, patch_len, variates});
    return permute(grouped, {0, 2, 1});                      // L_N x V x L_P
}

// Fixed sinusoidal table over the patch axis: PE[p, 2i] = sin(p / 10000^(2i/D)),
// PE[p, 2i+1] = cos of the same argument.
inline Tensor positional_encoding(std::size_t patches, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) {
        throw std::invalid_argument(detail::msg("positional_encoding: dim must be even, got ",
                                                dim));
    }
    std::vector<double> pe(patches * dim);
    for (std::size_t p = 0; p < patches; ++p) {
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) /
                                                      static_cast<double>(dim));
            const double arg = static_cast<double>(p) / rate;
            pe[p * dim + 2 * i] = std::sin(arg);
            pe[p * dim + 2 * i + 1] = std::cos(arg);
        }
    }
    return Tensor(Shape{patches, dim}, std::move(pe));
}

struct EmbedParams {
    Tensor weight;  // L_P x D
    Tensor bias;    // D
    Tensor pos;     // L_N x D, fixed sinusoidal table
};

// Token embedding: per-(patch, variate) linear from patch values to D, plus
// the positional row of the patch broadcast over variates.
inline Tensor embed(const Tensor& patches, const EmbedParams& params) {
    if (patches.rank() != 3) {
        throw std::invalid_argument(detail::msg("embed: expected L_N x V x L_P input, got ",
                                                shape_str(patches.shape())));
    }
    const std::size_t n = patches.dim(0), variates = patches.dim(1), plen = patches.dim(2);
    if (params.weight.rank() != 2 || params.weight.dim(0) != plen) {
        throw std::invalid_argument(detail::msg("embed: weight ", shape_str(params.weight.shape()),
                                                " incompatible with patch length ", plen));
    }
    const std::size_t dim = params.weight.dim(1);
    if (params.pos.rank() != 2 || params.pos.dim(0) != n || params.pos.dim(1) != dim) {
        throw std::invalid_argument(detail::msg("embed: positional table ",
                                                shape_str(params.pos.shape()),
                                                " must be ", n, "x", dim));
    }
    Tensor flat = reshape(patches, {n * variates, plen});
    Tensor tokens = linear(flat, params.weight, params.bias);  // (L_N*V) x D
    // broadcast the positional row of each patch over its variates
    std::vector<double> posb(n * variates * dim);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t v = 0; v < variates; ++v)
            for (std::size_t d = 0; d < dim; ++d)
                posb[(p * variates + v) * dim + d] = params.pos(p, d);
    Tensor pos_full(Shape{n * variates, dim}, std::move(posb));
    return reshape(add(tokens, pos_full), {n, variates, dim});
}

}  // namespace tivat
