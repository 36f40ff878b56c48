#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tivat/tensor.hpp"
#include "tivat/util.hpp"

namespace tivat {

enum class OffsetMode { points, guidelines_no_sampling, guidelines_with_sampling };
enum class SamplingMode { separate, common, none };
enum class Sampler { dtv, random };
enum class AttentionMode { ja, full };

struct GridPoint {
    std::size_t p = 0;  // patch index
    std::size_t v = 0;  // variate index
    bool operator==(const GridPoint& o) const { return p == o.p && v == o.v; }
};

inline std::size_t grid_flat(const GridPoint& g, std::size_t variates) {
    return g.p * variates + g.v;
}

// Query-conditioned offset heads. Slot counts are fixed fractions of each
// axis, at least one per axis.
struct OffsetParams {
    Tensor t_weight;  // D x n_dt
    Tensor t_bias;    // n_dt
    Tensor v_weight;  // D x n_dv
    Tensor v_bias;    // n_dv
};

inline std::size_t offset_slot_count(double percentage, std::size_t axis_len) {
    if (!(percentage > 0.0) || percentage > 1.0) {
        throw std::invalid_argument(detail::msg("offsets: percentage ", percentage,
                                                " outside (0, 1]"));
    }
    const auto n = static_cast<std::size_t>(
        std::llround(percentage * static_cast<double>(axis_len)));
    return std::clamp<std::size_t>(n, 1, axis_len);
}

// Raw (unconstrained) offsets for one query; plain value arithmetic, the
// discretization below carries no gradient.
inline std::pair<std::vector<double>, std::vector<double>> extract_offsets(
    const double* query, std::size_t dim, const OffsetParams& params) {
    auto head = [&](const Tensor& w, const Tensor& b) {
        const std::size_t slots = w.dim(1);
        std::vector<double> raw(slots);
        for (std::size_t s = 0; s < slots; ++s) {
            double acc = b(s);
            for (std::size_t d = 0; d < dim; ++d) acc += query[d] * w(d, s);
            raw[s] = acc;
        }
        return raw;
    };
    return {head(params.t_weight, params.t_bias), head(params.v_weight, params.v_bias)};
}

// Sigmoid squashes the raw value into (0, 1); nearest rounding then lands on
// an absolute in-grid coordinate.
inline std::size_t normalize_discretize(double raw, std::size_t axis_len) {
    if (axis_len == 0) throw std::invalid_argument("normalize_discretize: empty axis");
    const double pos = detail::sigmoid(raw) * static_cast<double>(axis_len - 1);
    const auto idx = static_cast<std::size_t>(std::llround(pos));
    return std::min(idx, axis_len - 1);
}

namespace detail {

inline void pool_insert(std::vector<GridPoint>& pool, std::vector<char>& seen,
                        GridPoint g, std::size_t variates) {
    char& flag = seen[grid_flat(g, variates)];
    if (!flag) {
        flag = 1;
        pool.push_back(g);
    }
}

}  // namespace detail

// Guideline expansion: every temporal offset contributes its full variate row,
// every variate offset its full temporal column. Duplicates collapse,
// insertion order is kept.
inline std::vector<GridPoint> build_cross_axis_pool(const std::vector<std::size_t>& t_indices,
                                                    const std::vector<std::size_t>& v_indices,
                                                    std::size_t patches, std::size_t variates) {
    std::vector<GridPoint> pool;
    std::vector<char> seen(patches * variates, 0);
    for (std::size_t t : t_indices)
        for (std::size_t v = 0; v < variates; ++v)
            detail::pool_insert(pool, seen, {t, v}, variates);
    for (std::size_t v : v_indices)
        for (std::size_t p = 0; p < patches; ++p)
            detail::pool_insert(pool, seen, {p, v}, variates);
    return pool;
}

// Offset coordinates used directly as candidates, paired with the reference
// row/column, without guideline expansion.
inline std::vector<GridPoint> build_offset_points_pool(const GridPoint& ref,
                                                       const std::vector<std::size_t>& t_indices,
                                                       const std::vector<std::size_t>& v_indices,
                                                       std::size_t patches,
                                                       std::size_t variates) {
    std::vector<GridPoint> pool;
    std::vector<char> seen(patches * variates, 0);
    for (std::size_t t : t_indices) detail::pool_insert(pool, seen, {t, ref.v}, variates);
    for (std::size_t v : v_indices) detail::pool_insert(pool, seen, {ref.p, v}, variates);
    return pool;
}

// Same-variate column plus same-time row; the reference itself stays in,
// counted once.
inline std::vector<GridPoint> build_self_axis_pool(const GridPoint& ref, std::size_t patches,
                                                   std::size_t variates) {
    if (ref.p >= patches || ref.v >= variates) {
        throw std::out_of_range(detail::msg("self pool: reference (", ref.p, ",", ref.v,
                                            ") outside grid ", patches, "x", variates));
    }
    std::vector<GridPoint> pool;
    pool.reserve(patches + variates - 1);
    for (std::size_t p = 0; p < patches; ++p) pool.push_back({p, ref.v});
    for (std::size_t v = 0; v < variates; ++v)
        if (v != ref.v) pool.push_back({ref.p, v});
    return pool;
}

// Top-K pool positions by squared Euclidean distance in the 2-D embedding,
// ties broken by lower pool index.
inline std::vector<std::size_t> dtv_select(const double* query_xy,
                                           const std::vector<double>& pool_xy,
                                           std::size_t pool_size, std::size_t k) {
    if (pool_size == 0) throw std::invalid_argument("dtv: empty candidate pool");
    k = std::min(k, pool_size);
    std::vector<std::pair<double, std::size_t>> keyed(pool_size);
    for (std::size_t i = 0; i < pool_size; ++i) {
        const double dx = pool_xy[2 * i] - query_xy[0];
        const double dy = pool_xy[2 * i + 1] - query_xy[1];
        keyed[i] = {dx * dx + dy * dy, i};
    }
    std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k),
                      keyed.end());
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = keyed[i].second;
    return out;
}

// Uniform draw of K distinct pool positions, returned in ascending order.
inline std::vector<std::size_t> random_select(std::size_t pool_size, std::size_t k,
                                              std::uint64_t seed) {
    if (pool_size == 0) throw std::invalid_argument("random sampler: empty candidate pool");
    k = std::min(k, pool_size);
    std::vector<std::size_t> idx(pool_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Spec-level DTV sampling over explicit pool features: project query and pool
// into 2-D with `proj_2d`, select, and gather the selected feature rows.
inline std::pair<std::vector<std::size_t>, Tensor> dtv_sample(const Tensor& query,
                                                              const Tensor& pool_features,
                                                              const Tensor& proj_2d,
                                                              std::size_t k) {
    if (pool_features.rank() != 2 || pool_features.dim(0) == 0) {
        throw std::invalid_argument("dtv_sample: empty candidate pool");
    }
    const std::size_t m = pool_features.dim(0), dim = pool_features.dim(1);
    if (query.size() != dim || proj_2d.rank() != 2 || proj_2d.dim(0) != dim ||
        proj_2d.dim(1) != 2) {
        throw std::invalid_argument(detail::msg("dtv_sample: incompatible shapes, pool ",
                                                shape_str(pool_features.shape()), ", query ",
                                                shape_str(query.shape()), ", proj ",
                                                shape_str(proj_2d.shape())));
    }
    auto project = [&](const double* row, double* xy) {
        xy[0] = xy[1] = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            xy[0] += row[d] * proj_2d(d, 0);
            xy[1] += row[d] * proj_2d(d, 1);
        }
    };
    double q_xy[2];
    project(query.data().data(), q_xy);
    std::vector<double> pool_xy(2 * m);
    for (std::size_t i = 0; i < m; ++i)
        project(pool_features.data().data() + i * dim, pool_xy.data() + 2 * i);
    auto indices = dtv_select(q_xy, pool_xy, m, k);
    return {indices, gather(pool_features, indices)};
}

// Switches that shape candidate pools and sampling for one forward pass.
struct SampleSpec {
    OffsetMode offset_mode = OffsetMode::guidelines_with_sampling;
    SamplingMode sampling_mode = SamplingMode::separate;
    Sampler sampler_self = Sampler::dtv;
    Sampler sampler_cross = Sampler::dtv;
    std::size_t k_self = 40;
    std::size_t k_cross = 20;
    bool soft_scores = false;
    bool use_cross_pool = true;
};

// Identifies one forward pass for seeding the random sampler.
struct SampleContext {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t sample = 0;
};

struct SampledSet {
    std::vector<std::size_t> cross_indices;  // into the cross-axis pool
    std::vector<std::size_t> self_indices;   // into the self-axis pool
    std::vector<GridPoint> cross_points;
    std::vector<GridPoint> self_points;
};

// Pools plus the sampled subset for a single query.
struct QuerySelection {
    std::vector<GridPoint> cross_pool;
    std::vector<GridPoint> self_pool;
    SampledSet sampled;
};

namespace detail {

inline std::vector<std::size_t> run_sampler(Sampler sampler, const double* q_xy,
                                            const std::vector<double>& pool_xy,
                                            std::size_t pool_size, std::size_t k,
                                            std::uint64_t seed) {
    if (sampler == Sampler::dtv) return dtv_select(q_xy, pool_xy, pool_size, k);
    return random_select(pool_size, k, seed);
}

inline std::vector<double> pool_coords(const std::vector<GridPoint>& pool,
                                       const std::vector<double>& grid_xy,
                                       std::size_t variates) {
    std::vector<double> xy(2 * pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const std::size_t f = grid_flat(pool[i], variates);
        xy[2 * i] = grid_xy[2 * f];
        xy[2 * i + 1] = grid_xy[2 * f + 1];
    }
    return xy;
}

}  // namespace detail

// Candidate construction and sampling for the query at `ref`. `query_row`
// points at the query's D features, `grid_xy` at the 2-D projections of all
// grid tokens (row-major, 2 per token).
inline QuerySelection select_for_query(const double* query_row, std::size_t dim,
                                       const std::vector<double>& grid_xy,
                                       const GridPoint& ref, std::size_t patches,
                                       std::size_t variates, const OffsetParams& offsets,
                                       const SampleSpec& spec, const SampleContext& ctx,
                                       std::size_t block_index) {
    QuerySelection sel;
    const std::size_t qi = grid_flat(ref, variates);

    if (spec.use_cross_pool) {
        auto [raw_t, raw_v] = extract_offsets(query_row, dim, offsets);
        std::vector<std::size_t> t_idx(raw_t.size()), v_idx(raw_v.size());
        for (std::size_t i = 0; i < raw_t.size(); ++i)
            t_idx[i] = normalize_discretize(raw_t[i], patches);
        for (std::size_t i = 0; i < raw_v.size(); ++i)
            v_idx[i] = normalize_discretize(raw_v[i], variates);
        sel.cross_pool = spec.offset_mode == OffsetMode::points
                             ? build_offset_points_pool(ref, t_idx, v_idx, patches, variates)
                             : build_cross_axis_pool(t_idx, v_idx, patches, variates);
    }
    if (spec.offset_mode != OffsetMode::points) {
        sel.self_pool = build_self_axis_pool(ref, patches, variates);
    }
    if (sel.cross_pool.empty() && sel.self_pool.empty()) {
        throw std::invalid_argument("ja attention: no attention candidates for query");
    }

    const double q_xy[2] = {grid_xy[2 * qi], grid_xy[2 * qi + 1]};
    const bool sample = spec.offset_mode == OffsetMode::guidelines_with_sampling &&
                        spec.sampling_mode != SamplingMode::none;

    auto take_all = [](const std::vector<GridPoint>& pool) {
        std::vector<std::size_t> all(pool.size());
        std::iota(all.begin(), all.end(), 0);
        return all;
    };

    if (!sample) {
        sel.sampled.cross_indices = take_all(sel.cross_pool);
        sel.sampled.self_indices = take_all(sel.self_pool);
    } else if (spec.sampling_mode == SamplingMode::separate) {
        if (!sel.cross_pool.empty()) {
            auto xy = detail::pool_coords(sel.cross_pool, grid_xy, variates);
            sel.sampled.cross_indices = detail::run_sampler(
                spec.sampler_cross, q_xy, xy, sel.cross_pool.size(), spec.k_cross,
                detail::mix_seed(ctx.seed, ctx.step, ctx.sample, block_index * 2 + 0, qi));
        }
        auto xy = detail::pool_coords(sel.self_pool, grid_xy, variates);
        sel.sampled.self_indices = detail::run_sampler(
            spec.sampler_self, q_xy, xy, sel.self_pool.size(), spec.k_self,
            detail::mix_seed(ctx.seed, ctx.step, ctx.sample, block_index * 2 + 1, qi));
    } else {  // common: one draw over the concatenated pools
        std::vector<GridPoint> merged = sel.cross_pool;
        merged.insert(merged.end(), sel.self_pool.begin(), sel.self_pool.end());
        auto xy = detail::pool_coords(merged, grid_xy, variates);
        const Sampler joint = (spec.sampler_self == Sampler::random &&
                               spec.sampler_cross == Sampler::random)
                                  ? Sampler::random
                                  : Sampler::dtv;
        auto picked = detail::run_sampler(
            joint, q_xy, xy, merged.size(), spec.k_self + spec.k_cross,
            detail::mix_seed(ctx.seed, ctx.step, ctx.sample, block_index * 2 + 0, qi));
        for (std::size_t i : picked) {
            if (i < sel.cross_pool.size())
                sel.sampled.cross_indices.push_back(i);
            else
                sel.sampled.self_indices.push_back(i - sel.cross_pool.size());
        }
    }
    for (std::size_t i : sel.sampled.cross_indices)
        sel.sampled.cross_points.push_back(sel.cross_pool[i]);
    for (std::size_t i : sel.sampled.self_indices)
        sel.sampled.self_points.push_back(sel.self_pool[i]);
    return sel;
}

// Scaled dot-product attention of one projected query against projected
// key/value rows.
inline Tensor attend_core(const Tensor& q_proj, const Tensor& k_proj, const Tensor& v_proj) {
    if (k_proj.dim(0) == 0) throw std::invalid_argument("attention: empty key/value set");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q_proj.dim(1)));
    Tensor scores = scale(matmul(k_proj, transpose(q_proj)), inv_sqrt_d);  // N x 1
    Tensor weights = softmax(scores, 0);
    return matmul(transpose(weights), v_proj);  // 1 x D
}

// Fused per-query attention over selected rows of pre-projected grids:
// equivalent to attend_core(gather(q_all, {qi}), gather(k_all, idx),
// gather(v_all, idx)) with one recorded node instead of a chain.
inline Tensor attend_rows(const Tensor& q_all, const Tensor& k_all, const Tensor& v_all,
                          std::size_t query_index, std::vector<std::size_t> kv_indices) {
    if (kv_indices.empty()) throw std::invalid_argument("attention: empty key/value set");
    const std::size_t dim = q_all.dim(1);
    const std::size_t n = kv_indices.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
    const double* q = q_all.data().data() + query_index * dim;

    std::vector<double> weights(n);
    double max_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const double* k = k_all.data().data() + kv_indices[i] * dim;
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += k[d] * q[d];
        weights[i] = s * inv_sqrt_d;
        max_score = std::max(max_score, weights[i]);
    }
    double denom = 0.0;
    for (double& w : weights) {
        w = std::exp(w - max_score);
        denom += w;
    }
    for (double& w : weights) w /= denom;

    std::vector<double> out(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* v = v_all.data().data() + kv_indices[i] * dim;
        const double w = weights[i];
        for (std::size_t d = 0; d < dim; ++d) out[d] += w * v[d];
    }
    auto qn = q_all.node(), kn = k_all.node(), vn = v_all.node();
    return detail::op_result(
        "attend_rows", Shape{1, dim}, std::move(out), {q_all, k_all, v_all},
        [qn, kn, vn, query_index, kv_indices = std::move(kv_indices),
         weights = std::move(weights), dim, inv_sqrt_d](TensorNode& self) {
            if (self.grad.empty()) return;
            const std::size_t n = kv_indices.size();
            const double* dout = self.grad.data();
            const double* q = qn->data.data() + query_index * dim;
            auto* gq = detail::grad_of(qn);
            auto* gk = detail::grad_of(kn);
            auto* gv = detail::grad_of(vn);
            // dw_i = V_i . dout ; ds = w*(dw - sum(w .* dw)) / sqrt(D)
            std::vector<double> dw(n);
            double mix = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* v = vn->data.data() + kv_indices[i] * dim;
                double acc = 0.0;
                for (std::size_t d = 0; d < dim; ++d) acc += v[d] * dout[d];
                dw[i] = acc;
                mix += weights[i] * acc;
            }
            for (std::size_t i = 0; i < n; ++i) {
                const double ds = weights[i] * (dw[i] - mix) * inv_sqrt_d;
                const double* k = kn->data.data() + kv_indices[i] * dim;
                if (gv) {
                    double* gvrow = gv->data() + kv_indices[i] * dim;
                    for (std::size_t d = 0; d < dim; ++d) gvrow[d] += weights[i] * dout[d];
                }
                if (gk) {
                    double* gkrow = gk->data() + kv_indices[i] * dim;
                    for (std::size_t d = 0; d < dim; ++d) gkrow[d] += ds * q[d];
                }
                if (gq) {
                    double* gqrow = gq->data() + query_index * dim;
                    for (std::size_t d = 0; d < dim; ++d) gqrow[d] += ds * k[d];
                }
            }
        });
}

// Full query/key/value projection followed by scaled dot-product attention.
inline Tensor cross_attend(const Tensor& query, const Tensor& keys_values, const Tensor& wq,
                           const Tensor& bq, const Tensor& wk, const Tensor& bk,
                           const Tensor& wv, const Tensor& bv) {
    if (keys_values.rank() != 2 || keys_values.dim(0) == 0) {
        throw std::invalid_argument("cross_attend: empty key/value set");
    }
    return attend_core(linear(query, wq, bq), linear(keys_values, wk, bk),
                       linear(keys_values, wv, bv));
}

// attend_rows for every grid query at once: row qi of the result is the
// attention of query qi over its own candidate rows. One recorded node for
// the whole block keeps the tape small.
inline Tensor attend_many(const Tensor& q_all, const Tensor& k_all, const Tensor& v_all,
                          std::vector<std::vector<std::size_t>> kv_indices) {
    const std::size_t n = q_all.dim(0), dim = q_all.dim(1);
    if (kv_indices.size() != n) {
        throw std::invalid_argument("attention: need one candidate list per query");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> out(n * dim, 0.0);
    std::vector<std::vector<double>> weights(n);
    const double* qd = q_all.data().data();
    const double* kd = k_all.data().data();
    const double* vd = v_all.data().data();
    for (std::size_t qi = 0; qi < n; ++qi) {
        const auto& idx = kv_indices[qi];
        if (idx.empty()) throw std::invalid_argument("attention: empty key/value set");
        const double* q = qd + qi * dim;
        auto& w = weights[qi];
        w.resize(idx.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* k = kd + idx[i] * dim;
            double s = 0.0;
            for (std::size_t d = 0; d < dim; ++d) s += k[d] * q[d];
            w[i] = s * inv_sqrt_d;
            mx = std::max(mx, w[i]);
        }
        double denom = 0.0;
        for (double& wi : w) {
            wi = std::exp(wi - mx);
            denom += wi;
        }
        double* orow = out.data() + qi * dim;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double wi = (w[i] /= denom);
            const double* v = vd + idx[i] * dim;
            for (std::size_t d = 0; d < dim; ++d) orow[d] += wi * v[d];
        }
    }
    auto qn = q_all.node(), kn = k_all.node(), vn = v_all.node();
    return detail::op_result(
        "attend_many", Shape{n, dim}, std::move(out), {q_all, k_all, v_all},
        [qn, kn, vn, kv_indices = std::move(kv_indices), weights = std::move(weights), dim,
         inv_sqrt_d](TensorNode& self) {
            if (self.grad.empty()) return;
            auto* gq = detail::grad_of(qn);
            auto* gk = detail::grad_of(kn);
            auto* gv = detail::grad_of(vn);
            const std::size_t n = kv_indices.size();
            std::vector<double> dw;
            for (std::size_t qi = 0; qi < n; ++qi) {
                const auto& idx = kv_indices[qi];
                const auto& w = weights[qi];
                const double* dout = self.grad.data() + qi * dim;
                const double* q = qn->data.data() + qi * dim;
                dw.assign(idx.size(), 0.0);
                double mix = 0.0;
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const double* v = vn->data.data() + idx[i] * dim;
                    double acc = 0.0;
                    for (std::size_t d = 0; d < dim; ++d) acc += v[d] * dout[d];
                    dw[i] = acc;
                    mix += w[i] * acc;
                }
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const double ds = w[i] * (dw[i] - mix) * inv_sqrt_d;
                    const double* k = kn->data.data() + idx[i] * dim;
                    if (gv) {
                        double* row = gv->data() + idx[i] * dim;
                        for (std::size_t d = 0; d < dim; ++d) row[d] += w[i] * dout[d];
                    }
                    if (gk) {
                        double* row = gk->data() + idx[i] * dim;
                        for (std::size_t d = 0; d < dim; ++d) row[d] += ds * q[d];
                    }
                    if (gq) {
                        double* row = gq->data() + qi * dim;
                        for (std::size_t d = 0; d < dim; ++d) row[d] += ds * k[d];
                    }
                }
            }
        });
}

struct JABlockParams {
    Tensor ln1_gamma, ln1_beta;  // D
    Tensor ln2_gamma, ln2_beta;  // D
    Tensor q_weight, q_bias;     // D x D, D
    Tensor k_weight, k_bias;
    Tensor v_weight, v_bias;
    Tensor proj_2d;              // D x 2
    OffsetParams offsets;
    Tensor ffn_w1, ffn_b1;       // D x F, F
    Tensor ffn_w2, ffn_b2;       // F x D, D
};

namespace detail {

// 2-D coordinates of every grid token under proj_2d, values only. The hard
// top-K selection never backpropagates, so this stays off the tape.
inline std::vector<double> project_grid_2d(const Tensor& feats, const Tensor& proj_2d) {
    const std::size_t n = feats.dim(0), dim = feats.dim(1);
    std::vector<double> xy(2 * n, 0.0);
    const double* f = feats.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double x = 0.0, y = 0.0;
        const double* row = f + i * dim;
        for (std::size_t d = 0; d < dim; ++d) {
            x += row[d] * proj_2d(d, 0);
            y += row[d] * proj_2d(d, 1);
        }
        xy[2 * i] = x;
        xy[2 * i + 1] = y;
    }
    return xy;
}

// softmax(-distance) row weights for the selected candidates, on the tape so
// proj_2d keeps a gradient path.
inline Tensor soft_score_weights(const Tensor& normed, std::size_t query_flat,
                                 const std::vector<std::size_t>& selected_flat,
                                 const Tensor& proj_2d) {
    Tensor q2 = matmul(gather(normed, {query_flat}), proj_2d);      // 1 x 2
    Tensor c2 = matmul(gather(normed, selected_flat), proj_2d);     // K x 2
    Tensor dist = pairwise_distance(q2, c2);                        // 1 x K
    Tensor w = softmax(scale(dist, -1.0), 1);
    return reshape(w, {selected_flat.size()});
}

}  // namespace detail

// One encoder block with pre-norm residual wiring:
//   Z1 = Z + JAattn(LN(Z)); Z2 = Z1 + FFN(LN(Z1)).
inline Tensor ja_block_forward(const Tensor& z, const JABlockParams& params,
                               const SampleSpec& spec, const SampleContext& ctx,
                               std::size_t block_index) {
    if (z.rank() != 3) {
        throw std::invalid_argument(detail::msg("ja block: expected L_N x V x D input, got ",
                                                shape_str(z.shape())));
    }
    const std::size_t patches = z.dim(0), variates = z.dim(1), dim = z.dim(2);
    const std::size_t n = patches * variates;
    Tensor z_flat = reshape(z, {n, dim});
    Tensor normed = layer_norm(z_flat, params.ln1_gamma, params.ln1_beta);

    // Projections are row-wise, so projecting the grid once and gathering the
    // selected rows matches projecting each gathered candidate set.
    Tensor q_all = linear(normed, params.q_weight, params.q_bias);
    Tensor k_all = linear(normed, params.k_weight, params.k_bias);
    Tensor v_all = linear(normed, params.v_weight, params.v_bias);
    const std::vector<double> grid_xy = detail::project_grid_2d(normed, params.proj_2d);

    Tensor attn;
    if (!spec.soft_scores) {
        std::vector<std::vector<std::size_t>> kv_lists(n);
        for (std::size_t p = 0; p < patches; ++p) {
            for (std::size_t v = 0; v < variates; ++v) {
                const GridPoint ref{p, v};
                const std::size_t qi = grid_flat(ref, variates);
                QuerySelection sel =
                    select_for_query(normed.data().data() + qi * dim, dim, grid_xy, ref,
                                     patches, variates, params.offsets, spec, ctx, block_index);
                auto& kv = kv_lists[qi];
                kv.reserve(sel.sampled.cross_points.size() + sel.sampled.self_points.size());
                for (const GridPoint& g : sel.sampled.cross_points)
                    kv.push_back(grid_flat(g, variates));
                for (const GridPoint& g : sel.sampled.self_points)
                    kv.push_back(grid_flat(g, variates));
            }
        }
        attn = attend_many(q_all, k_all, v_all, std::move(kv_lists));
    } else {
        std::vector<Tensor> outputs;
        outputs.reserve(n);
        for (std::size_t p = 0; p < patches; ++p) {
            for (std::size_t v = 0; v < variates; ++v) {
                const GridPoint ref{p, v};
                const std::size_t qi = grid_flat(ref, variates);
                QuerySelection sel =
                    select_for_query(normed.data().data() + qi * dim, dim, grid_xy, ref,
                                     patches, variates, params.offsets, spec, ctx, block_index);
                std::vector<std::size_t> cross_flat, self_flat;
                for (const GridPoint& g : sel.sampled.cross_points)
                    cross_flat.push_back(grid_flat(g, variates));
                for (const GridPoint& g : sel.sampled.self_points)
                    self_flat.push_back(grid_flat(g, variates));

                Tensor q_row = gather(q_all, {qi});
                std::vector<Tensor> weighted;
                if (!cross_flat.empty()) {
                    Tensor w = detail::soft_score_weights(normed, qi, cross_flat,
                                                          params.proj_2d);
                    weighted.push_back(scale_rows(gather(normed, cross_flat), w));
                }
                if (!self_flat.empty()) {
                    Tensor w = detail::soft_score_weights(normed, qi, self_flat,
                                                          params.proj_2d);
                    weighted.push_back(scale_rows(gather(normed, self_flat), w));
                }
                Tensor feats = weighted.size() == 1 ? weighted[0] : concat(weighted, 0);
                outputs.push_back(attend_core(q_row,
                                              linear(feats, params.k_weight, params.k_bias),
                                              linear(feats, params.v_weight, params.v_bias)));
            }
        }
        attn = concat(outputs, 0);  // N x D
    }
    Tensor z1 = add(z_flat, attn);
    Tensor h = layer_norm(z1, params.ln2_gamma, params.ln2_beta);
    h = linear(h, params.ffn_w1, params.ffn_b1);
    h = gelu(h);
    h = linear(h, params.ffn_w2, params.ffn_b2);
    Tensor z2 = add(z1, h);
    return reshape(z2, {patches, variates, dim});
}

// Pools and final selection for one reference point of a block input, as used
// for the guideline mask export.
inline QuerySelection trace_query(const Tensor& z, const JABlockParams& params,
                                  const SampleSpec& spec, const SampleContext& ctx,
                                  std::size_t block_index, const GridPoint& ref) {
    NoGradGuard no_grad;
    const std::size_t patches = z.dim(0), variates = z.dim(1), dim = z.dim(2);
    if (ref.p >= patches || ref.v >= variates) {
        throw std::out_of_range(detail::msg("trace: reference (", ref.p, ",", ref.v,
                                            ") outside grid ", patches, "x", variates));
    }
    Tensor z_flat = reshape(z, {patches * variates, dim});
    Tensor normed = layer_norm(z_flat, params.ln1_gamma, params.ln1_beta);
    const std::vector<double> grid_xy = detail::project_grid_2d(normed, params.proj_2d);
    const std::size_t qi = grid_flat(ref, variates);
    return select_for_query(normed.data().data() + qi * dim, dim, grid_xy, ref, patches,
                            variates, params.offsets, spec, ctx, block_index);
}

// Per-token 2-D embedding plus cosine similarity to the reference token, as
// used for the embedding-space export.
struct TokenEmbedding2D {
    GridPoint grid;
    double x = 0.0, y = 0.0;
    double cosine_to_ref = 0.0;
};

inline std::vector<TokenEmbedding2D> embedding_map_2d(const Tensor& z,
                                                      const JABlockParams& params,
                                                      const GridPoint& ref) {
    NoGradGuard no_grad;
    const std::size_t patches = z.dim(0), variates = z.dim(1), dim = z.dim(2);
    if (ref.p >= patches || ref.v >= variates) {
        throw std::out_of_range(detail::msg("embedding map: reference (", ref.p, ",", ref.v,
                                            ") outside grid ", patches, "x", variates));
    }
    Tensor z_flat = reshape(z, {patches * variates, dim});
    Tensor normed = layer_norm(z_flat, params.ln1_gamma, params.ln1_beta);
    const std::vector<double> grid_xy = detail::project_grid_2d(normed, params.proj_2d);
    const double* ref_row = normed.data().data() + grid_flat(ref, variates) * dim;
    double ref_norm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) ref_norm += ref_row[d] * ref_row[d];
    ref_norm = std::sqrt(std::max(ref_norm, 1e-300));
    std::vector<TokenEmbedding2D> rows;
    rows.reserve(patches * variates);
    for (std::size_t p = 0; p < patches; ++p) {
        for (std::size_t v = 0; v < variates; ++v) {
            const std::size_t f = p * variates + v;
            const double* row = normed.data().data() + f * dim;
            double dot = 0.0, nrm = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                dot += row[d] * ref_row[d];
                nrm += row[d] * row[d];
            }
            nrm = std::sqrt(std::max(nrm, 1e-300));
            rows.push_back({GridPoint{p, v}, grid_xy[2 * f], grid_xy[2 * f + 1],
                            dot / (nrm * ref_norm)});
        }
    }
    return rows;
}

}  // namespace tivat
