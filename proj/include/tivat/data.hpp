#pragma once

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tivat/util.hpp"

namespace tivat {

// Raw multivariate series: T_total rows by V variates plus opaque timestamps.
struct SeriesFrame {
    std::vector<std::string> variate_names;
    std::vector<std::string> timestamps;
    std::vector<double> values;  // row-major, rows() x cols()

    std::size_t rows() const { return timestamps.size(); }
    std::size_t cols() const { return variate_names.size(); }
    double at(std::size_t t, std::size_t v) const { return values[t * cols() + v]; }
    double& at(std::size_t t, std::size_t v) { return values[t * cols() + v]; }
};

struct SplitSpec {
    std::size_t train_len = 0;
    std::size_t val_len = 0;
    std::size_t test_len = 0;
};

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

// All stride-1 sliding windows of one split segment. Inputs are kept raw;
// per-window per-variate stats are precomputed from each lookback.
struct WindowBatch {
    std::size_t count = 0;
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::size_t variates = 0;
    std::vector<double> inputs;   // count x lookback x variates
    std::vector<double> targets;  // count x horizon x variates
    std::vector<NormStats> norm_stats;  // count x variates

    const double* input(std::size_t w) const { return inputs.data() + w * lookback * variates; }
    const double* target(std::size_t w) const { return targets.data() + w * horizon * variates; }
    const NormStats* stats(std::size_t w) const { return norm_stats.data() + w * variates; }
};

namespace detail {

inline double parse_strict_double(const std::string& cell, std::size_t line, std::size_t col) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(begin, &end);
    while (end && *end == ' ') ++end;
    if (end == begin || (end && *end != '\0') || !std::isfinite(v)) {
        throw std::runtime_error(msg("csv: non-numeric cell '", cell, "' at line ", line,
                                     ", column ", col + 1));
    }
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

// First header column is the timestamp (kept verbatim); the rest must parse
// as finite float64.
inline SeriesFrame load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(detail::msg("csv: cannot open file '", path, "'"));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(detail::msg("csv: empty file '", path, "'"));
    auto header = detail::split_csv_line(line);
    if (header.size() < 2) {
        throw std::runtime_error(detail::msg(
            "csv: expected a timestamp column plus at least one variate, got ",
            header.size(), " column(s)"));
    }
    SeriesFrame frame;
    frame.variate_names.assign(header.begin() + 1, header.end());
    const std::size_t v_count = frame.variate_names.size();
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != v_count + 1) {
            throw std::runtime_error(detail::msg("csv: line ", line_no, " has ", cells.size(),
                                                 " columns, expected ", v_count + 1));
        }
        frame.timestamps.push_back(cells[0]);
        for (std::size_t v = 0; v < v_count; ++v) {
            frame.values.push_back(detail::parse_strict_double(cells[v + 1], line_no, v + 1));
        }
    }
    return frame;
}

inline void write_csv(const SeriesFrame& frame, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(detail::msg("csv: cannot write file '", path, "'"));
    out << "date";
    for (const auto& name : frame.variate_names) out << ',' << name;
    out << '\n';
    char buf[32];
    for (std::size_t t = 0; t < frame.rows(); ++t) {
        out << frame.timestamps[t];
        for (std::size_t v = 0; v < frame.cols(); ++v) {
            std::snprintf(buf, sizeof(buf), "%.17g", frame.at(t, v));
            out << ',' << buf;
        }
        out << '\n';
    }
}

// Three contiguous, disjoint slices in time order. Rows past the requested
// total are dropped.
inline std::array<SeriesFrame, 3> chronological_split(const SeriesFrame& frame,
                                                      const SplitSpec& spec) {
    const std::size_t need = spec.train_len + spec.val_len + spec.test_len;
    if (need > frame.rows()) {
        throw std::invalid_argument(detail::msg("split: requested ", need,
                                                " rows but frame has ", frame.rows()));
    }
    if (spec.train_len == 0 || spec.val_len == 0 || spec.test_len == 0) {
        throw std::invalid_argument("split: all three segment lengths must be positive");
    }
    auto slice = [&](std::size_t begin, std::size_t len) {
        SeriesFrame out;
        out.variate_names = frame.variate_names;
        out.timestamps.assign(frame.timestamps.begin() + begin,
                              frame.timestamps.begin() + begin + len);
        out.values.assign(frame.values.begin() + begin * frame.cols(),
                          frame.values.begin() + (begin + len) * frame.cols());
        return out;
    };
    return {slice(0, spec.train_len), slice(spec.train_len, spec.val_len),
            slice(spec.train_len + spec.val_len, spec.test_len)};
}

// Per-variate stats over the lookback; population std, clamped so constant
// variates stay well defined.
inline std::vector<NormStats> window_stats(const double* window, std::size_t lookback,
                                           std::size_t variates) {
    std::vector<NormStats> stats(variates);
    for (std::size_t v = 0; v < variates; ++v) {
        double mean = 0.0;
        for (std::size_t t = 0; t < lookback; ++t) mean += window[t * variates + v];
        mean /= static_cast<double>(lookback);
        double var = 0.0;
        for (std::size_t t = 0; t < lookback; ++t) {
            const double d = window[t * variates + v] - mean;
            var += d * d;
        }
        var /= static_cast<double>(lookback);
        stats[v].mean = mean;
        stats[v].std = std::max(std::sqrt(var), 1e-8);
    }
    return stats;
}

inline std::vector<double> normalize_window(const double* window, std::size_t steps,
                                            std::size_t variates,
                                            const std::vector<NormStats>& stats) {
    std::vector<double> out(steps * variates);
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t v = 0; v < variates; ++v)
            out[t * variates + v] = (window[t * variates + v] - stats[v].mean) / stats[v].std;
    return out;
}

inline std::vector<double> denormalize_window(const double* normalized, std::size_t steps,
                                              std::size_t variates,
                                              const std::vector<NormStats>& stats) {
    std::vector<double> out(steps * variates);
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t v = 0; v < variates; ++v)
            out[t * variates + v] = normalized[t * variates + v] * stats[v].std + stats[v].mean;
    return out;
}

// Stride-1 windows; the target horizon immediately follows each lookback.
inline WindowBatch make_windows(const SeriesFrame& frame, std::size_t lookback,
                                std::size_t horizon) {
    if (lookback == 0 || horizon == 0) {
        throw std::invalid_argument("windows: lookback and horizon must be positive");
    }
    if (frame.rows() < lookback + horizon) {
        throw std::invalid_argument(detail::msg("windows: segment of ", frame.rows(),
                                                " rows is shorter than lookback+horizon = ",
                                                lookback + horizon));
    }
    WindowBatch batch;
    batch.count = frame.rows() - lookback - horizon + 1;
    batch.lookback = lookback;
    batch.horizon = horizon;
    batch.variates = frame.cols();
    batch.inputs.reserve(batch.count * lookback * batch.variates);
    batch.targets.reserve(batch.count * horizon * batch.variates);
    batch.norm_stats.reserve(batch.count * batch.variates);
    for (std::size_t w = 0; w < batch.count; ++w) {
        const double* in_begin = frame.values.data() + w * frame.cols();
        batch.inputs.insert(batch.inputs.end(), in_begin,
                            in_begin + lookback * frame.cols());
        const double* tg_begin = frame.values.data() + (w + lookback) * frame.cols();
        batch.targets.insert(batch.targets.end(), tg_begin,
                             tg_begin + horizon * frame.cols());
        auto stats = window_stats(in_begin, lookback, frame.cols());
        batch.norm_stats.insert(batch.norm_stats.end(), stats.begin(), stats.end());
    }
    return batch;
}

// Driver variate plus lagged, coupled followers. Variate 0 carries the sum of
// two slow sinusoids plus noise; variate v repeats it shifted by v*lag steps,
// scaled by `coupling`, with its own independent noise.
inline SeriesFrame synth_leadlag(std::size_t variates, std::size_t total_len, std::size_t lag,
                                 double coupling, double noise_std, std::uint64_t seed) {
    if (variates < 2) throw std::invalid_argument("synth: need at least 2 variates");
    if (lag < 1) throw std::invalid_argument("synth: lag must be >= 1");
    if (lag * (variates - 1) >= total_len) {
        throw std::invalid_argument(detail::msg("synth: lag*(V-1) = ", lag * (variates - 1),
                                                " must be smaller than length ", total_len));
    }
    const std::size_t warmup = lag * (variates - 1);
    const std::size_t ext_len = total_len + warmup;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);

    constexpr double period_a = 12.0;
    constexpr double period_b = 20.0;
    constexpr double two_pi = 6.283185307179586477;
    std::vector<double> driver(ext_len);
    for (std::size_t t = 0; t < ext_len; ++t) {
        driver[t] = 0.12 * std::sin(two_pi * static_cast<double>(t) / period_a) +
                    0.08 * std::sin(two_pi * static_cast<double>(t) / period_b + 1.3);
        if (noise_std > 0.0) driver[t] += noise_std * noise(rng);
    }

    SeriesFrame frame;
    frame.variate_names.resize(variates);
    for (std::size_t v = 0; v < variates; ++v) frame.variate_names[v] = "v" + std::to_string(v);
    frame.timestamps.resize(total_len);
    frame.values.assign(total_len * variates, 0.0);
    for (std::size_t t = 0; t < total_len; ++t) {
        frame.timestamps[t] = std::to_string(t);
        frame.at(t, 0) = driver[t + warmup];
    }
    for (std::size_t v = 1; v < variates; ++v) {
        for (std::size_t t = 0; t < total_len; ++t) {
            double value = coupling * driver[t + warmup - v * lag];
            if (noise_std > 0.0) value += noise_std * noise(rng);
            frame.at(t, v) = value;
        }
    }
    return frame;
}

}  // namespace tivat
