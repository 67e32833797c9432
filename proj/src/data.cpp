#include "stgncde/data.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "stgncde/errors.hpp"

namespace stgncde {

namespace detail {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

namespace {

// Small deterministic generator for masks and synthetic data; decoupled from
// std distributions so identical seeds reproduce everywhere.
struct MixRng {
    std::uint64_t state;
    explicit MixRng(std::uint64_t seed) : state(seed) {}
    std::uint64_t next() {
        state = detail::splitmix64(state);
        return state;
    }
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }  // [0, 1)
    // bounded draw via rejection-free 128-bit multiply
    std::uint32_t below(std::uint32_t n) {
        return static_cast<std::uint32_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }
};

}  // namespace

std::pair<DatasetMeta, Tensor> load_dataset(const std::string& values_csv,
                                            const std::string& meta_json) {
    std::ifstream meta_in(meta_json);
    if (!meta_in) throw DataError("cannot open meta file: " + meta_json);
    nlohmann::json j;
    try {
        meta_in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid meta JSON in " + meta_json + ": " + e.what());
    }

    DatasetMeta meta;
    try {
        meta.name = j.value("name", "unnamed");
        meta.num_nodes = j.at("num_nodes").get<int>();
        meta.num_steps = j.at("num_steps").get<int>();
        meta.num_features = j.value("num_features", 1);
        meta.interval_minutes = j.value("interval_minutes", 5);
        const std::string vt = j.value("value_type", "volume");
        if (vt == "volume") {
            meta.value_type = ValueType::volume;
        } else if (vt == "velocity") {
            meta.value_type = ValueType::velocity;
        } else {
            throw DataError("meta value_type must be volume or velocity, got '" + vt + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("meta JSON missing field in " + meta_json + ": " + e.what());
    }
    if (meta.num_nodes <= 0 || meta.num_steps <= 0 || meta.num_features <= 0) {
        throw DataError("meta dimensions must be positive in " + meta_json);
    }

    std::ifstream in(values_csv);
    if (!in) throw DataError("cannot open values file: " + values_csv);

    const int want_cols = meta.num_nodes * meta.num_features;
    std::string line;
    if (!std::getline(in, line)) throw DataError("values CSV is empty: " + values_csv);
    {
        int header_cols = 1;
        for (char c : line)
            if (c == ',') ++header_cols;
        if (header_cols != want_cols) {
            throw DataError("values CSV has " + std::to_string(header_cols) + " columns but meta says " +
                            std::to_string(meta.num_nodes) + " nodes x " +
                            std::to_string(meta.num_features) + " features = " +
                            std::to_string(want_cols));
        }
    }

    Tensor series = Tensor::zeros({meta.num_steps, meta.num_nodes, meta.num_features});
    auto out = series.raw();
    int row = 0;
    while (std::getline(in, line)) {
        if (row >= meta.num_steps) {
            throw DataError("values CSV has more than the expected " + std::to_string(meta.num_steps) +
                            " data rows");
        }
        const char* p = line.c_str();
        for (int col = 0; col < want_cols; ++col) {
            char* end = nullptr;
            const double v = std::strtod(p, &end);
            if (end == p) {
                throw DataError("values CSV: unparsable cell at row " + std::to_string(row + 1) +
                                ", col " + std::to_string(col + 1));
            }
            out[static_cast<std::size_t>(row) * want_cols + col] = v;
            p = end;
            if (col + 1 < want_cols) {
                if (*p != ',') {
                    throw DataError("values CSV: expected " + std::to_string(want_cols) +
                                    " columns at row " + std::to_string(row + 1) + ", found " +
                                    std::to_string(col + 1));
                }
                ++p;
            }
        }
        ++row;
    }
    if (row != meta.num_steps) {
        throw DataError("values CSV has " + std::to_string(row) + " data rows but meta says " +
                        std::to_string(meta.num_steps));
    }
    return {meta, std::move(series)};
}

Splits split_6_2_2(const Tensor& series) {
    if (series.ndim() != 3) {
        throw std::invalid_argument("split_6_2_2: series must be [L x V x D], got " +
                                    detail::shape_str(series.shape()));
    }
    const int len = series.dim(0), v = series.dim(1), d = series.dim(2);
    const int n_train = static_cast<int>(std::floor(0.6 * len));
    const int n_val = static_cast<int>(std::floor(0.2 * len));
    const int n_test = len - n_train - n_val;

    auto slice = [&](int start, int count) {
        Tensor t = Tensor::zeros({count, v, d});
        const std::size_t stride = static_cast<std::size_t>(v) * d;
        const auto src = series.data();
        std::copy(src.begin() + start * stride, src.begin() + (start + count) * stride,
                  t.raw().begin());
        return t;
    };
    return Splits{slice(0, n_train), slice(n_train, n_val), slice(n_train + n_val, n_test)};
}

NormStats compute_norm_stats(const Tensor& series) {
    if (series.ndim() != 3) {
        throw std::invalid_argument("compute_norm_stats: series must be [L x V x D]");
    }
    const int d = series.dim(2);
    const std::int64_t per_channel = series.size() / d;
    NormStats stats;
    stats.mean.assign(d, 0.0);
    stats.stddev.assign(d, 0.0);
    const auto data = series.data();
    for (std::size_t i = 0; i < data.size(); ++i) stats.mean[i % d] += data[i];
    for (int c = 0; c < d; ++c) stats.mean[c] /= static_cast<double>(per_channel);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double e = data[i] - stats.mean[i % d];
        stats.stddev[i % d] += e * e;
    }
    for (int c = 0; c < d; ++c) {
        stats.stddev[c] = std::sqrt(stats.stddev[c] / static_cast<double>(per_channel));
        if (stats.stddev[c] <= 0.0) stats.stddev[c] = 1.0;  // constant channel
    }
    return stats;
}

Tensor zscore(const NormStats& stats, const Tensor& x) {
    const int d = static_cast<int>(stats.mean.size());
    if (x.ndim() < 1 || x.dim(x.ndim() - 1) != d) {
        throw std::invalid_argument("zscore: last dimension must match the channel count");
    }
    Tensor out = x.clone();
    auto buf = out.raw();
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const int c = static_cast<int>(i % d);
        buf[i] = (buf[i] - stats.mean[c]) / stats.stddev[c];
    }
    return out;
}

Tensor denorm(const NormStats& stats, const Tensor& x) {
    const int d = static_cast<int>(stats.mean.size());
    if (x.ndim() < 1 || x.dim(x.ndim() - 1) != d) {
        throw std::invalid_argument("denorm: last dimension must match the channel count");
    }
    Tensor out = x.clone();
    auto buf = out.raw();
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const int c = static_cast<int>(i % d);
        buf[i] = buf[i] * stats.stddev[c] + stats.mean[c];
    }
    return out;
}

void MetricSums::add(double pred, double target) {
    const double e = pred - target;
    abs_sum += std::fabs(e);
    sq_sum += e * e;
    ++count;
    if (std::fabs(target) > 0.1) {
        pct_sum += std::fabs(e / target);
        ++pct_count;
    }
}

void MetricSums::merge(const MetricSums& other) {
    abs_sum += other.abs_sum;
    sq_sum += other.sq_sum;
    pct_sum += other.pct_sum;
    count += other.count;
    pct_count += other.pct_count;
}

Metrics MetricSums::finalize() const {
    Metrics m;
    if (count > 0) {
        m.mae = abs_sum / static_cast<double>(count);
        m.rmse = std::sqrt(sq_sum / static_cast<double>(count));
    }
    if (pct_count > 0) m.mape = 100.0 * pct_sum / static_cast<double>(pct_count);
    return m;
}

Metrics compute_metrics(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("compute_metrics: shape mismatch: " +
                                    detail::shape_str(pred.shape()) + " vs " +
                                    detail::shape_str(target.shape()));
    }
    MetricSums sums;
    const auto p = pred.data();
    const auto t = target.data();
    for (std::size_t i = 0; i < p.size(); ++i) sums.add(p[i], t[i]);
    return sums.finalize();
}

WindowBatch::WindowBatch(Tensor series, NormStats stats, int input_len, int horizon,
                         int target_feature)
    : series_(std::move(series)), stats_(std::move(stats)), input_len_(input_len),
      horizon_(horizon), target_feature_(target_feature) {
    if (series_.ndim() != 3) {
        throw std::invalid_argument("WindowBatch: series must be [L x V x D]");
    }
    if (input_len_ < 2 || horizon_ < 1) {
        throw std::invalid_argument("WindowBatch: need input_len >= 2 and horizon >= 1");
    }
    if (target_feature_ < 0 || target_feature_ >= series_.dim(2)) {
        throw std::invalid_argument("WindowBatch: target_feature out of range");
    }
    const int len = series_.dim(0);
    num_windows_ = std::max(0, len - (input_len_ + horizon_) + 1);
    masks_.assign(static_cast<std::size_t>(num_windows_) * series_.dim(1) * input_len_, 1);
}

Tensor WindowBatch::input_window(int w) const {
    const int v = num_nodes(), d = num_channels();
    Tensor win = Tensor::zeros({v, input_len_, d});
    auto out = win.raw();
    const auto src = series_.data();
    for (int node = 0; node < v; ++node)
        for (int i = 0; i < input_len_; ++i)
            for (int c = 0; c < d; ++c)
                out[(static_cast<std::size_t>(node) * input_len_ + i) * d + c] =
                    src[(static_cast<std::size_t>(w + i) * v + node) * d + c];
    return zscore(stats_, win);
}

std::span<const std::uint8_t> WindowBatch::mask(int w) const {
    const std::size_t stride = static_cast<std::size_t>(num_nodes()) * input_len_;
    return {masks_.data() + static_cast<std::size_t>(w) * stride, stride};
}

Tensor WindowBatch::target(int w) const {
    const int v = num_nodes(), d = num_channels();
    Tensor tgt = Tensor::zeros({v, horizon_});
    auto out = tgt.raw();
    const auto src = series_.data();
    for (int node = 0; node < v; ++node)
        for (int s = 0; s < horizon_; ++s)
            out[static_cast<std::size_t>(node) * horizon_ + s] =
                src[(static_cast<std::size_t>(w + input_len_ + s) * v + node) * d + target_feature_];
    return tgt;
}

ControlPath WindowBatch::path(int w) const {
    // Normalized inputs make the training-set channel mean exactly 0.
    const std::vector<double> fill(static_cast<std::size_t>(num_channels()), 0.0);
    return build_control_paths(input_window(w), mask(w), fill);
}

WindowBatch make_windows(Tensor split_series, NormStats stats, int input_len, int horizon,
                         int target_feature) {
    return WindowBatch(std::move(split_series), std::move(stats), input_len, horizon, target_feature);
}

WindowBatch apply_missing_mask(const WindowBatch& windows, double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("apply_missing_mask: rate must be in [0, 1), got " + std::to_string(rate));
    }
    WindowBatch out = windows;
    const int t_len = out.input_len_;
    const int drop = static_cast<int>(std::floor(rate * t_len));
    if (drop == 0) return out;

    const int v = out.num_nodes();
    std::vector<int> idx(static_cast<std::size_t>(t_len));
    for (int w = 0; w < out.num_windows_; ++w) {
        for (int node = 0; node < v; ++node) {
            // Seeded per (window, node) so masks do not depend on visit order.
            MixRng rng(detail::splitmix64(seed ^ detail::splitmix64(
                                                     static_cast<std::uint64_t>(w) * 0x10001ULL + node)));
            for (int i = 0; i < t_len; ++i) idx[static_cast<std::size_t>(i)] = i;
            std::uint8_t* m = out.masks_.data() + (static_cast<std::size_t>(w) * v + node) * t_len;
            for (int i = 0; i < drop; ++i) {
                const int j = i + static_cast<int>(rng.below(static_cast<std::uint32_t>(t_len - i)));
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
                m[idx[static_cast<std::size_t>(i)]] = 0;
            }
        }
    }
    return out;
}

void write_mask_csv(const WindowBatch& windows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write mask CSV: " + path);
    out << "window_index,node,time_index\n";
    for (int w = 0; w < windows.num_windows(); ++w) {
        const auto m = windows.mask(w);
        const int t_len = windows.input_len();
        for (int node = 0; node < windows.num_nodes(); ++node)
            for (int i = 0; i < t_len; ++i)
                if (!m[static_cast<std::size_t>(node) * t_len + i])
                    out << w << "," << node << "," << i << "\n";
    }
}

Tensor make_synthetic_ring(int num_nodes, int steps, double noise_std, std::uint64_t seed) {
    Tensor series = Tensor::zeros({steps, num_nodes, 1});
    auto out = series.raw();
    MixRng rng(detail::splitmix64(seed + 0x5eedULL));
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (int t = 0; t < steps; ++t) {
        for (int v = 0; v < num_nodes; ++v) {
            // Box-Muller; u1 shifted into (0, 1] to keep the log finite.
            const double u1 = (static_cast<double>(rng.next() >> 11) + 1.0) * 0x1.0p-53;
            const double u2 = rng.uniform();
            const double gauss = std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
            out[static_cast<std::size_t>(t) * num_nodes + v] =
                std::sin(two_pi * (t + 10.0 * v) / 288.0) + 0.3 * std::sin(two_pi * t / 36.0) +
                noise_std * gauss;
        }
    }
    return series;
}

}  // namespace stgncde
