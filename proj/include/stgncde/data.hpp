#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stgncde/spline.hpp"
#include "stgncde/tensor.hpp"

namespace stgncde {

enum class ValueType { volume, velocity };

struct DatasetMeta {
    std::string name;
    int num_nodes = 0;
    int num_steps = 0;
    int num_features = 1;
    int interval_minutes = 5;
    ValueType value_type = ValueType::volume;
};

/// Reads the values CSV (header row, one row per step, node-major
/// node{v}_f{d} columns) against its JSON sidecar. Returns the series as
/// [num_steps x num_nodes x num_features]. Throws DataError on any mismatch,
/// naming expected vs found counts or the offending cell.
std::pair<DatasetMeta, Tensor> load_dataset(const std::string& values_csv,
                                            const std::string& meta_json);

struct Splits {
    Tensor train, val, test;
};

/// Chronological 6:2:2 split: floor(0.6 L), floor(0.2 L), remainder.
Splits split_6_2_2(const Tensor& series);

/// Per-channel normalization statistics; always computed from the training
/// split so validation/test stay untouched.
struct NormStats {
    std::vector<double> mean, stddev;
};

NormStats compute_norm_stats(const Tensor& series);
Tensor zscore(const NormStats& stats, const Tensor& x);
Tensor denorm(const NormStats& stats, const Tensor& x);

struct Metrics {
    double mae = 0.0, rmse = 0.0, mape = 0.0;  // mape in percent
};

/// Streaming error sums so per-horizon and overall metrics share one pass.
/// MAPE skips targets with |y| <= 0.1 (traffic volumes contain zeros).
struct MetricSums {
    double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
    std::int64_t count = 0, pct_count = 0;

    void add(double pred, double target);
    void merge(const MetricSums& other);
    Metrics finalize() const;
};

Metrics compute_metrics(const Tensor& pred, const Tensor& target);

/// Sliding stride-1 windows fully inside one split. Inputs come back
/// z-scored with the (training) stats; targets stay in original units.
/// Copies share the underlying series.
class WindowBatch {
  public:
    WindowBatch() = default;
    WindowBatch(Tensor series, NormStats stats, int input_len = 12, int horizon = 12,
                int target_feature = 0);

    int num_windows() const { return num_windows_; }
    int num_nodes() const { return series_.defined() ? series_.dim(1) : 0; }
    int num_channels() const { return series_.defined() ? series_.dim(2) : 0; }
    int input_len() const { return input_len_; }
    int horizon() const { return horizon_; }
    int target_feature() const { return target_feature_; }
    const NormStats& stats() const { return stats_; }

    Tensor input_window(int w) const;               // [V x input_len x D], normalized
    std::span<const std::uint8_t> mask(int w) const;  // V x input_len, 1 = observed
    Tensor target(int w) const;                     // [V x horizon], original units
    ControlPath path(int w) const;

  private:
    friend WindowBatch apply_missing_mask(const WindowBatch& windows, double rate,
                                          std::uint64_t seed);

    Tensor series_;  // [L x V x D]
    NormStats stats_;
    std::vector<std::uint8_t> masks_;  // [num_windows x V x input_len]
    int num_windows_ = 0;
    int input_len_ = 12;
    int horizon_ = 12;
    int target_feature_ = 0;
};

WindowBatch make_windows(Tensor split_series, NormStats stats, int input_len = 12, int horizon = 12,
                         int target_feature = 0);

/// Drops exactly floor(rate * input_len) input observations per node per
/// window, chosen without replacement by a generator seeded from
/// (seed, window, node). Targets are never masked. rate must be in [0, 1).
WindowBatch apply_missing_mask(const WindowBatch& windows, double rate, std::uint64_t seed);

/// Audit export: one (window_index, node, time_index) row per masked-out cell.
void write_mask_csv(const WindowBatch& windows, const std::string& path);

/// The 5-node ring benchmark series: two incommensurate sinusoids per node
/// with phase offset 10v plus gaussian noise.
Tensor make_synthetic_ring(int num_nodes, int steps, double noise_std, std::uint64_t seed);

namespace detail {
std::uint64_t splitmix64(std::uint64_t x);
}

}  // namespace stgncde
