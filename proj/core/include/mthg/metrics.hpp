#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mthg/grid.hpp"

namespace mthg {

// Relative performance improvement vs a fixed baseline, in percent:
// (baseline_l2 / pred_l2 - 1) * 100. Both aggregates must be positive.
double rpi_percent(double pred_l2, double baseline_l2);

// Arithmetic mean of per-task RPI values.
double arpi(std::span<const double> task_rpis);

struct ConsistencyReport {
    std::string task;
    int window = 3;
    double mean_variance = 0.0;
};

// Population variance of prediction values per cell over a sliding centered
// window, averaged over every (cell, center) pair where the cell is valid
// across the entire window. Lower is more temporally consistent.
ConsistencyReport temporal_consistency(const std::vector<LayerGrid>& predictions, int window,
                                       std::string task = "");

struct ErrorTrend {
    double slope_per_month = 0.0;
    double intercept = 0.0;
    std::vector<double> smoothed;            // centered moving average
    double relative_increase_percent = 0.0;  // fit(end)/fit(start) - 1, in percent
};

// Least-squares linear fit of a monthly error series with moving-average
// smoothing. The smoothing window defaults to one seasonal cycle.
ErrorTrend error_trend(std::span<const double> monthly_l2, int smooth_window = 12);

// Fraction of bootstrap resamples whose refit slope is positive. Used as the
// confidence that an error series is genuinely drifting upward.
double bootstrap_positive_slope_fraction(std::span<const double> monthly_l2, int resamples,
                                         std::uint64_t seed);

}  // namespace mthg
