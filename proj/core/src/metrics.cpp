#include "mthg/metrics.hpp"

#include <cmath>
#include <random>

#include "mthg/errors.hpp"

namespace mthg {

double rpi_percent(double pred_l2, double baseline_l2) {
    if (!(pred_l2 > 0.0) || !(baseline_l2 > 0.0)) {
        throw UndefinedMetricError("rpi: both L2 aggregates must be positive");
    }
    return (baseline_l2 / pred_l2 - 1.0) * 100.0;
}

double arpi(std::span<const double> task_rpis) {
    if (task_rpis.empty()) {
        throw ParameterError("arpi: empty task list");
    }
    double acc = 0.0;
    for (double r : task_rpis) acc += r;
    return acc / static_cast<double>(task_rpis.size());
}

ConsistencyReport temporal_consistency(const std::vector<LayerGrid>& predictions, int window,
                                       std::string task) {
    if (window < 1 || window % 2 == 0) {
        throw ParameterError("temporal_consistency: window must be odd and positive");
    }
    if (predictions.size() < static_cast<std::size_t>(window)) {
        throw ParameterError("temporal_consistency: series shorter than window");
    }
    for (const auto& p : predictions) {
        if (!p.same_shape(predictions.front())) {
            throw StructuralError("temporal_consistency: prediction dimension mismatch");
        }
    }
    const int half = window / 2;
    const std::size_t cells = predictions.front().values.size();
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t center = half; center + half < predictions.size(); ++center) {
        for (std::size_t i = 0; i < cells; ++i) {
            bool all_valid = true;
            for (int k = -half; k <= half; ++k) {
                if (!predictions[center + k].mask[i]) {
                    all_valid = false;
                    break;
                }
            }
            if (!all_valid) continue;
            double mean = 0.0;
            for (int k = -half; k <= half; ++k) mean += predictions[center + k].values[i];
            mean /= window;
            double var = 0.0;
            for (int k = -half; k <= half; ++k) {
                const double d = predictions[center + k].values[i] - mean;
                var += d * d;
            }
            acc += var / window;
            ++pairs;
        }
    }
    ConsistencyReport report;
    report.task = std::move(task);
    report.window = window;
    report.mean_variance = pairs == 0 ? 0.0 : acc / static_cast<double>(pairs);
    return report;
}

namespace {

// Closed-form least-squares slope/intercept of y against t = 0..n-1.
void linear_fit(std::span<const double> y, double& slope, double& intercept) {
    const double n = static_cast<double>(y.size());
    double st = 0.0, sy = 0.0, stt = 0.0, sty = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        const double td = static_cast<double>(t);
        st += td;
        sy += y[t];
        stt += td * td;
        sty += td * y[t];
    }
    const double denom = n * stt - st * st;
    slope = denom == 0.0 ? 0.0 : (n * sty - st * sy) / denom;
    intercept = (sy - slope * st) / n;
}

}  // namespace

ErrorTrend error_trend(std::span<const double> monthly_l2, int smooth_window) {
    if (monthly_l2.size() < 24) {
        throw ParameterError("error_trend: need at least 24 monthly points");
    }
    if (smooth_window < 1) {
        throw ParameterError("error_trend: smoothing window must be positive");
    }
    ErrorTrend trend;
    linear_fit(monthly_l2, trend.slope_per_month, trend.intercept);

    trend.smoothed.resize(monthly_l2.size());
    const int n = static_cast<int>(monthly_l2.size());
    for (int t = 0; t < n; ++t) {
        int lo = t - smooth_window / 2;
        int hi = lo + smooth_window - 1;
        if (lo < 0) lo = 0;
        if (hi >= n) hi = n - 1;
        double acc = 0.0;
        for (int k = lo; k <= hi; ++k) acc += monthly_l2[k];
        trend.smoothed[t] = acc / (hi - lo + 1);
    }

    const double fit_start = trend.intercept;
    const double fit_end = trend.intercept + trend.slope_per_month * (n - 1);
    trend.relative_increase_percent =
        fit_start == 0.0 ? 0.0 : (fit_end / fit_start - 1.0) * 100.0;
    return trend;
}

double bootstrap_positive_slope_fraction(std::span<const double> monthly_l2, int resamples,
                                         std::uint64_t seed) {
    if (monthly_l2.size() < 3 || resamples < 1) {
        throw ParameterError("bootstrap_positive_slope_fraction: series too short or no resamples");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, monthly_l2.size() - 1);
    // Resample (t, y_t) pairs with replacement and refit the slope each time.
    int positive = 0;
    for (int r = 0; r < resamples; ++r) {
        double st = 0.0, sy = 0.0, stt = 0.0, sty = 0.0;
        const double n = static_cast<double>(monthly_l2.size());
        for (std::size_t k = 0; k < monthly_l2.size(); ++k) {
            const std::size_t t = pick(rng);
            const double td = static_cast<double>(t);
            st += td;
            sy += monthly_l2[t];
            stt += td * td;
            sty += td * monthly_l2[t];
        }
        const double denom = n * stt - st * st;
        const double slope = denom == 0.0 ? 0.0 : (n * sty - st * sy) / denom;
        positive += (slope > 0.0);
    }
    return static_cast<double>(positive) / resamples;
}

}  // namespace mthg
