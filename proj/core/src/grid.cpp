#include "mthg/grid.hpp"

#include <algorithm>
#include <cmath>

namespace mthg {

LayerGrid::LayerGrid(int w, int h, double fill, bool valid)
    : width(w),
      height(h),
      values(static_cast<std::size_t>(w) * h, fill),
      mask(static_cast<std::size_t>(w) * h, valid ? 1 : 0) {}

std::size_t LayerGrid::valid_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += (m != 0);
    return n;
}

double LayerGrid::valid_mean(double fallback) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i]) {
            sum += values[i];
            ++n;
        }
    }
    return n == 0 ? fallback : sum / static_cast<double>(n);
}

double LayerGrid::valid_variance() const {
    std::size_t n = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i]) {
            sum += values[i];
            ++n;
        }
    }
    if (n == 0) return 0.0;
    const double mean = sum / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i]) {
            const double d = values[i] - mean;
            acc += d * d;
        }
    }
    return acc / static_cast<double>(n);
}

void LayerGrid::validate(const std::string& what) const {
    const std::size_t expect = static_cast<std::size_t>(width) * height;
    if (width < 0 || height < 0 || values.size() != expect || mask.size() != expect) {
        throw StructuralError(what + ": values/mask size does not match " +
                              std::to_string(width) + "x" + std::to_string(height));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i] && !std::isfinite(values[i])) {
            throw StructuralError(what + ": non-finite value under valid cell " + std::to_string(i));
        }
    }
}

void Volume::push(std::string name, LayerGrid grid) {
    names.push_back(std::move(name));
    channels.push_back(std::move(grid));
}

void Volume::validate(const std::string& what) const {
    if (names.size() != channels.size()) {
        throw StructuralError(what + ": channel/name count mismatch");
    }
    for (std::size_t c = 0; c < channels.size(); ++c) {
        channels[c].validate(what + "[" + names[c] + "]");
        if (!channels[c].same_shape(channels.front())) {
            throw StructuralError(what + ": channel '" + names[c] + "' has mismatched dimensions");
        }
    }
}

double masked_l2(const LayerGrid& pred, const LayerGrid& gt) {
    if (!pred.same_shape(gt)) {
        throw StructuralError("masked_l2: dimension mismatch (" + std::to_string(pred.width) + "x" +
                              std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                              std::to_string(gt.height) + ")");
    }
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        if (!gt.mask[i]) continue;
        const double d = pred.values[i] - gt.values[i];
        acc += d * d;
        ++n;
    }
    if (n == 0) {
        throw UndefinedMetricError("masked_l2: ground truth has no valid cells");
    }
    return acc / static_cast<double>(n);
}

LayerGrid pixelwise_median(const std::vector<const LayerGrid*>& candidates) {
    if (candidates.empty()) {
        throw StructuralError("pixelwise_median: empty candidate list");
    }
    const LayerGrid& first = *candidates.front();
    for (const LayerGrid* c : candidates) {
        if (!c->same_shape(first)) {
            throw StructuralError("pixelwise_median: candidate dimension mismatch");
        }
    }
    LayerGrid out(first.width, first.height, 0.0, false);
    std::vector<double> vals;
    vals.reserve(candidates.size());
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        vals.clear();
        for (const LayerGrid* c : candidates) {
            if (c->mask[i]) vals.push_back(c->values[i]);
        }
        if (vals.empty()) continue;
        std::sort(vals.begin(), vals.end());
        const std::size_t n = vals.size();
        out.values[i] = (n % 2 == 1) ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
        out.mask[i] = 1;
    }
    return out;
}

LayerGrid pixelwise_median(const std::vector<LayerGrid>& candidates) {
    std::vector<const LayerGrid*> ptrs;
    ptrs.reserve(candidates.size());
    for (const auto& c : candidates) ptrs.push_back(&c);
    return pixelwise_median(ptrs);
}

LayerGrid normalize_layer(const LayerGrid& raw, double lo, double hi) {
    if (!(lo < hi)) {
        throw ParameterError("normalize_layer: lo must be < hi");
    }
    LayerGrid out = raw;
    const double scale = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!out.mask[i]) continue;
        out.values[i] = clamp01((out.values[i] - lo) * scale);
    }
    return out;
}

}  // namespace mthg
