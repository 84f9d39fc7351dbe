#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mthg/errors.hpp"

namespace mthg {

// One task layer at one timestamp: a 2D scalar field with a validity mask.
// Values are stored row-major; valid cells are expected to lie in [0,1]
// once a layer has been normalized.
struct LayerGrid {
    int width = 0;
    int height = 0;
    std::vector<double> values;        // row-major, size width*height
    std::vector<std::uint8_t> mask;    // 1 = valid observation

    LayerGrid() = default;
    LayerGrid(int w, int h, double fill = 0.0, bool valid = true);

    std::size_t size() const { return values.size(); }
    std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }

    double at(int x, int y) const { return values[index(x, y)]; }
    double& at(int x, int y) { return values[index(x, y)]; }
    bool valid_at(std::size_t i) const { return mask[i] != 0; }
    bool valid_at(int x, int y) const { return mask[index(x, y)] != 0; }

    std::size_t valid_count() const;
    // Mean over valid cells; `fallback` when the grid is entirely invalid.
    double valid_mean(double fallback = 0.5) const;
    double valid_variance() const;  // population variance over valid cells

    bool same_shape(const LayerGrid& other) const {
        return width == other.width && height == other.height;
    }

    // Checks the structural invariants: matching value/mask sizes and finite
    // values under every valid cell. Throws StructuralError on violation.
    void validate(const std::string& what = "grid") const;
};

// An ordered stack of layers sharing dimensions. Channel order is part of a
// trained model's identity, so each channel carries a name.
struct Volume {
    std::vector<std::string> names;
    std::vector<LayerGrid> channels;

    int width() const { return channels.empty() ? 0 : channels.front().width; }
    int height() const { return channels.empty() ? 0 : channels.front().height; }
    std::size_t channel_count() const { return channels.size(); }

    void push(std::string name, LayerGrid grid);
    void validate(const std::string& what = "volume") const;
};

// Mean squared difference over cells valid in gt; the ground-truth mask
// governs evaluation, prediction values are read as-is.
double masked_l2(const LayerGrid& pred, const LayerGrid& gt);

// Per-cell median of the candidates valid at that cell. A cell of the result
// is valid iff at least one candidate is valid there. Even counts return the
// mean of the two middle values.
LayerGrid pixelwise_median(const std::vector<const LayerGrid*>& candidates);
LayerGrid pixelwise_median(const std::vector<LayerGrid>& candidates);

// Affine map of valid cells onto [0,1] with clamping; the mask is unchanged.
LayerGrid normalize_layer(const LayerGrid& raw, double lo, double hi);

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace mthg
