#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mthg/grid.hpp"

namespace mthg {

// Synthetic Earth-observation-style dataset: smooth latent fields with a
// seasonal cycle and optional linear drift, mixed through per-layer monotone
// nonlinearities into input and output task layers.
struct SynthConfig {
    int width = 64;
    int height = 32;
    int months = 106;
    int n_inputs = 4;
    int n_outputs = 3;
    int seasonal_period = 12;
    double drift_rate = 0.0;   // per-month shift of latent means/amplitudes
    double noise_sigma = 0.02; // white noise added to input layers
    // Per-layer mask style (inputs then outputs): dense | land-sparse |
    // ocean-sparse. Empty selects the defaults (dense inputs, mixed outputs).
    std::vector<std::string> mask_styles;
    std::uint64_t seed = 1;
    // Split sizes; 0 means the 119:30:62 pattern scaled to `months`.
    int labeled_months = 0;
    int test_months = 0;

    void validate() const;
};

struct LayerInfo {
    std::string name;
    bool is_input = true;
    std::string mask_style = "dense";
};

// Dataset index: layers, per-(month, layer) file paths and availability, and
// the split assignment. Output layers at unlabeled months are written to
// disk for evaluation but marked unavailable for training.
struct Manifest {
    int format_version = 1;
    int width = 0;
    int height = 0;
    int months = 0;
    std::vector<LayerInfo> layers;
    std::vector<std::vector<std::string>> paths;      // [month][layer], relative
    std::vector<std::vector<std::uint8_t>> available; // [month][layer]
    std::vector<int> labeled;
    std::vector<int> test;
    std::vector<int> unlabeled;
    std::string generator_json;  // config echo
    std::filesystem::path base_dir;

    int layer_index(const std::string& name) const;
    std::vector<std::string> input_names() const;
    std::vector<std::string> output_names() const;
    bool is_available(int month, const std::string& layer) const;
    std::filesystem::path grid_path(int month, const std::string& layer) const;
    void validate() const;
};

// Generates grid files under out_dir/data and writes out_dir/manifest.json.
Manifest generate(const SynthConfig& config, const std::filesystem::path& out_dir);

void save_manifest(const std::filesystem::path& file, const Manifest& manifest);
// Loads and validates a manifest; fails naming the first missing grid file.
Manifest load_manifest(const std::filesystem::path& file);

}  // namespace mthg
