#include "mthg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "mthg/grid_io.hpp"
#include "mthg/optim.hpp"

namespace mthg {

namespace {

constexpr int kLatents = 3;
constexpr double kPi = 3.14159265358979323846;

void check_style(const std::string& style) {
    if (style != "dense" && style != "land-sparse" && style != "ocean-sparse") {
        throw ParameterError("synth: unknown mask style '" + style + "'");
    }
}

// Smooth random field: a handful of low-frequency cosine waves, normalized
// to [0,1] over the grid.
std::vector<double> smooth_field(int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> freq(0, 3);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
    struct Wave {
        int fx, fy;
        double a, p;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 4; ++k) {
        Wave wv{freq(rng), freq(rng), amp(rng) / (k + 1), phase(rng)};
        if (wv.fx == 0 && wv.fy == 0) wv.fx = 1;
        waves.push_back(wv);
    }
    std::vector<double> field(static_cast<std::size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = 0.0;
            for (const Wave& wv : waves) {
                v += wv.a * std::cos(2.0 * kPi * (wv.fx * static_cast<double>(x) / w +
                                                  wv.fy * static_cast<double>(y) / h) +
                                     wv.p);
            }
            field[static_cast<std::size_t>(y) * w + x] = v;
        }
    }
    const auto [lo_it, hi_it] = std::minmax_element(field.begin(), field.end());
    const double lo = *lo_it, hi = *hi_it;
    const double scale = hi > lo ? 1.0 / (hi - lo) : 1.0;
    for (double& v : field) v = (v - lo) * scale;
    return field;
}

// Smooth strictly monotone map; `pick` selects the shape, output roughly
// follows the input range.
double nonlinear(int pick, double u) {
    switch (pick % 4) {
        case 0: return u;
        case 1: return u + 0.22 * std::sin(kPi * u);
        case 2: return std::tanh(1.6 * (u - 0.5)) * 0.75 + 0.5;
        default: return 0.55 * u + 0.9 * (u - 0.45) * (u - 0.45) * (u - 0.45) + 0.2;
    }
}

double percentile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const std::size_t idx = static_cast<std::size_t>(q * (values.size() - 1));
    return values[idx];
}

}  // namespace

void SynthConfig::validate() const {
    if (width < 8 || height < 8) throw ParameterError("synth: dimensions must be >= 8");
    if (months < 2) throw ParameterError("synth: need at least 2 months");
    if (n_inputs < 1 || n_outputs < 1) throw ParameterError("synth: need inputs and outputs");
    if (seasonal_period < 2) throw ParameterError("synth: seasonal period must be >= 2");
    if (drift_rate < 0.0) throw ParameterError("synth: drift rate must be >= 0");
    if (noise_sigma < 0.0) throw ParameterError("synth: noise sigma must be >= 0");
    if (!mask_styles.empty() &&
        mask_styles.size() != static_cast<std::size_t>(n_inputs + n_outputs)) {
        throw ParameterError("synth: mask_styles must name every layer or be empty");
    }
    for (const auto& s : mask_styles) check_style(s);
    if (labeled_months < 0 || test_months < 0 || labeled_months + test_months > months) {
        throw ParameterError("synth: split overrides exceed month count");
    }
}

int Manifest::layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].name == name) return static_cast<int>(i);
    }
    throw ParameterError("manifest: unknown layer '" + name + "'");
}

std::vector<std::string> Manifest::input_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers) {
        if (l.is_input) names.push_back(l.name);
    }
    return names;
}

std::vector<std::string> Manifest::output_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers) {
        if (!l.is_input) names.push_back(l.name);
    }
    return names;
}

bool Manifest::is_available(int month, const std::string& layer) const {
    return available[month][layer_index(layer)] != 0;
}

std::filesystem::path Manifest::grid_path(int month, const std::string& layer) const {
    return base_dir / paths[month][layer_index(layer)];
}

void Manifest::validate() const {
    if (months <= 0 || layers.empty()) throw FormatError("manifest: empty dataset");
    if (paths.size() != static_cast<std::size_t>(months) ||
        available.size() != static_cast<std::size_t>(months)) {
        throw FormatError("manifest: paths/availability shape mismatch");
    }
    std::vector<std::uint8_t> seen(months, 0);
    auto mark = [&](const std::vector<int>& list, const char* what) {
        for (int t : list) {
            if (t < 0 || t >= months) throw FormatError(std::string("manifest: ") + what +
                                                        " timestamp out of range");
            if (seen[t]++) throw FormatError("manifest: split lists are not disjoint");
        }
    };
    mark(labeled, "labeled");
    mark(test, "test");
    mark(unlabeled, "unlabeled");
    for (int t : labeled) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (!layers[l].is_input && !available[t][l]) {
                throw FormatError("manifest: labeled month " + std::to_string(t) +
                                  " is missing output layer " + layers[l].name);
            }
        }
    }
}

Manifest generate(const SynthConfig& config, const std::filesystem::path& out_dir) {
    config.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "data");

    const int w = config.width, h = config.height;
    const std::size_t px = static_cast<std::size_t>(w) * h;
    const int n_layers = config.n_inputs + config.n_outputs;

    // Latent machinery: base field, seasonal amplitude field, drift field and
    // phase per latent.
    std::vector<std::vector<double>> base, amp, drift_field;
    std::vector<double> phase;
    for (int l = 0; l < kLatents; ++l) {
        const std::string tag = "latent" + std::to_string(l);
        base.push_back(smooth_field(w, h, derive_seed(config.seed, tag + "/base")));
        amp.push_back(smooth_field(w, h, derive_seed(config.seed, tag + "/amp")));
        drift_field.push_back(smooth_field(w, h, derive_seed(config.seed, tag + "/drift")));
        std::mt19937_64 rng(derive_seed(config.seed, tag + "/phase"));
        phase.push_back(std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng));
    }

    // Per-layer latent mixtures: every layer is a differently-weighted,
    // differently-warped view of the same latents, the way real observation
    // layers are redundant interdependent views of the same climate state.
    std::vector<std::vector<double>> mix(n_layers, std::vector<double>(kLatents, 0.0));
    std::vector<int> shape(n_layers, 0);
    for (int j = 0; j < n_layers; ++j) {
        std::mt19937_64 rng(derive_seed(config.seed, "mix/" + std::to_string(j)));
        std::uniform_real_distribution<double> weight(0.25, 1.0);
        for (int l = 0; l < kLatents; ++l) mix[j][l] = weight(rng);
        double total = 0.0;
        for (double v : mix[j]) total += v;
        for (double& v : mix[j]) v /= total;
        shape[j] = static_cast<int>(rng() % 4);
    }

    // Masks are fixed sensor footprints derived from one continent field.
    const auto continent = smooth_field(w, h, derive_seed(config.seed, "mask_field"));
    std::vector<std::string> styles = config.mask_styles;
    if (styles.empty()) {
        styles.assign(n_layers, "dense");
        // Default: dense inputs; outputs cycle through the sparse styles the
        // way real sensor layers do.
        const char* cycle[3] = {"dense", "land-sparse", "ocean-sparse"};
        for (int j = config.n_inputs; j < n_layers; ++j) {
            styles[j] = cycle[(j - config.n_inputs) % 3];
        }
    }
    const double q_low = percentile(continent, 0.4);
    const double q_high = percentile(continent, 0.6);
    std::vector<std::vector<std::uint8_t>> layer_mask(n_layers,
                                                      std::vector<std::uint8_t>(px, 1));
    for (int j = 0; j < n_layers; ++j) {
        if (styles[j] == "land-sparse") {
            for (std::size_t i = 0; i < px; ++i) layer_mask[j][i] = continent[i] < q_high;
        } else if (styles[j] == "ocean-sparse") {
            for (std::size_t i = 0; i < px; ++i) layer_mask[j][i] = continent[i] >= q_low;
        }
    }

    Manifest manifest;
    manifest.width = w;
    manifest.height = h;
    manifest.months = config.months;
    manifest.base_dir = out_dir;
    for (int j = 0; j < n_layers; ++j) {
        LayerInfo info;
        info.is_input = j < config.n_inputs;
        info.name = (info.is_input ? "in" : "out") +
                    std::to_string(info.is_input ? j : j - config.n_inputs);
        info.mask_style = styles[j];
        manifest.layers.push_back(info);
    }

    // Split: the 119:30:62 pattern scaled proportionally unless overridden.
    int n_labeled = config.labeled_months;
    int n_test = config.test_months;
    if (n_labeled == 0) {
        n_labeled = static_cast<int>(std::lround(config.months * 119.0 / 211.0));
    }
    if (n_test == 0) {
        n_test = static_cast<int>(std::lround(config.months * 30.0 / 211.0));
    }
    n_labeled = std::min(n_labeled, config.months);
    n_test = std::min(n_test, config.months - n_labeled);
    for (int t = 0; t < n_labeled; ++t) manifest.labeled.push_back(t);
    for (int t = n_labeled; t < n_labeled + n_test; ++t) manifest.test.push_back(t);
    for (int t = n_labeled + n_test; t < config.months; ++t) manifest.unlabeled.push_back(t);

    manifest.paths.resize(config.months, std::vector<std::string>(n_layers));
    manifest.available.resize(config.months, std::vector<std::uint8_t>(n_layers, 1));
    for (int t : manifest.unlabeled) {
        for (int j = config.n_inputs; j < n_layers; ++j) manifest.available[t][j] = 0;
    }

    // Fixed per-layer normalization anchors with headroom for the seasonal
    // swing and the full drift span, so drifted values shift within [0,1]
    // instead of saturating at the clamp.
    const double drift_span = config.drift_rate * (config.months - 1);
    std::vector<double> anchor_lo(n_layers), anchor_scale(n_layers);
    for (int j = 0; j < n_layers; ++j) {
        const double lo = nonlinear(shape[j], -0.45);
        const double hi = nonlinear(shape[j], 1.45 + 1.6 * drift_span);
        anchor_lo[j] = lo;
        anchor_scale[j] = 1.0 / (hi - lo);
    }

    // Materialize every (month, layer) grid.
    std::vector<double> plane(px);
    for (int t = 0; t < config.months; ++t) {
        // Phase from t mod period so that drift-free, noise-free data repeats
        // bit-exactly every cycle.
        const double season = 2.0 * kPi * static_cast<double>(t % config.seasonal_period) /
                              config.seasonal_period;
        for (int j = 0; j < n_layers; ++j) {
            const bool is_input = j < config.n_inputs;
            for (std::size_t i = 0; i < px; ++i) {
                double m = 0.0;
                for (int l = 0; l < kLatents; ++l) {
                    const double amp_t =
                        0.25 * (0.25 + 0.75 * amp[l][i]) * (1.0 + 2.0 * config.drift_rate * t);
                    const double z = base[l][i] + amp_t * std::sin(season + phase[l]) +
                                     config.drift_rate * t * drift_field[l][i];
                    m += mix[j][l] * z;
                }
                plane[i] = (nonlinear(shape[j], m) - anchor_lo[j]) * anchor_scale[j];
            }
            if (is_input && config.noise_sigma > 0.0) {
                std::mt19937_64 rng(derive_seed(
                    config.seed, "noise/" + std::to_string(j) + "/" + std::to_string(t)));
                std::normal_distribution<double> noise(0.0, config.noise_sigma);
                for (std::size_t i = 0; i < px; ++i) plane[i] += noise(rng);
            }
            LayerGrid grid(w, h);
            for (std::size_t i = 0; i < px; ++i) {
                grid.values[i] = clamp01(plane[i]);
                grid.mask[i] = layer_mask[j][i];
            }
            char name[64];
            std::snprintf(name, sizeof(name), "data/%s/t%04d.grd1",
                          manifest.layers[j].name.c_str(), t);
            fs::create_directories(out_dir / "data" / manifest.layers[j].name);
            save_grid(out_dir / name, grid);
            manifest.paths[t][j] = name;
        }
    }

    nlohmann::json echo;
    echo["width"] = config.width;
    echo["height"] = config.height;
    echo["months"] = config.months;
    echo["n_inputs"] = config.n_inputs;
    echo["n_outputs"] = config.n_outputs;
    echo["seasonal_period"] = config.seasonal_period;
    echo["drift_rate"] = config.drift_rate;
    echo["noise_sigma"] = config.noise_sigma;
    echo["mask_styles"] = styles;
    echo["seed"] = config.seed;
    echo["labeled_months"] = n_labeled;
    echo["test_months"] = n_test;
    manifest.generator_json = echo.dump();

    manifest.validate();
    save_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

void save_manifest(const std::filesystem::path& file, const Manifest& manifest) {
    nlohmann::json j;
    j["format_version"] = manifest.format_version;
    j["width"] = manifest.width;
    j["height"] = manifest.height;
    j["months"] = manifest.months;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : manifest.layers) {
        j["layers"].push_back({{"name", l.name},
                               {"kind", l.is_input ? "input" : "output"},
                               {"mask_style", l.mask_style}});
    }
    j["paths"] = manifest.paths;
    j["available"] = manifest.available;
    j["split"] = {{"labeled", manifest.labeled},
                  {"test", manifest.test},
                  {"unlabeled", manifest.unlabeled}};
    if (!manifest.generator_json.empty()) {
        j["generator"] = nlohmann::json::parse(manifest.generator_json);
    }
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw FormatError("save_manifest: cannot open '" + file.string() + "'");
    out << j.dump(2) << "\n";
}

Manifest load_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("load_manifest: cannot open '" + file.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_manifest: invalid JSON in '" + file.string() + "': " + e.what());
    }
    Manifest manifest;
    try {
        manifest.format_version = j.at("format_version").get<int>();
        if (manifest.format_version != 1) {
            throw FormatError("load_manifest: unsupported format_version");
        }
        manifest.width = j.at("width").get<int>();
        manifest.height = j.at("height").get<int>();
        manifest.months = j.at("months").get<int>();
        for (const auto& l : j.at("layers")) {
            LayerInfo info;
            info.name = l.at("name").get<std::string>();
            info.is_input = l.at("kind").get<std::string>() == "input";
            info.mask_style = l.at("mask_style").get<std::string>();
            manifest.layers.push_back(info);
        }
        manifest.paths = j.at("paths").get<std::vector<std::vector<std::string>>>();
        manifest.available = j.at("available").get<std::vector<std::vector<std::uint8_t>>>();
        manifest.labeled = j.at("split").at("labeled").get<std::vector<int>>();
        manifest.test = j.at("split").at("test").get<std::vector<int>>();
        manifest.unlabeled = j.at("split").at("unlabeled").get<std::vector<int>>();
        if (j.contains("generator")) manifest.generator_json = j.at("generator").dump();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_manifest: malformed manifest '" + file.string() + "': " + e.what());
    }
    manifest.base_dir = file.parent_path();
    manifest.validate();
    for (int t = 0; t < manifest.months; ++t) {
        for (std::size_t l = 0; l < manifest.layers.size(); ++l) {
            const auto path = manifest.base_dir / manifest.paths[t][l];
            if (!std::filesystem::exists(path)) {
                throw FormatError("load_manifest: missing grid file '" + path.string() + "'");
            }
        }
    }
    return manifest;
}

}  // namespace mthg
