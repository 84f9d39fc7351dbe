#include "mthg/links.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "conv_util.hpp"

namespace mthg {

std::vector<double> filled_plane(const LayerGrid& grid) {
    std::vector<double> plane(grid.values);
    const double mean = grid.valid_mean(0.5);
    for (std::size_t i = 0; i < plane.size(); ++i) {
        if (!grid.mask[i]) plane[i] = mean;
    }
    return plane;
}

namespace {

using detail::clamp_coord;

std::vector<std::vector<double>> fill_volume(const Volume& input) {
    std::vector<std::vector<double>> planes;
    planes.reserve(input.channels.size());
    for (const auto& ch : input.channels) planes.push_back(filled_plane(ch));
    return planes;
}

void check_channels(const Volume& input, const std::vector<std::string>& expected,
                    const std::string& who) {
    if (input.names != expected) {
        throw StructuralError(who + ": input channels do not match the trained channel order");
    }
}

// Patch features for one pixel: channel-major, then row-major over the
// (2r+1)^2 neighborhood with replicate padding. `bias_term` appends a 1.
void extract_patch(const std::vector<std::vector<double>>& planes, int w, int h, int x, int y,
                   int radius, bool bias_term, double* out) {
    std::size_t idx = 0;
    for (const auto& plane : planes) {
        for (int dy = -radius; dy <= radius; ++dy) {
            const int sy = clamp_coord(y + dy, h);
            for (int dx = -radius; dx <= radius; ++dx) {
                const int sx = clamp_coord(x + dx, w);
                out[idx++] = plane[static_cast<std::size_t>(sy) * w + sx];
            }
        }
    }
    if (bias_term) out[idx] = 1.0;
}

// In-place Cholesky solve of a symmetric positive-definite system.
void solve_spd(std::vector<double>& a, std::vector<double>& b, int n) {
    for (int attempt = 0; attempt < 2; ++attempt) {
        std::vector<double> l(a);
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            for (int j = 0; j <= i; ++j) {
                double sum = l[static_cast<std::size_t>(i) * n + j];
                for (int k = 0; k < j; ++k) {
                    sum -= l[static_cast<std::size_t>(i) * n + k] * l[static_cast<std::size_t>(j) * n + k];
                }
                if (i == j) {
                    if (sum <= 0.0) {
                        ok = false;
                        break;
                    }
                    l[static_cast<std::size_t>(i) * n + j] = std::sqrt(sum);
                } else {
                    l[static_cast<std::size_t>(i) * n + j] = sum / l[static_cast<std::size_t>(j) * n + j];
                }
            }
        }
        if (!ok) {
            // Degenerate normal matrix; retry once with a small diagonal jitter.
            double trace = 0.0;
            for (int i = 0; i < n; ++i) trace += a[static_cast<std::size_t>(i) * n + i];
            const double jitter = std::max(1e-12, 1e-12 * trace / n);
            for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + i] += jitter;
            continue;
        }
        // Forward then backward substitution, overwriting b with the solution.
        for (int i = 0; i < n; ++i) {
            double sum = b[i];
            for (int k = 0; k < i; ++k) sum -= l[static_cast<std::size_t>(i) * n + k] * b[k];
            b[i] = sum / l[static_cast<std::size_t>(i) * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double sum = b[i];
            for (int k = i + 1; k < n; ++k) sum -= l[static_cast<std::size_t>(k) * n + i] * b[k];
            b[i] = sum / l[static_cast<std::size_t>(i) * n + i];
        }
        return;
    }
    throw TrainingError("linear_patch: normal equations are not positive definite");
}

struct UsableSamples {
    std::vector<std::size_t> indices;
    std::vector<std::size_t> valid_counts;
};

UsableSamples usable_samples(const std::vector<TrainSample>& samples, std::size_t channels,
                             const std::string& who) {
    if (samples.empty()) throw TrainingError(who + ": no training samples");
    UsableSamples u;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        if (samples[s].input->channel_count() != channels) {
            throw StructuralError(who + ": sample " + std::to_string(s) +
                                  " has wrong channel count");
        }
        const std::size_t n = samples[s].target->valid_count();
        if (n == 0) continue;
        u.indices.push_back(s);
        u.valid_counts.push_back(n);
    }
    if (u.indices.empty()) {
        throw TrainingError(who + ": undefined objective, every target is entirely invalid");
    }
    return u;
}

class FunctionObjective : public DifferentiableObjective {
public:
    FunctionObjective(std::vector<double> params, std::function<double(std::span<const double>)> loss,
                      std::function<std::vector<double>(std::span<const double>)> grad)
        : params_(std::move(params)), loss_(std::move(loss)), grad_(std::move(grad)) {}

    std::size_t param_count() const override { return params_.size(); }
    std::vector<double> get_params() const override { return params_; }
    void set_params(std::span<const double> p) override { params_.assign(p.begin(), p.end()); }
    double loss() const override { return loss_(params_); }
    std::vector<double> gradient() const override { return grad_(params_); }

private:
    std::vector<double> params_;
    std::function<double(std::span<const double>)> loss_;
    std::function<std::vector<double>(std::span<const double>)> grad_;
};

}  // namespace

GradientCheckResult gradient_check(DifferentiableObjective& objective, std::size_t sample_count,
                                   double step, std::uint64_t seed) {
    const std::size_t n = objective.param_count();
    if (n == 0) throw ParameterError("gradient_check: objective has no parameters");

    std::vector<std::size_t> indices(n);
    std::iota(indices.begin(), indices.end(), 0);
    if (sample_count < n) {
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i < sample_count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(indices[i], indices[pick(rng)]);
        }
        indices.resize(sample_count);
    }

    const std::vector<double> origin = objective.get_params();
    const std::vector<double> analytic = objective.gradient();

    GradientCheckResult result;
    std::vector<double> probe = origin;
    for (std::size_t j : indices) {
        probe[j] = origin[j] + step;
        objective.set_params(probe);
        const double plus = objective.loss();
        probe[j] = origin[j] - step;
        objective.set_params(probe);
        const double minus = objective.loss();
        probe[j] = origin[j];

        const double fd = (plus - minus) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[j]), std::abs(fd), 1e-6});
        result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic[j] - fd) / denom);
        ++result.params_checked;
    }
    objective.set_params(origin);
    return result;
}

// ---------------------------------------------------------------------------
// LinearPatchLink

LinearPatchLink::LinearPatchLink(std::vector<std::string> channel_names, int patch_radius,
                                 double ridge_lambda)
    : names_(std::move(channel_names)), radius_(patch_radius), lambda_(ridge_lambda) {
    if (names_.empty()) throw ParameterError("linear_patch: need at least one channel");
    if (radius_ < 0) throw ParameterError("linear_patch: patch radius must be >= 0");
    if (lambda_ < 0.0) throw ParameterError("linear_patch: ridge lambda must be >= 0");
    weights_.assign(feature_count(), 0.0);
}

std::size_t LinearPatchLink::feature_count() const {
    const std::size_t side = 2 * static_cast<std::size_t>(radius_) + 1;
    return names_.size() * side * side + 1;
}

LayerGrid LinearPatchLink::predict(const Volume& input) const {
    check_channels(input, names_, "linear_patch.predict");
    input.validate("linear_patch.predict");
    const int w = input.width(), h = input.height();
    const auto planes = fill_volume(input);
    const std::size_t nf = feature_count();
    std::vector<double> feat(nf);
    LayerGrid out(w, h, 0.0, true);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            extract_patch(planes, w, h, x, y, radius_, true, feat.data());
            double acc = 0.0;
            for (std::size_t f = 0; f < nf; ++f) acc += weights_[f] * feat[f];
            out.at(x, y) = clamp01(acc);
        }
    }
    return out;
}

TrainReport LinearPatchLink::fit(const std::vector<TrainSample>& samples,
                                 const TrainConfig& config) {
    config.validate();
    const auto usable = usable_samples(samples, names_.size(), "linear_patch.fit");
    const std::size_t nf = feature_count();
    const double inv_n = 1.0 / static_cast<double>(usable.indices.size());

    std::vector<double> gram(nf * nf, 0.0);
    std::vector<double> rhs(nf, 0.0);
    std::vector<double> feat(nf);

    for (std::size_t u = 0; u < usable.indices.size(); ++u) {
        const TrainSample& sample = samples[usable.indices[u]];
        const int w = sample.input->width(), h = sample.input->height();
        const auto planes = fill_volume(*sample.input);
        const LayerGrid& target = *sample.target;
        const double weight = inv_n / static_cast<double>(usable.valid_counts[u]);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!target.valid_at(x, y)) continue;
                extract_patch(planes, w, h, x, y, radius_, true, feat.data());
                const double tv = target.at(x, y);
                for (std::size_t i = 0; i < nf; ++i) {
                    const double wi = weight * feat[i];
                    rhs[i] += wi * tv;
                    double* row = gram.data() + i * nf;
                    for (std::size_t j = i; j < nf; ++j) row[j] += wi * feat[j];
                }
            }
        }
    }
    for (std::size_t i = 0; i < nf; ++i) {
        for (std::size_t j = 0; j < i; ++j) gram[i * nf + j] = gram[j * nf + i];
    }
    // Ridge on the weights, not the bias (the last feature).
    for (std::size_t i = 0; i + 1 < nf; ++i) gram[i * nf + i] += lambda_;

    solve_spd(gram, rhs, static_cast<int>(nf));
    weights_ = rhs;

    double loss = 0.0;
    for (std::size_t u = 0; u < usable.indices.size(); ++u) {
        const TrainSample& sample = samples[usable.indices[u]];
        const int w = sample.input->width(), h = sample.input->height();
        const auto planes = fill_volume(*sample.input);
        const LayerGrid& target = *sample.target;
        double acc = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!target.valid_at(x, y)) continue;
                extract_patch(planes, w, h, x, y, radius_, true, feat.data());
                double pred = 0.0;
                for (std::size_t f = 0; f < nf; ++f) pred += weights_[f] * feat[f];
                const double d = pred - target.at(x, y);
                acc += d * d;
            }
        }
        loss += acc / static_cast<double>(usable.valid_counts[u]);
    }
    TrainReport report;
    report.final_loss = loss * inv_n;
    report.epoch_loss = {report.final_loss};
    report.epochs_run = 1;
    return report;
}

std::unique_ptr<DifferentiableObjective> LinearPatchLink::objective(const Volume& input,
                                                                    const LayerGrid& target) const {
    check_channels(input, names_, "linear_patch.objective");
    const int w = input.width(), h = input.height();
    auto planes = std::make_shared<std::vector<std::vector<double>>>(fill_volume(input));
    auto tgt = std::make_shared<LayerGrid>(target);
    const std::size_t nf = feature_count();
    const int radius = radius_;
    const std::size_t n_valid = target.valid_count();
    if (n_valid == 0) throw TrainingError("linear_patch.objective: target has no valid cells");

    auto loss_fn = [=](std::span<const double> p) {
        std::vector<double> feat(nf);
        double acc = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!tgt->valid_at(x, y)) continue;
                extract_patch(*planes, w, h, x, y, radius, true, feat.data());
                double pred = 0.0;
                for (std::size_t f = 0; f < nf; ++f) pred += p[f] * feat[f];
                const double d = pred - tgt->at(x, y);
                acc += d * d;
            }
        }
        return acc / static_cast<double>(n_valid);
    };
    auto grad_fn = [=](std::span<const double> p) {
        std::vector<double> feat(nf);
        std::vector<double> grad(nf, 0.0);
        const double scale = 2.0 / static_cast<double>(n_valid);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!tgt->valid_at(x, y)) continue;
                extract_patch(*planes, w, h, x, y, radius, true, feat.data());
                double pred = 0.0;
                for (std::size_t f = 0; f < nf; ++f) pred += p[f] * feat[f];
                const double g = scale * (pred - tgt->at(x, y));
                for (std::size_t f = 0; f < nf; ++f) grad[f] += g * feat[f];
            }
        }
        return grad;
    };
    return std::make_unique<FunctionObjective>(weights_, std::move(loss_fn), std::move(grad_fn));
}

ModelBlob LinearPatchLink::to_blob() const {
    nlohmann::json hyper;
    hyper["patch_radius"] = radius_;
    hyper["ridge_lambda"] = lambda_;
    return {kind(), hyper.dump(), names_, weights_};
}

std::unique_ptr<LinearPatchLink> LinearPatchLink::from_blob(const ModelBlob& blob) {
    if (blob.kind != "linear_patch") throw FormatError("linear_patch: wrong blob kind " + blob.kind);
    const auto hyper = nlohmann::json::parse(blob.hyper_json);
    auto link = std::make_unique<LinearPatchLink>(blob.channel_order, hyper.at("patch_radius").get<int>(),
                                                  hyper.at("ridge_lambda").get<double>());
    if (blob.params.size() != link->feature_count()) {
        throw FormatError("linear_patch: parameter count mismatch");
    }
    link->weights_ = blob.params;
    return link;
}

std::unique_ptr<LinkModel> LinearPatchLink::clone() const {
    return std::make_unique<LinearPatchLink>(*this);
}

// ---------------------------------------------------------------------------
// TinyConvLink

namespace {

struct ConvLayout {
    std::size_t w1, b1, w2, b2, total;
    std::size_t w1_off = 0, b1_off, w2_off, b2_off;
};

ConvLayout conv_layout(std::size_t channels, std::size_t hidden) {
    ConvLayout l{};
    l.w1 = hidden * channels * 9;
    l.b1 = hidden;
    l.w2 = hidden * 9;
    l.b2 = 1;
    l.b1_off = l.w1;
    l.w2_off = l.w1 + l.b1;
    l.b2_off = l.w1 + l.b1 + l.w2;
    l.total = l.w1 + l.b1 + l.w2 + l.b2;
    return l;
}

std::vector<int> identity_order(std::size_t n) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    return order;
}

// Forward pass through conv-relu-conv given filled input planes. Fills
// pre-activations (hidden maps before relu) when requested for backprop.
void tiny_conv_forward(int w, int h, const std::vector<std::vector<double>>& planes,
                       std::span<const double> params, std::size_t channels, std::size_t hidden,
                       std::vector<std::vector<double>>* pre1_out, std::vector<double>& out) {
    const ConvLayout layout = conv_layout(channels, hidden);
    const std::size_t px = static_cast<std::size_t>(w) * h;
    const auto order = identity_order(channels);

    std::vector<const double*> in_ptrs;
    for (const auto& p : planes) in_ptrs.push_back(p.data());

    std::vector<std::vector<double>> pre1(hidden, std::vector<double>(px));
    std::vector<double*> pre1_ptrs;
    for (auto& p : pre1) pre1_ptrs.push_back(p.data());
    detail::conv3x3_forward(w, h, in_ptrs, params.data() + layout.w1_off,
                            params.data() + layout.b1_off, static_cast<int>(hidden), order,
                            pre1_ptrs);

    std::vector<std::vector<double>> act(hidden, std::vector<double>(px));
    for (std::size_t m = 0; m < hidden; ++m) {
        for (std::size_t p = 0; p < px; ++p) act[m][p] = pre1[m][p] > 0.0 ? pre1[m][p] : 0.0;
    }

    std::vector<const double*> act_ptrs;
    for (const auto& p : act) act_ptrs.push_back(p.data());
    out.resize(px);
    std::vector<double*> out_ptr{out.data()};
    detail::conv3x3_forward(w, h, act_ptrs, params.data() + layout.w2_off,
                            params.data() + layout.b2_off, 1, identity_order(hidden), out_ptr);

    if (pre1_out) *pre1_out = std::move(pre1);
}

// Loss and parameter gradient of one sample under the masked L2 objective,
// scaled by `weight`. Returns the weighted sum of squared residuals.
double tiny_conv_loss_grad(int w, int h, const std::vector<std::vector<double>>& planes,
                           const LayerGrid& target, double weight, std::span<const double> p,
                           std::size_t channels, std::size_t hidden, std::span<double> grad) {
    const ConvLayout layout = conv_layout(channels, hidden);
    const std::size_t px = static_cast<std::size_t>(w) * h;

    std::vector<std::vector<double>> pre1;
    std::vector<double> out;
    tiny_conv_forward(w, h, planes, p, channels, hidden, &pre1, out);

    double loss = 0.0;
    std::vector<double> d_out(px, 0.0);
    for (std::size_t i = 0; i < px; ++i) {
        if (!target.mask[i]) continue;
        const double res = out[i] - target.values[i];
        loss += weight * res * res;
        d_out[i] = 2.0 * weight * res;
    }

    std::vector<std::vector<double>> act(hidden, std::vector<double>(px));
    for (std::size_t m = 0; m < hidden; ++m) {
        for (std::size_t i = 0; i < px; ++i) act[m][i] = pre1[m][i] > 0.0 ? pre1[m][i] : 0.0;
    }
    std::vector<const double*> act_ptrs;
    for (const auto& a : act) act_ptrs.push_back(a.data());
    std::vector<std::vector<double>> d_act(hidden, std::vector<double>(px, 0.0));
    std::vector<double*> d_act_ptrs;
    for (auto& a : d_act) d_act_ptrs.push_back(a.data());
    std::vector<const double*> d_out_ptrs{d_out.data()};
    detail::conv3x3_backward(w, h, act_ptrs, p.data() + layout.w2_off, 1, identity_order(hidden),
                             d_out_ptrs, grad.data() + layout.w2_off, grad.data() + layout.b2_off,
                             &d_act_ptrs);

    for (std::size_t m = 0; m < hidden; ++m) {
        for (std::size_t i = 0; i < px; ++i) {
            if (pre1[m][i] <= 0.0) d_act[m][i] = 0.0;
        }
    }
    std::vector<const double*> in_ptrs;
    for (const auto& pl : planes) in_ptrs.push_back(pl.data());
    std::vector<const double*> d_pre1_ptrs;
    for (const auto& a : d_act) d_pre1_ptrs.push_back(a.data());
    detail::conv3x3_backward(w, h, in_ptrs, p.data() + layout.w1_off, static_cast<int>(hidden),
                             identity_order(channels), d_pre1_ptrs, grad.data() + layout.w1_off,
                             grad.data() + layout.b1_off, nullptr);
    return loss;
}

}  // namespace

TinyConvLink::TinyConvLink(std::vector<std::string> channel_names, int hidden_maps,
                           std::uint64_t init_seed)
    : names_(std::move(channel_names)), hidden_(hidden_maps) {
    if (names_.empty()) throw ParameterError("tiny_conv: need at least one channel");
    if (hidden_ < 1) throw ParameterError("tiny_conv: need at least one hidden map");
    const ConvLayout layout = conv_layout(names_.size(), hidden_);
    params_.assign(layout.total, 0.0);
    std::mt19937_64 rng(init_seed);
    std::normal_distribution<double> w1_dist(0.0, std::sqrt(2.0 / (9.0 * names_.size())));
    for (std::size_t i = 0; i < layout.w1; ++i) params_[i] = w1_dist(rng);
    // Zero output kernels with a mid-range bias: training starts from the
    // constant-0.5 prediction instead of a random large-loss point.
    params_[layout.b2_off] = 0.5;
}

std::vector<double> TinyConvLink::forward_raw(const Volume& input) const {
    check_channels(input, names_, "tiny_conv.predict");
    input.validate("tiny_conv.predict");
    const auto planes = fill_volume(input);
    std::vector<double> out;
    tiny_conv_forward(input.width(), input.height(), planes, params_, names_.size(), hidden_,
                      nullptr, out);
    return out;
}

LayerGrid TinyConvLink::predict(const Volume& input) const {
    const auto raw = forward_raw(input);
    LayerGrid out(input.width(), input.height(), 0.0, true);
    for (std::size_t i = 0; i < raw.size(); ++i) out.values[i] = clamp01(raw[i]);
    return out;
}

TrainReport TinyConvLink::fit(const std::vector<TrainSample>& samples, const TrainConfig& config) {
    const auto usable = usable_samples(samples, names_.size(), "tiny_conv.fit");
    const double inv_n = 1.0 / static_cast<double>(usable.indices.size());
    const std::size_t channels = names_.size();
    const std::size_t hidden = hidden_;
    const ConvLayout layout = conv_layout(channels, hidden);

    struct Prepared {
        std::vector<std::vector<double>> planes;
        const LayerGrid* target;
        double weight;
        int w, h;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(usable.indices.size());
    for (std::size_t u = 0; u < usable.indices.size(); ++u) {
        const TrainSample& s = samples[usable.indices[u]];
        prepared.push_back({fill_volume(*s.input), s.target.get(),
                            inv_n / static_cast<double>(usable.valid_counts[u]), s.input->width(),
                            s.input->height()});
    }

    auto loss_and_grad = [&](std::span<const double> p, std::span<double> grad) {
        double loss = 0.0;
        for (const Prepared& sample : prepared) {
            loss += tiny_conv_loss_grad(sample.w, sample.h, sample.planes, *sample.target,
                                        sample.weight, p, channels, hidden, grad);
        }
        return loss;
    };

    return train_adam(params_, loss_and_grad, config);
}

std::unique_ptr<DifferentiableObjective> TinyConvLink::objective(const Volume& input,
                                                                 const LayerGrid& target) const {
    check_channels(input, names_, "tiny_conv.objective");
    auto self = std::make_shared<TinyConvLink>(*this);
    auto sample = std::make_shared<TrainSample>(
        TrainSample{std::make_shared<Volume>(input), std::make_shared<LayerGrid>(target)});
    if (target.valid_count() == 0) {
        throw TrainingError("tiny_conv.objective: target has no valid cells");
    }

    auto loss_fn = [self, sample](std::span<const double> p) {
        self->params_.assign(p.begin(), p.end());
        const auto out = self->forward_raw(*sample->input);
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (!sample->target->mask[i]) continue;
            const double d = out[i] - sample->target->values[i];
            acc += d * d;
            ++n;
        }
        return acc / static_cast<double>(n);
    };
    const std::size_t channels = names_.size();
    const std::size_t hidden = hidden_;
    auto planes = std::make_shared<std::vector<std::vector<double>>>(fill_volume(input));
    const int w = input.width(), h = input.height();
    const double weight = 1.0 / static_cast<double>(target.valid_count());
    auto grad_fn = [=](std::span<const double> p) {
        std::vector<double> grad(p.size(), 0.0);
        tiny_conv_loss_grad(w, h, *planes, *sample->target, weight, p, channels, hidden, grad);
        return grad;
    };
    return std::make_unique<FunctionObjective>(params_, std::move(loss_fn), std::move(grad_fn));
}

ModelBlob TinyConvLink::to_blob() const {
    nlohmann::json hyper;
    hyper["hidden_maps"] = hidden_;
    return {kind(), hyper.dump(), names_, params_};
}

std::unique_ptr<TinyConvLink> TinyConvLink::from_blob(const ModelBlob& blob) {
    if (blob.kind != "tiny_conv") throw FormatError("tiny_conv: wrong blob kind " + blob.kind);
    const auto hyper = nlohmann::json::parse(blob.hyper_json);
    auto link = std::make_unique<TinyConvLink>(blob.channel_order, hyper.at("hidden_maps").get<int>());
    if (blob.params.size() != link->params_.size()) {
        throw FormatError("tiny_conv: parameter count mismatch");
    }
    link->params_ = blob.params;
    return link;
}

std::unique_ptr<LinkModel> TinyConvLink::clone() const {
    return std::make_unique<TinyConvLink>(*this);
}

// ---------------------------------------------------------------------------
// MTEBaseline

MTEBaseline::MTEBaseline(std::vector<std::string> input_names, std::vector<std::string> output_names,
                         int hidden_width, int patch_radius, std::uint64_t init_seed)
    : in_names_(std::move(input_names)),
      out_names_(std::move(output_names)),
      hidden_(hidden_width),
      radius_(patch_radius) {
    if (in_names_.empty() || out_names_.empty()) {
        throw ParameterError("mte: need input and output channels");
    }
    if (hidden_ < 1) throw ParameterError("mte: hidden width must be positive");
    const std::size_t side = 2 * static_cast<std::size_t>(radius_) + 1;
    const std::size_t nf = in_names_.size() * side * side;
    const std::size_t no = out_names_.size();
    params_.assign(hidden_ * nf + hidden_ + no * hidden_ + no, 0.0);
    std::mt19937_64 rng(init_seed);
    std::normal_distribution<double> w1_dist(0.0, std::sqrt(2.0 / static_cast<double>(nf)));
    for (std::size_t i = 0; i < hidden_ * nf; ++i) params_[i] = w1_dist(rng);
    // Zero output weights, mid-range biases (see TinyConvLink).
    for (std::size_t i = 0; i < no; ++i) {
        params_[hidden_ * nf + hidden_ + no * hidden_ + i] = 0.5;
    }
}

std::vector<LayerGrid> MTEBaseline::predict_all(const Volume& input) const {
    check_channels(input, in_names_, "mte.predict");
    input.validate("mte.predict");
    const int w = input.width(), h = input.height();
    const std::size_t side = 2 * static_cast<std::size_t>(radius_) + 1;
    const std::size_t nf = in_names_.size() * side * side;
    const std::size_t no = out_names_.size();
    const double* w1 = params_.data();
    const double* b1 = w1 + hidden_ * nf;
    const double* w2 = b1 + hidden_;
    const double* b2 = w2 + no * hidden_;

    const auto planes = fill_volume(input);
    std::vector<double> feat(nf);
    std::vector<double> hid(hidden_);
    std::vector<LayerGrid> out(no, LayerGrid(w, h, 0.0, true));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            extract_patch(planes, w, h, x, y, radius_, false, feat.data());
            for (int j = 0; j < hidden_; ++j) {
                double acc = b1[j];
                const double* row = w1 + static_cast<std::size_t>(j) * nf;
                for (std::size_t f = 0; f < nf; ++f) acc += row[f] * feat[f];
                hid[j] = acc > 0.0 ? acc : 0.0;
            }
            for (std::size_t i = 0; i < no; ++i) {
                double acc = b2[i];
                const double* row = w2 + i * hidden_;
                for (int j = 0; j < hidden_; ++j) acc += row[j] * hid[j];
                out[i].at(x, y) = clamp01(acc);
            }
        }
    }
    return out;
}

TrainReport MTEBaseline::fit(const std::vector<Sample>& samples, const TrainConfig& config) {
    if (samples.empty()) throw TrainingError("mte.fit: no training samples");
    const std::size_t side = 2 * static_cast<std::size_t>(radius_) + 1;
    const std::size_t nf = in_names_.size() * side * side;
    const std::size_t no = out_names_.size();

    struct Prepared {
        std::vector<double> features;  // px * nf
        std::vector<const LayerGrid*> targets;
        std::vector<double> weights;  // per output channel
        std::size_t px;
    };
    std::vector<Prepared> prepared;
    std::size_t usable_terms = 0;
    for (const Sample& s : samples) {
        if (s.targets.size() != no) throw StructuralError("mte.fit: target count mismatch");
        check_channels(*s.input, in_names_, "mte.fit");
        Prepared prep;
        const int w = s.input->width(), h = s.input->height();
        prep.px = static_cast<std::size_t>(w) * h;
        const auto planes = fill_volume(*s.input);
        prep.features.resize(prep.px * nf);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                extract_patch(planes, w, h, x, y, radius_, false,
                              prep.features.data() + (static_cast<std::size_t>(y) * w + x) * nf);
            }
        }
        prep.weights.resize(no, 0.0);
        for (std::size_t i = 0; i < no; ++i) {
            prep.targets.push_back(s.targets[i].get());
            const std::size_t n = s.targets[i]->valid_count();
            if (n > 0) {
                prep.weights[i] = 1.0 / static_cast<double>(n);
                ++usable_terms;
            }
        }
        prepared.push_back(std::move(prep));
    }
    if (usable_terms == 0) {
        throw TrainingError("mte.fit: undefined objective, every target is entirely invalid");
    }
    const double inv_terms = 1.0 / static_cast<double>(usable_terms);

    auto loss_and_grad = [&](std::span<const double> p, std::span<double> grad) {
        const double* w1 = p.data();
        const double* b1 = w1 + hidden_ * nf;
        const double* w2 = b1 + hidden_;
        const double* b2 = w2 + no * hidden_;
        double* g_w1 = grad.data();
        double* g_b1 = g_w1 + hidden_ * nf;
        double* g_w2 = g_b1 + hidden_;
        double* g_b2 = g_w2 + no * hidden_;

        double loss = 0.0;
        std::vector<double> hid(hidden_), pre(hidden_), res(no), d_hid(hidden_);
        for (const Prepared& sample : prepared) {
            for (std::size_t px = 0; px < sample.px; ++px) {
                const double* feat = sample.features.data() + px * nf;
                for (int j = 0; j < hidden_; ++j) {
                    double acc = b1[j];
                    const double* row = w1 + static_cast<std::size_t>(j) * nf;
                    for (std::size_t f = 0; f < nf; ++f) acc += row[f] * feat[f];
                    pre[j] = acc;
                    hid[j] = acc > 0.0 ? acc : 0.0;
                }
                bool any = false;
                for (std::size_t i = 0; i < no; ++i) {
                    res[i] = 0.0;
                    if (sample.weights[i] == 0.0 || !sample.targets[i]->mask[px]) continue;
                    double acc = b2[i];
                    const double* row = w2 + i * hidden_;
                    for (int j = 0; j < hidden_; ++j) acc += row[j] * hid[j];
                    const double r = acc - sample.targets[i]->values[px];
                    const double wgt = inv_terms * sample.weights[i];
                    loss += wgt * r * r;
                    res[i] = 2.0 * wgt * r;
                    any = true;
                }
                if (!any) continue;
                std::fill(d_hid.begin(), d_hid.end(), 0.0);
                for (std::size_t i = 0; i < no; ++i) {
                    if (res[i] == 0.0) continue;
                    g_b2[i] += res[i];
                    double* grow = g_w2 + i * hidden_;
                    const double* row = w2 + i * hidden_;
                    for (int j = 0; j < hidden_; ++j) {
                        grow[j] += res[i] * hid[j];
                        d_hid[j] += res[i] * row[j];
                    }
                }
                for (int j = 0; j < hidden_; ++j) {
                    if (pre[j] <= 0.0 || d_hid[j] == 0.0) continue;
                    g_b1[j] += d_hid[j];
                    double* grow = g_w1 + static_cast<std::size_t>(j) * nf;
                    for (std::size_t f = 0; f < nf; ++f) grow[f] += d_hid[j] * feat[f];
                }
            }
        }
        return loss;
    };

    return train_adam(params_, loss_and_grad, config);
}

ModelBlob MTEBaseline::to_blob() const {
    nlohmann::json hyper;
    hyper["hidden_width"] = hidden_;
    hyper["patch_radius"] = radius_;
    hyper["output_names"] = out_names_;
    return {"mte", hyper.dump(), in_names_, params_};
}

MTEBaseline MTEBaseline::from_blob(const ModelBlob& blob) {
    if (blob.kind != "mte") throw FormatError("mte: wrong blob kind " + blob.kind);
    const auto hyper = nlohmann::json::parse(blob.hyper_json);
    MTEBaseline model(blob.channel_order, hyper.at("output_names").get<std::vector<std::string>>(),
                      hyper.at("hidden_width").get<int>(), hyper.at("patch_radius").get<int>());
    if (blob.params.size() != model.params_.size()) {
        throw FormatError("mte: parameter count mismatch");
    }
    model.params_ = blob.params;
    return model;
}

// ---------------------------------------------------------------------------

std::unique_ptr<LinkModel> make_link(const std::string& kind,
                                     std::vector<std::string> channel_names, std::uint64_t seed) {
    if (kind == "linear_patch") {
        return std::make_unique<LinearPatchLink>(std::move(channel_names));
    }
    if (kind == "tiny_conv") {
        return std::make_unique<TinyConvLink>(std::move(channel_names), 8, seed);
    }
    throw ParameterError("make_link: unknown link kind '" + kind + "'");
}

std::unique_ptr<LinkModel> link_from_blob(const ModelBlob& blob) {
    if (blob.kind == "linear_patch") return LinearPatchLink::from_blob(blob);
    if (blob.kind == "tiny_conv") return TinyConvLink::from_blob(blob);
    throw FormatError("link_from_blob: unknown kind '" + blob.kind + "'");
}

}  // namespace mthg
