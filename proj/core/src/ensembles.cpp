#include "mthg/ensembles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "conv_util.hpp"

namespace mthg {

namespace {

constexpr int kDwHidden = 16;   // hidden units of the S-NN_DW weight network
constexpr int kConvHidden = 8;  // hidden maps of the convolutional variants

struct Layout {
    std::size_t c = 0;
    // S-NN_DW weight network
    std::size_t w1_off = 0, b1_off = 0, w2_off = 0, b2_off = 0;
    // Convolutional variants
    std::size_t k1_off = 0, c1_off = 0, k2_off = 0, c2_off = 0, skip_off = 0;
    std::size_t total = 0;
};

Layout layout_for(EnsembleVariant v, std::size_t c) {
    Layout l;
    l.c = c;
    switch (v) {
        case EnsembleVariant::PlainMean:
            l.total = 0;
            break;
        case EnsembleVariant::SMean:
            l.total = c;  // alphas only
            break;
        case EnsembleVariant::SLrFw:
            // [alpha c][w c][b 1]
            l.w1_off = c;
            l.total = 2 * c + 1;
            break;
        case EnsembleVariant::SNnDw:
            // [alpha c][W1 H x 2c][b1 H][W2 c x H][b2 c]
            l.w1_off = c;
            l.b1_off = l.w1_off + static_cast<std::size_t>(kDwHidden) * 2 * c;
            l.w2_off = l.b1_off + kDwHidden;
            l.b2_off = l.w2_off + c * kDwHidden;
            l.total = l.b2_off + c;
            break;
        case EnsembleVariant::SNnDpw:
            // [alpha c][K1 H x c x 9][c1 H][K2 c x H x 9][c2 c]
            l.k1_off = c;
            l.c1_off = l.k1_off + static_cast<std::size_t>(kConvHidden) * c * 9;
            l.k2_off = l.c1_off + kConvHidden;
            l.c2_off = l.k2_off + c * static_cast<std::size_t>(kConvHidden) * 9;
            l.total = l.c2_off + c;
            break;
        case EnsembleVariant::SNnD:
            // [alpha c][K1 H x c x 9][c1 H][K2 1 x H x 9][c2 1][skip c]
            l.k1_off = c;
            l.c1_off = l.k1_off + static_cast<std::size_t>(kConvHidden) * c * 9;
            l.k2_off = l.c1_off + kConvHidden;
            l.c2_off = l.k2_off + static_cast<std::size_t>(kConvHidden) * 9;
            l.skip_off = l.c2_off + 1;
            l.total = l.skip_off + c;
            break;
    }
    return l;
}

bool has_gate(EnsembleVariant v) { return v != EnsembleVariant::PlainMean; }

std::vector<int> canonical_order(const std::vector<std::string>& names) {
    std::vector<int> order(names.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return names[a] < names[b]; });
    return order;
}

// Everything the backward pass needs from one forward evaluation.
struct EvalState {
    int w = 0, h = 0;
    std::size_t px = 0, c = 0;
    const CandidateStack* stack = nullptr;
    std::vector<double> svals;                // gate values s_c
    std::vector<std::vector<double>> gated;   // s_c * Y_c, 0 under invalid cells
    std::vector<double> out;                  // pre-clamp combined output
    std::vector<std::uint8_t> out_mask;
    // mean variants
    std::vector<double> denom;
    // S-NN_DW
    std::vector<double> stats, mlp_pre, mlp_hid, dyn_w;
    std::vector<std::size_t> stat_counts;
    // convolutional variants
    std::vector<std::vector<double>> pre1, act1, weight_maps;
    std::vector<double> conv_out;
};

}  // namespace

std::string to_string(EnsembleVariant v) {
    switch (v) {
        case EnsembleVariant::PlainMean: return "plain-mean";
        case EnsembleVariant::SMean: return "s-mean";
        case EnsembleVariant::SLrFw: return "s-lr-fw";
        case EnsembleVariant::SNnDw: return "s-nn-dw";
        case EnsembleVariant::SNnDpw: return "s-nn-dpw";
        case EnsembleVariant::SNnD: return "s-nn-d";
    }
    return "?";
}

EnsembleVariant ensemble_variant_from_string(const std::string& s) {
    if (s == "plain-mean") return EnsembleVariant::PlainMean;
    if (s == "s-mean") return EnsembleVariant::SMean;
    if (s == "s-lr-fw") return EnsembleVariant::SLrFw;
    if (s == "s-nn-dw") return EnsembleVariant::SNnDw;
    if (s == "s-nn-dpw") return EnsembleVariant::SNnDpw;
    if (s == "s-nn-d") return EnsembleVariant::SNnD;
    throw ParameterError("unknown ensemble variant '" + s + "'");
}

void CandidateStack::validate(const std::string& what) const {
    if (names.size() != layers.size()) {
        throw StructuralError(what + ": candidate/name count mismatch");
    }
    for (std::size_t c = 0; c < layers.size(); ++c) {
        layers[c].validate(what + "[" + names[c] + "]");
        if (!layers[c].same_shape(layers.front())) {
            throw StructuralError(what + ": candidate '" + names[c] + "' dimension mismatch");
        }
    }
}

CandidateStack gate_apply(std::span<const double> alphas, const CandidateStack& stack) {
    if (alphas.size() != stack.layers.size()) {
        throw StructuralError("gate_apply: alpha count " + std::to_string(alphas.size()) +
                              " does not match candidate count " +
                              std::to_string(stack.layers.size()));
    }
    CandidateStack gated = stack;
    for (std::size_t c = 0; c < gated.layers.size(); ++c) {
        const double s = sigmoid(alphas[c]);
        auto& layer = gated.layers[c];
        for (std::size_t i = 0; i < layer.values.size(); ++i) {
            if (layer.mask[i]) layer.values[i] *= s;
        }
    }
    return gated;
}

EnsembleModel EnsembleModel::create(EnsembleVariant variant,
                                    std::vector<std::string> candidate_names,
                                    std::uint64_t init_seed) {
    if (candidate_names.empty()) {
        throw ParameterError("ensemble: need at least one candidate");
    }
    EnsembleModel model;
    model.variant_ = variant;
    model.names_ = std::move(candidate_names);
    model.canon_ = canonical_order(model.names_);
    const std::size_t c = model.names_.size();
    const Layout l = layout_for(variant, c);
    model.params_.assign(l.total, 0.0);
    // Gate initialization alpha=0 (s=0.5); combiner weights start at the
    // gated plain mean so training can only improve on it.
    const double mean_w = 2.0 / static_cast<double>(c);
    std::mt19937_64 rng(init_seed);
    switch (variant) {
        case EnsembleVariant::PlainMean:
        case EnsembleVariant::SMean:
            break;
        case EnsembleVariant::SLrFw:
            for (std::size_t i = 0; i < c; ++i) model.params_[l.w1_off + i] = mean_w;
            break;
        case EnsembleVariant::SNnDw: {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (2.0 * c)));
            for (std::size_t i = 0; i < static_cast<std::size_t>(kDwHidden) * 2 * c; ++i) {
                model.params_[l.w1_off + i] = dist(rng);
            }
            for (std::size_t i = 0; i < c; ++i) model.params_[l.b2_off + i] = mean_w;
            break;
        }
        case EnsembleVariant::SNnDpw: {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (9.0 * c)));
            for (std::size_t i = 0; i < static_cast<std::size_t>(kConvHidden) * c * 9; ++i) {
                model.params_[l.k1_off + i] = dist(rng);
            }
            for (std::size_t i = 0; i < c; ++i) model.params_[l.c2_off + i] = mean_w;
            break;
        }
        case EnsembleVariant::SNnD: {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (9.0 * c)));
            for (std::size_t i = 0; i < static_cast<std::size_t>(kConvHidden) * c * 9; ++i) {
                model.params_[l.k1_off + i] = dist(rng);
            }
            for (std::size_t i = 0; i < c; ++i) model.params_[l.skip_off + i] = mean_w;
            break;
        }
    }
    return model;
}

std::span<const double> EnsembleModel::gate_alphas() const {
    if (!has_gate(variant_)) return {};
    return {params_.data(), names_.size()};
}

namespace {

// Forward evaluation shared by forward(), fit() and the gradient objective.
EvalState forward_eval(EnsembleVariant variant, const std::vector<int>& canon,
                       std::span<const double> params, const CandidateStack& stack) {
    const std::size_t c = stack.layers.size();
    const Layout l = layout_for(variant, c);
    EvalState st;
    st.stack = &stack;
    st.c = c;
    st.w = stack.layers.front().width;
    st.h = stack.layers.front().height;
    st.px = static_cast<std::size_t>(st.w) * st.h;

    st.svals.resize(c, 1.0);
    if (has_gate(variant)) {
        for (std::size_t k = 0; k < c; ++k) st.svals[k] = sigmoid(params[k]);
    }
    st.gated.assign(c, std::vector<double>(st.px, 0.0));
    for (std::size_t k = 0; k < c; ++k) {
        const auto& layer = stack.layers[k];
        for (std::size_t i = 0; i < st.px; ++i) {
            if (layer.mask[i]) st.gated[k][i] = st.svals[k] * layer.values[i];
        }
    }

    st.out.assign(st.px, 0.0);
    st.out_mask.assign(st.px, 1);

    switch (variant) {
        case EnsembleVariant::PlainMean: {
            for (std::size_t i = 0; i < st.px; ++i) {
                double acc = 0.0;
                int n = 0;
                for (int k : canon) {
                    if (stack.layers[k].mask[i]) {
                        acc += stack.layers[k].values[i];
                        ++n;
                    }
                }
                if (n == 0) {
                    st.out[i] = 0.5;
                    st.out_mask[i] = 0;
                } else {
                    st.out[i] = acc / n;
                }
            }
            break;
        }
        case EnsembleVariant::SMean: {
            st.denom.assign(st.px, 0.0);
            for (std::size_t i = 0; i < st.px; ++i) {
                double num = 0.0, den = 0.0;
                for (int k : canon) {
                    if (stack.layers[k].mask[i]) {
                        num += st.gated[k][i];
                        den += st.svals[k];
                    }
                }
                st.denom[i] = den;
                if (den == 0.0) {
                    st.out[i] = 0.5;
                    st.out_mask[i] = 0;
                } else {
                    st.out[i] = num / den;
                }
            }
            break;
        }
        case EnsembleVariant::SLrFw: {
            const double* w = params.data() + l.w1_off;
            const double bias = params[l.total - 1];
            for (std::size_t i = 0; i < st.px; ++i) {
                double acc = bias;
                for (int k : canon) {
                    if (stack.layers[k].mask[i]) acc += w[k] * st.gated[k][i];
                }
                st.out[i] = acc;
            }
            break;
        }
        case EnsembleVariant::SNnDw: {
            // Per-channel valid means and variances of the gated stack.
            st.stats.assign(2 * c, 0.0);
            st.stat_counts.assign(c, 0);
            for (std::size_t k = 0; k < c; ++k) {
                double sum = 0.0;
                std::size_t n = 0;
                const auto& layer = stack.layers[k];
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (layer.mask[i]) {
                        sum += st.gated[k][i];
                        ++n;
                    }
                }
                st.stat_counts[k] = n;
                if (n == 0) continue;
                const double mean = sum / static_cast<double>(n);
                double var = 0.0;
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (layer.mask[i]) {
                        const double d = st.gated[k][i] - mean;
                        var += d * d;
                    }
                }
                st.stats[k] = mean;
                st.stats[c + k] = var / static_cast<double>(n);
            }
            // Weight network: 2c -> H -> c.
            st.mlp_pre.assign(kDwHidden, 0.0);
            st.mlp_hid.assign(kDwHidden, 0.0);
            for (int j = 0; j < kDwHidden; ++j) {
                double acc = params[l.b1_off + j];
                const double* row = params.data() + l.w1_off + static_cast<std::size_t>(j) * 2 * c;
                for (int k : canon) acc += row[k] * st.stats[k];
                for (int k : canon) acc += row[c + k] * st.stats[c + k];
                st.mlp_pre[j] = acc;
                st.mlp_hid[j] = acc > 0.0 ? acc : 0.0;
            }
            st.dyn_w.assign(c, 0.0);
            for (std::size_t k = 0; k < c; ++k) {
                double acc = params[l.b2_off + k];
                const double* row = params.data() + l.w2_off + k * kDwHidden;
                for (int j = 0; j < kDwHidden; ++j) acc += row[j] * st.mlp_hid[j];
                st.dyn_w[k] = acc;
            }
            for (std::size_t i = 0; i < st.px; ++i) {
                double acc = 0.0;
                for (int k : canon) {
                    if (stack.layers[k].mask[i]) acc += st.dyn_w[k] * st.gated[k][i];
                }
                st.out[i] = acc;
            }
            break;
        }
        case EnsembleVariant::SNnDpw:
        case EnsembleVariant::SNnD: {
            std::vector<const double*> in_ptrs;
            for (const auto& g : st.gated) in_ptrs.push_back(g.data());
            st.pre1.assign(kConvHidden, std::vector<double>(st.px));
            std::vector<double*> pre1_ptrs;
            for (auto& p : st.pre1) pre1_ptrs.push_back(p.data());
            detail::conv3x3_forward(st.w, st.h, in_ptrs, params.data() + l.k1_off,
                                    params.data() + l.c1_off, kConvHidden, canon, pre1_ptrs);
            st.act1.assign(kConvHidden, std::vector<double>(st.px));
            for (int m = 0; m < kConvHidden; ++m) {
                for (std::size_t i = 0; i < st.px; ++i) {
                    st.act1[m][i] = st.pre1[m][i] > 0.0 ? st.pre1[m][i] : 0.0;
                }
            }
            std::vector<const double*> act_ptrs;
            for (const auto& a : st.act1) act_ptrs.push_back(a.data());
            const std::vector<int> hidden_order = [&] {
                std::vector<int> o(kConvHidden);
                std::iota(o.begin(), o.end(), 0);
                return o;
            }();
            if (variant == EnsembleVariant::SNnDpw) {
                st.weight_maps.assign(c, std::vector<double>(st.px));
                std::vector<double*> map_ptrs;
                for (auto& m : st.weight_maps) map_ptrs.push_back(m.data());
                detail::conv3x3_forward(st.w, st.h, act_ptrs, params.data() + l.k2_off,
                                        params.data() + l.c2_off, static_cast<int>(c),
                                        hidden_order, map_ptrs);
                for (std::size_t i = 0; i < st.px; ++i) {
                    double acc = 0.0;
                    for (int k : canon) {
                        if (stack.layers[k].mask[i]) acc += st.weight_maps[k][i] * st.gated[k][i];
                    }
                    st.out[i] = acc;
                }
            } else {
                st.conv_out.assign(st.px, 0.0);
                std::vector<double*> out_ptr{st.conv_out.data()};
                detail::conv3x3_forward(st.w, st.h, act_ptrs, params.data() + l.k2_off,
                                        params.data() + l.c2_off, 1, hidden_order, out_ptr);
                const double* skip = params.data() + l.skip_off;
                for (std::size_t i = 0; i < st.px; ++i) {
                    double acc = st.conv_out[i];
                    for (int k : canon) {
                        if (stack.layers[k].mask[i]) acc += skip[k] * st.gated[k][i];
                    }
                    st.out[i] = acc;
                }
            }
            break;
        }
    }
    return st;
}

// Accumulates the parameter gradient for d(loss)/d(out) = d_out.
void backward_eval(EnsembleVariant variant, const std::vector<int>& canon,
                   std::span<const double> params, const EvalState& st,
                   std::span<const double> d_out, std::span<double> grad) {
    const std::size_t c = st.c;
    const Layout l = layout_for(variant, c);
    const CandidateStack& stack = *st.stack;

    // d(loss)/d(gated plane value) accumulated per candidate, valid cells only.
    std::vector<std::vector<double>> d_gated;

    switch (variant) {
        case EnsembleVariant::PlainMean:
            return;  // no parameters
        case EnsembleVariant::SMean: {
            // out = sum(s_c Y_c) / sum(s_c) over valid candidates.
            for (std::size_t k = 0; k < c; ++k) {
                const auto& layer = stack.layers[k];
                double da = 0.0;
                const double s = st.svals[k];
                const double sp = s * (1.0 - s);
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (!layer.mask[i] || !st.out_mask[i] || d_out[i] == 0.0) continue;
                    da += d_out[i] * (layer.values[i] - st.out[i]) / st.denom[i] * sp;
                }
                grad[k] += da;
            }
            return;
        }
        case EnsembleVariant::SLrFw: {
            const double* w = params.data() + l.w1_off;
            for (std::size_t k = 0; k < c; ++k) {
                const auto& layer = stack.layers[k];
                const double s = st.svals[k];
                const double sp = s * (1.0 - s);
                double dw = 0.0, da = 0.0;
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (!layer.mask[i] || d_out[i] == 0.0) continue;
                    dw += d_out[i] * st.gated[k][i];
                    da += d_out[i] * w[k] * layer.values[i] * sp;
                }
                grad[l.w1_off + k] += dw;
                grad[k] += da;
            }
            double db = 0.0;
            for (std::size_t i = 0; i < st.px; ++i) db += d_out[i];
            grad[l.total - 1] += db;
            return;
        }
        case EnsembleVariant::SNnDw: {
            // Output sum and the direct path into the gated planes.
            std::vector<double> d_dyn(c, 0.0);
            d_gated.assign(c, std::vector<double>(st.px, 0.0));
            for (std::size_t k = 0; k < c; ++k) {
                const auto& layer = stack.layers[k];
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (!layer.mask[i] || d_out[i] == 0.0) continue;
                    d_dyn[k] += d_out[i] * st.gated[k][i];
                    d_gated[k][i] += d_out[i] * st.dyn_w[k];
                }
            }
            // Weight network backward.
            std::vector<double> d_hid(kDwHidden, 0.0);
            for (std::size_t k = 0; k < c; ++k) {
                grad[l.b2_off + k] += d_dyn[k];
                const double* row = params.data() + l.w2_off + k * kDwHidden;
                double* grow = grad.data() + l.w2_off + k * kDwHidden;
                for (int j = 0; j < kDwHidden; ++j) {
                    grow[j] += d_dyn[k] * st.mlp_hid[j];
                    d_hid[j] += d_dyn[k] * row[j];
                }
            }
            std::vector<double> d_stats(2 * c, 0.0);
            for (int j = 0; j < kDwHidden; ++j) {
                if (st.mlp_pre[j] <= 0.0 || d_hid[j] == 0.0) continue;
                grad[l.b1_off + j] += d_hid[j];
                const double* row = params.data() + l.w1_off + static_cast<std::size_t>(j) * 2 * c;
                double* grow = grad.data() + l.w1_off + static_cast<std::size_t>(j) * 2 * c;
                for (std::size_t k = 0; k < 2 * c; ++k) {
                    grow[k] += d_hid[j] * st.stats[k];
                    d_stats[k] += d_hid[j] * row[k];
                }
            }
            // Stats depend on the gated planes.
            for (std::size_t k = 0; k < c; ++k) {
                const std::size_t n = st.stat_counts[k];
                if (n == 0) continue;
                const auto& layer = stack.layers[k];
                const double inv_n = 1.0 / static_cast<double>(n);
                const double dm = d_stats[k] * inv_n;
                const double dq = d_stats[c + k];
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (!layer.mask[i]) continue;
                    d_gated[k][i] += dm + dq * 2.0 * (st.gated[k][i] - st.stats[k]) * inv_n;
                }
            }
            break;
        }
        case EnsembleVariant::SNnDpw:
        case EnsembleVariant::SNnD: {
            d_gated.assign(c, std::vector<double>(st.px, 0.0));
            std::vector<std::vector<double>> d_act(kConvHidden, std::vector<double>(st.px, 0.0));
            std::vector<double*> d_act_ptrs;
            for (auto& a : d_act) d_act_ptrs.push_back(a.data());
            std::vector<const double*> act_ptrs;
            for (const auto& a : st.act1) act_ptrs.push_back(a.data());
            const std::vector<int> hidden_order = [&] {
                std::vector<int> o(kConvHidden);
                std::iota(o.begin(), o.end(), 0);
                return o;
            }();

            if (variant == EnsembleVariant::SNnDpw) {
                std::vector<std::vector<double>> d_maps(c, std::vector<double>(st.px, 0.0));
                for (std::size_t k = 0; k < c; ++k) {
                    const auto& layer = stack.layers[k];
                    for (std::size_t i = 0; i < st.px; ++i) {
                        if (!layer.mask[i] || d_out[i] == 0.0) continue;
                        d_maps[k][i] = d_out[i] * st.gated[k][i];
                        d_gated[k][i] += d_out[i] * st.weight_maps[k][i];
                    }
                }
                std::vector<const double*> d_map_ptrs;
                for (const auto& m : d_maps) d_map_ptrs.push_back(m.data());
                detail::conv3x3_backward(st.w, st.h, act_ptrs, params.data() + l.k2_off,
                                         static_cast<int>(c), hidden_order, d_map_ptrs,
                                         grad.data() + l.k2_off, grad.data() + l.c2_off,
                                         &d_act_ptrs);
            } else {
                const double* skip = params.data() + l.skip_off;
                for (std::size_t k = 0; k < c; ++k) {
                    const auto& layer = stack.layers[k];
                    double da = 0.0;
                    for (std::size_t i = 0; i < st.px; ++i) {
                        if (!layer.mask[i] || d_out[i] == 0.0) continue;
                        da += d_out[i] * st.gated[k][i];
                        d_gated[k][i] += d_out[i] * skip[k];
                    }
                    grad[l.skip_off + k] += da;
                }
                std::vector<const double*> d_conv_ptrs{d_out.data()};
                detail::conv3x3_backward(st.w, st.h, act_ptrs, params.data() + l.k2_off, 1,
                                         hidden_order, d_conv_ptrs, grad.data() + l.k2_off,
                                         grad.data() + l.c2_off, &d_act_ptrs);
            }

            for (int m = 0; m < kConvHidden; ++m) {
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (st.pre1[m][i] <= 0.0) d_act[m][i] = 0.0;
                }
            }
            std::vector<const double*> in_ptrs;
            for (const auto& g : st.gated) in_ptrs.push_back(g.data());
            std::vector<std::vector<double>> d_in(c, std::vector<double>(st.px, 0.0));
            std::vector<double*> d_in_ptrs;
            for (auto& g : d_in) d_in_ptrs.push_back(g.data());
            std::vector<const double*> d_pre1_ptrs;
            for (const auto& a : d_act) d_pre1_ptrs.push_back(a.data());
            detail::conv3x3_backward(st.w, st.h, in_ptrs, params.data() + l.k1_off, kConvHidden,
                                     canon, d_pre1_ptrs, grad.data() + l.k1_off,
                                     grad.data() + l.c1_off, &d_in_ptrs);
            // The conv path sees 0 under invalid cells regardless of the gate,
            // so only valid cells feed the gate gradient.
            for (std::size_t k = 0; k < c; ++k) {
                const auto& layer = stack.layers[k];
                for (std::size_t i = 0; i < st.px; ++i) {
                    if (layer.mask[i]) d_gated[k][i] += d_in[k][i];
                }
            }
            break;
        }
    }

    // Shared gate backward: d(gated)/d(alpha_c) = Y_c * s'_c on valid cells.
    for (std::size_t k = 0; k < c; ++k) {
        const auto& layer = stack.layers[k];
        const double s = st.svals[k];
        const double sp = s * (1.0 - s);
        double da = 0.0;
        for (std::size_t i = 0; i < st.px; ++i) {
            if (layer.mask[i] && d_gated[k][i] != 0.0) da += d_gated[k][i] * layer.values[i] * sp;
        }
        grad[k] += da;
    }
}

}  // namespace

LayerGrid EnsembleModel::forward(const CandidateStack& stack) const {
    if (stack.names != names_) {
        throw StructuralError("ensemble.forward: candidate order does not match training order");
    }
    stack.validate("ensemble.forward");
    const EvalState st = forward_eval(variant_, canon_, params_, stack);
    LayerGrid out(st.w, st.h, 0.0, true);
    for (std::size_t i = 0; i < st.px; ++i) {
        out.values[i] = clamp01(st.out[i]);
        out.mask[i] = st.out_mask[i];
    }
    return out;
}

TrainReport EnsembleModel::fit(const std::vector<CandidateStack>& stacks,
                               const std::vector<LayerGrid>& targets, const TrainConfig& config) {
    if (stacks.empty() || stacks.size() != targets.size()) {
        throw TrainingError("ensemble.fit: empty or misaligned labeled set");
    }
    std::vector<std::size_t> usable;
    std::vector<double> weights;
    for (std::size_t s = 0; s < stacks.size(); ++s) {
        if (stacks[s].names != names_) {
            throw StructuralError("ensemble.fit: stack " + std::to_string(s) +
                                  " candidate order mismatch");
        }
        const std::size_t n = targets[s].valid_count();
        if (n == 0) continue;
        usable.push_back(s);
        weights.push_back(1.0 / static_cast<double>(n));
    }
    if (usable.empty()) {
        throw TrainingError("ensemble.fit: undefined objective, every target is entirely invalid");
    }
    const double inv_n = 1.0 / static_cast<double>(usable.size());

    auto loss_and_grad = [&](std::span<const double> p, std::span<double> grad) {
        double loss = 0.0;
        for (std::size_t u = 0; u < usable.size(); ++u) {
            const CandidateStack& stack = stacks[usable[u]];
            const LayerGrid& target = targets[usable[u]];
            const double weight = inv_n * weights[u];
            const EvalState st = forward_eval(variant_, canon_, p, stack);
            std::vector<double> d_out(st.px, 0.0);
            for (std::size_t i = 0; i < st.px; ++i) {
                if (!target.mask[i]) continue;
                const double res = st.out[i] - target.values[i];
                loss += weight * res * res;
                d_out[i] = 2.0 * weight * res;
            }
            backward_eval(variant_, canon_, p, st, d_out, grad);
        }
        return loss;
    };

    if (params_.empty()) {
        // PlainMean has nothing to train; report the fixed loss.
        TrainReport report;
        report.final_loss = loss_and_grad({}, {});
        report.epoch_loss = {report.final_loss};
        report.epochs_run = 1;
        return report;
    }
    return train_adam(params_, loss_and_grad, config);
}

EnsembleModel EnsembleModel::with_permuted_candidates(std::span<const std::size_t> perm) const {
    if (perm.size() != names_.size()) {
        throw ParameterError("with_permuted_candidates: permutation size mismatch");
    }
    const std::size_t c = names_.size();
    const Layout l = layout_for(variant_, c);
    EnsembleModel out;
    out.variant_ = variant_;
    out.names_.resize(c);
    out.params_.assign(params_.size(), 0.0);
    for (std::size_t k = 0; k < c; ++k) out.names_[k] = names_[perm[k]];
    out.canon_ = canonical_order(out.names_);

    auto move_per_candidate = [&](std::size_t off) {
        for (std::size_t k = 0; k < c; ++k) out.params_[off + k] = params_[off + perm[k]];
    };
    switch (variant_) {
        case EnsembleVariant::PlainMean:
            break;
        case EnsembleVariant::SMean:
            move_per_candidate(0);
            break;
        case EnsembleVariant::SLrFw:
            move_per_candidate(0);
            move_per_candidate(l.w1_off);
            out.params_[l.total - 1] = params_[l.total - 1];
            break;
        case EnsembleVariant::SNnDw: {
            move_per_candidate(0);
            for (int j = 0; j < kDwHidden; ++j) {
                const std::size_t row = l.w1_off + static_cast<std::size_t>(j) * 2 * c;
                for (std::size_t k = 0; k < c; ++k) {
                    out.params_[row + k] = params_[row + perm[k]];
                    out.params_[row + c + k] = params_[row + c + perm[k]];
                }
            }
            for (int j = 0; j < kDwHidden; ++j) out.params_[l.b1_off + j] = params_[l.b1_off + j];
            for (std::size_t k = 0; k < c; ++k) {
                for (int j = 0; j < kDwHidden; ++j) {
                    out.params_[l.w2_off + k * kDwHidden + j] =
                        params_[l.w2_off + perm[k] * kDwHidden + j];
                }
            }
            move_per_candidate(l.b2_off);
            break;
        }
        case EnsembleVariant::SNnDpw: {
            move_per_candidate(0);
            for (int m = 0; m < kConvHidden; ++m) {
                for (std::size_t k = 0; k < c; ++k) {
                    for (int t = 0; t < 9; ++t) {
                        out.params_[l.k1_off + (static_cast<std::size_t>(m) * c + k) * 9 + t] =
                            params_[l.k1_off + (static_cast<std::size_t>(m) * c + perm[k]) * 9 + t];
                    }
                }
            }
            for (int m = 0; m < kConvHidden; ++m) out.params_[l.c1_off + m] = params_[l.c1_off + m];
            for (std::size_t k = 0; k < c; ++k) {
                for (std::size_t t = 0; t < static_cast<std::size_t>(kConvHidden) * 9; ++t) {
                    out.params_[l.k2_off + k * kConvHidden * 9 + t] =
                        params_[l.k2_off + perm[k] * kConvHidden * 9 + t];
                }
            }
            move_per_candidate(l.c2_off);
            break;
        }
        case EnsembleVariant::SNnD: {
            move_per_candidate(0);
            for (int m = 0; m < kConvHidden; ++m) {
                for (std::size_t k = 0; k < c; ++k) {
                    for (int t = 0; t < 9; ++t) {
                        out.params_[l.k1_off + (static_cast<std::size_t>(m) * c + k) * 9 + t] =
                            params_[l.k1_off + (static_cast<std::size_t>(m) * c + perm[k]) * 9 + t];
                    }
                }
            }
            for (std::size_t t = l.c1_off; t < l.skip_off; ++t) out.params_[t] = params_[t];
            move_per_candidate(l.skip_off);
            break;
        }
    }
    return out;
}

std::unique_ptr<DifferentiableObjective> EnsembleModel::objective(const CandidateStack& stack,
                                                                  const LayerGrid& target) const {
    if (stack.names != names_) {
        throw StructuralError("ensemble.objective: candidate order mismatch");
    }
    const std::size_t n_valid = target.valid_count();
    if (n_valid == 0) throw TrainingError("ensemble.objective: target has no valid cells");

    struct Obj : DifferentiableObjective {
        EnsembleVariant variant;
        std::vector<int> canon;
        std::vector<double> params;
        CandidateStack stack;
        LayerGrid target;
        double inv_n;

        std::size_t param_count() const override { return params.size(); }
        std::vector<double> get_params() const override { return params; }
        void set_params(std::span<const double> p) override { params.assign(p.begin(), p.end()); }
        double loss() const override {
            const EvalState st = forward_eval(variant, canon, params, stack);
            double acc = 0.0;
            for (std::size_t i = 0; i < st.px; ++i) {
                if (!target.mask[i]) continue;
                const double d = st.out[i] - target.values[i];
                acc += d * d;
            }
            return acc * inv_n;
        }
        std::vector<double> gradient() const override {
            const EvalState st = forward_eval(variant, canon, params, stack);
            std::vector<double> d_out(st.px, 0.0);
            for (std::size_t i = 0; i < st.px; ++i) {
                if (!target.mask[i]) continue;
                d_out[i] = 2.0 * inv_n * (st.out[i] - target.values[i]);
            }
            std::vector<double> grad(params.size(), 0.0);
            backward_eval(variant, canon, params, st, d_out, grad);
            return grad;
        }
    };

    auto obj = std::make_unique<Obj>();
    obj->variant = variant_;
    obj->canon = canon_;
    obj->params = params_;
    obj->stack = stack;
    obj->target = target;
    obj->inv_n = 1.0 / static_cast<double>(n_valid);
    return obj;
}

ModelBlob EnsembleModel::to_blob() const {
    nlohmann::json hyper;
    hyper["variant"] = to_string(variant_);
    hyper["dw_hidden"] = kDwHidden;
    hyper["conv_hidden"] = kConvHidden;
    return {"ensemble", hyper.dump(), names_, params_};
}

EnsembleModel EnsembleModel::from_blob(const ModelBlob& blob) {
    if (blob.kind != "ensemble") throw FormatError("ensemble: wrong blob kind " + blob.kind);
    const auto hyper = nlohmann::json::parse(blob.hyper_json);
    const auto variant = ensemble_variant_from_string(hyper.at("variant").get<std::string>());
    if (hyper.at("dw_hidden").get<int>() != kDwHidden ||
        hyper.at("conv_hidden").get<int>() != kConvHidden) {
        throw FormatError("ensemble: hidden sizes do not match this build");
    }
    EnsembleModel model = create(variant, blob.channel_order, 0);
    if (blob.params.size() != model.params_.size()) {
        throw FormatError("ensemble: parameter count mismatch");
    }
    model.params_ = blob.params;
    return model;
}

EnsembleModel fit_ensemble(EnsembleVariant variant, const std::vector<CandidateStack>& stacks,
                           const std::vector<LayerGrid>& targets, const TrainConfig& config,
                           TrainReport* report) {
    if (stacks.empty()) {
        throw TrainingError("fit_ensemble: empty labeled set");
    }
    EnsembleModel model = EnsembleModel::create(variant, stacks.front().names, config.seed);
    TrainReport r = model.fit(stacks, targets, config);
    if (report) *report = std::move(r);
    return model;
}

}  // namespace mthg
