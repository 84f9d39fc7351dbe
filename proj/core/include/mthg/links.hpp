#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mthg/grid.hpp"
#include "mthg/optim.hpp"

namespace mthg {

struct TrainSample {
    std::shared_ptr<const Volume> input;
    std::shared_ptr<const LayerGrid> target;
};

// Serialized form shared by link and ensemble models: learner kind tag,
// hyperparameters, the channel-order list (part of the model identity) and
// the flat parameter array.
struct ModelBlob {
    std::string kind;
    std::string hyper_json;
    std::vector<std::string> channel_order;
    std::vector<double> params;
};

// Uniform surface for finite-difference verification of analytic gradients.
// An objective binds a model to one probe (input, target) pair; the loss is
// the masked L2 of the unclamped forward pass.
class DifferentiableObjective {
public:
    virtual ~DifferentiableObjective() = default;
    virtual std::size_t param_count() const = 0;
    virtual std::vector<double> get_params() const = 0;
    virtual void set_params(std::span<const double> p) = 0;
    virtual double loss() const = 0;
    virtual std::vector<double> gradient() const = 0;
};

struct GradientCheckResult {
    double max_rel_error = 0.0;
    std::size_t params_checked = 0;
};

// Central finite differences on a random subset of parameters. Relative
// error per parameter is |analytic - fd| / max(|analytic|, |fd|, 1e-6).
GradientCheckResult gradient_check(DifferentiableObjective& objective,
                                   std::size_t sample_count = 50, double step = 1e-4,
                                   std::uint64_t seed = 7);

// Learnable map from a multi-channel input volume to one output layer.
// Predictions are dense (replicate padding, valid-mean substitution of
// invalid input cells) and clamped to [0,1].
class LinkModel {
public:
    virtual ~LinkModel() = default;
    virtual std::string kind() const = 0;
    virtual int input_channel_count() const = 0;
    virtual const std::vector<std::string>& channel_names() const = 0;
    virtual LayerGrid predict(const Volume& input) const = 0;
    virtual TrainReport fit(const std::vector<TrainSample>& samples, const TrainConfig& config) = 0;
    virtual ModelBlob to_blob() const = 0;
    virtual std::unique_ptr<LinkModel> clone() const = 0;
};

// Affine map of the (2r+1)^2 neighborhood of every channel, fitted in closed
// form by ridge-regularized normal equations. The bias is unpenalized.
class LinearPatchLink : public LinkModel {
public:
    LinearPatchLink(std::vector<std::string> channel_names, int patch_radius = 1,
                    double ridge_lambda = 1e-3);

    std::string kind() const override { return "linear_patch"; }
    int input_channel_count() const override { return static_cast<int>(names_.size()); }
    const std::vector<std::string>& channel_names() const override { return names_; }
    LayerGrid predict(const Volume& input) const override;
    TrainReport fit(const std::vector<TrainSample>& samples, const TrainConfig& config) override;
    ModelBlob to_blob() const override;
    std::unique_ptr<LinkModel> clone() const override;

    int patch_radius() const { return radius_; }
    double ridge_lambda() const { return lambda_; }
    std::size_t feature_count() const;  // includes the trailing bias feature
    std::vector<double>& weights() { return weights_; }
    const std::vector<double>& weights() const { return weights_; }

    std::unique_ptr<DifferentiableObjective> objective(const Volume& input,
                                                       const LayerGrid& target) const;

    static std::unique_ptr<LinearPatchLink> from_blob(const ModelBlob& blob);

private:
    std::vector<std::string> names_;
    int radius_;
    double lambda_;
    std::vector<double> weights_;  // per (channel x patch cell), bias last
};

// Two 3x3 convolution layers with a rectified-linear nonlinearity between,
// trained by gradient descent on masked L2 with manual backpropagation.
class TinyConvLink : public LinkModel {
public:
    TinyConvLink(std::vector<std::string> channel_names, int hidden_maps = 8,
                 std::uint64_t init_seed = 1);

    std::string kind() const override { return "tiny_conv"; }
    int input_channel_count() const override { return static_cast<int>(names_.size()); }
    const std::vector<std::string>& channel_names() const override { return names_; }
    LayerGrid predict(const Volume& input) const override;
    TrainReport fit(const std::vector<TrainSample>& samples, const TrainConfig& config) override;
    ModelBlob to_blob() const override;
    std::unique_ptr<LinkModel> clone() const override;

    int hidden_maps() const { return hidden_; }
    std::vector<double>& parameters() { return params_; }
    const std::vector<double>& parameters() const { return params_; }

    // Unclamped forward pass; exposed for objective construction and tests.
    std::vector<double> forward_raw(const Volume& input) const;

    std::unique_ptr<DifferentiableObjective> objective(const Volume& input,
                                                       const LayerGrid& target) const;

    static std::unique_ptr<TinyConvLink> from_blob(const ModelBlob& blob);

private:
    std::vector<std::string> names_;
    int hidden_;
    // Layout: conv1 kernels [hidden][C][3][3], conv1 bias [hidden],
    //         conv2 kernels [hidden][3][3], conv2 bias [1].
    std::vector<double> params_;
};

// Monolithic multi-task baseline: one per-pixel network mapping the patches
// of all input channels jointly to every output channel.
class MTEBaseline {
public:
    MTEBaseline(std::vector<std::string> input_names, std::vector<std::string> output_names,
                int hidden_width = 64, int patch_radius = 1, std::uint64_t init_seed = 1);

    const std::vector<std::string>& input_names() const { return in_names_; }
    const std::vector<std::string>& output_names() const { return out_names_; }
    int hidden_width() const { return hidden_; }

    std::vector<LayerGrid> predict_all(const Volume& input) const;

    struct Sample {
        std::shared_ptr<const Volume> input;
        std::vector<std::shared_ptr<const LayerGrid>> targets;  // one per output channel
    };
    TrainReport fit(const std::vector<Sample>& samples, const TrainConfig& config);

    ModelBlob to_blob() const;
    static MTEBaseline from_blob(const ModelBlob& blob);

    std::vector<double>& parameters() { return params_; }

private:
    std::vector<std::string> in_names_;
    std::vector<std::string> out_names_;
    int hidden_;
    int radius_;
    // Layout: W1 [hidden][features], b1 [hidden], W2 [outputs][hidden], b2 [outputs].
    std::vector<double> params_;
};

// Factory used by the engine; `kind` is "linear_patch" or "tiny_conv".
std::unique_ptr<LinkModel> make_link(const std::string& kind,
                                     std::vector<std::string> channel_names, std::uint64_t seed);
std::unique_ptr<LinkModel> link_from_blob(const ModelBlob& blob);

// Dense per-channel plane with invalid cells replaced by the channel's
// valid-mean (0.5 when the channel is entirely invalid). All learners see
// inputs through this substitution.
std::vector<double> filled_plane(const LayerGrid& grid);

}  // namespace mthg
