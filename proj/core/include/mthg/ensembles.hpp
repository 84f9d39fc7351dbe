#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mthg/grid.hpp"
#include "mthg/links.hpp"
#include "mthg/optim.hpp"

namespace mthg {

enum class EnsembleVariant { PlainMean, SMean, SLrFw, SNnDw, SNnDpw, SNnD };

std::string to_string(EnsembleVariant v);
EnsembleVariant ensemble_variant_from_string(const std::string& s);

// Ordered stack of candidate predictions for one output node at one
// timestamp. Names identify the producing hyperedges and are part of a
// trained ensemble's identity.
struct CandidateStack {
    std::vector<std::string> names;
    std::vector<LayerGrid> layers;

    std::size_t size() const { return layers.size(); }
    void validate(const std::string& what = "stack") const;
};

// Applies the per-candidate selection gate s_c = 1/(1+exp(-alpha_c)) to each
// channel. Masks are unchanged; only valid cells are scaled.
CandidateStack gate_apply(std::span<const double> alphas, const CandidateStack& stack);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Selection-gated combiner producing one layer from a candidate stack.
// All learned variants train the gate jointly with the combiner parameters
// by gradient descent on masked L2.
//
// Channel reductions iterate candidates in name-sorted order, so a model
// whose stack, gate and weights are permuted consistently produces
// bit-identical outputs.
class EnsembleModel {
public:
    static EnsembleModel create(EnsembleVariant variant, std::vector<std::string> candidate_names,
                                std::uint64_t init_seed);

    EnsembleVariant variant() const { return variant_; }
    const std::vector<std::string>& candidate_names() const { return names_; }
    std::size_t candidate_count() const { return names_.size(); }

    // Gate alphas (empty for PlainMean).
    std::span<const double> gate_alphas() const;

    // Combines the stack; the output is clamped to [0,1]. For the mean
    // variants a cell is valid iff at least one candidate is valid there;
    // the weighted variants produce dense output.
    LayerGrid forward(const CandidateStack& stack) const;

    TrainReport fit(const std::vector<CandidateStack>& stacks,
                    const std::vector<LayerGrid>& targets, const TrainConfig& config);

    // Model with candidates (gate, weights, kernels) reordered by `perm`;
    // expects stacks presented in the permuted order.
    EnsembleModel with_permuted_candidates(std::span<const std::size_t> perm) const;

    std::unique_ptr<DifferentiableObjective> objective(const CandidateStack& stack,
                                                       const LayerGrid& target) const;

    ModelBlob to_blob() const;
    static EnsembleModel from_blob(const ModelBlob& blob);

    std::vector<double>& parameters() { return params_; }
    const std::vector<double>& parameters() const { return params_; }

private:
    EnsembleModel() = default;

    EnsembleVariant variant_ = EnsembleVariant::PlainMean;
    std::vector<std::string> names_;
    std::vector<int> canon_;  // candidate indices in name-sorted order
    std::vector<double> params_;
};

// Step 2 of the learning loop: fit the chosen variant on labeled candidate
// stacks and their ground-truth targets.
EnsembleModel fit_ensemble(EnsembleVariant variant, const std::vector<CandidateStack>& stacks,
                           const std::vector<LayerGrid>& targets, const TrainConfig& config,
                           TrainReport* report = nullptr);

}  // namespace mthg
