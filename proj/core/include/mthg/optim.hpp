#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mthg/errors.hpp"

namespace mthg {

// Shared training schedule: full-batch adaptive-moment gradient descent with
// warmup followed by plateau halving of the learning rate.
struct TrainConfig {
    int max_epochs = 100;
    double initial_learning_rate = 0.01;
    int plateau_patience = 5;
    int warmup_epochs = 10;  // epochs before the scheduler may act
    double lr_decay_factor = 0.5;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TrainReport {
    std::vector<double> epoch_loss;  // loss evaluated at the start of each epoch
    double final_loss = 0.0;         // best loss observed; parameters are restored to it
    int epochs_run = 0;
    int lr_halvings = 0;
};

// Deterministic per-phase seed: hash of a tag string mixed into the master
// seed (FNV-1a then a splitmix64 finalizer). All randomness in a run flows
// from the master seed through tags like "iter1/links/e_a_b".
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);

// Full-batch training driver. `loss_and_grad` evaluates the objective at the
// given parameters and writes the gradient; it must be deterministic. The
// parameters passed in are the initialization; on return they hold the best
// epoch's values.
TrainReport train_adam(
    std::vector<double>& params,
    const std::function<double(std::span<const double>, std::span<double>)>& loss_and_grad,
    const TrainConfig& config);

}  // namespace mthg
