#include "mthg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mthg {

void TrainConfig::validate() const {
    if (max_epochs < 1 || plateau_patience < 1 || warmup_epochs < 0) {
        throw ParameterError("TrainConfig: epoch/patience counts must be positive");
    }
    if (!(initial_learning_rate > 0.0)) {
        throw ParameterError("TrainConfig: learning rate must be positive");
    }
    if (!(lr_decay_factor > 0.0) || !(lr_decay_factor < 1.0)) {
        throw ParameterError("TrainConfig: decay factor must lie in (0,1)");
    }
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::uint64_t z = master ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

TrainReport train_adam(
    std::vector<double>& params,
    const std::function<double(std::span<const double>, std::span<double>)>& loss_and_grad,
    const TrainConfig& config) {
    config.validate();
    const std::size_t n = params.size();
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    std::vector<double> grad(n, 0.0), m(n, 0.0), v(n, 0.0);
    std::vector<double> best_params = params;
    double best_loss = std::numeric_limits<double>::infinity();
    double lr = config.initial_learning_rate;
    int stall = 0;

    TrainReport report;
    report.epoch_loss.reserve(config.max_epochs);
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        const double loss = loss_and_grad(params, grad);
        report.epoch_loss.push_back(loss);
        ++report.epochs_run;

        if (loss < best_loss) {
            best_loss = loss;
            best_params = params;
            stall = 0;
        } else {
            ++stall;
            if (epoch >= config.warmup_epochs && stall >= config.plateau_patience) {
                lr *= config.lr_decay_factor;
                ++report.lr_halvings;
                stall = 0;
            }
        }

        const double bc1 = 1.0 - std::pow(beta1, epoch + 1);
        const double bc2 = 1.0 - std::pow(beta2, epoch + 1);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }

    params = best_params;
    report.final_loss = best_loss;
    return report;
}

}  // namespace mthg
