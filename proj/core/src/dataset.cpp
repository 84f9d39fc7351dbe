#include "mthg/dataset.hpp"

#include <algorithm>

#include "mthg/grid_io.hpp"

namespace mthg {

DatasetSplit DatasetSplit::from_manifest(const Manifest& manifest) {
    return {manifest.labeled, manifest.test, manifest.unlabeled};
}

std::vector<int> DatasetSplit::validation_slice() const {
    if (labeled.empty()) return {};
    std::size_t n = std::max<std::size_t>(1, labeled.size() / 5);
    return {labeled.end() - static_cast<std::ptrdiff_t>(n), labeled.end()};
}

std::string to_string(AccessPhase phase) {
    switch (phase) {
        case AccessPhase::Fit: return "fit";
        case AccessPhase::Inference: return "inference";
        case AccessPhase::Evaluation: return "evaluation";
    }
    return "?";
}

void AccessAudit::record(int month, const std::string& layer, AccessPhase phase) {
    std::lock_guard lock(mu_);
    records_.push_back({month, layer, phase});
}

std::vector<AccessRecord> AccessAudit::records() const {
    std::lock_guard lock(mu_);
    return records_;
}

std::size_t AccessAudit::read_count() const {
    std::lock_guard lock(mu_);
    return records_.size();
}

AccessAudit::Verdict AccessAudit::verify(const Manifest& manifest,
                                         const DatasetSplit& split) const {
    std::vector<std::uint8_t> is_test(manifest.months, 0);
    for (int t : split.test) is_test[t] = 1;
    std::lock_guard lock(mu_);
    for (const auto& r : records_) {
        if (r.phase == AccessPhase::Evaluation) continue;
        if (is_test[r.month]) {
            return {false, to_string(r.phase) + " read test month " + std::to_string(r.month) +
                               " layer " + r.layer};
        }
        if (!manifest.is_available(r.month, r.layer)) {
            return {false, to_string(r.phase) + " read withheld layer " + r.layer + " at month " +
                               std::to_string(r.month)};
        }
    }
    return {true, ""};
}

Dataset::Dataset(Manifest manifest)
    : manifest_(std::move(manifest)), split_(DatasetSplit::from_manifest(manifest_)) {
    is_test_month_.assign(manifest_.months, 0);
    for (int t : split_.test) is_test_month_[t] = 1;
}

std::shared_ptr<const LayerGrid> Dataset::grid(int month, const std::string& layer) const {
    if (month < 0 || month >= manifest_.months) {
        throw ParameterError("dataset: month " + std::to_string(month) + " out of range");
    }
    const AccessPhase phase = phase_.load();
    audit_.record(month, layer, phase);
    if (phase != AccessPhase::Evaluation) {
        if (is_test_month_[month]) {
            throw ConfigError("dataset: " + to_string(phase) + " access to test month " +
                              std::to_string(month));
        }
        if (!manifest_.is_available(month, layer)) {
            throw ConfigError("dataset: " + to_string(phase) + " access to withheld layer '" +
                              layer + "' at month " + std::to_string(month));
        }
    }
    const std::string key = layer + "/" + std::to_string(month);
    {
        std::lock_guard lock(mu_);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
    }
    auto loaded = std::make_shared<const LayerGrid>(load_grid(manifest_.grid_path(month, layer)));
    std::lock_guard lock(mu_);
    auto [it, inserted] = cache_.emplace(key, std::move(loaded));
    return it->second;
}

std::shared_ptr<const Volume> Dataset::input_volume(int month) const {
    auto volume = std::make_shared<Volume>();
    for (const auto& name : manifest_.input_names()) {
        volume->push("in:" + name, *grid(month, name));
    }
    return volume;
}

}  // namespace mthg
