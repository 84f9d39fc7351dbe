#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "mthg/grid.hpp"
#include "mthg/synth.hpp"

namespace mthg {

// Split view of the manifest timestamps. Labeled months carry every output
// layer; test months are evaluation-only; unlabeled months miss output
// layers and receive pseudolabels.
struct DatasetSplit {
    std::vector<int> labeled;
    std::vector<int> test;
    std::vector<int> unlabeled;

    static DatasetSplit from_manifest(const Manifest& manifest);
    // Last 20% of the labeled months (at least one), used to select baseline
    // and distilled edges without touching test data.
    std::vector<int> validation_slice() const;
};

enum class AccessPhase { Fit, Inference, Evaluation };

std::string to_string(AccessPhase phase);

struct AccessRecord {
    int month = 0;
    std::string layer;
    AccessPhase phase = AccessPhase::Fit;
};

// Log of every grid read, used to prove data hygiene: fitting and inference
// never touch test months or withheld ground truth.
class AccessAudit {
public:
    void record(int month, const std::string& layer, AccessPhase phase);
    std::vector<AccessRecord> records() const;
    std::size_t read_count() const;

    struct Verdict {
        bool clean = true;
        std::string violation;  // first offending read, when not clean
    };
    Verdict verify(const Manifest& manifest, const DatasetSplit& split) const;

private:
    mutable std::mutex mu_;
    std::vector<AccessRecord> records_;
};

// Grid store over a manifest with caching, phase tracking and hard hygiene
// enforcement: outside the Evaluation phase, reads of test months or of
// withheld (unavailable) layers throw.
class Dataset {
public:
    explicit Dataset(Manifest manifest);

    const Manifest& manifest() const { return manifest_; }
    const DatasetSplit& split() const { return split_; }

    void set_phase(AccessPhase phase) { phase_.store(phase); }
    AccessPhase phase() const { return phase_.load(); }

    std::shared_ptr<const LayerGrid> grid(int month, const std::string& layer) const;
    // All input layers of one month as a volume with "in:<name>" channels.
    std::shared_ptr<const Volume> input_volume(int month) const;

    const AccessAudit& audit() const { return audit_; }

    // Scoped phase switch; restores the previous phase on destruction.
    class PhaseScope {
    public:
        PhaseScope(Dataset& data, AccessPhase phase) : data_(data), prev_(data.phase()) {
            data_.set_phase(phase);
        }
        ~PhaseScope() { data_.set_phase(prev_); }
        PhaseScope(const PhaseScope&) = delete;
        PhaseScope& operator=(const PhaseScope&) = delete;

    private:
        Dataset& data_;
        AccessPhase prev_;
    };

private:
    Manifest manifest_;
    DatasetSplit split_;
    std::vector<std::uint8_t> is_test_month_;
    std::atomic<AccessPhase> phase_{AccessPhase::Evaluation};
    mutable std::mutex mu_;
    mutable std::unordered_map<std::string, std::shared_ptr<const LayerGrid>> cache_;
    mutable AccessAudit audit_;
};

}  // namespace mthg
