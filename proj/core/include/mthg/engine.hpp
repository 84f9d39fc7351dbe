#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mthg/dataset.hpp"
#include "mthg/ensembles.hpp"
#include "mthg/links.hpp"
#include "mthg/metrics.hpp"
#include "mthg/topology.hpp"

namespace mthg {

struct EngineConfig {
    std::string link_kind = "linear_patch";
    EnsembleVariant variant = EnsembleVariant::SNnDw;
    bool include_complex = false;
    int iterations = 3;
    int jobs = 1;
    std::uint64_t master_seed = 1;
    TrainConfig train;
    // Stop iterating when the validation ARPI improves by less than this.
    double arpi_convergence_delta = 0.1;
    // Extra configuration recorded verbatim into run.json (the CLI stores its
    // resolved flags here so they round-trip).
    std::string cli_echo_json;
};

// Trained links and ensembles of one semi-supervised iteration. State for
// iteration k+1 derives only from iteration-k pseudolabels plus the labeled
// set.
struct IterationState {
    int k = 1;
    std::map<std::string, std::unique_ptr<LinkModel>> links;       // by link_ref
    std::map<std::string, EnsembleModel> ensembles;                // by output node
    std::map<std::string, TrainReport> link_reports;
    std::map<std::string, TrainReport> ensemble_reports;
};

struct PseudolabelProvenance {
    std::string variant;
    std::map<std::string, std::vector<std::string>> pool_by_task;
    std::string topology_hash;
    int iteration = 1;
};

struct PseudolabelStore {
    // labels[task][month]
    std::map<std::string, std::map<int, std::shared_ptr<const LayerGrid>>> labels;
    PseudolabelProvenance provenance;

    std::size_t size() const;
    std::vector<int> months() const;  // months covered for every task
};

struct DistilledEdge {
    std::string task;
    std::string link_ref;
    double validation_l2 = 0.0;
    double test_l2_mean = 0.0;
    std::vector<double> test_l2_series;
    double rpi = 0.0;  // vs the iteration-1 baseline edge, on the test set
};

struct IterationMetrics {
    int k = 1;
    std::vector<std::string> tasks;
    std::vector<double> ensemble_l2;                  // mean test L2 per task
    std::vector<std::vector<double>> ensemble_l2_series;
    std::vector<double> ensemble_rpi;
    double ensemble_arpi = 0.0;
    std::vector<DistilledEdge> distilled;
    double distilled_arpi = 0.0;
    double distilled_val_arpi = 0.0;  // drives the convergence stop
    std::vector<double> distilled_consistency;  // temporal variance per task
};

struct RunSummary {
    std::vector<IterationMetrics> iterations;
    bool hygiene_clean = false;
    std::string hygiene_violation;
    // Baseline-edge monthly L2 after the labeled period, per task and
    // averaged; drives the drift analysis.
    std::vector<int> trend_months;
    std::vector<std::vector<double>> trend_l2_by_task;
    std::vector<double> trend_l2_mean;
};

// The semi-supervised learning loop over the hypergraph: supervised
// initialization, ensemble teachers, pseudolabel generation and retraining.
class SslEngine {
public:
    SslEngine(HypergraphTopology topology, std::shared_ptr<Dataset> data, EngineConfig config);

    const HypergraphTopology& topology() const { return topology_; }
    const EngineConfig& config() const { return config_; }
    Dataset& dataset() { return *data_; }

    // Step 1: train every link on the labeled set, honoring the two-stage
    // plan; selects the per-task baseline edges afterwards.
    IterationState initialize_hypergraph();

    // Step 2: fit the configured ensemble variant per output node on labeled
    // candidate stacks.
    void train_ensembles(IterationState& state);

    // Step 3: staged inference plus ensemble forward on every usable
    // unlabeled month. Months missing an input layer are skipped with a
    // warning on stderr.
    PseudolabelStore generate_pseudolabels(const IterationState& state);

    // Step 4: retrain all links from scratch on ground truth plus
    // pseudolabels, then refit the ensembles.
    IterationState semi_supervised_iteration(const IterationState& state,
                                             const PseudolabelStore& pseudolabels);

    DistilledEdge distill_best_edge(const IterationState& state, const std::string& task);

    IterationMetrics evaluate_iteration(const IterationState& state);

    // Full multi-iteration experiment with run-directory artifacts. Completed
    // iterations found in the directory are reused unless force is set.
    RunSummary run(const std::filesystem::path& run_dir, bool force = false);

    // Products of the staged plan for one month ("in:*", "pred:*", "med:*").
    std::map<std::string, LayerGrid> execute_products(const IterationState& state, int month,
                                                      int max_stage) const;
    CandidateStack candidate_stack_for(const IterationState& state,
                                       const std::map<std::string, LayerGrid>& products,
                                       const std::string& task) const;

    struct Baseline {
        std::string link_ref;
        double validation_l2 = 0.0;
        double test_l2_mean = 0.0;
        std::vector<double> test_l2_series;
    };
    const std::map<std::string, Baseline>& baselines() const { return baselines_; }

private:
    using TargetFn =
        std::function<std::shared_ptr<const LayerGrid>(const std::string& task, int month)>;

    void train_links(IterationState& state, const std::vector<int>& months,
                     const TargetFn& target_for);
    void select_baselines(const IterationState& state);
    std::string best_edge_by_validation(const IterationState& state, const std::string& task,
                                        double* val_l2) const;
    std::vector<double> link_test_l2_series(const IterationState& state,
                                            const std::string& link_ref,
                                            const std::string& task) const;
    void compute_trend(const IterationState& state, RunSummary& summary);

    void write_iteration_artifacts(const std::filesystem::path& run_dir,
                                   const IterationState& state, const IterationMetrics& metrics);
    void write_pseudolabels(const std::filesystem::path& run_dir, int k,
                            const PseudolabelStore& store);
    bool iteration_complete(const std::filesystem::path& run_dir, int k) const;
    IterationState load_iteration(const std::filesystem::path& run_dir, int k) const;
    PseudolabelStore load_pseudolabels(const std::filesystem::path& run_dir, int k) const;

    HypergraphTopology topology_;
    std::shared_ptr<Dataset> data_;
    EngineConfig config_;
    std::vector<PlanStep> plan_;
    std::map<std::string, Baseline> baselines_;
};

// Deterministic parallel execution of independent tasks with at most `jobs`
// workers. Exceptions are captured and rethrown on the caller thread.
void parallel_run(int jobs, std::vector<std::function<void()>>& tasks);

IterationMetrics read_iteration_summary(const std::filesystem::path& run_dir, int k);

}  // namespace mthg
