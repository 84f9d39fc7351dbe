// Command line front end: synthetic dataset generation, the multi-iteration
// semi-supervised experiment, report extraction and the ensemble-variant
// comparison. All outputs are CSV/JSON under the chosen directories.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mthg/dataset.hpp"
#include "mthg/engine.hpp"
#include "mthg/ensembles.hpp"
#include "mthg/metrics.hpp"
#include "mthg/synth.hpp"
#include "mthg/topology.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitTraining = 3;

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

struct SynthArgs {
    std::string out_dir;
    mthg::SynthConfig config;
};

struct RunArgs {
    std::string data_manifest;
    std::string run_dir;
    std::string ensemble = "s-nn-dw";
    std::string link = "linear_patch";
    bool include_complex = false;
    bool force = false;
    int iterations = 3;
    int jobs = 1;
    std::uint64_t seed = 1;
    double min_gain = 0.1;
    mthg::TrainConfig train;
};

json train_to_json(const mthg::TrainConfig& t) {
    return {{"max_epochs", t.max_epochs},
            {"initial_learning_rate", t.initial_learning_rate},
            {"plateau_patience", t.plateau_patience},
            {"warmup_epochs", t.warmup_epochs},
            {"lr_decay_factor", t.lr_decay_factor}};
}

void add_train_flags(CLI::App* cmd, mthg::TrainConfig& train) {
    cmd->add_option("--epochs", train.max_epochs, "Training epochs per fit")
        ->capture_default_str();
    cmd->add_option("--lr", train.initial_learning_rate, "Initial learning rate")
        ->capture_default_str();
    cmd->add_option("--patience", train.plateau_patience,
                    "Epochs without improvement before halving the learning rate")
        ->capture_default_str();
    cmd->add_option("--warmup", train.warmup_epochs, "Epochs before the scheduler may act")
        ->capture_default_str();
    cmd->add_option("--decay", train.lr_decay_factor, "Learning-rate decay factor")
        ->capture_default_str();
}

mthg::SslEngine make_engine(const std::string& manifest_path, const RunArgs& args,
                            const json& cli_echo) {
    auto manifest = mthg::load_manifest(manifest_path);
    auto dataset = std::make_shared<mthg::Dataset>(std::move(manifest));
    auto topology = mthg::build_topology(dataset->manifest().input_names(),
                                         dataset->manifest().output_names());
    mthg::EngineConfig config;
    config.link_kind = args.link;
    config.variant = mthg::ensemble_variant_from_string(args.ensemble);
    config.include_complex = args.include_complex;
    config.iterations = args.iterations;
    config.jobs = args.jobs;
    config.master_seed = args.seed;
    config.train = args.train;
    config.train.seed = args.seed;
    config.arpi_convergence_delta = args.min_gain;
    config.cli_echo_json = cli_echo.dump();
    return mthg::SslEngine(std::move(topology), std::move(dataset), std::move(config));
}

int cmd_synth(const SynthArgs& args) {
    const auto manifest = mthg::generate(args.config, args.out_dir);
    std::cout << (fs::path(args.out_dir) / "manifest.json").string() << "\n";
    std::cout << "layers=" << manifest.layers.size() << " months=" << manifest.months
              << " labeled=" << manifest.labeled.size() << " test=" << manifest.test.size()
              << " unlabeled=" << manifest.unlabeled.size() << "\n";
    return kExitOk;
}

int cmd_run(const RunArgs& args, const json& cli_echo) {
    auto engine = make_engine(args.data_manifest, args, cli_echo);
    const auto summary = engine.run(args.run_dir, args.force);
    for (const auto& it : summary.iterations) {
        std::cout << "iteration " << it.k << ": ensemble ARPI " << fmt_g(it.ensemble_arpi)
                  << ", distilled ARPI " << fmt_g(it.distilled_arpi) << "\n";
    }
    std::cout << "hygiene " << (summary.hygiene_clean ? "clean" : summary.hygiene_violation)
              << "\n";
    return summary.hygiene_clean ? kExitOk : kExitData;
}

int cmd_report(const std::string& run_dir_str, const std::string& out_name) {
    const fs::path run_dir(run_dir_str);
    if (!fs::exists(run_dir / "run.json")) {
        throw mthg::FormatError("missing run artifact '" + (run_dir / "run.json").string() + "'");
    }
    std::vector<mthg::IterationMetrics> iters;
    for (int k = 1;; ++k) {
        if (!fs::exists(run_dir / ("iter_" + std::to_string(k)) / "summary.json")) break;
        iters.push_back(mthg::read_iteration_summary(run_dir, k));
    }
    if (iters.empty()) {
        throw mthg::FormatError("missing run artifact '" +
                                (run_dir / "iter_1" / "summary.json").string() + "'");
    }
    const fs::path out_dir = run_dir / out_name;
    fs::create_directories(out_dir);
    const auto& tasks = iters.front().tasks;

    {
        std::ofstream out(out_dir / "per_task_rpi.csv", std::ios::trunc);
        out << "task";
        for (const auto& it : iters) out << ",ensemble_iter" << it.k;
        for (const auto& it : iters) out << ",distilled_iter" << it.k;
        out << "\n";
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            out << tasks[i];
            for (const auto& it : iters) {
                out << ',' << (i < it.ensemble_rpi.size() ? fmt_g(it.ensemble_rpi[i]) : "");
            }
            for (const auto& it : iters) out << ',' << fmt_g(it.distilled[i].rpi);
            out << "\n";
        }
        out << "ARPI";
        for (const auto& it : iters) out << ',' << fmt_g(it.ensemble_arpi);
        for (const auto& it : iters) out << ',' << fmt_g(it.distilled_arpi);
        out << "\n";
    }
    {
        std::ofstream out(out_dir / "arpi_by_iteration.csv", std::ios::trunc);
        out << "iteration,ensemble_arpi,distilled_arpi,distilled_val_arpi\n";
        for (const auto& it : iters) {
            out << it.k << ',' << fmt_g(it.ensemble_arpi) << ',' << fmt_g(it.distilled_arpi)
                << ',' << fmt_g(it.distilled_val_arpi) << "\n";
        }
    }
    {
        std::ofstream out(out_dir / "consistency.csv", std::ios::trunc);
        out << "task,iteration,variance\n";
        for (const auto& it : iters) {
            for (std::size_t i = 0; i < tasks.size(); ++i) {
                out << tasks[i] << ',' << it.k << ',' << fmt_g(it.distilled_consistency[i])
                    << "\n";
            }
        }
    }
    {
        // Monthly baseline error with its linear fit and yearly means.
        const fs::path trend_file = run_dir / "trend.csv";
        if (!fs::exists(trend_file)) {
            throw mthg::FormatError("missing run artifact '" + trend_file.string() + "'");
        }
        std::ifstream in(trend_file);
        std::string line;
        std::getline(in, line);  // header
        std::vector<int> months;
        std::vector<double> l2;
        while (std::getline(in, line)) {
            const auto c1 = line.find(',');
            const auto c2 = line.find(',', c1 + 1);
            if (line.substr(0, c1) != "mean") continue;
            months.push_back(std::stoi(line.substr(c1 + 1, c2 - c1 - 1)));
            l2.push_back(std::stod(line.substr(c2 + 1)));
        }
        const auto trend = mthg::error_trend(l2, 12);
        std::ofstream out(out_dir / "error_trend.csv", std::ios::trunc);
        out << "month,l2,smoothed\n";
        for (std::size_t m = 0; m < months.size(); ++m) {
            out << months[m] << ',' << fmt_g(l2[m]) << ',' << fmt_g(trend.smoothed[m]) << "\n";
        }
        std::ofstream fit(out_dir / "error_trend_fit.csv", std::ios::trunc);
        fit << "slope_per_month,intercept,relative_increase_percent\n";
        fit << fmt_g(trend.slope_per_month) << ',' << fmt_g(trend.intercept) << ','
            << fmt_g(trend.relative_increase_percent) << "\n";
        std::ofstream yearly(out_dir / "yearly_error.csv", std::ios::trunc);
        yearly << "year,mean_l2\n";
        std::map<int, std::pair<double, int>> by_year;
        for (std::size_t m = 0; m < months.size(); ++m) {
            auto& [sum, n] = by_year[months[m] / 12];
            sum += l2[m];
            ++n;
        }
        for (const auto& [year, acc] : by_year) {
            yearly << year << ',' << fmt_g(acc.first / acc.second) << "\n";
        }
    }
    std::cout << out_dir.string() << "\n";
    return kExitOk;
}

int cmd_eval_ensembles(const RunArgs& args, const json& cli_echo) {
    auto engine = make_engine(args.data_manifest, args, cli_echo);
    auto& data = engine.dataset();
    const auto& topology = engine.topology();

    auto state = engine.initialize_hypergraph();

    // Candidate stacks over the labeled set, shared by every variant.
    std::map<std::string, std::vector<mthg::CandidateStack>> stacks;
    std::map<std::string, std::vector<mthg::LayerGrid>> targets;
    {
        mthg::Dataset::PhaseScope scope(data, mthg::AccessPhase::Fit);
        for (int t : data.split().labeled) {
            const auto products = engine.execute_products(state, t, 2);
            for (const auto& out : topology.output_nodes) {
                stacks[out.name].push_back(engine.candidate_stack_for(state, products, out.name));
                targets[out.name].push_back(*data.grid(t, out.name));
            }
        }
    }

    const std::vector<mthg::EnsembleVariant> variants = {
        mthg::EnsembleVariant::PlainMean, mthg::EnsembleVariant::SMean,
        mthg::EnsembleVariant::SLrFw,     mthg::EnsembleVariant::SNnDw,
        mthg::EnsembleVariant::SNnDpw,    mthg::EnsembleVariant::SNnD};

    fs::create_directories(args.run_dir);
    std::ofstream out(fs::path(args.run_dir) / "ensemble_eval.csv", std::ios::trunc);
    out << "variant";
    for (const auto& node : topology.output_nodes) out << ',' << node.name;
    out << ",arpi\n";

    for (const auto variant : variants) {
        std::map<std::string, mthg::EnsembleModel> fitted;
        {
            std::vector<std::function<void()>> fit_tasks;
            std::vector<std::pair<std::string, mthg::EnsembleModel>> slots;
            for (const auto& node : topology.output_nodes) {
                slots.emplace_back(node.name,
                                   mthg::EnsembleModel::create(variant,
                                                               stacks[node.name].front().names, 0));
            }
            for (auto& slot : slots) {
                fit_tasks.push_back([&slot, &stacks, &targets, &args, variant] {
                    mthg::TrainConfig cfg = args.train;
                    cfg.seed = mthg::derive_seed(args.seed,
                                                 "eval/" + to_string(variant) + "/" + slot.first);
                    slot.second = mthg::EnsembleModel::create(
                        variant, stacks[slot.first].front().names, cfg.seed);
                    slot.second.fit(stacks[slot.first], targets[slot.first], cfg);
                });
            }
            mthg::parallel_run(args.jobs, fit_tasks);
            for (auto& slot : slots) fitted.emplace(slot.first, std::move(slot.second));
        }

        mthg::Dataset::PhaseScope scope(data, mthg::AccessPhase::Evaluation);
        std::vector<double> rpis;
        out << to_string(variant);
        std::vector<std::vector<double>> series(topology.output_nodes.size());
        for (int t : data.split().test) {
            const auto products = engine.execute_products(state, t, 2);
            for (std::size_t i = 0; i < topology.output_nodes.size(); ++i) {
                const auto& task = topology.output_nodes[i].name;
                const auto stack = engine.candidate_stack_for(state, products, task);
                series[i].push_back(
                    mthg::masked_l2(fitted.at(task).forward(stack), *data.grid(t, task)));
            }
        }
        for (std::size_t i = 0; i < topology.output_nodes.size(); ++i) {
            const auto& task = topology.output_nodes[i].name;
            double mean = 0.0;
            for (double v : series[i]) mean += v;
            mean /= static_cast<double>(series[i].size());
            const double rpi =
                mthg::rpi_percent(mean, engine.baselines().at(task).test_l2_mean);
            rpis.push_back(rpi);
            out << ',' << fmt_g(rpi);
        }
        out << ',' << fmt_g(mthg::arpi(rpis)) << "\n";
        std::cout << to_string(variant) << " ARPI " << fmt_g(mthg::arpi(rpis)) << "\n";
    }
    std::cout << (fs::path(args.run_dir) / "ensemble_eval.csv").string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task hypergraph semi-supervised learning engine"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--out", synth_args.out_dir, "Output dataset directory")->required();
    synth->add_option("--width", synth_args.config.width, "Grid width")->capture_default_str();
    synth->add_option("--height", synth_args.config.height, "Grid height")->capture_default_str();
    synth->add_option("--months", synth_args.config.months, "Number of monthly timestamps")
        ->capture_default_str();
    synth->add_option("--inputs", synth_args.config.n_inputs, "Input layer count")
        ->capture_default_str();
    synth->add_option("--outputs", synth_args.config.n_outputs, "Output layer count")
        ->capture_default_str();
    synth->add_option("--period", synth_args.config.seasonal_period, "Seasonal period in months")
        ->capture_default_str();
    synth->add_option("--drift", synth_args.config.drift_rate, "Latent drift per month")
        ->capture_default_str();
    synth->add_option("--noise", synth_args.config.noise_sigma, "Input noise sigma")
        ->capture_default_str();
    synth->add_option("--seed", synth_args.config.seed, "Generator seed")->capture_default_str();
    synth->add_option("--labeled", synth_args.config.labeled_months,
                      "Labeled month count (0 = 119:30:62 pattern)")
        ->capture_default_str();
    synth->add_option("--test-months", synth_args.config.test_months,
                      "Test month count (0 = 119:30:62 pattern)")
        ->capture_default_str();
    synth->add_option("--mask-style", synth_args.config.mask_styles,
                      "Per-layer mask style (dense|land-sparse|ocean-sparse)");

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "Run the multi-iteration experiment");
    run->add_option("--data", run_args.data_manifest, "Dataset manifest.json")->required();
    run->add_option("--run-dir", run_args.run_dir, "Run directory for all artifacts")->required();
    run->add_option("--ensemble", run_args.ensemble,
                    "Ensemble variant (plain-mean|s-mean|s-lr-fw|s-nn-dw|s-nn-dpw|s-nn-d)")
        ->capture_default_str();
    run->add_option("--link", run_args.link, "Link learner (linear_patch|tiny_conv)")
        ->capture_default_str();
    run->add_flag("--include-complex", run_args.include_complex,
                  "Add AH/CH hyperedges to the candidate pools");
    run->add_option("--iterations", run_args.iterations, "Semi-supervised iterations")
        ->capture_default_str();
    run->add_option("--seed", run_args.seed, "Master seed")->capture_default_str();
    run->add_option("--jobs", run_args.jobs, "Concurrent link/ensemble fits")
        ->capture_default_str();
    run->add_option("--min-gain", run_args.min_gain,
                    "Stop early when the validation ARPI gain drops below this")
        ->capture_default_str();
    run->add_flag("--force", run_args.force, "Recompute phases even when artifacts exist");
    add_train_flags(run, run_args.train);

    std::string report_run_dir, report_out = "report";
    auto* report = app.add_subcommand("report", "Extract summary tables from a run directory");
    report->add_option("--run-dir", report_run_dir, "Run directory")->required();
    report->add_option("--out", report_out, "Report subdirectory name")->capture_default_str();

    RunArgs eval_args;
    auto* eval = app.add_subcommand("eval-ensembles",
                                    "Fit all six ensemble variants on iteration-1 candidates");
    eval->add_option("--data", eval_args.data_manifest, "Dataset manifest.json")->required();
    eval->add_option("--run-dir", eval_args.run_dir, "Output directory")->required();
    eval->add_flag("--include-complex", eval_args.include_complex,
                   "Add AH/CH hyperedges to the candidate pools");
    eval->add_option("--seed", eval_args.seed, "Master seed")->capture_default_str();
    eval->add_option("--jobs", eval_args.jobs, "Concurrent fits")->capture_default_str();
    eval->add_option("--link", eval_args.link, "Link learner")->capture_default_str();
    add_train_flags(eval, eval_args.train);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_args);
        }
        if (run->parsed()) {
            json echo = {{"command", "run"},
                         {"data", run_args.data_manifest},
                         {"run_dir", run_args.run_dir},
                         {"ensemble", run_args.ensemble},
                         {"link", run_args.link},
                         {"include_complex", run_args.include_complex},
                         {"iterations", run_args.iterations},
                         {"seed", run_args.seed},
                         {"jobs", run_args.jobs},
                         {"min_gain", run_args.min_gain},
                         {"train", train_to_json(run_args.train)}};
            return cmd_run(run_args, echo);
        }
        if (report->parsed()) {
            return cmd_report(report_run_dir, report_out);
        }
        if (eval->parsed()) {
            json echo = {{"command", "eval-ensembles"},
                         {"data", eval_args.data_manifest},
                         {"run_dir", eval_args.run_dir},
                         {"include_complex", eval_args.include_complex},
                         {"seed", eval_args.seed},
                         {"jobs", eval_args.jobs},
                         {"train", train_to_json(eval_args.train)}};
            return cmd_eval_ensembles(eval_args, echo);
        }
    } catch (const mthg::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const mthg::TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
