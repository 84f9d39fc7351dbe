#include "mthg/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <set>
#include <thread>

#include <json.hpp>

#include "mthg/grid_io.hpp"
#include "mthg/serialize.hpp"

namespace mthg {

namespace fs = std::filesystem;

namespace {

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string month_file(int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "t%04d.grd1", t);
    return buf;
}

}  // namespace

void parallel_run(int jobs, std::vector<std::function<void()>>& tasks) {
    if (jobs <= 1 || tasks.size() <= 1) {
        for (auto& task : tasks) task();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                tasks[i]();
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const int workers = std::min<int>(jobs, static_cast<int>(tasks.size()));
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::size_t PseudolabelStore::size() const {
    std::size_t n = 0;
    for (const auto& [task, by_month] : labels) n += by_month.size();
    return n;
}

std::vector<int> PseudolabelStore::months() const {
    std::vector<int> result;
    if (labels.empty()) return result;
    for (const auto& [month, grid] : labels.begin()->second) result.push_back(month);
    return result;
}

SslEngine::SslEngine(HypergraphTopology topology, std::shared_ptr<Dataset> data,
                     EngineConfig config)
    : topology_(std::move(topology)), data_(std::move(data)), config_(std::move(config)) {
    if (config_.iterations < 1) throw ConfigError("engine: need at least one iteration");
    config_.train.validate();
    plan_ = inference_plan(topology_);
    // The topology must match the dataset layers.
    const auto inputs = data_->manifest().input_names();
    const auto outputs = data_->manifest().output_names();
    if (topology_.input_nodes.size() != inputs.size() ||
        topology_.output_nodes.size() != outputs.size()) {
        throw ConfigError("engine: topology does not match dataset layer counts");
    }
}

std::map<std::string, LayerGrid> SslEngine::execute_products(const IterationState& state,
                                                             int month, int max_stage) const {
    std::map<std::string, LayerGrid> products;
    for (const auto& node : topology_.input_nodes) {
        products.emplace("in:" + node.name, *data_->grid(month, node.name));
    }
    for (const auto& step : plan_) {
        if (step.stage > max_stage) continue;
        if (step.kind == PlanStep::Kind::Link) {
            Volume volume;
            for (const auto& ref : step.inputs) volume.push(ref, products.at(ref));
            products.emplace(step.output_product,
                             state.links.at(step.link_ref)->predict(volume));
        } else {
            std::vector<const LayerGrid*> grids;
            for (const auto& ref : step.inputs) grids.push_back(&products.at(ref));
            products.emplace(step.output_product, pixelwise_median(grids));
        }
    }
    return products;
}

CandidateStack SslEngine::candidate_stack_for(const IterationState& state,
                                              const std::map<std::string, LayerGrid>& products,
                                              const std::string& task) const {
    (void)state;
    CandidateStack stack;
    for (const auto& ref : candidate_pool(topology_, task, config_.include_complex)) {
        stack.names.push_back(ref);
        stack.layers.push_back(products.at("pred:" + ref));
    }
    return stack;
}

void SslEngine::train_links(IterationState& state, const std::vector<int>& months,
                            const TargetFn& target_for) {
    Dataset::PhaseScope scope(*data_, AccessPhase::Fit);
    const int k = state.k;

    struct Job {
        const HyperedgeSpec* edge = nullptr;
        std::unique_ptr<LinkModel> model;
        TrainReport report;
    };

    auto fit_jobs = [&](std::vector<Job>& jobs,
                        const std::function<std::shared_ptr<const Volume>(
                            const HyperedgeSpec&, std::size_t month_idx)>& volume_for) {
        std::vector<std::function<void()>> tasks;
        tasks.reserve(jobs.size());
        for (auto& job : jobs) {
            tasks.push_back([&job, &months, &target_for, &volume_for, k, this] {
                std::vector<TrainSample> samples;
                samples.reserve(months.size());
                for (std::size_t i = 0; i < months.size(); ++i) {
                    auto target = target_for(job.edge->output, months[i]);
                    if (!target) continue;
                    samples.push_back({volume_for(*job.edge, i), std::move(target)});
                }
                TrainConfig cfg = config_.train;
                cfg.seed = derive_seed(config_.master_seed, "iter" + std::to_string(k) +
                                                                "/link/" + job.edge->link_ref);
                job.model = make_link(config_.link_kind, job.edge->inputs, cfg.seed);
                job.report = job.model->fit(samples, cfg);
            });
        }
        parallel_run(config_.jobs, tasks);
        for (auto& job : jobs) {
            state.link_reports[job.edge->link_ref] = std::move(job.report);
            state.links[job.edge->link_ref] = std::move(job.model);
        }
    };

    // Stage 1: E and AH links consume raw input layers.
    std::vector<Job> stage1;
    for (const auto& h : topology_.hyperedges) {
        if (h.stage == 1) stage1.push_back({&h, nullptr, {}});
    }
    fit_jobs(stage1, [&](const HyperedgeSpec& edge, std::size_t i) {
        auto volume = std::make_shared<Volume>();
        for (const auto& ref : edge.inputs) {
            volume->push(ref, *data_->grid(months[i], ref.substr(3)));  // "in:<name>"
        }
        return volume;
    });

    // Stage-1 products per month feed the stage-2 links.
    std::vector<std::map<std::string, LayerGrid>> products(months.size());
    {
        std::vector<std::function<void()>> tasks;
        for (std::size_t i = 0; i < months.size(); ++i) {
            tasks.push_back([&, i] { products[i] = execute_products(state, months[i], 1); });
        }
        parallel_run(config_.jobs, tasks);
    }

    std::vector<Job> stage2;
    for (const auto& h : topology_.hyperedges) {
        if (h.stage == 2) stage2.push_back({&h, nullptr, {}});
    }
    fit_jobs(stage2, [&](const HyperedgeSpec& edge, std::size_t i) {
        auto volume = std::make_shared<Volume>();
        for (const auto& ref : edge.inputs) volume->push(ref, products[i].at(ref));
        return volume;
    });
}

IterationState SslEngine::initialize_hypergraph() {
    if (data_->split().labeled.empty()) {
        throw ConfigError("initialize_hypergraph: empty labeled set");
    }
    IterationState state;
    state.k = 1;
    const auto& labeled = data_->split().labeled;
    train_links(state, labeled, [this](const std::string& task, int month) {
        return data_->grid(month, task);
    });
    select_baselines(state);
    return state;
}

void SslEngine::train_ensembles(IterationState& state) {
    if (state.links.empty()) throw ConfigError("train_ensembles: links not trained");
    Dataset::PhaseScope scope(*data_, AccessPhase::Fit);
    const auto& labeled = data_->split().labeled;
    if (labeled.empty()) throw ConfigError("train_ensembles: empty labeled set");

    std::map<std::string, std::vector<CandidateStack>> stacks;
    std::map<std::string, std::vector<LayerGrid>> targets;
    for (int t : labeled) {
        const auto products = execute_products(state, t, 2);
        for (const auto& out : topology_.output_nodes) {
            stacks[out.name].push_back(candidate_stack_for(state, products, out.name));
            targets[out.name].push_back(*data_->grid(t, out.name));
        }
    }

    struct Job {
        std::string task;
        EnsembleModel model;
        TrainReport report;
    };
    std::vector<Job> jobs;
    for (const auto& out : topology_.output_nodes) {
        jobs.push_back({out.name, EnsembleModel::create(config_.variant,
                                                        stacks[out.name].front().names, 0),
                        {}});
    }
    std::vector<std::function<void()>> tasks;
    for (auto& job : jobs) {
        tasks.push_back([&job, &stacks, &targets, this, k = state.k] {
            TrainConfig cfg = config_.train;
            cfg.seed =
                derive_seed(config_.master_seed, "iter" + std::to_string(k) + "/ensemble/" + job.task);
            job.model = EnsembleModel::create(config_.variant, stacks[job.task].front().names,
                                              cfg.seed);
            job.report = job.model.fit(stacks[job.task], targets[job.task], cfg);
        });
    }
    parallel_run(config_.jobs, tasks);
    for (auto& job : jobs) {
        state.ensemble_reports[job.task] = std::move(job.report);
        state.ensembles.erase(job.task);
        state.ensembles.emplace(job.task, std::move(job.model));
    }
}

PseudolabelStore SslEngine::generate_pseudolabels(const IterationState& state) {
    if (state.ensembles.empty()) {
        throw ConfigError("generate_pseudolabels: ensembles not trained");
    }
    Dataset::PhaseScope scope(*data_, AccessPhase::Inference);
    PseudolabelStore store;
    store.provenance.variant = to_string(config_.variant);
    store.provenance.iteration = state.k;
    store.provenance.topology_hash = hex64(topology_.hash());
    for (const auto& out : topology_.output_nodes) {
        store.provenance.pool_by_task[out.name] =
            candidate_pool(topology_, out.name, config_.include_complex);
    }

    const auto input_names = data_->manifest().input_names();
    for (int t : data_->split().unlabeled) {
        bool inputs_ok = true;
        for (const auto& name : input_names) {
            if (!data_->manifest().is_available(t, name)) {
                inputs_ok = false;
                break;
            }
        }
        if (!inputs_ok) {
            std::fprintf(stderr, "warning: skipping unlabeled month %d, input layer missing\n", t);
            continue;
        }
        const auto products = execute_products(state, t, 2);
        for (const auto& out : topology_.output_nodes) {
            const CandidateStack stack = candidate_stack_for(state, products, out.name);
            store.labels[out.name][t] = std::make_shared<const LayerGrid>(
                state.ensembles.at(out.name).forward(stack));
        }
    }
    return store;
}

IterationState SslEngine::semi_supervised_iteration(const IterationState& state,
                                                    const PseudolabelStore& pseudolabels) {
    if (pseudolabels.size() == 0) {
        throw ConfigError("semi_supervised_iteration: empty pseudolabel store");
    }
    IterationState next;
    next.k = state.k + 1;

    const auto& split = data_->split();
    std::set<int> labeled_set(split.labeled.begin(), split.labeled.end());
    std::vector<int> months = split.labeled;
    for (int t : pseudolabels.months()) months.push_back(t);
    std::sort(months.begin(), months.end());

    train_links(next, months,
                [&](const std::string& task, int month) -> std::shared_ptr<const LayerGrid> {
                    if (labeled_set.count(month)) return data_->grid(month, task);
                    const auto& by_month = pseudolabels.labels.at(task);
                    auto it = by_month.find(month);
                    if (it == by_month.end()) return nullptr;
                    return it->second;
                });
    train_ensembles(next);
    return next;
}

std::string SslEngine::best_edge_by_validation(const IterationState& state,
                                               const std::string& task, double* val_l2) const {
    Dataset::PhaseScope scope(*data_, AccessPhase::Evaluation);
    const auto val_months = data_->split().validation_slice();
    if (val_months.empty()) throw ConfigError("best_edge: empty validation slice");

    std::vector<std::string> refs;
    for (const auto& h : topology_.hyperedges) {
        if (h.kind == HyperedgeKind::E && h.output == task) refs.push_back(h.link_ref);
    }
    std::map<std::string, double> sums;
    for (int t : val_months) {
        const auto products = execute_products(state, t, 1);
        const auto gt = data_->grid(t, task);
        for (const auto& ref : refs) {
            sums[ref] += masked_l2(products.at("pred:" + ref), *gt);
        }
    }
    std::string best;
    double best_l2 = 0.0;
    for (const auto& ref : refs) {
        const double l2 = sums[ref] / static_cast<double>(val_months.size());
        if (best.empty() || l2 < best_l2) {
            best = ref;
            best_l2 = l2;
        }
    }
    if (val_l2) *val_l2 = best_l2;
    return best;
}

std::vector<double> SslEngine::link_test_l2_series(const IterationState& state,
                                                   const std::string& link_ref,
                                                   const std::string& task) const {
    Dataset::PhaseScope scope(*data_, AccessPhase::Evaluation);
    std::vector<double> series;
    for (int t : data_->split().test) {
        const auto products = execute_products(state, t, 1);
        series.push_back(masked_l2(products.at("pred:" + link_ref), *data_->grid(t, task)));
    }
    return series;
}

void SslEngine::select_baselines(const IterationState& state) {
    baselines_.clear();
    for (const auto& out : topology_.output_nodes) {
        Baseline base;
        base.link_ref = best_edge_by_validation(state, out.name, &base.validation_l2);
        base.test_l2_series = link_test_l2_series(state, base.link_ref, out.name);
        base.test_l2_mean = mean_of(base.test_l2_series);
        baselines_[out.name] = std::move(base);
    }
}

DistilledEdge SslEngine::distill_best_edge(const IterationState& state, const std::string& task) {
    if (baselines_.empty()) {
        throw ConfigError("distill_best_edge: baselines not selected (run initialize first)");
    }
    DistilledEdge edge;
    edge.task = task;
    edge.link_ref = best_edge_by_validation(state, task, &edge.validation_l2);
    edge.test_l2_series = link_test_l2_series(state, edge.link_ref, task);
    edge.test_l2_mean = mean_of(edge.test_l2_series);
    edge.rpi = rpi_percent(edge.test_l2_mean, baselines_.at(task).test_l2_mean);
    return edge;
}

IterationMetrics SslEngine::evaluate_iteration(const IterationState& state) {
    Dataset::PhaseScope scope(*data_, AccessPhase::Evaluation);
    IterationMetrics metrics;
    metrics.k = state.k;

    for (const auto& out : topology_.output_nodes) metrics.tasks.push_back(out.name);
    const std::size_t n_tasks = metrics.tasks.size();

    // Select distilled edges first so one pass over the test months serves
    // both the ensemble series and the distilled predictions.
    std::vector<DistilledEdge> distilled(n_tasks);
    for (std::size_t i = 0; i < n_tasks; ++i) {
        distilled[i].task = metrics.tasks[i];
        distilled[i].link_ref =
            best_edge_by_validation(state, metrics.tasks[i], &distilled[i].validation_l2);
    }

    metrics.ensemble_l2_series.assign(n_tasks, {});
    std::vector<std::vector<LayerGrid>> distilled_preds(n_tasks);
    const bool have_ensembles = !state.ensembles.empty();
    for (int t : data_->split().test) {
        const auto products = execute_products(state, t, have_ensembles ? 2 : 1);
        for (std::size_t i = 0; i < n_tasks; ++i) {
            const auto gt = data_->grid(t, metrics.tasks[i]);
            if (have_ensembles) {
                const CandidateStack stack =
                    candidate_stack_for(state, products, metrics.tasks[i]);
                const LayerGrid combined = state.ensembles.at(metrics.tasks[i]).forward(stack);
                metrics.ensemble_l2_series[i].push_back(masked_l2(combined, *gt));
            }
            const LayerGrid& pred = products.at("pred:" + distilled[i].link_ref);
            distilled[i].test_l2_series.push_back(masked_l2(pred, *gt));
            distilled_preds[i].push_back(pred);
        }
    }

    std::vector<double> ens_rpis, dist_rpis, val_rpis;
    for (std::size_t i = 0; i < n_tasks; ++i) {
        const Baseline& base = baselines_.at(metrics.tasks[i]);
        if (have_ensembles) {
            metrics.ensemble_l2.push_back(mean_of(metrics.ensemble_l2_series[i]));
            metrics.ensemble_rpi.push_back(rpi_percent(metrics.ensemble_l2[i], base.test_l2_mean));
            ens_rpis.push_back(metrics.ensemble_rpi[i]);
        }
        distilled[i].test_l2_mean = mean_of(distilled[i].test_l2_series);
        distilled[i].rpi = rpi_percent(distilled[i].test_l2_mean, base.test_l2_mean);
        dist_rpis.push_back(distilled[i].rpi);
        val_rpis.push_back(rpi_percent(distilled[i].validation_l2, base.validation_l2));
        metrics.distilled_consistency.push_back(
            temporal_consistency(distilled_preds[i], 3, metrics.tasks[i]).mean_variance);
    }
    if (have_ensembles) metrics.ensemble_arpi = arpi(ens_rpis);
    metrics.distilled = std::move(distilled);
    metrics.distilled_arpi = arpi(dist_rpis);
    metrics.distilled_val_arpi = arpi(val_rpis);
    return metrics;
}

void SslEngine::compute_trend(const IterationState& state, RunSummary& summary) {
    Dataset::PhaseScope scope(*data_, AccessPhase::Evaluation);
    std::vector<int> months = data_->split().test;
    for (int t : data_->split().unlabeled) months.push_back(t);
    std::sort(months.begin(), months.end());

    const std::size_t n_tasks = topology_.output_nodes.size();
    summary.trend_months = months;
    summary.trend_l2_by_task.assign(n_tasks, {});
    summary.trend_l2_mean.clear();
    for (int t : months) {
        const auto products = execute_products(state, t, 1);
        double acc = 0.0;
        for (std::size_t i = 0; i < n_tasks; ++i) {
            const auto& task = topology_.output_nodes[i].name;
            const double l2 = masked_l2(products.at("pred:" + baselines_.at(task).link_ref),
                                        *data_->grid(t, task));
            summary.trend_l2_by_task[i].push_back(l2);
            acc += l2;
        }
        summary.trend_l2_mean.push_back(acc / static_cast<double>(n_tasks));
    }
}

// ---------------------------------------------------------------------------
// Run-directory artifacts

namespace {

void write_report_csv(const fs::path& file, const std::vector<std::string>& tasks,
                      const std::vector<int>& test_months,
                      const std::vector<std::vector<double>>& l2_series,
                      const std::vector<std::vector<double>>& baseline_series,
                      const std::vector<double>& task_rpi, double arpi_value) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw FormatError("cannot write report '" + file.string() + "'");
    out << "task,timestamp,l2,baseline_l2,rpi\n";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        for (std::size_t j = 0; j < test_months.size(); ++j) {
            const double l2 = l2_series[i][j];
            const double base = baseline_series[i][j];
            out << tasks[i] << ',' << test_months[j] << ',' << fmt_g(l2) << ',' << fmt_g(base)
                << ',' << (l2 > 0.0 ? fmt_g((base / l2 - 1.0) * 100.0) : "") << "\n";
        }
        const double l2_mean = mean_of(l2_series[i]);
        const double base_mean = mean_of(baseline_series[i]);
        out << tasks[i] << ",ALL," << fmt_g(l2_mean) << ',' << fmt_g(base_mean) << ','
            << fmt_g(task_rpi[i]) << "\n";
    }
    out << "ARPI,ALL,,," << fmt_g(arpi_value) << "\n";
}

nlohmann::json summary_to_json(const IterationMetrics& m) {
    nlohmann::json j;
    j["k"] = m.k;
    j["tasks"] = m.tasks;
    j["ensemble"] = {{"l2", m.ensemble_l2}, {"rpi", m.ensemble_rpi}, {"arpi", m.ensemble_arpi}};
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& d : m.distilled) {
        edges.push_back({{"task", d.task},
                         {"link_ref", d.link_ref},
                         {"validation_l2", d.validation_l2},
                         {"test_l2", d.test_l2_mean},
                         {"rpi", d.rpi}});
    }
    j["distilled"] = {{"edges", edges},
                      {"arpi", m.distilled_arpi},
                      {"val_arpi", m.distilled_val_arpi}};
    nlohmann::json consistency;
    for (std::size_t i = 0; i < m.tasks.size(); ++i) {
        consistency[m.tasks[i]] = m.distilled_consistency[i];
    }
    j["consistency"] = consistency;
    return j;
}

}  // namespace

IterationMetrics read_iteration_summary(const fs::path& run_dir, int k) {
    const fs::path file = run_dir / ("iter_" + std::to_string(k)) / "summary.json";
    std::ifstream in(file);
    if (!in) throw FormatError("missing iteration summary '" + file.string() + "'");
    nlohmann::json j;
    in >> j;
    IterationMetrics m;
    m.k = j.at("k").get<int>();
    m.tasks = j.at("tasks").get<std::vector<std::string>>();
    m.ensemble_l2 = j.at("ensemble").at("l2").get<std::vector<double>>();
    m.ensemble_rpi = j.at("ensemble").at("rpi").get<std::vector<double>>();
    m.ensemble_arpi = j.at("ensemble").at("arpi").get<double>();
    for (const auto& e : j.at("distilled").at("edges")) {
        DistilledEdge d;
        d.task = e.at("task").get<std::string>();
        d.link_ref = e.at("link_ref").get<std::string>();
        d.validation_l2 = e.at("validation_l2").get<double>();
        d.test_l2_mean = e.at("test_l2").get<double>();
        d.rpi = e.at("rpi").get<double>();
        m.distilled.push_back(std::move(d));
    }
    m.distilled_arpi = j.at("distilled").at("arpi").get<double>();
    m.distilled_val_arpi = j.at("distilled").at("val_arpi").get<double>();
    for (const auto& task : m.tasks) {
        m.distilled_consistency.push_back(j.at("consistency").at(task).get<double>());
    }
    return m;
}

void SslEngine::write_iteration_artifacts(const fs::path& run_dir, const IterationState& state,
                                          const IterationMetrics& metrics) {
    const fs::path dir = run_dir / ("iter_" + std::to_string(state.k));
    fs::create_directories(dir / "links");
    fs::create_directories(dir / "ensembles");
    for (const auto& [ref, link] : state.links) {
        save_model(dir / "links" / (ref + ".bin"), link->to_blob());
    }
    for (const auto& [task, model] : state.ensembles) {
        save_model(dir / "ensembles" / (task + ".bin"), model.to_blob());
    }

    std::vector<std::vector<double>> baseline_series, distilled_series;
    std::vector<double> distilled_rpi;
    for (std::size_t i = 0; i < metrics.tasks.size(); ++i) {
        baseline_series.push_back(baselines_.at(metrics.tasks[i]).test_l2_series);
        distilled_series.push_back(metrics.distilled[i].test_l2_series);
        distilled_rpi.push_back(metrics.distilled[i].rpi);
    }
    if (!metrics.ensemble_l2_series.empty() && !metrics.ensemble_l2_series.front().empty()) {
        write_report_csv(dir / "report.csv", metrics.tasks, data_->split().test,
                         metrics.ensemble_l2_series, baseline_series, metrics.ensemble_rpi,
                         metrics.ensemble_arpi);
    }
    write_report_csv(dir / "distilled.csv", metrics.tasks, data_->split().test, distilled_series,
                     baseline_series, distilled_rpi, metrics.distilled_arpi);

    std::ofstream out(dir / "summary.json", std::ios::trunc);
    out << summary_to_json(metrics).dump(2) << "\n";
}

void SslEngine::write_pseudolabels(const fs::path& run_dir, int k,
                                   const PseudolabelStore& store) {
    const fs::path dir = run_dir / ("iter_" + std::to_string(k)) / "pseudolabels";
    for (const auto& [task, by_month] : store.labels) {
        fs::create_directories(dir / task);
        for (const auto& [t, grid] : by_month) {
            save_grid(dir / task / month_file(t), *grid);
        }
    }
    nlohmann::json j;
    j["variant"] = store.provenance.variant;
    j["iteration"] = store.provenance.iteration;
    j["topology_hash"] = store.provenance.topology_hash;
    j["pool_by_task"] = store.provenance.pool_by_task;
    fs::create_directories(dir);
    std::ofstream out(dir / "provenance.json", std::ios::trunc);
    out << j.dump(2) << "\n";
}

bool SslEngine::iteration_complete(const fs::path& run_dir, int k) const {
    const fs::path dir = run_dir / ("iter_" + std::to_string(k));
    return fs::exists(dir / "summary.json") && fs::exists(dir / "distilled.csv");
}

IterationState SslEngine::load_iteration(const fs::path& run_dir, int k) const {
    const fs::path dir = run_dir / ("iter_" + std::to_string(k));
    IterationState state;
    state.k = k;
    std::vector<fs::path> link_files;
    for (const auto& entry : fs::directory_iterator(dir / "links")) {
        link_files.push_back(entry.path());
    }
    std::sort(link_files.begin(), link_files.end());
    for (const auto& file : link_files) {
        state.links[file.stem().string()] = link_from_blob(load_model(file));
    }
    if (fs::exists(dir / "ensembles")) {
        std::vector<fs::path> ens_files;
        for (const auto& entry : fs::directory_iterator(dir / "ensembles")) {
            ens_files.push_back(entry.path());
        }
        std::sort(ens_files.begin(), ens_files.end());
        for (const auto& file : ens_files) {
            state.ensembles.emplace(file.stem().string(),
                                    EnsembleModel::from_blob(load_model(file)));
        }
    }
    return state;
}

PseudolabelStore SslEngine::load_pseudolabels(const fs::path& run_dir, int k) const {
    const fs::path dir = run_dir / ("iter_" + std::to_string(k)) / "pseudolabels";
    if (!fs::exists(dir / "provenance.json")) {
        throw FormatError("missing pseudolabel provenance in '" + dir.string() + "'");
    }
    PseudolabelStore store;
    nlohmann::json j;
    std::ifstream in(dir / "provenance.json");
    in >> j;
    store.provenance.variant = j.at("variant").get<std::string>();
    store.provenance.iteration = j.at("iteration").get<int>();
    store.provenance.topology_hash = j.at("topology_hash").get<std::string>();
    store.provenance.pool_by_task =
        j.at("pool_by_task").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& out : topology_.output_nodes) {
        for (int t : data_->split().unlabeled) {
            const fs::path file = dir / out.name / month_file(t);
            if (fs::exists(file)) {
                store.labels[out.name][t] = std::make_shared<const LayerGrid>(load_grid(file));
            }
        }
    }
    return store;
}

RunSummary SslEngine::run(const fs::path& run_dir, bool force) {
    fs::create_directories(run_dir);

    // Record the full configuration before any work.
    {
        nlohmann::json j;
        j["format_version"] = 1;
        j["master_seed"] = config_.master_seed;
        j["link_kind"] = config_.link_kind;
        j["ensemble"] = to_string(config_.variant);
        j["include_complex"] = config_.include_complex;
        j["iterations"] = config_.iterations;
        j["jobs"] = config_.jobs;
        j["min_arpi_gain"] = config_.arpi_convergence_delta;
        j["train"] = {{"max_epochs", config_.train.max_epochs},
                      {"initial_learning_rate", config_.train.initial_learning_rate},
                      {"plateau_patience", config_.train.plateau_patience},
                      {"warmup_epochs", config_.train.warmup_epochs},
                      {"lr_decay_factor", config_.train.lr_decay_factor}};
        if (!config_.cli_echo_json.empty()) {
            j["cli"] = nlohmann::json::parse(config_.cli_echo_json);
        }
        std::ofstream out(run_dir / "run.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(run_dir / "topology.json", std::ios::trunc);
        out << topology_.to_json() << "\n";
    }

    RunSummary summary;
    IterationState state;
    if (!force && iteration_complete(run_dir, 1)) {
        state = load_iteration(run_dir, 1);
        select_baselines(state);
        summary.iterations.push_back(read_iteration_summary(run_dir, 1));
    } else {
        state = initialize_hypergraph();
        train_ensembles(state);
        const IterationMetrics metrics = evaluate_iteration(state);
        write_iteration_artifacts(run_dir, state, metrics);
        summary.iterations.push_back(metrics);
    }

    compute_trend(state, summary);
    {
        std::ofstream out(run_dir / "trend.csv", std::ios::trunc);
        out << "task,month,l2\n";
        for (std::size_t i = 0; i < summary.trend_l2_by_task.size(); ++i) {
            for (std::size_t m = 0; m < summary.trend_months.size(); ++m) {
                out << topology_.output_nodes[i].name << ',' << summary.trend_months[m] << ','
                    << fmt_g(summary.trend_l2_by_task[i][m]) << "\n";
            }
        }
        for (std::size_t m = 0; m < summary.trend_months.size(); ++m) {
            out << "mean," << summary.trend_months[m] << ',' << fmt_g(summary.trend_l2_mean[m])
                << "\n";
        }
    }

    for (int k = 2; k <= config_.iterations; ++k) {
        if (!force && iteration_complete(run_dir, k)) {
            state = load_iteration(run_dir, k);
            summary.iterations.push_back(read_iteration_summary(run_dir, k));
        } else {
            PseudolabelStore pseudolabels;
            const fs::path prev_pl =
                run_dir / ("iter_" + std::to_string(k - 1)) / "pseudolabels" / "provenance.json";
            if (!force && fs::exists(prev_pl)) {
                pseudolabels = load_pseudolabels(run_dir, k - 1);
            } else {
                pseudolabels = generate_pseudolabels(state);
                write_pseudolabels(run_dir, k - 1, pseudolabels);
            }
            state = semi_supervised_iteration(state, pseudolabels);
            const IterationMetrics metrics = evaluate_iteration(state);
            write_iteration_artifacts(run_dir, state, metrics);
            summary.iterations.push_back(metrics);
        }
        const double gain = summary.iterations[k - 1].distilled_val_arpi -
                            summary.iterations[k - 2].distilled_val_arpi;
        if (k < config_.iterations && gain < config_.arpi_convergence_delta) {
            std::fprintf(stderr, "converged after iteration %d (val ARPI gain %.4f)\n", k, gain);
            break;
        }
    }

    const auto verdict = data_->audit().verify(data_->manifest(), data_->split());
    summary.hygiene_clean = verdict.clean;
    summary.hygiene_violation = verdict.violation;
    {
        std::size_t fit_reads = 0, infer_reads = 0, eval_reads = 0;
        for (const auto& r : data_->audit().records()) {
            switch (r.phase) {
                case AccessPhase::Fit: ++fit_reads; break;
                case AccessPhase::Inference: ++infer_reads; break;
                case AccessPhase::Evaluation: ++eval_reads; break;
            }
        }
        nlohmann::json j;
        j["clean"] = verdict.clean;
        j["violation"] = verdict.violation;
        j["reads"] = {{"fit", fit_reads}, {"inference", infer_reads}, {"evaluation", eval_reads}};
        std::ofstream out(run_dir / "audit.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    return summary;
}

}  // namespace mthg
