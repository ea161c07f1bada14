#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "taumerge/store.hpp"

using namespace taumerge;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

bool g_verbose = false;

void log_event(const json& event) {
    if (g_verbose) std::cerr << event.dump() << "\n";
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("bad JSON in " + path + ": " + e.what());
    }
    return j;
}

// Flags shared by the commands that synthesize a stream. Defaults follow the
// simulator (lambda = 1; the assemble command defaults to lambda = 3).
struct SimFlags {
    StreamConfig config;
    std::string config_path;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path,
                        "JSON config file; flags override its fields");
        cmd->add_option("--tasks,-n", config.task_count, "number of tasks (>= 1)")
            ->capture_default_str();
        cmd->add_option("--dim,-d", config.feature_dim, "layer input width d (>= 1)")
            ->capture_default_str();
        cmd->add_option("--out-dim", config.output_dim, "layer output width (>= 1)")
            ->capture_default_str();
        cmd->add_option("--samples", config.samples_per_task,
                        "training samples per task (>= 1)")
            ->capture_default_str();
        cmd->add_option("--eval-samples", config.eval_samples,
                        "held-out samples per task (>= 1)")
            ->capture_default_str();
        cmd->add_option("--rank,-r", config.adapter_rank,
                        "adapter rank (1..min(dim,out-dim))")
            ->capture_default_str();
        cmd->add_option("--layers,-L", config.layer_count, "layer count (>= 1)")
            ->capture_default_str();
        cmd->add_option("--overlap", config.overlap,
                        "task subspace overlap in [0,1]; 0 orthogonal, 1 collinear")
            ->capture_default_str();
        cmd->add_option("--proto-dim", config.proto_dim,
                        "prototype feature width (>= tasks)")
            ->capture_default_str();
        cmd->add_option("--proto-samples", config.proto_samples,
                        "prototype samples per task (>= 1)")
            ->capture_default_str();
        cmd->add_option("--proj-out-dim", config.proj_out_dim,
                        "projector output width (>= 1)")
            ->capture_default_str();
        cmd->add_option("--separation", config.proto_separation,
                        "prototype cluster separation (>= 0)")
            ->capture_default_str();
        cmd->add_option("--noise", config.noise_scale,
                        "target noise scale (>= 0)")
            ->capture_default_str();
        cmd->add_option("--seed", config.seed, "stream seed (64-bit)")
            ->capture_default_str();
    }

    StreamConfig resolve(const CLI::App* cmd) const {
        StreamConfig c = config;
        if (!config_path.empty()) {
            c = config_from_json(read_json_file(config_path));
            // flags the user actually passed win over the file
            StreamConfig flags = config;
            auto passed = [&](const std::string& name) {
                return cmd->count(name) > 0;
            };
            if (passed("--tasks")) c.task_count = flags.task_count;
            if (passed("--dim")) c.feature_dim = flags.feature_dim;
            if (passed("--out-dim")) c.output_dim = flags.output_dim;
            if (passed("--samples")) c.samples_per_task = flags.samples_per_task;
            if (passed("--eval-samples")) c.eval_samples = flags.eval_samples;
            if (passed("--rank")) c.adapter_rank = flags.adapter_rank;
            if (passed("--layers")) c.layer_count = flags.layer_count;
            if (passed("--overlap")) c.overlap = flags.overlap;
            if (passed("--proto-dim")) c.proto_dim = flags.proto_dim;
            if (passed("--proto-samples")) c.proto_samples = flags.proto_samples;
            if (passed("--proj-out-dim")) c.proj_out_dim = flags.proj_out_dim;
            if (passed("--separation")) c.proto_separation = flags.proto_separation;
            if (passed("--noise")) c.noise_scale = flags.noise_scale;
            if (passed("--seed")) c.seed = flags.seed;
        }
        c.validate();
        return c;
    }
};

json run_report_json(const StreamConfig& config, const std::string& strategy,
                     const RunOptions& opts) {
    const auto stream = generate_stream(config);
    const EvalReport report =
        run_continual(stream, strategy_from_name(strategy), config, opts);
    log_event({{"event", "run_done"},
               {"strategy", strategy},
               {"wall_time_ms", report.wall_time_ms}});
    return eval_report_to_json(report);
}

int worker_count() {
    if (const char* env = std::getenv("TAUMERGE_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// ---- commands -----------------------------------------------------------

void cmd_simulate(const SimFlags& sim, const CLI::App* cmd,
                  const std::string& strategy, const RunOptions& opts,
                  const std::string& out, const std::string& csv) {
    const StreamConfig config = sim.resolve(cmd);
    const json report = run_report_json(config, strategy, opts);
    if (out.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        write_text_atomic(out, report.dump(2) + "\n");
        log_event({{"event", "wrote"}, {"path", out}});
    }
    if (!csv.empty()) {
        write_text_atomic(csv,
                          accuracy_matrix_to_csv(accuracy_matrix_from_json(
                              report.at("accuracy"))));
        log_event({{"event", "wrote"}, {"path", csv}});
    }
}

void cmd_fit(const SimFlags& sim, const CLI::App* cmd, int task,
             const std::string& out, const std::string& features_out,
             const std::string& tau_out) {
    const StreamConfig config = sim.resolve(cmd);
    if (task < 0 || task >= config.task_count) {
        throw ShapeError("fit: --task out of range");
    }
    const auto stream = generate_stream(config);
    const auto& t = stream[static_cast<std::size_t>(task)];

    std::vector<LowRankAdapter> adapters;
    std::vector<TaskVector> taus;
    std::vector<CumulativeCovariance> grams;
    for (int l = 0; l < config.layer_count; ++l) {
        const LayerId layer{l, "layer" + std::to_string(l)};
        adapters.push_back(fit_task_adapter(t, layer, config.adapter_rank));
        taus.push_back(materialize_task_vector(adapters.back()));
        auto cov = CumulativeCovariance::zero(layer, config.feature_dim);
        grams.push_back(
            update_covariance(cov, t.train[static_cast<std::size_t>(l)]));
    }

    const json meta{{"task_index", task}, {"seed", config.seed}};
    save_bundle(bundle_from_adapters(adapters, meta), out);
    log_event({{"event", "wrote"}, {"path", out}});
    if (!features_out.empty()) {
        save_bundle(bundle_from_covariances(grams, meta), features_out);
        log_event({{"event", "wrote"}, {"path", features_out}});
    }
    if (!tau_out.empty()) {
        save_bundle(bundle_from_task_vectors(taus, meta), tau_out);
        log_event({{"event", "wrote"}, {"path", tau_out}});
    }
}

std::vector<TaskVector> load_taus(const std::string& path) {
    const Bundle b = load_bundle(path);
    if (b.kind == BundleKind::task_vector) return task_vectors_from_bundle(b);
    if (b.kind == BundleKind::adapter) {
        std::vector<TaskVector> taus;
        for (const auto& a : adapters_from_bundle(b)) {
            taus.push_back(materialize_task_vector(a));
        }
        return taus;
    }
    throw IoError(path + ": expected a task_vector or adapter bundle");
}

void cmd_merge(const std::vector<std::string>& inputs,
               const std::vector<std::string>& features, double gamma,
               bool compressed, const std::string& out) {
    if (inputs.empty() || inputs.size() != features.size()) {
        throw ShapeError("merge: need equally many --in and --features bundles");
    }
    MergedState state;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const auto taus = load_taus(inputs[t]);
        const auto covs = covariances_from_bundle(load_bundle(features[t]));
        if (taus.size() != covs.size()) {
            throw ShapeError("merge: layer sets differ between tau and features");
        }
        if (t == 0) {
            std::vector<LayerSpec> specs;
            for (std::size_t l = 0; l < taus.size(); ++l) {
                specs.push_back(LayerSpec{taus[l].layer,
                                          static_cast<int>(taus[l].delta.cols()),
                                          static_cast<int>(taus[l].delta.rows())});
            }
            state = make_merged_state(
                specs, compressed ? std::optional<double>(gamma) : std::nullopt);
        }
        for (std::size_t l = 0; l < taus.size(); ++l) {
            state = recursive_merge_step_gram(state, taus[l].layer,
                                              reconstruct_covariance(covs[l]),
                                              taus[l]);
        }
    }
    save_bundle(bundle_from_merged_state(state), out);
    log_event({{"event", "wrote"}, {"path", out}});
}

void cmd_compress_stats(const std::string& in, double gamma,
                        const std::string& out) {
    const auto covs = covariances_from_bundle(load_bundle(in));
    std::vector<CumulativeCovariance> compressed;
    json stats = json::array();
    for (const auto& cov : covs) {
        CumulativeCovariance full = cov;
        if (full.is_compressed) {
            full.is_compressed = false;
            full.full = reconstruct_covariance(cov);
            full.spectral = {};
        }
        const auto c = compress_covariance(full, gamma);
        const Matrix h = reconstruct_covariance(cov);
        stats.push_back(
            {{"layer", c.layer.name},
             {"rank", c.spectral.rank()},
             {"dim", c.dim()},
             {"storage_ratio", storage_ratio(c)},
             {"reconstruction_error",
              h.norm() > 0 ? (h - reconstruct_covariance(c)).norm() / h.norm()
                           : 0.0}});
        compressed.push_back(c);
    }
    if (!out.empty()) {
        save_bundle(bundle_from_covariances(compressed, json{{"gamma", gamma}}),
                    out);
        log_event({{"event", "wrote"}, {"path", out}});
    }
    std::cout << json{{"gamma", gamma}, {"layers", stats}}.dump(2) << "\n";
}

void cmd_route(const std::string& registry_path, const std::string& query_path,
               double eta, bool eta_set) {
    ProjectorRegistry registry = registry_from_bundle(load_bundle(registry_path));
    if (eta_set) registry.temperature = eta;
    const json qj = read_json_file(query_path);
    const auto values = (qj.is_array() ? qj : qj.at("query"))
                            .get<std::vector<double>>();
    Vector q(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        q[static_cast<Eigen::Index>(i)] = values[i];
    }

    Vector sims(static_cast<Eigen::Index>(registry.entries.size()));
    for (std::size_t i = 0; i < registry.entries.size(); ++i) {
        sims[static_cast<Eigen::Index>(i)] =
            similarity(GlobalFeature{q}, registry.entries[i].first);
    }
    const Vector weights = routing_weights(sims, registry.temperature);
    Eigen::Index argmax = 0;
    weights.maxCoeff(&argmax);
    std::cout << json{{"similarities",
                       std::vector<double>(sims.data(), sims.data() + sims.size())},
                      {"weights",
                       std::vector<double>(weights.data(),
                                           weights.data() + weights.size())},
                      {"argmax", argmax},
                      {"eta", registry.temperature}}
                     .dump(2)
              << "\n";
}

void cmd_assemble(const std::string& base_path, const std::string& merged_path,
                  double lambda, const std::string& out) {
    const auto base = weights_from_bundle(load_bundle(base_path));

    std::vector<TaskVector> taus;
    const Bundle mb = load_bundle(merged_path);
    if (mb.kind == BundleKind::merged_state) {
        for (const auto& [idx, ls] : merged_state_from_bundle(mb).layers) {
            taus.push_back(ls.tau_star);
        }
    } else {
        taus = task_vectors_from_bundle(mb);
    }
    if (taus.size() != base.size()) {
        throw ShapeError("assemble: layer sets differ between base and merged");
    }
    std::vector<std::pair<LayerId, Matrix>> final_weights;
    for (std::size_t l = 0; l < base.size(); ++l) {
        final_weights.emplace_back(
            base[l].first,
            assemble_final_weights(base[l].second, taus[l], lambda));
    }
    save_bundle(bundle_from_weights(final_weights, json{{"lambda", lambda}}), out);
    log_event({{"event", "wrote"}, {"path", out}});
}

void cmd_eval(const std::string& report_path, const std::string& out) {
    const json j = read_json_file(report_path);
    const AccuracyMatrix acc = accuracy_matrix_from_json(
        j.contains("accuracy") ? j.at("accuracy") : j);
    const Metrics m = compute_metrics(acc);
    json mj{{"faa", m.faa}, {"caa", m.caa}};
    mj["ffm"] = m.ffm ? json(*m.ffm) : json(nullptr);
    const std::string text = mj.dump(2) + "\n";
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text_atomic(out, text);
    }
}

void cmd_sweep(const SimFlags& sim, const CLI::App* cmd,
               const std::string& strategy, double eta,
               std::vector<double> lambdas, std::vector<double> gammas,
               std::vector<std::uint64_t> seeds, const std::string& out) {
    const StreamConfig base = sim.resolve(cmd);
    if (lambdas.empty()) lambdas = {1.0};
    if (gammas.empty()) gammas = {0.999};
    if (seeds.empty()) seeds = {base.seed};

    struct Cell {
        double lambda, gamma;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (double l : lambdas)
        for (double g : gammas)
            for (std::uint64_t s : seeds) cells.push_back({l, g, s});

    std::vector<std::string> rows(cells.size());
    std::mutex next_mutex;
    std::size_t next = 0;
    auto work = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(next_mutex);
                if (next >= cells.size()) return;
                i = next++;
            }
            StreamConfig c = base;
            c.seed = cells[i].seed;
            RunOptions opts;
            opts.lambda = cells[i].lambda;
            opts.gamma = cells[i].gamma;
            opts.eta = eta;
            const EvalReport r = run_continual(
                generate_stream(c), strategy_from_name(strategy), c, opts);
            std::ostringstream row;
            row.precision(17);
            row << strategy << "," << cells[i].lambda << "," << cells[i].gamma
                << "," << cells[i].seed << "," << r.metrics.faa << ","
                << r.metrics.caa << ",";
            if (r.metrics.ffm) row << *r.metrics.ffm;
            row << "," << r.drift.grand_total << "," << r.mean_storage_ratio
                << "\n";
            rows[i] = row.str();
        }
    };
    const int workers =
        std::min<int>(worker_count(), static_cast<int>(cells.size()));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();

    std::string csv =
        "strategy,lambda,gamma,seed,faa,caa,ffm,grand_drift,storage_ratio\n";
    for (const auto& row : rows) csv += row;
    if (out.empty()) {
        std::cout << csv;
    } else {
        write_text_atomic(out, csv);
        log_event({{"event", "wrote"}, {"path", out}});
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "taumerge: training-free consolidation of low-rank task vectors via "
        "recursive least squares, with prototype-routed projector blending"};
    app.require_subcommand(1);
    app.add_flag("-v,--verbose", g_verbose, "JSON logs to stderr");

    // simulate
    auto* sim_cmd = app.add_subcommand(
        "simulate", "generate a synthetic task stream, run one strategy, "
                    "write an evaluation report");
    SimFlags sim_flags;
    sim_flags.attach(sim_cmd);
    std::string strategy = "many";
    RunOptions sim_opts;
    std::string sim_out, sim_csv;
    sim_cmd->add_option("--strategy", strategy,
                        "one of many|many_star|naive_average|final_task_only|"
                        "oracle_task_id")
        ->capture_default_str();
    sim_cmd->add_option("--lambda", sim_opts.lambda,
                        "final-assembly scale (simulation default 1; real "
                        "checkpoints typically want 3)")
        ->capture_default_str();
    sim_cmd->add_option("--gamma", sim_opts.gamma,
                        "energy threshold in (0,1] for many_star")
        ->capture_default_str();
    sim_cmd->add_option("--eta", sim_opts.eta, "routing temperature (> 0)")
        ->capture_default_str();
    sim_cmd->add_option("--out", sim_out, "report JSON path (stdout if omitted)");
    sim_cmd->add_option("--csv", sim_csv, "also write the accuracy matrix as CSV");

    // fit
    auto* fit_cmd = app.add_subcommand(
        "fit", "fit one task's adapters on a synthetic stream and save them");
    SimFlags fit_flags;
    fit_flags.config.adapter_rank = 4;
    fit_flags.attach(fit_cmd);
    int fit_task = 0;
    std::string fit_out, fit_features_out, fit_tau_out;
    fit_cmd->add_option("--task", fit_task, "task index (0-based)")->required();
    fit_cmd->add_option("--out", fit_out, "adapter bundle path")->required();
    fit_cmd->add_option("--features-out", fit_features_out,
                        "also save the task's per-layer feature Gram matrices");
    fit_cmd->add_option("--tau-out", fit_tau_out,
                        "also save the materialized task vectors");

    // merge
    auto* merge_cmd = app.add_subcommand(
        "merge", "recursively consolidate task bundles into one merged state");
    std::vector<std::string> merge_in, merge_features;
    std::string merge_out;
    double merge_gamma = 0.999;
    merge_cmd->add_option("--in", merge_in,
                          "task_vector or adapter bundles, in task order")
        ->required();
    merge_cmd->add_option("--features", merge_features,
                          "per-task covariance bundles (feature Gram matrices)")
        ->required();
    merge_cmd->add_option("--out", merge_out, "merged_state bundle path")
        ->required();
    auto* merge_gamma_opt = merge_cmd->add_option(
        "--gamma", merge_gamma,
        "keep covariance SVD-compressed at this energy threshold (default "
        "0.999 when given)");

    // compress-stats
    auto* comp_cmd = app.add_subcommand(
        "compress-stats",
        "SVD-compress a covariance bundle and report rank/storage/error");
    std::string comp_in, comp_out;
    double comp_gamma = 0.999;
    comp_cmd->add_option("--in", comp_in, "covariance bundle")->required();
    comp_cmd->add_option("--gamma", comp_gamma, "energy threshold in (0,1]")
        ->capture_default_str();
    comp_cmd->add_option("--out", comp_out, "compressed covariance bundle path");

    // route
    auto* route_cmd = app.add_subcommand(
        "route", "compute prototype similarities and routing weights for a query");
    std::string route_registry, route_query;
    double route_eta = 0.1;
    route_cmd->add_option("--registry", route_registry, "registry bundle")
        ->required();
    route_cmd->add_option("--query", route_query,
                          "JSON file holding the query vector")
        ->required();
    auto* route_eta_opt =
        route_cmd->add_option("--eta", route_eta,
                              "routing temperature override (> 0; default 0.1)");

    // assemble
    auto* asm_cmd = app.add_subcommand(
        "assemble", "W_final = W_pre + lambda * tau per layer");
    std::string asm_base, asm_merged, asm_out;
    double asm_lambda = 3.0;
    asm_cmd->add_option("--base", asm_base, "base_weights bundle")->required();
    asm_cmd->add_option("--merged", asm_merged,
                        "merged_state or task_vector bundle")
        ->required();
    asm_cmd->add_option("--lambda", asm_lambda, "scaling factor (default 3)")
        ->capture_default_str();
    asm_cmd->add_option("--out", asm_out, "output base_weights bundle")->required();

    // eval
    auto* eval_cmd = app.add_subcommand(
        "eval", "compute FAA/CAA/FFM from a report or accuracy-matrix JSON");
    std::string eval_report, eval_out;
    eval_cmd->add_option("--report", eval_report, "report or matrix JSON file")
        ->required();
    eval_cmd->add_option("--out", eval_out, "metrics JSON path (stdout if omitted)");

    // sweep
    auto* sweep_cmd = app.add_subcommand(
        "sweep", "grid over lambda/gamma/seed cells, emitting one CSV row each "
                 "(TAUMERGE_WORKERS controls parallelism)");
    SimFlags sweep_flags;
    sweep_flags.attach(sweep_cmd);
    std::string sweep_strategy = "many_star";
    std::string sweep_out;
    double sweep_eta = 0.1;
    std::vector<double> sweep_lambdas, sweep_gammas;
    std::vector<std::uint64_t> sweep_seeds;
    sweep_cmd->add_option("--strategy", sweep_strategy, "strategy arm")
        ->capture_default_str();
    sweep_cmd->add_option("--lambdas", sweep_lambdas,
                          "lambda grid (default 1)");
    sweep_cmd->add_option("--gammas", sweep_gammas,
                          "gamma grid (default 0.999)");
    sweep_cmd->add_option("--seeds", sweep_seeds, "seed grid (default --seed)");
    sweep_cmd->add_option("--eta", sweep_eta, "routing temperature (> 0)")
        ->capture_default_str();
    sweep_cmd->add_option("--out", sweep_out, "CSV path (stdout if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "{\"error\":\"usage\",\"detail\":" << json(e.what()).dump()
                  << "}\n";
        return kExitUsage;
    }

    try {
        if (sim_cmd->parsed()) {
            cmd_simulate(sim_flags, sim_cmd, strategy, sim_opts, sim_out, sim_csv);
        } else if (fit_cmd->parsed()) {
            cmd_fit(fit_flags, fit_cmd, fit_task, fit_out, fit_features_out,
                    fit_tau_out);
        } else if (merge_cmd->parsed()) {
            cmd_merge(merge_in, merge_features, merge_gamma,
                      merge_gamma_opt->count() > 0, merge_out);
        } else if (comp_cmd->parsed()) {
            cmd_compress_stats(comp_in, comp_gamma, comp_out);
        } else if (route_cmd->parsed()) {
            cmd_route(route_registry, route_query, route_eta,
                      route_eta_opt->count() > 0);
        } else if (asm_cmd->parsed()) {
            cmd_assemble(asm_base, asm_merged, asm_lambda, asm_out);
        } else if (eval_cmd->parsed()) {
            cmd_eval(eval_report, eval_out);
        } else if (sweep_cmd->parsed()) {
            cmd_sweep(sweep_flags, sweep_cmd, sweep_strategy, sweep_eta,
                      sweep_lambdas, sweep_gammas, sweep_seeds, sweep_out);
        }
    } catch (const ShapeError& e) {
        std::cerr << "{\"error\":\"invalid_parameter\",\"detail\":"
                  << json(e.what()).dump() << "}\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "{\"error\":\"io\",\"detail\":" << json(e.what()).dump()
                  << "}\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "{\"error\":\"numerical\",\"detail\":" << json(e.what()).dump()
                  << "}\n";
        return kExitNumeric;
    }
    return 0;
}
