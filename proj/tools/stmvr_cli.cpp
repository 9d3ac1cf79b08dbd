// stmvr: fit, compare, diagnose and simulate matrix-variate spatio-temporal
// regressions from long-format CSV files.
//
// Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure. Failures print
// one line "stmvr: <usage|data|numerical>: <reason>" on stderr.

#include "stmvr/diagnostics.hpp"
#include "stmvr/errors.hpp"
#include "stmvr/estimation.hpp"
#include "stmvr/io.hpp"
#include "stmvr/simulation.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace stmvr;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

int fail(const char* kind, std::string reason, int code) {
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    std::cerr << "stmvr: " << kind << ": " << reason << '\n';
    return code;
}

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataArgs {
    std::string y_path;
    std::string x_path;
    std::string locations_path;
    std::string scale;
    std::vector<std::string> response_order;
    std::vector<std::string> covariate_order;
};

struct ModelArgs {
    std::string structure = "dense";
    std::string mask;
    std::string blocks;
    bool intercept = false;
    std::vector<std::string> interactions;
    std::vector<std::string> powers;
    std::size_t max_iter = 200;
    double tol = 1e-8;
    double ridge_lambda = 1e-8;
    double score_tol = 1e-9;
    std::string init = "data";
    bool jitter = false;
    std::string bic_n = "cells";
};

void add_data_options(CLI::App* app, DataArgs& a) {
    app->add_option("--y", a.y_path, "responses CSV (variable,location_id,time,value)")->required();
    app->add_option("--x", a.x_path, "covariates CSV (covariate,location_id,time,value)")->required();
    app->add_option("--locations", a.locations_path, "locations CSV (id,x,y)")->required();
    app->add_option("--scale", a.scale, "divide named rows, e.g. milk=1e6,meat=1e9");
    app->add_option("--response-order", a.response_order, "explicit response order");
    app->add_option("--covariate-order", a.covariate_order, "explicit covariate order");
}

void add_model_options(CLI::App* app, ModelArgs& a) {
    app->add_option("--structure", a.structure, "identity, diagonal, dense, sparse or block")
        ->check(CLI::IsMember({"identity", "diagonal", "dense", "sparse", "block"}));
    app->add_option("--mask", a.mask, "sparse mask file (p rows of 0/1)");
    app->add_option("--blocks", a.blocks, "blocks 'r1-r2:c1-c2;...' (1-based)");
    app->add_flag("--intercept", a.intercept, "append a row of ones to X");
    app->add_option("--interaction", a.interactions, "interaction 'i:j' (1-based, repeatable)");
    app->add_option("--power", a.powers, "power 'i:d' (1-based, repeatable)");
    app->add_option("--max-iter", a.max_iter)->check(CLI::PositiveNumber);
    app->add_option("--tol", a.tol, "relative log-likelihood tolerance")->check(CLI::PositiveNumber);
    app->add_option("--ridge-lambda", a.ridge_lambda)->check(CLI::NonNegativeNumber);
    app->add_option("--score-tol", a.score_tol)->check(CLI::PositiveNumber);
    app->add_option("--init", a.init, "data or neutral")->check(CLI::IsMember({"data", "neutral"}));
    app->add_flag("--jitter", a.jitter, "allow diagonal jitter on near-singular matrices");
    app->add_option("--bic-n", a.bic_n, "BIC sample size: cells (p*r) or columns (r)")
        ->check(CLI::IsMember({"cells", "columns"}));
}

Dataset load(const DataArgs& a) {
    Dataset data = io::load_dataset(a.y_path, a.x_path, a.locations_path,
                                    {a.response_order, a.covariate_order});
    io::apply_scale_map(data, io::parse_scale_map(a.scale));
    return data;
}

AugmentationRules augmentation(const ModelArgs& a) {
    AugmentationRules r;
    r.intercept = a.intercept;
    for (const auto& s : a.interactions) r.interactions.push_back(io::parse_interaction(s));
    for (const auto& s : a.powers) r.powers.push_back(io::parse_power(s));
    return r;
}

CoefficientStructure structure_from(const std::string& kind, const std::string& mask,
                                    const std::string& blocks, const ModelArgs& a) {
    io::StructureSpec spec;
    spec.kind = kind;
    if (kind == "sparse") {
        if (mask.empty()) throw UsageError("--structure sparse requires --mask");
        spec.mask = io::load_mask(mask);
    }
    if (kind == "block") {
        if (blocks.empty()) throw UsageError("--structure block requires --blocks");
        spec.blocks = io::parse_blocks(blocks);
    }
    spec.augmentation = augmentation(a);
    return io::build_structure(spec);
}

FitOptions fit_options(const ModelArgs& a) {
    FitOptions o;
    o.max_iter = a.max_iter;
    o.tol_loglik = a.tol;
    o.ridge_lambda = a.ridge_lambda;
    o.score_tol = a.score_tol;
    o.init = io::parse_init_policy(a.init);
    o.jitter.enabled = a.jitter;
    o.bic_n = io::parse_bic_sample_size(a.bic_n);
    return o;
}

int run_fit(const DataArgs& d, const ModelArgs& m, const std::string& family, const fs::path& out) {
    const Dataset data = load(d);
    const auto structure = structure_from(m.structure, m.mask, m.blocks, m);
    const FittedModel model = fit(data, structure, parse_spatial_family(family), fit_options(m));
    io::write_json(out / "fit.json", io::fit_to_json(model, data));
    std::cout << "family " << to_string(model.family) << " log_lik " << io::format_real(model.log_lik)
              << " bic " << io::format_real(model.bic) << " k " << model.num_params << " iterations "
              << model.num_iter << (model.converged ? " converged" : " not-converged") << '\n';
    return kOk;
}

int run_compare(const DataArgs& d, const ModelArgs& m, std::vector<std::string> families,
                const std::vector<std::string>& structures, const fs::path& out) {
    const Dataset data = load(d);
    if (families.empty() || (families.size() == 1 && families[0] == "all")) {
        families.clear();
        for (auto f : kAllSpatialFamilies) families.emplace_back(to_string(f));
    }
    // Items: "dense", "diagonal", "identity", "sparse=<mask file>", "block=<spec>".
    std::vector<std::pair<std::string, CoefficientStructure>> specs;
    if (structures.empty()) {
        specs.emplace_back(m.structure, structure_from(m.structure, m.mask, m.blocks, m));
    }
    for (const auto& item : structures) {
        const auto eq = item.find('=');
        const std::string kind = item.substr(0, eq);
        const std::string arg = eq == std::string::npos ? "" : item.substr(eq + 1);
        specs.emplace_back(item, structure_from(kind, kind == "sparse" ? arg : "", kind == "block" ? arg : "", m));
    }
    const FitOptions options = fit_options(m);
    std::vector<io::ComparisonEntry> entries;
    for (const auto& f : families) {
        const SpatialFamily family = parse_spatial_family(f);
        for (const auto& [label, st] : specs) {
            std::string shown = label;
            if (const auto eq = shown.find('='); eq != std::string::npos) shown = shown.substr(0, eq) + ":" + fs::path(shown.substr(eq + 1)).filename().string();
            entries.push_back({shown, fit(data, st, family, options)});
        }
    }
    const auto ranked = io::rank_by_bic(std::move(entries));
    io::write_json(out / "comparison.json", io::comparison_to_json(ranked));
    const std::string table = io::comparison_table(ranked);
    io::write_text(out / "comparison.txt", table);
    std::cout << table;
    return kOk;
}

int run_diagnose(const DataArgs& d, const std::string& fit_path, double level, bool svg,
                 const fs::path& out) {
    const Dataset data = load(d);
    const FittedModel model = io::fit_from_json(io::read_json(fit_path));
    DiagnosticsOptions opts;
    opts.column_level = level;
    const DiagnosticsReport report = diagnose(data, model, opts);
    io::write_json(out / "diagnostics.json", io::diagnostics_to_json(report));
    io::write_diagnostics_csv(report, data, out);
    if (svg) io::write_diagnostics_svg(report, out);
    std::cout << "column flags " << report.column_flags.size() << " row flags " << report.row_flags.size()
              << " cell flags " << report.cell_flags.size() << " global " << io::format_real(report.global_stat)
              << '\n';
    return kOk;
}

int run_simulate(const std::string& scenario_path, std::size_t threads, bool separate,
                 bool emit_data, const fs::path& out) {
    const SimulationScenario scenario = io::load_scenario(scenario_path);
    if (emit_data) io::write_dataset(draw_replication(scenario, 0).data, out / "replication_1");
    const StudyResult result = run_study(scenario, {threads, separate});
    io::write_text(out / "replications.csv", io::study_records_csv(result));
    io::write_text(out / "boxplot.csv", io::study_boxplot_csv(result));
    io::write_json(out / "summary.json", io::study_summary_to_json(scenario, result));
    std::cout << result.name << " completed " << result.summary.completed << " failed "
              << result.summary.failed << " median_b_error "
              << io::format_real(result.summary.median_b_error) << '\n';
    if (result.study_failed) {
        return fail("numerical",
                    "study failed: " + std::to_string(result.summary.failed) + " of " +
                        std::to_string(scenario.replications) + " replications failed",
                    kNumerical);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Matrix-variate spatio-temporal regression"};
    app.set_config("--config", "", "INI config; [fit], [compare], ... sections; flags win");
    app.require_subcommand(1);

    DataArgs data;
    ModelArgs model;
    std::string family = "exponential";
    std::string out = ".";

    auto* fit_cmd = app.add_subcommand("fit", "fit one model and write fit.json");
    add_data_options(fit_cmd, data);
    add_model_options(fit_cmd, model);
    fit_cmd->add_option("--family", family, "exponential, gaussian, cubic, spherical, matern");
    fit_cmd->add_option("--out", out, "output directory");

    std::vector<std::string> families;
    std::vector<std::string> structures;
    auto* compare_cmd = app.add_subcommand("compare", "rank covariance families and structures by BIC");
    add_data_options(compare_cmd, data);
    add_model_options(compare_cmd, model);
    compare_cmd->add_option("--families", families, "families to fit (default all)");
    compare_cmd->add_option("--structures", structures,
                            "structures: dense, diagonal, identity, sparse=<mask>, block=<spec>");
    compare_cmd->add_option("--out", out, "output directory");

    std::string fit_path;
    double level = 0.975;
    bool svg = false;
    auto* diag_cmd = app.add_subcommand("diagnose", "residual diagnostics for a fitted model");
    add_data_options(diag_cmd, data);
    diag_cmd->add_option("--fit", fit_path, "fit.json from the fit subcommand")->required();
    diag_cmd->add_option("--level", level, "d_j^2 flag level: 0.975 or 0.95")
        ->check(CLI::Range(0.5, 0.9999));
    diag_cmd->add_flag("--svg", svg, "also write SVG plots");
    diag_cmd->add_option("--out", out, "output directory");

    std::string scenario;
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    bool separate = false;
    bool emit_data = false;
    auto* sim_cmd = app.add_subcommand("simulate", "run a Monte Carlo scenario file");
    sim_cmd->add_option("--scenario", scenario, "scenario INI file")->required();
    sim_cmd->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sim_cmd->add_flag("--separate", separate, "also fit per-response models");
    sim_cmd->add_flag("--emit-data", emit_data, "write replication 1 as CSV files");
    sim_cmd->add_option("--out", out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail("usage", e.what(), kUsage);
    }

    try {
        if (*fit_cmd) return run_fit(data, model, family, out);
        if (*compare_cmd) return run_compare(data, model, families, structures, out);
        if (*diag_cmd) return run_diagnose(data, fit_path, level, svg, out);
        if (*sim_cmd) return run_simulate(scenario, threads, separate, emit_data, out);
    } catch (const UsageError& e) {
        return fail("usage", e.what(), kUsage);
    } catch (const DataError& e) {
        return fail("data", e.what(), kData);
    } catch (const std::invalid_argument& e) {
        return fail("data", e.what(), kData);
    } catch (const std::out_of_range& e) {
        return fail("data", e.what(), kData);
    } catch (const NumericalError& e) {
        return fail("numerical", e.what(), kNumerical);
    } catch (const std::exception& e) {
        return fail("numerical", e.what(), kNumerical);
    }
    return kUsage;
}
