#pragma once

#include "stmvr/diagnostics.hpp"
#include "stmvr/estimation.hpp"
#include "stmvr/model_core.hpp"
#include "stmvr/simulation.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stmvr::io {

using Json = nlohmann::ordered_json;

// Canonical text: two-space indent, keys in insertion order, reals "%.17g".
[[nodiscard]] std::string dump_json(const Json& value);
void write_json(const std::filesystem::path& path, const Json& value);
[[nodiscard]] Json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// "%.17g".
[[nodiscard]] std::string format_real(double v);

// File formats (headers matched exactly):
//   locations  id,x,y
//   responses  variable,location_id,time,value
//   covariates covariate,location_id,time,value
// Columns follow the locations file order, times sorted numerically when
// every label is numeric (first-appearance order otherwise), time fastest.
struct LoadOptions {
    std::vector<std::string> response_order;   // default: first appearance
    std::vector<std::string> covariate_order;  // default: first appearance
};

[[nodiscard]] std::vector<Location> load_locations(const std::filesystem::path& path);
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& y_path,
                                   const std::filesystem::path& x_path,
                                   const std::filesystem::path& locations_path,
                                   const LoadOptions& options = {});
// Writes locations.csv, y.csv and x.csv into `dir`.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

// Divide named response or covariate rows by the mapped value.
// Spec: "name=divisor,name=divisor".
[[nodiscard]] std::map<std::string, double> parse_scale_map(const std::string& spec);
void apply_scale_map(Dataset& data, const std::map<std::string, double>& scales);

// p rows of q comma-separated 0/1 flags, no header.
[[nodiscard]] BoolMatrix load_mask(const std::filesystem::path& path);
[[nodiscard]] BoolMatrix parse_mask(const std::string& text);
// "r1-r2:c1-c2;..." with 1-based inclusive ranges ("3" means "3-3").
[[nodiscard]] std::vector<CoefficientBlock> parse_blocks(const std::string& spec);
// "i:j" (1-based) and "i:d".
[[nodiscard]] std::pair<std::size_t, std::size_t> parse_interaction(const std::string& spec);
[[nodiscard]] std::pair<std::size_t, int> parse_power(const std::string& spec);
// Rows separated by ';', entries by ',' (e.g. "1,0.4;0.4,1").
[[nodiscard]] MatrixXd parse_matrix(const std::string& spec);

struct StructureSpec {
    std::string kind = "dense";  // identity, diagonal, dense, sparse, block
    std::optional<BoolMatrix> mask;
    std::vector<CoefficientBlock> blocks;
    AugmentationRules augmentation;
};

[[nodiscard]] CoefficientStructure build_structure(const StructureSpec& spec);
[[nodiscard]] InitPolicy parse_init_policy(const std::string& name);
[[nodiscard]] BicSampleSize parse_bic_sample_size(const std::string& name);

[[nodiscard]] Json matrix_to_json(const MatrixXd& m);
[[nodiscard]] MatrixXd matrix_from_json(const Json& j);

[[nodiscard]] Json fit_to_json(const FittedModel& model, const Dataset& data);
// Restores the fields needed to evaluate the model (B, Sigma, family,
// parameters, augmentation, log-likelihood, BIC).
[[nodiscard]] FittedModel fit_from_json(const Json& j);

struct ComparisonEntry {
    std::string structure_label;
    FittedModel model;
};

// Sorted by BIC ascending.
[[nodiscard]] std::vector<ComparisonEntry> rank_by_bic(std::vector<ComparisonEntry> entries);
[[nodiscard]] Json comparison_to_json(const std::vector<ComparisonEntry>& ranked);
// Columns: Model, Structure, LogLik, k, BIC.
[[nodiscard]] std::string comparison_table(const std::vector<ComparisonEntry>& ranked);

[[nodiscard]] Json diagnostics_to_json(const DiagnosticsReport& report);
// Plot data for d_j^2, r_i^2, z and Q-Q pairs.
void write_diagnostics_csv(const DiagnosticsReport& report, const Dataset& data,
                           const std::filesystem::path& dir);
void write_diagnostics_svg(const DiagnosticsReport& report, const std::filesystem::path& dir);

// INI scenario: [scenario] name, family, fit_family, locations, times,
// replications, seed, locations_file; [truth] B, Sigma, sigma_s2, phi_s, nu,
// rho; [structure] kind, mask, blocks, intercept, interactions, powers;
// [fit] max_iter, tol, ridge_lambda, score_tol, init, jitter, bic_n.
// Relative paths resolve against the scenario file's directory.
[[nodiscard]] SimulationScenario load_scenario(const std::filesystem::path& path);

[[nodiscard]] Json study_summary_to_json(const SimulationScenario& scenario,
                                         const StudyResult& result);
// One row per replication.
[[nodiscard]] std::string study_records_csv(const StudyResult& result);
// Long format: scenario,quantity,replication,value.
[[nodiscard]] std::string study_boxplot_csv(const StudyResult& result);

}  // namespace stmvr::io
