#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace stmvr {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct Location {
    std::string id;
    double x = 0.0;
    double y = 0.0;
};

// Locations and time points of a space-time design.
//
// Columns of Y and X are ordered location-major with time varying fastest:
// column j (0-based) holds location j / T at time position j % T. This is the
// only ordering under which the column covariance equals Psi_sp (x) Psi_tp.
// AR(1) lags are computed from time positions, never from the labels.
class SpaceTimeLayout {
public:
    SpaceTimeLayout(std::vector<Location> locations, std::vector<std::string> time_labels);

    // Times labelled "1".."T".
    [[nodiscard]] static SpaceTimeLayout with_time_count(std::vector<Location> locations,
                                                         std::size_t num_times);

    [[nodiscard]] std::size_t num_locations() const noexcept { return locations_.size(); }
    [[nodiscard]] std::size_t num_times() const noexcept { return times_.size(); }
    [[nodiscard]] std::size_t num_columns() const noexcept {
        return locations_.size() * times_.size();
    }

    [[nodiscard]] const std::vector<Location>& locations() const noexcept { return locations_; }
    [[nodiscard]] const std::vector<std::string>& time_labels() const noexcept { return times_; }

    // 0-based (location, time) -> column.
    [[nodiscard]] std::size_t column_index(std::size_t location, std::size_t time) const;
    // Inverse of column_index.
    [[nodiscard]] std::pair<std::size_t, std::size_t> location_time(std::size_t column) const;

    // L x L Euclidean distances between locations.
    [[nodiscard]] MatrixXd distance_matrix() const;

private:
    std::vector<Location> locations_;
    std::vector<std::string> times_;
};

// Response Y (p x r), covariates X (q x r) sharing one layout.
struct Dataset {
    MatrixXd y;
    MatrixXd x;
    SpaceTimeLayout layout;
    std::vector<std::string> response_names;
    std::vector<std::string> covariate_names;

    Dataset(MatrixXd y_in, MatrixXd x_in, SpaceTimeLayout layout_in,
            std::vector<std::string> responses = {}, std::vector<std::string> covariates = {});

    [[nodiscard]] std::size_t num_responses() const noexcept {
        return static_cast<std::size_t>(y.rows());
    }
    [[nodiscard]] std::size_t num_covariates() const noexcept {
        return static_cast<std::size_t>(x.rows());
    }
    [[nodiscard]] std::size_t num_columns() const noexcept {
        return static_cast<std::size_t>(y.cols());
    }
};

// Derived covariate rows. Indices are 0-based rows of the original X.
struct AugmentationRules {
    bool intercept = false;
    std::vector<std::pair<std::size_t, std::size_t>> interactions;
    std::vector<std::pair<std::size_t, int>> powers;  // (row, degree >= 2)

    [[nodiscard]] bool empty() const noexcept {
        return !intercept && interactions.empty() && powers.empty();
    }
    // Number of rows appended to X.
    [[nodiscard]] std::size_t derived_count() const noexcept {
        return (intercept ? 1 : 0) + interactions.size() + powers.size();
    }
};

enum class StructureKind { Identity, Diagonal, Dense, Sparse, Block };

[[nodiscard]] std::string_view to_string(StructureKind kind);

// Inclusive 0-based index range.
struct IndexRange {
    std::size_t first = 0;
    std::size_t last = 0;
    [[nodiscard]] std::size_t size() const noexcept { return last - first + 1; }
    [[nodiscard]] bool contains(std::size_t i) const noexcept { return i >= first && i <= last; }
};

struct CoefficientBlock {
    IndexRange rows;
    IndexRange cols;
};

// Which entries of B are free. Sparse masks are p x q with true = free.
// Block ranges refer to columns of the augmented covariate matrix.
class CoefficientStructure {
public:
    [[nodiscard]] static CoefficientStructure identity();
    [[nodiscard]] static CoefficientStructure diagonal();
    [[nodiscard]] static CoefficientStructure dense();
    [[nodiscard]] static CoefficientStructure sparse(BoolMatrix mask);
    [[nodiscard]] static CoefficientStructure block(std::vector<CoefficientBlock> blocks);

    [[nodiscard]] StructureKind kind() const noexcept { return kind_; }
    [[nodiscard]] const BoolMatrix& mask() const noexcept { return mask_; }
    [[nodiscard]] const std::vector<CoefficientBlock>& blocks() const noexcept { return blocks_; }
    [[nodiscard]] const AugmentationRules& augmentation() const noexcept { return augmentation_; }

    [[nodiscard]] CoefficientStructure with_augmentation(AugmentationRules rules) const;

    // Throws std::invalid_argument when incompatible with a p x q coefficient matrix.
    void validate(std::size_t p, std::size_t q) const;

    // p x q free-entry pattern (Identity has none).
    [[nodiscard]] BoolMatrix free_mask(std::size_t p, std::size_t q) const;
    [[nodiscard]] std::size_t free_parameter_count(std::size_t p, std::size_t q) const;

private:
    StructureKind kind_ = StructureKind::Dense;
    BoolMatrix mask_;
    std::vector<CoefficientBlock> blocks_;
    AugmentationRules augmentation_;
};

struct AugmentedCovariates {
    MatrixXd x;
    CoefficientStructure structure;  // rules cleared, mask widened
};

// Stacks original rows, the intercept row, interactions (lexicographic
// pairs), then powers (ascending degree, then row). A sparse mask given for
// the original q columns is widened with the derived columns free in every
// response row.
[[nodiscard]] AugmentedCovariates augment_covariates(const MatrixXd& x,
                                                     const CoefficientStructure& structure);

// Row labels of the augmented matrix, in the same order: "(intercept)",
// "a*b" and "a^d".
[[nodiscard]] std::vector<std::string> augmented_covariate_names(
    const std::vector<std::string>& names, const AugmentationRules& rules);

enum class SpatialFamily { Exponential, Gaussian, Cubic, Spherical, Matern };

inline constexpr SpatialFamily kAllSpatialFamilies[] = {
    SpatialFamily::Exponential, SpatialFamily::Gaussian, SpatialFamily::Cubic,
    SpatialFamily::Spherical, SpatialFamily::Matern};

[[nodiscard]] std::string_view to_string(SpatialFamily family);
[[nodiscard]] std::string_view display_name(SpatialFamily family);
// Case-insensitive; throws std::invalid_argument for unknown names.
[[nodiscard]] SpatialFamily parse_spatial_family(std::string_view name);

// Psi_sp = sigma_s2 * R_sp(phi_s, nu), Psi_tp = R_tp(rho). The temporal
// variance is fixed at one, so it is not stored.
struct CovarianceParams {
    double sigma_s2 = 1.0;
    double phi_s = 1.0;
    std::optional<double> nu;
    double rho = 0.0;

    void validate(SpatialFamily family) const;
    // Number of free covariance parameters (sigma_s2, phi_s, rho, nu iff Matern).
    [[nodiscard]] static std::size_t count(SpatialFamily family) noexcept;
};

struct CovarianceSpec {
    SpatialFamily spatial_family = SpatialFamily::Exponential;
    CovarianceParams params;
};

struct FittedModel {
    CoefficientStructure structure;   // as fitted (after augmentation)
    AugmentationRules augmentation;   // rules applied to X before fitting
    MatrixXd b_hat;
    MatrixXd sigma_hat;
    SpatialFamily family = SpatialFamily::Exponential;
    CovarianceParams cov_params;
    double log_lik = 0.0;
    double bic = 0.0;
    std::size_t num_params = 0;
    std::size_t num_iter = 0;
    bool converged = false;
    std::vector<double> trace;
    std::vector<std::string> boundary_flags;
};

struct DiagnosticsReport {
    MatrixXd e_star;
    VectorXd d_sq;
    VectorXd r_sq;
    MatrixXd z;
    double global_stat = 0.0;

    double column_level = 0.975;
    double column_threshold = 0.0;  // chi2_p quantile
    double row_level = 0.975;
    double row_threshold = 0.0;     // chi2_r quantile
    double cell_threshold = 1.96;
    double global_lower = 0.0;      // central 99% chi2_{pr} interval
    double global_upper = 0.0;

    std::vector<std::size_t> column_flags;
    std::vector<std::size_t> row_flags;
    std::vector<std::pair<std::size_t, std::size_t>> cell_flags;
};

}  // namespace stmvr
