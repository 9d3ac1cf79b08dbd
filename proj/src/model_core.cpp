#include "stmvr/model_core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace stmvr {

namespace {

std::string lowercase(std::string_view s) {
    std::string out(s);
    for (auto& ch : out) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

}  // namespace

SpaceTimeLayout::SpaceTimeLayout(std::vector<Location> locations,
                                 std::vector<std::string> time_labels)
    : locations_(std::move(locations)), times_(std::move(time_labels)) {
    if (locations_.empty()) {
        throw std::invalid_argument("layout needs at least one location");
    }
    if (times_.empty()) {
        throw std::invalid_argument("layout needs at least one time point");
    }
    std::unordered_set<std::string> seen;
    for (const auto& loc : locations_) {
        if (!std::isfinite(loc.x) || !std::isfinite(loc.y)) {
            throw std::invalid_argument("location '" + loc.id + "' has non-finite coordinates");
        }
        if (!seen.insert(loc.id).second) {
            throw std::invalid_argument("duplicate location id '" + loc.id + "'");
        }
    }
}

SpaceTimeLayout SpaceTimeLayout::with_time_count(std::vector<Location> locations,
                                                 std::size_t num_times) {
    std::vector<std::string> labels;
    labels.reserve(num_times);
    for (std::size_t t = 0; t < num_times; ++t) {
        labels.push_back(std::to_string(t + 1));
    }
    return SpaceTimeLayout(std::move(locations), std::move(labels));
}

std::size_t SpaceTimeLayout::column_index(std::size_t location, std::size_t time) const {
    if (location >= num_locations() || time >= num_times()) {
        throw std::out_of_range("(location, time) = (" + std::to_string(location) + ", " +
                                std::to_string(time) + ") outside layout " +
                                std::to_string(num_locations()) + " x " +
                                std::to_string(num_times()));
    }
    return location * num_times() + time;
}

std::pair<std::size_t, std::size_t> SpaceTimeLayout::location_time(std::size_t column) const {
    if (column >= num_columns()) {
        throw std::out_of_range("column " + std::to_string(column) + " outside layout with " +
                                std::to_string(num_columns()) + " columns");
    }
    return {column / num_times(), column % num_times()};
}

MatrixXd SpaceTimeLayout::distance_matrix() const {
    const auto n = static_cast<Eigen::Index>(num_locations());
    MatrixXd h = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const auto& a = locations_[static_cast<std::size_t>(i)];
            const auto& b = locations_[static_cast<std::size_t>(j)];
            h(i, j) = h(j, i) = std::hypot(a.x - b.x, a.y - b.y);
        }
    }
    return h;
}

Dataset::Dataset(MatrixXd y_in, MatrixXd x_in, SpaceTimeLayout layout_in,
                 std::vector<std::string> responses, std::vector<std::string> covariates)
    : y(std::move(y_in)),
      x(std::move(x_in)),
      layout(std::move(layout_in)),
      response_names(std::move(responses)),
      covariate_names(std::move(covariates)) {
    const auto r = static_cast<Eigen::Index>(layout.num_columns());
    if (y.rows() < 1 || x.rows() < 1) {
        throw std::invalid_argument("dataset needs p >= 1 responses and q >= 1 covariates");
    }
    if (y.cols() != r || x.cols() != r) {
        throw std::invalid_argument("Y has " + std::to_string(y.cols()) + " columns and X has " +
                                    std::to_string(x.cols()) + ", layout requires " +
                                    std::to_string(r));
    }
    if (!y.allFinite() || !x.allFinite()) {
        throw std::invalid_argument("dataset contains non-finite values");
    }
    if (response_names.empty()) {
        for (Eigen::Index i = 0; i < y.rows(); ++i) response_names.push_back("y" + std::to_string(i + 1));
    }
    if (covariate_names.empty()) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) covariate_names.push_back("x" + std::to_string(i + 1));
    }
    if (response_names.size() != static_cast<std::size_t>(y.rows()) ||
        covariate_names.size() != static_cast<std::size_t>(x.rows())) {
        throw std::invalid_argument("row names do not match matrix dimensions");
    }
}

std::string_view to_string(StructureKind kind) {
    switch (kind) {
        case StructureKind::Identity: return "identity";
        case StructureKind::Diagonal: return "diagonal";
        case StructureKind::Dense: return "dense";
        case StructureKind::Sparse: return "sparse";
        case StructureKind::Block: return "block";
    }
    return "unknown";
}

CoefficientStructure CoefficientStructure::identity() {
    CoefficientStructure s;
    s.kind_ = StructureKind::Identity;
    return s;
}

CoefficientStructure CoefficientStructure::diagonal() {
    CoefficientStructure s;
    s.kind_ = StructureKind::Diagonal;
    return s;
}

CoefficientStructure CoefficientStructure::dense() { return {}; }

CoefficientStructure CoefficientStructure::sparse(BoolMatrix mask) {
    if (mask.size() == 0 || mask.count() == 0) {
        throw std::invalid_argument("sparse mask needs at least one free entry");
    }
    CoefficientStructure s;
    s.kind_ = StructureKind::Sparse;
    s.mask_ = std::move(mask);
    return s;
}

CoefficientStructure CoefficientStructure::block(std::vector<CoefficientBlock> blocks) {
    if (blocks.empty()) {
        throw std::invalid_argument("block structure needs at least one block");
    }
    for (const auto& b : blocks) {
        if (b.rows.first > b.rows.last || b.cols.first > b.cols.last) {
            throw std::invalid_argument("block range with first > last");
        }
    }
    CoefficientStructure s;
    s.kind_ = StructureKind::Block;
    s.blocks_ = std::move(blocks);
    return s;
}

CoefficientStructure CoefficientStructure::with_augmentation(AugmentationRules rules) const {
    CoefficientStructure s = *this;
    s.augmentation_ = std::move(rules);
    return s;
}

void CoefficientStructure::validate(std::size_t p, std::size_t q) const {
    switch (kind_) {
        case StructureKind::Identity:
        case StructureKind::Diagonal:
            if (p != q) {
                throw std::invalid_argument(std::string(to_string(kind_)) +
                                            " structure requires p == q (p=" + std::to_string(p) +
                                            ", q=" + std::to_string(q) + ")");
            }
            break;
        case StructureKind::Dense:
            break;
        case StructureKind::Sparse:
            if (static_cast<std::size_t>(mask_.rows()) != p ||
                static_cast<std::size_t>(mask_.cols()) != q) {
                throw std::invalid_argument("sparse mask is " + std::to_string(mask_.rows()) + "x" +
                                            std::to_string(mask_.cols()) + ", expected " +
                                            std::to_string(p) + "x" + std::to_string(q));
            }
            break;
        case StructureKind::Block: {
            std::vector<int> row_owner(p, -1);
            std::vector<int> col_owner(q, -1);
            for (std::size_t b = 0; b < blocks_.size(); ++b) {
                const auto& blk = blocks_[b];
                if (blk.rows.last >= p || blk.cols.last >= q) {
                    throw std::invalid_argument("block " + std::to_string(b + 1) +
                                                " exceeds the " + std::to_string(p) + "x" +
                                                std::to_string(q) + " coefficient matrix");
                }
                for (auto i = blk.rows.first; i <= blk.rows.last; ++i) {
                    if (row_owner[i] >= 0) {
                        throw std::invalid_argument("blocks overlap in row " + std::to_string(i + 1));
                    }
                    row_owner[i] = static_cast<int>(b);
                }
                for (auto j = blk.cols.first; j <= blk.cols.last; ++j) {
                    if (col_owner[j] >= 0) {
                        throw std::invalid_argument("blocks overlap in column " +
                                                    std::to_string(j + 1));
                    }
                    col_owner[j] = static_cast<int>(b);
                }
            }
            for (std::size_t i = 0; i < p; ++i) {
                if (row_owner[i] < 0) {
                    throw std::invalid_argument("block rows do not cover response row " +
                                                std::to_string(i + 1));
                }
            }
            break;
        }
    }
}

BoolMatrix CoefficientStructure::free_mask(std::size_t p, std::size_t q) const {
    validate(p, q);
    const auto rows = static_cast<Eigen::Index>(p);
    const auto cols = static_cast<Eigen::Index>(q);
    BoolMatrix m = BoolMatrix::Constant(rows, cols, false);
    switch (kind_) {
        case StructureKind::Identity:
            break;
        case StructureKind::Diagonal:
            for (Eigen::Index i = 0; i < rows; ++i) m(i, i) = true;
            break;
        case StructureKind::Dense:
            m.setConstant(true);
            break;
        case StructureKind::Sparse:
            m = mask_;
            break;
        case StructureKind::Block:
            for (const auto& blk : blocks_) {
                m.block(static_cast<Eigen::Index>(blk.rows.first),
                        static_cast<Eigen::Index>(blk.cols.first),
                        static_cast<Eigen::Index>(blk.rows.size()),
                        static_cast<Eigen::Index>(blk.cols.size()))
                    .setConstant(true);
            }
            break;
    }
    return m;
}

std::size_t CoefficientStructure::free_parameter_count(std::size_t p, std::size_t q) const {
    return static_cast<std::size_t>(free_mask(p, q).count());
}

AugmentedCovariates augment_covariates(const MatrixXd& x, const CoefficientStructure& structure) {
    const auto& rules = structure.augmentation();
    const auto q = static_cast<std::size_t>(x.rows());
    if (rules.empty()) {
        return {x, structure};
    }

    std::set<std::pair<std::size_t, std::size_t>> interactions;
    for (auto [a, b] : rules.interactions) {
        if (a >= q || b >= q) {
            throw std::invalid_argument("interaction references covariate outside 1.." +
                                        std::to_string(q));
        }
        if (a == b) {
            throw std::invalid_argument("interaction of a covariate with itself; use a power rule");
        }
        if (!interactions.emplace(std::min(a, b), std::max(a, b)).second) {
            throw std::invalid_argument("duplicate interaction rule (" + std::to_string(a + 1) +
                                        ", " + std::to_string(b + 1) + ")");
        }
    }
    std::vector<std::pair<int, std::size_t>> powers;  // (degree, row)
    std::set<std::pair<std::size_t, int>> seen_powers;
    for (auto [row, degree] : rules.powers) {
        if (row >= q) {
            throw std::invalid_argument("power rule references covariate outside 1.." +
                                        std::to_string(q));
        }
        if (degree < 2) {
            throw std::invalid_argument("power rule degree must be >= 2");
        }
        if (!seen_powers.emplace(row, degree).second) {
            throw std::invalid_argument("duplicate power rule (" + std::to_string(row + 1) + ", " +
                                        std::to_string(degree) + ")");
        }
        powers.emplace_back(degree, row);
    }
    std::sort(powers.begin(), powers.end());

    const auto extra = static_cast<Eigen::Index>(rules.derived_count());
    MatrixXd out(x.rows() + extra, x.cols());
    out.topRows(x.rows()) = x;
    Eigen::Index next = x.rows();
    if (rules.intercept) out.row(next++).setOnes();
    for (auto [a, b] : interactions) {
        out.row(next++) = x.row(static_cast<Eigen::Index>(a)).cwiseProduct(
            x.row(static_cast<Eigen::Index>(b)));
    }
    for (auto [degree, row] : powers) {
        out.row(next++) = x.row(static_cast<Eigen::Index>(row)).array().pow(degree).matrix();
    }

    CoefficientStructure expanded = structure.with_augmentation({});
    if (structure.kind() == StructureKind::Sparse &&
        static_cast<std::size_t>(structure.mask().cols()) == q) {
        BoolMatrix widened = BoolMatrix::Constant(structure.mask().rows(), out.rows(), true);
        widened.leftCols(x.rows()) = structure.mask();
        expanded = CoefficientStructure::sparse(std::move(widened));
    }
    return {std::move(out), std::move(expanded)};
}

std::vector<std::string> augmented_covariate_names(const std::vector<std::string>& names,
                                                   const AugmentationRules& rules) {
    std::vector<std::string> out = names;
    if (rules.intercept) out.emplace_back("(intercept)");
    std::set<std::pair<std::size_t, std::size_t>> interactions;
    for (auto [a, b] : rules.interactions) interactions.emplace(std::min(a, b), std::max(a, b));
    for (auto [a, b] : interactions) out.push_back(names.at(a) + "*" + names.at(b));
    std::vector<std::pair<int, std::size_t>> powers;
    for (auto [row, degree] : rules.powers) powers.emplace_back(degree, row);
    std::sort(powers.begin(), powers.end());
    for (auto [degree, row] : powers) out.push_back(names.at(row) + "^" + std::to_string(degree));
    return out;
}

std::string_view to_string(SpatialFamily family) {
    switch (family) {
        case SpatialFamily::Exponential: return "exponential";
        case SpatialFamily::Gaussian: return "gaussian";
        case SpatialFamily::Cubic: return "cubic";
        case SpatialFamily::Spherical: return "spherical";
        case SpatialFamily::Matern: return "matern";
    }
    return "unknown";
}

std::string_view display_name(SpatialFamily family) {
    switch (family) {
        case SpatialFamily::Exponential: return "Exponential";
        case SpatialFamily::Gaussian: return "Gaussian";
        case SpatialFamily::Cubic: return "Cubic";
        case SpatialFamily::Spherical: return "Spherical";
        case SpatialFamily::Matern: return "Matern";
    }
    return "Unknown";
}

SpatialFamily parse_spatial_family(std::string_view name) {
    const auto n = lowercase(name);
    for (auto f : kAllSpatialFamilies) {
        if (n == to_string(f)) return f;
    }
    if (n == "exp") return SpatialFamily::Exponential;
    if (n == "gau" || n == "gauss") return SpatialFamily::Gaussian;
    if (n == "sph") return SpatialFamily::Spherical;
    throw std::invalid_argument("unknown spatial family '" + std::string(name) + "'");
}

void CovarianceParams::validate(SpatialFamily family) const {
    if (!(sigma_s2 > 0.0) || !std::isfinite(sigma_s2)) {
        throw std::invalid_argument("sigma_s2 must be positive and finite");
    }
    if (!(phi_s > 0.0) || !std::isfinite(phi_s)) {
        throw std::invalid_argument("phi_s must be positive and finite");
    }
    if (!(std::abs(rho) < 1.0)) {
        throw std::invalid_argument("rho must satisfy |rho| < 1");
    }
    if (family == SpatialFamily::Matern) {
        if (!nu || !(*nu > 0.0) || !std::isfinite(*nu)) {
            throw std::invalid_argument("Matern family requires nu > 0");
        }
    } else if (nu) {
        throw std::invalid_argument("nu is only defined for the Matern family");
    }
}

std::size_t CovarianceParams::count(SpatialFamily family) noexcept {
    return family == SpatialFamily::Matern ? 4 : 3;
}

}  // namespace stmvr
