#include "stmvr/io.hpp"

#include "stmvr/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace stmvr::io {

namespace fs = std::filesystem;

std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

bool is_scalar(const Json& j) { return !j.is_object() && !j.is_array(); }

void dump_into(const Json& j, std::string& out, int depth) {
    const std::string pad(static_cast<std::size_t>(2 * (depth + 1)), ' ');
    const std::string close_pad(static_cast<std::size_t>(2 * depth), ' ');
    switch (j.type()) {
        case Json::value_t::number_float: {
            const double v = j.get<double>();
            out += std::isfinite(v) ? format_real(v) : "null";
            return;
        }
        case Json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ",\n";
                first = false;
                out += pad + Json(it.key()).dump() + ": ";
                dump_into(it.value(), out, depth + 1);
            }
            out += "\n" + close_pad + "}";
            return;
        }
        case Json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            if (std::all_of(j.begin(), j.end(), is_scalar)) {
                out += "[";
                for (std::size_t i = 0; i < j.size(); ++i) {
                    if (i) out += ", ";
                    dump_into(j[i], out, depth + 1);
                }
                out += "]";
                return;
            }
            out += "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) out += ",\n";
                out += pad;
                dump_into(j[i], out, depth + 1);
            }
            out += "\n" + close_pad + "]";
            return;
        }
        default:
            out += j.dump();
    }
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::optional<double> to_double(const std::string& s) {
    double v = 0.0;
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
    return v;
}

std::size_t to_index(const std::string& s, const std::string& what) {
    std::size_t v = 0;
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || s.empty()) {
        throw DataError("invalid " + what + " '" + s + "'");
    }
    return v;
}

struct CsvRow {
    std::size_t line = 0;
    std::vector<std::string> fields;
};

// Rows after the (exactly matched) header; blank lines skipped.
std::vector<CsvRow> read_csv(const fs::path& path, const std::string& header) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t n = 0;
    bool have_header = false;
    std::vector<CsvRow> rows;
    const auto width = split(header, ',').size();
    while (std::getline(in, line)) {
        ++n;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (!have_header) {
            std::string h = t;
            if (h.size() >= 3 && h.compare(0, 3, "\xEF\xBB\xBF") == 0) h.erase(0, 3);
            if (h != header) {
                throw DataError(path.filename().string() + ": expected header '" + header +
                                "', found '" + h + "'");
            }
            have_header = true;
            continue;
        }
        auto fields = split(t, ',');
        if (fields.size() != width) {
            throw DataError(path.filename().string() + ":" + std::to_string(n) + ": expected " +
                            std::to_string(width) + " fields, found " +
                            std::to_string(fields.size()));
        }
        rows.push_back({n, std::move(fields)});
    }
    if (!have_header) throw DataError(path.filename().string() + ": empty file");
    return rows;
}

struct LongTable {
    std::vector<std::string> names;  // first appearance
    std::vector<std::string> times;  // first appearance
    std::map<std::tuple<std::string, std::string, std::string>, double> values;
};

LongTable read_long(const fs::path& path, const std::string& first_column,
                    const std::unordered_map<std::string, std::size_t>& location_index) {
    LongTable t;
    std::set<std::string> names;
    std::set<std::string> times;
    const std::string header = first_column + ",location_id,time,value";
    const std::string file = path.filename().string();
    for (auto& row : read_csv(path, header)) {
        const auto& name = row.fields[0];
        const auto& loc = row.fields[1];
        const auto& time = row.fields[2];
        const std::string where = file + ":" + std::to_string(row.line);
        if (name.empty() || time.empty()) throw DataError(where + ": empty " + first_column + " or time");
        if (!location_index.count(loc)) throw DataError(where + ": unknown location id '" + loc + "'");
        const auto value = to_double(row.fields[3]);
        if (!value || !std::isfinite(*value)) {
            throw DataError(where + ": non-numeric value '" + row.fields[3] + "'");
        }
        if (!t.values.emplace(std::make_tuple(name, loc, time), *value).second) {
            throw DataError(where + ": duplicate row for (" + name + ", " + loc + ", " + time + ")");
        }
        if (names.insert(name).second) t.names.push_back(name);
        if (times.insert(time).second) t.times.push_back(time);
    }
    if (t.values.empty()) throw DataError(file + ": no data rows");
    return t;
}

std::vector<std::string> resolve_order(const std::vector<std::string>& seen,
                                       const std::vector<std::string>& requested,
                                       const std::string& what) {
    if (requested.empty()) return seen;
    std::set<std::string> a(seen.begin(), seen.end());
    std::set<std::string> b(requested.begin(), requested.end());
    if (a != b || b.size() != requested.size()) {
        throw DataError("requested " + what + " order does not match the " + what + "s in the file");
    }
    return requested;
}

MatrixXd assemble(const LongTable& t, const std::vector<std::string>& names,
                  const std::vector<Location>& locations, const std::vector<std::string>& times,
                  const std::string& file, const std::string& what) {
    const auto nt = times.size();
    MatrixXd m(static_cast<Eigen::Index>(names.size()),
               static_cast<Eigen::Index>(locations.size() * nt));
    for (std::size_t i = 0; i < names.size(); ++i) {
        for (std::size_t l = 0; l < locations.size(); ++l) {
            for (std::size_t k = 0; k < nt; ++k) {
                const auto it = t.values.find({names[i], locations[l].id, times[k]});
                if (it == t.values.end()) {
                    throw DataError(file + ": missing " + what + " '" + names[i] + "' at location '" +
                                    locations[l].id + "', time '" + times[k] + "'");
                }
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l * nt + k)) = it->second;
            }
        }
    }
    return m;
}

}  // namespace

std::string dump_json(const Json& value) {
    std::string out;
    dump_into(value, out, 0);
    out += "\n";
    return out;
}

void write_json(const fs::path& path, const Json& value) { write_text(path, dump_json(value)); }

Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.filename().string() + ": invalid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    auto out = open_output(path);
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

std::vector<Location> load_locations(const fs::path& path) {
    std::vector<Location> out;
    std::set<std::string> ids;
    const std::string file = path.filename().string();
    for (auto& row : read_csv(path, "id,x,y")) {
        const std::string where = file + ":" + std::to_string(row.line);
        const auto x = to_double(row.fields[1]);
        const auto y = to_double(row.fields[2]);
        if (row.fields[0].empty()) throw DataError(where + ": empty location id");
        if (!x || !y || !std::isfinite(*x) || !std::isfinite(*y)) {
            throw DataError(where + ": non-numeric coordinate");
        }
        if (!ids.insert(row.fields[0]).second) {
            throw DataError(where + ": duplicate location id '" + row.fields[0] + "'");
        }
        out.push_back({row.fields[0], *x, *y});
    }
    if (out.empty()) throw DataError(file + ": no locations");
    return out;
}

Dataset load_dataset(const fs::path& y_path, const fs::path& x_path, const fs::path& locations_path,
                     const LoadOptions& options) {
    auto locations = load_locations(locations_path);
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < locations.size(); ++i) index[locations[i].id] = i;

    const LongTable ty = read_long(y_path, "variable", index);
    const LongTable tx = read_long(x_path, "covariate", index);

    std::vector<std::string> times = ty.times;
    {
        std::set<std::string> a(ty.times.begin(), ty.times.end());
        std::set<std::string> b(tx.times.begin(), tx.times.end());
        if (a != b) throw DataError("response and covariate files list different time labels");
    }
    const bool numeric = std::all_of(times.begin(), times.end(),
                                     [](const std::string& s) { return to_double(s).has_value(); });
    if (numeric) {
        std::stable_sort(times.begin(), times.end(), [](const std::string& a, const std::string& b) {
            return *to_double(a) < *to_double(b);
        });
    }
    const auto responses = resolve_order(ty.names, options.response_order, "variable");
    const auto covariates = resolve_order(tx.names, options.covariate_order, "covariate");
    MatrixXd y = assemble(ty, responses, locations, times, y_path.filename().string(), "variable");
    MatrixXd x = assemble(tx, covariates, locations, times, x_path.filename().string(), "covariate");
    const std::size_t expected_y = responses.size() * locations.size() * times.size();
    if (ty.values.size() != expected_y) {
        throw DataError(y_path.filename().string() + ": contains rows outside the variable x location x time grid");
    }
    try {
        return Dataset(std::move(y), std::move(x), SpaceTimeLayout(std::move(locations), std::move(times)),
                       responses, covariates);
    } catch (const std::invalid_argument& e) {
        throw DataError(e.what());
    }
}

void write_dataset(const Dataset& data, const fs::path& dir) {
    fs::create_directories(dir);
    const auto& layout = data.layout;
    std::ostringstream loc;
    loc << "id,x,y\n";
    for (const auto& l : layout.locations()) loc << l.id << ',' << format_real(l.x) << ',' << format_real(l.y) << '\n';
    write_text(dir / "locations.csv", loc.str());
    auto long_form = [&](const MatrixXd& m, const std::vector<std::string>& names, const char* head) {
        std::ostringstream os;
        os << head << ",location_id,time,value\n";
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < layout.num_columns(); ++j) {
                const auto [l, t] = layout.location_time(j);
                os << names[static_cast<std::size_t>(i)] << ',' << layout.locations()[l].id << ','
                   << layout.time_labels()[t] << ',' << format_real(m(i, static_cast<Eigen::Index>(j)))
                   << '\n';
            }
        }
        return os.str();
    };
    write_text(dir / "y.csv", long_form(data.y, data.response_names, "variable"));
    write_text(dir / "x.csv", long_form(data.x, data.covariate_names, "covariate"));
}

std::map<std::string, double> parse_scale_map(const std::string& spec) {
    std::map<std::string, double> out;
    if (trim(spec).empty()) return out;
    for (const auto& item : split(spec, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw DataError("scale map entry '" + item + "' lacks '='");
        const std::string name = trim(item.substr(0, eq));
        const auto v = to_double(trim(item.substr(eq + 1)));
        if (name.empty() || !v || !(*v > 0.0) || !std::isfinite(*v)) {
            throw DataError("invalid scale map entry '" + item + "'");
        }
        out[name] = *v;
    }
    return out;
}

void apply_scale_map(Dataset& data, const std::map<std::string, double>& scales) {
    for (const auto& [name, divisor] : scales) {
        bool found = false;
        for (std::size_t i = 0; i < data.response_names.size(); ++i) {
            if (data.response_names[i] == name) {
                data.y.row(static_cast<Eigen::Index>(i)) /= divisor;
                found = true;
            }
        }
        for (std::size_t i = 0; i < data.covariate_names.size(); ++i) {
            if (data.covariate_names[i] == name) {
                data.x.row(static_cast<Eigen::Index>(i)) /= divisor;
                found = true;
            }
        }
        if (!found) throw DataError("scale map names unknown row '" + name + "'");
    }
}

BoolMatrix parse_mask(const std::string& text) {
    std::vector<std::vector<bool>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        for (auto& part : split(line, ';')) {
            if (part.empty()) continue;
            std::vector<bool> row;
            for (const auto& f : split(part, ',')) {
                if (f != "0" && f != "1") {
                    throw DataError("mask line " + std::to_string(n) + ": entries must be 0 or 1, found '" + f + "'");
                }
                row.push_back(f == "1");
            }
            if (!rows.empty() && row.size() != rows.front().size()) {
                throw DataError("mask line " + std::to_string(n) + ": ragged row");
            }
            rows.push_back(std::move(row));
        }
    }
    if (rows.empty()) throw DataError("mask is empty");
    BoolMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return m;
}

BoolMatrix load_mask(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_mask(ss.str());
}

namespace {

IndexRange parse_range(const std::string& s) {
    const auto dash = s.find('-');
    const std::size_t a = to_index(trim(s.substr(0, dash)), "block range");
    const std::size_t b = dash == std::string::npos ? a : to_index(trim(s.substr(dash + 1)), "block range");
    if (a < 1 || b < a) throw DataError("block range '" + s + "' must be 1-based with first <= last");
    return {a - 1, b - 1};
}

std::pair<std::size_t, std::size_t> parse_pair(const std::string& spec, const std::string& what) {
    const auto parts = split(spec, ':');
    if (parts.size() != 2) throw DataError(what + " must be 'a:b', found '" + spec + "'");
    return {to_index(parts[0], what), to_index(parts[1], what)};
}

}  // namespace

std::vector<CoefficientBlock> parse_blocks(const std::string& spec) {
    std::vector<CoefficientBlock> out;
    for (const auto& item : split(spec, ';')) {
        if (item.empty()) continue;
        const auto parts = split(item, ':');
        if (parts.size() != 2) throw DataError("block '" + item + "' must be 'rows:cols'");
        out.push_back({parse_range(parts[0]), parse_range(parts[1])});
    }
    if (out.empty()) throw DataError("no blocks given");
    return out;
}

std::pair<std::size_t, std::size_t> parse_interaction(const std::string& spec) {
    const auto [a, b] = parse_pair(spec, "interaction");
    if (a < 1 || b < 1) throw DataError("interaction indices are 1-based");
    return {a - 1, b - 1};
}

std::pair<std::size_t, int> parse_power(const std::string& spec) {
    const auto [row, degree] = parse_pair(spec, "power");
    if (row < 1) throw DataError("power row index is 1-based");
    return {row - 1, static_cast<int>(degree)};
}

MatrixXd parse_matrix(const std::string& spec) {
    std::vector<std::vector<double>> rows;
    for (const auto& r : split(spec, ';')) {
        if (r.empty()) continue;
        std::vector<double> row;
        for (const auto& f : split(r, ',')) {
            const auto v = to_double(f);
            if (!v) throw DataError("invalid matrix entry '" + f + "'");
            row.push_back(*v);
        }
        if (!rows.empty() && row.size() != rows.front().size()) throw DataError("ragged matrix '" + spec + "'");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("empty matrix");
    MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return m;
}

CoefficientStructure build_structure(const StructureSpec& spec) {
    CoefficientStructure s;
    if (spec.kind == "identity") s = CoefficientStructure::identity();
    else if (spec.kind == "diagonal") s = CoefficientStructure::diagonal();
    else if (spec.kind == "dense") s = CoefficientStructure::dense();
    else if (spec.kind == "sparse") {
        if (!spec.mask) throw DataError("sparse structure requires a mask");
        s = CoefficientStructure::sparse(*spec.mask);
    } else if (spec.kind == "block") {
        if (spec.blocks.empty()) throw DataError("block structure requires blocks");
        s = CoefficientStructure::block(spec.blocks);
    } else {
        throw DataError("unknown structure '" + spec.kind + "'");
    }
    return s.with_augmentation(spec.augmentation);
}

InitPolicy parse_init_policy(const std::string& name) {
    if (name == "data") return InitPolicy::DataDriven;
    if (name == "neutral") return InitPolicy::Neutral;
    throw DataError("unknown init policy '" + name + "' (data, neutral)");
}

BicSampleSize parse_bic_sample_size(const std::string& name) {
    if (name == "cells") return BicSampleSize::Cells;
    if (name == "columns") return BicSampleSize::Columns;
    throw DataError("unknown BIC sample size '" + name + "' (cells, columns)");
}

Json matrix_to_json(const MatrixXd& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

MatrixXd matrix_from_json(const Json& j) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw DataError("matrix must be a non-empty array of rows");
    MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != j[0].size()) throw DataError("ragged matrix in JSON");
        for (std::size_t k = 0; k < j[i].size(); ++k) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
        }
    }
    return m;
}

namespace {

Json params_to_json(const CovarianceParams& p) {
    Json j;
    j["sigma_s2"] = p.sigma_s2;
    j["phi_s"] = p.phi_s;
    if (p.nu) j["nu"] = *p.nu;
    j["rho"] = p.rho;
    return j;
}

CovarianceParams params_from_json(const Json& j) {
    CovarianceParams p;
    p.sigma_s2 = j.at("sigma_s2").get<double>();
    p.phi_s = j.at("phi_s").get<double>();
    if (j.contains("nu")) p.nu = j.at("nu").get<double>();
    p.rho = j.at("rho").get<double>();
    return p;
}

Json augmentation_to_json(const AugmentationRules& a) {
    Json j;
    j["intercept"] = a.intercept;
    Json inter = Json::array();
    for (auto [x, y] : a.interactions) inter.push_back(Json::array({x + 1, y + 1}));
    j["interactions"] = inter;
    Json pow = Json::array();
    for (auto [x, d] : a.powers) pow.push_back(Json::array({x + 1, d}));
    j["powers"] = pow;
    return j;
}

AugmentationRules augmentation_from_json(const Json& j) {
    AugmentationRules a;
    a.intercept = j.value("intercept", false);
    for (const auto& e : j.value("interactions", Json::array())) {
        a.interactions.emplace_back(e.at(0).get<std::size_t>() - 1, e.at(1).get<std::size_t>() - 1);
    }
    for (const auto& e : j.value("powers", Json::array())) {
        a.powers.emplace_back(e.at(0).get<std::size_t>() - 1, e.at(1).get<int>());
    }
    return a;
}

Json mask_to_json(const BoolMatrix& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j) ? 1 : 0);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

Json fit_to_json(const FittedModel& model, const Dataset& data) {
    const auto p = static_cast<std::size_t>(model.b_hat.rows());
    const auto q = static_cast<std::size_t>(model.b_hat.cols());
    Json j;
    j["family"] = std::string(to_string(model.family));
    j["structure"] = std::string(to_string(model.structure.kind()));
    j["free_mask"] = mask_to_json(model.structure.free_mask(p, q));
    j["augmentation"] = augmentation_to_json(model.augmentation);
    j["responses"] = data.response_names;
    j["covariates"] = augmented_covariate_names(data.covariate_names, model.augmentation);
    j["num_locations"] = data.layout.num_locations();
    j["num_times"] = data.layout.num_times();
    j["b_hat"] = matrix_to_json(model.b_hat);
    j["sigma_hat"] = matrix_to_json(model.sigma_hat);
    j["cov_params"] = params_to_json(model.cov_params);
    j["log_lik"] = model.log_lik;
    j["bic"] = model.bic;
    j["num_params"] = model.num_params;
    j["iterations"] = model.num_iter;
    j["converged"] = model.converged;
    j["trace"] = model.trace;
    j["boundary_flags"] = model.boundary_flags;
    return j;
}

FittedModel fit_from_json(const Json& j) {
    try {
        FittedModel m;
        m.family = parse_spatial_family(j.at("family").get<std::string>());
        m.b_hat = matrix_from_json(j.at("b_hat"));
        m.sigma_hat = matrix_from_json(j.at("sigma_hat"));
        m.cov_params = params_from_json(j.at("cov_params"));
        m.augmentation = augmentation_from_json(j.at("augmentation"));
        const std::string kind = j.at("structure").get<std::string>();
        if (kind == "identity") m.structure = CoefficientStructure::identity();
        else if (kind == "diagonal") m.structure = CoefficientStructure::diagonal();
        else if (kind == "dense") m.structure = CoefficientStructure::dense();
        else {
            const MatrixXd f = matrix_from_json(j.at("free_mask"));
            m.structure = CoefficientStructure::sparse((f.array() != 0.0).matrix());
        }
        m.log_lik = j.at("log_lik").get<double>();
        m.bic = j.at("bic").get<double>();
        m.num_params = j.value("num_params", std::size_t{0});
        m.num_iter = j.value("iterations", std::size_t{0});
        m.converged = j.value("converged", false);
        m.trace = j.value("trace", std::vector<double>{});
        m.boundary_flags = j.value("boundary_flags", std::vector<std::string>{});
        m.cov_params.validate(m.family);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("fit JSON: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("fit JSON: ") + e.what());
    }
}

std::vector<ComparisonEntry> rank_by_bic(std::vector<ComparisonEntry> entries) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const ComparisonEntry& a, const ComparisonEntry& b) { return a.model.bic < b.model.bic; });
    return entries;
}

Json comparison_to_json(const std::vector<ComparisonEntry>& ranked) {
    Json models = Json::array();
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        const auto& m = ranked[i].model;
        Json e;
        e["rank"] = i + 1;
        e["family"] = std::string(to_string(m.family));
        e["structure"] = ranked[i].structure_label;
        e["log_lik"] = m.log_lik;
        e["num_params"] = m.num_params;
        e["bic"] = m.bic;
        e["converged"] = m.converged;
        e["iterations"] = m.num_iter;
        e["cov_params"] = params_to_json(m.cov_params);
        models.push_back(std::move(e));
    }
    Json j;
    j["models"] = models;
    return j;
}

std::string comparison_table(const std::vector<ComparisonEntry>& ranked) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %-12s %16s %4s %16s\n", "Model", "Structure", "LogLik", "k", "BIC");
    os << line;
    for (const auto& e : ranked) {
        std::snprintf(line, sizeof line, "%-12s %-12s %16.3f %4zu %16.3f\n",
                      std::string(display_name(e.model.family)).c_str(), e.structure_label.c_str(),
                      e.model.log_lik, e.model.num_params, e.model.bic);
        os << line;
    }
    return os.str();
}

Json diagnostics_to_json(const DiagnosticsReport& r) {
    Json j;
    j["global_stat"] = r.global_stat;
    j["global_interval"] = Json::array({r.global_lower, r.global_upper});
    j["global_inside"] = r.global_stat >= r.global_lower && r.global_stat <= r.global_upper;
    j["column_level"] = r.column_level;
    j["column_threshold"] = r.column_threshold;
    j["row_level"] = r.row_level;
    j["row_threshold"] = r.row_threshold;
    j["cell_threshold"] = r.cell_threshold;
    j["d_sq"] = std::vector<double>(r.d_sq.data(), r.d_sq.data() + r.d_sq.size());
    j["r_sq"] = std::vector<double>(r.r_sq.data(), r.r_sq.data() + r.r_sq.size());
    j["z"] = matrix_to_json(r.z);
    j["e_star"] = matrix_to_json(r.e_star);
    Json cols = Json::array();
    for (auto c : r.column_flags) cols.push_back(c + 1);
    Json rows = Json::array();
    for (auto c : r.row_flags) rows.push_back(c + 1);
    Json cells = Json::array();
    for (auto [a, b] : r.cell_flags) cells.push_back(Json::array({a + 1, b + 1}));
    j["column_flags"] = cols;
    j["row_flags"] = rows;
    j["cell_flags"] = cells;
    return j;
}

void write_diagnostics_csv(const DiagnosticsReport& r, const Dataset& data, const fs::path& dir) {
    const auto& layout = data.layout;
    std::ostringstream d;
    d << "column,location_id,time,d_sq,threshold\n";
    for (Eigen::Index j = 0; j < r.d_sq.size(); ++j) {
        const auto [l, t] = layout.location_time(static_cast<std::size_t>(j));
        d << j + 1 << ',' << layout.locations()[l].id << ',' << layout.time_labels()[t] << ','
          << format_real(r.d_sq(j)) << ',' << format_real(r.column_threshold) << '\n';
    }
    write_text(dir / "d_sq.csv", d.str());

    std::ostringstream rs;
    rs << "variable,r_sq,threshold,dof\n";
    for (Eigen::Index i = 0; i < r.r_sq.size(); ++i) {
        rs << data.response_names[static_cast<std::size_t>(i)] << ',' << format_real(r.r_sq(i)) << ','
           << format_real(r.row_threshold) << ',' << r.z.cols() << '\n';
    }
    write_text(dir / "r_sq.csv", rs.str());

    std::ostringstream z;
    z << "variable,location_id,time,z\n";
    for (Eigen::Index i = 0; i < r.z.rows(); ++i) {
        for (Eigen::Index j = 0; j < r.z.cols(); ++j) {
            const auto [l, t] = layout.location_time(static_cast<std::size_t>(j));
            z << data.response_names[static_cast<std::size_t>(i)] << ',' << layout.locations()[l].id << ','
              << layout.time_labels()[t] << ',' << format_real(r.z(i, j)) << '\n';
        }
    }
    write_text(dir / "z.csv", z.str());

    std::ostringstream qq;
    qq << "theoretical,sample\n";
    for (auto [a, b] : qq_pairs(r.e_star)) qq << format_real(a) << ',' << format_real(b) << '\n';
    write_text(dir / "qq.csv", qq.str());
}

namespace {

// Minimal scatter plot; `hline` draws a dashed reference level, `diagonal`
// the y = x line.
std::string svg_scatter(const std::string& title, const std::vector<double>& xs,
                        const std::vector<double>& ys, std::optional<double> hline, bool diagonal) {
    constexpr double w = 640, h = 400, m = 50;
    double x0 = *std::min_element(xs.begin(), xs.end());
    double x1 = *std::max_element(xs.begin(), xs.end());
    double y0 = *std::min_element(ys.begin(), ys.end());
    double y1 = *std::max_element(ys.begin(), ys.end());
    if (hline) {
        y0 = std::min(y0, *hline);
        y1 = std::max(y1, *hline);
    }
    if (diagonal) {
        x0 = y0 = std::min(x0, y0);
        x1 = y1 = std::max(x1, y1);
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double v) { return m + (v - x0) / (x1 - x0) * (w - 2 * m); };
    auto py = [&](double v) { return h - m - (v - y0) / (y1 - y0) * (h - 2 * m); };
    char buf[256];
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"320\" y=\"25\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title << "</text>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n", m, m,
                  w - 2 * m, h - 2 * m);
    os << buf;
    if (hline) {
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%g\" y1=\"%.2f\" x2=\"%g\" y2=\"%.2f\" stroke=\"red\" stroke-dasharray=\"6,4\"/>\n", m,
                      py(*hline), w - m, py(*hline));
        os << buf;
    }
    if (diagonal) {
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"red\" stroke-dasharray=\"6,4\"/>\n",
                      px(x0), py(y0), px(x1), py(y1));
        os << buf;
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"steelblue\"/>\n", px(xs[i]),
                      py(ys[i]));
        os << buf;
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<double> iota_vector(std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(i + 1);
    return v;
}

}  // namespace

void write_diagnostics_svg(const DiagnosticsReport& r, const fs::path& dir) {
    const std::vector<double> d(r.d_sq.data(), r.d_sq.data() + r.d_sq.size());
    write_text(dir / "d_sq.svg", svg_scatter("Column distances d_j^2", iota_vector(d.size()), d,
                                             r.column_threshold, false));
    const std::vector<double> rr(r.r_sq.data(), r.r_sq.data() + r.r_sq.size());
    write_text(dir / "r_sq.svg", svg_scatter("Row distances r_i^2", iota_vector(rr.size()), rr,
                                             static_cast<double>(r.z.cols()), false));
    std::vector<double> qx, qy;
    for (auto [a, b] : qq_pairs(r.e_star)) {
        qx.push_back(a);
        qy.push_back(b);
    }
    write_text(dir / "qq.svg", svg_scatter("Normal Q-Q of standardized residuals", qx, qy, std::nullopt, true));
}

namespace {

namespace pt = boost::property_tree;

template <typename T>
T get_or(const pt::ptree& tree, const std::string& key, T fallback) {
    const auto v = tree.get_optional<std::string>(key);
    if (!v) return fallback;
    try {
        return tree.get<T>(key);
    } catch (const pt::ptree_error&) {
        throw DataError("scenario key '" + key + "' has invalid value '" + *v + "'");
    }
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw DataError("invalid boolean '" + s + "'");
}

}  // namespace

SimulationScenario load_scenario(const fs::path& path) {
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw DataError("scenario: " + std::string(e.what()));
    }
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    try {
        const std::string family_name = get_or<std::string>(tree, "scenario.family", "exponential");
        const SpatialFamily family = parse_spatial_family(family_name);
        SimulationScenario s = reference_scenario(family, 10, 12);
        s.name = get_or<std::string>(tree, "scenario.name", path.stem().string());
        s.num_locations = get_or<std::size_t>(tree, "scenario.locations", s.num_locations);
        s.num_times = get_or<std::size_t>(tree, "scenario.times", s.num_times);
        s.replications = get_or<std::size_t>(tree, "scenario.replications", s.replications);
        s.seed = get_or<std::uint64_t>(tree, "scenario.seed", s.seed);
        if (const auto ff = tree.get_optional<std::string>("scenario.fit_family")) {
            s.fit_family = parse_spatial_family(*ff);
        }
        if (const auto lf = tree.get_optional<std::string>("scenario.locations_file")) {
            fs::path p(*lf);
            s.locations = load_locations(p.is_absolute() ? p : base / p);
        }

        if (const auto b = tree.get_optional<std::string>("truth.B")) s.true_b = parse_matrix(*b);
        if (const auto sg = tree.get_optional<std::string>("truth.Sigma")) s.true_sigma = parse_matrix(*sg);
        s.params.sigma_s2 = get_or<double>(tree, "truth.sigma_s2", s.params.sigma_s2);
        s.params.phi_s = get_or<double>(tree, "truth.phi_s", s.params.phi_s);
        s.params.rho = get_or<double>(tree, "truth.rho", s.params.rho);
        if (family == SpatialFamily::Matern) {
            s.params.nu = get_or<double>(tree, "truth.nu", s.params.nu.value_or(1.5));
        }

        StructureSpec spec;
        spec.kind = get_or<std::string>(tree, "structure.kind", "dense");
        if (const auto m = tree.get_optional<std::string>("structure.mask")) {
            const fs::path mp(*m);
            spec.mask = m->find(',') != std::string::npos || m->find(';') != std::string::npos
                            ? parse_mask(*m)
                            : load_mask(mp.is_absolute() ? mp : base / mp);
        }
        if (const auto b = tree.get_optional<std::string>("structure.blocks")) spec.blocks = parse_blocks(*b);
        if (const auto ic = tree.get_optional<std::string>("structure.intercept")) {
            spec.augmentation.intercept = parse_bool(*ic);
        }
        if (const auto in = tree.get_optional<std::string>("structure.interactions")) {
            for (const auto& item : split(*in, ',')) {
                if (!item.empty()) spec.augmentation.interactions.push_back(parse_interaction(item));
            }
        }
        if (const auto pw = tree.get_optional<std::string>("structure.powers")) {
            for (const auto& item : split(*pw, ',')) {
                if (!item.empty()) spec.augmentation.powers.push_back(parse_power(item));
            }
        }
        s.structure = build_structure(spec);

        auto& fo = s.fit_options;
        fo.max_iter = get_or<std::size_t>(tree, "fit.max_iter", fo.max_iter);
        fo.tol_loglik = get_or<double>(tree, "fit.tol", fo.tol_loglik);
        fo.ridge_lambda = get_or<double>(tree, "fit.ridge_lambda", fo.ridge_lambda);
        fo.score_tol = get_or<double>(tree, "fit.score_tol", fo.score_tol);
        if (const auto ip = tree.get_optional<std::string>("fit.init")) fo.init = parse_init_policy(*ip);
        if (const auto j = tree.get_optional<std::string>("fit.jitter")) fo.jitter.enabled = parse_bool(*j);
        if (const auto bn = tree.get_optional<std::string>("fit.bic_n")) fo.bic_n = parse_bic_sample_size(*bn);

        s.validate();
        return s;
    } catch (const std::invalid_argument& e) {
        throw DataError("scenario: " + std::string(e.what()));
    }
}

Json study_summary_to_json(const SimulationScenario& scenario, const StudyResult& result) {
    const auto& s = result.summary;
    Json j;
    j["name"] = result.name;
    j["family"] = std::string(to_string(scenario.family));
    j["num_locations"] = scenario.layout_locations();
    j["num_times"] = scenario.num_times;
    j["replications"] = scenario.replications;
    j["seed"] = scenario.seed;
    j["completed"] = s.completed;
    j["failed"] = s.failed;
    j["study_failed"] = result.study_failed;
    j["median_b_error"] = s.median_b_error;
    j["median_sigma_error"] = s.median_sigma_error;
    if (s.median_separate_b_error) j["median_separate_b_error"] = *s.median_separate_b_error;
    j["median_sigma_s2"] = s.median_sigma_s2;
    j["median_phi_s"] = s.median_phi_s;
    j["median_rho"] = s.median_rho;
    if (s.median_nu) j["median_nu"] = *s.median_nu;
    j["mse_sigma_s2"] = s.mse_sigma_s2;
    j["mse_phi_s"] = s.mse_phi_s;
    j["mse_rho"] = s.mse_rho;
    if (s.mse_nu) j["mse_nu"] = *s.mse_nu;
    Json failures = Json::array();
    for (const auto& r : result.records) {
        if (!r.ok) failures.push_back(Json{{"replication", r.index + 1}, {"error", r.error}});
    }
    j["failures"] = failures;
    return j;
}

std::string study_records_csv(const StudyResult& result) {
    std::ostringstream os;
    os << "replication,ok,b_error,sigma_error,separate_b_error,sigma_s2,phi_s,nu,rho,log_lik,bic,iterations,"
          "converged\n";
    for (const auto& r : result.records) {
        os << r.index + 1 << ',' << (r.ok ? 1 : 0) << ',';
        if (r.ok) {
            os << format_real(r.b_error) << ',' << format_real(r.sigma_error) << ','
               << (r.separate_b_error ? format_real(*r.separate_b_error) : "") << ','
               << format_real(r.estimate.sigma_s2) << ',' << format_real(r.estimate.phi_s) << ','
               << (r.estimate.nu ? format_real(*r.estimate.nu) : "") << ',' << format_real(r.estimate.rho) << ','
               << format_real(r.log_lik) << ',' << format_real(r.bic) << ',' << r.iterations << ','
               << (r.converged ? 1 : 0) << '\n';
        } else {
            os << ",,,,,,,,,,\n";
        }
    }
    return os.str();
}

std::string study_boxplot_csv(const StudyResult& result) {
    std::ostringstream os;
    os << "scenario,quantity,replication,value\n";
    auto row = [&](const char* q, std::size_t i, double v) {
        os << result.name << ',' << q << ',' << i + 1 << ',' << format_real(v) << '\n';
    };
    for (const auto& r : result.records) {
        if (!r.ok) continue;
        row("b_error", r.index, r.b_error);
        row("sigma_error", r.index, r.sigma_error);
        if (r.separate_b_error) row("separate_b_error", r.index, *r.separate_b_error);
        row("sigma_s2", r.index, r.estimate.sigma_s2);
        row("phi_s", r.index, r.estimate.phi_s);
        row("rho", r.index, r.estimate.rho);
        if (r.estimate.nu) row("nu", r.index, *r.estimate.nu);
    }
    return os.str();
}

}  // namespace stmvr::io
