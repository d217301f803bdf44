#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "retrack/cross_entropy.hpp"
#include "retrack/importance.hpp"
#include "retrack/model.hpp"
#include "retrack/path.hpp"

namespace retrack {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat key-value experiment configuration. Lines are `key = value`, full
/// lines starting with '#' are comments. Entry order is preserved so the
/// file round-trips losslessly through parse/serialize.
class ExperimentConfig {
public:
    ExperimentConfig() = default;

    static ExperimentConfig parse(const std::string& text) {
        ExperimentConfig cfg;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
            cfg.set(key, value);
        }
        return cfg;
    }

    static ExperimentConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str());
    }

    std::string serialize() const {
        std::ostringstream out;
        for (const auto& [key, value] : entries_) out << key << " = " << value << "\n";
        return out.str();
    }

    void set(const std::string& key, const std::string& value) {
        auto it = index_.find(key);
        if (it == index_.end()) {
            index_[key] = entries_.size();
            entries_.emplace_back(key, value);
        } else {
            entries_[it->second].second = value;
        }
    }

    bool has(const std::string& key) const { return index_.count(key) > 0; }

    const std::vector<std::pair<std::string, std::string>>& entries() const {
        return entries_;
    }

    std::string get_string(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("missing config key: " + key);
        return entries_[it->second].second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? get_string(key) : fallback;
    }

    double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    long long get_long(const std::string& key) const {
        const std::string s = get_string(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);  // accepts 1e6 style counts
            if (trim(s.substr(pos)).empty() && v == std::floor(v))
                return static_cast<long long>(v);
        } catch (...) {
        }
        throw ConfigError("config key " + key + ": expected an integer, got '" + s + "'");
    }
    long long get_long(const std::string& key, long long fallback) const {
        return has(key) ? get_long(key) : fallback;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string s = get_string(key);
        if (s == "on" || s == "true" || s == "1") return true;
        if (s == "off" || s == "false" || s == "0") return false;
        throw ConfigError("config key " + key + ": expected on/off");
    }

    std::vector<double> get_vector(const std::string& key) const {
        return parse_numbers(key, get_string(key));
    }

    /// Matrix rows separated by ';', entries by spaces or commas.
    Matrix get_matrix(const std::string& key) const {
        const std::string s = get_string(key);
        std::vector<std::vector<double>> rows;
        std::string part;
        std::istringstream in(s);
        while (std::getline(in, part, ';')) rows.push_back(parse_numbers(key, part));
        if (rows.empty()) throw ConfigError("config key " + key + ": empty matrix");
        Matrix m(rows.size(), rows[0].size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != rows[0].size())
                throw ConfigError("config key " + key + ": ragged matrix rows");
            for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
        }
        return m;
    }

    std::vector<std::string> get_names(const std::string& key) const {
        std::vector<std::string> out;
        std::string item;
        std::istringstream in(get_string(key));
        while (std::getline(in, item, ',')) {
            const std::string t = trim(item);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    static double to_double(const std::string& key, const std::string& s) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (trim(s.substr(pos)).empty()) return v;
        } catch (...) {
        }
        throw ConfigError("config key " + key + ": expected a number, got '" + s + "'");
    }

    static std::vector<double> parse_numbers(const std::string& key, const std::string& s) {
        std::vector<double> out;
        std::string norm = s;
        for (char& c : norm)
            if (c == ',') c = ' ';
        std::istringstream in(norm);
        std::string tok;
        while (in >> tok) out.push_back(to_double(key, tok));
        if (out.empty()) throw ConfigError("config key " + key + ": expected numbers");
        return out;
    }

    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::size_t> index_;
};

inline SdeModel build_model(const ExperimentConfig& cfg) {
    const std::string name = cfg.get_string("model");
    try {
        if (name == "double-well") return double_well_model(cfg.get_double("dw.b", 0.5));
        if (name == "langevin")
            return langevin_model(cfg.get_double("langevin.kappa"),
                                  cfg.get_double("langevin.temperature", 1.0));
        if (name == "cdv") return charney_devore_model(cfg.get_double("cdv.b"));
        if (name == "const")
            return constant_model(cfg.get_double("const.a"), cfg.get_double("const.b"));
    } catch (const ModelError& e) {
        throw ConfigError(std::string("invalid model parameters: ") + e.what());
    }
    throw ConfigError("unknown model: " + name +
                      " (expected double-well, langevin, cdv or const)");
}

inline Projection build_projection(const ExperimentConfig& cfg, const SdeModel& model) {
    if (!cfg.has("projection")) return default_projection(model);
    const std::vector<double> row = cfg.get_vector("projection");
    if (static_cast<int>(row.size()) != model.dim_state)
        throw ConfigError("projection length does not match the model dimension");
    Vector v(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) v[i] = row[i];
    return Projection(v);
}

/// Initial Gaussian: `mu0` (broadcast scalar or full vector) plus either
/// `cov0` (full covariance matrix) or `sigma0` (per-coordinate standard
/// deviations, broadcast scalar).
inline GaussianDensity build_rho0(const ExperimentConfig& cfg, const SdeModel& model) {
    const int d = model.dim_state;
    std::vector<double> mu = cfg.get_vector("mu0");
    if (mu.size() == 1 && d > 1) mu.assign(d, mu[0]);
    if (static_cast<int>(mu.size()) != d) throw ConfigError("mu0 length mismatch");
    Vector mean(d);
    for (int i = 0; i < d; ++i) mean[i] = mu[i];

    Matrix cov;
    if (cfg.has("cov0")) {
        cov = cfg.get_matrix("cov0");
        if (cov.rows() != d || cov.cols() != d) throw ConfigError("cov0 shape mismatch");
    } else {
        std::vector<double> sig = cfg.get_vector("sigma0");
        if (sig.size() == 1 && d > 1) sig.assign(d, sig[0]);
        if (static_cast<int>(sig.size()) != d) throw ConfigError("sigma0 length mismatch");
        cov = Matrix::Zero(d, d);
        for (int i = 0; i < d; ++i) cov(i, i) = sig[i] * sig[i];
    }
    try {
        return GaussianDensity(mean, cov);
    } catch (const ModelError& e) {
        throw ConfigError(std::string("invalid initial density: ") + e.what());
    }
}

inline PathConfig build_path_config(const ExperimentConfig& cfg) {
    PathConfig pc;
    pc.horizon_end = cfg.get_double("horizon", 1.0);
    pc.dt = cfg.get_double("dt", 0.01);
    pc.delta_t_switch = cfg.get_double("delta_t_switch", 10.0 * pc.dt);
    pc.epsilon_min_step = cfg.get_double("epsilon", 1e-6);
    pc.bridge_enabled = cfg.get_bool("bridge", true);
    try {
        pc.validate();
    } catch (const NumericError& e) {
        throw ConfigError(e.what());
    }
    return pc;
}

/// Tabulated corner-patch sizes keyed by model and
/// threshold; absent keys fall back to 37 dx by 9 dt.
inline std::pair<double, double> default_patch(const std::string& model_name, double k,
                                               double dx, double dt) {
    struct Entry {
        double k, pdx, pdt;
    };
    static const Entry dw[] = {{0.0, 0.185, 0.0225}, {0.5, 0.195, 0.0250},
                               {1.0, 0.185, 0.0225}, {1.2, 0.185, 0.0225},
                               {1.5, 0.185, 0.0225}, {2.0, 0.185, 0.0225},
                               {2.5, 0.200, 0.0275}, {3.0, 0.195, 0.0250}};
    static const Entry lan[] = {{2.0, 0.170, 0.00625},
                                {2.5, 0.121, 0.0025},
                                {3.0, 0.120, 0.0025},
                                {3.5, 0.1365, 0.00375}};
    const Entry* table = nullptr;
    std::size_t n = 0;
    if (model_name == "double-well") {
        table = dw;
        n = sizeof(dw) / sizeof(dw[0]);
    } else if (model_name == "langevin") {
        table = lan;
        n = sizeof(lan) / sizeof(lan[0]);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (std::abs(table[i].k - k) < 1e-12) return {table[i].pdx, table[i].pdt};
    return {37.0 * dx, 9.0 * dt};
}

inline PdeSetup build_pde_setup(const ExperimentConfig& cfg, const SdeModel& model,
                                double threshold) {
    PdeSetup pde;
    if (model.name == "langevin") {
        pde.x_min = -3.0;
        pde.dx = 0.006;
        pde.dt = pde.dx / 5.0;
    } else if (model.name == "cdv") {
        pde.x_min = 0.2;
        pde.dx = 0.002;
        pde.dt = pde.dx / 5.0;
    } else if (model.name == "const") {
        pde.x_min = threshold - 6.0;
        pde.dx = 0.005;
        pde.dt = pde.dx / 2.0;
    } else {
        pde.x_min = -5.0;
        pde.dx = 0.005;
        pde.dt = pde.dx / 2.0;
    }
    pde.x_min = cfg.get_double("pde.xmin", pde.x_min);
    pde.dx = cfg.get_double("pde.dx", pde.dx);
    pde.dt = cfg.get_double("pde.dt", pde.dt);
    const auto patch = default_patch(model.name, threshold, pde.dx, pde.dt);
    pde.patch_dx = cfg.get_double("pde.patch_dx", patch.first);
    pde.patch_dt = cfg.get_double("pde.patch_dt", patch.second);
    if (!(pde.x_min < threshold)) throw ConfigError("pde.xmin must lie below the threshold");
    return pde;
}

inline PilotSetup build_pilot_setup(const ExperimentConfig& cfg) {
    PilotSetup pilot;
    pilot.degree = static_cast<int>(cfg.get_long("mp.degree", 3));
    pilot.n_paths = static_cast<int>(cfg.get_long("mp.pilot", 10000));
    pilot.b2_floor = cfg.get_double("mp.b2_floor", 1e-8);
    return pilot;
}

inline CeConfig build_ce_config(const ExperimentConfig& cfg) {
    CeConfig ce;
    ce.quantile_beta = cfg.get_double("ce.beta", 0.01);
    ce.pilot_size = cfg.get_long("ce.j1", 10000);
    ce.level_cap = static_cast<int>(cfg.get_long("ce.level_cap", 20));
    ce.free_variance = cfg.get_bool("ce.free_variance", false);
    return ce;
}

inline std::vector<double> build_thresholds(const ExperimentConfig& cfg) {
    if (cfg.has("thresholds")) return cfg.get_vector("thresholds");
    return {cfg.get_double("threshold")};
}

inline std::vector<IsMode> build_modes(const ExperimentConfig& cfg) {
    std::vector<IsMode> out;
    for (const std::string& name : cfg.get_names("modes")) {
        try {
            out.push_back(mode_from_string(name));
        } catch (const NumericError& e) {
            throw ConfigError(e.what());
        }
    }
    if (out.empty()) throw ConfigError("modes list is empty");
    return out;
}

inline RareEvent build_event(const ExperimentConfig& cfg, const SdeModel& model,
                             double threshold) {
    const double horizon = cfg.get_double("horizon", 1.0);
    return RareEvent(threshold, build_projection(cfg, model), 0.0, horizon);
}

}  // namespace retrack
