#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "tbloc/bloch.hpp"
#include "tbloc/relax.hpp"

namespace tbloc::cli {

using json = nlohmann::ordered_json;

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {"locality", "ct",         "defect-compare", "bands",
                                                   "relax",    "beta-limit", "selfcheck"};
    return names;
}

struct DefectSpec {
    std::string kind;                     // vacancy | interstitial | substitution
    std::optional<int> site;              // resolved index (vacancy, substitution)
    bool middle = false;                  // site = "middle"
    std::vector<double> position;         // interstitial
    std::string species;
};

struct GeometryConfig {
    std::string lattice = "chain";  // chain | multilattice
    int dim = 1;
    double a = 1.0;                 // chain spacing
    int n = 10;                     // chain sites
    Eigen::MatrixXd cell;           // multilattice, rows of A
    Eigen::MatrixXd basis;          // dim x nb
    std::vector<std::string> species = {"A"};
    std::vector<int> repeats;
    bool periodic = false;
    std::vector<DefectSpec> defects;
    std::optional<double> defect_radius;
    std::optional<std::vector<double>> defect_center;
    double jitter = 0.0;            // seeded uniform displacement amplitude
};

struct ThermoConfig {
    double beta = 20.0;
    double mu = 0.0;
    bool gapped = false;
};

struct SolverConfig {
    ScfParams scf;
    int n_quad = 64;
    double margin = 0.5;
    std::string route = "spectral";  // spectral | quadrature
};

struct LocalityConfig {
    int order = 1;
    bool envelope = true;
    std::vector<double> betas;  // extra temperatures for comparison
    std::optional<double> r_lo, r_hi;
    double drop_top = 0.1;
};

struct CtConfig {
    std::vector<double> distances = {1.0, 4.0};
    std::optional<double> center;  // real part of z, default mu
};

struct DefectConfig {
    std::vector<std::vector<int>> sizes;  // repeat vectors; default geometry.repeats
    int bins = 4;
    double gap_delta = 0.05;
    int band_grid = 64;
    double pair_r_max = kInf;
    std::optional<double> density_floor;
};

struct BandsConfig {
    int grid = 32;
    std::vector<int> supercells = {4, 8, 16};
    int stability_supercell = 16;
};

struct RelaxConfig {
    double tol = 1e-8;
    int max_iter = 200;
    double m_min = 0.5;
    double max_step = 0.1;
    double free_radius = kInf;
    double upsilon = 1.0;
};

struct BetaLimitConfig {
    std::vector<double> betas = {10.0, 20.0, 40.0, 80.0};
};

struct SelfcheckConfig {
    int n = 10;
};

struct ExperimentConfig {
    std::string experiment = "selfcheck";
    std::uint64_t seed = 0;
    int threads = 1;
    std::string output = "tbloc-out";
    GeometryConfig geometry;
    Models models;
    PairRepulsion repulsion;
    ThermoConfig thermo;
    SolverConfig solver;
    LocalityConfig locality;
    CtConfig ct;
    DefectConfig defect;
    BandsConfig bands;
    RelaxConfig relax;
    BetaLimitConfig beta_limit;
    SelfcheckConfig selfcheck;
    std::string source;  // path of the config file, if any
};

namespace detail {

inline std::string where(const toml::node& n) {
    const auto& s = n.source();
    if (s.begin.line == 0) return "";
    return " (line " + std::to_string(s.begin.line) + ")";
}

inline void check_keys(const toml::table& t, const std::string& prefix, const std::set<std::string>& allowed) {
    for (const auto& [k, v] : t) {
        const std::string key(k.str());
        if (!allowed.count(key))
            throw ConfigError(prefix.empty() ? key : prefix + "." + key, "unknown key" + where(v));
    }
}

inline const toml::table* sub_table(const toml::table& t, const std::string& name, const std::string& prefix) {
    const toml::node* n = t.get(name);
    if (!n) return nullptr;
    if (!n->is_table()) throw ConfigError(prefix + name, "expected a table" + where(*n));
    return n->as_table();
}

inline double as_number(const toml::node& n, const std::string& key) {
    if (auto v = n.value<double>()) return *v;
    throw ConfigError(key, "expected a number" + where(n));
}

inline std::optional<double> get_number(const toml::table& t, const std::string& name, const std::string& key) {
    const toml::node* n = t.get(name);
    if (!n) return std::nullopt;
    if (!n->is_number()) throw ConfigError(key, "expected a number" + where(*n));
    return as_number(*n, key);
}

inline std::optional<std::int64_t> get_int(const toml::table& t, const std::string& name, const std::string& key) {
    const toml::node* n = t.get(name);
    if (!n) return std::nullopt;
    if (!n->is_integer()) throw ConfigError(key, "expected an integer" + where(*n));
    return n->value<std::int64_t>();
}

inline std::optional<bool> get_bool(const toml::table& t, const std::string& name, const std::string& key) {
    const toml::node* n = t.get(name);
    if (!n) return std::nullopt;
    if (!n->is_boolean()) throw ConfigError(key, "expected true or false" + where(*n));
    return n->value<bool>();
}

inline std::optional<std::string> get_string(const toml::table& t, const std::string& name, const std::string& key) {
    const toml::node* n = t.get(name);
    if (!n) return std::nullopt;
    if (!n->is_string()) throw ConfigError(key, "expected a string" + where(*n));
    return n->value<std::string>();
}

// A number, or the string "inf".
inline double beta_value(const toml::node& n, const std::string& key) {
    if (n.is_number()) {
        const double b = as_number(n, key);
        if (std::isinf(b) && b > 0) return kInf;
        if (!(b > 0) || !std::isfinite(b)) throw ConfigError(key, "beta must be positive" + where(n));
        return b;
    }
    if (n.is_string() && n.value<std::string>() == "inf") return kInf;
    throw ConfigError(key, "expected a positive number or \"inf\"" + where(n));
}

inline std::vector<double> number_list(const toml::node& n, const std::string& key, bool allow_inf_beta = false) {
    const toml::array* a = n.as_array();
    if (!a) throw ConfigError(key, "expected an array" + where(n));
    std::vector<double> out;
    for (std::size_t i = 0; i < a->size(); ++i) {
        const toml::node& e = *a->get(i);
        out.push_back(allow_inf_beta ? beta_value(e, key) : as_number(e, key));
    }
    return out;
}

inline std::vector<int> int_list(const toml::node& n, const std::string& key) {
    const toml::array* a = n.as_array();
    if (!a) throw ConfigError(key, "expected an array" + where(n));
    std::vector<int> out;
    for (std::size_t i = 0; i < a->size(); ++i) {
        const toml::node& e = *a->get(i);
        if (!e.is_integer()) throw ConfigError(key, "expected integers" + where(e));
        out.push_back(static_cast<int>(*e.value<std::int64_t>()));
    }
    return out;
}

inline Eigen::MatrixXd matrix_rows(const toml::node& n, const std::string& key) {
    const toml::array* a = n.as_array();
    if (!a || a->empty()) throw ConfigError(key, "expected a non-empty array of rows" + where(n));
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < a->size(); ++i) rows.push_back(number_list(*a->get(i), key));
    const std::size_t c = rows[0].size();
    Eigen::MatrixXd M(rows.size(), c);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != c) throw ConfigError(key, "rows have different lengths" + where(n));
        for (std::size_t j = 0; j < c; ++j) M(i, j) = rows[i][j];
    }
    return M;
}

inline std::vector<std::string> string_list(const toml::node& n, const std::string& key) {
    const toml::array* a = n.as_array();
    if (!a) throw ConfigError(key, "expected an array of strings" + where(n));
    std::vector<std::string> out;
    for (std::size_t i = 0; i < a->size(); ++i) {
        const toml::node& e = *a->get(i);
        if (!e.is_string()) throw ConfigError(key, "expected strings" + where(e));
        out.push_back(*e.value<std::string>());
    }
    return out;
}

template <class T>
void set_if(std::optional<T> v, T& dst) {
    if (v) dst = *v;
}

inline int positive_int(std::optional<std::int64_t> v, int dflt, const std::string& key, int min = 1) {
    if (!v) return dflt;
    if (*v < min) throw ConfigError(key, "must be >= " + std::to_string(min));
    return static_cast<int>(*v);
}

inline void parse_geometry(const toml::table& t, GeometryConfig& g) {
    const std::string p = "geometry.";
    check_keys(t, "geometry",
               {"lattice", "a", "n", "cell", "basis", "species", "repeats", "periodic", "defect", "defect_radius",
                "defect_center", "jitter"});
    set_if(get_string(t, "lattice", p + "lattice"), g.lattice);
    if (g.lattice != "chain" && g.lattice != "multilattice")
        throw ConfigError(p + "lattice", "expected \"chain\" or \"multilattice\"");
    set_if(get_number(t, "a", p + "a"), g.a);
    g.n = positive_int(get_int(t, "n", p + "n"), g.n, p + "n");
    set_if(get_bool(t, "periodic", p + "periodic"), g.periodic);
    set_if(get_number(t, "jitter", p + "jitter"), g.jitter);
    if (g.jitter < 0) throw ConfigError(p + "jitter", "must be non-negative");
    if (g.lattice == "chain") {
        for (const char* k : {"cell", "basis", "repeats"})
            if (t.get(k)) throw ConfigError(p + k, "only valid for lattice = \"multilattice\"");
        if (!(g.a > 0)) throw ConfigError(p + "a", "must be positive");
        g.dim = 1;
        g.cell = Eigen::MatrixXd::Constant(1, 1, g.a);
        g.basis = Eigen::MatrixXd::Zero(1, 1);
        if (const toml::node* n = t.get("species")) g.species = string_list(*n, p + "species");
        if (g.species.size() != 1) throw ConfigError(p + "species", "a chain has one species");
        g.repeats = {g.n};
    } else {
        for (const char* k : {"a", "n"})
            if (t.get(k)) throw ConfigError(p + k, "only valid for lattice = \"chain\"");
        const toml::node* cell = t.get("cell");
        const toml::node* basis = t.get("basis");
        const toml::node* reps = t.get("repeats");
        if (!cell || !basis || !reps) throw ConfigError(p + "cell", "multilattice needs cell, basis and repeats");
        g.cell = matrix_rows(*cell, p + "cell");
        g.dim = static_cast<int>(g.cell.rows());
        if (g.cell.cols() != g.dim || g.dim > 3) throw ConfigError(p + "cell", "must be a square matrix of size 1..3");
        const Eigen::MatrixXd b = matrix_rows(*basis, p + "basis");  // one row per offset
        if (b.cols() != g.dim) throw ConfigError(p + "basis", "offsets must have dim components");
        g.basis = b.transpose();
        g.repeats = int_list(*reps, p + "repeats");
        if (static_cast<int>(g.repeats.size()) != g.dim) throw ConfigError(p + "repeats", "one count per axis");
        for (int r : g.repeats)
            if (r < 1) throw ConfigError(p + "repeats", "counts must be >= 1");
        if (const toml::node* n = t.get("species")) g.species = string_list(*n, p + "species");
        else g.species.assign(g.basis.cols(), "A");
        if (static_cast<Eigen::Index>(g.species.size()) != g.basis.cols())
            throw ConfigError(p + "species", "one species per basis offset");
    }
    if (const toml::node* n = t.get("defect")) {
        const toml::array* arr = n->as_array();
        if (!arr) throw ConfigError(p + "defect", "expected an array of tables ([[geometry.defect]])" + where(*n));
        for (std::size_t i = 0; i < arr->size(); ++i) {
            const toml::table* d = arr->get(i)->as_table();
            const std::string q = p + "defect[" + std::to_string(i) + "].";
            if (!d) throw ConfigError(q, "expected a table");
            check_keys(*d, q.substr(0, q.size() - 1), {"kind", "site", "position", "species"});
            DefectSpec s;
            s.kind = get_string(*d, "kind", q + "kind").value_or("");
            if (s.kind != "vacancy" && s.kind != "interstitial" && s.kind != "substitution")
                throw ConfigError(q + "kind", "expected vacancy, interstitial or substitution");
            if (const toml::node* sn = d->get("site")) {
                if (sn->is_integer()) s.site = static_cast<int>(*sn->value<std::int64_t>());
                else if (sn->is_string() && sn->value<std::string>() == "middle") s.middle = true;
                else throw ConfigError(q + "site", "expected an index or \"middle\"" + where(*sn));
            }
            if (const toml::node* pn = d->get("position")) s.position = number_list(*pn, q + "position");
            set_if(get_string(*d, "species", q + "species"), s.species);
            if (s.kind == "interstitial") {
                if (static_cast<int>(s.position.size()) != g.dim)
                    throw ConfigError(q + "position", "interstitial needs a position with dim components");
            } else if (!s.site && !s.middle) {
                throw ConfigError(q + "site", "required for " + s.kind);
            }
            if (s.kind == "substitution" && s.species.empty()) throw ConfigError(q + "species", "required for substitution");
            g.defects.push_back(s);
        }
    }
    if (auto r = get_number(t, "defect_radius", p + "defect_radius")) {
        if (*r < 0) throw ConfigError(p + "defect_radius", "must be non-negative");
        g.defect_radius = r;
    }
    if (const toml::node* n = t.get("defect_center")) {
        g.defect_center = number_list(*n, p + "defect_center");
        if (static_cast<int>(g.defect_center->size()) != g.dim)
            throw ConfigError(p + "defect_center", "needs dim components");
    }
}

inline void parse_model(const toml::table& t, ExperimentConfig& c) {
    const std::string p = "model.";
    check_keys(t, "model",
               {"h0", "gamma0", "r_on", "n_orbitals", "orbital_mixing", "r_cut", "onsite", "c", "U", "rho0",
                "species_shift", "repulsion"});
    HoppingModel& h = c.models.hop;
    OnsiteModel& o = c.models.onsite;
    set_if(get_number(t, "h0", p + "h0"), h.h0);
    set_if(get_number(t, "gamma0", p + "gamma0"), h.gamma0);
    set_if(get_number(t, "r_on", p + "r_on"), h.r_on);
    h.n_orbitals = positive_int(get_int(t, "n_orbitals", p + "n_orbitals"), h.n_orbitals, p + "n_orbitals");
    set_if(get_number(t, "orbital_mixing", p + "orbital_mixing"), h.orbital_mixing);
    set_if(get_number(t, "r_cut", p + "r_cut"), h.r_cut);
    try {
        h.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError("model", e.what());
    }
    const std::string kind = get_string(t, "onsite", p + "onsite").value_or("constant");
    if (kind == "constant") o.kind = OnsiteModel::Kind::Constant;
    else if (kind == "tanh") o.kind = OnsiteModel::Kind::Saturating;
    else throw ConfigError(p + "onsite", "expected \"constant\" or \"tanh\"");
    set_if(get_number(t, "c", p + "c"), o.c);
    set_if(get_number(t, "U", p + "U"), o.U);
    set_if(get_number(t, "rho0", p + "rho0"), o.rho0);
    if (const toml::table* s = sub_table(t, "species_shift", p)) {
        for (const auto& [k, v] : *s) o.species_shift[std::string(k.str())] = as_number(v, p + "species_shift." + std::string(k.str()));
    }
    if (const toml::table* r = sub_table(t, "repulsion", p)) {
        check_keys(*r, "model.repulsion", {"A", "gamma", "r_on"});
        set_if(get_number(*r, "A", p + "repulsion.A"), c.repulsion.A);
        set_if(get_number(*r, "gamma", p + "repulsion.gamma"), c.repulsion.gamma);
        set_if(get_number(*r, "r_on", p + "repulsion.r_on"), c.repulsion.r_on);
        try {
            c.repulsion.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError("model.repulsion", e.what());
        }
    }
}

inline void parse_thermo(const toml::table& t, ThermoConfig& th) {
    check_keys(t, "thermo", {"beta", "mu", "gapped"});
    if (const toml::node* n = t.get("beta")) th.beta = beta_value(*n, "thermo.beta");
    set_if(get_number(t, "mu", "thermo.mu"), th.mu);
    set_if(get_bool(t, "gapped", "thermo.gapped"), th.gapped);
}

inline void parse_solver(const toml::table& t, SolverConfig& s) {
    const std::string p = "solver.";
    check_keys(t, "solver", {"mixing", "anderson_depth", "tol", "max_iter", "n_quad", "margin", "route"});
    set_if(get_number(t, "mixing", p + "mixing"), s.scf.mixing);
    s.scf.anderson_depth = positive_int(get_int(t, "anderson_depth", p + "anderson_depth"), s.scf.anderson_depth,
                                        p + "anderson_depth", 0);
    set_if(get_number(t, "tol", p + "tol"), s.scf.tol);
    s.scf.max_iter = positive_int(get_int(t, "max_iter", p + "max_iter"), s.scf.max_iter, p + "max_iter");
    s.n_quad = positive_int(get_int(t, "n_quad", p + "n_quad"), s.n_quad, p + "n_quad", 4);
    set_if(get_number(t, "margin", p + "margin"), s.margin);
    set_if(get_string(t, "route", p + "route"), s.route);
    if (s.route != "spectral" && s.route != "quadrature")
        throw ConfigError(p + "route", "expected \"spectral\" or \"quadrature\"");
    if (!(s.margin > 0)) throw ConfigError(p + "margin", "must be positive");
    try {
        s.scf.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError("solver", e.what());
    }
}

inline void parse_sections(const toml::table& t, ExperimentConfig& c) {
    if (const toml::table* s = sub_table(t, "locality", "")) {
        check_keys(*s, "locality", {"order", "envelope", "betas", "r_lo", "r_hi", "drop_top"});
        c.locality.order = positive_int(get_int(*s, "order", "locality.order"), c.locality.order, "locality.order");
        if (c.locality.order > 2) throw ConfigError("locality.order", "must be 1 or 2");
        set_if(get_bool(*s, "envelope", "locality.envelope"), c.locality.envelope);
        if (const toml::node* n = s->get("betas")) c.locality.betas = number_list(*n, "locality.betas", true);
        c.locality.r_lo = get_number(*s, "r_lo", "locality.r_lo");
        c.locality.r_hi = get_number(*s, "r_hi", "locality.r_hi");
        set_if(get_number(*s, "drop_top", "locality.drop_top"), c.locality.drop_top);
        if (!(c.locality.drop_top >= 0 && c.locality.drop_top < 1)) throw ConfigError("locality.drop_top", "must lie in [0, 1)");
    }
    if (const toml::table* s = sub_table(t, "ct", "")) {
        check_keys(*s, "ct", {"distances", "center"});
        if (const toml::node* n = s->get("distances")) c.ct.distances = number_list(*n, "ct.distances");
        for (double d : c.ct.distances)
            if (!(d > 0)) throw ConfigError("ct.distances", "must be positive");
        c.ct.center = get_number(*s, "center", "ct.center");
    }
    if (const toml::table* s = sub_table(t, "defect", "")) {
        check_keys(*s, "defect", {"sizes", "bins", "gap_delta", "band_grid", "pair_r_max", "density_floor"});
        if (const toml::node* n = s->get("sizes")) {
            const toml::array* a = n->as_array();
            if (!a) throw ConfigError("defect.sizes", "expected an array of repeat arrays" + where(*n));
            for (std::size_t i = 0; i < a->size(); ++i) c.defect.sizes.push_back(int_list(*a->get(i), "defect.sizes"));
        }
        c.defect.bins = positive_int(get_int(*s, "bins", "defect.bins"), c.defect.bins, "defect.bins");
        set_if(get_number(*s, "gap_delta", "defect.gap_delta"), c.defect.gap_delta);
        c.defect.band_grid = positive_int(get_int(*s, "band_grid", "defect.band_grid"), c.defect.band_grid, "defect.band_grid", 8);
        set_if(get_number(*s, "pair_r_max", "defect.pair_r_max"), c.defect.pair_r_max);
        c.defect.density_floor = get_number(*s, "density_floor", "defect.density_floor");
    }
    if (const toml::table* s = sub_table(t, "bands", "")) {
        check_keys(*s, "bands", {"grid", "supercells", "stability_supercell"});
        c.bands.grid = positive_int(get_int(*s, "grid", "bands.grid"), c.bands.grid, "bands.grid", 8);
        if (const toml::node* n = s->get("supercells")) c.bands.supercells = int_list(*n, "bands.supercells");
        for (int m : c.bands.supercells)
            if (m < 1) throw ConfigError("bands.supercells", "must be >= 1");
        c.bands.stability_supercell = positive_int(get_int(*s, "stability_supercell", "bands.stability_supercell"),
                                                   c.bands.stability_supercell, "bands.stability_supercell");
    }
    if (const toml::table* s = sub_table(t, "relax", "")) {
        check_keys(*s, "relax", {"tol", "max_iter", "m_min", "max_step", "free_radius", "upsilon"});
        set_if(get_number(*s, "tol", "relax.tol"), c.relax.tol);
        c.relax.max_iter = positive_int(get_int(*s, "max_iter", "relax.max_iter"), c.relax.max_iter, "relax.max_iter", 0);
        set_if(get_number(*s, "m_min", "relax.m_min"), c.relax.m_min);
        set_if(get_number(*s, "max_step", "relax.max_step"), c.relax.max_step);
        set_if(get_number(*s, "free_radius", "relax.free_radius"), c.relax.free_radius);
        set_if(get_number(*s, "upsilon", "relax.upsilon"), c.relax.upsilon);
        if (!(c.relax.tol > 0)) throw ConfigError("relax.tol", "must be positive");
        if (!(c.relax.m_min > 0)) throw ConfigError("relax.m_min", "must be positive");
        if (!(c.relax.upsilon > 0)) throw ConfigError("relax.upsilon", "must be positive");
    }
    if (const toml::table* s = sub_table(t, "beta_limit", "")) {
        check_keys(*s, "beta_limit", {"betas"});
        if (const toml::node* n = s->get("betas")) c.beta_limit.betas = number_list(*n, "beta_limit.betas");
    }
    if (const toml::table* s = sub_table(t, "selfcheck", "")) {
        check_keys(*s, "selfcheck", {"n"});
        c.selfcheck.n = positive_int(get_int(*s, "n", "selfcheck.n"), c.selfcheck.n, "selfcheck.n", 2);
    }
}

}  // namespace detail

// Applies "a.b.c=value" to the table. The value is read as a TOML value if
// it parses as one, otherwise as a bare string.
inline void apply_override(toml::table& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must have the form key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string val = assignment.substr(eq + 1);
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string s; std::getline(ss, s, '.');) {
        if (s.empty()) throw ConfigError(key, "empty key segment in override");
        parts.push_back(s);
    }
    toml::table* t = &root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        toml::node* n = t->get(parts[i]);
        if (!n) {
            t->insert(parts[i], toml::table{});
            n = t->get(parts[i]);
        }
        if (!n->is_table()) throw ConfigError(key, "override path crosses a non-table value");
        t = n->as_table();
    }
    toml::table parsed;
    try {
        parsed = toml::parse("v = " + val);
    } catch (const toml::parse_error&) {
        parsed = toml::table{};
        parsed.insert("v", val);
    }
    t->insert_or_assign(parts.back(), *parsed.get("v"));
}

inline ExperimentConfig parse_config(const toml::table& t) {
    ExperimentConfig c;
    detail::check_keys(t, "",
                       {"experiment", "seed", "threads", "output", "geometry", "model", "thermo", "solver", "locality",
                        "ct", "defect", "bands", "relax", "beta_limit", "selfcheck"});
    detail::set_if(detail::get_string(t, "experiment", "experiment"), c.experiment);
    bool known = false;
    for (const auto& n : experiment_names()) known = known || n == c.experiment;
    if (!known) throw ConfigError("experiment", "unknown experiment '" + c.experiment + "'");
    if (auto s = detail::get_int(t, "seed", "seed")) {
        if (*s < 0) throw ConfigError("seed", "must be non-negative");
        c.seed = static_cast<std::uint64_t>(*s);
    }
    c.threads = detail::positive_int(detail::get_int(t, "threads", "threads"), default_threads(), "threads");
    detail::set_if(detail::get_string(t, "output", "output"), c.output);
    if (const toml::table* s = detail::sub_table(t, "geometry", "")) detail::parse_geometry(*s, c.geometry);
    else detail::parse_geometry(toml::table{}, c.geometry);
    if (const toml::table* s = detail::sub_table(t, "model", "")) detail::parse_model(*s, c);
    if (const toml::table* s = detail::sub_table(t, "thermo", "")) detail::parse_thermo(*s, c.thermo);
    if (const toml::table* s = detail::sub_table(t, "solver", "")) detail::parse_solver(*s, c.solver);
    detail::parse_sections(t, c);
    auto needs_gapped = [&](double b, const std::string& key) {
        if (std::isinf(b) && !c.thermo.gapped)
            throw ConfigError(key, "beta = \"inf\" requires thermo.gapped = true");
    };
    needs_gapped(c.thermo.beta, "thermo.beta");
    for (double b : c.locality.betas) needs_gapped(b, "locality.betas");
    if (c.experiment == "beta-limit" && !c.thermo.gapped)
        throw ConfigError("thermo.gapped", "the beta-limit experiment relaxes at beta = inf and needs gapped = true");
    return c;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    toml::table t;
    try {
        t = toml::parse_file(path);
    } catch (const toml::parse_error& e) {
        throw ConfigError("", std::string("parse error at line ") + std::to_string(e.source().begin.line) + ": " +
                                  std::string(e.description()));
    }
    for (const auto& o : overrides) apply_override(t, o);
    ExperimentConfig c = parse_config(t);
    c.source = path;
    return c;
}

inline ExperimentConfig config_from_string(const std::string& text, const std::vector<std::string>& overrides = {}) {
    toml::table t;
    try {
        t = toml::parse(text);
    } catch (const toml::parse_error& e) {
        throw ConfigError("", std::string("parse error at line ") + std::to_string(e.source().begin.line) + ": " +
                                  std::string(e.description()));
    }
    for (const auto& o : overrides) apply_override(t, o);
    return parse_config(t);
}

// Infinite values are written as the string "inf".
inline json number(double v) {
    if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
    if (std::isnan(v)) return json("nan");
    return json(v);
}

inline json numbers(const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(number(x));
    return a;
}

inline json matrix_json(const Eigen::MatrixXd& M) {
    json a = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) r.push_back(number(M(i, j)));
        a.push_back(r);
    }
    return a;
}

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["experiment"] = c.experiment;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["output"] = c.output;
    const GeometryConfig& g = c.geometry;
    json geo;
    geo["lattice"] = g.lattice;
    geo["dim"] = g.dim;
    geo["cell"] = matrix_json(g.cell);
    geo["basis"] = matrix_json(g.basis.transpose());
    geo["species"] = g.species;
    geo["repeats"] = g.repeats;
    geo["periodic"] = g.periodic;
    json defects = json::array();
    for (const auto& d : g.defects) {
        json e;
        e["kind"] = d.kind;
        if (d.middle) e["site"] = "middle";
        else if (d.site) e["site"] = *d.site;
        if (!d.position.empty()) e["position"] = numbers(d.position);
        if (!d.species.empty()) e["species"] = d.species;
        defects.push_back(e);
    }
    geo["defect"] = defects;
    geo["defect_radius"] = g.defect_radius ? number(*g.defect_radius) : json(nullptr);
    geo["defect_center"] = g.defect_center ? numbers(*g.defect_center) : json(nullptr);
    geo["jitter"] = g.jitter;
    j["geometry"] = geo;
    const HoppingModel& h = c.models.hop;
    const OnsiteModel& o = c.models.onsite;
    json m;
    m["h0"] = h.h0;
    m["gamma0"] = h.gamma0;
    m["r_on"] = h.r_on;
    m["n_orbitals"] = h.n_orbitals;
    m["orbital_mixing"] = h.orbital_mixing;
    m["r_cut"] = h.cutoff();
    m["onsite"] = o.kind == OnsiteModel::Kind::Constant ? "constant" : "tanh";
    m["c"] = o.c;
    m["U"] = o.U;
    m["rho0"] = o.rho0;
    json sh = json::object();
    for (const auto& [k, v] : o.species_shift) sh[k] = v;
    m["species_shift"] = sh;
    m["repulsion"] = {{"A", c.repulsion.A}, {"gamma", c.repulsion.gamma}, {"r_on", c.repulsion.r_on}};
    j["model"] = m;
    j["thermo"] = {{"beta", number(c.thermo.beta)}, {"mu", c.thermo.mu}, {"gapped", c.thermo.gapped}};
    j["solver"] = {{"mixing", c.solver.scf.mixing}, {"anderson_depth", c.solver.scf.anderson_depth},
                   {"tol", c.solver.scf.tol},       {"max_iter", c.solver.scf.max_iter},
                   {"n_quad", c.solver.n_quad},     {"margin", c.solver.margin},
                   {"route", c.solver.route}};
    j["locality"] = {{"order", c.locality.order},
                     {"envelope", c.locality.envelope},
                     {"betas", numbers(c.locality.betas)},
                     {"r_lo", c.locality.r_lo ? number(*c.locality.r_lo) : json(nullptr)},
                     {"r_hi", c.locality.r_hi ? number(*c.locality.r_hi) : json(nullptr)},
                     {"drop_top", c.locality.drop_top}};
    j["ct"] = {{"distances", numbers(c.ct.distances)}, {"center", c.ct.center ? number(*c.ct.center) : json(nullptr)}};
    j["defect"] = {{"sizes", c.defect.sizes},
                   {"bins", c.defect.bins},
                   {"gap_delta", c.defect.gap_delta},
                   {"band_grid", c.defect.band_grid},
                   {"pair_r_max", number(c.defect.pair_r_max)},
                   {"density_floor", c.defect.density_floor ? number(*c.defect.density_floor) : json(nullptr)}};
    j["bands"] = {{"grid", c.bands.grid},
                  {"supercells", c.bands.supercells},
                  {"stability_supercell", c.bands.stability_supercell}};
    j["relax"] = {{"tol", c.relax.tol},           {"max_iter", c.relax.max_iter},
                  {"m_min", c.relax.m_min},       {"max_step", c.relax.max_step},
                  {"free_radius", number(c.relax.free_radius)}, {"upsilon", c.relax.upsilon}};
    j["beta_limit"] = {{"betas", numbers(c.beta_limit.betas)}};
    j["selfcheck"] = {{"n", c.selfcheck.n}};
    return j;
}

}  // namespace tbloc::cli
