#ifndef COSTA_RUNCONFIG_HPP
#define COSTA_RUNCONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

/**
 * @file runconfig.hpp
 * @brief Run configuration and manifests: JSON configs with data / geometry /
 *        model / fit / consensus sections, lossless round trips, and the
 *        manifest each experiment bundle carries for bitwise re-runs.
 *
 * Numeric knobs live in flat per-section maps so serialization is canonical
 * (sorted keys, shortest round-trip numbers); a manifest is a config plus the
 * library version, the resolved parameter hash, and the emitted file list.
 */

namespace costa {

struct RunConfig {
    std::string command = "fit";   // simulate | fit | consensus-fit | stepwise | report
    std::string experiment;        // recipe name, empty for non-experiment runs
    std::string data_path;         // section data
    std::string geometry_path;     // section geometry
    std::string mesh_path;
    std::string spec_path;         // model-spec table path (recipe overrides file)
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string out_dir = "out";
    int verbosity = 1;
    int threads = 1;
    std::map<std::string, double> model;       // recipe knobs (sizes, truths)
    std::map<std::string, double> fit;         // optimizer knobs
    std::map<std::string, double> consensus;   // partition / merge knobs

    double knob(const std::map<std::string, double>& m, const std::string& key,
                double fallback) const {
        auto it = m.find(key);
        return it == m.end() ? fallback : it->second;
    }
    double model_knob(const std::string& k, double v) const { return knob(model, k, v); }
    double fit_knob(const std::string& k, double v) const { return knob(fit, k, v); }
    double consensus_knob(const std::string& k, double v) const {
        return knob(consensus, k, v);
    }

    void validate() const {
        static const std::vector<std::string> cmds = {
            "simulate", "fit", "consensus-fit", "stepwise", "report"};
        bool ok = false;
        for (const auto& c : cmds) ok = ok || c == command;
        require(ok, "ConfigError", "unknown command '" + command + "'");
        require(command != "simulate" || has_seed, "ConfigError",
                "simulate requires a seed");
        require(threads >= 1, "ConfigError", "threads must be >= 1");
        for (const std::string& p :
             {data_path, geometry_path, mesh_path, spec_path})
            require(p.empty() || std::filesystem::exists(p), "ConfigError",
                    "referenced path does not exist: " + p);
    }
};

namespace detail {

inline void read_section(const nlohmann::json& sec, const std::string& name,
                         std::map<std::string, double>& out) {
    require(sec.is_object(), "ConfigError", "section '" + name + "' must be an object");
    for (auto it = sec.begin(); it != sec.end(); ++it) {
        require(it.value().is_number(), "ConfigError",
                "section '" + name + "' key '" + it.key() + "' must be numeric");
        out[it.key()] = it.value().get<double>();
    }
}

} // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
    RunConfig c;
    try {
        if (j.contains("command")) c.command = j.at("command").get<std::string>();
        if (j.contains("experiment"))
            c.experiment = j.at("experiment").get<std::string>();
        if (j.contains("seed")) {
            c.seed = j.at("seed").get<std::uint64_t>();
            c.has_seed = true;
        }
        if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
        if (j.contains("verbosity")) c.verbosity = j.at("verbosity").get<int>();
        if (j.contains("threads")) c.threads = j.at("threads").get<int>();
        if (j.contains("data") && j.at("data").contains("table"))
            c.data_path = j.at("data").at("table").get<std::string>();
        if (j.contains("geometry")) {
            const auto& g = j.at("geometry");
            if (g.contains("polygons"))
                c.geometry_path = g.at("polygons").get<std::string>();
            if (g.contains("mesh")) c.mesh_path = g.at("mesh").get<std::string>();
        }
        if (j.contains("model") && j.at("model").contains("spec"))
            c.spec_path = j.at("model").at("spec").get<std::string>();
        nlohmann::json m = j.value("model", nlohmann::json::object());
        m.erase("spec");
        detail::read_section(m, "model", c.model);
        if (j.contains("fit")) detail::read_section(j.at("fit"), "fit", c.fit);
        if (j.contains("consensus"))
            detail::read_section(j.at("consensus"), "consensus", c.consensus);
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", e.what());
    }
    return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["command"] = c.command;
    if (!c.experiment.empty()) j["experiment"] = c.experiment;
    if (c.has_seed) j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["verbosity"] = c.verbosity;
    j["threads"] = c.threads;
    if (!c.data_path.empty()) j["data"]["table"] = c.data_path;
    if (!c.geometry_path.empty()) j["geometry"]["polygons"] = c.geometry_path;
    if (!c.mesh_path.empty()) j["geometry"]["mesh"] = c.mesh_path;
    if (!c.spec_path.empty()) j["model"]["spec"] = c.spec_path;
    for (const auto& [k, v] : c.model) j["model"][k] = v;
    for (const auto& [k, v] : c.fit) j["fit"][k] = v;
    for (const auto& [k, v] : c.consensus) j["consensus"][k] = v;
    return j;
}

inline RunConfig read_config_file(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "ConfigError", "cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", std::string("parse of ") + path + ": " + e.what());
    }
    return parse_config(j);
}

inline void write_config_file(const std::string& path, const RunConfig& c) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "ConfigError", "cannot write config: " + path);
    out << config_to_json(c).dump(2) << '\n';
}

/** FNV-1a over the canonical dump; stable across runs and platforms. */
inline std::uint64_t config_hash(const RunConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Experiment bundle manifest
// ---------------------------------------------------------------------------

struct Manifest {
    RunConfig config;            // fully resolved (defaults filled in)
    std::string version;         // library version at emission time
    std::uint64_t hash = 0;      // config_hash of the resolved config
    std::vector<std::string> outputs;   // bundle-relative emitted files
    std::vector<std::string> notes;     // provenance remarks (e.g. simulated inputs)
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    nlohmann::json j;
    j["config"] = config_to_json(m.config);
    j["version"] = m.version;
    j["config_hash"] = m.hash;
    j["outputs"] = m.outputs;
    if (!m.notes.empty()) j["notes"] = m.notes;
    std::ofstream out(path);
    require(static_cast<bool>(out), "ConfigError", "cannot write manifest: " + path);
    out << j.dump(2) << '\n';
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "ConfigError", "cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", std::string("parse of ") + path + ": " + e.what());
    }
    Manifest m;
    try {
        m.config = parse_config(j.at("config"));
        m.version = j.value("version", "");
        m.hash = j.value("config_hash", std::uint64_t{0});
        if (j.contains("outputs"))
            for (const auto& o : j.at("outputs")) m.outputs.push_back(o);
        if (j.contains("notes"))
            for (const auto& o : j.at("notes")) m.notes.push_back(o);
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", e.what());
    }
    return m;
}

} // namespace costa

#endif
