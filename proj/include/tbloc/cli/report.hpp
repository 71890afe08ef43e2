#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tbloc/cli/config.hpp"

#ifndef TBLOC_VERSION
#define TBLOC_VERSION "0.0.0"
#endif

namespace tbloc::cli {

// Shortest round-trip decimal form; infinities as "inf".
inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

struct Cell {
    std::string text;
    Cell(double v) : text(format_number(v)) {}
    Cell(int v) : text(std::to_string(v)) {}
    Cell(long v) : text(std::to_string(v)) {}
    Cell(std::size_t v) : text(std::to_string(v)) {}
    Cell(bool v) : text(v ? "true" : "false") {}
    Cell(std::string v) : text(std::move(v)) {}
    Cell(const char* v) : text(v) {}
};

struct Table {
    std::string name;  // file stem
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::initializer_list<Cell> cells) {
        std::vector<std::string> r;
        for (const auto& c : cells) r.push_back(c.text);
        if (r.size() != header.size()) throw InvalidArgument("table row width does not match header of " + name);
        rows.push_back(std::move(r));
    }

    std::string csv() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& v) {
            for (std::size_t k = 0; k < v.size(); ++k) {
                if (k) out += ',';
                out += v[k];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        return out;
    }
};

struct Report {
    json results = json::object();
    std::deque<Table> tables;  // references from table() stay valid
    bool checks_passed = true;  // selfcheck outcome

    Table& table(const std::string& name, std::vector<std::string> header) {
        for (auto& t : tables)
            if (t.name == name) return t;
        tables.push_back({name, std::move(header), {}});
        return tables.back();
    }
};

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Writes via a temporary file in the same directory and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + tmp.string() + " for writing");
        os << content;
        os.flush();
        if (!os) throw Error("write to " + tmp.string() + " failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot move " + tmp.string() + " into place: " + ec.message());
}

inline json summary_json(const ExperimentConfig& cfg, const Report& rep, const std::string& status,
                         const std::string& error) {
    json j;
    j["version"] = TBLOC_VERSION;
    j["timestamp"] = utc_timestamp();
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["config"] = to_json(cfg);
    j["results"] = rep.results;
    json files = json::array();
    for (const auto& t : rep.tables) files.push_back(t.name + ".csv");
    j["tables"] = files;
    return j;
}

inline void write_report(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Report& rep,
                         const std::string& status, const std::string& error = "") {
    std::filesystem::create_directories(dir);
    for (const auto& t : rep.tables) write_atomic(dir / (t.name + ".csv"), t.csv());
    write_atomic(dir / "summary.json", summary_json(cfg, rep, status, error).dump(2) + "\n");
}

}  // namespace tbloc::cli
