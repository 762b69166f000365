#pragma once

// Run directories: every command writes its artifacts under a directory named
// by UTC timestamp plus a prefix of the resolved config digest, with a fixed
// layout (weights/, adapters/, synth/, reports/, logs/).  A run.json in the
// root records what was run; the resolved config is echoed next to it.
//
// The timestamp (and wall time inside run.json) are the only
// non-deterministic bytes a run produces; everything under the
// subdirectories depends solely on inputs and seeds.

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include "echogen/config.hpp"
#include "echogen/error.hpp"

namespace echogen {

// Default output root: $ECHOGEN_RUNS when set and non-empty, else "runs".
inline std::string default_output_root() {
    const char* env = std::getenv("ECHOGEN_RUNS");
    if (env != nullptr && env[0] != '\0') return env;
    return "runs";
}

struct RunDir {
    std::string root;

    std::string weights() const { return (std::filesystem::path(root) / "weights").generic_string(); }
    std::string adapters() const { return (std::filesystem::path(root) / "adapters").generic_string(); }
    std::string synth() const { return (std::filesystem::path(root) / "synth").generic_string(); }
    std::string reports() const { return (std::filesystem::path(root) / "reports").generic_string(); }
    std::string logs() const { return (std::filesystem::path(root) / "logs").generic_string(); }

    std::string path(const std::string& rel) const {
        return (std::filesystem::path(root) / rel).generic_string();
    }
};

namespace detail {

inline std::string utc_timestamp(std::time_t now) {
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

inline std::string iso8601_utc(std::time_t now) {
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[40];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

// Creates `<out_root>/<timestamp>-<digest prefix>` and the fixed subdirectory
// layout.  A numeric suffix disambiguates runs started within the same second.
inline RunDir create_run_dir(const std::string& out_root, const std::string& digest) {
    namespace fs = std::filesystem;
    if (digest.size() < 12) throw ValueError("run directory needs a config digest (got '" + digest + "')");
    std::error_code ec;
    fs::create_directories(out_root, ec);
    if (ec) throw IoError("cannot create output root: " + out_root);

    const std::string stem = detail::utc_timestamp(std::time(nullptr)) + "-" + digest.substr(0, 12);
    fs::path chosen;
    for (int attempt = 1; attempt <= 1000; attempt++) {
        fs::path candidate = fs::path(out_root) / (attempt == 1 ? stem : stem + "-" + std::to_string(attempt));
        if (!fs::exists(candidate)) {
            chosen = candidate;
            break;
        }
    }
    if (chosen.empty()) throw IoError("cannot find a free run directory name under " + out_root);

    RunDir rd{chosen.generic_string()};
    for (const std::string& sub : {rd.root, rd.weights(), rd.adapters(), rd.synth(), rd.reports(), rd.logs()}) {
        fs::create_directories(sub, ec);
        if (ec) throw IoError("cannot create run directory: " + sub);
    }
    return rd;
}

// run.json: which command ran, under which resolved config and seed, and how
// long it took.  started_at and wall_time_seconds are expected to differ
// between reruns; every other artifact of a run must not.
inline void write_run_json(const RunDir& rd, const std::string& command, const std::string& digest,
                           std::uint64_t seed, double wall_seconds) {
    char wall[64];
    std::snprintf(wall, sizeof(wall), "%.3f", wall_seconds);
    std::string json = "{\n";
    json += "  \"command\": \"" + command + "\",\n";
    json += "  \"config_digest\": \"" + digest + "\",\n";
    json += "  \"seed\": " + std::to_string(seed) + ",\n";
    json += "  \"started_at\": \"" + detail::iso8601_utc(std::time(nullptr)) + "\",\n";
    json += "  \"wall_time_seconds\": " + std::string(wall) + "\n";
    json += "}\n";
    const std::string path = rd.path("run.json");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << json;
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace echogen
