#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>

#include <json.hpp>

#include "quantloop/errors.hpp"

namespace quantloop {

using json = nlohmann::json;

// JSON has no NaN literal; metric channels that are undefined round-trip as
// null.
inline json json_double(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

inline double double_from_json(const json& j) {
    if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return j.get<double>();
}

inline json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

// Write-then-rename so a crash never leaves a torn file behind.
inline void atomic_write_file(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp);
        out << contents;
        out.flush();
        if (!out) throw Error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw Error("rename failed: " + path);
    }
}

inline void save_json_file(const std::string& path, const json& j, int indent = 2) {
    atomic_write_file(path, j.dump(indent) + "\n");
}

}  // namespace quantloop
