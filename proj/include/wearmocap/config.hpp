#pragma once

// Flat "key = value" configuration text: one pair per line, '#' comments.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "wearmocap/errors.hpp"

namespace wearmocap::config {

using Map = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

} // namespace detail

inline Map parse(std::istream& in, const std::string& origin = "<config>") {
    Map out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ParseError("expected key = value in " + origin, line_no);
        const std::string key = detail::trim(trimmed.substr(0, eq));
        const std::string value = detail::trim(trimmed.substr(eq + 1));
        if (key.empty()) throw ParseError("empty key in " + origin, line_no);
        out[key] = value;
    }
    return out;
}

inline Map load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config file: " + path);
    return parse(f, path);
}

inline double get_num(const Map& m, const std::string& key, double fallback) {
    const auto it = m.find(key);
    if (it == m.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("config key '" + key + "' is not a number: " + it->second);
    }
}

inline std::string get_str(const Map& m, const std::string& key, const std::string& fallback) {
    const auto it = m.find(key);
    return it == m.end() ? fallback : it->second;
}

} // namespace wearmocap::config
