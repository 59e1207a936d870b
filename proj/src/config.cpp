#include "ddet/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ddet {

namespace {
std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}
} // namespace

Config Config::from_string(const std::string& text, const std::string& origin) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key = value, got '" + line +
                                     "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = val;
    }
    return cfg;
}

Config Config::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str(), path);
}

std::string Config::get_str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
    return it->second;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

long Config::get_int(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::runtime_error("config: invalid integer for key '" + key + "': '" + s + "'");
    }
}

long Config::get_int(const std::string& key, long fallback) const { return has(key) ? get_int(key) : fallback; }

double Config::get_double(const std::string& key) const {
    const std::string s = get_str(key);
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::runtime_error("config: invalid number for key '" + key + "': '" + s + "'");
    }
}

double Config::get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool Config::get_bool(const std::string& key) const {
    const std::string s = get_str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::runtime_error("config: invalid boolean for key '" + key + "': '" + s + "'");
}

bool Config::get_bool(const std::string& key, bool fallback) const { return has(key) ? get_bool(key) : fallback; }

} // namespace ddet
