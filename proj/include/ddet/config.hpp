#pragma once

#include <map>
#include <string>

namespace ddet {

// key = value configuration file: one pair per line, '#' starts a comment,
// whitespace around keys/values is trimmed. Parse errors name the line;
// typed getters name the offending key.
class Config {
   public:
    Config() = default;
    static Config from_file(const std::string& path);
    static Config from_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;

    const std::map<std::string, std::string>& values() const { return values_; }

   private:
    std::map<std::string, std::string> values_;
};

} // namespace ddet
