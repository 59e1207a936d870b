#include "ddet/csv.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ddet {

namespace {
std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}
} // namespace

void write_csv(const std::string& path, const CsvTable& table, const std::vector<std::string>& comments) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_csv: cannot open " + path);
    for (const auto& c : comments) f << "# " << c << '\n';
    auto emit = [&](const std::vector<std::string>& row) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) f << ',';
            f << row[i];
        }
        f << '\n';
    };
    emit(table.header);
    for (const auto& r : table.rows) {
        if (r.size() != table.header.size())
            throw std::runtime_error("write_csv: row width mismatch in " + path);
        emit(r);
    }
    if (!f) throw std::runtime_error("write_csv: write failed for " + path);
}

CsvTable read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_csv: cannot open " + path);
    CsvTable t;
    std::string line;
    do {
        if (!std::getline(f, line)) throw std::runtime_error("read_csv: empty file " + path);
    } while (line.empty() || line[0] == '#'); // leading comment lines (machine info)
    t.header = split_line(line);
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto row = split_line(line);
        if (row.size() != t.header.size())
            throw std::runtime_error("read_csv: ragged row in " + path + ": " + line);
        t.rows.push_back(std::move(row));
    }
    return t;
}

} // namespace ddet
