#pragma once

#include <string>
#include <vector>

namespace ddet {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

// Plain comma-separated output; fields must not contain commas or newlines
// (ours never do). Throws std::runtime_error on I/O failure. The `comments`
// lines, if any, are emitted first, each prefixed with "# "; read_csv skips
// them.
void write_csv(const std::string& path, const CsvTable& table, const std::vector<std::string>& comments = {});

// Reads a table written by write_csv. Throws on missing file or ragged rows.
CsvTable read_csv(const std::string& path);

} // namespace ddet
