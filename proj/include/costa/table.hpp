#ifndef COSTA_TABLE_HPP
#define COSTA_TABLE_HPP

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

/**
 * @file table.hpp
 * @brief Delimited text tables (comma separated, one header row).
 *
 * All file-based data exchange in the project flows through this type:
 * data tables, posterior summaries, plot grids, diagnostic reports.
 * Leading lines starting with '#' are preserved as comment metadata.
 */

namespace costa {

struct Table {
    std::vector<std::string> comments;       // without leading '#'
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;   // row-major

    int ncol() const { return static_cast<int>(columns.size()); }
    int nrow() const { return static_cast<int>(rows.size()); }

    int column_index(const std::string& name) const {
        for (int j = 0; j < ncol(); ++j)
            if (columns[j] == name) return j;
        return -1;
    }

    std::vector<double> column(const std::string& name) const {
        const int j = column_index(name);
        require(j >= 0, "UnknownColumn", "no column named '" + name + "'");
        std::vector<double> out(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) out[i] = rows[i][j];
        return out;
    }

    void add_row(const std::vector<double>& r) {
        require(static_cast<int>(r.size()) == ncol(), "DimensionMismatch",
                "row width does not match header");
        rows.push_back(r);
    }
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// Shortest decimal round-trip formatting, so emitted files are bitwise
// reproducible and re-ingest losslessly.
inline std::string format_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    double back = 0.0;
    std::istringstream(os.str()) >> back;
    if (back == x) {
        for (int prec = 1; prec < 17; ++prec) {
            std::ostringstream probe;
            probe << std::setprecision(prec) << x;
            double b2 = 0.0;
            std::istringstream(probe.str()) >> b2;
            if (b2 == x) return probe.str();
        }
    }
    return os.str();
}

} // namespace detail

inline Table read_table(std::istream& in, char sep = ',') {
    Table t;
    std::string line;
    bool have_header = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line[0] == '#') {
            t.comments.push_back(detail::trim(line.substr(1)));
            continue;
        }
        auto cells = detail::split(line, sep);
        if (!have_header) {
            for (auto& c : cells) t.columns.push_back(detail::trim(c));
            have_header = true;
            continue;
        }
        require(cells.size() == t.columns.size(), "MalformedRow",
                "line " + std::to_string(lineno) + ": expected " +
                    std::to_string(t.columns.size()) + " cells, got " +
                    std::to_string(cells.size()));
        std::vector<double> row(cells.size());
        for (std::size_t j = 0; j < cells.size(); ++j) {
            const std::string cell = detail::trim(cells[j]);
            try {
                std::size_t pos = 0;
                row[j] = std::stod(cell, &pos);
                require(pos == cell.size(), "MalformedRow", "bad number '" + cell + "'");
            } catch (const std::invalid_argument&) {
                fail("MalformedRow",
                     "line " + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        t.rows.push_back(std::move(row));
    }
    require(have_header, "EmptyTable", "no header row found");
    return t;
}

inline Table read_table_file(const std::string& path, char sep = ',') {
    std::ifstream in(path);
    require(in.good(), "FileNotFound", "cannot open '" + path + "'");
    return read_table(in, sep);
}

inline void write_table(std::ostream& out, const Table& t, char sep = ',') {
    for (const auto& c : t.comments) out << "# " << c << "\n";
    for (int j = 0; j < t.ncol(); ++j)
        out << (j ? std::string(1, sep) : "") << t.columns[j];
    out << "\n";
    for (const auto& row : t.rows) {
        for (int j = 0; j < t.ncol(); ++j)
            out << (j ? std::string(1, sep) : "") << detail::format_double(row[j]);
        out << "\n";
    }
}

inline void write_table_file(const std::string& path, const Table& t, char sep = ',') {
    std::ofstream out(path);
    require(out.good(), "FileNotWritable", "cannot write '" + path + "'");
    write_table(out, t, sep);
}

} // namespace costa

#endif
