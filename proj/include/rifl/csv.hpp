#pragma once

// Minimal CSV emission. Floats always use 6 significant digits so reruns are
// byte-identical.

#include <cstdio>
#include <initializer_list>
#include <string>
#include <vector>

namespace rifl {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  class Row {
   public:
    Row& add(const std::string& s) {
      cells_.push_back(s);
      return *this;
    }
    Row& add(const char* s) { return add(std::string(s)); }
    Row& add(double v) { return add(fmt6(v)); }
    Row& add(int v) { return add(std::to_string(v)); }
    Row& add(long v) { return add(std::to_string(v)); }
    Row& add(unsigned long v) { return add(std::to_string(v)); }
    Row& add(unsigned long long v) { return add(std::to_string(v)); }
    Row& add(long long v) { return add(std::to_string(v)); }

   private:
    friend class CsvTable;
    std::vector<std::string> cells_;
  };

  Row& row() { return rows_.emplace_back(); }

  /// Lines starting with '#' before the header, e.g. seed and config hash.
  void comment(const std::string& line) { comments_.push_back(line); }

  std::size_t rows() const { return rows_.size(); }

  std::string str() const {
    std::string out;
    for (const auto& c : comments_) out += "# " + c + "\n";
    out += join(header_);
    for (const auto& r : rows_) out += join(r.cells_);
    return out;
  }

 private:
  static std::string join(const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line += ',';
      line += cells[i];
    }
    return line + "\n";
  }

  std::vector<std::string> header_;
  std::vector<std::string> comments_;
  std::vector<Row> rows_;
};

}  // namespace rifl
