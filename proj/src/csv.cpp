#include "fcm/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "fcm/error.hpp"

namespace fcm::csv {

std::size_t Table::Column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw DataError("csv: missing column '" + name + "'");
}

std::string FormatDouble(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

std::vector<std::string> SplitRow(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string JoinRow(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

Table Read(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  Table table;
  std::string line;
  if (!std::getline(in, line)) throw DataError(file.string() + ": empty csv");
  table.header = SplitRow(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = SplitRow(line);
    if (cells.size() != table.header.size()) {
      throw DataError(file.string() + ": row width does not match header");
    }
    table.rows.push_back(std::move(cells));
  }
  return table;
}

void Write(const std::filesystem::path& file, const Table& table) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << JoinRow(table.header) << '\n';
  for (const auto& row : table.rows) out << JoinRow(row) << '\n';
}

}  // namespace fcm::csv
