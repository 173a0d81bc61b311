#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pscdet/error.hpp"
#include "pscdet/schema.hpp"

namespace pscdet {

inline std::string csv_header() {
  std::string h = "id";
  for (const char* name : kAttributeNames) {
    h += ',';
    h += name;
  }
  h += ",detained,split";
  return h;
}

// Shortest representation that parses back to the same binary64.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

[[noreturn]] inline void row_error(std::size_t line_no, const char* column,
                                   const std::string& msg) {
  throw DataError("line " + std::to_string(line_no) + ", column '" + column +
                  "': " + msg);
}

inline double parse_double(std::string_view f, std::size_t line_no,
                           const char* column) {
  double v = 0.0;
  auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (res.ec != std::errc{} || res.ptr != f.data() + f.size())
    row_error(line_no, column, "not a real number: '" + std::string(f) + "'");
  if (!std::isfinite(v)) row_error(line_no, column, "non-finite value");
  return v;
}

inline int parse_int(std::string_view f, std::size_t line_no,
                     const char* column) {
  long long v = 0;
  auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (res.ec != std::errc{} || res.ptr != f.data() + f.size())
    row_error(line_no, column, "not an integer: '" + std::string(f) + "'");
  if (v < std::numeric_limits<int>::min() ||
      v > std::numeric_limits<int>::max())
    row_error(line_no, column, "integer out of range");
  return static_cast<int>(v);
}

}  // namespace detail

inline std::vector<PscRecord> load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header())
    throw DataError(path + ": unexpected header '" + line + "'");

  std::vector<PscRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;  // tolerate trailing blank lines
    auto f = detail::split_fields(line);
    if (f.size() != kNumAttributes + 3) {
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(kNumAttributes + 3) + " fields, got " +
                      std::to_string(f.size()));
    }
    PscRecord r;
    std::size_t i = 0;
    r.id = std::string(f[i++]);
    if (r.id.empty()) detail::row_error(line_no, "id", "must be non-empty");
    r.ship_tonnage = detail::parse_double(f[i++], line_no, "ship_tonnage");
    r.flag_performance = detail::parse_int(f[i++], line_no, "flag_performance");
    r.recognized_organization =
        detail::parse_int(f[i++], line_no, "recognized_organization");
    r.company_performance =
        detail::parse_int(f[i++], line_no, "company_performance");
    r.classification_society_number =
        detail::parse_int(f[i++], line_no, "classification_society_number");
    r.ship_type = detail::parse_int(f[i++], line_no, "ship_type");
    r.ship_age = detail::parse_double(f[i++], line_no, "ship_age");
    r.last_deficiency_number =
        detail::parse_int(f[i++], line_no, "last_deficiency_number");
    r.interval_days = detail::parse_int(f[i++], line_no, "interval_days");
    r.last_inspection_state =
        detail::parse_int(f[i++], line_no, "last_inspection_state");
    r.avg_def_36m = detail::parse_double(f[i++], line_no, "avg_def_36m");
    r.max_def_36m = detail::parse_int(f[i++], line_no, "max_def_36m");
    r.prob_def_36m = detail::parse_double(f[i++], line_no, "prob_def_36m");
    r.total_def_36m = detail::parse_int(f[i++], line_no, "total_def_36m");
    std::string_view det = f[i++];
    if (det == "0") {
      r.detained = false;
    } else if (det == "1") {
      r.detained = true;
    } else {
      detail::row_error(line_no, "detained",
                        "must be 0 or 1, got '" + std::string(det) + "'");
    }
    auto sp = split_from_name(std::string(f[i++]));
    if (!sp) detail::row_error(line_no, "split", "unknown split tag");
    r.split = *sp;
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_csv(const std::vector<PscRecord>& records,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << csv_header() << '\n';
  for (const auto& r : records) {
    if (r.id.find_first_of(",\"\n\r") != std::string::npos) {
      throw DataError("record id '" + r.id + "' contains a reserved character");
    }
    out << r.id << ',' << format_double(r.ship_tonnage) << ','
        << r.flag_performance << ',' << r.recognized_organization << ','
        << r.company_performance << ',' << r.classification_society_number
        << ',' << r.ship_type << ',' << format_double(r.ship_age) << ','
        << r.last_deficiency_number << ',' << r.interval_days << ','
        << r.last_inspection_state << ',' << format_double(r.avg_def_36m)
        << ',' << r.max_def_36m << ',' << format_double(r.prob_def_36m) << ','
        << r.total_def_36m << ',' << (r.detained ? '1' : '0') << ','
        << split_name(r.split) << '\n';
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace pscdet
