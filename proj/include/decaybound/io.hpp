/**
 * @file io.hpp
 * @brief CSV ingestion (units, sources, panels) and CSV writers.
 *
 * The reader handles RFC 4180 quoting, CRLF line ends and a UTF-8 BOM.
 * Numbers are written with std::to_chars (shortest round-trip form).
 */
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "decaybound/error.hpp"
#include "decaybound/estimation.hpp"
#include "decaybound/geo.hpp"
#include "decaybound/panel_did.hpp"

namespace decaybound {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline CsvTable parse_csv(std::string_view text, const std::string& source_name = "<memory>") {
  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
  CsvTable t;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_quoted = false;
  std::size_t line = 1;
  std::size_t record_line = 1;

  auto end_field = [&] {
    record.push_back(field_quoted ? field : detail::trim(field));
    field.clear();
    field_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = record.size() == 1 && record[0].empty();
    if (!blank) {
      if (t.header.empty()) {
        t.header = std::move(record);
      } else {
        t.rows.push_back(std::move(record));
        t.line_numbers.push_back(record_line);
      }
    }
    record.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!detail::trim(field).empty())
          throw Error(ErrorCode::ParseError, source_name + ": stray quote on line " + std::to_string(line));
        field.clear();
        in_quotes = true;
        field_quoted = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        record_line = line;
        break;
      default:
        field.push_back(c);
    }
  }
  if (in_quotes)
    throw Error(ErrorCode::ParseError, source_name + ": unterminated quoted field starting before line " +
                                           std::to_string(line));
  if (!field.empty() || !record.empty()) end_record();
  if (t.header.empty()) throw Error(ErrorCode::EmptyFile, source_name + ": file has no header");
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'", {path});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path);
}

/// Parses a finite double; empty and NA-like strings are "missing" (nullopt).
inline std::optional<double> parse_number(std::string_view s, bool& malformed) {
  malformed = false;
  if (s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null") return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    malformed = true;
    return std::nullopt;
  }
  return v;
}

inline std::optional<bool> parse_flag(std::string_view s) {
  if (s == "1" || s == "true" || s == "TRUE" || s == "True") return true;
  if (s == "0" || s == "false" || s == "FALSE" || s == "False") return false;
  return std::nullopt;
}

inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

/// Quotes a field when it contains a delimiter, quote or line break.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// ---------------------------------------------------------------------------
// Units

struct DroppedRow {
  std::size_t line{};
  std::string unit_id;
  std::string reason;
};

struct IngestReport {
  std::size_t rows_read{};
  std::size_t rows_kept{};
  std::size_t missing_outcome{};
  std::vector<DroppedRow> dropped;
};

struct UnitsData {
  Sample sample;
  bool has_distance = false;  // distance_km column present
  IngestReport report;
};

struct IngestOptions {
  /// Unparseable rows raise ParseError instead of being dropped.
  bool strict = false;
};

/**
 * Reads unit_id, latitude, longitude and the outcome column; distance_km is
 * taken when present and every other numeric column becomes a covariate.
 */
inline UnitsData ingest_units(const CsvTable& t, const std::string& outcome, const IngestOptions& opt = {},
                              const std::string& source_name = "units") {
  for (const char* req : {"unit_id", "latitude", "longitude"})
    if (!t.column(req)) throw Error(ErrorCode::MissingColumn, source_name + ": missing column '" + req + "'", {req});
  if (!t.column(outcome))
    throw Error(ErrorCode::MissingColumn, source_name + ": missing outcome column '" + outcome + "'", {outcome});
  if (t.rows.empty()) throw Error(ErrorCode::EmptyFile, source_name + ": no data rows");

  const auto c_id = *t.column("unit_id");
  const auto c_lat = *t.column("latitude");
  const auto c_lon = *t.column("longitude");
  const auto c_y = *t.column(outcome);
  const auto c_d = t.column("distance_km");
  std::vector<std::size_t> cov_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c)
    if (c != c_id && c != c_lat && c != c_lon && c != c_y && c != c_d) cov_cols.push_back(c);

  UnitsData out;
  out.has_distance = c_d.has_value();
  out.report.rows_read = t.rows.size();
  std::set<std::string> seen;

  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.line_numbers[r];
    auto drop = [&](const std::string& id, const std::string& reason) {
      if (opt.strict)
        throw Error(ErrorCode::ParseError, source_name + " line " + std::to_string(line) + ": " + reason,
                    {std::to_string(line)});
      out.report.dropped.push_back({line, id, reason});
    };
    if (row.size() != t.header.size()) {
      drop(row.empty() ? "" : row[0], "expected " + std::to_string(t.header.size()) + " fields, found " +
                                          std::to_string(row.size()));
      continue;
    }
    const std::string& id = row[c_id];
    if (id.empty()) {
      drop(id, "empty unit_id");
      continue;
    }
    bool bad_lat = false, bad_lon = false, bad_y = false, bad_d = false;
    const auto lat = parse_number(row[c_lat], bad_lat);
    const auto lon = parse_number(row[c_lon], bad_lon);
    const auto y = parse_number(row[c_y], bad_y);
    std::optional<double> d;
    if (c_d) d = parse_number(row[*c_d], bad_d);
    if (bad_lat || bad_lon || !lat || !lon) {
      drop(id, "unparseable latitude/longitude");
      continue;
    }
    if (bad_y) {
      drop(id, "unparseable outcome '" + row[c_y] + "'");
      continue;
    }
    if (bad_d || (c_d && (!d || *d < 0.0))) {
      drop(id, "invalid distance_km '" + row[*c_d] + "'");
      continue;
    }
    if (!y) {
      ++out.report.missing_outcome;
      out.report.dropped.push_back({line, id, "missing outcome"});
      continue;
    }
    GeoPoint p;
    try {
      p = make_geo_point(*lat, *lon);
    } catch (const Error& e) {
      drop(id, e.what());
      continue;
    }
    if (!seen.insert(id).second)
      throw Error(ErrorCode::DuplicateUnitId, source_name + ": duplicate unit_id '" + id + "'", {id});

    Observation o;
    o.unit_id = id;
    o.location = p;
    o.outcome = *y;
    o.distance_km = d.value_or(0.0);
    for (auto c : cov_cols) {
      bool bad = false;
      if (auto v = parse_number(row[c], bad)) o.covariates[t.header[c]] = *v;
    }
    out.sample.rows.push_back(std::move(o));
  }
  out.report.rows_kept = out.sample.size();
  return out;
}

inline UnitsData ingest_units(const std::string& path, const std::string& outcome, const IngestOptions& opt = {}) {
  return ingest_units(read_csv(path), outcome, opt, path);
}

/// Fills distance_km from the nearest source.
inline void attach_distances(Sample& sample, const SourceSet& sources) {
  std::vector<UnitLocation> locs;
  locs.reserve(sample.size());
  for (const auto& r : sample.rows) locs.push_back({r.unit_id, r.location});
  const auto table = build_distance_table(locs, sources);
  for (std::size_t i = 0; i < sample.size(); ++i) sample.rows[i].distance_km = table[i].distance_km;
}

// ---------------------------------------------------------------------------
// Sources and panels

inline SourceSet ingest_sources(const CsvTable& t, const std::string& source_name = "sources") {
  for (const char* req : {"source_id", "latitude", "longitude"})
    if (!t.column(req)) throw Error(ErrorCode::MissingColumn, source_name + ": missing column '" + req + "'", {req});
  const auto c_id = *t.column("source_id");
  const auto c_lat = *t.column("latitude");
  const auto c_lon = *t.column("longitude");
  std::vector<Source> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    bool b1 = false, b2 = false;
    const auto lat = row.size() == t.header.size() ? parse_number(row[c_lat], b1) : std::nullopt;
    const auto lon = row.size() == t.header.size() ? parse_number(row[c_lon], b2) : std::nullopt;
    if (!lat || !lon)
      throw Error(ErrorCode::ParseError, source_name + " line " + std::to_string(t.line_numbers[r]) +
                                             ": unparseable source coordinates",
                  {std::to_string(t.line_numbers[r])});
    out.push_back({row[c_id], make_geo_point(*lat, *lon)});
  }
  if (out.empty()) throw Error(ErrorCode::EmptySourceSet, source_name + ": no sources");
  return SourceSet(std::move(out));
}

inline SourceSet ingest_sources(const std::string& path) { return ingest_sources(read_csv(path), path); }

/// Panel CSV: unit_id, year, outcome, treated_post, distance_km, then 0/1 modifier columns.
inline Panel ingest_panel(const CsvTable& t, const std::string& source_name = "panel") {
  for (const char* req : {"unit_id", "year", "outcome", "treated_post"})
    if (!t.column(req)) throw Error(ErrorCode::MissingColumn, source_name + ": missing column '" + req + "'", {req});
  const auto c_id = *t.column("unit_id");
  const auto c_year = *t.column("year");
  const auto c_y = *t.column("outcome");
  const auto c_tp = *t.column("treated_post");
  const auto c_d = t.column("distance_km");
  std::vector<std::size_t> mod_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c)
    if (c != c_id && c != c_year && c != c_y && c != c_tp && c != c_d) mod_cols.push_back(c);
  if (t.rows.empty()) throw Error(ErrorCode::EmptyFile, source_name + ": no data rows");

  Panel p;
  p.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = source_name + " line " + std::to_string(t.line_numbers[r]);
    if (row.size() != t.header.size()) throw Error(ErrorCode::ParseError, where + ": wrong field count");
    PanelObservation o;
    o.unit_id = row[c_id];
    bool bad = false;
    const auto year = parse_number(row[c_year], bad);
    const auto y = parse_number(row[c_y], bad);
    const auto tp = parse_flag(row[c_tp]);
    if (!year || *year != std::floor(*year) || !y || !tp)
      throw Error(ErrorCode::ParseError, where + ": unparseable year/outcome/treated_post",
                  {std::to_string(t.line_numbers[r])});
    o.year = static_cast<int>(*year);
    o.outcome = *y;
    o.treated_post = *tp;
    if (c_d) {
      const auto d = parse_number(row[*c_d], bad);
      if (!d) throw Error(ErrorCode::ParseError, where + ": unparseable distance_km");
      o.distance_km = *d;
    }
    for (auto c : mod_cols) {
      const auto f = parse_flag(row[c]);
      if (!f) throw Error(ErrorCode::ParseError, where + ": modifier '" + t.header[c] + "' must be 0/1");
      o.modifiers[t.header[c]] = *f;
    }
    p.push_back(std::move(o));
  }
  return p;
}

inline Panel ingest_panel(const std::string& path) { return ingest_panel(read_csv(path), path); }

// ---------------------------------------------------------------------------
// Writers

inline void write_units_csv(std::ostream& os, const Sample& s, const std::string& outcome) {
  std::set<std::string> covs;
  for (const auto& r : s.rows)
    for (const auto& [k, v] : r.covariates) covs.insert(k);
  os << "unit_id,latitude,longitude," << csv_field(outcome);
  for (const auto& c : covs) os << ',' << csv_field(c);
  os << '\n';
  for (const auto& r : s.rows) {
    os << csv_field(r.unit_id) << ',' << format_number(r.location.latitude) << ','
       << format_number(r.location.longitude) << ',' << format_number(r.outcome);
    for (const auto& c : covs) {
      os << ',';
      if (auto it = r.covariates.find(c); it != r.covariates.end()) os << format_number(it->second);
    }
    os << '\n';
  }
}

inline void write_sources_csv(std::ostream& os, const SourceSet& s) {
  os << "source_id,latitude,longitude\n";
  for (const auto& src : s.sources())
    os << csv_field(src.id) << ',' << format_number(src.location.latitude) << ','
       << format_number(src.location.longitude) << '\n';
}

inline void write_distance_table_csv(std::ostream& os, const std::vector<DistanceRecord>& t) {
  os << "unit_id,distance_km,nearest_source_id\n";
  for (const auto& r : t)
    os << csv_field(r.unit_id) << ',' << format_number(r.distance_km) << ',' << csv_field(r.nearest_source_id) << '\n';
}

inline void write_panel_csv(std::ostream& os, const Panel& p) {
  std::set<std::string> mods;
  for (const auto& o : p)
    for (const auto& [k, v] : o.modifiers) mods.insert(k);
  os << "unit_id,year,outcome,treated_post,distance_km";
  for (const auto& m : mods) os << ',' << csv_field(m);
  os << '\n';
  for (const auto& o : p) {
    os << csv_field(o.unit_id) << ',' << o.year << ',' << format_number(o.outcome) << ',' << (o.treated_post ? 1 : 0)
       << ',' << format_number(o.distance_km);
    for (const auto& m : mods) {
      auto it = o.modifiers.find(m);
      os << ',' << (it != o.modifiers.end() && it->second ? 1 : 0);
    }
    os << '\n';
  }
}

}  // namespace decaybound
