#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "permtail/errors.hpp"
#include "permtail/pipeline.hpp"
#include "permtail/simharness.hpp"

namespace permtail::io {

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : "NA";
}

namespace detail {

inline bool is_na_token(std::string_view s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan" || s == "NAN";
}

inline double parse_cell(std::string_view s, std::size_t line, std::size_t col) {
  if (is_na_token(s)) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw DataError("expected a number or NA, got '" + std::string(s) + "'", line, col);
  return v;
}

inline std::vector<std::string_view> split_line(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// A parsed rectangular table of doubles (NA cells become NaN).
struct NumericTable {
  std::vector<std::string> header;  // empty when the file had none
  std::vector<std::vector<double>> rows;
  std::size_t columns = 0;
};

inline NumericTable read_table(std::istream& in, char delim, bool has_header) {
  NumericTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view sv = detail::strip_cr(line);
    if (sv.empty() && t.rows.empty() && t.header.empty()) continue;  // leading blank lines
    if (sv.empty()) continue;
    const auto cells = detail::split_line(sv, delim);
    if (has_header && t.header.empty() && t.rows.empty()) {
      for (const auto c : cells) t.header.emplace_back(c);
      t.columns = cells.size();
      continue;
    }
    if (t.columns == 0) t.columns = cells.size();
    if (cells.size() != t.columns)
      throw DataError("row has " + std::to_string(cells.size()) + " fields, expected " +
                          std::to_string(t.columns),
                      lineno);
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c)
      row[c] = detail::parse_cell(cells[c], lineno, c + 1);
    t.rows.push_back(std::move(row));
  }
  if (t.rows.empty()) throw DataError("input contains no data rows");
  return t;
}

/// Input assembled for the workflow. Tests with too few usable permutation
/// rows (or a missing observed statistic) are excluded from `data` and
/// reported as invalid; tests that lost rows to NA values but keep at least
/// `min_valid` of them are forced to the empirical fallback.
struct LoadedData {
  std::vector<std::string> ids;    // every input test, in input order
  std::vector<double> t_obs_all;   // NaN for invalid tests
  std::vector<char> invalid;
  std::vector<std::size_t> data_pos;  // input position of each test inside `data`
  PermutationTestData data;
};

inline LoadedData assemble_tests(std::vector<std::string> ids, std::vector<double> observed,
                                 const std::vector<std::vector<double>>& columns, Tail tail,
                                 std::size_t min_valid = 50) {
  const std::size_t m = observed.size();
  if (columns.size() != m)
    throw DataError("observed statistics and permutation matrix disagree on test count");
  LoadedData out;
  out.ids = std::move(ids);
  out.t_obs_all = observed;
  out.invalid.assign(m, 0);

  std::vector<double> t_valid;
  std::vector<std::vector<double>> perms_valid;
  std::vector<char> fallback_valid;
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> col;
    col.reserve(columns[j].size());
    for (double v : columns[j])
      if (!std::isnan(v)) col.push_back(v);
    const bool had_na = col.size() != columns[j].size();
    if (std::isnan(observed[j]) || col.size() < std::max<std::size_t>(min_valid, 1)) {
      out.invalid[j] = 1;
      continue;
    }
    out.data_pos.push_back(j);
    t_valid.push_back(observed[j]);
    perms_valid.push_back(std::move(col));
    fallback_valid.push_back(had_na ? 1 : 0);
  }
  if (t_valid.empty()) throw DataError("no test has enough usable permutation rows");
  out.data = PermutationTestData::make(std::move(t_valid), std::move(perms_valid), tail);
  out.data.force_fallback = std::move(fallback_valid);
  return out;
}

/// Wide layout: columns are tests, first data row holds the observed
/// statistics, each following row is one permutation.
inline LoadedData load_wide(std::istream& in, char delim, bool has_header, Tail tail,
                            std::size_t min_valid = 50) {
  const NumericTable t = read_table(in, delim, has_header);
  if (t.rows.size() < 2) throw DataError("need an observed row plus at least one permutation row");
  std::vector<std::string> ids;
  if (!t.header.empty()) {
    ids = t.header;
  } else {
    for (std::size_t j = 0; j < t.columns; ++j) ids.push_back("test_" + std::to_string(j + 1));
  }
  std::vector<std::vector<double>> columns(t.columns);
  for (std::size_t j = 0; j < t.columns; ++j) {
    columns[j].reserve(t.rows.size() - 1);
    for (std::size_t r = 1; r < t.rows.size(); ++r) columns[j].push_back(t.rows[r][j]);
  }
  return assemble_tests(std::move(ids), t.rows.front(), columns, tail, min_valid);
}

/// Two-file layout: a vector of observed statistics (one row or one column)
/// plus a B x m permutation matrix.
inline LoadedData load_split(std::istream& obs_in, std::istream& perm_in, char delim,
                             bool has_header, Tail tail, std::size_t min_valid = 50) {
  const NumericTable ot = read_table(obs_in, delim, has_header);
  std::vector<double> observed;
  if (ot.rows.size() == 1) {
    observed = ot.rows.front();
  } else if (ot.columns == 1) {
    for (const auto& r : ot.rows) observed.push_back(r.front());
  } else {
    throw DataError("observed statistics must be a single row or a single column");
  }
  const NumericTable pt = read_table(perm_in, delim, has_header);
  if (pt.columns != observed.size())
    throw DataError("permutation matrix has " + std::to_string(pt.columns) +
                    " columns but there are " + std::to_string(observed.size()) +
                    " observed statistics");
  std::vector<std::string> ids;
  if (!ot.header.empty()) {
    ids = ot.header;
  } else if (!pt.header.empty()) {
    ids = pt.header;
  } else {
    for (std::size_t j = 0; j < observed.size(); ++j)
      ids.push_back("test_" + std::to_string(j + 1));
  }
  std::vector<std::vector<double>> columns(pt.columns);
  for (std::size_t j = 0; j < pt.columns; ++j) {
    columns[j].reserve(pt.rows.size());
    for (const auto& r : pt.rows) columns[j].push_back(r[j]);
  }
  return assemble_tests(std::move(ids), std::move(observed), columns, tail, min_valid);
}

inline constexpr std::string_view kRecordHeader =
    "test_id\tt_obs\tp_emp\tp_tail\tp_hybrid\tp_bh\tsource\tu\tk\tsigma_hat\txi_hat\tepsilon\tad_pvalue";

/// Stable output schema, one row per input test (invalid tests included).
inline void write_records_tsv(std::ostream& os, const LoadedData& loaded,
                              std::span<const PValueRecord> records) {
  if (records.size() != loaded.data_pos.size())
    throw DataError("write_records_tsv: record count does not match the loaded data");
  os << kRecordHeader << '\n';
  std::vector<const PValueRecord*> by_input(loaded.ids.size(), nullptr);
  for (std::size_t i = 0; i < records.size(); ++i)
    by_input[loaded.data_pos[i]] = &records[i];
  for (std::size_t j = 0; j < loaded.ids.size(); ++j) {
    os << loaded.ids[j] << '\t';
    if (loaded.invalid[j]) {
      const double t = loaded.t_obs_all[j];
      os << (std::isnan(t) ? "NA" : format_double(t))
         << "\tNA\tNA\tNA\tNA\tinvalid\tNA\tNA\tNA\tNA\tNA\tNA\n";
      continue;
    }
    const PValueRecord& r = *by_input[j];
    os << format_double(r.t_obs) << '\t' << format_double(r.p_emp) << '\t'
       << format_optional(r.p_tail) << '\t' << format_double(r.p_hybrid) << '\t'
       << format_double(r.p_bh) << '\t' << to_string(r.source) << '\t';
    if (r.fit) {
      const TailFit& f = *r.fit;
      os << format_double(f.u) << '\t' << f.k << '\t' << format_double(f.params.sigma) << '\t'
         << format_double(f.params.xi) << '\t' << format_optional(f.epsilon) << '\t'
         << format_double(f.ad.p_value);
    } else {
      os << "NA\tNA\tNA\tNA\tNA\tNA";
    }
    os << '\n';
  }
}

inline void write_comparison_tsv(std::ostream& os, std::span<const ComparisonRow> rows) {
  os << "family\tn\td\tB\trep\tmethod\traw_stat\tp_method\tp_reference\tratio\tzero\tsource\txi_hat\n";
  for (const auto& r : rows) {
    os << to_string(r.family) << '\t' << r.n << '\t' << format_double(r.d) << '\t' << r.B << '\t'
       << r.rep << '\t' << to_string(r.method) << '\t' << format_double(r.raw_stat) << '\t'
       << format_double(r.p_method) << '\t' << format_double(r.p_reference) << '\t'
       << format_double(r.ratio) << '\t' << (r.zero ? 1 : 0) << '\t' << to_string(r.source)
       << '\t' << (std::isnan(r.xi_hat) ? "NA" : format_double(r.xi_hat)) << '\n';
  }
}

inline void write_bench_tsv(std::ostream& os, std::span<const BenchCell> cells) {
  os << "method\txi0\tn\trmse_xi\trmse_sigma\tfailures\n";
  for (const auto& c : cells) {
    os << to_string(c.method) << '\t' << format_double(c.xi0) << '\t' << c.n << '\t'
       << format_double(c.rmse_xi) << '\t' << format_double(c.rmse_sigma) << '\t' << c.failures
       << '\n';
  }
}

}  // namespace permtail::io
