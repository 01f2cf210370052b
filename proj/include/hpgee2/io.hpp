#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "hpgee2/error.hpp"
#include "hpgee2/hpgee2.hpp"
#include "hpgee2/inference.hpp"
#include "hpgee2/model.hpp"
#include "hpgee2/simulator.hpp"

namespace hpgee2 {

inline constexpr const char* kInterceptName = "(Intercept)";

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// A comma-separated file with a header row; blank and '#' lines skipped.
struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_dataset", path, 0, "cannot open file");
  CsvTable t;
  t.path = path;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view v = trim(line);
    if (v.empty() || v.front() == '#') continue;
    auto fields = split_csv(v);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size())
      throw ParseError("load_dataset", path, lineno,
                       "expected " + std::to_string(t.header.size()) + " fields, found " +
                           std::to_string(fields.size()));
    t.rows.push_back(std::move(fields));
    t.line_numbers.push_back(lineno);
  }
  if (!have_header) throw ParseError("load_dataset", path, lineno, "missing header row");
  return t;
}

inline double parse_number(const std::string& s, const std::string& path, std::size_t line) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto r = std::from_chars(first, last, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != last || !std::isfinite(v))
    throw ParseError("load_dataset", path, line, "unparseable number '" + s + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace detail

// Unit file columns: cluster_id, unit_id, y, mean covariates.
// Pair file columns: cluster_id, unit_j, unit_k, association covariates.
// With `intercept` an intercept column is prepended to both designs.
inline Dataset load_dataset(const std::string& unit_path, const std::string& pair_path,
                            bool intercept = true) {
  const detail::CsvTable units = detail::read_csv(unit_path);
  const detail::CsvTable pairs = detail::read_csv(pair_path);
  if (units.header.size() < 3)
    throw ParseError("load_dataset", unit_path, 1, "unit header needs cluster_id, unit_id, y");
  if (pairs.header.size() < 3)
    throw ParseError("load_dataset", pair_path, 1, "pair header needs cluster_id, unit_j, unit_k");

  Dataset d;
  d.mean_intercept = intercept;
  d.assoc_intercept = intercept;
  if (intercept) {
    d.mean_names.emplace_back(kInterceptName);
    d.assoc_names.emplace_back(kInterceptName);
  }
  d.mean_names.insert(d.mean_names.end(), units.header.begin() + 3, units.header.end());
  d.assoc_names.insert(d.assoc_names.end(), pairs.header.begin() + 3, pairs.header.end());
  const Index p = d.p();
  const Index q = d.q();
  const Index off = intercept ? 1 : 0;

  struct Pending {
    std::vector<std::string> unit_ids;
    std::map<std::string, Index> unit_pos;
    std::vector<VectorXd> x_rows;
    std::vector<double> y;
    std::vector<std::optional<VectorXd>> z_rows;
    std::vector<std::size_t> z_lines;
  };
  std::vector<std::string> order;
  std::map<std::string, Pending> byid;

  for (std::size_t r = 0; r < units.rows.size(); ++r) {
    const auto& f = units.rows[r];
    const std::size_t line = units.line_numbers[r];
    auto [it, fresh] = byid.try_emplace(f[0]);
    if (fresh) order.push_back(f[0]);
    Pending& c = it->second;
    if (!c.unit_pos.emplace(f[1], static_cast<Index>(c.unit_ids.size())).second)
      throw ParseError("load_dataset", unit_path, line,
                       "duplicate unit '" + f[1] + "' in cluster '" + f[0] + "'");
    c.unit_ids.push_back(f[1]);
    const double y = detail::parse_number(f[2], unit_path, line);
    if (y != 0.0 && y != 1.0)
      throw ParseError("load_dataset", unit_path, line, "response '" + f[2] + "' is not 0/1");
    c.y.push_back(y);
    VectorXd row(p);
    if (intercept) row(0) = 1.0;
    for (Index k = 0; k + off < p; ++k)
      row(k + off) = detail::parse_number(f[static_cast<std::size_t>(3 + k)], unit_path, line);
    c.x_rows.push_back(std::move(row));
  }

  for (auto& [id, c] : byid) {
    const Index n = static_cast<Index>(c.unit_ids.size());
    c.z_rows.assign(static_cast<std::size_t>(n * (n - 1) / 2), std::nullopt);
    c.z_lines.assign(c.z_rows.size(), 0);
  }

  for (std::size_t r = 0; r < pairs.rows.size(); ++r) {
    const auto& f = pairs.rows[r];
    const std::size_t line = pairs.line_numbers[r];
    const auto it = byid.find(f[0]);
    if (it == byid.end())
      throw ParseError("load_dataset", pair_path, line, "unknown cluster '" + f[0] + "'");
    Pending& c = it->second;
    const auto uj = c.unit_pos.find(f[1]);
    const auto uk = c.unit_pos.find(f[2]);
    if (uj == c.unit_pos.end() || uk == c.unit_pos.end())
      throw ParseError("load_dataset", pair_path, line,
                       "pair references unknown unit in cluster '" + f[0] + "'");
    Index j = uj->second;
    Index k = uk->second;
    if (j == k) throw ParseError("load_dataset", pair_path, line, "pair of a unit with itself");
    if (j > k) std::swap(j, k);
    const Index n = static_cast<Index>(c.unit_ids.size());
    // Position of (j, k) in lexicographic order.
    const auto slot = static_cast<std::size_t>(j * n - j * (j + 1) / 2 + (k - j - 1));
    if (c.z_rows[slot])
      throw ParseError("load_dataset", pair_path, line,
                       "duplicate pair (" + f[1] + ", " + f[2] + ") in cluster '" + f[0] +
                           "' (first on line " + std::to_string(c.z_lines[slot]) + ")");
    VectorXd row(q);
    if (intercept) row(0) = 1.0;
    for (Index m = 0; m + off < q; ++m)
      row(m + off) = detail::parse_number(f[static_cast<std::size_t>(3 + m)], pair_path, line);
    c.z_rows[slot] = std::move(row);
    c.z_lines[slot] = line;
  }

  d.clusters.reserve(order.size());
  for (const auto& id : order) {
    Pending& c = byid.at(id);
    const Index n = static_cast<Index>(c.unit_ids.size());
    ClusterData cd;
    cd.id = id;
    cd.y = Eigen::Map<const VectorXd>(c.y.data(), n);
    cd.x.resize(n, p);
    for (Index j = 0; j < n; ++j) cd.x.row(j) = c.x_rows[static_cast<std::size_t>(j)].transpose();
    cd.pairs = lexicographic_pairs(n);
    cd.z.resize(static_cast<Index>(cd.pairs.size()), q);
    for (std::size_t r = 0; r < cd.pairs.size(); ++r) {
      if (!c.z_rows[r])
        throw ParseError("load_dataset", pair_path, 0,
                         "cluster '" + id + "' is missing pair (" +
                             c.unit_ids[static_cast<std::size_t>(cd.pairs[r].first)] + ", " +
                             c.unit_ids[static_cast<std::size_t>(cd.pairs[r].second)] + ")");
      cd.z.row(static_cast<Index>(r)) = c.z_rows[r]->transpose();
    }
    d.clusters.push_back(std::move(cd));
  }
  validate_dataset(d);
  return d;
}

// Unit and pair tables in the load_dataset format; intercept columns are
// omitted and unit ids are positions 1..n_i. `comments` go first as '#' lines.
inline std::pair<std::string, std::string> format_dataset(
    const Dataset& d, const std::vector<std::string>& comments = {}) {
  std::ostringstream u;
  std::ostringstream pr;
  for (const auto& c : comments) {
    u << "# " << c << '\n';
    pr << "# " << c << '\n';
  }
  const Index xo = d.mean_intercept ? 1 : 0;
  const Index zo = d.assoc_intercept ? 1 : 0;
  u << "cluster_id,unit_id,y";
  for (Index k = xo; k < d.p(); ++k) u << ',' << d.mean_names[static_cast<std::size_t>(k)];
  u << '\n';
  pr << "cluster_id,unit_j,unit_k";
  for (Index k = zo; k < d.q(); ++k) pr << ',' << d.assoc_names[static_cast<std::size_t>(k)];
  pr << '\n';
  for (const auto& c : d.clusters) {
    for (Index j = 0; j < c.size(); ++j) {
      u << c.id << ',' << (j + 1) << ',' << (c.y(j) == 1.0 ? 1 : 0);
      for (Index k = xo; k < d.p(); ++k) u << ',' << detail::format_double(c.x(j, k));
      u << '\n';
    }
    for (Index r = 0; r < c.num_pairs(); ++r) {
      const auto& pair = c.pairs[static_cast<std::size_t>(r)];
      pr << c.id << ',' << (pair.first + 1) << ',' << (pair.second + 1);
      for (Index k = zo; k < d.q(); ++k) pr << ',' << detail::format_double(c.z(r, k));
      pr << '\n';
    }
  }
  return {u.str(), pr.str()};
}

// Writes every file to a sibling temporary and renames once all writes
// succeeded; temporaries are removed on failure.
inline void write_files_atomically(const std::vector<std::pair<std::string, std::string>>& files) {
  namespace fs = std::filesystem;
  std::vector<fs::path> temps;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& t : temps) fs::remove(t, ec);
  };
  try {
    for (const auto& [path, content] : files) {
      fs::path tmp = path;
      tmp += ".partial";
      temps.push_back(tmp);
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cli-io", "write", "cannot open '" + tmp.string() + "' for writing");
      out << content;
      out.close();
      if (!out) throw Error("cli-io", "write", "failed writing '" + tmp.string() + "'");
    }
    for (std::size_t i = 0; i < files.size(); ++i) {
      std::error_code ec;
      fs::rename(temps[i], files[i].first, ec);
      if (ec)
        throw Error("cli-io", "write",
                    "cannot move output into '" + files[i].first + "': " + ec.message());
    }
  } catch (...) {
    cleanup();
    throw;
  }
}

inline void write_dataset(const Dataset& d, const std::string& unit_path,
                          const std::string& pair_path,
                          const std::vector<std::string>& comments = {}) {
  auto [u, p] = format_dataset(d, comments);
  write_files_atomically({{unit_path, std::move(u)}, {pair_path, std::move(p)}});
}

enum class OutputFormat { text, csv };

inline OutputFormat parse_output_format(std::string_view s) {
  if (s == "text") return OutputFormat::text;
  if (s == "csv") return OutputFormat::csv;
  throw ConfigError("cli-io", "parse_format", "unknown format '" + std::string(s) + "'");
}

// "# key = value" lines echoing the resolved configuration.
inline std::string config_header(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += "# " + k + " = " + v + "\n";
  return out;
}

// Two blocks (mean, association) of estimate and SE at three decimals; an
// exact zero prints as 0 with an empty SE.
inline std::string report_fit(const Dataset& data, const FitResult& fit,
                              const std::optional<SandwichResult>& se,
                              OutputFormat format = OutputFormat::text) {
  std::ostringstream os;
  const VectorXd se_b = se ? se->se_beta(data.p()) : VectorXd::Constant(data.p(), NAN);
  const VectorXd se_a = se ? se->se_alpha(data.q()) : VectorXd::Constant(data.q(), NAN);

  auto cell_est = [](double v) { return v == 0.0 ? std::string("0") : detail::fixed3(v); };
  auto cell_se = [](double est, double s) {
    return est == 0.0 || !std::isfinite(s) ? std::string() : detail::fixed3(s);
  };

  auto block = [&](const char* title, const char* key, const std::vector<std::string>& names,
                   const VectorXd& est, const VectorXd& s) {
    if (format == OutputFormat::csv) {
      for (std::size_t l = 0; l < names.size(); ++l) {
        const auto i = static_cast<Index>(l);
        os << key << ',' << names[l] << ',' << cell_est(est(i)) << ',' << cell_se(est(i), s(i))
           << '\n';
      }
      return;
    }
    std::size_t width = 8;
    for (const auto& n : names) width = std::max(width, n.size());
    char buf[256];
    os << title << '\n';
    std::snprintf(buf, sizeof buf, "%-*s %10s %8s\n", static_cast<int>(width), "variable",
                  "estimate", "SE");
    os << buf;
    for (std::size_t l = 0; l < names.size(); ++l) {
      const auto i = static_cast<Index>(l);
      std::snprintf(buf, sizeof buf, "%-*s %10s %8s\n", static_cast<int>(width), names[l].c_str(),
                    cell_est(est(i)).c_str(), cell_se(est(i), s(i)).c_str());
      os << buf;
    }
  };

  if (format == OutputFormat::csv) os << "block,variable,estimate,se\n";
  block("Mean model", "mean", data.mean_names, fit.params.beta, se_b);
  if (format == OutputFormat::text) os << '\n';
  block("Association model", "association", data.assoc_names, fit.params.alpha, se_a);
  return os.str();
}

inline std::string report_tuning(const TuningReport& rep, OutputFormat format) {
  std::ostringstream os;
  if (format == OutputFormat::csv) os << "lambda,bic,status\n";
  else os << "lambda              BIC  status\n";
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    const bool ok = rep.fits[i].has_value();
    const bool chosen = static_cast<Index>(i) == rep.chosen_index;
    const std::string status = !ok ? "failed" : chosen ? "chosen" : "";
    const std::string bic = ok ? detail::format_double(rep.bic_values[i]) : "";
    if (format == OutputFormat::csv) {
      os << detail::format_double(rep.grid[i]) << ',' << bic << ',' << status << '\n';
    } else {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%-10.6g %12s  %s\n", rep.grid[i],
                    ok ? detail::fixed3(rep.bic_values[i]).c_str() : "-", status.c_str());
      os << buf;
    }
  }
  return os.str();
}

// One row per (n, penalty): lambda-bar, PS and FD with their SDs.
inline std::string report_selection(const std::vector<SelectionMetrics>& rows,
                                    OutputFormat format) {
  std::ostringstream os;
  if (format == OutputFormat::csv) {
    os << "n,penalty,mode,lambda_mean,lambda_sd,ps_mean,ps_sd,fd_mean,fd_sd,failures\n";
    for (const auto& m : rows)
      os << m.n_clusters << ',' << to_string(m.kind) << ',' << to_string(m.mode) << ','
         << detail::fixed3(m.lambda_mean) << ',' << detail::fixed3(m.lambda_sd) << ','
         << detail::fixed3(m.ps_mean) << ',' << detail::fixed3(m.ps_sd) << ','
         << detail::fixed3(m.fd_mean) << ',' << detail::fixed3(m.fd_sd) << ',' << m.failures
         << '\n';
    return os.str();
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "%6s %-7s %-17s %-17s %-17s %s\n", "n", "penalty", "lambda",
                "PS", "FD", "failures");
  os << buf;
  auto ms = [](double m, double s) { return detail::fixed3(m) + " (" + detail::fixed3(s) + ")"; };
  for (const auto& m : rows) {
    std::snprintf(buf, sizeof buf, "%6lld %-7s %-17s %-17s %-17s %d\n",
                  static_cast<long long>(m.n_clusters), std::string(to_string(m.kind)).c_str(),
                  ms(m.lambda_mean, m.lambda_sd).c_str(), ms(m.ps_mean, m.ps_sd).c_str(),
                  ms(m.fd_mean, m.fd_sd).c_str(), m.failures);
    os << buf;
  }
  return os.str();
}

// Flat key=value file; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("read_config", path, 0, "cannot open file");
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view v = detail::trim(line);
    if (v.empty() || v.front() == '#') continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos)
      throw ParseError("read_config", path, lineno, "expected key=value");
    const std::string key(detail::trim(v.substr(0, eq)));
    if (key.empty()) throw ParseError("read_config", path, lineno, "empty key");
    kv.emplace_back(key, std::string(detail::trim(v.substr(eq + 1))));
  }
  return kv;
}

}  // namespace hpgee2
