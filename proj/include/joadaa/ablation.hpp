#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "joadaa/evaluation.hpp"
#include "joadaa/training.hpp"

namespace joadaa {

/// One arm of the comparison grid, named "<memory>/<aa|noaa>/<fused|fc>".
struct AblationCell {
  MemoryMode memory = MemoryMode::long_short;
  bool anticipation = true;
  HeadType head = HeadType::fused;

  std::string name() const {
    return to_string(memory) + "/" + (anticipation ? "aa" : "noaa") + "/" + to_string(head);
  }

  static AblationCell parse(const std::string& text) {
    const auto parts = KeyValueConfig::split(text, '/');
    if (parts.size() != 3) throw ConfigError("ablation cell '" + text + "' must look like long_short/aa/fused");
    AblationCell c;
    c.memory = parse_memory_mode(parts[0]);
    if (parts[1] == "aa") c.anticipation = true;
    else if (parts[1] == "noaa") c.anticipation = false;
    else throw ConfigError("ablation cell '" + text + "': expected aa or noaa");
    c.head = parse_head_type(parts[2]);
    return c;
  }

  /// Model/training configs of this arm. Turning anticipation off drops the
  /// future queries and their loss.
  void apply(ModelConfig& model, TrainConfig& train) const {
    model.memory_mode = memory;
    model.head_type = head;
    if (!anticipation) {
      model.anticipation_frames = 0;
      train.w_anticipation = 0.0;
    }
  }

  bool operator==(const AblationCell&) const = default;
};

/// Full {memory} x {anticipation} x {head} grid.
inline std::vector<AblationCell> default_grid() {
  std::vector<AblationCell> cells;
  for (auto m : {MemoryMode::long_short, MemoryMode::short_only})
    for (bool aa : {true, false})
      for (auto h : {HeadType::fused, HeadType::fc}) cells.push_back({m, aa, h});
  return cells;
}

struct AblationRow {
  std::string cell;
  std::uint64_t seed = 0;
  double oad_map = 0.0;
  std::map<int, double> aa_map;  // absent horizons are reported as nan

  double aa(int h) const {
    auto it = aa_map.find(h);
    return it == aa_map.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  }
};

struct AblationSpec {
  ModelConfig model;
  TrainConfig train;
  std::vector<AblationCell> cells = default_grid();
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<int> horizons{1, 2, 4, 6};
  int threads = 1;
};

/// Worker count: JOADAA_THREADS if set (>= 1), else 1.
inline int threads_from_env() {
  const char* env = std::getenv("JOADAA_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

namespace detail {

template <typename Error>
[[noreturn]] void rethrow_with(const std::string& prefix, const Error& e) {
  throw Error(prefix + e.what());
}

}  // namespace detail

/// Trains and evaluates one (cell, seed). Errors keep their type and gain
/// the cell identity.
inline AblationRow run_ablation_cell(const Dataset& data, const AblationSpec& spec, const AblationCell& cell,
                                     std::uint64_t seed) {
  const std::string where = "ablation cell " + cell.name() + " seed " + std::to_string(seed) + ": ";
  try {
    ModelConfig mc = spec.model;
    TrainConfig tc = spec.train;
    cell.apply(mc, tc);
    tc.seed = seed;
    Trainer<float> trainer(mc, tc, data.train);
    TrainOptions opt;
    opt.eval_every = 0;
    train(trainer, nullptr, opt);
    ModelPredictor<float> predictor(trainer.model());
    const auto res = streaming_eval<float>(predictor, data.test,
                                           streaming_options_for(mc, cell.anticipation ? spec.horizons : std::vector<int>{}));
    AblationRow row;
    row.cell = cell.name();
    row.seed = seed;
    row.oad_map = res.oad.mAP;
    for (const auto& [h, rep] : res.aa) row.aa_map[h] = rep.mAP;
    return row;
  } catch (const NumericError& e) {
    detail::rethrow_with(where, e);
  } catch (const ConfigError& e) {
    detail::rethrow_with(where, e);
  } catch (const VersionError& e) {
    detail::rethrow_with(where, e);
  } catch (const IoError& e) {
    detail::rethrow_with(where, e);
  } catch (const std::invalid_argument& e) {
    detail::rethrow_with(where, e);
  }
}

/// Runs every (cell, seed) pair. Rows come back in grid order (cells outer,
/// seeds inner) whatever the worker count; each job is deterministic by its
/// own seed. `on_row` is called under a lock as jobs finish.
inline std::vector<AblationRow> run_ablation(const Dataset& data, const AblationSpec& spec,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  if (spec.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (spec.cells.empty()) throw ConfigError("ablation needs at least one cell");
  struct Job {
    const AblationCell* cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& c : spec.cells)
    for (auto s : spec.seeds) jobs.push_back({&c, s});

  std::vector<AblationRow> rows(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        rows[i] = run_ablation_cell(data, spec, *jobs[i].cell, jobs[i].seed);
        if (on_row) {
          std::lock_guard lock(mu);
          on_row(rows[i]);
        }
      } catch (...) {
        errors[i] = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const int n = std::clamp(spec.threads, 1, static_cast<int>(jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct CellSummary {
  std::string cell;
  std::size_t seeds = 0;
  double median_oad = 0.0;
  std::map<int, double> median_aa;
};

/// Per-cell medians, in first-appearance order of the cells.
inline std::vector<CellSummary> summarize(const std::vector<AblationRow>& rows, const std::vector<int>& horizons) {
  std::vector<CellSummary> out;
  for (const auto& r : rows) {
    if (std::any_of(out.begin(), out.end(), [&](const CellSummary& s) { return s.cell == r.cell; })) continue;
    CellSummary s;
    s.cell = r.cell;
    std::vector<double> oad;
    std::map<int, std::vector<double>> aa;
    for (const auto& q : rows) {
      if (q.cell != r.cell) continue;
      ++s.seeds;
      oad.push_back(q.oad_map);
      for (int h : horizons) aa[h].push_back(q.aa(h));
    }
    s.median_oad = median(oad);
    for (int h : horizons) s.median_aa[h] = median(aa[h]);
    out.push_back(std::move(s));
  }
  return out;
}

inline const CellSummary& find_summary(const std::vector<CellSummary>& s, const std::string& cell) {
  for (const auto& c : s)
    if (c.cell == cell) return c;
  throw std::invalid_argument("no ablation rows for cell " + cell);
}

namespace detail {

inline std::string csv_number(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream os;
  os.precision(6);
  os.setf(std::ios::fixed);
  os << x;
  return os.str();
}

}  // namespace detail

/// Comma-separated table: cell,seed,oad_map,aa_map@h...
inline std::string ablation_csv(const std::vector<AblationRow>& rows, const std::vector<int>& horizons) {
  std::ostringstream os;
  os << "cell,seed,oad_map";
  for (int h : horizons) os << ",aa_map@" << h;
  os << "\n";
  for (const auto& r : rows) {
    os << r.cell << "," << r.seed << "," << detail::csv_number(r.oad_map);
    for (int h : horizons) os << "," << detail::csv_number(r.aa(h));
    os << "\n";
  }
  return os.str();
}

struct AblationTable {
  std::vector<int> horizons;
  std::vector<AblationRow> rows;
};

inline AblationTable parse_ablation_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty ablation table");
  const auto header = KeyValueConfig::split(line, ',');
  if (header.size() < 3 || header[0] != "cell" || header[1] != "seed" || header[2] != "oad_map")
    throw IoError("ablation table has an unexpected header: " + line);
  AblationTable t;
  for (std::size_t i = 3; i < header.size(); ++i) {
    const std::string prefix = "aa_map@";
    if (header[i].rfind(prefix, 0) != 0) throw IoError("unexpected ablation column " + header[i]);
    t.horizons.push_back(std::stoi(header[i].substr(prefix.size())));
  }
  auto number = [](const std::string& s) {
    return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };
  while (std::getline(in, line)) {
    if (KeyValueConfig::trim(line).empty()) continue;
    const auto f = KeyValueConfig::split(line, ',');
    if (f.size() != header.size()) throw IoError("ablation row has " + std::to_string(f.size()) + " fields: " + line);
    AblationRow r;
    r.cell = f[0];
    r.seed = std::stoull(f[1]);
    r.oad_map = number(f[2]);
    for (std::size_t i = 0; i < t.horizons.size(); ++i) {
      const double v = number(f[3 + i]);
      if (!std::isnan(v)) r.aa_map[t.horizons[i]] = v;
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

}  // namespace joadaa
