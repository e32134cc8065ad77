#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

#include "cgolab/recovery.hpp"

namespace cgolab {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Content hashes

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  if (EVP_Digest(data, len, md, &n, EVP_sha256(), nullptr) != 1) fail(ErrorKind::CacheCorrupt, "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < n; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

/// Short content tag for ledger rows.
inline std::string short_hash(const std::string& s) { return sha256_hex(s).substr(0, 16); }

// ---------------------------------------------------------------------------
// Trace sink shared by worker threads

class TraceLog {
 public:
  TraceLog() = default;
  explicit TraceLog(const fs::path& file) : out_(std::make_unique<std::ofstream>(file)) {}
  bool enabled() const { return out_ != nullptr; }
  void operator()(json ev) {
    if (!out_) return;
    std::lock_guard<std::mutex> lock(mu_);
    ev["t_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
    *out_ << ev.dump() << '\n';
    out_->flush();
  }
  TraceSink sink(const std::string& step) {
    if (!out_) return {};
    return [this, step](const json& ev) {
      json e = ev;
      e["step"] = step;
      (*this)(std::move(e));
    };
  }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Content-addressed solve cache

struct CacheStats {
  std::size_t hits = 0, misses = 0, writes = 0, corrupt = 0;
};

/// Entry file: 8-byte magic, uint64 count, 32-byte sha256 of the payload, then count complex doubles.
class DiskCache : public OracleStore {
 public:
  static constexpr char kMagic[8] = {'C', 'G', 'L', 'C', 'A', 'C', 'H', '1'};

  explicit DiskCache(fs::path dir, TraceLog* trace = nullptr) : dir_(std::move(dir)), trace_(trace) {
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  CacheStats stats() const {
    std::lock_guard<std::mutex> lock(mu_);
    return stats_;
  }

  fs::path entry_path(const std::string& key) const {
    std::string h = sha256_hex(key);
    return dir_ / h.substr(0, 2) / (h + ".bin");
  }

  bool load(const std::string& key, CVec& out) override {
    std::lock_guard<std::mutex> lock(mu_);
    fs::path p = entry_path(key);
    if (!fs::exists(p)) {
      ++stats_.misses;
      return false;
    }
    try {
      out = read_entry(p);
      ++stats_.hits;
      return true;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::CacheCorrupt) throw;
      ++stats_.corrupt;
      ++stats_.misses;
      if (trace_) (*trace_)({{"event", "cache_corrupt"}, {"entry", p.filename().string()}, {"detail", e.what()}});
      fs::remove(p);
      return false;
    }
  }

  void save(const std::string& key, const CVec& v) override {
    std::lock_guard<std::mutex> lock(mu_);
    fs::path p = entry_path(key);
    fs::create_directories(p.parent_path());
    std::string payload(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(cplx));
    std::string digest = sha256_hex(payload);
    fs::path tmp = p;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      std::uint64_t n = v.size();
      f.write(kMagic, 8);
      f.write(reinterpret_cast<const char*>(&n), sizeof n);
      f.write(digest.data(), 64);
      f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
      if (!f) fail(ErrorKind::CacheCorrupt, "cannot write cache entry " + tmp.string());
    }
    fs::rename(tmp, p);
    ++stats_.writes;
  }

  static CVec read_entry(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    char magic[8];
    std::uint64_t n = 0;
    std::string digest(64, '\0');
    f.read(magic, 8);
    f.read(reinterpret_cast<char*>(&n), sizeof n);
    f.read(digest.data(), 64);
    if (!f || std::memcmp(magic, kMagic, 8) != 0) fail(ErrorKind::CacheCorrupt, "bad header in " + p.string());
    if (fs::file_size(p) != 8 + sizeof n + 64 + n * sizeof(cplx))
      fail(ErrorKind::CacheCorrupt, "size mismatch in " + p.string());
    CVec v(n);
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(cplx)));
    if (!f || sha256_hex(v.data(), n * sizeof(cplx)) != digest)
      fail(ErrorKind::CacheCorrupt, "checksum mismatch in " + p.string());
    return v;
  }

 private:
  fs::path dir_;
  TraceLog* trace_;
  mutable std::mutex mu_;
  CacheStats stats_;
};

// ---------------------------------------------------------------------------
// Ledger

struct LedgerRow {
  std::string step, check, probe_hash, backend;
  double value = 0;
  std::string op = "info";  // le, ge, eq or info
  double tolerance = 0;

  bool is_check() const { return op != "info"; }
  bool passes() const {
    if (op == "le") return value <= tolerance;
    if (op == "ge") return value >= tolerance;
    if (op == "eq") return value == tolerance;
    return true;
  }
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kLedgerHeader = "row,step,check,probe_hash,backend,value,op,tolerance,pass";

inline std::string ledger_csv(const std::vector<LedgerRow>& rows) {
  std::string out = std::string(kLedgerHeader) + "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out += std::to_string(i + 1) + "," + r.step + "," + r.check + "," + r.probe_hash + "," + r.backend + "," +
           format_number(r.value) + "," + r.op + "," + (r.is_check() ? format_number(r.tolerance) : "") + "," +
           (r.is_check() ? (r.passes() ? "PASS" : "FAIL") : "-") + "\n";
  }
  return out;
}

struct LedgerEntry {
  LedgerRow row;
  std::string recorded;  // PASS, FAIL or -
};

inline std::vector<LedgerEntry> parse_ledger(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kLedgerHeader) fail(ErrorKind::ConfigInvalid, "ledger header mismatch");
  std::vector<LedgerEntry> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 9) fail(ErrorKind::ConfigInvalid, "ledger line " + std::to_string(lineno) + ": expected 9 fields");
    LedgerEntry e;
    e.row = {f[1], f[2], f[3], f[4], std::strtod(f[5].c_str(), nullptr), f[6],
             f[7].empty() ? 0.0 : std::strtod(f[7].c_str(), nullptr)};
    e.recorded = f[8];
    out.push_back(std::move(e));
  }
  return out;
}

struct VerifyReport {
  std::size_t checks = 0, failed = 0, inconsistent = 0;
  std::vector<std::string> messages;
  int exit_code() const { return inconsistent ? 2 : failed ? 1 : 0; }
};

/// Re-evaluates every check row offline and compares with the recorded verdict.
inline VerifyReport verify_ledger(std::istream& in) {
  VerifyReport rep;
  auto entries = parse_ledger(in);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!e.row.is_check()) continue;
    ++rep.checks;
    std::string now = e.row.passes() ? "PASS" : "FAIL";
    if (now != e.recorded) {
      ++rep.inconsistent;
      rep.messages.push_back("row " + std::to_string(i + 1) + ": recorded " + e.recorded + ", recomputed " + now);
    }
    if (now == "FAIL") {
      ++rep.failed;
      rep.messages.push_back("row " + std::to_string(i + 1) + " " + e.row.step + " " + e.row.check + " = " +
                             format_number(e.row.value) + " fails " + e.row.op + " " + format_number(e.row.tolerance));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Configuration

inline const std::vector<std::string>& pipeline_names() {
  static const std::vector<std::string> names{"cgo-check",      "forward-check", "linearize-check",
                                              "identity-check", "ray-check",     "recover"};
  return names;
}

/// Params and tolerances with every default spelled out.
inline json pipeline_defaults(const std::string& p) {
  if (p == "cgo-check")
    return {{"params",
             {{"gamma0", {"1+0.3*sin(x1)", "exp(x1/2)", "1+0.2*x1^2"}},
              {"frames", {{0, 1}, {1, 2}, {2, 0}}},
              {"lambdas", {4.0, 8.0, 16.0, 32.0}},
              {"sigma", 0.0},
              {"delta", 0.0}}},
            {"tolerances", {{"slope_min", -1.3}, {"slope_max", -0.7}}}};
  if (p == "forward-check")
    return {{"params",
             {{"gamma", "exp(x1)"},
              {"exact", "exp(x1)*cos(sqrt(2)*x2)"},
              {"sizes", {9, 17, 33}},
              {"newton_model", ""},
              {"newton_amplitude", 0.05}}},
            {"tolerances", {{"ratio_min", 3.4}, {"ratio_max", 4.6}, {"newton_constant", 10.0}, {"newton_floor", 1e-12},
                            {"newton_residual", 1e-10}}}};
  if (p == "linearize-check")
    return {{"params",
             {{"model", "model1"},
              {"reference", ""},
              {"order", 2},
              {"probe_sets", 5},
              {"eps_step", 0.03},
              {"richardson", "auto"}}},
            {"tolerances", {{"rel_diff", 0.02}, {"lower_order", 1e-8}}}};
  if (p == "identity-check")
    return {{"params", {{"model", "model1"}, {"reference", ""}, {"order", 2}, {"patterns", 5}}},
            {"tolerances", {{"bridge_rel", 0.01}, {"noise_factor", 10.0}}}};
  if (p == "ray-check")
    return {{"params",
             {{"model", "model1"},
              {"rank", 2},
              {"points", {{0.0, 0.0, 0.0}}},
              {"pairs", {0, 5}},
              {"delta", 0.3},
              {"lambda", 24.0},
              {"lambda_sweep", json::array()},
              {"sigma_grid", json::array()},
              {"remainder", false},
              {"profile_points", 41}}},
            {"tolerances", {{"J_rel", 0.05}, {"profile_rel", 0.10}}}};
  if (p == "recover")
    return {{"params",
             {{"model", "model1"},
              {"rank", 1},
              {"backend", "hierarchy"},
              {"points", {{0.0, 0.0, 0.0}, {0.3, -0.2, 0.1}}},
              {"degree", 2},
              {"modes", 0},
              {"lambda", 24.0},
              {"lambda_sweep", json::array()},
              {"delta", 0.1},
              {"remainder", true},
              {"eps_step", 0.02}}},
            {"tolerances", {{"rel_frobenius", 0.10}}}};
  fail(ErrorKind::ConfigInvalid, "pipeline: unknown value '" + p + "'");
}

inline json config_defaults(const std::string& pipeline) {
  json d = {{"schema_version", kSchemaVersion},
            {"pipeline", pipeline},
            {"seed", 1},
            {"output_dir", "cgolab-out"},
            {"cache_dir", ""},
            {"grid", {{"n", 3}, {"M", 17}, {"a", 1.0}}},
            {"cgo", {{"N", 33}, {"series_tol", 1e-12}, {"max_terms", 50}}},
            {"solver", {{"newton_tol", 1e-11}, {"linear_tol", 1e-12}, {"smallness_guard", 0.1}, {"max_newton", 25}}},
            {"models", json::object()}};
  json p = pipeline_defaults(pipeline);
  d["params"] = p["params"];
  d["tolerances"] = p["tolerances"];
  return d;
}

namespace detail {

inline const char* json_type(const json& j) { return j.type_name(); }

inline void check_type(const json& def, const json& val, const std::string& path) {
  bool ok = true;
  if (def.is_number_integer()) ok = val.is_number_integer();
  else if (def.is_number()) ok = val.is_number();
  else if (def.is_string()) ok = val.is_string();
  else if (def.is_boolean()) ok = val.is_boolean();
  else if (def.is_array()) ok = val.is_array();
  else if (def.is_object()) ok = val.is_object();
  if (!ok)
    fail(ErrorKind::ConfigInvalid, path + ": expected " + json_type(def) + ", got " + json_type(val));
}

/// Overlays user values on the defaults; unknown keys and type changes are schema errors.
inline void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) fail(ErrorKind::ConfigInvalid, (path.empty() ? "config" : path) + ": expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) fail(ErrorKind::ConfigInvalid, p + ": unknown key");
    json& b = base[it.key()];
    check_type(b, it.value(), p);
    if (b.is_object() && !b.empty()) merge_strict(b, it.value(), p);
    else b = it.value();
  }
}

template <class T>
T get_as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::ConfigInvalid, path + ": wrong value type");
  }
}

inline Expr parse_expr_at(const std::string& text, int n, const std::string& path) {
  try {
    return parse_expr(text, n);
  } catch (const Error& e) {
    fail(ErrorKind::ConfigInvalid, path + ": " + e.what());
  }
}

}  // namespace detail

/// Model text form: {"gamma0": expr, "terms": [{"order": k, "index": [slots], "expr": expr}, ...]};
/// slot 0 is u, slot i >= 1 is the derivative along x_i.
inline ConductivityModel parse_model(const json& j, int n, const std::string& path) {
  if (!j.is_object()) fail(ErrorKind::ConfigInvalid, path + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "gamma0" && it.key() != "terms") fail(ErrorKind::ConfigInvalid, path + "." + it.key() + ": unknown key");
  if (!j.contains("gamma0") || !j["gamma0"].is_string()) fail(ErrorKind::ConfigInvalid, path + ".gamma0: missing expression");
  ConductivityModel m(n, detail::parse_expr_at(j["gamma0"].get<std::string>(), n, path + ".gamma0"));
  if (!j.contains("terms")) return m;
  if (!j["terms"].is_array()) fail(ErrorKind::ConfigInvalid, path + ".terms: expected an array");
  for (std::size_t t = 0; t < j["terms"].size(); ++t) {
    const json& e = j["terms"][t];
    std::string tp = path + ".terms[" + std::to_string(t) + "]";
    if (!e.is_object() || !e.contains("order") || !e.contains("index") || !e.contains("expr") || e.size() != 3)
      fail(ErrorKind::ConfigInvalid, tp + ": needs exactly order, index and expr");
    int order = detail::get_as<int>(e["order"], tp + ".order");
    auto idx = detail::get_as<std::vector<int>>(e["index"], tp + ".index");
    if (order < 1 || static_cast<int>(idx.size()) != order)
      fail(ErrorKind::ConfigInvalid, tp + ": index length must equal order >= 1");
    for (int s : idx)
      if (s < 0 || s > n) fail(ErrorKind::ConfigInvalid, tp + ".index: slot out of range [0, n]");
    m.add_entry(order, idx, detail::parse_expr_at(detail::get_as<std::string>(e["expr"], tp + ".expr"), n, tp + ".expr"));
  }
  return m;
}

struct RunConfig {
  json resolved;
  std::string pipeline;
  BoxGrid grid;
  CgoOptions cgo;
  SolveConfig solver;
  std::map<std::string, ConductivityModel> models;
  json params, tolerances;
  std::uint64_t seed = 1;
  fs::path output_dir, cache_dir;

  const ConductivityModel& model(const std::string& key) const {
    std::string name = params.value(key, std::string());
    auto it = models.find(name);
    if (it == models.end()) fail(ErrorKind::ConfigInvalid, "params." + key + ": no model named '" + name + "'");
    return it->second;
  }
  double tol(const std::string& key) const { return tolerances.at(key).get<double>(); }
};

/// Schema validation plus default filling; the result is what resolved-config.json records.
inline RunConfig resolve_config(const json& user, const std::string& output_override = {}) {
  if (!user.is_object()) fail(ErrorKind::ConfigInvalid, "config: expected an object");
  if (!user.contains("pipeline") || !user["pipeline"].is_string())
    fail(ErrorKind::ConfigInvalid, "pipeline: required, one of cgo-check, forward-check, linearize-check, "
                                   "identity-check, ray-check, recover");
  RunConfig c;
  c.pipeline = user["pipeline"].get<std::string>();
  json r = config_defaults(c.pipeline);
  detail::merge_strict(r, user, "");
  if (r["schema_version"].get<int>() != kSchemaVersion)
    fail(ErrorKind::ConfigInvalid, "schema_version: only version " + std::to_string(kSchemaVersion) + " is supported");
  if (!output_override.empty()) r["output_dir"] = output_override;
  if (const char* env = std::getenv("CGOLAB_CACHE_DIR"); env && *env) r["cache_dir"] = env;
  if (r["cache_dir"].get<std::string>().empty()) r["cache_dir"] = (fs::path(r["output_dir"].get<std::string>()) / "cache").string();

  const json& g = r["grid"];
  int n = g["n"].get<int>(), M = g["M"].get<int>();
  double a = g["a"].get<double>();
  if (n < 2 || n > 4) fail(ErrorKind::ConfigInvalid, "grid.n: must lie in [2, 4]");
  if (M < 5 || M % 2 == 0) fail(ErrorKind::ConfigInvalid, "grid.M: must be odd and >= 5");
  if (!(a > 0)) fail(ErrorKind::ConfigInvalid, "grid.a: must be positive");
  c.grid = BoxGrid(n, M, a);
  c.cgo.N = r["cgo"]["N"].get<int>();
  c.cgo.series_tol = r["cgo"]["series_tol"].get<double>();
  c.cgo.max_terms = r["cgo"]["max_terms"].get<int>();
  if (c.cgo.N < 8) fail(ErrorKind::ConfigInvalid, "cgo.N: must be >= 8");
  c.solver.newton_tol = r["solver"]["newton_tol"].get<double>();
  c.solver.linear_tol = r["solver"]["linear_tol"].get<double>();
  c.solver.smallness_guard = r["solver"]["smallness_guard"].get<double>();
  c.solver.max_newton = r["solver"]["max_newton"].get<int>();
  try {
    c.solver.validate();
  } catch (const Error& e) {
    fail(ErrorKind::ConfigInvalid, std::string("solver: ") + e.what());
  }
  for (auto it = r["models"].begin(); it != r["models"].end(); ++it)
    c.models.emplace(it.key(), parse_model(it.value(), n, "models." + it.key()));
  c.params = r["params"];
  c.tolerances = r["tolerances"];
  c.seed = r["seed"].get<std::uint64_t>();
  c.output_dir = r["output_dir"].get<std::string>();
  c.cache_dir = r["cache_dir"].get<std::string>();
  c.resolved = r;
  return c;
}

inline json read_config_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorKind::ConfigInvalid, "cannot open config " + file.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::ConfigInvalid, file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Steps and the worker pool

struct StepOutput {
  std::vector<LedgerRow> rows;
  json data;
};

struct StepContext {
  const RunConfig& cfg;
  SolveConfig solver;  // carries the step's trace sink
  DiskCache* cache;    // null with --no-cache
  std::vector<const StepOutput*> deps;
};

struct Step {
  std::string name;
  std::vector<std::size_t> deps;
  std::function<StepOutput(StepContext&)> run;
};

struct StepFailure {
  std::string step;
  std::string kind;
  std::string message;
};

struct ExecResult {
  std::vector<StepOutput> outputs;
  std::vector<bool> ok;
  std::vector<StepFailure> failures;
};

/// Runs the DAG on a bounded pool; ready steps start in index order, results are kept by index.
inline ExecResult execute_steps(const std::vector<Step>& steps, const RunConfig& cfg, int workers, DiskCache* cache,
                                TraceLog& trace) {
  enum class State { Pending, Running, Done, Failed };
  const std::size_t ns = steps.size();
  ExecResult res;
  res.outputs.resize(ns);
  res.ok.assign(ns, false);
  std::vector<State> st(ns, State::Pending);
  std::mutex mu;
  std::condition_variable cv;
  std::size_t running = 0;

  auto worker = [&]() {
    std::unique_lock<std::mutex> lock(mu);
    while (true) {
      std::size_t pick = ns;
      bool pending = false;
      for (std::size_t i = 0; i < ns; ++i) {
        if (st[i] != State::Pending) continue;
        pending = true;
        bool ready = true, dead = false;
        for (auto d : steps[i].deps) {
          if (st[d] == State::Failed) dead = true;
          if (st[d] != State::Done) ready = false;
        }
        if (dead) {
          st[i] = State::Failed;
          res.failures.push_back({steps[i].name, "Skipped", "a dependency failed"});
          cv.notify_all();
          pick = ns + 1;
          break;
        }
        if (ready) {
          pick = i;
          break;
        }
      }
      if (pick == ns + 1) continue;
      if (pick == ns) {
        if (!pending) return;
        cv.wait(lock);
        continue;
      }
      st[pick] = State::Running;
      ++running;
      StepContext ctx{cfg, cfg.solver, cache, {}};
      ctx.solver.trace = trace.sink(steps[pick].name);
      for (auto d : steps[pick].deps) ctx.deps.push_back(&res.outputs[d]);
      lock.unlock();
      trace({{"event", "step_start"}, {"step", steps[pick].name}});
      StepOutput out;
      std::optional<StepFailure> failure;
      try {
        out = steps[pick].run(ctx);
      } catch (const Error& e) {
        failure = StepFailure{steps[pick].name, kind_name(e.kind()), e.what()};
      } catch (const std::exception& e) {
        failure = StepFailure{steps[pick].name, "Exception", e.what()};
      }
      trace({{"event", "step_end"}, {"step", steps[pick].name}, {"ok", !failure}});
      lock.lock();
      --running;
      if (failure) {
        st[pick] = State::Failed;
        res.failures.push_back(*failure);
      } else {
        res.outputs[pick] = std::move(out);
        res.ok[pick] = true;
        st[pick] = State::Done;
      }
      cv.notify_all();
    }
  };
  const int K = std::max(1, std::min<int>(workers, static_cast<int>(ns)));
  std::vector<std::thread> pool;
  for (int k = 1; k < K; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  std::sort(res.failures.begin(), res.failures.end(), [&](const StepFailure& a, const StepFailure& b) { return a.step < b.step; });
  return res;
}

// ---------------------------------------------------------------------------
// Pipelines

namespace detail {

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double k = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]) / k;
    my += std::log(y[i]) / k;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

inline std::mt19937_64 step_rng(std::uint64_t seed, std::size_t i) {
  return std::mt19937_64(seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull * (i + 1));
}

/// Smooth real boundary data: a random plane wave plus a bilinear term.
inline BoundaryFunction random_boundary_probe(const BoxGrid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<double> k(static_cast<std::size_t>(g.n));
  for (auto& v : k) v = U(rng);
  double ph = 3 * U(rng), c = U(rng);
  return boundary_sample(g, [=](const double* x) {
    double s = ph;
    for (std::size_t i = 0; i < k.size(); ++i) s += k[i] * x[i];
    return cplx(0.6 * std::sin(s) + 0.4 * c * x[0] * x[k.size() - 1]);
  });
}

inline ProbeSet random_probe_set(const BoxGrid& g, int m, std::mt19937_64& rng, double eps) {
  ProbeSet p;
  for (int l = 0; l < m; ++l) p.fs.push_back(random_boundary_probe(g, rng));
  p.f_test = random_boundary_probe(g, rng);
  p.eps_step = eps;
  return p;
}

inline std::string probe_set_hash(const ProbeSet& p) {
  std::string s;
  for (const auto& f : p.fs) s += hex64(trace_hash(f));
  s += hex64(trace_hash(p.f_test));
  return short_hash(s);
}

inline double max_rel(const BoundaryFunction& a, const BoundaryFunction& b) {
  double num = 0, den = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    num = std::max(num, std::abs(a.values[k] - b.values[k]));
    den = std::max(den, std::abs(b.values[k]));
  }
  return den > 0 ? num / den : num;
}

inline json cvec_json(const CVec& v) {
  json re = json::array(), im = json::array();
  for (const auto& c : v) {
    re.push_back(c.real());
    im.push_back(c.imag());
  }
  return {{"re", re}, {"im", im}};
}

inline CVec pad_zero(const CVec& v) {
  CVec out{0.0};
  out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::vector<RVec> points_param(const RunConfig& c) {
  auto pts = get_as<std::vector<RVec>>(c.params.at("points"), "params.points");
  if (pts.empty()) fail(ErrorKind::ConfigInvalid, "params.points: at least one point");
  for (const auto& p : pts)
    if (static_cast<int>(p.size()) != c.grid.n) fail(ErrorKind::ConfigInvalid, "params.points: dimension differs from grid.n");
  return pts;
}

inline std::string point_tag(const RVec& p) {
  std::string s = "(";
  for (std::size_t i = 0; i < p.size(); ++i) s += (i ? " " : "") + format_number(p[i]);
  return s + ")";
}

inline std::string model_salt(const RunConfig& c, const std::string& model_name, const std::string& extra) {
  json j = {{"model", c.resolved["models"][model_name]},
            {"grid", c.resolved["grid"]},
            {"solver", c.resolved["solver"]},
            {"extra", extra}};
  return sha256_hex(j.dump());
}

}  // namespace detail

struct PipelinePlan {
  std::vector<Step> steps;
  std::function<json(const ExecResult&)> artifact;
};

inline PipelinePlan plan_cgo_check(const RunConfig& c) {
  const int n = c.grid.n;
  auto gammas = detail::get_as<std::vector<std::string>>(c.params["gamma0"], "params.gamma0");
  auto frames = detail::get_as<std::vector<std::vector<int>>>(c.params["frames"], "params.frames");
  auto lams = detail::get_as<std::vector<double>>(c.params["lambdas"], "params.lambdas");
  double sigma = c.params["sigma"].get<double>(), delta = c.params["delta"].get<double>();
  if (lams.size() < 2) fail(ErrorKind::ConfigInvalid, "params.lambdas: need at least two values for a slope");
  for (const auto& f : frames)
    if (f.size() != 2 || f[0] == f[1] || f[0] < 0 || f[1] < 0 || f[0] >= n || f[1] >= n)
      fail(ErrorKind::ConfigInvalid, "params.frames: each frame is [i, j] with distinct axes in [0, n)");
  std::vector<Expr> g0;
  for (std::size_t i = 0; i < gammas.size(); ++i)
    g0.push_back(detail::parse_expr_at(gammas[i], n, "params.gamma0[" + std::to_string(i) + "]"));
  PipelinePlan plan;
  for (std::size_t gi = 0; gi < gammas.size(); ++gi)
    for (std::size_t fi = 0; fi < frames.size(); ++fi) {
      std::string name = "cgo/g" + std::to_string(gi) + "/f" + std::to_string(fi);
      plan.steps.push_back({name, {}, [=, &c](StepContext&) {
                              CVec zeta(static_cast<std::size_t>(n), 0.0);
                              zeta[static_cast<std::size_t>(frames[fi][0])] = 1.0;
                              zeta[static_cast<std::size_t>(frames[fi][1])] = cplx(0, 1);
                              CgoSolver cs(g0[gi], c.grid, c.cgo);
                              StepOutput out;
                              std::vector<double> c1;
                              json rows = json::array();
                              for (double lam : lams) {
                                auto sol = cs.solve(CgoProbe{zeta, lam, RVec(static_cast<std::size_t>(n), 0.0), sigma, delta});
                                c1.push_back(sol.diag.r_c1);
                                std::string tag = short_hash(gammas[gi] + hex64(hash_values(zeta)) + format_number(lam));
                                out.rows.push_back({name, "r_c1@lambda=" + format_number(lam), tag, "spectral", sol.diag.r_c1});
                                rows.push_back({{"lambda", lam}, {"r_c1", sol.diag.r_c1}, {"r_sup", sol.diag.r_sup},
                                                {"terms", sol.diag.terms}, {"residual", sol.diag.residual}});
                              }
                              double s = detail::loglog_slope(lams, c1);
                              std::string tag = short_hash(gammas[gi] + hex64(hash_values(zeta)));
                              out.rows.push_back({name, "slope_min", tag, "spectral", s, "ge", c.tol("slope_min")});
                              out.rows.push_back({name, "slope_max", tag, "spectral", s, "le", c.tol("slope_max")});
                              out.data = {{"gamma0", gammas[gi]}, {"frame", frames[fi]}, {"slope", s}, {"series", rows}};
                              return out;
                            }});
    }
  plan.artifact = [](const ExecResult& r) {
    json t = json::array();
    for (std::size_t i = 0; i < r.outputs.size(); ++i)
      if (r.ok[i]) t.push_back(r.outputs[i].data);
    return json{{"decay_slopes", t}};
  };
  return plan;
}

inline PipelinePlan plan_forward_check(const RunConfig& c) {
  const int n = c.grid.n;
  Expr gam = detail::parse_expr_at(c.params["gamma"].get<std::string>(), n, "params.gamma");
  Expr exact = detail::parse_expr_at(c.params["exact"].get<std::string>(), n, "params.exact");
  auto sizes = detail::get_as<std::vector<int>>(c.params["sizes"], "params.sizes");
  if (sizes.size() < 2) fail(ErrorKind::ConfigInvalid, "params.sizes: need at least two grids");
  for (int M : sizes)
    if (M < 5 || M % 2 == 0) fail(ErrorKind::ConfigInvalid, "params.sizes: grid sizes must be odd and >= 5");
  PipelinePlan plan;
  const std::string probe = short_hash(c.params["gamma"].get<std::string>() + "|" + c.params["exact"].get<std::string>());
  for (int M : sizes)
    plan.steps.push_back({"forward/M" + std::to_string(M), {}, [=](StepContext& ctx) {
                            BoxGrid g(n, M, ctx.cfg.grid.a);
                            auto u = solve_linear(sample(g, gam), boundary_sample(g, [&](const double* x) { return cplx(exact(x)); }),
                                                  ctx.solver);
                            double err = 0;
                            std::vector<double> x(static_cast<std::size_t>(n));
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              g.coords(i, x.data());
                              err = std::max(err, std::abs(u[i] - exact(x.data())));
                            }
                            StepOutput out;
                            out.rows.push_back({"forward/M" + std::to_string(M), "max_error", probe, "fd", err});
                            out.data = {{"M", M}, {"h", g.h()}, {"max_error", err}};
                            return out;
                          }});
  std::vector<std::size_t> deps(sizes.size());
  std::iota(deps.begin(), deps.end(), 0);
  plan.steps.push_back({"forward/order", deps, [=](StepContext& ctx) {
                          StepOutput out;
                          for (std::size_t i = 1; i < ctx.deps.size(); ++i) {
                            double r = ctx.deps[i - 1]->data["max_error"].get<double>() / ctx.deps[i]->data["max_error"].get<double>();
                            std::string chk = "ratio_M" + std::to_string(sizes[i - 1]) + "_M" + std::to_string(sizes[i]);
                            out.rows.push_back({"forward/order", chk + "_min", probe, "fd", r, "ge", ctx.cfg.tol("ratio_min")});
                            out.rows.push_back({"forward/order", chk + "_max", probe, "fd", r, "le", ctx.cfg.tol("ratio_max")});
                          }
                          return out;
                        }});
  const std::string nm = c.params["newton_model"].get<std::string>();
  if (!nm.empty()) {
    const ConductivityModel& model = c.model("newton_model");
    double amp = c.params["newton_amplitude"].get<double>();
    plan.steps.push_back({"forward/newton", {}, [&model, amp](StepContext& ctx) {
                            NewtonReport rep;
                            auto f = boundary_sample(ctx.cfg.grid, [amp](const double* x) { return cplx(amp * x[0]); });
                            solve_quasilinear(model, 0.0, f, ctx.solver, &rep);
                            StepOutput out;
                            std::string tag = hex64(trace_hash(f));
                            out.rows.push_back({"forward/newton", "iterations", tag, "newton", static_cast<double>(rep.iterations)});
                            const double floor = ctx.cfg.tol("newton_floor");
                            for (std::size_t k = 0; k + 1 < rep.residuals.size(); ++k) {
                              if (rep.residuals[k + 1] < floor) break;
                              double q = rep.residuals[k + 1] / (rep.residuals[k] * rep.residuals[k]);
                              out.rows.push_back({"forward/newton", "quadratic_constant@" + std::to_string(k + 1), tag, "newton", q,
                                                  "le", ctx.cfg.tol("newton_constant")});
                            }
                            out.rows.push_back({"forward/newton", "final_residual", tag, "newton",
                                                rep.residuals.empty() ? 0.0 : rep.residuals.back(), "le",
                                                ctx.cfg.tol("newton_residual")});
                            out.data = {{"residuals", rep.residuals}, {"iterations", rep.iterations}};
                            return out;
                          }});
  }
  plan.artifact = [](const ExecResult& r) {
    json conv = json::array(), newton = json::object();
    for (std::size_t i = 0; i < r.outputs.size(); ++i) {
      if (!r.ok[i]) continue;
      if (r.outputs[i].data.contains("M")) conv.push_back(r.outputs[i].data);
      if (r.outputs[i].data.contains("residuals")) newton = r.outputs[i].data;
    }
    return json{{"convergence", conv}, {"newton", newton}};
  };
  return plan;
}

inline PipelinePlan plan_linearize_check(const RunConfig& c) {
  const ConductivityModel& model = c.model("model");
  const ConductivityModel* ref = c.params["reference"].get<std::string>().empty() ? nullptr : &c.model("reference");
  int m = c.params["order"].get<int>(), sets = c.params["probe_sets"].get<int>();
  double eps = c.params["eps_step"].get<double>();
  std::string rich = c.params["richardson"].is_string() ? c.params["richardson"].get<std::string>() : "";
  bool richardson = c.params["richardson"].is_boolean() ? c.params["richardson"].get<bool>() : m >= 3;
  if (c.params["richardson"].is_string() && rich != "auto")
    fail(ErrorKind::ConfigInvalid, "params.richardson: true, false or \"auto\"");
  if (m < 1 || m > 4) fail(ErrorKind::ConfigInvalid, "params.order: must lie in [1, 4]");
  if (sets < 1) fail(ErrorKind::ConfigInvalid, "params.probe_sets: must be >= 1");
  PipelinePlan plan;
  for (int i = 0; i < sets; ++i) {
    std::string name = "linearize/set" + std::to_string(i);
    plan.steps.push_back({name, {}, [=, &model](StepContext& ctx) {
                            auto rng = detail::step_rng(ctx.cfg.seed, static_cast<std::size_t>(i));
                            ProbeSet ps = detail::random_probe_set(ctx.cfg.grid, m, rng, eps);
                            std::string tag = detail::probe_set_hash(ps);
                            auto h = solve_hierarchy(model, ps, ctx.solver);
                            auto fd = mixed_dtn_fd(model, ps, ctx.solver, richardson, FluxForm::Weak);
                            double rel = detail::max_rel(fd, h.weak_flux);
                            StepOutput out;
                            out.rows.push_back({name, "rel_diff", tag, richardson ? "hierarchy-vs-fd-richardson" : "hierarchy-vs-fd",
                                                rel, "le", ctx.cfg.tol("rel_diff")});
                            if (ref) {
                              auto hr = solve_hierarchy(*ref, ps, ctx.solver);
                              const unsigned full = (1u << m) - 1;
                              double worst = 0;
                              for (unsigned S = 1; S < full; ++S) {
                                double num = 0, den = 0;
                                for (std::size_t k = 0; k < h.mixed[S].size(); ++k) {
                                  num = std::max(num, std::abs(h.mixed[S][k] - hr.mixed[S][k]));
                                  den = std::max(den, std::abs(h.mixed[S][k]));
                                }
                                worst = std::max(worst, den > 0 ? num / den : num);
                              }
                              if (m >= 2)
                                out.rows.push_back({name, "lower_order_rel", tag, "hierarchy", worst, "le", ctx.cfg.tol("lower_order")});
                            }
                            out.data = {{"set", i}, {"probe_hash", tag}, {"rel_diff", rel}};
                            return out;
                          }});
  }
  plan.artifact = [](const ExecResult& r) {
    json t = json::array();
    for (std::size_t i = 0; i < r.outputs.size(); ++i)
      if (r.ok[i]) t.push_back(r.outputs[i].data);
    return json{{"probe_sets", t}};
  };
  return plan;
}

inline PipelinePlan plan_identity_check(const RunConfig& c) {
  const ConductivityModel& model = c.model("model");
  const ConductivityModel* ref = c.params["reference"].get<std::string>().empty() ? nullptr : &c.model("reference");
  int m = c.params["order"].get<int>(), pats = c.params["patterns"].get<int>();
  if (m < 2 || m > 4) fail(ErrorKind::ConfigInvalid, "params.order: must lie in [2, 4]");
  if (pats < 1) fail(ErrorKind::ConfigInvalid, "params.patterns: must be >= 1");
  PipelinePlan plan;
  for (int i = 0; i < pats; ++i) {
    std::string name = "identity/pattern" + std::to_string(i);
    plan.steps.push_back({name, {}, [=, &model](StepContext& ctx) {
                            auto rng = detail::step_rng(ctx.cfg.seed, static_cast<std::size_t>(i));
                            ProbeSet ps = detail::random_probe_set(ctx.cfg.grid, m, rng, 0.02);
                            std::string tag = detail::probe_set_hash(ps);
                            StepOutput out;
                            cplx own = dtn_pairing(model, nullptr, ps, PairingBackend::Hierarchy, ctx.solver);
                            if (!ref) {
                              HierarchySolver hs(model, ctx.cfg.grid, 0.0, ctx.solver.linear_tol);
                              std::vector<ScalarField> sols;
                              for (const auto& f : ps.fs) sols.push_back(hs.first_order(f));
                              sols.push_back(hs.first_order(ps.f_test));
                              ScalarField integrand = identity_integrand(sample_taylor(model, m - 1, ctx.cfg.grid), sols);
                              cplx interior = quad_omega(integrand);
                              for (auto& v : integrand.values) v = std::abs(v);
                              double mass = quad_omega(integrand).real();
                              cplx boundary = factorial(m - 1) * own;
                              double err = std::abs(boundary - interior);
                              // Cancelling patterns make |I| tiny; the gate is relative to the integrand's L1 mass.
                              out.rows.push_back({name, "bridge_rel_value", tag, "hierarchy-vs-interior", err / std::abs(interior)});
                              out.rows.push_back({name, "bridge_rel", tag, "hierarchy-vs-interior", err / mass, "le", ctx.cfg.tol("bridge_rel")});
                              out.data = {{"pattern", i}, {"boundary", {boundary.real(), boundary.imag()}},
                                          {"interior", {interior.real(), interior.imag()}}, {"l1_mass", mass}};
                              return out;
                            }
                            // Noise floor: probe-order asymmetry of the pairing plus solver tolerance times its size.
                            ProbeSet swapped = ps;
                            std::swap(swapped.fs[0], swapped.fs[1]);
                            cplx own_swapped = dtn_pairing(model, nullptr, swapped, PairingBackend::Hierarchy, ctx.solver);
                            double floor = std::abs(own - own_swapped) + ctx.solver.linear_tol * std::abs(own);
                            cplx diff = dtn_pairing(model, ref, ps, PairingBackend::Hierarchy, ctx.solver);
                            out.rows.push_back({name, "noise_floor", tag, "hierarchy", floor});
                            out.rows.push_back({name, "null_pairing", tag, "hierarchy", std::abs(diff), "le",
                                                ctx.cfg.tol("noise_factor") * floor});
                            out.data = {{"pattern", i}, {"pairing", std::abs(diff)}, {"floor", floor}, {"scale", std::abs(own)}};
                            return out;
                          }});
  }
  plan.artifact = [](const ExecResult& r) {
    json t = json::array();
    for (std::size_t i = 0; i < r.outputs.size(); ++i)
      if (r.ok[i]) t.push_back(r.outputs[i].data);
    return json{{"patterns", t}};
  };
  return plan;
}

/// Ray functional of one (point, pair) against separated quadrature and the smoothed contraction profile.
struct RayCheck {
  RaySample sample;
  CVec forward;
  RVec t;
  CVec profile, truth;
  double J_rel = 0, profile_rel = 0;
  int multiplier = 0;
};

inline RayCheck run_ray_check(const ConductivityModel& model, int rank, const BoxGrid& g, const CgoOptions& cgo,
                              const RVec& p, const AdmissiblePair& pair, double delta, double lambda,
                              std::vector<double> sweep, RVec sigma_grid, bool remainder, int profile_points) {
  const int n = g.n, k = rank - 1;
  MeasurementOracle O(sample_taylor(model, rank, g), g);
  CgoSolver cs(model.gamma0(), g, cgo);
  CgoSource src(cs, remainder);
  RayCheck rc;
  RaySample s = make_ray_sample(p, pair, rank, k, delta, lambda, g.a, std::move(sigma_grid));
  if (sweep.empty()) sweep = default_lambda_sweep(lambda, k, n);
  s = ray_functional(O, src, s, sweep);
  std::vector<CVec> vecs(static_cast<std::size_t>(k), detail::pad_zero(pair.zeta));
  vecs.push_back(detail::pad_zero(pair.zeta_tilde));
  const Expr g0 = model.gamma0();
  auto contraction = [&](const double* x) { return contract(model.tensor_at(rank, x), vecs); };
  rc.forward = ray_forward_model(
      [&](const double* x) { return contraction(x) * std::pow(g0(x), -0.5 * (k + 3)); }, s, g.a);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.J.size(); ++i) {
    num += std::norm(s.J[i] - rc.forward[i]);
    den += std::norm(rc.forward[i]);
  }
  rc.J_rel = std::sqrt(num / den);
  // Profile on the inner 90% of the chord against the kernel-smoothed contraction on the ray.
  const double lo = 0.9 * s.t_lo, hi = 0.9 * s.t_hi;
  for (int i = 0; i < profile_points; ++i) rc.t.push_back(lo + (hi - lo) * i / std::max(1, profile_points - 1));
  rc.profile = ray_invert(s, g0, {}, rc.t).g;
  RVec xi = s.dir;
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  const int nu = 2001;
  const double hu = (s.t_hi - s.t_lo) / (nu - 1);
  CVec line(nu);
  RVec x(static_cast<std::size_t>(n));
  for (int j = 0; j < nu; ++j) {
    double u = s.t_lo + hu * j;
    for (int d = 0; d < n; ++d) x[static_cast<std::size_t>(d)] = p[static_cast<std::size_t>(d)] + u * xi[static_cast<std::size_t>(d)];
    line[static_cast<std::size_t>(j)] = contraction(x.data());
  }
  num = den = 0;
  for (double tv : rc.t) {
    cplx acc = 0.0;
    for (int j = 0; j < nu; ++j)
      acc += (j == 0 || j == nu - 1 ? 0.5 : 1.0) * hu * inversion_kernel(s, tv - (s.t_lo + hu * j)) * line[static_cast<std::size_t>(j)];
    rc.truth.push_back(acc);
  }
  for (std::size_t i = 0; i < rc.t.size(); ++i) {
    num += std::norm(rc.profile[i] - rc.truth[i]);
    den += std::norm(rc.truth[i]);
  }
  rc.profile_rel = std::sqrt(num / den);
  rc.multiplier = empirical_multiplier(pair, k, p, s.sigma_grid.back(), delta);
  rc.sample = std::move(s);
  return rc;
}

inline PipelinePlan plan_ray_check(const RunConfig& c) {
  const ConductivityModel& model = c.model("model");
  int rank = c.params["rank"].get<int>();
  if (rank < 1) fail(ErrorKind::ConfigInvalid, "params.rank: must be >= 1");
  if (!model.find(rank)) fail(ErrorKind::ConfigInvalid, "params.rank: model has no Taylor term of this order");
  auto pts = detail::points_param(c);
  auto pair_idx = detail::get_as<std::vector<int>>(c.params["pairs"], "params.pairs");
  auto all = standard_pairs(c.grid.n);
  for (int i : pair_idx)
    if (i < 0 || i >= static_cast<int>(all.size()))
      fail(ErrorKind::ConfigInvalid, "params.pairs: index out of range [0, " + std::to_string(all.size()) + ")");
  double delta = c.params["delta"].get<double>(), lambda = c.params["lambda"].get<double>();
  auto sweep = detail::get_as<std::vector<double>>(c.params["lambda_sweep"], "params.lambda_sweep");
  auto sig = detail::get_as<RVec>(c.params["sigma_grid"], "params.sigma_grid");
  bool rem = c.params["remainder"].get<bool>();
  int np = c.params["profile_points"].get<int>();
  if (!(delta > 0 && lambda > 0)) fail(ErrorKind::ConfigInvalid, "params.delta and params.lambda must be positive");
  for (const auto& p : pts) {
    try {
      check_support(p, delta, c.grid.a);
    } catch (const Error& e) {
      fail(ErrorKind::ConfigInvalid, std::string("params.points: ") + e.what());
    }
  }
  PipelinePlan plan;
  for (std::size_t pi = 0; pi < pts.size(); ++pi)
    for (int ai : pair_idx) {
      std::string name = "ray/p" + std::to_string(pi) + "/pair" + std::to_string(ai);
      plan.steps.push_back({name, {}, [=, &model](StepContext& ctx) {
                              const auto pair = standard_pairs(ctx.cfg.grid.n)[static_cast<std::size_t>(ai)];
                              auto rc = run_ray_check(model, rank, ctx.cfg.grid, ctx.cfg.cgo, pts[pi], pair, delta, lambda, sweep,
                                                      sig, rem, np);
                              std::string tag = short_hash(detail::point_tag(pts[pi]) + hex64(hash_values(pair.zeta)) +
                                                           hex64(hash_values(pair.zeta_tilde)));
                              const std::string be = rem ? "interior-cgo" : "interior-ansatz";
                              StepOutput out;
                              out.rows.push_back({name, "J_rel", tag, be, rc.J_rel, "le", ctx.cfg.tol("J_rel")});
                              out.rows.push_back({name, "profile_rel", tag, be, rc.profile_rel, "le", ctx.cfg.tol("profile_rel")});
                              out.rows.push_back({name, "multiplier", tag, be, static_cast<double>(rc.multiplier), "eq",
                                                  static_cast<double>(rc.sample.freq_mult)});
                              out.data = {{"point", pts[pi]},
                                          {"pair", ai},
                                          {"sigma_grid", rc.sample.sigma_grid},
                                          {"lambdas", rc.sample.lambdas},
                                          {"J", detail::cvec_json(rc.sample.J)},
                                          {"J_forward", detail::cvec_json(rc.forward)},
                                          {"t", rc.t},
                                          {"profile", detail::cvec_json(rc.profile)},
                                          {"profile_truth", detail::cvec_json(rc.truth)}};
                              return out;
                            }});
    }
  plan.artifact = [](const ExecResult& r) {
    json t = json::array();
    for (std::size_t i = 0; i < r.outputs.size(); ++i)
      if (r.ok[i]) t.push_back(r.outputs[i].data);
    return json{{"rays", t}};
  };
  return plan;
}

inline double rel_frobenius(const SymTensor& got, const SymTensor& truth) {
  double num = 0, den = 0;
  const auto& tab = truth.table();
  for (std::size_t c = 0; c < tab.size(); ++c) {
    const MultiIndex& idx = tab.index(c);
    std::map<int, int> mult;
    for (int v : idx) ++mult[v];
    double w = factorial(static_cast<int>(idx.size()));
    for (const auto& [v, k] : mult) w /= factorial(k);
    num += w * std::pow(got.coeffs()[c] - truth.coeffs()[c], 2);
    den += w * std::pow(truth.coeffs()[c], 2);
  }
  return std::sqrt(num / den);
}

inline PipelinePlan plan_recover(const RunConfig& c) {
  const ConductivityModel& model = c.model("model");
  const std::string model_name = c.params["model"].get<std::string>();
  int rank = c.params["rank"].get<int>();
  OracleBackend backend = [&] {
    try {
      return parse_oracle_backend(c.params["backend"].get<std::string>());
    } catch (const Error& e) {
      fail(ErrorKind::ConfigInvalid, std::string("params.backend: ") + e.what());
    }
  }();
  RecoveryPlan rp;
  rp.m = rank;
  rp.points = detail::points_param(c);
  rp.lambda = c.params["lambda"].get<double>();
  rp.lambda_sweep = detail::get_as<std::vector<double>>(c.params["lambda_sweep"], "params.lambda_sweep");
  rp.delta = c.params["delta"].get<double>();
  rp.remainder = c.params["remainder"].get<bool>();
  rp.gamma0 = model.gamma0();
  rp.cgo = c.cgo;
  rp.fit.degree = c.params["degree"].get<int>();
  rp.fit.modes = c.params["modes"].get<int>();
  double eps = c.params["eps_step"].get<double>();
  try {
    rp.validate(c.grid.n, c.grid.a);
  } catch (const Error& e) {
    fail(ErrorKind::ConfigInvalid, std::string("params: ") + e.what());
  }
  if (!model.find(rank)) fail(ErrorKind::ConfigInvalid, "params.rank: model has no Taylor term of this order");
  PipelinePlan plan;
  plan.steps.push_back({"recover", {}, [=, &model](StepContext& ctx) {
                          const BoxGrid& g = ctx.cfg.grid;
                          std::unique_ptr<MeasurementOracle> O;
                          if (backend == OracleBackend::Interior) O = std::make_unique<MeasurementOracle>(sample_taylor(model, rank, g), g);
                          else O = std::make_unique<MeasurementOracle>(model, rank, g, backend, ctx.solver, eps);
                          if (ctx.cache)
                            O->set_store(ctx.cache, detail::model_salt(ctx.cfg, model_name,
                                                                      std::string(oracle_backend_name(backend)) + "|rank=" +
                                                                          std::to_string(rank) + "|eps=" + format_number(eps)));
                          auto res = recover_tensor(*O, rp);
                          StepOutput out;
                          json pts = json::array();
                          for (std::size_t i = 0; i < rp.points.size(); ++i) {
                            SymTensor truth = model.tensor_at(rank, rp.points[i].data());
                            const SymTensor& got = res.tensors.values[i];
                            double err = rel_frobenius(got, truth);
                            std::string tag = short_hash(detail::point_tag(rp.points[i]));
                            out.rows.push_back({"recover", "rel_frobenius@" + detail::point_tag(rp.points[i]), tag,
                                                O->backend(), err, "le", ctx.cfg.tol("rel_frobenius")});
                            for (std::size_t cidx = 0; cidx < got.size(); ++cidx) {
                              std::string idx;
                              for (int v : got.table().index(cidx)) idx += std::to_string(v);
                              out.rows.push_back({"recover", "T[" + idx + "]@" + detail::point_tag(rp.points[i]), tag, O->backend(),
                                                  got.coeffs()[cidx]});
                            }
                            pts.push_back({{"p", rp.points[i]}, {"recovered", got.coeffs()}, {"truth", truth.coeffs()}, {"rel_frobenius", err}});
                          }
                          const auto& s = O->stats();
                          out.data = {{"rank", rank},
                                      {"backend", O->backend()},
                                      {"points", pts},
                                      {"oracle", {{"calls", s.calls}, {"hits", s.hits}, {"solves", s.solves},
                                                  {"solve_hits", s.solve_hits}, {"store_hits", s.store_hits}}}};
                          return out;
                        }});
  plan.artifact = [](const ExecResult& r) {
    if (!r.ok[0]) return json::object();
    json d = r.outputs[0].data;
    d.erase("oracle");  // run-dependent; kept in run.json
    return d;
  };
  return plan;
}

inline PipelinePlan make_plan(const RunConfig& c) {
  if (c.pipeline == "cgo-check") return plan_cgo_check(c);
  if (c.pipeline == "forward-check") return plan_forward_check(c);
  if (c.pipeline == "linearize-check") return plan_linearize_check(c);
  if (c.pipeline == "identity-check") return plan_identity_check(c);
  if (c.pipeline == "ray-check") return plan_ray_check(c);
  if (c.pipeline == "recover") return plan_recover(c);
  fail(ErrorKind::ConfigInvalid, "pipeline: unknown value '" + c.pipeline + "'");
}

// ---------------------------------------------------------------------------
// run

struct RunFlags {
  bool trace = false;
  int workers = 1;
  bool no_cache = false;
  std::string output_dir;  // overrides the config value when set
};

struct RunOutcome {
  int exit_code = 0;  // 0 all checks pass, 1 a check failed, 2 invalid config, 3 a step raised an error
  fs::path output_dir;
  std::size_t checks = 0, failed = 0;
  std::vector<StepFailure> failures;
  std::string message;
};

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
  if (!f) fail(ErrorKind::ConfigInvalid, "cannot write " + p.string());
}

inline std::string summary_markdown(const RunConfig& c, const std::vector<LedgerRow>& rows, const ExecResult& ex,
                                    std::size_t failed) {
  std::ostringstream s;
  std::size_t checks = 0;
  for (const auto& r : rows) checks += r.is_check();
  s << "# " << c.pipeline << "\n\n";
  s << "Config hash `" << short_hash(c.resolved.dump()) << "`. ";
  s << "Result: **" << (ex.failures.empty() && failed == 0 ? "PASS" : "FAIL") << "** (" << checks - failed << "/" << checks
    << " checks pass";
  if (!ex.failures.empty()) s << ", " << ex.failures.size() << " step errors";
  s << ").\n\n";
  s << "| ledger row | step | check | value | op | tolerance | result |\n|---|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (!r.is_check()) continue;
    s << "| " << i + 1 << " | " << r.step << " | " << r.check << " | " << format_number(r.value) << " | " << r.op << " | "
      << format_number(r.tolerance) << " | " << (r.passes() ? "PASS" : "FAIL") << " |\n";
  }
  if (!ex.failures.empty()) {
    s << "\n## Errors\n\n";
    for (const auto& f : ex.failures) s << "- `" << f.step << "` " << f.kind << ": " << f.message << "\n";
  }
  return s.str();
}

inline RunOutcome run_config(const json& user, const RunFlags& flags) {
  RunOutcome out;
  RunConfig cfg;
  PipelinePlan plan;
  try {
    cfg = resolve_config(user, flags.output_dir);
    plan = make_plan(cfg);
  } catch (const Error& e) {
    out.exit_code = 2;
    out.message = e.what();
    return out;
  } catch (const json::exception& e) {
    out.exit_code = 2;
    out.message = std::string("ConfigInvalid: ") + e.what();
    return out;
  }
  out.output_dir = cfg.output_dir;
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "resolved-config.json", cfg.resolved.dump(2) + "\n");
  TraceLog trace = flags.trace ? TraceLog(cfg.output_dir / "trace.jsonl") : TraceLog();
  std::unique_ptr<DiskCache> cache;
  if (!flags.no_cache) cache = std::make_unique<DiskCache>(cfg.cache_dir, &trace);
  auto t0 = std::chrono::steady_clock::now();
  ExecResult ex = execute_steps(plan.steps, cfg, flags.workers, cache.get(), trace);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<LedgerRow> rows;
  for (std::size_t i = 0; i < ex.outputs.size(); ++i)
    for (const auto& r : ex.outputs[i].rows) rows.push_back(r);
  for (const auto& r : rows) {
    out.checks += r.is_check();
    out.failed += r.is_check() && !r.passes();
  }
  out.failures = ex.failures;
  write_text(cfg.output_dir / "ledger.csv", ledger_csv(rows));
  json art = plan.artifact(ex);
  art["schema_version"] = kSchemaVersion;
  art["pipeline"] = cfg.pipeline;
  write_text(cfg.output_dir / (cfg.pipeline + ".json"), art.dump(2) + "\n");
  write_text(cfg.output_dir / "summary.md", summary_markdown(cfg, rows, ex, out.failed));

  json run = {{"schema_version", kSchemaVersion}, {"seconds", secs}, {"workers", flags.workers}, {"cache", nullptr}};
  if (cache) {
    auto st = cache->stats();
    run["cache"] = {{"dir", cache->dir().string()}, {"hits", st.hits}, {"misses", st.misses}, {"writes", st.writes}, {"corrupt", st.corrupt}};
  }
  json steps = json::array();
  for (std::size_t i = 0; i < ex.outputs.size(); ++i)
    if (ex.ok[i] && ex.outputs[i].data.contains("oracle")) steps.push_back({{"step", plan.steps[i].name}, {"oracle", ex.outputs[i].data["oracle"]}});
  run["oracle"] = steps;
  json errs = json::array();
  for (const auto& f : ex.failures) errs.push_back({{"step", f.step}, {"kind", f.kind}, {"message", f.message}});
  run["errors"] = errs;
  write_text(cfg.output_dir / "run.json", run.dump(2) + "\n");

  out.exit_code = !ex.failures.empty() ? 3 : out.failed ? 1 : 0;
  return out;
}

}  // namespace cgolab
