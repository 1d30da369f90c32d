#pragma once

// Experiment runner: configuration, seeded online training with periodic
// evaluation and CSV metrics, the mechanism success sweep and the activation
// probe.  The command-line tool in tools/ is a thin layer over this header.

#include "ornn/checkpoint.hpp"
#include "ornn/mechanisms.hpp"
#include "ornn/models.hpp"
#include "ornn/parallel.hpp"
#include "ornn/tasks.hpp"
#include "ornn/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ornn {

using Json = nlohmann::ordered_json;

enum class TaskKind { copy, varcopy, adding };
enum class ModelKind { lt_ornn, lt_irnn, lstm, lstm_peephole, pooled_ornn };

/// Raised for invalid or contradictory settings; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::copy: return "copy";
    case TaskKind::varcopy: return "varcopy";
    case TaskKind::adding: return "adding";
  }
  return "?";
}

inline std::string to_string(ModelKind m) {
  switch (m) {
    case ModelKind::lt_ornn: return "lt-ornn";
    case ModelKind::lt_irnn: return "lt-irnn";
    case ModelKind::lstm: return "lstm";
    case ModelKind::lstm_peephole: return "lstm-peephole";
    case ModelKind::pooled_ornn: return "pooled-ornn";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (TaskKind t : {TaskKind::copy, TaskKind::varcopy, TaskKind::adding})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task '" + s + "' (expected copy, varcopy or adding)");
}

inline ModelKind parse_model(const std::string& s) {
  for (ModelKind m : {ModelKind::lt_ornn, ModelKind::lt_irnn, ModelKind::lstm,
                      ModelKind::lstm_peephole, ModelKind::pooled_ornn})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown model '" + s +
                    "' (expected lt-ornn, lt-irnn, lstm, lstm-peephole or pooled-ornn)");
}

inline bool is_lstm(ModelKind m) { return m == ModelKind::lstm || m == ModelKind::lstm_peephole; }

struct ExperimentConfig {
  TaskKind task = TaskKind::copy;
  ModelKind model = ModelKind::lt_ornn;
  int T = 100;
  int S = 10;
  int K = 8;
  MarkerScheme marker_scheme = MarkerScheme::halves;
  int hidden = 80;
  Nonlinearity nonlinearity = Nonlinearity::identity;
  int pool = 2;
  double lr = 1e-4;
  int batch = 50;
  int max_updates = 10000;
  std::uint64_t seed = 1;
  std::optional<double> clip_l = 1000.0;
  GradNormalization normalization = GradNormalization::hidden;
  bool ortho_penalty = false;
  int penalty_m = 50;
  double penalty_step = 1.0;
  double init_std = 0.0;  ///< std of encoder / decoder entries; 0 selects 1/sqrt(hidden)
  int eval_every = 100;
  int eval_size = 1000;
  std::optional<double> stop_below;  ///< stop once eval loss drops below this value

  int input_dim() const { return task == TaskKind::adding ? 2 : K + 2; }
  int output_dim() const { return task == TaskKind::adding ? 1 : K + 2; }
  int sequence_length() const { return task == TaskKind::adding ? T : T + 2 * S; }
  double baseline() const {
    return task == TaskKind::adding ? adding_baseline() : copy_baseline(CopyConfig{K, S, T});
  }
};

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["task"] = to_string(c.task);
  j["model"] = to_string(c.model);
  j["T"] = c.T;
  if (c.task != TaskKind::adding) {
    j["S"] = c.S;
    j["K"] = c.K;
  } else {
    j["marker_scheme"] = c.marker_scheme == MarkerScheme::halves ? "halves" : "uniform-pair";
  }
  j["hidden"] = c.hidden;
  if (!is_lstm(c.model)) j["nonlinearity"] = std::string(to_string(c.nonlinearity));
  if (c.model == ModelKind::pooled_ornn) j["pool"] = c.pool;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["max_updates"] = c.max_updates;
  j["seed"] = c.seed;
  j["clip_l"] = c.clip_l ? Json(*c.clip_l) : Json(nullptr);
  j["normalize_by_T"] = c.normalization != GradNormalization::none;
  j["normalization"] = c.normalization == GradNormalization::parameters ? "parameters" : "hidden";
  j["ortho_penalty"] = c.ortho_penalty;
  if (c.ortho_penalty) {
    j["penalty_m"] = c.penalty_m;
    j["penalty_step"] = c.penalty_step;
  }
  j["init_std"] = c.init_std;
  j["eval_every"] = c.eval_every;
  j["eval_size"] = c.eval_size;
  j["stop_below"] = c.stop_below ? Json(*c.stop_below) : Json(nullptr);
  return j;
}

namespace detail {

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "task", "model", "T", "S", "K", "marker_scheme", "hidden", "nonlinearity", "pool", "lr",
      "batch", "max_updates", "seed", "clip_l", "normalize_by_T", "normalization",
      "ortho_penalty", "penalty_m", "penalty_step", "init_std", "eval_every", "eval_size",
      "stop_below", "full"};
  return keys;
}

template <class V>
V get_as(const Json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Builds a configuration from a JSON object of settings, filling the
/// defaults that depend on task and model:
///   hidden 80 (copy tasks) or 128 (adding); lr 1e-4 (LT-RNNs) or 1e-3 (LSTMs);
///   nonlinearity identity (copy tasks) or relu (adding); the soft penalty on
///   for pooled-ornn only.  "full": true raises T to 500 (copy) or 750 (adding)
///   unless T is given.
inline ExperimentConfig resolve_config(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& keys = detail::config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  const auto has = [&](const char* k) { return j.contains(k) && !j.at(k).is_null(); };
  ExperimentConfig c;
  if (has("task")) c.task = parse_task(detail::get_as<std::string>(j, "task"));
  if (has("model")) c.model = parse_model(detail::get_as<std::string>(j, "model"));
  const bool full = has("full") && detail::get_as<bool>(j, "full");
  if (has("T")) c.T = detail::get_as<int>(j, "T");
  else if (full && c.task != TaskKind::varcopy) c.T = c.task == TaskKind::adding ? 750 : 500;
  if (has("S")) c.S = detail::get_as<int>(j, "S");
  if (has("K")) c.K = detail::get_as<int>(j, "K");
  if (has("marker_scheme")) {
    const auto m = detail::get_as<std::string>(j, "marker_scheme");
    if (m == "halves") c.marker_scheme = MarkerScheme::halves;
    else if (m == "uniform-pair") c.marker_scheme = MarkerScheme::uniform_pair;
    else throw ConfigError("marker_scheme must be halves or uniform-pair");
  }
  c.hidden = has("hidden") ? detail::get_as<int>(j, "hidden") : (c.task == TaskKind::adding ? 128 : 80);
  if (has("nonlinearity")) {
    try {
      c.nonlinearity = parse_nonlinearity(detail::get_as<std::string>(j, "nonlinearity"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else {
    c.nonlinearity = c.task == TaskKind::adding ? Nonlinearity::relu : Nonlinearity::identity;
  }
  if (has("pool")) c.pool = detail::get_as<int>(j, "pool");
  c.lr = has("lr") ? detail::get_as<double>(j, "lr") : (is_lstm(c.model) ? 1e-3 : 1e-4);
  if (has("batch")) c.batch = detail::get_as<int>(j, "batch");
  if (has("max_updates")) c.max_updates = detail::get_as<int>(j, "max_updates");
  if (has("seed")) c.seed = detail::get_as<std::uint64_t>(j, "seed");
  if (j.contains("clip_l")) {
    c.clip_l = j.at("clip_l").is_null() ? std::nullopt
                                        : std::optional<double>(detail::get_as<double>(j, "clip_l"));
  }
  const bool normalize = has("normalize_by_T") ? detail::get_as<bool>(j, "normalize_by_T") : true;
  std::string mode = has("normalization") ? detail::get_as<std::string>(j, "normalization") : "hidden";
  if (mode != "hidden" && mode != "parameters") {
    throw ConfigError("normalization must be hidden or parameters");
  }
  c.normalization = !normalize ? GradNormalization::none
                    : mode == "hidden" ? GradNormalization::hidden
                                       : GradNormalization::parameters;
  c.ortho_penalty = has("ortho_penalty") ? detail::get_as<bool>(j, "ortho_penalty")
                                         : c.model == ModelKind::pooled_ornn;
  if (has("penalty_m")) c.penalty_m = detail::get_as<int>(j, "penalty_m");
  if (has("penalty_step")) c.penalty_step = detail::get_as<double>(j, "penalty_step");
  if (has("init_std")) c.init_std = detail::get_as<double>(j, "init_std");
  if (has("eval_every")) c.eval_every = detail::get_as<int>(j, "eval_every");
  if (has("eval_size")) c.eval_size = detail::get_as<int>(j, "eval_size");
  if (has("stop_below")) c.stop_below = detail::get_as<double>(j, "stop_below");

  const auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be a positive count");
  };
  positive(c.hidden, "hidden");
  positive(c.batch, "batch");
  positive(c.max_updates, "max_updates");
  positive(c.eval_every, "eval_every");
  positive(c.eval_size, "eval_size");
  positive(c.pool, "pool");
  positive(c.penalty_m, "penalty_m");
  if (c.T < 2) throw ConfigError("T must be >= 2");
  if (c.task != TaskKind::adding) {
    if (c.S < 1) throw ConfigError("S must be >= 1");
    if (c.K < 2) throw ConfigError("K must be >= 2");
  }
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be a finite value >= 0");
  if (c.clip_l && !(*c.clip_l > 0.0)) throw ConfigError("clip_l must be positive");
  if (!(c.penalty_step >= 0.0)) throw ConfigError("penalty_step must be >= 0");
  if (!(c.init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
  if (c.model == ModelKind::pooled_ornn && c.hidden % c.pool != 0) {
    throw ConfigError("pooled-ornn: hidden size " + std::to_string(c.hidden) +
                      " is not divisible by pool size " + std::to_string(c.pool));
  }
  if (c.ortho_penalty && is_lstm(c.model)) {
    throw ConfigError("ortho_penalty needs a transition matrix; the LSTM has none");
  }
  if (c.task != TaskKind::adding && c.marker_scheme != MarkerScheme::halves) {
    throw ConfigError("marker_scheme applies to the adding task only");
  }
  return c;
}

/// Command-line flags of the `train` subcommand.  Flags override values read
/// from the --config JSON file.
struct TrainFlags {
  std::string config_path;
  Json overrides = Json::object();
  std::string out = "metrics.csv";
  std::string checkpoint;
  bool resume = false;
  bool record_time = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON file with settings");
    app.add_option("--out", out, "metrics CSV path")->capture_default_str();
    app.add_option("--checkpoint", checkpoint, "checkpoint path, written at every evaluation");
    app.add_flag("--resume", resume, "continue from --checkpoint");
    app.add_flag("--record-time", record_time, "fill wall_seconds (CSV is then not reproducible)");
    string_opt(app, "--task", "task", "copy | varcopy | adding");
    string_opt(app, "--model", "model", "lt-ornn | lt-irnn | lstm | lstm-peephole | pooled-ornn");
    num_opt<int>(app, "--T", "T", "delay (copy) or sequence length (adding)");
    num_opt<int>(app, "--S", "S", "length of the sequence to copy");
    num_opt<int>(app, "--K", "K", "alphabet size");
    string_opt(app, "--marker-scheme", "marker_scheme", "halves | uniform-pair");
    num_opt<int>(app, "--hidden", "hidden", "hidden units (pooled: full size before pooling)");
    string_opt(app, "--nonlinearity", "nonlinearity", "identity | relu | tanh");
    num_opt<int>(app, "--pool", "pool", "pool size and stride");
    num_opt<double>(app, "--lr", "lr", "RMSProp learning rate");
    num_opt<int>(app, "--batch", "batch", "minibatch size");
    num_opt<int>(app, "--max-updates", "max_updates", "update budget");
    num_opt<std::uint64_t>(app, "--seed", "seed", "run seed");
    num_opt<double>(app, "--clip", "clip_l", "activation clipping norm");
    app.add_flag_callback("--no-clip", [this] { overrides["clip_l"] = nullptr; }, "disable clipping");
    app.add_flag_callback("--no-normalize", [this] { overrides["normalize_by_T"] = false; },
                          "disable the 1/T gradient normalization");
    string_opt(app, "--normalization", "normalization", "hidden | parameters");
    app.add_flag_callback("--ortho-penalty", [this] { overrides["ortho_penalty"] = true; },
                          "apply the soft orthogonality penalty every update");
    app.add_flag_callback("--no-ortho-penalty", [this] { overrides["ortho_penalty"] = false; },
                          "never apply the soft orthogonality penalty");
    num_opt<int>(app, "--penalty-m", "penalty_m", "unit vectors per penalty step");
    num_opt<double>(app, "--penalty-step", "penalty_step", "penalty step size");
    num_opt<double>(app, "--init-std", "init_std", "encoder/decoder init std (0: 1/sqrt(hidden))");
    num_opt<int>(app, "--eval-every", "eval_every", "updates between evaluations");
    num_opt<int>(app, "--eval-size", "eval_size", "held-out evaluation samples");
    num_opt<double>(app, "--stop-below", "stop_below", "stop once eval loss is below this");
    app.add_flag_callback("--full", [this] { overrides["full"] = true; },
                          "long-horizon T (500 copy, 750 adding)");
  }

  /// File values, then flags on top.
  Json merged() const {
    Json j = Json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config file " + config_path);
      try {
        j = Json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + config_path + ": " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    }
    for (const auto& [k, v] : overrides.items()) j[k] = v;
    return j;
  }

 private:
  void string_opt(CLI::App& app, const char* flag, const char* key, const char* help) {
    app.add_option_function<std::string>(flag, [this, key](const std::string& v) { overrides[key] = v; }, help);
  }
  template <class V>
  void num_opt(CLI::App& app, const char* flag, const char* key, const char* help) {
    app.add_option_function<V>(flag, [this, key](const V& v) { overrides[key] = v; }, help);
  }
};

/// Parses `train`-style arguments (without the program name) into a config.
inline ExperimentConfig parse_config(const std::vector<std::string>& args) {
  CLI::App app{"train"};
  TrainFlags flags;
  flags.attach(app);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }
  return resolve_config(flags.merged());
}

// ---------------------------------------------------------------------------
// Models and data
// ---------------------------------------------------------------------------

/// Fresh parameters.  Encoders and decoders are N(0, init_std²) with
/// init_std = 1/sqrt(hidden) unless set; biases start at 0.  LT-ORNN and
/// pooled-ornn draw V with init_transition(orthogonal), LT-IRNN uses V = I.
/// LSTM weights, including peepholes, are uniform on [-0.1, 0.1].
inline Model init_model(const ExperimentConfig& c, SeededRng& rng) {
  const Eigen::Index n = c.input_dim(), d = c.hidden, m = c.output_dim();
  const double s = c.init_std > 0.0 ? c.init_std : 1.0 / std::sqrt(static_cast<double>(d));
  switch (c.model) {
    case ModelKind::lt_ornn:
    case ModelKind::lt_irnn: {
      LtRnnParams p;
      p.nonlinearity = c.nonlinearity;
      p.V = init_transition(c.model == ModelKind::lt_ornn ? TransitionInit::orthogonal
                                                          : TransitionInit::identity, d, rng);
      p.U = rng.gaussian(d, n, s);
      p.b = Matrix::Zero(d, 1);
      p.W = rng.gaussian(m, d, s);
      return p;
    }
    case ModelKind::pooled_ornn: {
      PooledLtRnnParams p;
      p.nonlinearity = c.nonlinearity;
      p.pool = c.pool;
      p.V = init_transition(TransitionInit::orthogonal, d, rng);
      p.U = rng.gaussian(d, n, s);
      p.b = Matrix::Zero(d, 1);
      p.W_I = rng.gaussian(m, d, s);
      p.W_P = rng.gaussian(m, d / c.pool, s);
      return p;
    }
    case ModelKind::lstm:
    case ModelKind::lstm_peephole: {
      LstmParams p;
      p.peephole = c.model == ModelKind::lstm_peephole;
      const auto u = [&](Eigen::Index r, Eigen::Index k) { return rng.uniform_matrix(r, k, -0.1, 0.1); };
      for (Matrix* x : {&p.Ui, &p.Uf, &p.Uo, &p.Ug}) *x = u(d, n);
      for (Matrix* x : {&p.Vi, &p.Vf, &p.Vo, &p.Vg}) *x = u(d, d);
      for (Matrix* x : {&p.bi, &p.bf, &p.bo, &p.bg}) *x = u(d, 1);
      p.W = u(m, d);
      if (p.peephole)
        for (Matrix* x : {&p.Pi, &p.Pf, &p.Po, &p.Pg}) *x = u(d, d);
      return p;
    }
  }
  throw ConfigError("unknown model");
}

inline Batch sample_batch(const ExperimentConfig& c, int size, SeededRng& rng) {
  if (c.task == TaskKind::adding) {
    std::vector<AddingSample> s;
    s.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) s.push_back(gen_adding(AddingConfig{c.T, c.marker_scheme}, rng));
    return make_batch(std::span<const AddingSample>(s));
  }
  const CopyConfig cc{c.K, c.S, c.T, c.task == TaskKind::varcopy};
  std::vector<CopySample> s;
  s.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) s.push_back(gen_copy(cc, rng));
  return make_batch(std::span<const CopySample>(s));
}

// RNG streams derived from the run seed.
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kBatchStream = 1;
inline constexpr std::uint64_t kEvalStream = 2;
inline constexpr std::uint64_t kPenaltyStream = 3;

/// The held-out evaluation set, split into chunks of at most `batch` samples.
inline std::vector<Batch> eval_set(const ExperimentConfig& c) {
  SeededRng rng(c.seed, kEvalStream);
  std::vector<Batch> out;
  for (int done = 0; done < c.eval_size; done += c.batch) {
    out.push_back(sample_batch(c, std::min(c.batch, c.eval_size - done), rng));
  }
  return out;
}

/// Mean per-sample loss over the chunks; chunks run in parallel and are summed in order.
inline double evaluate(const Model& model, const std::vector<Batch>& chunks,
                       std::optional<double> clip_l) {
  std::vector<double> sums(chunks.size(), 0.0);
  std::vector<Eigen::Index> counts(chunks.size(), 0);
  parallel_for(chunks.size(), [&](std::size_t i) {
    const ForwardTrace tr = forward(model, chunks[i].inputs, clip_l);
    sums[i] = per_sample_loss(tr, chunks[i]).sum();
    counts[i] = chunks[i].size();
  });
  double total = 0.0;
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    total += sums[i];
    n += counts[i];
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::uint64_t update = 0;
  double train_loss = 0.0;  ///< mean minibatch loss since the previous row
  double eval_loss = 0.0;
  double baseline = 0.0;
  double spectral_norm_V = std::nan("");  ///< NaN for the LSTM, which has no single transition
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  bool diverged = false;
};

inline constexpr const char* kMetricsHeader =
    "update,train_loss,eval_loss,baseline,spectral_norm_V,wall_seconds,seed,diverged";

inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string metrics_line(const MetricsRecord& r) {
  char wall[40];
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_seconds);
  return std::to_string(r.update) + ',' + format_real(r.train_loss) + ',' + format_real(r.eval_loss) +
         ',' + format_real(r.baseline) + ',' + format_real(r.spectral_norm_V) + ',' + wall + ',' +
         std::to_string(r.seed) + ',' + (r.diverged ? '1' : '0');
}

inline MetricsRecord parse_metrics_line(const std::string& line) {
  std::istringstream is(line);
  std::string f[8];
  for (auto& x : f)
    if (!std::getline(is, x, ',')) throw std::invalid_argument("malformed metrics row: " + line);
  MetricsRecord r;
  r.update = std::stoull(f[0]);
  r.train_loss = std::stod(f[1]);
  r.eval_loss = std::stod(f[2]);
  r.baseline = std::stod(f[3]);
  r.spectral_norm_V = std::stod(f[4]);
  r.wall_seconds = std::stod(f[5]);
  r.seed = std::stoull(f[6]);
  r.diverged = f[7] == "1";
  return r;
}

/// Data rows of a metrics CSV (comment lines and the header are skipped).
inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<MetricsRecord> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line == kMetricsHeader) continue;
    rows.push_back(parse_metrics_line(line));
  }
  return rows;
}

enum class RunStatus { completed, stopped_early, diverged };

struct RunOptions {
  std::filesystem::path csv = "metrics.csv";
  std::optional<std::filesystem::path> checkpoint;
  bool resume = false;
  bool record_time = false;  ///< fill wall_seconds; rows then differ between reruns
  std::ostream* log = nullptr;
};

struct RunResult {
  RunStatus status = RunStatus::completed;
  std::vector<MetricsRecord> rows;  ///< every row of the CSV, including resumed ones
  Model model;
};

namespace detail {

inline double transition_norm(const Model& m) {
  const Matrix* v = transition(m);
  return v ? spectral_norm(*v) : std::nan("");
}

inline std::string config_comment(const ExperimentConfig& c) {
  std::string out = "# ornn train\n";
  std::istringstream is(to_json(c).dump(2));
  std::string line;
  while (std::getline(is, line)) out += "# " + line + '\n';
  return out;
}

/// Two resolved configs describe the same run if they differ at most in the
/// budget (max_updates, stop_below); a resumed run may extend the budget.
inline bool same_run(const std::string& a, const std::string& b) {
  Json ja = Json::parse(a), jb = Json::parse(b);
  for (const char* k : {"max_updates", "stop_below"}) {
    ja.erase(k);
    jb.erase(k);
  }
  return ja == jb;
}

}  // namespace detail

/// Online training: a fresh minibatch per update (stream kBatchStream,
/// substream = update index), RMSProp, optional penalty step on V after every
/// update, and one CSV row at update 0, every eval_every updates and at the
/// end.  With a checkpoint path the state is saved after every row, so
/// `resume` continues a run and produces the same bytes as an uninterrupted one.
inline RunResult run_training(const ExperimentConfig& cfg, const RunOptions& opt) {
  const std::string cfg_json = to_json(cfg).dump();
  const std::vector<Batch> eval_chunks = eval_set(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return opt.record_time
               ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
               : 0.0;
  };

  RunResult result;
  std::uint64_t start = 0;
  Model model;
  RmsPropState state;
  double loss_sum = 0.0;
  std::uint64_t loss_count = 0;
  if (opt.resume) {
    if (!opt.checkpoint) throw ConfigError("resume needs a checkpoint path");
    Checkpoint ck = load_checkpoint(*opt.checkpoint);
    if (!detail::same_run(ck.config_json, cfg_json)) {
      throw ConfigError("checkpoint was written by a run with a different configuration");
    }
    if (ck.update > static_cast<std::uint64_t>(cfg.max_updates)) {
      throw ConfigError("checkpoint is past max_updates");
    }
    if (!ck.optimizer) throw ConfigError("checkpoint has no optimizer state");
    model = std::move(ck.model);
    state = std::move(*ck.optimizer);
    start = ck.update;
    loss_sum = ck.loss_sum;
    loss_count = ck.loss_count;
    for (const auto& r : read_metrics(opt.csv))
      if (r.update <= start) result.rows.push_back(r);
    if (result.rows.empty() || result.rows.back().update != start) {
      throw ConfigError("metrics CSV does not match the checkpoint");
    }
    // An end-of-budget row off the eval grid is not part of the longer run.
    if (start % static_cast<std::uint64_t>(cfg.eval_every) != 0 &&
        start < static_cast<std::uint64_t>(cfg.max_updates)) {
      result.rows.pop_back();
    }
  } else {
    SeededRng init_rng(cfg.seed, kInitStream);
    model = init_model(cfg, init_rng);
    state = RmsPropState::for_model(model, cfg.lr);
  }

  std::ofstream csv;
  {
    // Rewrite the kept prefix (resume) or start a new file.
    std::ofstream fresh(opt.csv, std::ios::trunc);
    if (!fresh) throw std::runtime_error("cannot write " + opt.csv.string());
    fresh << detail::config_comment(cfg) << kMetricsHeader << '\n';
    for (const auto& r : result.rows) fresh << metrics_line(r) << '\n';
  }
  csv.open(opt.csv, std::ios::app);

  const auto emit = [&](MetricsRecord r) {
    csv << metrics_line(r) << '\n';
    csv.flush();
    result.rows.push_back(r);
    if (opt.log) *opt.log << metrics_line(r) << std::endl;
    if (opt.checkpoint && !r.diverged) {
      // Off the grid the accumulator carries over into the next regular row.
      const bool on_grid = r.update % static_cast<std::uint64_t>(cfg.eval_every) == 0;
      save_checkpoint(*opt.checkpoint, Checkpoint{model, r.update, state, cfg_json,
                                                  on_grid ? 0.0 : loss_sum,
                                                  on_grid ? 0 : loss_count});
    }
  };
  const auto make_row = [&](std::uint64_t update, double train_loss) {
    MetricsRecord r;
    r.update = update;
    r.train_loss = train_loss;
    r.eval_loss = evaluate(model, eval_chunks, cfg.clip_l);
    r.baseline = cfg.baseline();
    r.spectral_norm_V = detail::transition_norm(model);
    r.wall_seconds = elapsed();
    r.seed = cfg.seed;
    return r;
  };
  const auto diverge = [&](std::uint64_t update, double train_loss) {
    MetricsRecord r;
    r.update = update;
    r.train_loss = train_loss;
    r.eval_loss = std::nan("");
    r.baseline = cfg.baseline();
    r.spectral_norm_V = std::nan("");
    r.wall_seconds = elapsed();
    r.seed = cfg.seed;
    r.diverged = true;
    emit(r);
    result.status = RunStatus::diverged;
    result.model = model;
    return result;
  };

  if (start == 0) {
    try {
      emit(make_row(0, std::nan("")));
    } catch (const NumericalError&) {
      return diverge(0, std::nan(""));
    }
  }
  const SeededRng batch_root(cfg.seed, kBatchStream);
  const SeededRng penalty_root(cfg.seed, kPenaltyStream);
  for (std::uint64_t u = start; u < static_cast<std::uint64_t>(cfg.max_updates); ++u) {
    double loss = std::nan("");
    try {
      SeededRng rng = batch_root.substream(u);
      const Batch batch = sample_batch(cfg, cfg.batch, rng);
      const ForwardTrace trace = forward(model, batch.inputs, cfg.clip_l);
      loss = sequence_loss(trace, batch);
      if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
      const Gradients g = backward(model, trace, batch, cfg.normalization);
      rmsprop_step(state, model, g);
      if (cfg.ortho_penalty) {
        SeededRng prng = penalty_root.substream(u);
        Matrix* v = transition(model);
        *v = ortho_penalty_step(*v, static_cast<std::size_t>(cfg.penalty_m), cfg.penalty_step, prng);
        if (!v->allFinite()) throw NumericalError("penalty step produced a non-finite V");
      }
    } catch (const NumericalError& e) {
      if (opt.log) *opt.log << "diverged at update " << u + 1 << ": " << e.what() << std::endl;
      return diverge(u + 1, loss);
    }
    loss_sum += loss;
    ++loss_count;
    const std::uint64_t done = u + 1;
    if (done % static_cast<std::uint64_t>(cfg.eval_every) == 0 ||
        done == static_cast<std::uint64_t>(cfg.max_updates)) {
      MetricsRecord row;
      try {
        row = make_row(done, loss_sum / static_cast<double>(loss_count));
      } catch (const NumericalError&) {
        return diverge(done, loss_sum / static_cast<double>(loss_count));
      }
      if (!std::isfinite(row.eval_loss)) return diverge(done, row.train_loss);
      emit(row);
      loss_sum = 0.0;
      loss_count = 0;
      if (cfg.stop_below && row.eval_loss < *cfg.stop_below) {
        result.status = RunStatus::stopped_early;
        break;
      }
    }
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Figure 1 sweep and activation probe
// ---------------------------------------------------------------------------

struct Figure1Options {
  int d = 128;
  int T = 500;
  int trials = 500;
  std::vector<int> K_grid{2, 4, 8, 16};
  std::vector<int> S_grid{1, 2, 5, 10, 20, 50};
  std::uint64_t seed = 1;
};

inline std::vector<SweepRow> run_figure1(const Figure1Options& o, const std::filesystem::path& out) {
  const auto rows = success_sweep(o.d, o.T, o.K_grid, o.S_grid, o.trials, SeededRng(o.seed, 0));
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + out.string());
  write_sweep_csv(os, rows, o.seed);
  return rows;
}

/// Per-step hidden activations and pooled radii of an LT-RNN-family model on
/// one adding sample.  Columns: step, value, marker, h_0.., p_0.. (the pooled
/// radii use the model's pool size, or 2 for an unpooled model).
inline void run_activation_probe(const Model& model, const AddingSample& sample, std::ostream& os,
                                 std::optional<double> clip_l = 1000.0) {
  if (architecture_of(model) == Architecture::lstm) {
    throw ConfigError("probe: the LSTM has no LT-RNN hidden state to probe");
  }
  const Batch batch = make_batch(TaskSample{sample});
  const ForwardTrace trace = forward(model, batch.inputs, clip_l);
  const Eigen::Index d = hidden_size(model);
  const int k = std::holds_alternative<PooledLtRnnParams>(model)
                    ? std::get<PooledLtRnnParams>(model).pool
                    : (d % 2 == 0 ? 2 : 1);
  os << "step,value,marker";
  for (Eigen::Index i = 0; i < d; ++i) os << ",h_" << i;
  for (Eigen::Index i = 0; i < d / k; ++i) os << ",p_" << i;
  os << '\n';
  for (int t = 0; t < trace.length(); ++t) {
    const Matrix& h = trace.steps[static_cast<std::size_t>(t)].h;
    const Matrix p = l2_pool(h, k);
    os << t << ',' << format_real(sample.values[static_cast<std::size_t>(t)]) << ','
       << sample.markers[static_cast<std::size_t>(t)];
    for (Eigen::Index i = 0; i < h.rows(); ++i) os << ',' << format_real(h(i, 0));
    for (Eigen::Index i = 0; i < p.rows(); ++i) os << ',' << format_real(p(i, 0));
    os << '\n';
  }
}

}  // namespace ornn
