#pragma once

// Generators, chance baselines and a line-oriented text format for the copy,
// variable-length copy and adding tasks.
//
// Category ids are 1-based: symbols are 1..K, the blank is K+1 and the
// delimiter is K+2.  Sequence positions are 0-based indices.

#include "ornn/numerics.hpp"

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ornn {

struct CopyConfig {
  int K = 8;   ///< alphabet size
  int S = 10;  ///< length of the memorized prefix
  int T = 100; ///< delay
  bool variable_delimiter = false;

  int length() const { return T + 2 * S; }
  int blank() const { return K + 1; }
  int delimiter() const { return K + 2; }
  int num_classes() const { return K + 2; }

  bool operator==(const CopyConfig&) const = default;

  void validate() const {
    if (K < 2) throw std::invalid_argument("CopyConfig: K must be >= 2");
    if (S < 1) throw std::invalid_argument("CopyConfig: S must be >= 1");
    if (T < 2) throw std::invalid_argument("CopyConfig: T must be >= 2");
  }
};

struct CopySample {
  CopyConfig config;
  std::vector<int> inputs;
  std::vector<int> targets;
  int delimiter_pos = 0;  ///< 0-based index of the delimiter input

  bool operator==(const CopySample&) const = default;
};

enum class MarkerScheme {
  halves,       ///< j1 in the first half, j2 in the second half
  uniform_pair  ///< an unordered pair drawn uniformly without replacement
};

struct AddingConfig {
  int T = 100;
  MarkerScheme markers = MarkerScheme::halves;

  void validate() const {
    if (T < 2) throw std::invalid_argument("AddingConfig: T must be >= 2");
  }
};

struct AddingSample {
  std::vector<double> values;
  std::vector<int> markers;  ///< 0/1 per step
  int first = 0;             ///< 0-based positions of the two markers, first < second
  int second = 1;
  double target = 0.0;

  int length() const { return static_cast<int>(values.size()); }
  bool operator==(const AddingSample&) const = default;
};

using TaskSample = std::variant<CopySample, AddingSample>;

inline CopySample gen_copy(const CopyConfig& config, SeededRng& rng) {
  config.validate();
  const int n = config.length();
  CopySample s;
  s.config = config;
  s.inputs.assign(static_cast<std::size_t>(n), config.blank());
  s.targets.assign(static_cast<std::size_t>(n), config.blank());
  for (int i = 0; i < config.S; ++i) s.inputs[i] = static_cast<int>(rng.uniform_int(1, config.K));
  // Steps S+1..S+T (1-based) are the admissible delimiter slots.
  s.delimiter_pos = config.variable_delimiter
                        ? static_cast<int>(rng.uniform_int(config.S, config.S + config.T - 1))
                        : config.S + config.T - 1;
  s.inputs[s.delimiter_pos] = config.delimiter();
  for (int i = 0; i < config.S; ++i) s.targets[s.delimiter_pos + 1 + i] = s.inputs[i];
  return s;
}

inline AddingSample gen_adding(const AddingConfig& config, SeededRng& rng) {
  config.validate();
  AddingSample s;
  s.values.resize(static_cast<std::size_t>(config.T));
  for (auto& v : s.values) v = rng.uniform();
  s.markers.assign(static_cast<std::size_t>(config.T), 0);
  if (config.markers == MarkerScheme::halves) {
    const int half = config.T / 2;
    s.first = static_cast<int>(rng.uniform_int(0, half - 1));
    s.second = static_cast<int>(rng.uniform_int(half, config.T - 1));
  } else {
    const int a = static_cast<int>(rng.uniform_int(0, config.T - 1));
    int b = static_cast<int>(rng.uniform_int(0, config.T - 2));
    if (b >= a) ++b;
    s.first = std::min(a, b);
    s.second = std::max(a, b);
  }
  s.markers[s.first] = 1;
  s.markers[s.second] = 1;
  s.target = s.values[s.first] + s.values[s.second];
  return s;
}

inline Vector encode_one_hot(int id, int num_classes) {
  if (num_classes < 1 || id < 1 || id > num_classes) {
    throw std::out_of_range("encode_one_hot: id " + std::to_string(id) + " not in 1.." +
                            std::to_string(num_classes));
  }
  Vector v = Vector::Zero(num_classes);
  v(id - 1) = 1.0;
  return v;
}

/// Per-step cross-entropy of the best memoryless predictor: certain blanks
/// outside the recall window, uniform over the K symbols inside it.
inline double copy_baseline(const CopyConfig& config) {
  return config.S * std::log(static_cast<double>(config.K)) / config.length();
}

/// MSE of always predicting the target mean 1: Var(U1 + U2) = 1/6.
inline double adding_baseline() { return 1.0 / 6.0; }

// ---------------------------------------------------------------------------
// Text format, one sample per line:
//   copy <K> <S> <T> <variable> <delimiter_pos> <inputs x (T+2S)> <targets x (T+2S)>
//   adding <T> <first> <second> <target> <markers x T> <values x T>
// Reals are printed with 17 significant digits so a line round-trips exactly.
// ---------------------------------------------------------------------------

inline std::string to_line(const CopySample& s) {
  std::ostringstream os;
  os << "copy " << s.config.K << ' ' << s.config.S << ' ' << s.config.T << ' '
     << (s.config.variable_delimiter ? 1 : 0) << ' ' << s.delimiter_pos;
  for (int v : s.inputs) os << ' ' << v;
  for (int v : s.targets) os << ' ' << v;
  return os.str();
}

inline std::string to_line(const AddingSample& s) {
  std::ostringstream os;
  os << std::setprecision(17) << "adding " << s.length() << ' ' << s.first << ' ' << s.second
     << ' ' << s.target;
  for (int m : s.markers) os << ' ' << m;
  for (double v : s.values) os << ' ' << v;
  return os.str();
}

inline std::string to_line(const TaskSample& s) {
  return std::visit([](const auto& x) { return to_line(x); }, s);
}

inline TaskSample from_line(const std::string& line) {
  std::istringstream is(line);
  std::string kind;
  is >> kind;
  const auto fail = [&] { return std::invalid_argument("from_line: malformed sample: " + line); };
  if (kind == "copy") {
    CopySample s;
    int variable = 0;
    if (!(is >> s.config.K >> s.config.S >> s.config.T >> variable >> s.delimiter_pos)) throw fail();
    s.config.variable_delimiter = variable != 0;
    s.config.validate();
    const auto n = static_cast<std::size_t>(s.config.length());
    s.inputs.resize(n);
    s.targets.resize(n);
    for (auto& v : s.inputs)
      if (!(is >> v)) throw fail();
    for (auto& v : s.targets)
      if (!(is >> v)) throw fail();
    return s;
  }
  if (kind == "adding") {
    AddingSample s;
    int t = 0;
    if (!(is >> t >> s.first >> s.second >> s.target) || t < 2) throw fail();
    s.markers.resize(static_cast<std::size_t>(t));
    s.values.resize(static_cast<std::size_t>(t));
    for (auto& m : s.markers)
      if (!(is >> m)) throw fail();
    for (auto& v : s.values)
      if (!(is >> v)) throw fail();
    return s;
  }
  throw fail();
}

}  // namespace ornn
