// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration in a flat "key = value" format with [section] headers.
// Lines starting with '#' or ';' are comments. Unknown sections and keys are
// rejected.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>

#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/params.hpp"
#include "unimatch/task_relation.hpp"

namespace unimatch {

struct TaskRelConfig {
  taskrel::Metric metric = taskrel::Metric::kCosine;
  taskrel::VectorMode mode = taskrel::VectorMode::kAdaptedWDelta;
  bool normalize = true;  // softmax rows before the implicit updates
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t heads = 1;
  std::size_t eval_repeats = 10;
  TaskRelConfig taskrel;

  void validate() const {
    model.validate();
    train.validate();
    if (heads != 1) throw ConfigError("matcher.heads must be 1 (single-head matching only)");
    if (eval_repeats < 1) throw ConfigError("protocol.eval_repeats must be >= 1");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key + " (expected true or false)");
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Applies one setting. `key` is "section.name".
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "train.inner_lr") c.train.inner_lr = parse_number<double>(key, v);
  else if (key == "train.inner_steps") c.train.inner_steps = parse_number<std::size_t>(key, v);
  else if (key == "train.meta_lr") c.train.meta_lr = parse_number<double>(key, v);
  else if (key == "train.optimizer") c.train.optimizer = parse_optimizer(v);
  else if (key == "train.weight_decay") c.train.weight_decay = parse_number<double>(key, v);
  else if (key == "train.batch_tasks") c.train.batch_tasks = parse_number<std::size_t>(key, v);
  else if (key == "train.max_epochs") c.train.max_epochs = parse_number<std::size_t>(key, v);
  else if (key == "train.seed") c.train.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "train.support_split_fraction") c.train.support_split_fraction = parse_number<double>(key, v);
  else if (key == "train.early_stop_patience") c.train.early_stop_patience = parse_number<std::size_t>(key, v);
  else if (key == "train.workers") c.train.workers = parse_number<std::size_t>(key, v);
  else if (key == "train.log_clamp") c.train.log_clamp = parse_number<double>(key, v);
  else if (key == "encoder.layers") c.model.layers = parse_number<std::size_t>(key, v);
  else if (key == "encoder.hidden") c.model.hidden = parse_number<std::size_t>(key, v);
  else if (key == "encoder.dropout") c.model.encoder_dropout = parse_number<double>(key, v);
  else if (key == "matcher.heads") c.heads = parse_number<std::size_t>(key, v);
  else if (key == "matcher.dropout") c.model.match_dropout = parse_number<double>(key, v);
  else if (key == "matcher.share_qk") c.model.share_qk = parse_bool(key, v);
  else if (key == "matcher.fusion_bias") c.model.fusion_bias = parse_bool(key, v);
  else if (key == "protocol.kind") c.train.protocol = parse_protocol(v);
  else if (key == "protocol.support_size") c.train.support_size = parse_number<std::size_t>(key, v);
  else if (key == "protocol.query_size") c.train.query_size = parse_number<std::size_t>(key, v);
  else if (key == "protocol.eval_repeats") c.eval_repeats = parse_number<std::size_t>(key, v);
  else if (key == "taskrel.metric") c.taskrel.metric = taskrel::parse_metric(v);
  else if (key == "taskrel.mode") c.taskrel.mode = taskrel::parse_mode(v);
  else if (key == "taskrel.normalize") {
    if (v == "softmax") c.taskrel.normalize = true;
    else if (v == "raw") c.taskrel.normalize = false;
    else throw ConfigError("invalid value '" + v + "' for taskrel.normalize (expected softmax or raw)");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline RunConfig parse_config(std::string_view text) {
  static const std::set<std::string> sections = {"train", "encoder", "matcher", "protocol", "taskrel"};
  RunConfig c;
  std::string section;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const std::string line = detail::trim(raw);
    const std::string where = " (line " + std::to_string(line_no) + ")";
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header" + where);
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError("unknown config section '" + section + "'" + where);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'" + where);
    if (section.empty()) throw ConfigError("setting outside of a section" + where);
    const std::string key = section + "." + detail::trim(std::string_view(line).substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "'" + where);
    try {
      apply_setting(c, key, detail::trim(std::string_view(line).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(e.what() + where);
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(serialize(c)) reproduces c.
inline std::string serialize(const RunConfig& c) {
  using detail::fmt_double;
  std::ostringstream o;
  o << "[train]\n"
    << "inner_lr = " << fmt_double(c.train.inner_lr) << "\n"
    << "inner_steps = " << c.train.inner_steps << "\n"
    << "meta_lr = " << fmt_double(c.train.meta_lr) << "\n"
    << "optimizer = " << optimizer_name(c.train.optimizer) << "\n"
    << "weight_decay = " << fmt_double(c.train.weight_decay) << "\n"
    << "batch_tasks = " << c.train.batch_tasks << "\n"
    << "max_epochs = " << c.train.max_epochs << "\n"
    << "seed = " << c.train.seed << "\n"
    << "support_split_fraction = " << fmt_double(c.train.support_split_fraction) << "\n"
    << "early_stop_patience = " << c.train.early_stop_patience << "\n"
    << "workers = " << c.train.workers << "\n"
    << "log_clamp = " << fmt_double(c.train.log_clamp) << "\n"
    << "\n[encoder]\n"
    << "layers = " << c.model.layers << "\n"
    << "hidden = " << c.model.hidden << "\n"
    << "dropout = " << fmt_double(c.model.encoder_dropout) << "\n"
    << "\n[matcher]\n"
    << "heads = " << c.heads << "\n"
    << "dropout = " << fmt_double(c.model.match_dropout) << "\n"
    << "share_qk = " << (c.model.share_qk ? "true" : "false") << "\n"
    << "fusion_bias = " << (c.model.fusion_bias ? "true" : "false") << "\n"
    << "\n[protocol]\n"
    << "kind = " << protocol_name(c.train.protocol) << "\n"
    << "support_size = " << c.train.support_size << "\n"
    << "query_size = " << c.train.query_size << "\n"
    << "eval_repeats = " << c.eval_repeats << "\n"
    << "\n[taskrel]\n"
    << "metric = " << taskrel::metric_name(c.taskrel.metric) << "\n"
    << "mode = " << taskrel::mode_name(c.taskrel.mode) << "\n"
    << "normalize = " << (c.taskrel.normalize ? "softmax" : "raw") << "\n";
  return o.str();
}

}  // namespace unimatch
