// SPDX-License-Identifier: Apache-2.0
#pragma once

// Task registries and episodic sampling.
//
// On disk a registry is root/{train,valid,test}/<task_id>.jsonl with one
// {"smiles": "...", "label": 0|1} object per line. Tasks are kept sorted by id.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimatch/errors.hpp"
#include "unimatch/rng.hpp"
#include "unimatch/smiles.hpp"

namespace unimatch {

enum class Split { kTrain, kValid, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train, valid or test)");
}

struct Example {
  std::string smiles;
  int label = 0;
  std::shared_ptr<const smiles::MolGraph> graph;
};

struct TaskRecord {
  std::string id;
  std::vector<Example> examples;
  Split split = Split::kTrain;

  std::size_t count(int label) const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [&](const Example& e) { return e.label == label; }));
  }
};

struct LoadReport {
  std::size_t rejected_lines = 0;
  std::vector<std::string> messages;
  std::vector<std::string> skipped_tasks;
};

class Registry {
 public:
  Registry() = default;

  /// Takes ownership of the tasks; ids must be unique.
  explicit Registry(std::vector<TaskRecord> tasks, LoadReport report = {}) : tasks_(std::move(tasks)), report_(std::move(report)) {
    std::sort(tasks_.begin(), tasks_.end(), [](const TaskRecord& a, const TaskRecord& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < tasks_.size(); ++i)
      if (tasks_[i].id == tasks_[i - 1].id) throw DataError("duplicate task id '" + tasks_[i].id + "'");
  }

  const std::vector<TaskRecord>& tasks() const { return tasks_; }
  std::vector<const TaskRecord*> tasks(Split split) const {
    std::vector<const TaskRecord*> out;
    for (const TaskRecord& t : tasks_)
      if (t.split == split) out.push_back(&t);
    return out;
  }
  const TaskRecord* find(const std::string& id) const {
    auto it = std::lower_bound(tasks_.begin(), tasks_.end(), id, [](const TaskRecord& t, const std::string& k) { return t.id < k; });
    return it != tasks_.end() && it->id == id ? &*it : nullptr;
  }
  const LoadReport& report() const { return report_; }
  bool empty() const { return tasks_.empty(); }

 private:
  std::vector<TaskRecord> tasks_;
  LoadReport report_;
};

/// Parses one JSON-lines file of labeled SMILES. Bad lines are counted in
/// `report` and skipped.
inline std::vector<Example> read_labeled_jsonl(const std::filesystem::path& file, LoadReport& report) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto reject = [&](const std::string& why) {
      ++report.rejected_lines;
      report.messages.push_back(file.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      reject(std::string("invalid JSON: ") + e.what());
      continue;
    }
    if (!j.is_object() || !j.contains("smiles") || !j["smiles"].is_string() || !j.contains("label") ||
        !j["label"].is_number_integer()) {
      reject("expected {\"smiles\": string, \"label\": 0|1}");
      continue;
    }
    const auto label = j["label"].get<std::int64_t>();
    if (label != 0 && label != 1) {
      reject("label must be 0 or 1, got " + std::to_string(label));
      continue;
    }
    Example ex;
    ex.smiles = j["smiles"].get<std::string>();
    ex.label = static_cast<int>(label);
    try {
      ex.graph = std::make_shared<const smiles::MolGraph>(smiles::mol_from_smiles(ex.smiles));
    } catch (const ParseError& e) {
      reject(std::string("SMILES rejected: ") + e.what());
      continue;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline Registry load_registry(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' is not a directory");
  LoadReport report;
  std::vector<TaskRecord> tasks;
  std::map<std::string, std::string> seen;  // id -> split
  for (Split split : {Split::kTrain, Split::kValid, Split::kTest}) {
    const fs::path dir = root / split_name(split);
    if (!fs::is_directory(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      const std::string id = f.stem().string();
      if (auto it = seen.find(id); it != seen.end())
        throw DataError("task id '" + id + "' appears in both " + it->second + "/ and " + split_name(split) + "/");
      seen.emplace(id, split_name(split));
      TaskRecord t;
      t.id = id;
      t.split = split;
      t.examples = read_labeled_jsonl(f, report);
      if (t.examples.size() < 2) {
        report.skipped_tasks.push_back(id);
        report.messages.push_back("task '" + id + "' skipped: fewer than 2 usable examples");
        continue;
      }
      tasks.push_back(std::move(t));
    }
  }
  if (tasks.empty()) throw DataError("no usable tasks under '" + root.string() + "'");
  return Registry(std::move(tasks), std::move(report));
}

/// Writes the registry in the on-disk layout read by load_registry.
inline void write_registry(const Registry& reg, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (Split split : {Split::kTrain, Split::kValid, Split::kTest}) fs::create_directories(root / split_name(split));
  for (const TaskRecord& t : reg.tasks()) {
    const fs::path file = root / split_name(t.split) / (t.id + ".jsonl");
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    for (const Example& e : t.examples) out << nlohmann::json{{"smiles", e.smiles}, {"label", e.label}}.dump() << '\n';
  }
}

// --- episodes -------------------------------------------------------------------

struct LabeledMol {
  std::shared_ptr<const smiles::MolGraph> graph;
  int label = 0;
  std::size_t example = 0;  // index into the task's example list
};

using LabeledSet = std::vector<LabeledMol>;

inline std::vector<std::shared_ptr<const smiles::MolGraph>> graphs_of(const LabeledSet& s) {
  std::vector<std::shared_ptr<const smiles::MolGraph>> g;
  g.reserve(s.size());
  for (const LabeledMol& m : s) g.push_back(m.graph);
  return g;
}

inline std::vector<int> labels_of(const LabeledSet& s) {
  std::vector<int> y;
  y.reserve(s.size());
  for (const LabeledMol& m : s) y.push_back(m.label);
  return y;
}

struct Episode {
  std::string task_id;
  LabeledSet support;
  LabeledSet query;
  std::string protocol;
};

enum class Protocol { kBalanced, kUnbalanced };

inline const char* protocol_name(Protocol p) { return p == Protocol::kBalanced ? "balanced" : "unbalanced"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "balanced") return Protocol::kBalanced;
  if (s == "unbalanced") return Protocol::kUnbalanced;
  throw ConfigError("unknown protocol '" + s + "' (expected balanced or unbalanced)");
}

namespace detail {

inline LabeledMol labeled(const TaskRecord& t, std::size_t i) { return {t.examples[i].graph, t.examples[i].label, i}; }

}  // namespace detail

/// Support of support_size/2 positives and support_size/2 negatives; the rest
/// of the task (shuffled, capped at query_size) is the query.
inline Episode sample_episode_balanced(const TaskRecord& task, std::size_t support_size, std::size_t query_size,
                                       std::uint64_t seed) {
  if (support_size == 0 || support_size % 2 != 0)
    throw DataError("balanced support size must be a positive even number, got " + std::to_string(support_size));
  const std::size_t per_class = support_size / 2;
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < task.examples.size(); ++i) (task.examples[i].label == 1 ? pos : neg).push_back(i);
  if (pos.size() < per_class || neg.size() < per_class || task.examples.size() <= support_size)
    throw DataError("task '" + task.id + "' cannot supply a balanced episode: need " + std::to_string(per_class) +
                    " per class plus at least one query, have " + std::to_string(pos.size()) + " positive / " +
                    std::to_string(neg.size()) + " negative");
  Rng rng(derive_seed(seed, {0xba1}));
  shuffle(pos, rng);
  shuffle(neg, rng);
  Episode ep;
  ep.task_id = task.id;
  ep.protocol = protocol_name(Protocol::kBalanced);
  std::vector<std::size_t> support(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(per_class));
  support.insert(support.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(per_class));
  shuffle(support, rng);
  std::vector<std::size_t> rest(pos.begin() + static_cast<std::ptrdiff_t>(per_class), pos.end());
  rest.insert(rest.end(), neg.begin() + static_cast<std::ptrdiff_t>(per_class), neg.end());
  shuffle(rest, rng);
  if (query_size > 0 && rest.size() > query_size) rest.resize(query_size);
  for (std::size_t i : support) ep.support.push_back(detail::labeled(task, i));
  for (std::size_t i : rest) ep.query.push_back(detail::labeled(task, i));
  return ep;
}

/// Support drawn uniformly without stratification, so its class ratio follows
/// the task's in expectation. Any class present in the task but missing from
/// the draw gets one member swapped in.
inline Episode sample_episode_unbalanced(const TaskRecord& task, std::size_t support_size, std::size_t query_size,
                                         std::uint64_t seed) {
  if (support_size == 0 || support_size >= task.examples.size())
    throw DataError("task '" + task.id + "' has " + std::to_string(task.examples.size()) +
                    " examples; support size " + std::to_string(support_size) + " leaves no query");
  Rng rng(derive_seed(seed, {0x0b1}));
  std::vector<std::size_t> order(task.examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  std::vector<std::size_t> support(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(support_size));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(support_size), order.end());

  for (int cls : {1, 0}) {
    auto has = [&](const std::vector<std::size_t>& v) {
      return std::any_of(v.begin(), v.end(), [&](std::size_t i) { return task.examples[i].label == cls; });
    };
    if (has(support) || !has(rest) || support_size < 2) continue;
    std::vector<std::size_t> donors, slots;
    for (std::size_t k = 0; k < rest.size(); ++k)
      if (task.examples[rest[k]].label == cls) donors.push_back(k);
    for (std::size_t k = 0; k < support.size(); ++k)
      if (task.examples[support[k]].label != cls) slots.push_back(k);
    const std::size_t d = donors[uniform_index(rng, donors.size())];
    const std::size_t s = slots[uniform_index(rng, slots.size())];
    std::swap(support[s], rest[d]);
  }
  if (query_size > 0 && rest.size() > query_size) rest.resize(query_size);

  Episode ep;
  ep.task_id = task.id;
  ep.protocol = protocol_name(Protocol::kUnbalanced);
  for (std::size_t i : support) ep.support.push_back(detail::labeled(task, i));
  for (std::size_t i : rest) ep.query.push_back(detail::labeled(task, i));
  return ep;
}

inline Episode sample_episode(Protocol p, const TaskRecord& task, std::size_t support_size, std::size_t query_size,
                              std::uint64_t seed) {
  return p == Protocol::kBalanced ? sample_episode_balanced(task, support_size, query_size, seed)
                                  : sample_episode_unbalanced(task, support_size, query_size, seed);
}

// --- synthetic tasks -------------------------------------------------------------

/// Hidden labeling rule of a synthetic task.
struct SynthRule {
  enum class Kind { kContainsElement, kContainsRing, kContainsDoubleBond, kMinAtoms } kind = Kind::kContainsRing;
  std::string element;      // kContainsElement
  std::size_t min_atoms{};  // kMinAtoms

  std::string describe() const {
    switch (kind) {
      case Kind::kContainsElement: return "contains " + element;
      case Kind::kContainsRing: return "contains a ring";
      case Kind::kContainsDoubleBond: return "contains a double bond";
      case Kind::kMinAtoms: return "atom count >= " + std::to_string(min_atoms);
    }
    return "?";
  }

  int apply(const smiles::ParsedMolecule& m) const {
    switch (kind) {
      case Kind::kContainsElement:
        return std::any_of(m.atoms.begin(), m.atoms.end(), [&](const smiles::AtomSpec& a) { return a.element == element; });
      case Kind::kContainsRing:
        return m.bonds.size() >= m.atoms.size();  // connected: cyclomatic number > 0
      case Kind::kContainsDoubleBond:
        return std::any_of(m.bonds.begin(), m.bonds.end(),
                           [](const smiles::ParsedBond& b) { return b.order == smiles::BondOrder::kDouble; });
      case Kind::kMinAtoms: return m.atoms.size() >= min_atoms;
    }
    return 0;
  }
};

namespace detail {

// Base skeletons; each carries one attachment point written as "*".
inline const std::vector<std::string>& synth_templates() {
  static const std::vector<std::string> t = {
      "CC*",      "CCC*",       "CC(C)C*",    "CCCCC*",     // alkanes
      "OCC*",     "OC(C)C*",    "OCCC*",      "CC(O)C*",    // alcohols
      "NCC*",     "NC(C)C*",    "CNCC*",      "CC(N)C*",    // amines
      "c1ccccc1*", "c1ccc(C)cc1*", "c1ccncc1*", "Cc1ccccc1*"  // aromatics
  };
  return t;
}

// Decorations appended at the attachment point, or as a branch when several
// are drawn.
inline const std::vector<std::string>& synth_decorations() {
  static const std::vector<std::string> d = {"C",  "CC",  "O",  "N",    "S",        "Cl",      "F",
                                             "Br", "C=O", "C=C", "C#N", "C1CCCC1", "C1CCNC1", "SC"};
  return d;
}

inline std::string synth_molecule(Rng& rng) {
  const auto& templates = synth_templates();
  const auto& decos = synth_decorations();
  std::string base = templates[uniform_index(rng, templates.size())];
  const std::size_t n = uniform_index(rng, 3);  // 0..2 decorations
  std::string tail;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& d = decos[uniform_index(rng, decos.size())];
    tail += i + 1 < n ? "C(" + d + ")" : d;
  }
  base.replace(base.find('*'), 1, tail);
  return base;
}

}  // namespace detail

/// Generates a registry of rule-labeled synthetic tasks with 35-65% positives.
/// Molecules are drawn from one seeded pool shared by all tasks.
inline Registry synth_generate(std::size_t n_train, std::size_t n_test, std::size_t molecules_per_task,
                               std::uint64_t seed, std::size_t n_valid = 0,
                               std::vector<std::pair<std::string, SynthRule>>* rules_out = nullptr) {
  Rng rng(derive_seed(seed, {0x5e7}));
  const std::size_t pool_size = std::max<std::size_t>(2000, 8 * molecules_per_task);
  struct PoolEntry {
    std::string smiles;
    smiles::ParsedMolecule parsed;
    std::shared_ptr<const smiles::MolGraph> graph;
  };
  std::vector<PoolEntry> pool;
  std::set<std::string> unique;
  for (std::size_t guard = 0; pool.size() < pool_size && guard < 50 * pool_size; ++guard) {
    std::string s = detail::synth_molecule(rng);
    if (!unique.insert(s).second) continue;
    PoolEntry e;
    e.parsed = smiles::parse(s);
    e.graph = std::make_shared<const smiles::MolGraph>(smiles::featurize(e.parsed));
    e.smiles = std::move(s);
    pool.push_back(std::move(e));
  }

  std::vector<std::size_t> atom_counts;
  for (const PoolEntry& e : pool) atom_counts.push_back(e.parsed.atoms.size());
  std::sort(atom_counts.begin(), atom_counts.end());

  auto draw_rule = [&]() {
    SynthRule r;
    switch (uniform_index(rng, 4)) {
      case 0: {
        static const char* elements[] = {"O", "N", "S", "Cl", "F", "Br"};
        r.kind = SynthRule::Kind::kContainsElement;
        r.element = elements[uniform_index(rng, 6)];
        break;
      }
      case 1: r.kind = SynthRule::Kind::kContainsRing; break;
      case 2: r.kind = SynthRule::Kind::kContainsDoubleBond; break;
      default: {
        r.kind = SynthRule::Kind::kMinAtoms;
        const double q = uniform(rng, 0.35, 0.65);
        r.min_atoms = atom_counts[static_cast<std::size_t>(q * static_cast<double>(atom_counts.size() - 1))];
        break;
      }
    }
    return r;
  };

  std::vector<TaskRecord> tasks;
  auto make_tasks = [&](Split split, std::size_t count) {
    for (std::size_t t = 0; t < count; ++t) {
      std::vector<std::size_t> pos, neg;
      SynthRule rule;
      for (;;) {
        rule = draw_rule();
        pos.clear();
        neg.clear();
        for (std::size_t i = 0; i < pool.size(); ++i) (rule.apply(pool[i].parsed) ? pos : neg).push_back(i);
        const std::size_t need = (molecules_per_task * 65 + 99) / 100;
        if (pos.size() >= need && neg.size() >= need) break;
      }
      const double frac = uniform(rng, 0.4, 0.6);
      std::size_t n_pos = static_cast<std::size_t>(std::lround(frac * static_cast<double>(molecules_per_task)));
      n_pos = std::clamp<std::size_t>(n_pos, molecules_per_task > 1 ? 1 : 0, molecules_per_task - (molecules_per_task > 1 ? 1 : 0));
      shuffle(pos, rng);
      shuffle(neg, rng);
      std::vector<std::size_t> chosen(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
      chosen.insert(chosen.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(molecules_per_task - n_pos));
      shuffle(chosen, rng);
      TaskRecord rec;
      char buf[64];
      std::snprintf(buf, sizeof buf, "synth_%s_%04zu", split_name(split), t);
      rec.id = buf;
      rec.split = split;
      for (std::size_t i : chosen) rec.examples.push_back({pool[i].smiles, rule.apply(pool[i].parsed), pool[i].graph});
      if (rules_out) rules_out->emplace_back(rec.id, rule);
      tasks.push_back(std::move(rec));
    }
  };
  make_tasks(Split::kTrain, n_train);
  make_tasks(Split::kValid, n_valid);
  make_tasks(Split::kTest, n_test);
  return Registry(std::move(tasks));
}

}  // namespace unimatch
