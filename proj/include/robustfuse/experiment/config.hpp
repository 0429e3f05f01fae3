#pragma once

// Experiment configuration: one JSON document with the sections task, model, train, eval,
// output, seeds and an optional sweep. Every key is optional and falls back to the defaults of
// the corresponding struct; unknown keys are rejected so typos cannot pass silently.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustfuse/corruption.hpp"
#include "robustfuse/error.hpp"
#include "robustfuse/fusion_layers.hpp"
#include "robustfuse/model.hpp"
#include "robustfuse/tasks.hpp"
#include "robustfuse/training.hpp"

namespace robustfuse::experiment {

using json = nlohmann::ordered_json;

struct EvalConfig {
  std::vector<corruption::CorruptionSpec> corruption;  // one per source
  std::size_t trials = 5;
  double confidence = 0.95;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

// One sweep entry: a name and key overrides (dotted paths) applied on top of the base config.
struct SweepVariant {
  std::string name;
  json overrides = json::object();

  friend bool operator==(const SweepVariant& a, const SweepVariant& b) {
    return a.name == b.name && a.overrides == b.overrides;
  }
};

struct ExperimentConfig {
  tasks::SyntheticTask task;
  model::ModelSpec model;
  training::TrainConfig train;
  EvalConfig eval;
  std::string output = "runs/experiment";
  std::vector<std::uint64_t> seeds{1};
  std::vector<SweepVariant> sweep;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  // Training corruption falls back to the evaluation specs when the config gives none.
  training::TrainConfig effective_train() const {
    training::TrainConfig tc = train;
    if (tc.corruption.empty() && tc.algorithm != training::Algorithm::clean) tc.corruption = eval.corruption;
    return tc;
  }

  void validate() const {
    task.validate();
    const std::size_t ns = task.n_sources();
    if (seeds.empty()) throw config_error("seeds: at least one seed is required");
    if (model.extractor.size() > ns) {
      throw config_error("model.extractor: " + std::to_string(model.extractor.size()) +
                         " entries for " + std::to_string(ns) + " sources");
    }
    if (model.fusion == fusion::FusionKind::mean) {
      // Extractor output depth is the last width, or the raw channel count without layers.
      std::optional<std::size_t> depth;
      for (std::size_t i = 0; i < ns; ++i) {
        const auto& widths = i < model.extractor.size() ? model.extractor[i] : std::vector<std::size_t>{};
        const std::size_t d = widths.empty() ? source_depth(i) : widths.back();
        if (depth && *depth != d) {
          throw config_error("model.fusion: mean fusion requires equal per-source feature depths");
        }
        depth = d;
      }
    }
    effective_train().validate(ns);
    if (eval.corruption.size() != ns) {
      throw config_error("eval.corruption: expected " + std::to_string(ns) + " specs, got " +
                         std::to_string(eval.corruption.size()));
    }
    for (const auto& c : eval.corruption) c.validate();
    if (eval.trials < 1) throw config_error("eval.trials must be >= 1");
    if (!(eval.confidence > 0.0 && eval.confidence < 1.0)) {
      throw config_error("eval.confidence must be in (0, 1)");
    }
    if (output.empty()) throw config_error("output: directory must be non-empty");
    std::set<std::string> names;
    for (const auto& v : sweep) {
      if (v.name.empty() || v.name.find('/') != std::string::npos) {
        throw config_error("sweep: variant names must be non-empty and contain no '/'");
      }
      if (!names.insert(v.name).second) throw config_error("sweep: duplicate variant '" + v.name + "'");
    }
  }

 private:
  std::size_t source_depth(std::size_t i) const {
    switch (task.kind) {
      case tasks::TaskKind::conv_classification: return task.channels.at(i);
      case tasks::TaskKind::linear_regression:
        return static_cast<std::size_t>((i == 0 ? task.latent.d1() : task.latent.d2()) + task.latent.d3());
      case tasks::TaskKind::nonlinear_regression:
        if (!task.source_dims.empty()) return task.source_dims.at(i);
        return static_cast<std::size_t>((i == 0 ? task.latent.d1() : task.latent.d2()) + task.latent.d3());
    }
    return 0;
  }
};

namespace detail {

// Reads one JSON object, reporting the dotted path of any bad or unknown key.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw config_error(where() + "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw config_error(field(key) + ": expected " + expected<T>() + ", got " + it->dump());
    }
  }

  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    const bool present = j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const config_error& e) {
      throw config_error(field(key) + ": " + e.what());
    }
  }

  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
      throw config_error(field(key) + ": expected a nonnegative integer, got " + it->dump());
    }
    out = it->template get<std::size_t>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw config_error("unknown configuration key '" + field(k) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  template <class T>
  static std::string expected() {
    if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else return "a list";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json vector_json(const linear::Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline linear::Vector vector_from(const json& j, const std::string& path) {
  if (!j.is_array()) throw config_error(path + ": expected a list of numbers");
  linear::Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw config_error(path + ": expected a list of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline json corruption_json(const corruption::CorruptionSpec& c) {
  return {{"kind", corruption::to_string(c.kind)}, {"tau", c.tau},           {"factor", c.factor},
          {"keep_ratio", c.keep_ratio},             {"axis", c.axis},         {"seed", c.seed},
          {"per_sample_noise", c.per_sample_noise}};
}

inline corruption::CorruptionSpec corruption_from(const json& j, const std::string& path) {
  corruption::CorruptionSpec c;
  Reader r(j, path);
  r.get_enum("kind", c.kind, corruption::parse_corruption_kind);
  r.get("tau", c.tau);
  r.get("factor", c.factor);
  r.get("keep_ratio", c.keep_ratio);
  r.get_size("axis", c.axis);
  r.get("seed", c.seed);
  r.get("per_sample_noise", c.per_sample_noise);
  r.finish();
  return c;
}

inline std::vector<corruption::CorruptionSpec> corruption_list(const json* j, const std::string& path) {
  std::vector<corruption::CorruptionSpec> out;
  if (!j) return out;
  if (!j->is_array()) throw config_error(path + ": expected a list of corruption specs");
  for (std::size_t i = 0; i < j->size(); ++i) {
    out.push_back(corruption_from((*j)[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.task;
  json task = {{"kind", tasks::to_string(t.kind)},
               {"n_train", t.n_train},
               {"n_val", t.n_val},
               {"seed", t.seed},
               {"latent",
                {{"beta1", detail::vector_json(t.latent.beta1)},
                 {"beta2", detail::vector_json(t.latent.beta2)},
                 {"beta3", detail::vector_json(t.latent.beta3)}}},
               {"distribution", linear::to_string(t.distribution)},
               {"source_dims", t.source_dims},
               {"height", t.height},
               {"width", t.width},
               {"channels", t.channels},
               {"n_classes", t.n_classes},
               {"signal", t.signal},
               {"presence", t.presence},
               {"shared_noise", t.shared_noise},
               {"private_noise", t.private_noise}};
  const auto& m = c.model;
  json model = {{"extractor", m.extractor},
                {"fusion", fusion::to_string(m.fusion)},
                {"head", m.head},
                {"head_bias", m.head_bias},
                {"activation", diff::to_string(m.activation)},
                {"lel_l1", m.lel_l1},
                {"lel_activation", diff::to_string(m.lel_activation)}};
  const auto& tr = c.train;
  json train = {{"algorithm", training::to_string(tr.algorithm)},
                {"iterations", tr.iterations},
                {"batch_size", tr.batch_size},
                {"lr", tr.lr},
                {"lr_final", tr.lr_final ? json(*tr.lr_final) : json(nullptr)},
                {"mode", training::to_string(tr.mode)},
                {"n_clean", tr.n_clean},
                {"n_tune", tr.n_tune},
                {"corruption", json::array()}};
  for (const auto& s : tr.corruption) train["corruption"].push_back(detail::corruption_json(s));
  json eval = {{"corruption", json::array()}, {"trials", c.eval.trials}, {"confidence", c.eval.confidence}};
  for (const auto& s : c.eval.corruption) eval["corruption"].push_back(detail::corruption_json(s));
  json out = {{"task", task}, {"model", model}, {"train", train}, {"eval", eval},
              {"output", c.output}, {"seeds", c.seeds}};
  if (!c.sweep.empty()) {
    json sweep = json::array();
    for (const auto& v : c.sweep) sweep.push_back({{"name", v.name}, {"set", v.overrides}});
    out["sweep"] = sweep;
  }
  return out;
}

inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  detail::Reader root(j, "");
  if (const json* tj = root.child("task")) {
    auto& t = c.task;
    detail::Reader r(*tj, "task");
    r.get_enum("kind", t.kind, tasks::parse_task_kind);
    r.get_size("n_train", t.n_train);
    r.get_size("n_val", t.n_val);
    r.get("seed", t.seed);
    if (const json* lj = r.child("latent")) {
      detail::Reader lr(*lj, "task.latent");
      for (const char* key : {"beta1", "beta2", "beta3"}) {
        if (const json* bj = lr.child(key)) {
          auto v = detail::vector_from(*bj, lr.field(key));
          (key[4] == '1' ? t.latent.beta1 : key[4] == '2' ? t.latent.beta2 : t.latent.beta3) = v;
        }
      }
      lr.finish();
    }
    r.get_enum("distribution", t.distribution,
               [](const std::string& s) { return linear::parse_latent_distribution(s); });
    r.get("source_dims", t.source_dims);
    r.get_size("height", t.height);
    r.get_size("width", t.width);
    r.get("channels", t.channels);
    r.get_size("n_classes", t.n_classes);
    r.get("signal", t.signal);
    r.get("presence", t.presence);
    r.get("shared_noise", t.shared_noise);
    r.get("private_noise", t.private_noise);
    r.finish();
  }
  if (const json* mj = root.child("model")) {
    auto& m = c.model;
    detail::Reader r(*mj, "model");
    r.get("extractor", m.extractor);
    r.get_enum("fusion", m.fusion, fusion::parse_fusion_kind);
    r.get("head", m.head);
    r.get("head_bias", m.head_bias);
    r.get_enum("activation", m.activation, diff::parse_activation);
    r.get("lel_l1", m.lel_l1);
    r.get_enum("lel_activation", m.lel_activation, diff::parse_activation);
    r.finish();
  }
  if (const json* tj = root.child("train")) {
    auto& tr = c.train;
    detail::Reader r(*tj, "train");
    r.get_enum("algorithm", tr.algorithm, training::parse_algorithm);
    r.get_size("iterations", tr.iterations);
    r.get_size("batch_size", tr.batch_size);
    r.get("lr", tr.lr);
    if (const json* lf = r.child("lr_final"); lf && !lf->is_null()) {
      if (!lf->is_number()) throw config_error("train.lr_final: expected a number or null");
      tr.lr_final = lf->get<double>();
    }
    r.get_enum("mode", tr.mode, training::parse_mode);
    r.get_size("n_clean", tr.n_clean);
    r.get_size("n_tune", tr.n_tune);
    tr.corruption = detail::corruption_list(r.child("corruption"), "train.corruption");
    r.finish();
  }
  if (const json* ej = root.child("eval")) {
    detail::Reader r(*ej, "eval");
    c.eval.corruption = detail::corruption_list(r.child("corruption"), "eval.corruption");
    r.get_size("trials", c.eval.trials);
    r.get("confidence", c.eval.confidence);
    r.finish();
  }
  root.get("output", c.output);
  root.get("seeds", c.seeds);
  if (const json* sj = root.child("sweep")) {
    if (!sj->is_array()) throw config_error("sweep: expected a list of variants");
    for (std::size_t i = 0; i < sj->size(); ++i) {
      const std::string path = "sweep[" + std::to_string(i) + "]";
      detail::Reader r((*sj)[i], path);
      SweepVariant v;
      r.get("name", v.name);
      if (const json* set = r.child("set")) {
        if (!set->is_object()) throw config_error(path + ".set: expected an object");
        v.overrides = *set;
      }
      r.finish();
      c.sweep.push_back(std::move(v));
    }
  }
  root.finish();
  // The training seed is per run; the config never carries one.
  c.train.seed = 0;
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// Sets a dotted key (e.g. "train.lr" or "train.corruption.0.factor") to a JSON value in the
// serialized form of `c`, then parses it back.
inline ExperimentConfig with_override(const ExperimentConfig& c, const std::string& key, const json& value) {
  if (key.empty()) throw config_error("override: empty key");
  json j = to_json(c);
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw config_error("override: malformed key '" + key + "'");
    pointer += "/" + part;
  }
  const json::json_pointer ptr(pointer);
  const json::json_pointer parent = ptr.parent_pointer();
  if (!j.contains(parent) || (!j.contains(ptr) && !j[parent].is_object())) {
    throw config_error("override: unknown configuration key '" + key + "'");
  }
  j[ptr] = value;
  return from_json(j);
}

// Parses "key=value"; the value is read as JSON when possible, otherwise as a string.
inline ExperimentConfig apply_assignment(const ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw config_error("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  return with_override(c, key, value);
}

inline ExperimentConfig apply_variant(const ExperimentConfig& c, const SweepVariant& v) {
  ExperimentConfig out = c;
  for (const auto& [key, value] : v.overrides.items()) out = with_override(out, key, value);
  out.sweep.clear();
  return out;
}

}  // namespace robustfuse::experiment
