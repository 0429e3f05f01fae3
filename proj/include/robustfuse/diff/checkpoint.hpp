#pragma once

// Parameter checkpoints, text format (version 1):
//
//   robustfuse-checkpoint 1
//   count <n>
//   param <name> <tag> <rank> <dim0> ... <dimK>
//   <values as C99 hex floats separated by spaces>
//   ... (repeated n times)
//
// Hex floats make save/load bit-exact.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "robustfuse/diff/tensor.hpp"
#include "robustfuse/error.hpp"

namespace robustfuse::diff {

inline constexpr const char* checkpoint_magic = "robustfuse-checkpoint";

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_checkpoint(std::ostream& os, const ParameterRegistry& params) {
  os << checkpoint_magic << " 1\n";
  os << "count " << params.size() << '\n';
  for (const auto& p : params) {
    os << "param " << p.name << ' ' << to_string(p.tag) << ' ' << p.value.rank();
    for (auto d : p.value.shape()) os << ' ' << d;
    os << '\n';
    const auto values = p.value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      os << (i ? " " : "") << hex_double(values[i]);
    }
    os << '\n';
  }
}

inline ParameterRegistry read_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != checkpoint_magic || version != 1) {
    throw config_error("not a version-1 checkpoint");
  }
  std::string word;
  std::size_t count = 0;
  if (!(is >> word >> count) || word != "count") throw config_error("checkpoint: missing count");
  ParameterRegistry out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name, tag;
    std::size_t rank = 0;
    if (!(is >> word >> name >> tag >> rank) || word != "param") {
      throw config_error("checkpoint: malformed header for parameter " + std::to_string(i));
    }
    Shape shape(rank);
    for (auto& d : shape) is >> d;
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      std::string tok;
      if (!(is >> tok)) throw config_error("checkpoint: truncated values for " + name);
      v = std::strtod(tok.c_str(), nullptr);
    }
    out.add(name, parse_param_tag(tag), Tensor(shape, std::move(values)));
  }
  return out;
}

// Copies values from a checkpoint into an existing registry with matching names and shapes.
inline void restore_checkpoint(ParameterRegistry& dst, const ParameterRegistry& src) {
  for (const auto& p : src) {
    auto& target = dst.at(p.name);
    if (target.value.shape() != p.value.shape()) {
      throw shape_error("checkpoint shape mismatch for " + p.name);
    }
    std::copy(p.value.data().begin(), p.value.data().end(), target.value.data().begin());
  }
}

inline void save_checkpoint(const std::string& path, const ParameterRegistry& params) {
  std::ofstream os(path);
  if (!os) throw config_error("cannot write checkpoint " + path);
  write_checkpoint(os, params);
}

inline ParameterRegistry load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot read checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace robustfuse::diff
