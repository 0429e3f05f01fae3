#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "robustfuse/error.hpp"

namespace robustfuse::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of doubles with an optional gradient buffer of the same length.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw shape_error("tensor: " + std::to_string(data_.size()) + " values for shape " +
                        shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  void enable_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  std::span<double> grad() {
    enable_grad();
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw state_error("tensor has no gradient buffer");
    return *grad_;
  }

  // Same data viewed with another shape of equal size.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw shape_error("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

// Channels [begin, begin + count) of a tensor whose last axis is channels.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() == 0 || begin + count > x.shape().back()) {
    throw shape_error("slice_channels: range exceeds channel count of " + shape_string(x.shape()));
  }
  const std::size_t channels = x.shape().back();
  const std::size_t rows = x.size() / channels;
  Shape shape = x.shape();
  shape.back() = count;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.raw() + r * channels + begin, count, out.raw() + r * count);
  }
  return out;
}

enum class ParamTag { extractor, fusion, head };

inline std::string to_string(ParamTag tag) {
  switch (tag) {
    case ParamTag::extractor: return "extractor";
    case ParamTag::fusion: return "fusion";
    case ParamTag::head: return "head";
  }
  return "head";
}

inline ParamTag parse_param_tag(const std::string& s) {
  if (s == "extractor") return ParamTag::extractor;
  if (s == "fusion") return ParamTag::fusion;
  if (s == "head") return ParamTag::head;
  throw config_error("unknown parameter tag '" + s + "'");
}

struct TagFilter {
  bool extractor = true;
  bool fusion = true;
  bool head = true;

  static TagFilter all() { return {}; }
  static TagFilter fusion_and_head() { return {false, true, true}; }
  static TagFilter only(ParamTag tag) {
    return {tag == ParamTag::extractor, tag == ParamTag::fusion, tag == ParamTag::head};
  }

  bool contains(ParamTag tag) const {
    switch (tag) {
      case ParamTag::extractor: return extractor;
      case ParamTag::fusion: return fusion;
      case ParamTag::head: return head;
    }
    return false;
  }
};

struct Parameter {
  std::string name;
  ParamTag tag = ParamTag::head;
  Tensor value;
};

// Named parameters in insertion order; each carries exactly one tag.
class ParameterRegistry {
 public:
  std::size_t add(std::string name, ParamTag tag, Tensor value) {
    if (find(name)) {
      throw config_error("duplicate parameter name '" + name + "'");
    }
    value.enable_grad();
    params_.push_back({std::move(name), tag, std::move(value)});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw config_error("unknown parameter '" + std::string(name) + "'");
  }

  Parameter& at(std::string_view name) { return params_[index(name)]; }
  const Parameter& at(std::string_view name) const { return params_[index(name)]; }

  std::size_t count(ParamTag tag) const {
    return static_cast<std::size_t>(std::count_if(
        params_.begin(), params_.end(), [tag](const Parameter& p) { return p.tag == tag; }));
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

}  // namespace robustfuse::diff
