#pragma once

#include <stdexcept>
#include <string>

namespace robustfuse {

// Error hierarchy. Each kind maps to a distinct CLI exit code.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class config_error : public error {
 public:
  using error::error;
};

class shape_error : public error {
 public:
  using error::error;
};

class precondition_error : public error {
 public:
  using error::error;
};

class state_error : public error {
 public:
  using error::error;
};

class convergence_error : public error {
 public:
  using error::error;
};

class training_error : public error {
 public:
  training_error(const std::string& what, long iteration)
      : error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}

  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

}  // namespace robustfuse
