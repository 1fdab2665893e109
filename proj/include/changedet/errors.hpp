#pragma once

#include <stdexcept>
#include <string>

namespace changedet {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
class validation_error : public std::runtime_error {
 public:
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A structurally valid input whose content makes the operation meaningless,
// e.g. z-scoring a constant volume.
class degenerate_input_error : public std::runtime_error {
 public:
  explicit degenerate_input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Metric has no defined value on this input (single-class AUC, zero-denominator
// rates). Callers that can tolerate it should catch; it is never silently 0.
class undefined_metric_error : public std::runtime_error {
 public:
  explicit undefined_metric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// External preprocessing stage failed; carries the stage kind and diagnostics.
class stage_error : public std::runtime_error {
 public:
  stage_error(const std::string& stage_kind, const std::string& diagnostics)
      : std::runtime_error("stage '" + stage_kind + "' failed: " + diagnostics),
        stage_kind_(stage_kind) {}
  const std::string& stage_kind() const { return stage_kind_; }

 private:
  std::string stage_kind_;
};

class training_divergence_error : public std::runtime_error {
 public:
  training_divergence_error(int epoch, const std::string& msg)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + msg),
        epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class config_error : public std::runtime_error {
 public:
  config_error(const std::string& field_path, const std::string& msg)
      : std::runtime_error("config field '" + field_path + "': " + msg),
        field_path_(field_path) {}
  const std::string& field_path() const { return field_path_; }

 private:
  std::string field_path_;
};

}  // namespace changedet
