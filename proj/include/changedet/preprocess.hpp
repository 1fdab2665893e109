#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "changedet/volume.hpp"

namespace changedet {

// External-tool stages the pipeline wraps instead of reimplementing.
// `identity_bypass` is a stage slot that passes volumes through unchanged;
// a named stage without a command template is treated the same way.
enum class StageKind { bias_correction, registration, skull_strip, identity_bypass };

std::string to_string(StageKind k);
StageKind stage_kind_from_string(const std::string& s);

struct StageDescriptor {
  StageKind kind = StageKind::identity_bypass;
  // Command template. Per-volume stages substitute {input} and {output};
  // registration substitutes {moving}, {fixed} and {output}. Volumes are
  // exchanged through temp files in the container format given by
  // `io_extension`.
  std::optional<std::string> executable_hint;
  std::string provenance_note;

  bool bypassed() const {
    return kind == StageKind::identity_bypass || !executable_hint.has_value();
  }
  void validate() const;
};

struct StageLogEntry {
  StageKind kind;
  bool bypassed = true;
  std::string command;  // empty when bypassed
  std::string note;
};

struct StagePipelineResult {
  Volume3D previous_processed;
  Volume3D current_processed;
  std::vector<StageLogEntry> provenance_log;
};

struct StagePipelineOptions {
  std::string temp_dir;          // empty -> std::filesystem::temp_directory_path()
  std::string io_extension = ".nii.gz";
};

// Runs both volumes through the ordered stages. Non-bypass stage kinds must
// appear as a subsequence of [bias_correction, registration, skull_strip].
// Registration warps `previous` onto `current`'s grid; a grid mismatch after
// the registration slot (or at pipeline end) is a validation error.
StagePipelineResult run_stage_pipeline(const Volume3D& previous, const Volume3D& current,
                                       const std::vector<StageDescriptor>& stages,
                                       const StagePipelineOptions& options = {});

// Z-scores the volume over `mask` (or the whole volume): mean 0, sample
// (n-1) standard deviation 1. Voxels outside the mask are set to 0.
// A zero-variance region is a degenerate-input error.
Volume3D zscore_normalize(const Volume3D& volume, const Volume3D* mask = nullptr);

// Voxel-wise |previous_warped - current|; grids must match exactly.
// Metadata is copied from `current`.
Volume3D absolute_difference(const Volume3D& previous_warped, const Volume3D& current);

// Trilinear resampling onto `target_shape` using the half-pixel (voxel
// center) convention: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the
// input grid. Identity when target equals the input shape; never produces
// values outside [min(input), max(input)]. Spacing is rescaled so the
// physical extent is preserved.
Volume3D resample_to_grid(const Volume3D& volume, const std::array<std::int64_t, 3>& target_shape);

}  // namespace changedet
