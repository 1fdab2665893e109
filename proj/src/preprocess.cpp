#include "changedet/preprocess.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace changedet {

std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::bias_correction: return "bias_correction";
    case StageKind::registration: return "registration";
    case StageKind::skull_strip: return "skull_strip";
    case StageKind::identity_bypass: return "identity_bypass";
  }
  throw validation_error("unreachable stage kind");
}

StageKind stage_kind_from_string(const std::string& s) {
  if (s == "bias_correction") return StageKind::bias_correction;
  if (s == "registration") return StageKind::registration;
  if (s == "skull_strip") return StageKind::skull_strip;
  if (s == "identity_bypass") return StageKind::identity_bypass;
  throw validation_error("unknown stage kind '" + s + "'");
}

void StageDescriptor::validate() const {
  if (kind == StageKind::identity_bypass && executable_hint.has_value())
    throw validation_error("identity_bypass stage must not carry an executable_hint");
}

namespace {

std::string substitute(std::string tpl, const std::string& key, const std::string& value) {
  std::size_t pos;
  while ((pos = tpl.find(key)) != std::string::npos) tpl.replace(pos, key.size(), value);
  return tpl;
}

// Runs a shell command, capturing combined stdout/stderr for diagnostics.
void run_command(const std::string& command, StageKind kind) {
  const std::string wrapped = command + " 2>&1";
  FILE* pipe = popen(wrapped.c_str(), "r");
  if (!pipe) throw stage_error(to_string(kind), "popen failed for: " + command);
  std::string output;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, n);
  const int status = pclose(pipe);
  if (status != 0) {
    if (output.size() > 2000) output = output.substr(0, 2000) + "...";
    throw stage_error(to_string(kind),
                      "command '" + command + "' exited with status " +
                          std::to_string(status) + ": " + output);
  }
}

std::filesystem::path make_stage_temp_dir(const std::string& base) {
  static std::atomic<std::uint64_t> counter{0};
  const std::filesystem::path root =
      base.empty() ? std::filesystem::temp_directory_path() : std::filesystem::path(base);
  const auto dir = root / ("changedet_stage_" + std::to_string(::getpid()) + "_" +
                           std::to_string(counter.fetch_add(1)));
  std::filesystem::create_directories(dir);
  return dir;
}

Volume3D run_per_volume_stage(const StageDescriptor& stage, const Volume3D& input,
                              const StagePipelineOptions& opts, const std::string& tag) {
  const auto dir = make_stage_temp_dir(opts.temp_dir);
  const std::string in_path = (dir / ("in_" + tag + opts.io_extension)).string();
  const std::string out_path = (dir / ("out_" + tag + opts.io_extension)).string();
  save_volume(input, in_path);
  std::string cmd = substitute(*stage.executable_hint, "{input}", in_path);
  cmd = substitute(cmd, "{output}", out_path);
  run_command(cmd, stage.kind);
  if (!std::filesystem::exists(out_path))
    throw stage_error(to_string(stage.kind), "command produced no output file: " + out_path);
  Volume3D out = load_volume(out_path);
  std::filesystem::remove_all(dir);
  return out;
}

Volume3D run_registration_stage(const StageDescriptor& stage, const Volume3D& moving,
                                const Volume3D& fixed, const StagePipelineOptions& opts) {
  const auto dir = make_stage_temp_dir(opts.temp_dir);
  const std::string moving_path = (dir / ("moving" + opts.io_extension)).string();
  const std::string fixed_path = (dir / ("fixed" + opts.io_extension)).string();
  const std::string out_path = (dir / ("warped" + opts.io_extension)).string();
  save_volume(moving, moving_path);
  save_volume(fixed, fixed_path);
  std::string cmd = substitute(*stage.executable_hint, "{moving}", moving_path);
  cmd = substitute(cmd, "{fixed}", fixed_path);
  cmd = substitute(cmd, "{output}", out_path);
  run_command(cmd, stage.kind);
  if (!std::filesystem::exists(out_path))
    throw stage_error(to_string(stage.kind), "command produced no output file: " + out_path);
  Volume3D out = load_volume(out_path);
  std::filesystem::remove_all(dir);
  return out;
}

}  // namespace

StagePipelineResult run_stage_pipeline(const Volume3D& previous, const Volume3D& current,
                                       const std::vector<StageDescriptor>& stages,
                                       const StagePipelineOptions& options) {
  previous.validate();
  current.validate();

  // Non-bypass kinds must form a subsequence of the canonical order.
  static const StageKind canonical[] = {StageKind::bias_correction, StageKind::registration,
                                        StageKind::skull_strip};
  std::size_t cursor = 0;
  for (const auto& s : stages) {
    s.validate();
    if (s.kind == StageKind::identity_bypass) continue;
    while (cursor < 3 && canonical[cursor] != s.kind) ++cursor;
    if (cursor == 3)
      throw validation_error("stage '" + to_string(s.kind) +
                             "' out of order (expected a subsequence of "
                             "bias_correction, registration, skull_strip)");
    ++cursor;
  }

  StagePipelineResult result;
  result.previous_processed = previous;
  result.current_processed = current;

  bool registration_seen = false;
  for (const auto& s : stages) {
    StageLogEntry entry;
    entry.kind = s.kind;
    entry.note = s.provenance_note;
    entry.bypassed = s.bypassed();
    if (!entry.bypassed) entry.command = *s.executable_hint;

    if (s.kind == StageKind::registration) {
      registration_seen = true;
      if (!entry.bypassed) {
        result.previous_processed = run_registration_stage(s, result.previous_processed,
                                                           result.current_processed, options);
      }
      if (!result.previous_processed.same_grid(result.current_processed))
        throw validation_error("grid mismatch after registration stage");
    } else if (!entry.bypassed) {
      result.previous_processed = run_per_volume_stage(s, result.previous_processed, options, "prev");
      result.current_processed = run_per_volume_stage(s, result.current_processed, options, "cur");
    }
    result.provenance_log.push_back(std::move(entry));
  }

  if (registration_seen && !result.previous_processed.same_grid(result.current_processed))
    throw validation_error("grid mismatch at end of stage pipeline");
  return result;
}

Volume3D zscore_normalize(const Volume3D& volume, const Volume3D* mask) {
  volume.validate();
  if (mask) {
    mask->validate();
    if (mask->shape != volume.shape)
      throw validation_error("mask shape does not match volume shape");
  }

  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    if (mask && mask->voxels[i] == 0.0) continue;
    sum += volume.voxels[i];
    ++n;
  }
  if (n < 2) throw validation_error("z-score needs at least 2 voxels inside the mask");
  const double mean = sum / static_cast<double>(n);

  double ss = 0.0;
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    if (mask && mask->voxels[i] == 0.0) continue;
    const double d = volume.voxels[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));  // sample convention
  if (!(sd > 0.0))
    throw degenerate_input_error("constant volume cannot be z-scored (zero variance)");

  Volume3D out = volume;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    if (mask && mask->voxels[i] == 0.0)
      out.voxels[i] = 0.0;
    else
      out.voxels[i] = (volume.voxels[i] - mean) / sd;
  }
  return out;
}

Volume3D absolute_difference(const Volume3D& previous_warped, const Volume3D& current) {
  previous_warped.validate();
  current.validate();
  if (!previous_warped.same_grid(current))
    throw validation_error("absolute difference requires identical grids");
  Volume3D out = current;  // metadata from current
  for (std::size_t i = 0; i < out.voxels.size(); ++i)
    out.voxels[i] = std::abs(previous_warped.voxels[i] - current.voxels[i]);
  return out;
}

Volume3D resample_to_grid(const Volume3D& volume, const std::array<std::int64_t, 3>& target_shape) {
  volume.validate();
  for (int i = 0; i < 3; ++i)
    if (target_shape[i] < 1) throw validation_error("target shape components must be >= 1");

  if (target_shape == volume.shape) return volume;

  Volume3D out;
  out.shape = target_shape;
  out.direction = volume.direction;
  for (int i = 0; i < 3; ++i)
    out.spacing[i] = volume.spacing[i] * static_cast<double>(volume.shape[i]) /
                     static_cast<double>(target_shape[i]);
  out.voxels.resize(static_cast<std::size_t>(target_shape[0] * target_shape[1] * target_shape[2]));

  const std::int64_t nx = volume.shape[0], ny = volume.shape[1], nz = volume.shape[2];
  auto src_coord = [](std::int64_t dst, std::int64_t n_out, std::int64_t n_in) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(n_in) /
                         static_cast<double>(n_out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
  };

  for (std::int64_t z = 0; z < target_shape[2]; ++z) {
    const double sz = src_coord(z, target_shape[2], nz);
    const std::int64_t z0 = static_cast<std::int64_t>(sz);
    const std::int64_t z1 = std::min(z0 + 1, nz - 1);
    const double fz = sz - static_cast<double>(z0);
    for (std::int64_t y = 0; y < target_shape[1]; ++y) {
      const double sy = src_coord(y, target_shape[1], ny);
      const std::int64_t y0 = static_cast<std::int64_t>(sy);
      const std::int64_t y1 = std::min(y0 + 1, ny - 1);
      const double fy = sy - static_cast<double>(y0);
      for (std::int64_t x = 0; x < target_shape[0]; ++x) {
        const double sx = src_coord(x, target_shape[0], nx);
        const std::int64_t x0 = static_cast<std::int64_t>(sx);
        const std::int64_t x1 = std::min(x0 + 1, nx - 1);
        const double fx = sx - static_cast<double>(x0);

        const double c00 = volume.at(x0, y0, z0) * (1 - fx) + volume.at(x1, y0, z0) * fx;
        const double c10 = volume.at(x0, y1, z0) * (1 - fx) + volume.at(x1, y1, z0) * fx;
        const double c01 = volume.at(x0, y0, z1) * (1 - fx) + volume.at(x1, y0, z1) * fx;
        const double c11 = volume.at(x0, y1, z1) * (1 - fx) + volume.at(x1, y1, z1) * fx;
        const double c0 = c00 * (1 - fy) + c10 * fy;
        const double c1 = c01 * (1 - fy) + c11 * fy;
        out.at(x, y, z) = c0 * (1 - fz) + c1 * fz;
      }
    }
  }
  return out;
}

}  // namespace changedet
