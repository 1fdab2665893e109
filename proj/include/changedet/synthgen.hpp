#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "changedet/core_data.hpp"
#include "changedet/volume.hpp"

namespace changedet {

enum class Evolution { stable, growing, shrinking };

std::string to_string(Evolution e);
Evolution evolution_from_string(const std::string& s);

// One synthetic longitudinal subject: Gaussian-noise background plus a
// hyperintense spherical lesion with a smooth (sigmoid) boundary.
struct SynthSubjectSpec {
  std::string subject_id;
  int n_timepoints = 2;
  std::array<double, 3> lesion_center{0, 0, 0};  // voxel coordinates
  double lesion_radius = 4.0;                    // voxels, at the first timepoint
  Evolution evolution = Evolution::stable;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::array<std::int64_t, 3> volume_shape{32, 32, 32};
  double lesion_amplitude = 1.0;
  double radius_step_fraction = 0.25;  // per-timepoint radius change for growing/shrinking
  double boundary_width = 1.0;         // sigmoid falloff, voxels

  void validate() const;
};

struct SubjectSeries {
  std::vector<Volume3D> volumes;         // one per timepoint
  std::vector<BinaryLabel> pair_labels;  // one per consecutive pair
};

// Deterministic in `spec.seed`: identical specs give bit-identical voxels.
// The consecutive-pair label is unstable iff evolution != stable.
SubjectSeries generate_longitudinal_subject(const SynthSubjectSpec& spec);

struct SynthCohortSpec {
  int n_had_subjects = 0;
  int n_wad_subjects = 0;
  // WAD subjects reusing HAD subject ids (extra automatically-tagged scans of
  // the same patients); exercises the subject-level leakage rule.
  int n_overlap_subjects = 0;
  double change_prevalence = 0.5;
  double weak_noise_rate = 0.0;  // probability a weak label is flipped vs ground truth
  std::array<std::int64_t, 3> volume_shape{32, 32, 32};
  double noise_sigma = 0.05;
  int min_timepoints = 2;
  int max_timepoints = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

// A generated cohort pair: difference-map manifests ready for training.
// `wad_true_labels` holds the pre-flip ground truth aligned with wad.records,
// so tests and audits can replay the flip process.
struct CohortBundle {
  CohortManifest had;
  CohortManifest wad;
  std::vector<BinaryLabel> wad_true_labels;
};

// Generates the cohort fully in memory: z-scored absolute difference maps of
// consecutive timepoints, human-provenance labels for HAD and noise-flipped
// weak labels with synthetic confidences for WAD. Confidences follow
// confidence = 0.5 + 0.5*margin with flip probability proportional to
// (1 - margin), so high-confidence strata flip less often.
// Record volume paths are left empty; call materialize_cohort to write
// volumes and fill them in.
CohortBundle generate_cohort(const SynthCohortSpec& spec,
                             std::vector<Volume3D>* had_maps = nullptr,
                             std::vector<Volume3D>* wad_maps = nullptr);

// Writes the bundle's difference maps under `out_dir`/maps and the manifests
// as CSV; returns the updated bundle with volume paths filled in.
CohortBundle materialize_cohort(const SynthCohortSpec& spec, const std::string& out_dir,
                                const std::string& volume_extension = ".rawvol");

// Raw longitudinal scans plus pair listings, for driving the preprocess
// pipeline end to end.
struct ScanPair {
  std::string map_id;
  std::string subject_id;
  std::string previous_scan_id;
  std::string current_scan_id;
  BinaryLabel true_label = BinaryLabel::stable;
  // Weak-label fields; only meaningful for WAD pairs.
  BinaryLabel weak_label = BinaryLabel::stable;
  double confidence = 1.0;
  std::string previous_path;
  std::string current_path;
};

struct ScanCohort {
  std::vector<ScanPair> had_pairs;
  std::vector<ScanPair> wad_pairs;
};

ScanCohort materialize_scans(const SynthCohortSpec& spec, const std::string& out_dir,
                             const std::string& volume_extension = ".rawvol");

void write_pairs_csv(const std::vector<ScanPair>& pairs, const std::string& path,
                     bool weak_columns);
std::vector<ScanPair> read_pairs_csv(const std::string& path, bool weak_columns);

}  // namespace changedet
