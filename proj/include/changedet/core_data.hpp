#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "changedet/errors.hpp"

namespace changedet {

// Per-conclusion label a reader can assign to a report section.
enum class ConclusionLabel { stable, progression, response, unknown };

std::string to_string(ConclusionLabel l);
ConclusionLabel conclusion_from_string(const std::string& s);

// Binary task label; `unstable` (progression or response) is the positive
// class in every downstream metric.
enum class BinaryLabel { stable, unstable };

std::string to_string(BinaryLabel l);
BinaryLabel binary_from_string(const std::string& s);

// One reader's triple of conclusions for one report.
struct ReportAnnotation {
  std::string report_id;
  std::string subject_id;
  std::string reader_id;
  ConclusionLabel global_conclusion = ConclusionLabel::unknown;
  ConclusionLabel t1w_conclusion = ConclusionLabel::unknown;
  ConclusionLabel t2w_conclusion = ConclusionLabel::unknown;
};

enum class ProvenanceKind { human, weak };

// Where a record's label came from. Weak labels carry the classifier's
// confidence for the predicted (post-merge) binary label.
struct LabelProvenance {
  ProvenanceKind kind = ProvenanceKind::human;
  std::optional<double> confidence;  // present iff kind == weak

  void validate() const;
};

// One labeled absolute-difference volume linking two time points.
struct DifferenceMapRecord {
  std::string map_id;
  std::string subject_id;
  std::string previous_scan_id;
  std::string current_scan_id;
  BinaryLabel label = BinaryLabel::stable;
  LabelProvenance provenance;
  std::string volume_path;

  void validate() const;
};

enum class CohortName { HAD, WAD, EXTERNAL };

std::string to_string(CohortName n);
CohortName cohort_from_string(const std::string& s);

// Immutable after construction; safe to share across concurrent readers.
struct CohortManifest {
  CohortName name = CohortName::HAD;
  std::vector<DifferenceMapRecord> records;
  std::map<std::string, std::vector<std::string>> subject_index;  // subject_id -> map_ids

  std::size_t size() const { return records.size(); }
  void rebuild_index();
  // Checks index consistency, map_id uniqueness and, for HAD/WAD, provenance
  // homogeneity.
  void validate() const;
};

// Dual-reader consolidation and discard rules. Returns the merged binary
// label, or nullopt when the report must be discarded:
//   (a) two readers disagree on the T2w conclusion,
//   (b) any reader's T2w conclusion differs from their global conclusion,
//   (c) the T2w conclusion is unknown.
// Surviving reports map T2w stable -> stable, progression/response -> unstable.
std::optional<BinaryLabel> consolidate_labels(std::span<const ReportAnnotation> annotations_for_one_report);

// One soft-labeled record before thresholding.
struct SoftLabeledRecord {
  DifferenceMapRecord record;       // provenance filled in by thresholding
  BinaryLabel predicted = BinaryLabel::stable;
  double confidence = 0.0;          // classifier probability of `predicted`
};

// Keeps exactly the records with confidence strictly greater than `cutoff`
// (order preserved) and stamps weak provenance on them.
CohortManifest threshold_weak_labels(const std::vector<SoftLabeledRecord>& soft_labels, double cutoff);

// Applies the same strict-cutoff rule to an already-built weak manifest;
// used when the tuning loop re-slices WAD per trial.
CohortManifest threshold_manifest(const CohortManifest& wad, double cutoff);

// Builds a validated manifest from rows. Rejects duplicate map ids and rows
// whose volume file does not exist (set `check_files` to false for in-memory
// pipelines that have not materialized volumes yet).
CohortManifest build_manifest(std::vector<DifferenceMapRecord> rows, CohortName name,
                              bool check_files = true);

// Manifest CSV: exact column order
//   map_id,subject_id,previous_scan_id,current_scan_id,label,provenance,confidence,volume_path
// UTF-8, header row mandatory, confidence empty for human provenance.
void write_manifest_csv(const CohortManifest& manifest, const std::string& path);
CohortManifest read_manifest_csv(const std::string& path, CohortName name, bool check_files = true);

}  // namespace changedet
