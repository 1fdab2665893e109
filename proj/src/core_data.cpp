#include "changedet/core_data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "changedet/text.hpp"

namespace changedet {

std::string to_string(ConclusionLabel l) {
  switch (l) {
    case ConclusionLabel::stable: return "stable";
    case ConclusionLabel::progression: return "progression";
    case ConclusionLabel::response: return "response";
    case ConclusionLabel::unknown: return "unknown";
  }
  throw validation_error("unreachable conclusion label");
}

ConclusionLabel conclusion_from_string(const std::string& s) {
  if (s == "stable") return ConclusionLabel::stable;
  if (s == "progression") return ConclusionLabel::progression;
  if (s == "response") return ConclusionLabel::response;
  if (s == "unknown") return ConclusionLabel::unknown;
  throw validation_error("unknown conclusion label '" + s + "'");
}

std::string to_string(BinaryLabel l) {
  return l == BinaryLabel::stable ? "stable" : "unstable";
}

BinaryLabel binary_from_string(const std::string& s) {
  if (s == "stable") return BinaryLabel::stable;
  if (s == "unstable") return BinaryLabel::unstable;
  throw validation_error("unknown binary label '" + s + "'");
}

std::string to_string(CohortName n) {
  switch (n) {
    case CohortName::HAD: return "HAD";
    case CohortName::WAD: return "WAD";
    case CohortName::EXTERNAL: return "EXTERNAL";
  }
  throw validation_error("unreachable cohort name");
}

CohortName cohort_from_string(const std::string& s) {
  if (s == "HAD") return CohortName::HAD;
  if (s == "WAD") return CohortName::WAD;
  if (s == "EXTERNAL") return CohortName::EXTERNAL;
  throw validation_error("unknown cohort name '" + s + "'");
}

void LabelProvenance::validate() const {
  if (kind == ProvenanceKind::human) {
    if (confidence.has_value())
      throw validation_error("human provenance must not carry a confidence");
  } else {
    if (!confidence.has_value())
      throw validation_error("weak provenance requires a confidence");
    if (!(*confidence >= 0.0 && *confidence <= 1.0))
      throw validation_error("confidence must lie in [0,1]");
  }
}

void DifferenceMapRecord::validate() const {
  if (map_id.empty()) throw validation_error("record has empty map_id");
  if (subject_id.empty()) throw validation_error("record '" + map_id + "' has empty subject_id");
  if (previous_scan_id == current_scan_id)
    throw validation_error("record '" + map_id + "' links a scan to itself");
  provenance.validate();
}

void CohortManifest::rebuild_index() {
  subject_index.clear();
  for (const auto& r : records) subject_index[r.subject_id].push_back(r.map_id);
}

void CohortManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    r.validate();
    if (!seen.insert(r.map_id).second)
      throw validation_error("duplicate map_id '" + r.map_id + "' in manifest");
    if (name == CohortName::HAD && r.provenance.kind != ProvenanceKind::human)
      throw validation_error("HAD record '" + r.map_id + "' has non-human provenance");
    if (name == CohortName::WAD && r.provenance.kind != ProvenanceKind::weak)
      throw validation_error("WAD record '" + r.map_id + "' has non-weak provenance");
  }
  // subject_index must be exactly the inverse of record assignments.
  std::map<std::string, std::vector<std::string>> expected;
  for (const auto& r : records) expected[r.subject_id].push_back(r.map_id);
  if (expected != subject_index)
    throw validation_error("manifest subject_index is out of sync with records");
}

std::optional<BinaryLabel> consolidate_labels(std::span<const ReportAnnotation> annotations) {
  if (annotations.empty() || annotations.size() > 2)
    throw validation_error("consolidation expects 1 or 2 annotations, got " +
                           std::to_string(annotations.size()));
  const auto& first = annotations.front();
  if (annotations.size() == 2) {
    const auto& second = annotations[1];
    if (second.report_id != first.report_id)
      throw validation_error("annotations reference different reports ('" + first.report_id +
                             "' vs '" + second.report_id + "')");
    if (second.reader_id == first.reader_id)
      throw validation_error("two annotations for report '" + first.report_id +
                             "' share reader '" + first.reader_id + "'");
    if (second.t2w_conclusion != first.t2w_conclusion) return std::nullopt;  // reader disagreement
  }
  for (const auto& a : annotations) {
    if (a.t2w_conclusion != a.global_conclusion) return std::nullopt;  // ambiguous/discordant
  }
  switch (first.t2w_conclusion) {
    case ConclusionLabel::unknown: return std::nullopt;
    case ConclusionLabel::stable: return BinaryLabel::stable;
    case ConclusionLabel::progression:
    case ConclusionLabel::response: return BinaryLabel::unstable;
  }
  return std::nullopt;
}

CohortManifest threshold_weak_labels(const std::vector<SoftLabeledRecord>& soft_labels,
                                     double cutoff) {
  if (!(cutoff > 0.5 && cutoff < 1.0))
    throw validation_error("confidence cutoff must lie in (0.5, 1.0)");
  CohortManifest out;
  out.name = CohortName::WAD;
  for (const auto& s : soft_labels) {
    if (!(s.confidence >= 0.0 && s.confidence <= 1.0))
      throw validation_error("soft label for '" + s.record.map_id +
                             "' has confidence outside [0,1]");
    if (s.confidence > cutoff) {  // strict inequality
      DifferenceMapRecord r = s.record;
      r.label = s.predicted;
      r.provenance = LabelProvenance{ProvenanceKind::weak, s.confidence};
      out.records.push_back(std::move(r));
    }
  }
  out.rebuild_index();
  return out;
}

CohortManifest threshold_manifest(const CohortManifest& wad, double cutoff) {
  if (!(cutoff > 0.5 && cutoff < 1.0))
    throw validation_error("confidence cutoff must lie in (0.5, 1.0)");
  CohortManifest out;
  out.name = wad.name;
  for (const auto& r : wad.records) {
    if (r.provenance.kind != ProvenanceKind::weak)
      throw validation_error("cannot threshold non-weak record '" + r.map_id + "'");
    if (*r.provenance.confidence > cutoff) out.records.push_back(r);
  }
  out.rebuild_index();
  return out;
}

CohortManifest build_manifest(std::vector<DifferenceMapRecord> rows, CohortName name,
                              bool check_files) {
  CohortManifest m;
  m.name = name;
  m.records = std::move(rows);
  if (check_files) {
    for (const auto& r : m.records) {
      if (!std::filesystem::exists(r.volume_path))
        throw io_error("volume file not found: " + r.volume_path);
    }
  }
  m.rebuild_index();
  m.validate();
  return m;
}

namespace {
constexpr const char* kManifestHeader =
    "map_id,subject_id,previous_scan_id,current_scan_id,label,provenance,confidence,volume_path";

void check_no_comma(const std::string& field, const std::string& what) {
  if (field.find(',') != std::string::npos)
    throw validation_error(what + " '" + field + "' contains a comma; manifest fields are unquoted");
}
}  // namespace

void write_manifest_csv(const CohortManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open manifest for writing: " + path);
  out << kManifestHeader << "\n";
  for (const auto& r : manifest.records) {
    check_no_comma(r.map_id, "map_id");
    check_no_comma(r.subject_id, "subject_id");
    check_no_comma(r.volume_path, "volume_path");
    out << r.map_id << ',' << r.subject_id << ',' << r.previous_scan_id << ','
        << r.current_scan_id << ',' << to_string(r.label) << ','
        << (r.provenance.kind == ProvenanceKind::human ? "human" : "weak") << ',';
    if (r.provenance.confidence) out << format_compact(*r.provenance.confidence);
    out << ',' << r.volume_path << "\n";
  }
  if (!out) throw io_error("failed writing manifest: " + path);
}

CohortManifest read_manifest_csv(const std::string& path, CohortName name, bool check_files) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw validation_error("manifest '" + path + "' is empty (missing header)");
  if (trim(line) != kManifestHeader)
    throw validation_error("manifest '" + path + "' has unexpected header: " + trim(line));
  std::vector<DifferenceMapRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto fields = split(t, ',');
    if (fields.size() != 8)
      throw validation_error("manifest '" + path + "' line " + std::to_string(lineno) +
                             ": expected 8 fields, got " + std::to_string(fields.size()));
    DifferenceMapRecord r;
    r.map_id = fields[0];
    r.subject_id = fields[1];
    r.previous_scan_id = fields[2];
    r.current_scan_id = fields[3];
    r.label = binary_from_string(fields[4]);
    if (fields[5] == "human") {
      r.provenance.kind = ProvenanceKind::human;
      if (!fields[6].empty())
        throw validation_error("manifest '" + path + "' line " + std::to_string(lineno) +
                               ": human provenance with non-empty confidence");
    } else if (fields[5] == "weak") {
      r.provenance.kind = ProvenanceKind::weak;
      if (fields[6].empty())
        throw validation_error("manifest '" + path + "' line " + std::to_string(lineno) +
                               ": weak provenance with empty confidence");
      r.provenance.confidence = std::stod(fields[6]);
    } else {
      throw validation_error("manifest '" + path + "' line " + std::to_string(lineno) +
                             ": unknown provenance '" + fields[5] + "'");
    }
    r.volume_path = fields[7];
    rows.push_back(std::move(r));
  }
  return build_manifest(std::move(rows), name, check_files);
}

}  // namespace changedet
