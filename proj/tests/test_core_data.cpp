#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "changedet/core_data.hpp"
#include "changedet/rng.hpp"
#include "doctest.h"

using namespace changedet;

namespace {

ReportAnnotation annot(const std::string& report, const std::string& reader,
                       ConclusionLabel t2w, ConclusionLabel global) {
  ReportAnnotation a;
  a.report_id = report;
  a.subject_id = "subj_" + report;
  a.reader_id = reader;
  a.global_conclusion = global;
  a.t1w_conclusion = global;
  a.t2w_conclusion = t2w;
  return a;
}

DifferenceMapRecord record(const std::string& map_id, const std::string& subject) {
  DifferenceMapRecord r;
  r.map_id = map_id;
  r.subject_id = subject;
  r.previous_scan_id = subject + "_t0";
  r.current_scan_id = subject + "_t1";
  r.label = BinaryLabel::stable;
  r.provenance = {ProvenanceKind::human, std::nullopt};
  return r;
}

}  // namespace

TEST_CASE("label parsing round-trips") {
  for (const auto l : {ConclusionLabel::stable, ConclusionLabel::progression,
                       ConclusionLabel::response, ConclusionLabel::unknown})
    CHECK(conclusion_from_string(to_string(l)) == l);
  CHECK(binary_from_string("unstable") == BinaryLabel::unstable);
  CHECK_THROWS_AS(binary_from_string("bogus"), validation_error);
  CHECK_THROWS_AS(conclusion_from_string(""), validation_error);
}

TEST_CASE("consolidation merges progression and response into unstable") {
  const auto both_prog = std::vector<ReportAnnotation>{
      annot("r1", "A", ConclusionLabel::progression, ConclusionLabel::progression),
      annot("r1", "B", ConclusionLabel::progression, ConclusionLabel::progression)};
  CHECK(consolidate_labels(both_prog) == BinaryLabel::unstable);

  const auto resp = std::vector<ReportAnnotation>{
      annot("r2", "A", ConclusionLabel::response, ConclusionLabel::response)};
  CHECK(consolidate_labels(resp) == BinaryLabel::unstable);
}

TEST_CASE("consolidation discard rules") {
  SUBCASE("reader disagreement on t2w") {
    const auto disagree = std::vector<ReportAnnotation>{
        annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable),
        annot("r1", "B", ConclusionLabel::progression, ConclusionLabel::progression)};
    CHECK(!consolidate_labels(disagree).has_value());
  }
  SUBCASE("single reader, clean stable") {
    const auto clean = std::vector<ReportAnnotation>{
        annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable)};
    CHECK(consolidate_labels(clean) == BinaryLabel::stable);
  }
  SUBCASE("ambiguous: t2w progression, global stable") {
    const auto ambiguous = std::vector<ReportAnnotation>{
        annot("r1", "A", ConclusionLabel::progression, ConclusionLabel::stable)};
    CHECK(!consolidate_labels(ambiguous).has_value());
  }
  SUBCASE("t2w unknown") {
    const auto unknown = std::vector<ReportAnnotation>{
        annot("r1", "A", ConclusionLabel::unknown, ConclusionLabel::unknown)};
    CHECK(!consolidate_labels(unknown).has_value());
  }
}

TEST_CASE("consolidation rejects malformed input") {
  CHECK_THROWS_AS(consolidate_labels({}), validation_error);

  const auto mismatched = std::vector<ReportAnnotation>{
      annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable),
      annot("r2", "B", ConclusionLabel::stable, ConclusionLabel::stable)};
  CHECK_THROWS_AS(consolidate_labels(mismatched), validation_error);

  const auto same_reader = std::vector<ReportAnnotation>{
      annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable),
      annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable)};
  CHECK_THROWS_AS(consolidate_labels(same_reader), validation_error);

  const auto three = std::vector<ReportAnnotation>{
      annot("r1", "A", ConclusionLabel::stable, ConclusionLabel::stable),
      annot("r1", "B", ConclusionLabel::stable, ConclusionLabel::stable),
      annot("r1", "C", ConclusionLabel::stable, ConclusionLabel::stable)};
  CHECK_THROWS_AS(consolidate_labels(three), validation_error);
}

TEST_CASE("consolidation is order-invariant in the two readers") {
  Rng rng(20240811);
  const ConclusionLabel labels[] = {ConclusionLabel::stable, ConclusionLabel::progression,
                                    ConclusionLabel::response, ConclusionLabel::unknown};
  for (int i = 0; i < 300; ++i) {
    const auto a = annot("r", "A", labels[rng.uniform_int(4)], labels[rng.uniform_int(4)]);
    const auto b = annot("r", "B", labels[rng.uniform_int(4)], labels[rng.uniform_int(4)]);
    const auto ab = consolidate_labels(std::vector<ReportAnnotation>{a, b});
    const auto ba = consolidate_labels(std::vector<ReportAnnotation>{b, a});
    CHECK(ab == ba);
  }
}

TEST_CASE("replayed consolidation never keeps a discardable report") {
  Rng rng(7);
  const ConclusionLabel labels[] = {ConclusionLabel::stable, ConclusionLabel::progression,
                                    ConclusionLabel::response, ConclusionLabel::unknown};
  for (int i = 0; i < 500; ++i) {
    const auto a = annot("r", "A", labels[rng.uniform_int(4)], labels[rng.uniform_int(4)]);
    const auto b = annot("r", "B", labels[rng.uniform_int(4)], labels[rng.uniform_int(4)]);
    const auto merged = consolidate_labels(std::vector<ReportAnnotation>{a, b});
    if (!merged) continue;
    CHECK(a.t2w_conclusion == b.t2w_conclusion);
    CHECK(a.t2w_conclusion == a.global_conclusion);
    CHECK(b.t2w_conclusion == b.global_conclusion);
    CHECK(a.t2w_conclusion != ConclusionLabel::unknown);
  }
}

TEST_CASE("weak-label thresholding keeps strictly-above-cutoff records in order") {
  std::vector<SoftLabeledRecord> soft;
  int i = 0;
  for (const double conf : {0.96, 0.80, 0.60}) {
    SoftLabeledRecord s;
    s.record = record("m" + std::to_string(i), "s" + std::to_string(i));
    s.predicted = BinaryLabel::unstable;
    s.confidence = conf;
    soft.push_back(s);
    ++i;
  }
  const auto kept = threshold_weak_labels(soft, 0.95);
  REQUIRE(kept.size() == 1);
  CHECK(kept.records[0].map_id == "m0");
  CHECK(kept.records[0].provenance.kind == ProvenanceKind::weak);
  CHECK(*kept.records[0].provenance.confidence == 0.96);

  CHECK(threshold_weak_labels({}, 0.75).size() == 0);
  CHECK_THROWS_AS(threshold_weak_labels(soft, 0.4), validation_error);
  CHECK_THROWS_AS(threshold_weak_labels(soft, 1.0), validation_error);

  soft[0].confidence = 1.5;
  CHECK_THROWS_AS(threshold_weak_labels(soft, 0.75), validation_error);
}

TEST_CASE("thresholding reproduces the released cohort structure") {
  // Soft-label table built to the released counts: 795 records above 0.75
  // (333 stable / 462 unstable), of which 361 lie above 0.95 (165 / 196),
  // plus low-confidence rows that both cutoffs must drop.
  std::vector<SoftLabeledRecord> soft;
  auto add = [&](int count, BinaryLabel label, double conf) {
    for (int k = 0; k < count; ++k) {
      SoftLabeledRecord s;
      const auto id = std::to_string(soft.size());
      s.record = record("m" + id, "s" + id);
      s.predicted = label;
      s.confidence = conf;
      soft.push_back(s);
    }
  };
  add(165, BinaryLabel::stable, 0.97);
  add(196, BinaryLabel::unstable, 0.97);
  add(333 - 165, BinaryLabel::stable, 0.85);
  add(462 - 196, BinaryLabel::unstable, 0.85);
  add(120, BinaryLabel::stable, 0.60);
  add(150, BinaryLabel::unstable, 0.55);

  auto count_labels = [](const CohortManifest& m) {
    std::pair<int, int> c{0, 0};
    for (const auto& r : m.records)
      (r.label == BinaryLabel::stable ? c.first : c.second) += 1;
    return c;
  };

  const auto at75 = threshold_weak_labels(soft, 0.75);
  CHECK(at75.size() == 795);
  CHECK(count_labels(at75) == std::pair<int, int>{333, 462});

  const auto at95 = threshold_weak_labels(soft, 0.95);
  CHECK(at95.size() == 361);
  CHECK(count_labels(at95) == std::pair<int, int>{165, 196});

  // Monotonicity: the stricter cutoff keeps a subset.
  std::set<std::string> ids75;
  for (const auto& r : at75.records) ids75.insert(r.map_id);
  for (const auto& r : at95.records) CHECK(ids75.count(r.map_id) == 1);

  // And every kept confidence clears the cutoff strictly.
  for (const auto& r : at95.records) CHECK(*r.provenance.confidence > 0.95);
}

TEST_CASE("build_manifest populates the subject index and rejects bad rows") {
  std::vector<DifferenceMapRecord> rows = {record("m0", "alice"), record("m1", "alice"),
                                           record("m2", "bob")};
  const auto m = build_manifest(rows, CohortName::HAD, /*check_files=*/false);
  CHECK(m.subject_index.at("alice").size() == 2);
  CHECK(m.subject_index.at("bob").size() == 1);

  CHECK(build_manifest({}, CohortName::HAD, false).size() == 0);

  rows.push_back(record("m0", "carol"));  // duplicate map_id
  CHECK_THROWS_AS(build_manifest(rows, CohortName::HAD, false), validation_error);

  auto bad = record("m9", "dave");
  bad.volume_path = "/nonexistent/volume.rawvol";
  CHECK_THROWS_AS(build_manifest({bad}, CohortName::HAD, true), io_error);

  auto self_link = record("m10", "erin");
  self_link.current_scan_id = self_link.previous_scan_id;
  CHECK_THROWS_AS(build_manifest({self_link}, CohortName::HAD, false), validation_error);
}

TEST_CASE("cohort provenance homogeneity is enforced") {
  auto r = record("m0", "alice");
  CHECK_THROWS_AS(build_manifest({r}, CohortName::WAD, false), validation_error);
  r.provenance = {ProvenanceKind::weak, 0.9};
  CHECK_NOTHROW(build_manifest({r}, CohortName::WAD, false));
  CHECK_THROWS_AS(build_manifest({r}, CohortName::HAD, false), validation_error);
}

TEST_CASE("manifest CSV round-trips and validates its header") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_test_manifest";
  std::filesystem::create_directories(dir);

  CohortManifest m;
  m.name = CohortName::WAD;
  for (int i = 0; i < 5; ++i) {
    auto r = record("m" + std::to_string(i), "s" + std::to_string(i % 2));
    r.provenance = {ProvenanceKind::weak, 0.75 + 0.05 * i};
    m.records.push_back(r);
  }
  m.rebuild_index();
  const auto path = (dir / "wad.csv").string();
  write_manifest_csv(m, path);

  const auto loaded = read_manifest_csv(path, CohortName::WAD, /*check_files=*/false);
  REQUIRE(loaded.size() == m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(loaded.records[i].map_id == m.records[i].map_id);
    CHECK(loaded.records[i].subject_id == m.records[i].subject_id);
    CHECK(*loaded.records[i].provenance.confidence ==
          doctest::Approx(*m.records[i].provenance.confidence).epsilon(1e-15));
  }

  std::ofstream bad((dir / "bad.csv").string());
  bad << "wrong,header\n";
  bad.close();
  CHECK_THROWS_AS(read_manifest_csv((dir / "bad.csv").string(), CohortName::HAD, false),
                  validation_error);
  std::filesystem::remove_all(dir);
}
