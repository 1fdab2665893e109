#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "changedet/preprocess.hpp"
#include "changedet/rng.hpp"
#include "changedet/volume.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace changedet;

namespace {

Volume3D random_volume(std::int64_t nx, std::int64_t ny, std::int64_t nz, std::uint64_t seed) {
  Volume3D v(nx, ny, nz);
  Rng rng(seed);
  for (auto& x : v.voxels) x = rng.normal(0.0, 1.0);
  return v;
}

std::vector<StageDescriptor> bypass_stages() {
  return {{StageKind::bias_correction, std::nullopt, ""},
          {StageKind::registration, std::nullopt, ""},
          {StageKind::skull_strip, std::nullopt, ""}};
}

}  // namespace

TEST_CASE("full bypass pipeline is the identity and logs every stage") {
  const Volume3D prev = random_volume(6, 5, 4, 1);
  const Volume3D cur = random_volume(6, 5, 4, 2);
  const auto result = run_stage_pipeline(prev, cur, bypass_stages());
  CHECK(result.previous_processed.voxels == prev.voxels);
  CHECK(result.current_processed.voxels == cur.voxels);
  REQUIRE(result.provenance_log.size() == 3);
  CHECK(result.provenance_log[0].kind == StageKind::bias_correction);
  CHECK(result.provenance_log[1].kind == StageKind::registration);
  CHECK(result.provenance_log[2].kind == StageKind::skull_strip);
  for (const auto& e : result.provenance_log) CHECK(e.bypassed);
}

TEST_CASE("three identity_bypass slots log three bypassed stages in order") {
  const Volume3D prev = random_volume(4, 4, 4, 3);
  const Volume3D cur = random_volume(4, 4, 4, 4);
  const std::vector<StageDescriptor> stages = {{StageKind::identity_bypass, std::nullopt, "a"},
                                               {StageKind::identity_bypass, std::nullopt, "b"},
                                               {StageKind::identity_bypass, std::nullopt, "c"}};
  const auto result = run_stage_pipeline(prev, cur, stages);
  CHECK(result.previous_processed.voxels == prev.voxels);
  REQUIRE(result.provenance_log.size() == 3);
  CHECK(result.provenance_log[0].note == "a");
  CHECK(result.provenance_log[1].note == "b");
  CHECK(result.provenance_log[2].note == "c");
  for (const auto& e : result.provenance_log) {
    CHECK(e.bypassed);
    CHECK(e.command.empty());
  }
}

TEST_CASE("registration bypass with mismatched grids fails before differencing") {
  const Volume3D prev = random_volume(6, 6, 6, 1);
  const Volume3D cur = random_volume(5, 6, 6, 2);
  CHECK_THROWS_AS(run_stage_pipeline(prev, cur, bypass_stages()), validation_error);
}

TEST_CASE("stages must follow the canonical order") {
  const Volume3D v = random_volume(4, 4, 4, 1);
  const std::vector<StageDescriptor> wrong = {{StageKind::skull_strip, std::nullopt, ""},
                                              {StageKind::bias_correction, std::nullopt, ""}};
  CHECK_THROWS_AS(run_stage_pipeline(v, v, wrong), validation_error);

  // A subsequence (registration only) is fine.
  const std::vector<StageDescriptor> reg_only = {{StageKind::registration, std::nullopt, ""}};
  CHECK_NOTHROW(run_stage_pipeline(v, v, reg_only));
}

TEST_CASE("identity_bypass stage must not carry a command") {
  StageDescriptor s{StageKind::identity_bypass, std::string("cp {input} {output}"), ""};
  CHECK_THROWS_AS(s.validate(), validation_error);
}

TEST_CASE("external stage runs a command template") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_stage_test";
  std::filesystem::create_directories(dir);
  const Volume3D prev = random_volume(5, 5, 5, 10);
  const Volume3D cur = random_volume(5, 5, 5, 11);

  StagePipelineOptions opts;
  opts.temp_dir = dir.string();
  opts.io_extension = ".rawvol";

  SUBCASE("per-volume copy command is an identity") {
    const std::vector<StageDescriptor> stages = {
        {StageKind::bias_correction,
         std::string("cp {input} {output} && cp {input}.meta {output}.meta"), "fake N4"}};
    const auto result = run_stage_pipeline(prev, cur, stages, opts);
    for (std::size_t i = 0; i < prev.voxels.size(); ++i) {
      CHECK(result.previous_processed.voxels[i] ==
            doctest::Approx(prev.voxels[i]).epsilon(1e-6));
    }
    CHECK_FALSE(result.provenance_log[0].bypassed);
  }

  SUBCASE("failing command raises a stage error with diagnostics") {
    const std::vector<StageDescriptor> stages = {
        {StageKind::skull_strip, std::string("echo strip-diagnostic; false"), ""}};
    try {
      run_stage_pipeline(prev, cur, stages, opts);
      FAIL("expected stage_error");
    } catch (const stage_error& e) {
      CHECK(e.stage_kind() == "skull_strip");
      CHECK(std::string(e.what()).find("strip-diagnostic") != std::string::npos);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("z-score normalization uses the sample convention") {
  Volume3D v(2, 1, 1);
  v.voxels = {0.0, 1.0};
  const auto z = zscore_normalize(v);
  CHECK(z.voxels[0] == doctest::Approx(-0.7071067811865475).epsilon(1e-12));
  CHECK(z.voxels[1] == doctest::Approx(+0.7071067811865475).epsilon(1e-12));
}

TEST_CASE("z-score moments vanish on a random volume") {
  const Volume3D v = random_volume(16, 16, 16, 99);
  const auto z = zscore_normalize(v);
  double mean = 0.0;
  for (const double x : z.voxels) mean += x;
  mean /= static_cast<double>(z.voxels.size());
  double ss = 0.0;
  for (const double x : z.voxels) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(z.voxels.size() - 1));
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(sd - 1.0) < 1e-6);
}

TEST_CASE("z-score is idempotent up to tolerance") {
  const Volume3D v = random_volume(12, 10, 8, 123);
  const auto z1 = zscore_normalize(v);
  const auto z2 = zscore_normalize(z1);
  for (std::size_t i = 0; i < z1.voxels.size(); ++i)
    CHECK(std::abs(z1.voxels[i] - z2.voxels[i]) <= 1e-6);
}

TEST_CASE("constant volume cannot be z-scored") {
  Volume3D v(4, 4, 4, 3.5);
  CHECK_THROWS_AS(zscore_normalize(v), degenerate_input_error);
}

TEST_CASE("masked z-score zeroes voxels outside the mask") {
  Volume3D v(4, 1, 1);
  v.voxels = {1.0, 2.0, 3.0, 100.0};
  Volume3D mask(4, 1, 1);
  mask.voxels = {1.0, 1.0, 1.0, 0.0};
  const auto z = zscore_normalize(v, &mask);
  CHECK(z.voxels[3] == 0.0);
  const double mean = (z.voxels[0] + z.voxels[1] + z.voxels[2]) / 3.0;
  CHECK(std::abs(mean) < 1e-12);

  Volume3D tiny_mask(4, 1, 1);
  tiny_mask.voxels = {1.0, 0.0, 0.0, 0.0};
  CHECK_THROWS_AS(zscore_normalize(v, &tiny_mask), validation_error);
}

TEST_CASE("absolute difference") {
  SUBCASE("identical volumes give zero") {
    const Volume3D v = random_volume(6, 6, 6, 5);
    const auto d = absolute_difference(v, v);
    for (const double x : d.voxels) CHECK(x == 0.0);
  }
  SUBCASE("elementwise example") {
    Volume3D a(2, 1, 1), b(2, 1, 1);
    a.voxels = {1.0, 4.0};
    b.voxels = {3.0, 1.0};
    const auto d = absolute_difference(a, b);
    CHECK(d.voxels[0] == 2.0);
    CHECK(d.voxels[1] == 3.0);
  }
  SUBCASE("symmetry on random volumes") {
    const Volume3D a = random_volume(7, 6, 5, 21);
    const Volume3D b = random_volume(7, 6, 5, 22);
    CHECK(absolute_difference(a, b).voxels == absolute_difference(b, a).voxels);
  }
  SUBCASE("nonnegative everywhere") {
    const Volume3D a = random_volume(8, 8, 8, 31);
    const Volume3D b = random_volume(8, 8, 8, 32);
    for (const double x : absolute_difference(a, b).voxels) CHECK(x >= 0.0);
  }
  SUBCASE("grid mismatch is a validation error") {
    const Volume3D a = random_volume(4, 4, 4, 1);
    Volume3D b = random_volume(4, 4, 4, 2);
    b.spacing = {2.0, 1.0, 1.0};
    CHECK_THROWS_AS(absolute_difference(a, b), validation_error);
  }
  SUBCASE("metadata comes from the current volume") {
    const Volume3D a = random_volume(4, 4, 4, 1);
    Volume3D b = random_volume(4, 4, 4, 2);
    const auto d = absolute_difference(a, b);
    CHECK(d.spacing == b.spacing);
  }
}

TEST_CASE("resampling to the same grid is the identity") {
  const Volume3D v = random_volume(9, 7, 5, 77);
  const auto r = resample_to_grid(v, v.shape);
  CHECK(r.voxels == v.voxels);
}

TEST_CASE("resampling preserves constants at any target shape") {
  Volume3D v(6, 6, 6, 2.25);
  for (const auto target : {std::array<std::int64_t, 3>{3, 5, 9},
                            std::array<std::int64_t, 3>{1, 1, 1},
                            std::array<std::int64_t, 3>{12, 2, 7}}) {
    const auto r = resample_to_grid(v, target);
    for (const double x : r.voxels) CHECK(x == doctest::Approx(2.25).epsilon(1e-15));
  }
}

TEST_CASE("resampling a linear ramp matches the 1-D interpolation oracle") {
  Volume3D v(8, 1, 1);
  std::vector<double> ramp(8);
  for (int i = 0; i < 8; ++i) ramp[static_cast<std::size_t>(i)] = static_cast<double>(i);
  v.voxels = ramp;
  const auto r = resample_to_grid(v, {4, 1, 1});
  const auto expected = oracles::linear_resample_1d(ramp, 4);
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(r.voxels[static_cast<std::size_t>(i)] -
                   expected[static_cast<std::size_t>(i)]) < 1e-10);
}

TEST_CASE("resampling never expands the intensity range") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Volume3D v = random_volume(5 + rng.uniform_int(6), 5 + rng.uniform_int(6),
                                     5 + rng.uniform_int(6), rng.next_u64());
    const double lo = *std::min_element(v.voxels.begin(), v.voxels.end());
    const double hi = *std::max_element(v.voxels.begin(), v.voxels.end());
    const std::array<std::int64_t, 3> target{
        static_cast<std::int64_t>(1 + rng.uniform_int(12)),
        static_cast<std::int64_t>(1 + rng.uniform_int(12)),
        static_cast<std::int64_t>(1 + rng.uniform_int(12))};
    const auto r = resample_to_grid(v, target);
    for (const double x : r.voxels) {
      CHECK(x >= lo - 1e-12);
      CHECK(x <= hi + 1e-12);
    }
  }
}

TEST_CASE("resampling rescales spacing to preserve physical extent") {
  Volume3D v = random_volume(8, 8, 8, 1);
  v.spacing = {0.5, 0.5, 2.0};
  const auto r = resample_to_grid(v, {4, 8, 16});
  CHECK(r.spacing[0] == doctest::Approx(1.0));
  CHECK(r.spacing[1] == doctest::Approx(0.5));
  CHECK(r.spacing[2] == doctest::Approx(1.0));
}

TEST_CASE("volume IO round-trips") {
  const auto dir = std::filesystem::temp_directory_path() / "changedet_volume_io";
  std::filesystem::create_directories(dir);
  Volume3D v = random_volume(7, 6, 5, 404);
  v.spacing = {0.45, 0.45, 4.0};

  for (const std::string ext : {".rawvol", ".nii", ".nii.gz"}) {
    const auto path = (dir / ("vol" + ext)).string();
    save_volume(v, path);
    const auto loaded = load_volume(path);
    REQUIRE(loaded.shape == v.shape);
    CHECK(loaded.spacing[0] == doctest::Approx(v.spacing[0]).epsilon(1e-6));
    CHECK(loaded.spacing[2] == doctest::Approx(v.spacing[2]).epsilon(1e-6));
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
      CHECK(loaded.voxels[i] == doctest::Approx(v.voxels[i]).epsilon(1e-6));
  }
  CHECK_THROWS_AS(load_volume((dir / "missing.rawvol").string()), io_error);
  CHECK_THROWS_AS(save_volume(v, (dir / "vol.unknown").string()), io_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("volume validation catches bad metadata") {
  Volume3D v(2, 2, 2);
  v.voxels[0] = std::nan("");
  CHECK_THROWS_AS(v.validate(), validation_error);
  Volume3D w(2, 2, 2);
  w.spacing = {0.0, 1.0, 1.0};
  CHECK_THROWS_AS(w.validate(), validation_error);
}
