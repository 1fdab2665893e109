#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "changedet/errors.hpp"

namespace changedet {

// Dense 3D voxel grid. Memory layout is x-fastest:
// voxels[ix + nx*(iy + ny*iz)], matching on-disk NIfTI ordering.
struct Volume3D {
  std::array<std::int64_t, 3> shape{0, 0, 0};        // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};      // mm
  std::array<double, 9> direction{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::vector<double> voxels;

  Volume3D() = default;
  Volume3D(std::int64_t nx, std::int64_t ny, std::int64_t nz, double fill = 0.0)
      : shape{nx, ny, nz}, voxels(static_cast<std::size_t>(nx * ny * nz), fill) {}

  std::int64_t nx() const { return shape[0]; }
  std::int64_t ny() const { return shape[1]; }
  std::int64_t nz() const { return shape[2]; }
  std::size_t size() const { return voxels.size(); }

  double& at(std::int64_t x, std::int64_t y, std::int64_t z) {
    return voxels[static_cast<std::size_t>(x + shape[0] * (y + shape[1] * z))];
  }
  double at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return voxels[static_cast<std::size_t>(x + shape[0] * (y + shape[1] * z))];
  }

  bool same_grid(const Volume3D& other, double spacing_tol = 1e-9) const;

  // Checks finiteness of every voxel, positive spacing, shape >= 1 and
  // voxel count consistency.
  void validate() const;
};

// Volume container IO. Format chosen by extension:
//   .nii / .nii.gz  NIfTI-1, written as float32
//   .rawvol         little-endian float32 array + text sidecar
//                   "<path>.meta" holding shape and spacing
void save_volume(const Volume3D& volume, const std::string& path);
Volume3D load_volume(const std::string& path);

}  // namespace changedet
