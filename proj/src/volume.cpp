#include "changedet/volume.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "changedet/text.hpp"

namespace changedet {

bool Volume3D::same_grid(const Volume3D& other, double spacing_tol) const {
  if (shape != other.shape) return false;
  for (int i = 0; i < 3; ++i)
    if (std::abs(spacing[i] - other.spacing[i]) > spacing_tol) return false;
  for (int i = 0; i < 9; ++i)
    if (std::abs(direction[i] - other.direction[i]) > spacing_tol) return false;
  return true;
}

void Volume3D::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (shape[i] < 1) throw validation_error("volume shape components must be >= 1");
    if (!(spacing[i] > 0.0)) throw validation_error("volume spacing components must be > 0");
  }
  if (voxels.size() != static_cast<std::size_t>(shape[0] * shape[1] * shape[2]))
    throw validation_error("voxel count does not match volume shape");
  for (const double v : voxels)
    if (!std::isfinite(v)) throw validation_error("volume contains non-finite intensities");
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---- raw float32 + sidecar -------------------------------------------------

void save_rawvol(const Volume3D& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open volume for writing: " + path);
  std::vector<float> buf(v.voxels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(v.voxels[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw io_error("failed writing volume: " + path);
  std::ofstream meta(path + ".meta", std::ios::binary);
  if (!meta) throw io_error("cannot open sidecar for writing: " + path + ".meta");
  meta << "shape " << v.shape[0] << ' ' << v.shape[1] << ' ' << v.shape[2] << "\n"
       << "spacing " << format_compact(v.spacing[0]) << ' ' << format_compact(v.spacing[1])
       << ' ' << format_compact(v.spacing[2]) << "\n";
}

Volume3D load_rawvol(const std::string& path) {
  std::ifstream meta(path + ".meta", std::ios::binary);
  if (!meta) throw io_error("cannot open sidecar: " + path + ".meta");
  Volume3D v;
  std::string key;
  meta >> key;
  if (key != "shape") throw io_error("malformed sidecar (expected 'shape'): " + path + ".meta");
  meta >> v.shape[0] >> v.shape[1] >> v.shape[2];
  meta >> key;
  if (key != "spacing") throw io_error("malformed sidecar (expected 'spacing'): " + path + ".meta");
  meta >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
  if (!meta) throw io_error("malformed sidecar: " + path + ".meta");

  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open volume: " + path);
  const std::size_t n = static_cast<std::size_t>(v.shape[0] * v.shape[1] * v.shape[2]);
  std::vector<float> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
    throw io_error("volume file truncated: " + path);
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.voxels[i] = buf[i];
  v.validate();
  return v;
}

// ---- NIfTI-1 ----------------------------------------------------------------

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtU8 = 2;
constexpr std::int16_t kDtI16 = 4;
constexpr std::int16_t kDtI32 = 8;
constexpr std::int16_t kDtF32 = 16;
constexpr std::int16_t kDtF64 = 64;

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {
    if (!f_) throw io_error("cannot open: " + path);
  }
  ~GzFile() {
    if (f_) gzclose(f_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read_exact(void* buf, std::size_t n, const std::string& path) {
    if (gzread(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw io_error("truncated or unreadable NIfTI file: " + path);
  }
  void write_all(const void* buf, std::size_t n, const std::string& path) {
    if (gzwrite(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw io_error("failed writing NIfTI file: " + path);
  }

 private:
  gzFile f_;
};

void save_nifti(const Volume3D& v, const std::string& path) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(v.shape[0]);
  h.dim[2] = static_cast<std::int16_t>(v.shape[1]);
  h.dim[3] = static_cast<std::int16_t>(v.shape[2]);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = kDtF32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(v.spacing[i]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  h.srow_x[0] = static_cast<float>(v.direction[0] * v.spacing[0]);
  h.srow_x[1] = static_cast<float>(v.direction[1] * v.spacing[1]);
  h.srow_x[2] = static_cast<float>(v.direction[2] * v.spacing[2]);
  h.srow_y[0] = static_cast<float>(v.direction[3] * v.spacing[0]);
  h.srow_y[1] = static_cast<float>(v.direction[4] * v.spacing[1]);
  h.srow_y[2] = static_cast<float>(v.direction[5] * v.spacing[2]);
  h.srow_z[0] = static_cast<float>(v.direction[6] * v.spacing[0]);
  h.srow_z[1] = static_cast<float>(v.direction[7] * v.spacing[1]);
  h.srow_z[2] = static_cast<float>(v.direction[8] * v.spacing[2]);
  std::memcpy(h.magic, "n+1", 4);

  std::vector<float> buf(v.voxels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(v.voxels[i]);
  const char ext[4] = {0, 0, 0, 0};

  if (ends_with(path, ".gz")) {
    GzFile f(path, "wb");
    f.write_all(&h, sizeof(h), path);
    f.write_all(ext, 4, path);
    f.write_all(buf.data(), buf.size() * sizeof(float), path);
  } else {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open volume for writing: " + path);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    out.write(ext, 4);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw io_error("failed writing volume: " + path);
  }
}

Volume3D load_nifti(const std::string& path) {
  // gzread transparently handles both plain and gzip payloads.
  GzFile f(path, "rb");
  Nifti1Header h{};
  f.read_exact(&h, sizeof(h), path);
  if (h.sizeof_hdr != 348)
    throw io_error("not a little-endian NIfTI-1 file: " + path);
  if (std::memcmp(h.magic, "n+1", 3) != 0 && std::memcmp(h.magic, "ni1", 3) != 0)
    throw io_error("bad NIfTI magic in: " + path);
  if (h.dim[0] < 3)
    throw io_error("NIfTI file has fewer than 3 dimensions: " + path);
  for (int d = 4; d <= h.dim[0]; ++d)
    if (h.dim[d] > 1)
      throw io_error("NIfTI file has more than 3 non-trivial dimensions: " + path);

  Volume3D v;
  for (int i = 0; i < 3; ++i) {
    v.shape[i] = h.dim[i + 1];
    v.spacing[i] = h.pixdim[i + 1] > 0 ? h.pixdim[i + 1] : 1.0;
  }
  const std::size_t n = static_cast<std::size_t>(v.shape[0] * v.shape[1] * v.shape[2]);

  // Skip anything between the header and vox_offset (extensions).
  const std::size_t offset = h.vox_offset >= 348.0f ? static_cast<std::size_t>(h.vox_offset) : 352;
  std::vector<char> skip(offset - sizeof(h));
  if (!skip.empty()) f.read_exact(skip.data(), skip.size(), path);

  v.voxels.resize(n);
  auto read_as = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> buf(n);
    f.read_exact(buf.data(), n * sizeof(T), path);
    for (std::size_t i = 0; i < n; ++i) v.voxels[i] = static_cast<double>(buf[i]);
  };
  switch (h.datatype) {
    case kDtU8: read_as(std::uint8_t{}); break;
    case kDtI16: read_as(std::int16_t{}); break;
    case kDtI32: read_as(std::int32_t{}); break;
    case kDtF32: read_as(float{}); break;
    case kDtF64: read_as(double{}); break;
    default:
      throw io_error("unsupported NIfTI datatype " + std::to_string(h.datatype) + " in: " + path);
  }
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
    for (auto& x : v.voxels) x = x * h.scl_slope + h.scl_inter;
  }
  v.validate();
  return v;
}

}  // namespace

void save_volume(const Volume3D& volume, const std::string& path) {
  volume.validate();
  if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) {
    save_nifti(volume, path);
  } else if (ends_with(path, ".rawvol")) {
    save_rawvol(volume, path);
  } else {
    throw io_error("unknown volume extension (expected .nii, .nii.gz or .rawvol): " + path);
  }
}

Volume3D load_volume(const std::string& path) {
  if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) return load_nifti(path);
  if (ends_with(path, ".rawvol")) return load_rawvol(path);
  throw io_error("unknown volume extension (expected .nii, .nii.gz or .rawvol): " + path);
}

}  // namespace changedet
