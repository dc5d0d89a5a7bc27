#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wldm/rng.hpp"
#include "wldm/tensor.hpp"

namespace wldm {

enum Label : std::uint8_t { kBackground = 0, kSoft = 1, kOrganA = 2, kOrganB = 3, kBone = 4 };

// Integer volume [D,H,W].
struct LabelVolume {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> data;

  std::int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
};

// Co-registered pseudo-MR / pseudo-CT volumes ([1,1,D,H,W], values in [-1,1])
// sharing one label volume.
struct PhantomPair {
  std::int64_t patient_id = 0;
  Tensor mr;
  Tensor ct;
  LabelVolume labels;
};

// Modality intensities per label before bias field and noise.
struct TissueIntensity {
  Real ct;
  Real mr;
};
TissueIntensity tissue_intensity(std::uint8_t label);

struct PhantomOptions {
  double noise_sigma = 0.02;
  double bias_amplitude = 0.15;
};

// Patient `index` of the phantom set drawn from `seed`. size in {16, 32, 64}.
PhantomPair generate_one(std::uint64_t seed, std::int64_t index, std::int64_t size, const PhantomOptions& opts = {});
std::vector<PhantomPair> generate(std::uint64_t seed, std::int64_t size, std::int64_t count,
                                  const PhantomOptions& opts = {});

// ---- WVL1 volume files ----

enum class VolumeDtype : std::uint8_t { F32 = 1, U8 = 2 };

using Spacing = std::array<float, 3>;
inline constexpr Spacing kDefaultSpacing{2.0f, 2.0f, 2.0f};

struct VolumeFile {
  VolumeDtype dtype = VolumeDtype::F32;
  std::array<std::uint32_t, 3> dims{0, 0, 0};
  Spacing spacing = kDefaultSpacing;
  std::vector<float> values;        // F32 payload
  std::vector<std::uint8_t> bytes;  // U8 payload
};

std::vector<std::uint8_t> encode_volume(const VolumeFile& v);
// Throws ParseError on bad magic, version, dtype, rank or a short payload.
VolumeFile decode_volume(const std::vector<std::uint8_t>& bytes);

// x is [D,H,W] or [1,1,D,H,W].
void write_volume(const std::string& path, const Tensor& x, const Spacing& spacing = kDefaultSpacing);
void write_labels(const std::string& path, const LabelVolume& labels, const Spacing& spacing = kDefaultSpacing);
// Returns [1,1,D,H,W].
Tensor read_volume(const std::string& path, Spacing* spacing = nullptr);
LabelVolume read_labels(const std::string& path, Spacing* spacing = nullptr);

// ---- cropping and augmentation ----

// Random target^3 crop of a [N,C,D,H,W] tensor, or the centre crop when rng is
// null. Values must already lie in [-1,1].
Tensor crop_and_normalize(const Tensor& x, std::int64_t target, Rng* rng);

// Crops mr, ct and labels at the same random (or centre) offset.
PhantomPair crop_pair(const PhantomPair& pair, std::int64_t target, Rng* rng);

struct AugmentParams {
  std::array<bool, 3> flip{false, false, false};  // per axis D,H,W
  std::array<double, 3> rotation_deg{0, 0, 0};    // about the D, H and W axes
  double scale = 1.0;
  double mr_gain = 1.0, mr_offset = 0.0;
  double ct_gain = 1.0, ct_offset = 0.0;

  bool is_identity() const;
};

// Flips with p=0.5, rotations within +-5 degrees, isotropic scale within
// +-5 %, per-modality brightness gain within +-10 % and offset within +-0.05.
AugmentParams draw_augment(Rng& rng);

// One geometric transform shared by mr, ct (trilinear) and labels (nearest),
// then per-modality brightness mapping. Identity parameters return a copy.
PhantomPair apply_augment(const PhantomPair& pair, const AugmentParams& params);
PhantomPair augment(const PhantomPair& pair, Rng& rng);

}  // namespace wldm
