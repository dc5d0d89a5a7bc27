#include "wldm/phantom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

namespace wldm {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

TissueIntensity tissue_intensity(std::uint8_t label) {
  switch (label) {
    case kSoft: return {Real(0.05), Real(-0.1)};
    case kOrganA: return {Real(0.2), Real(0.4)};
    case kOrganB: return {Real(-0.15), Real(0.7)};
    case kBone: return {Real(0.8), Real(-0.6)};
    default: return {Real(-1), Real(-1)};
  }
}

namespace {

struct Ellipsoid {
  std::array<double, 3> c;
  std::array<double, 3> r;

  bool contains(double d, double h, double w) const {
    const double a = (d - c[0]) / r[0], b = (h - c[1]) / r[1], e = (w - c[2]) / r[2];
    return a * a + b * b + e * e <= 1.0;
  }
};

// Normalized voxel-centre coordinate in (-1, 1).
double coord(std::int64_t i, std::int64_t n) { return (2.0 * i + 1.0) / static_cast<double>(n) - 1.0; }

}  // namespace

PhantomPair generate_one(std::uint64_t seed, std::int64_t index, std::int64_t size, const PhantomOptions& opts) {
  if (size != 16 && size != 32 && size != 64)
    contract_fail("phantom size must be 16, 32 or 64, got " + std::to_string(size));
  require(index >= 0, "phantom index must be non-negative");
  Rng rng = Rng(seed, 0x5048414e544f4dULL).split(static_cast<std::uint64_t>(index));

  Ellipsoid body{{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)},
                 {rng.uniform(0.8, 0.95), rng.uniform(0.8, 0.95), rng.uniform(0.8, 0.95)}};

  std::vector<std::pair<Ellipsoid, std::uint8_t>> organs;
  const std::int64_t n_organs = rng.uniform_int(2, 4);
  for (std::int64_t k = 0; k < n_organs; ++k) {
    Ellipsoid e;
    for (int a = 0; a < 3; ++a) {
      e.c[a] = body.c[a] + rng.uniform(-0.4, 0.4) * body.r[a];
      e.r[a] = rng.uniform(0.12, 0.3);
    }
    organs.push_back({e, static_cast<std::uint8_t>(rng.bernoulli(0.5) ? kOrganA : kOrganB)});
  }

  // Spine: a stack along D behind the body centre.
  std::vector<Ellipsoid> spine;
  const std::int64_t n_vert = rng.uniform_int(3, 6);
  const double spine_h = body.c[1] - rng.uniform(0.45, 0.55) * body.r[1];
  const double spine_w = body.c[2] + rng.uniform(-0.08, 0.08);
  const double extent = 0.65 * body.r[0];
  const double pitch = 2.0 * extent / static_cast<double>(n_vert);
  for (std::int64_t k = 0; k < n_vert; ++k) {
    const double cd = body.c[0] - extent + (k + 0.5) * pitch;
    const double rhw = rng.uniform(0.12, 0.18);
    spine.push_back({{cd, spine_h, spine_w}, {0.4 * pitch, rhw, rhw}});
  }

  // Bias field: normalized combination of low-order monomials.
  std::array<double, 9> bc;
  double norm = 0;
  for (auto& v : bc) {
    v = rng.uniform(-1.0, 1.0);
    norm += std::abs(v);
  }
  auto bias = [&](double d, double h, double w) {
    const std::array<double, 9> phi{d, h, w, d * h, h * w, d * w, d * d, h * h, w * w};
    double s = 0;
    for (int i = 0; i < 9; ++i) s += bc[i] * phi[i];
    return opts.bias_amplitude * s / norm;
  };

  PhantomPair p;
  p.patient_id = index;
  p.labels.dims = {size, size, size};
  p.labels.data.assign(static_cast<std::size_t>(size * size * size), kBackground);
  p.mr = Tensor::zeros({1, 1, size, size, size});
  p.ct = Tensor::zeros({1, 1, size, size, size});
  Rng noise = rng.split(1);
  auto mr = p.mr.data();
  auto ct = p.ct.data();
  std::int64_t v = 0;
  for (std::int64_t i = 0; i < size; ++i) {
    const double d = coord(i, size);
    for (std::int64_t j = 0; j < size; ++j) {
      const double h = coord(j, size);
      for (std::int64_t k = 0; k < size; ++k, ++v) {
        const double w = coord(k, size);
        std::uint8_t label = kBackground;
        if (body.contains(d, h, w)) {
          label = kSoft;
          for (const auto& [e, l] : organs)
            if (e.contains(d, h, w)) label = l;
          for (const auto& e : spine)
            if (e.contains(d, h, w)) label = kBone;
        }
        p.labels.data[v] = label;
        const TissueIntensity t = tissue_intensity(label);
        const double mr01 = (t.mr + 1.0) * 0.5 * (1.0 + bias(d, h, w));
        const double mr_val = 2.0 * mr01 - 1.0 + opts.noise_sigma * noise.normal();
        const double ct_val = t.ct + opts.noise_sigma * noise.normal();
        mr[v] = static_cast<Real>(std::clamp(mr_val, -1.0, 1.0));
        ct[v] = static_cast<Real>(std::clamp(ct_val, -1.0, 1.0));
      }
    }
  }
  return p;
}

std::vector<PhantomPair> generate(std::uint64_t seed, std::int64_t size, std::int64_t count,
                                  const PhantomOptions& opts) {
  require(count >= 0, "phantom count must be non-negative");
  std::vector<PhantomPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_one(seed, i, size, opts));
  return out;
}

// ---- WVL1 ----

namespace {

constexpr char kMagic[4] = {'W', 'V', 'L', '1'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 3 + 3 * 4 + 3 * 4;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <class T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path);
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const VolumeFile& v) {
  std::uint64_t n = 1;
  for (auto d : v.dims) {
    if (d == 0) contract_fail("write_volume: zero-sized dimension");
    n *= d;
  }
  const std::size_t payload = v.dtype == VolumeDtype::F32 ? v.values.size() : v.bytes.size();
  require(payload == n, "write_volume: payload size does not match extents");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(v.dtype));
  out.push_back(3);
  for (auto d : v.dims) put<std::uint32_t>(out, d);
  for (auto s : v.spacing) put<float>(out, s);
  if (v.dtype == VolumeDtype::F32) {
    for (float x : v.values) put<float>(out, x);
  } else {
    out.insert(out.end(), v.bytes.begin(), v.bytes.end());
  }
  return out;
}

VolumeFile decode_volume(const std::vector<std::uint8_t>& in) {
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) throw ParseError("bad magic, expected \"WVL1\"");
  if (in.size() < 7) throw ParseError("truncated WVL1 header");
  if (in[4] != kVersion) throw ParseError("unsupported WVL1 version " + std::to_string(in[4]));
  VolumeFile v;
  if (in[5] == 1) {
    v.dtype = VolumeDtype::F32;
  } else if (in[5] == 2) {
    v.dtype = VolumeDtype::U8;
  } else {
    throw ParseError("unsupported WVL1 dtype code " + std::to_string(in[5]));
  }
  if (in[6] != 3) throw ParseError("WVL1 volumes must have 3 dimensions, got " + std::to_string(in[6]));
  if (in.size() < kHeaderBytes) throw ParseError("truncated WVL1 header");
  std::size_t pos = 7;
  std::uint64_t n = 1;
  for (auto& d : v.dims) {
    d = get<std::uint32_t>(in, pos);
    if (d == 0) throw ParseError("WVL1 extent of zero");
    n *= d;
    if (n > (std::uint64_t{1} << 34)) throw ParseError("WVL1 extents too large");
  }
  for (auto& s : v.spacing) s = get<float>(in, pos);
  const std::uint64_t elem = v.dtype == VolumeDtype::F32 ? 4 : 1;
  const std::uint64_t need = n * elem;
  if (in.size() - pos < need) throw ParseError("truncated WVL1 payload");
  if (in.size() - pos > need) throw ParseError("trailing bytes after WVL1 payload");
  if (v.dtype == VolumeDtype::F32) {
    v.values.resize(n);
    std::memcpy(v.values.data(), in.data() + pos, need);
  } else {
    v.bytes.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.end());
  }
  return v;
}

void write_volume(const std::string& path, const Tensor& x, const Spacing& spacing) {
  const bool five = x.ndim() == 5 && x.dim(0) == 1 && x.dim(1) == 1;
  require(x.ndim() == 3 || five, "write_volume expects [D,H,W] or [1,1,D,H,W], got " + shape_str(x.shape()));
  VolumeFile v;
  v.spacing = spacing;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t d = x.dim(x.ndim() - 3 + a);
    if (d <= 0) contract_fail("write_volume: zero-sized dimension");
    v.dims[a] = static_cast<std::uint32_t>(d);
  }
  v.values.assign(x.data().begin(), x.data().end());
  write_file(path, encode_volume(v));
}

void write_labels(const std::string& path, const LabelVolume& labels, const Spacing& spacing) {
  VolumeFile v;
  v.dtype = VolumeDtype::U8;
  v.spacing = spacing;
  for (int a = 0; a < 3; ++a) v.dims[a] = static_cast<std::uint32_t>(labels.dims[a]);
  v.bytes = labels.data;
  write_file(path, encode_volume(v));
}

Tensor read_volume(const std::string& path, Spacing* spacing) {
  const VolumeFile v = decode_volume(read_file(path));
  if (v.dtype != VolumeDtype::F32) throw ParseError(path + ": expected a real-valued volume");
  if (spacing) *spacing = v.spacing;
  std::vector<Real> data(v.values.begin(), v.values.end());
  return Tensor::from({1, 1, v.dims[0], v.dims[1], v.dims[2]}, std::move(data));
}

LabelVolume read_labels(const std::string& path, Spacing* spacing) {
  const VolumeFile v = decode_volume(read_file(path));
  if (v.dtype != VolumeDtype::U8) throw ParseError(path + ": expected a label volume");
  if (spacing) *spacing = v.spacing;
  LabelVolume l;
  l.dims = {v.dims[0], v.dims[1], v.dims[2]};
  l.data = v.bytes;
  return l;
}

// ---- cropping ----

namespace {

std::array<std::int64_t, 3> crop_origin(const std::array<std::int64_t, 3>& dims, std::int64_t target, Rng* rng) {
  std::array<std::int64_t, 3> o{};
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < target)
      contract_fail("crop target " + std::to_string(target) + " exceeds extent " + std::to_string(dims[a]));
    o[a] = rng ? rng->uniform_int(0, dims[a] - target) : (dims[a] - target) / 2;
  }
  return o;
}

Tensor crop_at(const Tensor& x, const std::array<std::int64_t, 3>& o, std::int64_t target) {
  const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor out = Tensor::zeros({N, C, target, target, target});
  auto dst = out.data();
  auto src = x.data();
  std::int64_t v = 0;
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t i = 0; i < target; ++i)
      for (std::int64_t j = 0; j < target; ++j) {
        const std::int64_t base = ((nc * D + o[0] + i) * H + o[1] + j) * W + o[2];
        for (std::int64_t k = 0; k < target; ++k) dst[v++] = src[base + k];
      }
  return out;
}

}  // namespace

Tensor crop_and_normalize(const Tensor& x, std::int64_t target, Rng* rng) {
  require(x.ndim() == 5, "crop_and_normalize expects [N,C,D,H,W], got " + shape_str(x.shape()));
  require(target > 0, "crop target must be positive");
  for (Real v : x.data())
    if (!(v >= -1 && v <= 1)) contract_fail("crop_and_normalize: intensities must already lie in [-1,1]");
  return crop_at(x, crop_origin({x.dim(2), x.dim(3), x.dim(4)}, target, rng), target);
}

PhantomPair crop_pair(const PhantomPair& pair, std::int64_t target, Rng* rng) {
  const auto o = crop_origin(pair.labels.dims, target, rng);
  PhantomPair out;
  out.patient_id = pair.patient_id;
  out.mr = crop_at(pair.mr, o, target);
  out.ct = crop_at(pair.ct, o, target);
  out.labels.dims = {target, target, target};
  out.labels.data.reserve(static_cast<std::size_t>(target * target * target));
  const auto& L = pair.labels;
  for (std::int64_t i = 0; i < target; ++i)
    for (std::int64_t j = 0; j < target; ++j)
      for (std::int64_t k = 0; k < target; ++k)
        out.labels.data.push_back(L.data[((o[0] + i) * L.dims[1] + o[1] + j) * L.dims[2] + o[2] + k]);
  return out;
}

// ---- augmentation ----

bool AugmentParams::is_identity() const {
  return !flip[0] && !flip[1] && !flip[2] && rotation_deg == std::array<double, 3>{0, 0, 0} && scale == 1.0 &&
         mr_gain == 1.0 && mr_offset == 0.0 && ct_gain == 1.0 && ct_offset == 0.0;
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  for (auto& f : p.flip) f = rng.bernoulli(0.5);
  if (rng.bernoulli(0.5)) {
    for (auto& r : p.rotation_deg) r = rng.uniform(-5.0, 5.0);
    p.scale = rng.uniform(0.95, 1.05);
  }
  if (rng.bernoulli(0.5)) {
    p.mr_gain = rng.uniform(0.9, 1.1);
    p.mr_offset = rng.uniform(-0.05, 0.05);
  }
  if (rng.bernoulli(0.5)) {
    p.ct_gain = rng.uniform(0.9, 1.1);
    p.ct_offset = rng.uniform(-0.05, 0.05);
  }
  return p;
}

PhantomPair apply_augment(const PhantomPair& pair, const AugmentParams& p) {
  PhantomPair out{pair.patient_id, pair.mr.clone(), pair.ct.clone(), pair.labels};
  if (p.is_identity()) return out;

  const auto dims = pair.labels.dims;
  require(pair.mr.numel() == pair.labels.numel() && pair.ct.numel() == pair.labels.numel(),
          "augment: mr, ct and labels must share geometry");

  // Output voxel -> source voxel: flip, then inverse rotation and scale about the centre.
  using M3 = std::array<std::array<double, 3>, 3>;
  auto rot = [](int axis, double deg) {
    const double r = deg * std::numbers::pi / 180.0, c = std::cos(r), s = std::sin(r);
    M3 m{};
    const int a = (axis + 1) % 3, b = (axis + 2) % 3;
    m[axis][axis] = 1;
    m[a][a] = c;
    m[a][b] = -s;
    m[b][a] = s;
    m[b][b] = c;
    return m;
  };
  auto mul3 = [](const M3& x, const M3& y) {
    M3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i][j] += x[i][k] * y[k][j];
    return r;
  };
  // Inverse of R_d R_h R_w is R_w^T R_h^T R_d^T = R_w(-) R_h(-) R_d(-).
  const M3 inv = mul3(mul3(rot(2, -p.rotation_deg[2]), rot(1, -p.rotation_deg[1])), rot(0, -p.rotation_deg[0]));
  const bool affine = p.rotation_deg != std::array<double, 3>{0, 0, 0} || p.scale != 1.0;

  auto src_mr = pair.mr.data();
  auto src_ct = pair.ct.data();
  auto dst_mr = out.mr.data();
  auto dst_ct = out.ct.data();
  const auto& L = pair.labels.data;
  auto at = [&](std::int64_t i, std::int64_t j, std::int64_t k) { return (i * dims[1] + j) * dims[2] + k; };

  std::int64_t v = 0;
  for (std::int64_t i = 0; i < dims[0]; ++i)
    for (std::int64_t j = 0; j < dims[1]; ++j)
      for (std::int64_t k = 0; k < dims[2]; ++k, ++v) {
        std::array<double, 3> q{double(i), double(j), double(k)};
        for (int a = 0; a < 3; ++a)
          if (p.flip[a]) q[a] = double(dims[a] - 1) - q[a];
        if (affine) {
          std::array<double, 3> c{}, r{};
          for (int a = 0; a < 3; ++a) c[a] = q[a] - 0.5 * double(dims[a] - 1);
          for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) r[a] += inv[a][b] * c[b];
            q[a] = r[a] / p.scale + 0.5 * double(dims[a] - 1);
          }
        }
        // Labels: nearest neighbour, background outside.
        std::array<std::int64_t, 3> nn{};
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
          nn[a] = static_cast<std::int64_t>(std::lround(q[a]));
          inside = inside && nn[a] >= 0 && nn[a] < dims[a];
        }
        out.labels.data[v] = inside ? L[at(nn[0], nn[1], nn[2])] : std::uint8_t{kBackground};
        if (!affine) {
          dst_mr[v] = src_mr[at(nn[0], nn[1], nn[2])];
          dst_ct[v] = src_ct[at(nn[0], nn[1], nn[2])];
          continue;
        }
        // Intensities: trilinear, background value outside.
        std::array<std::int64_t, 3> lo{};
        std::array<double, 3> f{};
        for (int a = 0; a < 3; ++a) {
          lo[a] = static_cast<std::int64_t>(std::floor(q[a]));
          f[a] = q[a] - double(lo[a]);
        }
        double acc_mr = 0, acc_ct = 0;
        for (int corner = 0; corner < 8; ++corner) {
          double wgt = 1;
          std::array<std::int64_t, 3> idx{};
          bool ok = true;
          for (int a = 0; a < 3; ++a) {
            const int bit = (corner >> (2 - a)) & 1;
            idx[a] = lo[a] + bit;
            wgt *= bit ? f[a] : 1.0 - f[a];
            ok = ok && idx[a] >= 0 && idx[a] < dims[a];
          }
          const std::int64_t s = ok ? at(idx[0], idx[1], idx[2]) : -1;
          acc_mr += wgt * (ok ? double(src_mr[s]) : -1.0);
          acc_ct += wgt * (ok ? double(src_ct[s]) : -1.0);
        }
        dst_mr[v] = static_cast<Real>(acc_mr);
        dst_ct[v] = static_cast<Real>(acc_ct);
      }

  auto brightness = [](std::span<Real> x, double gain, double offset) {
    if (gain == 1.0 && offset == 0.0) return;
    for (auto& e : x) e = static_cast<Real>(std::clamp(gain * (double(e) + 1.0) - 1.0 + offset, -1.0, 1.0));
  };
  brightness(dst_mr, p.mr_gain, p.mr_offset);
  brightness(dst_ct, p.ct_gain, p.ct_offset);
  return out;
}

PhantomPair augment(const PhantomPair& pair, Rng& rng) { return apply_augment(pair, draw_augment(rng)); }

}  // namespace wldm
