#include "wldm/metrics.hpp"

#include <cmath>
#include <limits>

namespace wldm {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.numel() != b.numel() || a.numel() == 0)
    contract_fail(std::string(what) + ": volumes differ in size (" + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()) + ")");
}

std::array<std::int64_t, 3> spatial(const Tensor& x) {
  require(x.ndim() == 3 || (x.ndim() == 5 && x.dim(0) == 1 && x.dim(1) == 1),
          "expected a [D,H,W] or [1,1,D,H,W] volume, got " + shape_str(x.shape()));
  return {x.dim(-3), x.dim(-2), x.dim(-1)};
}

// Valid-mode separable filtering of a [D,H,W] field along one axis.
std::vector<double> filter_axis(const std::vector<double>& in, std::array<std::int64_t, 3>& dims, int axis,
                                const std::vector<double>& taps) {
  const auto k = static_cast<std::int64_t>(taps.size());
  std::array<std::int64_t, 3> od = dims;
  od[axis] -= k - 1;
  std::vector<double> out(static_cast<std::size_t>(od[0] * od[1] * od[2]));
  const std::array<std::int64_t, 3> stride{dims[1] * dims[2], dims[2], 1};
  std::int64_t v = 0;
  for (std::int64_t i = 0; i < od[0]; ++i)
    for (std::int64_t j = 0; j < od[1]; ++j)
      for (std::int64_t l = 0; l < od[2]; ++l, ++v) {
        const std::int64_t base = i * stride[0] + j * stride[1] + l * stride[2];
        double acc = 0;
        for (std::int64_t t = 0; t < k; ++t) acc += taps[t] * in[base + t * stride[axis]];
        out[v] = acc;
      }
  dims = od;
  return out;
}

std::vector<double> blur(const std::vector<double>& x, std::array<std::int64_t, 3> dims,
                         const std::vector<double>& taps) {
  auto a = filter_axis(x, dims, 0, taps);
  a = filter_axis(a, dims, 1, taps);
  return filter_axis(a, dims, 2, taps);
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& ref, double range) {
  check_pair(pred, ref, "psnr");
  require(range > 0, "psnr: range must be positive");
  double se = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = double(pred.data()[i]) - ref.data()[i];
    se += d * d;
  }
  const double mse = se / double(pred.numel());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / mse);
}

double ssim3d(const Tensor& pred, const Tensor& ref, double range) {
  check_pair(pred, ref, "ssim3d");
  const auto dims = spatial(pred);
  require(spatial(ref) == dims, "ssim3d: volumes differ in geometry");
  for (auto d : dims) require(d >= 7, "ssim3d needs extents of at least 7, got " + shape_str(pred.shape()));

  std::vector<double> taps(7);
  double norm = 0;
  for (int i = 0; i < 7; ++i) {
    taps[i] = std::exp(-double((i - 3) * (i - 3)) / (2 * 1.5 * 1.5));
    norm += taps[i];
  }
  for (auto& t : taps) t /= norm;

  const std::size_t n = static_cast<std::size_t>(pred.numel());
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = pred.data()[i];
    y[i] = ref.data()[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = blur(x, dims, taps), my = blur(y, dims, taps);
  const auto sxx = blur(xx, dims, taps), syy = blur(yy, dims, taps), sxy = blur(xy, dims, taps);
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / double(mx.size());
}

double mae(const Tensor& pred, const Tensor& ref) {
  check_pair(pred, ref, "mae");
  double s = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) s += std::abs(double(pred.data()[i]) - ref.data()[i]);
  return s / double(pred.numel());
}

double ncc(const Tensor& pred, const Tensor& ref, bool* degenerate) {
  check_pair(pred, ref, "ncc");
  const auto n = double(pred.numel());
  double ma = 0, mb = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    ma += pred.data()[i];
    mb += ref.data()[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double a = pred.data()[i] - ma, b = ref.data()[i] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  const bool flat = saa == 0 || sbb == 0;
  if (degenerate) *degenerate = flat;
  if (flat) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double dice(const Mask& a, const Mask& b) {
  require(a.size() == b.size(), "dice: masks differ in size");
  std::int64_t both = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    both += (a[i] != 0) && (b[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(both) / double(na + nb);
}

Mask segment_bone(const Tensor& ct_like, double threshold) {
  Mask m(static_cast<std::size_t>(ct_like.numel()));
  for (std::int64_t i = 0; i < ct_like.numel(); ++i) m[i] = double(ct_like.data()[i]) >= threshold;
  return m;
}

Mask label_mask(const LabelVolume& labels, std::uint8_t label) {
  Mask m(labels.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.data[i] == label;
  return m;
}

}  // namespace wldm
