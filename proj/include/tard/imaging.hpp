#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "tard/error.hpp"
#include "tard/rng.hpp"

namespace tard {

enum class VesselType { kWarship, kPassenger, kSailboat, kHighSpeed, kCargo, kTug, kTanker, kFishing };

inline constexpr std::array<VesselType, 8> kAllVesselTypes = {
    VesselType::kWarship, VesselType::kPassenger, VesselType::kSailboat, VesselType::kHighSpeed,
    VesselType::kCargo,   VesselType::kTug,       VesselType::kTanker,   VesselType::kFishing};

inline std::string_view to_string(VesselType t) {
  switch (t) {
    case VesselType::kWarship: return "warship";
    case VesselType::kPassenger: return "passenger";
    case VesselType::kSailboat: return "sailboat";
    case VesselType::kHighSpeed: return "high-speed";
    case VesselType::kCargo: return "cargo";
    case VesselType::kTug: return "tug";
    case VesselType::kTanker: return "tanker";
    case VesselType::kFishing: return "fishing";
  }
  return "unknown";
}

inline VesselType parse_vessel_type(std::string_view name) {
  for (VesselType t : kAllVesselTypes)
    if (to_string(t) == name) return t;
  fail(ErrorKind::kInvalidInput, "unknown vessel type '" + std::string(name) + "'");
}

enum class Split { kTrain, kGallery, kQuery };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kGallery: return "gallery";
    case Split::kQuery: return "query";
  }
  return "unknown";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "gallery") return Split::kGallery;
  if (name == "query") return Split::kQuery;
  fail(ErrorKind::kInvalidInput, "unknown split '" + std::string(name) + "'");
}

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return height <= 0 || width <= 0; }
};

struct ImageSample {
  Image pixels;
  int identity_id = 0;
  VesselType vessel_type = VesselType::kWarship;
  Split split = Split::kTrain;
  std::string source_path;
};

// Network input: 3 x height x width, channel-planar, values in [0, 1].
struct ModelInput {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ModelInput() = default;
  ModelInput(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, fill) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

inline constexpr double kGrayFill = 128.0 / 255.0;

struct Resolution {
  int height = 512;
  int width = 1024;

  static constexpr Resolution desk() { return {64, 128}; }
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

struct SssParams {
  double angle_min_deg = -10.0;
  double angle_max_deg = 10.0;
  double fill = kGrayFill;

  void validate() const {
    require(angle_min_deg <= angle_max_deg, ErrorKind::kInvalidInput,
            "sss angle_min_deg must not exceed angle_max_deg");
    require(angle_min_deg >= -45.0 && angle_max_deg <= 45.0, ErrorKind::kInvalidInput,
            "sss angles must lie within [-45, 45] degrees");
    require(fill >= 0.0 && fill <= 1.0, ErrorKind::kInvalidInput, "sss fill must lie in [0, 1]");
  }
};

enum class Resample { kNearest, kBilinear };

// Where the source image sits inside the gray-padded canvas that has the
// target aspect ratio.
struct LetterboxGeometry {
  int padded_height = 0;
  int padded_width = 0;
  int offset_y = 0;
  int offset_x = 0;
};

inline LetterboxGeometry letterbox_geometry(int height, int width, int target_h, int target_w) {
  require(height >= 1 && width >= 1, ErrorKind::kInvalidInput, "zero-area image");
  require(target_h >= 8 && target_w >= 8, ErrorKind::kInvalidInput, "target resolution must be at least 8x8");
  LetterboxGeometry g{height, width, 0, 0};
  const long long lhs = static_cast<long long>(width) * target_h;
  const long long rhs = static_cast<long long>(height) * target_w;
  if (lhs < rhs) {
    g.padded_width = static_cast<int>(std::lround(static_cast<double>(height) * target_w / target_h));
    g.padded_width = std::max(g.padded_width, width);
    g.offset_x = (g.padded_width - width) / 2;
  } else if (lhs > rhs) {
    g.padded_height = static_cast<int>(std::lround(static_cast<double>(width) * target_h / target_w));
    g.padded_height = std::max(g.padded_height, height);
    g.offset_y = (g.padded_height - height) / 2;
  }
  return g;
}

namespace detail {

inline double padded_sample(const Image& img, const LetterboxGeometry& g, int py, int px, int c) {
  py = std::clamp(py, 0, g.padded_height - 1);
  px = std::clamp(px, 0, g.padded_width - 1);
  const int y = py - g.offset_y;
  const int x = px - g.offset_x;
  if (y < 0 || y >= img.height || x < 0 || x >= img.width) return 128.0;
  return img.at(y, x, c);
}

}  // namespace detail

// Letterboxes the image with mid-gray bars to the target aspect ratio, then
// resamples to target_h x target_w and scales intensities to [0, 1].
inline ModelInput aspect_normalize(const Image& image, int target_h, int target_w,
                                   Resample mode = Resample::kNearest) {
  require(!image.empty(), ErrorKind::kInvalidInput, "zero-area image");
  const LetterboxGeometry g = letterbox_geometry(image.height, image.width, target_h, target_w);
  ModelInput out(target_h, target_w);
  const double sy = static_cast<double>(g.padded_height) / target_h;
  const double sx = static_cast<double>(g.padded_width) / target_w;
  for (int ty = 0; ty < target_h; ++ty) {
    for (int tx = 0; tx < target_w; ++tx) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (mode == Resample::kNearest) {
          const int py = std::min(static_cast<int>(std::floor((ty + 0.5) * sy)), g.padded_height - 1);
          const int px = std::min(static_cast<int>(std::floor((tx + 0.5) * sx)), g.padded_width - 1);
          v = detail::padded_sample(image, g, py, px, c);
        } else {
          const double fy = (ty + 0.5) * sy - 0.5;
          const double fx = (tx + 0.5) * sx - 0.5;
          const int y0 = static_cast<int>(std::floor(fy));
          const int x0 = static_cast<int>(std::floor(fx));
          const double wy = fy - y0;
          const double wx = fx - x0;
          v = (1 - wy) * ((1 - wx) * detail::padded_sample(image, g, y0, x0, c) +
                          wx * detail::padded_sample(image, g, y0, x0 + 1, c)) +
              wy * ((1 - wx) * detail::padded_sample(image, g, y0 + 1, x0, c) +
                    wx * detail::padded_sample(image, g, y0 + 1, x0 + 1, c));
        }
        out.at(c, ty, tx) = std::clamp(v / 255.0, 0.0, 1.0);
      }
    }
  }
  return out;
}

inline ModelInput aspect_normalize(const ImageSample& sample, int target_h, int target_w,
                                   Resample mode = Resample::kNearest) {
  return aspect_normalize(sample.pixels, target_h, target_w, mode);
}

inline ModelInput aspect_normalize(const ImageSample& sample, Resolution res = {},
                                   Resample mode = Resample::kNearest) {
  return aspect_normalize(sample.pixels, res.height, res.width, mode);
}

// Sea-sway simulation: rotates about the image center by angle_deg using
// inverse nearest-neighbor mapping. Content leaving the frame is dropped and
// exposed corners take params.fill. Positive angles rotate clockwise on
// screen (x right, y down).
inline ModelInput sss_augment(const ModelInput& input, const SssParams& params, double angle_deg) {
  params.validate();
  if (!(angle_deg >= params.angle_min_deg && angle_deg <= params.angle_max_deg))
    fail(ErrorKind::kRange, "sss angle " + std::to_string(angle_deg) + " outside [" +
                                std::to_string(params.angle_min_deg) + ", " +
                                std::to_string(params.angle_max_deg) + "]");
  const int h = input.height;
  const int w = input.width;
  ModelInput out(h, w, params.fill);
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const int sx = static_cast<int>(std::floor(cx + cs * dx + sn * dy + 0.5));
      const int sy = static_cast<int>(std::floor(cy - sn * dx + cs * dy + 0.5));
      if (sx < 0 || sx >= w || sy < 0 || sy >= h) continue;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = input.at(c, sy, sx);
    }
  }
  return out;
}

inline double sample_sss_angle(Rng& rng, const SssParams& params = {}) {
  params.validate();
  if (params.angle_min_deg == params.angle_max_deg) return params.angle_min_deg;
  return rng.uniform(params.angle_min_deg, params.angle_max_deg);
}

}  // namespace tard
