#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "tard/error.hpp"
#include "tard/imaging.hpp"
#include "tard/manifest.hpp"
#include "tard/parallel.hpp"
#include "tard/png_io.hpp"
#include "tard/rng.hpp"

namespace tard {

struct Point2 {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct Segment {
  Point2 a, b;
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Side-view silhouette in a unit box: x runs stern (0) to bow (1), y runs
// downward with the keel line at y = 1.
struct VesselGeometry {
  int identity_id = 0;
  VesselType vessel_type = VesselType::kWarship;
  std::vector<Point2> hull_polygon;
  std::vector<Rect> superstructure_blocks;
  std::vector<Segment> mast_segments;
  Rgb base_color;
  Rgb superstructure_color;
  double hull_length = 0;  // x extent of the hull
  double beam_ratio = 0;   // apparent length fraction seen bow-on

  friend bool operator==(const VesselGeometry&, const VesselGeometry&) = default;
};

struct ViewParams {
  double yaw_deg = 0;
  double fade = 0;
  double wave_occlusion = 0;
  double scale = 1;

  void validate() const {
    require(yaw_deg >= 0 && yaw_deg < 360, ErrorKind::kInvalidInput, "yaw_deg must lie in [0, 360)");
    require(fade >= 0 && fade <= 1, ErrorKind::kInvalidInput, "fade must lie in [0, 1]");
    require(wave_occlusion >= 0 && wave_occlusion <= 0.3, ErrorKind::kInvalidInput,
            "wave_occlusion must lie in [0, 0.3]");
    require(scale > 0 && scale <= 1.5, ErrorKind::kInvalidInput, "scale must lie in (0, 1.5]");
  }
};

struct Range {
  double lo = 0, hi = 0;
  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// Per-type shape distribution. Narrow ranges give a shared template with
// small per-identity perturbations (warships).
struct TypeProfile {
  Range hull_length;
  Range hull_depth;
  Range sheer;
  Range bow_rake;   // fraction of hull length
  Range stern_cut;  // fraction of hull length
  int blocks_min = 1;
  int blocks_max = 1;
  Range block_height;
  Range block_fill;  // block width as a fraction of its slot
  int tiers_max = 1;
  int masts_min = 0;
  int masts_max = 1;
  Range mast_top;  // y of the mast tip
  double beam_ratio = 0.25;
};

inline TypeProfile default_type_profile(VesselType type) {
  TypeProfile p;
  switch (type) {
    case VesselType::kWarship:
      p = {{0.78, 0.86}, {0.20, 0.26}, {0.01, 0.05}, {0.16, 0.26}, {0.02, 0.08}, 2, 4,
           {0.10, 0.26}, {0.45, 0.95}, 2, 1, 2, {0.06, 0.22}, 0.18};
      break;
    case VesselType::kPassenger:
      p = {{0.80, 0.92}, {0.22, 0.30}, {0.00, 0.03}, {0.08, 0.16}, {0.02, 0.06}, 1, 2,
           {0.18, 0.30}, {0.80, 0.97}, 3, 0, 1, {0.10, 0.30}, 0.22};
      break;
    case VesselType::kSailboat:
      p = {{0.45, 0.65}, {0.12, 0.18}, {0.02, 0.06}, {0.20, 0.35}, {0.05, 0.15}, 1, 1,
           {0.04, 0.08}, {0.25, 0.45}, 1, 1, 2, {0.00, 0.06}, 0.30};
      break;
    case VesselType::kHighSpeed:
      p = {{0.55, 0.75}, {0.14, 0.20}, {0.03, 0.08}, {0.25, 0.40}, {0.00, 0.04}, 1, 2,
           {0.08, 0.16}, {0.50, 0.85}, 1, 0, 1, {0.25, 0.40}, 0.30};
      break;
    case VesselType::kCargo:
      p = {{0.85, 0.95}, {0.22, 0.30}, {0.00, 0.03}, {0.06, 0.12}, {0.02, 0.05}, 3, 6,
           {0.08, 0.20}, {0.75, 0.95}, 1, 0, 2, {0.15, 0.35}, 0.20};
      break;
    case VesselType::kTug:
      p = {{0.32, 0.42}, {0.26, 0.34}, {0.03, 0.08}, {0.10, 0.20}, {0.05, 0.12}, 1, 2,
           {0.18, 0.30}, {0.50, 0.80}, 2, 1, 1, {0.10, 0.25}, 0.45};
      break;
    case VesselType::kTanker:
      p = {{0.85, 0.95}, {0.20, 0.26}, {0.00, 0.02}, {0.05, 0.10}, {0.02, 0.04}, 1, 2,
           {0.18, 0.32}, {0.30, 0.60}, 2, 0, 1, {0.20, 0.35}, 0.20};
      break;
    case VesselType::kFishing:
      p = {{0.45, 0.62}, {0.22, 0.30}, {0.04, 0.09}, {0.10, 0.22}, {0.04, 0.10}, 1, 2,
           {0.14, 0.26}, {0.40, 0.75}, 1, 1, 3, {0.05, 0.20}, 0.35};
      break;
  }
  return p;
}

namespace detail {

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline Rgb draw_hull_color(VesselType type, Rng& rng) {
  switch (type) {
    case VesselType::kWarship: {
      // low-saturation grays with a faint blue cast
      const double g = rng.uniform(100, 170);
      return {clamp_u8(g + rng.uniform(-5, 3)), clamp_u8(g + rng.uniform(-3, 3)),
              clamp_u8(g + rng.uniform(0, 8))};
    }
    case VesselType::kPassenger:
    case VesselType::kSailboat: {
      const double g = rng.uniform(215, 245);
      return {clamp_u8(g), clamp_u8(g - rng.uniform(0, 6)), clamp_u8(g - rng.uniform(0, 10))};
    }
    default: {
      static constexpr Rgb palette[] = {{150, 30, 30}, {30, 30, 35},  {30, 60, 120}, {40, 100, 60},
                                        {200, 90, 20}, {180, 160, 40}, {90, 40, 90},  {20, 90, 110}};
      const Rgb base = palette[rng.below(8)];
      return {clamp_u8(base.r + rng.uniform(-20, 20)), clamp_u8(base.g + rng.uniform(-20, 20)),
              clamp_u8(base.b + rng.uniform(-20, 20))};
    }
  }
}

inline double deck_y_at(const std::vector<Point2>& hull, double x) {
  // top chain is hull[0..2]
  const Point2& s = hull[0];
  const Point2& m = hull[1];
  const Point2& b = hull[2];
  if (x <= m.x) return s.y + (m.y - s.y) * (x - s.x) / (m.x - s.x);
  return m.y + (b.y - m.y) * (x - m.x) / (b.x - m.x);
}

}  // namespace detail

inline VesselGeometry generate_identity(std::uint64_t master_seed, int identity_id, VesselType type,
                                        const TypeProfile& profile) {
  require(identity_id >= 0, ErrorKind::kInvalidInput, "identity_id must be non-negative");
  Rng rng(derive_seed(master_seed, {0x5e55e1ULL, static_cast<std::uint64_t>(identity_id),
                                    static_cast<std::uint64_t>(type)}));
  VesselGeometry g;
  g.identity_id = identity_id;
  g.vessel_type = type;
  g.beam_ratio = profile.beam_ratio;

  const double len = profile.hull_length.draw(rng);
  const double depth = profile.hull_depth.draw(rng);
  const double sheer = profile.sheer.draw(rng);
  const double rake = profile.bow_rake.draw(rng) * len;
  const double cut = profile.stern_cut.draw(rng) * len;
  const double x0 = 0.5 - len / 2;
  const double x1 = 0.5 + len / 2;
  const double deck = 1.0 - depth;
  g.hull_length = len;
  // x-monotone top and bottom chains keep the polygon simple
  g.hull_polygon = {{x0, deck}, {0.5, deck - sheer * 0.3}, {x1, deck - sheer}, {x1 - rake, 1.0}, {x0 + cut, 1.0}};

  g.base_color = detail::draw_hull_color(type, rng);
  if (type == VesselType::kWarship) {
    g.superstructure_color = {detail::clamp_u8(g.base_color.r + 25), detail::clamp_u8(g.base_color.g + 25),
                              detail::clamp_u8(g.base_color.b + 25)};
  } else {
    const double w = rng.uniform(200, 250);
    g.superstructure_color = {detail::clamp_u8(w), detail::clamp_u8(w), detail::clamp_u8(w - rng.uniform(0, 15))};
  }

  const int n_blocks = profile.blocks_min + rng.below(profile.blocks_max - profile.blocks_min + 1);
  const double span_lo = x0 + 0.10 * len;
  const double span_hi = x1 - 0.18 * len;
  const double slot = (span_hi - span_lo) / n_blocks;
  for (int k = 0; k < n_blocks; ++k) {
    const double width = slot * profile.block_fill.draw(rng);
    const double center = span_lo + slot * (k + 0.5) + rng.uniform(-0.5, 0.5) * (slot - width);
    const double base_y = detail::deck_y_at(g.hull_polygon, center);
    double height = profile.block_height.draw(rng);
    Rect r{center - width / 2, std::max(0.02, base_y - height), center + width / 2, base_y};
    g.superstructure_blocks.push_back(r);
    const int tiers = 1 + rng.below(profile.tiers_max);
    for (int t = 1; t < tiers; ++t) {
      const double shrink = rng.uniform(0.55, 0.85);
      const double w2 = (r.x1 - r.x0) * shrink;
      const double c2 = (r.x0 + r.x1) / 2 + rng.uniform(-0.25, 0.25) * ((r.x1 - r.x0) - w2);
      height = profile.block_height.draw(rng) * 0.6;
      Rect upper{c2 - w2 / 2, std::max(0.02, r.y0 - height), c2 + w2 / 2, r.y0};
      if (upper.y1 - upper.y0 < 0.01) break;
      g.superstructure_blocks.push_back(upper);
      r = upper;
    }
  }

  const int n_masts = profile.masts_min + rng.below(profile.masts_max - profile.masts_min + 1);
  for (int k = 0; k < n_masts; ++k) {
    const double x = rng.uniform(x0 + 0.2 * len, x1 - 0.25 * len);
    double base_y = detail::deck_y_at(g.hull_polygon, x);
    for (const Rect& b : g.superstructure_blocks)
      if (x >= b.x0 && x <= b.x1) base_y = std::min(base_y, b.y0);
    const double top = std::min(profile.mast_top.draw(rng), base_y - 0.02);
    g.mast_segments.push_back({{x, base_y}, {x, std::max(0.0, top)}});
  }
  return g;
}

inline VesselGeometry generate_identity(std::uint64_t master_seed, int identity_id, VesselType type) {
  return generate_identity(master_seed, identity_id, type, default_type_profile(type));
}

inline VesselGeometry generate_identity(std::uint64_t master_seed, int identity_id, std::string_view type) {
  return generate_identity(master_seed, identity_id, parse_vessel_type(type));
}

struct PixelBox {
  int y0 = 0, y1 = -1, x0 = 0, x1 = -1;  // inclusive bounds
  bool empty() const { return y1 < y0 || x1 < x0; }
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
};

// Maps the geometry's unit box onto a frame for a given view.
class ViewTransform {
 public:
  ViewTransform(const VesselGeometry& g, const ViewParams& view, int out_h, int out_w)
      : out_h_(out_h), out_w_(out_w) {
    const double c = std::cos(view.yaw_deg * std::numbers::pi / 180.0);
    const double fx = g.beam_ratio + (1.0 - g.beam_ratio) * std::abs(c);
    sign_ = c < 0 ? -1.0 : 1.0;
    box_w_ = out_w * 0.95 * view.scale * fx;
    box_h_ = out_h * 0.55 * view.scale;
    waterline_ = out_h * 0.82;
  }

  double px(double x) const { return out_w_ / 2.0 + (x - 0.5) * box_w_ * sign_; }
  double py(double y) const { return waterline_ - (1.0 - y) * box_h_; }
  double ux(double px) const { return 0.5 + (px - out_w_ / 2.0) / (box_w_ * sign_); }
  double uy(double py) const { return 1.0 - (waterline_ - py) / box_h_; }

 private:
  int out_h_, out_w_;
  double sign_ = 1, box_w_ = 0, box_h_ = 0, waterline_ = 0;
};

namespace detail {

inline bool point_in_polygon(const std::vector<Point2>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

inline Rgb background_color(int y, int out_h) {
  const double horizon = out_h * 0.55;
  if (y < horizon) {
    const double t = y / horizon;
    return {clamp_u8(165 + 45 * t), clamp_u8(195 + 30 * t), clamp_u8(228 + 12 * t)};
  }
  const double t = (y - horizon) / std::max(1.0, out_h - horizon);
  return {clamp_u8(55 - 25 * t), clamp_u8(95 - 35 * t), clamp_u8(140 - 40 * t)};
}

enum : std::uint8_t { kMaskSky = 0, kMaskHull = 1, kMaskSuper = 2, kMaskMast = 3 };

struct Raster {
  Image image;
  std::vector<std::uint8_t> mask;  // one label per pixel, before occlusion
};

}  // namespace detail

// Pixel rows/columns covered by the hull polygon in an unoccluded render.
inline PixelBox hull_pixel_box(const VesselGeometry& g, const ViewParams& view, int out_h, int out_w) {
  const ViewTransform tf(g, view, out_h, out_w);
  PixelBox box{out_h, -1, out_w, -1};
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      if (detail::point_in_polygon(g.hull_polygon, tf.ux(x + 0.5), tf.uy(y + 0.5))) {
        box.y0 = std::min(box.y0, y);
        box.y1 = std::max(box.y1, y);
        box.x0 = std::min(box.x0, x);
        box.x1 = std::max(box.x1, x);
      }
  return box;
}

namespace detail {

inline Raster rasterize(const VesselGeometry& g, const ViewParams& view, int out_h, int out_w) {
  const ViewTransform tf(g, view, out_h, out_w);
  Raster r{Image(out_h, out_w), std::vector<std::uint8_t>(static_cast<std::size_t>(out_h) * out_w, kMaskSky)};
  auto put = [&](int y, int x, Rgb c, std::uint8_t label) {
    r.image.at(y, x, 0) = c.r;
    r.image.at(y, x, 1) = c.g;
    r.image.at(y, x, 2) = c.b;
    r.mask[static_cast<std::size_t>(y) * out_w + x] = label;
  };
  for (int y = 0; y < out_h; ++y) {
    const Rgb bg = background_color(y, out_h);
    for (int x = 0; x < out_w; ++x) {
      const double ux = tf.ux(x + 0.5);
      const double uy = tf.uy(y + 0.5);
      put(y, x, bg, kMaskSky);
      if (point_in_polygon(g.hull_polygon, ux, uy)) {
        put(y, x, g.base_color, kMaskHull);
        continue;
      }
      for (const Rect& b : g.superstructure_blocks) {
        if (ux >= std::min(b.x0, b.x1) && ux <= std::max(b.x0, b.x1) && uy >= b.y0 && uy <= b.y1) {
          put(y, x, g.superstructure_color, kMaskSuper);
          break;
        }
      }
    }
  }
  const Rgb mast{detail::clamp_u8(g.base_color.r * 0.45), detail::clamp_u8(g.base_color.g * 0.45),
                 detail::clamp_u8(g.base_color.b * 0.45)};
  const int thickness = std::max(1, out_w / 128);
  for (const Segment& s : g.mast_segments) {
    const int cx = static_cast<int>(std::floor(tf.px(s.a.x)));
    const int ya = static_cast<int>(std::floor(tf.py(std::min(s.a.y, s.b.y))));
    const int yb = static_cast<int>(std::floor(tf.py(std::max(s.a.y, s.b.y))));
    for (int y = std::max(0, ya); y <= std::min(out_h - 1, yb); ++y)
      for (int x = cx; x < cx + thickness; ++x)
        if (x >= 0 && x < out_w && r.mask[static_cast<std::size_t>(y) * out_w + x] != kMaskHull)
          put(y, x, mast, kMaskMast);
  }
  return r;
}

inline void apply_view_effects(Raster& r, const VesselGeometry& g, const ViewParams& view) {
  const int h = r.image.height;
  const int w = r.image.width;
  if (view.wave_occlusion > 0) {
    const PixelBox hb = hull_pixel_box(g, view, h, w);
    if (!hb.empty()) {
      const int band = static_cast<int>(std::ceil(view.wave_occlusion * hb.height()));
      for (int y = hb.y1 - band + 1; y <= hb.y1; ++y) {
        if (y < 0 || y >= h) continue;
        const Rgb sea = background_color(y, h);
        for (int x = 0; x < w; ++x) {
          r.image.at(y, x, 0) = sea.r;
          r.image.at(y, x, 1) = sea.g;
          r.image.at(y, x, 2) = sea.b;
        }
      }
    }
  }
  if (view.fade > 0)
    for (auto& v : r.image.rgb) v = clamp_u8((1.0 - view.fade) * v + view.fade * 255.0);
}

}  // namespace detail

// Renders the silhouette over a sky/sea gradient. Yaw shortens the apparent
// hull length toward beam_ratio at bow-on views; fade hazes the whole frame
// toward white; wave_occlusion overdraws the lowest fraction of the hull's
// pixel box with sea color.
inline ImageSample render(const VesselGeometry& geometry, const ViewParams& view, int out_h, int out_w) {
  require(out_h >= 16 && out_w >= 16, ErrorKind::kInvalidInput, "render size must be at least 16x16");
  view.validate();
  require(!geometry.hull_polygon.empty() && !geometry.superstructure_blocks.empty(), ErrorKind::kInvalidInput,
          "geometry needs a hull and at least one superstructure block");
  detail::Raster r = detail::rasterize(geometry, view, out_h, out_w);
  detail::apply_view_effects(r, geometry, view);
  ImageSample s;
  s.pixels = std::move(r.image);
  s.identity_id = geometry.identity_id;
  s.vessel_type = geometry.vessel_type;
  return s;
}

// Bounding box of all vessel pixels (hull, superstructure, masts), ignoring
// haze and occlusion.
inline PixelBox silhouette_box(const VesselGeometry& g, const ViewParams& view, int out_h, int out_w) {
  const detail::Raster r = detail::rasterize(g, view, out_h, out_w);
  PixelBox box{out_h, -1, out_w, -1};
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      if (r.mask[static_cast<std::size_t>(y) * out_w + x] != detail::kMaskSky) {
        box.y0 = std::min(box.y0, y);
        box.y1 = std::max(box.y1, y);
        box.x0 = std::min(box.x0, x);
        box.x1 = std::max(box.x1, x);
      }
  return box;
}

inline Image crop(const Image& img, const PixelBox& box) {
  Image out(box.height(), box.width());
  for (int y = 0; y < box.height(); ++y)
    for (int x = 0; x < box.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(box.y0 + y, box.x0 + x, c);
  return out;
}

struct DatasetConfig {
  std::uint64_t seed = 7;
  // Identity counts per type.
  std::map<VesselType, int> ids_per_type = {
      {VesselType::kWarship, 24}, {VesselType::kPassenger, 23}, {VesselType::kSailboat, 22},
      {VesselType::kHighSpeed, 21}, {VesselType::kCargo, 22},  {VesselType::kTug, 6},
      {VesselType::kTanker, 23},  {VesselType::kFishing, 22}};
  int images_per_id = 16;
  std::filesystem::path out_dir = "data";
  int frame_height = 96;
  int frame_width = 192;
  VesselType target_type = VesselType::kWarship;
  double train_fraction = 0.5;
  double query_fraction = 0.2;
  bool crop_to_vessel = true;
  // Frame every view with the width of the vessel's broadside silhouette, so
  // apparent height does not depend on yaw once letterboxed.
  bool broadside_framing = true;
  double crop_margin = 0.08;
  Range yaw_offset{-90.0, 90.0};  // half circle centred on broadside
  Range fade{0.0, 0.5};
  Range wave_occlusion{0.0, 0.2};
  Range scale{0.85, 1.0};
  int threads = 0;
};

struct GeneratedDataset {
  std::filesystem::path manifest_path;
  std::vector<ManifestRecord> records;
};

inline ViewParams draw_view(const DatasetConfig& cfg, std::uint64_t seed, int identity_id, int view_index) {
  Rng rng(derive_seed(seed, {0x71e3ULL, static_cast<std::uint64_t>(identity_id),
                             static_cast<std::uint64_t>(view_index)}));
  ViewParams v;
  double yaw = cfg.yaw_offset.draw(rng);
  if (yaw < 0) yaw += 360.0;
  v.yaw_deg = yaw >= 360.0 ? 0.0 : yaw;
  v.fade = cfg.fade.draw(rng);
  v.wave_occlusion = cfg.wave_occlusion.draw(rng);
  v.scale = cfg.scale.draw(rng);
  return v;
}

// Splits each target identity's views into train/test halves and tags 20%
// (by default) of the test images as query, allocated by largest remainder
// across identities so that every identity keeps at least one gallery image.
inline void assign_target_splits(std::vector<ManifestRecord>& records, const std::vector<std::size_t>& target_rows,
                                 const DatasetConfig& cfg) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t row : target_rows) by_id[records[row].id].push_back(row);
  Rng rng(derive_seed(cfg.seed, {0x5711ULL}));
  std::vector<std::pair<int, std::vector<std::size_t>>> test_sets;
  std::size_t total_test = 0;
  for (auto& [id, rows] : by_id) {
    for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.below(static_cast<std::uint64_t>(i))]);
    const std::size_t n_train = static_cast<std::size_t>(std::floor(rows.size() * cfg.train_fraction));
    std::vector<std::size_t> test;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i < n_train) {
        records[rows[i]].split = Split::kTrain;
      } else {
        records[rows[i]].split = Split::kGallery;
        test.push_back(rows[i]);
      }
    }
    total_test += test.size();
    test_sets.emplace_back(id, std::move(test));
  }
  const auto target_queries = static_cast<std::size_t>(std::lround(cfg.query_fraction * total_test));
  std::vector<std::size_t> quota(test_sets.size());
  std::vector<double> remainder(test_sets.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < test_sets.size(); ++k) {
    const std::size_t n = test_sets[k].second.size();
    const double exact = cfg.query_fraction * n;
    quota[k] = n == 0 ? 0 : std::min(n - 1, static_cast<std::size_t>(std::floor(exact)));
    remainder[k] = exact - std::floor(exact) + 1e-9 * rng.uniform();
    assigned += quota[k];
  }
  std::vector<std::size_t> order(test_sets.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k : order) {
    if (assigned >= target_queries) break;
    if (quota[k] + 1 < test_sets[k].second.size()) {
      ++quota[k];
      ++assigned;
    }
  }
  for (std::size_t k = 0; k < test_sets.size(); ++k)
    for (std::size_t i = 0; i < quota[k]; ++i) records[test_sets[k].second[i]].split = Split::kQuery;
}

inline GeneratedDataset generate_dataset(const DatasetConfig& cfg) {
  require(cfg.images_per_id >= 1, ErrorKind::kInvalidInput, "images_per_id must be positive");
  require(cfg.query_fraction >= 0 && cfg.query_fraction < 1, ErrorKind::kInvalidInput,
          "query_fraction must lie in [0, 1)");
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir / "images", ec);
  if (ec) fail(ErrorKind::kIo, "cannot create output directory '" + cfg.out_dir.string() + "': " + ec.message());

  struct Job {
    int id;
    VesselType type;
    int view;
  };
  std::vector<Job> jobs;
  std::vector<ManifestRecord> records;
  std::vector<std::size_t> target_rows;
  int next_id = 0;
  for (VesselType type : kAllVesselTypes) {
    auto it = cfg.ids_per_type.find(type);
    if (it == cfg.ids_per_type.end() || it->second <= 0) continue;
    std::filesystem::create_directories(cfg.out_dir / "images" / std::string(to_string(type)), ec);
    if (ec) fail(ErrorKind::kIo, "cannot create image directory: " + ec.message());
    for (int k = 0; k < it->second; ++k, ++next_id) {
      for (int v = 0; v < cfg.images_per_id; ++v) {
        jobs.push_back({next_id, type, v});
        ManifestRecord r;
        char name[64];
        std::snprintf(name, sizeof(name), "%04d_%02d.png", next_id, v);
        r.path = "images/" + std::string(to_string(type)) + "/" + name;
        r.id = next_id;
        r.type = type;
        r.split = Split::kTrain;
        if (type == cfg.target_type) target_rows.push_back(records.size());
        records.push_back(std::move(r));
      }
    }
  }
  assign_target_splits(records, target_rows, cfg);

  parallel_for(
      jobs.size(),
      [&](std::size_t i) {
        const Job& job = jobs[i];
        const VesselGeometry geom = generate_identity(cfg.seed, job.id, job.type);
        const ViewParams view = draw_view(cfg, cfg.seed, job.id, job.view);
        ImageSample s = render(geom, view, cfg.frame_height, cfg.frame_width);
        Image out = std::move(s.pixels);
        if (cfg.crop_to_vessel) {
          PixelBox box = silhouette_box(geom, view, cfg.frame_height, cfg.frame_width);
          if (cfg.broadside_framing) {
            ViewParams side = view;
            side.yaw_deg = 0;
            const PixelBox wide = silhouette_box(geom, side, cfg.frame_height, cfg.frame_width);
            const int centre = (box.x0 + box.x1) / 2;
            const int half = std::max(box.width(), wide.width()) / 2;
            box.x0 = std::max(0, centre - half);
            box.x1 = std::min(cfg.frame_width - 1, centre + half);
          }
          const int my = static_cast<int>(std::ceil(box.height() * cfg.crop_margin));
          const int mx = static_cast<int>(std::ceil(box.width() * cfg.crop_margin));
          box = {std::max(0, box.y0 - my), std::min(cfg.frame_height - 1, box.y1 + my), std::max(0, box.x0 - mx),
                 std::min(cfg.frame_width - 1, box.x1 + mx)};
          out = crop(out, box);
        }
        write_png(cfg.out_dir / records[i].path, out);
      },
      cfg.threads);

  GeneratedDataset result;
  result.manifest_path = cfg.out_dir / "manifest.jsonl";
  write_manifest(result.manifest_path, records);
  result.records = std::move(records);
  return result;
}

}  // namespace tard
