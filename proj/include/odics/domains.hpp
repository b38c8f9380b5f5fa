#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "odics/error.hpp"
#include "odics/rng.hpp"
#include "odics/tensor.hpp"

namespace odics {

inline constexpr std::int32_t kIgnoreIndex = 255;

struct LabelSpaceSpec {
  std::vector<std::string> names;  // id == position
  std::int32_t ignore_index = kIgnoreIndex;

  std::size_t size() const noexcept { return names.size(); }

  std::int32_t id_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<std::int32_t>(i);
    throw DataError("unknown class name '" + name + "'");
  }

  bool contains(std::int32_t id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < names.size();
  }

  void validate() const {
    require(names.size() >= 2, "label space needs at least two classes");
    std::unordered_set<std::string> seen(names.begin(), names.end());
    require(seen.size() == names.size(), "label space names must be unique");
    require(!contains(ignore_index), "ignore_index must lie outside the class id range");
  }

  friend bool operator==(const LabelSpaceSpec&, const LabelSpaceSpec&) = default;
};

/// The 19-class target space shared by every real domain.
inline LabelSpaceSpec target_label_space() {
  return {{"road", "sidewalk", "building", "wall", "fence", "pole", "traffic light", "traffic sign",
           "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "train",
           "motorcycle", "bicycle"},
          kIgnoreIndex};
}

using Rgb = std::array<double, 3>;

enum class Weather { kNone, kFog, kRain, kSnow };

struct WeatherOverlay {
  Weather kind = Weather::kNone;
  double strength = 0.0;
};

/// Alternative look of a class: rendered with another color/pattern but
/// labeled with the owning class.
struct Appearance {
  Rgb color;
  int texture_id = 0;
  double weight = 1.0;  // relative to the default look, which has weight 1
};

struct DomainSpec {
  std::string name;
  LabelSpaceSpec label_space;
  std::vector<Rgb> palette;                    // per class, in [0,1]^3
  std::vector<int> texture_ids;                // per class pattern
  std::vector<double> class_frequency_weights;  // per class, nonnegative
  std::vector<std::vector<Appearance>> appearance_variants;  // per class or empty
  double texture_amplitude = 0.12;
  double texture_noise_sigma = 0.03;
  double palette_jitter = 0.02;  // per-sample color randomization
  std::pair<int, int> shape_count_range{3, 7};
  std::vector<WeatherOverlay> weather;  // one option drawn per sample; empty means clear
  double camera_jitter = 0.1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed_namespace = 0;

  void validate() const {
    label_space.validate();
    const std::size_t c = label_space.size();
    require(palette.size() == c, name + ": palette size differs from label space");
    require(texture_ids.size() == c, name + ": texture table size differs from label space");
    require(class_frequency_weights.size() == c, name + ": weight count differs from label space");
    std::size_t positive = 0;
    for (double w : class_frequency_weights) {
      require(w >= 0.0, name + ": negative class weight");
      positive += w > 0.0;
    }
    require(positive >= 1, name + ": no positive class weight");
    for (const auto& rgb : palette)
      for (double v : rgb) require(v >= 0.0 && v <= 1.0, name + ": palette color outside [0,1]");
    require(appearance_variants.empty() || appearance_variants.size() == c,
            name + ": appearance table size differs from label space");
    for (const auto& vs : appearance_variants)
      for (const auto& a : vs) {
        require(a.weight > 0.0, name + ": appearance weight must be positive");
        for (double v : a.color) require(v >= 0.0 && v <= 1.0, name + ": appearance color outside [0,1]");
      }
    require(texture_noise_sigma >= 0.0 && palette_jitter >= 0.0, name + ": negative noise");
    require(shape_count_range.first >= 0 && shape_count_range.first <= shape_count_range.second,
            name + ": bad shape count range");
    require(height >= 4 && width >= 4, name + ": canvas too small");
  }
};

/// One densely labeled image: 3×H×W image in [0,1], H×W mask.
struct LabeledSample {
  Tensor<double> image;
  LabelTensor mask;
  std::string domain_tag;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Textures

inline constexpr int kTextureCount = 24;

/// Periodic luminance pattern in [-1, 1] evaluated at integer pixel coordinates.
inline double texture_value(int id, std::int64_t x, std::int64_t y) {
  struct Wave {
    double fx, fy;
  };
  // Distinct plane waves; equivalent (sign-flipped) frequency pairs removed.
  static constexpr std::array<Wave, 19> kWaves{{{0.0, 0.5},
                                                {0.5, 0.0},
                                                {0.5, 0.5},
                                                {0.0, 1.0 / 3},
                                                {1.0 / 3, 0.0},
                                                {0.25, 0.25},
                                                {0.25, -0.25},
                                                {1.0 / 3, 1.0 / 3},
                                                {1.0 / 3, -1.0 / 3},
                                                {0.0, 0.25},
                                                {0.25, 0.0},
                                                {0.5, 0.25},
                                                {0.25, 0.5},
                                                {0.5, 1.0 / 3},
                                                {1.0 / 3, 0.5},
                                                {0.25, 1.0 / 3},
                                                {1.0 / 3, 0.25},
                                                {0.25, -1.0 / 3},
                                                {1.0 / 3, -0.25}}};
  const int k = ((id % kTextureCount) + kTextureCount) % kTextureCount;
  if (k == 0) return 0.0;
  if (k <= static_cast<int>(kWaves.size())) {
    const auto& w = kWaves[static_cast<std::size_t>(k - 1)];
    return std::cos(2.0 * std::numbers::pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)));
  }
  const auto ux = static_cast<std::uint64_t>(x), uy = static_cast<std::uint64_t>(y);
  switch (k) {
    case 20: return (((ux / 2) + (uy / 2)) % 2) ? 1.0 : -1.0;   // 2px checker
    case 21: return (((ux / 3) + (uy / 3)) % 2) ? 1.0 : -1.0;   // 3px checker
    case 22: return (ux % 3 == 0 && uy % 3 == 0) ? 1.0 : -0.25;  // dots
    default: return (ux % 4 < 2 && uy % 4 < 2) ? 1.0 : -1.0;    // blocks
  }
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Bilinear upsampling of a coarse random grid; values in [0,1].
inline std::vector<double> smooth_field(Rng& rng, std::size_t h, std::size_t w, std::size_t grid = 4) {
  std::vector<double> coarse((grid + 1) * (grid + 1));
  for (auto& v : coarse) v = rng.uniform();
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double gy = static_cast<double>(y) / static_cast<double>(h) * static_cast<double>(grid);
    const auto iy = static_cast<std::size_t>(gy);
    const double fy = gy - static_cast<double>(iy);
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(w) * static_cast<double>(grid);
      const auto ix = static_cast<std::size_t>(gx);
      const double fx = gx - static_cast<double>(ix);
      const auto at = [&](std::size_t yy, std::size_t xx) { return coarse[yy * (grid + 1) + xx]; };
      out[y * w + x] = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
                       fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
    }
  }
  return out;
}

enum class ShapeKind { kRect, kCircle, kTriangle };

inline bool inside_shape(ShapeKind kind, double cx, double cy, double r, double x, double y) {
  const double dx = x - cx, dy = y - cy;
  switch (kind) {
    case ShapeKind::kRect: return std::abs(dx) <= r && std::abs(dy) <= 0.7 * r;
    case ShapeKind::kCircle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::kTriangle:
      // Upright isosceles triangle with apex at (cx, cy - r) and base at cy + r.
      if (dy < -r || dy > r) return false;
      return std::abs(dx) <= (dy + r) * 0.5;
  }
  return false;
}

}  // namespace detail

/// Renders one scene. Pure function of (spec, sample_seed): three horizontal
/// background layers and K foreground shapes, every region's class drawn
/// from class_frequency_weights, then texture, noise and weather.
inline LabeledSample generate_sample(const DomainSpec& spec, std::uint64_t sample_seed) {
  const std::size_t h = spec.height, w = spec.width;
  Rng rng(hash_combine(spec.seed_namespace, sample_seed));

  // Looks: one per class, then every appearance variant in table order.
  std::vector<Rgb> colors = spec.palette;
  std::vector<int> textures = spec.texture_ids;
  std::vector<std::size_t> first_variant(spec.appearance_variants.size());
  for (std::size_t c = 0; c < spec.appearance_variants.size(); ++c) {
    first_variant[c] = colors.size();
    for (const auto& a : spec.appearance_variants[c]) {
      colors.push_back(a.color);
      textures.push_back(a.texture_id);
    }
  }
  for (auto& rgb : colors)
    for (auto& v : rgb) v = detail::clamp01(v + spec.palette_jitter * rng.normal());

  // Classes without variants take their default look without a draw.
  auto pick_look = [&](std::int32_t cls) -> std::int32_t {
    const auto c = static_cast<std::size_t>(cls);
    if (c >= spec.appearance_variants.size() || spec.appearance_variants[c].empty()) return cls;
    std::vector<double> wts{1.0};
    for (const auto& a : spec.appearance_variants[c]) wts.push_back(a.weight);
    const auto k = rng.categorical(wts);
    return k == 0 ? cls : static_cast<std::int32_t>(first_variant[c] + k - 1);
  };

  LabelTensor mask({h, w});
  std::vector<std::int32_t> look(h * w);
  // Background layers with jittered boundaries.
  const double jitter = spec.camera_jitter;
  const double b1 = (1.0 / 3 + jitter * (rng.uniform() - 0.5)) * static_cast<double>(h);
  const double b2 = (2.0 / 3 + jitter * (rng.uniform() - 0.5)) * static_cast<double>(h);
  std::array<std::int32_t, 3> layer{}, layer_look{};
  for (std::size_t i = 0; i < 3; ++i) {
    layer[i] = static_cast<std::int32_t>(rng.categorical(spec.class_frequency_weights));
    layer_look[i] = pick_look(layer[i]);
  }
  for (std::size_t y = 0; y < h; ++y) {
    const double yc = static_cast<double>(y) + 0.5;
    const std::size_t li = yc < b1 ? 0 : (yc < b2 ? 1 : 2);
    for (std::size_t x = 0; x < w; ++x) {
      mask[y * w + x] = layer[li];
      look[y * w + x] = layer_look[li];
    }
  }

  const auto shapes = rng.uniform_int(spec.shape_count_range.first, spec.shape_count_range.second);
  const double extent = static_cast<double>(std::min(h, w));
  for (std::int64_t s = 0; s < shapes; ++s) {
    const auto cls = static_cast<std::int32_t>(rng.categorical(spec.class_frequency_weights));
    const auto cls_look = pick_look(cls);
    const auto kind = static_cast<detail::ShapeKind>(rng.uniform_int(0, 2));
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double r = rng.uniform(0.12, 0.3) * extent;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (detail::inside_shape(kind, cx, cy, r, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
          mask[y * w + x] = cls;
          look[y * w + x] = cls_look;
        }
  }

  const std::int64_t ox = rng.uniform_int(0, 11), oy = rng.uniform_int(0, 11);
  Tensor<double> image({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto cls = static_cast<std::size_t>(look[y * w + x]);
      const double tex = spec.texture_amplitude *
                         texture_value(textures[cls], static_cast<std::int64_t>(x) + ox,
                                       static_cast<std::int64_t>(y) + oy);
      for (std::size_t ch = 0; ch < 3; ++ch)
        image[ch * plane + y * w + x] = colors[cls][ch] + tex + spec.texture_noise_sigma * rng.normal();
    }
  }

  // Weather: one option per sample. The random draws below do not depend on
  // the palette, so recoloring a class only changes that class's pixels.
  if (!spec.weather.empty()) {
    const auto& wo = spec.weather[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.weather.size()) - 1))];
    const auto field = detail::smooth_field(rng, h, w);
    std::vector<double> drop(plane);
    for (auto& d : drop) d = rng.uniform();
    const double slope = rng.uniform(0.3, 0.8);
    const std::int64_t period = rng.uniform_int(3, 6);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t p = y * w + x;
        const double s = wo.strength;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double& v = image[ch * plane + p];
          switch (wo.kind) {
            case Weather::kNone: break;
            case Weather::kFog: {
              const double a = s * (0.5 + 0.5 * field[p]);
              v = (1 - a) * v + a * 0.75;
              break;
            }
            case Weather::kRain: {
              v -= 0.15 * s * field[p];
              const auto lane = static_cast<std::int64_t>(std::floor(static_cast<double>(x) + slope * static_cast<double>(y)));
              if (lane % period == 0 && drop[p] < 0.6 * s) v = ch == 2 ? 0.85 : 0.7;
              break;
            }
            case Weather::kSnow:
              v += 0.12 * s * field[p];
              if (drop[p] < 0.1 * s) v = 0.95;
              break;
          }
        }
      }
    }
  }
  for (auto& v : image.values()) v = detail::clamp01(v);
  return {std::move(image), std::move(mask), spec.name, sample_seed};
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline Rgb rgb255(int r, int g, int b) { return {r / 255.0, g / 255.0, b / 255.0}; }

/// Reference colors of the 19 target classes.
inline std::vector<Rgb> canonical_palette() {
  return {rgb255(128, 64, 128), rgb255(244, 35, 232), rgb255(70, 70, 70),    rgb255(102, 102, 156),
          rgb255(190, 153, 153), rgb255(153, 153, 153), rgb255(250, 170, 30), rgb255(220, 220, 0),
          rgb255(107, 142, 35),  rgb255(152, 251, 152), rgb255(70, 130, 180), rgb255(220, 20, 60),
          rgb255(255, 0, 0),     rgb255(0, 0, 142),     rgb255(0, 0, 70),     rgb255(0, 60, 100),
          rgb255(0, 80, 100),    rgb255(0, 0, 230),     rgb255(119, 11, 32)};
}

inline std::vector<double> base_class_weights() {
  // road sidewalk building wall fence pole tlight tsign veg terrain sky
  // person rider car truck bus train motorcycle bicycle
  return {16, 8, 12, 3, 3, 4, 2, 3, 10, 4, 8, 5, 2, 9, 2, 2, 1.5, 1.5, 3};
}

/// Each class color is pulled toward the color of another class, chosen by
/// a domain-specific derangement. severity 0 keeps the reference palette.
inline std::vector<Rgb> shifted_palette(std::uint64_t seed, double severity, double gain, double bias) {
  auto base = canonical_palette();
  const std::size_t n = base.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  bool deranged = false;
  while (!deranged) {
    rng.shuffle(perm);
    deranged = true;
    for (std::size_t i = 0; i < n; ++i) deranged = deranged && perm[i] != i;
  }
  std::vector<Rgb> out(n);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t ch = 0; ch < 3; ++ch)
      out[c][ch] = clamp01(gain * ((1 - severity) * base[c][ch] + severity * base[perm[c]][ch]) + bias);
  return out;
}

inline std::vector<int> identity_textures(std::size_t n) {
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<int>(i);
  return t;
}

}  // namespace detail

/// Palette shift of the IDD and BDD analogs; ACDC sits 0.1 lower and adds weather.
inline constexpr double kRealShiftSeverity = 0.55;

/// Shift knobs of a real-domain analog.
struct RealDomainShift {
  double severity;
  double gain;
  double bias;
};

/// Four real-domain analogs, in stream order: CS, IDD, BDD, ACDC.
inline std::vector<DomainSpec> real_domain_presets(std::size_t canvas = 32) {
  const auto space = target_label_space();
  const auto weights = detail::base_class_weights();

  auto make = [&](std::string name, const RealDomainShift& shift, std::uint64_t ns) {
    DomainSpec d;
    d.name = std::move(name);
    d.label_space = space;
    d.palette = shift.severity == 0.0 && shift.gain == 1.0 && shift.bias == 0.0
                    ? detail::canonical_palette()
                    : detail::shifted_palette(ns, shift.severity, shift.gain, shift.bias);
    d.texture_ids = detail::identity_textures(space.size());
    d.class_frequency_weights = weights;
    d.height = d.width = canvas;
    d.seed_namespace = ns;
    return d;
  };

  std::vector<DomainSpec> out;
  out.push_back(make("CS", {0.0, 1.0, 0.0}, hash_name("domain/CS")));

  auto idd = make("IDD", {kRealShiftSeverity, 1.0, 0.03}, hash_name("domain/IDD"));
  for (const char* v : {"car", "truck", "bus", "motorcycle", "rider"})
    idd.class_frequency_weights[static_cast<std::size_t>(space.id_of(v))] *= 2.5;
  idd.texture_noise_sigma = 0.04;
  out.push_back(std::move(idd));

  auto bdd = make("BDD", {kRealShiftSeverity, 0.8, 0.0}, hash_name("domain/BDD"));
  bdd.texture_noise_sigma = 0.05;
  out.push_back(std::move(bdd));

  auto acdc = make("ACDC", {kRealShiftSeverity - 0.1, 0.9, 0.02}, hash_name("domain/ACDC"));
  acdc.weather = {{Weather::kFog, 0.5}, {Weather::kRain, 0.6}, {Weather::kSnow, 0.6}};
  out.push_back(std::move(acdc));
  return out;
}

namespace detail {

/// A simulator class either renders like a target class or has its own look.
// Simulator rendering style. Severity is the palette shift away from the real
// domains, jitter the per-sample color noise, and the merge weight scales how
// often a merged class renders like one of its extra looks.
inline constexpr double kSimAStyleShift = 0.5;
inline constexpr double kSimBStyleShift = 0.5;
inline constexpr double kSimAJitter = 0.25;
inline constexpr double kSimBJitter = 0.15;
inline constexpr double kMergedLookWeight = 3.0;

struct SimClass {
  const char* name;
  const char* looks_like;  // target class name, or nullptr
  Rgb own_color;
  double weight;
  // Target classes this simulator class also renders like, with relative
  // weights. Models merged simulator labels (e.g. one class for all vehicles).
  std::vector<std::pair<const char*, double>> also_looks_like = {};
};

/// The rendering style shifts target-like classes away from every real domain.
inline DomainSpec make_sim_domain(std::string name, const std::vector<SimClass>& table, double jitter,
                                  double amplitude, double style_severity, std::size_t canvas) {
  const auto target = target_label_space();
  const auto canon = shifted_palette(hash_name("sim-style/" + name), style_severity, 1.0, 0.0);
  DomainSpec d;
  d.name = name;
  d.label_space.ignore_index = kIgnoreIndex;
  int own_texture = static_cast<int>(target.size());
  for (const auto& c : table) {
    d.label_space.names.emplace_back(c.name);
    if (c.looks_like) {
      const auto t = static_cast<std::size_t>(target.id_of(c.looks_like));
      d.palette.push_back(canon[t]);
      d.texture_ids.push_back(static_cast<int>(t));
    } else {
      d.palette.push_back(c.own_color);
      d.texture_ids.push_back(own_texture++);
    }
    d.class_frequency_weights.push_back(c.weight);
    std::vector<Appearance> variants;
    for (const auto& [look, wt] : c.also_looks_like) {
      const auto t = static_cast<std::size_t>(target.id_of(look));
      variants.push_back({canon[t], static_cast<int>(t), wt * kMergedLookWeight});
    }
    d.appearance_variants.push_back(std::move(variants));
  }
  d.palette_jitter = jitter;
  d.texture_amplitude = amplitude;
  d.texture_noise_sigma = 0.02;
  d.camera_jitter = 0.3;
  d.weather = {{Weather::kNone, 0.0}, {Weather::kFog, 0.3}, {Weather::kRain, 0.3}};
  d.height = d.width = canvas;
  d.seed_namespace = hash_name("sim/" + name);
  return d;
}

}  // namespace detail

/// Two simulator analogs with their own label spaces (23 and 31 classes).
/// SimB renders closer to the real domains than SimA.
inline std::vector<DomainSpec> sim_domain_presets(std::size_t canvas = 32) {
  using detail::rgb255;
  const std::vector<detail::SimClass> sim_a = {
      {"unlabeled", nullptr, rgb255(0, 0, 0), 2},
      {"building", "building", {}, 10},
      {"fence", "fence", {}, 3},
      {"other", nullptr, rgb255(55, 90, 80), 2},
      {"pedestrian", "person", {}, 5, {{"rider", 0.5}}},
      {"pole", "pole", {}, 4, {{"traffic light", 0.5}}},
      {"road line", "road", rgb255(157, 234, 50), 3},
      {"road", "road", {}, 14},
      {"side walk", "sidewalk", {}, 8},
      {"vegetation", "vegetation", {}, 9, {{"terrain", 0.5}}},
      {"vehicles", "car", {}, 10, {{"truck", 0.3}, {"bus", 0.3}, {"motorcycle", 0.25}, {"bicycle", 0.25}}},
      {"wall", "wall", {}, 3},
      {"traffic sign", "traffic sign", {}, 3},
      {"sky", "sky", {}, 8},
      {"ground", nullptr, rgb255(81, 0, 81), 2},
      {"bridge", nullptr, rgb255(150, 100, 100), 1},
      {"rail track", nullptr, rgb255(230, 150, 140), 1},
      {"guard rail", nullptr, rgb255(180, 165, 180), 1},
      {"traffic light", "traffic light", {}, 2},
      {"static", nullptr, rgb255(110, 190, 160), 1},
      {"dynamic", nullptr, rgb255(170, 120, 50), 1},
      {"water", nullptr, rgb255(45, 60, 150), 1},
      {"terrain", "terrain", {}, 4},
  };
  const std::vector<detail::SimClass> sim_b = {
      {"ambiguous", nullptr, rgb255(30, 30, 30), 2},
      {"sky", "sky", {}, 8},
      {"road", "road", {}, 14},
      {"side walk", "sidewalk", {}, 8},
      {"rail track", nullptr, rgb255(230, 150, 140), 1},
      {"terrain", "terrain", {}, 4},
      {"tree", nullptr, rgb255(60, 110, 20), 2},
      {"vegetation", "vegetation", {}, 8},
      {"building", "building", {}, 10},
      {"infrastructure", nullptr, rgb255(130, 130, 110), 2},
      {"fence", "fence", {}, 3},
      {"billboard", nullptr, rgb255(200, 200, 120), 1},
      {"traffic light", "traffic light", {}, 2},
      {"traffic sign", "traffic sign", {}, 3},
      {"mobile barrier", nullptr, rgb255(255, 120, 0), 1},
      {"fire hydrant", nullptr, rgb255(200, 40, 40), 1},
      {"chair", nullptr, rgb255(100, 60, 30), 1},
      {"trash", nullptr, rgb255(90, 90, 60), 1},
      {"trash can", nullptr, rgb255(60, 90, 90), 1},
      {"person", "person", {}, 5, {{"rider", 0.3}}},
      {"animal", nullptr, rgb255(150, 110, 70), 1},
      {"bicycle", "bicycle", {}, 3},
      {"motorcycle", "motorcycle", {}, 2},
      {"car", "car", {}, 9},
      {"van", "car", rgb255(0, 10, 150), 2, {{"truck", 1.0}}},
      {"bus", "bus", {}, 2},
      {"truck", "truck", {}, 2},
      {"trailer", nullptr, rgb255(0, 0, 110), 1},
      {"train", nullptr, rgb255(0, 80, 100), 1},
      {"plane", nullptr, rgb255(160, 160, 200), 1},
      {"boat", nullptr, rgb255(70, 70, 140), 1},
  };
  auto a = detail::make_sim_domain("SimA", sim_a, detail::kSimAJitter, 0.10, detail::kSimAStyleShift, canvas);
  // Road lines are painted with their own color on top of the road texture.
  a.palette[static_cast<std::size_t>(a.label_space.id_of("road line"))] = rgb255(230, 230, 230);
  auto b = detail::make_sim_domain("SimB", sim_b, detail::kSimBJitter, 0.12, detail::kSimBStyleShift, canvas);
  b.palette[static_cast<std::size_t>(b.label_space.id_of("van"))] = rgb255(0, 10, 150);
  return {std::move(a), std::move(b)};
}

inline DomainSpec find_domain(const std::vector<DomainSpec>& domains, const std::string& name) {
  for (const auto& d : domains)
    if (d.name == name) return d;
  throw ConfigError("unknown domain '" + name + "'");
}

/// Half-open range of sample seeds.
struct SeedRange {
  std::uint64_t begin = 0;
  std::uint64_t count = 0;
  std::uint64_t end() const { return begin + count; }
  bool contains(std::uint64_t s) const { return s >= begin && s < end(); }
};

struct Split {
  SeedRange train;
  SeedRange test;
};

/// Test seeds start at a fixed offset, so the test set does not depend on the
/// train count.
inline constexpr std::uint64_t kTestSeedOffset = 1'000'000'000ULL;

inline Split make_split(const DomainSpec& /*spec*/, std::uint64_t train_count, std::uint64_t test_count) {
  require(train_count > 0 && test_count > 0, "split counts must be positive");
  require(train_count <= kTestSeedOffset, "train count too large");
  return {{0, train_count}, {kTestSeedOffset, test_count}};
}

inline std::vector<LabeledSample> generate_range(const DomainSpec& spec, SeedRange range) {
  std::vector<LabeledSample> out;
  out.reserve(range.count);
  for (std::uint64_t s = range.begin; s < range.end(); ++s) out.push_back(generate_sample(spec, s));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset dump: binary PPM images, PGM masks (ignore = 255), CSV manifest.

inline void write_ppm(const std::filesystem::path& path, const Tensor<double>& image) {
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch)
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(image[ch * plane + p] * 255.0))));
}

inline void write_pgm(const std::filesystem::path& path, const LabelTensor& mask) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t p = 0; p < h * w; ++p) out.put(static_cast<char>(static_cast<unsigned char>(mask[p])));
}

/// Writes one split of a domain; appends rows to manifest (file,domain,seed,split).
inline void dump_samples(const std::filesystem::path& dir, const DomainSpec& spec, SeedRange range,
                         const std::string& split, std::ostream& manifest) {
  std::filesystem::create_directories(dir / spec.name / split);
  for (std::uint64_t s = range.begin; s < range.end(); ++s) {
    const auto sample = generate_sample(spec, s);
    const std::string stem = spec.name + "/" + split + "/" + std::to_string(s);
    write_ppm(dir / (stem + ".ppm"), sample.image);
    write_pgm(dir / (stem + "_mask.pgm"), sample.mask);
    manifest << stem << ',' << spec.name << ',' << s << ',' << split << '\n';
  }
}

}  // namespace odics
