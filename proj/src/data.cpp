#include "scinet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "scinet/errors.hpp"
#include "scinet/log.hpp"
#include "scinet/parallel.hpp"
#include "scinet/rng.hpp"

namespace scinet {

bool is_supported_gsd(int gsd_cm) {
  return std::find(kGsdSetCm.begin(), kGsdSetCm.end(), gsd_cm) != kGsdSetCm.end();
}

namespace {

struct Box {
  double x0, y0, x1, y1;
  bool overlaps(const Box& o, double margin) const {
    return x0 - margin < o.x1 && o.x0 - margin < x1 && y0 - margin < o.y1 && o.y0 - margin < y1;
  }
};

Box bounds(const std::vector<Point>& poly) {
  Box b{poly[0].x, poly[0].y, poly[0].x, poly[0].y};
  for (const auto& p : poly) {
    b.x0 = std::min(b.x0, p.x);
    b.y0 = std::min(b.y0, p.y);
    b.x1 = std::max(b.x1, p.x);
    b.y1 = std::max(b.y1, p.y);
  }
  return b;
}

bool inside(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

double edge_distance(const std::vector<Point>& poly, double x, double y) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const double ex = poly[i].x - poly[j].x, ey = poly[i].y - poly[j].y;
    const double len2 = ex * ex + ey * ey;
    double t = len2 > 0 ? ((x - poly[j].x) * ex + (y - poly[j].y) * ey) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = x - (poly[j].x + t * ex), dy = y - (poly[j].y + t * ey);
    best = std::min(best, std::sqrt(dx * dx + dy * dy));
  }
  return best;
}

std::vector<Point> place(const std::vector<Point>& local, double cx, double cy, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<Point> out;
  for (const auto& p : local) out.push_back({cx + c * p.x - s * p.y, cy + s * p.x + c * p.y});
  return out;
}

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Smooth value noise in [-1, 1] on a lattice of the given cell size.
double value_noise(double x, double y, double cell, std::uint64_t salt) {
  const double gx = x / cell, gy = y / cell;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  auto lattice = [salt](std::int64_t i, std::int64_t j) {
    const std::uint64_t h = mix(salt ^ mix(static_cast<std::uint64_t>(i) * 0x632be59bd9b4e019ULL ^
                                           static_cast<std::uint64_t>(j)));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
  };
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  const double tx = smooth(gx - fx), ty = smooth(gy - fy);
  const double top = lattice(ix, iy) * (1 - tx) + lattice(ix + 1, iy) * tx;
  const double bottom = lattice(ix, iy + 1) * (1 - tx) + lattice(ix + 1, iy + 1) * tx;
  return top * (1 - ty) + bottom * ty;
}

/// Buckets buildings (with their shadows) into square cells for lookup.
class BuildingIndex {
 public:
  BuildingIndex(const VectorScene& scene, double cell) : scene_(scene), cell_(cell) {
    cells_per_side_ = static_cast<std::size_t>(std::ceil(scene.extent_m / cell)) + 1;
    cells_.resize(cells_per_side_ * cells_per_side_);
    const Point off = scene.style.shadow_offset_m;
    for (std::size_t b = 0; b < scene.buildings.size(); ++b) {
      Box box = bounds(scene.buildings[b].outline);
      box.x0 = std::min(box.x0, box.x0 + off.x);
      box.y0 = std::min(box.y0, box.y0 + off.y);
      box.x1 = std::max(box.x1, box.x1 + off.x);
      box.y1 = std::max(box.y1, box.y1 + off.y);
      boxes_.push_back(box);
      for (std::size_t cy = clamp_cell(box.y0); cy <= clamp_cell(box.y1); ++cy)
        for (std::size_t cx = clamp_cell(box.x0); cx <= clamp_cell(box.x1); ++cx)
          cells_[cy * cells_per_side_ + cx].push_back(b);
    }
  }
  const std::vector<std::size_t>& near(double x, double y) const {
    static const std::vector<std::size_t> none;
    if (x < 0 || y < 0 || x >= scene_.extent_m || y >= scene_.extent_m) return none;
    return cells_[clamp_cell(y) * cells_per_side_ + clamp_cell(x)];
  }

 private:
  std::size_t clamp_cell(double v) const {
    const double c = std::floor(v / cell_);
    return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(cells_per_side_ - 1)));
  }
  const VectorScene& scene_;
  double cell_;
  std::size_t cells_per_side_ = 0;
  std::vector<std::vector<std::size_t>> cells_;
  std::vector<Box> boxes_;
};

/// Darkening from ground clutter at (x, y); 0 away from any disc. Each disc
/// has a soft rim 15% of its radius wide.
double clutter(const SceneStyle& st, std::uint64_t seed, double x, double y) {
  if (st.clutter_probability <= 0.0 || st.clutter_darkening == 0.0) return 0.0;
  const double cell = st.clutter_cell_m;
  const auto cx = static_cast<std::int64_t>(std::floor(x / cell));
  const auto cy = static_cast<std::int64_t>(std::floor(y / cell));
  auto unit = [](std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; };
  double best = 0.0;
  for (std::int64_t j = cy - 1; j <= cy + 1; ++j) {
    for (std::int64_t i = cx - 1; i <= cx + 1; ++i) {
      std::uint64_t h = mix(seed * 0x2545f4914f6cdd1dULL ^ mix(static_cast<std::uint64_t>(i) * 0x632be59bd9b4e019ULL ^
                                                               static_cast<std::uint64_t>(j)));
      if (unit(h) >= st.clutter_probability) continue;
      h = mix(h);
      const double px = (static_cast<double>(i) + unit(h)) * cell;
      h = mix(h);
      const double py = (static_cast<double>(j) + unit(h)) * cell;
      h = mix(h);
      const double r = st.clutter_radius_m[0] + unit(h) * (st.clutter_radius_m[1] - st.clutter_radius_m[0]);
      const double d = std::hypot(x - px, y - py);
      if (d >= r) continue;
      const double rim = 0.15 * r;
      best = std::max(best, d <= r - rim ? 1.0 : (r - d) / rim);
    }
  }
  return best * st.clutter_darkening;
}

std::array<double, 3> shade(const VectorScene& scene, const BuildingIndex& index, double x, double y) {
  const SceneStyle& st = scene.style;
  auto texture = [&](std::uint64_t salt) {
    double n = 0, weight = 0, w = 1.0;
    for (std::size_t o = st.texture_cells_m.size(); o-- > 0;) {
      n += w * value_noise(x, y, st.texture_cells_m[o], salt + o);
      weight += w;
      w *= 0.7;
    }
    return st.texture_amplitude * n / weight;
  };
  bool shadowed = false;
  for (std::size_t b : index.near(x, y)) {
    const Building& bd = scene.buildings[b];
    if (inside(bd.outline, x, y)) {
      const double t = texture(scene.seed * 31 + 7 + b * 1000);
      double dark = edge_distance(bd.outline, x, y) < st.rim_width_m ? st.rim_darkening : 0.0;
      return {bd.roof_rgb[0] + t - dark, bd.roof_rgb[1] + t - dark, bd.roof_rgb[2] + t - dark};
    }
    shadowed = shadowed || inside(bd.outline, x - st.shadow_offset_m.x, y - st.shadow_offset_m.y);
  }
  const double t = texture(scene.seed * 31 + 3) +
                   st.ground_patch_amplitude * value_noise(x, y, st.ground_patch_cell_m, scene.seed * 31 + 5);
  const double dark = shadowed ? st.shadow_darkening : 0.0;
  const double c = clutter(st, scene.seed, x, y);
  return {st.ground_rgb[0] + t - dark - c, st.ground_rgb[1] + t - dark - 0.4 * c,
          st.ground_rgb[2] + t - dark - c};
}

std::array<double, 3> draw_tone(const SceneStyle& st, double spread, double jitter, Rng& rng) {
  const double shift = rng.uniform(-spread, spread);
  std::array<double, 3> rgb{};
  for (std::size_t ch = 0; ch < 3; ++ch) rgb[ch] = st.ground_rgb[ch] + shift + rng.uniform(-jitter, jitter);
  return rgb;
}

}  // namespace

VectorScene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.min_side_m < 1.0) throw ConfigError("scene.min_side_m must be at least 1 m");
  if (config.max_side_m < config.min_side_m) throw ConfigError("scene.max_side_m must be >= scene.min_side_m");
  if (config.max_buildings < config.min_buildings) throw ConfigError("scene.max_buildings must be >= min_buildings");
  if (config.extent_m < 2 * config.max_side_m) throw ConfigError("scene.extent_m too small for the building sizes");

  VectorScene scene;
  scene.seed = seed;
  scene.extent_m = config.extent_m;
  scene.style = config.style;
  Rng rng(seed);
  const std::size_t target = config.min_buildings + rng.below(config.max_buildings - config.min_buildings + 1);
  const double centre = config.extent_m / 2;
  const double margin = 1.5 + std::hypot(config.style.shadow_offset_m.x, config.style.shadow_offset_m.y);
  scene.style.ground_rgb = draw_tone(config.style, config.style.ground_tone_spread, 0.0, rng);
  std::vector<Box> taken;
  for (std::size_t attempt = 0; attempt < target * 200 && scene.buildings.size() < target; ++attempt) {
    Building b;
    const auto kind = rng.below(3);
    const double w = rng.uniform(config.min_side_m, config.max_side_m);
    const double h = rng.uniform(config.min_side_m, config.max_side_m);
    std::vector<Point> local;
    double angle = 0.0;
    if (kind == 2) {
      b.shape = BuildingShape::LShape;
      // cut the top-right corner; both arms stay at least min_side wide
      const double cut_w = rng.uniform(0.3, 0.6) * w, cut_h = rng.uniform(0.3, 0.6) * h;
      b.min_side_m = std::min(w - cut_w, h - cut_h);
      if (b.min_side_m < config.min_side_m) continue;
      local = {{-w / 2, -h / 2}, {w / 2 - cut_w, -h / 2}, {w / 2 - cut_w, -h / 2 + cut_h},
               {w / 2, -h / 2 + cut_h}, {w / 2, h / 2}, {-w / 2, h / 2}};
      angle = rng.uniform(0, std::numbers::pi);
    } else {
      b.shape = kind == 0 ? BuildingShape::Rect : BuildingShape::RotatedRect;
      b.min_side_m = std::min(w, h);
      local = {{-w / 2, -h / 2}, {w / 2, -h / 2}, {w / 2, h / 2}, {-w / 2, h / 2}};
      if (kind == 1) angle = rng.uniform(0, std::numbers::pi);
    }
    double cx, cy;
    if (rng.uniform() < config.central_fraction) {
      // covers the centre point somewhere within its footprint
      cx = centre + rng.uniform(-0.4, 0.4) * std::min(w, h);
      cy = centre + rng.uniform(-0.4, 0.4) * std::min(w, h);
    } else {
      cx = rng.uniform(0, config.extent_m);
      cy = rng.uniform(0, config.extent_m);
    }
    b.outline = place(local, cx, cy, angle);
    const Box box = bounds(b.outline);
    if (box.x0 < margin || box.y0 < margin || box.x1 > config.extent_m - margin || box.y1 > config.extent_m - margin)
      continue;
    if (std::any_of(taken.begin(), taken.end(), [&](const Box& o) { return o.overlaps(box, margin); })) continue;
    b.roof_rgb = draw_tone(config.style, config.style.tone_spread, config.style.channel_jitter, rng);
    taken.push_back(box);
    scene.buildings.push_back(std::move(b));
  }
  return scene;
}

SampleTile render(const VectorScene& scene, int gsd_cm, std::size_t size_px, std::size_t samples) {
  if (!is_supported_gsd(gsd_cm)) throw ConfigError("unsupported gsd " + std::to_string(gsd_cm) + " cm/pixel");
  if (size_px == 0 || size_px % 32 != 0)
    throw ConfigError("raster size must be a positive multiple of 32, got " + std::to_string(size_px));
  if (samples == 0) throw ConfigError("supersampling factor must be positive");
  const double g = gsd_cm / 100.0;
  const double x0 = scene.extent_m / 2 - g * static_cast<double>(size_px) / 2;
  const double y0 = x0;
  const BuildingIndex index(scene, 8.0);

  std::vector<bool> in_mask(scene.buildings.size(), true);
  std::size_t dropped = 0;
  for (std::size_t b = 0; b < scene.buildings.size(); ++b) {
    if (scene.buildings[b].min_side_m < g) {
      in_mask[b] = false;
      ++dropped;
    }
  }
  if (dropped > 0)
    log_info("render: " + std::to_string(dropped) + " building(s) narrower than one pixel at " +
             std::to_string(gsd_cm) + " cm/px left out of the mask");

  SampleTile out;
  out.gsd_cm = gsd_cm;
  out.image = Tensor(Shape{1, 3, size_px, size_px});
  out.mask = Tensor(Shape{1, 1, size_px, size_px});
  const std::size_t plane = size_px * size_px;
  const double inv = 1.0 / static_cast<double>(samples * samples);
  parallel_for(size_px, [&](std::size_t i) {
    for (std::size_t j = 0; j < size_px; ++j) {
      std::array<double, 3> acc{};
      for (std::size_t a = 0; a < samples; ++a) {
        for (std::size_t c = 0; c < samples; ++c) {
          const double y = y0 + g * (static_cast<double>(i) + (static_cast<double>(a) + 0.5) / samples);
          const double x = x0 + g * (static_cast<double>(j) + (static_cast<double>(c) + 0.5) / samples);
          const auto rgb = shade(scene, index, x, y);
          for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += rgb[ch];
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.image[ch * plane + i * size_px + j] = static_cast<float>(std::clamp(acc[ch] * inv, 0.0, 1.0));
      const double cy = y0 + g * (static_cast<double>(i) + 0.5);
      const double cx = x0 + g * (static_cast<double>(j) + 0.5);
      for (std::size_t b : index.near(cx, cy)) {
        if (in_mask[b] && inside(scene.buildings[b].outline, cx, cy)) {
          out.mask[i * size_px + j] = 1.0f;
          break;
        }
      }
    }
  });
  return out;
}

std::vector<SampleTile> tile(const SampleTile& raster, std::size_t window, std::size_t stride,
                             const std::string& prefix) {
  const Shape& s = raster.image.shape();
  if (window == 0 || stride == 0) throw ConfigError("tile window and stride must be positive");
  if (window > s.h || window > s.w)
    throw ShapeError("tile window " + std::to_string(window) + " exceeds raster " + s.str());
  if (!(raster.mask.shape() == Shape{s.n, 1, s.h, s.w}))
    throw ShapeError("raster mask " + raster.mask.shape().str() + " does not match image " + s.str());
  std::vector<SampleTile> out;
  for (std::size_t r = 0, top = 0; top + window <= s.h; ++r, top += stride) {
    for (std::size_t c = 0, left = 0; left + window <= s.w; ++c, left += stride) {
      SampleTile t;
      t.gsd_cm = raster.gsd_cm;
      t.id = prefix + "_" + std::to_string(r) + "_" + std::to_string(c);
      t.image = Tensor(Shape{1, s.c, window, window});
      t.mask = Tensor(Shape{1, 1, window, window});
      for (std::size_t ch = 0; ch < s.c; ++ch)
        for (std::size_t i = 0; i < window; ++i)
          std::copy_n(&raster.image.at(0, ch, top + i, left), window, &t.image.at(0, ch, i, 0));
      for (std::size_t i = 0; i < window; ++i)
        std::copy_n(&raster.mask.at(0, 0, top + i, left), window, &t.mask.at(0, 0, i, 0));
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNM

namespace {

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0));
}

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
               const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

struct Pnm {
  std::size_t w = 0, h = 0, channels = 0;
  std::vector<unsigned char> bytes;
};

Pnm read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open raster " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t += ch;
      }
    }
    return t;
  };
  Pnm p;
  const std::string magic = token();
  if (magic == "P6") {
    p.channels = 3;
  } else if (magic == "P5") {
    p.channels = 1;
  } else {
    throw DataError(path.string() + ": not a binary PPM/PGM file");
  }
  try {
    p.w = std::stoul(token());
    p.h = std::stoul(token());
    if (std::stoul(token()) != 255) throw DataError(path.string() + ": only 8-bit rasters are supported");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed raster header");
  }
  p.bytes.resize(p.w * p.h * p.channels);
  in.read(reinterpret_cast<char*>(p.bytes.data()), static_cast<std::streamsize>(p.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(p.bytes.size())) throw DataError(path.string() + ": truncated raster");
  return p;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("write_ppm expects (1, 3, h, w), got " + s.str());
  std::vector<unsigned char> bytes(s.h * s.w * 3);
  for (std::size_t i = 0; i < s.h * s.w; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) bytes[i * 3 + ch] = to_byte(image[ch * s.h * s.w + i]);
  write_pnm(path, "P6", s.w, s.h, bytes);
}

void write_pgm(const std::filesystem::path& path, const Tensor& mask) {
  const Shape& s = mask.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_pgm expects (1, 1, h, w), got " + s.str());
  std::vector<unsigned char> bytes(s.h * s.w);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask[i] != 0.0f ? 255 : 0;
  write_pnm(path, "P5", s.w, s.h, bytes);
}

void write_gray_pgm(const std::filesystem::path& path, const Tensor& values) {
  const Shape& s = values.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_gray_pgm expects (1, 1, h, w), got " + s.str());
  std::vector<unsigned char> bytes(s.h * s.w);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(values[i]);
  write_pnm(path, "P5", s.w, s.h, bytes);
}

Tensor read_ppm(const std::filesystem::path& path) {
  const Pnm p = read_pnm(path);
  if (p.channels != 3) throw DataError(path.string() + ": expected a 3-channel PPM");
  Tensor t(Shape{1, 3, p.h, p.w});
  for (std::size_t i = 0; i < p.h * p.w; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) t[ch * p.h * p.w + i] = static_cast<float>(p.bytes[i * 3 + ch]) / 255.0f;
  return t;
}

Tensor read_pgm_mask(const std::filesystem::path& path) {
  const Pnm p = read_pnm(path);
  if (p.channels != 1) throw DataError(path.string() + ": expected a single-channel PGM");
  Tensor t(Shape{1, 1, p.h, p.w});
  for (std::size_t i = 0; i < p.bytes.size(); ++i) t[i] = p.bytes[i] != 0 ? 1.0f : 0.0f;
  return t;
}

Tensor quantize_8bit(const Tensor& image) {
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.numel(); ++i) out[i] = static_cast<float>(to_byte(image[i])) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  nlohmann::json header = {{"type", "header"},
                           {"generator_version", manifest.generator_version},
                           {"seed", manifest.seed},
                           {"folds", manifest.folds},
                           {"records", manifest.records.size()}};
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    nlohmann::json j = {{"type", "tile"}, {"id", r.id},         {"image", r.image},
                        {"mask", r.mask}, {"gsd_cm", r.gsd_cm}, {"fold", r.fold}};
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (j.at("type") == "header") {
        m.generator_version = j.at("generator_version").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.folds = j.at("folds").get<int>();
        have_header = true;
        continue;
      }
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.mask = j.at("mask").get<std::string>();
      r.gsd_cm = j.at("gsd_cm").get<int>();
      r.fold = j.at("fold").get<int>();
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  if (!have_header) throw DataError(path.string() + ": manifest has no header record");
  for (const auto& r : m.records) {
    if (m.folds > 0 && (r.fold < 0 || r.fold >= m.folds))
      throw DataError("manifest record " + r.id + " has fold " + std::to_string(r.fold) + " outside [0, " +
                      std::to_string(m.folds) + ")");
    for (const auto& rel : {r.image, r.mask})
      if (!std::filesystem::exists(m.root / rel)) throw DataError("manifest references missing file " + rel);
  }
  return m;
}

SampleTile load_tile(const Manifest& manifest, const ManifestRecord& record) {
  SampleTile t;
  t.image = read_ppm(manifest.root / record.image);
  t.mask = read_pgm_mask(manifest.root / record.mask);
  if (t.image.shape().h != t.mask.shape().h || t.image.shape().w != t.mask.shape().w)
    throw DataError("tile " + record.id + ": image and mask sizes differ");
  t.gsd_cm = record.gsd_cm;
  t.id = record.id;
  t.fold = record.fold;
  return t;
}

void stratified_kfold(Manifest& manifest, int k, std::uint64_t seed) {
  if (manifest.records.empty()) throw DataError("cannot split an empty manifest into folds");
  if (k < 1) throw ConfigError("fold count must be positive, got " + std::to_string(k));
  std::map<int, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) classes[manifest.records[i].gsd_cm].push_back(i);
  Rng rng(seed);
  std::size_t start = 0;
  const auto kk = static_cast<std::size_t>(k);
  for (auto& [gsd, members] : classes) {
    if (members.size() < kk)
      log_warn("gsd " + std::to_string(gsd) + " cm/px has " + std::to_string(members.size()) + " tiles for " +
               std::to_string(k) + " folds; some folds get none");
    shuffle(members, rng);
    for (std::size_t t = 0; t < members.size(); ++t)
      manifest.records[members[t]].fold = static_cast<int>((start + t) % kk);
    start = (start + members.size()) % kk;
  }
  manifest.folds = k;
}

// ---------------------------------------------------------------------------
// Synthesis

void SynthConfig::validate() const {
  if (scenes == 0) throw ConfigError("data.scenes must be positive");
  if (tile_px == 0 || tile_px % 32 != 0) throw ConfigError("data.tile_px must be a positive multiple of 32");
  if (raster_px % 32 != 0 || raster_px < tile_px) throw ConfigError("data.raster_px must be a multiple of 32 >= tile_px");
  if (folds < 1) throw ConfigError("data.folds must be positive");
  if (gsds_cm.empty()) throw ConfigError("data.gsds_cm must be non-empty");
  for (int g : gsds_cm)
    if (!is_supported_gsd(g)) throw ConfigError("data.gsds_cm: unsupported gsd " + std::to_string(g));
  const SceneStyle& st = scene.style;
  if (st.ground_patch_cell_m <= 0.0) throw ConfigError("data.scene.ground_patch_cell_m must be positive");
  if (st.clutter_cell_m <= 0.0) throw ConfigError("data.scene.clutter_cell_m must be positive");
  if (st.clutter_radius_m[0] <= 0.0 || st.clutter_radius_m[1] < st.clutter_radius_m[0] ||
      st.clutter_radius_m[1] > st.clutter_cell_m)
    throw ConfigError("data.scene.clutter_radius_m must be [lo, hi] with 0 < lo <= hi <= clutter_cell_m");
}

nlohmann::json SynthConfig::to_json() const {
  const SceneStyle& st = scene.style;
  return {{"scenes", scenes},
          {"raster_px", raster_px},
          {"tile_px", tile_px},
          {"stride_px", stride_px},
          {"folds", folds},
          {"gsds_cm", gsds_cm},
          {"seed", seed},
          {"scene",
           {{"extent_m", scene.extent_m},
            {"min_buildings", scene.min_buildings},
            {"max_buildings", scene.max_buildings},
            {"min_side_m", scene.min_side_m},
            {"max_side_m", scene.max_side_m},
            {"central_fraction", scene.central_fraction},
            {"texture_amplitude", st.texture_amplitude},
            {"tone_spread", st.tone_spread},
            {"ground_tone_spread", st.ground_tone_spread},
            {"ground_patch_amplitude", st.ground_patch_amplitude},
            {"ground_patch_cell_m", st.ground_patch_cell_m},
            {"channel_jitter", st.channel_jitter},
            {"rim_width_m", st.rim_width_m},
            {"rim_darkening", st.rim_darkening},
            {"shadow_darkening", st.shadow_darkening},
            {"clutter_cell_m", st.clutter_cell_m},
            {"clutter_probability", st.clutter_probability},
            {"clutter_radius_m", st.clutter_radius_m},
            {"clutter_darkening", st.clutter_darkening}}}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "scenes") value.get_to(c.scenes);
      else if (key == "raster_px") value.get_to(c.raster_px);
      else if (key == "tile_px") value.get_to(c.tile_px);
      else if (key == "stride_px") value.get_to(c.stride_px);
      else if (key == "folds") value.get_to(c.folds);
      else if (key == "gsds_cm") value.get_to(c.gsds_cm);
      else if (key == "seed") value.get_to(c.seed);
      else if (key == "scene") {
        for (const auto& [k, v] : value.items()) {
          if (k == "extent_m") v.get_to(c.scene.extent_m);
          else if (k == "min_buildings") v.get_to(c.scene.min_buildings);
          else if (k == "max_buildings") v.get_to(c.scene.max_buildings);
          else if (k == "min_side_m") v.get_to(c.scene.min_side_m);
          else if (k == "max_side_m") v.get_to(c.scene.max_side_m);
          else if (k == "central_fraction") v.get_to(c.scene.central_fraction);
          else if (k == "texture_amplitude") v.get_to(c.scene.style.texture_amplitude);
          else if (k == "tone_spread") v.get_to(c.scene.style.tone_spread);
          else if (k == "ground_tone_spread") v.get_to(c.scene.style.ground_tone_spread);
          else if (k == "ground_patch_amplitude") v.get_to(c.scene.style.ground_patch_amplitude);
          else if (k == "ground_patch_cell_m") v.get_to(c.scene.style.ground_patch_cell_m);
          else if (k == "channel_jitter") v.get_to(c.scene.style.channel_jitter);
          else if (k == "rim_width_m") v.get_to(c.scene.style.rim_width_m);
          else if (k == "rim_darkening") v.get_to(c.scene.style.rim_darkening);
          else if (k == "shadow_darkening") v.get_to(c.scene.style.shadow_darkening);
          else if (k == "clutter_cell_m") v.get_to(c.scene.style.clutter_cell_m);
          else if (k == "clutter_probability") v.get_to(c.scene.style.clutter_probability);
          else if (k == "clutter_radius_m") v.get_to(c.scene.style.clutter_radius_m);
          else if (k == "clutter_darkening") v.get_to(c.scene.style.clutter_darkening);
          else throw ConfigError("unknown data.scene key '" + k + "'");
        }
      } else {
        throw ConfigError("unknown data key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string tile_stem(const std::string& scene, int gsd_cm, std::size_t row, std::size_t col) {
  return scene + "_" + std::to_string(gsd_cm) + "cm_" + std::to_string(row) + "_" + std::to_string(col);
}

Manifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir / "tiles");
  Manifest manifest;
  manifest.seed = config.seed;
  manifest.generator_version = kGeneratorVersion;
  manifest.root = out_dir;
  Rng seeds(config.seed);
  const std::size_t stride = config.stride_px == 0 ? config.tile_px : config.stride_px;
  for (std::size_t s = 0; s < config.scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene%03zu", s);
    const VectorScene scene = generate_scene(seeds.next_u64(), config.scene);
    for (int gsd : config.gsds_cm) {
      const SampleTile raster = render(scene, gsd, config.raster_px);
      for (auto& t : tile(raster, config.tile_px, stride, "t")) {
        // "t_{row}_{col}" -> row, col
        const auto a = t.id.find('_', 2);
        const std::size_t row = std::stoul(t.id.substr(2, a - 2)), col = std::stoul(t.id.substr(a + 1));
        ManifestRecord r;
        r.id = tile_stem(name, gsd, row, col);
        r.image = "tiles/" + r.id + ".ppm";
        r.mask = "tiles/" + r.id + ".mask.pgm";
        r.gsd_cm = gsd;
        write_ppm(out_dir / r.image, t.image);
        write_pgm(out_dir / r.mask, t.mask);
        manifest.records.push_back(std::move(r));
      }
    }
  }
  stratified_kfold(manifest, config.folds, config.seed ^ 0x5eedf01dULL);
  write_manifest(out_dir / "manifest.jsonl", manifest);
  log_info("synthesized " + std::to_string(manifest.records.size()) + " tiles from " + std::to_string(config.scenes) +
           " scenes into " + out_dir.string());
  return manifest;
}

}  // namespace scinet
