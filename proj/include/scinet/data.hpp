#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "scinet/tensor.hpp"

namespace scinet {

/// Ground-sample distances (cm/pixel) of the synthetic dataset.
inline constexpr std::array<int, 9> kGsdSetCm{2, 3, 4, 5, 6, 7, 8, 10, 20};
bool is_supported_gsd(int gsd_cm);

struct Point {
  double x = 0.0, y = 0.0;  // meters; y grows downwards like image rows
};

enum class BuildingShape { Rect, RotatedRect, LShape };

struct Building {
  BuildingShape shape = BuildingShape::Rect;
  std::vector<Point> outline;  // simple polygon, world meters
  double min_side_m = 0.0;
  std::array<double, 3> roof_rgb{};
};

/// Appearance of ground and roofs. Textures are defined in world meters so
/// that every resolution sees the same physical pattern.
struct SceneStyle {
  /// Base tone. Each scene's ground and each roof are drawn around it.
  std::array<double, 3> ground_rgb{0.42, 0.42, 0.36};
  double texture_amplitude = 0.16;
  std::array<double, 3> texture_cells_m{0.35, 1.5, 6.0};
  /// Roofs (per building) get a random tone shift within +-tone_spread plus
  /// a per-channel jitter; the ground (per scene) a grey-level shift within
  /// +-ground_tone_spread and no jitter. Ground tones sit inside the roof
  /// range, so a roof close to its ground's tone is told apart only by its
  /// rim, its shadow and the absence of clutter.
  double tone_spread = 0.14;
  double ground_tone_spread = 0.06;
  /// Ground is a patchwork (soil, grass, pavement): its tone drifts by up to
  /// +-ground_patch_amplitude over ground_patch_cell_m, while a roof keeps
  /// one tone. A fine-resolution window sees neither drift nor roof edge.
  double ground_patch_amplitude = 0.12;
  double ground_patch_cell_m = 24.0;
  double channel_jitter = 0.03;
  /// Darker rim along roof edges and a cast shadow on the ground.
  double rim_width_m = 0.3;
  double rim_darkening = 0.18;
  Point shadow_offset_m{0.8, 0.8};
  double shadow_darkening = 0.2;
  /// Ground clutter (shrubs, trees): dark greenish discs that never appear on
  /// roofs. One candidate per clutter_cell_m square, kept with
  /// clutter_probability. Ground is recognizable wherever a disc is in view,
  /// so a fine-resolution window far from any disc needs wider context.
  double clutter_cell_m = 6.0;
  double clutter_probability = 0.6;
  std::array<double, 2> clutter_radius_m{0.5, 1.8};
  double clutter_darkening = 0.16;
};

struct SceneConfig {
  double extent_m = 160.0;
  std::size_t min_buildings = 20;
  std::size_t max_buildings = 40;
  double min_side_m = 4.0;
  double max_side_m = 28.0;
  /// Fraction of buildings forced to overlap the scene centre region, so
  /// that the highest-resolution (smallest) windows are not all background.
  double central_fraction = 0.3;
  SceneStyle style;
};

struct VectorScene {
  std::uint64_t seed = 0;
  double extent_m = 0.0;  // world is [0, extent]^2
  std::vector<Building> buildings;
  SceneStyle style;
};

/// Deterministic per seed. Buildings do not overlap and lie inside the extent.
VectorScene generate_scene(std::uint64_t seed, const SceneConfig& config = {});

struct SampleTile {
  Tensor image;  // (1, 3, h, w), values in [0, 1]
  Tensor mask;   // (1, 1, h, w), values in {0, 1}
  int gsd_cm = 0;
  std::string id;
  int fold = -1;
};

/// Renders a size_px x size_px window centred on the scene. Pixel (i, j)
/// covers world [x0 + j g, x0 + (j + 1) g) with g = gsd. The image is
/// supersampled (`samples` x `samples` per pixel); the mask tests pixel
/// centres. Buildings narrower than one pixel are left out of the mask and
/// logged.
SampleTile render(const VectorScene& scene, int gsd_cm, std::size_t size_px, std::size_t samples = 3);

/// Row-major sliding windows; partial windows at the right/bottom edges are
/// dropped. Tile ids are "{prefix}_{row}_{col}" in window units.
std::vector<SampleTile> tile(const SampleTile& raster, std::size_t window, std::size_t stride,
                             const std::string& prefix = "tile");

// ---------------------------------------------------------------------------
// Lossless 8-bit rasters (binary PPM / PGM)

void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& mask);
/// Single-channel values in [0, 1] quantized to 8 bits (e.g. probabilities).
void write_gray_pgm(const std::filesystem::path& path, const Tensor& values);
/// (1, 3, h, w) in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);
/// (1, 1, h, w); non-zero bytes become 1.
Tensor read_pgm_mask(const std::filesystem::path& path);
/// Rounds to the nearest of the 256 levels that an 8-bit file can hold.
Tensor quantize_8bit(const Tensor& image);

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string image;  // relative to the manifest's directory
  std::string mask;
  int gsd_cm = 0;
  int fold = -1;
  std::string id;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::string generator_version;
  int folds = 0;
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // directory the relative paths resolve against
};

inline constexpr const char* kGeneratorVersion = "scinet-synth/1";

/// Line-delimited JSON: one header object, then one object per record.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
/// Checks that every referenced file exists and folds lie in [0, k).
Manifest read_manifest(const std::filesystem::path& path);
SampleTile load_tile(const Manifest& manifest, const ManifestRecord& record);

/// Assigns folds 0..k-1. Within each gsd class the records are shuffled and
/// dealt round-robin, starting where the previous class stopped, so class
/// counts per fold differ by at most one and overall fold sizes stay level.
/// Classes with fewer than k records are logged.
void stratified_kfold(Manifest& manifest, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset synthesis

struct SynthConfig {
  std::size_t scenes = 4;
  std::size_t raster_px = 512;
  std::size_t tile_px = 256;
  std::size_t stride_px = 0;  // 0: equal to tile_px
  int folds = 10;
  std::vector<int> gsds_cm{kGsdSetCm.begin(), kGsdSetCm.end()};
  std::uint64_t seed = 0;
  SceneConfig scene;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Renders scenes x gsds rasters, tiles them, writes images, masks and the
/// manifest (manifest.jsonl) into `out_dir`.
Manifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// Raster file stem "{scene}_{gsd}cm_{row}_{col}".
std::string tile_stem(const std::string& scene, int gsd_cm, std::size_t row, std::size_t col);

}  // namespace scinet
