#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmcl/corpus.hpp"

namespace mmcl {

inline constexpr int kImageSize = 224;

/// Row-major H x W x 3 RGB image with 8-bit channels.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
  std::string sample_id;

  ImageTensor() = default;
  ImageTensor(int h, int w, std::string id = {})
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0), sample_id(std::move(id)) {}

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const ImageTensor& o) const {
    return height == o.height && width == o.width && pixels == o.pixels;
  }
};

ImageTensor read_image(const std::filesystem::path& path, std::string sample_id = {});
/// Decodes PNG/JPEG/PPM bytes.
ImageTensor decode_image(std::string_view bytes, std::string sample_id = {});
std::string encode_png(const ImageTensor& image);
void write_png(const std::filesystem::path& path, const ImageTensor& image);

/// Bilinear/area resize to size x size.
ImageTensor resize(const ImageTensor& image, int size = kImageSize);

/// Rec. 601 luma, rounded to the nearest integer.
std::vector<std::uint8_t> luminance(const ImageTensor& image);

/// Threshold t maximizing the between-class variance of {v <= t} vs {v > t}.
/// Ties resolve to the smallest t.
int otsu_threshold(std::span<const std::uint8_t> gray);

struct CropResult {
  ImageTensor image;
  /// Crop window in source pixels.
  Rect region;
  /// Tight bounding box of the Otsu foreground (dermoscopic only).
  std::optional<Rect> mask_bbox;
  int threshold = -1;
  double foreground_fraction = 0.0;
  bool fallback = false;
  std::string warning;
};

struct CropOptions {
  /// Margin added on every side, as a fraction of the mask box size.
  double margin = 0.10;
  double min_foreground = 0.01;
  double max_foreground = 0.99;
  int output_size = kImageSize;
};

/// Crops around the darker Otsu class and resizes. A degenerate mask falls
/// back to resizing the whole image, with `fallback` set.
CropResult otsu_crop(const ImageTensor& image, const CropOptions& options = {});

/// Crops to a manual box and resizes; a missing box falls back to the full
/// image. Throws when the box leaves the image.
CropResult bbox_crop(const ImageTensor& image, const std::optional<Rect>& bbox,
                     int output_size = kImageSize);

/// Dispatches on the record's image type.
CropResult preprocess_record(const SampleRecord& record, const ImageTensor& image);

struct AugmentParams {
  int quarter_turns = 0;
  double angle_degrees = 0.0;
  bool hflip = false;
  bool vflip = false;
  std::array<int, 3> channel_shift{0, 0, 0};

  bool is_identity() const {
    return quarter_turns == 0 && angle_degrees == 0.0 && !hflip && !vflip &&
           channel_shift == std::array<int, 3>{0, 0, 0};
  }
};

struct AugmentOptions {
  double max_angle_degrees = 15.0;
  /// Per-channel shift bound as a fraction of the 0..255 range.
  double max_shift_fraction = 0.10;
  double p_small_rotation = 0.5;
  double p_flip = 0.5;
  double p_shift = 0.5;
};

AugmentParams draw_augment_params(std::uint64_t seed, const AugmentOptions& options = {});
/// Order: quarter turns, small rotation (reflect padding), flips, shifts.
ImageTensor apply_augment(const ImageTensor& image, const AugmentParams& params);
ImageTensor augment(const ImageTensor& image, std::uint64_t seed, const AugmentOptions& options = {});

/// Preprocessed images keyed by sample id, loaded from a cache directory or
/// computed from the manifest's image references on first use.
class ImageStore {
 public:
  /// `base_dir` resolves relative image_ref paths; `cache_dir` (optional)
  /// holds <id>.png files written by `write_preprocess_cache`.
  ImageStore(std::filesystem::path base_dir, std::optional<std::filesystem::path> cache_dir = {});

  const ImageTensor& get(const SampleRecord& record);
  /// Flags of records processed so far.
  const std::map<std::string, CropResult>& crops() const { return crops_; }

 private:
  std::filesystem::path base_dir_;
  std::optional<std::filesystem::path> cache_dir_;
  std::map<std::string, ImageTensor> images_;
  std::map<std::string, CropResult> crops_;
};

struct CacheEntry {
  std::string sample_id;
  std::string file;
  bool fallback = false;
  std::string warning;
  /// Set when a notes file was supplied: note token count was cut to 512.
  std::optional<bool> truncated;
};

/// Writes <id>.png for every record plus index.jsonl with fallback flags.
std::vector<CacheEntry> write_preprocess_cache(const Corpus& corpus,
                                               const std::filesystem::path& base_dir,
                                               const std::filesystem::path& out_dir,
                                               const std::map<std::string, bool>& truncation = {});

}  // namespace mmcl
