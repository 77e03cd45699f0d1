#include "mmcl/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mmcl/util.hpp"

namespace mmcl {

namespace {

cv::Mat to_mat(const ImageTensor& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  std::copy(img.pixels.begin(), img.pixels.end(), m.data);
  return m;
}

ImageTensor from_mat(const cv::Mat& m, std::string id) {
  cv::Mat rgb = m.isContinuous() ? m : m.clone();
  ImageTensor img(rgb.rows, rgb.cols, std::move(id));
  std::copy(rgb.data, rgb.data + img.pixels.size(), img.pixels.begin());
  return img;
}

std::string file_stem_for(const std::string& id) {
  std::string s = id;
  for (auto& c : s) {
    if (c == '/' || c == '\\') c = '_';
  }
  return s;
}

}  // namespace

ImageTensor decode_image(std::string_view bytes, std::string sample_id) {
  std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
  cv::Mat bgr = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error("cannot decode image data");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb, std::move(sample_id));
}

ImageTensor read_image(const std::filesystem::path& path, std::string sample_id) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb, std::move(sample_id));
}

std::string encode_png(const ImageTensor& image) {
  cv::Mat bgr;
  cv::cvtColor(to_mat(image), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", bgr, buf)) throw Error("PNG encoding failed");
  return std::string(buf.begin(), buf.end());
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  write_file(path, encode_png(image));
}

ImageTensor resize(const ImageTensor& image, int size) {
  if (image.empty()) throw Error("cannot resize an empty image");
  if (image.height == size && image.width == size) return image;
  cv::Mat out;
  const bool shrinking = image.height > size && image.width > size;
  cv::resize(to_mat(image), out, cv::Size(size, size), 0, 0,
             shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  return from_mat(out, image.sample_id);
}

std::vector<std::uint8_t> luminance(const ImageTensor& image) {
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(image.height) * image.width);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const unsigned r = image.pixels[3 * i], g = image.pixels[3 * i + 1], b = image.pixels[3 * i + 2];
    gray[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return gray;
}

int otsu_threshold(std::span<const std::uint8_t> gray) {
  if (gray.empty()) throw Error("otsu_threshold: empty image");
  std::array<std::uint64_t, 256> hist{};
  for (auto v : gray) ++hist[v];
  const double total = static_cast<double>(gray.size());
  double sum_all = 0.0;
  for (int t = 0; t < 256; ++t) sum_all += t * static_cast<double>(hist[t]);

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    w0 += static_cast<double>(hist[t]);
    sum0 += t * static_cast<double>(hist[t]);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  // A single-valued image has no split; everything lands in the lower class.
  if (best < 0.0) return 255;
  return best_t;
}

CropResult otsu_crop(const ImageTensor& image, const CropOptions& options) {
  if (image.empty()) throw Error("otsu_crop: empty image");
  CropResult res;
  const auto gray = luminance(image);
  res.threshold = otsu_threshold(gray);

  int x0 = image.width, y0 = image.height, x1 = -1, y1 = -1;
  std::size_t fg = 0;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (gray[static_cast<std::size_t>(y) * image.width + x] <= res.threshold) {
        ++fg;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  }
  res.foreground_fraction = static_cast<double>(fg) / static_cast<double>(gray.size());
  if (res.foreground_fraction < options.min_foreground ||
      res.foreground_fraction > options.max_foreground) {
    res.fallback = true;
    res.warning = "degenerate Otsu mask (foreground fraction " +
                  std::to_string(res.foreground_fraction) + "); using the full image";
    res.region = {0, 0, image.width, image.height};
    res.image = resize(image, options.output_size);
    return res;
  }

  res.mask_bbox = Rect{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
  const int mx = static_cast<int>(std::lround(options.margin * res.mask_bbox->w));
  const int my = static_cast<int>(std::lround(options.margin * res.mask_bbox->h));
  const int rx0 = std::max(0, x0 - mx), ry0 = std::max(0, y0 - my);
  const int rx1 = std::min(image.width - 1, x1 + mx), ry1 = std::min(image.height - 1, y1 + my);
  res.region = {rx0, ry0, rx1 - rx0 + 1, ry1 - ry0 + 1};

  cv::Mat crop = to_mat(image)(cv::Rect(res.region.x, res.region.y, res.region.w, res.region.h));
  res.image = resize(from_mat(crop.clone(), image.sample_id), options.output_size);
  return res;
}

CropResult bbox_crop(const ImageTensor& image, const std::optional<Rect>& bbox, int output_size) {
  if (image.empty()) throw Error("bbox_crop: empty image");
  CropResult res;
  if (!bbox) {
    res.fallback = true;
    res.warning = "no bounding box; using the full image";
    res.region = {0, 0, image.width, image.height};
    res.image = resize(image, output_size);
    return res;
  }
  const Rect& b = *bbox;
  if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > image.width ||
      b.y + b.h > image.height) {
    throw Error("bbox (" + std::to_string(b.x) + "," + std::to_string(b.y) + "," +
                std::to_string(b.w) + "," + std::to_string(b.h) + ") lies outside the " +
                std::to_string(image.width) + "x" + std::to_string(image.height) + " image");
  }
  res.region = b;
  cv::Mat crop = to_mat(image)(cv::Rect(b.x, b.y, b.w, b.h));
  res.image = resize(from_mat(crop.clone(), image.sample_id), output_size);
  return res;
}

CropResult preprocess_record(const SampleRecord& record, const ImageTensor& image) {
  CropResult res = record.image_type == ImageType::dermoscopic ? otsu_crop(image)
                                                               : bbox_crop(image, record.bbox);
  res.image.sample_id = record.id;
  return res;
}

AugmentParams draw_augment_params(std::uint64_t seed, const AugmentOptions& options) {
  Rng rng(seed);
  AugmentParams p;
  p.quarter_turns = static_cast<int>(rng.index(4));
  if (rng.bernoulli(options.p_small_rotation)) {
    p.angle_degrees = rng.uniform(-options.max_angle_degrees, options.max_angle_degrees);
  }
  p.hflip = rng.bernoulli(options.p_flip);
  p.vflip = rng.bernoulli(options.p_flip);
  if (rng.bernoulli(options.p_shift)) {
    const int bound = static_cast<int>(std::floor(options.max_shift_fraction * 255.0));
    for (auto& s : p.channel_shift) s = static_cast<int>(rng.index(2 * bound + 1)) - bound;
  }
  return p;
}

ImageTensor apply_augment(const ImageTensor& image, const AugmentParams& params) {
  if (params.is_identity()) return image;
  cv::Mat m = to_mat(image);
  switch (((params.quarter_turns % 4) + 4) % 4) {
    case 1:
      cv::rotate(m, m, cv::ROTATE_90_CLOCKWISE);
      break;
    case 2:
      cv::rotate(m, m, cv::ROTATE_180);
      break;
    case 3:
      cv::rotate(m, m, cv::ROTATE_90_COUNTERCLOCKWISE);
      break;
    default:
      break;
  }
  if (params.angle_degrees != 0.0) {
    const cv::Point2f center((m.cols - 1) / 2.0f, (m.rows - 1) / 2.0f);
    cv::Mat rot = cv::getRotationMatrix2D(center, params.angle_degrees, 1.0);
    cv::Mat out;
    cv::warpAffine(m, out, rot, m.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    m = out;
  }
  if (params.hflip && params.vflip) {
    cv::flip(m, m, -1);
  } else if (params.hflip) {
    cv::flip(m, m, 1);
  } else if (params.vflip) {
    cv::flip(m, m, 0);
  }
  ImageTensor out = from_mat(m, image.sample_id);
  if (params.channel_shift != std::array<int, 3>{0, 0, 0}) {
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      const int v = out.pixels[i] + params.channel_shift[i % 3];
      out.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
  }
  return out;
}

ImageTensor augment(const ImageTensor& image, std::uint64_t seed, const AugmentOptions& options) {
  return apply_augment(image, draw_augment_params(seed, options));
}

ImageStore::ImageStore(std::filesystem::path base_dir,
                       std::optional<std::filesystem::path> cache_dir)
    : base_dir_(std::move(base_dir)), cache_dir_(std::move(cache_dir)) {}

const ImageTensor& ImageStore::get(const SampleRecord& record) {
  if (auto it = images_.find(record.id); it != images_.end()) return it->second;
  if (cache_dir_) {
    const auto cached = *cache_dir_ / (file_stem_for(record.id) + ".png");
    if (std::filesystem::exists(cached)) {
      auto img = read_image(cached, record.id);
      if (img.height != kImageSize || img.width != kImageSize) {
        throw Error("cached image " + cached.string() + " is not 224x224");
      }
      return images_.emplace(record.id, std::move(img)).first->second;
    }
  }
  std::filesystem::path src = record.image_ref;
  if (src.is_relative()) src = base_dir_ / src;
  auto crop = preprocess_record(record, read_image(src, record.id));
  auto [it, _] = images_.emplace(record.id, crop.image);
  crop.image = {};
  crops_.emplace(record.id, std::move(crop));
  return it->second;
}

std::vector<CacheEntry> write_preprocess_cache(const Corpus& corpus,
                                               const std::filesystem::path& base_dir,
                                               const std::filesystem::path& out_dir,
                                               const std::map<std::string, bool>& truncation) {
  std::filesystem::create_directories(out_dir);
  std::vector<CacheEntry> entries;
  std::string index;
  for (const auto& r : corpus.records()) {
    std::filesystem::path src = r.image_ref;
    if (src.is_relative()) src = base_dir / src;
    auto crop = preprocess_record(r, read_image(src, r.id));
    CacheEntry e;
    e.sample_id = r.id;
    e.file = file_stem_for(r.id) + ".png";
    e.fallback = crop.fallback;
    e.warning = crop.warning;
    if (auto it = truncation.find(r.id); it != truncation.end()) e.truncated = it->second;
    write_png(out_dir / e.file, crop.image);

    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    j["file"] = e.file;
    j["fallback"] = e.fallback;
    j["warning"] = e.warning;
    if (e.truncated) j["truncated"] = *e.truncated;
    index += j.dump();
    index += '\n';
    entries.push_back(std::move(e));
  }
  write_file(out_dir / "index.jsonl", index);
  return entries;
}

}  // namespace mmcl
