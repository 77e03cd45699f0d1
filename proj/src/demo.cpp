#include "mmcl/demo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

namespace mmcl {

namespace {

struct Archetype {
  cv::Scalar body;
  cv::Scalar accent;
  /// Lesion radius as a fraction of the shorter image side.
  double scale;
  std::vector<std::string> subclasses;
};

const Archetype& archetype(Label label) {
  static const std::array<Archetype, kNumClasses> table = {{
      {{160, 115, 75}, {215, 185, 140}, 0.22, {"seborrheic keratosis", "solar lentigo"}},
      {{95, 58, 40}, {65, 38, 28}, 0.16, {"melanocytic nevus", "dysplastic nevus"}},
      {{195, 90, 85}, {235, 222, 215}, 0.24, {}},
      {{210, 140, 150}, {105, 115, 150}, 0.20, {"nodular basal cell carcinoma", "superficial basal cell carcinoma"}},
      {{50, 38, 45}, {70, 80, 125}, 0.30, {"superficial spreading melanoma", "nodular melanoma"}},
  }};
  return table[static_cast<std::size_t>(label_index(label))];
}

cv::Point jitter_point(cv::Point2d c, double r, Rng& rng) {
  return {static_cast<int>(std::lround(c.x + rng.uniform(-r, r))),
          static_cast<int>(std::lround(c.y + rng.uniform(-r, r)))};
}

int iround(double v) { return static_cast<int>(std::lround(v)); }

/// Draws the lesion and returns its extent radius around the centre.
double draw_lesion(cv::Mat& canvas, Label label, cv::Point2d c, double r, Rng& rng) {
  const Archetype& a = archetype(label);
  const cv::Point center(iround(c.x), iround(c.y));
  const double angle = rng.uniform(0.0, 180.0);
  switch (label) {
    case Label::BEK: {
      cv::ellipse(canvas, center, cv::Size(iround(1.3 * r), iround(0.9 * r)), angle, 0, 360, a.body, cv::FILLED,
                  cv::LINE_AA);
      for (int i = 0; i < 6; ++i) {
        cv::circle(canvas, jitter_point(c, 0.6 * r, rng), std::max(1, iround(r / 8)), a.accent, cv::FILLED,
                   cv::LINE_AA);
      }
      return 1.3 * r;
    }
    case Label::NEV: {
      cv::circle(canvas, center, iround(0.8 * r), a.body, cv::FILLED, cv::LINE_AA);
      cv::circle(canvas, center, iround(0.4 * r), a.accent, cv::FILLED, cv::LINE_AA);
      return 0.8 * r;
    }
    case Label::ACK: {
      std::vector<cv::Point> poly;
      double extent = 0.0;
      for (int i = 0; i < 9; ++i) {
        const double t = 2.0 * M_PI * i / 9.0;
        const double rr = r * rng.uniform(0.7, 1.2);
        extent = std::max(extent, rr);
        poly.emplace_back(iround(c.x + rr * std::cos(t)), iround(c.y + rr * std::sin(t)));
      }
      cv::fillPoly(canvas, std::vector<std::vector<cv::Point>>{poly}, a.body, cv::LINE_AA);
      for (int i = 0; i < 10; ++i) {
        cv::ellipse(canvas, jitter_point(c, 0.55 * r, rng), cv::Size(std::max(1, iround(r / 7)), std::max(1, iround(r / 14))),
                    rng.uniform(0.0, 180.0), 0, 360, a.accent, cv::FILLED, cv::LINE_AA);
      }
      return extent;
    }
    case Label::BCC: {
      cv::ellipse(canvas, center, cv::Size(iround(r), iround(0.85 * r)), angle, 0, 360, a.body, cv::FILLED,
                  cv::LINE_AA);
      for (int i = 0; i < 7; ++i) {
        cv::circle(canvas, jitter_point(c, 0.55 * r, rng), std::max(1, iround(r / 9)), a.accent, cv::FILLED,
                   cv::LINE_AA);
      }
      for (int i = 0; i < 3; ++i) {
        cv::line(canvas, jitter_point(c, 0.6 * r, rng), jitter_point(c, 0.6 * r, rng), cv::Scalar(170, 40, 50), 1,
                 cv::LINE_AA);
      }
      return r;
    }
    case Label::MEL: {
      double extent = 0.0;
      for (int i = 0; i < 3; ++i) {
        const cv::Point2d off(rng.uniform(-0.35, 0.35) * r, rng.uniform(-0.35, 0.35) * r);
        const double ax = r * rng.uniform(0.6, 0.8), ay = r * rng.uniform(0.45, 0.7);
        extent = std::max(extent, std::hypot(off.x, off.y) + std::max(ax, ay));
        cv::ellipse(canvas, cv::Point(iround(c.x + off.x), iround(c.y + off.y)), cv::Size(iround(ax), iround(ay)),
                    rng.uniform(0.0, 180.0), 0, 360, a.body, cv::FILLED, cv::LINE_AA);
      }
      cv::ellipse(canvas, jitter_point(c, 0.2 * r, rng), cv::Size(iround(0.4 * r), iround(0.3 * r)), angle, 0, 360,
                  a.accent, cv::FILLED, cv::LINE_AA);
      return extent;
    }
  }
  return r;
}

}  // namespace

ImageTensor render_demo_lesion(Label label, ImageType type, bool external, std::uint64_t seed, Rect* bbox) {
  Rng rng(seed);
  const bool clinical = type == ImageType::clinical;
  const int w = clinical ? 288 : 192, h = clinical ? 216 : 192;
  cv::Scalar skin = external ? cv::Scalar(215, 172, 160) : cv::Scalar(236, 202, 182);
  for (int ch = 0; ch < 3; ++ch) skin[ch] += rng.uniform(-8.0, 8.0);
  cv::Mat canvas(h, w, CV_8UC3, skin);

  const double side = std::min(w, h);
  const double r = archetype(label).scale * side * (clinical ? 0.6 : 1.0) * rng.uniform(0.85, 1.15);
  cv::Point2d c;
  if (clinical) {
    const double margin = 1.6 * r;
    c = {rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)};
  } else {
    c = {w / 2.0 + rng.uniform(-0.08, 0.08) * w, h / 2.0 + rng.uniform(-0.08, 0.08) * h};
  }
  const double extent = draw_lesion(canvas, label, c, r, rng);
  cv::GaussianBlur(canvas, canvas, cv::Size(5, 5), 1.2);

  ImageTensor img(h, w);
  const cv::Vec3d shift = external ? cv::Vec3d(20, -5, -20) : cv::Vec3d(0, 0, 0);
  for (int y = 0; y < h; ++y) {
    const auto* row = canvas.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = row[x][ch] + shift[ch] + 5.0 * rng.normal();
        img.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  if (bbox) {
    const double half = 1.2 * extent;
    const int x0 = std::max(0, iround(c.x - half)), y0 = std::max(0, iround(c.y - half));
    const int x1 = std::min(w, iround(c.x + half)), y1 = std::min(h, iround(c.y + half));
    *bbox = Rect{x0, y0, x1 - x0, y1 - y0};
  }
  return img;
}

Corpus write_demo_corpus(const std::filesystem::path& out_dir, std::uint64_t seed, const DemoCounts& counts) {
  std::filesystem::create_directories(out_dir / "images");
  std::vector<SampleRecord> records;
  std::size_t next_id = 1;

  auto emit = [&](Label label, Split split, const std::string& dataset) {
    char id[32];
    std::snprintf(id, sizeof(id), "demo-%04zu", next_id++);
    SampleRecord rec;
    rec.id = id;
    rec.image_ref = "images/" + rec.id + ".png";
    rec.label = label;
    rec.dataset = dataset;
    rec.split = split;
    const bool external = dataset == "derm_ext";
    rec.image_type = dataset == "derm_b" ? ImageType::clinical : ImageType::dermoscopic;

    Rng meta(derive_seed(seed, "demo-meta:" + rec.id));
    const auto& subs = archetype(label).subclasses;
    if (!subs.empty() && meta.bernoulli(0.4)) rec.subclass = subs[meta.index(subs.size())];
    // Manual boxes are missing for some clinical photos.
    const bool boxed = rec.image_type == ImageType::clinical && !meta.bernoulli(0.15);

    Rect box;
    ImageTensor img = render_demo_lesion(label, rec.image_type, external, derive_seed(seed, "demo-image:" + rec.id),
                                         boxed ? &box : nullptr);
    if (boxed) rec.bbox = box;
    write_png(out_dir / rec.image_ref, img);
    records.push_back(std::move(rec));
  };

  for (Label label : kAllLabels) {
    const std::size_t n = counts.train[static_cast<std::size_t>(label_index(label))];
    for (std::size_t i = 0; i < n; ++i) emit(label, Split::train, i % 2 == 0 ? "derm_a" : "derm_b");
  }
  for (Label label : kAllLabels) {
    for (std::size_t i = 0; i < counts.val_per_class; ++i) {
      emit(label, Split::val, i % 2 == 0 ? "derm_a" : "derm_b");
    }
  }
  for (Label label : kAllLabels) {
    for (std::size_t i = 0; i < counts.test_internal_per_class; ++i) {
      emit(label, Split::test, i % 2 == 0 ? "derm_a" : "derm_b");
    }
    for (std::size_t i = 0; i < counts.test_external_per_class; ++i) emit(label, Split::test, "derm_ext");
  }

  Corpus corpus(std::move(records));
  save_manifest(corpus, out_dir / "manifest.jsonl");
  return corpus;
}

}  // namespace mmcl
