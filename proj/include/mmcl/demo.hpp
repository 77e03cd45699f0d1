#pragma once

#include <filesystem>

#include "mmcl/corpus.hpp"
#include "mmcl/preprocess.hpp"

namespace mmcl {

/// Toy corpus: five visually distinct lesion archetypes on synthetic skin.
/// Two internal sources (derm_a dermoscopic, derm_b clinical with boxes)
/// and one external source (derm_ext) with shifted colour statistics that
/// only appears in the test split.
struct DemoCounts {
  /// Train counts per class in label order; deliberately imbalanced.
  ClassCounts train{36, 52, 28, 40, 44};
  std::size_t val_per_class = 10;
  std::size_t test_internal_per_class = 14;
  std::size_t test_external_per_class = 6;
};

/// Draws one lesion image. `bbox` receives the lesion box for clinical shots.
ImageTensor render_demo_lesion(Label label, ImageType type, bool external, std::uint64_t seed,
                               Rect* bbox = nullptr);

/// Writes images/<id>.png and manifest.jsonl under `out_dir`.
Corpus write_demo_corpus(const std::filesystem::path& out_dir, std::uint64_t seed,
                         const DemoCounts& counts = {});

}  // namespace mmcl
