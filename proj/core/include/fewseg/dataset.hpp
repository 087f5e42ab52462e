#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

/// Class partition for the strict few-shot protocol: test classes are the
/// residue class fold_index modulo num_folds, training classes the rest.
struct FoldSpec {
    int num_classes = 80;
    int num_folds = 4;
    int fold_index = 0;
};

std::pair<std::vector<int>, std::vector<int>> build_folds(const FoldSpec& spec);

/// One few-shot task: n annotated supports plus a query.
struct Episode {
    std::vector<std::pair<Image, Mask>> supports;
    Image query_image;
    Mask query_mask;
    int class_id = 0;
};

struct DatasetRecord {
    Image image;
    std::map<int, Mask> masks;  // class id -> binary mask (nonempty)
    std::string image_path;
    std::map<int, std::string> mask_paths;
};

struct DatasetIndex {
    std::vector<DatasetRecord> records;
    std::vector<int> classes() const;
};

struct SamplerOptions {
    bool allow_empty_query = false;
};

/// Seed-deterministic episode sampling. Classes without at least
/// n_shot + 1 usable images are skipped; throws if none remain. The query
/// is never reused inside its own support set.
std::vector<Episode> sample_episodes(const DatasetIndex& index, const std::vector<int>& classes,
                                     int n_shot, int count, uint64_t seed,
                                     const SamplerOptions& opt = {});

enum class ShapeKind { kCircle, kSquare, kTriangle, kBar };

Mask rasterize_instance(ShapeKind kind, double cx, double cy, double size, int h, int w);

/// Synthetic dataset: classes are (shape, palette color) pairs; each image
/// holds 1-3 instances of its primary class plus 0-2 distractors of other
/// classes, with per-pixel ownership resolving overlaps. Pixel values are
/// quantized to the 8-bit grid so disk round-trips are exact.
DatasetIndex gen_synthetic(int num_classes, int images_per_class, int canvas_h, int canvas_w,
                           uint64_t seed);

// binary PPM (P6) / PGM (P5, values 0 or 255) image files
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Mask& mask);
Mask read_pgm(const std::string& path);

/// Writes images/, masks/ and manifest.jsonl (one JSON object per line:
/// {"image": path, "masks": {"<class>": path}}) under dir.
void save_index(const DatasetIndex& index, const std::string& dir);
DatasetIndex load_index(const std::string& manifest_path);

}  // namespace fewseg
