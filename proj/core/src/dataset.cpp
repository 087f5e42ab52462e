#include "fewseg/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

namespace fs = std::filesystem;

namespace fewseg {

std::pair<std::vector<int>, std::vector<int>> build_folds(const FoldSpec& spec) {
    if (spec.num_folds < 1 || spec.fold_index < 0 || spec.fold_index >= spec.num_folds)
        throw std::invalid_argument("build_folds: fold_index out of range");
    if (spec.num_classes < 1 || spec.num_classes % spec.num_folds != 0)
        throw std::invalid_argument("build_folds: num_classes must divide evenly into folds");
    std::vector<int> train, test;
    for (int c = 0; c < spec.num_classes; ++c) {
        if (c % spec.num_folds == spec.fold_index)
            test.push_back(c);
        else
            train.push_back(c);
    }
    return {train, test};
}

std::vector<int> DatasetIndex::classes() const {
    std::set<int> seen;
    for (const DatasetRecord& r : records)
        for (const auto& [cls, mask] : r.masks)
            if (!mask.empty_mask()) seen.insert(cls);
    return std::vector<int>(seen.begin(), seen.end());
}

std::vector<Episode> sample_episodes(const DatasetIndex& index, const std::vector<int>& classes,
                                     int n_shot, int count, uint64_t seed,
                                     const SamplerOptions& opt) {
    if (n_shot < 1) throw std::invalid_argument("sample_episodes: n_shot must be >= 1");
    if (count < 0) throw std::invalid_argument("sample_episodes: negative count");

    std::map<int, std::vector<int>> usable;  // class -> record indices with a nonempty mask
    for (size_t i = 0; i < index.records.size(); ++i)
        for (const auto& [cls, mask] : index.records[i].masks)
            if (!mask.empty_mask()) usable[cls].push_back(static_cast<int>(i));

    std::vector<int> eligible;
    for (int c : classes) {
        auto it = usable.find(c);
        if (it != usable.end() && static_cast<int>(it->second.size()) >= n_shot + 1)
            eligible.push_back(c);
    }
    if (eligible.empty())
        throw std::invalid_argument("sample_episodes: no class has enough images for n_shot+1");

    Rng rng(mix_seed(seed, 0xe915) );
    std::vector<Episode> out;
    out.reserve(static_cast<size_t>(count));
    for (int e = 0; e < count; ++e) {
        int cls = eligible[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(eligible.size()) - 1))];
        std::vector<int> pool = usable[cls];
        int qpos = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
        int query = pool[static_cast<size_t>(qpos)];
        pool.erase(pool.begin() + qpos);
        // partial shuffle picks n_shot distinct supports uniformly
        for (int i = 0; i < n_shot; ++i) {
            int j = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        Episode ep;
        ep.class_id = cls;
        for (int i = 0; i < n_shot; ++i) {
            const DatasetRecord& r = index.records[static_cast<size_t>(pool[static_cast<size_t>(i)])];
            ep.supports.emplace_back(r.image, r.masks.at(cls));
        }
        const DatasetRecord& q = index.records[static_cast<size_t>(query)];
        ep.query_image = q.image;
        auto mit = q.masks.find(cls);
        if (mit != q.masks.end()) {
            ep.query_mask = mit->second;
        } else if (opt.allow_empty_query) {
            ep.query_mask = Mask(q.image.h, q.image.w);
        } else {
            throw std::logic_error("sample_episodes: query without mask while empties disallowed");
        }
        out.push_back(std::move(ep));
    }
    return out;
}

Mask rasterize_instance(ShapeKind kind, double cx, double cy, double size, int h, int w) {
    Mask m(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double dx = x - cx, dy = y - cy;
            bool in = false;
            switch (kind) {
                case ShapeKind::kCircle:
                    in = dx * dx + dy * dy <= size * size;
                    break;
                case ShapeKind::kSquare:
                    in = std::abs(dx) <= size && std::abs(dy) <= size;
                    break;
                case ShapeKind::kTriangle:
                    // upward isoceles: apex at cy - size, base at cy + size
                    in = dy >= -size && dy <= size && std::abs(dx) <= 0.5 * (dy + size);
                    break;
                case ShapeKind::kBar:
                    in = std::abs(dx) <= size && std::abs(dy) <= std::max(1.0, size / 4.0);
                    break;
            }
            if (in) m.at(y, x) = 1;
        }
    }
    return m;
}

namespace {

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Palette {
    double r, g, b;
};

constexpr Palette kPalette[] = {
    {0.90, 0.20, 0.20}, {0.20, 0.85, 0.25}, {0.25, 0.30, 0.90}, {0.90, 0.85, 0.20},
    {0.85, 0.25, 0.80}, {0.20, 0.80, 0.85}, {0.95, 0.55, 0.20}, {0.55, 0.30, 0.85},
};
constexpr int kPaletteSize = 8;

struct Instance {
    int cls;
    ShapeKind kind;
    double cx, cy, size;
};

Instance random_instance(int cls, int h, int w, Rng& rng) {
    Instance in;
    in.cls = cls;
    in.kind = static_cast<ShapeKind>(cls % 4);
    double min_dim = std::min(h, w);
    in.size = min_dim * (0.08 + 0.12 * rng.uniform());
    in.cx = in.size + rng.uniform() * (w - 2.0 * in.size);
    in.cy = in.size + rng.uniform() * (h - 2.0 * in.size);
    return in;
}

}  // namespace

DatasetIndex gen_synthetic(int num_classes, int images_per_class, int canvas_h, int canvas_w,
                           uint64_t seed) {
    if (num_classes < 1 || images_per_class < 1)
        throw std::invalid_argument("gen_synthetic: counts must be positive");
    Rng rng(mix_seed(seed, 0x5e7d));
    DatasetIndex index;
    for (int cls = 0; cls < num_classes; ++cls) {
        for (int i = 0; i < images_per_class; ++i) {
            DatasetRecord rec;
            rec.image = Image(canvas_h, canvas_w);
            double bg = 0.12 + 0.18 * rng.uniform();
            for (int y = 0; y < canvas_h; ++y)
                for (int x = 0; x < canvas_w; ++x)
                    for (int c = 0; c < 3; ++c) rec.image.at(y, x, c) = quantize8(bg);

            std::vector<Instance> instances;
            int distractors = num_classes > 1 ? rng.uniform_int(0, 2) : 0;
            for (int d = 0; d < distractors; ++d) {
                int other = rng.uniform_int(0, num_classes - 2);
                if (other >= cls) ++other;
                instances.push_back(random_instance(other, canvas_h, canvas_w, rng));
            }
            // primary instances drawn last so the primary mask stays nonempty
            int primary = rng.uniform_int(1, 3);
            for (int p = 0; p < primary; ++p)
                instances.push_back(random_instance(cls, canvas_h, canvas_w, rng));

            std::vector<int> owner(static_cast<size_t>(canvas_h) * canvas_w, -1);
            for (const Instance& in : instances) {
                Mask m = rasterize_instance(in.kind, in.cx, in.cy, in.size, canvas_h, canvas_w);
                const Palette& pal = kPalette[in.cls % kPaletteSize];
                double jitter = 0.9 + 0.1 * rng.uniform();
                double r = quantize8(pal.r * jitter);
                double g = quantize8(pal.g * jitter);
                double b = quantize8(pal.b * jitter);
                for (int y = 0; y < canvas_h; ++y)
                    for (int x = 0; x < canvas_w; ++x)
                        if (m.at(y, x)) {
                            rec.image.at(y, x, 0) = r;
                            rec.image.at(y, x, 1) = g;
                            rec.image.at(y, x, 2) = b;
                            owner[static_cast<size_t>(y) * canvas_w + x] = in.cls;
                        }
            }
            std::set<int> present;
            for (const Instance& in : instances) present.insert(in.cls);
            for (int p : present) {
                Mask m(canvas_h, canvas_w);
                for (size_t j = 0; j < owner.size(); ++j) m.a[j] = owner[j] == p ? 1 : 0;
                if (!m.empty_mask()) rec.masks[p] = std::move(m);
            }
            index.records.push_back(std::move(rec));
        }
    }
    return index;
}

namespace {

void skip_pnm_whitespace(std::istream& in) {
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
}

int read_pnm_int(std::istream& in) {
    skip_pnm_whitespace(in);
    int v = -1;
    in >> v;
    if (!in) throw std::runtime_error("pnm: malformed header");
    return v;
}

}  // namespace

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> buf(img.a.size());
    for (size_t i = 0; i < img.a.size(); ++i)
        buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.a[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path);
    int w = read_pnm_int(in);
    int h = read_pnm_int(in);
    int maxval = read_pnm_int(in);
    if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported");
    in.get();  // single whitespace after maxval
    Image img(h, w);
    std::vector<unsigned char> buf(img.a.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.a[i] = buf[i] / 255.0;
    return img;
}

void write_pgm(const std::string& path, const Mask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    std::vector<unsigned char> buf(mask.a.size());
    for (size_t i = 0; i < mask.a.size(); ++i) buf[i] = mask.a[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Mask read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path);
    int w = read_pnm_int(in);
    int h = read_pnm_int(in);
    int maxval = read_pnm_int(in);
    if (maxval != 255) throw std::runtime_error("read_pgm: only maxval 255 supported");
    in.get();
    Mask mask(h, w);
    std::vector<unsigned char> buf(mask.a.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("read_pgm: truncated pixel data in " + path);
    for (size_t i = 0; i < buf.size(); ++i) {
        if (buf[i] == 0)
            mask.a[i] = 0;
        else if (buf[i] == 255)
            mask.a[i] = 1;
        else
            throw std::runtime_error("read_pgm: mask is not binary: " + path);
    }
    return mask;
}

void save_index(const DatasetIndex& index, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("save_index: cannot write manifest in " + dir);
    char name[64];
    for (size_t i = 0; i < index.records.size(); ++i) {
        const DatasetRecord& rec = index.records[i];
        std::snprintf(name, sizeof(name), "images/img_%05zu.ppm", i);
        std::string image_rel = name;
        write_ppm((fs::path(dir) / image_rel).string(), rec.image);
        nlohmann::json entry;
        entry["image"] = image_rel;
        nlohmann::json masks = nlohmann::json::object();
        for (const auto& [cls, mask] : rec.masks) {
            std::snprintf(name, sizeof(name), "masks/img_%05zu_cls_%d.pgm", i, cls);
            std::string mask_rel = name;
            write_pgm((fs::path(dir) / mask_rel).string(), mask);
            masks[std::to_string(cls)] = mask_rel;
        }
        entry["masks"] = masks;
        manifest << entry.dump() << "\n";
    }
}

DatasetIndex load_index(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_index: cannot open " + manifest_path);
    fs::path base = fs::path(manifest_path).parent_path();
    DatasetIndex index;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json entry = nlohmann::json::parse(line);
        DatasetRecord rec;
        rec.image_path = entry.at("image").get<std::string>();
        rec.image = read_ppm((base / rec.image_path).string());
        for (const auto& [cls_str, rel] : entry.at("masks").items()) {
            int cls = std::stoi(cls_str);
            std::string rel_path = rel.get<std::string>();
            rec.masks[cls] = read_pgm((base / rel_path).string());
            rec.mask_paths[cls] = rel_path;
        }
        index.records.push_back(std::move(rec));
    }
    return index;
}

}  // namespace fewseg
