#include "m2s/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace m2s {

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("write_ppm: cannot write '" + path + "'");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("read_ppm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ValidationError("read_ppm: '" + path + "' is not a P6 file");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw ValidationError("read_ppm: unsupported header in '" + path + "'");
    }
    in.get();  // single whitespace after maxval
    Image img;
    img.w = w;
    img.h = h;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!in) throw ValidationError("read_ppm: truncated pixel data in '" + path + "'");
    return img;
}

std::string image_id_from_index(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return std::string(buf);
}

namespace {

// Colored mottle: an independent coarse random grid per channel sampled
// bilinearly, plus fine per-pixel jitter and a sprinkle of 1-3 px speckle
// distractors in object-like colors. The speckles sit below the minimum
// object size and are not annotated.
void paint_background(Image& img, const SceneSpec& spec, Rng& rng) {
    const int cell = 8;
    const int gw = img.w / cell + 2;
    const int gh = img.h / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gh * 3);
    for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double fx = static_cast<double>(x) / cell;
            double fy = static_cast<double>(y) / cell;
            int gx = static_cast<int>(fx);
            int gy = static_cast<int>(fy);
            double tx = fx - gx;
            double ty = fy - gy;
            for (int ch = 0; ch < 3; ++ch) {
                const double* g = &grid[static_cast<std::size_t>(ch) * gw * gh];
                double v00 = g[gy * gw + gx];
                double v01 = g[gy * gw + gx + 1];
                double v10 = g[(gy + 1) * gw + gx];
                double v11 = g[(gy + 1) * gw + gx + 1];
                double coarse = (v00 * (1 - tx) + v01 * tx) * (1 - ty) +
                                (v10 * (1 - tx) + v11 * tx) * ty;
                double v = spec.bg_base + coarse * spec.bg_coarse +
                           rng.uniform(-1.0, 1.0) * spec.bg_fine;
                img.at(x, y, ch) =
                    static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        }
    }
}

// Muted per-class hues: separable, but close enough to the background mottle
// that detection needs real features rather than a brightness threshold.
void class_color(int class_id, Rng& rng, std::uint8_t rgb[3]) {
    auto channel = [&](int lo, int hi) {
        return static_cast<std::uint8_t>(rng.uniform_int(lo, hi));
    };
    switch (class_id) {
        case 0:  // warm disk
            rgb[0] = channel(150, 195);
            rgb[1] = channel(60, 100);
            rgb[2] = channel(60, 100);
            break;
        case 1:  // cool square
            rgb[0] = channel(60, 100);
            rgb[1] = channel(60, 100);
            rgb[2] = channel(150, 195);
            break;
        default:  // green triangle
            rgb[0] = channel(60, 100);
            rgb[1] = channel(150, 195);
            rgb[2] = channel(60, 100);
            break;
    }
}

// Unannotated sub-object clutter in object-like colors.
void paint_speckles(Image& img, const SceneSpec& spec, Rng& rng) {
    for (int k = 0; k < spec.bg_speckles; ++k) {
        const int side = rng.uniform_int(1, 3);
        const int x0 = rng.uniform_int(0, img.w - side);
        const int y0 = rng.uniform_int(0, img.h - side);
        std::uint8_t rgb[3];
        class_color(rng.uniform_int(0, spec.num_classes - 1), rng, rgb);
        for (int y = y0; y < y0 + side; ++y) {
            for (int x = x0; x < x0 + side; ++x) {
                for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = rgb[ch];
            }
        }
    }
}

bool paint_shape(Image& img, int class_id, int x0, int y0, int size,
                 const std::uint8_t rgb[3], Box& out_box);

// Large unannotated structures in the same palette and shape family. Locally
// their edges and corners look like small objects; only the full extent tells
// them apart, which is what the annotated small-object regime excludes.
void paint_structures(Image& img, const SceneSpec& spec, Rng& rng) {
    for (int k = 0; k < spec.bg_structures; ++k) {
        const int max_side = std::min(img.w - 2, 48);
        const int min_side = std::min(max_side, 2 * spec.size_max);
        const int size = rng.uniform_int(min_side, max_side);
        const int x0 = rng.uniform_int(0, img.w - size);
        const int y0 = rng.uniform_int(0, img.h - size);
        std::uint8_t rgb[3];
        const int kind = rng.uniform_int(0, spec.num_classes - 1);
        class_color(kind, rng, rgb);
        Box ignored;
        paint_shape(img, kind, x0, y0, size, rgb, ignored);
    }
}

// Rasterizes a class shape into the size x size box anchored at (x0, y0) and
// returns the exact bounding box of the painted pixels.
bool paint_shape(Image& img, int class_id, int x0, int y0, int size,
                 const std::uint8_t rgb[3], Box& out_box) {
    int min_x = img.w, min_y = img.h, max_x = -1, max_y = -1;
    const double cx = x0 + size * 0.5;
    const double cy = y0 + size * 0.5;
    const double r = size * 0.5;
    for (int y = y0; y < y0 + size; ++y) {
        for (int x = x0; x < x0 + size; ++x) {
            const double px = x + 0.5;
            const double py = y + 0.5;
            bool inside = false;
            switch (class_id) {
                case 0: {
                    double dx = px - cx, dy = py - cy;
                    inside = dx * dx + dy * dy <= r * r;
                    break;
                }
                case 1:
                    inside = true;
                    break;
                default: {
                    // apex at top-center, base along the bottom edge
                    double t = (py - y0) / size;  // 0 at apex row, 1 at base
                    double half_width = t * r;
                    inside = std::abs(px - cx) <= half_width;
                    break;
                }
            }
            if (!inside) continue;
            for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = rgb[ch];
            min_x = std::min(min_x, x);
            min_y = std::min(min_y, y);
            max_x = std::max(max_x, x);
            max_y = std::max(max_y, y);
        }
    }
    if (max_x < 0) return false;
    out_box = Box{static_cast<double>(min_x), static_cast<double>(min_y),
                  static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
    return true;
}

}  // namespace

Image generate_image(const SceneSpec& spec, int index, std::vector<GtBox>& objects,
                     std::vector<std::string>* gen_log) {
    Rng rng(spec.seed ^ ((static_cast<std::uint64_t>(index) + 1) * 0xD1B54A32D192ED03ull));
    Image img;
    img.w = spec.image_size;
    img.h = spec.image_size;
    img.rgb.assign(static_cast<std::size_t>(img.w) * img.h * 3, 0);
    paint_background(img, spec, rng);
    paint_structures(img, spec, rng);
    paint_speckles(img, spec, rng);

    objects.clear();
    const int count = rng.uniform_int(spec.objects_min, spec.objects_max);
    for (int k = 0; k < count; ++k) {
        const int class_id = rng.uniform_int(0, spec.num_classes - 1);
        const int size = rng.uniform_int(spec.size_min, spec.size_max);
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            const int x0 = rng.uniform_int(0, spec.image_size - size);
            const int y0 = rng.uniform_int(0, spec.image_size - size);
            const Box cand{static_cast<double>(x0), static_cast<double>(y0),
                           static_cast<double>(x0 + size), static_cast<double>(y0 + size)};
            bool overlaps = false;
            for (const GtBox& g : objects) {
                if (iou(cand, g.box) > 0.1) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            std::uint8_t rgb[3];
            class_color(class_id, rng, rgb);
            Box painted;
            if (!paint_shape(img, class_id, x0, y0, size, rgb, painted)) continue;
            objects.push_back({painted, class_id});
            placed = true;
        }
        if (!placed && gen_log) {
            gen_log->push_back("image " + image_id_from_index(index) +
                               ": skipped object (class " + std::to_string(class_id) +
                               ", size " + std::to_string(size) +
                               ") after 20 placement attempts");
        }
    }
    return img;
}

void generate_dataset(const SceneSpec& spec, int train_count, int val_count,
                      const std::string& out_dir) {
    fs::create_directories(out_dir + "/images");
    std::vector<std::string> gen_log;
    std::ofstream ann(out_dir + "/annotations.txt");
    std::ofstream train_manifest(out_dir + "/train.txt");
    std::ofstream val_manifest(out_dir + "/val.txt");
    if (!ann || !train_manifest || !val_manifest) {
        throw ValidationError("generate_dataset: cannot write into '" + out_dir + "'");
    }
    const int total = train_count + val_count;
    for (int i = 0; i < total; ++i) {
        std::vector<GtBox> objects;
        Image img = generate_image(spec, i, objects, &gen_log);
        const std::string id = image_id_from_index(i);
        write_ppm(out_dir + "/images/" + id + ".ppm", img);
        ann << "image " << id << " " << objects.size() << "\n";
        for (const GtBox& g : objects) {
            ann << "obj " << g.class_id << " " << fmt_f6(g.box.x1) << " "
                << fmt_f6(g.box.y1) << " " << fmt_f6(g.box.x2) << " "
                << fmt_f6(g.box.y2) << "\n";
        }
        (i < train_count ? train_manifest : val_manifest) << id << "\n";
    }
    std::ofstream log(out_dir + "/gen_log.txt");
    log << "# generation log: " << gen_log.size() << " skipped placements\n";
    for (const auto& line : gen_log) log << line << "\n";
}

bool dataset_exists(const std::string& dir) {
    return fs::exists(dir + "/annotations.txt") && fs::exists(dir + "/train.txt") &&
           fs::exists(dir + "/val.txt");
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.dir = dir;
    std::ifstream ann(dir + "/annotations.txt");
    if (!ann) throw ValidationError("load_dataset: cannot open '" + dir + "/annotations.txt'");
    std::string tok;
    while (ann >> tok) {
        if (tok == "image") {
            Annotation a;
            std::size_t count = 0;
            ann >> a.image_id >> count;
            a.objects.reserve(count);
            ds.id_to_index[a.image_id] = static_cast<int>(ds.annotations.size());
            ds.annotations.push_back(std::move(a));
        } else if (tok == "obj") {
            if (ds.annotations.empty()) {
                throw ValidationError("load_dataset: obj record before any image record");
            }
            GtBox g;
            ann >> g.class_id >> g.box.x1 >> g.box.y1 >> g.box.x2 >> g.box.y2;
            ds.annotations.back().objects.push_back(g);
        } else {
            throw ValidationError("load_dataset: unexpected token '" + tok + "'");
        }
    }
    auto read_manifest = [&](const std::string& name, std::vector<std::string>& out) {
        std::ifstream in(dir + "/" + name);
        if (!in) throw ValidationError("load_dataset: cannot open '" + dir + "/" + name + "'");
        std::string id;
        while (in >> id) {
            if (!ds.id_to_index.count(id)) {
                throw ValidationError("load_dataset: manifest " + name +
                                      " references unknown image '" + id + "'");
            }
            out.push_back(id);
        }
    };
    read_manifest("train.txt", ds.train_ids);
    read_manifest("val.txt", ds.val_ids);
    return ds;
}

const Annotation& Dataset::by_id(const std::string& id) const {
    auto it = id_to_index.find(id);
    if (it == id_to_index.end()) {
        throw ValidationError("dataset: unknown image id '" + id + "'");
    }
    return annotations[it->second];
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
    if (name == "train") return train_ids;
    if (name == "val") return val_ids;
    throw ValidationError("dataset: unknown split '" + name + "' (use train or val)");
}

Image load_image(const Dataset& ds, const std::string& id) {
    ds.by_id(id);  // validates the id
    return read_ppm(ds.dir + "/images/" + id + ".ppm");
}

Dataset ensure_dataset(const RunConfig& cfg) {
    const std::string dir = cfg.resolved_data_dir();
    if (!dataset_exists(dir)) {
        generate_dataset(SceneSpec::from_config(cfg), cfg.train_count, cfg.val_count, dir);
    }
    return load_dataset(dir);
}

}  // namespace m2s
