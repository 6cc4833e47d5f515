#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "m2s/config.hpp"
#include "m2s/detect.hpp"

namespace m2s {

// 8-bit RGB image, row-major.
struct Image {
    int w = 0;
    int h = 0;
    std::vector<std::uint8_t> rgb;

    std::uint8_t& at(int x, int y, int ch) { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + ch]; }
    std::uint8_t at(int x, int y, int ch) const { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + ch]; }
};

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

struct Annotation {
    std::string image_id;
    std::vector<GtBox> objects;
};

// Synthetic scene parameters, lifted from the data section of a RunConfig.
struct SceneSpec {
    int image_size = 64;
    int objects_min = 4;
    int objects_max = 8;
    int size_min = 4;
    int size_max = 14;
    int num_classes = 2;
    int bg_base = 96;
    int bg_coarse = 48;
    int bg_fine = 10;
    int bg_speckles = 12;
    int bg_structures = 0;
    std::uint64_t seed = 1234;

    static SceneSpec from_config(const RunConfig& cfg) {
        SceneSpec s;
        s.image_size = cfg.image_size;
        s.objects_min = cfg.objects_min;
        s.objects_max = cfg.objects_max;
        s.size_min = cfg.size_min;
        s.size_max = cfg.size_max;
        s.num_classes = cfg.num_classes;
        s.bg_base = cfg.bg_base;
        s.bg_coarse = cfg.bg_coarse;
        s.bg_fine = cfg.bg_fine;
        s.bg_speckles = cfg.bg_speckles;
        s.bg_structures = cfg.bg_structures;
        s.seed = cfg.data_seed;
        return s;
    }
};

std::string image_id_from_index(int index);

// Deterministic per (spec.seed, index). Skipped placements are appended to
// the log when provided.
Image generate_image(const SceneSpec& spec, int index, std::vector<GtBox>& objects,
                     std::vector<std::string>* gen_log);

// Writes images/NNNNNN.ppm, annotations.txt, train.txt, val.txt, gen_log.txt.
void generate_dataset(const SceneSpec& spec, int train_count, int val_count,
                      const std::string& out_dir);

struct Dataset {
    std::string dir;
    std::vector<Annotation> annotations;
    std::map<std::string, int> id_to_index;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;

    const Annotation& by_id(const std::string& id) const;
    const std::vector<std::string>& split(const std::string& name) const;
};

bool dataset_exists(const std::string& dir);
Dataset load_dataset(const std::string& dir);
Image load_image(const Dataset& ds, const std::string& id);

// Ensures the configured dataset is on disk, generating it if absent.
Dataset ensure_dataset(const RunConfig& cfg);

// Normalized [0,1] image batch tensor.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<Image>& images) {
    if (images.empty()) throw ValidationError("images_to_tensor: empty batch");
    const int h = images[0].h;
    const int w = images[0].w;
    const int n = static_cast<int>(images.size());
    std::vector<T> data(static_cast<std::size_t>(n) * 3 * h * w);
    for (int i = 0; i < n; ++i) {
        const Image& img = images[i];
        if (img.h != h || img.w != w) {
            throw ValidationError("images_to_tensor: mixed image sizes in batch");
        }
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    data[((static_cast<std::size_t>(i) * 3 + c) * h + y) * w + x] =
                        static_cast<T>(img.at(x, y, c)) / T(255);
                }
            }
        }
    }
    return Tensor<T>::from_vector(Shape4{n, 3, h, w}, std::move(data));
}

}  // namespace m2s
