#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "m2s/common.hpp"

namespace m2s {

// Full run configuration. The on-disk form is a key = value document; parsing
// and serialization round-trip losslessly.
struct RunConfig {
    // model
    int num_classes = 2;
    std::array<int, 5> backbone_channels{16, 32, 64, 128, 256};
    bool cam_enabled = true;
    std::string cam_plan = "4,3,2,3,4";
    int cam_tap_low = 2;
    int cam_tap_mid = 3;
    int cam_tap_high = 4;
    std::array<int, 3> cam_channels{64, 128, 256};
    std::string attention = "drm";  // none | drm | se | eca | cbam
    bool drm_per_level = false;
    int head_channels = 64;

    // train
    int phase1_epochs = 15;
    double phase1_lr = 3e-3;
    int phase2_epochs = 15;
    double phase2_lr = 3e-4;
    double momentum = 0.912;
    double weight_decay = 5e-4;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double loss_box = 5.0;
    double loss_obj = 1.0;
    double loss_cls = 0.5;

    // data
    std::string data_dir = "data";
    int image_size = 64;
    int train_count = 200;
    int val_count = 50;
    int objects_min = 4;
    int objects_max = 8;
    int size_min = 4;
    int size_max = 14;
    int bg_base = 96;
    int bg_coarse = 48;
    int bg_fine = 10;
    int bg_speckles = 12;
    int bg_structures = 0;
    std::uint64_t data_seed = 1234;

    // eval
    double conf = 0.25;
    double nms_iou = 0.45;
    int max_det = 300;

    // directory of the config file; relative paths resolve against it
    std::string config_dir = ".";

    static RunConfig load(const std::string& path);
    static RunConfig parse(const std::string& text, const std::string& config_dir = ".");
    std::string serialize() const;
    void save(const std::string& path) const;
    void validate() const;

    bool operator==(const RunConfig& o) const;

    // canonical text of the model section; its hash guards checkpoints
    std::string model_section_text() const;
    std::uint64_t model_hash() const;

    std::string resolve_path(const std::string& rel) const;
    std::string resolved_data_dir() const { return resolve_path(data_dir); }

private:
    void attention_from_string_check() const;
};

}  // namespace m2s
