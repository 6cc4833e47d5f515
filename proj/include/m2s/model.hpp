#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "m2s/cam.hpp"
#include "m2s/config.hpp"
#include "m2s/detect.hpp"
#include "m2s/drm.hpp"
#include "m2s/nn.hpp"

namespace m2s {

// Typed architecture description derived from a RunConfig's model section.
struct ModelDesc {
    int num_classes = 2;
    std::array<int, 5> backbone_channels{16, 32, 64, 128, 256};
    bool use_cam = true;
    CamPlan plan = CamPlan::default_plan();
    std::array<int, 3> cam_channels{64, 128, 256};
    AttentionKind attention = AttentionKind::Drm;
    bool drm_per_level = false;
    int head_channels = 64;

    static ModelDesc from_config(const RunConfig& cfg) {
        ModelDesc d;
        d.num_classes = cfg.num_classes;
        d.backbone_channels = cfg.backbone_channels;
        d.use_cam = cfg.cam_enabled;
        d.plan.node_levels = CamPlan::parse_levels(cfg.cam_plan);
        d.plan.tap_low = cfg.cam_tap_low;
        d.plan.tap_mid = cfg.cam_tap_mid;
        d.plan.tap_high = cfg.cam_tap_high;
        d.plan.validate();
        d.cam_channels = cfg.cam_channels;
        d.attention = attention_from_string(cfg.attention);
        d.drm_per_level = cfg.drm_per_level;
        d.head_channels = cfg.head_channels;
        return d;
    }

    // Channel counts of the three head sources (low/mid/high).
    std::array<int, 3> tri_channels() const {
        if (use_cam) return cam_channels;
        return {backbone_channels[1], backbone_channels[2], backbone_channels[3]};
    }
};

// The full detector: backbone -> (CAM) -> (DRM | baseline attention) -> heads.
// Without CAM the backbone features C2/C3/C4 stand in for Low/Mid/High.
template <typename T>
class Model {
public:
    Model(const ModelDesc& desc, std::uint64_t seed) : desc_(desc) {
        Rng rng(seed);
        backbone_.emplace(rng, desc.backbone_channels);
        const auto tri_ch = desc.tri_channels();
        if (desc.use_cam) {
            cam_.emplace(rng, desc.plan, desc.backbone_channels, desc.cam_channels);
        }
        switch (desc.attention) {
            case AttentionKind::None: break;
            case AttentionKind::Drm:
                if (desc.drm_per_level) {
                    // one DRM per tri level, each targeting that level's feature
                    drms_.emplace_back(rng, tri_ch[0], tri_ch[0], tri_ch[1], tri_ch[2], 0, 1, 2);
                    drms_.emplace_back(rng, tri_ch[1], tri_ch[0], tri_ch[1], tri_ch[2], -1, 0, 1);
                    drms_.emplace_back(rng, tri_ch[2], tri_ch[0], tri_ch[1], tri_ch[2], -2, -1, 0);
                } else {
                    drms_.emplace_back(rng, tri_ch[0], tri_ch[0], tri_ch[1], tri_ch[2], 0, 1, 2);
                }
                break;
            default:
                baseline_.emplace(rng, desc.attention, tri_ch[1]);
                baseline_up_.emplace(rng, tri_ch[1], tri_ch[0], 1, /*with_proj=*/true);
                break;
        }
        heads_.emplace_back(rng, tri_ch[0], desc.head_channels, desc.num_classes);
        heads_.emplace_back(rng, tri_ch[1], desc.head_channels, desc.num_classes);
        heads_.emplace_back(rng, tri_ch[2], desc.head_channels, desc.num_classes);
    }

    HeadOutput<T> forward(const Tensor<T>& images) const {
        FeaturePyramid<T> pyr = backbone_->forward(images);
        TriFeatures<T> tri;
        if (cam_) {
            tri = cam_->forward(pyr);
        } else {
            tri = TriFeatures<T>{pyr.c(2), pyr.c(3), pyr.c(4)};
        }
        Tensor<T> p2 = tri.low;
        Tensor<T> p3 = tri.mid;
        Tensor<T> p4 = tri.high;
        if (!drms_.empty()) {
            if (drms_.size() == 3) {
                p2 = drms_[0].forward(tri.low, tri);
                p3 = drms_[1].forward(tri.mid, tri);
                p4 = drms_[2].forward(tri.high, tri);
            } else {
                p2 = drms_[0].forward(tri.low, tri);
            }
        } else if (baseline_) {
            Tensor<T> refined = baseline_->forward(tri.mid);
            p2 = baseline_up_->forward(refined, tri.low.shape().h, tri.low.shape().w);
        }
        HeadOutput<T> out;
        out.maps[0] = heads_[0].forward(p2);
        out.maps[1] = heads_[1].forward(p3);
        out.maps[2] = heads_[2].forward(p4);
        out.num_classes = desc_.num_classes;
        return out;
    }

    // Lexicographically ordered; the checkpoint manifest uses this order.
    ParamRefs<T> named_parameters() const {
        ParamRefs<T> out;
        backbone_->collect("backbone", out);
        if (cam_) cam_->collect("cam", out);
        if (!drms_.empty()) {
            if (drms_.size() == 3) {
                drms_[0].collect("attn.drm_low", out);
                drms_[1].collect("attn.drm_mid", out);
                drms_[2].collect("attn.drm_high", out);
            } else {
                drms_[0].collect("attn.drm", out);
            }
        } else if (baseline_) {
            baseline_->collect("attn.base", out);
            baseline_up_->collect("attn.up", out);
        }
        heads_[0].collect("head.p2", out);
        heads_[1].collect("head.p3", out);
        heads_[2].collect("head.p4", out);
        std::sort(out.begin(), out.end(),
                  [](const NamedParam<T>& a, const NamedParam<T>& b) {
                      return a.name < b.name;
                  });
        for (std::size_t i = 1; i < out.size(); ++i) {
            if (out[i].name == out[i - 1].name) {
                throw ValidationError("model: duplicate parameter name '" + out[i].name + "'");
            }
        }
        return out;
    }

    std::array<LevelGeom, 3> level_geoms(int image_h, int image_w) const {
        return {LevelGeom{4, image_h / 4, image_w / 4},
                LevelGeom{8, image_h / 8, image_w / 8},
                LevelGeom{16, image_h / 16, image_w / 16}};
    }

    bool has_beta() const { return !drms_.empty(); }
    double beta_value() const {
        if (drms_.empty()) throw ValidationError("model: no trainable beta (attention is not drm)");
        return drms_[0].beta_value();
    }

    const ModelDesc& desc() const { return desc_; }
    Backbone<T>& backbone() { return *backbone_; }
    Cam<T>* cam() { return cam_ ? &*cam_ : nullptr; }
    Drm<T>* drm(int i = 0) { return drms_.empty() ? nullptr : &drms_[i]; }
    AttentionBaseline<T>* baseline() { return baseline_ ? &*baseline_ : nullptr; }
    LevelHead<T>& head(int i) { return heads_[i]; }

private:
    ModelDesc desc_;
    std::optional<Backbone<T>> backbone_;
    std::optional<Cam<T>> cam_;
    std::vector<Drm<T>> drms_;  // size 1, or 3 in per-level mode
    std::optional<AttentionBaseline<T>> baseline_;
    std::optional<Adapter<T>> baseline_up_;
    std::vector<LevelHead<T>> heads_;
};

}  // namespace m2s
