#pragma once

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "m2s/nn.hpp"

namespace m2s {

// CAM outputs at strides 4/8/16.
template <typename T>
struct TriFeatures {
    Tensor<T> low;   // stride 4
    Tensor<T> mid;   // stride 8
    Tensor<T> high;  // stride 16
};

// Execution plan for the fusion chain. Each node fuses the current features at
// levels (i-1, i, i+1) and replaces the level-i feature; side and middle
// inputs always resolve to the most recent feature at that level (the backbone
// feature until a node has produced one). Taps pick the nodes whose outputs
// become Low/Mid/High.
struct CamPlan {
    std::vector<int> node_levels;  // execution order, levels in [2,4]
    int tap_low = -1;
    int tap_mid = -1;
    int tap_high = -1;

    static CamPlan default_plan() {
        CamPlan p;
        p.node_levels = {4, 3, 2, 3, 4};  // top-down, then bottom-up
        p.tap_low = 2;
        p.tap_mid = 3;
        p.tap_high = 4;
        return p;
    }

    void validate() const {
        if (node_levels.empty()) throw ValidationError("cam plan: empty node list");
        for (std::size_t i = 0; i < node_levels.size(); ++i) {
            int l = node_levels[i];
            if (l < 2 || l > 4) {
                throw ValidationError("cam plan: node " + std::to_string(i) + " at level " +
                                      std::to_string(l) +
                                      " needs neighbours outside the pyramid (levels 1..5)");
            }
        }
        auto check_tap = [&](int tap, int want_level, const char* name) {
            if (tap < 0 || tap >= static_cast<int>(node_levels.size())) {
                throw ValidationError(std::string("cam plan: ") + name + " tap " +
                                      std::to_string(tap) + " is not a node index");
            }
            if (node_levels[tap] != want_level) {
                throw ValidationError(std::string("cam plan: ") + name + " tap must be a level-" +
                                      std::to_string(want_level) + " node, node " +
                                      std::to_string(tap) + " is at level " +
                                      std::to_string(node_levels[tap]));
            }
        };
        check_tap(tap_low, 2, "low");
        check_tap(tap_mid, 3, "mid");
        check_tap(tap_high, 4, "high");
    }

    std::string serialize_levels() const {
        std::string s;
        for (std::size_t i = 0; i < node_levels.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(node_levels[i]);
        }
        return s;
    }

    static std::vector<int> parse_levels(const std::string& text) {
        std::vector<int> levels;
        std::stringstream ss(text);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            try {
                levels.push_back(std::stoi(tok));
            } catch (const std::exception&) {
                throw ValidationError("cam plan: bad level token '" + tok + "'");
            }
        }
        return levels;
    }
};

// Cross-scale fusion node. The lower neighbour is downsampled by a focus
// block, the upper neighbour is upsampled bilinearly and projected by a 1x1
// convolution; both adapters emit the middle input's channel count, and the
// three-way concatenation goes through one bottleneck.
template <typename T>
class Cfn {
public:
    Cfn(Rng& rng, int low_ch, int mid_ch, int high_ch, int out_ch)
        : focus_(rng, low_ch, mid_ch, Act::LeakyRelu),
          lateral_(rng, high_ch, mid_ch, 1, 1, Act::LeakyRelu),
          fuse_(rng, 3 * mid_ch, out_ch),
          fuse_in_channels_(3 * mid_ch) {}

    Tensor<T> forward(const Tensor<T>& c_low, const Tensor<T>& c_mid,
                      const Tensor<T>& c_high) const {
        const Shape4 lo = c_low.shape();
        const Shape4 mi = c_mid.shape();
        const Shape4 hi = c_high.shape();
        if (lo.h != 2 * mi.h || lo.w != 2 * mi.w) {
            throw ValidationError("cfn: lower input " + lo.str() +
                                  " must be exactly 2x the middle input " + mi.str());
        }
        if (mi.h != 2 * hi.h || mi.w != 2 * hi.w) {
            throw ValidationError("cfn: upper input " + hi.str() +
                                  " must be exactly half the middle input " + mi.str());
        }
        Tensor<T> low_d = focus_.forward(c_low);
        Tensor<T> high_u = lateral_.forward(bilinear_resize(c_high, mi.h, mi.w));
        return fuse_.forward(concat_channels<T>({low_d, c_mid, high_u}));
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        focus_.collect(prefix + ".focus", out);
        lateral_.collect(prefix + ".lateral", out);
        fuse_.collect(prefix + ".fuse", out);
    }

    int concat_channels_in() const { return fuse_in_channels_; }

private:
    FocusBlock<T> focus_;
    ConvLayer<T> lateral_;
    Bottleneck<T> fuse_;
    int fuse_in_channels_;
};

// Cross-scale Aggregation Module: runs the plan over C1..C5 and taps the
// Low/Mid/High outputs.
template <typename T>
class Cam {
public:
    Cam(Rng& rng, const CamPlan& plan, const std::array<int, 5>& backbone_channels,
        const std::array<int, 3>& out_channels)
        : plan_(plan), out_channels_(out_channels) {
        plan_.validate();
        std::array<int, 5> cur = backbone_channels;  // index 0 -> level 1
        nodes_.reserve(plan_.node_levels.size());
        for (int level : plan_.node_levels) {
            const int low_ch = cur[level - 2];
            const int mid_ch = cur[level - 1];
            const int high_ch = cur[level];
            const int out_ch = out_channels_[level - 2];
            nodes_.emplace_back(rng, low_ch, mid_ch, high_ch, out_ch);
            cur[level - 1] = out_ch;
        }
    }

    TriFeatures<T> forward(const FeaturePyramid<T>& pyr) const {
        std::array<Tensor<T>, 5> cur = pyr.levels;
        std::vector<Tensor<T>> node_out(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const int level = plan_.node_levels[i];
            Tensor<T> y =
                nodes_[i].forward(cur[level - 2], cur[level - 1], cur[level]);
            cur[level - 1] = y;
            node_out[i] = y;
        }
        TriFeatures<T> tri;
        tri.low = node_out[plan_.tap_low];
        tri.mid = node_out[plan_.tap_mid];
        tri.high = node_out[plan_.tap_high];
        return tri;
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            nodes_[i].collect(prefix + ".node" + std::to_string(i), out);
        }
    }

    const CamPlan& plan() const { return plan_; }
    const std::array<int, 3>& out_channels() const { return out_channels_; }
    const Cfn<T>& node(std::size_t i) const { return nodes_[i]; }

private:
    CamPlan plan_;
    std::array<int, 3> out_channels_;  // per level 2/3/4
    std::vector<Cfn<T>> nodes_;
};

}  // namespace m2s
