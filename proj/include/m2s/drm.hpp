#pragma once

#include <optional>
#include <string>
#include <vector>

#include "m2s/cam.hpp"
#include "m2s/nn.hpp"

namespace m2s {

// Resolution adapter between pyramid levels: bilinear for upsampling,
// pixel-unshuffle steps for downsampling, with an optional 1x1 projection for
// channel adaptation.
template <typename T>
class Adapter {
public:
    // log2_ratio: +k upsamples by 2^k, -k downsamples by 2^k, 0 keeps extents.
    Adapter(Rng& rng, int in_ch, int out_ch, int log2_ratio, bool with_proj)
        : down_steps_(log2_ratio < 0 ? -log2_ratio : 0) {
        if (down_steps_ > 0) with_proj = true;  // unshuffle multiplies channels
        if (with_proj) {
            int proj_in = in_ch;
            for (int i = 0; i < down_steps_; ++i) proj_in *= 4;
            proj_.emplace(rng, proj_in, out_ch, 1, 1, Act::Identity);
        } else if (in_ch != out_ch) {
            throw ValidationError("adapter: channel change requires a projection");
        }
    }

    Tensor<T> forward(const Tensor<T>& x, int target_h, int target_w) const {
        Tensor<T> y = x;
        if (down_steps_ > 0) {
            for (int i = 0; i < down_steps_; ++i) y = pixel_unshuffle(y, 2);
            if (y.shape().h != target_h || y.shape().w != target_w) {
                throw ValidationError("adapter: downsampled extents " + y.shape().str() +
                                      " do not match target " + std::to_string(target_h) +
                                      "x" + std::to_string(target_w));
            }
        } else if (y.shape().h != target_h || y.shape().w != target_w) {
            y = bilinear_resize(y, target_h, target_w);
        }
        if (proj_) y = proj_->forward(y);
        return y;
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        if (proj_) proj_->collect(prefix + ".proj", out);
    }

    bool has_proj() const { return proj_.has_value(); }
    ConvLayer<T>* proj() { return proj_ ? &*proj_ : nullptr; }

private:
    int down_steps_;
    std::optional<ConvLayer<T>> proj_;
};

// Channel Relationship Module: gates the input channels by a weight vector
// derived from style pooling of the fused (high, input) feature.
template <typename T>
class Crm {
public:
    Crm(Rng& rng, int channels)
        : concat_conv_(rng, 2 * channels, channels, 1, 1, Act::Identity),
          fc_(rng, 2 * channels, channels, 1, 1, Act::Identity) {}

    // high_adapted must already match input's shape.
    Tensor<T> forward(const Tensor<T>& input, const Tensor<T>& high_adapted) const {
        if (!(high_adapted.shape() == input.shape())) {
            throw ValidationError("crm: adapted high feature " + high_adapted.shape().str() +
                                  " must match input " + input.shape().str());
        }
        Tensor<T> fused = concat_conv_.forward(concat_channels<T>({high_adapted, input}));
        auto [avg, sd] = style_pool(fused);
        Tensor<T> m = sigmoid(fc_.forward(concat_channels<T>({avg, sd})));
        return mul(input, m);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        concat_conv_.collect(prefix + ".concat_conv", out);
        fc_.collect(prefix + ".fc", out);
    }

    ConvLayer<T>& concat_conv() { return concat_conv_; }
    ConvLayer<T>& fc() { return fc_; }

private:
    ConvLayer<T> concat_conv_;
    ConvLayer<T> fc_;
};

// Spatial Relationship Module: blends the channel-refined feature with the
// mid-level feature under a learned spatial gate, then adds a bias plane
// predicted from the low-level feature.
template <typename T>
class Srm {
public:
    Srm(Rng& rng, int low_channels)
        : stats_conv_(rng, 2, 1, 3, 1, Act::Identity),
          bias_conv_(rng, low_channels, 1, 1, 1, Act::Identity) {
        beta_ = Tensor<T>::scalar(T(0.3), /*requires_grad=*/true);
    }

    // mid_adapted matches cr's shape; low_adapted matches cr's extents but
    // keeps its own channel count.
    Tensor<T> forward(const Tensor<T>& cr, const Tensor<T>& mid_adapted,
                      const Tensor<T>& low_adapted) const {
        if (!(mid_adapted.shape() == cr.shape())) {
            throw ValidationError("srm: adapted mid feature " + mid_adapted.shape().str() +
                                  " must match refined input " + cr.shape().str());
        }
        if (low_adapted.shape().h != cr.shape().h ||
            low_adapted.shape().w != cr.shape().w) {
            throw ValidationError("srm: adapted low feature " + low_adapted.shape().str() +
                                  " must spatially match " + cr.shape().str());
        }
        Tensor<T> stats = spatial_stats(concat_channels<T>({cr, mid_adapted}));
        Tensor<T> gate = sigmoid(stats_conv_.forward(stats));
        Tensor<T> one_minus_beta = sub(Tensor<T>::scalar(T(1)), beta_);
        Tensor<T> blend = add(mul(mid_adapted, beta_), mul(cr, one_minus_beta));
        Tensor<T> weighted = mul(blend, gate);
        Tensor<T> bias = sigmoid(bias_conv_.forward(low_adapted));
        return add(weighted, bias);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        out.push_back({prefix + ".beta", beta_});
        stats_conv_.collect(prefix + ".stats_conv", out);
        bias_conv_.collect(prefix + ".bias_conv", out);
    }

    Tensor<T>& beta() { return beta_; }
    double beta_value() const { return static_cast<double>(beta_.value()[0]); }
    ConvLayer<T>& stats_conv() { return stats_conv_; }
    ConvLayer<T>& bias_conv() { return bias_conv_; }

private:
    Tensor<T> beta_;
    ConvLayer<T> stats_conv_;
    ConvLayer<T> bias_conv_;
};

// Dual Relationship Module: adapts the tri-features to the target resolution,
// then channel refinement (CRM) followed by spatial refinement (SRM).
template <typename T>
class Drm {
public:
    // log2 ratios are target-extent over tri-feature-extent, e.g. the default
    // target (Low itself) uses (0, +1, +2) for (low, mid, high).
    Drm(Rng& rng, int input_ch, int low_ch, int mid_ch, int high_ch, int log2_low,
        int log2_mid, int log2_high)
        : low_ad_(rng, low_ch, low_ch, log2_low, /*with_proj=*/false),
          mid_ad_(rng, mid_ch, input_ch, log2_mid, /*with_proj=*/true),
          high_ad_(rng, high_ch, input_ch, log2_high, /*with_proj=*/true),
          crm_(rng, input_ch),
          srm_(rng, low_ch) {}

    Tensor<T> forward(const Tensor<T>& input, const TriFeatures<T>& tri) const {
        const int th = input.shape().h;
        const int tw = input.shape().w;
        Tensor<T> high_a = high_ad_.forward(tri.high, th, tw);
        Tensor<T> mid_a = mid_ad_.forward(tri.mid, th, tw);
        Tensor<T> low_a = low_ad_.forward(tri.low, th, tw);
        Tensor<T> cr = crm_.forward(input, high_a);
        return srm_.forward(cr, mid_a, low_a);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        low_ad_.collect(prefix + ".adapt_low", out);
        mid_ad_.collect(prefix + ".adapt_mid", out);
        high_ad_.collect(prefix + ".adapt_high", out);
        crm_.collect(prefix + ".crm", out);
        srm_.collect(prefix + ".srm", out);
    }

    Crm<T>& crm() { return crm_; }
    Srm<T>& srm() { return srm_; }
    Adapter<T>& mid_adapter() { return mid_ad_; }
    Adapter<T>& high_adapter() { return high_ad_; }
    double beta_value() const { return srm_.beta_value(); }

private:
    Adapter<T> low_ad_;
    Adapter<T> mid_ad_;
    Adapter<T> high_ad_;
    Crm<T> crm_;
    Srm<T> srm_;
};

// ---------------------------------------------------------------------------
// Single-input attention baselines for the comparison harness.
// ---------------------------------------------------------------------------

template <typename T>
class SeBlock {
public:
    SeBlock(Rng& rng, int channels, int reduction = 16)
        : fc1_(rng, channels, std::max(1, channels / reduction), 1, 1, Act::LeakyRelu),
          fc2_(rng, std::max(1, channels / reduction), channels, 1, 1, Act::Identity) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> gate = sigmoid(fc2_.forward(fc1_.forward(spatial_mean(x))));
        return mul(x, gate);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        fc1_.collect(prefix + ".fc1", out);
        fc2_.collect(prefix + ".fc2", out);
    }

    ConvLayer<T>& fc1() { return fc1_; }
    ConvLayer<T>& fc2() { return fc2_; }

private:
    ConvLayer<T> fc1_;
    ConvLayer<T> fc2_;
};

template <typename T>
class EcaBlock {
public:
    explicit EcaBlock(Rng& rng, int kernel = 3)
        : weight_(kaiming_uniform<T>(rng, Shape4{1, 1, 1, kernel})) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> gate = sigmoid(eca_conv1d(spatial_mean(x), weight_));
        return mul(x, gate);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        out.push_back({prefix + ".weight", weight_});
    }

    Tensor<T>& weight() { return weight_; }

private:
    Tensor<T> weight_;
};

template <typename T>
class CbamBlock {
public:
    CbamBlock(Rng& rng, int channels, int reduction = 16, int spatial_kernel = 7)
        : mlp1_(rng, channels, std::max(1, channels / reduction), 1, 1, Act::LeakyRelu),
          mlp2_(rng, std::max(1, channels / reduction), channels, 1, 1, Act::Identity),
          spatial_(rng, 2, 1, spatial_kernel, 1, Act::Identity) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> avg_path = mlp2_.forward(mlp1_.forward(spatial_mean(x)));
        Tensor<T> max_path = mlp2_.forward(mlp1_.forward(spatial_max(x)));
        Tensor<T> channel_gate = sigmoid(add(avg_path, max_path));
        Tensor<T> xc = mul(x, channel_gate);
        Tensor<T> planes = concat_channels<T>({channel_mean(xc), channel_max(xc)});
        Tensor<T> spatial_gate = sigmoid(spatial_.forward(planes));
        return mul(xc, spatial_gate);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        mlp1_.collect(prefix + ".mlp1", out);
        mlp2_.collect(prefix + ".mlp2", out);
        spatial_.collect(prefix + ".spatial", out);
    }

    ConvLayer<T>& mlp1() { return mlp1_; }
    ConvLayer<T>& mlp2() { return mlp2_; }
    ConvLayer<T>& spatial() { return spatial_; }

private:
    ConvLayer<T> mlp1_;
    ConvLayer<T> mlp2_;
    ConvLayer<T> spatial_;
};

enum class AttentionKind { None, Drm, Se, Eca, Cbam };

inline AttentionKind attention_from_string(const std::string& s) {
    if (s == "none") return AttentionKind::None;
    if (s == "drm") return AttentionKind::Drm;
    if (s == "se") return AttentionKind::Se;
    if (s == "eca") return AttentionKind::Eca;
    if (s == "cbam") return AttentionKind::Cbam;
    throw ValidationError("unknown attention kind '" + s + "'");
}

inline std::string attention_to_string(AttentionKind k) {
    switch (k) {
        case AttentionKind::None: return "none";
        case AttentionKind::Drm: return "drm";
        case AttentionKind::Se: return "se";
        case AttentionKind::Eca: return "eca";
        case AttentionKind::Cbam: return "cbam";
    }
    return "?";
}

// Shape-preserving single-input attention used in place of the DRM.
template <typename T>
class AttentionBaseline {
public:
    AttentionBaseline(Rng& rng, AttentionKind kind, int channels) : kind_(kind) {
        switch (kind) {
            case AttentionKind::Se: se_.emplace(rng, channels); break;
            case AttentionKind::Eca: eca_.emplace(rng); break;
            case AttentionKind::Cbam: cbam_.emplace(rng, channels); break;
            default:
                throw ValidationError("attention baseline: kind must be se, eca or cbam");
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        switch (kind_) {
            case AttentionKind::Se: return se_->forward(x);
            case AttentionKind::Eca: return eca_->forward(x);
            case AttentionKind::Cbam: return cbam_->forward(x);
            default: return x;
        }
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        if (se_) se_->collect(prefix + ".se", out);
        if (eca_) eca_->collect(prefix + ".eca", out);
        if (cbam_) cbam_->collect(prefix + ".cbam", out);
    }

    AttentionKind kind() const { return kind_; }
    SeBlock<T>* se() { return se_ ? &*se_ : nullptr; }
    CbamBlock<T>* cbam() { return cbam_ ? &*cbam_ : nullptr; }

private:
    AttentionKind kind_;
    std::optional<SeBlock<T>> se_;
    std::optional<EcaBlock<T>> eca_;
    std::optional<CbamBlock<T>> cbam_;
};

}  // namespace m2s
