#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "m2s/ops.hpp"
#include "m2s/tensor.hpp"

namespace m2s {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;  // shares storage with the owning module
};

template <typename T>
using ParamRefs = std::vector<NamedParam<T>>;

enum class Act { Identity, LeakyRelu, Sigmoid };

inline Act act_from_string(const std::string& s) {
    if (s == "identity") return Act::Identity;
    if (s == "leaky_relu") return Act::LeakyRelu;
    if (s == "sigmoid") return Act::Sigmoid;
    throw ValidationError("unknown activation '" + s + "'");
}

template <typename T>
Tensor<T> apply_act(const Tensor<T>& x, Act act) {
    switch (act) {
        case Act::Identity: return x;
        case Act::LeakyRelu: return leaky_relu(x, 0.1);
        case Act::Sigmoid: return sigmoid(x);
    }
    throw ValidationError("apply_act: bad activation");
}

// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(Rng& rng, Shape4 wshape) {
    const double fan_in = static_cast<double>(wshape.c) * wshape.h * wshape.w;
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<T> data(wshape.numel());
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_vector(wshape, std::move(data), /*requires_grad=*/true);
}

// Convolution + activation. Padding defaults to "same" for odd kernels.
template <typename T>
class ConvLayer {
public:
    ConvLayer(Rng& rng, int in_ch, int out_ch, int kernel, int stride, Act act)
        : stride_(stride),
          pad_(kernel / 2),
          act_(act),
          weight_(kaiming_uniform<T>(rng, Shape4{out_ch, in_ch, kernel, kernel})),
          bias_(Tensor<T>::zeros(Shape4{1, out_ch, 1, 1}, /*requires_grad=*/true)) {
        if (in_ch < 1 || out_ch < 1) {
            throw ValidationError("conv layer: channel counts must be positive");
        }
        if (kernel < 1 || kernel % 2 == 0) {
            throw ValidationError("conv layer: kernel must be odd, got " +
                                  std::to_string(kernel));
        }
        if (stride < 1) throw ValidationError("conv layer: stride must be positive");
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return apply_act(conv2d(x, weight_, bias_, stride_, pad_), act_);
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    int out_channels() const { return weight_.shape().n; }
    int in_channels() const { return weight_.shape().c; }

    void zero_weights() {
        std::fill(weight_.mutable_value().begin(), weight_.mutable_value().end(), T(0));
        std::fill(bias_.mutable_value().begin(), bias_.mutable_value().end(), T(0));
    }

private:
    int stride_;
    int pad_;
    Act act_;
    Tensor<T> weight_;
    Tensor<T> bias_;
};

// Space-to-depth downsampling followed by a 1x1 projection; the unshuffled
// intermediate carries four times the input channels.
template <typename T>
class FocusBlock {
public:
    FocusBlock(Rng& rng, int in_ch, int out_ch, Act act)
        : conv_(rng, in_ch * 4, out_ch, 1, 1, act) {}

    Tensor<T> pre_projection(const Tensor<T>& x) const {
        const Shape4 s = x.shape();
        if (s.h % 2 != 0 || s.w % 2 != 0) {
            throw ValidationError("focus_block: spatial extents " + s.str() +
                                  " must be even");
        }
        return pixel_unshuffle(x, 2);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return conv_.forward(pre_projection(x));
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        conv_.collect(prefix + ".conv", out);
    }

    ConvLayer<T>& conv() { return conv_; }
    int out_channels() const { return conv_.out_channels(); }

private:
    ConvLayer<T> conv_;
};

// 1x1 reduce to out/2, 3x3 expand to out, residual when channel counts allow.
template <typename T>
class Bottleneck {
public:
    Bottleneck(Rng& rng, int in_ch, int out_ch, Act act = Act::LeakyRelu)
        : reduce_(rng, in_ch, std::max(1, out_ch / 2), 1, 1, act),
          expand_(rng, std::max(1, out_ch / 2), out_ch, 3, 1, act),
          residual_(in_ch == out_ch) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = expand_.forward(reduce_.forward(x));
        return residual_ ? add(x, y) : y;
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        reduce_.collect(prefix + ".reduce", out);
        expand_.collect(prefix + ".expand", out);
    }

    bool residual() const { return residual_; }
    ConvLayer<T>& reduce() { return reduce_; }
    ConvLayer<T>& expand() { return expand_; }

private:
    ConvLayer<T> reduce_;
    ConvLayer<T> expand_;
    bool residual_;
};

// The five backbone features C1..C5 at strides 2,4,8,16,32.
template <typename T>
struct FeaturePyramid {
    std::array<Tensor<T>, 5> levels;

    const Tensor<T>& c(int k) const { return levels[k - 1]; }  // k in 1..5
};

// Compact five-stage backbone: a focus stem then four stride-2 convolutions,
// each stage followed by one bottleneck.
template <typename T>
class Backbone {
public:
    Backbone(Rng& rng, const std::array<int, 5>& channels) : channels_(channels) {
        stem_.emplace_back(rng, 3, channels[0], Act::LeakyRelu);
        blocks_.reserve(5);
        blocks_.emplace_back(rng, channels[0], channels[0]);
        for (int k = 1; k < 5; ++k) {
            downs_.emplace_back(rng, channels[k - 1], channels[k], 3, 2, Act::LeakyRelu);
            blocks_.emplace_back(rng, channels[k], channels[k]);
        }
    }

    FeaturePyramid<T> forward(const Tensor<T>& image) const {
        const Shape4 s = image.shape();
        if (s.c != 3) {
            throw ValidationError("backbone: expected 3 input channels, got " + s.str());
        }
        if (s.h % 32 != 0 || s.w % 32 != 0) {
            throw ValidationError("backbone: input extents " + s.str() +
                                  " must be a multiple of 32");
        }
        FeaturePyramid<T> pyr;
        Tensor<T> x = blocks_[0].forward(stem_[0].forward(image));
        pyr.levels[0] = x;
        for (int k = 1; k < 5; ++k) {
            x = blocks_[k].forward(downs_[k - 1].forward(x));
            pyr.levels[k] = x;
        }
        return pyr;
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        stem_[0].collect(prefix + ".stage1.focus", out);
        blocks_[0].collect(prefix + ".stage1.block", out);
        for (int k = 1; k < 5; ++k) {
            const std::string stage = prefix + ".stage" + std::to_string(k + 1);
            downs_[k - 1].collect(stage + ".down", out);
            blocks_[k].collect(stage + ".block", out);
        }
    }

    const std::array<int, 5>& channels() const { return channels_; }

private:
    std::array<int, 5> channels_;
    std::vector<FocusBlock<T>> stem_;  // single element; vector avoids default-construct
    std::vector<ConvLayer<T>> downs_;
    std::vector<Bottleneck<T>> blocks_;
};

}  // namespace m2s
