#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "m2s/nn.hpp"

namespace m2s {

// ---------------------------------------------------------------------------
// Plain box geometry (image-pixel coordinates). Denominators are floored at
// EPS so identical boxes score exactly 1 and degenerate boxes score 0.
// ---------------------------------------------------------------------------

constexpr double kBoxEps = 1e-7;

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    Box normalized() const {
        return Box{std::min(x1, x2), std::min(y1, y2), std::max(x1, x2),
                   std::max(y1, y2)};
    }
    double area() const { return (x2 - x1) * (y2 - y1); }
    double longer_side() const { return std::max(x2 - x1, y2 - y1); }
};

inline double iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return inter / std::max(uni, kBoxEps);
}

inline double giou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enclose = ew * eh;
    return inter / std::max(uni, kBoxEps) - (enclose - uni) / std::max(enclose, kBoxEps);
}

inline double giou_loss(const Box& a, const Box& b) { return 1.0 - giou(a, b); }

struct Detection {
    Box box;
    double score = 0;
    int class_id = 0;
};

// ---------------------------------------------------------------------------
// Differentiable box geometry on scalar tensors, mirroring the plain formulas.
// ---------------------------------------------------------------------------

template <typename T>
struct BoxT {
    Tensor<T> x1, y1, x2, y2;

    static BoxT constant(const Box& b) {
        return BoxT{Tensor<T>::scalar(static_cast<T>(b.x1)),
                    Tensor<T>::scalar(static_cast<T>(b.y1)),
                    Tensor<T>::scalar(static_cast<T>(b.x2)),
                    Tensor<T>::scalar(static_cast<T>(b.y2))};
    }
};

template <typename T>
Tensor<T> giou_t(const BoxT<T>& a, const BoxT<T>& b) {
    const double inf = std::numeric_limits<double>::infinity();
    Tensor<T> iw = clamp(sub(minimum(a.x2, b.x2), maximum(a.x1, b.x1)), 0.0, inf);
    Tensor<T> ih = clamp(sub(minimum(a.y2, b.y2), maximum(a.y1, b.y1)), 0.0, inf);
    Tensor<T> inter = mul(iw, ih);
    Tensor<T> area_a = mul(sub(a.x2, a.x1), sub(a.y2, a.y1));
    Tensor<T> area_b = mul(sub(b.x2, b.x1), sub(b.y2, b.y1));
    Tensor<T> uni = sub(add(area_a, area_b), inter);
    Tensor<T> eps = Tensor<T>::scalar(static_cast<T>(kBoxEps));
    Tensor<T> iou_v = div(inter, maximum(uni, eps));
    Tensor<T> ew = sub(maximum(a.x2, b.x2), minimum(a.x1, b.x1));
    Tensor<T> eh = sub(maximum(a.y2, b.y2), minimum(a.y1, b.y1));
    Tensor<T> enclose = mul(ew, eh);
    Tensor<T> penalty = div(sub(enclose, uni), maximum(enclose, eps));
    return sub(iou_v, penalty);
}

template <typename T>
Tensor<T> giou_loss_t(const BoxT<T>& a, const BoxT<T>& b) {
    return sub(Tensor<T>::scalar(T(1)), giou_t(a, b));
}

// ---------------------------------------------------------------------------
// Detection head: per level, two 3x3 convolutions and a 1x1 projection onto
// [tx, ty, tw, th, objectness, class logits].
// ---------------------------------------------------------------------------

struct LevelGeom {
    int stride = 0;
    int h = 0;
    int w = 0;
};

template <typename T>
struct HeadOutput {
    std::array<Tensor<T>, 3> maps;  // p2/p3/p4 at strides 4/8/16
    std::array<int, 3> strides{4, 8, 16};
    int num_classes = 0;

    std::array<LevelGeom, 3> geoms() const {
        std::array<LevelGeom, 3> g;
        for (int l = 0; l < 3; ++l) {
            g[l] = LevelGeom{strides[l], maps[l].shape().h, maps[l].shape().w};
        }
        return g;
    }
};

template <typename T>
class LevelHead {
public:
    LevelHead(Rng& rng, int in_ch, int mid_ch, int num_classes)
        : c1_(rng, in_ch, mid_ch, 3, 1, Act::LeakyRelu),
          c2_(rng, mid_ch, mid_ch, 3, 1, Act::LeakyRelu),
          proj_(rng, mid_ch, 5 + num_classes, 1, 1, Act::Identity) {
        // Zero logits at init: boxes start cell-centered at stride size, far
        // from the +-4 size-logit clamp where the gradient dies.
        proj_.zero_weights();
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return proj_.forward(c2_.forward(c1_.forward(x)));
    }

    void collect(const std::string& prefix, ParamRefs<T>& out) const {
        c1_.collect(prefix + ".c1", out);
        c2_.collect(prefix + ".c2", out);
        proj_.collect(prefix + ".proj", out);
    }

    ConvLayer<T>& proj() { return proj_; }

private:
    ConvLayer<T> c1_;
    ConvLayer<T> c2_;
    ConvLayer<T> proj_;
};

// ---------------------------------------------------------------------------
// Training-time target assignment. A ground truth goes to the level whose
// size bracket contains its longer side (p2 < 16px, p3 16-32px, p4 >= 32px)
// and to the cell containing its center; larger area wins a contested cell.
// ---------------------------------------------------------------------------

struct GtBox {
    Box box;
    int class_id = 0;
};

struct LevelTargets {
    LevelGeom geom;
    // flattened [n][y][x] -> index into the image's gt list, -1 for background
    std::vector<int> gt_index;
};

struct Targets {
    std::array<LevelTargets, 3> levels;
    std::vector<std::vector<GtBox>> gts;  // per image
    int num_pos = 0;
};

inline int size_bracket_level(double longer_side) {
    if (longer_side < 16.0) return 0;
    if (longer_side < 32.0) return 1;
    return 2;
}

inline Targets assign_targets(const std::vector<std::vector<GtBox>>& batch_gts,
                              const std::array<LevelGeom, 3>& geoms) {
    Targets t;
    t.gts = batch_gts;
    const int batch = static_cast<int>(batch_gts.size());
    for (int l = 0; l < 3; ++l) {
        t.levels[l].geom = geoms[l];
        t.levels[l].gt_index.assign(
            static_cast<std::size_t>(batch) * geoms[l].h * geoms[l].w, -1);
    }
    for (int n = 0; n < batch; ++n) {
        for (std::size_t g = 0; g < batch_gts[n].size(); ++g) {
            const Box b = batch_gts[n][g].box.normalized();
            const int l = size_bracket_level(b.longer_side());
            const LevelGeom& geom = geoms[l];
            const double cx = 0.5 * (b.x1 + b.x2);
            const double cy = 0.5 * (b.y1 + b.y2);
            int ix = std::min(geom.w - 1, std::max(0, static_cast<int>(cx / geom.stride)));
            int iy = std::min(geom.h - 1, std::max(0, static_cast<int>(cy / geom.stride)));
            std::size_t cell = (static_cast<std::size_t>(n) * geom.h + iy) * geom.w + ix;
            int& slot = t.levels[l].gt_index[cell];
            if (slot < 0) {
                slot = static_cast<int>(g);
            } else {
                // contested cell: larger area wins
                if (b.area() > batch_gts[n][slot].box.normalized().area()) {
                    slot = static_cast<int>(g);
                }
            }
        }
    }
    for (int l = 0; l < 3; ++l) {
        for (int v : t.levels[l].gt_index) {
            if (v >= 0) ++t.num_pos;
        }
    }
    return t;
}

// Ideal raw offsets for a ground truth in its assigned cell; decode of these
// reproduces the box. Used by tests and fixtures.
struct EncodedCell {
    int level = 0, cell_x = 0, cell_y = 0;
    double tx = 0, ty = 0, tw = 0, th = 0;
};

inline EncodedCell encode_gt(const Box& raw, const std::array<LevelGeom, 3>& geoms) {
    const Box b = raw.normalized();
    EncodedCell e;
    e.level = size_bracket_level(b.longer_side());
    const LevelGeom& g = geoms[e.level];
    const double cx = 0.5 * (b.x1 + b.x2);
    const double cy = 0.5 * (b.y1 + b.y2);
    e.cell_x = std::min(g.w - 1, std::max(0, static_cast<int>(cx / g.stride)));
    e.cell_y = std::min(g.h - 1, std::max(0, static_cast<int>(cy / g.stride)));
    auto logit = [](double p) {
        p = std::min(1.0 - 1e-7, std::max(1e-7, p));
        return std::log(p / (1.0 - p));
    };
    e.tx = logit(cx / g.stride - e.cell_x);
    e.ty = logit(cy / g.stride - e.cell_y);
    e.tw = std::log(std::max(1e-9, (b.x2 - b.x1) / g.stride));
    e.th = std::log(std::max(1e-9, (b.y2 - b.y1) / g.stride));
    return e;
}

// ---------------------------------------------------------------------------
// Inference decode + greedy class-wise NMS.
// center = (cell + sigmoid(txy)) * stride, size = exp(clamp(twh)) * stride,
// score = sigmoid(obj) * max class probability.
// ---------------------------------------------------------------------------

constexpr double kSizeLogitClamp = 4.0;

template <typename T>
std::vector<std::vector<Detection>> decode_and_nms(const HeadOutput<T>& out,
                                                   double conf_thresh = 0.25,
                                                   double iou_thresh = 0.45,
                                                   int max_det = 300) {
    const int nc = out.num_classes;
    const int batch = out.maps[0].shape().n;
    auto sig = [](double z) {
        return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    };
    std::vector<std::vector<Detection>> result(batch);
    for (int n = 0; n < batch; ++n) {
        std::vector<Detection> cand;
        for (int l = 0; l < 3; ++l) {
            const Tensor<T>& map = out.maps[l];
            const Shape4 s = map.shape();
            const int stride = out.strides[l];
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    const double obj = sig(map.at(n, 4, y, x));
                    double best_p = 0;
                    int best_c = 0;
                    for (int c = 0; c < nc; ++c) {
                        double p = sig(map.at(n, 5 + c, y, x));
                        if (p > best_p) {
                            best_p = p;
                            best_c = c;
                        }
                    }
                    const double score = obj * best_p;
                    if (score <= conf_thresh) continue;
                    const double cx = (x + sig(map.at(n, 0, y, x))) * stride;
                    const double cy = (y + sig(map.at(n, 1, y, x))) * stride;
                    auto clamped = [](double v) {
                        return std::min(kSizeLogitClamp, std::max(-kSizeLogitClamp, v));
                    };
                    const double bw = std::exp(clamped(map.at(n, 2, y, x))) * stride;
                    const double bh = std::exp(clamped(map.at(n, 3, y, x))) * stride;
                    cand.push_back({Box{cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2},
                                    score, best_c});
                }
            }
        }
        // stable sort keeps insertion order on ties for determinism
        std::stable_sort(cand.begin(), cand.end(),
                         [](const Detection& a, const Detection& b) {
                             return a.score > b.score;
                         });
        std::vector<Detection>& keep = result[n];
        for (const Detection& d : cand) {
            if (static_cast<int>(keep.size()) >= max_det) break;
            bool suppressed = false;
            for (const Detection& k : keep) {
                if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) keep.push_back(d);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Composite detection loss: mean GIoU loss over positive cells, binary
// cross-entropy on objectness over all cells, and binary cross-entropy on the
// class logits at positive cells.
// ---------------------------------------------------------------------------

struct LossWeights {
    double box = 5.0;
    double obj = 1.0;
    double cls = 0.5;
};

// Positive cells are rare (a handful among hundreds); inside the objectness
// term they carry this weight so their confidence actually trains. With no
// positives the term reduces to the plain per-cell mean.
constexpr double kObjPositiveWeight = 25.0;

template <typename T>
struct DetectionLoss {
    Tensor<T> total;
    double box_term = 0;
    double obj_term = 0;
    double cls_term = 0;
};

template <typename T>
DetectionLoss<T> detection_loss(const HeadOutput<T>& out, const Targets& targets,
                                const LossWeights& weights = {}) {
    const int nc = out.num_classes;
    const int batch = out.maps[0].shape().n;
    if (static_cast<int>(targets.gts.size()) != batch) {
        throw ValidationError("detection_loss: target batch " +
                              std::to_string(targets.gts.size()) + " != output batch " +
                              std::to_string(batch));
    }

    std::vector<Tensor<T>> obj_sums;
    std::vector<Tensor<T>> cls_sums;
    std::vector<Tensor<T>> box_losses;
    double total_obj_weight = 0;

    for (int l = 0; l < 3; ++l) {
        const Tensor<T>& map = out.maps[l];
        const Shape4 s = map.shape();
        const LevelTargets& lt = targets.levels[l];
        if (lt.geom.h != s.h || lt.geom.w != s.w) {
            throw ValidationError("detection_loss: target grid " +
                                  std::to_string(lt.geom.h) + "x" +
                                  std::to_string(lt.geom.w) + " != head map " + s.str());
        }
        const std::size_t cells = static_cast<std::size_t>(batch) * s.h * s.w;

        // objectness over every cell, positives up-weighted
        std::vector<T> obj_t(cells, T(0));
        std::vector<T> obj_w(cells, T(1));
        for (std::size_t i = 0; i < cells; ++i) {
            if (lt.gt_index[i] >= 0) {
                obj_t[i] = T(1);
                obj_w[i] = T(kObjPositiveWeight);
            }
            total_obj_weight += static_cast<double>(obj_w[i]);
        }
        Tensor<T> weight_map =
            Tensor<T>::from_vector(Shape4{batch, 1, s.h, s.w}, std::move(obj_w));
        obj_sums.push_back(sum(
            mul(bce_with_logits(slice_channels(map, 4, 1), std::move(obj_t)), weight_map)));

        // class logits and box decode at positives
        std::vector<T> cls_t(cells * nc, T(0));
        std::vector<T> cls_mask(cells, T(0));
        bool any_pos = false;
        for (int n = 0; n < batch; ++n) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    const std::size_t cell =
                        (static_cast<std::size_t>(n) * s.h + y) * s.w + x;
                    const int gi = lt.gt_index[cell];
                    if (gi < 0) continue;
                    any_pos = true;
                    cls_mask[cell] = T(1);
                    const GtBox& gt = targets.gts[n][gi];
                    if (gt.class_id < 0 || gt.class_id >= nc) {
                        throw ValidationError("detection_loss: class id " +
                                              std::to_string(gt.class_id) +
                                              " outside [0," + std::to_string(nc) + ")");
                    }
                    cls_t[(static_cast<std::size_t>(n) * nc + gt.class_id) *
                              (static_cast<std::size_t>(s.h) * s.w) +
                          static_cast<std::size_t>(y) * s.w + x] = T(1);

                    // differentiable decode of the predicted box at this cell
                    const double stride = lt.geom.stride;
                    Tensor<T> cx = mul_scalar(
                        add_scalar(sigmoid(select(map, n, 0, y, x)), x), stride);
                    Tensor<T> cy = mul_scalar(
                        add_scalar(sigmoid(select(map, n, 1, y, x)), y), stride);
                    Tensor<T> bw = mul_scalar(
                        exp(clamp(select(map, n, 2, y, x), -kSizeLogitClamp, kSizeLogitClamp)),
                        stride);
                    Tensor<T> bh = mul_scalar(
                        exp(clamp(select(map, n, 3, y, x), -kSizeLogitClamp, kSizeLogitClamp)),
                        stride);
                    Tensor<T> half_w = mul_scalar(bw, 0.5);
                    Tensor<T> half_h = mul_scalar(bh, 0.5);
                    BoxT<T> pred{sub(cx, half_w), sub(cy, half_h), add(cx, half_w),
                                 add(cy, half_h)};
                    box_losses.push_back(
                        giou_loss_t(pred, BoxT<T>::constant(gt.box.normalized())));
                }
            }
        }
        if (any_pos && nc > 0) {
            Tensor<T> mask =
                Tensor<T>::from_vector(Shape4{batch, 1, s.h, s.w}, std::move(cls_mask));
            Tensor<T> cls_bce =
                bce_with_logits(slice_channels(map, 5, nc), std::move(cls_t));
            cls_sums.push_back(sum(mul(cls_bce, mask)));
        }
    }

    DetectionLoss<T> result;
    Tensor<T> obj_loss = mul_scalar(sum_list(std::move(obj_sums)), 1.0 / total_obj_weight);
    Tensor<T> box_loss = targets.num_pos > 0
                             ? mul_scalar(sum_list(std::move(box_losses)),
                                          1.0 / static_cast<double>(targets.num_pos))
                             : Tensor<T>::scalar(T(0));
    Tensor<T> cls_loss =
        (!cls_sums.empty() && nc > 0)
            ? mul_scalar(sum_list(std::move(cls_sums)),
                         1.0 / (static_cast<double>(targets.num_pos) * nc))
            : Tensor<T>::scalar(T(0));
    result.box_term = static_cast<double>(box_loss.item());
    result.obj_term = static_cast<double>(obj_loss.item());
    result.cls_term = static_cast<double>(cls_loss.item());
    result.total = add(add(mul_scalar(box_loss, weights.box), mul_scalar(obj_loss, weights.obj)),
                       mul_scalar(cls_loss, weights.cls));
    return result;
}

}  // namespace m2s
