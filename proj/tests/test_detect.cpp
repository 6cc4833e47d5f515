#include <doctest.h>

#include <cmath>

#include "m2s/detect.hpp"
#include "m2s/gradcheck.hpp"
#include "oracles.hpp"

using namespace m2s;

TEST_CASE("iou closed-form examples") {
    CHECK(iou(Box{3, 4, 9, 11}, Box{3, 4, 9, 11}) == doctest::Approx(1.0));
    CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
    CHECK(iou(Box{0, 0, 1, 1}, Box{5, 5, 6, 6}) == doctest::Approx(0.0));
    // degenerate zero-area boxes yield 0
    CHECK(iou(Box{2, 2, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(0.0));
}

TEST_CASE("giou closed-form examples") {
    CHECK(giou(Box{1, 1, 4, 4}, Box{1, 1, 4, 4}) == doctest::Approx(1.0));
    CHECK(giou(Box{0, 0, 1, 1}, Box{2, 0, 3, 1}) == doctest::Approx(-1.0 / 3.0));
    CHECK(giou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
          doctest::Approx(1.0 / 7.0 - 2.0 / 9.0));
}

TEST_CASE("giou_loss closed forms and the far-separation asymptote") {
    CHECK(giou_loss(Box{1, 2, 3, 4}, Box{1, 2, 3, 4}) == doctest::Approx(0.0));
    CHECK(giou_loss(Box{0, 0, 1, 1}, Box{2, 0, 3, 1}) == doctest::Approx(4.0 / 3.0));
    double prev = 0;
    for (double sep = 2; sep < 4000; sep *= 2) {
        const double loss = giou_loss(Box{0, 0, 1, 1}, Box{sep, 0, sep + 1, 1});
        CHECK(loss > prev);   // monotonically approaches 2
        CHECK(loss < 2.0);
        prev = loss;
    }
    CHECK(prev > 1.99);
}

TEST_CASE("iou/giou invariants and the rasterized counting oracle") {
    Rng rng(17);
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto mk = [&] {
            int x1 = rng.uniform_int(0, 63), x2 = rng.uniform_int(0, 63);
            int y1 = rng.uniform_int(0, 63), y2 = rng.uniform_int(0, 63);
            return Box{double(std::min(x1, x2)), double(std::min(y1, y2)),
                       double(std::max(x1, x2) + 1), double(std::max(y1, y2) + 1)};
        };
        Box a = mk(), b = mk();
        const double i = iou(a, b);
        const double g = giou(a, b);
        CHECK(g <= i + 1e-12);
        CHECK(g > -1.0);
        CHECK(g <= 1.0);
        CHECK(giou_loss(a, b) >= 0.0);
        CHECK(giou_loss(a, b) < 2.0);
        auto ref = oracles::raster_iou_giou(int(a.x1), int(a.y1), int(a.x2), int(a.y2),
                                            int(b.x1), int(b.y1), int(b.x2), int(b.y2), 64);
        CHECK(std::abs(i - ref.iou) <= 1e-3);
        CHECK(std::abs(g - ref.giou) <= 1e-3);
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("giou equals iou when one box contains the other") {
    CHECK(giou(Box{0, 0, 10, 10}, Box{2, 2, 5, 5}) ==
          doctest::Approx(iou(Box{0, 0, 10, 10}, Box{2, 2, 5, 5})));
}

TEST_CASE("tensor-path giou matches the plain geometry on random boxes") {
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        Box a{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(30, 64), rng.uniform(30, 64)};
        Box b{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(30, 64), rng.uniform(30, 64)};
        auto ga = giou_t(BoxT<double>::constant(a), BoxT<double>::constant(b)).item();
        CHECK(ga == doctest::Approx(giou(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("head emits the 4+1+classes channel layout per level") {
    Rng rng(1);
    LevelHead<float> p2(rng, 64, 64, 2), p3(rng, 128, 64, 2), p4(rng, 256, 64, 2);
    auto lf = Tensor<float>::full({1, 64, 16, 16}, 0.1f);
    auto mid = Tensor<float>::full({1, 128, 8, 8}, 0.1f);
    auto high = Tensor<float>::full({1, 256, 4, 4}, 0.1f);
    CHECK(p2.forward(lf).shape() == Shape4{1, 7, 16, 16});
    CHECK(p3.forward(mid).shape() == Shape4{1, 7, 8, 8});
    CHECK(p4.forward(high).shape() == Shape4{1, 7, 4, 4});
}

TEST_CASE("zero-initialized projection yields objectness probability one half") {
    Rng rng(2);
    LevelHead<float> head(rng, 8, 8, 2);
    head.proj().zero_weights();
    auto y = head.forward(Tensor<float>::full({1, 8, 4, 4}, 0.3f));
    for (int i = 0; i < 4; ++i) {
        const double z = y.at(0, 4, i, i % 4);
        CHECK(1.0 / (1.0 + std::exp(-z)) == doctest::Approx(0.5));
    }
}

TEST_CASE("assign_targets routes by size bracket and center cell") {
    std::array<LevelGeom, 3> geoms{LevelGeom{4, 16, 16}, LevelGeom{8, 8, 8},
                                   LevelGeom{16, 4, 4}};
    SUBCASE("an 8px box centered at (10,10) is a p2 positive at cell (2,2)") {
        std::vector<std::vector<GtBox>> gts(1);
        gts[0].push_back({Box{6, 6, 14, 14}, 0});
        Targets t = assign_targets(gts, geoms);
        CHECK(t.num_pos == 1);
        CHECK(t.levels[0].gt_index[2 * 16 + 2] == 0);
        for (int v : t.levels[1].gt_index) CHECK(v == -1);
        for (int v : t.levels[2].gt_index) CHECK(v == -1);
    }
    SUBCASE("empty ground truth gives all-negative targets") {
        std::vector<std::vector<GtBox>> gts(2);
        Targets t = assign_targets(gts, geoms);
        CHECK(t.num_pos == 0);
        for (const auto& lt : t.levels) {
            for (int v : lt.gt_index) CHECK(v == -1);
        }
    }
    SUBCASE("a contested cell goes to the larger box") {
        std::vector<std::vector<GtBox>> gts(1);
        gts[0].push_back({Box{8, 8, 13, 13}, 0});   // area 25, center (10.5,10.5) -> cell (2,2)
        gts[0].push_back({Box{6, 6, 16, 16}, 1});   // area 100, center (11,11) -> cell (2,2)
        Targets t = assign_targets(gts, geoms);
        CHECK(t.num_pos == 1);
        CHECK(t.levels[0].gt_index[2 * 16 + 2] == 1);
    }
    SUBCASE("size brackets split at 16 and 32 pixels") {
        std::vector<std::vector<GtBox>> gts(1);
        gts[0].push_back({Box{0, 0, 15.9, 8}, 0});   // p2
        gts[0].push_back({Box{20, 20, 36, 30}, 0});  // longer side 16 -> p3
        gts[0].push_back({Box{10, 30, 50, 62}, 0});  // longer side 40 -> p4
        Targets t = assign_targets(gts, geoms);
        auto count = [&](int level) {
            int c = 0;
            for (int v : t.levels[level].gt_index) c += (v >= 0);
            return c;
        };
        CHECK(count(0) == 1);
        CHECK(count(1) == 1);
        CHECK(count(2) == 1);
    }
}

namespace {

HeadOutput<float> blank_output(int num_classes, double obj_logit) {
    HeadOutput<float> out;
    out.maps[0] = Tensor<float>::zeros({1, 5 + num_classes, 16, 16});
    out.maps[1] = Tensor<float>::zeros({1, 5 + num_classes, 8, 8});
    out.maps[2] = Tensor<float>::zeros({1, 5 + num_classes, 4, 4});
    out.num_classes = num_classes;
    for (auto& map : out.maps) {
        const Shape4 s = map.shape();
        auto& v = map.mutable_value();
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                v[(4 * s.h + y) * s.w + x] = static_cast<float>(obj_logit);
            }
        }
    }
    return out;
}

void set_cell(HeadOutput<float>& out, int level, int cy, int cx, const EncodedCell& e,
              int class_id, double obj_logit) {
    auto& map = out.maps[level];
    const Shape4 s = map.shape();
    auto& v = map.mutable_value();
    auto at = [&](int c) -> float& { return v[(c * s.h + cy) * s.w + cx]; };
    at(0) = static_cast<float>(e.tx);
    at(1) = static_cast<float>(e.ty);
    at(2) = static_cast<float>(e.tw);
    at(3) = static_cast<float>(e.th);
    at(4) = static_cast<float>(obj_logit);
    for (int c = 0; c < out.num_classes; ++c) {
        at(5 + c) = (c == class_id) ? 6.f : -6.f;
    }
}

}  // namespace

TEST_CASE("decode of a single positive cell with zero offsets") {
    auto out = blank_output(2, -40.0);
    // cell (2,2) on p2: zero offsets decode to center (10,10), size (4,4)
    auto& v = out.maps[0].mutable_value();
    const Shape4 s = out.maps[0].shape();
    v[(4 * s.h + 2) * s.w + 2] = 40.f;       // objectness
    v[(5 * s.h + 2) * s.w + 2] = 40.f;       // class 0
    auto dets = decode_and_nms(out, 0.25, 0.45, 300);
    REQUIRE(dets[0].size() == 1);
    const Detection& d = dets[0][0];
    CHECK(d.box.x1 == doctest::Approx(8.0));
    CHECK(d.box.y1 == doctest::Approx(8.0));
    CHECK(d.box.x2 == doctest::Approx(12.0));
    CHECK(d.box.y2 == doctest::Approx(12.0));
    CHECK(d.class_id == 0);
}

TEST_CASE("saturated-negative objectness gives an empty detection list") {
    auto out = blank_output(2, -40.0);
    CHECK(decode_and_nms(out, 0.25, 0.45, 300)[0].empty());
}

TEST_CASE("nms suppresses the lower-scoring overlapping duplicate") {
    auto out = blank_output(1, -40.0);
    std::array<LevelGeom, 3> geoms{LevelGeom{4, 16, 16}, LevelGeom{8, 8, 8},
                                   LevelGeom{16, 4, 4}};
    // two heavily overlapping boxes whose centers land in adjacent p2 cells
    Box box_a{6, 6, 14, 14};        // center (10,10) -> cell (2,2)
    Box box_b{8.2, 6, 16.2, 14};    // center (12.2,10) -> cell (3,2)
    REQUIRE(iou(box_a, box_b) > 0.45);
    EncodedCell ea = encode_gt(box_a, geoms);
    EncodedCell eb = encode_gt(box_b, geoms);
    REQUIRE(ea.cell_x != eb.cell_x);
    set_cell(out, 0, ea.cell_y, ea.cell_x, ea, 0, 5.0);  // higher score
    set_cell(out, 0, eb.cell_y, eb.cell_x, eb, 0, 3.0);
    auto dets = decode_and_nms(out, 0.25, 0.45, 300);
    REQUIRE(dets[0].size() == 1);
    CHECK(dets[0][0].score > 0.9);
    CHECK(dets[0][0].box.x1 == doctest::Approx(6.0).epsilon(1e-4));
}

TEST_CASE("nms output scores are non-increasing and survivors do not overlap") {
    Rng rng(31);
    HeadOutput<float> out;
    out.maps[0] = Tensor<float>::zeros({1, 7, 16, 16});
    out.maps[1] = Tensor<float>::zeros({1, 7, 8, 8});
    out.maps[2] = Tensor<float>::zeros({1, 7, 4, 4});
    out.num_classes = 2;
    for (auto& map : out.maps) {
        for (auto& v : map.mutable_value()) v = static_cast<float>(rng.uniform(-3, 3));
    }
    auto dets = decode_and_nms(out, 0.05, 0.45, 300);
    const auto& keep = dets[0];
    for (std::size_t i = 1; i < keep.size(); ++i) {
        CHECK(keep[i - 1].score >= keep[i].score);
    }
    for (std::size_t i = 0; i < keep.size(); ++i) {
        for (std::size_t j = i + 1; j < keep.size(); ++j) {
            if (keep[i].class_id == keep[j].class_id) {
                CHECK(iou(keep[i].box, keep[j].box) <= 0.45 + 1e-9);
            }
        }
    }
}

TEST_CASE("encode-decode consistency reproduces ground truth within 1e-4 px") {
    Rng rng(41);
    std::array<LevelGeom, 3> geoms{LevelGeom{4, 16, 16}, LevelGeom{8, 8, 8},
                                   LevelGeom{16, 4, 4}};
    for (int trial = 0; trial < 50; ++trial) {
        const double size = rng.uniform(3, 50);
        const double cx = rng.uniform(size / 2 + 1, 63 - size / 2);
        const double cy = rng.uniform(size / 2 + 1, 63 - size / 2);
        Box gt{cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2};
        EncodedCell e = encode_gt(gt, geoms);
        auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
        const LevelGeom& g = geoms[e.level];
        const double dx = (e.cell_x + sig(e.tx)) * g.stride;
        const double dy = (e.cell_y + sig(e.ty)) * g.stride;
        const double dw = std::exp(e.tw) * g.stride;
        const double dh = std::exp(e.th) * g.stride;
        CHECK(std::abs(dx - cx) <= 1e-4);
        CHECK(std::abs(dy - cy) <= 1e-4);
        CHECK(std::abs(dw - size) <= 1e-4);
        CHECK(std::abs(dh - size) <= 1e-4);
    }
}

TEST_CASE("detection_loss on perfect saturated predictions is below 1e-10") {
    HeadOutput<double> out;
    out.maps[0] = Tensor<double>::zeros({1, 7, 16, 16});
    out.maps[1] = Tensor<double>::zeros({1, 7, 8, 8});
    out.maps[2] = Tensor<double>::zeros({1, 7, 4, 4});
    out.num_classes = 2;
    for (auto& map : out.maps) {
        const Shape4 s = map.shape();
        auto& v = map.mutable_value();
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) v[(4 * s.h + y) * s.w + x] = -40.0;
        }
    }
    std::vector<std::vector<GtBox>> gts(1);
    gts[0].push_back({Box{6.2, 6.2, 14.1, 13.3}, 1});
    auto geoms = out.geoms();
    Targets targets = assign_targets(gts, geoms);
    EncodedCell e = encode_gt(gts[0][0].box, geoms);
    auto& map = out.maps[e.level];
    const Shape4 s = map.shape();
    auto& v = map.mutable_value();
    auto at = [&](int c) -> double& { return v[(c * s.h + e.cell_y) * s.w + e.cell_x]; };
    at(0) = e.tx;
    at(1) = e.ty;
    at(2) = e.tw;
    at(3) = e.th;
    at(4) = 40.0;
    at(5) = -40.0;
    at(6) = 40.0;
    auto loss = detection_loss(out, targets);
    CHECK(loss.total.item() < 1e-10);
}

TEST_CASE("background-only image with zero logits costs ln 2 in the objectness term") {
    HeadOutput<double> out;
    out.maps[0] = Tensor<double>::zeros({2, 7, 8, 8});
    out.maps[1] = Tensor<double>::zeros({2, 7, 4, 4});
    out.maps[2] = Tensor<double>::zeros({2, 7, 2, 2});
    out.num_classes = 2;
    std::vector<std::vector<GtBox>> gts(2);
    Targets targets = assign_targets(gts, out.geoms());
    auto loss = detection_loss(out, targets);
    CHECK(loss.box_term == doctest::Approx(0.0));
    CHECK(loss.cls_term == doctest::Approx(0.0));
    CHECK(loss.obj_term == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss.total.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("zero positives leave only the objectness term, with gradient flow") {
    HeadOutput<double> out;
    Rng rng(5);
    std::vector<double> d(1 * 7 * 8 * 8);
    for (auto& x : d) x = rng.uniform(-1, 1);
    out.maps[0] = Tensor<double>::from_vector({1, 7, 8, 8}, std::move(d), true);
    out.maps[1] = Tensor<double>::zeros({1, 7, 4, 4}, true);
    out.maps[2] = Tensor<double>::zeros({1, 7, 2, 2}, true);
    out.num_classes = 2;
    std::vector<std::vector<GtBox>> gts(1);
    Targets targets = assign_targets(gts, out.geoms());
    auto loss = detection_loss(out, targets);
    backward(loss.total);
    CHECK(out.maps[0].has_grad());
    double gsum = 0;
    for (double g : out.maps[0].grad()) gsum += std::abs(g);
    CHECK(gsum > 0);
}

TEST_CASE("head and loss gradients match finite differences") {
    for (const char* op : {"head", "giou", "detection_loss"}) {
        GradcheckOptions opts;
        opts.op_filter = op;
        auto report = run_gradcheck(opts);
        INFO("op = " << op);
        CHECK(report.all_pass);
    }
}
