#include "m2s/gradcheck.hpp"

#include <functional>
#include <iomanip>
#include <ostream>

#include "m2s/model.hpp"

namespace m2s {

namespace {

template <typename T>
Tensor<T> randt(Rng& rng, Shape4 s, double lo = -1.0, double hi = 1.0,
                bool requires_grad = true) {
    std::vector<T> data(s.numel());
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_vector(s, std::move(data), requires_grad);
}

// Fixed random probe so the scalar loss exercises every output element.
template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t probe_seed) {
    Rng r(probe_seed);
    std::vector<T> w(y.numel());
    for (auto& v : w) v = static_cast<T>(r.uniform(-1.0, 1.0));
    return sum(mul(y, Tensor<T>::from_vector(y.shape(), std::move(w))));
}

ModelDesc tiny_desc() {
    ModelDesc d;
    d.num_classes = 2;
    d.backbone_channels = {4, 6, 8, 10, 12};
    d.cam_channels = {8, 12, 16};
    d.head_channels = 8;
    d.attention = AttentionKind::Drm;
    d.use_cam = true;
    return d;
}

// Ground truths hitting all three level brackets of a 32x32 image.
std::vector<std::vector<GtBox>> loss_fixture_gts() {
    std::vector<std::vector<GtBox>> gts(1);
    gts[0].push_back({Box{5, 5, 13, 13}, 0});   // side 8  -> p2
    gts[0].push_back({Box{8, 6, 28, 26}, 1});   // side 20 -> p3
    gts[0].push_back({Box{0, 0, 32, 32}, 0});   // side 32 -> p4
    return gts;
}

const std::vector<std::string>& case_names() {
    static const std::vector<std::string> names = {
        "sigmoid",          "leaky_relu",          "exp_clamp",  "bce_logits",
        "add_sub",          "mul_div",             "min_max",    "conv2d_s1",
        "conv2d_s2",        "conv2d_1x1",          "pixel_unshuffle", "bilinear_up",
        "bilinear_down",    "style_pool",          "spatial_stats", "spatial_mean_max",
        "channel_mean_max", "concat_slice_select", "eca_conv1d", "focus_block",
        "bottleneck",       "backbone",            "cfn",        "cam",
        "crm",              "srm_beta",            "drm",        "se",
        "eca",              "cbam",                "head",       "giou",
        "detection_loss",   "cam_drm_loss"};
    return names;
}

// Builds the named case's loss graph from a deterministic rng stream. The
// double and long-double twins are built from the same stream, so their leaf
// values match exactly.
template <typename T>
FdGraph<T> build_case_graph(const std::string& name, Rng& rng) {
    FdGraph<T> g;
    auto keep = [&g](std::initializer_list<Tensor<T>> ts) {
        for (const auto& t : ts) g.wrt.push_back(t);
    };
    auto keep_params = [&g](const ParamRefs<T>& ps) {
        for (const auto& p : ps) g.wrt.push_back(p.tensor);
    };

    if (name == "sigmoid") {
        auto x = randt<T>(rng, {1, 2, 3, 3}, -3, 3);
        keep({x});
        g.forward = [x] { return probe(sigmoid(x), 11); };
    } else if (name == "leaky_relu") {
        auto x = randt<T>(rng, {1, 2, 3, 3}, -2, 2);
        keep({x});
        g.forward = [x] { return probe(leaky_relu(x, 0.1), 12); };
    } else if (name == "exp_clamp") {
        auto x = randt<T>(rng, {1, 1, 3, 4}, -2, 2);
        keep({x});
        g.forward = [x] { return probe(exp(clamp(x, -1.3, 1.3)), 13); };
    } else if (name == "bce_logits") {
        auto x = randt<T>(rng, {1, 2, 3, 3}, -3, 3);
        std::vector<T> t(x.numel());
        for (auto& v : t) v = rng.uniform() > 0.5 ? T(1) : T(0);
        keep({x});
        g.forward = [x, t] { return probe(bce_with_logits(x, t), 14); };
    } else if (name == "add_sub") {
        auto a = randt<T>(rng, {2, 3, 2, 2});
        auto b = randt<T>(rng, {2, 3, 1, 1});
        keep({a, b});
        g.forward = [a, b] { return probe(sub(add(a, b), mul_scalar(b, 0.7)), 15); };
    } else if (name == "mul_div") {
        auto a = randt<T>(rng, {2, 3, 2, 2});
        auto b = randt<T>(rng, {1, 3, 1, 1}, 0.5, 2.0);
        keep({a, b});
        g.forward = [a, b] { return probe(div(mul(a, b), add_scalar(b, 1.0)), 16); };
    } else if (name == "min_max") {
        auto a = randt<T>(rng, {1, 2, 3, 3});
        auto b = randt<T>(rng, {1, 2, 3, 3});
        keep({a, b});
        g.forward = [a, b] {
            return probe(maximum(minimum(a, b), mul_scalar(b, -0.5)), 17);
        };
    } else if (name == "conv2d_s1") {
        auto x = randt<T>(rng, {2, 3, 5, 5});
        auto w = randt<T>(rng, {4, 3, 3, 3});
        auto b = randt<T>(rng, {1, 4, 1, 1});
        keep({x, w, b});
        g.forward = [x, w, b] { return probe(conv2d(x, w, b, 1, 1), 18); };
    } else if (name == "conv2d_s2") {
        auto x = randt<T>(rng, {1, 2, 7, 7});
        auto w = randt<T>(rng, {3, 2, 3, 3});
        auto b = randt<T>(rng, {1, 3, 1, 1});
        keep({x, w, b});
        g.forward = [x, w, b] { return probe(conv2d(x, w, b, 2, 1), 19); };
    } else if (name == "conv2d_1x1") {
        auto x = randt<T>(rng, {1, 4, 3, 3});
        auto w = randt<T>(rng, {2, 4, 1, 1});
        auto b = randt<T>(rng, {1, 2, 1, 1});
        keep({x, w, b});
        g.forward = [x, w, b] { return probe(conv2d(x, w, b, 1, 0), 20); };
    } else if (name == "pixel_unshuffle") {
        auto x = randt<T>(rng, {1, 3, 4, 6});
        keep({x});
        g.forward = [x] { return probe(pixel_unshuffle(x, 2), 21); };
    } else if (name == "bilinear_up") {
        auto x = randt<T>(rng, {1, 2, 3, 3});
        keep({x});
        g.forward = [x] { return probe(bilinear_resize(x, 7, 5), 22); };
    } else if (name == "bilinear_down") {
        auto x = randt<T>(rng, {1, 2, 8, 6});
        keep({x});
        g.forward = [x] { return probe(bilinear_resize(x, 3, 4), 23); };
    } else if (name == "style_pool") {
        auto x = randt<T>(rng, {2, 3, 4, 4});
        keep({x});
        g.forward = [x] {
            auto [avg, sd] = style_pool(x);
            return add(probe(avg, 24), probe(sd, 25));
        };
    } else if (name == "spatial_stats") {
        auto x = randt<T>(rng, {1, 4, 3, 3});
        keep({x});
        g.forward = [x] { return probe(spatial_stats(x), 26); };
    } else if (name == "spatial_mean_max") {
        auto x = randt<T>(rng, {2, 3, 3, 3});
        keep({x});
        g.forward = [x] {
            return add(probe(spatial_mean(x), 27), probe(spatial_max(x), 28));
        };
    } else if (name == "channel_mean_max") {
        auto x = randt<T>(rng, {1, 5, 3, 3});
        keep({x});
        g.forward = [x] {
            return add(probe(channel_mean(x), 29), probe(channel_max(x), 30));
        };
    } else if (name == "concat_slice_select") {
        auto a = randt<T>(rng, {1, 2, 3, 3});
        auto b = randt<T>(rng, {1, 3, 3, 3});
        keep({a, b});
        g.forward = [a, b] {
            auto cc = concat_channels<T>({a, b});
            return add(probe(slice_channels(cc, 1, 3), 31), select(cc, 0, 4, 2, 1));
        };
    } else if (name == "eca_conv1d") {
        auto x = randt<T>(rng, {2, 6, 1, 1});
        auto w = randt<T>(rng, {1, 1, 1, 3});
        keep({x, w});
        g.forward = [x, w] { return probe(eca_conv1d(x, w), 32); };
    } else if (name == "focus_block") {
        FocusBlock<T> block(rng, 3, 5, Act::LeakyRelu);
        auto x = randt<T>(rng, {1, 3, 6, 6});
        ParamRefs<T> ps;
        block.collect("f", ps);
        keep({x});
        keep_params(ps);
        g.forward = [block, x] { return probe(block.forward(x), 33); };
    } else if (name == "bottleneck") {
        Bottleneck<T> block(rng, 4, 4);
        auto x = randt<T>(rng, {1, 4, 4, 4});
        ParamRefs<T> ps;
        block.collect("b", ps);
        keep({x});
        keep_params(ps);
        g.forward = [block, x] { return probe(block.forward(x), 34); };
    } else if (name == "backbone") {
        Backbone<T> bb(rng, {3, 4, 5, 6, 7});
        auto x = randt<T>(rng, {1, 3, 32, 32}, 0.0, 1.0);
        ParamRefs<T> ps;
        bb.collect("bb", ps);
        keep({x, ps[0].tensor, ps[ps.size() / 2].tensor, ps.back().tensor});
        g.forward = [bb, x] {
            auto pyr = bb.forward(x);
            return add(probe(pyr.c(5), 35), probe(pyr.c(2), 36));
        };
    } else if (name == "cfn") {
        Cfn<T> node(rng, 3, 4, 5, 6);
        auto lo = randt<T>(rng, {1, 3, 8, 8});
        auto mi = randt<T>(rng, {1, 4, 4, 4});
        auto hi = randt<T>(rng, {1, 5, 2, 2});
        ParamRefs<T> ps;
        node.collect("n", ps);
        keep({lo, mi, hi});
        keep_params(ps);
        g.forward = [node, lo, mi, hi] { return probe(node.forward(lo, mi, hi), 37); };
    } else if (name == "cam") {
        std::array<int, 5> bc{3, 4, 5, 6, 7};
        Cam<T> cam(rng, CamPlan::default_plan(), bc, {6, 8, 10});
        FeaturePyramid<T> pyr;
        int size = 16;
        for (int k = 0; k < 5; ++k) {
            pyr.levels[k] = randt<T>(rng, {1, bc[k], size, size});
            size /= 2;
        }
        ParamRefs<T> ps;
        cam.collect("cam", ps);
        keep({pyr.levels[0], pyr.levels[4], ps[0].tensor, ps[ps.size() / 2].tensor,
              ps.back().tensor});
        g.forward = [cam, pyr] {
            auto tri = cam.forward(pyr);
            return add(add(probe(tri.low, 38), probe(tri.mid, 39)), probe(tri.high, 40));
        };
    } else if (name == "crm") {
        Crm<T> crm(rng, 4);
        auto x = randt<T>(rng, {1, 4, 4, 4});
        auto hi = randt<T>(rng, {1, 4, 4, 4});
        ParamRefs<T> ps;
        crm.collect("crm", ps);
        keep({x, hi});
        keep_params(ps);
        g.forward = [crm, x, hi] { return probe(crm.forward(x, hi), 41); };
    } else if (name == "srm_beta") {
        Srm<T> srm(rng, 3);
        auto cr = randt<T>(rng, {1, 4, 4, 4});
        auto mid = randt<T>(rng, {1, 4, 4, 4});
        auto low = randt<T>(rng, {1, 3, 4, 4});
        ParamRefs<T> ps;
        srm.collect("srm", ps);
        keep({cr, mid, low});
        keep_params(ps);  // includes beta
        g.forward = [srm, cr, mid, low] { return probe(srm.forward(cr, mid, low), 42); };
    } else if (name == "drm") {
        Drm<T> drm(rng, 4, 4, 5, 6, 0, 1, 2);
        TriFeatures<T> tri;
        tri.low = randt<T>(rng, {1, 4, 8, 8});
        tri.mid = randt<T>(rng, {1, 5, 4, 4});
        tri.high = randt<T>(rng, {1, 6, 2, 2});
        ParamRefs<T> ps;
        drm.collect("drm", ps);
        keep({tri.low, tri.mid, tri.high});
        keep_params(ps);
        g.forward = [drm, tri] { return probe(drm.forward(tri.low, tri), 43); };
    } else if (name == "se") {
        SeBlock<T> block(rng, 8);
        auto x = randt<T>(rng, {1, 8, 3, 3});
        ParamRefs<T> ps;
        block.collect("se", ps);
        keep({x});
        keep_params(ps);
        g.forward = [block, x] { return probe(block.forward(x), 44); };
    } else if (name == "eca") {
        EcaBlock<T> block(rng);
        auto x = randt<T>(rng, {1, 6, 3, 3});
        ParamRefs<T> ps;
        block.collect("eca", ps);
        keep({x});
        keep_params(ps);
        g.forward = [block, x] { return probe(block.forward(x), 45); };
    } else if (name == "cbam") {
        CbamBlock<T> block(rng, 8);
        auto x = randt<T>(rng, {1, 8, 4, 4});
        ParamRefs<T> ps;
        block.collect("cbam", ps);
        keep({x});
        keep_params(ps);
        g.forward = [block, x] { return probe(block.forward(x), 46); };
    } else if (name == "head") {
        LevelHead<T> head(rng, 4, 6, 2);
        // the projection is zero-initialized for training; give it random
        // weights here so gradients flow through the whole head
        for (auto& v : head.proj().weight().mutable_value()) {
            v = static_cast<T>(rng.uniform(-0.5, 0.5));
        }
        auto x = randt<T>(rng, {1, 4, 4, 4});
        ParamRefs<T> ps;
        head.collect("h", ps);
        keep({x});
        keep_params(ps);
        g.forward = [head, x] { return probe(head.forward(x), 47); };
    } else if (name == "giou") {
        auto sc = [&](double lo, double hi) {
            return Tensor<T>::scalar(static_cast<T>(rng.uniform(lo, hi)), true);
        };
        auto x1 = sc(0, 3), y1 = sc(0, 3), x2 = sc(3.5, 6), y2 = sc(3.5, 6);
        Box gt{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(3, 6), rng.uniform(3, 6)};
        keep({x1, y1, x2, y2});
        g.forward = [x1, y1, x2, y2, gt] {
            return giou_loss_t(BoxT<T>{x1, y1, x2, y2}, BoxT<T>::constant(gt));
        };
    } else if (name == "detection_loss") {
        HeadOutput<T> out;
        out.maps[0] = randt<T>(rng, {1, 7, 8, 8}, -2, 2);
        out.maps[1] = randt<T>(rng, {1, 7, 4, 4}, -2, 2);
        out.maps[2] = randt<T>(rng, {1, 7, 2, 2}, -2, 2);
        out.num_classes = 2;
        Targets targets = assign_targets(loss_fixture_gts(), out.geoms());
        keep({out.maps[0], out.maps[1], out.maps[2]});
        g.forward = [out, targets] { return detection_loss(out, targets).total; };
    } else if (name == "cam_drm_loss") {
        Model<T> model(tiny_desc(), rng.next_u64());
        auto image = randt<T>(rng, {1, 3, 32, 32}, 0.0, 1.0);
        ParamRefs<T> ps = model.named_parameters();
        // randomize the zero-initialized head projections so the probe
        // reaches every upstream module
        for (auto& p : ps) {
            if (p.name.find("head.") == 0 && p.name.find(".proj.") != std::string::npos) {
                for (auto& v : p.tensor.mutable_value()) {
                    v = static_cast<T>(rng.uniform(-0.4, 0.4));
                }
            }
        }
        auto gts = loss_fixture_gts();
        keep({image});
        // a spread of parameters across the modules, always including beta
        for (std::size_t i = 0; i < ps.size(); i += std::max<std::size_t>(1, ps.size() / 8)) {
            g.wrt.push_back(ps[i].tensor);
        }
        for (auto& p : ps) {
            if (p.name.find("beta") != std::string::npos) g.wrt.push_back(p.tensor);
        }
        g.forward = [model, image, gts] {
            HeadOutput<T> out = model.forward(image);
            Targets targets = assign_targets(gts, out.geoms());
            return detection_loss(out, targets).total;
        };
    } else {
        throw ValidationError("gradcheck: unknown case '" + name + "'");
    }
    return g;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() { return case_names(); }

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
    GradcheckReport report;
    const auto& names = case_names();
    bool matched_any = false;
    for (std::size_t ci = 0; ci < names.size(); ++ci) {
        const std::string& name = names[ci];
        if (!opts.op_filter.empty() && name.find(opts.op_filter) == std::string::npos) {
            continue;
        }
        matched_any = true;
        FdResult agg;
        agg.name = name;
        agg.pass = true;
        for (int s = 0; s < opts.num_seeds; ++s) {
            const std::uint64_t case_seed = opts.seed + 1000003ull * s + 17ull * ci;
            Rng rng_d(case_seed);
            Rng rng_e(case_seed);
            FdGraph<double> graph = build_case_graph<double>(name, rng_d);
            FdGraph<long double> twin = build_case_graph<long double>(name, rng_e);
            Rng sampler(opts.seed ^ (0xABCDull + s + ci));
            FdOptions fd = opts.fd;
            fd.corrupt_analytic = opts.corrupt;
            if (name == "cam_drm_loss") fd.max_elems_per_tensor = 4;
            FdResult r = fd_check_dual(name, graph, twin, sampler, fd);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.checked += r.checked;
            agg.skipped += r.skipped;
            agg.pass = agg.pass && r.pass;
        }
        report.rows.push_back(agg);
        report.all_pass = report.all_pass && agg.pass;
    }
    if (!matched_any) {
        throw ValidationError("gradcheck: no op matches filter '" + opts.op_filter + "'");
    }
    return report;
}

void print_gradcheck_table(const GradcheckReport& report, std::ostream& os) {
    os << "op                     max_rel_err   checked  skipped  status\n";
    for (const auto& r : report.rows) {
        os << std::left << std::setw(22) << r.name << " " << std::scientific
           << std::setprecision(3) << r.max_rel_err << "     " << std::dec << std::setw(7)
           << r.checked << "  " << std::setw(7) << r.skipped << "  "
           << (r.pass ? "pass" : "FAIL") << "\n";
    }
    os << (report.all_pass ? "all gradients match finite differences\n"
                           : "GRADIENT CHECK FAILURES PRESENT\n");
}

}  // namespace m2s
