// Acceptance suite: runs every gated criterion end to end and prints one
// pass/fail line each. Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "m2s/checkpoint.hpp"
#include "m2s/gradcheck.hpp"
#include "m2s/model.hpp"
#include "m2s/pipeline.hpp"
#include "oracles.hpp"

using namespace m2s;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("acceptance: cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// --- criterion 1: gradient suite --------------------------------------------

void criterion_gradients() {
    auto t0 = Clock::now();
    GradcheckOptions opts;
    GradcheckReport rep = run_gradcheck(opts);
    const double elapsed = seconds_since(t0);
    print_gradcheck_table(rep, std::cout);
    double worst = 0;
    for (const auto& r : rep.rows) worst = std::max(worst, r.max_rel_err);
    std::ostringstream detail;
    detail << rep.rows.size() << " ops x 5 seeds, worst rel err " << worst << ", "
           << elapsed << " s";
    report(1, "gradient suite (64-bit FD, tol 1e-6)", rep.all_pass && elapsed < 120.0,
           detail.str());
}

// --- criterion 2: geometry oracle -------------------------------------------

void criterion_geometry() {
    Rng rng(20240817);
    int violations = 0;
    double max_iou_err = 0, max_giou_err = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        auto mk = [&](int& x1, int& y1, int& x2, int& y2) {
            x1 = rng.uniform_int(0, 63);
            x2 = rng.uniform_int(0, 63);
            y1 = rng.uniform_int(0, 63);
            y2 = rng.uniform_int(0, 63);
            if (x2 < x1) std::swap(x1, x2);
            if (y2 < y1) std::swap(y1, y2);
            ++x2;
            ++y2;
        };
        int ax1, ay1, ax2, ay2, bx1, by1, bx2, by2;
        mk(ax1, ay1, ax2, ay2);
        mk(bx1, by1, bx2, by2);
        Box a{double(ax1), double(ay1), double(ax2), double(ay2)};
        Box b{double(bx1), double(by1), double(bx2), double(by2)};
        const double i = iou(a, b);
        const double g = giou(a, b);
        const double l = giou_loss(a, b);
        if (!(g <= i + 1e-12)) ++violations;
        if (!(g > -1.0 && g <= 1.0)) ++violations;
        if (!(l >= 0.0 && l < 2.0)) ++violations;
        auto ref = oracles::raster_iou_giou(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2, 64);
        max_iou_err = std::max(max_iou_err, std::abs(i - ref.iou));
        max_giou_err = std::max(max_giou_err, std::abs(g - ref.giou));
    }
    std::ostringstream detail;
    detail << "10000 pairs, max |iou-oracle| " << max_iou_err << ", max |giou-oracle| "
           << max_giou_err << ", invariant violations " << violations;
    report(2, "geometry matches the rasterized counting oracle",
           violations == 0 && max_iou_err <= 1e-3 && max_giou_err <= 1e-3, detail.str());
}

// --- criterion 3: structural exactness ---------------------------------------

void criterion_structure() {
    Rng rng(7);
    bool ok = true;
    std::string why;

    // pixel_unshuffle equals its loop oracle bit-exactly
    for (int trial = 0; trial < 20 && ok; ++trial) {
        Shape4 s{rng.uniform_int(1, 2), rng.uniform_int(1, 6), 2 * rng.uniform_int(1, 8),
                 2 * rng.uniform_int(1, 8)};
        std::vector<float> data(s.numel());
        for (auto& v : data) v = static_cast<float>(rng.uniform(-5, 5));
        auto x = Tensor<float>::from_vector(s, data);
        auto y = pixel_unshuffle(x, 2);
        Shape4 os;
        auto expect = oracles::pixel_unshuffle_naive(data, s, 2, &os);
        if (!(y.shape() == os)) ok = false;
        for (std::size_t i = 0; ok && i < y.numel(); ++i) {
            if (y.value()[i] != expect[i]) ok = false;
        }
        if (!ok) why = "pixel_unshuffle mismatch";
    }

    // focus pre-projection carries four times the input channels
    for (int trial = 0; trial < 10 && ok; ++trial) {
        const int c = rng.uniform_int(1, 16);
        FocusBlock<float> block(rng, c, 8, Act::LeakyRelu);
        auto x = Tensor<float>::zeros({1, c, 8, 8});
        if (block.pre_projection(x).shape().c != 4 * c) {
            ok = false;
            why = "focus pre-projection channel count";
        }
    }

    // DRM and attention baselines preserve shape across a randomized sweep
    for (int trial = 0; trial < 8 && ok; ++trial) {
        const int low_c = rng.uniform_int(2, 12);
        const int mid_c = rng.uniform_int(2, 12);
        const int high_c = rng.uniform_int(2, 12);
        const int n = rng.uniform_int(1, 2);
        const int hw = 4 * rng.uniform_int(2, 6);
        Drm<float> drm(rng, low_c, low_c, mid_c, high_c, 0, 1, 2);
        TriFeatures<float> tri;
        tri.low = Tensor<float>::full({n, low_c, hw, hw}, 0.3f);
        tri.mid = Tensor<float>::full({n, mid_c, hw / 2, hw / 2}, -0.2f);
        tri.high = Tensor<float>::full({n, high_c, hw / 4, hw / 4}, 0.1f);
        if (!(drm.forward(tri.low, tri).shape() == tri.low.shape())) {
            ok = false;
            why = "drm shape preservation";
        }
        for (auto kind : {AttentionKind::Se, AttentionKind::Eca, AttentionKind::Cbam}) {
            AttentionBaseline<float> block(rng, kind, mid_c);
            if (!(block.forward(tri.mid).shape() == tri.mid.shape())) {
                ok = false;
                why = "baseline shape preservation";
            }
        }
    }
    report(3, "structural exactness (unshuffle oracle, focus 4x, shape sweep)", ok, why);
}

// --- criterion 5: zero-init closed forms -------------------------------------

template <typename T>
bool zero_init_forms(std::string& why) {
    Rng rng(31);
    const double tol = 1e-6;

    Crm<T> crm(rng, 6);
    crm.fc().zero_weights();
    std::vector<T> xd(1 * 6 * 8 * 8), hd(xd.size());
    for (auto& v : xd) v = static_cast<T>(rng.uniform(-2, 2));
    for (auto& v : hd) v = static_cast<T>(rng.uniform(-2, 2));
    auto x = Tensor<T>::from_vector({1, 6, 8, 8}, xd);
    auto hi = Tensor<T>::from_vector({1, 6, 8, 8}, hd);
    auto cr = crm.forward(x, hi);
    for (std::size_t i = 0; i < cr.numel(); ++i) {
        if (std::abs(double(cr.value()[i]) - 0.5 * double(x.value()[i])) > tol) {
            why = "crm zero-init form";
            return false;
        }
    }

    Srm<T> srm(rng, 4);
    srm.stats_conv().zero_weights();
    srm.bias_conv().zero_weights();
    std::vector<T> md(1 * 6 * 8 * 8), ld(1 * 4 * 8 * 8);
    for (auto& v : md) v = static_cast<T>(rng.uniform(-2, 2));
    for (auto& v : ld) v = static_cast<T>(rng.uniform(-2, 2));
    auto mid = Tensor<T>::from_vector({1, 6, 8, 8}, md);
    auto low = Tensor<T>::from_vector({1, 4, 8, 8}, ld);
    auto lf = srm.forward(cr, mid, low);
    for (std::size_t i = 0; i < lf.numel(); ++i) {
        const double expect =
            0.5 * (0.3 * double(mid.value()[i]) + 0.7 * double(cr.value()[i])) + 0.5;
        if (std::abs(double(lf.value()[i]) - expect) > tol) {
            why = "srm zero-init form";
            return false;
        }
    }
    return true;
}

void criterion_zero_init() {
    std::string why;
    bool ok = zero_init_forms<float>(why) && zero_init_forms<double>(why);
    report(5, "zero-initialized attention closed forms (beta = 0.3)", ok, why);
}

// --- criterion 6: reproducibility --------------------------------------------

void criterion_reproducibility(const std::string& ws) {
    RunConfig cfg;
    cfg.config_dir = ws;
    cfg.data_dir = "repro_data";
    cfg.backbone_channels = {4, 6, 8, 10, 12};
    cfg.cam_channels = {8, 12, 16};
    cfg.head_channels = 8;
    cfg.train_count = 8;
    cfg.val_count = 4;
    cfg.batch_size = 4;
    cfg.phase1_epochs = 2;
    cfg.phase2_epochs = 1;

    train_run(cfg, ws + "/repro_a.ckpt", nullptr);
    train_run(cfg, ws + "/repro_b.ckpt", nullptr);
    const bool ckpt_identical =
        read_file(ws + "/repro_a.ckpt") == read_file(ws + "/repro_b.ckpt");

    // save/load round trip
    Model<float> model(ModelDesc::from_config(cfg), cfg.seed);
    ParamRefs<float> params = model.named_parameters();
    load_checkpoint(ws + "/repro_a.ckpt", params, cfg.model_hash());
    save_checkpoint(ws + "/repro_c.ckpt", params, cfg.model_hash());
    const bool roundtrip_identical =
        read_file(ws + "/repro_a.ckpt") == read_file(ws + "/repro_c.ckpt");

    EvalResult e1 = eval_run(cfg, ws + "/repro_a.ckpt", "val", "", false, nullptr);
    std::string r1 = read_file(e1.report_path);
    std::string d1 = read_file(e1.detections_path);
    EvalResult e2 = eval_run(cfg, ws + "/repro_a.ckpt", "val", "", false, nullptr);
    const bool reports_identical =
        read_file(e2.report_path) == r1 && read_file(e2.detections_path) == d1;

    std::ostringstream detail;
    detail << "checkpoints " << (ckpt_identical ? "identical" : "DIFFER") << ", round-trip "
           << (roundtrip_identical ? "bit-exact" : "DIFFERS") << ", reports "
           << (reports_identical ? "byte-identical" : "DIFFER");
    report(6, "reproducibility (train twice, checkpoint round-trip, eval reports)",
           ckpt_identical && roundtrip_identical && reports_identical, detail.str());
}

// --- criterion 7: metrics fixtures -------------------------------------------

void criterion_metric_fixtures() {
    bool ok = true;
    std::string why;

    std::vector<Annotation> gt(1);
    gt[0].image_id = "000000";
    gt[0].objects.push_back({Box{10, 10, 20, 20}, 0});

    {
        std::vector<PredBox> preds{{"000000", 0, 0.9, Box{10, 10, 20, 20}}};
        MetricsReport r = evaluate(preds, gt);
        if (std::abs(r.ap - 1.0) > 1e-12 || std::abs(r.ap50 - 1.0) > 1e-12 ||
            std::abs(r.ap75 - 1.0) > 1e-12 || std::abs(r.ar1 - 1.0) > 1e-12) {
            ok = false;
            why = "perfect-match fixture";
        }
    }
    {
        MetricsReport r = evaluate({}, gt);
        if (r.ap != 0.0 || r.ap50 != 0.0 || r.ap75 != 0.0 || r.ar1 != 0.0 ||
            r.ar10 != 0.0 || r.ar100 != 0.0) {
            ok = false;
            why = "empty-prediction fixture";
        }
    }
    {
        std::vector<PredBox> preds{{"000000", 0, 0.9, Box{10, 10, 20, 20}},
                                   {"000000", 0, 0.8, Box{40, 40, 50, 50}}};
        MetricsReport r = evaluate(preds, gt);
        if (std::abs(r.ap50 - 1.0) > 1e-12) {
            ok = false;
            why = "tp-plus-fp ranking fixture";
        }
    }
    report(7, "hand-computed precision/recall fixtures", ok, why);
}

// --- criterion 4: desk-scale ablation directionality -------------------------

void criterion_ablation(const std::string& ws) {
    auto t0 = Clock::now();
    RunConfig cfg;  // the default desk configuration
    cfg.config_dir = ws;
    cfg.data_dir = "desk_data";

    AblateResult gated = ablate_run(cfg, {"base", "cam+drm"}, {0, 1, 2},
                                    ws + "/gated_ablation.txt", &std::cout);
    const double base_ap50 = gated.rows[0].median.ap50;
    const double full_ap50 = gated.rows[1].median.ap50;
    const double elapsed = seconds_since(t0);

    // train-vs-val sanity on one trained full-model checkpoint
    RunConfig full_cfg = apply_variant(cfg, "cam+drm");
    full_cfg.seed = 0;
    const std::string ckpt = ws + "/gated_ablation.txt.work/cam_drm_s0.ckpt";
    EvalResult on_train = eval_run(full_cfg, ckpt, "train", "", false, nullptr);
    EvalResult on_val = eval_run(full_cfg, ckpt, "val", "", false, nullptr);
    const bool split_sane = on_train.report.ap50 >= on_val.report.ap50;

    // training-loss descent on the same run, read from its epoch log
    double first_loss = 0, last_loss = 0;
    {
        std::istringstream log(read_file(ckpt + ".log"));
        std::string line;
        bool first = true;
        while (std::getline(log, line)) {
            std::istringstream ls(line);
            std::string tok;
            double loss = 0;
            while (ls >> tok) {
                if (tok == "loss") {
                    ls >> loss;
                    break;
                }
            }
            if (first) {
                first_loss = loss;
                first = false;
            }
            last_loss = loss;
        }
    }
    const bool loss_descended = last_loss < first_loss;

    std::ostringstream detail;
    detail << "median val AP50 base " << fmt_f6(base_ap50) << " vs cam+drm "
           << fmt_f6(full_ap50) << "; train-split AP50 " << fmt_f6(on_train.report.ap50)
           << " >= val " << fmt_f6(on_val.report.ap50) << ": "
           << (split_sane ? "yes" : "NO") << "; loss " << fmt_f6(first_loss) << " -> "
           << fmt_f6(last_loss) << "; " << elapsed << " s";
    report(4, "desk-scale ablation: cam+drm beats base on median val AP50",
           full_ap50 > base_ap50 && split_sane && loss_descended, detail.str());
    if (elapsed > 1800.0) {
        std::printf("  note: gated pair exceeded the 30-minute budget (%.0f s)\n", elapsed);
    }

    // remaining variants at the same desk scale, single seed; printed, never
    // gated (the gated pair above already covers base and cam+drm)
    std::printf("report-only variants (desk scale, seed 0):\n");
    std::fflush(stdout);
    AblateResult side = ablate_run(cfg, {"cam", "drm", "cam+se", "cam+eca", "cam+cbam"},
                                   {0}, ws + "/report_only_ablation.txt", nullptr);
    std::printf("%s", side.table_text.c_str());
    std::printf("gated medians for comparison: base ap50 %s, cam+drm ap50 %s\n",
                fmt_f6(base_ap50).c_str(), fmt_f6(full_ap50).c_str());
    std::fflush(stdout);
}

}  // namespace

int main() {
    const std::string ws = "m2s_acceptance_work";
    fs::remove_all(ws);
    fs::create_directories(ws);

    auto guard = [](int id, const char* name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(id, name, false, std::string("exception: ") + e.what());
        }
    };

    guard(1, "gradient suite", [&] { criterion_gradients(); });
    guard(2, "geometry oracle", [&] { criterion_geometry(); });
    guard(3, "structural exactness", [&] { criterion_structure(); });
    guard(5, "zero-init closed forms", [&] { criterion_zero_init(); });
    guard(6, "reproducibility", [&] { criterion_reproducibility(ws); });
    guard(7, "metrics fixtures", [&] { criterion_metric_fixtures(); });
    guard(4, "ablation", [&] { criterion_ablation(ws); });

    std::printf("%d of 7 criteria failed\n", g_failures);
    return g_failures;
}
