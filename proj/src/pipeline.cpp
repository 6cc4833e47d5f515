#include "m2s/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "m2s/checkpoint.hpp"
#include "m2s/data.hpp"
#include "m2s/model.hpp"
#include "m2s/optim.hpp"

namespace fs = std::filesystem;

namespace m2s {

std::string EpochLog::line() const {
    std::ostringstream os;
    os << "epoch " << epoch << " phase " << phase << " loss " << fmt_f6(loss) << " box "
       << fmt_f6(box) << " obj " << fmt_f6(obj) << " cls " << fmt_f6(cls) << " beta "
       << (has_beta ? fmt_f6(beta) : std::string("-")) << " val_ap50 " << fmt_f6(val_ap50);
    return os.str();
}

namespace {

std::vector<GtBox> gts_of(const Annotation& a) { return a.objects; }

std::vector<PredBox> predict_split(const Model<float>& model, const Dataset& ds,
                                   const std::vector<std::string>& ids,
                                   const RunConfig& cfg) {
    NoGradGuard ng;
    std::vector<PredBox> preds;
    for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(ids.size(), start + cfg.batch_size);
        std::vector<Image> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(load_image(ds, ids[i]));
        HeadOutput<float> out = model.forward(images_to_tensor<float>(images));
        auto dets = decode_and_nms(out, cfg.conf, cfg.nms_iou, cfg.max_det);
        for (std::size_t i = start; i < end; ++i) {
            for (const Detection& d : dets[i - start]) {
                preds.push_back({ids[i], d.class_id, d.score, d.box});
            }
        }
    }
    return preds;
}

std::vector<Annotation> split_annotations(const Dataset& ds,
                                          const std::vector<std::string>& ids) {
    std::vector<Annotation> anns;
    anns.reserve(ids.size());
    for (const auto& id : ids) anns.push_back(ds.by_id(id));
    return anns;
}

void say(std::ostream* console, const std::string& line) {
    if (console) *console << line << "\n" << std::flush;
}

}  // namespace

TrainResult train_run(const RunConfig& cfg, const std::string& out_ckpt,
                      std::ostream* console) {
    cfg.validate();
    Dataset ds = ensure_dataset(cfg);
    const ModelDesc desc = ModelDesc::from_config(cfg);
    Model<float> model(desc, cfg.seed);
    ParamRefs<float> params = model.named_parameters();
    const std::uint64_t hash = cfg.model_hash();

    TrainResult result;
    result.checkpoint_path = out_ckpt;
    save_checkpoint(out_ckpt, params, hash);

    const LossWeights weights{cfg.loss_box, cfg.loss_obj, cfg.loss_cls};
    const int total_epochs = cfg.phase1_epochs + cfg.phase2_epochs;
    std::optional<AdamW<float>> adamw;
    std::optional<SgdMomentum<float>> sgd;

    std::vector<std::string> log_lines;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        const bool phase1 = epoch < cfg.phase1_epochs;
        if (phase1 && !adamw) {
            adamw.emplace(cfg.phase1_lr, cfg.weight_decay);
        } else if (!phase1 && !sgd) {
            adamw.reset();  // optimizer state does not carry across the phase switch
            sgd.emplace(cfg.phase2_lr, cfg.momentum, cfg.weight_decay);
        }

        std::vector<std::string> order = ds.train_ids;
        Rng shuffle_rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0, box_sum = 0, obj_sum = 0, cls_sum = 0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Image> images;
            std::vector<std::vector<GtBox>> gts;
            for (std::size_t i = start; i < end; ++i) {
                images.push_back(load_image(ds, order[i]));
                gts.push_back(gts_of(ds.by_id(order[i])));
            }
            zero_grads(params);
            HeadOutput<float> out = model.forward(images_to_tensor<float>(images));
            Targets targets = assign_targets(gts, out.geoms());
            DetectionLoss<float> dl = detection_loss(out, targets, weights);
            const double loss_value = dl.total.item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batches) +
                                   "; last-good checkpoint retained at " + out_ckpt);
            }
            backward(dl.total);
            if (phase1) adamw->step(params);
            else sgd->step(params);
            loss_sum += loss_value;
            box_sum += dl.box_term;
            obj_sum += dl.obj_term;
            cls_sum += dl.cls_term;
            ++batches;
        }

        std::vector<PredBox> val_preds = predict_split(model, ds, ds.val_ids, cfg);
        MetricsReport val_report = evaluate(val_preds, split_annotations(ds, ds.val_ids));

        EpochLog log;
        log.epoch = epoch + 1;
        log.phase = phase1 ? "adamw" : "sgd";
        log.loss = batches ? loss_sum / batches : 0.0;
        log.box = batches ? box_sum / batches : 0.0;
        log.obj = batches ? obj_sum / batches : 0.0;
        log.cls = batches ? cls_sum / batches : 0.0;
        log.has_beta = model.has_beta();
        if (log.has_beta) log.beta = model.beta_value();
        log.val_ap50 = val_report.ap50;
        result.epochs.push_back(log);
        result.final_val = val_report;
        log_lines.push_back(log.line());
        say(console, log.line());

        save_checkpoint(out_ckpt, params, hash);
    }

    std::ofstream log_file(out_ckpt + ".log");
    for (const auto& line : log_lines) log_file << line << "\n";
    return result;
}

namespace {

// Burns a 1px rectangle into the image (cyan), clamped to bounds.
void draw_box(Image& img, const Box& b) {
    const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, img.w - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, img.h - 1);
    const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)) - 1, 0, img.w - 1);
    const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)) - 1, 0, img.h - 1);
    auto mark = [&](int x, int y) {
        img.at(x, y, 0) = 0;
        img.at(x, y, 1) = 255;
        img.at(x, y, 2) = 255;
    };
    for (int x = x1; x <= x2; ++x) {
        mark(x, y1);
        mark(x, y2);
    }
    for (int y = y1; y <= y2; ++y) {
        mark(x1, y);
        mark(x2, y);
    }
}

}  // namespace

EvalResult eval_run(const RunConfig& cfg, const std::string& ckpt_path,
                    const std::string& split, const std::string& render_dir,
                    bool force, std::ostream* console) {
    cfg.validate();
    Dataset ds = ensure_dataset(cfg);
    const ModelDesc desc = ModelDesc::from_config(cfg);
    Model<float> model(desc, cfg.seed);
    ParamRefs<float> params = model.named_parameters();
    load_checkpoint(ckpt_path, params, cfg.model_hash(), force);

    const std::vector<std::string>& ids = ds.split(split);
    EvalResult result;
    if (ids.empty()) {
        result.empty_split = true;
        say(console, "warning: split '" + split + "' is empty; reporting zeros");
    }
    result.predictions = predict_split(model, ds, ids, cfg);
    result.report = evaluate(result.predictions, split_annotations(ds, ids));

    result.report_path = ckpt_path + "." + split + ".metrics.txt";
    result.detections_path = ckpt_path + "." + split + ".detections.txt";
    std::ofstream(result.report_path) << result.report.serialize();
    std::ofstream(result.detections_path) << serialize_predictions(result.predictions);

    if (!render_dir.empty()) {
        fs::create_directories(render_dir);
        for (const auto& id : ids) {
            Image img = load_image(ds, id);
            for (const auto& p : result.predictions) {
                if (p.image_id == id) draw_box(img, p.box);
            }
            write_ppm(render_dir + "/" + id + ".ppm", img);
        }
    }
    say(console, "split " + split + ":");
    if (console) *console << result.report.serialize() << std::flush;
    return result;
}

RunConfig apply_variant(const RunConfig& cfg, const std::string& variant) {
    RunConfig v = cfg;
    if (variant == "base") {
        v.cam_enabled = false;
        v.attention = "none";
    } else if (variant == "cam") {
        v.cam_enabled = true;
        v.attention = "none";
    } else if (variant == "drm") {
        v.cam_enabled = false;
        v.attention = "drm";
    } else if (variant == "cam+drm") {
        v.cam_enabled = true;
        v.attention = "drm";
    } else if (variant == "cam+se") {
        v.cam_enabled = true;
        v.attention = "se";
    } else if (variant == "cam+eca") {
        v.cam_enabled = true;
        v.attention = "eca";
    } else if (variant == "cam+cbam") {
        v.cam_enabled = true;
        v.attention = "cbam";
    } else {
        throw ValidationError("ablate: unknown variant '" + variant +
                              "' (expected base, cam, drm, cam+drm, cam+se, cam+eca, cam+cbam)");
    }
    return v;
}

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size();
    return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

MetricsReport median_report(const std::vector<MetricsReport>& reports) {
    MetricsReport m;
    auto collect = [&](auto field) {
        std::vector<double> vals;
        for (const auto& r : reports) vals.push_back(r.*field);
        return median_of(std::move(vals));
    };
    m.ap = collect(&MetricsReport::ap);
    m.ap50 = collect(&MetricsReport::ap50);
    m.ap75 = collect(&MetricsReport::ap75);
    m.ar1 = collect(&MetricsReport::ar1);
    m.ar10 = collect(&MetricsReport::ar10);
    m.ar100 = collect(&MetricsReport::ar100);
    return m;
}

std::string fmt_delta(double d) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.4f", d);
    return std::string(buf);
}

}  // namespace

AblateResult ablate_run(const RunConfig& base_cfg, const std::vector<std::string>& variants,
                        const std::vector<std::uint64_t>& seeds, const std::string& out_path,
                        std::ostream* console) {
    if (variants.empty()) throw ValidationError("ablate: no variants given");
    if (seeds.empty()) throw ValidationError("ablate: no seeds given");
    for (const auto& v : variants) apply_variant(base_cfg, v);  // validate all upfront

    ensure_dataset(base_cfg);  // shared by every run

    const std::string work_dir = out_path + ".work";
    fs::create_directories(work_dir);

    AblateResult result;
    for (const auto& variant : variants) {
        AblateRow row;
        row.variant = variant;
        for (std::uint64_t seed : seeds) {
            RunConfig cfg = apply_variant(base_cfg, variant);
            cfg.seed = seed;
            std::string safe = variant;
            std::replace(safe.begin(), safe.end(), '+', '_');
            const std::string ckpt = work_dir + "/" + safe + "_s" + std::to_string(seed) + ".ckpt";
            say(console, "[ablate] variant " + variant + " seed " + std::to_string(seed));
            TrainResult tr = train_run(cfg, ckpt, console);
            row.per_seed.push_back(tr.final_val);
        }
        row.median = median_report(row.per_seed);
        result.rows.push_back(std::move(row));
    }

    const AblateRow* base_row = nullptr;
    for (const auto& r : result.rows) {
        if (r.variant == "base") base_row = &r;
    }

    std::ostringstream table;
    table << "# ablation report\n";
    table << "# seeds:";
    for (auto s : seeds) table << " " << s;
    table << "\n";
    table << "# variant ap ap50 ap75 delta_ap delta_ap50 delta_ap75\n";
    for (const auto& r : result.rows) {
        table << r.variant << " " << fmt_f6(r.median.ap) << " " << fmt_f6(r.median.ap50)
              << " " << fmt_f6(r.median.ap75);
        if (base_row && &r != base_row) {
            table << " " << fmt_delta(r.median.ap - base_row->median.ap) << " "
                  << fmt_delta(r.median.ap50 - base_row->median.ap50) << " "
                  << fmt_delta(r.median.ap75 - base_row->median.ap75);
        } else {
            table << " - - -";
        }
        table << "\n";
    }
    result.table_text = table.str();
    std::ofstream(out_path) << result.table_text;
    say(console, result.table_text);
    return result;
}

void gen_data_run(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    generate_dataset(SceneSpec::from_config(cfg), cfg.train_count, cfg.val_count, out_dir);
}

}  // namespace m2s
