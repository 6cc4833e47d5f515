#include "m2s/metrics.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace m2s {

namespace {

const std::vector<double>& iou_thresholds() {
    static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70,
                                          0.75, 0.80, 0.85, 0.90, 0.95};
    return t;
}

struct IndexedPred {
    const PredBox* p;
    std::size_t order;  // insertion index, breaks score ties deterministically
};

// Greedy matching of score-ordered predictions of one class to unmatched
// ground truths of the same class (one match per GT, highest IoU wins).
// Returns per-prediction TP flags and the number of matched GTs.
int greedy_match(const std::vector<IndexedPred>& preds,
                 const std::map<std::string, std::vector<const GtBox*>>& gts_by_image,
                 double thresh, std::vector<char>* tp_flags) {
    std::map<std::string, std::vector<char>> used;
    for (const auto& [id, gts] : gts_by_image) used[id].assign(gts.size(), 0);
    int matched = 0;
    if (tp_flags) tp_flags->assign(preds.size(), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto it = gts_by_image.find(preds[i].p->image_id);
        if (it == gts_by_image.end()) continue;
        const auto& gts = it->second;
        auto& used_flags = used[preds[i].p->image_id];
        int best = -1;
        double best_iou = 0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used_flags[g]) continue;
            double v = iou(preds[i].p->box.normalized(), gts[g]->box.normalized());
            if (v >= thresh && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used_flags[best] = 1;
            ++matched;
            if (tp_flags) (*tp_flags)[i] = 1;
        }
    }
    return matched;
}

double interpolated_ap(const std::vector<char>& tp_flags, int num_gt) {
    if (num_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (char f : tp_flags) {
        if (f) ++tp;
        else ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / num_gt);
    }
    // precision envelope: max precision at recall >= r
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
        precision[i] = std::max(precision[i], precision[i + 1]);
    }
    double ap = 0;
    std::size_t pi = 0;
    for (int r = 0; r <= 100; ++r) {
        const double level = r / 100.0;
        while (pi < recall.size() && recall[pi] < level) ++pi;
        ap += (pi < recall.size()) ? precision[pi] : 0.0;
    }
    return ap / 101.0;
}

}  // namespace

MetricsReport evaluate(const std::vector<PredBox>& predictions,
                       const std::vector<Annotation>& ground_truth) {
    std::set<std::string> known_ids;
    for (const auto& a : ground_truth) known_ids.insert(a.image_id);
    for (const auto& p : predictions) {
        if (!known_ids.count(p.image_id)) {
            throw ValidationError("evaluate: prediction references unknown image id '" +
                                  p.image_id + "'");
        }
    }

    std::set<int> classes;
    int total_gt = 0;
    for (const auto& a : ground_truth) {
        for (const auto& g : a.objects) {
            classes.insert(g.class_id);
            ++total_gt;
        }
    }
    MetricsReport rep;
    if (classes.empty()) return rep;

    // stable score ordering shared by every pass
    std::vector<IndexedPred> all;
    all.reserve(predictions.size());
    for (std::size_t i = 0; i < predictions.size(); ++i) all.push_back({&predictions[i], i});
    std::stable_sort(all.begin(), all.end(), [](const IndexedPred& a, const IndexedPred& b) {
        return a.p->score > b.p->score;
    });

    // --- AP ---
    double ap_sum = 0, ap50_sum = 0, ap75_sum = 0;
    for (int cls : classes) {
        std::map<std::string, std::vector<const GtBox*>> gts_by_image;
        int num_gt = 0;
        for (const auto& a : ground_truth) {
            for (const auto& g : a.objects) {
                if (g.class_id == cls) {
                    gts_by_image[a.image_id].push_back(&g);
                    ++num_gt;
                }
            }
        }
        std::vector<IndexedPred> preds;
        for (const auto& ip : all) {
            if (ip.p->class_id == cls) preds.push_back(ip);
        }
        double cls_ap = 0;
        for (double t : iou_thresholds()) {
            std::vector<char> tp;
            greedy_match(preds, gts_by_image, t, &tp);
            double ap_t = interpolated_ap(tp, num_gt);
            cls_ap += ap_t;
            if (t == 0.50) ap50_sum += ap_t;
            if (t == 0.75) ap75_sum += ap_t;
        }
        ap_sum += cls_ap / iou_thresholds().size();
    }
    const double num_classes = static_cast<double>(classes.size());
    rep.ap = ap_sum / num_classes;
    rep.ap50 = ap50_sum / num_classes;
    rep.ap75 = ap75_sum / num_classes;

    // --- AR with a per-image detection cap ---
    auto recall_at = [&](int cap) {
        // top-cap detections per image by score
        std::map<std::string, int> taken;
        std::vector<IndexedPred> capped;
        for (const auto& ip : all) {
            int& t = taken[ip.p->image_id];
            if (t < cap) {
                ++t;
                capped.push_back(ip);
            }
        }
        double sum = 0;
        for (double t : iou_thresholds()) {
            int matched = 0;
            for (int cls : classes) {
                std::map<std::string, std::vector<const GtBox*>> gts_by_image;
                for (const auto& a : ground_truth) {
                    for (const auto& g : a.objects) {
                        if (g.class_id == cls) gts_by_image[a.image_id].push_back(&g);
                    }
                }
                std::vector<IndexedPred> preds;
                for (const auto& ip : capped) {
                    if (ip.p->class_id == cls) preds.push_back(ip);
                }
                matched += greedy_match(preds, gts_by_image, t, nullptr);
            }
            sum += static_cast<double>(matched) / total_gt;
        }
        return sum / iou_thresholds().size();
    };
    rep.ar1 = recall_at(1);
    rep.ar10 = recall_at(10);
    rep.ar100 = recall_at(100);
    return rep;
}

std::string MetricsReport::serialize() const {
    std::ostringstream os;
    os << "ap " << fmt_f6(ap) << "\n";
    os << "ap50 " << fmt_f6(ap50) << "\n";
    os << "ap75 " << fmt_f6(ap75) << "\n";
    os << "ar1 " << fmt_f6(ar1) << "\n";
    os << "ar10 " << fmt_f6(ar10) << "\n";
    os << "ar100 " << fmt_f6(ar100) << "\n";
    return os.str();
}

MetricsReport MetricsReport::parse(const std::string& text) {
    MetricsReport rep;
    std::istringstream is(text);
    std::string key;
    double value;
    while (is >> key >> value) {
        if (key == "ap") rep.ap = value;
        else if (key == "ap50") rep.ap50 = value;
        else if (key == "ap75") rep.ap75 = value;
        else if (key == "ar1") rep.ar1 = value;
        else if (key == "ar10") rep.ar10 = value;
        else if (key == "ar100") rep.ar100 = value;
        else throw ValidationError("metrics report: unknown key '" + key + "'");
    }
    return rep;
}

std::string serialize_predictions(const std::vector<PredBox>& predictions) {
    std::ostringstream os;
    for (const auto& p : predictions) {
        os << p.image_id << " " << p.class_id << " " << fmt_f6(p.score) << " "
           << fmt_f6(p.box.x1) << " " << fmt_f6(p.box.y1) << " " << fmt_f6(p.box.x2)
           << " " << fmt_f6(p.box.y2) << "\n";
    }
    return os.str();
}

std::vector<PredBox> parse_predictions(const std::string& text) {
    std::vector<PredBox> preds;
    std::istringstream is(text);
    PredBox p;
    while (is >> p.image_id >> p.class_id >> p.score >> p.box.x1 >> p.box.y1 >>
           p.box.x2 >> p.box.y2) {
        preds.push_back(p);
    }
    return preds;
}

}  // namespace m2s
