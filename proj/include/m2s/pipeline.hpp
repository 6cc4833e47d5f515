#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "m2s/config.hpp"
#include "m2s/metrics.hpp"

namespace m2s {

struct EpochLog {
    int epoch = 0;
    std::string phase;
    double loss = 0, box = 0, obj = 0, cls = 0;
    double beta = 0;
    bool has_beta = false;
    double val_ap50 = 0;

    std::string line() const;
};

struct TrainResult {
    std::string checkpoint_path;
    std::vector<EpochLog> epochs;
    MetricsReport final_val;
};

// Two-phase training (AdamW then SGD with momentum); deterministic given the
// config seed. Writes the checkpoint after every epoch and a plain-text log
// next to it.
TrainResult train_run(const RunConfig& cfg, const std::string& out_ckpt,
                      std::ostream* console);

struct EvalResult {
    MetricsReport report;
    std::vector<PredBox> predictions;
    bool empty_split = false;
    std::string report_path;
    std::string detections_path;
};

EvalResult eval_run(const RunConfig& cfg, const std::string& ckpt_path,
                    const std::string& split, const std::string& render_dir,
                    bool force, std::ostream* console);

struct AblateRow {
    std::string variant;
    std::vector<MetricsReport> per_seed;
    MetricsReport median;
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::string table_text;
};

// Trains every (variant, seed) pair on identical data and schedule, reports
// per-variant medians and deltas versus the base variant.
AblateResult ablate_run(const RunConfig& base_cfg, const std::vector<std::string>& variants,
                        const std::vector<std::uint64_t>& seeds, const std::string& out_path,
                        std::ostream* console);

// Validated variant names: base, cam, drm, cam+drm, cam+se, cam+eca, cam+cbam.
RunConfig apply_variant(const RunConfig& cfg, const std::string& variant);

void gen_data_run(const RunConfig& cfg, const std::string& out_dir);

}  // namespace m2s
