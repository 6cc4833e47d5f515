#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m2s/gradcheck.hpp"
#include "m2s/pipeline.hpp"

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

std::vector<std::uint64_t> split_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& tok : split_list(s)) {
        try {
            out.push_back(std::stoull(tok));
        } catch (const std::exception&) {
            throw m2s::ValidationError("bad seed '" + tok + "'");
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m2s: desk-scale small-object detector with cross-scale aggregation "
                 "and dual-relationship attention"};
    app.require_subcommand(1);

    std::string config_path, out_path, ckpt_path, split = "val", render_dir;
    std::string variants_arg, seeds_arg = "0", op_filter;
    bool force = false, corrupt = false;
    std::uint64_t gc_seed = 1;

    auto* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--out", out_path, "output checkpoint path")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    eval->add_option("--config", config_path, "config file")->required();
    eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval->add_option("--split", split, "split name (train|val)");
    eval->add_option("--render", render_dir, "write box-overlay renderings here");
    eval->add_flag("--force", force, "ignore config-hash mismatch");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_option("--seed", gc_seed, "base seed");
    gradcheck->add_option("--op", op_filter, "only ops whose name contains this string");
    gradcheck->add_flag("--corrupt-gradient", corrupt,
                        "harness negative control: corrupt one analytic gradient")
        ->group("");  // hidden

    auto* ablate = app.add_subcommand("ablate", "train and compare model variants");
    ablate->add_option("--config", config_path, "config file")->required();
    ablate->add_option("--variants", variants_arg, "comma list of variants")->required();
    ablate->add_option("--seeds", seeds_arg, "comma list of seeds (default 0)");
    ablate->add_option("--out", out_path, "report output path")->required();

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    gen->add_option("--config", config_path, "config file")->required();
    gen->add_option("--out", out_path, "output dataset directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            m2s::RunConfig cfg = m2s::RunConfig::load(config_path);
            m2s::train_run(cfg, out_path, &std::cout);
            std::cout << "checkpoint written to " << out_path << "\n";
        } else if (eval->parsed()) {
            m2s::RunConfig cfg = m2s::RunConfig::load(config_path);
            m2s::EvalResult res = m2s::eval_run(cfg, ckpt_path, split, render_dir, force,
                                                &std::cout);
            std::cout << "report written to " << res.report_path << "\n";
        } else if (gradcheck->parsed()) {
            m2s::GradcheckOptions opts;
            opts.seed = gc_seed;
            opts.op_filter = op_filter;
            opts.corrupt = corrupt;
            m2s::GradcheckReport report = m2s::run_gradcheck(opts);
            m2s::print_gradcheck_table(report, std::cout);
            if (!report.all_pass) return 2;
        } else if (ablate->parsed()) {
            m2s::RunConfig cfg = m2s::RunConfig::load(config_path);
            m2s::ablate_run(cfg, split_list(variants_arg), split_seeds(seeds_arg), out_path,
                            &std::cout);
            std::cout << "report written to " << out_path << "\n";
        } else if (gen->parsed()) {
            m2s::RunConfig cfg = m2s::RunConfig::load(config_path);
            m2s::gen_data_run(cfg, out_path);
            std::cout << "dataset written to " << out_path << "\n";
        }
    } catch (const m2s::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const m2s::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
