// Copyright (c) 2026 The shadowdiff Authors.
// All rights reserved.
//
// This software is licensed under the Apache License, Version 2.0 (the "License").
// You may not use this file except in compliance with the License. You may
// obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "shadowdiff/cli.hpp"

#include "shadowdiff/attention.hpp"
#include "shadowdiff/config.hpp"
#include "shadowdiff/data.hpp"
#include "shadowdiff/errors.hpp"
#include "shadowdiff/image_io.hpp"
#include "shadowdiff/metrics.hpp"
#include "shadowdiff/rng.hpp"
#include "shadowdiff/sampler.hpp"
#include "shadowdiff/trainer.hpp"
#include "shadowdiff/vit_sim.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

namespace shadowdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
    fs::path config_path;
    std::optional<uint64_t> seed;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& common)
{
    cmd->add_option("--config", common.config_path, "JSON config file");
    cmd->add_option("--seed", common.seed, "Seed; overrides the config value");
    cmd->add_option("--set,overrides", common.overrides, "key=value overrides (dotted keys)");
}

/// defaults < config file < key=value overrides < --seed.
json resolve_config(const json& defaults, const CommonOptions& common)
{
    auto cfg = merge(defaults, read_config_file(common.config_path));
    apply_overrides(cfg, common.overrides);
    if (common.seed) {
        cfg["seed"] = *common.seed;
    }
    return cfg;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

void write_manifest(const fs::path& dir, const json& manifest)
{
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void require_dir(const fs::path& dir, const char* what)
{
    if (!fs::is_directory(dir)) {
        throw DataError(std::string(what) + " directory not found: " + dir.string());
    }
}

void prepare_output_dir(const fs::path& dir, bool overwrite)
{
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) {
            throw UsageError("output directory " + dir.string() + " is not empty; pass --overwrite");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

// ---------------------------------------------------------------------------

struct MakeDatasetArgs {
    CommonOptions common;
    fs::path out;
    bool overwrite = false;
};

int cmd_make_dataset(const MakeDatasetArgs& args)
{
    const json defaults = {{"counts", {{"hard", 10}, {"soft", 10}, {"self", 10}}}, {"size", 32}, {"seed", 0}};
    const auto cfg = resolve_config(defaults, args.common);
    SyntheticCounts counts;
    counts.hard = cfg.at("counts").value("hard", 0);
    counts.soft = cfg.at("counts").value("soft", 0);
    counts.self = cfg.at("counts").value("self", 0);
    const int64_t size = cfg.at("size").get<int64_t>();
    const auto seed = cfg.at("seed").get<uint64_t>();
    if (counts.total() <= 0) {
        throw UsageError("make-dataset: counts must request at least one pair");
    }

    auto samples = make_synthetic_dataset(counts, size, seed);
    prepare_output_dir(args.out, args.overwrite);

    std::vector<ShadowPair> pairs;
    json entries = json::array();
    std::map<std::string, int> histogram;
    for (const auto& s : samples) {
        pairs.push_back(s.pair);
        entries.push_back({{"name", s.pair.name}, {"spec", s.spec}});
        ++histogram[to_string(s.spec.kind)];
    }
    save_pairs(args.out, pairs);
    write_manifest(args.out, {{"command", "make-dataset"},
                              {"config", cfg},
                              {"kind_histogram", histogram},
                              {"pairs", entries}});
    std::cout << "wrote " << pairs.size() << " pairs to " << args.out.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    CommonOptions common;
    fs::path data;
    fs::path out;
    bool resume = false;
    int log_every = 100;
};

int cmd_train(const TrainArgs& args)
{
    require_dir(args.data, "dataset");
    const auto cfg = resolve_config(json(TrainConfig{}), args.common);
    const auto config = cfg.get<TrainConfig>();
    config.validate();

    auto dataset = load_paired_dataset(args.data);
    for (const auto& w : dataset.warnings) {
        std::cerr << "warning: " << w << "\n";
    }
    TrainRunOptions opts;
    opts.run_dir = args.out;
    opts.resume = args.resume;
    const int every = std::max(args.log_every, 1);
    opts.on_step = [every](const LossReport& r) {
        if (r.iteration % every == 0) {
            std::cerr << "iter " << r.iteration << " total " << fmt(r.total) << " (cdm " << fmt(r.l_cdm)
                      << ", cam " << fmt(r.l_cam) << ", att " << fmt(r.l_att) << ")\n";
        }
    };
    const auto ckpt = train(dataset.pairs, config, opts);
    write_manifest(args.out, {{"command", "train"},
                              {"config", cfg},
                              {"dataset", args.data.string()},
                              {"pairs", dataset.pairs.size()},
                              {"checkpoint", ckpt.filename().string()},
                              {"loss_log", "loss_log.csv"}});
    std::cout << "checkpoint " << ckpt.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
    CommonOptions common;
    fs::path checkpoint;
    fs::path input;
    fs::path out;
    bool no_early_stop = false;
    bool dump_steps = false;
};

std::vector<fs::path> list_images(const fs::path& input)
{
    std::vector<fs::path> files;
    if (fs::is_regular_file(input)) {
        files.push_back(input);
    } else if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input)) {
            if (e.is_regular_file() && is_image_file(e.path())) {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
    } else {
        throw DataError("input not found: " + input.string());
    }
    if (files.empty()) {
        throw DataError("no images under " + input.string());
    }
    return files;
}

void write_trajectory(const fs::path& dir, const SampleTrajectory& traj, bool dump_images)
{
    std::string csv = "step,t,t_prev,l_sim,l_total\n";
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
        const auto& s = traj.steps[i];
        csv += std::to_string(i + 1) + "," + std::to_string(s.t) + "," + std::to_string(s.t_prev) + "," +
               fmt(s.l_sim) + "," + fmt(s.l_total) + "\n";
    }
    write_text(dir / "trajectory.csv", csv);
    if (!dump_images) {
        return;
    }
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%03zu.png", i + 1);
        write_image(dir / "attention" / name, traj.steps[i].attention_refined);
        write_image(dir / "x0_hat" / name, to_pixel_space(traj.steps[i].x0_hat));
    }
}

int cmd_infer(const InferArgs& args)
{
    const auto ckpt = load_checkpoint(args.checkpoint);
    const auto images = list_images(args.input);

    json defaults = {{"sampling", SamplingConfig{}}, {"extractor", ExtractorConfig{}}, {"seed", 0}};
    const auto cfg = resolve_config(defaults, args.common);
    // A config may restate the schedule; it has to agree with the checkpoint.
    for (const char* key : {"train_steps", "beta_start", "beta_end"}) {
        if (cfg.contains(key) && cfg.at(key) != json(ckpt.config).at(key)) {
            throw DataError(std::string("config ") + key + " disagrees with the checkpoint schedule");
        }
    }
    auto sampling = cfg.at("sampling").get<SamplingConfig>();
    const auto extractor_cfg = cfg.at("extractor").get<ExtractorConfig>();
    sampling.vit_layer = extractor_cfg.layer;
    if (args.no_early_stop) {
        sampling.early_stop = false;
    }
    sampling.cam_init = sampling.cam_init && ckpt.iteration > 0;
    const auto base_seed = cfg.at("seed").get<uint64_t>();

    const auto schedule = ckpt.config.schedule();
    auto extractor = make_extractor(extractor_cfg);
    fs::create_directories(args.out);

    json results = json::array();
    for (const auto& file : images) {
        auto image = read_rgb(file);
        const auto multiple = ckpt.model->size_multiple();
        if (image.size(1) % multiple != 0 || image.size(2) % multiple != 0) {
            throw DataError(file.string() + ": size must be a multiple of " + std::to_string(multiple));
        }
        const auto name = file.filename().string();
        auto cfg_i = sampling;
        cfg_i.seed = mix_seed(base_seed, hash_name(name));
        auto traj = sample(to_model_space(image), ckpt.model, schedule, *extractor, cfg_i);

        const auto stem = file.stem().string();
        write_image(args.out / (stem + ".png"), to_pixel_space(traj.output));
        write_trajectory(args.out / "trajectories" / stem, traj, args.dump_steps);
        results.push_back({{"input", name},
                           {"output", stem + ".png"},
                           {"steps_executed", traj.steps_executed},
                           {"stopped_early", traj.stopped_early}});
        std::cout << name << ": " << traj.steps_executed << " steps"
                  << (traj.stopped_early ? " (early stop)" : "") << "\n";
    }
    write_manifest(args.out, {{"command", "infer"},
                              {"checkpoint", args.checkpoint.string()},
                              {"config", cfg},
                              {"results", results}});
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    fs::path pred;
    fs::path gt;
    fs::path out;
};

json metric_row(const MetricReport& r)
{
    return to_json(r);
}

std::string csv_value(const std::optional<double>& v)
{
    return v ? fmt(*v) : "";
}

std::string csv_metrics(const MetricReport& r)
{
    std::string s;
    for (const auto* region : {&r.shadow, &r.non_shadow, &r.all}) {
        s += "," + csv_value(region->rmse);
    }
    for (const auto* region : {&r.shadow, &r.non_shadow, &r.all}) {
        s += "," + csv_value(region->psnr);
    }
    for (const auto* region : {&r.shadow, &r.non_shadow, &r.all}) {
        s += "," + csv_value(region->ssim);
    }
    return s;
}

int cmd_eval(const EvalArgs& args)
{
    require_dir(args.pred, "prediction");
    require_dir(args.gt / "clean", "ground-truth clean");

    std::vector<fs::path> truths;
    for (const auto& e : fs::directory_iterator(args.gt / "clean")) {
        if (e.is_regular_file() && is_image_file(e.path())) {
            truths.push_back(e.path());
        }
    }
    std::sort(truths.begin(), truths.end());
    if (truths.empty()) {
        throw DataError("no ground-truth images under " + (args.gt / "clean").string());
    }

    std::string csv = "name,status,rmse_s,rmse_ns,rmse_all,psnr_s,psnr_ns,psnr_all,ssim_s,ssim_ns,ssim_all\n";
    json rows = json::array();
    std::vector<MetricReport> reports;
    int missing = 0;
    for (const auto& truth_path : truths) {
        const auto name = truth_path.filename().string();
        fs::path pred_path = args.pred / name;
        if (!fs::exists(pred_path)) {
            pred_path = args.pred / (truth_path.stem().string() + ".png");
        }
        if (!fs::exists(pred_path)) {
            ++missing;
            csv += name + ",missing,,,,,,,,,\n";
            rows.push_back({{"name", name}, {"status", "missing"}});
            std::cerr << "warning: no prediction for " << name << "\n";
            continue;
        }
        auto truth = read_rgb(truth_path);
        auto pred = read_rgb(pred_path);
        if (pred.sizes() != truth.sizes()) {
            throw DataError(name + ": prediction and ground truth sizes differ");
        }
        std::optional<torch::Tensor> mask;
        if (fs::exists(args.gt / "mask" / name)) {
            mask = read_gray(args.gt / "mask" / name);
        }
        auto report = region_metrics(pred, truth, mask);
        reports.push_back(report);
        csv += name + ",ok" + csv_metrics(report) + "\n";
        rows.push_back({{"name", name}, {"status", "ok"}, {"metrics", metric_row(report)}});
    }
    if (reports.empty()) {
        throw DataError("no predictions matched any ground-truth file");
    }
    const auto mean = mean_report(reports);
    csv += "MEAN,aggregate" + csv_metrics(mean) + "\n";

    fs::create_directories(args.out);
    write_text(args.out / "metrics.csv", csv);
    write_manifest(args.out, {{"command", "eval"},
                              {"predictions", args.pred.string()},
                              {"ground_truth", args.gt.string()},
                              {"evaluated", reports.size()},
                              {"missing", missing},
                              {"mean", metric_row(mean)},
                              {"rows", rows}});

    auto cell = [](const std::optional<double>& v) {
        char buf[16];
        if (v) {
            std::snprintf(buf, sizeof(buf), "%8.3f", *v);
        } else {
            std::snprintf(buf, sizeof(buf), "%8s", "-");
        }
        return std::string(buf);
    };
    std::cout << "          RMSE(S)  RMSE(NS) RMSE(ALL)  PSNR(S) PSNR(NS) PSNR(ALL)  SSIM(S) SSIM(NS) SSIM(ALL)\n";
    std::cout << "mean    " << cell(mean.shadow.rmse) << " " << cell(mean.non_shadow.rmse) << " "
              << cell(mean.all.rmse) << " " << cell(mean.shadow.psnr) << " " << cell(mean.non_shadow.psnr) << " "
              << cell(mean.all.psnr) << " " << cell(mean.shadow.ssim) << " " << cell(mean.non_shadow.ssim) << " "
              << cell(mean.all.ssim) << "\n";
    std::cout << reports.size() << " evaluated, " << missing << " missing\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct VisualizeArgs {
    CommonOptions common;
    fs::path trajectory;
    fs::path image;
    fs::path out;
};

int cmd_visualize(const VisualizeArgs& args)
{
    if (args.trajectory.empty() && args.image.empty()) {
        throw UsageError("visualize needs --trajectory and/or --image");
    }
    fs::create_directories(args.out);
    json outputs = json::object();

    if (!args.trajectory.empty()) {
        const auto log_path = args.trajectory / "trajectory.csv";
        if (!fs::exists(log_path)) {
            throw DataError("missing trajectory data: " + log_path.string());
        }
        std::ifstream in(log_path);
        std::string line;
        std::getline(in, line);
        std::string tsv = "step\tt\tl_sim\tl_total\n";
        int rows = 0;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            int step = 0, t = 0, t_prev = 0;
            double l_sim = 0.0, l_total = 0.0;
            if (std::sscanf(line.c_str(), "%d,%d,%d,%lf,%lf", &step, &t, &t_prev, &l_sim, &l_total) != 5) {
                throw DataError("malformed trajectory row: " + line);
            }
            tsv += std::to_string(step) + "\t" + std::to_string(t) + "\t" + fmt(l_sim) + "\t" + fmt(l_total) + "\n";
            ++rows;
        }
        write_text(args.out / "loss_curve.tsv", tsv);
        outputs["loss_curve"] = {{"file", "loss_curve.tsv"}, {"rows", rows}};

        const auto att_dir = args.trajectory / "attention";
        if (fs::is_directory(att_dir)) {
            std::vector<fs::path> frames;
            for (const auto& e : fs::directory_iterator(att_dir)) {
                if (e.is_regular_file() && is_image_file(e.path())) {
                    frames.push_back(e.path());
                }
            }
            std::sort(frames.begin(), frames.end());
            if (!frames.empty()) {
                std::vector<torch::Tensor> tiles;
                for (const auto& f : frames) {
                    tiles.push_back(read_gray(f));
                }
                write_image(args.out / "attention_filmstrip.png", torch::cat(tiles, 2));
                outputs["attention_filmstrip"] = {{"file", "attention_filmstrip.png"}, {"frames", frames.size()}};
            }
        }
    }

    if (!args.image.empty()) {
        json defaults = {{"extractor", ExtractorConfig{}}, {"seed", 0}};
        const auto cfg = resolve_config(defaults, args.common);
        const auto ecfg = cfg.at("extractor").get<ExtractorConfig>();
        auto extractor = make_extractor(ecfg);
        auto image = to_model_space(read_rgb(args.image)).to(torch::kFloat64);
        torch::NoGradGuard no_grad;
        auto input = preprocess_for_extractor(image, extractor->input_size(), extractor->patch_size());
        const int64_t gh = input.size(2) / extractor->patch_size();
        const int64_t gw = input.size(3) / extractor->patch_size();
        auto keys = extract_keys(image, ecfg.layer, *extractor);
        auto rgb = keys_pca_rgb(self_similarity(keys.keys), gh, gw);
        write_image(args.out / "keys_pca.png", rgb);
        outputs["keys_pca"] = {{"file", "keys_pca.png"}, {"grid", {gh, gw}}, {"layer", ecfg.layer}};
    }

    write_manifest(args.out, {{"command", "visualize"}, {"outputs", outputs}});
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args)
{
    CLI::App app{"Shadow removal with conditional diffusion and adaptive attention", "shadowdiff"};
    app.require_subcommand(1);

    MakeDatasetArgs make_args;
    auto* make = app.add_subcommand("make-dataset", "Synthesize paired shadow/clean images");
    add_common(make, make_args.common);
    make->add_option("--out", make_args.out, "Output dataset directory")->required();
    make->add_flag("--overwrite", make_args.overwrite, "Replace a non-empty output directory");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train the denoiser on a paired dataset");
    add_common(train_cmd, train_args.common);
    train_cmd->add_option("--data", train_args.data, "Paired dataset directory")->required();
    train_cmd->add_option("--out", train_args.out, "Run directory")->required();
    train_cmd->add_flag("--resume", train_args.resume, "Continue from the run's checkpoint");
    train_cmd->add_option("--log-every", train_args.log_every, "Progress print interval");

    InferArgs infer_args;
    auto* infer = app.add_subcommand("infer", "Remove shadows from images");
    add_common(infer, infer_args.common);
    infer->add_option("--checkpoint", infer_args.checkpoint, "Checkpoint file")->required();
    infer->add_option("--input", infer_args.input, "Image file or directory")->required();
    infer->add_option("--out", infer_args.out, "Output directory")->required();
    infer->add_flag("--no-early-stop", infer_args.no_early_stop, "Always run every sampling step");
    infer->add_flag("--dump-steps", infer_args.dump_steps, "Write per-step attention and x0 estimates");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Region metrics of predictions against ground truth");
    eval->add_option("--pred", eval_args.pred, "Prediction directory")->required();
    eval->add_option("--gt", eval_args.gt, "Dataset directory with clean/ and optional mask/")->required();
    eval->add_option("--out", eval_args.out, "Output directory")->required();
    uint64_t eval_seed = 0;
    eval->add_option("--seed", eval_seed, "Accepted for uniformity; evaluation is deterministic");

    VisualizeArgs vis_args;
    auto* vis = app.add_subcommand("visualize", "Attention filmstrips, key PCA images, loss curves");
    add_common(vis, vis_args.common);
    vis->add_option("--trajectory", vis_args.trajectory, "Trajectory directory written by infer");
    vis->add_option("--image", vis_args.image, "Image for the key self-similarity PCA view");
    vis->add_option("--out", vis_args.out, "Output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*make) return cmd_make_dataset(make_args);
        if (*train_cmd) return cmd_train(train_args);
        if (*infer) return cmd_infer(infer_args);
        if (*eval) return cmd_eval(eval_args);
        if (*vis) return cmd_visualize(vis_args);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const c10::Error& e) {
        std::cerr << "numeric failure: " << e.what_without_backtrace() << "\n";
        return kExitNumeric;
    }
    return kExitUsage;
}

} // namespace shadowdiff
