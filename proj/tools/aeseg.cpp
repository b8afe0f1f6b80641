// Command-line pipeline: synthetic dataset generation, spatial splitting,
// training, evaluation, Monte Carlo dropout prediction, and report emission.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
// failure.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aeseg/bayesinfer.hpp"
#include "aeseg/chipdata.hpp"
#include "aeseg/metrics.hpp"
#include "aeseg/synthfields.hpp"
#include "aeseg/trainer.hpp"
#include "aeseg/unet.hpp"

namespace fs = std::filesystem;
using namespace aeseg;

namespace {

struct SynthGenArgs {
    std::string out_dir;
    int chips = 400;
    int height = 64, width = 64;
    int edge_mix = 3, margin = 2;
    double irregularity = 0.35;
    double separation = 1.0;
    double noise = 0.25;
    double spacing = 2500.0;
    std::uint64_t seed = 0;
};

int run_synth_gen(const SynthGenArgs& a) {
    SynthConfig cfg;
    cfg.chip_height = a.height;
    cfg.chip_width = a.width;
    cfg.edge_mix_width = a.edge_mix;
    cfg.margin_width = a.margin;
    cfg.field_irregularity = a.irregularity;
    cfg.noise_sigma = a.noise;
    cfg.separation = a.separation;
    cfg.seed = a.seed;
    validate(cfg);
    if (a.chips < 2) throw data_error("synth-gen: need at least 2 chips");

    fs::create_directories(fs::path(a.out_dir) / "chips");
    const SignaturePair pair = make_signature_pair(derive_seed(a.seed, "pair", 0), a.separation, a.noise);

    // centroids on a jittered grid so spatial blocks carry a few chips each
    const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(a.chips))));
    std::mt19937_64 jitter_rng(derive_seed(a.seed, "layout", 0));
    std::uniform_real_distribution<double> jitter(-0.2 * a.spacing, 0.2 * a.spacing);

    DatasetManifest manifest;
    manifest.generator_seed = a.seed;
    char idbuf[32];
    for (int i = 0; i < a.chips; ++i) {
        std::snprintf(idbuf, sizeof idbuf, "chip_%06d", i);
        const ChipClass cls = i % 2 == 0 ? ChipClass::tomato : ChipClass::non_tomato;
        FieldMask mask = generate_field_mask(cfg, derive_seed(a.seed, "mask", i));
        auto [chip, labels] = synthesize_chip(pair, mask, cls, cfg, derive_seed(a.seed, "chip", i));
        chip.chip_id = idbuf;
        chip.centroid_x = (i % grid) * a.spacing + jitter(jitter_rng);
        chip.centroid_y = (i / grid) * a.spacing + jitter(jitter_rng);
        const std::string rel = "chips/" + std::string(idbuf) + ".aec";
        write_chip(chip, labels, fs::path(a.out_dir) / rel);
        manifest.entries.push_back({chip.chip_id, rel, cls, chip.centroid_x, chip.centroid_y,
                                    Split::unassigned});
    }
    write_manifest(manifest, fs::path(a.out_dir) / "manifest.tsv");

    std::printf("synth-gen: wrote %d chips (bayes_accuracy=%.6f) to %s\n", a.chips,
                bayes_accuracy(pair), a.out_dir.c_str());
    return 0;
}

SplitRatios parse_ratios(const std::string& s) {
    SplitRatios r;
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &r.train, &r.val, &r.test) != 3)
        throw CLI::ValidationError("--ratios", "expected three comma-separated fractions");
    return r;
}

int run_split(const std::string& manifest_path, const std::string& out_path,
              const std::string& ratios_str, double block, std::uint64_t seed) {
    DatasetManifest manifest = read_manifest(manifest_path);
    DatasetManifest split = spatial_split(manifest, parse_ratios(ratios_str), block, seed);
    write_manifest(split, out_path);
    std::size_t counts[4] = {0, 0, 0, 0};
    for (const auto& e : split.entries) ++counts[static_cast<int>(e.split)];
    std::printf("split: %zu train / %zu val / %zu test -> %s\n", counts[0], counts[1], counts[2],
                out_path.c_str());
    return 0;
}

struct TrainArgs {
    std::string manifest_path;
    std::string out_dir;
    TrainConfig cfg;
    bool no_norm = false;
    bool quiet = false;
};

int run_train(TrainArgs& a) {
    a.cfg.unet.norm_enabled = !a.no_norm;
    const fs::path base = fs::path(a.manifest_path).parent_path();
    DatasetManifest manifest = read_manifest(a.manifest_path);
    std::vector<LoadedChip> train_set = load_split(manifest, base, Split::train);
    std::vector<LoadedChip> val_set = load_split(manifest, base, Split::val);

    TrainResult<float> result =
        train<float>(a.cfg, train_set, val_set, a.quiet ? nullptr : stderr);
    fs::create_directories(a.out_dir);
    save_checkpoint(result.best_params, fs::path(a.out_dir) / "checkpoint.aeu");
    write_history(result.history, fs::path(a.out_dir) / "history.tsv");
    std::printf("train: %zu chips, %d epochs, best epoch %d (val_loss=%.6f) -> %s\n",
                train_set.size(), a.cfg.epochs, result.best_epoch,
                result.history[result.best_epoch - 1].val_loss, a.out_dir.c_str());
    return 0;
}

int run_eval(const std::string& manifest_path, const std::string& checkpoint,
             const std::string& split_name, double threshold, const std::string& out_dir) {
    const fs::path base = fs::path(manifest_path).parent_path();
    DatasetManifest manifest = read_manifest(manifest_path);
    std::vector<LoadedChip> items = load_split(manifest, base, split_from_string(split_name));
    if (items.empty()) throw data_error("eval: no chips in split " + split_name);
    ParameterSet<float> params = load_checkpoint<float>(checkpoint);
    UNet<float> net(params.config);
    ValResult<float> res = evaluate_set(net, params, items, ObjectiveConfig{}, threshold);
    const std::string report = format_report(res.metrics);
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "metrics.txt", std::ios::binary | std::ios::trunc);
    f << report;
    std::fputs(report.c_str(), stdout);
    std::printf("eval: %zu chips, split=%s, pixel_accuracy=%.6f\n", items.size(),
                split_name.c_str(), res.metrics.pixel_accuracy);
    return 0;
}

struct PredictArgs {
    std::string manifest_path;
    std::string checkpoint;
    std::string split_name = "test";
    std::string chip_id;
    int passes = 100;
    std::uint64_t seed = 0;
    std::string out_dir;
    bool pseudo_rgb = false;
    std::vector<int> rgb_bands{0, 1, 2};
};

int run_predict(const PredictArgs& a) {
    const fs::path base = fs::path(a.manifest_path).parent_path();
    DatasetManifest manifest = read_manifest(a.manifest_path);
    std::vector<LoadedChip> items;
    if (!a.chip_id.empty()) {
        for (const auto& e : manifest.entries)
            if (e.chip_id == a.chip_id) {
                auto [chip, labels] = read_chip(base / e.relative_path);
                chip.chip_id = e.chip_id;
                items.push_back({std::move(chip), std::move(labels)});
            }
        if (items.empty()) throw data_error("predict: chip not found: " + a.chip_id);
    } else {
        items = load_split(manifest, base, split_from_string(a.split_name));
        if (items.empty()) throw data_error("predict: no chips in split " + a.split_name);
    }
    ParameterSet<float> params = load_checkpoint<float>(a.checkpoint);
    UNet<float> net(params.config);
    McConfig mc;
    mc.passes = a.passes;
    mc.base_seed = a.seed;
    fs::create_directories(a.out_dir);
    for (const auto& item : items) {
        UncertaintyMaps maps = mc_predict(net, params, item, mc);
        const fs::path stem = fs::path(a.out_dir) / item.chip.chip_id;
        write_raster(maps.mean, maps.valid, item.labels.labels, maps.height, maps.width,
                     item.chip.class_label, stem.string() + "_mean.aec");
        write_raster(maps.variance, maps.valid, item.labels.labels, maps.height, maps.width,
                     item.chip.class_label, stem.string() + "_var.aec");
        write_pgm(maps.mean, maps.height, maps.width, 0.0, 1.0, stem.string() + "_mean.pgm");
        write_pgm(maps.variance, maps.height, maps.width, 0.0, 0.25, stem.string() + "_var.pgm");
        if (a.pseudo_rgb) {
            std::array<int, 3> bands{a.rgb_bands[0], a.rgb_bands[1], a.rgb_bands[2]};
            write_pseudo_rgb(item.chip, bands, stem.string() + "_rgb.ppm");
        }
    }
    std::printf("predict: %zu chips, %d passes -> %s\n", items.size(), a.passes,
                a.out_dir.c_str());
    return 0;
}

// Recomputes the metric suite from on-disk mean-probability rasters alone;
// labels and validity come from the raster mask bytes.
int run_report(const std::string& manifest_path, const std::string& pred_dir,
               const std::string& split_name, double threshold, const std::string& out_dir) {
    DatasetManifest manifest = read_manifest(manifest_path);
    const Split want = split_from_string(split_name);
    ConfusionCounts counts;
    std::vector<ChipPrediction> chips;
    for (const auto& e : manifest.entries) {
        if (e.split != want) continue;
        Raster r = read_raster(fs::path(pred_dir) / (e.chip_id + "_mean.aec"));
        counts += confusion<double>(r.values, r.labels, r.valid, threshold);
        chips.push_back(chip_prediction<double>(r.values, r.labels, r.valid));
    }
    if (chips.empty()) throw data_error("report: no rasters found for split " + split_name);
    MetricsReport rep = pixel_metrics(counts);
    rep.chip_accuracy = chip_accuracy(chips, threshold);
    rep.n_chips = chips.size();
    const std::string report = format_report(rep);
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "metrics.txt", std::ios::binary | std::ios::trunc);
    f << report;
    std::fputs(report.c_str(), stdout);
    std::printf("report: %zu chips, split=%s, pixel_accuracy=%.6f\n", chips.size(),
                split_name.c_str(), rep.pixel_accuracy);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Field-scale crop segmentation pipeline over 64-band embedding chips"};
    app.require_subcommand(1);

    SynthGenArgs sg;
    auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic embedding-chip dataset");
    synth->add_option("--out", sg.out_dir, "Output directory")->required();
    synth->add_option("--chips", sg.chips, "Number of chips")->check(CLI::PositiveNumber);
    synth->add_option("--height", sg.height, "Chip height in pixels");
    synth->add_option("--width", sg.width, "Chip width in pixels");
    synth->add_option("--edge-mix", sg.edge_mix, "Edge mixing band width in pixels");
    synth->add_option("--margin", sg.margin, "Invalid margin frame width in pixels");
    synth->add_option("--irregularity", sg.irregularity, "Field boundary irregularity in [0,1]");
    synth->add_option("--separation", sg.separation, "Signature separation (Euclidean)");
    synth->add_option("--noise", sg.noise, "Per-channel Gaussian noise sigma");
    synth->add_option("--spacing", sg.spacing, "Centroid grid spacing in meters");
    synth->add_option("--seed", sg.seed, "Generator seed");

    std::string manifest_path, out_path, ratios = "0.7,0.15,0.15";
    double block = 5000.0;
    std::uint64_t split_seed = 0;
    auto* split = app.add_subcommand("split", "Assign chips to spatially blocked splits");
    split->add_option("--manifest", manifest_path, "Input manifest")->required();
    split->add_option("--out", out_path, "Output manifest")->required();
    split->add_option("--ratios", ratios, "train,val,test fractions");
    split->add_option("--block", block, "Spatial block size in meters")->check(CLI::PositiveNumber);
    split->add_option("--seed", split_seed, "Shuffle seed");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train the segmentation network");
    tr->add_option("--manifest", ta.manifest_path, "Split manifest")->required();
    tr->add_option("--out", ta.out_dir, "Output directory")->required();
    tr->add_option("--lr", ta.cfg.learning_rate, "Learning rate");
    tr->add_option("--wd", ta.cfg.weight_decay, "Decoupled weight decay");
    tr->add_option("--batch", ta.cfg.batch_size, "Batch size")->check(CLI::PositiveNumber);
    tr->add_option("--epochs", ta.cfg.epochs, "Epoch count")->check(CLI::PositiveNumber);
    tr->add_option("--seed", ta.cfg.seed, "Training seed");
    tr->add_option("--base", ta.cfg.unet.base_width, "U-Net base width");
    tr->add_option("--depth", ta.cfg.unet.depth, "U-Net depth (2x downsamplings)");
    tr->add_option("--dropout", ta.cfg.unet.dropout_rate, "Dropout rate");
    tr->add_flag("--no-norm", ta.no_norm, "Disable channel normalization");
    tr->add_flag("--mixed-precision", ta.cfg.mixed_precision,
                 "Accepted for config compatibility (no effect on this CPU path)");
    tr->add_flag("--quiet", ta.quiet, "Suppress per-epoch progress");

    std::string eval_manifest, eval_ckpt, eval_split = "test", eval_out;
    double eval_threshold = 0.5;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    ev->add_option("--manifest", eval_manifest, "Split manifest")->required();
    ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    ev->add_option("--split", eval_split, "Split to evaluate");
    ev->add_option("--threshold", eval_threshold, "Decision threshold");
    ev->add_option("--out", eval_out, "Output directory")->required();

    PredictArgs pa;
    auto* pr = app.add_subcommand("predict", "Monte Carlo dropout prediction");
    pr->add_option("--manifest", pa.manifest_path, "Split manifest")->required();
    pr->add_option("--checkpoint", pa.checkpoint, "Checkpoint file")->required();
    pr->add_option("--split", pa.split_name, "Split to predict");
    pr->add_option("--chip", pa.chip_id, "Predict a single chip by id");
    pr->add_option("--passes", pa.passes, "Stochastic passes per chip")->check(CLI::PositiveNumber);
    pr->add_option("--seed", pa.seed, "Base seed for pass randomness");
    pr->add_option("--out", pa.out_dir, "Output directory")->required();
    pr->add_flag("--pseudo-rgb", pa.pseudo_rgb, "Also emit pseudo-RGB previews");
    pr->add_option("--rgb-bands", pa.rgb_bands, "Three band indices for pseudo-RGB")
        ->expected(3);

    std::string rep_manifest, rep_pred_dir, rep_split = "test", rep_out;
    double rep_threshold = 0.5;
    auto* rp = app.add_subcommand("report", "Recompute metrics from prediction rasters");
    rp->add_option("--manifest", rep_manifest, "Split manifest")->required();
    rp->add_option("--pred-dir", rep_pred_dir, "Directory of *_mean.aec rasters")->required();
    rp->add_option("--split", rep_split, "Split to report");
    rp->add_option("--threshold", rep_threshold, "Decision threshold");
    rp->add_option("--out", rep_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return run_synth_gen(sg);
        if (split->parsed()) return run_split(manifest_path, out_path, ratios, block, split_seed);
        if (tr->parsed()) return run_train(ta);
        if (ev->parsed()) return run_eval(eval_manifest, eval_ckpt, eval_split, eval_threshold, eval_out);
        if (pr->parsed()) return run_predict(pa);
        if (rp->parsed()) return run_report(rep_manifest, rep_pred_dir, rep_split, rep_threshold, rep_out);
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 3;
    } catch (const data_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
