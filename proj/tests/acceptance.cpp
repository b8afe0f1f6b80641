// End-to-end acceptance checks. Usage: acceptance <cli_path> <work_dir>
//
// Prints one PASS/FAIL line per criterion and exits nonzero if any failed.
// The heavyweight criteria drive the installed CLI binary end to end; the
// rest exercise the library directly.

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aeseg/bayesinfer.hpp"
#include "aeseg/chipdata.hpp"
#include "aeseg/metrics.hpp"
#include "aeseg/objective.hpp"
#include "aeseg/synthfields.hpp"
#include "aeseg/trainer.hpp"
#include "aeseg/unet.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;
using namespace aeseg;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void run_criterion(int criterion, const std::function<std::pair<bool, std::string>()>& body) {
    try {
        auto [pass, detail] = body();
        report(criterion, pass, detail);
    } catch (const std::exception& e) {
        report(criterion, false, std::string("exception: ") + e.what());
    }
}

bool run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
    const std::string cmd = cli + " " + args + " >> " + log.string() + " 2>&1";
    return std::system(cmd.c_str()) == 0;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::map<std::string, double> parse_kv(const fs::path& p) {
    std::map<std::string, double> kv;
    std::ifstream f(p);
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        try {
            kv[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
        } catch (...) {
        }
    }
    return kv;
}

LoadedChip make_synth_chip(std::uint64_t seed, double noise, double separation) {
    SynthConfig scfg;
    scfg.noise_sigma = noise;
    const SignaturePair pair =
        make_signature_pair(derive_seed(seed, "sig", 0), separation, noise);
    const FieldMask mask = generate_field_mask(scfg, derive_seed(seed, "mask", 0));
    auto [chip, labels] = synthesize_chip(pair, mask, ChipClass::tomato, scfg, derive_seed(seed, "chip", 0));
    chip.chip_id = "acceptance_chip";
    return {std::move(chip), std::move(labels)};
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

}  // namespace

// --- criterion bodies --------------------------------------------------------

static std::pair<bool, std::string> unit_exact_losses() {
    std::vector<double> p1{0.5};
    std::vector<std::uint8_t> y1{1}, m1{1};
    const double bce1 = masked_bce<double>(p1, y1, m1);
    const bool a = std::abs(bce1 - std::log(2.0)) <= 1e-9;

    std::vector<double> p2{0.9, 0.2, 7.0};
    std::vector<std::uint8_t> y2{1, 0, 0}, m2{1, 1, 0};
    const double bce2 = masked_bce<double>(p2, y2, m2);
    const bool b = std::abs(bce2 - 0.164252) <= 1e-6;

    std::vector<double> p3(1000, 0.5);
    std::vector<std::uint8_t> y3(1000, 1), m3(1000, 1);
    const double dice = soft_dice<double>(p3, y3, m3);
    const bool c = std::abs(dice - 1.0 / 3.0) <= 1e-9;

    const LossValue total = total_loss<double>(p2, y2, m2);
    const bool d = std::abs(total.total - (total.bce + total.dice)) <= 1e-12;

    return {a && b && c && d,
            fmt("bce(single)=%.12f bce(pair)=%.8f dice(half)=%.12f sum_gap=%.2e",
                bce1, bce2, dice, std::abs(total.total - (total.bce + total.dice)))};
}

static std::pair<bool, std::string> gradient_check() {
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.base_width = 2;
    cfg.depth = 1;
    cfg.dropout_rate = 0.0;
    cfg.norm_enabled = false;
    const double worst = testutil::gradcheck_max_rel_err(cfg, 8, 8, 1, 42);
    return {worst < 1e-5, fmt("max relative gradient error %.3e (threshold 1e-5)", worst)};
}

static std::pair<bool, std::string> mask_exclusion() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 256;
        std::vector<double> p(n);
        std::vector<std::uint8_t> y(n), m(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = u(rng);
            y[i] = u(rng) < 0.5;
            m[i] = u(rng) < 0.7;
        }
        m[0] = 1;
        const LossValue base_loss = total_loss<double>(p, y, m);
        const ConfusionCounts base_counts = confusion<double>(p, y, m, 0.5);

        std::vector<double> p2 = p;
        std::vector<std::uint8_t> y2 = y;
        for (std::size_t i = 0; i < n; ++i) {
            if (m[i]) continue;
            p2[i] = u(rng) * 20.0 - 10.0;
            y2[i] = u(rng) < 0.5;
        }
        const LossValue mut_loss = total_loss<double>(p2, y2, m);
        const ConfusionCounts mut_counts = confusion<double>(p2, y2, m, 0.5);
        if (mut_loss.bce != base_loss.bce || mut_loss.dice != base_loss.dice ||
            mut_loss.total != base_loss.total || mut_counts.tp != base_counts.tp ||
            mut_counts.fp != base_counts.fp || mut_counts.fn != base_counts.fn ||
            mut_counts.tn != base_counts.tn)
            return {false, fmt("invalid-pixel perturbation changed an output at trial %d", trial)};
    }
    return {true, "100 randomized trials, losses and metrics unchanged"};
}

static std::pair<bool, std::string> metric_oracle() {
    std::mt19937_64 rng(4096);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1000;
        std::vector<double> p(n);
        std::vector<std::uint8_t> y(n), m(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = u(rng);
            y[i] = u(rng) < 0.5;
            m[i] = u(rng) < 0.9;
        }
        m[0] = 1;
        const double threshold = 0.1 + 0.8 * u(rng);
        const ConfusionCounts c = confusion<double>(p, y, m, threshold);
        const testutil::NaiveTally t = testutil::naive_confusion(p, y, m, threshold);
        if (c.tp != static_cast<std::uint64_t>(t.tp) || c.fp != static_cast<std::uint64_t>(t.fp) ||
            c.fn != static_cast<std::uint64_t>(t.fn) || c.tn != static_cast<std::uint64_t>(t.tn))
            return {false, fmt("confusion disagrees with brute-force tally at trial %d", trial)};
    }
    return {true, "50 random 1,000-pixel instances match the brute-force tally exactly"};
}

struct PipelineResult {
    fs::path data, split, run, eval_dir, pred;
    bool ok = false;
};

static PipelineResult run_pipeline(const std::string& cli, const fs::path& root,
                                   const fs::path& log) {
    PipelineResult r;
    r.data = root / "data";
    r.split = root / "data" / "split.tsv";
    r.run = root / "run";
    r.eval_dir = root / "eval";
    r.pred = root / "pred";
    fs::create_directories(root);

    r.ok = run_cli(cli,
                   "synth-gen --out " + r.data.string() +
                       " --chips 360 --separation 1.0 --noise 0.19 --seed 42",
                   log) &&
           run_cli(cli,
                   "split --manifest " + (r.data / "manifest.tsv").string() + " --out " +
                       r.split.string() +
                       " --ratios 0.666666667,0.166666667,0.166666666 --block 5000 --seed 42",
                   log) &&
           run_cli(cli,
                   "train --manifest " + r.split.string() + " --out " + r.run.string() +
                       " --epochs 15 --base 16 --depth 3 --dropout 0.2 --batch 24 --lr 0.001"
                       " --wd 0.0001 --seed 42 --quiet",
                   log) &&
           run_cli(cli,
                   "eval --manifest " + r.split.string() + " --checkpoint " +
                       (r.run / "checkpoint.aeu").string() + " --split test --out " +
                       r.eval_dir.string(),
                   log) &&
           run_cli(cli,
                   "predict --manifest " + r.split.string() + " --checkpoint " +
                       (r.run / "checkpoint.aeu").string() + " --split test --passes 100 --seed 42"
                       " --out " + r.pred.string(),
                   log);
    return r;
}

static std::pair<bool, std::string> end_to_end(const PipelineResult& pipe) {
    if (!pipe.ok) return {false, "pipeline command failed, see acceptance log"};
    const auto kv = parse_kv(pipe.eval_dir / "metrics.txt");
    const double acc = kv.at("pixel_accuracy");
    const double iou = kv.at("iou");
    const double chip_acc = kv.at("chip_accuracy");
    // closed-form optimum for separation 1.0, noise 0.19
    const double bayes = 0.5 * std::erfc(-(1.0 / (2.0 * 0.19)) / std::sqrt(2.0));
    const bool pass = bayes >= 0.995 && acc >= 0.97 && iou >= 0.93 && chip_acc >= 0.98 &&
                      acc <= bayes + 0.005;
    return {pass, fmt("pixel_accuracy=%.6f iou=%.6f chip_accuracy=%.6f bayes=%.6f", acc, iou,
                      chip_acc, bayes)};
}

static std::pair<bool, std::string> overfit_sanity() {
    const LoadedChip chip = make_synth_chip(77, 0.19, 1.0);
    std::vector<LoadedChip> one;
    one.push_back({chip.chip, chip.labels});

    TrainConfig cfg;
    cfg.unet.base_width = 8;
    cfg.unet.depth = 2;
    cfg.unet.dropout_rate = 0.0;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.seed = 7;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;

    const TrainResult<float> res = train<float>(cfg, one, one);
    const double final_loss = res.history.back().train_loss;

    UNet<float> net(cfg.unet);
    const ValResult<float> train_eval = evaluate_set(net, res.best_params, one, cfg.objective);
    const bool pass = final_loss < 0.01 && train_eval.metrics.pixel_accuracy == 1.0;
    return {pass, fmt("final train_loss=%.6f training pixel_accuracy=%.6f", final_loss,
                      train_eval.metrics.pixel_accuracy)};
}

static std::pair<bool, std::string> mc_dropout_checks() {
    const LoadedChip chip = make_synth_chip(99, 0.19, 1.0);

    // zero dropout: variance identically zero, mean bitwise equal to eval
    UNetConfig det;
    det.base_width = 8;
    det.depth = 2;
    det.dropout_rate = 0.0;
    UNet<float> dnet(det);
    const ParameterSet<float> dparams = dnet.init_params(5);
    McConfig mc0;
    mc0.passes = 5;
    const UncertaintyMaps m0 = mc_predict(dnet, dparams, chip, mc0);
    const std::vector<float> eval_prob = predict_probabilities(dnet, dparams, chip);
    for (std::size_t i = 0; i < m0.mean.size(); ++i) {
        if (m0.variance[i] != 0.0)
            return {false, "nonzero variance with dropout disabled"};
        if (static_cast<float>(m0.mean[i]) != eval_prob[i])
            return {false, "mc mean differs from eval output with dropout disabled"};
    }

    // stochastic case: streamed stats equal two-pass recomputation
    UNetConfig sto = det;
    sto.dropout_rate = 0.2;
    UNet<float> snet(sto);
    const ParameterSet<float> sparams = snet.init_params(6);
    McConfig mc;
    mc.passes = 100;
    mc.base_seed = 11;
    mc.store_samples = true;
    const UncertaintyMaps m = mc_predict(snet, sparams, chip, mc);
    double worst = 0.0;
    for (std::size_t i = 0; i < m.mean.size(); ++i) {
        double mean = 0.0;
        for (const auto& s : m.samples) mean += s[i];
        mean /= 100.0;
        double var = 0.0;
        for (const auto& s : m.samples) var += (s[i] - mean) * (s[i] - mean);
        var /= 100.0;
        worst = std::max({worst, std::abs(mean - m.mean[i]), std::abs(var - m.variance[i])});
        if (m.variance[i] < 0.0 || m.variance[i] > 0.25)
            return {false, fmt("variance %.6f outside [0, 0.25]", m.variance[i])};
    }
    if (worst > 1e-9) return {false, fmt("streamed stats deviate by %.3e from two-pass", worst)};
    return {true, fmt("dropout-0 bitwise match; streamed vs two-pass gap %.3e; variance bounded",
                      worst)};
}

static std::pair<bool, std::string> edge_uncertainty(const PipelineResult& pipe) {
    if (!pipe.ok) return {false, "pipeline unavailable"};
    const DatasetManifest manifest = read_manifest(pipe.split);
    int chips = 0, edge_dominant = 0;
    for (const auto& e : manifest.entries) {
        if (e.split != Split::test) continue;
        const Raster var = read_raster(pipe.pred / (e.chip_id + "_var.aec"));
        UncertaintyMaps maps;
        maps.height = var.height;
        maps.width = var.width;
        maps.variance = var.values;
        maps.mean.assign(var.values.size(), 0.0);
        maps.valid = var.valid;
        std::vector<std::uint8_t> labels(var.labels.begin(), var.labels.end());
        const EdgeInteriorSummary s = edge_interior_summary(maps, labels);
        ++chips;
        if (s.edge_median_var > s.interior_median_var) ++edge_dominant;
    }
    if (chips == 0) return {false, "no test chips found"};
    const double frac = static_cast<double>(edge_dominant) / chips;
    return {frac >= 0.90, fmt("edge median variance exceeds interior on %d/%d test chips (%.1f%%)",
                              edge_dominant, chips, 100.0 * frac)};
}

static std::pair<bool, std::string> split_leakage(const std::string& cli, const fs::path& root,
                                                  const PipelineResult& pipe, const fs::path& log) {
    if (!pipe.ok) return {false, "pipeline unavailable"};
    const fs::path out = root / "split_default_ratios.tsv";
    if (!run_cli(cli,
                 "split --manifest " + (pipe.data / "manifest.tsv").string() + " --out " +
                     out.string() + " --ratios 0.70,0.15,0.15 --block 5000 --seed 7",
                 log))
        return {false, "split command failed"};

    const DatasetManifest m = read_manifest(out);
    const double block = 5000.0;
    auto blk = [&](const ManifestEntry& e) {
        return std::pair<long long, long long>(
            static_cast<long long>(std::floor(e.centroid_x / block)),
            static_cast<long long>(std::floor(e.centroid_y / block)));
    };
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& e : m.entries) {
        if (e.split == Split::unassigned) return {false, "unassigned chip in split output"};
        counts[static_cast<int>(e.split)]++;
    }
    // exhaustive pairwise audit
    std::size_t cross_pairs = 0;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        for (std::size_t j = i + 1; j < m.entries.size(); ++j)
            if (m.entries[i].split != m.entries[j].split && blk(m.entries[i]) == blk(m.entries[j]))
                ++cross_pairs;
    const double n = static_cast<double>(m.entries.size());
    const double ft = counts[0] / n, fv = counts[1] / n, fe = counts[2] / n;
    const bool ratios_ok =
        std::abs(ft - 0.70) <= 0.03 && std::abs(fv - 0.15) <= 0.03 && std::abs(fe - 0.15) <= 0.03;
    return {cross_pairs == 0 && ratios_ok,
            fmt("cross-split same-block pairs=%zu achieved ratios %.4f/%.4f/%.4f", cross_pairs, ft,
                fv, fe)};
}

static std::pair<bool, std::string> reproducibility(const PipelineResult& a,
                                                    const PipelineResult& b) {
    if (!a.ok || !b.ok) return {false, "pipeline unavailable"};
    std::vector<std::pair<fs::path, fs::path>> pairs = {
        {a.run / "history.tsv", b.run / "history.tsv"},
        {a.run / "checkpoint.aeu", b.run / "checkpoint.aeu"},
        {a.eval_dir / "metrics.txt", b.eval_dir / "metrics.txt"},
    };
    std::vector<fs::path> rasters;
    for (const auto& entry : fs::directory_iterator(a.pred))
        rasters.push_back(entry.path().filename());
    std::sort(rasters.begin(), rasters.end());
    for (const auto& name : rasters) pairs.push_back({a.pred / name, b.pred / name});

    std::size_t compared = 0;
    for (const auto& [pa, pb] : pairs) {
        if (file_bytes(pa) != file_bytes(pb))
            return {false, "byte mismatch in " + pa.filename().string()};
        ++compared;
    }
    return {true, fmt("%zu artifacts byte-identical across reruns (history, checkpoint, metrics,"
                      " rasters)", compared)};
}

int main(int argc, char** argv) {
    if (argc != 3) {
        std::fprintf(stderr, "usage: acceptance <cli_path> <work_dir>\n");
        return 2;
    }
    const std::string cli = argv[1];
    const fs::path work = argv[2];
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path log = work / "acceptance.log";

    run_criterion(1, unit_exact_losses);
    run_criterion(2, gradient_check);
    run_criterion(3, mask_exclusion);
    run_criterion(4, metric_oracle);

    const PipelineResult pipe_a = run_pipeline(cli, work / "a", log);
    run_criterion(5, [&] { return end_to_end(pipe_a); });
    run_criterion(6, overfit_sanity);
    run_criterion(7, mc_dropout_checks);
    run_criterion(8, [&] { return edge_uncertainty(pipe_a); });
    run_criterion(9, [&] { return split_leakage(cli, work, pipe_a, log); });

    const PipelineResult pipe_b = run_pipeline(cli, work / "b", log);
    run_criterion(10, [&] { return reproducibility(pipe_a, pipe_b); });

    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
