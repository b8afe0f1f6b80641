#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "aeseg/chipdata.hpp"
#include "aeseg/common.hpp"
#include "aeseg/metrics.hpp"
#include "aeseg/objective.hpp"
#include "aeseg/unet.hpp"

namespace aeseg {

struct TrainConfig {
    double learning_rate = 0.001;
    double weight_decay = 0.0001;
    int batch_size = 24;
    int epochs = 30;
    std::uint64_t seed = 0;
    bool mixed_precision = false;  // accepted for config compatibility; storage stays float
    ObjectiveConfig objective;
    UNetConfig unet;

    void validate() const {
        if (learning_rate <= 0.0) throw data_error("train config: learning_rate must be positive");
        if (batch_size < 1) throw data_error("train config: batch_size must be >= 1");
        if (epochs < 1) throw data_error("train config: epochs must be >= 1");
        objective.validate();
        unet.validate();
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double pixel_accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
};

// Adam with decoupled weight decay: the decay multiplies weights by
// (1 - lr*wd) independently of the adaptive step.
template <typename T>
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterSet<T>& params, const std::vector<std::vector<T>>& grads) {
        if (m_.empty()) {
            m_.resize(params.tensors.size());
            v_.resize(params.tensors.size());
            for (std::size_t i = 0; i < params.tensors.size(); ++i)
                if (params.tensors[i].learnable) {
                    m_[i].assign(params.tensors[i].size(), 0.0);
                    v_[i].assign(params.tensors[i].size(), 0.0);
                }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            if (!params.tensors[i].learnable) continue;
            auto& w = params.tensors[i].v;
            const auto& g = grads[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                double wj = static_cast<double>(w[j]);
                wj -= lr_ * wd_ * wj;
                wj -= lr_ * mhat / (std::sqrt(vhat) + eps_);
                w[j] = static_cast<T>(wj);
            }
        }
    }

    int steps_taken() const { return t_; }

private:
    double lr_, wd_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct LoadedChip {
    EmbeddingChip chip;
    LabelMask labels;
};

inline std::vector<LoadedChip> load_split(const DatasetManifest& manifest,
                                          const std::filesystem::path& base_dir, Split split) {
    std::vector<LoadedChip> out;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        auto [chip, labels] = read_chip(base_dir / e.relative_path);
        chip.chip_id = e.chip_id;
        chip.centroid_x = e.centroid_x;
        chip.centroid_y = e.centroid_y;
        out.push_back({std::move(chip), std::move(labels)});
    }
    return out;
}

namespace detail {

// Packs chips (already padded to a common size) into an NCHW batch with
// flattened labels and validity, pixel order matching the logits layout.
template <typename T>
void assemble_batch(const std::vector<const LoadedChip*>& chips, int h, int w, FeatureMap<T>& input,
                    std::vector<std::uint8_t>& labels, std::vector<std::uint8_t>& valid) {
    const int n = static_cast<int>(chips.size());
    input.resize(n, kEmbeddingBands, h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    labels.assign(static_cast<std::size_t>(n) * plane, 0);
    valid.assign(static_cast<std::size_t>(n) * plane, 0);
    for (int i = 0; i < n; ++i) {
        EmbeddingChip padded;
        LabelMask padded_labels;
        const EmbeddingChip* src = &chips[i]->chip;
        const LabelMask* lab = &chips[i]->labels;
        if (src->height != h || src->width != w) {
            pad_chip(*src, *lab, h, w, padded, padded_labels);
            src = &padded;
            lab = &padded_labels;
        }
        for (int b = 0; b < kEmbeddingBands; ++b)
            for (std::size_t p = 0; p < plane; ++p)
                input.at(i, b)[p] = static_cast<T>(src->bands[static_cast<std::size_t>(b) * plane + p]);
        std::copy_n(lab->labels.begin(), plane, labels.begin() + static_cast<std::size_t>(i) * plane);
        std::copy_n(src->valid.begin(), plane, valid.begin() + static_cast<std::size_t>(i) * plane);
    }
}

}  // namespace detail

// Eval-mode probability map for one chip, cropped back to its true size.
template <typename T>
std::vector<T> predict_probabilities(const UNet<T>& net, const ParameterSet<T>& params,
                                     const LoadedChip& item) {
    const int depth = params.config.depth;
    const int ph = padded_dim(item.chip.height, depth);
    const int pw = padded_dim(item.chip.width, depth);
    FeatureMap<T> input;
    std::vector<std::uint8_t> labels, valid;
    std::vector<const LoadedChip*> one{&item};
    detail::assemble_batch(one, ph, pw, input, labels, valid);
    Workspace<T> ws;
    FeatureMap<T> logits = net.forward(params, input, ForwardMode::eval, 0, ws);
    std::vector<T> prob(static_cast<std::size_t>(item.chip.height) * item.chip.width);
    for (int r = 0; r < item.chip.height; ++r)
        for (int c = 0; c < item.chip.width; ++c)
            prob[static_cast<std::size_t>(r) * item.chip.width + c] = static_cast<T>(
                sigmoid(static_cast<double>(logits.v[static_cast<std::size_t>(r) * pw + c])));
    return prob;
}

template <typename T>
struct ValResult {
    double loss = 0.0;
    MetricsReport metrics;
};

// Full eval-mode pass: loss pooled over every valid pixel in the set, plus
// the pixel metric suite and chip accuracy at the given threshold.
template <typename T>
ValResult<T> evaluate_set(const UNet<T>& net, const ParameterSet<T>& params,
                          const std::vector<LoadedChip>& items, const ObjectiveConfig& obj_cfg,
                          double threshold = 0.5) {
    if (items.empty()) throw data_error("evaluate_set: empty chip list");
    std::vector<T> all_prob;
    std::vector<std::uint8_t> all_labels, all_valid;
    std::vector<ChipPrediction> chips;
    for (const auto& item : items) {
        std::vector<T> prob = predict_probabilities(net, params, item);
        chips.push_back(chip_prediction<T>(prob, item.labels.labels, item.chip.valid));
        all_prob.insert(all_prob.end(), prob.begin(), prob.end());
        all_labels.insert(all_labels.end(), item.labels.labels.begin(), item.labels.labels.end());
        all_valid.insert(all_valid.end(), item.chip.valid.begin(), item.chip.valid.end());
    }
    ValResult<T> res;
    const LossValue lv = total_loss<T>(all_prob, all_labels, all_valid, obj_cfg);
    res.loss = lv.total;
    res.metrics = pixel_metrics(confusion<T>(all_prob, all_labels, all_valid, threshold));
    res.metrics.chip_accuracy = chip_accuracy(chips, threshold);
    res.metrics.n_chips = chips.size();
    return res;
}

template <typename T>
struct TrainResult {
    ParameterSet<T> best_params;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
};

// Fixed-schedule training: per epoch a seeded shuffle, rectangular batches
// grouped by padded size, forward/backward/AdamW update per batch, then a
// full eval-mode validation pass. Returns the minimum-val-loss checkpoint
// (ties resolved toward the earlier epoch).
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<LoadedChip>& train_set,
                     const std::vector<LoadedChip>& val_set,
                     std::FILE* progress = nullptr) {
    cfg.validate();
    if (train_set.empty()) throw data_error("train: empty training set");
    if (val_set.empty()) throw data_error("train: empty validation set");

    UNet<T> net(cfg.unet);
    ParameterSet<T> params = net.init_params(derive_seed(cfg.seed, "init", 0));
    AdamW<T> opt(cfg.learning_rate, cfg.weight_decay);

    // bucket chip indices by padded dimensions so every batch is rectangular
    std::map<std::pair<int, int>, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        const auto& c = train_set[i].chip;
        buckets[{padded_dim(c.height, cfg.unet.depth), padded_dim(c.width, cfg.unet.depth)}]
            .push_back(i);
    }

    TrainResult<T> result;
    double best_val = std::numeric_limits<double>::infinity();
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
        double loss_sum = 0.0;
        std::size_t batch_count = 0;
        int batch_index = 0;
        for (auto& [dims, indices] : buckets) {
            std::shuffle(indices.begin(), indices.end(), shuffle_rng);
            for (std::size_t start = 0; start < indices.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(indices.size(), start + cfg.batch_size);
                std::vector<const LoadedChip*> batch;
                for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[indices[i]]);
                FeatureMap<T> input;
                std::vector<std::uint8_t> labels, valid;
                detail::assemble_batch(batch, dims.first, dims.second, input, labels, valid);
                const std::uint64_t fwd_seed =
                    derive_seed(cfg.seed, "batch", (static_cast<std::uint64_t>(epoch) << 24) |
                                                       static_cast<std::uint64_t>(batch_index));
                Workspace<T> ws;
                BackwardResult<T> bw;
                try {
                    bw = loss_backward(net, params, input, std::span<const std::uint8_t>(labels),
                                       std::span<const std::uint8_t>(valid), cfg.objective,
                                       fwd_seed, &ws);
                } catch (const numeric_error& e) {
                    throw numeric_error("epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(batch_index) + ": " + e.what());
                }
                net.update_running_stats(params, ws);
                opt.step(params, bw.grads);
                loss_sum += bw.loss.total;
                ++batch_count;
                ++batch_index;
            }
        }

        ValResult<T> val = evaluate_set(net, params, val_set, cfg.objective);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(batch_count);
        rec.val_loss = val.loss;
        rec.pixel_accuracy = val.metrics.pixel_accuracy;
        rec.precision = val.metrics.precision;
        rec.recall = val.metrics.recall;
        rec.f1 = val.metrics.f1;
        rec.iou = val.metrics.iou;
        result.history.push_back(rec);
        if (val.loss < best_val) {
            best_val = val.loss;
            result.best_params = params;
            result.best_epoch = epoch;
        }
        if (progress)
            std::fprintf(progress, "epoch %d/%d train_loss=%.6f val_loss=%.6f val_f1=%.6f\n",
                         epoch, cfg.epochs, rec.train_loss, rec.val_loss, rec.f1);
    }
    return result;
}

inline void write_history(const std::vector<EpochRecord>& history,
                          const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f << "epoch\ttrain_loss\tval_loss\tpixel_accuracy\tprecision\trecall\tf1\tiou\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", r.epoch,
                      r.train_loss, r.val_loss, r.pixel_accuracy, r.precision, r.recall, r.f1,
                      r.iou);
        f << buf;
    }
    if (!f) throw data_error("write failed: " + path.string());
}

}  // namespace aeseg
