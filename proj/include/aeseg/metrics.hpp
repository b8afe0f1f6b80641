#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "aeseg/common.hpp"

namespace aeseg {

// Tomato is the positive class throughout.
struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct MetricsReport {
    double pixel_accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
    double chip_accuracy = 0.0;
    ConfusionCounts counts;
    std::size_t n_chips = 0;
};

// Pixel counted positive when prob > threshold (ties classify negative).
// Only valid pixels contribute; counts pool over everything supplied.
template <typename T>
inline ConfusionCounts confusion(std::span<const T> prob, std::span<const std::uint8_t> labels,
                                 std::span<const std::uint8_t> valid, double threshold = 0.5) {
    if (prob.size() != labels.size() || prob.size() != valid.size())
        throw data_error("confusion: shape mismatch");
    if (!(threshold > 0.0 && threshold < 1.0)) throw data_error("confusion: threshold must lie in (0,1)");
    ConfusionCounts c;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        if (!valid[i]) continue;
        const bool pred = static_cast<double>(prob[i]) > threshold;
        const bool truth = labels[i] != 0;
        if (pred && truth) ++c.tp;
        else if (pred && !truth) ++c.fp;
        else if (!pred && truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// Degenerate denominators: a zero-denominator precision/recall/f1/iou reports
// 1.0 when the corresponding error counts are zero, else 0.0.
inline MetricsReport pixel_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw data_error("pixel_metrics: no valid pixels counted");
    MetricsReport r;
    r.counts = c;
    const double tp = static_cast<double>(c.tp);
    r.pixel_accuracy = (tp + static_cast<double>(c.tn)) / static_cast<double>(c.total());
    r.precision = (c.tp + c.fp) ? tp / static_cast<double>(c.tp + c.fp) : (c.fn == 0 ? 1.0 : 0.0);
    r.recall = (c.tp + c.fn) ? tp / static_cast<double>(c.tp + c.fn) : (c.fp == 0 ? 1.0 : 0.0);
    r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                          : 0.0;
    if (c.tp + c.fp + c.fn == 0) r.f1 = 1.0;
    r.iou = (c.tp + c.fp + c.fn) ? tp / static_cast<double>(c.tp + c.fp + c.fn) : 1.0;
    return r;
}

// A chip is predicted tomato when the mean probability over its valid pixels
// exceeds the threshold; each chip must carry a single ground-truth class.
struct ChipPrediction {
    double mean_prob = 0.0;
    bool truth_tomato = false;
};

template <typename T>
inline ChipPrediction chip_prediction(std::span<const T> prob, std::span<const std::uint8_t> labels,
                                      std::span<const std::uint8_t> valid) {
    double sum = 0.0;
    std::size_t n = 0;
    bool any_pos = false, any_neg = false;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        if (!valid[i]) continue;
        ++n;
        sum += static_cast<double>(prob[i]);
        (labels[i] ? any_pos : any_neg) = true;
    }
    if (n == 0) throw data_error("chip_prediction: chip has zero valid pixels");
    if (any_pos && any_neg) throw data_error("chip_prediction: chip is not single-class");
    return {sum / static_cast<double>(n), any_pos};
}

inline double chip_accuracy(std::span<const ChipPrediction> chips, double threshold = 0.5) {
    if (chips.empty()) throw data_error("chip_accuracy: no chips");
    std::size_t correct = 0;
    for (const auto& c : chips)
        if ((c.mean_prob > threshold) == c.truth_tomato) ++correct;
    return static_cast<double>(correct) / static_cast<double>(chips.size());
}

// Plain-text report: aligned table plus a machine-readable key=value block.
inline std::string format_report(const MetricsReport& r) {
    char buf[512];
    std::string out;
    auto row = [&](const char* name, double v) {
        std::snprintf(buf, sizeof buf, "%-32s %10.6f\n", name, 100.0 * v);
        out += buf;
    };
    out += "Metric                                Score (%)\n";
    row("Pixel Accuracy", r.pixel_accuracy);
    row("Precision", r.precision);
    row("Recall", r.recall);
    row("F1 Score", r.f1);
    row("Intersection over Union (IoU)", r.iou);
    row("Chip Accuracy", r.chip_accuracy);
    out += "\n";
    std::snprintf(buf, sizeof buf,
                  "pixel_accuracy=%.6f\nprecision=%.6f\nrecall=%.6f\nf1=%.6f\niou=%.6f\n"
                  "chip_accuracy=%.6f\ntp=%llu\nfp=%llu\nfn=%llu\ntn=%llu\nn_chips=%zu\n",
                  r.pixel_accuracy, r.precision, r.recall, r.f1, r.iou, r.chip_accuracy,
                  static_cast<unsigned long long>(r.counts.tp),
                  static_cast<unsigned long long>(r.counts.fp),
                  static_cast<unsigned long long>(r.counts.fn),
                  static_cast<unsigned long long>(r.counts.tn), r.n_chips);
    out += buf;
    return out;
}

}  // namespace aeseg
