#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "aeseg/chipdata.hpp"
#include "aeseg/common.hpp"

namespace aeseg {

// Pair of 64-d class signatures separated by a known Euclidean distance,
// observed through isotropic per-channel Gaussian noise. Keeping the
// distribution this simple makes the best achievable per-pixel accuracy
// closed-form (see bayes_accuracy).
struct SignaturePair {
    std::array<double, kEmbeddingBands> mu_tomato{};
    std::array<double, kEmbeddingBands> mu_other{};
    double noise_sigma = 0.0;
    double separation = 0.0;
};

struct SynthConfig {
    int chip_height = 64;
    int chip_width = 64;
    int edge_mix_width = 3;
    int margin_width = 2;
    double field_irregularity = 0.35;
    double noise_sigma = 0.25;
    double separation = 1.0;
    std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& c) {
    if (c.chip_height < 16 || c.chip_width < 16)
        throw data_error("synth config: chip dimensions must be at least 16");
    if (c.edge_mix_width < 0 || c.edge_mix_width >= std::min(c.chip_height, c.chip_width) / 4)
        throw data_error("synth config: edge_mix_width must be below min(H,W)/4");
    if (c.margin_width < 0) throw data_error("synth config: margin_width must be nonnegative");
    if (c.field_irregularity < 0.0 || c.field_irregularity > 1.0)
        throw data_error("synth config: field_irregularity must lie in [0,1]");
    if (c.noise_sigma < 0.0) throw data_error("synth config: noise_sigma must be nonnegative");
}

inline constexpr double kSignatureBound = 0.8;

// Places two signatures symmetrically about a random center along a random
// unit direction, so their distance is exactly `separation`. Components stay
// within [-0.8, 0.8] to leave headroom for noise before clamping.
inline SignaturePair make_signature_pair(std::uint64_t seed, double separation, double noise_sigma) {
    if (separation < 0.0) throw data_error("make_signature_pair: separation must be nonnegative");
    if (noise_sigma < 0.0) throw data_error("make_signature_pair: noise_sigma must be nonnegative");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> center_dist(-0.5, 0.5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int attempt = 0; attempt < 256; ++attempt) {
        std::array<double, kEmbeddingBands> center{};
        std::array<double, kEmbeddingBands> dir{};
        double norm2 = 0.0;
        for (int b = 0; b < kEmbeddingBands; ++b) {
            center[b] = center_dist(rng);
            dir[b] = gauss(rng);
            norm2 += dir[b] * dir[b];
        }
        if (norm2 == 0.0) continue;
        const double scale = separation / (2.0 * std::sqrt(norm2));
        SignaturePair pair;
        pair.noise_sigma = noise_sigma;
        pair.separation = separation;
        bool in_bounds = true;
        for (int b = 0; b < kEmbeddingBands; ++b) {
            pair.mu_tomato[b] = center[b] + dir[b] * scale;
            pair.mu_other[b] = center[b] - dir[b] * scale;
            if (std::abs(pair.mu_tomato[b]) > kSignatureBound ||
                std::abs(pair.mu_other[b]) > kSignatureBound)
                in_bounds = false;
        }
        if (in_bounds) return pair;
    }
    throw data_error("make_signature_pair: separation too large for component bounds");
}

enum class FieldZone : std::uint8_t { margin = 0, edge_band = 1, interior = 2 };

struct FieldMask {
    int height = 0;
    int width = 0;
    std::vector<FieldZone> zones;  // H * W

    FieldZone at(int r, int c) const { return zones[static_cast<std::size_t>(r) * width + c]; }
};

namespace detail {

// Star-shaped field footprint: a pixel is interior when its scaled Chebyshev
// distance from the blob center is below 1 + irregularity * harmonic(theta).
// irregularity 0 degenerates to an axis-aligned rectangle.
inline bool sample_blob(const SynthConfig& cfg, std::mt19937_64& rng, std::vector<FieldZone>& zones) {
    const int h = cfg.chip_height;
    const int w = cfg.chip_width;
    const int frame = cfg.margin_width + cfg.edge_mix_width;
    const double half_h = (h - 1 - 2.0 * frame) / 2.0;
    const double half_w = (w - 1 - 2.0 * frame) / 2.0;
    if (half_h < 2.0 || half_w < 2.0) throw data_error("generate_field_mask: chip too small for margins");

    std::uniform_real_distribution<double> radius_dist(0.68, 0.97);
    std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * 3.14159265358979323846);
    std::uniform_real_distribution<double> amp_dist(-1.0, 1.0);
    const double ry = radius_dist(rng) * half_h;
    const double rx = radius_dist(rng) * half_w;
    const double cy = (h - 1) / 2.0;
    const double cx = (w - 1) / 2.0;

    // A few low harmonics, total amplitude bounded so the radius stays
    // positive and the region star-shaped (hence connected).
    constexpr int kHarmonics = 5;
    double amp[kHarmonics], phase[kHarmonics];
    double total = 0.0;
    for (int k = 0; k < kHarmonics; ++k) {
        amp[k] = amp_dist(rng);
        phase[k] = phase_dist(rng);
        total += std::abs(amp[k]);
    }
    const double amp_scale = total > 0.0 ? 0.55 * cfg.field_irregularity / total : 0.0;

    zones.assign(static_cast<std::size_t>(h) * w, FieldZone::margin);
    std::size_t interior_count = 0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (r < frame || c < frame || r >= h - frame || c >= w - frame) continue;
            const double dy = (r - cy) / ry;
            const double dx = (c - cx) / rx;
            const double theta = std::atan2(dy, dx);
            double boundary = 1.0;
            for (int k = 0; k < kHarmonics; ++k)
                boundary += amp_scale * amp[k] * std::cos((k + 2) * theta + phase[k]);
            if (std::max(std::abs(dy), std::abs(dx)) <= boundary) {
                zones[static_cast<std::size_t>(r) * w + c] = FieldZone::interior;
                ++interior_count;
            }
        }
    }
    const double occupancy = static_cast<double>(interior_count) / (static_cast<double>(h) * w);
    return occupancy >= 0.30 && occupancy <= 0.80;
}

}  // namespace detail

// Generates the per-pixel zone map: one connected interior blob covering
// 30-80% of the chip, an edge_mix_width ring of mixed pixels around it, and
// margin (NoData) elsewhere, including a frame of at least margin_width.
inline FieldMask generate_field_mask(const SynthConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    std::mt19937_64 rng(seed);
    FieldMask mask;
    mask.height = cfg.chip_height;
    mask.width = cfg.chip_width;

    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt)
        ok = detail::sample_blob(cfg, rng, mask.zones);
    if (!ok) throw data_error("generate_field_mask: occupancy constraint unsatisfiable");

    const int h = cfg.chip_height, w = cfg.chip_width, ew = cfg.edge_mix_width;
    if (ew > 0) {
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                auto& z = mask.zones[static_cast<std::size_t>(r) * w + c];
                if (z != FieldZone::margin) continue;
                if (r < cfg.margin_width || c < cfg.margin_width || r >= h - cfg.margin_width ||
                    c >= w - cfg.margin_width)
                    continue;
                bool near = false;
                for (int dr = -ew; dr <= ew && !near; ++dr) {
                    for (int dc = -ew; dc <= ew && !near; ++dc) {
                        const int rr = r + dr, cc = c + dc;
                        if (rr >= 0 && cc >= 0 && rr < h && cc < w &&
                            mask.zones[static_cast<std::size_t>(rr) * w + cc] == FieldZone::interior)
                            near = true;
                    }
                }
                if (near) z = FieldZone::edge_band;
            }
        }
    }
    return mask;
}

// Renders a chip from a zone map. Interior pixels carry the class signature
// plus Gaussian channel noise; edge pixels mix the two signatures with a
// per-pixel weight alpha ~ U(0.5, 1) toward the chip's own class, so they are
// genuinely more ambiguous; margin pixels are invalid.
inline std::pair<EmbeddingChip, LabelMask> synthesize_chip(const SignaturePair& pair,
                                                           const FieldMask& mask,
                                                           ChipClass class_label,
                                                           const SynthConfig& cfg,
                                                           std::uint64_t seed) {
    validate(cfg);
    if (mask.height != cfg.chip_height || mask.width != cfg.chip_width)
        throw data_error("synthesize_chip: mask dimensions disagree with config");

    const auto& own = class_label == ChipClass::tomato ? pair.mu_tomato : pair.mu_other;
    const auto& opp = class_label == ChipClass::tomato ? pair.mu_other : pair.mu_tomato;
    const int h = mask.height, w = mask.width;
    const std::size_t px = static_cast<std::size_t>(h) * w;

    EmbeddingChip chip;
    chip.height = h;
    chip.width = w;
    chip.class_label = class_label;
    chip.bands.assign(px * kEmbeddingBands, 0.0f);
    chip.valid.assign(px, 0);
    LabelMask labels;
    labels.height = h;
    labels.width = w;
    labels.labels.assign(px, 0);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> alpha_dist(0.5, 1.0);
    const std::uint8_t y = class_label == ChipClass::tomato ? 1 : 0;

    for (std::size_t i = 0; i < px; ++i) {
        const FieldZone z = mask.zones[i];
        if (z == FieldZone::margin) continue;
        chip.valid[i] = 1;
        labels.labels[i] = y;
        const double alpha = z == FieldZone::edge_band ? alpha_dist(rng) : 1.0;
        for (int b = 0; b < kEmbeddingBands; ++b) {
            double v = alpha * own[b] + (1.0 - alpha) * opp[b];
            if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(rng);
            v = std::clamp(v, -1.0, 1.0);
            chip.bands[static_cast<std::size_t>(b) * px + i] = static_cast<float>(v);
        }
    }
    return {std::move(chip), std::move(labels)};
}

// Optimal per-pixel accuracy for two equal-prior isotropic Gaussian classes
// at distance d: Phi(d / (2 sigma)). Clamping is ignored; exact when the
// signatures sit well inside the value bounds.
inline double bayes_accuracy(const SignaturePair& pair) {
    if (pair.noise_sigma == 0.0) return pair.separation > 0.0 ? 1.0 : 0.5;
    const double x = pair.separation / (2.0 * pair.noise_sigma);
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

}  // namespace aeseg
