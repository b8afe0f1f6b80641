#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "aeseg/chipdata.hpp"
#include "aeseg/common.hpp"
#include "aeseg/trainer.hpp"
#include "aeseg/unet.hpp"

namespace aeseg {

struct McConfig {
    int passes = 100;
    std::uint64_t base_seed = 0;
    bool store_samples = false;

    void validate() const {
        if (passes < 1) throw data_error("mc config: passes must be >= 1");
    }
};

// Predictive mean and population variance over T stochastic passes, computed
// in double precision. Maps are cropped to the chip's true size.
struct UncertaintyMaps {
    int height = 0;
    int width = 0;
    std::vector<double> mean;      // in [0,1]
    std::vector<double> variance;  // in [0, 0.25]
    std::vector<std::uint8_t> valid;
    std::vector<std::vector<double>> samples;  // per pass, when requested
};

inline std::uint64_t mc_pass_seed(std::uint64_t base_seed, const std::string& chip_id, int pass) {
    return Fnv1a64().u64(base_seed).str(chip_id).u64(static_cast<std::uint64_t>(pass)).value();
}

// T forward passes in mc_dropout mode, each seeded by
// hash(base_seed, chip_id, t), reduced with Welford's recurrence so the
// streamed statistics match a two-pass recomputation. Pass order is fixed,
// so results are reproducible bit for bit.
template <typename T>
UncertaintyMaps mc_predict(const UNet<T>& net, const ParameterSet<T>& params,
                           const LoadedChip& item, const McConfig& cfg) {
    cfg.validate();
    const int depth = params.config.depth;
    const int h = item.chip.height, w = item.chip.width;
    const int ph = padded_dim(h, depth), pw = padded_dim(w, depth);

    FeatureMap<T> input;
    std::vector<std::uint8_t> labels, valid;
    std::vector<const LoadedChip*> one{&item};
    detail::assemble_batch(one, ph, pw, input, labels, valid);

    const std::size_t px = static_cast<std::size_t>(h) * w;
    UncertaintyMaps maps;
    maps.height = h;
    maps.width = w;
    maps.mean.assign(px, 0.0);
    maps.variance.assign(px, 0.0);
    maps.valid = item.chip.valid;

    std::vector<double> m2(px, 0.0);
    std::vector<double> prob(px);
    for (int t = 1; t <= cfg.passes; ++t) {
        Workspace<T> ws;
        FeatureMap<T> logits = net.forward(params, input, ForwardMode::mc_dropout,
                                           mc_pass_seed(cfg.base_seed, item.chip.chip_id, t), ws);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                prob[static_cast<std::size_t>(r) * w + c] =
                    sigmoid(static_cast<double>(logits.v[static_cast<std::size_t>(r) * pw + c]));
        const double inv_t = 1.0 / static_cast<double>(t);
        for (std::size_t i = 0; i < px; ++i) {
            const double delta = prob[i] - maps.mean[i];
            maps.mean[i] += delta * inv_t;
            m2[i] += delta * (prob[i] - maps.mean[i]);
        }
        if (cfg.store_samples) maps.samples.push_back(prob);
    }
    const double inv_n = 1.0 / static_cast<double>(cfg.passes);
    for (std::size_t i = 0; i < px; ++i) maps.variance[i] = std::max(0.0, m2[i] * inv_n);
    return maps;
}

struct EdgeInteriorSummary {
    double edge_median_var = 0.0;
    double interior_median_var = 0.0;
    std::size_t edge_pixel_count = 0;
    std::size_t interior_pixel_count = 0;
};

namespace detail {

inline double exact_median(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Edge pixels are valid pixels within `edge_distance` (Chebyshev) of a
// validity boundary (including the chip border) or of a label boundary;
// interior pixels are the remaining valid pixels. Medians are exact, with
// the midpoint rule for even counts.
inline EdgeInteriorSummary edge_interior_summary(const UncertaintyMaps& maps,
                                                 const std::vector<std::uint8_t>& labels,
                                                 int edge_distance = 2) {
    const int h = maps.height, w = maps.width;
    if (labels.size() != maps.valid.size() || maps.variance.size() != maps.valid.size())
        throw data_error("edge_interior_summary: shape mismatch");
    std::vector<double> edge_vals, interior_vals;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            if (!maps.valid[i]) continue;
            bool edge = false;
            for (int dr = -edge_distance; dr <= edge_distance && !edge; ++dr) {
                for (int dc = -edge_distance; dc <= edge_distance && !edge; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= h || cc >= w) {
                        edge = true;  // chip border counts as a validity boundary
                        continue;
                    }
                    const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
                    if (!maps.valid[j] || labels[j] != labels[i]) edge = true;
                }
            }
            (edge ? edge_vals : interior_vals).push_back(maps.variance[i]);
        }
    }
    if (interior_vals.empty())
        throw data_error("edge_interior_summary: no interior pixels at this edge_distance");
    EdgeInteriorSummary s;
    s.edge_pixel_count = edge_vals.size();
    s.interior_pixel_count = interior_vals.size();
    s.edge_median_var = edge_vals.empty() ? 0.0 : detail::exact_median(edge_vals);
    s.interior_median_var = detail::exact_median(interior_vals);
    return s;
}

// ---- raster / preview export ----------------------------------------------

// Single-band raster in the chip container layout (C=1). Mask bytes carry the
// chip's labels and validity so downstream reports need no side lookups.
inline void write_raster(const std::vector<double>& values, const std::vector<std::uint8_t>& valid,
                         const std::vector<std::uint8_t>& labels, int h, int w,
                         ChipClass class_label, const std::filesystem::path& path) {
    std::string out;
    out.append(kChipMagic, 8);
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(h));
    detail::put_u32(out, static_cast<std::uint32_t>(w));
    out.push_back(static_cast<char>(class_label));
    out.append(3, '\0');
    for (double v : values) detail::put_f32(out, static_cast<float>(v));
    for (std::size_t i = 0; i < valid.size(); ++i)
        out.push_back(valid[i] ? static_cast<char>(labels[i]) : static_cast<char>(255));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("write failed: " + path.string());
}

struct Raster {
    int height = 0;
    int width = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;
    std::vector<std::uint8_t> labels;
    ChipClass class_label = ChipClass::non_tomato;
};

inline Raster read_raster(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open: " + path.string());
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() < kChipHeaderBytes || std::memcmp(raw.data(), kChipMagic, 8) != 0)
        throw data_error("bad magic in " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    if (detail::get_u32(p + 8) != 1) throw data_error("expected single-band raster: " + path.string());
    Raster r;
    r.height = static_cast<int>(detail::get_u32(p + 12));
    r.width = static_cast<int>(detail::get_u32(p + 16));
    r.class_label = p[20] == 1 ? ChipClass::tomato : ChipClass::non_tomato;
    const std::size_t px = static_cast<std::size_t>(r.height) * r.width;
    if (raw.size() != kChipHeaderBytes + px * 4 + px)
        throw data_error("truncated raster: " + path.string());
    r.values.resize(px);
    r.valid.assign(px, 1);
    r.labels.assign(px, 0);
    const unsigned char* data = p + kChipHeaderBytes;
    for (std::size_t i = 0; i < px; ++i) r.values[i] = detail::get_f32(data + i * 4);
    const unsigned char* mask = data + px * 4;
    for (std::size_t i = 0; i < px; ++i) {
        if (mask[i] == 255) r.valid[i] = 0;
        else if (mask[i] <= 1) r.labels[i] = mask[i];
        else throw data_error("bad mask byte in " + path.string());
    }
    return r;
}

// 8-bit PGM (P5) preview with a stated linear scale from [lo, hi] to [0,255].
inline void write_pgm(const std::vector<double>& values, int h, int w, double lo, double hi,
                      const std::filesystem::path& path) {
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (double v : values) {
        const double scaled = (v - lo) / (hi - lo) * 255.0;
        out.push_back(static_cast<char>(std::clamp(static_cast<int>(std::lround(scaled)), 0, 255)));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("write failed: " + path.string());
}

// Display-only pseudo-RGB rendering: three selected bands mapped linearly
// from [-1,1] to [0,255] into a P6 PPM.
inline void write_pseudo_rgb(const EmbeddingChip& chip, const std::array<int, 3>& bands,
                             const std::filesystem::path& path) {
    for (int b : bands)
        if (b < 0 || b >= kEmbeddingBands) throw data_error("pseudo-rgb: band index out of range");
    const std::size_t px = chip.pixels();
    std::string out =
        "P6\n" + std::to_string(chip.width) + " " + std::to_string(chip.height) + "\n255\n";
    for (std::size_t i = 0; i < px; ++i) {
        for (int b : bands) {
            const double v = (chip.bands[static_cast<std::size_t>(b) * px + i] + 1.0) / 2.0 * 255.0;
            out.push_back(static_cast<char>(std::clamp(static_cast<int>(std::lround(v)), 0, 255)));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("write failed: " + path.string());
}

}  // namespace aeseg
