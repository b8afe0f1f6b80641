#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aeseg/common.hpp"

namespace aeseg {

inline constexpr int kEmbeddingBands = 64;

enum class ChipClass : std::uint8_t { non_tomato = 0, tomato = 1 };

enum class Split : std::uint8_t { train = 0, val = 1, test = 2, unassigned = 3 };

inline const char* to_string(ChipClass c) {
    return c == ChipClass::tomato ? "tomato" : "non_tomato";
}

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        default: return "unassigned";
    }
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw data_error("unknown split name: " + s);
}

inline ChipClass class_from_string(const std::string& s) {
    if (s == "tomato") return ChipClass::tomato;
    if (s == "non_tomato") return ChipClass::non_tomato;
    throw data_error("unknown class name: " + s);
}

// 64xHxW embedding chip. bands is band-major (band, row, col); valid marks
// pixels that carry data. Invalid pixels hold band value exactly 0.
struct EmbeddingChip {
    int height = 0;
    int width = 0;
    std::vector<float> bands;         // kEmbeddingBands * H * W
    std::vector<std::uint8_t> valid;  // H * W, 0 or 1
    std::string chip_id;
    ChipClass class_label = ChipClass::non_tomato;
    double centroid_x = 0.0;
    double centroid_y = 0.0;

    float band(int b, int r, int c) const {
        return bands[(static_cast<std::size_t>(b) * height + r) * width + c];
    }
    bool is_valid(int r, int c) const { return valid[static_cast<std::size_t>(r) * width + c] != 0; }
    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

// Per-pixel binary labels over the chip's valid pixels.
struct LabelMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;  // H * W, meaningful where valid

    std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
};

struct ManifestEntry {
    std::string chip_id;
    std::string relative_path;
    ChipClass class_label = ChipClass::non_tomato;
    double centroid_x = 0.0;
    double centroid_y = 0.0;
    Split split = Split::unassigned;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t generator_seed = 0;
    int format_version = 1;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline float get_f32(const unsigned char* p) {
    std::uint32_t bits = get_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline constexpr char kChipMagic[8] = {'A', 'E', 'C', 'H', 'I', 'P', '1', '\0'};
inline constexpr std::size_t kChipHeaderBytes = 24;

inline void validate_chip(const EmbeddingChip& chip, const LabelMask& labels) {
    if (chip.height < 8 || chip.width < 8)
        throw data_error("chip " + chip.chip_id + ": dimensions must be at least 8x8");
    const std::size_t px = chip.pixels();
    if (chip.bands.size() != px * kEmbeddingBands || chip.valid.size() != px)
        throw data_error("chip " + chip.chip_id + ": buffer sizes inconsistent with dimensions");
    if (labels.height != chip.height || labels.width != chip.width || labels.labels.size() != px)
        throw data_error("chip " + chip.chip_id + ": label mask dimension mismatch");
    for (int b = 0; b < kEmbeddingBands; ++b) {
        for (std::size_t i = 0; i < px; ++i) {
            const float v = chip.bands[static_cast<std::size_t>(b) * px + i];
            if (chip.valid[i]) {
                if (!(v >= -1.0f && v <= 1.0f))
                    throw data_error("chip " + chip.chip_id + ": valid pixel band value outside [-1,1]");
            } else if (v != 0.0f) {
                throw data_error("chip " + chip.chip_id + ": invalid pixel carries nonzero band value");
            }
        }
    }
    for (std::size_t i = 0; i < px; ++i)
        if (chip.valid[i] && labels.labels[i] > 1)
            throw data_error("chip " + chip.chip_id + ": label not in {0,1} at a valid pixel");
}

// AECHIP1 container. Little-endian: 8-byte magic, u32 C/H/W, u8 class label,
// 3 pad bytes, C*H*W binary32 band values (band-major, rows within band),
// then H*W mask bytes (0 valid non-tomato, 1 valid tomato, 255 invalid).
inline std::size_t write_chip(const EmbeddingChip& chip, const LabelMask& labels,
                              const std::filesystem::path& destination) {
    validate_chip(chip, labels);
    const std::size_t px = chip.pixels();
    std::string out;
    out.reserve(kChipHeaderBytes + chip.bands.size() * 4 + px);
    out.append(kChipMagic, 8);
    detail::put_u32(out, kEmbeddingBands);
    detail::put_u32(out, static_cast<std::uint32_t>(chip.height));
    detail::put_u32(out, static_cast<std::uint32_t>(chip.width));
    out.push_back(static_cast<char>(chip.class_label));
    out.append(3, '\0');
    for (float v : chip.bands) detail::put_f32(out, v);
    for (std::size_t i = 0; i < px; ++i)
        out.push_back(chip.valid[i] ? static_cast<char>(labels.labels[i]) : static_cast<char>(255));

    std::ofstream f(destination, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + destination.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("write failed: " + destination.string());
    return out.size();
}

// Reads an AECHIP1 file. NaN band values become invalid pixels with band 0.
inline std::pair<EmbeddingChip, LabelMask> read_chip(const std::filesystem::path& source) {
    std::ifstream f(source, std::ios::binary);
    if (!f) throw data_error("cannot open: " + source.string());
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (raw.size() < kChipHeaderBytes || std::memcmp(raw.data(), kChipMagic, 8) != 0)
        throw data_error("bad magic in " + source.string());
    auto p = reinterpret_cast<const unsigned char*>(raw.data());
    const std::uint32_t c = detail::get_u32(p + 8);
    const std::uint32_t h = detail::get_u32(p + 12);
    const std::uint32_t w = detail::get_u32(p + 16);
    if (c != kEmbeddingBands)
        throw data_error("unsupported channel count in " + source.string());
    if (h < 8 || w < 8 || h > (1u << 20) || w > (1u << 20))
        throw data_error("implausible dimensions in " + source.string());
    const std::size_t px = static_cast<std::size_t>(h) * w;
    const std::size_t expect = kChipHeaderBytes + px * c * 4 + px;
    if (raw.size() != expect)
        throw data_error("truncated or oversized payload in " + source.string());

    EmbeddingChip chip;
    chip.height = static_cast<int>(h);
    chip.width = static_cast<int>(w);
    chip.class_label = p[20] == 1 ? ChipClass::tomato : ChipClass::non_tomato;
    chip.chip_id = source.stem().string();
    chip.bands.resize(px * c);
    chip.valid.assign(px, 1);
    LabelMask labels;
    labels.height = chip.height;
    labels.width = chip.width;
    labels.labels.assign(px, 0);

    const unsigned char* data = p + kChipHeaderBytes;
    for (std::size_t i = 0; i < px * c; ++i) chip.bands[i] = detail::get_f32(data + i * 4);
    const unsigned char* mask = data + px * c * 4;
    for (std::size_t i = 0; i < px; ++i) {
        if (mask[i] == 255) chip.valid[i] = 0;
        else if (mask[i] <= 1) labels.labels[i] = mask[i];
        else throw data_error("bad mask byte in " + source.string());
    }
    // NaN/NoData policy: a NaN anywhere in a pixel's band vector invalidates
    // the pixel; all its bands are zero-filled for network input.
    for (std::size_t i = 0; i < px; ++i) {
        bool has_nan = false;
        for (std::uint32_t b = 0; b < c && !has_nan; ++b)
            has_nan = std::isnan(chip.bands[static_cast<std::size_t>(b) * px + i]);
        if (has_nan) chip.valid[i] = 0;
        if (!chip.valid[i])
            for (std::uint32_t b = 0; b < c; ++b) chip.bands[static_cast<std::size_t>(b) * px + i] = 0.0f;
    }
    validate_chip(chip, labels);
    return {std::move(chip), std::move(labels)};
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f << "AEMANIFEST\t" << m.format_version << "\n";
    char buf[64];
    for (const auto& e : m.entries) {
        f << e.chip_id << '\t' << e.relative_path << '\t' << to_string(e.class_label) << '\t';
        std::snprintf(buf, sizeof buf, "%.6f\t%.6f", e.centroid_x, e.centroid_y);
        f << buf << '\t' << to_string(e.split) << '\n';
    }
    if (!f) throw data_error("write failed: " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open: " + path.string());
    std::string line;
    if (!std::getline(f, line) || line.rfind("AEMANIFEST\t", 0) != 0)
        throw data_error("not an AEMANIFEST file: " + path.string());
    DatasetManifest m;
    m.format_version = std::stoi(line.substr(11));
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string id, rel, cls, xs, ys, sp;
        if (!std::getline(ss, id, '\t') || !std::getline(ss, rel, '\t') ||
            !std::getline(ss, cls, '\t') || !std::getline(ss, xs, '\t') ||
            !std::getline(ss, ys, '\t') || !std::getline(ss, sp, '\t'))
            throw data_error("malformed manifest record: " + line);
        ManifestEntry e;
        e.chip_id = id;
        e.relative_path = rel;
        e.class_label = class_from_string(cls);
        e.centroid_x = std::stod(xs);
        e.centroid_y = std::stod(ys);
        e.split = split_from_string(sp);
        m.entries.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        for (std::size_t j = i + 1; j < m.entries.size(); ++j)
            if (m.entries[i].chip_id == m.entries[j].chip_id)
                throw data_error("duplicate chip_id in manifest: " + m.entries[i].chip_id);
    return m;
}

struct SplitRatios {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

inline std::pair<std::int64_t, std::int64_t> block_index(double x, double y, double block_size) {
    return {static_cast<std::int64_t>(std::floor(x / block_size)),
            static_cast<std::int64_t>(std::floor(y / block_size))};
}

// Groups chips into square spatial blocks by centroid and assigns whole
// blocks to splits. Blocks are visited in seeded shuffle order; each goes to
// the split with the largest remaining deficit against its target count.
inline DatasetManifest spatial_split(const DatasetManifest& manifest, SplitRatios ratios,
                                     double block_size, std::uint64_t seed) {
    if (manifest.entries.empty()) throw data_error("spatial_split: empty manifest");
    if (block_size <= 0.0) throw data_error("spatial_split: block_size must be positive");
    const double sum = ratios.train + ratios.val + ratios.test;
    if (std::abs(sum - 1.0) > 1e-9) throw data_error("spatial_split: ratios must sum to 1");

    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> blocks;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        blocks[block_index(e.centroid_x, e.centroid_y, block_size)].push_back(i);
    }
    if (blocks.size() < 3)
        throw data_error("spatial_split: fewer than 3 blocks; shrink block_size");

    std::vector<std::vector<std::size_t>> order;
    order.reserve(blocks.size());
    for (auto& [key, members] : blocks) order.push_back(members);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const double total = static_cast<double>(manifest.entries.size());
    const double target[3] = {ratios.train * total, ratios.val * total, ratios.test * total};
    double assigned[3] = {0.0, 0.0, 0.0};
    DatasetManifest out = manifest;
    for (const auto& members : order) {
        int best = 0;
        double best_deficit = target[0] - assigned[0];
        for (int s = 1; s < 3; ++s) {
            const double d = target[s] - assigned[s];
            if (d > best_deficit) {
                best_deficit = d;
                best = s;
            }
        }
        for (std::size_t idx : members) out.entries[idx].split = static_cast<Split>(best);
        assigned[best] += static_cast<double>(members.size());
    }
    return out;
}

// Rounds n up to a multiple of 2^depth (at least 2^depth). Chips are padded
// with invalid zero pixels to this size before entering the network.
inline int padded_dim(int n, int depth) {
    const int m = 1 << depth;
    return ((n + m - 1) / m) * m;
}

inline void pad_chip(const EmbeddingChip& chip, const LabelMask& labels, int out_h, int out_w,
                     EmbeddingChip& padded, LabelMask& padded_labels) {
    if (out_h < chip.height || out_w < chip.width)
        throw data_error("pad_chip: target smaller than source");
    padded = chip;
    padded.height = out_h;
    padded.width = out_w;
    const std::size_t opx = static_cast<std::size_t>(out_h) * out_w;
    padded.bands.assign(opx * kEmbeddingBands, 0.0f);
    padded.valid.assign(opx, 0);
    padded_labels.height = out_h;
    padded_labels.width = out_w;
    padded_labels.labels.assign(opx, 0);
    const std::size_t ipx = chip.pixels();
    for (int b = 0; b < kEmbeddingBands; ++b)
        for (int r = 0; r < chip.height; ++r)
            std::copy_n(chip.bands.begin() + (static_cast<std::size_t>(b) * ipx) +
                            static_cast<std::size_t>(r) * chip.width,
                        chip.width,
                        padded.bands.begin() + (static_cast<std::size_t>(b) * opx) +
                            static_cast<std::size_t>(r) * out_w);
    for (int r = 0; r < chip.height; ++r) {
        std::copy_n(chip.valid.begin() + static_cast<std::size_t>(r) * chip.width, chip.width,
                    padded.valid.begin() + static_cast<std::size_t>(r) * out_w);
        std::copy_n(labels.labels.begin() + static_cast<std::size_t>(r) * chip.width, chip.width,
                    padded_labels.labels.begin() + static_cast<std::size_t>(r) * out_w);
    }
}

}  // namespace aeseg
