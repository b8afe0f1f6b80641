#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aeseg/common.hpp"
#include "aeseg/objective.hpp"

namespace aeseg {

struct UNetConfig {
    int in_channels = 64;
    int base_width = 32;
    int depth = 3;            // number of 2x downsamplings
    double dropout_rate = 0.2;
    bool norm_enabled = true;

    void validate() const {
        if (in_channels < 1) throw data_error("unet config: in_channels must be >= 1");
        if (base_width < 1) throw data_error("unet config: base_width must be >= 1");
        if (depth < 1 || depth > 5) throw data_error("unet config: depth must lie in [1,5]");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw data_error("unet config: dropout_rate must lie in [0,1)");
    }
    int width(int level) const { return base_width << level; }
};

enum class ForwardMode { train, eval, mc_dropout };

template <typename T>
struct NamedTensor {
    std::string name;
    std::vector<int> dims;
    std::vector<T> v;
    bool learnable = true;

    std::size_t size() const { return v.size(); }
};

template <typename T>
struct ParameterSet {
    UNetConfig config;
    std::vector<NamedTensor<T>> tensors;
};

template <typename T>
struct FeatureMap {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    void resize(int n_, int c_, int h_, int w_) {
        n = n_;
        c = c_;
        h = h_;
        w = w_;
        v.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    T* at(int ni, int ci) { return v.data() + (static_cast<std::size_t>(ni) * c + ci) * plane(); }
    const T* at(int ni, int ci) const {
        return v.data() + (static_cast<std::size_t>(ni) * c + ci) * plane();
    }
};

namespace detail {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// One conv -> [norm] -> [relu] unit of the architecture, in execution order.
struct ConvSpec {
    std::string name;
    int cin = 0, cout = 0, k = 3;
    bool norm = false;
    bool relu = true;
    int tensor_base = 0;  // index of "<name>.w" in ParameterSet::tensors
};

// Fixed execution-order unit list. Encoder blocks 0..depth (the last one is
// the bottleneck), then per decoder level an upsample conv plus a double
// conv, then the 1x1 head.
inline std::vector<ConvSpec> build_specs(const UNetConfig& cfg) {
    cfg.validate();
    std::vector<ConvSpec> specs;
    int tensor_idx = 0;
    auto add = [&](const std::string& name, int cin, int cout, int k, bool norm, bool relu) {
        ConvSpec s{name, cin, cout, k, norm, relu, tensor_idx};
        tensor_idx += 2 + (norm ? 4 : 0);  // w, b [, gamma, beta, rmean, rvar]
        specs.push_back(std::move(s));
    };
    for (int l = 0; l <= cfg.depth; ++l) {
        const int cin = l == 0 ? cfg.in_channels : cfg.width(l - 1);
        const int wl = cfg.width(l);
        add("enc" + std::to_string(l) + ".conv1", cin, wl, 3, cfg.norm_enabled, true);
        add("enc" + std::to_string(l) + ".conv2", wl, wl, 3, cfg.norm_enabled, true);
    }
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const int wl = cfg.width(l);
        add("dec" + std::to_string(l) + ".up", cfg.width(l + 1), wl, 3, cfg.norm_enabled, true);
        add("dec" + std::to_string(l) + ".conv1", 2 * wl, wl, 3, cfg.norm_enabled, true);
        add("dec" + std::to_string(l) + ".conv2", wl, wl, 3, cfg.norm_enabled, true);
    }
    add("head", cfg.base_width, 1, 1, false, false);
    return specs;
}

// Lane-blocked dot product: a fixed partial-sum layout the compiler can
// vectorize without reassociating a serial reduction, and whose result is
// deterministic for a given n.
template <typename T>
inline T dot_lanes(const T* __restrict__ a, const T* __restrict__ b, int n) {
    constexpr int L = 16;
    T lane[L] = {};
    int c = 0;
    for (; c + L <= n; c += L)
        for (int j = 0; j < L; ++j) lane[j] += a[c + j] * b[c + j];
    for (; c + 4 <= n; c += 4)
        for (int j = 0; j < 4; ++j) lane[j] += a[c + j] * b[c + j];
    T s = T(0);
    for (; c < n; ++c) s += a[c] * b[c];
    for (int j = 0; j < L; ++j) s += lane[j];
    return s;
}

// 3-tap accumulation of one input row into one output row, same padding.
template <typename T>
inline void row_taps(T* __restrict__ orow, const T* __restrict__ irow, T w0, T w1, T w2, int wd) {
    orow[0] += w1 * irow[0] + w2 * irow[1];
    for (int c = 1; c < wd - 1; ++c) orow[c] += w0 * irow[c - 1] + w1 * irow[c] + w2 * irow[c + 1];
    orow[wd - 1] += w0 * irow[wd - 2] + w1 * irow[wd - 1];
}

template <typename T>
void conv_fwd(const FeatureMap<T>& in, const std::vector<T>& w, const std::vector<T>& b, int k,
              FeatureMap<T>& out) {
    const int h = in.h, wd = in.w, cin = in.c, cout = out.c;
    const std::size_t plane = in.plane();
    for (int n = 0; n < in.n; ++n) {
        for (int co = 0; co < cout; ++co) {
            T* __restrict__ op = out.at(n, co);
            std::fill(op, op + plane, b[co]);
            for (int ci = 0; ci < cin; ++ci) {
                const T* __restrict__ ip = in.at(n, ci);
                if (k == 1) {
                    const T wv = w[static_cast<std::size_t>(co) * cin + ci];
                    for (std::size_t i = 0; i < plane; ++i) op[i] += wv * ip[i];
                    continue;
                }
                const T* kw9 = w.data() + (static_cast<std::size_t>(co) * cin + ci) * 9;
                for (int r = 0; r < h; ++r) {
                    T* orow = op + static_cast<std::size_t>(r) * wd;
                    for (int kh = 0; kh < 3; ++kh) {
                        const int rr = r + kh - 1;
                        if (rr < 0 || rr >= h) continue;
                        row_taps(orow, ip + static_cast<std::size_t>(rr) * wd, kw9[kh * 3],
                                 kw9[kh * 3 + 1], kw9[kh * 3 + 2], wd);
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_bwd(const FeatureMap<T>& in, const std::vector<T>& w, int k, const FeatureMap<T>& dout,
              FeatureMap<T>* din, std::vector<T>& dw, std::vector<T>& db) {
    const int h = in.h, wd = in.w, cin = in.c, cout = dout.c;
    const std::size_t plane = in.plane();
    // bias and weight gradients; batch summed in fixed order
    for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int n = 0; n < in.n; ++n) {
            const T* dp = dout.at(n, co);
            for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(dp[i]);
        }
        db[co] += static_cast<T>(acc);
    }
    for (int co = 0; co < cout; ++co) {
        for (int ci = 0; ci < cin; ++ci) {
            if (k == 1) {
                double acc = 0.0;
                for (int n = 0; n < in.n; ++n)
                    acc += static_cast<double>(
                        dot_lanes(dout.at(n, co), in.at(n, ci), static_cast<int>(plane)));
                dw[static_cast<std::size_t>(co) * cin + ci] += static_cast<T>(acc);
                continue;
            }
            double acc[9] = {};
            for (int n = 0; n < in.n; ++n) {
                const T* dp = dout.at(n, co);
                const T* ip = in.at(n, ci);
                for (int kh = 0; kh < 3; ++kh) {
                    T a0 = T(0), a1 = T(0), a2 = T(0);
                    for (int r = 0; r < h; ++r) {
                        const int rr = r + kh - 1;
                        if (rr < 0 || rr >= h) continue;
                        const T* drow = dp + static_cast<std::size_t>(r) * wd;
                        const T* irow = ip + static_cast<std::size_t>(rr) * wd;
                        // dw[kh][kw] pairs dout[r,c] with in[rr, c+kw-1]
                        a0 += dot_lanes(drow + 1, irow, wd - 1);
                        a1 += dot_lanes(drow, irow, wd);
                        a2 += dot_lanes(drow, irow + 1, wd - 1);
                    }
                    acc[kh * 3] += static_cast<double>(a0);
                    acc[kh * 3 + 1] += static_cast<double>(a1);
                    acc[kh * 3 + 2] += static_cast<double>(a2);
                }
            }
            T* dwp = dw.data() + (static_cast<std::size_t>(co) * cin + ci) * 9;
            for (int i = 0; i < 9; ++i) dwp[i] += static_cast<T>(acc[i]);
        }
    }
    if (!din) return;
    din->resize(in.n, cin, h, wd);
    for (int n = 0; n < in.n; ++n) {
        for (int ci = 0; ci < cin; ++ci) {
            T* __restrict__ gp = din->at(n, ci);
            for (int co = 0; co < cout; ++co) {
                const T* __restrict__ dp = dout.at(n, co);
                if (k == 1) {
                    const T wv = w[static_cast<std::size_t>(co) * cin + ci];
                    for (std::size_t i = 0; i < plane; ++i) gp[i] += wv * dp[i];
                    continue;
                }
                const T* kw9 = w.data() + (static_cast<std::size_t>(co) * cin + ci) * 9;
                // din[r,c] += w[kh][kw] * dout[r-kh+1, c-kw+1]: the kernel
                // applies flipped relative to the forward taps
                for (int r = 0; r < h; ++r) {
                    T* grow = gp + static_cast<std::size_t>(r) * wd;
                    for (int kh = 0; kh < 3; ++kh) {
                        const int rr = r - kh + 1;
                        if (rr < 0 || rr >= h) continue;
                        row_taps(grow, dp + static_cast<std::size_t>(rr) * wd, kw9[kh * 3 + 2],
                                 kw9[kh * 3 + 1], kw9[kh * 3], wd);
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
struct UnitCache {
    std::string name;
    FeatureMap<T> in;       // conv input
    FeatureMap<T> out;      // post-activation output (relu mask source)
    FeatureMap<T> xhat;     // normalized pre-affine values (train-mode norm)
    std::vector<double> bn_mean, bn_var, bn_invstd;  // batch statistics
};

template <typename T>
struct Workspace {
    ForwardMode mode = ForwardMode::eval;
    std::vector<UnitCache<T>> units;
    std::vector<std::vector<std::int32_t>> pool_argmax;      // per level
    std::vector<std::vector<std::uint8_t>> dropout_masks;    // per site, n*c keep flags
    std::vector<int> concat_lead;                            // channels of the upsampled half
};

// Canonical U-Net over NCHW maps: encoder double-conv blocks with 2x2 max
// pooling, nearest-neighbor upsampling with a width-halving conv and skip
// concatenation on the way up, and a 1x1 logit head. Spatial dropout sits
// after the two deepest encoder blocks, the bottleneck, and the deepest
// decoder block.
template <typename T>
class UNet {
public:
    explicit UNet(const UNetConfig& cfg) : cfg_(cfg), specs_(detail::build_specs(cfg)) {}

    const UNetConfig& config() const { return cfg_; }

    static std::size_t count_params(const UNetConfig& cfg) {
        std::size_t total = 0;
        for (const auto& s : detail::build_specs(cfg)) {
            total += static_cast<std::size_t>(s.cout) * s.cin * s.k * s.k + s.cout;
            if (s.norm) total += 2 * static_cast<std::size_t>(s.cout);  // gamma, beta
        }
        return total;
    }

    // He-style init: kernels ~ N(0, 2/fan_in), biases 0, norm scale 1/shift 0,
    // running stats (0, 1). Deterministic in the seed.
    ParameterSet<T> init_params(std::uint64_t seed) const {
        ParameterSet<T> params;
        params.config = cfg_;
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (const auto& s : specs_) {
            const double stddev = std::sqrt(2.0 / (static_cast<double>(s.cin) * s.k * s.k));
            NamedTensor<T> w{s.name + ".w", {s.cout, s.cin, s.k, s.k}, {}, true};
            w.v.resize(static_cast<std::size_t>(s.cout) * s.cin * s.k * s.k);
            for (auto& x : w.v) x = static_cast<T>(stddev * gauss(rng));
            params.tensors.push_back(std::move(w));
            params.tensors.push_back({s.name + ".b", {s.cout}, std::vector<T>(s.cout, T(0)), true});
            if (s.norm) {
                params.tensors.push_back(
                    {s.name + ".gamma", {s.cout}, std::vector<T>(s.cout, T(1)), true});
                params.tensors.push_back(
                    {s.name + ".beta", {s.cout}, std::vector<T>(s.cout, T(0)), true});
                params.tensors.push_back(
                    {s.name + ".rmean", {s.cout}, std::vector<T>(s.cout, T(0)), false});
                params.tensors.push_back(
                    {s.name + ".rvar", {s.cout}, std::vector<T>(s.cout, T(1)), false});
            }
        }
        return params;
    }

    // Runs the network on a padded batch. H and W must be divisible by
    // 2^depth. The workspace keeps everything backward() needs.
    FeatureMap<T> forward(const ParameterSet<T>& params, const FeatureMap<T>& input,
                          ForwardMode mode, std::uint64_t rng_seed, Workspace<T>& ws) const {
        check_input(input);
        ws = Workspace<T>{};
        ws.mode = mode;
        std::mt19937_64 drop_rng(rng_seed);

        int unit = 0;
        FeatureMap<T> x = input;
        std::vector<FeatureMap<T>> skips;
        for (int l = 0; l <= cfg_.depth; ++l) {
            if (l > 0) x = maxpool(x, ws);
            x = unit_fwd(params, unit++, std::move(x), ws);
            x = unit_fwd(params, unit++, std::move(x), ws);
            if (is_dropout_level(l) && mode != ForwardMode::eval) apply_dropout(x, drop_rng, ws);
            if (l < cfg_.depth) skips.push_back(x);
        }
        for (int l = cfg_.depth - 1; l >= 0; --l) {
            x = upsample2(x);
            x = unit_fwd(params, unit++, std::move(x), ws);
            ws.concat_lead.push_back(x.c);
            x = concat(x, skips[l]);
            x = unit_fwd(params, unit++, std::move(x), ws);
            x = unit_fwd(params, unit++, std::move(x), ws);
            if (l == cfg_.depth - 1 && cfg_.dropout_rate > 0.0 && mode != ForwardMode::eval)
                apply_dropout(x, drop_rng, ws);
        }
        FeatureMap<T> logits = unit_fwd(params, unit++, std::move(x), ws);
        return logits;
    }

    // Applies the cached train-mode batch statistics to the running averages.
    // Call after a train-mode forward; a no-op otherwise.
    void update_running_stats(ParameterSet<T>& params, const Workspace<T>& ws) const {
        if (ws.mode != ForwardMode::train || !cfg_.norm_enabled) return;
        for (std::size_t u = 0; u < ws.units.size(); ++u) {
            const auto& s = specs_[u];
            if (!s.norm) continue;
            auto& rmean = params.tensors[s.tensor_base + 4].v;
            auto& rvar = params.tensors[s.tensor_base + 5].v;
            for (int c = 0; c < s.cout; ++c) {
                rmean[c] = static_cast<T>((1.0 - detail::kBnMomentum) * rmean[c] +
                                          detail::kBnMomentum * ws.units[u].bn_mean[c]);
                rvar[c] = static_cast<T>((1.0 - detail::kBnMomentum) * rvar[c] +
                                         detail::kBnMomentum * ws.units[u].bn_var[c]);
            }
        }
    }

    // Gradients of a scalar loss with respect to every learnable tensor,
    // given d(loss)/d(logits) and the workspace of a train-mode forward.
    // Returned vector is aligned with ParameterSet::tensors (empty entries
    // for non-learnable tensors).
    std::vector<std::vector<T>> backward(const ParameterSet<T>& params, const Workspace<T>& ws,
                                         const FeatureMap<T>& dlogits) const {
        std::vector<std::vector<T>> grads(params.tensors.size());
        for (std::size_t i = 0; i < params.tensors.size(); ++i)
            if (params.tensors[i].learnable) grads[i].assign(params.tensors[i].size(), T(0));

        int unit = static_cast<int>(specs_.size()) - 1;
        int drop_site = static_cast<int>(ws.dropout_masks.size()) - 1;
        int pool_level = static_cast<int>(ws.pool_argmax.size()) - 1;
        int concat_idx = static_cast<int>(ws.concat_lead.size()) - 1;

        FeatureMap<T> dx = unit_bwd(params, unit--, dlogits, ws, grads);  // head
        std::vector<FeatureMap<T>> dskips(cfg_.depth);
        for (int l = 0; l < cfg_.depth; ++l) {
            if (l == cfg_.depth - 1 && cfg_.dropout_rate > 0.0 && ws.mode != ForwardMode::eval)
                dropout_bwd(dx, ws.dropout_masks[drop_site--]);
            dx = unit_bwd(params, unit--, dx, ws, grads);
            dx = unit_bwd(params, unit--, dx, ws, grads);
            FeatureMap<T> dskip;
            split(dx, ws.concat_lead[concat_idx--], dx, dskip);
            dskips[l] = std::move(dskip);
            dx = unit_bwd(params, unit--, dx, ws, grads);
            dx = upsample2_bwd(dx);
        }
        for (int l = cfg_.depth; l >= 0; --l) {
            if (l < cfg_.depth) {
                // gradient joining: skip branch + downsampled branch
                auto& ds = dskips[l];
                for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += ds.v[i];
            }
            if (is_dropout_level(l) && ws.mode != ForwardMode::eval)
                dropout_bwd(dx, ws.dropout_masks[drop_site--]);
            dx = unit_bwd(params, unit--, dx, ws, grads);
            dx = unit_bwd(params, unit--, dx, ws, grads);
            if (l > 0) dx = maxpool_bwd(dx, ws.pool_argmax[pool_level--]);
        }
        return grads;
    }

    const std::vector<detail::ConvSpec>& specs() const { return specs_; }

private:
    UNetConfig cfg_;
    std::vector<detail::ConvSpec> specs_;

    bool is_dropout_level(int l) const {
        if (cfg_.dropout_rate <= 0.0) return false;
        return l >= cfg_.depth - 2;  // two deepest encoder blocks and the bottleneck
    }

    void check_input(const FeatureMap<T>& input) const {
        if (input.c != cfg_.in_channels) throw data_error("forward: channel count mismatch");
        const int m = 1 << cfg_.depth;
        if (input.h % m != 0 || input.w % m != 0 || input.h == 0 || input.w == 0)
            throw data_error("forward: H and W must be positive multiples of 2^depth");
    }

    FeatureMap<T> unit_fwd(const ParameterSet<T>& params, int unit, FeatureMap<T> x,
                           Workspace<T>& ws) const {
        const auto& s = specs_[unit];
        const auto& w = params.tensors[s.tensor_base].v;
        const auto& b = params.tensors[s.tensor_base + 1].v;
        UnitCache<T> cache;
        cache.name = s.name;
        FeatureMap<T> out;
        out.resize(x.n, s.cout, x.h, x.w);
        detail::conv_fwd(x, w, b, s.k, out);
        cache.in = std::move(x);

        if (s.norm) {
            const auto& gamma = params.tensors[s.tensor_base + 2].v;
            const auto& beta = params.tensors[s.tensor_base + 3].v;
            if (ws.mode == ForwardMode::train) {
                bn_fwd_train(out, gamma, beta, cache);
            } else {
                const auto& rmean = params.tensors[s.tensor_base + 4].v;
                const auto& rvar = params.tensors[s.tensor_base + 5].v;
                bn_fwd_eval(out, gamma, beta, rmean, rvar);
            }
        }
        if (s.relu)
            for (auto& v : out.v)
                if (v < T(0)) v = T(0);
        for (const auto& v : out.v)
            if (!std::isfinite(static_cast<double>(v)))
                throw numeric_error("non-finite activation in layer " + s.name);
        cache.out = out;
        ws.units.push_back(std::move(cache));
        return out;
    }

    FeatureMap<T> unit_bwd(const ParameterSet<T>& params, int unit, const FeatureMap<T>& dout_in,
                           const Workspace<T>& ws, std::vector<std::vector<T>>& grads) const {
        const auto& s = specs_[unit];
        const auto& cache = ws.units[unit];
        FeatureMap<T> dout = dout_in;

        if (s.relu) {
            for (std::size_t i = 0; i < dout.v.size(); ++i)
                if (cache.out.v[i] <= T(0)) dout.v[i] = T(0);
        }
        if (s.norm) {
            if (ws.mode != ForwardMode::train)
                throw numeric_error("backward requires a train-mode workspace");
            bn_bwd(params, s, cache, dout, grads);
        }
        FeatureMap<T> din;
        detail::conv_bwd(cache.in, params.tensors[s.tensor_base].v, s.k, dout, &din,
                         grads[s.tensor_base], grads[s.tensor_base + 1]);
        return din;
    }

    void bn_fwd_train(FeatureMap<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                      UnitCache<T>& cache) const {
        const std::size_t plane = x.plane();
        const double count = static_cast<double>(x.n) * plane;
        cache.bn_mean.assign(x.c, 0.0);
        cache.bn_var.assign(x.c, 0.0);
        cache.bn_invstd.assign(x.c, 0.0);
        cache.xhat.resize(x.n, x.c, x.h, x.w);
        for (int c = 0; c < x.c; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < x.n; ++n) {
                const T* p = x.at(n, c);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double v = static_cast<double>(p[i]);
                    sum += v;
                    sq += v * v;
                }
            }
            const double mean = sum / count;
            const double var = std::max(0.0, sq / count - mean * mean);
            const double invstd = 1.0 / std::sqrt(var + detail::kBnEps);
            cache.bn_mean[c] = mean;
            cache.bn_var[c] = var;
            cache.bn_invstd[c] = invstd;
            const double g = static_cast<double>(gamma[c]);
            const double bt = static_cast<double>(beta[c]);
            for (int n = 0; n < x.n; ++n) {
                T* p = x.at(n, c);
                T* xh = cache.xhat.at(n, c);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double norm = (static_cast<double>(p[i]) - mean) * invstd;
                    xh[i] = static_cast<T>(norm);
                    p[i] = static_cast<T>(g * norm + bt);
                }
            }
        }
    }

    void bn_fwd_eval(FeatureMap<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                     const std::vector<T>& rmean, const std::vector<T>& rvar) const {
        const std::size_t plane = x.plane();
        for (int c = 0; c < x.c; ++c) {
            const double invstd = 1.0 / std::sqrt(static_cast<double>(rvar[c]) + detail::kBnEps);
            const double scale = static_cast<double>(gamma[c]) * invstd;
            const double shift =
                static_cast<double>(beta[c]) - scale * static_cast<double>(rmean[c]);
            for (int n = 0; n < x.n; ++n) {
                T* p = x.at(n, c);
                for (std::size_t i = 0; i < plane; ++i)
                    p[i] = static_cast<T>(scale * static_cast<double>(p[i]) + shift);
            }
        }
    }

    void bn_bwd(const ParameterSet<T>& params, const detail::ConvSpec& s, const UnitCache<T>& cache,
                FeatureMap<T>& dout, std::vector<std::vector<T>>& grads) const {
        const auto& gamma = params.tensors[s.tensor_base + 2].v;
        auto& dgamma = grads[s.tensor_base + 2];
        auto& dbeta = grads[s.tensor_base + 3];
        const std::size_t plane = dout.plane();
        const double count = static_cast<double>(dout.n) * plane;
        for (int c = 0; c < dout.c; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < dout.n; ++n) {
                const T* dy = dout.at(n, c);
                const T* xh = cache.xhat.at(n, c);
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_dy += static_cast<double>(dy[i]);
                    sum_dy_xhat += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
                }
            }
            dgamma[c] += static_cast<T>(sum_dy_xhat);
            dbeta[c] += static_cast<T>(sum_dy);
            const double g = static_cast<double>(gamma[c]);
            const double invstd = cache.bn_invstd[c];
            const double mean_dy = sum_dy / count;
            const double mean_dy_xhat = sum_dy_xhat / count;
            for (int n = 0; n < dout.n; ++n) {
                T* dy = dout.at(n, c);
                const T* xh = cache.xhat.at(n, c);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double dxhat = static_cast<double>(dy[i]) * g;
                    dy[i] = static_cast<T>(
                        invstd * (dxhat - g * mean_dy - static_cast<double>(xh[i]) * g * mean_dy_xhat));
                }
            }
        }
    }

    FeatureMap<T> maxpool(const FeatureMap<T>& x, Workspace<T>& ws) const {
        FeatureMap<T> out;
        out.resize(x.n, x.c, x.h / 2, x.w / 2);
        std::vector<std::int32_t> argmax(out.v.size());
        std::size_t o = 0;
        for (int n = 0; n < x.n; ++n) {
            for (int c = 0; c < x.c; ++c) {
                const T* p = x.at(n, c);
                for (int r = 0; r < out.h; ++r) {
                    for (int cc = 0; cc < out.w; ++cc, ++o) {
                        const int base = 2 * r * x.w + 2 * cc;
                        int best = base;
                        T bv = p[base];
                        const int cand[3] = {base + 1, base + x.w, base + x.w + 1};
                        for (int idx : cand)
                            if (p[idx] > bv) {
                                bv = p[idx];
                                best = idx;
                            }
                        out.v[o] = bv;
                        argmax[o] = best;
                    }
                }
            }
        }
        ws.pool_argmax.push_back(std::move(argmax));
        return out;
    }

    FeatureMap<T> maxpool_bwd(const FeatureMap<T>& dout, const std::vector<std::int32_t>& argmax) const {
        FeatureMap<T> din;
        din.resize(dout.n, dout.c, dout.h * 2, dout.w * 2);
        const std::size_t out_plane = dout.plane();
        const std::size_t in_plane = din.plane();
        std::size_t o = 0;
        for (int n = 0; n < dout.n; ++n)
            for (int c = 0; c < dout.c; ++c) {
                T* gp = din.v.data() + (static_cast<std::size_t>(n) * din.c + c) * in_plane;
                for (std::size_t i = 0; i < out_plane; ++i, ++o) gp[argmax[o]] += dout.v[o];
            }
        return din;
    }

    FeatureMap<T> upsample2(const FeatureMap<T>& x) const {
        FeatureMap<T> out;
        out.resize(x.n, x.c, x.h * 2, x.w * 2);
        for (int n = 0; n < x.n; ++n)
            for (int c = 0; c < x.c; ++c) {
                const T* p = x.at(n, c);
                T* q = out.at(n, c);
                for (int r = 0; r < x.h; ++r)
                    for (int cc = 0; cc < x.w; ++cc) {
                        const T v = p[static_cast<std::size_t>(r) * x.w + cc];
                        T* base = q + static_cast<std::size_t>(2 * r) * out.w + 2 * cc;
                        base[0] = v;
                        base[1] = v;
                        base[out.w] = v;
                        base[out.w + 1] = v;
                    }
            }
        return out;
    }

    FeatureMap<T> upsample2_bwd(const FeatureMap<T>& dout) const {
        FeatureMap<T> din;
        din.resize(dout.n, dout.c, dout.h / 2, dout.w / 2);
        for (int n = 0; n < dout.n; ++n)
            for (int c = 0; c < dout.c; ++c) {
                const T* dp = dout.at(n, c);
                T* gp = din.at(n, c);
                for (int r = 0; r < din.h; ++r)
                    for (int cc = 0; cc < din.w; ++cc) {
                        const T* base = dp + static_cast<std::size_t>(2 * r) * dout.w + 2 * cc;
                        gp[static_cast<std::size_t>(r) * din.w + cc] =
                            base[0] + base[1] + base[dout.w] + base[dout.w + 1];
                    }
            }
        return din;
    }

    static FeatureMap<T> concat(const FeatureMap<T>& a, const FeatureMap<T>& b) {
        FeatureMap<T> out;
        out.resize(a.n, a.c + b.c, a.h, a.w);
        const std::size_t plane = a.plane();
        for (int n = 0; n < a.n; ++n) {
            std::copy_n(a.at(n, 0), static_cast<std::size_t>(a.c) * plane, out.at(n, 0));
            std::copy_n(b.at(n, 0), static_cast<std::size_t>(b.c) * plane, out.at(n, a.c));
        }
        return out;
    }

    static void split(const FeatureMap<T>& d, int lead, FeatureMap<T>& da, FeatureMap<T>& db) {
        FeatureMap<T> a, b;
        a.resize(d.n, lead, d.h, d.w);
        b.resize(d.n, d.c - lead, d.h, d.w);
        const std::size_t plane = d.plane();
        for (int n = 0; n < d.n; ++n) {
            std::copy_n(d.at(n, 0), static_cast<std::size_t>(lead) * plane, a.at(n, 0));
            std::copy_n(d.at(n, lead), static_cast<std::size_t>(d.c - lead) * plane, b.at(n, 0));
        }
        da = std::move(a);
        db = std::move(b);
    }

    // Spatial dropout: whole channels are dropped per sample, survivors
    // scaled by 1/(1-rate) so the mask expectation is the identity.
    void apply_dropout(FeatureMap<T>& x, std::mt19937_64& rng, Workspace<T>& ws) const {
        std::vector<std::uint8_t> keep(static_cast<std::size_t>(x.n) * x.c);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& k : keep) k = u(rng) >= cfg_.dropout_rate ? 1 : 0;
        const T scale = static_cast<T>(1.0 / (1.0 - cfg_.dropout_rate));
        const std::size_t plane = x.plane();
        for (int n = 0; n < x.n; ++n)
            for (int c = 0; c < x.c; ++c) {
                T* p = x.at(n, c);
                if (keep[static_cast<std::size_t>(n) * x.c + c])
                    for (std::size_t i = 0; i < plane; ++i) p[i] *= scale;
                else
                    std::fill(p, p + plane, T(0));
            }
        ws.dropout_masks.push_back(std::move(keep));
    }

    void dropout_bwd(FeatureMap<T>& dx, const std::vector<std::uint8_t>& keep) const {
        const T scale = static_cast<T>(1.0 / (1.0 - cfg_.dropout_rate));
        const std::size_t plane = dx.plane();
        for (int n = 0; n < dx.n; ++n)
            for (int c = 0; c < dx.c; ++c) {
                T* p = dx.at(n, c);
                if (keep[static_cast<std::size_t>(n) * dx.c + c])
                    for (std::size_t i = 0; i < plane; ++i) p[i] *= scale;
                else
                    std::fill(p, p + plane, T(0));
            }
    }
};

// Composite objective on a train-mode forward pass: loss over pooled valid
// pixels plus gradients for every learnable tensor.
template <typename T>
struct BackwardResult {
    LossValue loss;
    std::vector<std::vector<T>> grads;
};

template <typename T>
BackwardResult<T> loss_backward(const UNet<T>& net, const ParameterSet<T>& params,
                                const FeatureMap<T>& input, std::span<const std::uint8_t> labels,
                                std::span<const std::uint8_t> valid, const ObjectiveConfig& obj_cfg,
                                std::uint64_t rng_seed, Workspace<T>* ws_out = nullptr) {
    Workspace<T> ws;
    FeatureMap<T> logits = net.forward(params, input, ForwardMode::train, rng_seed, ws);
    FeatureMap<T> dlogits;
    dlogits.resize(logits.n, 1, logits.h, logits.w);
    BackwardResult<T> res;
    res.loss = loss_and_logit_grad<T>(std::span<const T>(logits.v), labels, valid, obj_cfg,
                                      std::span<T>(dlogits.v));
    res.grads = net.backward(params, ws, dlogits);
    for (const auto& g : res.grads)
        for (const T v : g)
            if (!std::isfinite(static_cast<double>(v))) throw numeric_error("non-finite gradient");
    if (ws_out) *ws_out = std::move(ws);
    return res;
}

// ---- AEUNET1 checkpoint format -------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'A', 'E', 'U', 'N', 'E', 'T', '1', '\0'};

inline void detail_ckpt_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void detail_ckpt_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail_ckpt_u32(out, bits);
}

template <typename T>
void save_checkpoint(const ParameterSet<T>& params, const std::filesystem::path& path) {
    std::string out;
    out.append(kCheckpointMagic, 8);
    detail_ckpt_u32(out, static_cast<std::uint32_t>(params.config.in_channels));
    detail_ckpt_u32(out, static_cast<std::uint32_t>(params.config.base_width));
    detail_ckpt_u32(out, static_cast<std::uint32_t>(params.config.depth));
    detail_ckpt_f32(out, static_cast<float>(params.config.dropout_rate));
    out.push_back(params.config.norm_enabled ? 1 : 0);
    out.append(3, '\0');
    detail_ckpt_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) {
        detail_ckpt_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.append(t.name);
        detail_ckpt_u32(out, static_cast<std::uint32_t>(t.dims.size()));
        for (int d : t.dims) detail_ckpt_u32(out, static_cast<std::uint32_t>(d));
        for (const T v : t.v) detail_ckpt_f32(out, static_cast<float>(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw data_error("write failed: " + path.string());
}

template <typename T>
ParameterSet<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open: " + path.string());
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() < 32 || std::memcmp(raw.data(), kCheckpointMagic, 8) != 0)
        throw data_error("bad magic in checkpoint " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    std::size_t off = 8;
    auto need = [&](std::size_t n) {
        if (off + n > raw.size()) throw data_error("truncated checkpoint " + path.string());
    };
    auto u32 = [&]() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(p[off]) | (p[off + 1] << 8) |
                          (p[off + 2] << 16) | (static_cast<std::uint32_t>(p[off + 3]) << 24);
        off += 4;
        return v;
    };
    auto f32 = [&]() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    };
    ParameterSet<T> params;
    params.config.in_channels = static_cast<int>(u32());
    params.config.base_width = static_cast<int>(u32());
    params.config.depth = static_cast<int>(u32());
    params.config.dropout_rate = f32();
    need(4);
    params.config.norm_enabled = p[off] != 0;
    off += 4;
    params.config.validate();
    const std::uint32_t count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor<T> t;
        const std::uint32_t name_len = u32();
        need(name_len);
        t.name.assign(raw.data() + off, name_len);
        off += name_len;
        const std::uint32_t rank = u32();
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.dims.push_back(static_cast<int>(u32()));
            total *= static_cast<std::size_t>(t.dims.back());
        }
        t.v.resize(total);
        for (auto& v : t.v) v = static_cast<T>(f32());
        t.learnable = t.name.find(".rmean") == std::string::npos &&
                      t.name.find(".rvar") == std::string::npos;
        params.tensors.push_back(std::move(t));
    }
    // shape audit against the architecture implied by the config
    UNet<T> net(params.config);
    ParameterSet<T> ref = net.init_params(0);
    if (ref.tensors.size() != params.tensors.size())
        throw data_error("checkpoint tensor list disagrees with config: " + path.string());
    for (std::size_t i = 0; i < ref.tensors.size(); ++i)
        if (ref.tensors[i].name != params.tensors[i].name ||
            ref.tensors[i].dims != params.tensors[i].dims)
            throw data_error("checkpoint tensor " + params.tensors[i].name +
                             " disagrees with config: " + path.string());
    return params;
}

}  // namespace aeseg
