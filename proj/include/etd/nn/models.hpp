#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "etd/audio.hpp"
#include "etd/nn/tensor.hpp"

namespace etd::nn {

class NnError : public Error {
public:
    using Error::Error;
};

enum class ArchKind : uint8_t { Light = 0, Heavy = 1 };

// Log-mel features are shifted so that the silence floor ln(1e-10) maps to
// exactly 0, then scaled into a unit range. Padding frames are therefore
// all-zero vectors.
inline constexpr double kFeatureShift = 23.025850929940457;  // -ln(1e-10)
inline constexpr double kFeatureScale = 0.1;

template <class T>
inline void normalize_features(const FeatureSequence& f, std::vector<T>& out) {
    out.resize(f.data.size());
    for (size_t i = 0; i < f.data.size(); ++i)
        out[i] = static_cast<T>((f.data[i] + kFeatureShift) * kFeatureScale);
}

// ---------------------------------------------------------------------------
// GRU cell
//   z = sigmoid(Wz x + Uz h + bz)
//   r = sigmoid(Wr x + Ur h + br)
//   n = tanh(Wn x + r * (Un h) + bn)
//   h' = (1 - z) * n + z * h
// Gates are fused row-wise into W_ih [3H x D] and W_hh [3H x H], order z|r|n.
// ---------------------------------------------------------------------------

template <class T>
struct GruParams {
    int input_dim = 0;
    int hidden = 0;
    Mat<T> w_ih;
    Mat<T> w_hh;
    Vec<T> bias;

    void resize(int d, int h) {
        input_dim = d;
        hidden = h;
        w_ih = Mat<T>(3 * h, d);
        w_hh = Mat<T>(3 * h, h);
        bias.assign(3 * h, T(0));
    }
    void init_weights(Rng& rng) {
        xavier_fill(w_ih, input_dim, hidden, rng);
        xavier_fill(w_hh, hidden, hidden, rng);
    }
    template <class F>
    void visit(const std::string& prefix, F& f) {
        f(prefix + ".w_ih", w_ih);
        f(prefix + ".w_hh", w_hh);
        f(prefix + ".bias", bias);
    }
};

template <class T>
struct GruStepCache {
    Vec<T> h_prev, z, r, n, u;  // u is the n-slice of W_hh h_prev
};

template <class T>
struct GruWork {
    Vec<T> gx, gh, da;
    void resize(int hidden) {
        gx.assign(3 * hidden, T(0));
        gh.assign(3 * hidden, T(0));
        da.assign(3 * hidden, T(0));
    }
};

template <class T>
inline void gru_step(const GruParams<T>& p, const T* x, Vec<T>& h, GruWork<T>& wk,
                     GruStepCache<T>* cache = nullptr) {
    const int H = p.hidden;
    matvec(wk.gx.data(), p.w_ih, x);
    matvec(wk.gh.data(), p.w_hh, h.data());
    if (cache) {
        cache->h_prev = h;
        cache->z.resize(H);
        cache->r.resize(H);
        cache->n.resize(H);
        cache->u.assign(wk.gh.begin() + 2 * H, wk.gh.begin() + 3 * H);
    }
    for (int i = 0; i < H; ++i) {
        const T z = sigmoid(wk.gx[i] + wk.gh[i] + p.bias[i]);
        const T r = sigmoid(wk.gx[H + i] + wk.gh[H + i] + p.bias[H + i]);
        const T n = std::tanh(wk.gx[2 * H + i] + r * wk.gh[2 * H + i] + p.bias[2 * H + i]);
        const T h_new = (T(1) - z) * n + z * h[i];
        if (cache) {
            cache->z[i] = z;
            cache->r[i] = r;
            cache->n[i] = n;
        }
        h[i] = h_new;
    }
}

/// One BPTT step. dh is dL/dh_t; dx_acc accumulates dL/dx_t; dh_prev is
/// overwritten with dL/dh_{t-1}; grads accumulate.
template <class T>
inline void gru_step_backward(const GruParams<T>& p, const GruStepCache<T>& c,
                              const T* x, const T* dh, T* dx_acc, T* dh_prev,
                              GruParams<T>& grads, GruWork<T>& wk) {
    const int H = p.hidden;
    // wk.da = [da_z | da_r | da_n] (input-side); gate order z|r|n.
    for (int i = 0; i < H; ++i) {
        const T z = c.z[i], r = c.r[i], n = c.n[i];
        const T dn = dh[i] * (T(1) - z);
        const T dz = dh[i] * (c.h_prev[i] - n);
        const T da_n = dn * (T(1) - n * n);
        const T da_r = da_n * c.u[i] * r * (T(1) - r);
        const T da_z = dz * z * (T(1) - z);
        wk.da[i] = da_z;
        wk.da[H + i] = da_r;
        wk.da[2 * H + i] = da_n;
    }
    outer_acc(grads.w_ih, wk.da.data(), x);
    add_inplace(grads.bias.data(), wk.da.data(), 3 * H);
    if (dx_acc) matvec_transposed_acc(dx_acc, p.w_ih, wk.da.data());

    // Hidden-side gradient uses da_n * r for the n gate (r gates U h).
    for (int i = 0; i < H; ++i) wk.gh[i] = wk.da[i];
    for (int i = 0; i < H; ++i) wk.gh[H + i] = wk.da[H + i];
    for (int i = 0; i < H; ++i) wk.gh[2 * H + i] = wk.da[2 * H + i] * c.r[i];
    outer_acc(grads.w_hh, wk.gh.data(), c.h_prev.data());
    for (int i = 0; i < H; ++i) dh_prev[i] = dh[i] * c.z[i];
    matvec_transposed_acc(dh_prev, p.w_hh, wk.gh.data());
}

// ---------------------------------------------------------------------------
// Conv2D, NCHW single image, weights [out_c x in_c*kh*kw]
// ---------------------------------------------------------------------------

template <class T>
struct Conv2dParams {
    int in_c = 1, out_c = 1, kh = 3, kw = 3, sy = 1, sx = 1, py = 1, px = 1;
    Mat<T> w;
    Vec<T> b;

    void resize(int ic, int oc, int k, int stride_y, int stride_x, int pad) {
        in_c = ic;
        out_c = oc;
        kh = kw = k;
        sy = stride_y;
        sx = stride_x;
        py = px = pad;
        w = Mat<T>(oc, ic * k * k);
        b.assign(oc, T(0));
    }
    void init_weights(Rng& rng) { xavier_fill(w, in_c * kh * kw, out_c * kh * kw, rng); }
    int out_h(int in_h) const { return (in_h + 2 * py - kh) / sy + 1; }
    int out_w(int in_w) const { return (in_w + 2 * px - kw) / sx + 1; }
    template <class F>
    void visit(const std::string& prefix, F& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
    }
};

template <class T>
inline void conv2d_forward(const Conv2dParams<T>& p, const T* x, int in_h, int in_w,
                           T* y) {
    const int oh = p.out_h(in_h), ow = p.out_w(in_w);
    for (int oc = 0; oc < p.out_c; ++oc) {
        const T* wrow = p.w.row(oc);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = p.b[oc];
                for (int ic = 0; ic < p.in_c; ++ic) {
                    for (int ky = 0; ky < p.kh; ++ky) {
                        const int iy = oy * p.sy - p.py + ky;
                        if (iy < 0 || iy >= in_h) continue;
                        for (int kx = 0; kx < p.kw; ++kx) {
                            const int ix = ox * p.sx - p.px + kx;
                            if (ix < 0 || ix >= in_w) continue;
                            acc += wrow[(ic * p.kh + ky) * p.kw + kx] *
                                   x[(ic * in_h + iy) * in_w + ix];
                        }
                    }
                }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// dx may be null when input gradients are not needed (first layer).
template <class T>
inline void conv2d_backward(const Conv2dParams<T>& p, const T* x, int in_h, int in_w,
                            const T* dy, T* dx, Conv2dParams<T>& grads) {
    const int oh = p.out_h(in_h), ow = p.out_w(in_w);
    for (int oc = 0; oc < p.out_c; ++oc) {
        T* dwrow = grads.w.row(oc);
        const T* wrow = p.w.row(oc);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const T g = dy[(oc * oh + oy) * ow + ox];
                if (g == T(0)) continue;
                grads.b[oc] += g;
                for (int ic = 0; ic < p.in_c; ++ic) {
                    for (int ky = 0; ky < p.kh; ++ky) {
                        const int iy = oy * p.sy - p.py + ky;
                        if (iy < 0 || iy >= in_h) continue;
                        for (int kx = 0; kx < p.kw; ++kx) {
                            const int ix = ox * p.sx - p.px + kx;
                            if (ix < 0 || ix >= in_w) continue;
                            const int widx = (ic * p.kh + ky) * p.kw + kx;
                            const int xidx = (ic * in_h + iy) * in_w + ix;
                            dwrow[widx] += g * x[xidx];
                            if (dx) dx[xidx] += g * wrow[widx];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Light edge model: conv 1->8 (3x3, s1, p1), conv 8->16 (3x3, s2, p1),
// flatten, GRU(hidden 128), linear->logistic. One decision per 100 ms step,
// consuming that step's 10 feature frames as a 10 x n_mels image.
// ---------------------------------------------------------------------------

struct LightArch {
    int n_mels = 40;
    int conv1_channels = 8;
    int conv2_channels = 16;
    int gru_hidden = 128;
    static constexpr int kFramesPerStep = 10;

    int conv1_out_elems() const { return conv1_channels * kFramesPerStep * n_mels; }
    int conv2_out_h() const { return (kFramesPerStep + 2 - 3) / 2 + 1; }
    int conv2_out_w() const { return (n_mels + 2 - 3) / 2 + 1; }
    int gru_input_dim() const { return conv2_channels * conv2_out_h() * conv2_out_w(); }
};

template <class T>
struct LightParams {
    using Scalar = T;
    LightArch arch;
    Conv2dParams<T> conv1, conv2;
    GruParams<T> gru;
    Vec<T> out_w;
    Vec<T> out_b;

    static LightParams make(const LightArch& a, uint64_t seed) {
        LightParams p;
        p.arch = a;
        p.conv1.resize(1, a.conv1_channels, 3, 1, 1, 1);
        p.conv2.resize(a.conv1_channels, a.conv2_channels, 3, 2, 2, 1);
        p.gru.resize(a.gru_input_dim(), a.gru_hidden);
        p.out_w.assign(a.gru_hidden, T(0));
        p.out_b.assign(1, T(0));
        Rng rng(derive_stream(seed, 0x6c69676874ULL));
        p.conv1.init_weights(rng);
        p.conv2.init_weights(rng);
        p.gru.init_weights(rng);
        {
            const double bound = std::sqrt(6.0 / (a.gru_hidden + 1));
            for (auto& v : p.out_w) v = static_cast<T>(rng.uniform(-bound, bound));
        }
        return p;
    }

    /// Zero-valued clone with identical shapes, for gradients/optimizer state.
    LightParams zeros_like() const {
        LightParams p = *this;
        p.conv1.w.zero();
        std::fill(p.conv1.b.begin(), p.conv1.b.end(), T(0));
        p.conv2.w.zero();
        std::fill(p.conv2.b.begin(), p.conv2.b.end(), T(0));
        p.gru.w_ih.zero();
        p.gru.w_hh.zero();
        std::fill(p.gru.bias.begin(), p.gru.bias.end(), T(0));
        std::fill(p.out_w.begin(), p.out_w.end(), T(0));
        std::fill(p.out_b.begin(), p.out_b.end(), T(0));
        return p;
    }

    template <class F>
    void visit(F& f) {
        conv1.visit("conv1", f);
        conv2.visit("conv2", f);
        gru.visit("gru", f);
        f("out.w", out_w);
        f("out.b", out_b);
    }
};

template <class T>
struct LightStepCache {
    Vec<T> x;          // 10 x n_mels normalized block
    Vec<T> conv1_out;  // c1 x 10 x n_mels
    Vec<T> conv2_out;  // GRU input
    GruStepCache<T> gru;
    Vec<T> h;  // hidden after the step
    T prob = T(0);
};

/// Streaming runner: owns the hidden state, processes one 100 ms block at a
/// time. Strictly causal by construction.
template <class T>
class LightRunner {
public:
    explicit LightRunner(const LightParams<T>& p)
        : p_(p),
          h_(p.arch.gru_hidden, T(0)),
          conv1_buf_(p.arch.conv1_out_elems(), T(0)),
          conv2_buf_(p.arch.gru_input_dim(), T(0)) {
        wk_.resize(p.arch.gru_hidden);
    }

    void reset() { std::fill(h_.begin(), h_.end(), T(0)); }

    /// block points at kFramesPerStep * n_mels normalized features.
    T step(const T* block, LightStepCache<T>* cache = nullptr) {
        const LightArch& a = p_.arch;
        conv2d_forward(p_.conv1, block, LightArch::kFramesPerStep, a.n_mels,
                       conv1_buf_.data());
        conv2d_forward(p_.conv2, conv1_buf_.data(), LightArch::kFramesPerStep,
                       a.n_mels, conv2_buf_.data());
        if (cache) {
            cache->x.assign(block, block + LightArch::kFramesPerStep * a.n_mels);
            cache->conv1_out = conv1_buf_;
            cache->conv2_out = conv2_buf_;
        }
        gru_step(p_.gru, conv2_buf_.data(), h_, wk_, cache ? &cache->gru : nullptr);
        const T logit = dot(p_.out_w.data(), h_.data(), a.gru_hidden) + p_.out_b[0];
        const T prob = sigmoid(logit);
        if (cache) {
            cache->h = h_;
            cache->prob = prob;
        }
        return prob;
    }

    const Vec<T>& hidden() const { return h_; }

private:
    const LightParams<T>& p_;
    Vec<T> h_;
    Vec<T> conv1_buf_, conv2_buf_;
    GruWork<T> wk_;
};

/// One SU probability per full 100 ms step; floor(T/10) outputs.
template <class T>
inline std::vector<T> light_forward(const FeatureSequence& features,
                                    const LightParams<T>& params) {
    if (features.n_mels != params.arch.n_mels)
        throw NnError("feature dimension mismatch: " + std::to_string(features.n_mels));
    std::vector<T> norm;
    normalize_features(features, norm);
    const int n_steps = features.n_frames / LightArch::kFramesPerStep;
    LightRunner<T> runner(params);
    std::vector<T> probs;
    probs.reserve(n_steps);
    for (int i = 0; i < n_steps; ++i) {
        const T* block =
            norm.data() + static_cast<size_t>(i) * LightArch::kFramesPerStep *
                              params.arch.n_mels;
        probs.push_back(runner.step(block));
    }
    return probs;
}

// ---------------------------------------------------------------------------
// Heavy server model: two stacked bidirectional GRU layers (hidden per
// direction), temporal mean-pool over the concatenated layer outputs,
// linear -> softmax over {Pause, Gap}. Consumes a trailing context window of
// feature frames, left-padded with silence-floor frames when short.
// ---------------------------------------------------------------------------

struct HeavyArch {
    int n_mels = 40;
    int context_frames = 300;  // 3.0 s at 10 ms hop
    int hidden = 256;

    int layer1_out_dim() const { return 2 * hidden; }
    int layer2_out_dim() const { return 2 * hidden; }
    int pooled_dim() const { return layer1_out_dim() + layer2_out_dim(); }
};

inline constexpr int kPauseIndex = 0;
inline constexpr int kGapIndex = 1;

template <class T>
struct HeavyParams {
    using Scalar = T;
    HeavyArch arch;
    GruParams<T> l1_fwd, l1_bwd, l2_fwd, l2_bwd;
    Mat<T> head_w;  // [2 x pooled_dim]
    Vec<T> head_b;

    static HeavyParams make(const HeavyArch& a, uint64_t seed) {
        HeavyParams p;
        p.arch = a;
        p.l1_fwd.resize(a.n_mels, a.hidden);
        p.l1_bwd.resize(a.n_mels, a.hidden);
        p.l2_fwd.resize(a.layer1_out_dim(), a.hidden);
        p.l2_bwd.resize(a.layer1_out_dim(), a.hidden);
        p.head_w = Mat<T>(2, a.pooled_dim());
        p.head_b.assign(2, T(0));
        Rng rng(derive_stream(seed, 0x6865617679ULL));
        p.l1_fwd.init_weights(rng);
        p.l1_bwd.init_weights(rng);
        p.l2_fwd.init_weights(rng);
        p.l2_bwd.init_weights(rng);
        xavier_fill(p.head_w, a.pooled_dim(), 2, rng);
        return p;
    }

    HeavyParams zeros_like() const {
        HeavyParams p = *this;
        auto zero_gru = [](GruParams<T>& g) {
            g.w_ih.zero();
            g.w_hh.zero();
            std::fill(g.bias.begin(), g.bias.end(), T(0));
        };
        zero_gru(p.l1_fwd);
        zero_gru(p.l1_bwd);
        zero_gru(p.l2_fwd);
        zero_gru(p.l2_bwd);
        p.head_w.zero();
        std::fill(p.head_b.begin(), p.head_b.end(), T(0));
        return p;
    }

    template <class F>
    void visit(F& f) {
        l1_fwd.visit("l1_fwd", f);
        l1_bwd.visit("l1_bwd", f);
        l2_fwd.visit("l2_fwd", f);
        l2_bwd.visit("l2_bwd", f);
        f("head.w", head_w);
        f("head.b", head_b);
    }
};

template <class T>
struct HeavyCache {
    Mat<T> input;  // context_frames x n_mels, normalized
    std::vector<GruStepCache<T>> c1f, c1b, c2f, c2b;
    Mat<T> h1f, h1b, h2f, h2b;  // per-step hidden states
    Mat<T> out1;                // context_frames x 2H
    Vec<T> pooled;
    std::array<T, 2> probs{};
};

/// Builds the normalized context window: last `context_frames` rows of the
/// sequence, left-padded with zeros (the silence floor).
template <class T>
inline Mat<T> heavy_window(const FeatureSequence& f, const HeavyArch& a) {
    if (f.n_frames <= 0) throw NnError("empty feature window");
    if (f.n_mels != a.n_mels)
        throw NnError("feature dimension mismatch: " + std::to_string(f.n_mels));
    Mat<T> win(a.context_frames, a.n_mels);
    const int take = std::min(f.n_frames, a.context_frames);
    const int offset = a.context_frames - take;
    const int skip = f.n_frames - take;
    for (int t = 0; t < take; ++t) {
        const double* src = f.frame(skip + t);
        T* dst = win.row(offset + t);
        for (int m = 0; m < a.n_mels; ++m)
            dst[m] = static_cast<T>((src[m] + kFeatureShift) * kFeatureScale);
    }
    return win;
}

template <class T>
inline void bigru_layer(const GruParams<T>& fwd, const GruParams<T>& bwd,
                        const Mat<T>& input, Mat<T>& out,
                        std::vector<GruStepCache<T>>* cf,
                        std::vector<GruStepCache<T>>* cb) {
    const int steps = input.rows;
    const int H = fwd.hidden;
    GruWork<T> wk;
    wk.resize(H);
    Vec<T> h(H, T(0));
    for (int t = 0; t < steps; ++t) {
        gru_step(fwd, input.row(t), h, wk, cf ? &(*cf)[t] : nullptr);
        std::copy(h.begin(), h.end(), out.row(t));
    }
    std::fill(h.begin(), h.end(), T(0));
    for (int t = steps - 1; t >= 0; --t) {
        gru_step(bwd, input.row(t), h, wk, cb ? &(*cb)[t] : nullptr);
        std::copy(h.begin(), h.end(), out.row(t) + H);
    }
}

template <class T>
inline std::array<T, 2> heavy_forward_window(const Mat<T>& window,
                                             const HeavyParams<T>& p,
                                             HeavyCache<T>* cache = nullptr) {
    const HeavyArch& a = p.arch;
    const int steps = window.rows;
    Mat<T> out1(steps, a.layer1_out_dim());
    Mat<T> out2(steps, a.layer2_out_dim());
    if (cache) {
        cache->input = window;
        cache->c1f.resize(steps);
        cache->c1b.resize(steps);
        cache->c2f.resize(steps);
        cache->c2b.resize(steps);
    }
    bigru_layer(p.l1_fwd, p.l1_bwd, window, out1, cache ? &cache->c1f : nullptr,
                cache ? &cache->c1b : nullptr);
    bigru_layer(p.l2_fwd, p.l2_bwd, out1, out2, cache ? &cache->c2f : nullptr,
                cache ? &cache->c2b : nullptr);

    Vec<T> pooled(a.pooled_dim(), T(0));
    for (int t = 0; t < steps; ++t) {
        add_inplace(pooled.data(), out1.row(t), a.layer1_out_dim());
        add_inplace(pooled.data() + a.layer1_out_dim(), out2.row(t),
                    a.layer2_out_dim());
    }
    const T inv = T(1) / static_cast<T>(steps);
    for (auto& v : pooled) v *= inv;

    T logits[2];
    matvec(logits, p.head_w, pooled.data());
    logits[0] += p.head_b[0];
    logits[1] += p.head_b[1];
    const T mx = std::max(logits[0], logits[1]);
    const T e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
    const T denom = e0 + e1;
    std::array<T, 2> probs = {e0 / denom, e1 / denom};
    if (cache) {
        cache->out1 = std::move(out1);
        cache->pooled = std::move(pooled);
        cache->probs = probs;
    }
    return probs;
}

/// (p_pause, p_gap) for a trailing context window of features.
template <class T>
inline std::array<T, 2> heavy_forward(const FeatureSequence& window,
                                      const HeavyParams<T>& p,
                                      HeavyCache<T>* cache = nullptr) {
    Mat<T> win = heavy_window<T>(window, p.arch);
    return heavy_forward_window(win, p, cache);
}

}  // namespace etd::nn
