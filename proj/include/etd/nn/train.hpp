#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>
#include <utility>
#include <vector>

#include "etd/datagen.hpp"
#include "etd/nn/models.hpp"

namespace etd::nn {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 256;  // heavy default is 8
    double learning_rate = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 1;
    int threads = 0;  // 0 = hardware concurrency

    int resolved_threads() const {
        if (threads > 0) return threads;
        const unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// ---------------------------------------------------------------------------

template <class Params>
class AdamW {
public:
    using T = typename Params::Scalar;

    AdamW(const Params& shape, const TrainConfig& cfg)
        : m_(shape.zeros_like()), v_(shape.zeros_like()), cfg_(cfg) {}

    void step(Params& theta, Params& grads) {
        ++t_;
        auto tr = collect_refs<T>(theta);
        auto gr = collect_refs<T>(grads);
        auto mr = collect_refs<T>(m_);
        auto vr = collect_refs<T>(v_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const double lr = cfg_.learning_rate;
        for (size_t k = 0; k < tr.size(); ++k) {
            T* th = tr[k].data;
            const T* g = gr[k].data;
            T* m = mr[k].data;
            T* v = vr[k].data;
            for (size_t i = 0; i < tr[k].n; ++i) {
                m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
                v[i] = static_cast<T>(cfg_.beta2 * v[i] +
                                      (1.0 - cfg_.beta2) * double(g[i]) * double(g[i]));
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                th[i] = static_cast<T>(th[i] -
                                       lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps)) -
                                       lr * cfg_.weight_decay * th[i]);
            }
        }
    }

private:
    Params m_, v_;
    TrainConfig cfg_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One conversation: normalized features (n_steps * 10 * n_mels floats) and a
/// non-SU/SU target per 100 ms step.
struct LightSequence {
    std::vector<float> features;
    std::vector<float> targets;
    int n_steps = 0;
};

struct LightDataset {
    LightArch arch;
    std::vector<LightSequence> sequences;
    int64_t total_steps() const {
        int64_t n = 0;
        for (const auto& s : sequences) n += s.n_steps;
        return n;
    }
};

/// One Pause/Gap segment: a normalized context window ending 200 ms into the
/// silence, with the segment state as target.
struct HeavyExample {
    Mat<float> window;
    int target = kPauseIndex;
};

struct HeavyDataset {
    HeavyArch arch;
    std::vector<HeavyExample> examples;
};

namespace detail {

template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

inline LightDataset build_light_dataset(const Manifest& m, const LightArch& arch,
                                        const FeatureConfig& fc, int threads = 0) {
    LightDataset ds;
    ds.arch = arch;
    ds.sequences.resize(m.entries.size());
    const int n_threads = threads > 0 ? threads
                                      : std::max(1u, std::thread::hardware_concurrency());
    detail::parallel_for(static_cast<int>(m.entries.size()), n_threads, [&](int i) {
        const auto& e = m.entries[i];
        const AudioBuffer buf = read_wav(m.resolve(e.wav_path));
        const SegmentTrack track = read_label_file(m.resolve(e.label_path));
        const FeatureSequence feats = extract_features(buf, fc);
        const FrameTrack truth = rasterize(track, kStepMs);
        const int n_steps =
            std::min(feats.n_frames / LightArch::kFramesPerStep,
                     static_cast<int>(truth.labels.size()));
        LightSequence seq;
        seq.n_steps = n_steps;
        std::vector<float> norm;
        normalize_features(feats, norm);
        const size_t want = static_cast<size_t>(n_steps) *
                            LightArch::kFramesPerStep * arch.n_mels;
        seq.features.assign(norm.begin(), norm.begin() + want);
        seq.targets.resize(n_steps);
        for (int t = 0; t < n_steps; ++t)
            seq.targets[t] = truth.labels[t] == TurnState::SU ? 1.0f : 0.0f;
        ds.sequences[i] = std::move(seq);
    });
    return ds;
}

inline HeavyDataset build_heavy_dataset(const Manifest& m, const HeavyArch& arch,
                                        const FeatureConfig& fc, int threads = 0,
                                        size_t max_examples = 0,
                                        uint64_t subsample_seed = 1) {
    const double hop_s = fc.hop_ms / 1000.0;
    std::vector<std::vector<HeavyExample>> per_entry(m.entries.size());
    const int n_threads = threads > 0 ? threads
                                      : std::max(1u, std::thread::hardware_concurrency());
    detail::parallel_for(static_cast<int>(m.entries.size()), n_threads, [&](int i) {
        const auto& e = m.entries[i];
        const SegmentTrack track = read_label_file(m.resolve(e.label_path));
        bool any = false;
        for (const auto& seg : track.entries)
            if (seg.state != TurnState::SU) any = true;
        if (!any) return;
        const AudioBuffer buf = read_wav(m.resolve(e.wav_path));
        const FeatureSequence feats = extract_features(buf, fc);
        for (const auto& seg : track.entries) {
            if (seg.state == TurnState::SU) continue;
            const int end_frame = std::min(
                feats.n_frames,
                static_cast<int>(std::llround((seg.start_s + 0.2) / hop_s)));
            if (end_frame < 1) continue;
            const int lo = std::max(0, end_frame - arch.context_frames);
            HeavyExample ex;
            ex.window = heavy_window<float>(slice_features(feats, lo, end_frame), arch);
            ex.target = seg.state == TurnState::Gap ? kGapIndex : kPauseIndex;
            per_entry[i].push_back(std::move(ex));
        }
    });
    HeavyDataset ds;
    ds.arch = arch;
    for (auto& list : per_entry)
        for (auto& ex : list) ds.examples.push_back(std::move(ex));
    if (max_examples > 0 && ds.examples.size() > max_examples) {
        std::vector<size_t> idx(ds.examples.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 gen(subsample_seed);
        std::shuffle(idx.begin(), idx.end(), gen);
        idx.resize(max_examples);
        std::sort(idx.begin(), idx.end());
        std::vector<HeavyExample> kept;
        kept.reserve(max_examples);
        for (size_t k : idx) kept.push_back(std::move(ds.examples[k]));
        ds.examples = std::move(kept);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Per-sample gradients
// ---------------------------------------------------------------------------

template <class T>
struct LightWork {
    std::vector<LightStepCache<T>> caches;
    Vec<T> d_conv2, d_conv1, dh, dh_prev, carry;
    GruWork<T> wk;

    void setup(const LightArch& a) {
        d_conv2.assign(a.gru_input_dim(), T(0));
        d_conv1.assign(a.conv1_out_elems(), T(0));
        dh.assign(a.gru_hidden, T(0));
        dh_prev.assign(a.gru_hidden, T(0));
        carry.assign(a.gru_hidden, T(0));
        wk.resize(a.gru_hidden);
    }
};

/// Forward + BPTT over one sequence; gradients are scaled by step_weight and
/// accumulated. Returns (summed BCE loss, correct step count).
template <class T, class Y>
inline std::pair<double, int64_t> light_seq_grad(const LightParams<T>& p,
                                                 const T* features, const Y* targets,
                                                 int n_steps, T step_weight,
                                                 LightParams<T>& grads,
                                                 LightWork<T>& w) {
    const LightArch& a = p.arch;
    const int block = LightArch::kFramesPerStep * a.n_mels;
    w.caches.resize(n_steps);
    LightRunner<T> runner(p);
    double loss = 0.0;
    int64_t correct = 0;
    for (int t = 0; t < n_steps; ++t) {
        const T prob = runner.step(features + static_cast<size_t>(t) * block,
                                   &w.caches[t]);
        const double pc = std::clamp(static_cast<double>(prob), 1e-12, 1.0 - 1e-12);
        const double y = targets[t];
        loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
        correct += (prob >= T(0.5)) == (y >= 0.5);
    }
    std::fill(w.carry.begin(), w.carry.end(), T(0));
    for (int t = n_steps - 1; t >= 0; --t) {
        auto& c = w.caches[t];
        const T dlogit = (c.prob - static_cast<T>(targets[t])) * step_weight;
        axpy(grads.out_w.data(), dlogit, c.h.data(), a.gru_hidden);
        grads.out_b[0] += dlogit;
        for (int i = 0; i < a.gru_hidden; ++i)
            w.dh[i] = w.carry[i] + p.out_w[i] * dlogit;
        std::fill(w.d_conv2.begin(), w.d_conv2.end(), T(0));
        gru_step_backward(p.gru, c.gru, c.conv2_out.data(), w.dh.data(),
                          w.d_conv2.data(), w.dh_prev.data(), grads.gru, w.wk);
        std::swap(w.carry, w.dh_prev);
        std::fill(w.d_conv1.begin(), w.d_conv1.end(), T(0));
        conv2d_backward(p.conv2, c.conv1_out.data(), LightArch::kFramesPerStep,
                        a.n_mels, w.d_conv2.data(), w.d_conv1.data(), grads.conv2);
        conv2d_backward(p.conv1, c.x.data(), LightArch::kFramesPerStep, a.n_mels,
                        w.d_conv1.data(), static_cast<T*>(nullptr), grads.conv1);
    }
    return {loss, correct};
}

template <class T>
struct HeavyWork {
    HeavyCache<T> cache;
    Mat<T> d_out1;
    Vec<T> dh, dh_prev, carry, d_pool;
    GruWork<T> wk;

    void setup(const HeavyArch& a) {
        dh.assign(a.hidden, T(0));
        dh_prev.assign(a.hidden, T(0));
        carry.assign(a.hidden, T(0));
        d_pool.assign(a.pooled_dim(), T(0));
        wk.resize(a.hidden);
    }
};

/// Forward + BPTT for one context window. Returns (CE loss, correct flag).
template <class T>
inline std::pair<double, bool> heavy_example_grad(const HeavyParams<T>& p,
                                                  const Mat<T>& window, int target,
                                                  T weight, HeavyParams<T>& grads,
                                                  HeavyWork<T>& w) {
    const HeavyArch& a = p.arch;
    const int steps = window.rows;
    const int H = a.hidden;
    const auto probs = heavy_forward_window(window, p, &w.cache);
    const double loss =
        -std::log(std::max(static_cast<double>(probs[target]), 1e-12));
    const bool correct = (probs[kGapIndex] >= probs[kPauseIndex]) == (target == kGapIndex);

    T dlog[2];
    for (int c = 0; c < 2; ++c)
        dlog[c] = (probs[c] - (c == target ? T(1) : T(0))) * weight;
    for (int c = 0; c < 2; ++c) {
        axpy(grads.head_w.row(c), dlog[c], w.cache.pooled.data(), a.pooled_dim());
        grads.head_b[c] += dlog[c];
    }
    std::fill(w.d_pool.begin(), w.d_pool.end(), T(0));
    matvec_transposed_acc(w.d_pool.data(), p.head_w, dlog);
    const T inv = T(1) / static_cast<T>(steps);

    w.d_out1 = Mat<T>(steps, 2 * H);
    // Layer 2, forward direction (BPTT runs time-reversed).
    std::fill(w.carry.begin(), w.carry.end(), T(0));
    for (int t = steps - 1; t >= 0; --t) {
        for (int i = 0; i < H; ++i) w.dh[i] = w.carry[i] + w.d_pool[2 * H + i] * inv;
        gru_step_backward(p.l2_fwd, w.cache.c2f[t], w.cache.out1.row(t), w.dh.data(),
                          w.d_out1.row(t), w.dh_prev.data(), grads.l2_fwd, w.wk);
        std::swap(w.carry, w.dh_prev);
    }
    // Layer 2, backward direction (its sequence order is reversed time).
    std::fill(w.carry.begin(), w.carry.end(), T(0));
    for (int t = 0; t < steps; ++t) {
        for (int i = 0; i < H; ++i) w.dh[i] = w.carry[i] + w.d_pool[3 * H + i] * inv;
        gru_step_backward(p.l2_bwd, w.cache.c2b[t], w.cache.out1.row(t), w.dh.data(),
                          w.d_out1.row(t), w.dh_prev.data(), grads.l2_bwd, w.wk);
        std::swap(w.carry, w.dh_prev);
    }
    // Pool gradient w.r.t. layer-1 outputs.
    for (int t = 0; t < steps; ++t) {
        T* row = w.d_out1.row(t);
        for (int i = 0; i < 2 * H; ++i) row[i] += w.d_pool[i] * inv;
    }
    // Layer 1, both directions; input gradients are not needed.
    std::fill(w.carry.begin(), w.carry.end(), T(0));
    for (int t = steps - 1; t >= 0; --t) {
        for (int i = 0; i < H; ++i) w.dh[i] = w.carry[i] + w.d_out1.row(t)[i];
        gru_step_backward(p.l1_fwd, w.cache.c1f[t], window.row(t), w.dh.data(),
                          static_cast<T*>(nullptr), w.dh_prev.data(), grads.l1_fwd,
                          w.wk);
        std::swap(w.carry, w.dh_prev);
    }
    std::fill(w.carry.begin(), w.carry.end(), T(0));
    for (int t = 0; t < steps; ++t) {
        for (int i = 0; i < H; ++i) w.dh[i] = w.carry[i] + w.d_out1.row(t)[H + i];
        gru_step_backward(p.l1_bwd, w.cache.c1b[t], window.row(t), w.dh.data(),
                          static_cast<T*>(nullptr), w.dh_prev.data(), grads.l1_bwd,
                          w.wk);
        std::swap(w.carry, w.dh_prev);
    }
    return {loss, correct};
}

// ---------------------------------------------------------------------------
// Gradient accumulation over a batch, chunked per thread with a fixed merge
// order so results do not depend on scheduling.
// ---------------------------------------------------------------------------

namespace detail {

template <class Params, class PerItem>
void accumulate_batch(const std::vector<size_t>& batch, int threads, Params& grads,
                      double& loss_sum, int64_t& correct_sum, PerItem&& per_item) {
    const int n_threads =
        std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
    std::vector<Params> partial(n_threads, grads.zeros_like());
    std::vector<double> losses(n_threads, 0.0);
    std::vector<int64_t> corrects(n_threads, 0);
    std::vector<std::thread> pool;
    const size_t chunk = (batch.size() + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
        const size_t lo = t * chunk;
        const size_t hi = std::min(batch.size(), lo + chunk);
        pool.emplace_back([&, t, lo, hi]() {
            for (size_t k = lo; k < hi; ++k)
                per_item(batch[k], partial[t], losses[t], corrects[t]);
        });
    }
    for (auto& th : pool) th.join();
    using T = typename Params::Scalar;
    auto dst = collect_refs<T>(grads);
    for (int t = 0; t < n_threads; ++t) {
        auto src = collect_refs<T>(partial[t]);
        for (size_t k = 0; k < dst.size(); ++k)
            add_inplace(dst[k].data, src[k].data, static_cast<int>(dst[k].n));
        loss_sum += losses[t];
        correct_sum += corrects[t];
    }
}

inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 gen(derive_stream(seed, 0xe70c5 + static_cast<uint64_t>(epoch)));
    std::shuffle(idx.begin(), idx.end(), gen);
    return idx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

inline std::vector<EpochStats> train_light_on(LightParams<float>& params,
                                              const LightDataset& ds,
                                              const TrainConfig& cfg) {
    if (ds.sequences.empty()) throw NnError("empty training dataset");
    AdamW<LightParams<float>> opt(params, cfg);
    std::vector<EpochStats> history;
    const int threads = cfg.resolved_threads();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order =
            detail::shuffled_indices(ds.sequences.size(), cfg.seed, epoch);
        double epoch_loss = 0.0;
        int64_t epoch_correct = 0, epoch_steps = 0;
        for (size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::vector<size_t> batch(
                order.begin() + b,
                order.begin() + std::min(order.size(), b + cfg.batch_size));
            int64_t batch_steps = 0;
            for (size_t k : batch) batch_steps += ds.sequences[k].n_steps;
            if (batch_steps == 0) continue;
            auto grads = params.zeros_like();
            double loss = 0.0;
            int64_t correct = 0;
            const float weight = 1.0f / static_cast<float>(batch_steps);
            detail::accumulate_batch(
                batch, threads, grads, loss, correct,
                [&](size_t k, LightParams<float>& g, double& l, int64_t& c) {
                    thread_local LightWork<float> work;
                    work.setup(params.arch);
                    const auto& seq = ds.sequences[k];
                    const auto [sl, sc] =
                        light_seq_grad(params, seq.features.data(),
                                       seq.targets.data(), seq.n_steps, weight, g,
                                       work);
                    l += sl;
                    c += sc;
                });
            if (!std::isfinite(loss))
                throw NnError("non-finite loss in batch " + std::to_string(b / cfg.batch_size));
            opt.step(params, grads);
            epoch_loss += loss;
            epoch_correct += correct;
            epoch_steps += batch_steps;
        }
        history.push_back({epoch, epoch_loss / std::max<int64_t>(1, epoch_steps),
                           static_cast<double>(epoch_correct) /
                               std::max<int64_t>(1, epoch_steps)});
    }
    return history;
}

inline std::vector<EpochStats> train_heavy_on(HeavyParams<float>& params,
                                              const HeavyDataset& ds,
                                              const TrainConfig& cfg) {
    if (ds.examples.empty()) throw NnError("empty training dataset");
    AdamW<HeavyParams<float>> opt(params, cfg);
    std::vector<EpochStats> history;
    const int threads = cfg.resolved_threads();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order =
            detail::shuffled_indices(ds.examples.size(), cfg.seed, epoch);
        double epoch_loss = 0.0;
        int64_t epoch_correct = 0, epoch_count = 0;
        for (size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::vector<size_t> batch(
                order.begin() + b,
                order.begin() + std::min(order.size(), b + cfg.batch_size));
            auto grads = params.zeros_like();
            double loss = 0.0;
            int64_t correct = 0;
            const float weight = 1.0f / static_cast<float>(batch.size());
            detail::accumulate_batch(
                batch, threads, grads, loss, correct,
                [&](size_t k, HeavyParams<float>& g, double& l, int64_t& c) {
                    thread_local HeavyWork<float> work;
                    work.setup(params.arch);
                    const auto& ex = ds.examples[k];
                    const auto [el, ec] =
                        heavy_example_grad(params, ex.window, ex.target, weight, g,
                                           work);
                    l += el;
                    c += ec;
                });
            if (!std::isfinite(loss))
                throw NnError("non-finite loss in batch " + std::to_string(b / cfg.batch_size));
            opt.step(params, grads);
            epoch_loss += loss;
            epoch_correct += correct;
            epoch_count += static_cast<int64_t>(batch.size());
        }
        history.push_back({epoch, epoch_loss / std::max<int64_t>(1, epoch_count),
                           static_cast<double>(epoch_correct) /
                               std::max<int64_t>(1, epoch_count)});
    }
    return history;
}

/// Manifest-level entry points.
inline std::pair<LightParams<float>, std::vector<EpochStats>> train_light_model(
    const Manifest& m, const LightArch& arch, const FeatureConfig& fc,
    const TrainConfig& cfg) {
    const LightDataset ds = build_light_dataset(m, arch, fc, cfg.resolved_threads());
    auto params = LightParams<float>::make(arch, cfg.seed);
    auto history = train_light_on(params, ds, cfg);
    return {std::move(params), std::move(history)};
}

inline std::pair<HeavyParams<float>, std::vector<EpochStats>> train_heavy_model(
    const Manifest& m, const HeavyArch& arch, const FeatureConfig& fc,
    const TrainConfig& cfg, size_t max_examples = 0) {
    const HeavyDataset ds = build_heavy_dataset(m, arch, fc, cfg.resolved_threads(),
                                                max_examples, cfg.seed);
    auto params = HeavyParams<float>::make(arch, cfg.seed);
    auto history = train_heavy_on(params, ds, cfg);
    return {std::move(params), std::move(history)};
}

// ---------------------------------------------------------------------------
// Dataset-level accuracy
// ---------------------------------------------------------------------------

inline double light_frame_accuracy(const LightDataset& ds,
                                   const LightParams<float>& params,
                                   int threads = 0) {
    const int n_threads =
        threads > 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
    std::vector<int64_t> correct(ds.sequences.size(), 0);
    detail::parallel_for(static_cast<int>(ds.sequences.size()), n_threads, [&](int i) {
        const auto& seq = ds.sequences[i];
        LightRunner<float> runner(params);
        const int block = LightArch::kFramesPerStep * params.arch.n_mels;
        int64_t c = 0;
        for (int t = 0; t < seq.n_steps; ++t) {
            const float p = runner.step(seq.features.data() +
                                        static_cast<size_t>(t) * block);
            c += (p >= 0.5f) == (seq.targets[t] >= 0.5f);
        }
        correct[i] = c;
    });
    const int64_t total = ds.total_steps();
    int64_t sum = 0;
    for (int64_t c : correct) sum += c;
    return total ? static_cast<double>(sum) / total : 0.0;
}

inline double heavy_accuracy(const HeavyDataset& ds, const HeavyParams<float>& params,
                             int threads = 0) {
    const int n_threads =
        threads > 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
    std::vector<int> correct(ds.examples.size(), 0);
    detail::parallel_for(static_cast<int>(ds.examples.size()), n_threads, [&](int i) {
        const auto& ex = ds.examples[i];
        const auto probs = heavy_forward_window(ex.window, params);
        correct[i] =
            ((probs[kGapIndex] >= probs[kPauseIndex]) == (ex.target == kGapIndex));
    });
    int sum = 0;
    for (int c : correct) sum += c;
    return ds.examples.empty() ? 0.0 : static_cast<double>(sum) / ds.examples.size();
}

// ---------------------------------------------------------------------------
// Gradient check: analytic backprop vs central finite differences on tiny
// 64-bit model instances.
// ---------------------------------------------------------------------------

namespace detail {

template <class Params, class LossFn>
double max_rel_error(Params& p, Params& analytic, LossFn&& loss_of, double eps) {
    auto pr = collect_refs<double>(p);
    auto gr = collect_refs<double>(analytic);
    double worst = 0.0;
    for (size_t k = 0; k < pr.size(); ++k) {
        for (size_t i = 0; i < pr[k].n; ++i) {
            const double saved = pr[k].data[i];
            pr[k].data[i] = saved + eps;
            const double lp = loss_of();
            pr[k].data[i] = saved - eps;
            const double lm = loss_of();
            pr[k].data[i] = saved;
            const double gn = (lp - lm) / (2.0 * eps);
            const double ga = gr[k].data[i];
            const double rel =
                std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
            worst = std::max(worst, rel);
            if (!std::isfinite(rel)) throw NnError("non-finite gradient check value");
        }
    }
    return worst;
}

}  // namespace detail

inline double grad_check(ArchKind kind, uint64_t seed = 7, double eps = 1e-4) {
    if (!(eps > 0.0)) throw NnError("grad_check requires eps > 0");
    Rng rng(derive_stream(seed, 0x67636bULL));
    if (kind == ArchKind::Light) {
        LightArch a;
        a.n_mels = 8;
        a.conv1_channels = 2;
        a.conv2_channels = 3;
        a.gru_hidden = 6;
        auto p = LightParams<double>::make(a, seed);
        const int steps = 3;
        std::vector<double> feats(static_cast<size_t>(steps) *
                                  LightArch::kFramesPerStep * a.n_mels);
        for (auto& v : feats) v = rng.uniform(0.0, 3.0);
        std::vector<double> targets(steps);
        for (auto& y : targets) y = rng.bernoulli(0.5) ? 1.0 : 0.0;

        auto grads = p.zeros_like();
        LightWork<double> work;
        work.setup(a);
        light_seq_grad(p, feats.data(), targets.data(), steps, 1.0 / steps, grads,
                       work);
        auto loss_of = [&]() {
            LightRunner<double> r(p);
            double L = 0.0;
            const int block = LightArch::kFramesPerStep * a.n_mels;
            for (int t = 0; t < steps; ++t) {
                const double prob = r.step(feats.data() + static_cast<size_t>(t) * block);
                const double pc = std::clamp(prob, 1e-12, 1.0 - 1e-12);
                L -= targets[t] * std::log(pc) + (1.0 - targets[t]) * std::log(1.0 - pc);
            }
            return L / steps;
        };
        return detail::max_rel_error(p, grads, loss_of, eps);
    }

    HeavyArch a;
    a.n_mels = 6;
    a.context_frames = 12;
    a.hidden = 4;
    auto p = HeavyParams<double>::make(a, seed);
    Mat<double> window(a.context_frames, a.n_mels);
    for (auto& v : window.a) v = rng.uniform(0.0, 3.0);
    const int target = rng.bernoulli(0.5) ? kGapIndex : kPauseIndex;

    auto grads = p.zeros_like();
    HeavyWork<double> work;
    work.setup(a);
    heavy_example_grad(p, window, target, 1.0, grads, work);
    auto loss_of = [&]() {
        const auto probs = heavy_forward_window(window, p);
        return -std::log(std::max(probs[target], 1e-12));
    };
    return detail::max_rel_error(p, grads, loss_of, eps);
}

}  // namespace etd::nn
