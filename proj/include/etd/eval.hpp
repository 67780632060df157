#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "etd/cascade.hpp"
#include "etd/datagen.hpp"
#include "etd/labels.hpp"
#include "etd/nn/flops.hpp"
#include "etd/nn/train.hpp"

namespace etd::eval {

class EvalError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int64_t support = 0;  // truth count
};

struct BinaryReport {
    double precision = 0.0;  // macro over {Pause, Gap}
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    ClassScores pause, gap;
    int64_t n = 0;
    int64_t excluded = 0;  // samples ending in SU, skipped with a warning
};

struct SegClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
    int64_t tp = 0, fp = 0, fn = 0;
    bool absent = false;  // class missing from both pred and truth corpus-wide
};

struct SegReport {
    std::array<SegClassScores, 3> per_class;  // indexed by TurnState
    double macro_f1 = 0.0;
    double macro_iou = 0.0;
    int64_t total_frames = 0;
};

struct ComputeReport {
    std::string method;
    uint64_t total_flops = 0;
    uint64_t light_flops = 0;
    uint64_t heavy_flops = 0;
    uint64_t heavy_invocations = 0;
    uint64_t escalations = 0;
    int64_t total_steps = 0;
    int64_t n_samples = 0;
    double flops_per_sample = 0.0;
    double wall_ms_per_step = 0.0;
};

enum class StreamMode { LightOnly, HeavyEverywhere, Speculative };

inline const char* to_string(StreamMode m) {
    switch (m) {
        case StreamMode::LightOnly: return "light_only";
        case StreamMode::HeavyEverywhere: return "heavy_everywhere";
        case StreamMode::Speculative: return "speculative";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Metric primitives
// ---------------------------------------------------------------------------

namespace detail {

inline double safe_div(double num, double den) { return den > 0.0 ? num / den : 0.0; }

inline ClassScores scores_from_counts(int64_t tp, int64_t fp, int64_t fn) {
    ClassScores s;
    s.support = tp + fn;
    s.precision = safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
    s.recall = safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
    s.f1 = safe_div(2.0 * s.precision * s.recall, s.precision + s.recall);
    return s;
}

}  // namespace detail

/// Macro-averaged Pause/Gap classification metrics. Classes absent from the
/// truth contribute zero scores before averaging.
inline BinaryReport binary_metrics(const std::vector<TurnState>& predictions,
                                   const std::vector<TurnState>& truths) {
    if (predictions.empty()) throw EvalError("binary_metrics: empty input");
    if (predictions.size() != truths.size())
        throw EvalError("binary_metrics: length mismatch");
    int64_t counts[2][2] = {{0, 0}, {0, 0}};  // [truth][pred], Pause=0 Gap=1
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == TurnState::SU || truths[i] == TurnState::SU)
            throw EvalError("binary_metrics: labels must be Pause or Gap");
        const int t = truths[i] == TurnState::Gap ? 1 : 0;
        const int p = predictions[i] == TurnState::Gap ? 1 : 0;
        ++counts[t][p];
    }
    BinaryReport r;
    r.n = static_cast<int64_t>(predictions.size());
    r.pause = detail::scores_from_counts(counts[0][0], counts[1][0], counts[0][1]);
    r.gap = detail::scores_from_counts(counts[1][1], counts[0][1], counts[1][0]);
    r.accuracy = static_cast<double>(counts[0][0] + counts[1][1]) / r.n;
    r.precision = (r.pause.precision + r.gap.precision) / 2.0;
    r.recall = (r.pause.recall + r.gap.recall) / 2.0;
    r.f1 = (r.pause.f1 + r.gap.f1) / 2.0;
    return r;
}

/// Frame-level ternary segmentation metrics with corpus-pooled per-class
/// counts, then an unweighted macro over the three classes.
inline SegReport segmentation_metrics(const std::vector<FrameTrack>& pred_tracks,
                                      const std::vector<FrameTrack>& truth_tracks) {
    if (pred_tracks.size() != truth_tracks.size())
        throw EvalError("segmentation_metrics: track count mismatch");
    int64_t tp[3] = {0, 0, 0}, fp[3] = {0, 0, 0}, fn[3] = {0, 0, 0};
    int64_t total = 0;
    for (size_t s = 0; s < pred_tracks.size(); ++s) {
        const auto& pred = pred_tracks[s].labels;
        const auto& truth = truth_tracks[s].labels;
        if (pred.size() != truth.size())
            throw EvalError("segmentation_metrics: frame count mismatch in sample " +
                            std::to_string(s));
        for (size_t i = 0; i < pred.size(); ++i) {
            const int p = static_cast<int>(pred[i]);
            const int t = static_cast<int>(truth[i]);
            if (p == t) {
                ++tp[p];
            } else {
                ++fp[p];
                ++fn[t];
            }
            ++total;
        }
    }
    SegReport r;
    r.total_frames = total;
    for (int c = 0; c < 3; ++c) {
        auto& sc = r.per_class[c];
        const ClassScores base = detail::scores_from_counts(tp[c], fp[c], fn[c]);
        sc.precision = base.precision;
        sc.recall = base.recall;
        sc.f1 = base.f1;
        sc.tp = tp[c];
        sc.fp = fp[c];
        sc.fn = fn[c];
        sc.iou = detail::safe_div(static_cast<double>(tp[c]),
                                  static_cast<double>(tp[c] + fp[c] + fn[c]));
        sc.absent = (tp[c] + fp[c] + fn[c]) == 0;
        r.macro_f1 += sc.f1 / 3.0;
        r.macro_iou += sc.iou / 3.0;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Task evaluations
// ---------------------------------------------------------------------------

struct EvalOptions {
    FeatureConfig features;
    CascadeConfig cascade;
    int threads = 0;

    int resolved_threads() const {
        if (threads > 0) return threads;
        const unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }
};

/// Whole-audio Gap/Pause decision on the trailing context window, scored
/// against the sample's final segment. Samples ending in SU are excluded.
inline BinaryReport evaluate_binary_task(const Manifest& manifest,
                                         const nn::HeavyParams<float>& heavy,
                                         const EvalOptions& opts = {}) {
    const size_t n = manifest.entries.size();
    std::vector<int> verdicts(n, -1);  // -1 excluded, else Gap=1/Pause=0
    std::vector<int> truths(n, -1);
    nn::detail::parallel_for(static_cast<int>(n), opts.resolved_threads(), [&](int i) {
        const auto& e = manifest.entries[i];
        const SegmentTrack track = read_label_file(manifest.resolve(e.label_path));
        const TurnState last = track.entries.back().state;
        if (last == TurnState::SU) return;
        const AudioBuffer audio = read_wav(manifest.resolve(e.wav_path));
        const FeatureSequence feats = extract_features(audio, opts.features);
        if (feats.n_frames < 1) return;
        const int lo = std::max(0, feats.n_frames - heavy.arch.context_frames);
        const auto probs = nn::heavy_forward(
            slice_features(feats, lo, feats.n_frames), heavy);
        verdicts[i] = probs[nn::kGapIndex] >= 0.5f ? 1 : 0;
        truths[i] = last == TurnState::Gap ? 1 : 0;
    });
    std::vector<TurnState> pred_states, truth_states;
    int64_t excluded = 0;
    for (size_t i = 0; i < n; ++i) {
        if (truths[i] < 0) {
            ++excluded;
            continue;
        }
        pred_states.push_back(verdicts[i] ? TurnState::Gap : TurnState::Pause);
        truth_states.push_back(truths[i] ? TurnState::Gap : TurnState::Pause);
    }
    if (pred_states.empty())
        throw EvalError("evaluate_binary_task: no eligible samples");
    BinaryReport r = binary_metrics(pred_states, truth_states);
    r.excluded = excluded;
    return r;
}

struct StreamEvalResult {
    SegReport seg;
    ComputeReport compute;
};

/// Per-sample product of one streaming evaluation.
struct SampleStreamResult {
    FrameTrack pred;
    FrameTrack truth;
    uint64_t escalations = 0;
    uint64_t heavy_invocations = 0;
    int steps = 0;
    double wall_ms = 0.0;
};

namespace detail {

inline SampleStreamResult eval_one_stream(const FeatureSequence& feats,
                                          const FrameTrack& truth_full,
                                          const nn::LightParams<float>& light,
                                          const nn::HeavyParams<float>& heavy,
                                          StreamMode mode, const EvalOptions& opts) {
    SampleStreamResult out;
    const int n_steps =
        std::min(feats.n_frames / nn::LightArch::kFramesPerStep,
                 static_cast<int>(truth_full.labels.size()));
    out.steps = n_steps;
    out.truth.labels.assign(truth_full.labels.begin(),
                            truth_full.labels.begin() + n_steps);
    const auto t0 = std::chrono::steady_clock::now();

    if (mode == StreamMode::Speculative) {
        FeatureSequence trimmed = slice_features(
            feats, 0, n_steps * nn::LightArch::kFramesPerStep);
        InProcessProvider provider(heavy);
        const OfflineRun run =
            run_offline_features(trimmed, light, provider, opts.cascade);
        out.pred = run.track;
        out.escalations = run.escalations;
        out.heavy_invocations = run.escalations;
    } else {
        const auto probs = nn::light_forward(feats, light);
        const int context = heavy.arch.context_frames;
        for (int i = 0; i < n_steps; ++i) {
            const bool su = probs[i] >= opts.cascade.su_threshold;
            if (su) {
                out.pred.labels.push_back(TurnState::SU);
                continue;
            }
            if (mode == StreamMode::LightOnly) {
                // A binary SU detector cannot tell Gap from Pause; fall back.
                out.pred.labels.push_back(opts.cascade.provisional_label);
            } else {
                const int end = (i + 1) * nn::LightArch::kFramesPerStep;
                const int lo = std::max(0, end - context);
                const auto verdict =
                    nn::heavy_forward(slice_features(feats, lo, end), heavy);
                out.pred.labels.push_back(verdict[nn::kGapIndex] >= 0.5f
                                              ? TurnState::Gap
                                              : TurnState::Pause);
                ++out.heavy_invocations;
            }
        }
    }
    out.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return out;
}

}  // namespace detail

/// Streaming ternary segmentation in one of the three consultation modes,
/// with exact FLOPs bookkeeping:
///   total == light_per_step * steps + heavy_per_invocation * invocations.
/// heavy_everywhere charges one heavy invocation per step by definition.
inline StreamEvalResult evaluate_stream_task(const Manifest& manifest,
                                             const nn::LightParams<float>& light,
                                             const nn::HeavyParams<float>& heavy,
                                             StreamMode mode,
                                             const EvalOptions& opts = {}) {
    const size_t n = manifest.entries.size();
    if (n == 0) throw EvalError("evaluate_stream_task: empty manifest");
    std::vector<SampleStreamResult> results(n);
    nn::detail::parallel_for(static_cast<int>(n), opts.resolved_threads(), [&](int i) {
        const auto& e = manifest.entries[i];
        const AudioBuffer audio = read_wav(manifest.resolve(e.wav_path));
        const SegmentTrack track = read_label_file(manifest.resolve(e.label_path));
        const FeatureSequence feats = extract_features(audio, opts.features);
        const FrameTrack truth = rasterize(track, kStepMs);
        results[i] =
            detail::eval_one_stream(feats, truth, light, heavy, mode, opts);
    });

    std::vector<FrameTrack> preds, truths;
    ComputeReport compute;
    compute.method = to_string(mode);
    compute.n_samples = static_cast<int64_t>(n);
    double wall_ms = 0.0;
    for (const auto& r : results) {
        preds.push_back(r.pred);
        truths.push_back(r.truth);
        compute.total_steps += r.steps;
        compute.escalations += r.escalations;
        if (mode == StreamMode::HeavyEverywhere)
            compute.heavy_invocations += static_cast<uint64_t>(r.steps);
        else
            compute.heavy_invocations += r.heavy_invocations;
        wall_ms += r.wall_ms;
    }
    compute.light_flops =
        nn::light_flops(light.arch, static_cast<uint64_t>(compute.total_steps));
    compute.heavy_flops =
        nn::heavy_invocation_flops(heavy.arch) * compute.heavy_invocations;
    compute.total_flops = compute.light_flops + compute.heavy_flops;
    compute.flops_per_sample =
        compute.n_samples ? static_cast<double>(compute.total_flops) / compute.n_samples
                          : 0.0;
    compute.wall_ms_per_step =
        compute.total_steps ? wall_ms / compute.total_steps : 0.0;

    StreamEvalResult out;
    out.seg = segmentation_metrics(preds, truths);
    out.compute = compute;
    return out;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const BinaryReport& r) {
    auto cls = [](const ClassScores& s) {
        return nlohmann::json{{"precision", s.precision},
                              {"recall", s.recall},
                              {"f1", s.f1},
                              {"support", s.support}};
    };
    return {{"precision", r.precision}, {"recall", r.recall},
            {"f1", r.f1},               {"accuracy", r.accuracy},
            {"n", r.n},                 {"excluded", r.excluded},
            {"pause", cls(r.pause)},    {"gap", cls(r.gap)}};
}

inline nlohmann::json to_json(const SegReport& r) {
    nlohmann::json per;
    const char* names[3] = {"SU", "Pause", "Gap"};
    for (int c = 0; c < 3; ++c) {
        const auto& s = r.per_class[c];
        per[names[c]] = {{"precision", s.precision}, {"recall", s.recall},
                         {"f1", s.f1},               {"iou", s.iou},
                         {"absent", s.absent},       {"tp", s.tp},
                         {"fp", s.fp},               {"fn", s.fn}};
    }
    return {{"per_class", per},
            {"macro_f1", r.macro_f1},
            {"macro_iou", r.macro_iou},
            {"total_frames", r.total_frames}};
}

inline nlohmann::json to_json(const ComputeReport& r) {
    return {{"method", r.method},
            {"total_flops", r.total_flops},
            {"light_flops", r.light_flops},
            {"heavy_flops", r.heavy_flops},
            {"heavy_invocations", r.heavy_invocations},
            {"escalations", r.escalations},
            {"total_steps", r.total_steps},
            {"n_samples", r.n_samples},
            {"flops_per_sample", r.flops_per_sample},
            {"wall_ms_per_step", r.wall_ms_per_step}};
}

inline std::string format_seg_table(const SegReport& r) {
    std::ostringstream os;
    const char* names[3] = {"SU", "Pause", "Gap"};
    os << "class      prec    rec     f1      iou\n";
    char line[128];
    for (int c = 0; c < 3; ++c) {
        const auto& s = r.per_class[c];
        std::snprintf(line, sizeof line, "%-8s %6.4f %6.4f %6.4f %6.4f%s\n",
                      names[c], s.precision, s.recall, s.f1, s.iou,
                      s.absent ? "  (absent)" : "");
        os << line;
    }
    std::snprintf(line, sizeof line, "macro F1 %.4f  macro IoU %.4f  frames %lld\n",
                  r.macro_f1, r.macro_iou,
                  static_cast<long long>(r.total_frames));
    os << line;
    return os.str();
}

inline std::string format_compute_table(const std::vector<ComputeReport>& reports) {
    std::ostringstream os;
    os << "method             MFLOPs/sample   escalations   steps   wall ms/step\n";
    char line[160];
    for (const auto& r : reports) {
        std::snprintf(line, sizeof line, "%-18s %13.2f %13llu %7lld %14.3f\n",
                      r.method.c_str(), r.flops_per_sample / 1e6,
                      static_cast<unsigned long long>(r.escalations),
                      static_cast<long long>(r.total_steps), r.wall_ms_per_step);
        os << line;
    }
    return os.str();
}

/// Minimal grouped bar chart: counted compute (log scale) next to macro IoU
/// per method.
inline void write_flops_iou_svg(
    const std::string& path,
    const std::vector<std::tuple<std::string, uint64_t, double>>& rows) {
    if (rows.empty()) throw EvalError("no rows for svg chart");
    const int width = 640, height = 360, margin = 50;
    const int panel_w = (width - 3 * margin) / 2;
    double max_log = 1.0;
    for (const auto& [name, flops, iou] : rows)
        max_log = std::max(max_log, std::log10(std::max<double>(flops, 10)));
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
       << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << margin << "\" y=\"24\" font-size=\"14\">counted FLOPs "
          "(log10)</text>\n";
    os << "<text x=\"" << 2 * margin + panel_w
       << "\" y=\"24\" font-size=\"14\">macro IoU</text>\n";
    const int plot_h = height - 2 * margin;
    const double bar_w =
        static_cast<double>(panel_w) / static_cast<double>(rows.size()) * 0.7;
    const char* colors[3] = {"#4878cf", "#6acc65", "#d65f5f"};
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& [name, flops, iou] = rows[i];
        const double slot = static_cast<double>(panel_w) / rows.size();
        const double x1 = margin + i * slot + slot * 0.15;
        const double h1 = plot_h * std::log10(std::max<double>(flops, 10)) / max_log;
        os << "<rect x=\"" << x1 << "\" y=\"" << margin + plot_h - h1 << "\" width=\""
           << bar_w << "\" height=\"" << h1 << "\" fill=\"" << colors[i % 3]
           << "\"/>\n";
        const double x2 = 2 * margin + panel_w + i * slot + slot * 0.15;
        const double h2 = plot_h * std::min(1.0, std::max(0.0, iou));
        os << "<rect x=\"" << x2 << "\" y=\"" << margin + plot_h - h2 << "\" width=\""
           << bar_w << "\" height=\"" << h2 << "\" fill=\"" << colors[i % 3]
           << "\"/>\n";
        os << "<text x=\"" << x1 << "\" y=\"" << height - margin + 16
           << "\" font-size=\"11\">" << name << "</text>\n";
    }
    os << "</svg>\n";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw EvalError("cannot write svg: " + path);
    f << os.str();
}

}  // namespace etd::eval
