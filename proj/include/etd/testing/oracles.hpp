#pragma once

// Brute-force metric oracles, kept independent of the eval implementation:
// the scores here are computed from materialized index sets, not confusion
// counters. Test support only; the library proper never includes this file.

#include <set>
#include <utility>
#include <vector>

#include "etd/labels.hpp"

namespace etd::testing {

struct OracleClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
};

struct OracleSegScores {
    OracleClassScores per_class[3];
    double macro_f1 = 0.0;
    double macro_iou = 0.0;
};

inline OracleSegScores oracle_segmentation(const std::vector<FrameTrack>& preds,
                                           const std::vector<FrameTrack>& truths) {
    OracleSegScores out;
    for (int c = 0; c < 3; ++c) {
        std::set<std::pair<size_t, size_t>> a, b;
        for (size_t s = 0; s < preds.size(); ++s) {
            for (size_t i = 0; i < preds[s].labels.size(); ++i)
                if (static_cast<int>(preds[s].labels[i]) == c) a.insert({s, i});
            for (size_t i = 0; i < truths[s].labels.size(); ++i)
                if (static_cast<int>(truths[s].labels[i]) == c) b.insert({s, i});
        }
        std::set<std::pair<size_t, size_t>> inter, uni;
        for (const auto& x : a)
            if (b.count(x)) inter.insert(x);
        uni = a;
        for (const auto& x : b) uni.insert(x);
        auto& sc = out.per_class[c];
        sc.precision = a.empty() ? 0.0 : double(inter.size()) / double(a.size());
        sc.recall = b.empty() ? 0.0 : double(inter.size()) / double(b.size());
        sc.f1 = (a.size() + b.size()) == 0
                    ? 0.0
                    : 2.0 * double(inter.size()) / double(a.size() + b.size());
        sc.iou = uni.empty() ? 0.0 : double(inter.size()) / double(uni.size());
        out.macro_f1 += sc.f1 / 3.0;
        out.macro_iou += sc.iou / 3.0;
    }
    return out;
}

struct OracleBinaryScores {
    double precision = 0.0;  // macro
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
};

inline OracleBinaryScores oracle_binary(const std::vector<TurnState>& preds,
                                        const std::vector<TurnState>& truths) {
    OracleBinaryScores out;
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truths[i];
    out.accuracy = preds.empty() ? 0.0 : double(correct) / double(preds.size());
    const TurnState classes[2] = {TurnState::Pause, TurnState::Gap};
    for (const TurnState c : classes) {
        std::set<size_t> a, b;
        for (size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c) a.insert(i);
            if (truths[i] == c) b.insert(i);
        }
        size_t inter = 0;
        for (size_t x : a) inter += b.count(x);
        const double p = a.empty() ? 0.0 : double(inter) / double(a.size());
        const double r = b.empty() ? 0.0 : double(inter) / double(b.size());
        const double f =
            (a.size() + b.size()) == 0 ? 0.0 : 2.0 * double(inter) / double(a.size() + b.size());
        out.precision += p / 2.0;
        out.recall += r / 2.0;
        out.f1 += f / 2.0;
    }
    return out;
}

inline FrameTrack random_frame_track(Rng& rng, int max_len = 50) {
    FrameTrack f;
    const int n = static_cast<int>(rng.uniform_int(1, max_len));
    for (int i = 0; i < n; ++i)
        f.labels.push_back(static_cast<TurnState>(rng.uniform_int(0, 2)));
    return f;
}

}  // namespace etd::testing
