#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "etd/common.hpp"

namespace etd {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class TurnState : uint8_t { SU = 0, Pause = 1, Gap = 2 };

inline const char* to_string(TurnState s) {
    switch (s) {
        case TurnState::SU: return "SU";
        case TurnState::Pause: return "Pause";
        case TurnState::Gap: return "Gap";
    }
    return "?";
}

inline std::optional<TurnState> turn_state_from_string(const std::string& s) {
    if (s == "SU") return TurnState::SU;
    if (s == "Pause") return TurnState::Pause;
    if (s == "Gap") return TurnState::Gap;
    return std::nullopt;
}

/// Maximal same-state segments as (state, start time) pairs.
struct SegmentTrack {
    struct Entry {
        TurnState state;
        double start_s;
        bool operator==(const Entry&) const = default;
    };
    std::vector<Entry> entries;
    double total_duration_s = 0.0;

    bool operator==(const SegmentTrack&) const = default;

    /// End time of segment i (start of the next segment, or total duration).
    double segment_end(size_t i) const {
        return i + 1 < entries.size() ? entries[i + 1].start_s : total_duration_s;
    }
};

/// One label per decision step.
struct FrameTrack {
    std::vector<TurnState> labels;
    int step_ms = kStepMs;

    bool operator==(const FrameTrack&) const = default;
    size_t size() const { return labels.size(); }
};

/// Externally supplied speaker turns, sorted by start, non-overlapping.
struct DiarizationTrack {
    struct Turn {
        std::string speaker;
        double start_s;
        double end_s;
    };
    std::vector<Turn> turns;
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class TrackErrorKind {
    FirstStartNonzero,
    NonIncreasingStart,
    AdjacentDuplicate,
    StartBeyondDuration,
    EmptyTrack,
    BadStep,
    OverlappingTurns,
    UnknownSpeaker,
    MalformedLine,
};

class TrackError : public Error {
public:
    TrackError(TrackErrorKind k, size_t index, const std::string& msg)
        : Error(msg), kind(k), index(index) {}
    TrackErrorKind kind;
    size_t index;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline void validate_track(const SegmentTrack& track) {
    if (track.entries.empty())
        throw TrackError(TrackErrorKind::EmptyTrack, 0, "track has no segments");
    if (track.entries.front().start_s != 0.0)
        throw TrackError(TrackErrorKind::FirstStartNonzero, 0,
                         "first segment must start at 0.0");
    for (size_t i = 1; i < track.entries.size(); ++i) {
        if (!(track.entries[i].start_s > track.entries[i - 1].start_s))
            throw TrackError(TrackErrorKind::NonIncreasingStart, i,
                             "segment starts must be strictly increasing at index " +
                                 std::to_string(i));
        if (track.entries[i].state == track.entries[i - 1].state)
            throw TrackError(TrackErrorKind::AdjacentDuplicate, i,
                             "adjacent segments share a state at index " +
                                 std::to_string(i));
    }
    if (!(track.entries.back().start_s < track.total_duration_s))
        throw TrackError(TrackErrorKind::StartBeyondDuration,
                         track.entries.size() - 1,
                         "last segment start must precede total duration");
}

/// One label per step by majority time overlap within [i*step, (i+1)*step).
/// Exact ties go to the later-starting segment so transitions are not delayed.
inline FrameTrack rasterize(const SegmentTrack& track, int step_ms = kStepMs) {
    if (step_ms <= 0)
        throw TrackError(TrackErrorKind::BadStep, 0, "step_ms must be positive");
    validate_track(track);

    const double step = step_ms / 1000.0;
    const int n_steps =
        static_cast<int>(std::floor(track.total_duration_s / step + 1e-9));
    FrameTrack out;
    out.step_ms = step_ms;
    out.labels.reserve(n_steps);

    size_t seg = 0;
    for (int i = 0; i < n_steps; ++i) {
        const double lo = i * step;
        const double hi = (i + 1) * step;
        while (seg + 1 < track.entries.size() &&
               track.entries[seg + 1].start_s <= lo + 1e-12)
            ++seg;
        // Accumulate overlap per state; remember the latest segment start that
        // contributed so ties resolve toward the later segment.
        double overlap[3] = {0.0, 0.0, 0.0};
        double latest_start[3] = {-1.0, -1.0, -1.0};
        for (size_t k = seg; k < track.entries.size(); ++k) {
            const double s0 = std::max(lo, track.entries[k].start_s);
            const double s1 = std::min(hi, track.segment_end(k));
            if (s0 >= hi) break;
            const double ov = s1 - s0;
            if (ov <= 0.0) continue;
            const int idx = static_cast<int>(track.entries[k].state);
            overlap[idx] += ov;
            latest_start[idx] = std::max(latest_start[idx], track.entries[k].start_s);
        }
        int best = 0;
        for (int c = 1; c < 3; ++c) {
            const double d = overlap[c] - overlap[best];
            if (d > 1e-9 || (std::abs(d) <= 1e-9 && overlap[c] > 0.0 &&
                             latest_start[c] > latest_start[best]))
                best = c;
        }
        out.labels.push_back(static_cast<TurnState>(best));
    }
    return out;
}

/// Run-length encodes a FrameTrack back into maximal segments.
inline SegmentTrack segments_from_frames(const FrameTrack& frames) {
    const double step = frames.step_ms / 1000.0;
    SegmentTrack out;
    out.total_duration_s = static_cast<double>(frames.labels.size()) * step;
    for (size_t i = 0; i < frames.labels.size(); ++i) {
        if (i == 0 || frames.labels[i] != frames.labels[i - 1])
            out.entries.push_back({frames.labels[i], static_cast<double>(i) * step});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Diarization-to-label rules
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kMergeThresholdS = 0.2;
inline constexpr double kTimeEps = 1e-9;

}  // namespace detail

inline void validate_diarization(const DiarizationTrack& diar) {
    for (size_t i = 0; i < diar.turns.size(); ++i) {
        const auto& t = diar.turns[i];
        if (!(t.start_s >= 0.0) || !(t.end_s > t.start_s))
            throw TrackError(TrackErrorKind::MalformedLine, i,
                             "bad turn interval at index " + std::to_string(i));
        if (i > 0 && diar.turns[i].start_s < diar.turns[i - 1].end_s - detail::kTimeEps)
            throw TrackError(TrackErrorKind::OverlappingTurns, i,
                             "overlapping turns at index " + std::to_string(i));
    }
}

/// Time spans of the original recording kept for the target speaker's sample:
/// everything from the speaker's first turn onward, minus other speakers'
/// speech. Used by callers to crop audio consistently with the label track.
inline std::vector<std::pair<double, double>> kept_spans(
    const DiarizationTrack& diar, const std::string& target_speaker,
    double total_duration_s) {
    DiarizationTrack sorted = diar;
    std::sort(sorted.turns.begin(), sorted.turns.end(),
              [](const auto& a, const auto& b) { return a.start_s < b.start_s; });
    std::vector<std::pair<double, double>> spans;
    double cursor = -1.0;
    for (const auto& t : sorted.turns) {
        if (t.speaker == target_speaker) {
            cursor = t.start_s;
            break;
        }
    }
    if (cursor < 0.0)
        throw TrackError(TrackErrorKind::UnknownSpeaker, 0,
                         "target speaker not present: " + target_speaker);
    for (const auto& t : sorted.turns) {
        if (t.speaker == target_speaker || t.end_s <= cursor ||
            t.start_s >= total_duration_s)
            continue;
        const double cut_lo = std::max(cursor, t.start_s);
        if (cut_lo > cursor) spans.emplace_back(cursor, cut_lo);
        cursor = std::max(cursor, std::min(t.end_s, total_duration_s));
    }
    if (cursor < total_duration_s) spans.emplace_back(cursor, total_duration_s);
    return spans;
}

/// Applies the 200 ms rules to one speaker of a two-party diarization:
/// target turns become SU; silences between two target turns merge into the
/// SU when < 200 ms and become Pause otherwise; silences bordering another
/// speaker's (excluded) speech become Gap, as does trailing silence >= 200 ms.
/// Output times are on the cropped timeline given by kept_spans.
inline SegmentTrack label_from_diarization(const DiarizationTrack& diar,
                                           const std::string& target_speaker,
                                           double total_duration_s) {
    DiarizationTrack sorted = diar;
    std::sort(sorted.turns.begin(), sorted.turns.end(),
              [](const auto& a, const auto& b) { return a.start_s < b.start_s; });
    validate_diarization(sorted);

    std::vector<DiarizationTrack::Turn> turns;
    for (const auto& t : sorted.turns)
        if (t.start_s < total_duration_s - detail::kTimeEps) {
            turns.push_back(t);
            turns.back().end_s = std::min(t.end_s, total_duration_s);
        }

    size_t first = turns.size();
    for (size_t i = 0; i < turns.size(); ++i) {
        if (turns[i].speaker == target_speaker) {
            first = i;
            break;
        }
    }
    if (first == turns.size())
        throw TrackError(TrackErrorKind::UnknownSpeaker, 0,
                         "target speaker not present: " + target_speaker);

    // Walk the original timeline from the target's first turn, appending kept
    // time onto the cropped output timeline. Zero-duration regions (e.g. an
    // excluded turn with no surrounding silence) emit nothing.
    SegmentTrack out;
    double out_t = 0.0;
    auto advance = [&out, &out_t](TurnState s, double dt) {
        if (dt <= detail::kTimeEps) return;
        if (out.entries.empty() || out.entries.back().state != s)
            out.entries.push_back({s, out_t});
        out_t += dt;
    };

    double cursor = turns[first].start_s;
    bool prev_is_target = true;
    for (size_t i = first; i < turns.size(); ++i) {
        const auto& t = turns[i];
        const bool is_target = t.speaker == target_speaker;
        const double silence = t.start_s - cursor;
        if (silence > detail::kTimeEps) {
            if (prev_is_target && is_target) {
                advance(silence >= detail::kMergeThresholdS - detail::kTimeEps
                            ? TurnState::Pause
                            : TurnState::SU,
                        silence);
            } else {
                advance(TurnState::Gap, silence);
            }
        }
        if (is_target)
            advance(TurnState::SU, t.end_s - t.start_s);
        prev_is_target = is_target;
        cursor = std::max(cursor, t.end_s);
    }
    const double trailing = total_duration_s - cursor;
    if (trailing > detail::kTimeEps) {
        if (!prev_is_target ||
            trailing >= detail::kMergeThresholdS - detail::kTimeEps)
            advance(TurnState::Gap, trailing);
        else
            advance(TurnState::SU, trailing);  // folds into the final SU
    }
    out.total_duration_s = out_t;
    validate_track(out);
    return out;
}

// ---------------------------------------------------------------------------
// Diarization file ingestion: `speaker<TAB>start_s<TAB>end_s` per line.
// ---------------------------------------------------------------------------

inline DiarizationTrack read_diarization_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open diarization file: " + path);
    DiarizationTrack track;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        DiarizationTrack::Turn t;
        if (!(std::getline(ss, t.speaker, '\t'))) {
            throw TrackError(TrackErrorKind::MalformedLine, line_no,
                             "malformed diarization line " + std::to_string(line_no));
        }
        std::string s_start, s_end;
        if (!std::getline(ss, s_start, '\t') || !std::getline(ss, s_end)) {
            throw TrackError(TrackErrorKind::MalformedLine, line_no,
                             "malformed diarization line " + std::to_string(line_no));
        }
        try {
            t.start_s = std::stod(s_start);
            t.end_s = std::stod(s_end);
        } catch (const std::exception&) {
            throw TrackError(TrackErrorKind::MalformedLine, line_no,
                             "non-numeric bounds on line " + std::to_string(line_no));
        }
        track.turns.push_back(std::move(t));
    }
    std::sort(track.turns.begin(), track.turns.end(),
              [](const auto& a, const auto& b) { return a.start_s < b.start_s; });
    return track;
}

inline std::set<std::string> speakers_of(const DiarizationTrack& diar) {
    std::set<std::string> out;
    for (const auto& t : diar.turns) out.insert(t.speaker);
    return out;
}

}  // namespace etd
