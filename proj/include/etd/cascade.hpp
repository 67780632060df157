#pragma once

#include <map>
#include <optional>
#include <set>
#include <variant>
#include <vector>

#include "etd/audio.hpp"
#include "etd/labels.hpp"
#include "etd/nn/models.hpp"

namespace etd {

class CascadeError : public Error {
public:
    using Error::Error;
};

enum class StalePolicy { Discard };

struct CascadeConfig {
    double su_threshold = 0.5;  // light output >= threshold => SU
    int debounce_steps = 2;     // consecutive non-SU steps before escalation
    double context_window_s = 3.0;
    TurnState provisional_label = TurnState::Pause;
    StalePolicy stale_policy = StalePolicy::Discard;

    void validate() const {
        if (debounce_steps < 1) throw CascadeError("debounce_steps must be >= 1");
        if (!(su_threshold > 0.0 && su_threshold < 1.0))
            throw CascadeError("su_threshold must be in (0, 1)");
    }
    int context_frames() const {
        return static_cast<int>(std::llround(context_window_s * 100.0));
    }
};

// ---------------------------------------------------------------------------
// Events: the observable protocol of the streaming engine.
// A provisional StepLabeled is finalized either by a later VerdictApplied
// covering its run, or implicitly as the provisional label when speech
// resumes before any verdict (RunCancelled marks the discarded escalation).
// ---------------------------------------------------------------------------

struct StepLabeled {
    int step;
    TurnState state;
    bool provisional;
};

struct EscalationIssued {
    uint64_t id;
    int run_start_step;
    double window_end_s;     // stream time at the end of the escalating step
    int window_end_frame;    // exclusive stream frame index; exact
    FeatureSequence window;  // trailing context, raw log-mel frames
};

struct VerdictApplied {
    uint64_t id;
    int run_start_step;
    int run_end_step;  // exclusive; grows implicitly while the run persists
    TurnState state;
};

struct RunCancelled {
    uint64_t id;
};

using Event = std::variant<StepLabeled, EscalationIssued, VerdictApplied, RunCancelled>;

struct Verdict {
    TurnState state;  // Pause or Gap
    float p_gap;
};

class VerdictProvider {
public:
    virtual ~VerdictProvider() = default;
    virtual Verdict classify(const EscalationIssued& request) = 0;
};

/// Wraps heavy_forward; the verdict is Gap iff p_gap >= 0.5.
class InProcessProvider : public VerdictProvider {
public:
    explicit InProcessProvider(const nn::HeavyParams<float>& params)
        : params_(params) {}
    Verdict classify(const EscalationIssued& request) override {
        const auto probs = nn::heavy_forward(request.window, params_);
        const float p_gap = probs[nn::kGapIndex];
        return {p_gap >= 0.5f ? TurnState::Gap : TurnState::Pause, p_gap};
    }

private:
    const nn::HeavyParams<float>& params_;
};

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Single-owner state machine. One logical thread pushes steps; verdicts are
/// delivered into the same stream. Exactly one escalation is issued per
/// maximal predicted-silence run that reaches the debounce length.
class CascadeEngine {
public:
    CascadeEngine(const nn::LightParams<float>& light, VerdictProvider* provider,
                  CascadeConfig cfg = {})
        : cfg_(cfg),
          provider_(provider),
          light_(light),
          runner_(light),
          n_mels_(light.arch.n_mels),
          ring_(static_cast<size_t>(cfg.context_frames()) * light.arch.n_mels, 0.0) {
        cfg_.validate();
    }

    /// Consumes the 10 raw log-mel frames of one 100 ms step.
    std::vector<Event> push_step(const double* frames) {
        if (finalized_) throw CascadeError("push_step after finalize");
        std::vector<Event> events;
        push_ring(frames);

        std::vector<float> block(static_cast<size_t>(kFramesPerStep) * n_mels_);
        for (size_t i = 0; i < block.size(); ++i)
            block[i] = static_cast<float>((frames[i] + nn::kFeatureShift) *
                                          nn::kFeatureScale);
        const float p_su = runner_.step(block.data());
        const bool is_su = p_su >= cfg_.su_threshold;
        const int s = step_++;

        if (is_su) {
            if (run_) {
                if (!run_->verdict) {
                    // Speech resumed: the silence was a pause by definition.
                    for (int i = run_->start_step; i < s; ++i) provisional_[i] = false;
                    if (run_->escalation_id && !delivered_.count(*run_->escalation_id)) {
                        cancelled_.insert(*run_->escalation_id);
                        events.push_back(RunCancelled{*run_->escalation_id});
                    }
                }
                run_.reset();
            }
            labels_.push_back(TurnState::SU);
            provisional_.push_back(false);
            events.push_back(StepLabeled{s, TurnState::SU, false});
            return events;
        }

        if (!run_) run_ = Run{s, std::nullopt, std::nullopt};
        if (run_->verdict) {
            labels_.push_back(*run_->verdict);
            provisional_.push_back(false);
            events.push_back(StepLabeled{s, *run_->verdict, false});
        } else {
            labels_.push_back(cfg_.provisional_label);
            provisional_.push_back(true);
            events.push_back(StepLabeled{s, cfg_.provisional_label, true});
            const int run_len = s - run_->start_step + 1;
            if (run_len >= cfg_.debounce_steps && !run_->escalation_id) {
                const uint64_t id = next_id_++;
                run_->escalation_id = id;
                issued_.insert(id);
                ++escalations_;
                events.push_back(EscalationIssued{id, run_->start_step,
                                                  (s + 1) * 0.1,
                                                  (s + 1) * kFramesPerStep,
                                                  ring_window()});
            }
        }
        return events;
    }

    std::vector<Event> deliver_verdict(uint64_t id, TurnState verdict, float p_gap) {
        if (verdict == TurnState::SU)
            throw CascadeError("verdict must be Pause or Gap");
        if (!issued_.count(id))
            throw CascadeError("unknown escalation id " + std::to_string(id));
        if (delivered_.count(id))
            throw CascadeError("duplicate delivery for escalation id " +
                               std::to_string(id));
        delivered_.insert(id);
        if (cancelled_.count(id)) return {};  // stale; the run stayed Pause

        if (!run_ || run_->escalation_id != id)
            throw CascadeError("escalation id does not match the open run");
        run_->verdict = verdict;
        (void)p_gap;
        for (int i = run_->start_step; i < step_; ++i) {
            labels_[i] = verdict;
            provisional_[i] = false;
        }
        return {VerdictApplied{id, run_->start_step, step_, verdict}};
    }

    /// Ends the stream. A still-open run that never reached the debounce
    /// length is resolved through one synchronous escalation.
    FrameTrack finalize(std::vector<Event>* events = nullptr) {
        if (finalized_) throw CascadeError("finalize called twice");
        if (run_ && !run_->verdict) {
            if (run_->escalation_id && !delivered_.count(*run_->escalation_id))
                throw CascadeError("escalation " +
                                   std::to_string(*run_->escalation_id) +
                                   " still pending at finalize");
            if (!run_->escalation_id) {
                if (!provider_)
                    throw CascadeError("provider unreachable at finalize");
                const uint64_t id = next_id_++;
                issued_.insert(id);
                run_->escalation_id = id;
                ++escalations_;
                EscalationIssued request{id, run_->start_step, step_ * 0.1,
                                         step_ * kFramesPerStep, ring_window()};
                if (events) events->push_back(request);
                const Verdict v = provider_->classify(request);
                delivered_.insert(id);
                for (int i = run_->start_step; i < step_; ++i) {
                    labels_[i] = v.state;
                    provisional_[i] = false;
                }
                if (events)
                    events->push_back(
                        VerdictApplied{id, run_->start_step, step_, v.state});
            }
        }
        finalized_ = true;
        FrameTrack track;
        track.step_ms = kStepMs;
        track.labels = labels_;
        return track;
    }

    uint64_t escalation_count() const { return escalations_; }
    int steps_pushed() const { return step_; }

    static constexpr int kFramesPerStep = nn::LightArch::kFramesPerStep;

private:
    struct Run {
        int start_step;
        std::optional<uint64_t> escalation_id;
        std::optional<TurnState> verdict;
    };

    void push_ring(const double* frames) {
        const size_t n = static_cast<size_t>(kFramesPerStep) * n_mels_;
        const size_t cap = ring_.size();
        for (size_t i = 0; i < n; ++i) ring_[(ring_pos_ + i) % cap] = frames[i];
        ring_pos_ = (ring_pos_ + n) % cap;
        ring_filled_ = std::min(cap, ring_filled_ + n);
    }

    /// Ring contents in time order as a raw feature sequence.
    FeatureSequence ring_window() const {
        FeatureSequence w;
        w.n_mels = n_mels_;
        w.hop_ms = 10;
        w.n_frames = static_cast<int>(ring_filled_ / n_mels_);
        w.data.resize(ring_filled_);
        const size_t cap = ring_.size();
        const size_t start = (ring_pos_ + cap - ring_filled_) % cap;
        for (size_t i = 0; i < ring_filled_; ++i)
            w.data[i] = ring_[(start + i) % cap];
        return w;
    }

    CascadeConfig cfg_;
    VerdictProvider* provider_;
    const nn::LightParams<float>& light_;
    nn::LightRunner<float> runner_;
    int n_mels_;

    std::vector<double> ring_;
    size_t ring_pos_ = 0;
    size_t ring_filled_ = 0;

    int step_ = 0;
    std::optional<Run> run_;
    std::vector<TurnState> labels_;
    std::vector<uint8_t> provisional_;
    uint64_t next_id_ = 1;
    uint64_t escalations_ = 0;
    std::set<uint64_t> issued_, delivered_, cancelled_;
    bool finalized_ = false;
};

// ---------------------------------------------------------------------------
// Offline replay
// ---------------------------------------------------------------------------

struct OfflineRun {
    FrameTrack track;
    uint64_t escalations = 0;
    int steps = 0;
    std::vector<Event> events;
};

/// Pushes every full step, answers escalations through the provider
/// synchronously, and finalizes.
inline OfflineRun run_offline_features(const FeatureSequence& features,
                                       const nn::LightParams<float>& light_params,
                                       VerdictProvider& provider,
                                       const CascadeConfig& cfg = {},
                                       bool keep_events = false) {
    CascadeEngine engine(light_params, &provider, cfg);
    OfflineRun result;
    const int n_steps = features.n_frames / CascadeEngine::kFramesPerStep;
    for (int i = 0; i < n_steps; ++i) {
        const double* block = features.frame(i * CascadeEngine::kFramesPerStep);
        auto events = engine.push_step(block);
        for (auto& ev : events) {
            std::vector<Event> applied;
            if (const auto* esc = std::get_if<EscalationIssued>(&ev)) {
                const Verdict v = provider.classify(*esc);
                applied = engine.deliver_verdict(esc->id, v.state, v.p_gap);
            }
            if (keep_events) {
                result.events.push_back(std::move(ev));
                for (auto& a : applied) result.events.push_back(std::move(a));
            }
        }
    }
    result.track = engine.finalize(keep_events ? &result.events : nullptr);
    result.escalations = engine.escalation_count();
    result.steps = engine.steps_pushed();
    return result;
}

inline OfflineRun run_offline(const AudioBuffer& audio,
                              const nn::LightParams<float>& light_params,
                              VerdictProvider& provider,
                              const CascadeConfig& cfg = {},
                              const FeatureConfig& feature_cfg = {},
                              bool keep_events = false) {
    const FeatureSequence features = extract_features(audio, feature_cfg);
    return run_offline_features(features, light_params, provider, cfg, keep_events);
}

}  // namespace etd
