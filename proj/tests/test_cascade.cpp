#include <catch2/catch_amalgamated.hpp>

#include "etd/cascade.hpp"
#include "etd/datagen.hpp"

using namespace etd;
using nn::LightArch;
using nn::LightParams;

namespace {

// A hand-wired light model whose SU probability tracks the block's energy:
// both convs pass the center tap through, the GRU update gate is forced shut
// so h = tanh(sum of conv features), and the head thresholds it. Silence
// blocks (normalized 0) score ~sigma(-4), speech blocks score ~sigma(+6).
LightParams<float> gate_light() {
    LightArch a;
    a.n_mels = 4;
    a.conv1_channels = 1;
    a.conv2_channels = 1;
    a.gru_hidden = 1;
    auto p = LightParams<float>::make(a, 1).zeros_like();
    p.arch = a;
    p.conv1.w(0, 4) = 1.0f;  // center tap of the 3x3 kernel
    p.conv2.w(0, 4) = 1.0f;
    // z gate shut (bias -30 => z ~ 0), r irrelevant, n = tanh(w_n . x)
    p.gru.bias[0] = -30.0f;
    for (int j = 0; j < p.gru.input_dim; ++j) p.gru.w_ih(2, j) = 1.0f;
    p.out_w[0] = 10.0f;
    p.out_b[0] = -4.0f;
    return p;
}

// Raw feature blocks: silence sits at the log floor, speech well above it.
std::vector<double> block(bool speech, int n_mels = 4) {
    const double v = speech ? -3.0 : -nn::kFeatureShift;
    return std::vector<double>(static_cast<size_t>(10) * n_mels, v);
}

struct ScriptedProvider : VerdictProvider {
    std::vector<Verdict> script;
    size_t next = 0;
    std::vector<EscalationIssued> seen;

    explicit ScriptedProvider(std::vector<Verdict> s = {}) : script(std::move(s)) {}
    Verdict classify(const EscalationIssued& req) override {
        seen.push_back(req);
        if (next < script.size()) return script[next++];
        return {TurnState::Gap, 0.9f};
    }
};

template <class E>
std::vector<E> events_of(const std::vector<Event>& events) {
    std::vector<E> out;
    for (const auto& ev : events)
        if (const auto* e = std::get_if<E>(&ev)) out.push_back(*e);
    return out;
}

}  // namespace

TEST_CASE("gate light model separates speech from silence") {
    const auto p = gate_light();
    nn::LightRunner<float> runner(p);
    std::vector<float> speech_norm, silence_norm;
    auto norm = [&](const std::vector<double>& raw) {
        std::vector<float> out(raw.size());
        for (size_t i = 0; i < raw.size(); ++i)
            out[i] = static_cast<float>((raw[i] + nn::kFeatureShift) * nn::kFeatureScale);
        return out;
    };
    const auto sp = norm(block(true));
    const auto si = norm(block(false));
    REQUIRE(runner.step(sp.data()) > 0.5f);
    REQUIRE(runner.step(si.data()) < 0.5f);
}

TEST_CASE("a pure speech stream never escalates") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    int su_steps = 0;
    for (int i = 0; i < 10; ++i) {
        const auto events = engine.push_step(block(true).data());
        const auto labeled = events_of<StepLabeled>(events);
        REQUIRE(labeled.size() == 1);
        REQUIRE(labeled[0].state == TurnState::SU);
        REQUIRE_FALSE(labeled[0].provisional);
        REQUIRE(events_of<EscalationIssued>(events).empty());
        ++su_steps;
    }
    REQUIRE(engine.escalation_count() == 0);
    const FrameTrack track = engine.finalize();
    REQUIRE(track.labels.size() == 10);
    for (const auto l : track.labels) REQUIRE(l == TurnState::SU);
}

TEST_CASE("the debounce triggers exactly one escalation per run") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    engine.push_step(block(true).data());
    auto ev3 = engine.push_step(block(false).data());
    REQUIRE(events_of<EscalationIssued>(ev3).empty());
    REQUIRE(events_of<StepLabeled>(ev3)[0].provisional);
    auto ev4 = engine.push_step(block(false).data());
    const auto escalations = events_of<EscalationIssued>(ev4);
    REQUIRE(escalations.size() == 1);
    REQUIRE(escalations[0].run_start_step == 2);
    // run persists: no further escalation
    for (int i = 0; i < 5; ++i) {
        const auto more = engine.push_step(block(false).data());
        REQUIRE(events_of<EscalationIssued>(more).empty());
    }
    REQUIRE(engine.escalation_count() == 1);
}

TEST_CASE("a one-step dip below the debounce is finalized as pause") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    engine.push_step(block(false).data());
    engine.push_step(block(true).data());
    // trailing speech means no open run at finalize
    const FrameTrack track = engine.finalize();
    REQUIRE(engine.escalation_count() == 0);
    REQUIRE(track.labels ==
            std::vector<TurnState>{TurnState::SU, TurnState::Pause, TurnState::SU});
}

TEST_CASE("a verdict relabels the whole run, including later steps") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    uint64_t id = 0;
    for (int i = 0; i < 5; ++i) {
        const auto events = engine.push_step(block(false).data());
        for (const auto& e : events_of<EscalationIssued>(events)) id = e.id;
    }
    REQUIRE(id != 0);
    const auto applied = engine.deliver_verdict(id, TurnState::Gap, 0.8f);
    REQUIRE(applied.size() == 1);
    const auto& v = std::get<VerdictApplied>(applied[0]);
    REQUIRE(v.run_start_step == 1);
    REQUIRE(v.state == TurnState::Gap);
    // Steps pushed after the verdict stay on the verdict label, final.
    const auto more = engine.push_step(block(false).data());
    const auto labeled = events_of<StepLabeled>(more);
    REQUIRE(labeled[0].state == TurnState::Gap);
    REQUIRE_FALSE(labeled[0].provisional);
    const FrameTrack track = engine.finalize();
    for (size_t i = 1; i < track.labels.size(); ++i)
        REQUIRE(track.labels[i] == TurnState::Gap);
}

TEST_CASE("stale verdicts are discarded after speech resumes") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    uint64_t id = 0;
    for (int i = 0; i < 3; ++i) {
        const auto events = engine.push_step(block(false).data());
        for (const auto& e : events_of<EscalationIssued>(events)) id = e.id;
    }
    const auto resume = engine.push_step(block(true).data());
    const auto cancelled = events_of<RunCancelled>(resume);
    REQUIRE(cancelled.size() == 1);
    REQUIRE(cancelled[0].id == id);
    // Late verdict: discarded, run stays Pause.
    const auto late = engine.deliver_verdict(id, TurnState::Gap, 0.9f);
    REQUIRE(late.empty());
    const FrameTrack track = engine.finalize();
    REQUIRE(track.labels == std::vector<TurnState>{TurnState::SU, TurnState::Pause,
                                                   TurnState::Pause, TurnState::Pause,
                                                   TurnState::SU});
}

TEST_CASE("delivery errors are distinct") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    uint64_t id = 0;
    for (int i = 0; i < 2; ++i) {
        const auto events = engine.push_step(block(false).data());
        for (const auto& e : events_of<EscalationIssued>(events)) id = e.id;
    }
    REQUIRE_THROWS_AS(engine.deliver_verdict(id + 5, TurnState::Gap, 0.9f),
                      CascadeError);
    engine.deliver_verdict(id, TurnState::Gap, 0.9f);
    REQUIRE_THROWS_AS(engine.deliver_verdict(id, TurnState::Gap, 0.9f),
                      CascadeError);
}

TEST_CASE("finalize resolves a short trailing run with one synchronous escalation") {
    const auto p = gate_light();
    ScriptedProvider provider({{TurnState::Gap, 0.95f}});
    CascadeEngine engine(p, &provider);
    engine.push_step(block(true).data());
    engine.push_step(block(false).data());  // below debounce at stream end
    std::vector<Event> events;
    const FrameTrack track = engine.finalize(&events);
    REQUIRE(provider.seen.size() == 1);
    REQUIRE(engine.escalation_count() == 1);
    REQUIRE(track.labels ==
            std::vector<TurnState>{TurnState::SU, TurnState::Gap});
    REQUIRE(events_of<VerdictApplied>(events).size() == 1);
}

TEST_CASE("empty stream finalizes to an empty track") {
    const auto p = gate_light();
    ScriptedProvider provider;
    CascadeEngine engine(p, &provider);
    const FrameTrack track = engine.finalize();
    REQUIRE(track.labels.empty());
    REQUIRE_THROWS_AS(engine.push_step(block(true).data()), CascadeError);
}

TEST_CASE("final labels never flip the light model's speech decision") {
    const auto p = gate_light();
    Rng rng(31);
    for (int iter = 0; iter < 20; ++iter) {
        ScriptedProvider provider;
        CascadeEngine engine(p, &provider);
        std::vector<bool> speech;
        const int n = static_cast<int>(rng.uniform_int(1, 30));
        for (int i = 0; i < n; ++i) speech.push_back(rng.bernoulli(0.6));
        for (int i = 0; i < n; ++i) {
            const auto events = engine.push_step(block(speech[i]).data());
            for (const auto& e : events_of<EscalationIssued>(events))
                engine.deliver_verdict(e.id, TurnState::Gap, 0.8f);
        }
        const FrameTrack track = engine.finalize();
        // Independent run-length oracle on the speech pattern.
        uint64_t expected_escalations = 0;
        int run = 0;
        bool counted = false;
        for (int i = 0; i < n; ++i) {
            if (!speech[i]) {
                ++run;
                if (run == 2 && !counted) {
                    ++expected_escalations;
                    counted = true;
                }
            } else {
                run = 0;
                counted = false;
            }
        }
        if (run >= 1 && run < 2) ++expected_escalations;  // finalize edge case
        REQUIRE(engine.escalation_count() == expected_escalations);
        for (int i = 0; i < n; ++i) {
            if (speech[i]) {
                REQUIRE(track.labels[i] == TurnState::SU);
            } else {
                REQUIRE(track.labels[i] != TurnState::SU);
            }
        }
    }
}

TEST_CASE("offline replay is deterministic and counts one escalation per run") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithPause;
    cfg.truncate_prob = 0.0;
    Rng rng(17);
    const auto specs = draw_utterance_specs(cfg, rng);
    const LabeledSample sample = build_conversation(specs, cfg, rng);

    const auto light = LightParams<float>::make(LightArch{}, 3);
    ScriptedProvider provider;
    const OfflineRun a = run_offline(sample.audio, light, provider);
    ScriptedProvider provider2;
    const OfflineRun b = run_offline(sample.audio, light, provider2);
    REQUIRE(a.track == b.track);
    REQUIRE(a.escalations == b.escalations);
    REQUIRE(a.steps == b.steps);
    REQUIRE(a.track.labels.size() == static_cast<size_t>(a.steps));

    // Escalation count equals maximal >= debounce non-SU runs of the light
    // label stream (plus at most the finalize edge case).
    const FeatureSequence feats = extract_features(sample.audio);
    const auto probs = nn::light_forward(feats, light);
    uint64_t expected = 0;
    int run = 0;
    for (const float pr : probs) {
        if (pr < 0.5f) {
            if (++run == 2) ++expected;
        } else {
            run = 0;
        }
    }
    if (run == 1) ++expected;
    REQUIRE(a.escalations == expected);
}

TEST_CASE("all-silence audio yields one run labeled by the single verdict") {
    AudioBuffer silence;
    silence.samples.assign(16000 * 2, 0);
    const auto light = gate_light();
    FeatureConfig fc;
    fc.n_mels = 4;
    fc.fmax_hz = 8000.0;
    ScriptedProvider provider({{TurnState::Gap, 0.99f}});
    const OfflineRun run = run_offline(silence, light, provider, {}, fc);
    REQUIRE(run.escalations == 1);
    REQUIRE(run.track.labels.size() == 19);
    for (const auto l : run.track.labels) REQUIRE(l == TurnState::Gap);
}
