#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "etd/audio.hpp"
#include "etd/common.hpp"
#include "etd/labels.hpp"

namespace etd {

enum class Variant { Base, WithPause, WithFiller };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::Base: return "base";
        case Variant::WithPause: return "with_pause";
        case Variant::WithFiller: return "with_filler";
    }
    return "?";
}

inline std::optional<Variant> variant_from_string(const std::string& s) {
    if (s == "base") return Variant::Base;
    if (s == "with_pause") return Variant::WithPause;
    if (s == "with_filler") return Variant::WithFiller;
    return std::nullopt;
}

struct DatagenConfig {
    Variant variant = Variant::WithPause;
    int n_samples = 100;
    double pause_min_s = 1.5;
    double pause_max_s = 3.0;
    double truncate_prob = 0.5;
    int filler_duration_ms = 250;
    uint64_t seed = 1;
    std::string out_dir = "data";

    // Conversation shape knobs; the trailing silence realizes the turn end.
    int min_utterances = 2;
    int max_utterances = 4;
    double utt_min_s = 1.0;
    double utt_max_s = 3.0;
    double trailing_gap_s = 1.0;

    void validate() const {
        if (pause_min_s > pause_max_s) throw SpecError("pause_min_s > pause_max_s");
        if (truncate_prob < 0.0 || truncate_prob > 1.0)
            throw SpecError("truncate_prob out of [0, 1]");
        if (n_samples < 0) throw SpecError("n_samples < 0");
    }
};

struct LabeledSample {
    AudioBuffer audio;
    SegmentTrack track;
    std::string sample_id;
    std::string variant;
};

struct ManifestEntry {
    std::string sample_id;
    std::string wav_path;    // relative to the manifest's directory
    std::string label_path;  // relative to the manifest's directory
    std::string variant;
    double duration_s = 0.0;
};

struct CorpusStats {
    int64_t n_samples = 0;
    double total_duration_s = 0.0;
    double avg_duration_s = 0.0;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string dir;  // where relative paths resolve; not serialized

    std::string resolve(const std::string& rel) const {
        if (rel.empty() || rel.front() == '/' || dir.empty()) return rel;
        return (std::filesystem::path(dir) / rel).string();
    }
};

/// Deterministic 80/10/10 split keyed on the sample id, independent of
/// generation order so regrowing a corpus keeps earlier assignments.
inline std::string split_of(const std::string& sample_id) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : sample_id) h = (h ^ c) * 0x100000001b3ULL;
    const uint64_t bucket = splitmix64(h) % 10;
    if (bucket < 8) return "train";
    if (bucket == 8) return "dev";
    return "test";
}

// ---------------------------------------------------------------------------
// Label file and manifest JSON
// ---------------------------------------------------------------------------

inline nlohmann::json track_to_json(const SegmentTrack& track) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& e : track.entries)
        segs.push_back({{"state", to_string(e.state)}, {"start_s", e.start_s}});
    return {{"duration_s", track.total_duration_s}, {"segments", segs}};
}

inline SegmentTrack track_from_json(const nlohmann::json& j) {
    SegmentTrack t;
    t.total_duration_s = j.at("duration_s").get<double>();
    for (const auto& s : j.at("segments")) {
        const auto state = turn_state_from_string(s.at("state").get<std::string>());
        if (!state) throw Error("unknown state in label file: " + s.dump());
        t.entries.push_back({*state, s.at("start_s").get<double>()});
    }
    return t;
}

inline void write_label_file(const SegmentTrack& track, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write label file: " + path);
    f << track_to_json(track).dump(2) << "\n";
}

inline SegmentTrack read_label_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read label file: " + path);
    nlohmann::json j;
    f >> j;
    return track_from_json(j);
}

inline CorpusStats stats_over(const std::vector<const ManifestEntry*>& entries) {
    CorpusStats s;
    s.n_samples = static_cast<int64_t>(entries.size());
    for (const auto* e : entries) s.total_duration_s += e->duration_s;
    s.avg_duration_s = s.n_samples ? s.total_duration_s / s.n_samples : 0.0;
    return s;
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"sample_id", e.sample_id},
                           {"wav_path", e.wav_path},
                           {"label_path", e.label_path},
                           {"variant", e.variant},
                           {"duration_s", e.duration_s}});
    }
    auto stats_json = [](const CorpusStats& s) {
        return nlohmann::json{{"n_samples", s.n_samples},
                              {"total_duration_s", s.total_duration_s},
                              {"avg_duration_s", s.avg_duration_s}};
    };
    std::vector<const ManifestEntry*> all;
    std::map<std::string, std::vector<const ManifestEntry*>> by_variant;
    for (const auto& e : m.entries) {
        all.push_back(&e);
        by_variant[e.variant].push_back(&e);
    }
    nlohmann::json per_variant = nlohmann::json::object();
    for (const auto& [variant, list] : by_variant)
        per_variant[variant] = stats_json(stats_over(list));
    return {{"entries", entries},
            {"stats", {{"total", stats_json(stats_over(all))},
                       {"per_variant", per_variant}}}};
}

inline void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write manifest: " + path);
    f << manifest_to_json(m).dump(2) << "\n";
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read manifest: " + path);
    nlohmann::json j;
    f >> j;
    Manifest m;
    m.dir = std::filesystem::path(path).parent_path().string();
    for (const auto& e : j.at("entries")) {
        m.entries.push_back({e.at("sample_id").get<std::string>(),
                             e.at("wav_path").get<std::string>(),
                             e.at("label_path").get<std::string>(),
                             e.at("variant").get<std::string>(),
                             e.at("duration_s").get<double>()});
    }
    return m;
}

// ---------------------------------------------------------------------------
// Conversation assembly
// ---------------------------------------------------------------------------

namespace detail {

inline void append_silence(std::vector<int16_t>& samples, int n) {
    samples.insert(samples.end(), n, 0);
}

inline void append_audio(std::vector<int16_t>& samples, const AudioBuffer& b) {
    samples.insert(samples.end(), b.samples.begin(), b.samples.end());
}

}  // namespace detail

/// Assembles one labeled conversation. Draw order from rng: pause position,
/// pause duration, truncation coin, filler pitch/seed (filler variant only).
/// Contours are overridden by construction: the utterance before an inserted
/// pause speaks with a level (hesitation) contour, the turn-final utterance
/// with a falling one.
inline LabeledSample build_conversation(std::vector<UtteranceSpec> specs,
                                        const DatagenConfig& cfg, Rng& rng) {
    cfg.validate();
    if (specs.empty()) throw SpecError("no utterance specs");
    const bool with_pause = cfg.variant != Variant::Base;
    if (with_pause && specs.size() < 2)
        throw SpecError("pause variants need at least two utterances");

    const int n = static_cast<int>(specs.size());
    int pause_after = -1;  // pause goes between specs[pause_after] and +1
    double pause_s = 0.0;
    bool truncate = false;
    if (with_pause) {
        pause_after = static_cast<int>(rng.uniform_int(0, n - 2));
        pause_s = rng.uniform(cfg.pause_min_s, cfg.pause_max_s);
        truncate = rng.bernoulli(cfg.truncate_prob);
    }

    std::optional<AudioBuffer> filler;
    if (cfg.variant == Variant::WithFiller) {
        // Hesitation tokens stay near the speaker's register; a detached
        // pitch would read as a terminal contour instead of a filler.
        const double filler_f0 =
            specs[pause_after].base_f0 * rng.uniform(0.95, 1.10);
        const uint64_t filler_seed = rng.next_u64();
        filler = detail::synth_voiced(cfg.filler_duration_ms / 1000.0, filler_f0,
                                      TerminalContour::Level,
                                      specs[pause_after].amplitude, filler_seed);
    }

    const int last_kept = (with_pause && truncate) ? pause_after : n - 1;
    for (int i = 0; i <= last_kept; ++i) {
        specs[i].terminal_contour = TerminalContour::Level;
    }
    if (!(with_pause && truncate))
        specs[last_kept].terminal_contour = TerminalContour::Falling;
    if (with_pause) specs[pause_after].terminal_contour = TerminalContour::Level;

    LabeledSample out;
    out.variant = to_string(cfg.variant);
    auto& samples = out.audio.samples;

    out.track.entries.push_back({TurnState::SU, 0.0});
    const int pre_count = with_pause ? pause_after + 1 : n;
    for (int i = 0; i < pre_count; ++i)
        detail::append_audio(samples, synth_utterance(specs[i]));
    if (filler) detail::append_audio(samples, *filler);

    if (with_pause) {
        const double pre_end = samples.size() / double(kSampleRate);
        out.track.entries.push_back({TurnState::Pause, pre_end});
        detail::append_silence(samples,
                               static_cast<int>(std::llround(pause_s * kSampleRate)));
        if (!truncate) {
            const double resume = samples.size() / double(kSampleRate);
            out.track.entries.push_back({TurnState::SU, resume});
            for (int i = pause_after + 1; i < n; ++i)
                detail::append_audio(samples, synth_utterance(specs[i]));
        }
    }
    if (!(with_pause && truncate)) {
        const double speech_end = samples.size() / double(kSampleRate);
        out.track.entries.push_back({TurnState::Gap, speech_end});
        detail::append_silence(
            samples, static_cast<int>(std::llround(cfg.trailing_gap_s * kSampleRate)));
    }
    out.track.total_duration_s = samples.size() / double(kSampleRate);
    validate_track(out.track);
    return out;
}

/// Per-sample utterance specs derived from (seed, index) so generation order
/// never matters. The pitch draw stays above ~140 Hz so the terminal contour
/// ratio moves the harmonic stack by at least a full mel filter.
inline std::vector<UtteranceSpec> draw_utterance_specs(const DatagenConfig& cfg,
                                                       Rng& rng) {
    const int lo = cfg.variant == Variant::Base ? 1 : std::max(2, cfg.min_utterances);
    const int n = static_cast<int>(rng.uniform_int(lo, std::max(lo, cfg.max_utterances)));
    std::vector<UtteranceSpec> specs(n);
    for (auto& s : specs) {
        s.duration_s = rng.uniform(cfg.utt_min_s, cfg.utt_max_s);
        s.base_f0 = rng.uniform(140.0, 280.0);
        s.amplitude = rng.uniform(0.35, 0.75);
        s.seed = rng.next_u64();
    }
    return specs;
}

inline Manifest generate_corpus(const DatagenConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    Manifest m;
    m.dir = cfg.out_dir;
    char id_buf[64];
    for (int k = 0; k < cfg.n_samples; ++k) {
        Rng rng(derive_stream(cfg.seed, static_cast<uint64_t>(k)));
        const auto specs = draw_utterance_specs(cfg, rng);
        LabeledSample sample = build_conversation(specs, cfg, rng);
        std::snprintf(id_buf, sizeof id_buf, "%s_%05d", to_string(cfg.variant), k);
        sample.sample_id = id_buf;
        const std::string wav_rel = sample.sample_id + ".wav";
        const std::string label_rel = sample.sample_id + ".json";
        write_wav(sample.audio, m.resolve(wav_rel));
        write_label_file(sample.track, m.resolve(label_rel));
        m.entries.push_back({sample.sample_id, wav_rel, label_rel, sample.variant,
                             sample.audio.duration_s()});
    }
    write_manifest(m, (std::filesystem::path(cfg.out_dir) / "manifest.json").string());
    return m;
}

/// Keeps exactly the samples whose track contains a Pause or Gap segment.
inline Manifest filter_samples(const Manifest& m) {
    Manifest out;
    out.dir = m.dir;
    for (const auto& e : m.entries) {
        const SegmentTrack track = read_label_file(m.resolve(e.label_path));
        const bool keep = std::any_of(
            track.entries.begin(), track.entries.end(),
            [](const auto& s) { return s.state != TurnState::SU; });
        if (keep) out.entries.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Real-data import
// ---------------------------------------------------------------------------

struct ImportOptions {
    double truncate_prob = 0.5;
    uint64_t seed = 1;
};

/// Crops an audio buffer to the kept spans of one speaker.
inline AudioBuffer crop_to_spans(const AudioBuffer& buf,
                                 const std::vector<std::pair<double, double>>& spans) {
    AudioBuffer out;
    out.sample_rate = buf.sample_rate;
    for (const auto& [lo, hi] : spans) {
        const auto a = static_cast<size_t>(std::llround(lo * buf.sample_rate));
        const auto b = std::min(buf.samples.size(),
                                static_cast<size_t>(std::llround(hi * buf.sample_rate)));
        if (a >= b) continue;
        out.samples.insert(out.samples.end(), buf.samples.begin() + a,
                           buf.samples.begin() + b);
    }
    return out;
}

/// Builds labeled samples from diarization files plus their recordings.
/// Files with more than two identified speakers are skipped (count reported
/// through `skipped`). With probability truncate_prob, audio after one
/// randomly chosen Pause/Gap segment is removed.
inline Manifest import_real(const std::vector<std::string>& diarization_files,
                            const std::vector<std::string>& wav_paths,
                            const std::string& out_dir,
                            const ImportOptions& opts = {},
                            int* skipped = nullptr) {
    if (diarization_files.size() != wav_paths.size())
        throw Error("diarization/wav list size mismatch");
    std::filesystem::create_directories(out_dir);
    Manifest m;
    m.dir = out_dir;
    int skip_count = 0;
    for (size_t i = 0; i < diarization_files.size(); ++i) {
        const DiarizationTrack diar = read_diarization_file(diarization_files[i]);
        const auto speakers = speakers_of(diar);
        if (speakers.size() > 2) {
            ++skip_count;
            std::cerr << "import-real: skipping " << diarization_files[i]
                      << " (" << speakers.size() << " speakers)\n";
            continue;
        }
        const AudioBuffer buf = read_wav(wav_paths[i]);
        int speaker_idx = 0;
        for (const auto& speaker : speakers) {
            SegmentTrack track = label_from_diarization(diar, speaker, buf.duration_s());
            AudioBuffer audio =
                crop_to_spans(buf, kept_spans(diar, speaker, buf.duration_s()));

            Rng rng(derive_stream(opts.seed, splitmix64(i) ^ speaker_idx));
            if (rng.bernoulli(opts.truncate_prob)) {
                std::vector<size_t> candidates;
                for (size_t s = 0; s < track.entries.size(); ++s)
                    if (track.entries[s].state != TurnState::SU) candidates.push_back(s);
                if (!candidates.empty()) {
                    const size_t chosen = candidates[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1))];
                    const double cut = track.segment_end(chosen);
                    track.entries.resize(chosen + 1);
                    track.total_duration_s = cut;
                    audio.samples.resize(std::min(
                        audio.samples.size(),
                        static_cast<size_t>(std::llround(cut * audio.sample_rate))));
                }
            }

            char id_buf[96];
            std::snprintf(id_buf, sizeof id_buf, "real_%04zu_%s", i, speaker.c_str());
            const std::string wav_rel = std::string(id_buf) + ".wav";
            const std::string label_rel = std::string(id_buf) + ".json";
            write_wav(audio, m.resolve(wav_rel));
            write_label_file(track, m.resolve(label_rel));
            m.entries.push_back(
                {id_buf, wav_rel, label_rel, "real", audio.duration_s()});
            ++speaker_idx;
        }
    }
    write_manifest(m, (std::filesystem::path(out_dir) / "manifest.json").string());
    if (skipped) *skipped = skip_count;
    return m;
}

}  // namespace etd
