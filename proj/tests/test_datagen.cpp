#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "etd/datagen.hpp"

using namespace etd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("etd_dg_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

UtteranceSpec utt(double dur, uint64_t seed) {
    UtteranceSpec s;
    s.duration_s = dur;
    s.base_f0 = 180.0;
    s.amplitude = 0.5;
    s.seed = seed;
    return s;
}

double segment_rms(const LabeledSample& s, size_t seg_idx, double guard_s) {
    const double lo = s.track.entries[seg_idx].start_s + guard_s;
    const double hi = s.track.segment_end(seg_idx) - guard_s;
    if (hi <= lo) return 0.0;
    const auto a = static_cast<size_t>(lo * kSampleRate);
    const auto b = static_cast<size_t>(hi * kSampleRate);
    return rms_fullscale(s.audio.samples.data() + a, b - a);
}

}  // namespace

TEST_CASE("base variant is one speaking unit plus a trailing gap") {
    DatagenConfig cfg;
    cfg.variant = Variant::Base;
    Rng rng(1);
    const LabeledSample s = build_conversation({utt(2.0, 5)}, cfg, rng);
    REQUIRE(s.track.entries.size() == 2);
    REQUIRE(s.track.entries[0].state == TurnState::SU);
    REQUIRE(s.track.entries[1].state == TurnState::Gap);
    REQUIRE(s.track.entries[1].start_s == Catch::Approx(2.0));
    REQUIRE(s.track.total_duration_s == Catch::Approx(3.0));
    REQUIRE(s.audio.samples.size() == 48000);
}

TEST_CASE("with_pause inserts a bounded pause") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithPause;
    cfg.truncate_prob = 0.0;
    Rng rng(7);
    const LabeledSample s =
        build_conversation({utt(1.0, 1), utt(1.5, 2)}, cfg, rng);
    REQUIRE(s.track.entries.size() == 4);
    REQUIRE(s.track.entries[1].state == TurnState::Pause);
    const double pause_dur = s.track.segment_end(1) - s.track.entries[1].start_s;
    REQUIRE(pause_dur >= 1.5);
    REQUIRE(pause_dur <= 3.0);
    REQUIRE(s.track.entries.back().state == TurnState::Gap);
}

TEST_CASE("truncated samples end in a pause") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithPause;
    cfg.truncate_prob = 1.0;
    Rng rng(3);
    const LabeledSample s =
        build_conversation({utt(1.0, 1), utt(1.0, 2)}, cfg, rng);
    REQUIRE(s.track.entries.back().state == TurnState::Pause);
    for (const auto& e : s.track.entries) REQUIRE(e.state != TurnState::Gap);
}

TEST_CASE("with_filler extends the pre-pause speech by the filler") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithFiller;
    cfg.truncate_prob = 0.0;
    Rng rng(11);
    const LabeledSample s =
        build_conversation({utt(1.0, 1), utt(1.0, 2)}, cfg, rng);
    REQUIRE(s.track.entries[0].state == TurnState::SU);
    REQUIRE(s.track.entries[1].state == TurnState::Pause);
    // first SU runs through the utterance plus the 250 ms filler
    REQUIRE(s.track.entries[1].start_s == Catch::Approx(1.25).margin(1e-3));
}

TEST_CASE("pause variants require two utterances") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithPause;
    Rng rng(1);
    REQUIRE_THROWS_AS(build_conversation({utt(1.0, 1)}, cfg, rng), SpecError);
    REQUIRE_THROWS_AS(build_conversation({}, cfg, rng), SpecError);
}

TEST_CASE("generated audio matches its labels acoustically") {
    DatagenConfig cfg;
    cfg.variant = Variant::WithFiller;
    cfg.truncate_prob = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const auto specs = draw_utterance_specs(cfg, rng);
        const LabeledSample s = build_conversation(specs, cfg, rng);
        for (size_t i = 0; i < s.track.entries.size(); ++i) {
            if (s.track.entries[i].state == TurnState::SU) {
                REQUIRE(segment_rms(s, i, 0.0) >= 0.02);
            } else {
                REQUIRE(segment_rms(s, i, 0.05) < 0.005);
            }
        }
    }
}

TEST_CASE("corpus generation is deterministic byte for byte") {
    TempDir a("det_a"), b("det_b");
    DatagenConfig cfg;
    cfg.variant = Variant::WithPause;
    cfg.n_samples = 6;
    cfg.seed = 7;
    cfg.out_dir = a.str();
    const Manifest ma = generate_corpus(cfg);
    cfg.out_dir = b.str();
    const Manifest mb = generate_corpus(cfg);
    REQUIRE(slurp(a.str() + "/manifest.json") == slurp(b.str() + "/manifest.json"));
    for (const auto& e : ma.entries) {
        REQUIRE(slurp(ma.resolve(e.label_path)) == slurp(mb.resolve(e.label_path)));
        REQUIRE(slurp(ma.resolve(e.wav_path)) == slurp(mb.resolve(e.wav_path)));
    }
    REQUIRE(ma.entries.size() == 6);
    for (const auto& e : ma.entries) {
        const SegmentTrack t = read_label_file(ma.resolve(e.label_path));
        bool has_pause = false;
        for (const auto& seg : t.entries) has_pause |= seg.state == TurnState::Pause;
        REQUIRE(has_pause);
    }
}

TEST_CASE("manifest stats equal recomputation from entries") {
    TempDir dir("stats");
    DatagenConfig cfg;
    cfg.variant = Variant::Base;
    cfg.n_samples = 5;
    cfg.seed = 2;
    cfg.out_dir = dir.str();
    generate_corpus(cfg);
    nlohmann::json j;
    std::ifstream(dir.str() + "/manifest.json") >> j;
    double total = 0.0;
    for (const auto& e : j["entries"]) total += e["duration_s"].get<double>();
    REQUIRE(j["stats"]["total"]["n_samples"].get<int>() == 5);
    REQUIRE(j["stats"]["total"]["total_duration_s"].get<double>() ==
            Catch::Approx(total).epsilon(0));
    REQUIRE(j["stats"]["per_variant"]["base"]["n_samples"].get<int>() == 5);
}

TEST_CASE("filter_samples removes tracks with neither pause nor gap") {
    TempDir dir("filter");
    DatagenConfig cfg;
    cfg.variant = Variant::Base;
    cfg.n_samples = 1;
    cfg.seed = 9;
    cfg.out_dir = dir.str();
    Manifest m = generate_corpus(cfg);
    SegmentTrack su_only;
    su_only.entries.push_back({TurnState::SU, 0.0});
    su_only.total_duration_s = 1.0;
    write_label_file(su_only, dir.str() + "/su_only.json");
    AudioBuffer silent;
    silent.samples.assign(16000, 0);
    write_wav(silent, dir.str() + "/su_only.wav");
    m.entries.push_back({"su_only", "su_only.wav", "su_only.json", "base", 1.0});

    const Manifest filtered = filter_samples(m);
    REQUIRE(filtered.entries.size() == 1);
    REQUIRE(filtered.entries[0].sample_id == m.entries[0].sample_id);
    const Manifest twice = filter_samples(filtered);
    REQUIRE(twice.entries.size() == filtered.entries.size());

    const Manifest empty;
    REQUIRE(filter_samples(empty).entries.empty());
}

TEST_CASE("split assignment is stable and roughly 80/10/10") {
    int train = 0, dev = 0, test = 0;
    for (int i = 0; i < 2000; ++i) {
        const std::string id = "with_pause_" + std::to_string(i);
        const std::string s = split_of(id);
        REQUIRE(s == split_of(id));
        if (s == "train") ++train;
        else if (s == "dev") ++dev;
        else ++test;
    }
    REQUIRE(train > 1400);
    REQUIRE(dev > 50);
    REQUIRE(test > 50);
}

TEST_CASE("import_real labels two-speaker files and skips crowded ones") {
    TempDir dir("import");
    UtteranceSpec ua = utt(1.0, 21);
    AudioBuffer conv;
    auto append = [&](const AudioBuffer& b) {
        conv.samples.insert(conv.samples.end(), b.samples.begin(), b.samples.end());
    };
    append(synth_utterance(ua));                       // A: [0, 1.0)
    conv.samples.insert(conv.samples.end(), 4800, 0);  // 0.3 s silence
    ua.seed = 22;
    append(synth_utterance(ua));                       // B: [1.3, 2.3)
    conv.samples.insert(conv.samples.end(), 4800, 0);
    ua.seed = 23;
    append(synth_utterance(ua));                       // A: [2.6, 3.6)
    const std::string wav_path = dir.str() + "/conv.wav";
    write_wav(conv, wav_path);

    const std::string diar2 = dir.str() + "/conv.tsv";
    std::ofstream(diar2) << "A\t0.0\t1.0\nB\t1.3\t2.3\nA\t2.6\t3.6\n";
    const std::string diar3 = dir.str() + "/crowd.tsv";
    std::ofstream(diar3) << "A\t0.0\t1.0\nB\t1.3\t2.3\nC\t2.6\t3.6\n";

    int skipped = 0;
    ImportOptions opts;
    opts.truncate_prob = 0.0;
    const Manifest m = import_real({diar2, diar3}, {wav_path, wav_path},
                                   dir.str() + "/out", opts, &skipped);
    REQUIRE(skipped == 1);
    REQUIRE(m.entries.size() == 2);  // speakers A and B of the eligible file

    for (const auto& e : m.entries) {
        const SegmentTrack t = read_label_file(m.resolve(e.label_path));
        REQUIRE_NOTHROW(validate_track(t));
        const AudioBuffer cropped = read_wav(m.resolve(e.wav_path));
        REQUIRE(std::abs(cropped.duration_s() - t.total_duration_s) < 2e-3);
        if (e.sample_id.ends_with("_B")) {
            REQUIRE(t.entries.back().state == TurnState::Gap);
        }
    }

    const Manifest none = import_real({}, {}, dir.str() + "/out2");
    REQUIRE(none.entries.empty());
}
