// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Fixtures (corpora, trained weights) are built once up front and
// shared across criteria.

#include <cstdarg>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "etd/cascade.hpp"
#include "etd/datagen.hpp"
#include "etd/eval.hpp"
#include "etd/nn/flops.hpp"
#include "etd/nn/train.hpp"
#include "etd/testing/oracles.hpp"
#include "etd/wire.hpp"

using namespace etd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Harness {
public:
    void run(int id, const std::string& name, double time_limit_s,
             const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = fn();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        const bool in_time = elapsed < time_limit_s;
        const bool pass = outcome.pass && in_time;
        std::printf("[%s] criterion %d: %s (%s%s) [%.1fs/%.0fs]\n",
                    pass ? "PASS" : "FAIL", id, name.c_str(),
                    outcome.detail.c_str(), in_time ? "" : "; over time budget",
                    elapsed, time_limit_s);
        std::fflush(stdout);
        if (!pass) ++failures_;
    }

    int failures() const { return failures_; }

private:
    int failures_ = 0;
};

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof buf, format, args);
    va_end(args);
    return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

struct Fixtures {
    fs::path root;
    Manifest train_manifest;  // 500 conversations, variant mix
    Manifest test_manifest;   // 100 conversations
    nn::LightParams<float> light{};
    nn::HeavyParams<float> heavy{};
    bool light_trained = false;
    bool heavy_trained = false;

    // Stream-eval results shared by criteria 6-8.
    bool stream_done = false;
    eval::StreamEvalResult spec_result, heavy_result;

    Fixtures() {
        root = fs::temp_directory_path() / "etd_acceptance";
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Fixtures() { fs::remove_all(root); }
};

DatagenConfig mix_config(Variant variant, uint64_t seed, const std::string& dir) {
    DatagenConfig cfg;
    cfg.variant = variant;
    cfg.n_samples = 200;
    cfg.seed = seed;
    cfg.out_dir = dir;
    cfg.pause_min_s = 1.5;
    cfg.pause_max_s = 2.2;
    cfg.utt_min_s = 1.0;
    cfg.utt_max_s = 2.2;
    cfg.min_utterances = 2;
    cfg.max_utterances = 3;
    return cfg;
}

void build_corpus(Fixtures& fx) {
    std::vector<ManifestEntry> all;
    const std::string dir = (fx.root / "corpus").string();
    for (const Variant v : {Variant::Base, Variant::WithPause, Variant::WithFiller}) {
        const DatagenConfig cfg =
            mix_config(v, 0x5eedULL + static_cast<uint64_t>(v), dir);
        const Manifest m = generate_corpus(cfg);
        for (const auto& e : m.entries) all.push_back(e);
    }
    // 500 train / 100 test, stratified by taking every sixth sample as test.
    fx.train_manifest.dir = dir;
    fx.test_manifest.dir = dir;
    for (size_t i = 0; i < all.size(); ++i) {
        if (i % 6 == 5)
            fx.test_manifest.entries.push_back(all[i]);
        else
            fx.train_manifest.entries.push_back(all[i]);
    }
}

std::vector<bool> light_su_labels(const FeatureSequence& feats,
                                  const nn::LightParams<float>& light,
                                  int n_steps) {
    const auto probs = nn::light_forward(feats, light);
    std::vector<bool> su;
    for (int i = 0; i < n_steps; ++i) su.push_back(probs[i] >= 0.5f);
    return su;
}

}  // namespace

int main() {
    Harness harness;
    Fixtures fx;

    // ---- criterion 1: label round trips ----------------------------------
    harness.run(1, "label round-trips", 5.0, [] {
        Rng rng(0xAce1);
        for (int iter = 0; iter < 1000; ++iter) {
            FrameTrack f;
            const int n = static_cast<int>(rng.uniform_int(1, 120));
            for (int i = 0; i < n; ++i)
                f.labels.push_back(static_cast<TurnState>(rng.uniform_int(0, 2)));
            if (!(rasterize(segments_from_frames(f), kStepMs) == f))
                return Outcome{false, "frame round trip broke at iter " +
                                          std::to_string(iter)};
        }
        for (int iter = 0; iter < 1000; ++iter) {
            SegmentTrack t;
            const int n_segs = static_cast<int>(rng.uniform_int(1, 10));
            int step = 0;
            int prev = -1;
            for (int s = 0; s < n_segs; ++s) {
                int state = static_cast<int>(rng.uniform_int(0, 2));
                while (state == prev)
                    state = static_cast<int>(rng.uniform_int(0, 2));
                prev = state;
                t.entries.push_back(
                    {static_cast<TurnState>(state), static_cast<double>(step) * 0.1});
                step += static_cast<int>(rng.uniform_int(1, 12));
            }
            t.total_duration_s = static_cast<double>(step) * 0.1;
            if (!(segments_from_frames(rasterize(t, kStepMs)) == t))
                return Outcome{false, "segment round trip broke at iter " +
                                          std::to_string(iter)};
        }
        return Outcome{true, "2x1000 random tracks, exact"};
    });

    // ---- criterion 2: metric oracles --------------------------------------
    harness.run(2, "metric oracles", 5.0, [] {
        Rng rng(0xbeef);
        double worst = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            std::vector<FrameTrack> preds, truths;
            const int n = static_cast<int>(rng.uniform_int(1, 4));
            for (int s = 0; s < n; ++s) {
                FrameTrack p = testing::random_frame_track(rng, 50);
                FrameTrack t = p;
                for (auto& l : t.labels)
                    if (rng.bernoulli(0.35))
                        l = static_cast<TurnState>(rng.uniform_int(0, 2));
                preds.push_back(std::move(p));
                truths.push_back(std::move(t));
            }
            const auto fast = eval::segmentation_metrics(preds, truths);
            const auto slow = testing::oracle_segmentation(preds, truths);
            for (int c = 0; c < 3; ++c) {
                worst = std::max(worst, std::abs(fast.per_class[c].iou -
                                                 slow.per_class[c].iou));
                worst = std::max(worst, std::abs(fast.per_class[c].f1 -
                                                 slow.per_class[c].f1));
            }
            worst = std::max(worst, std::abs(fast.macro_iou - slow.macro_iou));

            std::vector<TurnState> bp, bt;
            const int m = static_cast<int>(rng.uniform_int(1, 50));
            for (int i = 0; i < m; ++i) {
                bp.push_back(rng.bernoulli(0.5) ? TurnState::Gap : TurnState::Pause);
                bt.push_back(rng.bernoulli(0.5) ? TurnState::Gap : TurnState::Pause);
            }
            const auto bfast = eval::binary_metrics(bp, bt);
            const auto bslow = testing::oracle_binary(bp, bt);
            worst = std::max(worst, std::abs(bfast.f1 - bslow.f1));
            worst = std::max(worst, std::abs(bfast.accuracy - bslow.accuracy));
            worst = std::max(worst, std::abs(bfast.precision - bslow.precision));
            worst = std::max(worst, std::abs(bfast.recall - bslow.recall));
        }
        return Outcome{worst <= 1e-12,
                       fmt("max |impl - oracle| = %.2e over 100 instances", worst)};
    });

    // ---- criterion 3: gradient fidelity ------------------------------------
    harness.run(3, "gradient fidelity", 30.0, [] {
        const double light_err = nn::grad_check(nn::ArchKind::Light, 7);
        const double heavy_err = nn::grad_check(nn::ArchKind::Heavy, 7);
        return Outcome{light_err < 1e-4 && heavy_err < 1e-4,
                       fmt("max rel err light %.2e, heavy %.2e", light_err,
                           heavy_err)};
    });

    // ---- corpus + criterion 4: light trainability --------------------------
    build_corpus(fx);

    harness.run(4, "light trainability", 600.0, [&fx] {
        nn::TrainConfig cfg;
        cfg.epochs = 4;
        cfg.batch_size = 16;
        cfg.learning_rate = 2e-3;
        cfg.seed = 11;
        cfg.threads = 2;
        const nn::LightDataset train_ds =
            nn::build_light_dataset(fx.train_manifest, nn::LightArch{}, {}, 2);
        fx.light = nn::LightParams<float>::make(nn::LightArch{}, cfg.seed);
        const auto history = nn::train_light_on(fx.light, train_ds, cfg);
        fx.light_trained = true;
        const nn::LightDataset test_ds =
            nn::build_light_dataset(fx.test_manifest, nn::LightArch{}, {}, 2);
        const double acc = nn::light_frame_accuracy(test_ds, fx.light, 2);
        return Outcome{acc >= 0.95,
                       fmt("test SU accuracy %.4f on %d conversations (final "
                           "train loss %.4f)",
                           acc, (int)fx.test_manifest.entries.size(),
                           history.back().loss)};
    });

    // ---- criterion 5: heavy trainability ------------------------------------
    harness.run(5, "heavy trainability", 1200.0, [&fx] {
        nn::TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.learning_rate = 1e-3;
        cfg.seed = 12;
        cfg.threads = 2;
        const nn::HeavyDataset train_ds = nn::build_heavy_dataset(
            fx.train_manifest, nn::HeavyArch{}, {}, 2, 240, cfg.seed);
        fx.heavy = nn::HeavyParams<float>::make(nn::HeavyArch{}, cfg.seed);
        nn::train_heavy_on(fx.heavy, train_ds, cfg);
        fx.heavy_trained = true;
        const nn::HeavyDataset test_ds =
            nn::build_heavy_dataset(fx.test_manifest, nn::HeavyArch{}, {}, 2);
        const double acc = nn::heavy_accuracy(test_ds, fx.heavy, 2);
        return Outcome{acc >= 0.90,
                       fmt("held-out Gap/Pause accuracy %.4f on %d segments "
                           "(train %d)",
                           acc, (int)test_ds.examples.size(),
                           (int)train_ds.examples.size())};
    });

    // ---- criterion 6: cascade fidelity --------------------------------------
    harness.run(6, "cascade fidelity", 600.0, [&fx] {
        if (!fx.light_trained || !fx.heavy_trained)
            return Outcome{false, "prerequisite training failed"};
        eval::EvalOptions opts;
        opts.threads = 2;
        fx.spec_result = eval::evaluate_stream_task(
            fx.test_manifest, fx.light, fx.heavy, eval::StreamMode::Speculative,
            opts);
        fx.heavy_result = eval::evaluate_stream_task(
            fx.test_manifest, fx.light, fx.heavy,
            eval::StreamMode::HeavyEverywhere, opts);
        fx.stream_done = true;
        const double spec_iou = fx.spec_result.seg.macro_iou * 100.0;
        const double heavy_iou = fx.heavy_result.seg.macro_iou * 100.0;
        return Outcome{spec_iou >= heavy_iou - 3.0,
                       fmt("speculative macro-IoU %.2f vs heavy-everywhere %.2f "
                           "(gap %.2f points)",
                           spec_iou, heavy_iou, heavy_iou - spec_iou)};
    });

    // ---- criterion 7: compute saving ----------------------------------------
    harness.run(7, "compute saving", 60.0, [&fx] {
        if (!fx.stream_done) return Outcome{false, "stream evaluation missing"};
        const auto& spec = fx.spec_result.compute;
        const auto& heavy = fx.heavy_result.compute;
        const bool identity =
            spec.total_flops == spec.light_flops + spec.heavy_flops &&
            spec.light_flops ==
                nn::light_flops(fx.light.arch,
                                static_cast<uint64_t>(spec.total_steps)) &&
            spec.heavy_flops ==
                nn::heavy_invocation_flops(fx.heavy.arch) * spec.escalations;
        const double ratio = static_cast<double>(heavy.total_flops) /
                             static_cast<double>(spec.total_flops);
        return Outcome{identity && ratio >= 10.0,
                       fmt("flops ratio %.1fx (%.1f vs %.1f MFLOPs/sample), "
                           "decomposition %s",
                           ratio, heavy.flops_per_sample / 1e6,
                           spec.flops_per_sample / 1e6,
                           identity ? "exact" : "BROKEN")};
    });

    // ---- criterion 8: escalation minimality ----------------------------------
    harness.run(8, "escalation minimality", 120.0, [&fx] {
        if (!fx.stream_done) return Outcome{false, "stream evaluation missing"};
        uint64_t oracle_count = 0;
        const CascadeConfig cascade_cfg;
        for (const auto& e : fx.test_manifest.entries) {
            const AudioBuffer audio = read_wav(fx.test_manifest.resolve(e.wav_path));
            const SegmentTrack track =
                read_label_file(fx.test_manifest.resolve(e.label_path));
            const FeatureSequence feats = extract_features(audio);
            const int n_steps = std::min(
                feats.n_frames / nn::LightArch::kFramesPerStep,
                static_cast<int>(rasterize(track, kStepMs).labels.size()));
            const auto su = light_su_labels(feats, fx.light, n_steps);
            int run = 0;
            for (int i = 0; i < n_steps; ++i) {
                if (!su[i]) {
                    if (++run == cascade_cfg.debounce_steps) ++oracle_count;
                } else {
                    run = 0;
                }
            }
        }
        const uint64_t engine_count = fx.spec_result.compute.escalations;
        return Outcome{engine_count == oracle_count,
                       fmt("engine %llu vs run-length oracle %llu",
                           (unsigned long long)engine_count,
                           (unsigned long long)oracle_count)};
    });

    // ---- criterion 9: wire conformance ----------------------------------------
    harness.run(9, "wire conformance", 60.0, [&fx] {
        wire::VerdictRequest req;
        req.request_id = 1;
        req.pcm = {0, 1, -1, 32767};
        const std::string bytes = wire::encode_request(req);
        static const uint8_t kGolden[] = {
            0x51, 0x44, 0x54, 0x45, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00,
            0x00, 0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x04, 0x00, 0x00,
            0x00, 0x00, 0x00, 0x01, 0x00, 0xff, 0xff, 0xff, 0x7f};
        if (bytes.size() != sizeof kGolden ||
            std::memcmp(bytes.data(), kGolden, sizeof kGolden) != 0)
            return Outcome{false, "request bytes differ from the golden vector"};
        if (!(wire::decode_request(bytes) == req))
            return Outcome{false, "golden vector does not decode to the request"};
        wire::VerdictResponse resp{7, 1, 0.75f};
        if (!(wire::decode_response(wire::encode_response(resp)) == resp))
            return Outcome{false, "response round trip broke"};
        if (!fx.light_trained || !fx.heavy_trained)
            return Outcome{false, "prerequisite training failed"};

        ::setenv("ETD_SERVER_LATENCY_MS", "50", 1);
        wire::Server server("127.0.0.1", 0, fx.heavy, -1);
        server.start();
        ::unsetenv("ETD_SERVER_LATENCY_MS");
        int checked = 0;
        for (size_t i = 0; i < fx.test_manifest.entries.size() && checked < 3; ++i) {
            const auto& e = fx.test_manifest.entries[i];
            const AudioBuffer audio = read_wav(fx.test_manifest.resolve(e.wav_path));
            InProcessProvider local(fx.heavy);
            const OfflineRun a = run_offline(audio, fx.light, local);
            wire::RemoteProvider remote("127.0.0.1", server.port(), audio);
            const OfflineRun b = run_offline(audio, fx.light, remote);
            if (!(a.track == b.track)) {
                server.stop();
                return Outcome{false, "loopback track differs from in-process on " +
                                          e.sample_id};
            }
            ++checked;
        }
        server.stop();
        return Outcome{true, fmt("golden vectors exact; %d loopback replays "
                                 "identical at 50 ms latency",
                                 checked)};
    });

    // ---- criterion 10: datagen invariants ---------------------------------------
    harness.run(10, "datagen invariants", 120.0, [&fx] {
        const auto dir_a = (fx.root / "invariants_a").string();
        const auto dir_b = (fx.root / "invariants_b").string();
        std::vector<Manifest> manifests;
        double pause_sum = 0.0;
        int pause_count = 0;
        for (const auto& [variant, seed] :
             std::vector<std::pair<Variant, uint64_t>>{
                 {Variant::WithPause, 0x10aULL}, {Variant::WithFiller, 0x10bULL}}) {
            DatagenConfig cfg;
            cfg.variant = variant;
            cfg.n_samples = 500;
            cfg.seed = seed;
            cfg.out_dir = dir_a + "/" + to_string(variant);
            const Manifest m = generate_corpus(cfg);
            cfg.out_dir = dir_b + "/" + to_string(variant);
            generate_corpus(cfg);
            manifests.push_back(m);
        }
        // determinism: byte-identical manifests and label files
        for (const std::string variant : {"with_pause", "with_filler"}) {
            for (const std::string name : {"/manifest.json"}) {
                std::ifstream fa(dir_a + "/" + variant + name, std::ios::binary);
                std::ifstream fb(dir_b + "/" + variant + name, std::ios::binary);
                const std::string ba((std::istreambuf_iterator<char>(fa)),
                                     std::istreambuf_iterator<char>());
                const std::string bb((std::istreambuf_iterator<char>(fb)),
                                     std::istreambuf_iterator<char>());
                if (ba != bb || ba.empty())
                    return Outcome{false, "manifest regeneration differs: " + variant};
            }
        }
        for (const auto& m : manifests) {
            for (const auto& e : m.entries) {
                std::ifstream fa(m.resolve(e.label_path), std::ios::binary);
                std::ifstream fb(dir_b + m.resolve(e.label_path).substr(dir_a.size()),
                                 std::ios::binary);
                const std::string ba((std::istreambuf_iterator<char>(fa)),
                                     std::istreambuf_iterator<char>());
                const std::string bb((std::istreambuf_iterator<char>(fb)),
                                     std::istreambuf_iterator<char>());
                if (ba != bb || ba.empty())
                    return Outcome{false, "label regeneration differs: " + e.sample_id};
            }
        }
        // pause bounds, mean, and audio/label RMS consistency
        for (const auto& m : manifests) {
            for (const auto& e : m.entries) {
                const SegmentTrack t = read_label_file(m.resolve(e.label_path));
                const AudioBuffer audio = read_wav(m.resolve(e.wav_path));
                for (size_t s = 0; s < t.entries.size(); ++s) {
                    const double lo = t.entries[s].start_s;
                    const double hi = t.segment_end(s);
                    if (t.entries[s].state == TurnState::Pause) {
                        const double dur = hi - lo;
                        if (dur < 1.5 - 1e-3 || dur > 3.0 + 1e-3)
                            return Outcome{false,
                                           fmt("pause %.3fs out of bounds in %s", dur,
                                               e.sample_id.c_str())};
                        pause_sum += dur;
                        ++pause_count;
                    }
                    const double guard =
                        t.entries[s].state == TurnState::SU ? 0.0 : 0.05;
                    const auto a = static_cast<size_t>((lo + guard) * kSampleRate);
                    const auto b = static_cast<size_t>((hi - guard) * kSampleRate);
                    if (b <= a) continue;
                    const double rms = rms_fullscale(audio.samples.data() + a, b - a);
                    if (t.entries[s].state == TurnState::SU && rms < 0.02)
                        return Outcome{false, fmt("quiet SU (rms %.4f) in %s", rms,
                                                  e.sample_id.c_str())};
                    if (t.entries[s].state != TurnState::SU && rms >= 0.005)
                        return Outcome{false, fmt("loud silence (rms %.4f) in %s",
                                                  rms, e.sample_id.c_str())};
                }
            }
        }
        const double mean_pause = pause_sum / pause_count;
        if (std::abs(mean_pause - 2.25) > 0.1)
            return Outcome{false,
                           fmt("pause mean %.3fs outside 2.25 +/- 0.1", mean_pause)};
        return Outcome{true, fmt("1000 samples, %d pauses, mean %.3fs, "
                                 "regeneration byte-identical",
                                 pause_count, mean_pause)};
    });

    std::printf("%s: %d criteria failed\n",
                harness.failures() == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
                harness.failures());
    return harness.failures() == 0 ? 0 : 1;
}
