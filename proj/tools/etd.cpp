// etd: synthesize corpora, train the edge/server classifiers, serve the
// verdict endpoint, replay the cascade, and evaluate both task scenarios.
// stdout carries machine-readable output only; logs go to stderr.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstring>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "etd/config.hpp"
#include "etd/eval.hpp"
#include "etd/nn/flops.hpp"
#include "etd/nn/serialize.hpp"
#include "etd/testing/oracles.hpp"
#include "etd/wire.hpp"

using namespace etd;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const char* kUsage =
    "usage: etd <subcommand> [--config file.json] [--<dotted.key> value] [flags]\n"
    "\n"
    "subcommands:\n"
    "  datagen      --variant base|with_pause|with_filler --n N --seed S --out DIR\n"
    "  import-real  --diar a.tsv,b.tsv --wavs a.wav,b.wav --out DIR\n"
    "  train        --arch light|heavy --manifest FILE --params-out FILE\n"
    "               [--history-out FILE]\n"
    "  serve        --listen HOST:PORT --heavy-params FILE [--latency-ms N]\n"
    "  cascade      --wav FILE --light-params FILE\n"
    "               (--heavy-params FILE | --server HOST:PORT) [--events]\n"
    "  eval-binary  --manifest FILE --heavy-params FILE\n"
    "  eval-stream  --manifest FILE --light-params FILE --heavy-params FILE\n"
    "               --mode light_only|heavy_everywhere|speculative|all\n"
    "               [--svg FILE] [--table]\n"
    "  bench        [--light-params FILE] [--heavy-params FILE] [--steps N]\n"
    "  selftest\n"
    "\n"
    "Any config field is overridable by a flag of its dotted name, e.g.\n"
    "  --cascade.debounce_steps 3 --train.light.epochs 4\n";

struct Args {
    std::string subcommand;
    std::map<std::string, std::string> opts;  // plain flags
    RunConfig config;

    bool has(const std::string& key) const { return opts.count(key) > 0; }
    std::string get(const std::string& key) const {
        const auto it = opts.find(key);
        if (it == opts.end()) throw UsageError("missing required flag --" + key);
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& fallback) const {
        const auto it = opts.find(key);
        return it == opts.end() ? fallback : it->second;
    }
};

// Aliases mapping short flags onto config paths, per subcommand.
const std::map<std::string, std::map<std::string, std::string>> kAliases = {
    {"datagen",
     {{"variant", "datagen.variant"},
      {"n", "datagen.n_samples"},
      {"seed", "datagen.seed"},
      {"out", "datagen.out_dir"}}},
    {"serve", {{"listen", "serve.listen"}, {"latency-ms", "serve.latency_ms"}}},
};

// Flags that stay plain strings rather than config overrides.
const std::set<std::string> kPlainFlags = {
    "manifest",     "params-out",   "params-in", "history-out", "arch",
    "light-params", "heavy-params", "mode",      "svg",         "table",
    "wav",          "server",       "events",    "diar",        "wavs",
    "out",          "steps",        "max-examples"};

const std::set<std::string> kBoolFlags = {"table", "events"};

Args parse_args(int argc, char** argv) {
    if (argc < 2) throw UsageError("no subcommand");
    Args args;
    args.subcommand = argv[1];
    std::vector<std::pair<std::string, std::string>> overrides;
    std::optional<std::string> config_path;
    for (int i = 2; i < argc; ++i) {
        std::string flag = argv[i];
        if (flag.rfind("--", 0) != 0)
            throw UsageError("unexpected positional argument: " + flag);
        flag = flag.substr(2);
        std::string value;
        const auto eq = flag.find('=');
        if (eq != std::string::npos) {
            value = flag.substr(eq + 1);
            flag = flag.substr(0, eq);
        } else if (kBoolFlags.count(flag)) {
            value = "true";
        } else {
            if (i + 1 >= argc) throw UsageError("flag --" + flag + " needs a value");
            value = argv[++i];
        }
        if (flag == "config") {
            config_path = value;
            continue;
        }
        const auto alias_map = kAliases.find(args.subcommand);
        if (alias_map != kAliases.end() && alias_map->second.count(flag)) {
            overrides.emplace_back(alias_map->second.at(flag), value);
        } else if (flag.find('.') != std::string::npos) {
            overrides.emplace_back(flag, value);
        } else if (kPlainFlags.count(flag)) {
            args.opts[flag] = value;
        } else {
            throw UsageError("unknown flag --" + flag);
        }
    }
    if (config_path) args.config.load_file(*config_path);
    for (const auto& [key, value] : overrides) args.config.apply_override(key, value);
    return args;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::pair<std::string, uint16_t> parse_endpoint(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos)
        throw UsageError("endpoint must be HOST:PORT, got " + s);
    return {s.substr(0, colon),
            static_cast<uint16_t>(std::stoi(s.substr(colon + 1)))};
}

// ---------------------------------------------------------------------------

int cmd_datagen(const Args& args) {
    const DatagenConfig cfg = args.config.datagen();
    const Manifest m = generate_corpus(cfg);
    std::map<std::string, int> splits;
    for (const auto& e : m.entries) splits[split_of(e.sample_id)]++;
    const nlohmann::json out = {
        {"manifest",
         (std::filesystem::path(cfg.out_dir) / "manifest.json").string()},
        {"n_samples", m.entries.size()},
        {"splits", splits}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_import_real(const Args& args) {
    const auto diar = split_csv(args.get("diar"));
    const auto wavs = split_csv(args.get("wavs"));
    const std::string out_dir = args.get_or("out", args.config.datagen().out_dir);
    int skipped = 0;
    const Manifest m =
        import_real(diar, wavs, out_dir, args.config.import_options(), &skipped);
    const nlohmann::json out = {
        {"manifest", (std::filesystem::path(out_dir) / "manifest.json").string()},
        {"n_samples", m.entries.size()},
        {"skipped_files", skipped}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_train(const Args& args) {
    const std::string arch = args.get("arch");
    const Manifest m = read_manifest(args.get("manifest"));
    const FeatureConfig fc = args.config.features();
    const std::string params_out = args.get("params-out");

    std::vector<nn::EpochStats> history;
    if (arch == "light") {
        auto [params, hist] =
            nn::train_light_model(m, nn::LightArch{}, fc, args.config.train("light"));
        nn::save_params(params_out, params);
        history = std::move(hist);
    } else if (arch == "heavy") {
        size_t max_examples = args.config.heavy_max_examples();
        if (args.has("max-examples"))
            max_examples = std::stoull(args.get("max-examples"));
        auto [params, hist] = nn::train_heavy_model(
            m, nn::HeavyArch{}, fc, args.config.train("heavy"), max_examples);
        nn::save_params(params_out, params);
        history = std::move(hist);
    } else {
        throw UsageError("--arch must be light or heavy");
    }

    std::ostringstream lines;
    for (const auto& h : history) {
        lines << nlohmann::json{{"epoch", h.epoch},
                                {"loss", h.loss},
                                {"accuracy", h.accuracy}}
                     .dump()
              << "\n";
    }
    if (args.has("history-out")) {
        std::ofstream f(args.get("history-out"), std::ios::trunc);
        f << lines.str();
    }
    std::cout << lines.str();
    std::cerr << "wrote " << params_out << "\n";
    return 0;
}

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop = true; }

int cmd_serve(const Args& args) {
    const auto [host, port] = parse_endpoint(args.config.serve_listen());
    const auto heavy = nn::load_heavy_params(args.get("heavy-params"));
    wire::Server server(host, port, heavy,
                        wire::resolve_latency_ms(args.config.serve_latency_ms()),
                        args.config.features());
    server.start();
    std::cout << nlohmann::json{
                     {"listening", host + ":" + std::to_string(server.port())}}
                     .dump()
              << std::endl;
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    while (!g_stop)
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return 0;
}

nlohmann::json event_to_json(const Event& ev) {
    if (const auto* s = std::get_if<StepLabeled>(&ev))
        return {{"type", "step_labeled"},
                {"step", s->step},
                {"state", to_string(s->state)},
                {"provisional", s->provisional}};
    if (const auto* e = std::get_if<EscalationIssued>(&ev))
        return {{"type", "escalation_issued"},
                {"id", e->id},
                {"run_start_step", e->run_start_step},
                {"window_end_s", e->window_end_s},
                {"window_frames", e->window.n_frames}};
    if (const auto* v = std::get_if<VerdictApplied>(&ev))
        return {{"type", "verdict_applied"},
                {"id", v->id},
                {"run_start_step", v->run_start_step},
                {"run_end_step", v->run_end_step},
                {"state", to_string(v->state)}};
    const auto& c = std::get<RunCancelled>(ev);
    return {{"type", "run_cancelled"}, {"id", c.id}};
}

int cmd_cascade(const Args& args) {
    const AudioBuffer audio = read_wav(args.get("wav"));
    const auto light = nn::load_light_params(args.get("light-params"));
    const CascadeConfig cascade_cfg = args.config.cascade();
    const FeatureConfig fc = args.config.features();
    const bool keep_events = args.has("events");

    OfflineRun run;
    if (args.has("server")) {
        const auto [host, port] = parse_endpoint(args.get("server"));
        wire::RemoteProvider provider(host, port, audio, fc);
        run = run_offline(audio, light, provider, cascade_cfg, fc, keep_events);
    } else {
        const auto heavy = nn::load_heavy_params(args.get("heavy-params"));
        InProcessProvider provider(heavy);
        run = run_offline(audio, light, provider, cascade_cfg, fc, keep_events);
    }

    nlohmann::json out;
    if (run.track.labels.empty()) {
        out = {{"duration_s", 0.0}, {"segments", nlohmann::json::array()}};
    } else {
        out = track_to_json(segments_from_frames(run.track));
    }
    out["escalations"] = run.escalations;
    out["steps"] = run.steps;
    if (keep_events) {
        nlohmann::json events = nlohmann::json::array();
        for (const auto& ev : run.events) events.push_back(event_to_json(ev));
        out["events"] = events;
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval_binary(const Args& args) {
    const Manifest m = read_manifest(args.get("manifest"));
    const auto heavy = nn::load_heavy_params(args.get("heavy-params"));
    eval::EvalOptions opts;
    opts.features = args.config.features();
    opts.cascade = args.config.cascade();
    const eval::BinaryReport r = eval::evaluate_binary_task(m, heavy, opts);
    std::cout << eval::to_json(r).dump(2) << "\n";
    return 0;
}

int cmd_eval_stream(const Args& args) {
    const Manifest m = read_manifest(args.get("manifest"));
    const auto light = nn::load_light_params(args.get("light-params"));
    const auto heavy = nn::load_heavy_params(args.get("heavy-params"));
    eval::EvalOptions opts;
    opts.features = args.config.features();
    opts.cascade = args.config.cascade();
    const std::string mode_str = args.get_or("mode", "speculative");

    std::vector<eval::StreamMode> modes;
    if (mode_str == "all") {
        modes = {eval::StreamMode::LightOnly, eval::StreamMode::HeavyEverywhere,
                 eval::StreamMode::Speculative};
    } else if (mode_str == "light_only") {
        modes = {eval::StreamMode::LightOnly};
    } else if (mode_str == "heavy_everywhere") {
        modes = {eval::StreamMode::HeavyEverywhere};
    } else if (mode_str == "speculative") {
        modes = {eval::StreamMode::Speculative};
    } else {
        throw UsageError("unknown --mode " + mode_str);
    }

    std::vector<std::tuple<std::string, uint64_t, double>> chart_rows;
    std::vector<eval::ComputeReport> computes;
    nlohmann::json all = nlohmann::json::object();
    for (const auto mode : modes) {
        const auto result = eval::evaluate_stream_task(m, light, heavy, mode, opts);
        all[eval::to_string(mode)] = {
            {"macro_f1", result.seg.macro_f1},
            {"macro_iou", result.seg.macro_iou},
            {"total_flops", result.compute.total_flops},
            {"seg", eval::to_json(result.seg)},
            {"compute", eval::to_json(result.compute)}};
        chart_rows.emplace_back(eval::to_string(mode), result.compute.total_flops,
                                result.seg.macro_iou);
        computes.push_back(result.compute);
        if (args.has("table"))
            std::cerr << eval::to_string(mode) << "\n"
                      << eval::format_seg_table(result.seg);
    }
    if (args.has("table")) std::cerr << eval::format_compute_table(computes);
    if (args.has("svg")) eval::write_flops_iou_svg(args.get("svg"), chart_rows);

    if (modes.size() == 1)
        std::cout << all[eval::to_string(modes[0])].dump(2) << "\n";
    else
        std::cout << all.dump(2) << "\n";
    return 0;
}

int cmd_bench(const Args& args) {
    const nn::LightParams<float> light =
        args.has("light-params") ? nn::load_light_params(args.get("light-params"))
                                 : nn::LightParams<float>::make(nn::LightArch{}, 1);
    const nn::HeavyParams<float> heavy =
        args.has("heavy-params") ? nn::load_heavy_params(args.get("heavy-params"))
                                 : nn::HeavyParams<float>::make(nn::HeavyArch{}, 1);
    const int steps = std::stoi(args.get_or("steps", "200"));

    Rng rng(4);
    FeatureSequence feats;
    feats.n_mels = light.arch.n_mels;
    feats.n_frames = steps * nn::LightArch::kFramesPerStep;
    feats.data.resize(static_cast<size_t>(feats.n_frames) * feats.n_mels);
    for (auto& v : feats.data) v = rng.uniform(-23.0, 3.0);

    const auto t0 = std::chrono::steady_clock::now();
    const auto probs = nn::light_forward(feats, light);
    const auto t1 = std::chrono::steady_clock::now();
    const int heavy_iters = 5;
    std::array<float, 2> last{};
    for (int i = 0; i < heavy_iters; ++i) last = nn::heavy_forward(feats, heavy);
    const auto t2 = std::chrono::steady_clock::now();

    const double light_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count() / steps;
    const double heavy_ms =
        std::chrono::duration<double, std::milli>(t2 - t1).count() / heavy_iters;
    const nlohmann::json out = {
        {"light_step_flops", nn::light_step_flops(light.arch)},
        {"heavy_invocation_flops", nn::heavy_invocation_flops(heavy.arch)},
        {"flops_ratio", static_cast<double>(nn::heavy_invocation_flops(heavy.arch)) /
                            static_cast<double>(nn::light_step_flops(light.arch))},
        {"light_ms_per_step", light_ms},
        {"heavy_ms_per_invocation", heavy_ms},
        {"steps", steps},
        {"sink", probs.back() + last[0]}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_selftest(const Args&) {
    int failures = 0;
    const auto report = [&failures](const std::string& name, bool ok,
                                    const std::string& detail = "") {
        std::cout << (ok ? "PASS " : "FAIL ") << name
                  << (detail.empty() ? "" : " (" + detail + ")") << "\n";
        if (!ok) ++failures;
    };

    {
        const double err = nn::grad_check(nn::ArchKind::Light, 7);
        report("gradient_check_light", err < 1e-4,
               "max rel err " + std::to_string(err));
    }
    {
        const double err = nn::grad_check(nn::ArchKind::Heavy, 7);
        report("gradient_check_heavy", err < 1e-4,
               "max rel err " + std::to_string(err));
    }
    {
        Rng rng(99);
        bool ok = true;
        for (int iter = 0; iter < 50 && ok; ++iter) {
            std::vector<FrameTrack> preds, truths;
            const int n = static_cast<int>(rng.uniform_int(1, 5));
            for (int s = 0; s < n; ++s) {
                FrameTrack p = testing::random_frame_track(rng);
                FrameTrack t = p;
                for (auto& l : t.labels)
                    if (rng.bernoulli(0.3))
                        l = static_cast<TurnState>(rng.uniform_int(0, 2));
                preds.push_back(p);
                truths.push_back(t);
            }
            const auto fast = eval::segmentation_metrics(preds, truths);
            const auto slow = testing::oracle_segmentation(preds, truths);
            ok = std::abs(fast.macro_iou - slow.macro_iou) < 1e-12 &&
                 std::abs(fast.macro_f1 - slow.macro_f1) < 1e-12;
            for (int c = 0; c < 3 && ok; ++c)
                ok = std::abs(fast.per_class[c].iou - slow.per_class[c].iou) < 1e-12;
        }
        report("segmentation_metric_oracle", ok);
    }
    {
        Rng rng(123);
        bool ok = true;
        for (int iter = 0; iter < 50 && ok; ++iter) {
            std::vector<TurnState> preds, truths;
            const int n = static_cast<int>(rng.uniform_int(1, 40));
            for (int i = 0; i < n; ++i) {
                preds.push_back(rng.bernoulli(0.5) ? TurnState::Gap : TurnState::Pause);
                truths.push_back(rng.bernoulli(0.5) ? TurnState::Gap
                                                    : TurnState::Pause);
            }
            const auto fast = eval::binary_metrics(preds, truths);
            const auto slow = testing::oracle_binary(preds, truths);
            ok = std::abs(fast.f1 - slow.f1) < 1e-12 &&
                 std::abs(fast.accuracy - slow.accuracy) < 1e-12 &&
                 std::abs(fast.precision - slow.precision) < 1e-12 &&
                 std::abs(fast.recall - slow.recall) < 1e-12;
        }
        report("binary_metric_oracle", ok);
    }
    {
        wire::VerdictRequest req;
        req.request_id = 1;
        req.pcm = {0, 1, -1, 32767};
        const std::string bytes = wire::encode_request(req);
        static const uint8_t kGolden[] = {
            0x51, 0x44, 0x54, 0x45, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00,
            0x00, 0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x04, 0x00, 0x00,
            0x00, 0x00, 0x00, 0x01, 0x00, 0xff, 0xff, 0xff, 0x7f};
        bool ok = bytes.size() == sizeof kGolden &&
                  std::memcmp(bytes.data(), kGolden, sizeof kGolden) == 0;
        if (ok) ok = wire::decode_request(bytes) == req;
        report("wire_golden_vectors", ok);
    }
    return failures == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        const Args args = parse_args(argc, argv);
        const std::string& cmd = args.subcommand;
        if (cmd == "datagen") return cmd_datagen(args);
        if (cmd == "import-real") return cmd_import_real(args);
        if (cmd == "train") return cmd_train(args);
        if (cmd == "serve") return cmd_serve(args);
        if (cmd == "cascade") return cmd_cascade(args);
        if (cmd == "eval-binary") return cmd_eval_binary(args);
        if (cmd == "eval-stream") return cmd_eval_stream(args);
        if (cmd == "bench") return cmd_bench(args);
        if (cmd == "selftest") return cmd_selftest(args);
        throw UsageError("unknown subcommand: " + cmd);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << kUsage;
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
