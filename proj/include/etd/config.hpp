#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "etd/audio.hpp"
#include "etd/cascade.hpp"
#include "etd/datagen.hpp"
#include "etd/nn/train.hpp"

namespace etd {

class ConfigError : public Error {
public:
    using Error::Error;
};

/// The canonical config document. Every key a config file or a dotted flag
/// may set exists here; unknown keys are rejected.
inline nlohmann::json default_config() {
    return nlohmann::json{
        {"features",
         {{"window_ms", 25},
          {"hop_ms", 10},
          {"n_mels", 40},
          {"fmin_hz", 0.0},
          {"fmax_hz", 8000.0},
          {"log_floor", 1e-10}}},
        {"datagen",
         {{"variant", "with_pause"},
          {"n_samples", 100},
          {"pause_min_s", 1.5},
          {"pause_max_s", 3.0},
          {"truncate_prob", 0.5},
          {"filler_duration_ms", 250},
          {"seed", 1},
          {"out_dir", "data"},
          {"min_utterances", 2},
          {"max_utterances", 4},
          {"utt_min_s", 1.0},
          {"utt_max_s", 3.0},
          {"trailing_gap_s", 1.0}}},
        {"train",
         {{"light",
           {{"epochs", 10},
            {"batch_size", 256},
            {"learning_rate", 3e-4},
            {"weight_decay", 0.01},
            {"beta1", 0.9},
            {"beta2", 0.999},
            {"eps", 1e-8},
            {"seed", 1},
            {"threads", 0}}},
          {"heavy",
           {{"epochs", 10},
            {"batch_size", 8},
            {"learning_rate", 1e-4},
            {"weight_decay", 0.01},
            {"beta1", 0.9},
            {"beta2", 0.999},
            {"eps", 1e-8},
            {"seed", 1},
            {"threads", 0},
            {"max_examples", 0}}}}},
        {"cascade",
         {{"su_threshold", 0.5},
          {"debounce_steps", 2},
          {"context_window_s", 3.0},
          {"provisional_label", "Pause"},
          {"stale_policy", "discard"}}},
        {"serve", {{"listen", "127.0.0.1:9200"}, {"latency_ms", -1}}},
        {"import", {{"truncate_prob", 0.5}, {"seed", 1}}},
    };
}

namespace detail {

inline void merge_validated(nlohmann::json& base, const nlohmann::json& overlay,
                            const std::string& path) {
    if (!overlay.is_object())
        throw ConfigError("config node must be an object: " +
                          (path.empty() ? "<root>" : path));
    for (const auto& [key, value] : overlay.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key: " + where);
        if (base[key].is_object()) {
            merge_validated(base[key], value, where);
        } else {
            base[key] = value;
        }
    }
}

}  // namespace detail

class RunConfig {
public:
    RunConfig() : doc_(default_config()) {}

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file: " + path);
        nlohmann::json overlay;
        try {
            f >> overlay;
        } catch (const std::exception& e) {
            throw ConfigError("config parse error in " + path + ": " + e.what());
        }
        detail::merge_validated(doc_, overlay, "");
    }

    /// Applies one `--a.b.c value` override; the value string is coerced to
    /// the default's type.
    void apply_override(const std::string& dotted_key, const std::string& value) {
        nlohmann::json* node = &doc_;
        std::string rest = dotted_key;
        while (true) {
            const auto dot = rest.find('.');
            const std::string head = rest.substr(0, dot);
            if (!node->contains(head))
                throw ConfigError("unknown config key: " + dotted_key);
            node = &(*node)[head];
            if (dot == std::string::npos) break;
            rest = rest.substr(dot + 1);
        }
        if (node->is_object())
            throw ConfigError("config key is not a leaf: " + dotted_key);
        try {
            if (node->is_string()) {
                *node = value;
            } else if (node->is_boolean()) {
                if (value == "true" || value == "1")
                    *node = true;
                else if (value == "false" || value == "0")
                    *node = false;
                else
                    throw ConfigError("expected boolean for " + dotted_key);
            } else if (node->is_number_integer() || node->is_number_unsigned()) {
                *node = std::stoll(value);
            } else {
                *node = std::stod(value);
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("cannot parse value '" + value + "' for " + dotted_key);
        }
    }

    const nlohmann::json& doc() const { return doc_; }

    FeatureConfig features() const {
        const auto& j = doc_.at("features");
        FeatureConfig fc;
        fc.window_ms = j.at("window_ms").get<int>();
        fc.hop_ms = j.at("hop_ms").get<int>();
        fc.n_mels = j.at("n_mels").get<int>();
        fc.fmin_hz = j.at("fmin_hz").get<double>();
        fc.fmax_hz = j.at("fmax_hz").get<double>();
        fc.log_floor = j.at("log_floor").get<double>();
        return fc;
    }

    DatagenConfig datagen() const {
        const auto& j = doc_.at("datagen");
        DatagenConfig c;
        const auto v = variant_from_string(j.at("variant").get<std::string>());
        if (!v) throw ConfigError("unknown datagen.variant");
        c.variant = *v;
        c.n_samples = j.at("n_samples").get<int>();
        c.pause_min_s = j.at("pause_min_s").get<double>();
        c.pause_max_s = j.at("pause_max_s").get<double>();
        c.truncate_prob = j.at("truncate_prob").get<double>();
        c.filler_duration_ms = j.at("filler_duration_ms").get<int>();
        c.seed = j.at("seed").get<uint64_t>();
        c.out_dir = j.at("out_dir").get<std::string>();
        c.min_utterances = j.at("min_utterances").get<int>();
        c.max_utterances = j.at("max_utterances").get<int>();
        c.utt_min_s = j.at("utt_min_s").get<double>();
        c.utt_max_s = j.at("utt_max_s").get<double>();
        c.trailing_gap_s = j.at("trailing_gap_s").get<double>();
        return c;
    }

    nn::TrainConfig train(const std::string& which) const {
        const auto& j = doc_.at("train").at(which);
        nn::TrainConfig c;
        c.epochs = j.at("epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.beta1 = j.at("beta1").get<double>();
        c.beta2 = j.at("beta2").get<double>();
        c.eps = j.at("eps").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
        c.threads = j.at("threads").get<int>();
        return c;
    }

    size_t heavy_max_examples() const {
        return doc_.at("train").at("heavy").at("max_examples").get<size_t>();
    }

    CascadeConfig cascade() const {
        const auto& j = doc_.at("cascade");
        CascadeConfig c;
        c.su_threshold = j.at("su_threshold").get<double>();
        c.debounce_steps = j.at("debounce_steps").get<int>();
        c.context_window_s = j.at("context_window_s").get<double>();
        const auto label =
            turn_state_from_string(j.at("provisional_label").get<std::string>());
        if (!label || *label == TurnState::SU)
            throw ConfigError("cascade.provisional_label must be Pause or Gap");
        c.provisional_label = *label;
        if (j.at("stale_policy").get<std::string>() != "discard")
            throw ConfigError("cascade.stale_policy: only 'discard' is implemented");
        return c;
    }

    std::string serve_listen() const {
        return doc_.at("serve").at("listen").get<std::string>();
    }
    int serve_latency_ms() const {
        return doc_.at("serve").at("latency_ms").get<int>();
    }
    ImportOptions import_options() const {
        const auto& j = doc_.at("import");
        return {j.at("truncate_prob").get<double>(), j.at("seed").get<uint64_t>()};
    }

private:
    nlohmann::json doc_;
};

}  // namespace etd
