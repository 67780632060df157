#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "etd/common.hpp"

namespace etd {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Mono PCM16 signal. All pipeline-internal buffers are 16 kHz.
struct AudioBuffer {
    std::vector<int16_t> samples;
    int sample_rate = kSampleRate;

    double duration_s() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

struct FeatureConfig {
    int window_ms = 25;
    int hop_ms = 10;
    int n_mels = 40;
    double fmin_hz = 0.0;
    double fmax_hz = 8000.0;
    double log_floor = 1e-10;  // added to mel energy before the log

    int window_samples(int sample_rate = kSampleRate) const {
        return sample_rate * window_ms / 1000;
    }
    int hop_samples(int sample_rate = kSampleRate) const {
        return sample_rate * hop_ms / 1000;
    }
};

/// T x n_mels matrix of log-mel filterbank energies, row-major.
struct FeatureSequence {
    std::vector<double> data;
    int n_frames = 0;
    int n_mels = 0;
    int hop_ms = 10;

    double* frame(int t) { return data.data() + static_cast<size_t>(t) * n_mels; }
    const double* frame(int t) const {
        return data.data() + static_cast<size_t>(t) * n_mels;
    }
    double at(int t, int m) const { return data[static_cast<size_t>(t) * n_mels + m]; }
};

/// Rows [lo, hi) of a feature sequence as a new sequence.
inline FeatureSequence slice_features(const FeatureSequence& f, int lo, int hi) {
    FeatureSequence out;
    out.n_mels = f.n_mels;
    out.hop_ms = f.hop_ms;
    out.n_frames = hi - lo;
    out.data.assign(f.data.begin() + static_cast<size_t>(lo) * f.n_mels,
                    f.data.begin() + static_cast<size_t>(hi) * f.n_mels);
    return out;
}

enum class TerminalContour { Falling, Level };

/// Stand-in for a TTS utterance: harmonic stack with a pitch trajectory whose
/// terminal 300 ms encodes turn-finality (falling) or hesitation (level).
struct UtteranceSpec {
    double duration_s = 1.0;
    double base_f0 = 180.0;
    TerminalContour terminal_contour = TerminalContour::Falling;
    double amplitude = 0.5;  // peak fraction of full scale, (0, 1]
    uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class WavErrorKind {
    MissingFile,
    MalformedHeader,
    UnsupportedCodec,
    UnsupportedBitDepth,
    Truncated,
    UnwritablePath,
};

class WavError : public Error {
public:
    WavError(WavErrorKind k, const std::string& msg) : Error(msg), kind(k) {}
    WavErrorKind kind;
};

class SpecError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// WAV I/O (RIFF/WAVE PCM16, canonical 44-byte header on write)
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t read_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
inline uint16_t read_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}
inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

/// Linear-interpolation resampler on i16 samples. Quality is adequate for
/// desk-scale experiments; not a polyphase design.
inline std::vector<int16_t> resample_linear(const std::vector<int16_t>& in,
                                            int rate_in, int rate_out) {
    if (rate_in == rate_out || in.empty()) return in;
    const size_t n_out = static_cast<size_t>(
        static_cast<uint64_t>(in.size()) * rate_out / rate_in);
    std::vector<int16_t> out(n_out);
    const double step = static_cast<double>(rate_in) / rate_out;
    for (size_t i = 0; i < n_out; ++i) {
        const double pos = i * step;
        size_t i0 = static_cast<size_t>(pos);
        if (i0 >= in.size() - 1) {
            out[i] = in.back();
            continue;
        }
        const double frac = pos - i0;
        const double v = in[i0] * (1.0 - frac) + in[i0 + 1] * frac;
        out[i] = static_cast<int16_t>(std::llround(v));
    }
    return out;
}

}  // namespace detail

inline AudioBuffer read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WavError(WavErrorKind::MissingFile, "no such file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw WavError(WavErrorKind::MalformedHeader,
                       "not a RIFF/WAVE file: " + path);
    }

    // Walk chunks; only fmt and data matter, everything else is skipped.
    size_t pos = 12;
    bool have_fmt = false;
    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    const uint8_t* data_ptr = nullptr;
    uint32_t data_len = 0;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const uint32_t len = detail::read_u32(bytes.data() + pos + 4);
        pos += 8;
        if (pos + len > bytes.size())
            throw WavError(WavErrorKind::Truncated,
                           "chunk extends past end of file: " + path);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (len < 16)
                throw WavError(WavErrorKind::MalformedHeader, "fmt chunk too short");
            format = detail::read_u16(bytes.data() + pos);
            channels = detail::read_u16(bytes.data() + pos + 2);
            rate = detail::read_u32(bytes.data() + pos + 4);
            bits = detail::read_u16(bytes.data() + pos + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_ptr = bytes.data() + pos;
            data_len = len;
        }
        pos += len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || data_ptr == nullptr)
        throw WavError(WavErrorKind::MalformedHeader,
                       "missing fmt or data chunk: " + path);
    if (format != 1)
        throw WavError(WavErrorKind::UnsupportedCodec,
                       "unsupported codec tag " + std::to_string(format) +
                           " (only PCM): " + path);
    if (bits != 16)
        throw WavError(WavErrorKind::UnsupportedBitDepth,
                       "unsupported bit depth " + std::to_string(bits) +
                           " (only 16): " + path);
    if (channels == 0 || channels > 2)
        throw WavError(WavErrorKind::MalformedHeader,
                       "unsupported channel count " + std::to_string(channels));

    const size_t n_frames = data_len / (2 * channels);
    std::vector<int16_t> mono(n_frames);
    for (size_t i = 0; i < n_frames; ++i) {
        int32_t acc = 0;
        for (int c = 0; c < channels; ++c) {
            const uint8_t* sp = data_ptr + (i * channels + c) * 2;
            acc += static_cast<int16_t>(sp[0] | sp[1] << 8);
        }
        mono[i] = static_cast<int16_t>(acc / channels);
    }

    AudioBuffer buf;
    buf.sample_rate = kSampleRate;
    buf.samples = detail::resample_linear(mono, static_cast<int>(rate), kSampleRate);
    return buf;
}

inline void write_wav(const AudioBuffer& buf, const std::string& path) {
    const uint32_t data_len = static_cast<uint32_t>(buf.samples.size() * 2);
    std::string out;
    out.reserve(44 + data_len);
    out.append("RIFF");
    detail::put_u32(out, 36 + data_len);
    out.append("WAVE");
    out.append("fmt ");
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, 1);  // mono
    detail::put_u32(out, static_cast<uint32_t>(buf.sample_rate));
    detail::put_u32(out, static_cast<uint32_t>(buf.sample_rate * 2));
    detail::put_u16(out, 2);   // block align
    detail::put_u16(out, 16);  // bits
    out.append("data");
    detail::put_u32(out, data_len);
    for (int16_t s : buf.samples) {
        out.push_back(static_cast<char>(s & 0xff));
        out.push_back(static_cast<char>((s >> 8) & 0xff));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WavError(WavErrorKind::UnwritablePath, "cannot open for write: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw WavError(WavErrorKind::UnwritablePath, "write failed: " + path);
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

namespace detail {

/// In-place iterative radix-2 FFT. n must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

/// Triangular filterbank over FFT bin center frequencies, HTK mel scale.
/// Returned matrix is n_mels x (n_fft/2 + 1), row-major.
inline std::vector<double> mel_filterbank(const FeatureConfig& cfg, int n_fft,
                                          int sample_rate) {
    const int n_bins = n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(cfg.fmin_hz);
    const double mel_hi = hz_to_mel(cfg.fmax_hz);
    std::vector<double> centers(cfg.n_mels + 2);
    for (int i = 0; i < cfg.n_mels + 2; ++i) {
        const double mel = mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1);
        centers[i] = mel_to_hz(mel);
    }
    std::vector<double> fb(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double f_lo = centers[m], f_c = centers[m + 1], f_hi = centers[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            double w = 0.0;
            if (f >= f_lo && f <= f_c && f_c > f_lo)
                w = (f - f_lo) / (f_c - f_lo);
            else if (f > f_c && f <= f_hi && f_hi > f_c)
                w = (f_hi - f) / (f_hi - f_c);
            fb[static_cast<size_t>(m) * n_bins + k] = w;
        }
    }
    return fb;
}

inline int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

}  // namespace detail

/// Log-mel filterbank energies: Hann window, power spectrum via FFT (size =
/// next power of two >= window), triangular HTK-mel filters, ln(E + floor).
/// Buffers shorter than one window yield an empty sequence.
inline FeatureSequence extract_features(const AudioBuffer& buf,
                                        const FeatureConfig& cfg = {}) {
    if (cfg.window_ms <= cfg.hop_ms || cfg.hop_ms <= 0 || cfg.n_mels < 1)
        throw SpecError("invalid feature config");
    if (cfg.fmax_hz > buf.sample_rate / 2.0)
        throw SpecError("fmax exceeds Nyquist");

    const int win = cfg.window_samples(buf.sample_rate);
    const int hop = cfg.hop_samples(buf.sample_rate);
    FeatureSequence seq;
    seq.n_mels = cfg.n_mels;
    seq.hop_ms = cfg.hop_ms;
    if (static_cast<int>(buf.samples.size()) < win) return seq;

    const int n_frames =
        static_cast<int>((buf.samples.size() - win) / hop) + 1;
    const int n_fft = detail::next_pow2(win);
    const int n_bins = n_fft / 2 + 1;

    std::vector<double> hann(win);
    for (int i = 0; i < win; ++i)
        hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);
    const std::vector<double> fb = detail::mel_filterbank(cfg, n_fft, buf.sample_rate);

    seq.n_frames = n_frames;
    seq.data.resize(static_cast<size_t>(n_frames) * cfg.n_mels);
    std::vector<std::complex<double>> spec(n_fft);
    std::vector<double> power(n_bins);
    for (int t = 0; t < n_frames; ++t) {
        const int16_t* s = buf.samples.data() + static_cast<size_t>(t) * hop;
        for (int i = 0; i < win; ++i)
            spec[i] = std::complex<double>(s[i] / 32768.0 * hann[i], 0.0);
        std::fill(spec.begin() + win, spec.end(), std::complex<double>(0.0, 0.0));
        detail::fft_radix2(spec);
        for (int k = 0; k < n_bins; ++k) power[k] = std::norm(spec[k]);
        double* out = seq.frame(t);
        for (int m = 0; m < cfg.n_mels; ++m) {
            const double* w = fb.data() + static_cast<size_t>(m) * n_bins;
            double e = 0.0;
            for (int k = 0; k < n_bins; ++k) e += w[k] * power[k];
            out[m] = std::log(e + cfg.log_floor);
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Pseudo-speech synthesizer
// ---------------------------------------------------------------------------

namespace detail {

/// Core synthesis shared by full utterances and short filler bursts.
/// Three harmonics of a pitch trajectory, 4 Hz amplitude modulation and
/// gaussian noise at -20 dB relative to peak.
inline AudioBuffer synth_voiced(double duration_s, double base_f0,
                                TerminalContour contour, double amplitude,
                                uint64_t seed) {
    const int n = static_cast<int>(std::llround(duration_s * kSampleRate));
    const double contour_target =
        (contour == TerminalContour::Falling) ? 0.72 : 1.05;
    const double ramp_start_s = std::max(0.0, duration_s - 0.3);

    Rng rng(derive_stream(seed, 0x7574746572ULL));
    const double am_phase = rng.uniform(0.0, 2.0 * M_PI);

    std::vector<double> x(n);
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    constexpr double kHarmonicNorm = 1.0 + 0.5 + 0.25;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        double f0 = base_f0;
        if (t >= ramp_start_s && duration_s > ramp_start_s) {
            const double u = (t - ramp_start_s) / (duration_s - ramp_start_s);
            f0 = base_f0 * (1.0 + (contour_target - 1.0) * u);
        }
        phase += 2.0 * M_PI * f0 / kSampleRate;
        const double voiced =
            (std::sin(phase) + 0.5 * std::sin(2.0 * phase) +
             0.25 * std::sin(3.0 * phase)) /
            kHarmonicNorm;
        const double am = 0.6 + 0.4 * std::pow(std::sin(2.0 * M_PI * 2.0 * t + am_phase), 2.0);
        x[i] = amplitude * (am * voiced + 0.1 * rng.gaussian());
    }

    // Guarantee the RMS floor of the contract even for quiet specs.
    double rms = 0.0;
    for (double v : x) rms += v * v;
    rms = n > 0 ? std::sqrt(rms / n) : 0.0;
    if (rms > 0.0 && rms < 0.05) {
        const double g = 0.05 / rms;
        for (double& v : x) v *= g;
    }

    AudioBuffer buf;
    buf.samples.resize(n);
    for (int i = 0; i < n; ++i) {
        const double v = std::clamp(x[i], -1.0, 1.0);
        buf.samples[i] = static_cast<int16_t>(std::llround(v * 32767.0));
    }
    return buf;
}

}  // namespace detail

inline AudioBuffer synth_utterance(const UtteranceSpec& spec) {
    if (spec.duration_s < 0.3 || spec.duration_s > 30.0)
        throw SpecError("utterance duration out of [0.3, 30] s");
    if (spec.base_f0 < 80.0 || spec.base_f0 > 400.0)
        throw SpecError("base_f0 out of [80, 400] Hz");
    if (!(spec.amplitude > 0.0) || spec.amplitude > 1.0)
        throw SpecError("amplitude out of (0, 1]");
    return detail::synth_voiced(spec.duration_s, spec.base_f0,
                                spec.terminal_contour, spec.amplitude, spec.seed);
}

inline double rms_fullscale(const int16_t* s, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double v = s[i] / 32768.0;
        acc += v * v;
    }
    return n > 0 ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
}

/// Mean zero-crossing rate (crossings per second) over the trailing window.
/// A short moving average plus a hysteresis band at half the window RMS keeps
/// the noise floor from registering spurious crossings.
inline double zero_crossing_rate(const AudioBuffer& buf, double tail_s) {
    const int n = static_cast<int>(buf.samples.size());
    const int start = std::max(0, n - static_cast<int>(tail_s * buf.sample_rate));
    if (start >= n) return 0.0;
    const int len = n - start;
    std::vector<double> smooth(len, 0.0);
    constexpr int kHalf = 2;  // 5-sample window
    for (int i = 0; i < len; ++i) {
        double acc = 0.0;
        int cnt = 0;
        for (int k = -kHalf; k <= kHalf; ++k) {
            const int j = i + k;
            if (j < 0 || j >= len) continue;
            acc += buf.samples[start + j];
            ++cnt;
        }
        smooth[i] = acc / cnt;
    }
    const double rms = rms_fullscale(buf.samples.data() + start, len);
    const double gate = 0.5 * rms * 32768.0;
    int crossings = 0;
    int state = 0;  // -1 below band, +1 above band, 0 not yet settled
    for (int i = 0; i < len; ++i) {
        if (smooth[i] > gate) {
            if (state == -1) ++crossings;
            state = 1;
        } else if (smooth[i] < -gate) {
            if (state == 1) ++crossings;
            state = -1;
        }
    }
    const double span = static_cast<double>(len) / buf.sample_rate;
    return crossings / span;
}

}  // namespace etd
