// Log-mel feature extraction: 40 triangular mel bands over 20 ms / 10 ms
// frames of a peak-normalized one-second clip, giving a fixed 40 x 100 map
// that the model treats as 40 uni-dimensional channels.
//
// The feature contract is pinned bit-exactly: 320-sample periodic Hann
// window, 160-sample hop, 80 samples of reflect padding on each side (so
// exactly 100 frames), 512-point FFT, HTK mel scale over 20 Hz..8 kHz,
// unnormalized peak-1 triangles, log(energy + 1e-6).
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <vector>

#include "lambdakws/audio.hpp"
#include "lambdakws/error.hpp"
#include "lambdakws/fft.hpp"
#include "lambdakws/tensor.hpp"

namespace lambdakws {

inline constexpr std::int64_t kMelBands = 40;
inline constexpr std::int64_t kMelFrames = 100;
inline constexpr std::int64_t kMelWindow = 320;  // 20 ms at 16 kHz
inline constexpr std::int64_t kMelHop = 160;     // 10 ms
inline constexpr std::int64_t kMelFft = 512;
inline constexpr double kMelFreqLo = 20.0;
inline constexpr double kMelFreqHi = 8000.0;
inline constexpr double kMelLogFloor = 1e-6;

struct MelFeatures {
    // Channel-major: values[band * kMelFrames + frame].
    std::vector<double> values;

    double at(std::int64_t band, std::int64_t frame) const {
        return values[static_cast<std::size_t>(band * kMelFrames + frame)];
    }

    TensorPtr to_tensor() const { return tensor({kMelBands, kMelFrames}, values); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelFilterbank {
    std::int64_t n_mels = 0;
    std::int64_t n_bins = 0;               // n_fft/2 + 1
    std::vector<double> weights;           // [n_mels x n_bins]
    std::vector<double> edges_hz;          // n_mels + 2 band edges
    std::vector<double> center_freqs_hz;   // n_mels filter peaks

    double weight(std::int64_t mel, std::int64_t bin) const {
        return weights[static_cast<std::size_t>(mel * n_bins + bin)];
    }
};

// Triangular filters on the HTK mel scale, peak value 1, adjacent filters
// overlapping at their band edges.
inline MelFilterbank mel_filterbank(std::int64_t n_mels = kMelBands,
                                    std::int64_t n_fft = kMelFft, double f_lo = kMelFreqLo,
                                    double f_hi = kMelFreqHi,
                                    double sample_rate = static_cast<double>(kSampleRate)) {
    if (n_mels < 1 || n_fft < 2) {
        throw ConfigError("mel_filterbank: need at least one filter and a positive FFT size");
    }
    if (!(f_lo >= 0.0 && f_lo < f_hi && f_hi <= sample_rate / 2.0)) {
        throw ConfigError("mel_filterbank: band edges must satisfy 0 <= f_lo < f_hi <= " +
                          std::to_string(sample_rate / 2.0));
    }
    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.n_bins = n_fft / 2 + 1;
    fb.weights.assign(static_cast<std::size_t>(fb.n_mels * fb.n_bins), 0.0);

    const double mel_lo = hz_to_mel(f_lo), mel_hi = hz_to_mel(f_hi);
    fb.edges_hz.resize(static_cast<std::size_t>(n_mels + 2));
    for (std::int64_t i = 0; i < n_mels + 2; ++i) {
        const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                        static_cast<double>(n_mels + 1);
        fb.edges_hz[static_cast<std::size_t>(i)] = mel_to_hz(mel);
    }
    fb.center_freqs_hz.assign(fb.edges_hz.begin() + 1, fb.edges_hz.end() - 1);

    const double bin_hz = sample_rate / static_cast<double>(n_fft);
    for (std::int64_t m = 0; m < n_mels; ++m) {
        const double left = fb.edges_hz[static_cast<std::size_t>(m)];
        const double center = fb.edges_hz[static_cast<std::size_t>(m + 1)];
        const double right = fb.edges_hz[static_cast<std::size_t>(m + 2)];
        for (std::int64_t k = 0; k < fb.n_bins; ++k) {
            const double f = bin_hz * static_cast<double>(k);
            double w = 0.0;
            if (f > left && f < right) {
                w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
            }
            fb.weights[static_cast<std::size_t>(m * fb.n_bins + k)] = w;
        }
    }
    return fb;
}

inline const MelFilterbank& default_filterbank() {
    static const MelFilterbank fb = mel_filterbank();
    return fb;
}

namespace detail {

inline const std::vector<double>& hann_window(std::int64_t n) {
    static thread_local std::vector<double> cache;
    static thread_local std::int64_t cached_n = -1;
    if (cached_n != n) {
        cache.resize(static_cast<std::size_t>(n));
        const double pi = 3.14159265358979323846;
        for (std::int64_t i = 0; i < n; ++i) {
            cache[static_cast<std::size_t>(i)] =
                0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(i) / static_cast<double>(n));
        }
        cached_n = n;
    }
    return cache;
}

// Reflect index (no edge duplication) into [0, n).
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

}  // namespace detail

// Log-scaled mel spectrogram of a one-second clip; always 40 x 100 and
// bitwise deterministic for identical input bytes.
inline MelFeatures mel_spectrogram(const AudioClip& clip,
                                   const MelFilterbank& fb = default_filterbank()) {
    if (static_cast<std::int64_t>(clip.samples.size()) != kClipSamples) {
        throw ContractError("mel_spectrogram: clip has " + std::to_string(clip.samples.size()) +
                            " samples, expected " + std::to_string(kClipSamples));
    }
    if (fb.n_mels != kMelBands || fb.n_bins != kMelFft / 2 + 1) {
        throw ConfigError("mel_spectrogram: filterbank geometry mismatch");
    }

    // Peak normalization; silence is left untouched.
    std::vector<double> x = clip.samples;
    double peak = 0.0;
    for (const double v : x) peak = std::max(peak, std::abs(v));
    if (peak > 0.0) {
        const double inv = 1.0 / peak;
        for (auto& v : x) v *= inv;
    }

    const std::int64_t pad = (kMelWindow - kMelHop) / 2;  // 80 samples each side
    const auto& window = detail::hann_window(kMelWindow);

    MelFeatures features;
    features.values.assign(static_cast<std::size_t>(kMelBands * kMelFrames), 0.0);
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(kMelFft));
    std::vector<double> power(static_cast<std::size_t>(fb.n_bins));
    for (std::int64_t t = 0; t < kMelFrames; ++t) {
        const std::int64_t start = t * kMelHop - pad;
        for (std::int64_t i = 0; i < kMelWindow; ++i) {
            const std::int64_t src = detail::reflect_index(start + i, kClipSamples);
            buf[static_cast<std::size_t>(i)] = {
                x[static_cast<std::size_t>(src)] * window[static_cast<std::size_t>(i)], 0.0};
        }
        for (std::int64_t i = kMelWindow; i < kMelFft; ++i) {
            buf[static_cast<std::size_t>(i)] = {0.0, 0.0};
        }
        fft_radix2(buf);
        for (std::int64_t k = 0; k < fb.n_bins; ++k) {
            const auto& c = buf[static_cast<std::size_t>(k)];
            power[static_cast<std::size_t>(k)] = c.real() * c.real() + c.imag() * c.imag();
        }
        for (std::int64_t m = 0; m < kMelBands; ++m) {
            const double* wrow = fb.weights.data() + m * fb.n_bins;
            double acc = 0.0;
            for (std::int64_t k = 0; k < fb.n_bins; ++k) acc += wrow[k] * power[static_cast<std::size_t>(k)];
            features.values[static_cast<std::size_t>(m * kMelFrames + t)] =
                std::log(acc + kMelLogFloor);
        }
    }
    return features;
}

// CSV dump (40 rows x 100 columns, full precision) used by the `features`
// subcommand and the golden-file test.
inline void write_mel_csv(const MelFeatures& features, std::ostream& out) {
    char cell[64];
    for (std::int64_t m = 0; m < kMelBands; ++m) {
        for (std::int64_t t = 0; t < kMelFrames; ++t) {
            std::snprintf(cell, sizeof(cell), "%.17g", features.at(m, t));
            out << cell << (t + 1 == kMelFrames ? "\n" : ",");
        }
    }
}

}  // namespace lambdakws
