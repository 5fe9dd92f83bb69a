// Train-time waveform augmentation: seven independent disturbances, each
// fired against its own probability, applied in the order
// stretch -> pitch -> shift -> crop -> noise -> clip distortion -> volume
// (time-domain resampling first, additive/level effects last). The output is
// always exactly one second and clamped to [-1, 1].
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lambdakws/audio.hpp"
#include "lambdakws/error.hpp"
#include "lambdakws/fft.hpp"
#include "lambdakws/rng.hpp"

namespace lambdakws {

struct DisturbanceSpec {
    double p = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

// Defaults follow the augmentation table: probability and parameter range per
// disturbance.
struct AugmentationPolicy {
    DisturbanceSpec background_noise{0.7, 0.0, 15.0};     // SNR dB
    DisturbanceSpec clip_distortion{0.2, 0.2, 0.4};       // percentile threshold
    DisturbanceSpec cropping{0.5, 0.010, 0.100};          // seconds zeroed
    DisturbanceSpec pitch_shift{0.3, -4.0, 4.0};          // semitones
    DisturbanceSpec temporal_shift{0.3, -0.200, 0.200};   // seconds
    DisturbanceSpec temporal_stretch{0.3, 0.75, 1.25};    // rate
    DisturbanceSpec volume{0.5, -5.0, 5.0};               // gain dB

    void validate() const {
        for (const auto* d : {&background_noise, &clip_distortion, &cropping, &pitch_shift,
                              &temporal_shift, &temporal_stretch, &volume}) {
            if (!(d->p >= 0.0 && d->p <= 1.0)) {
                throw ConfigError("augment: probability must be in [0, 1]");
            }
            if (!(d->lo <= d->hi)) {
                throw ConfigError("augment: parameter range is inverted");
            }
        }
        if (temporal_stretch.lo <= 0.0) {
            throw ConfigError("augment: stretch rate must be positive");
        }
    }
};

struct NoiseBank {
    std::vector<std::vector<double>> waveforms;

    void validate() const {
        for (const auto& w : waveforms) {
            if (static_cast<std::int64_t>(w.size()) < kClipSamples) {
                throw ConfigError("augment: noise waveforms must be at least one second long");
            }
        }
    }
};

// Loads every WAV under the dataset's background-noise folder at native
// length.
inline NoiseBank load_noise_bank(const std::string& dir) {
    NoiseBank bank;
    std::vector<std::filesystem::path> files;
    if (!std::filesystem::is_directory(dir)) {
        throw IoError("noise bank: not a directory: " + dir);
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".wav") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        bank.waveforms.push_back(read_wav_file(f.string(), /*fit_one_second=*/false).samples);
    }
    bank.validate();
    return bank;
}

// Fired when the pipeline is assembled: a policy that can select background
// noise needs a non-empty bank.
inline void validate_augmentation(const AugmentationPolicy& policy, const NoiseBank& bank) {
    policy.validate();
    bank.validate();
    if (policy.background_noise.p > 0.0 && bank.waveforms.empty()) {
        throw ConfigError("augment: background-noise probability is positive but the noise bank is empty");
    }
}

// ---------------------------------------------------------------------------
// Individual transforms

// Scale noise so that 10*log10(P_clean / P_noise) equals snr_db and add it.
// A silent clean clip falls back to a reference power of 1e-4.
inline AudioClip mix_at_snr(const AudioClip& clean, const std::vector<double>& noise_segment,
                            double snr_db) {
    if (clean.samples.size() != noise_segment.size()) {
        throw DimensionError("mix_at_snr: clean and noise lengths differ");
    }
    const auto n = clean.samples.size();
    double p_clean = 0.0, p_noise = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p_clean += clean.samples[i] * clean.samples[i];
        p_noise += noise_segment[i] * noise_segment[i];
    }
    p_clean /= static_cast<double>(n);
    p_noise /= static_cast<double>(n);
    if (p_clean < 1e-12) p_clean = 1e-4;  // silent input: fixed reference level
    AudioClip out = clean;
    if (p_noise <= 0.0) return out;
    const double gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
    for (std::size_t i = 0; i < n; ++i) out.samples[i] += gain * noise_segment[i];
    return out;
}

namespace detail {

inline double wrap_phase(double theta) {
    const double pi = 3.14159265358979323846;
    const double two_pi = 2.0 * pi;
    theta = std::fmod(theta + pi, two_pi);
    if (theta < 0.0) theta += two_pi;
    return theta - pi;
}

// Phase-vocoder time stretch. rate > 1 compresses, rate < 1 expands; the
// result has exactly round(len / rate) samples and unchanged pitch.
inline std::vector<double> phase_vocoder_stretch(const std::vector<double>& x, double rate) {
    if (rate <= 0.0) throw ConfigError("time_stretch: rate must be positive");
    const std::int64_t len = static_cast<std::int64_t>(x.size());
    const std::int64_t target = static_cast<std::int64_t>(std::llround(len / rate));
    if (len == 0 || target <= 0) return {};

    constexpr std::int64_t kWin = 1024;
    constexpr std::int64_t kHop = 256;
    constexpr std::int64_t kHalf = kWin / 2;
    constexpr std::int64_t kBins = kWin / 2 + 1;
    const double pi = 3.14159265358979323846;

    std::vector<double> window(kWin);
    for (std::int64_t i = 0; i < kWin; ++i) {
        window[static_cast<std::size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(i) / kWin);
    }

    // Centered analysis STFT over the reflect-padded signal.
    auto sample_at = [&](std::int64_t i) {
        if (i < 0) i = -i;
        if (i >= len) i = std::max<std::int64_t>(0, 2 * len - 2 - i);
        return x[static_cast<std::size_t>(i)];
    };
    const std::int64_t n_cols = len / kHop + 1;
    std::vector<std::vector<std::complex<double>>> stft(
        static_cast<std::size_t>(n_cols));
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(kWin));
    for (std::int64_t t = 0; t < n_cols; ++t) {
        const std::int64_t start = t * kHop - kHalf;
        for (std::int64_t i = 0; i < kWin; ++i) {
            buf[static_cast<std::size_t>(i)] = {
                sample_at(start + i) * window[static_cast<std::size_t>(i)], 0.0};
        }
        fft_radix2(buf);
        stft[static_cast<std::size_t>(t)].assign(buf.begin(), buf.begin() + kBins);
    }

    // Synthesis columns at analysis positions j*rate with phase accumulation.
    const std::int64_t out_cols =
        static_cast<std::int64_t>(std::floor(static_cast<double>(n_cols - 1) / rate)) + 1;
    std::vector<double> phase(static_cast<std::size_t>(kBins));
    for (std::int64_t k = 0; k < kBins; ++k) {
        phase[static_cast<std::size_t>(k)] = std::arg(stft[0][static_cast<std::size_t>(k)]);
    }
    const std::int64_t out_len_raw = (out_cols - 1) * kHop + kWin;
    std::vector<double> acc(static_cast<std::size_t>(out_len_raw), 0.0);
    std::vector<double> norm(static_cast<std::size_t>(out_len_raw), 0.0);

    std::vector<std::complex<double>> frame(static_cast<std::size_t>(kWin));
    for (std::int64_t j = 0; j < out_cols; ++j) {
        const double pos = static_cast<double>(j) * rate;
        const auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(pos), n_cols - 1);
        const auto i1 = std::min<std::int64_t>(i0 + 1, n_cols - 1);
        const double frac = pos - static_cast<double>(i0);
        const auto& col0 = stft[static_cast<std::size_t>(i0)];
        const auto& col1 = stft[static_cast<std::size_t>(i1)];

        for (std::int64_t k = 0; k < kBins; ++k) {
            const double mag =
                (1.0 - frac) * std::abs(col0[static_cast<std::size_t>(k)]) +
                frac * std::abs(col1[static_cast<std::size_t>(k)]);
            frame[static_cast<std::size_t>(k)] =
                std::polar(mag, phase[static_cast<std::size_t>(k)]);
        }
        for (std::int64_t k = kBins; k < kWin; ++k) {
            frame[static_cast<std::size_t>(k)] =
                std::conj(frame[static_cast<std::size_t>(kWin - k)]);
        }
        fft_radix2(frame, /*inverse=*/true);
        const std::int64_t out_start = j * kHop;
        for (std::int64_t i = 0; i < kWin; ++i) {
            const double w = window[static_cast<std::size_t>(i)];
            acc[static_cast<std::size_t>(out_start + i)] +=
                w * frame[static_cast<std::size_t>(i)].real();
            norm[static_cast<std::size_t>(out_start + i)] += w * w;
        }

        // Advance phases using the instantaneous frequency between the two
        // bracketing analysis columns.
        for (std::int64_t k = 0; k < kBins; ++k) {
            const double omega_hop = 2.0 * pi * static_cast<double>(k) / kWin * kHop;
            const double dphase = wrap_phase(std::arg(col1[static_cast<std::size_t>(k)]) -
                                             std::arg(col0[static_cast<std::size_t>(k)]) -
                                             omega_hop);
            phase[static_cast<std::size_t>(k)] += omega_hop + dphase;
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
        if (norm[i] > 1e-8) acc[i] /= norm[i];
    }

    // Drop the centering pad and cut the target length.
    std::vector<double> out(static_cast<std::size_t>(target), 0.0);
    for (std::int64_t i = 0; i < target; ++i) {
        const std::int64_t src = i + kHalf;
        if (src < out_len_raw) out[static_cast<std::size_t>(i)] = acc[static_cast<std::size_t>(src)];
    }
    return out;
}

inline std::vector<double> resample_linear(const std::vector<double>& x, std::int64_t target) {
    const auto len = static_cast<std::int64_t>(x.size());
    if (len == 0 || target <= 0) return std::vector<double>(static_cast<std::size_t>(std::max<std::int64_t>(target, 0)), 0.0);
    std::vector<double> out(static_cast<std::size_t>(target));
    const double step = static_cast<double>(len) / static_cast<double>(target);
    for (std::int64_t i = 0; i < target; ++i) {
        const double pos = static_cast<double>(i) * step;
        const auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(pos), len - 1);
        const auto i1 = std::min<std::int64_t>(i0 + 1, len - 1);
        const double frac = pos - static_cast<double>(i0);
        out[static_cast<std::size_t>(i)] = (1.0 - frac) * x[static_cast<std::size_t>(i0)] +
                                           frac * x[static_cast<std::size_t>(i1)];
    }
    return out;
}

inline double abs_quantile(const std::vector<double>& x, double q) {
    std::vector<double> mags(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mags[i] = std::abs(x[i]);
    const auto idx = static_cast<std::size_t>(
        std::llround(q * static_cast<double>(mags.size() - 1)));
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(idx), mags.end());
    return mags[idx];
}

}  // namespace detail

// Time stretch by `rate`; output has round(len/rate) samples (not refit).
inline AudioClip time_stretch(const AudioClip& clip, double rate) {
    AudioClip out = clip;
    out.samples = detail::phase_vocoder_stretch(clip.samples, rate);
    return out;
}

// Pitch shift by `semitones`: stretch so the clip lasts 2^(s/12) times
// longer, then resample back to the original length.
inline AudioClip pitch_shift(const AudioClip& clip, double semitones) {
    const double factor = std::pow(2.0, semitones / 12.0);
    AudioClip out = clip;
    auto stretched = detail::phase_vocoder_stretch(clip.samples, 1.0 / factor);
    out.samples = detail::resample_linear(stretched,
                                          static_cast<std::int64_t>(clip.samples.size()));
    return out;
}

enum class Disturbance : int {
    kTemporalStretch = 0,
    kPitchShift,
    kTemporalShift,
    kCropping,
    kBackgroundNoise,
    kClipDistortion,
    kVolume,
};
inline constexpr int kDisturbanceCount = 7;

struct AugmentResult {
    AudioClip clip;
    std::array<bool, kDisturbanceCount> applied{};

    bool was_applied(Disturbance d) const { return applied[static_cast<int>(d)]; }
};

// Apply the policy to a one-second clip. Each disturbance fires independently
// against its probability; identical (clip, policy, seed) produce bitwise
// identical output.
inline AugmentResult augment(const AudioClip& clip, const AugmentationPolicy& policy,
                             const NoiseBank& noise_bank, Rng& rng) {
    validate_augmentation(policy, noise_bank);
    if (static_cast<std::int64_t>(clip.samples.size()) != kClipSamples) {
        throw ContractError("augment: clip must be exactly one second");
    }
    AugmentResult result;
    result.clip = clip;
    auto& x = result.clip.samples;
    auto fired = [&](Disturbance d, const DisturbanceSpec& spec) {
        const bool f = rng.bernoulli(spec.p);
        result.applied[static_cast<int>(d)] = f;
        return f;
    };

    if (fired(Disturbance::kTemporalStretch, policy.temporal_stretch)) {
        const double rate = rng.uniform(policy.temporal_stretch.lo, policy.temporal_stretch.hi);
        x = fit_to_length(detail::phase_vocoder_stretch(x, rate), kClipSamples);
    }
    if (fired(Disturbance::kPitchShift, policy.pitch_shift)) {
        const double semitones = rng.uniform(policy.pitch_shift.lo, policy.pitch_shift.hi);
        AudioClip tmp;
        tmp.samples = x;
        x = pitch_shift(tmp, semitones).samples;
        x = fit_to_length(std::move(x), kClipSamples);
    }
    if (fired(Disturbance::kTemporalShift, policy.temporal_shift)) {
        const double sec = rng.uniform(policy.temporal_shift.lo, policy.temporal_shift.hi);
        const auto shift = static_cast<std::int64_t>(std::llround(sec * kSampleRate));
        std::vector<double> shifted(x.size(), 0.0);
        for (std::int64_t i = 0; i < kClipSamples; ++i) {
            const std::int64_t src = i - shift;
            if (src >= 0 && src < kClipSamples) {
                shifted[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(src)];
            }
        }
        x = std::move(shifted);
    }
    if (fired(Disturbance::kCropping, policy.cropping)) {
        const double sec = rng.uniform(policy.cropping.lo, policy.cropping.hi);
        const auto span = std::min<std::int64_t>(
            kClipSamples, static_cast<std::int64_t>(std::llround(sec * kSampleRate)));
        const auto offset =
            static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(kClipSamples - span + 1)));
        std::fill(x.begin() + offset, x.begin() + offset + span, 0.0);
    }
    if (fired(Disturbance::kBackgroundNoise, policy.background_noise)) {
        const double snr = rng.uniform(policy.background_noise.lo, policy.background_noise.hi);
        const auto& noise =
            noise_bank.waveforms[rng.uniform_index(noise_bank.waveforms.size())];
        const auto max_offset = noise.size() - static_cast<std::size_t>(kClipSamples);
        const auto offset = max_offset == 0 ? 0 : rng.uniform_index(max_offset + 1);
        std::vector<double> segment(noise.begin() + static_cast<std::ptrdiff_t>(offset),
                                    noise.begin() + static_cast<std::ptrdiff_t>(offset) +
                                        kClipSamples);
        result.clip.samples = mix_at_snr(result.clip, segment, snr).samples;
    }
    if (fired(Disturbance::kClipDistortion, policy.clip_distortion)) {
        const double threshold = rng.uniform(policy.clip_distortion.lo, policy.clip_distortion.hi);
        // Hard-clip at the amplitude whose |x| quantile is (1 - threshold).
        const double limit = detail::abs_quantile(x, 1.0 - threshold);
        if (limit > 0.0) {
            for (auto& v : x) v = std::clamp(v, -limit, limit);
        }
    }
    if (fired(Disturbance::kVolume, policy.volume)) {
        const double gain_db = rng.uniform(policy.volume.lo, policy.volume.hi);
        const double gain = std::pow(10.0, gain_db / 20.0);
        for (auto& v : x) v *= gain;
    }

    for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
    return result;
}

}  // namespace lambdakws
