// One-second 16 kHz mono audio clips and the PCM-16 WAV codec for the
// dataset's files.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lambdakws/error.hpp"

namespace lambdakws {

inline constexpr std::int64_t kSampleRate = 16000;
inline constexpr std::int64_t kClipSamples = 16000;  // exactly one second

struct AudioClip {
    std::vector<double> samples;  // in [-1, 1]
    std::int64_t sample_rate = kSampleRate;
    std::string label;  // optional keyword id
};

// Pad (zeros at the end) or center-crop to exactly n samples.
inline std::vector<double> fit_to_length(std::vector<double> samples, std::int64_t n) {
    const auto have = static_cast<std::int64_t>(samples.size());
    if (have == n) return samples;
    if (have < n) {
        samples.resize(static_cast<std::size_t>(n), 0.0);
        return samples;
    }
    const std::int64_t start = (have - n) / 2;
    return {samples.begin() + start, samples.begin() + start + n};
}

namespace detail {

inline std::uint32_t read_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

// Decode a RIFF/WAVE byte stream. Requires PCM-16, mono, 16 kHz; integer
// samples are scaled by 1/32768. The clip keeps its native length.
inline AudioClip decode_wav_raw(const std::uint8_t* bytes, std::size_t size) {
    if (size < 12 || std::memcmp(bytes, "RIFF", 4) != 0) {
        throw DecodeError("wav: missing RIFF header");
    }
    if (std::memcmp(bytes + 8, "WAVE", 4) != 0) {
        throw DecodeError("wav: missing WAVE form type");
    }
    bool have_fmt = false;
    std::uint16_t audio_format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    const std::uint8_t* data = nullptr;
    std::uint32_t data_size = 0;

    std::size_t pos = 12;
    while (pos + 8 <= size) {
        const char* id = reinterpret_cast<const char*>(bytes + pos);
        const std::uint32_t chunk_size = detail::read_u32(bytes + pos + 4);
        const std::size_t body = pos + 8;
        if (body + chunk_size > size) {
            throw DecodeError("wav: chunk '" + std::string(id, 4) + "' exceeds file size");
        }
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (chunk_size < 16) throw DecodeError("wav: fmt chunk too short");
            audio_format = detail::read_u16(bytes + body);
            channels = detail::read_u16(bytes + body + 2);
            sample_rate = detail::read_u32(bytes + body + 4);
            bits = detail::read_u16(bytes + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes + body;
            data_size = chunk_size;
        }
        pos = body + chunk_size + (chunk_size % 2);  // chunks are word-aligned
    }
    if (!have_fmt) throw DecodeError("wav: missing fmt chunk");
    if (audio_format != 1) {
        throw DecodeError("wav: audio format " + std::to_string(audio_format) +
                          " is not PCM");
    }
    if (channels != 1) {
        throw DecodeError("wav: " + std::to_string(channels) + " channels, expected mono");
    }
    if (sample_rate != kSampleRate) {
        throw DecodeError("wav: sample rate " + std::to_string(sample_rate) + ", expected " +
                          std::to_string(kSampleRate));
    }
    if (bits != 16) {
        throw DecodeError("wav: " + std::to_string(bits) + " bits per sample, expected 16");
    }
    if (data == nullptr) throw DecodeError("wav: missing data chunk");

    AudioClip clip;
    clip.sample_rate = sample_rate;
    const std::size_t n = data_size / 2;
    clip.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = static_cast<std::int16_t>(detail::read_u16(data + 2 * i));
        clip.samples[i] = static_cast<double>(v) / 32768.0;
    }
    return clip;
}

// Decode and fit to exactly one second (pad short clips with trailing zeros,
// center-crop long ones).
inline AudioClip decode_wav(const std::uint8_t* bytes, std::size_t size) {
    AudioClip clip = decode_wav_raw(bytes, size);
    clip.samples = fit_to_length(std::move(clip.samples), kClipSamples);
    return clip;
}

inline AudioClip decode_wav(const std::vector<std::uint8_t>& bytes) {
    return decode_wav(bytes.data(), bytes.size());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("cannot read " + path);
    return bytes;
}

inline AudioClip read_wav_file(const std::string& path, bool fit_one_second = true) {
    const auto bytes = read_file_bytes(path);
    return fit_one_second ? decode_wav(bytes) : decode_wav_raw(bytes.data(), bytes.size());
}

// Encode as PCM-16 mono WAV; samples are clamped to [-1, 1].
inline std::vector<std::uint8_t> encode_wav(const std::vector<double>& samples,
                                            std::uint32_t sample_rate = kSampleRate) {
    const auto n = samples.size();
    const std::uint32_t data_size = static_cast<std::uint32_t>(n * 2);
    std::vector<std::uint8_t> out;
    out.reserve(44 + data_size);
    auto put_u32 = [&out](std::uint32_t v) {
        out.push_back(static_cast<std::uint8_t>(v & 0xff));
        out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
        out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
        out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
    };
    auto put_u16 = [&out](std::uint16_t v) {
        out.push_back(static_cast<std::uint8_t>(v & 0xff));
        out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    };
    auto put_tag = [&out](const char* tag) {
        out.insert(out.end(), tag, tag + 4);
    };
    put_tag("RIFF");
    put_u32(36 + data_size);
    put_tag("WAVE");
    put_tag("fmt ");
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(sample_rate);
    put_u32(sample_rate * 2);  // byte rate
    put_u16(2);                // block align
    put_u16(16);               // bits
    put_tag("data");
    put_u32(data_size);
    for (const double s : samples) {
        const double c = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
        const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0));
        put_u16(static_cast<std::uint16_t>(v));
    }
    return out;
}

inline void write_wav_file(const std::string& path, const std::vector<double>& samples,
                           std::uint32_t sample_rate = kSampleRate) {
    const auto bytes = encode_wav(samples, sample_rate);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + path);
}

}  // namespace lambdakws
