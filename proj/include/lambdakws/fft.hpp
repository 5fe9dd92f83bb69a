// Iterative radix-2 complex FFT (power-of-two lengths). Sized for the 512-
// and 1024-point transforms used by the frontend and the phase vocoder.
#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "lambdakws/error.hpp"

namespace lambdakws {

inline void fft_radix2(std::vector<std::complex<double>>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw ContractError("fft: length must be a power of two, got " + std::to_string(n));
    }
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double pi = 3.14159265358979323846;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> w_len(std::cos(angle), std::sin(angle));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const auto u = a[i + j];
                const auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= w_len;
            }
        }
    }
    if (inverse) {
        const double inv = 1.0 / static_cast<double>(n);
        for (auto& x : a) x *= inv;
    }
}

// Forward FFT of a real signal; returns the n/2+1 non-redundant bins.
inline std::vector<std::complex<double>> rfft(const std::vector<double>& x) {
    std::vector<std::complex<double>> buf(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) buf[i] = {x[i], 0.0};
    fft_radix2(buf);
    buf.resize(x.size() / 2 + 1);
    return buf;
}

}  // namespace lambdakws
