// Empirical complexity-scaling benchmark: times forward passes of multi-head
// attention and of the lambda layer (global and local context) over a sweep
// of sequence lengths, and fits the log-log slope. Slope bands rather than
// absolute times keep the check hardware-independent.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "lambdakws/attention.hpp"
#include "lambdakws/error.hpp"
#include "lambdakws/lambda.hpp"
#include "lambdakws/tensor.hpp"

namespace lambdakws {

enum class BenchLayer { kAttention, kLambdaGlobal, kLambdaConv };

inline const char* bench_layer_name(BenchLayer layer) {
    switch (layer) {
        case BenchLayer::kAttention: return "attention";
        case BenchLayer::kLambdaGlobal: return "lambda_global";
        case BenchLayer::kLambdaConv: return "lambda_conv";
    }
    return "?";
}

struct ScalingPoint {
    std::int64_t n = 0;
    double mean_ns = 0.0;
    double stderr_ns = 0.0;
    std::int64_t peak_bytes = 0;
};

struct ScalingReport {
    BenchLayer layer = BenchLayer::kAttention;
    std::vector<ScalingPoint> points;
    double slope = std::numeric_limits<double>::quiet_NaN();
    double slope_stderr = std::numeric_limits<double>::quiet_NaN();
    // False when per-point timing spread exceeds 20% of the mean; consumers
    // should rerun rather than trust the fit.
    bool reliable = true;
};

namespace detail {

// Fixed benchmark geometry: d = 64 channels, h = 4, d_k = 16, d_v = 16, r = 23.
struct BenchCase {
    BenchLayer layer;
    std::int64_t n;
    TensorPtr x;
    AttentionParams attn;
    LambdaConfig lambda_cfg;
    LambdaParams lambda;

    BenchCase(BenchLayer l, std::int64_t n_, Rng& rng) : layer(l), n(n_) {
        constexpr std::int64_t d = 64;
        if (layer == BenchLayer::kAttention) {
            AttentionConfig cfg{.n = n, .d = d, .heads = 4, .d_k = 16, .d_v = 16};
            attn = make_attention_params(cfg, rng);
            x = randn({n, d}, rng);
        } else {
            lambda_cfg = LambdaConfig{
                .d_in = d,
                .d_out = d,
                .heads = 4,
                .d_k = 16,
                .r = 23,
                .context = layer == BenchLayer::kLambdaConv ? LambdaContext::kLocal
                                                            : LambdaContext::kGlobal,
                .normalize_qv = false,
            };
            lambda = make_lambda_params(lambda_cfg, rng,
                                        layer == BenchLayer::kLambdaConv ? 0 : n);
            x = randn({d, n}, rng);
        }
    }

    void run() {
        if (layer == BenchLayer::kAttention) {
            multi_head_attend(x, attn);
        } else if (layer == BenchLayer::kLambdaConv) {
            lambda_conv_forward(x, lambda, lambda_cfg);
        } else {
            lambda_forward(x, lambda, lambda_cfg);
        }
    }
};

struct SlopeFit {
    double slope;
    double stderr;
};

inline SlopeFit fit_loglog_slope(const std::vector<ScalingPoint>& points) {
    const auto m = static_cast<double>(points.size());
    double sx = 0.0, sy = 0.0;
    std::vector<double> xs, ys;
    for (const auto& p : points) {
        xs.push_back(std::log(static_cast<double>(p.n)));
        ys.push_back(std::log(std::max(p.mean_ns, 1.0)));
        sx += xs.back();
        sy += ys.back();
    }
    const double mx = sx / m, my = sy / m;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    const double slope = sxy / sxx;
    const double intercept = my - slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double r = ys[i] - (intercept + slope * xs[i]);
        ss_res += r * r;
    }
    const double dof = m > 2.0 ? m - 2.0 : 1.0;
    return {slope, std::sqrt(ss_res / dof / sxx)};
}

}  // namespace detail

// Forward-only wall-time and peak-allocation measurement over n_sweep, one
// warm-up iteration per point, `reps` timed iterations. Parameters and inputs
// are built outside the timed region; reps = 0 yields an empty report.
inline ScalingReport scaling_benchmark(BenchLayer layer,
                                       const std::vector<std::int64_t>& n_sweep, int reps,
                                       std::uint64_t seed = 1) {
    if (n_sweep.size() < 4) {
        throw ConfigError("benchmark: n_sweep needs at least 4 points");
    }
    for (std::size_t i = 1; i < n_sweep.size(); ++i) {
        if (n_sweep[i] <= n_sweep[i - 1]) {
            throw ConfigError("benchmark: n_sweep must be strictly increasing");
        }
    }
    if (n_sweep.back() < 8 * n_sweep.front()) {
        throw ConfigError("benchmark: n_sweep must span at least an 8x range");
    }

    ScalingReport report;
    report.layer = layer;
    if (reps <= 0) return report;

    NoGradGuard no_grad;
    Rng rng(seed);
    for (const auto n : n_sweep) {
        detail::BenchCase bench(layer, n, rng);
        bench.run();  // warm-up
        double sum = 0.0, sum_sq = 0.0;
        std::int64_t peak = 0;
        for (int rep = 0; rep < reps; ++rep) {
            const std::int64_t baseline = alloc_stats().live_bytes;
            reset_peak_alloc();
            const auto t0 = std::chrono::steady_clock::now();
            bench.run();
            const auto t1 = std::chrono::steady_clock::now();
            const double ns =
                static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0)
                                        .count());
            peak = std::max(peak, alloc_stats().peak_bytes - baseline);
            sum += ns;
            sum_sq += ns * ns;
        }
        const double mean = sum / reps;
        double se = 0.0;
        if (reps > 1) {
            const double var = std::max(0.0, (sum_sq - sum * sum / reps) / (reps - 1));
            se = std::sqrt(var / reps);
        }
        report.points.push_back({n, mean, se, peak});
        if (reps > 1 && mean > 0.0 && se / mean > 0.2) {
            report.reliable = false;
        }
    }
    const auto fit = detail::fit_loglog_slope(report.points);
    report.slope = fit.slope;
    report.slope_stderr = fit.stderr;
    return report;
}

inline void write_scaling_csv(const ScalingReport& report, std::ostream& out) {
    out << "n,mean_ns,stderr_ns,peak_bytes\n";
    char line[128];
    for (const auto& p : report.points) {
        std::snprintf(line, sizeof(line), "%lld,%.1f,%.1f,%lld\n",
                      static_cast<long long>(p.n), p.mean_ns, p.stderr_ns,
                      static_cast<long long>(p.peak_bytes));
        out << line;
    }
}

}  // namespace lambdakws
