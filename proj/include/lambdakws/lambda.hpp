// Temporal lambda layer: content + position lambdas applied to multi-query
// projections, with either a global positional-embedding table or a local
// relative-offset table (the lambda convolution, linear in sequence length).
//
// Layout conventions: layer inputs/outputs are channel-major [d_in x n] or
// [B x d_in x n]; the standalone content_lambda / position_lambda helpers take
// position-major matrices ([n x d_k], [n x d_v]) matching the usual notation.
#pragma once

#include <cstdint>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/rng.hpp"
#include "lambdakws/tensor.hpp"

namespace lambdakws {

enum class LambdaContext { kGlobal, kLocal };

struct LambdaConfig {
    std::int64_t d_in = 0;
    std::int64_t d_out = 0;
    std::int64_t heads = 4;
    std::int64_t d_k = 16;
    std::int64_t r = 23;  // local scope length, odd
    LambdaContext context = LambdaContext::kLocal;
    // Batch-normalize queries and values after projection.
    bool normalize_qv = true;

    std::int64_t d_v() const { return d_out / heads; }

    void validate() const {
        if (d_in <= 0 || d_out <= 0 || heads <= 0 || d_k <= 0) {
            throw ConfigError("lambda: extents must be positive");
        }
        if (d_out % heads != 0) {
            throw ConfigError("lambda: d_out " + std::to_string(d_out) +
                              " not divisible by heads " + std::to_string(heads));
        }
        if (context == LambdaContext::kLocal && (r <= 0 || r % 2 == 0)) {
            throw ConfigError("lambda: local scope r must be odd and positive, got " +
                              std::to_string(r));
        }
    }
};

struct BatchNormParams {
    TensorPtr gamma;
    TensorPtr beta;
    BatchNormState state;

    BatchNormParams() = default;
    explicit BatchNormParams(std::int64_t channels)
        : gamma(ones({channels}, true)), beta(zeros({channels}, true)), state(channels) {}
};

struct LambdaParams {
    TensorPtr w_q;        // [heads*d_k x d_in]
    TensorPtr w_k;        // [d_k x d_in]
    TensorPtr w_v;        // [d_v x d_in]
    TensorPtr embedding;  // local: [r x d_k]; global: [n x n x d_k]
    BatchNormParams q_norm;  // over heads*d_k channels
    BatchNormParams v_norm;  // over d_v channels
};

// Deterministic initialization: fan-in-scaled uniform projections, positional
// embedding from N(0, 1/sqrt(d_k)). Global context materializes the full
// per-position table for sequence length n.
inline LambdaParams make_lambda_params(const LambdaConfig& config, Rng& rng,
                                       std::int64_t n_for_global = 0) {
    config.validate();
    if (config.context == LambdaContext::kGlobal && n_for_global <= 0) {
        throw ConfigError("lambda: global context needs the sequence length up front");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_in));
    LambdaParams p;
    p.w_q = uniform({config.heads * config.d_k, config.d_in}, rng, -bound, bound, true);
    p.w_k = uniform({config.d_k, config.d_in}, rng, -bound, bound, true);
    p.w_v = uniform({config.d_v(), config.d_in}, rng, -bound, bound, true);
    const double e_std = 1.0 / std::sqrt(static_cast<double>(config.d_k));
    if (config.context == LambdaContext::kLocal) {
        p.embedding = randn({config.r, config.d_k}, rng, 0.0, e_std, true);
    } else {
        p.embedding = randn({n_for_global, n_for_global, config.d_k}, rng, 0.0, e_std, true);
    }
    if (config.normalize_qv) {
        p.q_norm = BatchNormParams(config.heads * config.d_k);
        p.v_norm = BatchNormParams(config.d_v());
    }
    return p;
}

// ---------------------------------------------------------------------------
// Standalone operations in the paper's position-major notation.

// lambda_c = sigma(K)^T V, where sigma normalizes each key dimension over the
// n context positions. K is [n x d_k], V is [n x d_v]; the result is
// [d_k x d_v].
inline TensorPtr content_lambda(const TensorPtr& keys, const TensorPtr& values) {
    if (keys->rank() != 2 || values->rank() != 2) {
        throw DimensionError("content_lambda: K and V must be rank-2");
    }
    if (keys->shape[0] == 0) {
        throw ContractError("content_lambda: empty context");
    }
    if (keys->shape[0] != values->shape[0]) {
        throw DimensionError("content_lambda: K " + shape_str(keys->shape) + " and V " +
                             shape_str(values->shape) + " disagree on context length");
    }
    return matmul(transpose(softmax(keys, 0)), values);
}

// lambda_p(n) = E_n^T V for one query position; E_n is [n x d_k], V is
// [n x d_v]. No normalization is applied to the embedding.
inline TensorPtr position_lambda(const TensorPtr& embedding_slice, const TensorPtr& values) {
    if (embedding_slice->rank() != 2 || values->rank() != 2) {
        throw DimensionError("position_lambda: E_n and V must be rank-2");
    }
    if (embedding_slice->shape[0] != values->shape[0]) {
        throw DimensionError("position_lambda: E_n " + shape_str(embedding_slice->shape) +
                             " and V " + shape_str(values->shape) +
                             " disagree on context length");
    }
    return matmul(transpose(embedding_slice), values);
}

// ---------------------------------------------------------------------------
// Channel-major batched kernels used by the layer forward.

namespace detail {

struct Dims3 {
    std::int64_t batch;
    std::int64_t channels;
    std::int64_t length;
    bool batched;
};

inline Dims3 dims3(const TensorPtr& x, const char* what) {
    if (x->rank() == 2) return {1, x->shape[0], x->shape[1], false};
    if (x->rank() == 3) return {x->shape[0], x->shape[1], x->shape[2], true};
    throw DimensionError(std::string(what) + ": input must be rank 2 or 3, got " +
                         shape_str(x->shape));
}

}  // namespace detail

// 1x1 projection over channels: out[d, t] = sum_c w[d, c] * x[c, t].
// x is [C x L] or [B x C x L]; w is [D x C].
inline TensorPtr project(const TensorPtr& w, const TensorPtr& x) {
    const auto d = detail::dims3(x, "project");
    if (w->rank() != 2 || w->shape[1] != d.channels) {
        throw DimensionError("project: weight " + shape_str(w->shape) +
                             " does not match input channels " + std::to_string(d.channels));
    }
    const std::int64_t d_out = w->shape[0];
    Shape out_shape = d.batched ? Shape{d.batch, d_out, d.length} : Shape{d_out, d.length};
    auto out = zeros(out_shape);
    const double* xd = x->data.data();
    const double* wd = w->data.data();
    double* od = out->data.data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
        const double* xb = xd + b * d.channels * d.length;
        double* ob = od + b * d_out * d.length;
        for (std::int64_t o = 0; o < d_out; ++o) {
            double* orow = ob + o * d.length;
            const double* wrow = wd + o * d.channels;
            for (std::int64_t c = 0; c < d.channels; ++c) {
                const double wv = wrow[c];
                const double* xrow = xb + c * d.length;
                for (std::int64_t t = 0; t < d.length; ++t) orow[t] += wv * xrow[t];
            }
        }
    }
    flop_counter().add(FlopCategory::kLambdaProj, d.batch * d_out * d.channels * d.length);
    if (detail::track_graph({&w, &x})) {
        detail::attach(out, {w, x}, [w, x, d, d_out](Tensor& o) {
            if (w->requires_grad) {
                std::vector<double> g(w->data.size(), 0.0);
                for (std::int64_t b = 0; b < d.batch; ++b) {
                    for (std::int64_t oc = 0; oc < d_out; ++oc) {
                        const double* grow = o.grad.data() + (b * d_out + oc) * d.length;
                        for (std::int64_t c = 0; c < d.channels; ++c) {
                            const double* xrow =
                                x->data.data() + (b * d.channels + c) * d.length;
                            double acc = 0.0;
                            for (std::int64_t t = 0; t < d.length; ++t) acc += grow[t] * xrow[t];
                            g[static_cast<std::size_t>(oc * d.channels + c)] += acc;
                        }
                    }
                }
                w->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (x->requires_grad) {
                std::vector<double> g(x->data.size(), 0.0);
                for (std::int64_t b = 0; b < d.batch; ++b) {
                    for (std::int64_t oc = 0; oc < d_out; ++oc) {
                        const double* grow = o.grad.data() + (b * d_out + oc) * d.length;
                        const double* wrow = w->data.data() + oc * d.channels;
                        for (std::int64_t c = 0; c < d.channels; ++c) {
                            double* xrow = g.data() + (b * d.channels + c) * d.length;
                            const double wv = wrow[c];
                            for (std::int64_t t = 0; t < d.length; ++t) {
                                xrow[t] += wv * grow[t];
                            }
                        }
                    }
                }
                x->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// Content lambda over channel-major inputs: given sigma(K) [.. d_k x L] and
// V [.. d_v x L], produce [.. d_k x d_v] with lambda[k, v] = sum_t sK[k,t] V[v,t].
inline TensorPtr content_lambda_ctx(const TensorPtr& sig_keys, const TensorPtr& values) {
    const auto dk = detail::dims3(sig_keys, "content_lambda_ctx");
    const auto dv = detail::dims3(values, "content_lambda_ctx");
    if (dk.batch != dv.batch || dk.length != dv.length || dk.batched != dv.batched) {
        throw DimensionError("content_lambda_ctx: keys " + shape_str(sig_keys->shape) +
                             " and values " + shape_str(values->shape) + " disagree");
    }
    const std::int64_t d_k = dk.channels, d_v = dv.channels, length = dk.length;
    Shape out_shape = dk.batched ? Shape{dk.batch, d_k, d_v} : Shape{d_k, d_v};
    auto out = zeros(out_shape);
    for (std::int64_t b = 0; b < dk.batch; ++b) {
        const double* kb = sig_keys->data.data() + b * d_k * length;
        const double* vb = values->data.data() + b * d_v * length;
        double* ob = out->data.data() + b * d_k * d_v;
        for (std::int64_t k = 0; k < d_k; ++k) {
            const double* krow = kb + k * length;
            for (std::int64_t v = 0; v < d_v; ++v) {
                const double* vrow = vb + v * length;
                double acc = 0.0;
                for (std::int64_t t = 0; t < length; ++t) acc += krow[t] * vrow[t];
                ob[k * d_v + v] = acc;
            }
        }
    }
    flop_counter().add(FlopCategory::kLambdaContent, dk.batch * d_k * d_v * length);
    if (detail::track_graph({&sig_keys, &values})) {
        detail::attach(out, {sig_keys, values},
                       [sig_keys, values, d_k, d_v, length, nb = dk.batch](Tensor& o) {
            if (sig_keys->requires_grad) {
                std::vector<double> g(sig_keys->data.size(), 0.0);
                for (std::int64_t b = 0; b < nb; ++b) {
                    const double* gb = o.grad.data() + b * d_k * d_v;
                    const double* vb = values->data.data() + b * d_v * length;
                    for (std::int64_t k = 0; k < d_k; ++k) {
                        double* krow = g.data() + (b * d_k + k) * length;
                        for (std::int64_t v = 0; v < d_v; ++v) {
                            const double gv = gb[k * d_v + v];
                            const double* vrow = vb + v * length;
                            for (std::int64_t t = 0; t < length; ++t) krow[t] += gv * vrow[t];
                        }
                    }
                }
                sig_keys->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (values->requires_grad) {
                std::vector<double> g(values->data.size(), 0.0);
                for (std::int64_t b = 0; b < nb; ++b) {
                    const double* gb = o.grad.data() + b * d_k * d_v;
                    const double* kb = sig_keys->data.data() + b * d_k * length;
                    for (std::int64_t v = 0; v < d_v; ++v) {
                        double* vrow = g.data() + (b * d_v + v) * length;
                        for (std::int64_t k = 0; k < d_k; ++k) {
                            const double gv = gb[k * d_v + v];
                            const double* krow = kb + k * length;
                            for (std::int64_t t = 0; t < length; ++t) vrow[t] += gv * krow[t];
                        }
                    }
                }
                values->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// Local position lambdas as a convolution of V with the relative-offset
// embedding rel [r x d_k], zero-padded at the sequence edges:
//   lambda_p[t, k, v] = sum_j rel[j, k] * V[v, t + j - (r-1)/2].
// Output is [.. L x d_k x d_v]. Cost is linear in L; padded positions are
// materialized so the executed multiply count is exactly B*L*r*d_k*d_v.
inline TensorPtr pos_lambda_local(const TensorPtr& rel, const TensorPtr& values) {
    if (rel->rank() != 2) {
        throw DimensionError("pos_lambda_local: embedding must be [r x d_k], got " +
                             shape_str(rel->shape));
    }
    const std::int64_t r = rel->shape[0], d_k = rel->shape[1];
    if (r % 2 == 0) {
        throw ConfigError("pos_lambda_local: scope r must be odd, got " + std::to_string(r));
    }
    const auto dv = detail::dims3(values, "pos_lambda_local");
    const std::int64_t d_v = dv.channels, length = dv.length;
    const std::int64_t half = (r - 1) / 2;
    const std::int64_t l_pad = length + r - 1;
    Shape out_shape = dv.batched ? Shape{dv.batch, length, d_k, d_v} : Shape{length, d_k, d_v};
    auto out = zeros(out_shape);
    std::vector<double> padded(static_cast<std::size_t>(d_v * l_pad));
    for (std::int64_t b = 0; b < dv.batch; ++b) {
        std::fill(padded.begin(), padded.end(), 0.0);
        for (std::int64_t v = 0; v < d_v; ++v) {
            std::memcpy(padded.data() + v * l_pad + half,
                        values->data.data() + (b * d_v + v) * length,
                        static_cast<std::size_t>(length) * sizeof(double));
        }
        double* ob = out->data.data() + b * length * d_k * d_v;
        for (std::int64_t t = 0; t < length; ++t) {
            for (std::int64_t k = 0; k < d_k; ++k) {
                double* orow = ob + (t * d_k + k) * d_v;
                for (std::int64_t v = 0; v < d_v; ++v) {
                    const double* prow = padded.data() + v * l_pad + t;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < r; ++j) {
                        acc += rel->data[static_cast<std::size_t>(j * d_k + k)] * prow[j];
                    }
                    orow[v] = acc;
                }
            }
        }
    }
    flop_counter().add(FlopCategory::kLambdaPos, dv.batch * length * r * d_k * d_v);
    if (detail::track_graph({&rel, &values})) {
        detail::attach(out, {rel, values},
                       [rel, values, r, d_k, d_v, length, half, l_pad, nb = dv.batch](Tensor& o) {
            std::vector<double> padded(static_cast<std::size_t>(d_v * l_pad));
            std::vector<double> drel;
            std::vector<double> dval;
            if (rel->requires_grad) drel.assign(rel->data.size(), 0.0);
            if (values->requires_grad) dval.assign(values->data.size(), 0.0);
            std::vector<double> dpad(static_cast<std::size_t>(d_v * l_pad));
            for (std::int64_t b = 0; b < nb; ++b) {
                if (rel->requires_grad) {
                    std::fill(padded.begin(), padded.end(), 0.0);
                    for (std::int64_t v = 0; v < d_v; ++v) {
                        std::memcpy(padded.data() + v * l_pad + half,
                                    values->data.data() + (b * d_v + v) * length,
                                    static_cast<std::size_t>(length) * sizeof(double));
                    }
                }
                if (values->requires_grad) std::fill(dpad.begin(), dpad.end(), 0.0);
                const double* gb = o.grad.data() + b * length * d_k * d_v;
                for (std::int64_t t = 0; t < length; ++t) {
                    for (std::int64_t k = 0; k < d_k; ++k) {
                        const double* grow = gb + (t * d_k + k) * d_v;
                        for (std::int64_t v = 0; v < d_v; ++v) {
                            const double gv = grow[v];
                            if (gv == 0.0) continue;
                            if (rel->requires_grad) {
                                const double* prow = padded.data() + v * l_pad + t;
                                for (std::int64_t j = 0; j < r; ++j) {
                                    drel[static_cast<std::size_t>(j * d_k + k)] += gv * prow[j];
                                }
                            }
                            if (values->requires_grad) {
                                double* prow = dpad.data() + v * l_pad + t;
                                for (std::int64_t j = 0; j < r; ++j) {
                                    prow[j] += gv * rel->data[static_cast<std::size_t>(j * d_k + k)];
                                }
                            }
                        }
                    }
                }
                if (values->requires_grad) {
                    for (std::int64_t v = 0; v < d_v; ++v) {
                        const double* src = dpad.data() + v * l_pad + half;
                        double* dst = dval.data() + (b * d_v + v) * length;
                        for (std::int64_t t = 0; t < length; ++t) dst[t] += src[t];
                    }
                }
            }
            if (rel->requires_grad) {
                rel->accumulate_grad(drel.data(), static_cast<std::int64_t>(drel.size()));
            }
            if (values->requires_grad) {
                values->accumulate_grad(dval.data(), static_cast<std::int64_t>(dval.size()));
            }
        });
    }
    return out;
}

// Global position lambdas from a per-position embedding table E [n x n x d_k]:
//   lambda_p[t, k, v] = sum_m E[t, m, k] * V[v, m].
// Output is [.. n x d_k x d_v]; quadratic in n.
inline TensorPtr pos_lambda_global(const TensorPtr& table, const TensorPtr& values) {
    if (table->rank() != 3 || table->shape[0] != table->shape[1]) {
        throw DimensionError("pos_lambda_global: embedding must be [n x n x d_k], got " +
                             shape_str(table->shape));
    }
    const std::int64_t n = table->shape[0], d_k = table->shape[2];
    const auto dv = detail::dims3(values, "pos_lambda_global");
    if (dv.length != n) {
        throw DimensionError("pos_lambda_global: embedding is for n=" + std::to_string(n) +
                             ", values have length " + std::to_string(dv.length));
    }
    const std::int64_t d_v = dv.channels;
    Shape out_shape = dv.batched ? Shape{dv.batch, n, d_k, d_v} : Shape{n, d_k, d_v};
    auto out = zeros(out_shape);
    for (std::int64_t b = 0; b < dv.batch; ++b) {
        const double* vb = values->data.data() + b * d_v * n;
        double* ob = out->data.data() + b * n * d_k * d_v;
        for (std::int64_t t = 0; t < n; ++t) {
            for (std::int64_t m = 0; m < n; ++m) {
                const double* erow = table->data.data() + (t * n + m) * d_k;
                for (std::int64_t k = 0; k < d_k; ++k) {
                    const double ev = erow[k];
                    double* orow = ob + (t * d_k + k) * d_v;
                    for (std::int64_t v = 0; v < d_v; ++v) {
                        orow[v] += ev * vb[v * n + m];
                    }
                }
            }
        }
    }
    flop_counter().add(FlopCategory::kLambdaPos, dv.batch * n * n * d_k * d_v);
    if (detail::track_graph({&table, &values})) {
        detail::attach(out, {table, values},
                       [table, values, n, d_k, d_v, nb = dv.batch](Tensor& o) {
            if (table->requires_grad) {
                std::vector<double> g(table->data.size(), 0.0);
                for (std::int64_t b = 0; b < nb; ++b) {
                    const double* gb = o.grad.data() + b * n * d_k * d_v;
                    const double* vb = values->data.data() + b * d_v * n;
                    for (std::int64_t t = 0; t < n; ++t) {
                        for (std::int64_t m = 0; m < n; ++m) {
                            double* erow = g.data() + (t * n + m) * d_k;
                            for (std::int64_t k = 0; k < d_k; ++k) {
                                const double* grow = gb + (t * d_k + k) * d_v;
                                double acc = 0.0;
                                for (std::int64_t v = 0; v < d_v; ++v) {
                                    acc += grow[v] * vb[v * n + m];
                                }
                                erow[k] += acc;
                            }
                        }
                    }
                }
                table->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (values->requires_grad) {
                std::vector<double> g(values->data.size(), 0.0);
                for (std::int64_t b = 0; b < nb; ++b) {
                    const double* gb = o.grad.data() + b * n * d_k * d_v;
                    double* vg = g.data() + b * d_v * n;
                    for (std::int64_t t = 0; t < n; ++t) {
                        for (std::int64_t m = 0; m < n; ++m) {
                            const double* erow = table->data.data() + (t * n + m) * d_k;
                            for (std::int64_t k = 0; k < d_k; ++k) {
                                const double ev = erow[k];
                                const double* grow = gb + (t * d_k + k) * d_v;
                                for (std::int64_t v = 0; v < d_v; ++v) {
                                    vg[v * n + m] += ev * grow[v];
                                }
                            }
                        }
                    }
                }
                values->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// Apply the lambdas to the multi-query projections:
//   y[j*d_v + v, t] = sum_k (lambda_c[k, v] + lambda_p[t, k, v]) * q[j*d_k + k, t]
// lambda_p may be null (content-only). q is [.. heads*d_k x L]; output is
// [.. heads*d_v x L].
inline TensorPtr lambda_apply(const TensorPtr& lambda_c, const TensorPtr& lambda_p,
                              const TensorPtr& queries, std::int64_t heads) {
    const auto dq = detail::dims3(queries, "lambda_apply");
    if (dq.channels % heads != 0) {
        throw DimensionError("lambda_apply: query channels " + std::to_string(dq.channels) +
                             " not divisible by heads " + std::to_string(heads));
    }
    const std::int64_t d_k = dq.channels / heads;
    const std::int64_t length = dq.length;
    const bool c_batched = lambda_c->rank() == 3;
    if ((c_batched ? lambda_c->shape[1] : lambda_c->shape[0]) != d_k) {
        throw DimensionError("lambda_apply: content lambda " + shape_str(lambda_c->shape) +
                             " does not match d_k " + std::to_string(d_k));
    }
    const std::int64_t d_v = c_batched ? lambda_c->shape[2] : lambda_c->shape[1];
    if (lambda_p) {
        const std::int64_t p_rank = lambda_p->rank();
        const Shape want_b = {dq.batch, length, d_k, d_v};
        const Shape want_u = {length, d_k, d_v};
        if (!((p_rank == 4 && lambda_p->shape == want_b) ||
              (p_rank == 3 && !dq.batched && lambda_p->shape == want_u))) {
            throw DimensionError("lambda_apply: position lambda " + shape_str(lambda_p->shape) +
                                 " does not match [L x d_k x d_v]");
        }
    }

    Shape out_shape = dq.batched ? Shape{dq.batch, heads * d_v, length} : Shape{heads * d_v, length};
    auto out = zeros(out_shape);
    std::vector<double> lam(static_cast<std::size_t>(d_k * d_v));
    for (std::int64_t b = 0; b < dq.batch; ++b) {
        const double* cb = lambda_c->data.data() + b * d_k * d_v;
        const double* pb = lambda_p ? lambda_p->data.data() + b * length * d_k * d_v : nullptr;
        const double* qb = queries->data.data() + b * heads * d_k * length;
        double* ob = out->data.data() + b * heads * d_v * length;
        for (std::int64_t t = 0; t < length; ++t) {
            // lambda_n = lambda_c + lambda_p[t]
            if (pb) {
                const double* prow = pb + t * d_k * d_v;
                for (std::int64_t i = 0; i < d_k * d_v; ++i) lam[static_cast<std::size_t>(i)] = cb[i] + prow[i];
            } else {
                for (std::int64_t i = 0; i < d_k * d_v; ++i) lam[static_cast<std::size_t>(i)] = cb[i];
            }
            for (std::int64_t j = 0; j < heads; ++j) {
                for (std::int64_t v = 0; v < d_v; ++v) {
                    double acc = 0.0;
                    for (std::int64_t k = 0; k < d_k; ++k) {
                        acc += lam[static_cast<std::size_t>(k * d_v + v)] *
                               qb[(j * d_k + k) * length + t];
                    }
                    ob[(j * d_v + v) * length + t] = acc;
                }
            }
        }
    }
    flop_counter().add(FlopCategory::kLambdaApply, dq.batch * length * heads * d_k * d_v);
    if (detail::track_graph({&lambda_c, &lambda_p, &queries})) {
        std::vector<TensorPtr> parents = {lambda_c, queries};
        if (lambda_p) parents.push_back(lambda_p);
        detail::attach(out, parents,
                       [lambda_c, lambda_p, queries, heads, d_k, d_v, length,
                        nb = dq.batch](Tensor& o) {
            std::vector<double> dc;
            std::vector<double> dp;
            std::vector<double> dq_;
            if (lambda_c->requires_grad) dc.assign(lambda_c->data.size(), 0.0);
            if (lambda_p && lambda_p->requires_grad) dp.assign(lambda_p->data.size(), 0.0);
            if (queries->requires_grad) dq_.assign(queries->data.size(), 0.0);
            std::vector<double> lam(static_cast<std::size_t>(d_k * d_v));
            for (std::int64_t b = 0; b < nb; ++b) {
                const double* cb = lambda_c->data.data() + b * d_k * d_v;
                const double* pb =
                    lambda_p ? lambda_p->data.data() + b * length * d_k * d_v : nullptr;
                const double* qb = queries->data.data() + b * heads * d_k * length;
                const double* gb = o.grad.data() + b * heads * d_v * length;
                for (std::int64_t t = 0; t < length; ++t) {
                    if (pb) {
                        const double* prow = pb + t * d_k * d_v;
                        for (std::int64_t i = 0; i < d_k * d_v; ++i) {
                            lam[static_cast<std::size_t>(i)] = cb[i] + prow[i];
                        }
                    } else {
                        for (std::int64_t i = 0; i < d_k * d_v; ++i) {
                            lam[static_cast<std::size_t>(i)] = cb[i];
                        }
                    }
                    for (std::int64_t j = 0; j < heads; ++j) {
                        for (std::int64_t v = 0; v < d_v; ++v) {
                            const double gv = gb[(j * d_v + v) * length + t];
                            if (gv == 0.0) continue;
                            for (std::int64_t k = 0; k < d_k; ++k) {
                                const double qv = qb[(j * d_k + k) * length + t];
                                const std::int64_t lam_idx = k * d_v + v;
                                if (!dc.empty()) {
                                    dc[static_cast<std::size_t>(b * d_k * d_v + lam_idx)] += gv * qv;
                                }
                                if (!dp.empty()) {
                                    dp[static_cast<std::size_t>(
                                        (b * length + t) * d_k * d_v + lam_idx)] += gv * qv;
                                }
                                if (!dq_.empty()) {
                                    dq_[static_cast<std::size_t>(
                                        (b * heads * d_k + j * d_k + k) * length + t)] +=
                                        gv * lam[static_cast<std::size_t>(lam_idx)];
                                }
                            }
                        }
                    }
                }
            }
            if (!dc.empty()) {
                lambda_c->accumulate_grad(dc.data(), static_cast<std::int64_t>(dc.size()));
            }
            if (!dp.empty()) {
                lambda_p->accumulate_grad(dp.data(), static_cast<std::int64_t>(dp.size()));
            }
            if (!dq_.empty()) {
                queries->accumulate_grad(dq_.data(), static_cast<std::int64_t>(dq_.size()));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer forward

namespace detail {

inline TensorPtr lambda_layer_forward(const TensorPtr& x, LambdaParams& params,
                                      const LambdaConfig& config, Mode mode) {
    const auto d = dims3(x, "lambda_forward");
    if (d.channels != config.d_in) {
        throw DimensionError("lambda_forward: input has " + std::to_string(d.channels) +
                             " channels, layer expects " + std::to_string(config.d_in));
    }
    if (d.length < 1) {
        throw ContractError("lambda_forward: empty sequence");
    }
    auto queries = project(params.w_q, x);
    auto keys = project(params.w_k, x);
    auto values = project(params.w_v, x);
    if (config.normalize_qv) {
        queries = batchnorm(queries, params.q_norm.gamma, params.q_norm.beta,
                            params.q_norm.state, mode);
        values = batchnorm(values, params.v_norm.gamma, params.v_norm.beta,
                           params.v_norm.state, mode);
    }
    // softmax over the context positions, independently per key dimension
    auto sig_keys = softmax(keys, keys->rank() - 1);
    auto lam_c = content_lambda_ctx(sig_keys, values);
    TensorPtr lam_p;
    if (config.context == LambdaContext::kLocal) {
        lam_p = pos_lambda_local(params.embedding, values);
    } else {
        lam_p = pos_lambda_global(params.embedding, values);
    }
    return lambda_apply(lam_c, lam_p, queries, config.heads);
}

}  // namespace detail

// Global-context lambda layer: [d_in x n] -> [d_out x n] (or batched).
inline TensorPtr lambda_forward(const TensorPtr& x, LambdaParams& params,
                                const LambdaConfig& config, Mode mode = Mode::kEval) {
    if (config.context != LambdaContext::kGlobal) {
        throw ConfigError("lambda_forward: config.context must be global");
    }
    return detail::lambda_layer_forward(x, params, config, mode);
}

// Local-context lambda convolution: same contract, linear-time position term.
inline TensorPtr lambda_conv_forward(const TensorPtr& x, LambdaParams& params,
                                     const LambdaConfig& config, Mode mode = Mode::kEval) {
    if (config.context != LambdaContext::kLocal) {
        throw ConfigError("lambda_conv_forward: config.context must be local");
    }
    return detail::lambda_layer_forward(x, params, config, mode);
}

// Materialize the absolute per-position table E [n x n x d_k] equivalent to a
// relative-offset table rel [r x d_k]: E[t, m, k] = rel[m - t + (r-1)/2, k]
// when |m - t| <= (r-1)/2 and 0 otherwise. When r >= 2n-1 the local and
// global layers coincide.
inline TensorPtr materialize_global_embedding(const TensorPtr& rel, std::int64_t n) {
    if (rel->rank() != 2) {
        throw DimensionError("materialize_global_embedding: expected [r x d_k]");
    }
    const std::int64_t r = rel->shape[0], d_k = rel->shape[1];
    const std::int64_t half = (r - 1) / 2;
    auto table = zeros({n, n, d_k});
    for (std::int64_t t = 0; t < n; ++t) {
        for (std::int64_t m = 0; m < n; ++m) {
            const std::int64_t j = m - t + half;
            if (j < 0 || j >= r) continue;
            for (std::int64_t k = 0; k < d_k; ++k) {
                table->data[static_cast<std::size_t>((t * n + m) * d_k + k)] =
                    rel->data[static_cast<std::size_t>(j * d_k + k)];
            }
        }
    }
    return table;
}

}  // namespace lambdakws
