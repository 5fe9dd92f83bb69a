// Reference multi-head scaled dot-product attention. Used as the comparison
// baseline for the lambda layer and as the quadratic-complexity counterpart
// in the scaling benchmark; never part of the trained model.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/rng.hpp"
#include "lambdakws/tensor.hpp"

namespace lambdakws {

struct AttentionConfig {
    std::int64_t n = 0;    // sequence length
    std::int64_t d = 0;    // model dimension
    std::int64_t heads = 1;
    std::int64_t d_k = 0;  // query/key dimension
    std::int64_t d_v = 0;  // value dimension

    void validate() const {
        if (n <= 0 || d <= 0 || heads <= 0 || d_v <= 0) {
            throw ConfigError("attention: extents must be positive");
        }
        if (d_k <= 0) {
            throw ConfigError("attention: d_k must be positive, got " + std::to_string(d_k));
        }
        if (heads * d_v != d) {
            throw ConfigError("attention: heads*d_v (" + std::to_string(heads * d_v) +
                              ") must equal d (" + std::to_string(d) + ")");
        }
    }
};

struct AttentionHeadParams {
    TensorPtr w_q;  // [d x d_k]
    TensorPtr w_k;  // [d x d_k]
    TensorPtr w_v;  // [d x d_v]
};

struct AttentionParams {
    std::vector<AttentionHeadParams> heads;
    TensorPtr w_a;  // [heads*d_v x d]
};

inline AttentionParams make_attention_params(const AttentionConfig& config, Rng& rng) {
    config.validate();
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d));
    AttentionParams p;
    p.heads.reserve(static_cast<std::size_t>(config.heads));
    for (std::int64_t h = 0; h < config.heads; ++h) {
        AttentionHeadParams head;
        head.w_q = uniform({config.d, config.d_k}, rng, -bound, bound, true);
        head.w_k = uniform({config.d, config.d_k}, rng, -bound, bound, true);
        head.w_v = uniform({config.d, config.d_v}, rng, -bound, bound, true);
        p.heads.push_back(std::move(head));
    }
    const double a_bound = 1.0 / std::sqrt(static_cast<double>(config.heads * config.d_v));
    p.w_a = uniform({config.heads * config.d_v, config.d}, rng, -a_bound, a_bound, true);
    return p;
}

// Attention map sigma(Q K^T / sqrt(d_k)); rows sum to one (softmax over the
// key axis).
inline TensorPtr attention_map(const TensorPtr& x, const AttentionHeadParams& head) {
    const std::int64_t d_k = head.w_q->shape[1];
    if (d_k == 0) throw ConfigError("attention: d_k must be positive");
    auto q = matmul(x, head.w_q);
    auto k = matmul(x, head.w_k);
    auto logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
    return softmax(logits, 1);
}

// Single-head scaled dot-product attention per Eq. 1: x [n x d] -> [n x d_v].
inline TensorPtr attend(const TensorPtr& x, const AttentionHeadParams& head) {
    if (x->rank() != 2) {
        throw DimensionError("attend: input must be [n x d], got " + shape_str(x->shape));
    }
    if (x->shape[1] != head.w_q->shape[0]) {
        throw DimensionError("attend: input dim " + std::to_string(x->shape[1]) +
                             " does not match projection dim " +
                             std::to_string(head.w_q->shape[0]));
    }
    auto weights = attention_map(x, head);
    auto v = matmul(x, head.w_v);
    return matmul(weights, v);
}

// Multi-head attention per Eq. 2: concatenated head outputs projected by W_A.
inline TensorPtr multi_head_attend(const TensorPtr& x, const AttentionParams& params) {
    if (params.heads.empty()) throw ConfigError("attention: no heads");
    const std::int64_t d = x->shape[1];
    const std::int64_t d_v = params.heads[0].w_v->shape[1];
    const auto h = static_cast<std::int64_t>(params.heads.size());
    if (h * d_v != d) {
        throw ConfigError("attention: heads*d_v (" + std::to_string(h * d_v) +
                          ") must equal d (" + std::to_string(d) + ")");
    }
    if (params.w_a->shape != Shape{h * d_v, d}) {
        throw DimensionError("attention: W_A must be [" + std::to_string(h * d_v) + " x " +
                             std::to_string(d) + "], got " + shape_str(params.w_a->shape));
    }
    std::vector<TensorPtr> outputs;
    outputs.reserve(params.heads.size());
    for (const auto& head : params.heads) {
        outputs.push_back(attend(x, head));
    }
    return matmul(concat2d(outputs, 1), params.w_a);
}

}  // namespace lambdakws
