// LambdaResNet construction and cost accounting.
//
// The network is a 1-D residual net over mel channels: a conv stem, four
// stages of two residual lambda blocks (conv -> BN -> ReLU -> lambda -> BN,
// plus shortcut, then ReLU), temporal average pooling and an affine
// classifier. Within a stage the first block widens the channels at stride 1
// (projection shortcut) and the second block halves the time axis at stride 2
// (parameter-free strided-identity shortcut), so the temporal trace for a
// 100-frame input is 100 -> 50 -> 25 -> 13 -> 7.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/lambda.hpp"
#include "lambdakws/rng.hpp"
#include "lambdakws/tensor.hpp"

namespace lambdakws {

struct ModelSpec {
    std::int64_t width_multiplier = 1;  // k
    std::int64_t num_classes = 12;
    std::int64_t input_channels = 40;
    std::int64_t base_stem_channels = 16;
    std::vector<std::int64_t> base_stage_channels = {24, 36, 48, 60};
    std::int64_t blocks_per_stage = 2;
    std::int64_t kernel = 3;
    std::int64_t lambda_heads = 4;
    std::int64_t lambda_d_k = 16;
    std::int64_t lambda_r = 23;
    bool lambda_normalize_qv = true;

    std::int64_t stem_channels() const { return base_stem_channels * width_multiplier; }

    std::vector<std::int64_t> stage_channels() const {
        std::vector<std::int64_t> ch;
        ch.reserve(base_stage_channels.size());
        for (const auto c : base_stage_channels) ch.push_back(c * width_multiplier);
        return ch;
    }

    // stem + (conv + lambda) per block + classifier
    std::int64_t layer_count() const {
        return 1 + static_cast<std::int64_t>(base_stage_channels.size()) * blocks_per_stage * 2 + 1;
    }

    void validate() const {
        if (width_multiplier <= 0 || num_classes <= 0 || input_channels <= 0 ||
            base_stem_channels <= 0 || blocks_per_stage <= 0 || kernel <= 0) {
            throw ConfigError("model spec: extents must be positive");
        }
        if (kernel % 2 == 0) {
            throw ConfigError("model spec: kernel must be odd");
        }
        for (const auto c : stage_channels()) {
            if (c % lambda_heads != 0) {
                throw ConfigError("model spec: stage channels " + std::to_string(c) +
                                  " not divisible by lambda heads " +
                                  std::to_string(lambda_heads));
            }
        }
    }
};

inline ModelSpec lambda_resnet18(std::int64_t num_classes, std::int64_t width_multiplier = 1) {
    ModelSpec spec;
    spec.width_multiplier = width_multiplier;
    spec.num_classes = num_classes;
    return spec;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

// Strided identity: y[.., c, t] = x[.., c, t*stride]; output length matches
// conv1d's ceil(L/stride).
inline TensorPtr subsample_time(const TensorPtr& x, std::int64_t stride) {
    const auto d = dims3(x, "subsample_time");
    const std::int64_t l_out = (d.length + stride - 1) / stride;
    Shape out_shape =
        d.batched ? Shape{d.batch, d.channels, l_out} : Shape{d.channels, l_out};
    auto out = zeros(out_shape);
    for (std::int64_t bc = 0; bc < d.batch * d.channels; ++bc) {
        const double* src = x->data.data() + bc * d.length;
        double* dst = out->data.data() + bc * l_out;
        for (std::int64_t t = 0; t < l_out; ++t) dst[t] = src[t * stride];
    }
    if (track_graph({&x})) {
        attach(out, {x}, [x, d, stride, l_out](Tensor& o) {
            std::vector<double> g(x->data.size(), 0.0);
            for (std::int64_t bc = 0; bc < d.batch * d.channels; ++bc) {
                const double* src = o.grad.data() + bc * l_out;
                double* dst = g.data() + bc * d.length;
                for (std::int64_t t = 0; t < l_out; ++t) dst[t * stride] += src[t];
            }
            x->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

}  // namespace detail

struct ConvBnParams {
    TensorPtr w;  // [C_out x C_in x k]
    BatchNormParams bn;
};

struct BlockParams {
    std::int64_t stride = 1;
    TensorPtr conv_w;
    BatchNormParams bn1;
    LambdaConfig lambda_config;
    LambdaParams lambda;
    BatchNormParams bn2;
    std::optional<ConvBnParams> shortcut;  // projection when channels change
};

struct ModelParams {
    ModelSpec spec;
    ConvBnParams stem;
    std::vector<BlockParams> blocks;  // stage-major order
    TensorPtr fc_w;
    TensorPtr fc_b;

    // Canonical enumeration of trainable tensors; checkpoint and optimizer
    // ordering is defined by this traversal.
    void visit_params(const std::function<void(const std::string&, TensorPtr&)>& fn) {
        fn("stem.conv.w", stem.w);
        fn("stem.bn.gamma", stem.bn.gamma);
        fn("stem.bn.beta", stem.bn.beta);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& blk = blocks[i];
            const std::string prefix = "block" + std::to_string(i) + ".";
            fn(prefix + "conv.w", blk.conv_w);
            fn(prefix + "bn1.gamma", blk.bn1.gamma);
            fn(prefix + "bn1.beta", blk.bn1.beta);
            fn(prefix + "lambda.w_q", blk.lambda.w_q);
            fn(prefix + "lambda.w_k", blk.lambda.w_k);
            fn(prefix + "lambda.w_v", blk.lambda.w_v);
            fn(prefix + "lambda.embedding", blk.lambda.embedding);
            if (blk.lambda_config.normalize_qv) {
                fn(prefix + "lambda.q_norm.gamma", blk.lambda.q_norm.gamma);
                fn(prefix + "lambda.q_norm.beta", blk.lambda.q_norm.beta);
                fn(prefix + "lambda.v_norm.gamma", blk.lambda.v_norm.gamma);
                fn(prefix + "lambda.v_norm.beta", blk.lambda.v_norm.beta);
            }
            fn(prefix + "bn2.gamma", blk.bn2.gamma);
            fn(prefix + "bn2.beta", blk.bn2.beta);
            if (blk.shortcut) {
                fn(prefix + "shortcut.conv.w", blk.shortcut->w);
                fn(prefix + "shortcut.bn.gamma", blk.shortcut->bn.gamma);
                fn(prefix + "shortcut.bn.beta", blk.shortcut->bn.beta);
            }
        }
        fn("classifier.w", fc_w);
        fn("classifier.b", fc_b);
    }

    void visit_states(const std::function<void(const std::string&, BatchNormState&)>& fn) {
        fn("stem.bn", stem.bn.state);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& blk = blocks[i];
            const std::string prefix = "block" + std::to_string(i) + ".";
            fn(prefix + "bn1", blk.bn1.state);
            if (blk.lambda_config.normalize_qv) {
                fn(prefix + "lambda.q_norm", blk.lambda.q_norm.state);
                fn(prefix + "lambda.v_norm", blk.lambda.v_norm.state);
            }
            fn(prefix + "bn2", blk.bn2.state);
            if (blk.shortcut) fn(prefix + "shortcut.bn", blk.shortcut->bn.state);
        }
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        visit_params([&n](const std::string&, TensorPtr& t) { n += t->size(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// build

inline ModelParams build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    auto conv_init = [&rng](std::int64_t c_out, std::int64_t c_in, std::int64_t k) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k));
        return uniform({c_out, c_in, k}, rng, -bound, bound, true);
    };

    ModelParams params;
    params.spec = spec;
    params.stem.w = conv_init(spec.stem_channels(), spec.input_channels, spec.kernel);
    params.stem.bn = BatchNormParams(spec.stem_channels());

    std::int64_t in_ch = spec.stem_channels();
    for (const auto c : spec.stage_channels()) {
        for (std::int64_t b = 0; b < spec.blocks_per_stage; ++b) {
            BlockParams blk;
            // First block of a stage widens the channels at stride 1; the
            // remaining blocks keep the width and halve the time axis.
            blk.stride = b == 0 ? 1 : 2;
            blk.conv_w = conv_init(c, in_ch, spec.kernel);
            blk.bn1 = BatchNormParams(c);
            blk.lambda_config = LambdaConfig{
                .d_in = c,
                .d_out = c,
                .heads = spec.lambda_heads,
                .d_k = spec.lambda_d_k,
                .r = spec.lambda_r,
                .context = LambdaContext::kLocal,
                .normalize_qv = spec.lambda_normalize_qv,
            };
            blk.lambda = make_lambda_params(blk.lambda_config, rng);
            blk.bn2 = BatchNormParams(c);
            if (in_ch != c) {
                ConvBnParams sc;
                sc.w = conv_init(c, in_ch, 1);
                sc.bn = BatchNormParams(c);
                blk.shortcut = std::move(sc);
            }
            params.blocks.push_back(std::move(blk));
            in_ch = c;
        }
    }

    const double fc_bound = 1.0 / std::sqrt(static_cast<double>(in_ch));
    params.fc_w = uniform({spec.num_classes, in_ch}, rng, -fc_bound, fc_bound, true);
    params.fc_b = uniform({spec.num_classes}, rng, -fc_bound, fc_bound, true);
    return params;
}

// ---------------------------------------------------------------------------
// forward

namespace detail {

inline TensorPtr block_forward(BlockParams& blk, const TensorPtr& x, Mode mode) {
    auto h = conv1d(x, blk.conv_w, blk.stride);
    h = batchnorm(h, blk.bn1.gamma, blk.bn1.beta, blk.bn1.state, mode);
    h = relu(h);
    h = lambda_layer_forward(h, blk.lambda, blk.lambda_config, mode);
    h = batchnorm(h, blk.bn2.gamma, blk.bn2.beta, blk.bn2.state, mode);
    TensorPtr shortcut;
    if (blk.shortcut) {
        shortcut = conv1d(x, blk.shortcut->w, blk.stride);
        shortcut = batchnorm(shortcut, blk.shortcut->bn.gamma, blk.shortcut->bn.beta,
                             blk.shortcut->bn.state, mode);
    } else if (blk.stride != 1) {
        shortcut = subsample_time(x, blk.stride);
    } else {
        shortcut = x;
    }
    return relu(add(h, shortcut));
}

}  // namespace detail

// Per-stage temporal lengths for an input of length `length`:
// {input, after stage 1, ..., after last stage}.
inline std::vector<std::int64_t> temporal_trace(const ModelSpec& spec, std::int64_t length) {
    std::vector<std::int64_t> trace{length};
    std::int64_t l = length;
    for (std::size_t s = 0; s < spec.base_stage_channels.size(); ++s) {
        for (std::int64_t b = 0; b < spec.blocks_per_stage; ++b) {
            const std::int64_t stride = b == 0 ? 1 : 2;
            l = (l + stride - 1) / stride;
        }
        trace.push_back(l);
    }
    return trace;
}

// Forward pass to logits. Input is [C x L] (single clip, returns
// [num_classes]) or [B x C x L] (returns [B x num_classes]).
inline TensorPtr forward(ModelParams& params, const TensorPtr& input, Mode mode,
                         std::vector<std::int64_t>* length_trace = nullptr) {
    const bool batched = input->rank() == 3;
    if (input->rank() != 2 && input->rank() != 3) {
        throw DimensionError("forward: expected [" + std::to_string(params.spec.input_channels) +
                             " x L] or batched input, got " + shape_str(input->shape));
    }
    const std::int64_t channels = batched ? input->shape[1] : input->shape[0];
    const std::int64_t length = batched ? input->shape[2] : input->shape[1];
    if (channels != params.spec.input_channels || length < 1) {
        throw DimensionError("forward: expected input [" +
                             std::to_string(params.spec.input_channels) + " x L], got " +
                             shape_str(input->shape));
    }
    if (length_trace) {
        *length_trace = temporal_trace(params.spec, length);
    }

    auto h = conv1d(input, params.stem.w, 1);
    h = batchnorm(h, params.stem.bn.gamma, params.stem.bn.beta, params.stem.bn.state, mode);
    h = relu(h);
    for (auto& blk : params.blocks) {
        h = detail::block_forward(blk, h, mode);
    }
    auto pooled = avgpool_time(h);
    if (pooled->rank() == 1) {
        pooled = reshape(pooled, {1, pooled->shape[0]});
        auto logits = affine(pooled, params.fc_w, params.fc_b);
        return reshape(logits, {params.spec.num_classes});
    }
    return affine(pooled, params.fc_w, params.fc_b);
}

// ---------------------------------------------------------------------------
// cost accounting

// Exact count of trainable scalars.
inline std::int64_t count_params(const ModelSpec& spec) {
    spec.validate();
    const std::int64_t h = spec.lambda_heads, d_k = spec.lambda_d_k, r = spec.lambda_r;
    auto lambda_params = [&](std::int64_t c) {
        const std::int64_t d_v = c / h;
        std::int64_t n = c * h * d_k + c * d_k + c * d_v + r * d_k;
        if (spec.lambda_normalize_qv) n += 2 * h * d_k + 2 * d_v;
        return n;
    };
    std::int64_t total = spec.kernel * spec.input_channels * spec.stem_channels() +
                         2 * spec.stem_channels();
    std::int64_t in_ch = spec.stem_channels();
    for (const auto c : spec.stage_channels()) {
        for (std::int64_t b = 0; b < spec.blocks_per_stage; ++b) {
            total += spec.kernel * in_ch * c;  // block conv
            total += 2 * c;                    // bn1
            total += lambda_params(c);
            total += 2 * c;  // bn2
            if (in_ch != c) {
                total += in_ch * c + 2 * c;  // projection shortcut + bn
            }
            in_ch = c;
        }
    }
    total += spec.num_classes * in_ch + spec.num_classes;  // classifier
    return total;
}

// Multiplies of one forward pass (one per multiply-accumulate). Additions,
// batch norm, ReLU, softmax and pooling are excluded; the counted terms are
// convolutions (including projection shortcuts), lambda projections, lambda
// formation/application and the classifier.
struct FlopBreakdown {
    std::int64_t conv = 0;
    std::int64_t lambda_proj = 0;
    std::int64_t lambda_content = 0;
    std::int64_t lambda_pos = 0;
    std::int64_t lambda_apply = 0;
    std::int64_t classifier = 0;

    std::int64_t total() const {
        return conv + lambda_proj + lambda_content + lambda_pos + lambda_apply + classifier;
    }
};

inline FlopBreakdown count_flops(const ModelSpec& spec, std::int64_t input_length) {
    spec.validate();
    if (input_length < 1) throw ContractError("count_flops: input length must be positive");
    const std::int64_t h = spec.lambda_heads, d_k = spec.lambda_d_k, r = spec.lambda_r;
    FlopBreakdown flops;

    std::int64_t length = input_length;
    flops.conv += spec.kernel * spec.input_channels * spec.stem_channels() * length;

    std::int64_t in_ch = spec.stem_channels();
    for (const auto c : spec.stage_channels()) {
        for (std::int64_t b = 0; b < spec.blocks_per_stage; ++b) {
            const std::int64_t stride = b == 0 ? 1 : 2;
            const std::int64_t l_out = (length + stride - 1) / stride;
            const std::int64_t d_v = c / h;
            flops.conv += spec.kernel * in_ch * c * l_out;
            if (in_ch != c) flops.conv += in_ch * c * l_out;  // projection shortcut
            flops.lambda_proj += c * (h * d_k + d_k + d_v) * l_out;
            flops.lambda_content += d_k * d_v * l_out;
            flops.lambda_pos += l_out * r * d_k * d_v;
            flops.lambda_apply += l_out * h * d_k * d_v;
            in_ch = c;
            length = l_out;
        }
    }
    flops.classifier = spec.num_classes * in_ch;
    return flops;
}

}  // namespace lambdakws
