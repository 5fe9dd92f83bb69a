// Checkpoint container: model spec, named parameter tensors, batch-norm
// running statistics and training metadata (epoch, seed, optimizer momentum
// buffers) in one little-endian binary file.
//
// The byte layout is documented in docs/checkpoint_format.md and is stable:
// saving a freshly loaded checkpoint reproduces the file byte for byte.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/model.hpp"

namespace lambdakws {

struct CheckpointMeta {
    std::int64_t epoch = 0;
    std::uint64_t seed = 0;
    // Optimizer momentum buffers keyed by parameter name; may be empty.
    std::map<std::string, std::vector<double>> momentum;
};

struct Checkpoint {
    ModelParams params;
    CheckpointMeta meta;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'L', 'K', 'W', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
inline T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        T out;
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
    return v;
}

struct Writer {
    std::ofstream out;

    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    }
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        v = to_little(v);
        out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void put_f64(double v) {
        static_assert(sizeof(double) == 8);
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put<std::uint64_t>(bits);
    }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void put_f64_array(const std::vector<double>& v) {
        for (const double d : v) put_f64(d);
    }
};

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("checkpoint: cannot open " + p);
    }
    template <typename T>
    T get() {
        T v;
        in.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in) throw DecodeError("checkpoint: truncated file " + path);
        return to_little(v);
    }
    double get_f64() {
        const std::uint64_t bits = get<std::uint64_t>();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        std::string s(n, '\0');
        in.read(s.data(), n);
        if (!in) throw DecodeError("checkpoint: truncated file " + path);
        return s;
    }
    std::vector<double> get_f64_array(std::uint64_t n) {
        std::vector<double> v(n);
        for (auto& d : v) d = get_f64();
        return v;
    }
};

inline void write_spec(Writer& w, const ModelSpec& spec) {
    w.put<std::int64_t>(spec.width_multiplier);
    w.put<std::int64_t>(spec.num_classes);
    w.put<std::int64_t>(spec.input_channels);
    w.put<std::int64_t>(spec.base_stem_channels);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.base_stage_channels.size()));
    for (const auto c : spec.base_stage_channels) w.put<std::int64_t>(c);
    w.put<std::int64_t>(spec.blocks_per_stage);
    w.put<std::int64_t>(spec.kernel);
    w.put<std::int64_t>(spec.lambda_heads);
    w.put<std::int64_t>(spec.lambda_d_k);
    w.put<std::int64_t>(spec.lambda_r);
    w.put<std::uint8_t>(spec.lambda_normalize_qv ? 1 : 0);
}

inline ModelSpec read_spec(Reader& r) {
    ModelSpec spec;
    spec.width_multiplier = r.get<std::int64_t>();
    spec.num_classes = r.get<std::int64_t>();
    spec.input_channels = r.get<std::int64_t>();
    spec.base_stem_channels = r.get<std::int64_t>();
    const auto n_stages = r.get<std::uint32_t>();
    spec.base_stage_channels.resize(n_stages);
    for (auto& c : spec.base_stage_channels) c = r.get<std::int64_t>();
    spec.blocks_per_stage = r.get<std::int64_t>();
    spec.kernel = r.get<std::int64_t>();
    spec.lambda_heads = r.get<std::int64_t>();
    spec.lambda_d_k = r.get<std::int64_t>();
    spec.lambda_r = r.get<std::int64_t>();
    spec.lambda_normalize_qv = r.get<std::uint8_t>() != 0;
    return spec;
}

}  // namespace detail

inline void save_checkpoint(Checkpoint& ckpt, const std::string& path) {
    detail::Writer w(path);
    w.out.write(detail::kCheckpointMagic, 8);
    w.put<std::uint32_t>(detail::kCheckpointVersion);
    detail::write_spec(w, ckpt.params.spec);

    std::uint32_t param_count = 0;
    ckpt.params.visit_params([&](const std::string&, TensorPtr&) { ++param_count; });
    w.put<std::uint32_t>(param_count);
    ckpt.params.visit_params([&](const std::string& name, TensorPtr& t) {
        w.put_string(name);
        w.put<std::uint8_t>(0);  // dtype 0 = f64
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t->rank()));
        for (const auto e : t->shape) w.put<std::uint64_t>(static_cast<std::uint64_t>(e));
        w.put_f64_array(t->data);
    });

    std::uint32_t state_count = 0;
    ckpt.params.visit_states([&](const std::string&, BatchNormState&) { ++state_count; });
    w.put<std::uint32_t>(state_count);
    ckpt.params.visit_states([&](const std::string& name, BatchNormState& s) {
        w.put_string(name);
        w.put<std::uint8_t>(s.initialized ? 1 : 0);
        w.put<std::uint64_t>(s.running_mean.size());
        w.put_f64_array(s.running_mean);
        w.put_f64_array(s.running_var);
    });

    w.put<std::int64_t>(ckpt.meta.epoch);
    w.put<std::uint64_t>(ckpt.meta.seed);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.meta.momentum.size()));
    for (const auto& [name, buf] : ckpt.meta.momentum) {
        w.put_string(name);
        w.put<std::uint64_t>(buf.size());
        w.put_f64_array(buf);
    }
    w.out.flush();
    if (!w.out) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    detail::Reader r(path);
    char magic[8];
    r.in.read(magic, 8);
    if (!r.in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
        throw DecodeError("checkpoint: bad magic in " + path);
    }
    const auto version = r.get<std::uint32_t>();
    if (version != detail::kCheckpointVersion) {
        throw DecodeError("checkpoint: format version " + std::to_string(version) +
                          " unsupported (expected " +
                          std::to_string(detail::kCheckpointVersion) + ")");
    }
    const ModelSpec spec = detail::read_spec(r);

    Checkpoint ckpt;
    // Build the parameter skeleton from the stored spec; the file then fills
    // every tensor exactly once.
    ckpt.params = build(spec, 0);

    std::map<std::string, TensorPtr*> by_name;
    ckpt.params.visit_params(
        [&](const std::string& name, TensorPtr& t) { by_name[name] = &t; });

    const auto param_count = r.get<std::uint32_t>();
    if (param_count != by_name.size()) {
        throw DecodeError("checkpoint: " + std::to_string(param_count) +
                          " parameters in file, spec defines " +
                          std::to_string(by_name.size()));
    }
    std::map<std::string, bool> seen;
    for (std::uint32_t i = 0; i < param_count; ++i) {
        const std::string name = r.get_string();
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw DecodeError("checkpoint: unknown parameter name '" + name + "'");
        }
        if (seen[name]) {
            throw DecodeError("checkpoint: duplicate parameter name '" + name + "'");
        }
        seen[name] = true;
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != 0) throw DecodeError("checkpoint: unsupported dtype for '" + name + "'");
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::int64_t>(r.get<std::uint64_t>());
        TensorPtr& slot = *it->second;
        if (shape != slot->shape) {
            throw DecodeError("checkpoint: parameter '" + name + "' has shape " +
                              shape_str(shape) + ", spec expects " + shape_str(slot->shape));
        }
        auto data = r.get_f64_array(static_cast<std::uint64_t>(numel(shape)));
        slot = tensor(shape, std::move(data), true);
    }

    std::map<std::string, BatchNormState*> states;
    ckpt.params.visit_states(
        [&](const std::string& name, BatchNormState& s) { states[name] = &s; });
    const auto state_count = r.get<std::uint32_t>();
    if (state_count != states.size()) {
        throw DecodeError("checkpoint: batch-norm state table size mismatch");
    }
    for (std::uint32_t i = 0; i < state_count; ++i) {
        const std::string name = r.get_string();
        auto it = states.find(name);
        if (it == states.end()) {
            throw DecodeError("checkpoint: unknown batch-norm state '" + name + "'");
        }
        BatchNormState& s = *it->second;
        s.initialized = r.get<std::uint8_t>() != 0;
        const auto channels = r.get<std::uint64_t>();
        if (channels != s.running_mean.size()) {
            throw DecodeError("checkpoint: batch-norm state '" + name + "' channel mismatch");
        }
        s.running_mean = r.get_f64_array(channels);
        s.running_var = r.get_f64_array(channels);
    }

    ckpt.meta.epoch = r.get<std::int64_t>();
    ckpt.meta.seed = r.get<std::uint64_t>();
    const auto momentum_count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < momentum_count; ++i) {
        const std::string name = r.get_string();
        if (by_name.find(name) == by_name.end()) {
            throw DecodeError("checkpoint: momentum buffer for unknown parameter '" + name + "'");
        }
        const auto n = r.get<std::uint64_t>();
        ckpt.meta.momentum[name] = r.get_f64_array(n);
    }
    return ckpt;
}

// Guard for loading a checkpoint into a run that expects a specific
// architecture (e.g. rejecting a k=1 checkpoint where k=2 was requested).
inline void require_spec_match(const Checkpoint& ckpt, const ModelSpec& expected) {
    const auto& a = ckpt.params.spec;
    const bool same = a.width_multiplier == expected.width_multiplier &&
                      a.num_classes == expected.num_classes &&
                      a.input_channels == expected.input_channels &&
                      a.base_stem_channels == expected.base_stem_channels &&
                      a.base_stage_channels == expected.base_stage_channels &&
                      a.blocks_per_stage == expected.blocks_per_stage &&
                      a.kernel == expected.kernel && a.lambda_heads == expected.lambda_heads &&
                      a.lambda_d_k == expected.lambda_d_k && a.lambda_r == expected.lambda_r &&
                      a.lambda_normalize_qv == expected.lambda_normalize_qv;
    if (!same) {
        throw ConfigError(
            "checkpoint: stored spec (k=" + std::to_string(a.width_multiplier) + ", " +
            std::to_string(a.num_classes) + " classes) does not match requested spec (k=" +
            std::to_string(expected.width_multiplier) + ", " +
            std::to_string(expected.num_classes) + " classes)");
    }
}

}  // namespace lambdakws
