// Dense tensor engine with reverse-mode automatic differentiation.
//
// Tensors are heap nodes behind shared_ptr. Every operation records its
// parents and a closure that propagates the output gradient to them;
// backward() walks the recorded graph once in reverse topological order.
// Scalars are rank-0 tensors. All arithmetic is IEEE double.
//
// Two thread-local instruments are built in:
//   * an allocation tracker (live/peak bytes of tensor payloads), used by the
//     scaling benchmark, and
//   * a multiply counter with per-category buckets, used for cost accounting.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/log.hpp"
#include "lambdakws/rng.hpp"

namespace lambdakws {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Instrumentation

struct AllocStats {
    std::int64_t live_bytes = 0;
    std::int64_t peak_bytes = 0;
};

inline AllocStats& alloc_stats() {
    thread_local AllocStats stats;
    return stats;
}

inline void track_alloc(std::int64_t delta) {
    auto& s = alloc_stats();
    s.live_bytes += delta;
    if (s.live_bytes > s.peak_bytes) s.peak_bytes = s.live_bytes;
}

// Restart the peak-tracking window at the current live level.
inline void reset_peak_alloc() { alloc_stats().peak_bytes = alloc_stats().live_bytes; }

enum class FlopCategory : int {
    kConv = 0,
    kMatmul,
    kAffine,
    kLambdaProj,
    kLambdaContent,
    kLambdaPos,
    kLambdaApply,
    kOther,
};
inline constexpr int kFlopCategoryCount = 8;

// Counts multiplies actually executed by the forward kernels (one count per
// multiply-accumulate). Disabled by default; enable around a forward pass to
// audit an analytic cost model.
struct FlopCounter {
    bool enabled = false;
    std::array<std::int64_t, kFlopCategoryCount> multiplies{};

    void add(FlopCategory cat, std::int64_t n) {
        if (enabled) multiplies[static_cast<int>(cat)] += n;
    }
    std::int64_t total() const {
        return std::accumulate(multiplies.begin(), multiplies.end(), std::int64_t{0});
    }
    std::int64_t operator[](FlopCategory cat) const {
        return multiplies[static_cast<int>(cat)];
    }
    void reset() { multiplies.fill(0); }
};

inline FlopCounter& flop_counter() {
    thread_local FlopCounter counter;
    return counter;
}

struct FlopScope {
    FlopScope() {
        flop_counter().reset();
        flop_counter().enabled = true;
    }
    ~FlopScope() { flop_counter().enabled = false; }
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;
};

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling graph construction (inference / benchmarking).
struct NoGradGuard {
    NoGradGuard() : saved_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// ---------------------------------------------------------------------------
// Tensor

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily; same size as data when present

    // Graph bookkeeping. parents are the op inputs; backward_fn reads
    // this->grad and accumulates into each parent's grad.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    Tensor(Shape s, std::vector<double> d, bool req)
        : shape(std::move(s)), data(std::move(d)), requires_grad(req) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
            throw DimensionError("tensor: data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        track_alloc(static_cast<std::int64_t>(data.size() * sizeof(double)));
    }

    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    ~Tensor() {
        track_alloc(-static_cast<std::int64_t>((data.size() + grad.size()) * sizeof(double)));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    bool is_scalar() const { return size() == 1; }

    double item() const {
        if (!is_scalar()) {
            throw ContractError("item: tensor " + shape_str(shape) + " is not scalar");
        }
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
            track_alloc(static_cast<std::int64_t>(grad.size() * sizeof(double)));
        }
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    // Gradients accumulate additively across consumers.
    void accumulate_grad(const double* g, std::int64_t n) {
        if (n != size()) {
            throw DimensionError("accumulate_grad: size mismatch");
        }
        ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
    }

    // Reverse-mode sweep from a scalar loss. Each recorded operation is
    // visited exactly once, in reverse topological order. Calling backward a
    // second time on the same root without re-running the forward pass is a
    // state error.
    void backward() {
        if (!is_scalar()) {
            throw ContractError("backward: loss must be scalar, got " + shape_str(shape));
        }
        if (!requires_grad) {
            throw ContractError("backward: loss does not require grad");
        }
        if (backward_done_) {
            throw StateError("backward: already called on this graph root; rerun the forward pass first");
        }
        backward_done_ = true;

        std::vector<Tensor*> order;
        topo_sort(order);
        ensure_grad();
        grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Tensor* node = *it;
            if (node->backward_fn && !node->grad.empty()) {
                node->backward_fn(*node);
            }
        }
    }

private:
    bool backward_done_ = false;

    void topo_sort(std::vector<Tensor*>& order) {
        // Iterative post-order DFS over grad-requiring nodes.
        std::unordered_set<const Tensor*> visited;
        std::vector<std::pair<Tensor*, std::size_t>> stack;
        stack.emplace_back(this, 0);
        visited.insert(this);
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                Tensor* child = node->parents[next_child].get();
                ++next_child;
                if (child->requires_grad && visited.insert(child).second) {
                    stack.emplace_back(child, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Factories

inline TensorPtr tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr scalar(double v) { return tensor({}, {v}); }

inline TensorPtr zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                  requires_grad);
}

inline TensorPtr ones(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 1.0),
                  requires_grad);
}

inline TensorPtr full(Shape shape, double v, bool requires_grad = false) {
    const auto n = numel(shape);
    return tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v),
                  requires_grad);
}

inline TensorPtr randn(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                       bool requires_grad = false) {
    const auto n = numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.normal(mean, stddev);
    return tensor(std::move(shape), std::move(d), requires_grad);
}

inline TensorPtr uniform(Shape shape, Rng& rng, double lo, double hi,
                         bool requires_grad = false) {
    const auto n = numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return tensor(std::move(shape), std::move(d), requires_grad);
}

namespace detail {

inline bool track_graph(std::initializer_list<const TensorPtr*> inputs) {
    if (!grad_mode()) return false;
    for (const TensorPtr* t : inputs) {
        if (*t && (*t)->requires_grad) return true;
    }
    return false;
}

inline void attach(const TensorPtr& out, std::vector<TensorPtr> parents,
                   std::function<void(Tensor&)> fn) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("add: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + b->data[i];
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a, &b})) {
        detail::attach(out, {a, b}, [a, b](Tensor& o) {
            if (a->requires_grad) a->accumulate_grad(o.grad.data(), o.size());
            if (b->requires_grad) b->accumulate_grad(o.grad.data(), o.size());
        });
    }
    return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("sub: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] - b->data[i];
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a, &b})) {
        detail::attach(out, {a, b}, [a, b](Tensor& o) {
            if (a->requires_grad) a->accumulate_grad(o.grad.data(), o.size());
            if (b->requires_grad) {
                std::vector<double> g(o.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = -o.grad[i];
                b->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// Hadamard product.
inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * b->data[i];
    flop_counter().add(FlopCategory::kOther, static_cast<std::int64_t>(d.size()));
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a, &b})) {
        detail::attach(out, {a, b}, [a, b](Tensor& o) {
            if (a->requires_grad) {
                std::vector<double> g(o.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * b->data[i];
                a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (b->requires_grad) {
                std::vector<double> g(o.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * a->data[i];
                b->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

inline TensorPtr scale(const TensorPtr& a, double c) {
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * c;
    flop_counter().add(FlopCategory::kOther, static_cast<std::int64_t>(d.size()));
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a, c](Tensor& o) {
            std::vector<double> g(o.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * c;
            a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

inline TensorPtr add_scalar(const TensorPtr& a, double c) {
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + c;
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a](Tensor& o) {
            a->accumulate_grad(o.grad.data(), o.size());
        });
    }
    return out;
}

inline TensorPtr reshape(const TensorPtr& a, Shape new_shape) {
    if (numel(new_shape) != a->size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a->shape) + " as " +
                             shape_str(new_shape));
    }
    auto out = tensor(std::move(new_shape), a->data);
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a](Tensor& o) {
            a->accumulate_grad(o.grad.data(), o.size());
        });
    }
    return out;
}

inline TensorPtr transpose(const TensorPtr& a) {
    if (a->rank() != 2) {
        throw DimensionError("transpose: expected rank-2 tensor, got " + shape_str(a->shape));
    }
    const std::int64_t m = a->shape[0], n = a->shape[1];
    std::vector<double> d(a->data.size());
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            d[static_cast<std::size_t>(j * m + i)] = a->data[static_cast<std::size_t>(i * n + j)];
        }
    }
    auto out = tensor({n, m}, std::move(d));
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a, m, n](Tensor& o) {
            std::vector<double> g(a->data.size());
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    g[static_cast<std::size_t>(i * n + j)] =
                        o.grad[static_cast<std::size_t>(j * m + i)];
                }
            }
            a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

// Concatenate rank-2 tensors along rows (axis 0) or columns (axis 1).
inline TensorPtr concat2d(const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat2d: no inputs");
    if (axis != 0 && axis != 1) throw ContractError("concat2d: axis must be 0 or 1");
    const std::int64_t fixed = parts[0]->shape[axis == 0 ? 1 : 0];
    std::int64_t along = 0;
    for (const auto& p : parts) {
        if (p->rank() != 2) {
            throw DimensionError("concat2d: expected rank-2 tensor, got " + shape_str(p->shape));
        }
        if (p->shape[axis == 0 ? 1 : 0] != fixed) {
            throw DimensionError("concat2d: mismatched shapes " + shape_str(parts[0]->shape) +
                                 " vs " + shape_str(p->shape));
        }
        along += p->shape[axis];
    }
    Shape out_shape = axis == 0 ? Shape{along, fixed} : Shape{fixed, along};
    auto out = zeros(out_shape);
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t rows = p->shape[0], cols = p->shape[1];
        for (std::int64_t i = 0; i < rows; ++i) {
            for (std::int64_t j = 0; j < cols; ++j) {
                const double v = p->data[static_cast<std::size_t>(i * cols + j)];
                if (axis == 0) {
                    out->data[static_cast<std::size_t>((offset + i) * fixed + j)] = v;
                } else {
                    out->data[static_cast<std::size_t>(i * along + (offset + j))] = v;
                }
            }
        }
        offset += p->shape[axis];
    }
    bool track = false;
    for (const auto& p : parts) track = track || (grad_mode() && p->requires_grad);
    if (track && grad_mode()) {
        auto parts_copy = parts;
        detail::attach(out, parts_copy, [parts_copy, axis, along, fixed](Tensor& o) {
            std::int64_t offset = 0;
            for (const auto& p : parts_copy) {
                const std::int64_t rows = p->shape[0], cols = p->shape[1];
                if (p->requires_grad) {
                    std::vector<double> g(p->data.size());
                    for (std::int64_t i = 0; i < rows; ++i) {
                        for (std::int64_t j = 0; j < cols; ++j) {
                            const std::size_t src =
                                axis == 0
                                    ? static_cast<std::size_t>((offset + i) * fixed + j)
                                    : static_cast<std::size_t>(i * along + (offset + j));
                            g[static_cast<std::size_t>(i * cols + j)] = o.grad[src];
                        }
                    }
                    p->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
                }
                offset += p->shape[axis];
            }
        });
    }
    return out;
}

inline TensorPtr sum(const TensorPtr& a) {
    double s = 0.0;
    for (const double v : a->data) s += v;
    auto out = tensor({}, {s});
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a](Tensor& o) {
            std::vector<double> g(a->data.size(), o.grad[0]);
            a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

inline TensorPtr relu(const TensorPtr& a) {
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a](Tensor& o) {
            std::vector<double> g(o.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = a->data[i] > 0.0 ? o.grad[i] : 0.0;
            }
            a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->shape[1] != b->shape[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                             shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], k = a->shape[1], p = b->shape[1];
    auto out = zeros({m, p});
    const double* ad = a->data.data();
    const double* bd = b->data.data();
    double* od = out->data.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = ad[i * k + kk];
            const double* brow = bd + kk * p;
            double* orow = od + i * p;
            for (std::int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
    }
    flop_counter().add(FlopCategory::kMatmul, m * k * p);
    if (detail::track_graph({&a, &b})) {
        detail::attach(out, {a, b}, [a, b, m, k, p](Tensor& o) {
            if (a->requires_grad) {
                // dA = dY . B^T
                std::vector<double> g(a->data.size(), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < p; ++j) {
                        const double gv = o.grad[static_cast<std::size_t>(i * p + j)];
                        const double* brow = b->data.data() + j;
                        double* grow = g.data() + i * k;
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                            grow[kk] += gv * brow[kk * p];
                        }
                    }
                }
                a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (b->requires_grad) {
                // dB = A^T . dY
                std::vector<double> g(b->data.size(), 0.0);
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    for (std::int64_t i = 0; i < m; ++i) {
                        const double av = a->data[static_cast<std::size_t>(i * k + kk)];
                        const double* grow = o.grad.data() + i * p;
                        double* brow = g.data() + kk * p;
                        for (std::int64_t j = 0; j < p; ++j) brow[j] += av * grow[j];
                    }
                }
                b->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax

// Softmax along `axis`, computed with max subtraction. Slices along the axis
// sum to one. Non-finite inputs are rejected.
inline TensorPtr softmax(const TensorPtr& a, std::int64_t axis) {
    if (axis < 0 || axis >= a->rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                             shape_str(a->shape));
    }
    for (const double v : a->data) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    const std::int64_t len = a->shape[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= a->shape[static_cast<std::size_t>(i)];
    for (std::int64_t i = axis + 1; i < a->rank(); ++i) inner *= a->shape[static_cast<std::size_t>(i)];

    std::vector<double> d(a->data.size());
    const double* src = a->data.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            double mx = src[base];
            for (std::int64_t j = 1; j < len; ++j) {
                mx = std::max(mx, src[base + j * inner]);
            }
            double denom = 0.0;
            for (std::int64_t j = 0; j < len; ++j) {
                const double e = std::exp(src[base + j * inner] - mx);
                d[static_cast<std::size_t>(base + j * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (std::int64_t j = 0; j < len; ++j) {
                d[static_cast<std::size_t>(base + j * inner)] *= inv;
            }
        }
    }
    auto out = tensor(a->shape, std::move(d));
    if (detail::track_graph({&a})) {
        detail::attach(out, {a}, [a, outer, inner, len](Tensor& o) {
            // dx = y * (dy - sum(dy * y)) per slice.
            std::vector<double> g(o.grad.size());
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = ou * len * inner + in;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < len; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        dot += o.grad[idx] * o.data[idx];
                    }
                    for (std::int64_t j = 0; j < len; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        g[idx] = o.data[idx] * (o.grad[idx] - dot);
                    }
                }
            }
            a->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv1d

// Cross-correlation over the last axis with "same" zero padding: the output
// length is ceil(L/stride) and the padding is symmetric with the extra zero on
// the right. x is [C_in x L] or [B x C_in x L]; w is [C_out x C_in x k].
// Padded positions are materialized, so the executed multiply count is exactly
// B * C_out * C_in * k * L_out.
inline TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, std::int64_t stride) {
    if (w->rank() != 3) {
        throw DimensionError("conv1d: weight must be [C_out x C_in x k], got " +
                             shape_str(w->shape));
    }
    if (x->rank() != 2 && x->rank() != 3) {
        throw DimensionError("conv1d: input must be [C_in x L] or [B x C_in x L], got " +
                             shape_str(x->shape));
    }
    const bool batched = x->rank() == 3;
    const std::int64_t batch = batched ? x->shape[0] : 1;
    const std::int64_t c_in = batched ? x->shape[1] : x->shape[0];
    const std::int64_t length = batched ? x->shape[2] : x->shape[1];
    const std::int64_t c_out = w->shape[0];
    const std::int64_t kernel = w->shape[2];
    if (w->shape[1] != c_in) {
        throw DimensionError("conv1d: weight expects " + std::to_string(w->shape[1]) +
                             " input channels, input has " + std::to_string(c_in));
    }
    if (kernel % 2 == 0) {
        throw ConfigError("conv1d: kernel length must be odd, got " + std::to_string(kernel));
    }
    if (stride != 1 && stride != 2) {
        throw ConfigError("conv1d: stride must be 1 or 2, got " + std::to_string(stride));
    }

    const std::int64_t l_out = (length + stride - 1) / stride;
    const std::int64_t pad_total = std::max<std::int64_t>(0, (l_out - 1) * stride + kernel - length);
    const std::int64_t pad_left = pad_total / 2;  // extra zero goes to the right
    const std::int64_t l_pad = length + pad_total;

    Shape out_shape = batched ? Shape{batch, c_out, l_out} : Shape{c_out, l_out};
    auto out = zeros(out_shape);

    std::vector<double> padded(static_cast<std::size_t>(c_in * l_pad));
    const double* xd = x->data.data();
    const double* wd = w->data.data();
    double* od = out->data.data();
    for (std::int64_t b = 0; b < batch; ++b) {
        std::fill(padded.begin(), padded.end(), 0.0);
        for (std::int64_t c = 0; c < c_in; ++c) {
            std::memcpy(padded.data() + c * l_pad + pad_left, xd + (b * c_in + c) * length,
                        static_cast<std::size_t>(length) * sizeof(double));
        }
        for (std::int64_t o = 0; o < c_out; ++o) {
            double* orow = od + (b * c_out + o) * l_out;
            for (std::int64_t c = 0; c < c_in; ++c) {
                const double* prow = padded.data() + c * l_pad;
                const double* wrow = wd + (o * c_in + c) * kernel;
                for (std::int64_t j = 0; j < kernel; ++j) {
                    const double wv = wrow[j];
                    const double* pj = prow + j;
                    if (stride == 1) {
                        for (std::int64_t t = 0; t < l_out; ++t) orow[t] += wv * pj[t];
                    } else {
                        for (std::int64_t t = 0; t < l_out; ++t) orow[t] += wv * pj[2 * t];
                    }
                }
            }
        }
    }
    flop_counter().add(FlopCategory::kConv, batch * c_out * c_in * kernel * l_out);

    if (detail::track_graph({&x, &w})) {
        detail::attach(out, {x, w}, [x, w, batch, c_in, length, c_out, kernel, stride, l_out,
                                     pad_left, l_pad](Tensor& o) {
            std::vector<double> padded(static_cast<std::size_t>(c_in * l_pad));
            std::vector<double> dw;
            std::vector<double> dx;
            if (w->requires_grad) dw.assign(w->data.size(), 0.0);
            if (x->requires_grad) dx.assign(x->data.size(), 0.0);
            std::vector<double> dpad(static_cast<std::size_t>(c_in * l_pad));
            for (std::int64_t b = 0; b < batch; ++b) {
                if (w->requires_grad) {
                    std::fill(padded.begin(), padded.end(), 0.0);
                    for (std::int64_t c = 0; c < c_in; ++c) {
                        std::memcpy(padded.data() + c * l_pad + pad_left,
                                    x->data.data() + (b * c_in + c) * length,
                                    static_cast<std::size_t>(length) * sizeof(double));
                    }
                }
                if (x->requires_grad) std::fill(dpad.begin(), dpad.end(), 0.0);
                for (std::int64_t o_ch = 0; o_ch < c_out; ++o_ch) {
                    const double* grow = o.grad.data() + (b * c_out + o_ch) * l_out;
                    for (std::int64_t c = 0; c < c_in; ++c) {
                        for (std::int64_t j = 0; j < kernel; ++j) {
                            const std::int64_t base = c * l_pad + j;
                            if (w->requires_grad) {
                                double acc = 0.0;
                                const double* prow = padded.data() + base;
                                for (std::int64_t t = 0; t < l_out; ++t) {
                                    acc += grow[t] * prow[t * stride];
                                }
                                dw[static_cast<std::size_t>((o_ch * c_in + c) * kernel + j)] += acc;
                            }
                            if (x->requires_grad) {
                                const double wv =
                                    w->data[static_cast<std::size_t>((o_ch * c_in + c) * kernel + j)];
                                double* prow = dpad.data() + base;
                                for (std::int64_t t = 0; t < l_out; ++t) {
                                    prow[t * stride] += wv * grow[t];
                                }
                            }
                        }
                    }
                }
                if (x->requires_grad) {
                    for (std::int64_t c = 0; c < c_in; ++c) {
                        const double* src = dpad.data() + c * l_pad + pad_left;
                        double* dst = dx.data() + (b * c_in + c) * length;
                        for (std::int64_t t = 0; t < length; ++t) dst[t] += src[t];
                    }
                }
            }
            if (w->requires_grad) {
                w->accumulate_grad(dw.data(), static_cast<std::int64_t>(dw.size()));
            }
            if (x->requires_grad) {
                x->accumulate_grad(dx.data(), static_cast<std::int64_t>(dx.size()));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm

enum class Mode { kTrain, kEval };

// Running statistics live outside the graph; they are model state, not
// trainable parameters.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), 0.0),
          running_var(static_cast<std::size_t>(channels), 1.0) {}
};

// Per-channel normalization of [B x C x L] (or [C x L]) over batch and time
// jointly. Train mode uses batch statistics (eps 1e-5) and updates the running
// stats with momentum 0.1; eval mode normalizes with the running stats.
inline TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                           BatchNormState& state, Mode mode, double eps = 1e-5,
                           double momentum = 0.1) {
    if (x->rank() != 2 && x->rank() != 3) {
        throw DimensionError("batchnorm: input must be [C x L] or [B x C x L], got " +
                             shape_str(x->shape));
    }
    const bool batched = x->rank() == 3;
    const std::int64_t batch = batched ? x->shape[0] : 1;
    const std::int64_t channels = batched ? x->shape[1] : x->shape[0];
    const std::int64_t length = batched ? x->shape[2] : x->shape[1];
    if (gamma->shape != Shape{channels} || beta->shape != Shape{channels}) {
        throw DimensionError("batchnorm: gamma/beta must be [" + std::to_string(channels) + "]");
    }
    if (static_cast<std::int64_t>(state.running_mean.size()) != channels) {
        throw DimensionError("batchnorm: state has " +
                             std::to_string(state.running_mean.size()) + " channels, input has " +
                             std::to_string(channels));
    }
    const std::int64_t per_channel = batch * length;
    if (mode == Mode::kTrain && per_channel <= 1) {
        throw ContractError("batchnorm: train mode needs more than one value per channel");
    }
    if (mode == Mode::kEval && !state.initialized) {
        log_warn("batchnorm: eval before any train-mode update; using init stats (mean 0, var 1)");
    }

    std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> var(static_cast<std::size_t>(channels), 0.0);
    if (mode == Mode::kTrain) {
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t c = 0; c < channels; ++c) {
                const double* row = x->data.data() + (b * channels + c) * length;
                double acc = 0.0;
                for (std::int64_t t = 0; t < length; ++t) acc += row[t];
                mean[static_cast<std::size_t>(c)] += acc;
            }
        }
        for (auto& m : mean) m /= static_cast<double>(per_channel);
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t c = 0; c < channels; ++c) {
                const double* row = x->data.data() + (b * channels + c) * length;
                const double mu = mean[static_cast<std::size_t>(c)];
                double acc = 0.0;
                for (std::int64_t t = 0; t < length; ++t) {
                    const double d = row[t] - mu;
                    acc += d * d;
                }
                var[static_cast<std::size_t>(c)] += acc;
            }
        }
        for (auto& v : var) v /= static_cast<double>(per_channel);
        for (std::int64_t c = 0; c < channels; ++c) {
            state.running_mean[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_mean[static_cast<std::size_t>(c)] +
                momentum * mean[static_cast<std::size_t>(c)];
            state.running_var[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_var[static_cast<std::size_t>(c)] +
                momentum * var[static_cast<std::size_t>(c)];
        }
        state.initialized = true;
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> inv_std(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
        inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    }

    std::vector<double> xhat(x->data.size());
    std::vector<double> y(x->data.size());
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < channels; ++c) {
            const double* row = x->data.data() + (b * channels + c) * length;
            const std::int64_t base = (b * channels + c) * length;
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = inv_std[static_cast<std::size_t>(c)];
            const double g = gamma->data[static_cast<std::size_t>(c)];
            const double be = beta->data[static_cast<std::size_t>(c)];
            for (std::int64_t t = 0; t < length; ++t) {
                const double xn = (row[t] - mu) * is;
                xhat[static_cast<std::size_t>(base + t)] = xn;
                y[static_cast<std::size_t>(base + t)] = xn * g + be;
            }
        }
    }
    auto out = tensor(x->shape, std::move(y));

    if (detail::track_graph({&x, &gamma, &beta})) {
        const bool train = mode == Mode::kTrain;
        detail::attach(out, {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                        batch, channels, length, train](Tensor& o) {
            const double m = static_cast<double>(batch * length);
            std::vector<double> sum_dy(static_cast<std::size_t>(channels), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(channels), 0.0);
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t c = 0; c < channels; ++c) {
                    const std::int64_t base = (b * channels + c) * length;
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t t = 0; t < length; ++t) {
                        const double dy = o.grad[static_cast<std::size_t>(base + t)];
                        s1 += dy;
                        s2 += dy * xhat[static_cast<std::size_t>(base + t)];
                    }
                    sum_dy[static_cast<std::size_t>(c)] += s1;
                    sum_dy_xhat[static_cast<std::size_t>(c)] += s2;
                }
            }
            if (beta->requires_grad) {
                beta->accumulate_grad(sum_dy.data(), channels);
            }
            if (gamma->requires_grad) {
                gamma->accumulate_grad(sum_dy_xhat.data(), channels);
            }
            if (x->requires_grad) {
                std::vector<double> gx(x->data.size());
                for (std::int64_t b = 0; b < batch; ++b) {
                    for (std::int64_t c = 0; c < channels; ++c) {
                        const std::int64_t base = (b * channels + c) * length;
                        const double g = gamma->data[static_cast<std::size_t>(c)];
                        const double is = inv_std[static_cast<std::size_t>(c)];
                        const double sdy = sum_dy[static_cast<std::size_t>(c)];
                        const double sdyx = sum_dy_xhat[static_cast<std::size_t>(c)];
                        for (std::int64_t t = 0; t < length; ++t) {
                            const auto idx = static_cast<std::size_t>(base + t);
                            const double dy = o.grad[idx];
                            if (train) {
                                gx[idx] = (g * is / m) * (m * dy - sdy - xhat[idx] * sdyx);
                            } else {
                                gx[idx] = g * is * dy;
                            }
                        }
                    }
                }
                x->accumulate_grad(gx.data(), static_cast<std::int64_t>(gx.size()));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling, affine, cross entropy

// Mean over the temporal (last) axis: [B x C x L] -> [B x C], [C x L] -> [C].
inline TensorPtr avgpool_time(const TensorPtr& x) {
    if (x->rank() != 2 && x->rank() != 3) {
        throw DimensionError("avgpool_time: input must be [C x L] or [B x C x L], got " +
                             shape_str(x->shape));
    }
    const bool batched = x->rank() == 3;
    const std::int64_t batch = batched ? x->shape[0] : 1;
    const std::int64_t channels = batched ? x->shape[1] : x->shape[0];
    const std::int64_t length = batched ? x->shape[2] : x->shape[1];
    Shape out_shape = batched ? Shape{batch, channels} : Shape{channels};
    std::vector<double> d(static_cast<std::size_t>(batch * channels));
    const double inv = 1.0 / static_cast<double>(length);
    for (std::int64_t bc = 0; bc < batch * channels; ++bc) {
        const double* row = x->data.data() + bc * length;
        double acc = 0.0;
        for (std::int64_t t = 0; t < length; ++t) acc += row[t];
        d[static_cast<std::size_t>(bc)] = acc * inv;
    }
    auto out = tensor(std::move(out_shape), std::move(d));
    if (detail::track_graph({&x})) {
        detail::attach(out, {x}, [x, batch, channels, length, inv](Tensor& o) {
            std::vector<double> g(x->data.size());
            for (std::int64_t bc = 0; bc < batch * channels; ++bc) {
                const double gv = o.grad[static_cast<std::size_t>(bc)] * inv;
                double* row = g.data() + bc * length;
                for (std::int64_t t = 0; t < length; ++t) row[t] = gv;
            }
            x->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

// y = x W^T + b with x [B x in] (or [in]), W [out x in], b [out].
inline TensorPtr affine(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (w->rank() != 2) {
        throw DimensionError("affine: weight must be [out x in], got " + shape_str(w->shape));
    }
    const std::int64_t d_out = w->shape[0], d_in = w->shape[1];
    if (x->rank() != 1 && x->rank() != 2) {
        throw DimensionError("affine: input must be [in] or [B x in], got " + shape_str(x->shape));
    }
    const bool batched = x->rank() == 2;
    const std::int64_t batch = batched ? x->shape[0] : 1;
    const std::int64_t in = batched ? x->shape[1] : x->shape[0];
    if (in != d_in) {
        throw DimensionError("affine: weight expects " + std::to_string(d_in) +
                             " inputs, got " + std::to_string(in));
    }
    if (b->shape != Shape{d_out}) {
        throw DimensionError("affine: bias must be [" + std::to_string(d_out) + "]");
    }
    Shape out_shape = batched ? Shape{batch, d_out} : Shape{d_out};
    std::vector<double> d(static_cast<std::size_t>(batch * d_out));
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        const double* xrow = x->data.data() + bi * d_in;
        for (std::int64_t o = 0; o < d_out; ++o) {
            const double* wrow = w->data.data() + o * d_in;
            double acc = b->data[static_cast<std::size_t>(o)];
            for (std::int64_t i = 0; i < d_in; ++i) acc += wrow[i] * xrow[i];
            d[static_cast<std::size_t>(bi * d_out + o)] = acc;
        }
    }
    flop_counter().add(FlopCategory::kAffine, batch * d_out * d_in);
    auto out = tensor(std::move(out_shape), std::move(d));
    if (detail::track_graph({&x, &w, &b})) {
        detail::attach(out, {x, w, b}, [x, w, b, batch, d_in, d_out](Tensor& o) {
            if (b->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(d_out), 0.0);
                for (std::int64_t bi = 0; bi < batch; ++bi) {
                    for (std::int64_t oc = 0; oc < d_out; ++oc) {
                        g[static_cast<std::size_t>(oc)] +=
                            o.grad[static_cast<std::size_t>(bi * d_out + oc)];
                    }
                }
                b->accumulate_grad(g.data(), d_out);
            }
            if (w->requires_grad) {
                std::vector<double> g(w->data.size(), 0.0);
                for (std::int64_t bi = 0; bi < batch; ++bi) {
                    const double* xrow = x->data.data() + bi * d_in;
                    for (std::int64_t oc = 0; oc < d_out; ++oc) {
                        const double gv = o.grad[static_cast<std::size_t>(bi * d_out + oc)];
                        double* grow = g.data() + oc * d_in;
                        for (std::int64_t i = 0; i < d_in; ++i) grow[i] += gv * xrow[i];
                    }
                }
                w->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
            if (x->requires_grad) {
                std::vector<double> g(x->data.size(), 0.0);
                for (std::int64_t bi = 0; bi < batch; ++bi) {
                    double* grow = g.data() + bi * d_in;
                    for (std::int64_t oc = 0; oc < d_out; ++oc) {
                        const double gv = o.grad[static_cast<std::size_t>(bi * d_out + oc)];
                        const double* wrow = w->data.data() + oc * d_in;
                        for (std::int64_t i = 0; i < d_in; ++i) grow[i] += gv * wrow[i];
                    }
                }
                x->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
            }
        });
    }
    return out;
}

// Mean cross-entropy between logits [B x K] and integer labels, computed via
// a stable log-sum-exp.
inline TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<std::int64_t>& labels) {
    if (logits->rank() != 2) {
        throw DimensionError("cross_entropy: logits must be [B x K], got " +
                             shape_str(logits->shape));
    }
    const std::int64_t batch = logits->shape[0], classes = logits->shape[1];
    if (static_cast<std::int64_t>(labels.size()) != batch) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(batch));
    }
    for (const auto lbl : labels) {
        if (lbl < 0 || lbl >= classes) {
            throw ContractError("cross_entropy: label " + std::to_string(lbl) +
                                " outside [0, " + std::to_string(classes) + ")");
        }
    }
    std::vector<double> probs(logits->data.size());
    double loss = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* row = logits->data.data() + b * classes;
        double mx = row[0];
        for (std::int64_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (std::int64_t k = 0; k < classes; ++k) {
            const double e = std::exp(row[k] - mx);
            probs[static_cast<std::size_t>(b * classes + k)] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (std::int64_t k = 0; k < classes; ++k) {
            probs[static_cast<std::size_t>(b * classes + k)] *= inv;
        }
        loss += std::log(denom) + mx - row[labels[static_cast<std::size_t>(b)]];
    }
    loss /= static_cast<double>(batch);
    auto out = tensor({}, {loss});
    if (detail::track_graph({&logits})) {
        detail::attach(out, {logits},
                       [logits, labels, probs = std::move(probs), batch, classes](Tensor& o) {
            const double scale = o.grad[0] / static_cast<double>(batch);
            std::vector<double> g(probs.size());
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t k = 0; k < classes; ++k) {
                    const auto idx = static_cast<std::size_t>(b * classes + k);
                    g[idx] = scale * (probs[idx] -
                                      (k == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0));
                }
            }
            logits->accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return out;
}

}  // namespace lambdakws
