#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "echogen/error.hpp"
#include "echogen/rng.hpp"
#include "echogen/sha256.hpp"

namespace echogen {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;  // leaf marker: optimizer-owned parameter
    bool tracked = false;        // participates in the current gradient graph
    std::vector<float> grad;     // lazily allocated, same length as data
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    i64 numel() const { return static_cast<i64>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

// RAII guard that disables gradient recording (sampling, evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

// Dense row-major float32 tensor with an attached differentiation record.
// Tensors are immutable values once created; operations allocate fresh
// outputs. The only sanctioned in-place mutation is parameter updates via
// mutable_data(), owned by a single writer (the optimizer / loader).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), 0.0f);
        n->requires_grad = requires_grad;
        n->tracked = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, float value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->data.begin(), t.n_->data.end(), value);
        if (!std::isfinite(value)) throw ValueError("tensor fill value is not finite");
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
        check_shape(shape);
        if (shape_numel(shape) != static_cast<i64>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        for (float v : data)
            if (!std::isfinite(v)) throw ValueError("tensor data contains a non-finite value");
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        n->tracked = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(float v) { return from_data({1}, {v}); }

    static Tensor randn(Shape shape, RngStream& rng, float stddev = 1.0f, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = stddev * rng.next_gaussian();
        return t;
    }

    static Tensor rand_uniform(Shape shape, RngStream& rng, float lo, float hi) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n_->data) v = lo + (hi - lo) * static_cast<float>(rng.next_uniform());
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    int rank() const { return static_cast<int>(node().shape.size()); }
    i64 numel() const { return node().numel(); }
    i64 dim(int i) const { return node().shape[static_cast<std::size_t>(i)]; }

    const float* data() const { return node().data.data(); }
    const std::vector<float>& vec() const { return node().data; }

    // Single-writer mutation hook for parameter owners; never used by ops.
    float* mutable_data() { return node().data.data(); }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool rg) {
        node().requires_grad = rg;
        if (node().parents.empty()) node().tracked = rg;
    }

    bool tracked() const { return node().tracked; }

    // Gradient buffer; allocates zeros on first access so untouched leaves
    // report a zero gradient.
    const std::vector<float>& grad() const {
        auto& n = node();
        if (!n.requires_grad && !n.tracked)
            throw StateError("tensor does not participate in gradient computation");
        const_cast<detail::Node&>(n).ensure_grad();
        return n.grad;
    }

    bool has_grad() const { return defined() && !n_->grad.empty(); }

    void zero_grad() {
        auto& n = node();
        n.grad.assign(n.data.size(), 0.0f);
    }

    // Value copy detached from any graph.
    Tensor detach() const {
        auto& n = node();
        auto m = std::make_shared<detail::Node>();
        m->shape = n.shape;
        m->data = n.data;
        return Tensor(std::move(m));
    }

    Tensor clone() const {
        auto& n = node();
        auto m = std::make_shared<detail::Node>();
        m->shape = n.shape;
        m->data = n.data;
        m->requires_grad = n.requires_grad;
        m->tracked = n.requires_grad;
        return Tensor(std::move(m));
    }

    bool all_finite() const {
        for (float v : node().data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string digest_hex() const {
        return sha256_hex(node().data.data(), node().data.size() * sizeof(float));
    }

    bool same_node(const Tensor& other) const { return n_.get() == other.n_.get(); }

    // Reverse-mode gradient computation from a scalar loss. Fills gradient
    // buffers on every tracked node; leaves not reachable from the loss keep
    // (or lazily report) zeros.
    void backward() const {
        auto& loss = node();
        if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape));
        if (!loss.tracked)
            throw StateError("loss is not connected to any tracked tensor; nothing to differentiate");

        // Iterative post-order DFS; temporary marks catch cycles.
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> done;
        std::unordered_set<detail::Node*> open;
        struct Frame {
            detail::Node* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({&loss, 0});
        open.insert(&loss);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                detail::Node* p = f.node->parents[f.next_parent++].get();
                if (!p->tracked || done.count(p)) continue;
                if (open.count(p)) throw StateError("gradient graph contains a cycle");
                open.insert(p);
                stack.push_back({p, 0});
            } else {
                done.insert(f.node);
                open.erase(f.node);
                order.push_back(f.node);
                stack.pop_back();
            }
        }

        for (detail::Node* n : order) n->ensure_grad();
        loss.grad[0] += 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    detail::NodePtr handle() const { return n_; }
    explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

private:
    static void check_shape(const Shape& s) {
        for (i64 d : s)
            if (d <= 0) throw ShapeError("shape extents must be positive, got " + shape_str(s));
    }

    detail::Node& node() const {
        if (!n_) throw StateError("operation on an empty tensor");
        return *n_;
    }

    detail::NodePtr n_;
};

namespace detail {

// Shared helper for op implementations: builds the output node and records
// the backward closure when grad mode is on and any input is tracked.
inline Tensor make_output(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs)
            if (t.defined() && t.tracked()) track = true;
    }
    if (track) {
        n->tracked = true;
        n->parents.reserve(inputs.size());
        for (const auto& t : inputs)
            if (t.defined()) n->parents.push_back(t.handle());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

inline void check_finite(const char* op, const Tensor& t) {
    for (float v : t.vec())
        if (!std::isfinite(v)) throw ValueError(std::string(op) + ": input contains a non-finite value");
}

inline bool wants_grad(const Node& n) { return n.tracked; }

inline void accumulate(Node& n, const float* g, i64 count) {
    n.ensure_grad();
    for (i64 i = 0; i < count; i++) n.grad[static_cast<std::size_t>(i)] += g[i];
}

}  // namespace detail

}  // namespace echogen
