#pragma once

// Dense f64 tensors, a define-by-run reverse-mode autodiff graph, LSTM cells,
// finite-difference gradient checking, Adam, and the parameter container format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace morphtag {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense array of doubles. Scalars are stored with shape [1].
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        validate_dims();
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_dims();
        if (data_.size() != shape_size(shape_)) {
            throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }
    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not scalar");
        return data_[0];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void validate_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Seeded generator with a platform-independent draw sequence (std distributions are not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 42) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: empty range");
        return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

enum class Init { Zeros, Glorot };

/// Ordered, named parameters. Addresses are stable for the lifetime of the set.
class ParameterSet {
public:
    ParameterSet() = default;
    ParameterSet(const ParameterSet&) = delete;
    ParameterSet& operator=(const ParameterSet&) = delete;
    ParameterSet(ParameterSet&&) = default;
    ParameterSet& operator=(ParameterSet&&) = default;

    /// Glorot init draws uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)), from
    /// the trailing two dimensions; vectors always start at zero.
    Parameter& add(std::string name, Shape shape, Init init, Rng& rng) {
        if (index_.contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto p = std::make_unique<Parameter>();
        p->name = std::move(name);
        p->value = Tensor(shape);
        p->grad = Tensor(shape);
        if (init == Init::Glorot && shape.size() >= 2) {
            const double fan_out = static_cast<double>(shape[shape.size() - 2]);
            const double fan_in = static_cast<double>(shape.back());
            const double a = std::sqrt(6.0 / (fan_in + fan_out));
            for (auto& v : p->value.data()) v = rng.uniform(-a, a);
        }
        index_.emplace(p->name, params_.size());
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Parameter* find(std::string_view name) {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Parameter* find(std::string_view name) const {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    Parameter& at(std::string_view name) {
        if (auto* p = find(name)) return *p;
        throw std::out_of_range("unknown parameter: " + std::string(name));
    }
    const Parameter& at(std::string_view name) const {
        if (auto* p = find(name)) return *p;
        throw std::out_of_range("unknown parameter: " + std::string(name));
    }

    std::size_t size() const noexcept { return params_.size(); }
    Parameter& operator[](std::size_t i) { return *params_[i]; }
    const Parameter& operator[](std::size_t i) const { return *params_[i]; }

    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.fill(0.0);
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& p : params_)
            for (double g : p->grad.data()) s += g * g;
        return std::sqrt(s);
    }

    /// Rescales all gradients so their global L2 norm is at most max_norm.
    void clip_grad_norm(double max_norm) {
        const double norm = grad_norm();
        if (norm <= max_norm || norm == 0.0) return;
        const double scale = max_norm / norm;
        for (auto& p : params_)
            for (double& g : p->grad.data()) g *= scale;
    }

    std::vector<Tensor> snapshot() const {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p->value);
        return out;
    }

    void restore(const std::vector<Tensor>& values) {
        if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i].shape() != params_[i]->value.shape())
                throw ShapeError("restore: shape mismatch for " + params_[i]->name);
            params_[i]->value = values[i];
        }
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Autodiff graph
// ---------------------------------------------------------------------------

enum class OpKind : std::uint8_t {
    Input,
    Param,
    MatMul,
    Affine,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    Tanh,
    Sigmoid,
    Embedding,
    LogSoftmax,
    LogSumExp,
    Slice,
    Sum,
    Stack,
    Pick,
    Custom,
};

inline std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Input: return "input";
        case OpKind::Param: return "param";
        case OpKind::MatMul: return "matmul";
        case OpKind::Affine: return "affine";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "elementwise-multiply";
        case OpKind::Scale: return "scale";
        case OpKind::Concat: return "concat";
        case OpKind::Tanh: return "tanh";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Embedding: return "embedding-lookup";
        case OpKind::LogSoftmax: return "log-softmax";
        case OpKind::LogSumExp: return "logsumexp";
        case OpKind::Slice: return "slice";
        case OpKind::Sum: return "sum";
        case OpKind::Stack: return "stack";
        case OpKind::Pick: return "pick";
        case OpKind::Custom: return "custom";
    }
    return "?";
}

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Per-example computation record. Node ids are a topological order by construction.
class Graph {
public:
    /// Accumulates d(output)/d(parent) into parent gradients given the node's own gradient.
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    Graph() { nodes_.reserve(1024); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(Tensor value) {
        Node n;
        n.kind = OpKind::Input;
        n.owned = std::move(value);
        return push(std::move(n));
    }

    /// Leaf bound to a parameter; gradients land directly in Parameter::grad.
    Var param(Parameter& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
        Node n;
        n.kind = OpKind::Param;
        n.param = &p;
        n.needs_grad = true;
        Var v = push(std::move(n));
        param_nodes_.emplace(&p, v.id());
        return v;
    }

    Var custom(std::vector<std::uint32_t> parents, Tensor value, BackwardFn fn) {
        Node n;
        n.kind = OpKind::Custom;
        n.parents = std::move(parents);
        n.owned = std::move(value);
        n.backward = std::move(fn);
        return push(std::move(n));
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(std::uint32_t id) const { return nodes_[id].kind; }
    const std::vector<std::uint32_t>& parents(std::uint32_t id) const { return nodes_[id].parents; }
    bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }

    const Tensor& value(std::uint32_t id) const {
        const Node& n = nodes_[id];
        return n.param ? n.param->value : n.owned;
    }

    /// Gradient accumulator of a node (only meaningful during/after backward).
    Tensor& grad(std::uint32_t id) {
        Node& n = nodes_[id];
        return n.param ? n.param->grad : n.grad;
    }

    /// Reverse sweep from a scalar root. Parameter gradients accumulate (call
    /// ParameterSet::zero_grad first for a fresh table).
    void backward(Var root) {
        if (root.valid() && &root.graph() != this) throw std::invalid_argument("backward: root from another graph");
        const std::uint32_t r = root.id();
        if (value(r).size() != 1) {
            throw ShapeError("backward: root must be scalar, got shape " + shape_string(value(r).shape()));
        }
        std::vector<char> reach(nodes_.size(), 0);
        reach[r] = 1;
        for (std::uint32_t i = r + 1; i-- > 0;) {
            if (!reach[i]) continue;
            for (auto p : nodes_[i].parents) reach[p] = 1;
        }
        for (std::uint32_t i = 0; i <= r; ++i) {
            Node& n = nodes_[i];
            if (reach[i] && n.needs_grad && !n.param) n.grad = Tensor(n.owned.shape());
        }
        if (!nodes_[r].needs_grad) return;
        grad(r)[0] += 1.0;
        for (std::uint32_t i = r + 1; i-- > 0;) {
            if (!reach[i] || !nodes_[i].needs_grad) continue;
            backward_node(i);
        }
    }

    // Used by op implementations.
    Var push_op(OpKind kind, std::vector<std::uint32_t> parents, Tensor value, std::size_t aux = 0,
                double scalar = 0.0) {
        Node n;
        n.kind = kind;
        n.parents = std::move(parents);
        n.owned = std::move(value);
        n.aux = aux;
        n.scalar = scalar;
        return push(std::move(n));
    }
    std::size_t aux(std::uint32_t id) const { return nodes_[id].aux; }

private:
    struct Node {
        OpKind kind = OpKind::Input;
        std::vector<std::uint32_t> parents;
        Tensor owned;
        Tensor grad;
        Parameter* param = nullptr;
        BackwardFn backward;
        std::size_t aux = 0;
        double scalar = 0.0;
        bool needs_grad = false;
    };

    Var push(Node n) {
        if (n.kind != OpKind::Param && n.kind != OpKind::Input) {
            for (auto p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
        }
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    void backward_node(std::uint32_t id);

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

inline void Graph::backward_node(std::uint32_t id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    auto want = [&](std::size_t k) { return nodes_[n.parents[k]].needs_grad; };
    auto pgrad = [&](std::size_t k) -> Tensor& { return grad(n.parents[k]); };
    auto pval = [&](std::size_t k) -> const Tensor& { return value(n.parents[k]); };

    switch (n.kind) {
        case OpKind::Input:
        case OpKind::Param:
            break;
        case OpKind::MatMul: {
            const Tensor& a = pval(0);
            const Tensor& b = pval(1);
            const std::size_t m = a.rows(), k = a.cols();
            const std::size_t cols = b.rank() == 1 ? 1 : b.cols();
            if (want(0)) {
                Tensor& ga = pgrad(0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double gij = g[i * cols + j];
                        if (gij == 0.0) continue;
                        for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gij * b[t * cols + j];
                    }
            }
            if (want(1)) {
                Tensor& gb = pgrad(1);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double gij = g[i * cols + j];
                        if (gij == 0.0) continue;
                        for (std::size_t t = 0; t < k; ++t) gb[t * cols + j] += gij * a[i * k + t];
                    }
            }
            break;
        }
        case OpKind::Affine: {
            const Tensor& w = pval(0);
            const Tensor& x = pval(1);
            const std::size_t m = w.rows(), k = w.cols();
            if (want(0)) {
                Tensor& gw = pgrad(0);
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    double* row = &gw[i * k];
                    for (std::size_t t = 0; t < k; ++t) row[t] += gi * x[t];
                }
            }
            if (want(1)) {
                Tensor& gx = pgrad(1);
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    const double* row = w.data().data() + i * k;
                    for (std::size_t t = 0; t < k; ++t) gx[t] += gi * row[t];
                }
            }
            if (want(2)) {
                Tensor& gb = pgrad(2);
                for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
            }
            break;
        }
        case OpKind::Add:
        case OpKind::Sub: {
            const double sign = n.kind == OpKind::Add ? 1.0 : -1.0;
            if (want(0)) {
                Tensor& ga = pgrad(0);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (want(1)) {
                Tensor& gb = pgrad(1);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
            }
            break;
        }
        case OpKind::Mul: {
            const Tensor& a = pval(0);
            const Tensor& b = pval(1);
            if (want(0)) {
                Tensor& ga = pgrad(0);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (want(1)) {
                Tensor& gb = pgrad(1);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
            break;
        }
        case OpKind::Concat: {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const std::size_t len = pval(k).size();
                if (want(k)) {
                    Tensor& gk = pgrad(k);
                    for (std::size_t i = 0; i < len; ++i) gk[i] += g[offset + i];
                }
                offset += len;
            }
            break;
        }
        case OpKind::Tanh: {
            Tensor& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.owned[i] * n.owned[i]);
            break;
        }
        case OpKind::Sigmoid: {
            Tensor& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.owned[i] * (1.0 - n.owned[i]);
            break;
        }
        case OpKind::Embedding: {
            Tensor& gt = pgrad(0);
            const std::size_t d = g.size();
            double* row = &gt[n.aux * d];
            for (std::size_t i = 0; i < d; ++i) row[i] += g[i];
            break;
        }
        case OpKind::LogSoftmax: {
            Tensor& ga = pgrad(0);
            double gsum = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) gsum += g[i];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] - std::exp(n.owned[i]) * gsum;
            break;
        }
        case OpKind::LogSumExp: {
            const Tensor& a = pval(0);
            Tensor& ga = pgrad(0);
            const double lse = n.owned[0];
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0] * std::exp(a[i] - lse);
            break;
        }
        case OpKind::Slice: {
            Tensor& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[n.aux + i] += g[i];
            break;
        }
        case OpKind::Sum: {
            Tensor& ga = pgrad(0);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
            break;
        }
        case OpKind::Stack: {
            const std::size_t width = g.cols();
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                if (!want(k)) continue;
                Tensor& gk = pgrad(k);
                for (std::size_t i = 0; i < width; ++i) gk[i] += g[k * width + i];
            }
            break;
        }
        case OpKind::Pick: {
            pgrad(0)[n.aux] += g[0];
            break;
        }
        case OpKind::Custom:
            n.backward(*this, id);
            break;
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline Graph& same_graph(std::string_view op, std::initializer_list<Var> vars) {
    Graph* g = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) throw std::invalid_argument(std::string(op) + ": invalid operand");
        if (g && &v.graph() != g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
        g = &v.graph();
    }
    return *g;
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

inline double logsumexp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace detail

using detail::logsumexp;

/// [m x k] * [k x n] -> [m x n], or [m x k] * [k] -> [m].
inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph("matmul", {a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() < 1 || bv.rank() > 2 || av.cols() != bv.rows())
        detail::shape_mismatch("matmul", av.shape(), bv.shape());
    const std::size_t m = av.rows(), k = av.cols();
    const std::size_t n = bv.rank() == 1 ? 1 : bv.cols();
    Tensor out(bv.rank() == 1 ? Shape{m} : Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            const double a_it = av[i * k + t];
            if (a_it == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += a_it * bv[t * n + j];
        }
    return g.push_op(OpKind::MatMul, {a.id(), b.id()}, std::move(out));
}

/// W x + b for W [m x k], x [k], b [m].
inline Var affine(Var w, Var x, Var b) {
    Graph& g = detail::same_graph("affine", {w, x, b});
    const Tensor& wv = w.value();
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (wv.rank() != 2 || xv.rank() != 1 || wv.cols() != xv.size())
        detail::shape_mismatch("affine", wv.shape(), xv.shape());
    if (bv.rank() != 1 || bv.size() != wv.rows()) detail::shape_mismatch("affine", wv.shape(), bv.shape());
    const std::size_t m = wv.rows(), k = wv.cols();
    Tensor out = bv;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = wv.data().data() + i * k;
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += row[t] * xv[t];
        out[i] += s;
    }
    return g.push_op(OpKind::Affine, {w.id(), x.id(), b.id()}, std::move(out));
}

namespace detail {
template <typename F>
Var binary(OpKind kind, Var a, Var b, F f) {
    Graph& g = same_graph(op_name(kind), {a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape() != bv.shape()) shape_mismatch(op_name(kind), av.shape(), bv.shape());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return g.push_op(kind, {a.id(), b.id()}, std::move(out));
}

template <typename F>
Var unary(OpKind kind, Var a, F f) {
    Graph& g = same_graph(op_name(kind), {a});
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return g.push_op(kind, {a.id()}, std::move(out));
}

inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace detail

inline Var add(Var a, Var b) { return detail::binary(OpKind::Add, a, b, std::plus<>()); }
inline Var sub(Var a, Var b) { return detail::binary(OpKind::Sub, a, b, std::minus<>()); }
inline Var mul(Var a, Var b) { return detail::binary(OpKind::Mul, a, b, std::multiplies<>()); }
inline Var tanh(Var a) { return detail::unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); }); }
inline Var sigmoid(Var a) { return detail::unary(OpKind::Sigmoid, a, detail::stable_sigmoid); }

inline Var scale(Var a, double c) {
    Graph& g = detail::same_graph("scale", {a});
    Tensor out = a.value();
    for (double& v : out.data()) v *= c;
    return g.push_op(OpKind::Scale, {a.id()}, std::move(out), 0, c);
}

/// Concatenates rank-1 tensors.
inline Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    Graph& g = parts.front().graph();
    std::vector<std::uint32_t> ids;
    std::vector<double> out;
    for (const Var& v : parts) {
        if (&v.graph() != &g) throw std::invalid_argument("concat: operands from different graphs");
        if (v.value().rank() != 1) detail::shape_mismatch("concat", parts.front().shape(), v.shape());
        ids.push_back(v.id());
        out.insert(out.end(), v.value().data().begin(), v.value().data().end());
    }
    return g.push_op(OpKind::Concat, std::move(ids), Tensor::vector(std::move(out)));
}
inline Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

/// Row `index` of a [V x d] table.
inline Var embedding(Var table, std::size_t index) {
    Graph& g = detail::same_graph("embedding-lookup", {table});
    const Tensor& t = table.value();
    if (t.rank() != 2) throw ShapeError("embedding-lookup: table must be rank 2, got " + shape_string(t.shape()));
    if (index >= t.rows())
        throw ShapeError("embedding-lookup: row " + std::to_string(index) + " out of range for " + shape_string(t.shape()));
    auto row = t.row(index);
    return g.push_op(OpKind::Embedding, {table.id()}, Tensor::vector({row.begin(), row.end()}), index);
}

inline Var log_softmax(Var a) {
    Graph& g = detail::same_graph("log-softmax", {a});
    const Tensor& av = a.value();
    if (av.rank() != 1) throw ShapeError("log-softmax: expected rank 1, got " + shape_string(av.shape()));
    const double lse = logsumexp(av.data());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - lse;
    return g.push_op(OpKind::LogSoftmax, {a.id()}, std::move(out));
}

inline Var logsumexp(Var a) {
    Graph& g = detail::same_graph("logsumexp", {a});
    return g.push_op(OpKind::LogSumExp, {a.id()}, Tensor::scalar(logsumexp(a.value().data())));
}

inline Var slice(Var a, std::size_t offset, std::size_t length) {
    Graph& g = detail::same_graph("slice", {a});
    const Tensor& av = a.value();
    if (av.rank() != 1 || length == 0 || offset + length > av.size())
        throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") invalid for " + shape_string(av.shape()));
    auto part = av.data().subspan(offset, length);
    return g.push_op(OpKind::Slice, {a.id()}, Tensor::vector({part.begin(), part.end()}), offset);
}

inline Var sum(Var a) {
    Graph& g = detail::same_graph("sum", {a});
    const auto d = a.value().data();
    return g.push_op(OpKind::Sum, {a.id()}, Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0)));
}

/// Stacks k rank-1 tensors of width n into a [k x n] matrix.
inline Var stack_rows(std::span<const Var> rows) {
    if (rows.empty()) throw ShapeError("stack: no operands");
    Graph& g = rows.front().graph();
    const Shape& first = rows.front().shape();
    if (first.size() != 1) throw ShapeError("stack: operands must be rank 1, got " + shape_string(first));
    std::vector<std::uint32_t> ids;
    std::vector<double> out;
    out.reserve(rows.size() * first[0]);
    for (const Var& v : rows) {
        if (v.shape() != first) detail::shape_mismatch("stack", first, v.shape());
        ids.push_back(v.id());
        out.insert(out.end(), v.value().data().begin(), v.value().data().end());
    }
    return g.push_op(OpKind::Stack, std::move(ids), Tensor({rows.size(), first[0]}, std::move(out)));
}

/// Scalar entry `index` of a tensor (flat index).
inline Var pick(Var a, std::size_t index) {
    Graph& g = detail::same_graph("pick", {a});
    if (index >= a.size())
        throw ShapeError("pick: index " + std::to_string(index) + " out of range for " + shape_string(a.shape()));
    return g.push_op(OpKind::Pick, {a.id()}, Tensor::scalar(a.value()[index]), index);
}

/// Name -> gradient snapshot over every parameter of a set.
using GradientTable = std::unordered_map<std::string, Tensor>;

/// Zeroes gradients, runs backward from `root` and returns the full table;
/// parameters not reached from the root hold zeros.
inline GradientTable compute_gradients(Var root, ParameterSet& params) {
    params.zero_grad();
    root.graph().backward(root);
    GradientTable table;
    for (std::size_t i = 0; i < params.size(); ++i) table.emplace(params[i].name, params[i].grad);
    return table;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Gate rows are stacked i, f, o, g in a single [4h x (in + h)] matrix.
struct LstmParams {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;

    static LstmParams create(ParameterSet& params, const std::string& prefix, std::size_t input_dim,
                             std::size_t hidden_dim, Rng& rng) {
        LstmParams p;
        p.input_dim = input_dim;
        p.hidden_dim = hidden_dim;
        p.weight = &params.add(prefix + ".W", {4 * hidden_dim, input_dim + hidden_dim}, Init::Glorot, rng);
        p.bias = &params.add(prefix + ".b", {4 * hidden_dim}, Init::Zeros, rng);
        return p;
    }
};

struct LstmState {
    Var h;
    Var c;
};

inline LstmState lstm_zero_state(Graph& g, std::size_t hidden_dim) {
    Var zero = g.input(Tensor({hidden_dim}));
    return {zero, zero};
}

inline LstmState lstm_cell(Graph& g, const LstmParams& p, Var x, const LstmState& prev) {
    const std::size_t h = p.hidden_dim;
    if (x.shape() != Shape{p.input_dim})
        throw ShapeError("lstm_cell: input " + shape_string(x.shape()) + " but cell expects [" +
                         std::to_string(p.input_dim) + "]");
    if (prev.h.shape() != Shape{h} || prev.c.shape() != Shape{h})
        throw ShapeError("lstm_cell: state " + shape_string(prev.h.shape()) + "/" + shape_string(prev.c.shape()) +
                         " but cell expects [" + std::to_string(h) + "]");
    Var z = affine(g.param(*p.weight), concat({x, prev.h}), g.param(*p.bias));
    Var in_gate = sigmoid(slice(z, 0, h));
    Var forget_gate = sigmoid(slice(z, h, h));
    Var out_gate = sigmoid(slice(z, 2 * h, h));
    Var candidate = tanh(slice(z, 3 * h, h));
    Var c = add(mul(forget_gate, prev.c), mul(in_gate, candidate));
    return {mul(out_gate, tanh(c)), c};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    /// Parameters with more entries than this are checked on a seeded random subsample of this size.
    std::size_t max_entries_per_param = 64;
    /// Denominator floor for the relative error, so near-zero gradients compare absolutely.
    double floor = 1e-6;
    std::uint64_t seed = 42;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    bool passed = true;
};

using LossBuilder = std::function<Var(Graph&)>;

inline GradCheckReport grad_check(const LossBuilder& loss, ParameterSet& params, const GradCheckOptions& opts = {}) {
    if (!(opts.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    std::vector<Tensor> analytic;
    {
        Graph g;
        Var root = loss(g);
        params.zero_grad();
        g.backward(root);
        for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);
    }
    auto eval = [&] {
        Graph g;
        return loss(g).value().item();
    };

    Rng rng(opts.seed);
    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = params[pi];
        const std::size_t n = p.value.size();
        std::vector<std::size_t> entries(n);
        std::iota(entries.begin(), entries.end(), std::size_t{0});
        if (n > opts.max_entries_per_param) {
            for (std::size_t i = 0; i < opts.max_entries_per_param; ++i) std::swap(entries[i], entries[i + rng.below(n - i)]);
            entries.resize(opts.max_entries_per_param);
        }
        for (std::size_t idx : entries) {
            const double saved = p.value[idx];
            p.value[idx] = saved + opts.eps;
            const double up = eval();
            p.value[idx] = saved - opts.eps;
            const double down = eval();
            p.value[idx] = saved;
            const double numeric = (up - down) / (2.0 * opts.eps);
            const double a = analytic[pi][idx];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
            ++report.checked;
            if (rel > report.max_rel_error || !std::isfinite(rel)) {
                report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
                report.worst_param = p.name;
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    return report;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;
};

class Adam {
public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

    const AdamOptions& options() const noexcept { return opts_; }

    /// Clips the global gradient norm, then applies one update to every parameter.
    void step(ParameterSet& params) {
        if (first_.size() != params.size()) {
            first_.clear();
            second_.clear();
            for (std::size_t i = 0; i < params.size(); ++i) {
                first_.emplace_back(params[i].value.shape());
                second_.emplace_back(params[i].value.shape());
            }
        }
        if (opts_.clip_norm > 0.0) params.clip_grad_norm(opts_.clip_norm);
        ++steps_;
        const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].value.data();
            auto g = params[i].grad.data();
            auto m = first_[i].data();
            auto v = second_[i].data();
            for (std::size_t k = 0; k < w.size(); ++k) {
                if (g[k] == 0.0 && m[k] == 0.0 && v[k] == 0.0) continue;
                m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
                v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
                w[k] -= opts_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.epsilon);
            }
        }
    }

private:
    AdamOptions opts_;
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
    std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter container
// ---------------------------------------------------------------------------
//
// Layout (all integers little-endian):
//   magic "MTAGPARM", u32 version, u64 manifest length, manifest bytes,
//   u32 entry count, then per entry: u32 name length, name bytes,
//   u32 rank, u64 dims[rank], f64 payload[prod(dims)].

inline constexpr char kContainerMagic[8] = {'M', 'T', 'A', 'G', 'P', 'A', 'R', 'M'};
inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct ParameterContainer {
    std::string manifest;
    std::vector<NamedTensor> entries;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}
inline std::uint64_t get_uint(std::istream& is, int bytes) {
    unsigned char b[8] = {};
    if (!is.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("parameter container: truncated input");
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
inline std::string get_bytes(std::istream& is, std::uint64_t n) {
    if (n > (std::uint64_t{1} << 32)) throw FormatError("parameter container: implausible length");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("parameter container: truncated input");
    return s;
}

}  // namespace detail

inline void write_container(std::ostream& os, std::string_view manifest, const ParameterSet& params) {
    os.write(kContainerMagic, sizeof kContainerMagic);
    detail::put_u32(os, kContainerVersion);
    detail::put_u64(os, manifest.size());
    os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
        for (auto d : p.value.shape()) detail::put_u64(os, d);
        for (double v : p.value.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
}

inline ParameterContainer read_container(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0)
        throw FormatError("parameter container: bad magic");
    const auto version = static_cast<std::uint32_t>(detail::get_uint(is, 4));
    if (version != kContainerVersion)
        throw FormatError("parameter container: unsupported version " + std::to_string(version));
    ParameterContainer out;
    out.manifest = detail::get_bytes(is, detail::get_uint(is, 8));
    const auto count = detail::get_uint(is, 4);
    for (std::uint64_t e = 0; e < count; ++e) {
        NamedTensor nt;
        nt.name = detail::get_bytes(is, detail::get_uint(is, 4));
        const auto rank = detail::get_uint(is, 4);
        if (rank == 0 || rank > 8) throw FormatError("parameter container: bad rank for " + nt.name);
        Shape shape;
        for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::size_t>(detail::get_uint(is, 8)));
        std::vector<double> data(shape_size(shape));
        for (double& v : data) v = std::bit_cast<double>(detail::get_uint(is, 8));
        nt.value = Tensor(std::move(shape), std::move(data));
        out.entries.push_back(std::move(nt));
    }
    return out;
}

/// Copies container entries into an existing set; names, order and shapes must agree.
inline void load_parameters(ParameterSet& params, const std::vector<NamedTensor>& entries) {
    if (entries.size() != params.size())
        throw FormatError("parameter container: expected " + std::to_string(params.size()) + " entries, found " +
                          std::to_string(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Parameter& p = params[i];
        if (entries[i].name != p.name)
            throw FormatError("parameter container: entry " + std::to_string(i) + " is " + entries[i].name +
                              ", expected " + p.name);
        if (entries[i].value.shape() != p.value.shape())
            throw FormatError("parameter container: shape mismatch for " + p.name);
        p.value = entries[i].value;
    }
}

}  // namespace morphtag
