#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rlm/errors.hpp"

namespace rlm {

using Real = double;
using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("shape dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// Persistent trainable buffer. Lives outside any tape; a fresh leaf is bound
// to it each BPTT segment and backward() accumulates into `grad`.
struct Param {
    std::string name;
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;

    Param() = default;
    Param(std::string n, Shape s, std::vector<Real> v)
        : name(std::move(n)), shape(std::move(s)), value(std::move(v)) {
        if (numel(shape) != value.size())
            throw ShapeError("param " + name + ": shape " + shape_str(shape) +
                             " does not match " + std::to_string(value.size()) + " values");
        grad.assign(value.size(), 0.0);
    }

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

// Lightweight handle to a node on a tape. Copying a Tensor copies the handle,
// not the data; values live on the tape for the lifetime of the segment.
class Tensor {
public:
    Tensor() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const;
    int node() const { return node_; }

    const Shape& shape() const;
    std::size_t size() const;
    std::span<const Real> values() const;
    std::span<const Real> grad() const;  // empty until backward reaches this node
    bool has_grad() const;
    bool requires_grad() const;

    Real scalar() const {
        if (size() != 1) throw ValueError("scalar() on tensor of size " + std::to_string(size()));
        return values()[0];
    }

    // Copy of the forward values, free of any tape reference.
    std::vector<Real> detached() const {
        auto v = values();
        return std::vector<Real>(v.begin(), v.end());
    }

private:
    friend class Tape;
    Tensor(Tape* t, int n) : tape_(t), node_(n) {}
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Define-by-run gradient tape. Records one node per operation in execution
// order (which is therefore topological) and replays backward rules in
// reverse. A tape covers exactly one BPTT segment; it is discarded afterwards.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // When enabled every forward op asserts its outputs are finite.
    void set_finite_checks(bool on) { finite_checks_ = on; }
    bool finite_checks() const { return finite_checks_; }

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t last_backward_visits() const { return last_visits_; }

    Tensor tensor(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        return push("leaf", std::move(shape), std::move(values), {}, nullptr, requires_grad);
    }

    Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<Real> v(numel(shape), 0.0);
        return push("leaf", std::move(shape), std::move(v), {}, nullptr, requires_grad);
    }

    // Leaf bound to a persistent parameter: forward reads p.value, backward
    // accumulates into p.grad.
    Tensor bind(Param& p) {
        if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
        Tensor t = push("param", p.shape, p.value, {}, nullptr, true);
        nodes_[t.node()].grad_sink = &p.grad;
        return t;
    }

    Tensor push(const char* op, Shape shape, std::vector<Real> values,
                std::vector<int> inputs, BackwardFn backward, bool requires_grad = false) {
        const int id = static_cast<int>(nodes_.size());
        bool req = requires_grad;
        for (int in : inputs) {
            if (in < 0 || in >= id)
                throw ValueError(std::string(op) + ": input node does not precede output");
            req = req || nodes_[in].requires_grad;
        }
        if (finite_checks_) {
            for (Real v : values)
                if (!std::isfinite(v))
                    throw NumericError(std::string("non-finite value produced by ") + op);
        }
        Node n;
        n.op = op;
        n.shape = std::move(shape);
        n.values = std::move(values);
        n.inputs = std::move(inputs);
        n.backward = std::move(backward);
        n.requires_grad = req;
        nodes_.push_back(std::move(n));
        return Tensor(this, id);
    }

    // Reverse sweep from a scalar loss. Each reachable node's rule runs once;
    // results are accumulated (+=) into node.grad and any bound Param::grad,
    // so repeated calls without zeroing add up.
    void backward(const Tensor& loss) {
        if (!loss.valid() || &loss.tape() != this)
            throw ValueError("backward: loss is not on this tape");
        if (loss.size() != 1)
            throw ValueError("backward: loss must be a scalar, got shape " +
                             shape_str(loss.shape()));
        sweep_.assign(nodes_.size(), {});
        sweep_buffer(loss.node())[0] = 1.0;
        last_visits_ = 0;
        for (int i = loss.node(); i >= 0; --i) {
            if (sweep_[i].empty()) continue;
            if (nodes_[i].backward) {
                nodes_[i].backward(*this, i);
                ++last_visits_;
            }
        }
        for (int i = 0; i <= loss.node(); ++i) {
            if (sweep_[i].empty() || !nodes_[i].requires_grad) continue;
            Node& n = nodes_[i];
            if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
            for (std::size_t k = 0; k < n.grad.size(); ++k) n.grad[k] += sweep_[i][k];
            if (n.grad_sink) {
                for (std::size_t k = 0; k < n.grad.size(); ++k) (*n.grad_sink)[k] += sweep_[i][k];
            }
        }
        sweep_.clear();
    }

    // --- accessors used by backward rules -----------------------------------
    bool needs_grad(int id) const { return nodes_[id].requires_grad; }
    const Shape& shape_of(int id) const { return nodes_[id].shape; }
    std::span<const Real> values_of(int id) const { return nodes_[id].values; }
    std::span<const Real> grad_out(int id) const { return sweep_[id]; }
    std::vector<Real>& grad_in(int id) { return sweep_buffer(id); }

private:
    friend class Tensor;

    struct Node {
        const char* op = "leaf";
        Shape shape;
        std::vector<Real> values;
        std::vector<Real> grad;  // persistent, accumulated across backward() calls
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        std::vector<Real>* grad_sink = nullptr;
    };

    std::vector<Real>& sweep_buffer(int id) {
        if (sweep_[id].empty()) sweep_[id].assign(nodes_[id].values.size(), 0.0);
        return sweep_[id];
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<Real>> sweep_;
    std::size_t last_visits_ = 0;
    bool finite_checks_ = false;
};

inline Tape& Tensor::tape() const {
    if (!tape_) throw ValueError("tensor has no tape");
    return *tape_;
}
inline const Shape& Tensor::shape() const { return tape().shape_of(node_); }
inline std::size_t Tensor::size() const { return tape().values_of(node_).size(); }
inline std::span<const Real> Tensor::values() const { return tape().values_of(node_); }
inline bool Tensor::requires_grad() const { return tape().needs_grad(node_); }
inline std::span<const Real> Tensor::grad() const { return tape_->nodes_[node_].grad; }
inline bool Tensor::has_grad() const { return !tape_->nodes_[node_].grad.empty(); }

namespace detail {

inline Tape& same_tape(const Tensor& a, const Tensor& b) {
    if (&a.tape() != &b.tape()) throw ValueError("operands live on different tapes");
    return a.tape();
}

inline bool is_scalar(const Tensor& t) { return t.size() == 1; }

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

inline ConstMatMap mat(std::span<const Real> v, int rows, int cols) {
    return ConstMatMap(v.data(), rows, cols);
}
inline MatMap mat(std::vector<Real>& v, int rows, int cols) {
    return MatMap(v.data(), rows, cols);
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly; the only broadcasting is
// a 1-element tensor against any shape.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    Tape& tp = same_tape(a, b);
    const bool a_scalar = is_scalar(a) && b.size() != 1;
    const bool b_scalar = is_scalar(b) && a.size() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const Tensor& big = a_scalar ? b : a;
    auto av = a.values();
    auto bv = b.values();
    std::vector<Real> out(big.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    const int an = a.node(), bn = b.node();
    return tp.push(name, big.shape(), std::move(out), {an, bn},
        [an, bn, a_scalar, b_scalar, bwd](Tape& t, int self) {
            auto go = t.grad_out(self);
            auto av2 = t.values_of(an);
            auto bv2 = t.values_of(bn);
            const bool need_a = t.needs_grad(an);
            const bool need_b = t.needs_grad(bn);
            if (!need_a && !need_b) return;
            std::vector<Real>* ga = need_a ? &t.grad_in(an) : nullptr;
            std::vector<Real>* gb = need_b ? &t.grad_in(bn) : nullptr;
            for (std::size_t i = 0; i < go.size(); ++i) {
                auto [da, db] = bwd(av2[a_scalar ? 0 : i], bv2[b_scalar ? 0 : i]);
                if (ga) (*ga)[a_scalar ? 0 : i] += go[i] * da;
                if (gb) (*gb)[b_scalar ? 0 : i] += go[i] * db;
            }
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op("add", a, b,
        [](Real x, Real y) { return x + y; },
        [](Real, Real) { return std::pair<Real, Real>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op("sub", a, b,
        [](Real x, Real y) { return x - y; },
        [](Real, Real) { return std::pair<Real, Real>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op("mul", a, b,
        [](Real x, Real y) { return x * y; },
        [](Real x, Real y) { return std::pair<Real, Real>{y, x}; });
}

// Multiply by a compile-time constant (not differentiable w.r.t. the constant).
inline Tensor scale(const Tensor& x, Real c) {
    std::vector<Real> out(x.detached());
    for (Real& v : out) v *= c;
    const int xn = x.node();
    return x.tape().push("scale", x.shape(), std::move(out), {xn},
        [xn, c](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            auto go = t.grad_out(self);
            auto& gx = t.grad_in(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
        });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
    auto xv = x.values();
    std::vector<Real> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    const int xn = x.node();
    return x.tape().push(name, x.shape(), std::move(out), {xn},
        [xn, bwd](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            auto go = t.grad_out(self);
            auto xv2 = t.values_of(xn);
            auto yv = t.values_of(self);
            auto& gx = t.grad_in(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * bwd(xv2[i], yv[i]);
        });
}

inline Real stable_sigmoid(Real x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const Real e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op("sigmoid", x,
        [](Real v) { return detail::stable_sigmoid(v); },
        [](Real, Real y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary_op("tanh", x,
        [](Real v) { return std::tanh(v); },
        [](Real, Real y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_op("exp", x,
        [](Real v) { return std::exp(v); },
        [](Real, Real y) { return y; });
}

inline Tensor log(const Tensor& x) {
    for (Real v : x.values())
        if (!(v > 0.0)) throw ValueError("log: input must be strictly positive");
    return detail::unary_op("log", x,
        [](Real v) { return std::log(v); },
        [](Real v, Real) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    Tape& tp = detail::same_tape(a, b);
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    std::vector<Real> out(static_cast<std::size_t>(m) * n);
    detail::mat(out, m, n).noalias() = detail::mat(a.values(), m, k) * detail::mat(b.values(), k, n);
    const int an = a.node(), bn = b.node();
    return tp.push("matmul", {m, n}, std::move(out), {an, bn},
        [an, bn, m, k, n](Tape& t, int self) {
            auto go = t.grad_out(self);
            auto gc = detail::mat(go, m, n);
            if (t.needs_grad(an)) {
                auto bv = detail::mat(t.values_of(bn), k, n);
                detail::mat(t.grad_in(an), m, k).noalias() += gc * bv.transpose();
            }
            if (t.needs_grad(bn)) {
                auto av = detail::mat(t.values_of(an), m, k);
                detail::mat(t.grad_in(bn), k, n).noalias() += av.transpose() * gc;
            }
        });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_matrix(x, "transpose");
    const int m = x.shape()[0], n = x.shape()[1];
    std::vector<Real> out(x.size());
    detail::mat(out, n, m) = detail::mat(x.values(), m, n).transpose();
    const int xn = x.node();
    return x.tape().push("transpose", {n, m}, std::move(out), {xn},
        [xn, m, n](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            auto go = detail::mat(t.grad_out(self), n, m);
            detail::mat(t.grad_in(xn), m, n) += go.transpose();
        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    const int xn = x.node();
    return x.tape().push("reshape", std::move(shape), x.detached(), {xn},
        [xn](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            auto go = t.grad_out(self);
            auto& gx = t.grad_in(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
}

// Columns [c0, c1) of a matrix.
inline Tensor col_slice(const Tensor& x, int c0, int c1) {
    detail::require_matrix(x, "col_slice");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (c0 < 0 || c1 <= c0 || c1 > cols)
        throw ShapeError("col_slice: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") outside " + shape_str(x.shape()));
    const int w = c1 - c0;
    auto xv = x.values();
    std::vector<Real> out(static_cast<std::size_t>(rows) * w);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
            out[static_cast<std::size_t>(r) * w + c] = xv[static_cast<std::size_t>(r) * cols + c0 + c];
    const int xn = x.node();
    return x.tape().push("col_slice", {rows, w}, std::move(out), {xn},
        [xn, rows, cols, c0, w](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            auto go = t.grad_out(self);
            auto& gx = t.grad_in(xn);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    gx[static_cast<std::size_t>(r) * cols + c0 + c] +=
                        go[static_cast<std::size_t>(r) * w + c];
        });
}

// Timestep t of a [T,B,H] sequence tensor, as a [B,H] matrix.
inline Tensor time_slice(const Tensor& x, int t) {
    if (x.shape().size() != 3)
        throw ShapeError("time_slice: expected [T,B,H], got " + shape_str(x.shape()));
    const int T = x.shape()[0], B = x.shape()[1], H = x.shape()[2];
    if (t < 0 || t >= T) throw ShapeError("time_slice: t=" + std::to_string(t) + " out of range");
    const std::size_t block = static_cast<std::size_t>(B) * H;
    auto xv = x.values();
    std::vector<Real> out(xv.begin() + static_cast<std::ptrdiff_t>(t * block),
                          xv.begin() + static_cast<std::ptrdiff_t>((t + 1) * block));
    const int xn = x.node();
    return x.tape().push("time_slice", {B, H}, std::move(out), {xn},
        [xn, t, block](Tape& tp, int self) {
            if (!tp.needs_grad(xn)) return;
            auto go = tp.grad_out(self);
            auto& gx = tp.grad_in(xn);
            for (std::size_t i = 0; i < block; ++i) gx[t * block + i] += go[i];
        });
}

// Stack T per-timestep [B,H] matrices into a [T,B,H] sequence.
inline Tensor stack_steps(std::span<const Tensor> steps) {
    if (steps.empty()) throw ShapeError("stack_steps: empty input");
    Tape& tp = steps[0].tape();
    const Shape& s0 = steps[0].shape();
    if (s0.size() != 2) throw ShapeError("stack_steps: expected [B,H] steps");
    const int B = s0[0], H = s0[1];
    const std::size_t block = static_cast<std::size_t>(B) * H;
    std::vector<Real> out;
    out.reserve(block * steps.size());
    std::vector<int> inputs;
    inputs.reserve(steps.size());
    for (const Tensor& st : steps) {
        if (&st.tape() != &tp) throw ValueError("stack_steps: operands on different tapes");
        if (st.shape() != s0)
            throw ShapeError("stack_steps: inconsistent step shapes " + shape_str(st.shape()));
        auto v = st.values();
        out.insert(out.end(), v.begin(), v.end());
        inputs.push_back(st.node());
    }
    const int T = static_cast<int>(steps.size());
    std::vector<int> ins = inputs;
    return tp.push("stack_steps", {T, B, H}, std::move(out), std::move(inputs),
        [ins, block](Tape& t, int self) {
            auto go = t.grad_out(self);
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (!t.needs_grad(ins[k])) continue;
                auto& g = t.grad_in(ins[k]);
                for (std::size_t i = 0; i < block; ++i) g[i] += go[k * block + i];
            }
        });
}

// out[t] = x[t] - x[t+1] over the leading (time) dimension of [T,B,H].
inline Tensor temporal_diff(const Tensor& x) {
    if (x.shape().size() != 3)
        throw ShapeError("temporal_diff: expected [T,B,H], got " + shape_str(x.shape()));
    const int T = x.shape()[0], B = x.shape()[1], H = x.shape()[2];
    if (T < 2) throw ShapeError("temporal_diff: needs at least two timesteps");
    const std::size_t block = static_cast<std::size_t>(B) * H;
    auto xv = x.values();
    std::vector<Real> out(block * (T - 1));
    for (int t = 0; t + 1 < T; ++t)
        for (std::size_t i = 0; i < block; ++i)
            out[t * block + i] = xv[t * block + i] - xv[(t + 1) * block + i];
    const int xn = x.node();
    return x.tape().push("temporal_diff", {T - 1, B, H}, std::move(out), {xn},
        [xn, T, block](Tape& tp, int self) {
            if (!tp.needs_grad(xn)) return;
            auto go = tp.grad_out(self);
            auto& gx = tp.grad_in(xn);
            for (int t = 0; t + 1 < T; ++t)
                for (std::size_t i = 0; i < block; ++i) {
                    gx[t * block + i] += go[t * block + i];
                    gx[(t + 1) * block + i] -= go[t * block + i];
                }
        });
}

// x[i,j] + bias[j] for every row i.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_matrix(x, "add_row_bias");
    Tape& tp = detail::same_tape(x, bias);
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (bias.shape().size() != 1 || bias.shape()[0] != cols)
        throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " does not match row width " + std::to_string(cols));
    auto xv = x.values();
    auto bv = bias.values();
    std::vector<Real> out(xv.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<std::size_t>(r) * cols + c] =
                xv[static_cast<std::size_t>(r) * cols + c] + bv[c];
    const int xn = x.node(), bn = bias.node();
    return tp.push("add_row_bias", {rows, cols}, std::move(out), {xn, bn},
        [xn, bn, rows, cols](Tape& t, int self) {
            auto go = t.grad_out(self);
            if (t.needs_grad(xn)) {
                auto& gx = t.grad_in(xn);
                for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (t.needs_grad(bn)) {
                auto& gb = t.grad_in(bn);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        gb[c] += go[static_cast<std::size_t>(r) * cols + c];
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    Real s = 0.0;
    for (Real v : x.values()) s += v;
    const int xn = x.node();
    return x.tape().push("sum", {1}, {s}, {xn},
        [xn](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            const Real go = t.grad_out(self)[0];
            auto& gx = t.grad_in(xn);
            for (Real& g : gx) g += go;
        });
}

// Euclidean norm of the whole tensor. The gradient at exactly x = 0 is
// defined to be 0 (subgradient choice), so fully-dropped rows are safe.
inline Tensor l2_norm(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("l2_norm: empty tensor");
    Real sq = 0.0;
    for (Real v : x.values()) sq += v * v;
    const Real norm = std::sqrt(sq);
    const int xn = x.node();
    return x.tape().push("l2_norm", {1}, {norm}, {xn},
        [xn, norm](Tape& t, int self) {
            if (!t.needs_grad(xn) || norm == 0.0) return;
            const Real go = t.grad_out(self)[0];
            auto xv = t.values_of(xn);
            auto& gx = t.grad_in(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go * xv[i] / norm;
        });
}

// Mean over the rows of a [N,M] matrix of each row's Euclidean norm.
// Zero rows contribute zero gradient, as in l2_norm.
inline Tensor mean_row_l2(const Tensor& x) {
    detail::require_matrix(x, "mean_row_l2");
    const int rows = x.shape()[0], cols = x.shape()[1];
    auto xv = x.values();
    auto norms = std::make_shared<std::vector<Real>>(rows);
    Real total = 0.0;
    for (int r = 0; r < rows; ++r) {
        Real sq = 0.0;
        for (int c = 0; c < cols; ++c) {
            const Real v = xv[static_cast<std::size_t>(r) * cols + c];
            sq += v * v;
        }
        (*norms)[r] = std::sqrt(sq);
        total += (*norms)[r];
    }
    const Real mean = total / rows;
    const int xn = x.node();
    return x.tape().push("mean_row_l2", {1}, {mean}, {xn},
        [xn, rows, cols, norms](Tape& t, int self) {
            if (!t.needs_grad(xn)) return;
            const Real go = t.grad_out(self)[0];
            auto xv2 = t.values_of(xn);
            auto& gx = t.grad_in(xn);
            for (int r = 0; r < rows; ++r) {
                const Real n = (*norms)[r];
                if (n == 0.0) continue;
                const Real f = go / (n * rows);
                for (int c = 0; c < cols; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    gx[i] += f * xv2[i];
                }
            }
        });
}

// Row-wise softmax with max subtraction; exposed so tests can probe the
// distribution cross_entropy uses internally.
inline std::vector<Real> softmax_rows(std::span<const Real> logits, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != logits.size())
        throw ShapeError("softmax_rows: size mismatch");
    std::vector<Real> out(logits.size());
    for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        Real mx = logits[off];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, logits[off + c]);
        Real denom = 0.0;
        for (int c = 0; c < cols; ++c) {
            out[off + c] = std::exp(logits[off + c] - mx);
            denom += out[off + c];
        }
        for (int c = 0; c < cols; ++c) out[off + c] /= denom;
    }
    return out;
}

// Mean negative log softmax probability of the target in each row.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    detail::require_matrix(logits, "cross_entropy");
    const int n = logits.shape()[0], V = logits.shape()[1];
    if (static_cast<std::size_t>(n) != targets.size())
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    if (n < 1) throw ShapeError("cross_entropy: needs at least one row");
    for (int t : targets)
        if (t < 0 || t >= V)
            throw ValueError("cross_entropy: target id " + std::to_string(t) +
                             " out of range [0," + std::to_string(V) + ")");
    auto lv = logits.values();
    auto probs = std::make_shared<std::vector<Real>>(softmax_rows(lv, n, V));
    Real loss = 0.0;
    for (int r = 0; r < n; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * V;
        Real mx = lv[off];
        for (int c = 1; c < V; ++c) mx = std::max(mx, lv[off + c]);
        Real denom = 0.0;
        for (int c = 0; c < V; ++c) denom += std::exp(lv[off + c] - mx);
        loss += mx + std::log(denom) - lv[off + targets[r]];
    }
    loss /= n;
    auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    const int ln = logits.node();
    return logits.tape().push("cross_entropy", {1}, {loss}, {ln},
        [ln, n, V, probs, tgt](Tape& t, int self) {
            if (!t.needs_grad(ln)) return;
            const Real go = t.grad_out(self)[0] / n;
            auto& gl = t.grad_in(ln);
            for (int r = 0; r < n; ++r) {
                const std::size_t off = static_cast<std::size_t>(r) * V;
                for (int c = 0; c < V; ++c) gl[off + c] += go * (*probs)[off + c];
                gl[off + (*tgt)[r]] -= go;
            }
        });
}

// Gather rows of a [V,H] table by id; ids laid out row-major as [T,B].
// Backward scatters only into rows that actually appear.
inline Tensor embedding_lookup(const Tensor& weights, std::span<const int> ids, int T, int B) {
    detail::require_matrix(weights, "embedding_lookup");
    const int V = weights.shape()[0], H = weights.shape()[1];
    if (static_cast<std::size_t>(T) * B != ids.size())
        throw ShapeError("embedding_lookup: id count mismatch");
    for (int id : ids)
        if (id < 0 || id >= V)
            throw ValueError("embedding_lookup: id " + std::to_string(id) +
                             " out of range [0," + std::to_string(V) + ")");
    auto wv = weights.values();
    std::vector<Real> out(ids.size() * H);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(wv.begin() + static_cast<std::ptrdiff_t>(ids[i]) * H, H,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * H);
    auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
    const int wn = weights.node();
    return weights.tape().push("embedding_lookup", {T, B, H}, std::move(out), {wn},
        [wn, H, idv](Tape& t, int self) {
            if (!t.needs_grad(wn)) return;
            auto go = t.grad_out(self);
            auto& gw = t.grad_in(wn);
            for (std::size_t i = 0; i < idv->size(); ++i) {
                const std::size_t src = i * H;
                const std::size_t dst = static_cast<std::size_t>((*idv)[i]) * H;
                for (int h = 0; h < H; ++h) gw[dst + h] += go[src + h];
            }
        });
}

}  // namespace rlm
