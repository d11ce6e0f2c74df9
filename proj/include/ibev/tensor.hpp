#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
// The scalar type is a template parameter: training code instantiates float,
// gradient checks and oracles instantiate double. A Tensor is an immutable
// value after construction; only gradient buffers accumulate. Every op
// validates that its output is finite and aborts with the op name otherwise.

#include <algorithm>
#include <cassert>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ibev/common.hpp"

namespace ibev {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline Shape shape_strides(const Shape& s) {
    Shape st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

template <class T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        bool is_leaf = true;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {}, true);
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.node_->value) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor normal(Shape shape, T mean, T stddev, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.node_->value) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    // Low-level constructor for ops. `backward` receives the output node and
    // must accumulate into parent gradients through the captured handles.
    static Tensor create(const char* op, Shape shape, std::vector<T> value,
                         const std::vector<Tensor>& parents,
                         std::function<void(Node&)> backward) {
        if (shape_numel(shape) != static_cast<int64_t>(value.size()))
            throw ShapeError(std::string(op) + ": bad output buffer");
        check_finite(op, value);
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(value);
        t.node_->is_leaf = false;
        t.node_->op = op;
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        if (needs) {
            t.node_->requires_grad = true;
            t.node_->parents.reserve(parents.size());
            for (const auto& p : parents) t.node_->parents.push_back(p.node_);
            t.node_->backward = std::move(backward);
        }
        return t;
    }

    static void check_finite(const char* op, const std::vector<T>& v) {
        double acc = 0.0;
        for (const T x : v) acc += std::fabs(static_cast<double>(x));
        if (!std::isfinite(acc))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t rank() const { return node_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    const char* op() const { return node_->op; }

    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& mutable_data() { return node_->value; }  // leaf updates only

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool rg = true) {
        if (!node_->is_leaf) throw ConfigError("set_requires_grad: not a leaf tensor");
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::vector<T>& grad() {
        ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const { return node_->grad; }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar");
        return node_->value[0];
    }

    T at(std::initializer_list<int64_t> idx) const {
        const Shape st = shape_strides(node_->shape);
        int64_t flat = 0;
        size_t i = 0;
        for (int64_t k : idx) flat += k * st[i++];
        return node_->value[static_cast<size_t>(flat)];
    }

    // Reverse pass from a scalar output. Interior gradients are reset per
    // call; leaf gradients accumulate across calls until zero_grad().
    void backward() const {
        if (numel() != 1) throw NumericError("backward: output must be scalar");
        if (!node_->requires_grad) return;
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        topo(node_.get(), seen, order);
        for (Node* n : order) {
            if (!n->is_leaf)
                n->grad.assign(n->value.size(), T(0));
            else if (n->requires_grad && n->grad.empty())
                n->grad.assign(n->value.size(), T(0));
        }
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward) n->backward(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    static Tensor from_data(Shape shape, std::vector<T> data, bool fill_zero) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        const int64_t n = shape_numel(shape);
        t.node_->shape = std::move(shape);
        if (fill_zero)
            t.node_->value.assign(static_cast<size_t>(n), T(0));
        else
            t.node_->value = std::move(data);
        return t;
    }

    static void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
        // Iterative post-order DFS; graphs can be deep at training scale.
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n, 0);
        seen.insert(n);
        while (!stack.empty()) {
            auto& [cur, next] = stack.back();
            if (next < cur->parents.size()) {
                Node* p = cur->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

// Accumulate src (possibly broadcast from bshape to oshape) into dst.
// Broadcasting aligns trailing dimensions; extent-1 axes expand.
inline bool broadcast_shapes(const Shape& a, const Shape& b, Shape& out) {
    const size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    for (size_t i = 0; i < r; ++i) {
        const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) return false;
        out[i] = std::max(da, db);
    }
    return true;
}

// Strides of `s` when iterated with output shape `o` (0 on broadcast axes).
inline Shape broadcast_strides(const Shape& s, const Shape& o) {
    Shape st = shape_strides(s);
    Shape r(o.size(), 0);
    const size_t off = o.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i) r[off + i] = (s[i] == 1 && o[off + i] != 1) ? 0 : st[i];
    return r;
}

template <class T, class F>
void for_each_broadcast(const Shape& oshape, const Shape& astr, const Shape& bstr, F&& f) {
    const int64_t n = shape_numel(oshape);
    const size_t r = oshape.size();
    Shape idx(r, 0);
    int64_t ai = 0, bi = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        f(flat, ai, bi);
        for (size_t d = r; d-- > 0;) {
            if (++idx[d] < oshape[d]) {
                ai += astr[d];
                bi += bstr[d];
                break;
            }
            ai -= astr[d] * (oshape[d] - 1);
            bi -= bstr[d] * (oshape[d] - 1);
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-aligned broadcasting.
// ---------------------------------------------------------------------------

template <class T, class Fwd, class BwdA, class BwdB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                    BwdA bwd_a, BwdB bwd_b) {
    Shape oshape;
    if (!detail::broadcast_shapes(a.shape(), b.shape(), oshape))
        throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(a.shape()) +
                         " with " + shape_str(b.shape()));
    const int64_t n = shape_numel(oshape);
    std::vector<T> out(static_cast<size_t>(n));
    const auto& av = a.data();
    const auto& bv = b.data();

    const bool same = a.shape() == b.shape();
    bool suffix_b = false;
    if (!same && oshape == a.shape() && b.shape().size() <= oshape.size()) {
        suffix_b = true;
        const size_t off = oshape.size() - b.shape().size();
        for (size_t i = 0; i < b.shape().size(); ++i)
            if (b.shape()[i] != oshape[off + i]) suffix_b = false;
    }

    if (same) {
        parallel_for(n, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) out[i] = fwd(av[i], bv[i]);
        });
    } else if (suffix_b) {
        const int64_t bn = b.numel();
        parallel_for(n, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) out[i] = fwd(av[i], bv[i % bn]);
        });
    } else {
        const Shape astr = detail::broadcast_strides(a.shape(), oshape);
        const Shape bstr = detail::broadcast_strides(b.shape(), oshape);
        detail::for_each_broadcast<T>(oshape, astr, bstr, [&](int64_t o, int64_t ai, int64_t bi) {
            out[o] = fwd(av[ai], bv[bi]);
        });
    }

    auto backward = [a, b, bwd_a, bwd_b, oshape, same](typename Tensor<T>::Node& node) {
        const auto& go = node.grad;
        const auto& av2 = a.data();
        const auto& bv2 = b.data();
        Tensor<T> am = a, bm = b;
        if (same) {
            const int64_t n2 = static_cast<int64_t>(go.size());
            if (a.requires_grad()) {
                auto& ga = am.grad();
                for (int64_t i = 0; i < n2; ++i)
                    ga[i] += go[i] * bwd_a(av2[i], bv2[i], node.value[i]);
            }
            if (b.requires_grad()) {
                auto& gb = bm.grad();
                for (int64_t i = 0; i < n2; ++i)
                    gb[i] += go[i] * bwd_b(av2[i], bv2[i], node.value[i]);
            }
            return;
        }
        const Shape astr = detail::broadcast_strides(a.shape(), oshape);
        const Shape bstr = detail::broadcast_strides(b.shape(), oshape);
        if (a.requires_grad()) {
            auto& ga = am.grad();
            detail::for_each_broadcast<T>(oshape, astr, bstr,
                                          [&](int64_t o, int64_t ai, int64_t bi) {
                                              ga[ai] += go[o] * bwd_a(av2[ai], bv2[bi], node.value[o]);
                                          });
        }
        if (b.requires_grad()) {
            auto& gb = bm.grad();
            detail::for_each_broadcast<T>(oshape, astr, bstr,
                                          [&](int64_t o, int64_t ai, int64_t bi) {
                                              gb[bi] += go[o] * bwd_b(av2[ai], bv2[bi], node.value[o]);
                                          });
        }
    };
    return Tensor<T>::create(name, oshape, std::move(out), {a, b}, std::move(backward));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    const int64_t n = x.numel();
    std::vector<T> out(static_cast<size_t>(n));
    const auto& xv = x.data();
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[i] = fwd(xv[i]);
    });
    auto backward = [x, bwd](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        const auto& xv2 = x.data();
        const int64_t n2 = static_cast<int64_t>(go.size());
        for (int64_t i = 0; i < n2; ++i) gx[i] += go[i] * bwd(xv2[i], node.value[i]);
    };
    return Tensor<T>::create(name, x.shape(), std::move(out), {x}, std::move(backward));
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op<T>(
        "sigmoid", x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh_op(const Tensor<T>& x) {
    return unary_op<T>(
        "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& x) {
    return unary_op<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log_op(const Tensor<T>& x) {
    return unary_op<T>(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
    return unary_op<T>(
        "sqrt", x, [](T v) { return std::sqrt(v); },
        [](T, T y) { return T(1) / (T(2) * y); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary_op<T>(
        "neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return unary_op<T>(
        "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return unary_op<T>(
        "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// Multiplies row r of a [n x c] tensor by the constant factor s[r].
// Factors are not differentiated (used for constant masks and view counts).
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const std::vector<T>& s) {
    if (x.rank() != 2 || static_cast<int64_t>(s.size()) != x.dim(0))
        throw ShapeError("scale_rows: need [n x c] input and n factors");
    const int64_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(static_cast<size_t>(n * c));
    const auto& xv = x.data();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * s[r];
    auto backward = [x, s, n, c](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < c; ++j) gx[r * c + j] += go[r * c + j] * s[r];
    };
    return Tensor<T>::create("scale_rows", x.shape(), std::move(out), {x}, std::move(backward));
}

// ---------------------------------------------------------------------------
// matmul: C[m x n] = A[m x k] * B[k x n]. Accumulation order over k is fixed
// per output element, so threaded row splits remain bitwise reproducible.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    count_macs(static_cast<uint64_t>(m) * n * k);
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* crow = out.data() + i * n;
            const T* arow = ap + i * k;
            for (int64_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* brow = bp + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
    auto backward = [a, b, m, k, n](typename Tensor<T>::Node& node) {
        const T* go = node.grad.data();
        // dA = dC * B^T
        if (a.requires_grad()) {
            Tensor<T> am = a;
            T* ga = am.grad().data();
            const T* bp2 = b.data().data();
            count_macs(static_cast<uint64_t>(m) * n * k);
            parallel_for(m, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = go + i * n;
                        const T* brow = bp2 + p * n;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            });
        }
        // dB = A^T * dC
        if (b.requires_grad()) {
            Tensor<T> bm = b;
            T* gb = bm.grad().data();
            const T* ap2 = a.data().data();
            count_macs(static_cast<uint64_t>(m) * n * k);
            parallel_for(k, [&](int64_t lo, int64_t hi) {
                for (int64_t p = lo; p < hi; ++p) {
                    T* grow = gb + p * n;
                    for (int64_t i = 0; i < m; ++i) {
                        const T av = ap2[i * k + p];
                        const T* gorow = go + i * n;
                        for (int64_t j = 0; j < n; ++j) grow[j] += av * gorow[j];
                    }
                }
            });
        }
    };
    return Tensor<T>::create("matmul", {m, n}, std::move(out), {a, b}, std::move(backward));
}

template <class T>
Tensor<T> transpose2(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose2: rank-2 tensor required");
    const int64_t m = x.dim(0), n = x.dim(1);
    std::vector<T> out(static_cast<size_t>(m * n));
    const auto& xv = x.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    auto backward = [x, m, n](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
    };
    return Tensor<T>::create("transpose2", {n, m}, std::move(out), {x}, std::move(backward));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    std::vector<T> out = x.data();
    auto backward = [x](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    };
    return Tensor<T>::create("reshape", std::move(shape), std::move(out), {x}, std::move(backward));
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute: rank mismatch");
    const Shape& s = x.shape();
    Shape oshape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) oshape[i] = s[perm[i]];
    const Shape xstr = shape_strides(s);
    Shape pstr(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) pstr[i] = xstr[perm[i]];

    const int64_t n = x.numel();
    std::vector<T> out(static_cast<size_t>(n));
    const auto& xv = x.data();
    Shape idx(perm.size(), 0);
    int64_t src = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        out[flat] = xv[src];
        for (size_t d = perm.size(); d-- > 0;) {
            if (++idx[d] < oshape[d]) {
                src += pstr[d];
                break;
            }
            src -= pstr[d] * (oshape[d] - 1);
            idx[d] = 0;
        }
    }
    auto backward = [x, oshape, pstr, n](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        Shape idx2(oshape.size(), 0);
        int64_t src2 = 0;
        for (int64_t flat = 0; flat < n; ++flat) {
            gx[src2] += go[flat];
            for (size_t d = oshape.size(); d-- > 0;) {
                if (++idx2[d] < oshape[d]) {
                    src2 += pstr[d];
                    break;
                }
                src2 -= pstr[d] * (oshape[d] - 1);
                idx2[d] = 0;
            }
        }
    };
    return Tensor<T>::create("permute", oshape, std::move(out), {x}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Reductions and softmax over an arbitrary axis.
// ---------------------------------------------------------------------------

namespace detail {
inline void axis_split(const Shape& s, size_t axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, size_t axis, bool keepdim = false) {
    if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range");
    int64_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    Shape oshape = x.shape();
    if (keepdim)
        oshape[axis] = 1;
    else
        oshape.erase(oshape.begin() + static_cast<int64_t>(axis));
    if (oshape.empty()) oshape = {1};
    std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
    const auto& xv = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l)
            for (int64_t i = 0; i < inner; ++i)
                out[o * inner + i] += xv[(o * len + l) * inner + i];
    auto backward = [x, outer, len, inner](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l)
                for (int64_t i = 0; i < inner; ++i)
                    gx[(o * len + l) * inner + i] += go[o * inner + i];
    };
    return Tensor<T>::create("sum_axis", oshape, std::move(out), {x}, std::move(backward));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    std::vector<T> out(1, T(0));
    for (const T v : x.data()) out[0] += v;
    auto backward = [x](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const T g = node.grad[0];
        for (auto& v : gx) v += g;
    };
    return Tensor<T>::create("sum_all", {1}, std::move(out), {x}, std::move(backward));
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    int64_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    std::vector<T> out(x.data().size());
    const auto& xv = x.data();
    // Shifted exponents are floored just above the underflow edge so outputs
    // stay strictly positive for arbitrarily spread logits.
    const T min_exp = std::is_same_v<T, float> ? T(-80) : T(-700);
    parallel_for(outer, [&](int64_t olo, int64_t ohi) {
        for (int64_t o = olo; o < ohi; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * len * inner + i;
                T mx = xv[base];
                for (int64_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
                T sum = T(0);
                for (int64_t l = 0; l < len; ++l) {
                    const T e = std::exp(std::max(xv[base + l * inner] - mx, min_exp));
                    out[base + l * inner] = e;
                    sum += e;
                }
                const T r = T(1) / sum;
                for (int64_t l = 0; l < len; ++l) out[base + l * inner] *= r;
            }
    });
    auto backward = [x, outer, len, inner](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        const auto& s = node.value;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * len * inner + i;
                T dot = T(0);
                for (int64_t l = 0; l < len; ++l) dot += go[base + l * inner] * s[base + l * inner];
                for (int64_t l = 0; l < len; ++l) {
                    const int64_t k = base + l * inner;
                    gx[k] += s[k] * (go[k] - dot);
                }
            }
    };
    return Tensor<T>::create("softmax", x.shape(), std::move(out), {x}, std::move(backward));
}

// Normalizes each row group over the last dimension to zero mean and unit
// variance (population variance, epsilon-guarded). LayerNorm affine terms,
// when wanted, are applied by the caller with mul/add.
template <class T>
Tensor<T> normalize_lastdim(const Tensor<T>& x, T eps) {
    const int64_t len = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / len;
    std::vector<T> out(x.data().size());
    std::vector<T> inv_sigma(static_cast<size_t>(rows));
    const auto& xv = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * len;
        T mu = T(0);
        for (int64_t i = 0; i < len; ++i) mu += row[i];
        mu /= static_cast<T>(len);
        T var = T(0);
        for (int64_t i = 0; i < len; ++i) {
            const T d = row[i] - mu;
            var += d * d;
        }
        var /= static_cast<T>(len);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (int64_t i = 0; i < len; ++i) out[r * len + i] = (row[i] - mu) * is;
    }
    auto backward = [x, rows, len, inv_sigma](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        const auto& y = node.value;
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t base = r * len;
            T gmean = T(0), gymean = T(0);
            for (int64_t i = 0; i < len; ++i) {
                gmean += go[base + i];
                gymean += go[base + i] * y[base + i];
            }
            gmean /= static_cast<T>(len);
            gymean /= static_cast<T>(len);
            const T is = inv_sigma[r];
            for (int64_t i = 0; i < len; ++i)
                gx[base + i] += is * (go[base + i] - gmean - y[base + i] * gymean);
        }
    };
    return Tensor<T>::create("normalize", x.shape(), std::move(out), {x}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Concatenation / slicing along an axis (used for attention head splits).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    Shape oshape = xs[0].shape();
    int64_t total = 0;
    for (const auto& t : xs) {
        if (t.rank() != oshape.size()) throw ShapeError("concat: rank mismatch");
        for (size_t d = 0; d < oshape.size(); ++d)
            if (d != axis && t.shape()[d] != oshape[d])
                throw ShapeError("concat: shape mismatch off-axis");
        total += t.shape()[axis];
    }
    oshape[axis] = total;
    int64_t outer, len, inner;
    detail::axis_split(oshape, axis, outer, len, inner);
    std::vector<T> out(static_cast<size_t>(shape_numel(oshape)));
    int64_t off = 0;
    for (const auto& t : xs) {
        const int64_t tl = t.shape()[axis];
        const auto& tv = t.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * len + off) * inner, tv.data() + o * tl * inner,
                        static_cast<size_t>(tl * inner) * sizeof(T));
        off += tl;
    }
    auto backward = [xs, outer, len, inner](typename Tensor<T>::Node& node) {
        const auto& go = node.grad;
        int64_t off2 = 0;
        for (const auto& t : xs) {
            const int64_t tl = t.numel() / (outer * inner);
            if (t.requires_grad()) {
                Tensor<T> tm = t;
                auto& gt = tm.grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t l = 0; l < tl; ++l)
                        for (int64_t i = 0; i < inner; ++i)
                            gt[(o * tl + l) * inner + i] += go[(o * len + off2 + l) * inner + i];
            }
            off2 += tl;
        }
    };
    return Tensor<T>::create("concat", oshape, std::move(out), xs, std::move(backward));
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, size_t axis, int64_t start, int64_t length) {
    if (axis >= x.rank() || start < 0 || start + length > x.shape()[axis])
        throw ShapeError("slice: range out of bounds");
    int64_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    Shape oshape = x.shape();
    oshape[axis] = length;
    std::vector<T> out(static_cast<size_t>(outer * length * inner));
    const auto& xv = x.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * length * inner, xv.data() + (o * len + start) * inner,
                    static_cast<size_t>(length * inner) * sizeof(T));
    auto backward = [x, outer, len, inner, start, length](typename Tensor<T>::Node& node) {
        if (!x.requires_grad()) return;
        Tensor<T> xm = x;
        auto& gx = xm.grad();
        const auto& go = node.grad;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < length; ++l)
                for (int64_t i = 0; i < inner; ++i)
                    gx[(o * len + start + l) * inner + i] += go[(o * length + l) * inner + i];
    };
    return Tensor<T>::create("slice", oshape, std::move(out), {x}, std::move(backward));
}

// x [.. x d_in] * W [d_in x d_out] + b. Leading dimensions are flattened.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    if (x.rank() < 1 || w.rank() != 2)
        throw ShapeError("linear: need input and rank-2 weight");
    const int64_t d_in = x.dim(x.rank() - 1);
    if (d_in != w.dim(0))
        throw ShapeError("linear: input feature dim " + std::to_string(d_in) +
                         " != weight rows " + std::to_string(w.dim(0)));
    const int64_t rows = x.numel() / d_in;
    Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {rows, d_in});
    Tensor<T> y = matmul(flat, w);
    if (b.defined()) {
        if (b.numel() != w.dim(1)) throw ShapeError("linear: bias length mismatch");
        y = add(y, b);
    }
    if (x.rank() != 2) {
        Shape oshape = x.shape();
        oshape.back() = w.dim(1);
        y = reshape(y, oshape);
    }
    return y;
}

// Utility: row-wise argmax of a [n x C] tensor (not differentiable).
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
    const int64_t n = x.dim(0), c = x.dim(1);
    std::vector<int> out(static_cast<size_t>(n));
    const auto& v = x.data();
    for (int64_t i = 0; i < n; ++i) {
        int best = 0;
        for (int64_t j = 1; j < c; ++j)
            if (v[i * c + j] > v[i * c + best]) best = static_cast<int>(j);
        out[i] = best;
    }
    return out;
}

}  // namespace ibev
