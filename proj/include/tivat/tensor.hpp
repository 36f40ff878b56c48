#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tivat/util.hpp"

namespace tivat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Toggled off during evaluation so forward passes skip graph recording.
inline bool& grad_recording_flag() {
    static bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// One recorded node of the computation graph. Leaves have no parents and no
// backward function; interior nodes keep shared ownership of their inputs so
// the graph stays alive until the last output handle is dropped.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated on first use, same length as data
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from_node(std::shared_ptr<TensorNode> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument(detail::msg(
                "tensor: shape ", shape_str(shape), " does not match data length ", data.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data() { return node_->data; }
    double item() const {
        if (size() != 1) {
            throw std::invalid_argument(detail::msg("item: tensor has ", size(), " elements"));
        }
        return node_->data[0];
    }

    double operator()(std::size_t i) const { return node_->data.at(i); }
    double operator()(std::size_t i, std::size_t j) const {
        return node_->data.at(i * node_->shape.at(1) + j);
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data.at((i * node_->shape.at(1) + j) * node_->shape.at(2) + k);
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    const std::vector<double>& grad() const { return node_->grad_buffer(); }
    void zero_grad() {
        auto& g = node_->grad_buffer();
        std::fill(g.begin(), g.end(), 0.0);
    }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw std::runtime_error(
                msg(op, ": produced non-finite value at flat index ", i));
        }
    }
}

inline Tensor op_result(const char* op, Shape shape, std::vector<double> data,
                        std::initializer_list<Tensor> inputs,
                        std::function<void(TensorNode&)> backward_fn) {
    check_finite(op, data);
    auto n = std::make_shared<TensorNode>();
    n->op = op;
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool tracked = false;
    if (grad_recording_flag()) {
        for (const Tensor& t : inputs) tracked = tracked || t.requires_grad();
    }
    if (tracked) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::from_node(std::move(n));
}

// Accumulate into a parent only when it participates in the gradient.
inline std::vector<double>* grad_of(const std::shared_ptr<TensorNode>& n) {
    return n->requires_grad ? &n->grad_buffer() : nullptr;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(msg(op, ": shape mismatch ", shape_str(a.shape()),
                                        " vs ", shape_str(b.shape())));
    }
}

// Decompose a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const char* op, const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        throw std::invalid_argument(
            msg(op, ": axis ", axis, " invalid for shape ", shape_str(s)));
    }
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::op_result("add", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (self.grad.empty()) return;
        if (auto* ga = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = detail::grad_of(bn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::op_result("sub", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (self.grad.empty()) return;
        if (auto* ga = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = detail::grad_of(bn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::op_result("mul", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (self.grad.empty()) return;
        if (auto* ga = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * bn->data[i];
        if (auto* gb = detail::grad_of(bn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += self.grad[i] * an->data[i];
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::op_result("scale", a.shape(), std::move(out), {a}, [an, c](TensorNode& self) {
        if (self.grad.empty()) return;
        if (auto* ga = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * c;
    });
}

// Rows of `x` scaled by the matching entry of the 1-D factor `s`.
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0)) {
        throw std::invalid_argument(detail::msg("scale_rows: incompatible shapes ",
                                                shape_str(x.shape()), " and ",
                                                shape_str(s.shape())));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x(i, j) * s(i);
    auto xn = x.node(), sn = s.node();
    return detail::op_result("scale_rows", x.shape(), std::move(out), {x, s},
                             [xn, sn, m, n](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn)) {
                                     for (std::size_t i = 0; i < m; ++i)
                                         for (std::size_t j = 0; j < n; ++j)
                                             (*gx)[i * n + j] += self.grad[i * n + j] * sn->data[i];
                                 }
                                 if (auto* gs = detail::grad_of(sn)) {
                                     for (std::size_t i = 0; i < m; ++i) {
                                         double acc = 0.0;
                                         for (std::size_t j = 0; j < n; ++j)
                                             acc += self.grad[i * n + j] * xn->data[i * n + j];
                                         (*gs)[i] += acc;
                                     }
                                 }
                             });
}

inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    auto xn = x.node();
    return detail::op_result("gelu", x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (self.grad.empty()) return;
        if (auto* gx = detail::grad_of(xn)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double v = xn->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                (*gx)[i] += self.grad[i] * (cdf + v * pdf);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument(detail::msg("matmul: dimension mismatch ",
                                                shape_str(a.shape()), " x ",
                                                shape_str(b.shape())));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ad[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = bd + kk * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return detail::op_result(
        "matmul", Shape{m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
            if (self.grad.empty()) return;
            if (auto* ga = detail::grad_of(an)) {
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += self.grad[i * n + j] * bn->data[kk * n + j];
                        (*ga)[i * k + kk] += acc;
                    }
            }
            if (auto* gb = detail::grad_of(bn)) {
                // dB = A^T * dC
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double av = an->data[i * k + kk];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            (*gb)[kk * n + j] += av * self.grad[i * n + j];
                    }
            }
        });
}

// y = x*W + b with x: m x k, W: k x n, b: n.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw std::invalid_argument(detail::msg("linear: input ", shape_str(x.shape()),
                                                " incompatible with weight ",
                                                shape_str(w.shape())));
    }
    if (b.rank() != 1 || b.dim(0) != w.dim(1)) {
        throw std::invalid_argument(detail::msg("linear: bias ", shape_str(b.shape()),
                                                " incompatible with weight ",
                                                shape_str(w.shape())));
    }
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    std::vector<double> out(m * n);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] = bd[j];
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double xv = xd[i * k + kk];
            if (xv == 0.0) continue;
            const double* wrow = wd + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::op_result(
        "linear", Shape{m, n}, std::move(out), {x, w, b}, [xn, wn, bn, m, k, n](TensorNode& self) {
            if (self.grad.empty()) return;
            if (auto* gx = detail::grad_of(xn)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += self.grad[i * n + j] * wn->data[kk * n + j];
                        (*gx)[i * k + kk] += acc;
                    }
            }
            if (auto* gw = detail::grad_of(wn)) {
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double xv = xn->data[i * k + kk];
                        if (xv == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            (*gw)[kk * n + j] += xv * self.grad[i * n + j];
                    }
            }
            if (auto* gb = detail::grad_of(bn)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*gb)[j] += self.grad[i * n + j];
            }
        });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    if (axes.size() != x.rank()) {
        throw std::invalid_argument(detail::msg("permute: got ", axes.size(),
                                                " axes for rank-", x.rank(), " tensor"));
    }
    std::vector<bool> used(x.rank(), false);
    Shape out_shape(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= x.rank() || used[axes[i]]) {
            throw std::invalid_argument("permute: axes must be a permutation");
        }
        used[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    const std::size_t r = x.rank(), total = x.size();
    std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];
    // flat index map: out -> in
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t in_flat = 0;
        for (std::size_t i = 0; i < r; ++i) in_flat += idx[i] * in_strides[axes[i]];
        map[o] = in_flat;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> out(total);
    for (std::size_t o = 0; o < total; ++o) out[o] = x.data()[map[o]];
    auto xn = x.node();
    return detail::op_result("permute", std::move(out_shape), std::move(out), {x},
                             [xn, map = std::move(map)](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn))
                                     for (std::size_t o = 0; o < self.grad.size(); ++o)
                                         (*gx)[map[o]] += self.grad[o];
                             });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) {
        throw std::invalid_argument(
            detail::msg("transpose: expected rank-2 tensor, got ", shape_str(x.shape())));
    }
    return permute(x, {1, 0});
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size()) {
        throw std::invalid_argument(detail::msg("reshape: ", shape_str(x.shape()),
                                                " has ", x.size(), " elements, target ",
                                                shape_str(new_shape), " has ",
                                                shape_numel(new_shape)));
    }
    auto xn = x.node();
    return detail::op_result("reshape", std::move(new_shape), x.data(), {x},
                             [xn](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn))
                                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                                         (*gx)[i] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto sp = detail::axis_split("softmax", x.shape(), axis);
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            double mx = x.data()[base];
            for (std::size_t i = 1; i < sp.n; ++i)
                mx = std::max(mx, x.data()[base + i * sp.inner]);
            double denom = 0.0;
            for (std::size_t i = 0; i < sp.n; ++i) {
                const double e = std::exp(x.data()[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= denom;
        }
    }
    auto xn = x.node();
    return detail::op_result(
        "softmax", x.shape(), std::move(out), {x}, [xn, sp](TensorNode& self) {
            if (self.grad.empty()) return;
            if (auto* gx = detail::grad_of(xn)) {
                // dx = y * (dy - sum(dy * y)) along the reduced axis
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    for (std::size_t in = 0; in < sp.inner; ++in) {
                        const std::size_t base = o * sp.n * sp.inner + in;
                        double dot = 0.0;
                        for (std::size_t i = 0; i < sp.n; ++i) {
                            const std::size_t p = base + i * sp.inner;
                            dot += self.grad[p] * self.data[p];
                        }
                        for (std::size_t i = 0; i < sp.n; ++i) {
                            const std::size_t p = base + i * sp.inner;
                            (*gx)[p] += self.data[p] * (self.grad[p] - dot);
                        }
                    }
                }
            }
        });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
    const auto sp = detail::axis_split("mean", x.shape(), axis);
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.n; ++i)
            for (std::size_t in = 0; in < sp.inner; ++in)
                out[o * sp.inner + in] += x.data()[(o * sp.n + i) * sp.inner + in];
    const double inv_n = 1.0 / static_cast<double>(sp.n);
    for (double& v : out) v *= inv_n;
    auto xn = x.node();
    return detail::op_result("mean", std::move(out_shape), std::move(out), {x},
                             [xn, sp, inv_n](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn)) {
                                     for (std::size_t o = 0; o < sp.outer; ++o)
                                         for (std::size_t i = 0; i < sp.n; ++i)
                                             for (std::size_t in = 0; in < sp.inner; ++in)
                                                 (*gx)[(o * sp.n + i) * sp.inner + in] +=
                                                     self.grad[o * sp.inner + in] * inv_n;
                                 }
                             });
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto xn = x.node();
    return detail::op_result("sum_all", Shape{1}, std::vector<double>{acc}, {x},
                             [xn](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn)) {
                                     const double g = self.grad[0];
                                     for (double& v : *gx) v += g;
                                 }
                             });
}

inline Tensor mean_all(const Tensor& x) {
    if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(x.size());
    auto xn = x.node();
    return detail::op_result("mean_all", Shape{1}, std::vector<double>{acc * inv_n}, {x},
                             [xn, inv_n](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn)) {
                                     const double g = self.grad[0] * inv_n;
                                     for (double& v : *gx) v += g;
                                 }
                             });
}

// Normalization over the last axis with learned gain/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw std::invalid_argument(detail::msg(
            "layer_norm: gamma/beta must be length-", d, " vectors"));
    }
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma(j) * h + beta(j);
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::op_result(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, rows, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](TensorNode& self) {
            if (self.grad.empty()) return;
            auto* gx = detail::grad_of(xn);
            auto* gg = detail::grad_of(gn);
            auto* gb = detail::grad_of(bn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* h = xhat.data() + r * d;
                if (gg)
                    for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * h[j];
                if (gb)
                    for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
                if (gx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gdy = dy[j] * gn->data[j];
                        m1 += gdy;
                        m2 += gdy * h[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gdy = dy[j] * gn->data[j];
                        (*gx)[r * d + j] += inv_std[r] * (gdy - m1 - h[j] * m2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Indexed and structural ops
// ---------------------------------------------------------------------------

// Rows along the leading axis, copied in index order; backward scatters
// gradients additively so duplicate indices accumulate.
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (x.rank() < 1) throw std::invalid_argument("gather: rank-0 input");
    const std::size_t rows = x.dim(0);
    const std::size_t row_len = x.size() / std::max<std::size_t>(rows, 1);
    for (std::size_t idx : indices) {
        if (idx >= rows) {
            throw std::out_of_range(
                detail::msg("gather: index ", idx, " out of range [0, ", rows, ")"));
        }
    }
    Shape out_shape = x.shape();
    out_shape[0] = indices.size();
    std::vector<double> out(indices.size() * row_len);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = x.data().data() + indices[i] * row_len;
        std::copy(src, src + row_len, out.data() + i * row_len);
    }
    auto xn = x.node();
    return detail::op_result("gather", std::move(out_shape), std::move(out), {x},
                             [xn, indices, row_len](TensorNode& self) {
                                 if (self.grad.empty()) return;
                                 if (auto* gx = detail::grad_of(xn)) {
                                     for (std::size_t i = 0; i < indices.size(); ++i) {
                                         double* dst = gx->data() + indices[i] * row_len;
                                         const double* g = self.grad.data() + i * row_len;
                                         for (std::size_t j = 0; j < row_len; ++j) dst[j] += g[j];
                                     }
                                 }
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) {
        throw std::invalid_argument(
            detail::msg("concat: axis ", axis, " invalid for shape ", shape_str(s0)));
    }
    std::size_t axis_total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != s0.size()) {
            throw std::invalid_argument("concat: rank mismatch between inputs");
        }
        for (std::size_t i = 0; i < s0.size(); ++i) {
            if (i != axis && t.dim(i) != s0[i]) {
                throw std::invalid_argument(detail::msg("concat: shape mismatch ",
                                                        shape_str(t.shape()), " vs ",
                                                        shape_str(s0)));
            }
        }
        axis_total += t.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;
    const auto sp = detail::axis_split("concat", out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> seg_lens(parts.size());
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const std::size_t np = parts[p].dim(axis);
        seg_lens[p] = np;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = parts[p].data().data() + o * np * sp.inner;
            double* dst = out.data() + (o * sp.n + off) * sp.inner;
            std::copy(src, src + np * sp.inner, dst);
        }
        off += np;
    }
    auto n = std::make_shared<TensorNode>();
    n->op = "concat";
    detail::check_finite("concat", out);
    n->shape = std::move(out_shape);
    n->data = std::move(out);
    bool tracked = false;
    if (grad_recording_flag()) {
        for (const Tensor& t : parts) tracked = tracked || t.requires_grad();
    }
    if (tracked) {
        n->requires_grad = true;
        std::vector<std::shared_ptr<TensorNode>> pn;
        pn.reserve(parts.size());
        for (const Tensor& t : parts) pn.push_back(t.node());
        n->parents = pn;
        n->backward_fn = [pn, sp, seg_lens](TensorNode& self) {
            if (self.grad.empty()) return;
            std::size_t seg_off = 0;
            for (std::size_t p = 0; p < pn.size(); ++p) {
                const std::size_t np = seg_lens[p];
                if (auto* gp = detail::grad_of(pn[p])) {
                    for (std::size_t o = 0; o < sp.outer; ++o) {
                        const double* g = self.grad.data() + (o * sp.n + seg_off) * sp.inner;
                        double* dst = gp->data() + o * np * sp.inner;
                        for (std::size_t j = 0; j < np * sp.inner; ++j) dst[j] += g[j];
                    }
                }
                seg_off += np;
            }
        };
    }
    return Tensor::from_node(std::move(n));
}

// Euclidean pairwise distance matrix between row sets a: m x d and b: n x d.
inline Tensor pairwise_distance(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw std::invalid_argument(detail::msg("pairwise_distance: incompatible shapes ",
                                                shape_str(a.shape()), " and ",
                                                shape_str(b.shape())));
    }
    const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
    std::vector<double> out(m * n);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < d; ++kk) {
                const double diff = ad[i * d + kk] - bd[j * d + kk];
                acc += diff * diff;
            }
            out[i * n + j] = std::sqrt(acc);
        }
    auto an = a.node(), bn = b.node();
    return detail::op_result(
        "pairwise_distance", Shape{m, n}, std::move(out), {a, b},
        [an, bn, m, n, d](TensorNode& self) {
            if (self.grad.empty()) return;
            auto* ga = detail::grad_of(an);
            auto* gb = detail::grad_of(bn);
            if (!ga && !gb) return;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double dist = self.data[i * n + j];
                    if (dist < 1e-12) continue;  // subgradient 0 at coincident points
                    const double g = self.grad[i * n + j] / dist;
                    for (std::size_t kk = 0; kk < d; ++kk) {
                        const double diff = an->data[i * d + kk] - bn->data[j * d + kk];
                        if (ga) (*ga)[i * d + kk] += g * diff;
                        if (gb) (*gb)[j * d + kk] -= g * diff;
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and walks the recorded graph once in reverse
// topological order, accumulating into every grad-requiring leaf it reaches.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument(
            detail::msg("backward: loss must be scalar, got ", shape_str(loss.shape())));
    }
    TensorNode* root = loss.node().get();
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    seen.insert(root);
    stack.push_back({root, 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace tivat
