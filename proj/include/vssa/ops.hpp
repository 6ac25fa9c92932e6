#pragma once

#include <algorithm>
#include <array>
#include <cstring>

#include "vssa/tensor.hpp"

namespace vssa {
namespace ops {

enum class Padding { Same, Valid };
enum class Orientation { Vertical, Horizontal };

namespace detail {

template <class T>
inline bool tracked(const Tape<T>* tp, std::initializer_list<const Tensor<T>*> ins) {
    if (!tp) return false;
    for (const Tensor<T>* t : ins) {
        if (t && t->node >= 0) return true;
    }
    return false;
}

inline void split_axis(const Shape& s, int axis, std::int64_t& outer, std::int64_t& mid, std::int64_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    mid = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tensor<T> y = Tensor<T>::zeros(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    debug_check_finite(y, "add");
    if (detail::tracked(tp, {&a, &b})) {
        const int na = a.node, nb = b.node;
        y.node = tp->add("add", {na, nb}, n, [na, nb, n](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                auto& ga = t.grad_buf(na);
                for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                for (std::int64_t i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> sub(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tensor<T> y = Tensor<T>::zeros(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    debug_check_finite(y, "sub");
    if (detail::tracked(tp, {&a, &b})) {
        const int na = a.node, nb = b.node;
        y.node = tp->add("sub", {na, nb}, n, [na, nb, n](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                auto& ga = t.grad_buf(na);
                for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                for (std::int64_t i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] -= g[static_cast<std::size_t>(i)];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tensor<T> y = Tensor<T>::zeros(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    debug_check_finite(y, "mul");
    if (detail::tracked(tp, {&a, &b})) {
        const int na = a.node, nb = b.node;
        auto da = a.data, db = b.data;
        y.node = tp->add("mul", {na, nb}, n, [na, nb, n, da, db](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                auto& ga = t.grad_buf(na);
                for (std::int64_t i = 0; i < n; ++i)
                    ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (*db)[static_cast<std::size_t>(i)];
            }
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                for (std::int64_t i = 0; i < n; ++i)
                    gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (*da)[static_cast<std::size_t>(i)];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> mul_scalar(Tape<T>* tp, const Tensor<T>& a, T c) {
    Tensor<T> y = Tensor<T>::zeros(a.shape);
    const T* pa = a.ptr();
    T* py = y.ptr();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * c;
    if (detail::tracked(tp, {&a})) {
        const int na = a.node;
        y.node = tp->add("mul_scalar", {na}, n, [na, n, c](Tape<T>& t, const std::vector<T>& g) {
            auto& ga = t.grad_buf(na);
            for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * c;
        });
    }
    return y;
}

// x: [..., N] treated as rows of length N; b: [N] added to each row.
template <class T>
Tensor<T> add_rowvec(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& b) {
    const std::int64_t nb = b.size();
    if (x.rank() < 1 || x.shape.back() != static_cast<int>(nb)) {
        throw std::invalid_argument("add_rowvec: last dim of " + shape_str(x.shape) + " must equal " +
                                    std::to_string(nb));
    }
    const std::int64_t rows = x.size() / nb;
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < nb; ++j) py[r * nb + j] = px[r * nb + j] + pb[j];
    debug_check_finite(y, "add_rowvec");
    if (detail::tracked(tp, {&x, &b})) {
        const int nx = x.node, nbn = b.node;
        y.node = tp->add("add_rowvec", {nx, nbn}, x.size(), [nx, nbn, rows, nb](Tape<T>& t, const std::vector<T>& g) {
            if (nx >= 0) {
                auto& gx = t.grad_buf(nx);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nbn >= 0) {
                auto& gb = t.grad_buf(nbn);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < nb; ++j)
                        gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * nb + j)];
            }
        });
    }
    return y;
}

// x: [M, N]; s: [M] or [M,1]; scales row i of x by s[i].
template <class T>
Tensor<T> scale_rows(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() != 2 || s.size() != x.dim(0)) {
        throw std::invalid_argument("scale_rows: need x [M,N] and s of length M, got " + shape_str(x.shape) +
                                    " and " + shape_str(s.shape));
    }
    const std::int64_t m = x.dim(0), n = x.dim(1);
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    const T* ps = s.ptr();
    T* py = y.ptr();
    for (std::int64_t i = 0; i < m; ++i) {
        const T sv = ps[i];
        for (std::int64_t j = 0; j < n; ++j) py[i * n + j] = px[i * n + j] * sv;
    }
    debug_check_finite(y, "scale_rows");
    if (detail::tracked(tp, {&x, &s})) {
        const int nx = x.node, ns = s.node;
        auto dx = x.data, ds = s.data;
        y.node = tp->add("scale_rows", {nx, ns}, x.size(), [nx, ns, m, n, dx, ds](Tape<T>& t, const std::vector<T>& g) {
            if (nx >= 0) {
                auto& gx = t.grad_buf(nx);
                for (std::int64_t i = 0; i < m; ++i) {
                    const T sv = (*ds)[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < n; ++j)
                        gx[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(i * n + j)] * sv;
                }
            }
            if (ns >= 0) {
                auto& gs = t.grad_buf(ns);
                for (std::int64_t i = 0; i < m; ++i) {
                    T acc = 0;
                    for (std::int64_t j = 0; j < n; ++j)
                        acc += g[static_cast<std::size_t>(i * n + j)] * (*dx)[static_cast<std::size_t>(i * n + j)];
                    gs[static_cast<std::size_t>(i)] += acc;
                }
            }
        });
    }
    return y;
}

// out = a @ b, a: [M,K], b: [K,N]
template <class T>
Tensor<T> matmul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> y = Tensor<T>::zeros({static_cast<int>(m), static_cast<int>(n)});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    for (std::int64_t i = 0; i < m; ++i) {
        T* yrow = py + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
    debug_check_finite(y, "matmul");
    if (detail::tracked(tp, {&a, &b})) {
        const int na = a.node, nb = b.node;
        auto da = a.data, db = b.data;
        y.node = tp->add("matmul", {na, nb}, m * n, [na, nb, m, k, n, da, db](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                auto& ga = t.grad_buf(na);
                const T* pb2 = db->data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        T acc = 0;
                        const T* brow = pb2 + kk * n;
                        const T* grow = g.data() + i * n;
                        for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<std::size_t>(i * k + kk)] += acc;
                    }
            }
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                const T* pa2 = da->data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        const T av = pa2[i * k + kk];
                        const T* grow = g.data() + i * n;
                        T* gbrow = gb.data() + kk * n;
                        for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
    }
    return y;
}

// out = a @ b^T, a: [M,K], b: [N,K]. Natural layout for row-major weights.
template <class T>
Tensor<T> matmul_nt(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape) + " x " +
                                    shape_str(b.shape) + "^T");
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> y = Tensor<T>::zeros({static_cast<int>(m), static_cast<int>(n)});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = pa + i * k;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = pb + j * k;
            T acc = 0;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            py[i * n + j] = acc;
        }
    }
    debug_check_finite(y, "matmul_nt");
    if (detail::tracked(tp, {&a, &b})) {
        const int na = a.node, nb = b.node;
        auto da = a.data, db = b.data;
        y.node = tp->add("matmul_nt", {na, nb}, m * n, [na, nb, m, k, n, da, db](Tape<T>& t, const std::vector<T>& g) {
            if (na >= 0) {
                auto& ga = t.grad_buf(na);
                const T* pb2 = db->data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const T gv = g[static_cast<std::size_t>(i * n + j)];
                        const T* brow = pb2 + j * k;
                        T* garow = ga.data() + i * k;
                        for (std::int64_t kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
                    }
            }
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                const T* pa2 = da->data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const T gv = g[static_cast<std::size_t>(i * n + j)];
                        const T* arow = pa2 + i * k;
                        T* gbrow = gb.data() + j * k;
                        for (std::int64_t kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
                    }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Activations / normalization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto dx = x.data;
        y.node = tp->add("relu", {nx}, n, [nx, n, dx](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < n; ++i)
                if ((*dx)[static_cast<std::size_t>(i)] > T(0)) gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        });
    }
    return y;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = T(1) / (T(1) + std::exp(-px[i]));
    debug_check_finite(y, "sigmoid");
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto dy = y.data;
        y.node = tp->add("sigmoid", {nx}, n, [nx, n, dy](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < n; ++i) {
                const T yv = (*dy)[static_cast<std::size_t>(i)];
                gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * yv * (T(1) - yv);
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> tanh_op(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) py[i] = std::tanh(px[i]);
    debug_check_finite(y, "tanh");
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto dy = y.data;
        y.node = tp->add("tanh", {nx}, n, [nx, n, dy](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < n; ++i) {
                const T yv = (*dy)[static_cast<std::size_t>(i)];
                gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (T(1) - yv * yv);
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> softmax(Tape<T>* tp, const Tensor<T>& x, int axis) {
    std::int64_t outer, mid, inner;
    detail::split_axis(x.shape, axis, outer, mid, inner);
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * mid * inner + in;
            T mx = px[base];
            for (std::int64_t k = 1; k < mid; ++k) mx = std::max(mx, px[base + k * inner]);
            T sum = 0;
            for (std::int64_t k = 0; k < mid; ++k) {
                const T e = std::exp(px[base + k * inner] - mx);
                py[base + k * inner] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < mid; ++k) py[base + k * inner] /= sum;
        }
    debug_check_finite(y, "softmax");
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto dy = y.data;
        y.node = tp->add("softmax", {nx}, x.size(),
                         [nx, outer, mid, inner, dy](Tape<T>& t, const std::vector<T>& g) {
                             auto& gx = t.grad_buf(nx);
                             for (std::int64_t o = 0; o < outer; ++o)
                                 for (std::int64_t in = 0; in < inner; ++in) {
                                     const std::int64_t base = o * mid * inner + in;
                                     T dot = 0;
                                     for (std::int64_t k = 0; k < mid; ++k) {
                                         const std::size_t idx = static_cast<std::size_t>(base + k * inner);
                                         dot += g[idx] * (*dy)[idx];
                                     }
                                     for (std::int64_t k = 0; k < mid; ++k) {
                                         const std::size_t idx = static_cast<std::size_t>(base + k * inner);
                                         gx[idx] += (*dy)[idx] * (g[idx] - dot);
                                     }
                                 }
                         });
    }
    return y;
}

// Per spatial location of an NCHW map: divide the channel vector by its L2
// norm, then multiply channel c by the learnable gamma[c].
template <class T>
Tensor<T> l2_normalize_scale(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& gamma) {
    if (x.rank() != 4) throw std::invalid_argument("l2_normalize_scale: need NCHW input, got " + shape_str(x.shape));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.size() != C) {
        throw std::invalid_argument("l2_normalize_scale: gamma size " + std::to_string(gamma.size()) +
                                    " != channels " + std::to_string(C));
    }
    const T eps = static_cast<T>(1e-12);
    const std::int64_t hw = H * W;
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * hw));
    const T* px = x.ptr();
    const T* pg = gamma.ptr();
    T* py = y.ptr();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < hw; ++p) {
            T s = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const T v = px[(n * C + c) * hw + p];
                s += v * v;
            }
            const T r = std::sqrt(s + eps);
            (*norms)[static_cast<std::size_t>(n * hw + p)] = r;
            for (std::int64_t c = 0; c < C; ++c)
                py[(n * C + c) * hw + p] = pg[c] * px[(n * C + c) * hw + p] / r;
        }
    debug_check_finite(y, "l2_normalize_scale");
    if (detail::tracked(tp, {&x, &gamma})) {
        const int nx = x.node, ng = gamma.node;
        auto dx = x.data, dg = gamma.data;
        y.node = tp->add("l2_normalize_scale", {nx, ng}, x.size(),
                         [nx, ng, N, C, hw, dx, dg, norms](Tape<T>& t, const std::vector<T>& g) {
                             const T* px2 = dx->data();
                             const T* pg2 = dg->data();
                             for (std::int64_t n = 0; n < N; ++n)
                                 for (std::int64_t p = 0; p < hw; ++p) {
                                     const T r = (*norms)[static_cast<std::size_t>(n * hw + p)];
                                     T dot = 0;
                                     for (std::int64_t c = 0; c < C; ++c) {
                                         const std::size_t idx = static_cast<std::size_t>((n * C + c) * hw + p);
                                         dot += pg2[c] * px2[idx] * g[idx];
                                     }
                                     if (nx >= 0) {
                                         auto& gx = t.grad_buf(nx);
                                         for (std::int64_t c = 0; c < C; ++c) {
                                             const std::size_t idx = static_cast<std::size_t>((n * C + c) * hw + p);
                                             gx[idx] += pg2[c] * g[idx] / r - px2[idx] * dot / (r * r * r);
                                         }
                                     }
                                     if (ng >= 0) {
                                         auto& gg = t.grad_buf(ng);
                                         for (std::int64_t c = 0; c < C; ++c) {
                                             const std::size_t idx = static_cast<std::size_t>((n * C + c) * hw + p);
                                             gg[static_cast<std::size_t>(c)] += g[idx] * px2[idx] / r;
                                         }
                                     }
                                 }
                         });
    }
    return y;
}

// y[n,c,h,w] = x[n,c,h,w] * scale[c] + bias[c]
template <class T>
Tensor<T> channel_affine(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& bias) {
    if (x.rank() != 4) throw std::invalid_argument("channel_affine: need NCHW input, got " + shape_str(x.shape));
    const std::int64_t N = x.dim(0), C = x.dim(1), hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    if (scale.size() != C || bias.size() != C) {
        throw std::invalid_argument("channel_affine: scale/bias must have " + std::to_string(C) + " channels");
    }
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    const T* ps = scale.ptr();
    const T* pb = bias.ptr();
    T* py = y.ptr();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T sv = ps[c], bv = pb[c];
            const std::int64_t base = (n * C + c) * hw;
            for (std::int64_t p = 0; p < hw; ++p) py[base + p] = px[base + p] * sv + bv;
        }
    debug_check_finite(y, "channel_affine");
    if (detail::tracked(tp, {&x, &scale, &bias})) {
        const int nx = x.node, ns = scale.node, nb = bias.node;
        auto dx = x.data, dsc = scale.data;
        y.node = tp->add("channel_affine", {nx, ns, nb}, x.size(),
                         [nx, ns, nb, N, C, hw, dx, dsc](Tape<T>& t, const std::vector<T>& g) {
                             for (std::int64_t n = 0; n < N; ++n)
                                 for (std::int64_t c = 0; c < C; ++c) {
                                     const std::int64_t base = (n * C + c) * hw;
                                     if (nx >= 0) {
                                         auto& gx = t.grad_buf(nx);
                                         const T sv = (*dsc)[static_cast<std::size_t>(c)];
                                         for (std::int64_t p = 0; p < hw; ++p)
                                             gx[static_cast<std::size_t>(base + p)] += g[static_cast<std::size_t>(base + p)] * sv;
                                     }
                                     if (ns >= 0) {
                                         auto& gs = t.grad_buf(ns);
                                         T acc = 0;
                                         for (std::int64_t p = 0; p < hw; ++p)
                                             acc += g[static_cast<std::size_t>(base + p)] * (*dx)[static_cast<std::size_t>(base + p)];
                                         gs[static_cast<std::size_t>(c)] += acc;
                                     }
                                     if (nb >= 0) {
                                         auto& gb = t.grad_buf(nb);
                                         T acc = 0;
                                         for (std::int64_t p = 0; p < hw; ++p) acc += g[static_cast<std::size_t>(base + p)];
                                         gb[static_cast<std::size_t>(c)] += acc;
                                     }
                                 }
                         });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Metadata-only: shares buffer and tape node.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
    if (numel(s) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
    }
    Tensor<T> y = x;
    y.shape = std::move(s);
    return y;
}

template <class T>
Tensor<T> concat(Tape<T>* tp, const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& ref = xs[0].shape;
    if (axis < 0 || axis >= static_cast<int>(ref.size())) {
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    }
    Shape out_shape = ref;
    int total_axis = 0;
    for (const auto& x : xs) {
        if (x.rank() != static_cast<int>(ref.size()))
            throw std::invalid_argument("concat: rank mismatch " + shape_str(x.shape) + " vs " + shape_str(ref));
        for (int i = 0; i < x.rank(); ++i)
            if (i != axis && x.shape[static_cast<std::size_t>(i)] != ref[static_cast<std::size_t>(i)])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(ref));
        total_axis += x.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    std::int64_t outer, mid_out, inner;
    detail::split_axis(out_shape, axis, outer, mid_out, inner);
    T* py = y.ptr();
    std::int64_t offset = 0;
    std::vector<int> in_nodes;
    std::vector<std::int64_t> mids;
    bool any_tracked = false;
    for (const auto& x : xs) {
        const std::int64_t mid = x.dim(axis);
        const T* px = x.ptr();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(py + (o * mid_out + offset) * inner, px + o * mid * inner,
                        static_cast<std::size_t>(mid * inner) * sizeof(T));
        offset += mid;
        in_nodes.push_back(x.node);
        mids.push_back(mid);
        if (tp && x.node >= 0) any_tracked = true;
    }
    if (tp && any_tracked) {
        y.node = tp->add("concat", in_nodes, y.size(),
                         [in_nodes, mids, outer, mid_out, inner](Tape<T>& t, const std::vector<T>& g) {
                             std::int64_t off = 0;
                             for (std::size_t i = 0; i < in_nodes.size(); ++i) {
                                 const std::int64_t mid = mids[i];
                                 if (in_nodes[i] >= 0) {
                                     auto& gx = t.grad_buf(in_nodes[i]);
                                     for (std::int64_t o = 0; o < outer; ++o) {
                                         const T* gs = g.data() + (o * mid_out + off) * inner;
                                         T* gd = gx.data() + o * mid * inner;
                                         for (std::int64_t k = 0; k < mid * inner; ++k) gd[k] += gs[k];
                                     }
                                 }
                                 off += mid;
                             }
                         });
    }
    return y;
}

template <class T>
Tensor<T> slice(Tape<T>* tp, const Tensor<T>& x, int axis, int start, int len) {
    std::int64_t outer, mid, inner;
    detail::split_axis(x.shape, axis, outer, mid, inner);
    if (start < 0 || len <= 0 || start + len > mid) {
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                    ") out of bounds for axis size " + std::to_string(mid));
    }
    Shape out_shape = x.shape;
    out_shape[static_cast<std::size_t>(axis)] = len;
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(py + o * len * inner, px + (o * mid + start) * inner,
                    static_cast<std::size_t>(len) * inner * sizeof(T));
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        y.node = tp->add("slice", {nx}, y.size(),
                         [nx, outer, mid, inner, start, len](Tape<T>& t, const std::vector<T>& g) {
                             auto& gx = t.grad_buf(nx);
                             for (std::int64_t o = 0; o < outer; ++o) {
                                 const T* gs = g.data() + o * len * inner;
                                 T* gd = gx.data() + (o * mid + start) * inner;
                                 for (std::int64_t k = 0; k < static_cast<std::int64_t>(len) * inner; ++k) gd[k] += gs[k];
                             }
                         });
    }
    return y;
}

// Gathers rows of a 2-D-viewed tensor: x [M, rest...] -> [K, rest...].
template <class T>
Tensor<T> take_rows(Tape<T>* tp, const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.rank() < 1) throw std::invalid_argument("take_rows: scalar input");
    const std::int64_t m = x.dim(0);
    const std::int64_t row = x.size() / m;
    for (int i : idx)
        if (i < 0 || i >= m) throw std::invalid_argument("take_rows: index " + std::to_string(i) + " out of range");
    Shape out_shape = x.shape;
    out_shape[0] = static_cast<int>(idx.size());
    if (idx.empty()) throw std::invalid_argument("take_rows: empty index list");
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::memcpy(py + static_cast<std::int64_t>(i) * row, px + static_cast<std::int64_t>(idx[i]) * row,
                    static_cast<std::size_t>(row) * sizeof(T));
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto indices = idx;
        y.node = tp->add("take_rows", {nx}, y.size(), [nx, indices, row](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::size_t i = 0; i < indices.size(); ++i) {
                const T* gs = g.data() + static_cast<std::int64_t>(i) * row;
                T* gd = gx.data() + static_cast<std::int64_t>(indices[i]) * row;
                for (std::int64_t k = 0; k < row; ++k) gd[k] += gs[k];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> sum_all(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros({1});
    // Accumulate in double: long reductions feed the loss and its
    // finite-difference checks.
    double acc = 0;
    const T* px = x.ptr();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
    y.ptr()[0] = static_cast<T>(acc);
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        y.node = tp->add("sum_all", {nx}, 1, [nx, n](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[0];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW)
// ---------------------------------------------------------------------------

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// x: [N,C,H,W], w: [F,C,k,k], bias: [F] or undefined. Same padding keeps
// H' = ceil(H/stride) for odd k.
template <class T>
Tensor<T> conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 Padding padding = Padding::Same) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw std::invalid_argument("conv2d: need NCHW input and FCkk weight, got " + shape_str(x.shape) + " and " +
                                    shape_str(w.shape));
    }
    if (w.dim(2) != w.dim(3)) throw std::invalid_argument("conv2d: only square kernels supported");
    const int k = w.dim(2);
    if (k < 1 || stride < 1) throw std::invalid_argument("conv2d: kernel and stride must be >= 1");
    if (x.dim(1) != w.dim(1)) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(x.dim(1)) +
                                    " != weight channels " + std::to_string(w.dim(1)));
    }
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(0);
    if (bias.defined() && bias.size() != F) {
        throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.size()) + " != filters " +
                                    std::to_string(F));
    }
    const int pad = padding == Padding::Same ? (k - 1) / 2 : 0;
    const int Ho = conv_out_size(H, k, stride, pad);
    const int Wo = conv_out_size(W, k, stride, pad);
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: input too small for kernel");
    Tensor<T> y = Tensor<T>::zeros({N, F, Ho, Wo});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* py = y.ptr();
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f) {
            T* out_plane = py + (static_cast<std::int64_t>(n) * F + f) * Ho * Wo;
            if (bias.defined()) {
                const T bv = bias.ptr()[f];
                for (int i = 0; i < Ho * Wo; ++i) out_plane[i] = bv;
            }
            for (int c = 0; c < C; ++c) {
                const T* in_plane = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = pw[((static_cast<std::int64_t>(f) * C + c) * k + ky) * k + kx];
                        if (wv == T(0)) continue;
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                            T* out_row = out_plane + static_cast<std::int64_t>(oy) * Wo;
                            for (int ox = 0; ox < Wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
            }
        }
    debug_check_finite(y, "conv2d");
    if (detail::tracked(tp, {&x, &w, &bias})) {
        const int nx = x.node, nw = w.node, nb = bias.defined() ? bias.node : -1;
        auto dx = x.data, dw = w.data;
        y.node = tp->add(
            "conv2d", {nx, nw, nb}, y.size(),
            [nx, nw, nb, N, C, H, W, F, k, stride, pad, Ho, Wo, dx, dw](Tape<T>& t, const std::vector<T>& g) {
                const T* px2 = dx->data();
                const T* pw2 = dw->data();
                for (int n = 0; n < N; ++n)
                    for (int f = 0; f < F; ++f) {
                        const T* g_plane = g.data() + (static_cast<std::int64_t>(n) * F + f) * Ho * Wo;
                        if (nb >= 0) {
                            auto& gb = t.grad_buf(nb);
                            T acc = 0;
                            for (int i = 0; i < Ho * Wo; ++i) acc += g_plane[i];
                            gb[static_cast<std::size_t>(f)] += acc;
                        }
                        for (int c = 0; c < C; ++c) {
                            const T* in_plane = px2 + (static_cast<std::int64_t>(n) * C + c) * H * W;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const std::int64_t widx = ((static_cast<std::int64_t>(f) * C + c) * k + ky) * k + kx;
                                    const T wv = pw2[widx];
                                    T wacc = 0;
                                    for (int oy = 0; oy < Ho; ++oy) {
                                        const int iy = oy * stride - pad + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                                        const T* g_row = g_plane + static_cast<std::int64_t>(oy) * Wo;
                                        if (nx >= 0) {
                                            auto& gx = t.grad_buf(nx);
                                            T* gx_row = gx.data() + ((static_cast<std::int64_t>(n) * C + c) * H + iy) * W;
                                            for (int ox = 0; ox < Wo; ++ox) {
                                                const int ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                gx_row[ix] += wv * g_row[ox];
                                                wacc += in_row[ix] * g_row[ox];
                                            }
                                        } else {
                                            for (int ox = 0; ox < Wo; ++ox) {
                                                const int ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                wacc += in_row[ix] * g_row[ox];
                                            }
                                        }
                                    }
                                    if (nw >= 0) t.grad_buf(nw)[static_cast<std::size_t>(widx)] += wacc;
                                }
                        }
                    }
            });
    }
    return y;
}

// One filter per channel: x [N,C,H,W], w [C,1,k,k]. Same padding.
template <class T>
Tensor<T> depthwise_conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, int stride) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != 1) {
        throw std::invalid_argument("depthwise_conv2d: need NCHW input and [C,1,k,k] weight, got " +
                                    shape_str(x.shape) + " and " + shape_str(w.shape));
    }
    if (w.dim(0) != x.dim(1)) {
        throw std::invalid_argument("depthwise_conv2d: weight channels " + std::to_string(w.dim(0)) +
                                    " != input channels " + std::to_string(x.dim(1)));
    }
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(2);
    const int pad = (k - 1) / 2;
    const int Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);
    Tensor<T> y = Tensor<T>::zeros({N, C, Ho, Wo});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* py = y.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* in_plane = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
            T* out_plane = py + (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T wv = pw[(static_cast<std::int64_t>(c) * k + ky) * k + kx];
                    if (wv == T(0)) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                        T* out_row = out_plane + static_cast<std::int64_t>(oy) * Wo;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            out_row[ox] += wv * in_row[ix];
                        }
                    }
                }
        }
    debug_check_finite(y, "depthwise_conv2d");
    if (detail::tracked(tp, {&x, &w})) {
        const int nx = x.node, nw = w.node;
        auto dx = x.data, dw = w.data;
        y.node = tp->add("depthwise_conv2d", {nx, nw}, y.size(),
                         [nx, nw, N, C, H, W, k, stride, pad, Ho, Wo, dx, dw](Tape<T>& t, const std::vector<T>& g) {
                             const T* px2 = dx->data();
                             const T* pw2 = dw->data();
                             for (int n = 0; n < N; ++n)
                                 for (int c = 0; c < C; ++c) {
                                     const T* in_plane = px2 + (static_cast<std::int64_t>(n) * C + c) * H * W;
                                     const T* g_plane = g.data() + (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
                                     for (int ky = 0; ky < k; ++ky)
                                         for (int kx = 0; kx < k; ++kx) {
                                             const std::int64_t widx = (static_cast<std::int64_t>(c) * k + ky) * k + kx;
                                             const T wv = pw2[widx];
                                             T wacc = 0;
                                             for (int oy = 0; oy < Ho; ++oy) {
                                                 const int iy = oy * stride - pad + ky;
                                                 if (iy < 0 || iy >= H) continue;
                                                 const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                                                 const T* g_row = g_plane + static_cast<std::int64_t>(oy) * Wo;
                                                 for (int ox = 0; ox < Wo; ++ox) {
                                                     const int ix = ox * stride - pad + kx;
                                                     if (ix < 0 || ix >= W) continue;
                                                     if (nx >= 0) {
                                                         t.grad_buf(nx)[static_cast<std::size_t>(
                                                             ((static_cast<std::int64_t>(n) * C + c) * H + iy) * W + ix)] +=
                                                             wv * g_row[ox];
                                                     }
                                                     wacc += in_row[ix] * g_row[ox];
                                                 }
                                             }
                                             if (nw >= 0) t.grad_buf(nw)[static_cast<std::size_t>(widx)] += wacc;
                                         }
                                 }
                         });
    }
    return y;
}

// Achievable target sizes for a stride-s transposed conv with pad=(k-1)/2.
inline std::pair<int, int> deconv_targets(int in, int k, int stride) {
    const int pad = (k - 1) / 2;
    const int base = (in - 1) * stride + k - 2 * pad;
    return {base, base + 1};
}

// Adjoint-of-convolution upsampling: x [N,C,H,W], w [C,F,k,k]. Output spatial
// size must equal target exactly; the output padding (0 or 1) is implied.
template <class T>
Tensor<T> transposed_conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, int stride, int target_h,
                            int target_w) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw std::invalid_argument("transposed_conv2d: need NCHW input and [C,F,k,k] weight, got " +
                                    shape_str(x.shape) + " and " + shape_str(w.shape));
    }
    if (w.dim(0) != x.dim(1)) {
        throw std::invalid_argument("transposed_conv2d: weight input channels " + std::to_string(w.dim(0)) +
                                    " != input channels " + std::to_string(x.dim(1)));
    }
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = w.dim(1), k = w.dim(2);
    const int pad = (k - 1) / 2;
    auto [h0, h1] = deconv_targets(H, k, stride);
    auto [w0, w1] = deconv_targets(W, k, stride);
    if (target_h != h0 && target_h != h1) {
        throw ConfigError("transposed_conv2d: target height " + std::to_string(target_h) + " unreachable from " +
                          std::to_string(H) + " (achievable: " + std::to_string(h0) + " or " + std::to_string(h1) +
                          ")");
    }
    if (target_w != w0 && target_w != w1) {
        throw ConfigError("transposed_conv2d: target width " + std::to_string(target_w) + " unreachable from " +
                          std::to_string(W) + " (achievable: " + std::to_string(w0) + " or " + std::to_string(w1) +
                          ")");
    }
    Tensor<T> y = Tensor<T>::zeros({N, F, target_h, target_w});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* py = y.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* in_plane = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int f = 0; f < F; ++f) {
                T* out_plane = py + (static_cast<std::int64_t>(n) * F + f) * target_h * target_w;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = pw[((static_cast<std::int64_t>(c) * F + f) * k + ky) * k + kx];
                        if (wv == T(0)) continue;
                        for (int iy = 0; iy < H; ++iy) {
                            const int oy = iy * stride - pad + ky;
                            if (oy < 0 || oy >= target_h) continue;
                            const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                            T* out_row = out_plane + static_cast<std::int64_t>(oy) * target_w;
                            for (int ix = 0; ix < W; ++ix) {
                                const int ox = ix * stride - pad + kx;
                                if (ox < 0 || ox >= target_w) continue;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
            }
        }
    debug_check_finite(y, "transposed_conv2d");
    if (detail::tracked(tp, {&x, &w})) {
        const int nx = x.node, nw = w.node;
        auto dx = x.data, dw = w.data;
        const int Ho = target_h, Wo = target_w;
        y.node = tp->add("transposed_conv2d", {nx, nw}, y.size(),
                         [nx, nw, N, C, H, W, F, k, stride, pad, Ho, Wo, dx, dw](Tape<T>& t, const std::vector<T>& g) {
                             const T* px2 = dx->data();
                             const T* pw2 = dw->data();
                             for (int n = 0; n < N; ++n)
                                 for (int c = 0; c < C; ++c) {
                                     const T* in_plane = px2 + (static_cast<std::int64_t>(n) * C + c) * H * W;
                                     for (int f = 0; f < F; ++f) {
                                         const T* g_plane = g.data() + (static_cast<std::int64_t>(n) * F + f) * Ho * Wo;
                                         for (int ky = 0; ky < k; ++ky)
                                             for (int kx = 0; kx < k; ++kx) {
                                                 const std::int64_t widx =
                                                     ((static_cast<std::int64_t>(c) * F + f) * k + ky) * k + kx;
                                                 const T wv = pw2[widx];
                                                 T wacc = 0;
                                                 for (int iy = 0; iy < H; ++iy) {
                                                     const int oy = iy * stride - pad + ky;
                                                     if (oy < 0 || oy >= Ho) continue;
                                                     const T* in_row = in_plane + static_cast<std::int64_t>(iy) * W;
                                                     const T* g_row = g_plane + static_cast<std::int64_t>(oy) * Wo;
                                                     for (int ix = 0; ix < W; ++ix) {
                                                         const int ox = ix * stride - pad + kx;
                                                         if (ox < 0 || ox >= Wo) continue;
                                                         if (nx >= 0) {
                                                             t.grad_buf(nx)[static_cast<std::size_t>(
                                                                 ((static_cast<std::int64_t>(n) * C + c) * H + iy) * W +
                                                                 ix)] += wv * g_row[ox];
                                                         }
                                                         wacc += in_row[ix] * g_row[ox];
                                                     }
                                                 }
                                                 if (nw >= 0) t.grad_buf(nw)[static_cast<std::size_t>(widx)] += wacc;
                                             }
                                     }
                                 }
                         });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Detection-head plumbing ops
// ---------------------------------------------------------------------------

// Slices a T-step capsule for every spatial location of an NCHW map.
// Output [N*H*W, T, C]; lane order is (n, y, x). Element t of a capsule at
// (x, y) is the channel vector at (x, y-(T-1-t)) for vertical orientation,
// (x-(T-1-t), y) for horizontal; out-of-map positions are zero-filled.
template <class T>
Tensor<T> extract_capsules(Tape<T>* tp, const Tensor<T>& x, int steps, Orientation orient) {
    if (x.rank() != 4) throw std::invalid_argument("extract_capsules: need NCHW input, got " + shape_str(x.shape));
    if (steps <= 0) throw std::invalid_argument("extract_capsules: capsule size must be positive");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y = Tensor<T>::zeros({N * H * W, steps, C});
    const T* px = x.ptr();
    T* py = y.ptr();
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx) {
                const std::int64_t lane = (static_cast<std::int64_t>(n) * H + yy) * W + xx;
                for (int t = 0; t < steps; ++t) {
                    const int off = steps - 1 - t;
                    const int sy = orient == Orientation::Vertical ? yy - off : yy;
                    const int sx = orient == Orientation::Vertical ? xx : xx - off;
                    if (sy < 0 || sx < 0) continue;
                    T* dst = py + (lane * steps + t) * C;
                    const T* src = px + static_cast<std::int64_t>(n) * C * hw + static_cast<std::int64_t>(sy) * W + sx;
                    for (int c = 0; c < C; ++c) dst[c] = src[static_cast<std::int64_t>(c) * hw];
                }
            }
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        y.node = tp->add("extract_capsules", {nx}, y.size(),
                         [nx, N, C, H, W, steps, orient, hw](Tape<T>& t, const std::vector<T>& g) {
                             auto& gx = t.grad_buf(nx);
                             for (int n = 0; n < N; ++n)
                                 for (int yy = 0; yy < H; ++yy)
                                     for (int xx = 0; xx < W; ++xx) {
                                         const std::int64_t lane = (static_cast<std::int64_t>(n) * H + yy) * W + xx;
                                         for (int st = 0; st < steps; ++st) {
                                             const int off = steps - 1 - st;
                                             const int sy = orient == Orientation::Vertical ? yy - off : yy;
                                             const int sx = orient == Orientation::Vertical ? xx : xx - off;
                                             if (sy < 0 || sx < 0) continue;
                                             const T* gs = g.data() + (lane * steps + st) * C;
                                             T* gd = gx.data() + static_cast<std::int64_t>(n) * C * hw +
                                                     static_cast<std::int64_t>(sy) * W + sx;
                                             for (int c = 0; c < C; ++c) gd[static_cast<std::int64_t>(c) * hw] += gs[c];
                                         }
                                     }
                         });
    }
    return y;
}

// Rearranges a head map [N, A*D, H, W] into per-anchor rows [N*H*W*A, D].
// Row order is (n, y, x, a), matching anchor enumeration within one level.
template <class T>
Tensor<T> head_rows(Tape<T>* tp, const Tensor<T>& x, int d) {
    if (x.rank() != 4 || x.dim(1) % d != 0) {
        throw std::invalid_argument("head_rows: channel count " + std::to_string(x.dim(1)) +
                                    " not divisible by row width " + std::to_string(d));
    }
    const int N = x.dim(0), A = x.dim(1) / d, H = x.dim(2), W = x.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> y = Tensor<T>::zeros({N * H * W * A, d});
    const T* px = x.ptr();
    T* py = y.ptr();
    for (int n = 0; n < N; ++n)
        for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx)
                for (int a = 0; a < A; ++a) {
                    const std::int64_t rowi = ((static_cast<std::int64_t>(n) * H + yy) * W + xx) * A + a;
                    const T* src = px + (static_cast<std::int64_t>(n) * A * d) * hw +
                                   static_cast<std::int64_t>(yy) * W + xx;
                    for (int j = 0; j < d; ++j)
                        py[rowi * d + j] = src[(static_cast<std::int64_t>(a) * d + j) * hw];
                }
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        y.node = tp->add("head_rows", {nx}, y.size(), [nx, N, A, H, W, d, hw](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (int n = 0; n < N; ++n)
                for (int yy = 0; yy < H; ++yy)
                    for (int xx = 0; xx < W; ++xx)
                        for (int a = 0; a < A; ++a) {
                            const std::int64_t rowi = ((static_cast<std::int64_t>(n) * H + yy) * W + xx) * A + a;
                            T* dst = gx.data() + (static_cast<std::int64_t>(n) * A * d) * hw +
                                     static_cast<std::int64_t>(yy) * W + xx;
                            for (int j = 0; j < d; ++j)
                                dst[(static_cast<std::int64_t>(a) * d + j) * hw] += g[static_cast<std::size_t>(rowi * d + j)];
                        }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Loss primitives
// ---------------------------------------------------------------------------

// Per-row cross entropy with integrated softmax: logits [M,K], labels [M].
template <class T>
Tensor<T> softmax_cross_entropy(Tape<T>* tp, const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
        throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    const std::int64_t m = logits.dim(0), kk = logits.dim(1);
    for (int l : labels)
        if (l < 0 || l >= kk) throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
    Tensor<T> y = Tensor<T>::zeros({static_cast<int>(m)});
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m * kk));
    const T* px = logits.ptr();
    T* py = y.ptr();
    for (std::int64_t i = 0; i < m; ++i) {
        const T* row = px + i * kk;
        T mx = row[0];
        for (std::int64_t j = 1; j < kk; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::int64_t j = 0; j < kk; ++j) {
            const T e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(i * kk + j)] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < kk; ++j) (*probs)[static_cast<std::size_t>(i * kk + j)] /= sum;
        py[i] = std::log(sum) + mx - row[labels[static_cast<std::size_t>(i)]];
    }
    debug_check_finite(y, "softmax_cross_entropy");
    if (detail::tracked(tp, {&logits})) {
        const int nx = logits.node;
        auto lab = labels;
        y.node = tp->add("softmax_cross_entropy", {nx}, m, [nx, m, kk, probs, lab](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < m; ++i) {
                const T gv = g[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < kk; ++j)
                    gx[static_cast<std::size_t>(i * kk + j)] += gv * (*probs)[static_cast<std::size_t>(i * kk + j)];
                gx[static_cast<std::size_t>(i * kk + lab[static_cast<std::size_t>(i)])] -= gv;
            }
        });
    }
    return y;
}

// Elementwise smooth L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise.
template <class T>
Tensor<T> smooth_l1(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* py = y.ptr();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const T a = std::abs(px[i]);
        py[i] = a < T(1) ? T(0.5) * px[i] * px[i] : a - T(0.5);
    }
    if (detail::tracked(tp, {&x})) {
        const int nx = x.node;
        auto dx = x.data;
        y.node = tp->add("smooth_l1", {nx}, n, [nx, n, dx](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buf(nx);
            for (std::int64_t i = 0; i < n; ++i) {
                const T v = (*dx)[static_cast<std::size_t>(i)];
                const T d = std::abs(v) < T(1) ? v : (v > T(0) ? T(1) : T(-1));
                gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * d;
            }
        });
    }
    return y;
}

}  // namespace ops
}  // namespace vssa
