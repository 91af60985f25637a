#pragma once

#include <functional>
#include <memory>
#include <unordered_set>

#include "tandepth/tensor.hpp"

namespace tandepth {

// Reverse-mode tape. Each op allocates a node holding its output value and a
// closure that scatters the node's gradient into its parents. Ownership flows
// child -> parent only (closures capture raw pointers), so graphs free
// themselves when the root handle dies.
template <class T>
struct NodeT {
    TensorT<T> val;
    TensorT<T> grad;
    bool requires_grad = false;
    bool backward_done = false;  // set on the root after backward()
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void()> backprop;
};

template <class T>
struct VarT {
    std::shared_ptr<NodeT<T>> n;

    VarT() = default;
    explicit VarT(std::shared_ptr<NodeT<T>> p) : n(std::move(p)) {}

    const TensorT<T>& val() const { return n->val; }
    TensorT<T>& val() { return n->val; }
    const TensorT<T>& grad() const { return n->grad; }
    bool defined() const { return static_cast<bool>(n); }
};

template <class T>
VarT<T> make_leaf(TensorT<T> t, bool requires_grad) {
    auto node = std::make_shared<NodeT<T>>();
    node->val = std::move(t);
    node->requires_grad = requires_grad;
    return VarT<T>(node);
}

template <class T>
VarT<T> constant(TensorT<T> t) {
    return make_leaf(std::move(t), false);
}

namespace detail {

template <class T>
VarT<T> make_op(TensorT<T> out, std::vector<VarT<T>> parents) {
    auto node = std::make_shared<NodeT<T>>();
    node->val = std::move(out);
    for (auto& p : parents) {
        node->requires_grad = node->requires_grad || p.n->requires_grad;
        node->parents.push_back(p.n);
    }
    return VarT<T>(node);
}

template <class T>
void ensure_grad(NodeT<T>* n) {
    if (!n->grad.same_shape(n->val)) {
        n->grad = n->val;
        n->grad.fill(T(0));
    }
}

}  // namespace detail

// Topological order by DFS over parents; reverse pass runs each node's closure
// exactly once. A second backward on the same root throws.
template <class T>
void backward(VarT<T> root) {
    if (!root.defined() || root.n->val.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    if (root.n->backward_done) throw std::logic_error("backward: tape already consumed");
    root.n->backward_done = true;

    std::vector<NodeT<T>*> topo;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    stack.push_back({root.n.get(), 0});
    seen.insert(root.n.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (NodeT<T>* n : topo) {
        n->grad = n->val;
        n->grad.fill(T(0));
    }
    root.n->grad.fill(T(1));

    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

// ---- elementwise ----

template <class T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
    TensorT<T> out = a.val();
    const int64_t n = out.numel();
    const T* pb = b.val().data();
    for (int64_t i = 0; i < n; ++i) out.v[i] += pb[i];
    VarT<T> r = detail::make_op(std::move(out), {a, b});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get(), *bn = b.n.get();
        r.n->backprop = [rn, an, bn, n] {
            if (an->requires_grad)
                for (int64_t i = 0; i < n; ++i) an->grad.v[i] += rn->grad.v[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < n; ++i) bn->grad.v[i] += rn->grad.v[i];
        };
    }
    return r;
}

template <class T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
    TensorT<T> out = a.val();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out.v[i] *= b.val().v[i];
    VarT<T> r = detail::make_op(std::move(out), {a, b});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get(), *bn = b.n.get();
        r.n->backprop = [rn, an, bn, n] {
            if (an->requires_grad)
                for (int64_t i = 0; i < n; ++i) an->grad.v[i] += rn->grad.v[i] * bn->val.v[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < n; ++i) bn->grad.v[i] += rn->grad.v[i] * an->val.v[i];
        };
    }
    return r;
}

template <class T>
VarT<T> scale(VarT<T> a, T s) {
    TensorT<T> out = a.val();
    for (auto& x : out.v) x *= s;
    VarT<T> r = detail::make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        const int64_t n = a.val().numel();
        r.n->backprop = [rn, an, s, n] {
            for (int64_t i = 0; i < n; ++i) an->grad.v[i] += rn->grad.v[i] * s;
        };
    }
    return r;
}

template <class T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    return add(a, scale(b, T(-1)));
}

namespace detail {

// Shared scaffolding for unary elementwise ops: dval = f'(x) computed from
// the input value.
template <class T, class F, class DF>
VarT<T> unary_op(VarT<T> a, F f, DF df) {
    TensorT<T> out = a.val();
    for (auto& x : out.v) x = f(x);
    VarT<T> r = make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        const int64_t n = a.val().numel();
        r.n->backprop = [rn, an, df, n] {
            for (int64_t i = 0; i < n; ++i) an->grad.v[i] += rn->grad.v[i] * df(an->val.v[i]);
        };
    }
    return r;
}

template <class T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_scalar(T x) {
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace detail

template <class T>
VarT<T> sigmoid(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return detail::sigmoid_scalar(x); },
        [](T x) {
            const T s = detail::sigmoid_scalar(x);
            return s * (T(1) - s);
        });
}

template <class T>
VarT<T> softplus(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return detail::softplus_scalar(x); },
        [](T x) { return detail::sigmoid_scalar(x); });
}

template <class T>
VarT<T> silu(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return x * detail::sigmoid_scalar(x); },
        [](T x) {
            const T s = detail::sigmoid_scalar(x);
            return s + x * s * (T(1) - s);
        });
}

// ---- shape ops ----

// Row-major layout is preserved, so reshape is a data copy with new dims.
template <class T>
VarT<T> reshape(VarT<T> a, std::vector<int> dims) {
    TensorT<T> out = TensorT<T>::make(dims);
    if (out.numel() != a.val().numel()) throw std::invalid_argument("reshape: element count mismatch");
    out.v = a.val().v;
    VarT<T> r = detail::make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        const int64_t n = a.val().numel();
        r.n->backprop = [rn, an, n] {
            for (int64_t i = 0; i < n; ++i) an->grad.v[i] += rn->grad.v[i];
        };
    }
    return r;
}

// Concatenate 4D tensors along the channel axis.
template <class T>
VarT<T> concat_channels(std::vector<VarT<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
    const auto& d0 = parts[0].val().dims;
    int ctot = 0;
    for (auto& p : parts) {
        const auto& d = p.val().dims;
        if (p.val().nd != 4 || d[0] != d0[0] || d[2] != d0[2] || d[3] != d0[3])
            throw std::invalid_argument("concat_channels: incompatible shapes");
        ctot += d[1];
    }
    const int N = d0[0], H = d0[2], W = d0[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    TensorT<T> out = TensorT<T>::make({N, ctot, H, W});
    std::vector<int> coff(parts.size());
    {
        int off = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            coff[i] = off;
            off += parts[i].val().dims[1];
        }
    }
    for (size_t i = 0; i < parts.size(); ++i) {
        const auto& src = parts[i].val();
        const int C = src.dims[1];
        for (int n = 0; n < N; ++n)
            std::copy_n(src.data() + (static_cast<int64_t>(n) * C) * plane, C * plane,
                        out.data() + (static_cast<int64_t>(n) * ctot + coff[i]) * plane);
    }
    VarT<T> r = detail::make_op(std::move(out), parts);
    if (r.n->requires_grad) {
        NodeT<T>* rn = r.n.get();
        std::vector<NodeT<T>*> ps;
        for (auto& p : parts) ps.push_back(p.n.get());
        r.n->backprop = [rn, ps, coff, N, ctot, plane] {
            for (size_t i = 0; i < ps.size(); ++i) {
                if (!ps[i]->requires_grad) continue;
                const int C = ps[i]->val.dims[1];
                for (int n = 0; n < N; ++n) {
                    const T* g = rn->grad.data() + (static_cast<int64_t>(n) * ctot + coff[i]) * plane;
                    T* dst = ps[i]->grad.data() + (static_cast<int64_t>(n) * C) * plane;
                    for (int64_t k = 0; k < C * plane; ++k) dst[k] += g[k];
                }
            }
        };
    }
    return r;
}

// Column range [c0, c1) of a 2D tensor.
template <class T>
VarT<T> slice_cols(VarT<T> a, int c0, int c1) {
    const auto& d = a.val().dims;
    if (a.val().nd != 2 || c0 < 0 || c1 > d[1] || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    const int M = d[0], D = d[1], C = c1 - c0;
    TensorT<T> out = TensorT<T>::make({M, C});
    for (int m = 0; m < M; ++m)
        std::copy_n(a.val().data() + static_cast<int64_t>(m) * D + c0, C, out.data() + static_cast<int64_t>(m) * C);
    VarT<T> r = detail::make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        r.n->backprop = [rn, an, M, D, C, c0] {
            for (int m = 0; m < M; ++m) {
                const T* g = rn->grad.data() + static_cast<int64_t>(m) * C;
                T* dst = an->grad.data() + static_cast<int64_t>(m) * D + c0;
                for (int j = 0; j < C; ++j) dst[j] += g[j];
            }
        };
    }
    return r;
}

template <class T>
VarT<T> concat_cols(std::vector<VarT<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int M = parts[0].val().dims[0];
    int D = 0;
    for (auto& p : parts) {
        if (p.val().nd != 2 || p.val().dims[0] != M) throw std::invalid_argument("concat_cols: incompatible");
        D += p.val().dims[1];
    }
    TensorT<T> out = TensorT<T>::make({M, D});
    std::vector<int> off(parts.size());
    {
        int o = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            off[i] = o;
            o += parts[i].val().dims[1];
        }
    }
    for (size_t i = 0; i < parts.size(); ++i) {
        const int C = parts[i].val().dims[1];
        for (int m = 0; m < M; ++m)
            std::copy_n(parts[i].val().data() + static_cast<int64_t>(m) * C, C,
                        out.data() + static_cast<int64_t>(m) * D + off[i]);
    }
    VarT<T> r = detail::make_op(std::move(out), parts);
    if (r.n->requires_grad) {
        NodeT<T>* rn = r.n.get();
        std::vector<NodeT<T>*> ps;
        for (auto& p : parts) ps.push_back(p.n.get());
        r.n->backprop = [rn, ps, off, M, D] {
            for (size_t i = 0; i < ps.size(); ++i) {
                if (!ps[i]->requires_grad) continue;
                const int C = ps[i]->val.dims[1];
                for (int m = 0; m < M; ++m) {
                    const T* g = rn->grad.data() + static_cast<int64_t>(m) * D + off[i];
                    T* dst = ps[i]->grad.data() + static_cast<int64_t>(m) * C;
                    for (int j = 0; j < C; ++j) dst[j] += g[j];
                }
            }
        };
    }
    return r;
}

// ---- matmul / linear ----

template <class T>
VarT<T> matmul_nn(VarT<T> a, VarT<T> b) {
    const auto &da = a.val().dims, &db = b.val().dims;
    if (a.val().nd != 2 || b.val().nd != 2 || da[1] != db[0]) throw std::invalid_argument("matmul_nn: shape mismatch");
    const int M = da[0], K = da[1], N = db[1];
    TensorT<T> out = TensorT<T>::make({M, N});
    gemm_nn(a.val().data(), b.val().data(), out.data(), M, K, N, false);
    VarT<T> r = detail::make_op(std::move(out), {a, b});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get(), *bn = b.n.get();
        r.n->backprop = [rn, an, bn, M, K, N] {
            if (an->requires_grad) gemm_nt(rn->grad.data(), bn->val.data(), an->grad.data(), M, N, K, true);
            if (bn->requires_grad) gemm_tn(an->val.data(), rn->grad.data(), bn->grad.data(), K, M, N, true);
        };
    }
    return r;
}

// a (M,K) x b(N,K)^T -> (M,N)
template <class T>
VarT<T> matmul_nt(VarT<T> a, VarT<T> b) {
    const auto &da = a.val().dims, &db = b.val().dims;
    if (a.val().nd != 2 || b.val().nd != 2 || da[1] != db[1]) throw std::invalid_argument("matmul_nt: shape mismatch");
    const int M = da[0], K = da[1], N = db[0];
    TensorT<T> out = TensorT<T>::make({M, N});
    gemm_nt(a.val().data(), b.val().data(), out.data(), M, K, N, false);
    VarT<T> r = detail::make_op(std::move(out), {a, b});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get(), *bn = b.n.get();
        r.n->backprop = [rn, an, bn, M, K, N] {
            // dA = dC * B ; dB = dC^T * A
            if (an->requires_grad) gemm_nn(rn->grad.data(), bn->val.data(), an->grad.data(), M, N, K, true);
            if (bn->requires_grad) gemm_tn(rn->grad.data(), an->val.data(), bn->grad.data(), N, M, K, true);
        };
    }
    return r;
}

// x (M,K) * W (K,N) + b(N). Bias may be undefined.
template <class T>
VarT<T> linear(VarT<T> x, VarT<T> w, VarT<T> b = VarT<T>()) {
    VarT<T> y = matmul_nn(x, w);
    if (!b.defined()) return y;
    const int M = y.val().dims[0], N = y.val().dims[1];
    if (b.val().numel() != N) throw std::invalid_argument("linear: bias size mismatch");
    TensorT<T> out = y.val();
    for (int m = 0; m < M; ++m)
        for (int n = 0; n < N; ++n) out.at(m, n) += b.val().v[n];
    VarT<T> r = detail::make_op(std::move(out), {y, b});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *yn = y.n.get(), *bn = b.n.get();
        r.n->backprop = [rn, yn, bn, M, N] {
            if (yn->requires_grad)
                for (int64_t i = 0; i < static_cast<int64_t>(M) * N; ++i) yn->grad.v[i] += rn->grad.v[i];
            if (bn->requires_grad)
                for (int m = 0; m < M; ++m)
                    for (int n = 0; n < N; ++n) bn->grad.v[n] += rn->grad.at(m, n);
        };
    }
    return r;
}

// ---- normalization / softmax ----

// Row-wise softmax with max subtraction.
template <class T>
VarT<T> softmax_rows(VarT<T> a) {
    if (a.val().nd != 2) throw std::invalid_argument("softmax_rows: want 2D");
    const int M = a.val().dims[0], N = a.val().dims[1];
    TensorT<T> out = a.val();
    for (int m = 0; m < M; ++m) {
        T* row = out.data() + static_cast<int64_t>(m) * N;
        T mx = row[0];
        for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (int j = 0; j < N; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (int j = 0; j < N; ++j) row[j] /= s;
    }
    VarT<T> r = detail::make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        r.n->backprop = [rn, an, M, N] {
            for (int m = 0; m < M; ++m) {
                const T* s = rn->val.data() + static_cast<int64_t>(m) * N;
                const T* dy = rn->grad.data() + static_cast<int64_t>(m) * N;
                T dot = T(0);
                for (int j = 0; j < N; ++j) dot += dy[j] * s[j];
                T* dx = an->grad.data() + static_cast<int64_t>(m) * N;
                for (int j = 0; j < N; ++j) dx[j] += s[j] * (dy[j] - dot);
            }
        };
    }
    return r;
}

// Layer norm over the last axis of a 2D tensor, with learnable gain/bias.
template <class T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gain, VarT<T> bias, T eps = T(1e-5)) {
    if (x.val().nd != 2) throw std::invalid_argument("layer_norm: want 2D");
    const int M = x.val().dims[0], D = x.val().dims[1];
    if (gain.val().numel() != D || bias.val().numel() != D) throw std::invalid_argument("layer_norm: gain/bias size");
    TensorT<T> out = TensorT<T>::make({M, D});
    TensorT<T> xhat = TensorT<T>::make({M, D});
    std::vector<T> inv_std(M);
    for (int m = 0; m < M; ++m) {
        const T* row = x.val().data() + static_cast<int64_t>(m) * D;
        T mu = T(0);
        for (int j = 0; j < D; ++j) mu += row[j];
        mu /= T(D);
        T var = T(0);
        for (int j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= T(D);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[m] = is;
        for (int j = 0; j < D; ++j) {
            const T xh = (row[j] - mu) * is;
            xhat.at(m, j) = xh;
            out.at(m, j) = gain.val().v[j] * xh + bias.val().v[j];
        }
    }
    VarT<T> r = detail::make_op(std::move(out), {x, gain, bias});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *xn = x.n.get(), *gn = gain.n.get(), *bn = bias.n.get();
        auto xh = std::make_shared<TensorT<T>>(std::move(xhat));
        auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
        r.n->backprop = [rn, xn, gn, bn, xh, istd, M, D] {
            for (int m = 0; m < M; ++m) {
                const T* dy = rn->grad.data() + static_cast<int64_t>(m) * D;
                const T* xhr = xh->data() + static_cast<int64_t>(m) * D;
                if (gn->requires_grad)
                    for (int j = 0; j < D; ++j) gn->grad.v[j] += dy[j] * xhr[j];
                if (bn->requires_grad)
                    for (int j = 0; j < D; ++j) bn->grad.v[j] += dy[j];
                if (xn->requires_grad) {
                    T s1 = T(0), s2 = T(0);
                    for (int j = 0; j < D; ++j) {
                        const T dxh = dy[j] * gn->val.v[j];
                        s1 += dxh;
                        s2 += dxh * xhr[j];
                    }
                    T* dx = xn->grad.data() + static_cast<int64_t>(m) * D;
                    const T is = (*istd)[m];
                    for (int j = 0; j < D; ++j) {
                        const T dxh = dy[j] * gn->val.v[j];
                        dx[j] += is * (dxh - (s1 + xhr[j] * s2) / T(D));
                    }
                }
            }
        };
    }
    return r;
}

// ---- conv / resize ----

namespace detail {

template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* col) {
    // col is (C*kh*kw, Ho*Wo)
    const int64_t spatial = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                T* dst = col + ((static_cast<int64_t>(c) * kh + dy) * kw + dx) * spatial;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + dy - pad;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + dx - pad;
                        dst[static_cast<int64_t>(oy) * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<int64_t>(c) * H + iy) * W + ix]
                                : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* x) {
    const int64_t spatial = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const T* src = col + ((static_cast<int64_t>(c) * kh + dy) * kw + dx) * spatial;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + dx - pad;
                        if (ix < 0 || ix >= W) continue;
                        x[(static_cast<int64_t>(c) * H + iy) * W + ix] += src[static_cast<int64_t>(oy) * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// 2D cross-correlation. x (N,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
template <class T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> b, int stride, int pad) {
    const auto &dx = x.val().dims, &dw = w.val().dims;
    if (x.val().nd != 4 || w.val().nd != 4) throw std::invalid_argument("conv2d: want 4D tensors");
    if (dx[1] != dw[1]) throw std::invalid_argument("conv2d: channel mismatch");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    const int N = dx[0], C = dx[1], H = dx[2], W = dx[3];
    const int Cout = dw[0], kh = dw[2], kw = dw[3];
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
    if (b.defined() && b.val().numel() != Cout) throw std::invalid_argument("conv2d: bias size mismatch");

    const int K = C * kh * kw;
    const int64_t spatial = static_cast<int64_t>(Ho) * Wo;
    TensorT<T> out = TensorT<T>::make({N, Cout, Ho, Wo});
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        std::vector<T> col(static_cast<size_t>(K) * spatial);
        detail::im2col(x.val().data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                       col.data());
        T* on = out.data() + static_cast<int64_t>(n) * Cout * spatial;
        gemm_nn(w.val().data(), col.data(), on, Cout, K, static_cast<int>(spatial), false);
        if (b.defined())
            for (int c = 0; c < Cout; ++c) {
                const T bias = b.val().v[c];
                for (int64_t i = 0; i < spatial; ++i) on[c * spatial + i] += bias;
            }
    }
    std::vector<VarT<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    VarT<T> r = detail::make_op(std::move(out), parents);
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *xn = x.n.get(), *wn = w.n.get();
        NodeT<T>* bn = b.defined() ? b.n.get() : nullptr;
        r.n->backprop = [rn, xn, wn, bn, N, C, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, spatial] {
            // one im2col pass per sample, shared by the dW and dX products
            std::vector<T> all_cols(static_cast<size_t>(N) * K * spatial);
            std::vector<T> wt;
            if (xn->requires_grad) {
                wt.resize(static_cast<size_t>(K) * Cout);
                for (int co = 0; co < Cout; ++co)
                    for (int k = 0; k < K; ++k)
                        wt[static_cast<size_t>(k) * Cout + co] = wn->val.v[static_cast<size_t>(co) * K + k];
            }
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                T* col = all_cols.data() + static_cast<size_t>(n) * K * spatial;
                detail::im2col(xn->val.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad, Ho,
                               Wo, col);
                if (xn->requires_grad) {
                    std::vector<T> dcol(static_cast<size_t>(K) * spatial);
                    gemm_nn(wt.data(), rn->grad.data() + static_cast<int64_t>(n) * Cout * spatial, dcol.data(), K,
                            Cout, static_cast<int>(spatial), false);
                    detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                       xn->grad.data() + static_cast<int64_t>(n) * C * H * W);
                }
            }
            if (wn->requires_grad)
                for (int n = 0; n < N; ++n)  // fixed order keeps dW reproducible
                    gemm_nt(rn->grad.data() + static_cast<int64_t>(n) * Cout * spatial,
                            all_cols.data() + static_cast<size_t>(n) * K * spatial, wn->grad.data(), Cout,
                            static_cast<int>(spatial), K, true);
            if (bn && bn->requires_grad)
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const T* g = rn->grad.data() + (static_cast<int64_t>(n) * Cout + c) * spatial;
                        T acc = T(0);
                        for (int64_t i = 0; i < spatial; ++i) acc += g[i];
                        bn->grad.v[c] += acc;
                    }
        };
    }
    return r;
}

template <class T>
VarT<T> conv1x1(VarT<T> x, VarT<T> w, VarT<T> b) {
    return conv2d(x, w, b, 1, 0);
}

// Bilinear upsampling by an integer factor, align-corners-false convention.
template <class T>
VarT<T> bilinear_up(VarT<T> x, int factor) {
    if (x.val().nd != 4) throw std::invalid_argument("bilinear_up: want 4D");
    if (factor < 1) throw std::invalid_argument("bilinear_up: factor >= 1");
    if (factor == 1) return x;
    const int N = x.val().dims[0], C = x.val().dims[1], H = x.val().dims[2], W = x.val().dims[3];
    const int Ho = H * factor, Wo = W * factor;
    TensorT<T> out = TensorT<T>::make({N, C, Ho, Wo});

    // Per-axis sample positions: source = (dst + 0.5)/factor - 0.5, clamped.
    std::vector<int> y0(Ho), x0(Wo);
    std::vector<T> fy(Ho), fx(Wo);
    auto prep = [&](int n_out, int n_in, std::vector<int>& i0, std::vector<T>& f) {
        for (int o = 0; o < n_out; ++o) {
            double s = (o + 0.5) / factor - 0.5;
            if (s < 0) s = 0;
            if (s > n_in - 1) s = n_in - 1;
            int i = static_cast<int>(std::floor(s));
            if (i > n_in - 2) i = std::max(0, n_in - 2);
            i0[o] = i;
            f[o] = static_cast<T>(n_in > 1 ? s - i : 0);
        }
    };
    prep(Ho, H, y0, fy);
    prep(Wo, W, x0, fx);

#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = x.val().data() + static_cast<int64_t>(nc) * H * W;
        T* dst = out.data() + static_cast<int64_t>(nc) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
            const int iy = y0[oy];
            const T ty = fy[oy];
            const int iy1 = std::min(iy + 1, H - 1);
            for (int ox = 0; ox < Wo; ++ox) {
                const int ix = x0[ox];
                const T tx = fx[ox];
                const int ix1 = std::min(ix + 1, W - 1);
                const T v00 = src[static_cast<int64_t>(iy) * W + ix], v01 = src[static_cast<int64_t>(iy) * W + ix1];
                const T v10 = src[static_cast<int64_t>(iy1) * W + ix], v11 = src[static_cast<int64_t>(iy1) * W + ix1];
                dst[static_cast<int64_t>(oy) * Wo + ox] =
                    (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) + ty * ((T(1) - tx) * v10 + tx * v11);
            }
        }
    }
    VarT<T> r = detail::make_op(std::move(out), {x});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *xn = x.n.get();
        auto y0p = std::make_shared<std::vector<int>>(std::move(y0));
        auto x0p = std::make_shared<std::vector<int>>(std::move(x0));
        auto fyp = std::make_shared<std::vector<T>>(std::move(fy));
        auto fxp = std::make_shared<std::vector<T>>(std::move(fx));
        r.n->backprop = [rn, xn, y0p, x0p, fyp, fxp, N, C, H, W, Ho, Wo] {
#pragma omp parallel for schedule(static)
            for (int nc = 0; nc < N * C; ++nc) {
                const T* g = rn->grad.data() + static_cast<int64_t>(nc) * Ho * Wo;
                T* dx = xn->grad.data() + static_cast<int64_t>(nc) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = (*y0p)[oy];
                    const T ty = (*fyp)[oy];
                    const int iy1 = std::min(iy + 1, H - 1);
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = (*x0p)[ox];
                        const T tx = (*fxp)[ox];
                        const int ix1 = std::min(ix + 1, W - 1);
                        const T gg = g[static_cast<int64_t>(oy) * Wo + ox];
                        dx[static_cast<int64_t>(iy) * W + ix] += (T(1) - ty) * (T(1) - tx) * gg;
                        dx[static_cast<int64_t>(iy) * W + ix1] += (T(1) - ty) * tx * gg;
                        dx[static_cast<int64_t>(iy1) * W + ix] += ty * (T(1) - tx) * gg;
                        dx[static_cast<int64_t>(iy1) * W + ix1] += ty * tx * gg;
                    }
                }
            }
        };
    }
    return r;
}

// ---- reductions ----

template <class T>
VarT<T> sum_all(VarT<T> a) {
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(pairwise_sum(a.val().data(), a.val().numel())));
    VarT<T> r = detail::make_op(std::move(out), {a});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *an = a.n.get();
        const int64_t n = a.val().numel();
        r.n->backprop = [rn, an, n] {
            const T g = rn->grad.v[0];
            for (int64_t i = 0; i < n; ++i) an->grad.v[i] += g;
        };
    }
    return r;
}

template <class T>
VarT<T> mean_all(VarT<T> a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.val().numel()));
}

// Value copy that blocks gradient flow.
template <class T>
VarT<T> detach(VarT<T> a) {
    return constant(a.val());
}

// ---- finite-difference gradient checker ----
//
// Independent of the tape: only forward evaluations. `eval` must rebuild the
// forward pass from the current contents of `data` and return the scalar loss.
// Checks `samples` coordinates (all when samples <= 0); returns the max
// relative error against `analytic`.
template <class T, class F>
double fd_check(T* data, const T* analytic, int64_t n, F eval, double h, int samples, uint64_t seed,
                double denom_floor = 1e-6) {
    std::vector<int64_t> idx;
    if (samples <= 0 || samples >= n) {
        idx.resize(n);
        for (int64_t i = 0; i < n; ++i) idx[i] = i;
    } else {
        Rng rng(seed);
        std::unordered_set<int64_t> used;
        while (static_cast<int>(idx.size()) < samples) {
            int64_t i = static_cast<int64_t>(rng.uniform() * n);
            if (i >= n) i = n - 1;
            if (used.insert(i).second) idx.push_back(i);
        }
    }
    double worst = 0.0;
    for (int64_t i : idx) {
        const T keep = data[i];
        data[i] = keep + static_cast<T>(h);
        const double fp = eval();
        data[i] = keep - static_cast<T>(h);
        const double fm = eval();
        data[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = static_cast<double>(analytic[i]);
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), denom_floor});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace tandepth
