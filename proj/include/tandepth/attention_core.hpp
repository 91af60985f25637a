#pragma once

#include "tandepth/autodiff.hpp"

namespace tandepth {

// Parameters of one post-norm transformer block. Q/K/V and the output
// projection are bias-free (Q = X W_Q as written); the FFN layers are affine.
template <class T>
struct AttentionBlockT {
    VarT<T> wq, wk, wv, wo;              // (d, d)
    VarT<T> ln1_g, ln1_b, ln2_g, ln2_b;  // (d)
    VarT<T> ffn_w1, ffn_b1;              // (d, 4d), (4d)
    VarT<T> ffn_w2, ffn_b2;              // (4d, d), (d)
};

// One token per patch: 1x1 channel reduction, row-major flatten of each patch
// map to a d-vector, plus the learnable positional embedding (N, d).
template <class T>
VarT<T> tokenize(VarT<T> deep_feats, VarT<T> reduce_w, VarT<T> reduce_b, VarT<T> e_pos) {
    if (deep_feats.val().nd != 4) throw std::invalid_argument("tokenize: want 4D feature maps");
    VarT<T> red = conv1x1(deep_feats, reduce_w, reduce_b);
    const auto& s = red.val().dims;
    const int n = s[0], d = s[1] * s[2] * s[3];
    if (e_pos.val().nd != 2 || e_pos.val().dims[0] != n || e_pos.val().dims[1] != d)
        throw std::invalid_argument("tokenize: positional embedding is " + e_pos.val().shape_str() + ", tokens want (" +
                                    std::to_string(n) + "," + std::to_string(d) + ")");
    return add(reshape(red, {n, d}), e_pos);
}

// Multi-head self-attention over the N patch tokens:
// per head softmax(Q K^T / sqrt(d_h)) V, heads concatenated, then projected.
template <class T>
VarT<T> mhsa(VarT<T> z, const AttentionBlockT<T>& p, int heads) {
    const int d = z.val().dims[1];
    if (heads < 1 || d % heads != 0) throw std::invalid_argument("mhsa: d must be divisible by heads");
    const int dh = d / heads;
    VarT<T> q = matmul_nn(z, p.wq);
    VarT<T> k = matmul_nn(z, p.wk);
    VarT<T> v = matmul_nn(z, p.wv);
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<VarT<T>> head_out;
    head_out.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        VarT<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        VarT<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        VarT<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        VarT<T> attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_dh));
        head_out.push_back(matmul_nn(attn, vh));
    }
    return matmul_nn(concat_cols(head_out), p.wo);
}

// Attention weights alone (for the probability-row invariants): (heads*N, N).
template <class T>
TensorT<T> attention_rows(VarT<T> z, const AttentionBlockT<T>& p, int heads) {
    const int d = z.val().dims[1], n = z.val().dims[0];
    const int dh = d / heads;
    VarT<T> q = matmul_nn(z, p.wq);
    VarT<T> k = matmul_nn(z, p.wk);
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<T> rows = TensorT<T>::make({heads * n, n});
    for (int h = 0; h < heads; ++h) {
        VarT<T> attn = softmax_rows(
            scale(matmul_nt(slice_cols(q, h * dh, (h + 1) * dh), slice_cols(k, h * dh, (h + 1) * dh)), inv_sqrt_dh));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) rows.at(h * n + i, j) = attn.val().at(i, j);
    }
    return rows;
}

// Post-norm residual block:
//   z' = Norm(MSA(z) + z);  z_out = Norm(FFN(z') + z').
template <class T>
VarT<T> transformer_block(VarT<T> z, const AttentionBlockT<T>& p, int heads) {
    VarT<T> zp = layer_norm(add(mhsa(z, p, heads), z), p.ln1_g, p.ln1_b);
    VarT<T> ff = linear(silu(linear(zp, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
    return layer_norm(add(ff, zp), p.ln2_g, p.ln2_b);
}

// Unflatten, 1x1 channel expansion, and residual add of the original deep
// features.
template <class T>
VarT<T> detokenize(VarT<T> z, VarT<T> expand_w, VarT<T> expand_b, VarT<T> deep_feats) {
    const auto& ds = deep_feats.val().dims;
    const int cr = expand_w.val().dims[1];
    if (z.val().nd != 2 || z.val().dims[0] != ds[0] || z.val().dims[1] != cr * ds[2] * ds[3])
        throw std::invalid_argument("detokenize: token shape inconsistent with deep features");
    VarT<T> un = reshape(z, {ds[0], cr, ds[2], ds[3]});
    return add(conv1x1(un, expand_w, expand_b), deep_feats);
}

}  // namespace tandepth
