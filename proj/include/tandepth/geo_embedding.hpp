#pragma once

#include <memory>
#include <optional>

#include "tandepth/autodiff.hpp"
#include "tandepth/patch_pipeline.hpp"
#include "tandepth/sphere_geometry.hpp"

namespace tandepth {

// Lower bound applied when resampling rho from a previous depth estimate.
inline constexpr double kDepthFloor = 1e-3;

// Per-patch, per-pixel spherical attributes (lambda, phi, rho, lambda_c,
// phi_c) at the encoder stage-1 resolution. Angles come straight from a
// tangent_grid of that resolution; rho starts at 1 (unit sphere) and is
// replaced by resampled depth between iterations.
struct GeomAttrs {
    int n = 0;
    int res = 0;                     // feature resolution
    std::vector<double> lambda;      // n*res*res
    std::vector<double> phi;         // n*res*res
    std::vector<double> rho;         // n*res*res
    std::vector<double> lambda_c;    // n
    std::vector<double> phi_c;       // n

    size_t pix_count() const { return static_cast<size_t>(n) * res * res; }
};

// prev_depth absent => rho = 1 everywhere. Present => rho bilinearly sampled
// from it at sphere_to_erp(lambda, phi), clamped at kDepthFloor; invalid
// samples fall back to 1.
GeomAttrs build_attrs(const PatchLayout& layout, int feat_res, const ErpImage* prev_depth = nullptr);

// New attrs with rho re-sampled from merged_depth; angles untouched.
GeomAttrs update_rho(const GeomAttrs& attrs, const ErpImage& merged_depth);

// Attrs as a (N,5,res,res) constant tensor, channel order
// (lambda, phi, rho, lambda_c, phi_c); angles in radians, rho raw.
template <class T>
TensorT<T> attrs_tensor(const GeomAttrs& a) {
    TensorT<T> t = TensorT<T>::make({a.n, 5, a.res, a.res});
    const size_t plane = static_cast<size_t>(a.res) * a.res;
    for (int p = 0; p < a.n; ++p)
        for (size_t i = 0; i < plane; ++i) {
            const size_t src = p * plane + i;
            t.v[(static_cast<size_t>(p) * 5 + 0) * plane + i] = static_cast<T>(a.lambda[src]);
            t.v[(static_cast<size_t>(p) * 5 + 1) * plane + i] = static_cast<T>(a.phi[src]);
            t.v[(static_cast<size_t>(p) * 5 + 2) * plane + i] = static_cast<T>(a.rho[src]);
            t.v[(static_cast<size_t>(p) * 5 + 3) * plane + i] = static_cast<T>(a.lambda_c[p]);
            t.v[(static_cast<size_t>(p) * 5 + 4) * plane + i] = static_cast<T>(a.phi_c[p]);
        }
    return t;
}

// Attrs tensor whose rho channel comes from the tape (N,1,res,res); the four
// angle channels are constants.
template <class T>
VarT<T> attrs_var_with_rho(const GeomAttrs& a, VarT<T> rho) {
    const auto& d = rho.val().dims;
    if (rho.val().nd != 4 || d[0] != a.n || d[1] != 1 || d[2] != a.res || d[3] != a.res)
        throw std::invalid_argument("attrs_var_with_rho: rho shape mismatch");
    const size_t plane = static_cast<size_t>(a.res) * a.res;
    TensorT<T> ang = TensorT<T>::make({a.n, 2, a.res, a.res});
    TensorT<T> ctr = TensorT<T>::make({a.n, 2, a.res, a.res});
    for (int p = 0; p < a.n; ++p)
        for (size_t i = 0; i < plane; ++i) {
            const size_t src = p * plane + i;
            ang.v[(static_cast<size_t>(p) * 2 + 0) * plane + i] = static_cast<T>(a.lambda[src]);
            ang.v[(static_cast<size_t>(p) * 2 + 1) * plane + i] = static_cast<T>(a.phi[src]);
            ctr.v[(static_cast<size_t>(p) * 2 + 0) * plane + i] = static_cast<T>(a.lambda_c[p]);
            ctr.v[(static_cast<size_t>(p) * 2 + 1) * plane + i] = static_cast<T>(a.phi_c[p]);
        }
    return concat_channels<T>({constant(std::move(ang)), rho, constant(std::move(ctr))});
}

// Pointwise two-layer MLP over the 5 attribute channels, shared across all
// pixels and patches (realized as 1x1 convolutions):
// attrs5 -> hidden (silu) -> out channels.
template <class T>
VarT<T> embed(VarT<T> attrs5, VarT<T> w1, VarT<T> b1, VarT<T> w2, VarT<T> b2) {
    if (attrs5.val().nd != 4 || attrs5.val().dims[1] != 5)
        throw std::invalid_argument("embed: want (N,5,res,res) attributes");
    return conv1x1(silu(conv1x1(attrs5, w1, b1)), w2, b2);
}

// Element-wise sum of image and geometric features (early fusion after
// encoder stage 1).
template <class T>
VarT<T> fuse(VarT<T> image_feats, VarT<T> geom_feats) {
    if (!image_feats.val().same_shape(geom_feats.val()))
        throw std::invalid_argument("fuse: feature shapes differ");
    return add(image_feats, geom_feats);
}

// Differentiable rho resampling: bilinear sample of an ERP depth map on the
// tape at each attrs pixel (longitude wrap, pole clamp). Samples touching an
// invalid ERP pixel return the fixed fallback 1; samples at or below the depth
// floor are clamped with zero gradient.
template <class T>
VarT<T> sample_rho_var(VarT<T> erp, const GeomAttrs& attrs, const std::vector<std::uint8_t>& erp_valid,
                       double depth_floor = kDepthFloor) {
    const auto& d = erp.val().dims;
    if (erp.val().nd != 4 || d[0] != 1 || d[1] != 1) throw std::invalid_argument("sample_rho_var: want (1,1,H,W)");
    const int H = d[2], W = d[3];
    if (!erp_valid.empty() && erp_valid.size() != static_cast<size_t>(H) * W)
        throw std::invalid_argument("sample_rho_var: mask size mismatch");

    struct Tap {
        int64_t idx[4];
        T w[4];
        std::uint8_t live;  // 1 when the gradient flows
    };
    const size_t npix = attrs.pix_count();
    auto taps = std::make_shared<std::vector<Tap>>(npix);
    TensorT<T> out = TensorT<T>::make({attrs.n, 1, attrs.res, attrs.res});

    for (size_t i = 0; i < npix; ++i) {
        double xe, ye;
        sphere_to_erp(attrs.lambda[i], attrs.phi[i], W, H, xe, ye);
        const int x0r = static_cast<int>(std::floor(xe));
        const double fx = xe - x0r;
        double yc = std::clamp(ye, 0.0, static_cast<double>(H - 1));
        int y0 = static_cast<int>(std::floor(yc));
        if (y0 > H - 2) y0 = H - 2 >= 0 ? H - 2 : 0;
        const double fy = yc - y0;
        const int xa = ((x0r % W) + W) % W;
        const int xb = (xa + 1) % W;
        const int y1 = std::min(y0 + 1, H - 1);
        Tap& t = (*taps)[i];
        t.idx[0] = static_cast<int64_t>(y0) * W + xa;
        t.idx[1] = static_cast<int64_t>(y0) * W + xb;
        t.idx[2] = static_cast<int64_t>(y1) * W + xa;
        t.idx[3] = static_cast<int64_t>(y1) * W + xb;
        t.w[0] = static_cast<T>((1 - fx) * (1 - fy));
        t.w[1] = static_cast<T>(fx * (1 - fy));
        t.w[2] = static_cast<T>((1 - fx) * fy);
        t.w[3] = static_cast<T>(fx * fy);
        bool ok = true;
        if (!erp_valid.empty())
            for (int k = 0; k < 4; ++k) ok = ok && erp_valid[t.idx[k]] != 0;
        if (!ok) {
            t.live = 0;
            out.v[i] = T(1);  // fallback to the unit sphere
            continue;
        }
        T val = T(0);
        for (int k = 0; k < 4; ++k) val += t.w[k] * erp.val().v[t.idx[k]];
        if (val <= static_cast<T>(depth_floor)) {
            t.live = 0;
            out.v[i] = static_cast<T>(depth_floor);
        } else {
            t.live = 1;
            out.v[i] = val;
        }
    }

    VarT<T> r = detail::make_op(std::move(out), {erp});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *en = erp.n.get();
        r.n->backprop = [rn, en, taps, npix] {
            for (size_t i = 0; i < npix; ++i) {
                const Tap& t = (*taps)[i];
                if (!t.live) continue;
                const T g = rn->grad.v[i];
                for (int k = 0; k < 4; ++k) en->grad.v[t.idx[k]] += g * t.w[k];
            }
        };
    }
    return r;
}

}  // namespace tandepth
