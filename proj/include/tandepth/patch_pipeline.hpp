#pragma once

#include <cstdint>
#include <vector>

#include "tandepth/autodiff.hpp"
#include "tandepth/sphere_geometry.hpp"

namespace tandepth {

// Planar (channel-major) real image on the ERP grid, W = 2H. An empty mask
// means every pixel is valid.
struct ErpImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;           // [c][y][x]
    std::vector<std::uint8_t> mask;    // per pixel, optional

    static ErpImage make(int width, int height, int channels);
    float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    const float& at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    bool valid(int y, int x) const { return mask.empty() || mask[static_cast<size_t>(y) * width + x] != 0; }
    size_t n_pixels() const { return static_cast<size_t>(width) * height; }
};

// N square patches, planar per patch: [patch][c][y][x].
struct PatchStack {
    int n = 0;
    int res = 0;
    int channels = 1;
    std::vector<float> data;

    static PatchStack make(int n, int res, int channels);
    float& at(int p, int c, int y, int x) {
        return data[((static_cast<size_t>(p) * channels + c) * res + y) * res + x];
    }
    const float& at(int p, int c, int y, int x) const {
        return data[((static_cast<size_t>(p) * channels + c) * res + y) * res + x];
    }
};

// Confidence weights live in (0, 1) (sigmoid head output); shape-identical to
// a 1-channel PatchStack.
using ConfidenceStack = PatchStack;

// Precomputed sampling maps between the ERP grid and the patch grids.
struct ProjectionTables {
    // One inverse entry: this ERP pixel lands at continuous patch-pixel
    // coordinates (px, py) of patch `patch`.
    struct InvEntry {
        std::int32_t patch = -1;
        float px = 0.f, py = 0.f;
    };
    static constexpr int kMaxOverlap = 8;

    PatchLayout layout;
    int width = 0, height = 0;

    // forward[p]: res*res continuous ERP coordinates (x_e, y_e), row-major.
    std::vector<std::vector<double>> forward;  // 2 doubles per pixel
    // inverse: kMaxOverlap slots per ERP pixel plus a count.
    std::vector<InvEntry> inv_entries;
    std::vector<std::uint8_t> inv_count;

    const InvEntry* entries_at(size_t pixel) const { return inv_entries.data() + pixel * kMaxOverlap; }
    int count_at(size_t pixel) const { return inv_count[pixel]; }
    bool covered(size_t pixel) const { return inv_count[pixel] > 0; }
};

// Deterministic given (layout, W, H); reusable across all images of that
// shape. Throws if any pixel overlaps more than kMaxOverlap patches.
ProjectionTables build_tables(const PatchLayout& layout, int width, int height);

// Bilinear ERP sample with longitude wrap-around (columns W-1 and 0 adjacent)
// and vertical clamp at the poles.
float sample_erp(const ErpImage& img, int c, double x_e, double y_e);
// Mask-aware variant: valid only when all contributing pixels are valid.
bool sample_erp_masked(const ErpImage& img, int c, double x_e, double y_e, float& out);

// Bilinear sample of one patch plane, coordinates clamped to the patch edge.
float sample_patch(const PatchStack& s, int p, int c, double px, double py);

PatchStack extract_patches(const ErpImage& erp, const ProjectionTables& tables);

// Confidence-weighted merge of 1-channel patch depths back onto the ERP grid:
// D(p) = sum_i w_i d_i / (sum_i w_i + eps) over valid entries, falling back to
// the unweighted mean when the weights vanish. Uncovered pixels are masked
// invalid.
ErpImage merge_to_erp(const PatchStack& depths, const ConfidenceStack& conf, const ProjectionTables& tables);

// merge_to_erp with all weights fixed at 1 (the averaging baseline).
ErpImage mean_merge(const PatchStack& depths, const ProjectionTables& tables);

inline constexpr double kMergeEps = 1e-8;

double psnr(const ErpImage& a, const ErpImage& b, double peak = 1.0);

// ---- differentiable merge (training path) ----
//
// Same contract as merge_to_erp, on tape tensors. depth and conf are
// (N,1,res,res); the result is (1,1,H,W). Gradients scatter through the
// bilinear weights into both stacks. The fallback branch differentiates as the
// unweighted mean (weight gradients vanish there).
template <class T>
VarT<T> merge_erp_var(VarT<T> depth, VarT<T> conf, const ProjectionTables& tables) {
    const int res = tables.layout.patch_res, N = tables.layout.n_patches();
    const auto& dd = depth.val().dims;
    if (depth.val().nd != 4 || dd[0] != N || dd[1] != 1 || dd[2] != res || dd[3] != res)
        throw std::invalid_argument("merge_erp_var: depth stack misaligned with tables");
    if (!depth.val().same_shape(conf.val())) throw std::invalid_argument("merge_erp_var: conf stack misaligned");

    const int W = tables.width, H = tables.height;
    const size_t npix = static_cast<size_t>(W) * H;
    TensorT<T> out = TensorT<T>::make({1, 1, H, W});

    struct Tap {  // one bilinear corner of one entry
        int64_t idx;
        T w;
    };
    auto taps_of = [res](const ProjectionTables::InvEntry& e, int patch_elems, Tap taps[4]) {
        double px = std::clamp(static_cast<double>(e.px), 0.0, res - 1.0);
        double py = std::clamp(static_cast<double>(e.py), 0.0, res - 1.0);
        int x0 = std::min(static_cast<int>(px), res - 2 >= 0 ? res - 2 : 0);
        int y0 = std::min(static_cast<int>(py), res - 2 >= 0 ? res - 2 : 0);
        const double fx = px - x0, fy = py - y0;
        const int64_t base = static_cast<int64_t>(e.patch) * patch_elems;
        taps[0] = {base + static_cast<int64_t>(y0) * res + x0, static_cast<T>((1 - fx) * (1 - fy))};
        taps[1] = {base + static_cast<int64_t>(y0) * res + std::min(x0 + 1, res - 1), static_cast<T>(fx * (1 - fy))};
        taps[2] = {base + static_cast<int64_t>(std::min(y0 + 1, res - 1)) * res + x0, static_cast<T>((1 - fx) * fy)};
        taps[3] = {base + static_cast<int64_t>(std::min(y0 + 1, res - 1)) * res + std::min(x0 + 1, res - 1),
                   static_cast<T>(fx * fy)};
    };
    const int patch_elems = res * res;

#pragma omp parallel for schedule(static)
    for (int64_t pix = 0; pix < static_cast<int64_t>(npix); ++pix) {
        const int cnt = tables.count_at(pix);
        if (cnt == 0) {
            out.v[pix] = T(0);
            continue;
        }
        const auto* es = tables.entries_at(pix);
        T num = T(0), den = T(0), plain = T(0);
        Tap taps[4];
        for (int k = 0; k < cnt; ++k) {
            taps_of(es[k], patch_elems, taps);
            T d = T(0), w = T(0);
            for (const Tap& t : taps) {
                d += t.w * depth.val().v[t.idx];
                w += t.w * conf.val().v[t.idx];
            }
            num += w * d;
            den += w;
            plain += d;
        }
        out.v[pix] = den < static_cast<T>(kMergeEps) ? plain / static_cast<T>(cnt)
                                                     : num / (den + static_cast<T>(kMergeEps));
    }

    VarT<T> r = detail::make_op(std::move(out), {depth, conf});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *dn = depth.n.get(), *cn = conf.n.get();
        const ProjectionTables* tb = &tables;
        r.n->backprop = [rn, dn, cn, tb, taps_of, patch_elems, npix] {
            Tap taps[4];
            for (size_t pix = 0; pix < npix; ++pix) {
                const int cnt = tb->count_at(pix);
                if (cnt == 0) continue;
                const T g = rn->grad.v[pix];
                if (g == T(0)) continue;
                const auto* es = tb->entries_at(pix);
                // recompute the per-entry samples
                T num = T(0), den = T(0);
                T dvals[ProjectionTables::kMaxOverlap], wvals[ProjectionTables::kMaxOverlap];
                for (int k = 0; k < cnt; ++k) {
                    taps_of(es[k], patch_elems, taps);
                    T d = T(0), w = T(0);
                    for (const Tap& t : taps) {
                        d += t.w * dn->val.v[t.idx];
                        w += t.w * cn->val.v[t.idx];
                    }
                    dvals[k] = d;
                    wvals[k] = w;
                    num += w * d;
                    den += w;
                }
                if (den < static_cast<T>(kMergeEps)) {
                    const T gd = g / static_cast<T>(cnt);
                    for (int k = 0; k < cnt; ++k) {
                        taps_of(es[k], patch_elems, taps);
                        if (dn->requires_grad)
                            for (const Tap& t : taps) dn->grad.v[t.idx] += gd * t.w;
                    }
                } else {
                    const T inv = T(1) / (den + static_cast<T>(kMergeEps));
                    const T dnum = g * inv;
                    const T dden = -g * num * inv * inv;
                    for (int k = 0; k < cnt; ++k) {
                        taps_of(es[k], patch_elems, taps);
                        const T dd = dnum * wvals[k];
                        const T dw = dnum * dvals[k] + dden;
                        for (const Tap& t : taps) {
                            if (dn->requires_grad) dn->grad.v[t.idx] += dd * t.w;
                            if (cn->requires_grad) cn->grad.v[t.idx] += dw * t.w;
                        }
                    }
                }
            }
        };
    }
    return r;
}

}  // namespace tandepth
