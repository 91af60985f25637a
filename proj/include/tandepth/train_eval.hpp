#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "tandepth/model.hpp"
#include "tandepth/patch_pipeline.hpp"

namespace tandepth {

// ---- BerHu loss (reverse Huber) ----
//
// DeltaD = |gt - pred| over valid pixels, border c = 0.2 * max(DeltaD) taken
// over the batch, per-pixel loss |DeltaD| below the border and
// (DeltaD^2 + c^2)/(2c) above it, reduced by the mean over valid pixels. The
// subgradient at DeltaD = c comes from the linear branch.

struct BerhuEntry {
    double value = 0.0;
    double border = 0.0;       // c
    std::int64_t valid_count = 0;
};

struct LossReport {
    std::vector<BerhuEntry> iterations;
    double total = 0.0;  // exact sum of the iteration values
};

// mask: joint validity (empty = all valid); throws when no pixel is valid.
BerhuEntry berhu(const ErpImage& pred, const ErpImage& gt, const std::vector<std::uint8_t>& mask = {});

double total_loss(const LossReport& report);

// Tape version; pred is (1,1,H,W). The border's dependence on the batch
// maximum is differentiated through (subgradient at the first argmax), which
// keeps the analytic gradient consistent with finite differences.
template <class T>
VarT<T> berhu_var(VarT<T> pred, const ErpImage& gt, const std::vector<std::uint8_t>& mask, BerhuEntry* entry = nullptr) {
    const auto& d = pred.val().dims;
    if (pred.val().nd != 4 || d[0] != 1 || d[1] != 1 || d[2] != gt.height || d[3] != gt.width)
        throw std::invalid_argument("berhu_var: pred/gt shapes differ");
    if (gt.channels != 1) throw std::invalid_argument("berhu_var: gt must be single-channel");
    const size_t npix = gt.n_pixels();
    if (!mask.empty() && mask.size() != npix) throw std::invalid_argument("berhu_var: mask size mismatch");

    std::vector<size_t> valid;
    valid.reserve(npix);
    for (size_t i = 0; i < npix; ++i) {
        const bool ok = (mask.empty() || mask[i]) && (gt.mask.empty() || gt.mask[i]);
        if (ok) valid.push_back(i);
    }
    if (valid.empty()) throw std::invalid_argument("berhu_var: empty mask");

    const int64_t n = static_cast<int64_t>(valid.size());
    std::vector<double> resid(valid.size());
    double maxr = 0.0;
    size_t argmax = 0;
    for (size_t k = 0; k < valid.size(); ++k) {
        const double r = std::abs(static_cast<double>(gt.data[valid[k]]) - static_cast<double>(pred.val().v[valid[k]]));
        resid[k] = r;
        if (r > maxr) {
            maxr = r;
            argmax = k;
        }
    }
    const double c = 0.2 * maxr;
    std::vector<double> per_pixel(valid.size());
    for (size_t k = 0; k < valid.size(); ++k) {
        const double r = resid[k];
        per_pixel[k] = (r <= c || c == 0.0) ? r : (r * r + c * c) / (2.0 * c);
    }
    const double value = pairwise_sum(per_pixel.data(), n) / static_cast<double>(n);
    if (entry) *entry = {value, c, n};

    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(value));
    VarT<T> r = detail::make_op(std::move(out), {pred});
    if (r.n->requires_grad) {
        NodeT<T>*rn = r.n.get(), *pn = pred.n.get();
        auto vidx = std::make_shared<std::vector<size_t>>(std::move(valid));
        auto res = std::make_shared<std::vector<double>>(std::move(resid));
        auto gtp = std::make_shared<std::vector<float>>(gt.data);
        r.n->backprop = [rn, pn, vidx, res, gtp, c, argmax, n] {
            const double gout = static_cast<double>(rn->grad.v[0]);
            if (gout == 0.0 || c == 0.0) return;
            // dL/dc, accumulated over the quadratic branch
            double dldc = 0.0;
            for (double rr : *res)
                if (rr > c) dldc += (c * c - rr * rr) / (2.0 * c * c);
            dldc /= static_cast<double>(n);
            for (size_t k = 0; k < vidx->size(); ++k) {
                const size_t i = (*vidx)[k];
                const double rr = (*res)[k];
                double dldr = (rr <= c ? 1.0 : rr / c) / static_cast<double>(n);
                if (k == argmax) dldr += 0.2 * dldc;
                const double p = static_cast<double>(pn->val.v[i]);
                const double g = static_cast<double>((*gtp)[i]);
                const double sign = p > g ? 1.0 : (p < g ? -1.0 : 0.0);
                pn->grad.v[i] += static_cast<T>(gout * dldr * sign);
            }
        };
    }
    return r;
}

// ---- metrics ----

struct MetricsRecord {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rmse = 0.0;
    double rmse_log = 0.0;
    double delta1 = 0.0;  // max(p/g, g/p) < 1.25, strict
    double delta2 = 0.0;
    double delta3 = 0.0;
    std::int64_t valid_count = 0;
};

MetricsRecord metrics(const ErpImage& pred, const ErpImage& gt, const std::vector<std::uint8_t>& mask = {});

// ---- analytic box-room scenes ----

struct SceneSpec {
    double half_x = 2.0, half_y = 2.0, half_z = 2.0;  // box half-extents, camera at the origin
    int texture_id = 0;
    std::uint64_t seed = 0;
};

std::vector<SceneSpec> make_scenes(int count, std::uint64_t seed);

struct RenderedScene {
    ErpImage rgb;    // 3 channels in [0,1]
    ErpImage depth;  // exit distance of the pixel ray, always positive
};

// Ray-slab exit distance against the axis-aligned box; rgb is face albedo x
// Lambert shading x a smooth procedural texture.
RenderedScene render_scene(const SceneSpec& spec, int width, int height);

// Analytic depth alone (double precision) for oracle checks.
double box_exit_distance(const SceneSpec& spec, double lambda, double phi);

// ---- end-to-end pipeline ----

struct PipelineConfig {
    ModelConfig model;
    PatchLayout layout;       // patch_res must match model.patch_res
    int erp_width = 128;
    int erp_height = 64;

    void validate() const;
};

// Immutable per-shape state shared by training and inference.
struct PipelineContext {
    PipelineConfig cfg;
    ProjectionTables tables;
    GeomAttrs attrs0;                    // iteration-1 attrs (rho = 1)
    std::vector<std::uint8_t> coverage;  // merged-pixel validity, from tables

    static PipelineContext build(const PipelineConfig& cfg);
};

// Runs `iters` refinement iterations (rho = 1 first, then resampled from the
// previous merge) and returns the merged ERP depth of every iteration.
// detach_rho cuts the gradient path through the rho update (test hook).
template <class T>
std::vector<VarT<T>> run_pipeline(const PipelineContext& ctx, const ModelT<T>& model, VarT<T> patches, int iters,
                                  bool detach_rho = false) {
    if (iters < 1 || iters > 4) throw std::invalid_argument("run_pipeline: iters must be in 1..4");
    std::vector<VarT<T>> merged;
    for (int it = 0; it < iters; ++it) {
        VarT<T> rho;
        if (it > 0) {
            VarT<T> src = detach_rho ? detach(merged.back()) : merged.back();
            rho = sample_rho_var(src, ctx.attrs0, ctx.coverage);
        }
        auto out = model.forward(patches, ctx.attrs0, rho);
        merged.push_back(merge_erp_var(out.depth, out.conf, ctx.tables));
    }
    return merged;
}

ErpImage merged_to_image(const Tensor& t, const std::vector<std::uint8_t>& coverage);

struct InferResult {
    ErpImage depth;                       // final iteration
    std::vector<ErpImage> per_iteration;  // all merges, in order
};

InferResult infer(const ErpImage& rgb, const ModelT<float>& model, const PipelineContext& ctx, int iters);

// ---- training ----

struct TrainOptions {
    int steps = 1000;
    double lr = 1e-4;  // cosine-annealed to 0
    std::uint64_t seed = 1;
    int train_iters = 2;  // unrolled refinement iterations in the loss
};

struct StepRecord {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::vector<double> iteration_losses;
};

struct TrainResult {
    std::vector<StepRecord> trace;
};

// End-to-end training on analytic scenes: per step, the unrolled
// train_iters-iteration loss (sum of per-iteration BerHu) on one scene,
// cycling through the scene list; Adam with cosine annealing. Aborts with a
// diagnostic if the loss turns non-finite.
TrainResult train(ModelT<float>& model, const PipelineContext& ctx, const std::vector<SceneSpec>& scenes,
                  const TrainOptions& options);

}  // namespace tandepth
