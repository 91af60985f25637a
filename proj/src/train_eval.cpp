#include "tandepth/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tandepth {

BerhuEntry berhu(const ErpImage& pred, const ErpImage& gt, const std::vector<std::uint8_t>& mask) {
    if (pred.width != gt.width || pred.height != gt.height || pred.channels != 1 || gt.channels != 1)
        throw std::invalid_argument("berhu: shape mismatch");
    const size_t npix = gt.n_pixels();
    if (!mask.empty() && mask.size() != npix) throw std::invalid_argument("berhu: mask size mismatch");

    std::vector<double> resid;
    resid.reserve(npix);
    for (size_t i = 0; i < npix; ++i) {
        const int y = static_cast<int>(i) / gt.width, x = static_cast<int>(i) % gt.width;
        if (!mask.empty() && !mask[i]) continue;
        if (!gt.valid(y, x) || !pred.valid(y, x)) continue;
        resid.push_back(std::abs(static_cast<double>(gt.data[i]) - static_cast<double>(pred.data[i])));
    }
    if (resid.empty()) throw std::invalid_argument("berhu: empty mask");

    const double maxr = *std::max_element(resid.begin(), resid.end());
    const double c = 0.2 * maxr;
    for (double& r : resid) r = (r <= c || c == 0.0) ? r : (r * r + c * c) / (2.0 * c);
    BerhuEntry e;
    e.valid_count = static_cast<std::int64_t>(resid.size());
    e.border = c;
    e.value = pairwise_sum(resid.data(), e.valid_count) / static_cast<double>(e.valid_count);
    return e;
}

double total_loss(const LossReport& report) {
    double t = 0.0;
    for (const auto& e : report.iterations) t += e.value;
    return t;
}

MetricsRecord metrics(const ErpImage& pred, const ErpImage& gt, const std::vector<std::uint8_t>& mask) {
    if (pred.width != gt.width || pred.height != gt.height || pred.channels != 1 || gt.channels != 1)
        throw std::invalid_argument("metrics: shape mismatch");
    const size_t npix = gt.n_pixels();
    if (!mask.empty() && mask.size() != npix) throw std::invalid_argument("metrics: mask size mismatch");

    std::vector<double> abs_rel, sq_rel, sq, sq_log;
    std::int64_t n = 0, ok1 = 0, ok2 = 0, ok3 = 0;
    constexpr double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
    for (size_t i = 0; i < npix; ++i) {
        const int y = static_cast<int>(i) / gt.width, x = static_cast<int>(i) % gt.width;
        if (!mask.empty() && !mask[i]) continue;
        if (!gt.valid(y, x) || !pred.valid(y, x)) continue;
        const double g = gt.data[i], p = pred.data[i];
        if (!(g > 0.0) || !(p > 0.0))
            throw std::invalid_argument("metrics: nonpositive depth on a valid pixel");
        const double d = p - g;
        abs_rel.push_back(std::abs(d) / g);
        sq_rel.push_back(d * d / g);
        sq.push_back(d * d);
        const double dl = std::log(p) - std::log(g);
        sq_log.push_back(dl * dl);
        const double ratio = std::max(p / g, g / p);
        ok1 += ratio < t1;
        ok2 += ratio < t2;
        ok3 += ratio < t3;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("metrics: empty mask");

    MetricsRecord r;
    r.valid_count = n;
    r.abs_rel = pairwise_sum(abs_rel.data(), n) / n;
    r.sq_rel = pairwise_sum(sq_rel.data(), n) / n;
    r.rmse = std::sqrt(pairwise_sum(sq.data(), n) / n);
    r.rmse_log = std::sqrt(pairwise_sum(sq_log.data(), n) / n);
    r.delta1 = static_cast<double>(ok1) / n;
    r.delta2 = static_cast<double>(ok2) / n;
    r.delta3 = static_cast<double>(ok3) / n;
    return r;
}

std::vector<SceneSpec> make_scenes(int count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("make_scenes: count must be >= 1");
    std::vector<SceneSpec> scenes(count);
    for (int i = 0; i < count; ++i) {
        const std::uint64_t child = seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(i + 1));
        Rng rng(child);
        scenes[i].half_x = rng.uniform(1.2, 3.0);
        scenes[i].half_y = rng.uniform(1.2, 3.0);
        scenes[i].half_z = rng.uniform(1.0, 2.2);
        scenes[i].texture_id = i;
        scenes[i].seed = child;
    }
    return scenes;
}

double box_exit_distance(const SceneSpec& spec, double lambda, double phi) {
    double d[3];
    sphere_to_unit(lambda, phi, d);
    const double h[3] = {spec.half_x, spec.half_y, spec.half_z};
    double t = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        if (d[i] == 0.0) continue;
        t = std::min(t, (d[i] > 0.0 ? h[i] : -h[i]) / d[i]);
    }
    return t;
}

RenderedScene render_scene(const SceneSpec& spec, int width, int height) {
    if (!(spec.half_x > 0 && spec.half_y > 0 && spec.half_z > 0))
        throw std::invalid_argument("render_scene: half-extents must be positive");
    RenderedScene out;
    out.rgb = ErpImage::make(width, height, 3);
    out.depth = ErpImage::make(width, height, 1);

    // Per-face albedo and texture phases, deterministic from the scene seed.
    Rng rng(spec.seed * 1315423911ull + 17);
    double albedo[6][3];
    for (auto& face : albedo)
        for (double& ch : face) ch = rng.uniform(0.25, 0.95);
    const double fa = rng.uniform(1.0, 2.5), fb = rng.uniform(1.0, 2.5), fc = rng.uniform(1.0, 2.5);
    const double phase = rng.uniform(0.0, 2.0 * M_PI) + 0.3 * spec.texture_id;

    const double h[3] = {spec.half_x, spec.half_y, spec.half_z};
#pragma omp parallel for schedule(static)
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const SphericalPoint s = erp_to_sphere(x, y, width, height);
            double d[3];
            sphere_to_unit(s.lambda, s.phi, d);
            double t = std::numeric_limits<double>::infinity();
            int face_axis = 0;
            for (int i = 0; i < 3; ++i) {
                if (d[i] == 0.0) continue;
                const double ti = (d[i] > 0.0 ? h[i] : -h[i]) / d[i];
                if (ti < t) {
                    t = ti;
                    face_axis = i;
                }
            }
            out.depth.at(0, y, x) = static_cast<float>(t);
            const int face = 2 * face_axis + (d[face_axis] > 0.0 ? 0 : 1);
            const double lambert = std::abs(d[face_axis]);  // face normal is the hit axis
            const double px = d[0] * t, py = d[1] * t, pz = d[2] * t;
            const double tex = 0.75 + 0.25 * std::sin(fa * px + fb * py + fc * pz + phase);
            for (int c = 0; c < 3; ++c)
                out.rgb.at(c, y, x) = static_cast<float>(albedo[face][c] * (0.35 + 0.65 * lambert) * tex);
        }
    }
    return out;
}

void PipelineConfig::validate() const {
    model.validate();
    if (layout.patch_res != model.patch_res)
        throw std::invalid_argument("pipeline config: layout patch_res differs from model patch_res");
    if (layout.n_patches() != model.n_patches)
        throw std::invalid_argument("pipeline config: layout pose count differs from model n_patches");
    if (erp_width != 2 * erp_height || erp_height < 2)
        throw std::invalid_argument("pipeline config: ERP width must equal 2*height");
}

PipelineContext PipelineContext::build(const PipelineConfig& cfg) {
    cfg.validate();
    PipelineContext ctx;
    ctx.cfg = cfg;
    ctx.tables = build_tables(cfg.layout, cfg.erp_width, cfg.erp_height);
    ctx.attrs0 = build_attrs(cfg.layout, cfg.model.feat_res());
    ctx.coverage.resize(ctx.tables.inv_count.size());
    for (size_t i = 0; i < ctx.coverage.size(); ++i) ctx.coverage[i] = ctx.tables.inv_count[i] > 0;
    return ctx;
}

ErpImage merged_to_image(const Tensor& t, const std::vector<std::uint8_t>& coverage) {
    ErpImage img = ErpImage::make(t.dims[3], t.dims[2], 1);
    img.data.assign(t.v.begin(), t.v.end());
    bool all = true;
    for (std::uint8_t c : coverage) all = all && c;
    if (!all) img.mask = coverage;
    return img;
}

InferResult infer(const ErpImage& rgb, const ModelT<float>& model, const PipelineContext& ctx, int iters) {
    if (rgb.width != ctx.cfg.erp_width || rgb.height != ctx.cfg.erp_height)
        throw std::invalid_argument("infer: image shape does not match pipeline context");
    if (rgb.channels != model.cfg.in_channels) throw std::invalid_argument("infer: channel count mismatch");
    const PatchStack patches = extract_patches(rgb, ctx.tables);
    VarT<float> pvar = constant(stack_to_tensor<float>(patches));
    auto merged = run_pipeline(ctx, model, pvar, iters);
    InferResult res;
    for (auto& m : merged) res.per_iteration.push_back(merged_to_image(m.val(), ctx.coverage));
    res.depth = res.per_iteration.back();
    return res;
}

TrainResult train(ModelT<float>& model, const PipelineContext& ctx, const std::vector<SceneSpec>& scenes,
                  const TrainOptions& options) {
    if (scenes.empty()) throw std::invalid_argument("train: need at least one scene");
    if (options.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    if (options.train_iters < 1 || options.train_iters > 4)
        throw std::invalid_argument("train: train_iters must be in 1..4");

    // Scenes are fixed: render and extract once.
    struct Prepared {
        TensorT<float> patches;
        ErpImage gt;
    };
    std::vector<Prepared> prep;
    prep.reserve(scenes.size());
    for (const SceneSpec& s : scenes) {
        RenderedScene r = render_scene(s, ctx.cfg.erp_width, ctx.cfg.erp_height);
        prep.push_back({stack_to_tensor<float>(extract_patches(r.rgb, ctx.tables)), std::move(r.depth)});
    }

    AdamT<float> adam;
    TrainResult result;
    result.trace.reserve(options.steps);

    for (int step = 0; step < options.steps; ++step) {
        const Prepared& sample = prep[step % prep.size()];
        const double lr = cosine_lr(options.lr, step, options.steps);

        VarT<float> pvar = constant(sample.patches);
        auto merged = run_pipeline(ctx, model, pvar, options.train_iters);

        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        VarT<float> loss;
        for (size_t it = 0; it < merged.size(); ++it) {
            BerhuEntry entry;
            VarT<float> li = berhu_var(merged[it], sample.gt, ctx.coverage, &entry);
            rec.iteration_losses.push_back(entry.value);
            loss = it == 0 ? li : add(loss, li);
        }
        rec.loss = static_cast<double>(loss.val().v[0]);
        if (!std::isfinite(rec.loss))
            throw std::runtime_error("train: loss diverged (non-finite) at step " + std::to_string(step));

        model.params.zero_grads();
        backward(loss);
        adam.step(model.params, lr);
        result.trace.push_back(std::move(rec));
    }
    return result;
}

}  // namespace tandepth
