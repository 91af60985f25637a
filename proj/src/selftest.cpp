#include "tandepth/selftest.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "tandepth/io.hpp"
#include "tandepth/train_eval.hpp"

namespace tandepth {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(6);
    os << x;
    return os.str();
}

DTensor random_tensor(std::vector<int> dims, uint64_t seed, double lo = -0.7, double hi = 0.7) {
    DTensor t = DTensor::make(std::move(dims));
    Rng rng(seed);
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

// max FD error of d(sum(weight*f(x)))/dx for a unary graph builder
template <class Builder>
double unary_grad_err(DTensor x0, Builder build, uint64_t seed, int samples = 30) {
    VarT<double> x = make_leaf(std::move(x0), true);
    VarT<double> y = build(x);
    DTensor w = random_tensor({static_cast<int>(y.val().numel())}, seed * 31 + 7);
    w.nd = y.val().nd;
    w.dims = y.val().dims;
    backward(sum_all(mul(y, constant(w))));
    auto eval = [&] {
        VarT<double> xe = make_leaf(x.val(), false);
        return sum_all(mul(build(xe), constant(w))).val().v[0];
    };
    return fd_check(x.val().data(), x.grad().data(), x.val().numel(), eval, 1e-5, samples, seed);
}

CriterionResult criterion_roundtrip() {
    const auto t0 = Clock::now();
    CriterionResult r{1, "gnomonic roundtrip (1e5 seeded pairs, cos c > 0.1)", false, "", 0.0};
    Rng rng(20240101);
    double worst = 0.0;
    int tested = 0;
    while (tested < 100000) {
        const SphericalPoint p{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0)), 1.0};
        const TangentPose q{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0))};
        if (std::cos(angular_distance(p, {q.lambda_c, q.phi_c, 1.0})) <= 0.1) continue;
        const auto f = gnomonic_forward(p, q);
        if (!f.valid) continue;
        ++tested;
        worst = std::max(worst, angular_distance(p, gnomonic_inverse(f.coord, q)));
    }
    r.seconds = seconds_since(t0);
    r.passed = worst < 1e-9 && r.seconds < 5.0;
    r.detail = "max angular error " + fmt(worst) + " rad in " + fmt(r.seconds) + " s";
    return r;
}

CriterionResult criterion_closed_forms() {
    const auto t0 = Clock::now();
    CriterionResult r{2, "equatorial/meridian closed forms at pose (0,0)", false, "", 0.0};
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        const double a = -1.4 + 2.8 * k / 999.0;  // sweep inside the hemisphere
        const auto eq = gnomonic_forward({a, 0.0, 1.0}, {0.0, 0.0});
        worst = std::max(worst, std::abs(eq.coord.x_t - std::tan(a)));
        worst = std::max(worst, std::abs(eq.coord.y_t));
        const auto me = gnomonic_forward({0.0, a * 0.99, 1.0}, {0.0, 0.0});
        worst = std::max(worst, std::abs(me.coord.y_t - std::tan(a * 0.99)));
        worst = std::max(worst, std::abs(me.coord.x_t));
    }
    r.seconds = seconds_since(t0);
    r.passed = worst < 1e-12;
    r.detail = "max deviation " + fmt(worst);
    return r;
}

CriterionResult criterion_coverage() {
    const auto t0 = Clock::now();
    CriterionResult r{3, "18-patch 80-degree layout covers every ERP pixel", false, "", 0.0};
    size_t uncovered = 0;
    for (const int h : {512, 256}) {
        const ProjectionTables t = build_tables(default_layout(), 2 * h, h);
        for (std::uint8_t c : t.inv_count) uncovered += c == 0;
    }
    r.seconds = seconds_since(t0);
    r.passed = uncovered == 0;
    r.detail = std::to_string(uncovered) + " uncovered pixels at 512x1024 and 256x512";
    return r;
}

CriterionResult criterion_resampling(const std::string& data_dir) {
    const auto t0 = Clock::now();
    CriterionResult r{4, "extract/merge roundtrip on the committed smooth image", false, "", 0.0};
    const ErpImage img = png_to_erp(read_png(data_dir + "/smooth_512x1024.png"));
    const ProjectionTables t = build_tables(default_layout(), 1024, 512);
    const double db = psnr(mean_merge(extract_patches(img, t), t), img);

    ErpImage flat = ErpImage::make(1024, 512, 1);
    std::fill(flat.data.begin(), flat.data.end(), 0.7f);
    const ErpImage back = mean_merge(extract_patches(flat, t), t);
    double flat_err = 0.0;
    for (float v : back.data) flat_err = std::max(flat_err, std::abs(v - 0.7));

    r.seconds = seconds_since(t0);
    r.passed = db > 30.0 && flat_err < 1e-6;
    r.detail = "PSNR " + fmt(db) + " dB, constant roundtrip error " + fmt(flat_err);
    return r;
}

CriterionResult criterion_gradients() {
    const auto t0 = Clock::now();
    CriterionResult r{5, "finite-difference gradient suite (ops + full pipeline)", false, "", 0.0};
    double worst = 0.0;

    worst = std::max(worst, unary_grad_err(random_tensor({2, 3, 6, 6}, 1), [](VarT<double> v) {
        return conv2d(v, make_leaf(random_tensor({4, 3, 3, 3}, 2), false),
                      make_leaf(random_tensor({4}, 3), false), 2, 1);
    }, 10));
    worst = std::max(worst, unary_grad_err(random_tensor({1, 2, 5, 5}, 4),
                                           [](VarT<double> v) { return bilinear_up(v, 2); }, 11));
    worst = std::max(worst, unary_grad_err(random_tensor({4, 7}, 5, -3.0, 3.0),
                                           [](VarT<double> v) { return silu(v); }, 12));
    worst = std::max(worst, unary_grad_err(random_tensor({4, 7}, 6, -3.0, 3.0),
                                           [](VarT<double> v) { return sigmoid(v); }, 13));
    worst = std::max(worst, unary_grad_err(random_tensor({4, 7}, 7, -3.0, 3.0),
                                           [](VarT<double> v) { return softplus(v); }, 14));
    worst = std::max(worst, unary_grad_err(random_tensor({5, 6}, 8, -2.0, 2.0),
                                           [](VarT<double> v) { return softmax_rows(v); }, 15));
    worst = std::max(worst, unary_grad_err(random_tensor({5, 6}, 9), [](VarT<double> v) {
        return layer_norm(v, make_leaf(random_tensor({6}, 10, 0.5, 1.5), false),
                          make_leaf(random_tensor({6}, 11), false));
    }, 16));
    worst = std::max(worst, unary_grad_err(random_tensor({4, 6}, 12), [](VarT<double> v) {
        return linear(v, make_leaf(random_tensor({6, 5}, 13), false), make_leaf(random_tensor({5}, 14), false));
    }, 17));
    worst = std::max(worst, unary_grad_err(random_tensor({4, 6}, 15), [](VarT<double> v) {
        return matmul_nt(v, make_leaf(random_tensor({3, 6}, 16), false));
    }, 18));

    // full 2-patch / 16x16 / L=2 / H=2 pipeline against central differences
    PipelineConfig cfg;
    cfg.model.patch_res = 16;
    cfg.model.n_patches = 2;
    cfg.model.c0 = 4;
    cfg.model.c1 = 6;
    cfg.model.c2 = 8;
    cfg.model.embed_hidden = 5;
    cfg.model.reduce_channels = 2;
    cfg.model.blocks = 2;
    cfg.model.heads = 2;
    cfg.layout = build_patch_layout({{-25.0, 1}, {25.0, 1}}, 85.0, 16);
    cfg.erp_width = 32;
    cfg.erp_height = 16;
    const PipelineContext ctx = PipelineContext::build(cfg);
    auto model = ModelT<double>::init(cfg.model, 33);
    const RenderedScene scene = render_scene(make_scenes(1, 77)[0], cfg.erp_width, cfg.erp_height);
    const TensorT<double> patches = stack_to_tensor<double>(extract_patches(scene.rgb, ctx.tables));

    auto loss_value = [&] {
        auto merged = run_pipeline(ctx, model, constant(patches), 2);
        VarT<double> loss;
        for (size_t it = 0; it < merged.size(); ++it) {
            VarT<double> li = berhu_var(merged[it], scene.depth, ctx.coverage);
            loss = it == 0 ? li : add(loss, li);
        }
        return loss;
    };
    model.params.zero_grads();
    backward(loss_value());
    auto eval = [&] { return loss_value().val().v[0]; };
    for (auto& entry : model.params.entries) {
        auto& v = entry.var;
        const int samples = v.val().numel() <= 8 ? 0 : 8;
        worst = std::max(worst, fd_check(v.n->val.data(), v.grad().data(), v.val().numel(), eval, 1e-4, samples,
                                         std::hash<std::string>{}(entry.name)));
    }

    r.seconds = seconds_since(t0);
    r.passed = worst < 1e-3 && r.seconds < 60.0;
    r.detail = "max relative error " + fmt(worst) + " in " + fmt(r.seconds) + " s";
    return r;
}

CriterionResult criterion_attention() {
    const auto t0 = Clock::now();
    CriterionResult r{6, "attention invariants and the 3-token fixture", false, "", 0.0};
    double worst_sum = 0.0, worst_perm = 0.0, worst_fix = 0.0;

    auto random_block = [](int d, uint64_t seed) {
        Rng rng(seed);
        auto draw = [&](std::vector<int> dims) {
            DTensor t = DTensor::make(std::move(dims));
            for (auto& v : t.v) v = rng.uniform(-0.4, 0.4);
            return make_leaf(t, false);
        };
        AttentionBlockT<double> b;
        b.wq = draw({d, d});
        b.wk = draw({d, d});
        b.wv = draw({d, d});
        b.wo = draw({d, d});
        DTensor ones = DTensor::make({d});
        ones.fill(1.0);
        b.ln1_g = make_leaf(ones, false);
        b.ln1_b = make_leaf(DTensor::make({d}), false);
        b.ln2_g = make_leaf(ones, false);
        b.ln2_b = make_leaf(DTensor::make({d}), false);
        b.ffn_w1 = draw({d, 4 * d});
        b.ffn_b1 = draw({4 * d});
        b.ffn_w2 = draw({4 * d, d});
        b.ffn_b2 = draw({d});
        return b;
    };

    // softmax rows are probability vectors
    const int n = 6, d = 8, heads = 4;
    DTensor z = random_tensor({n, d}, 100, -2.0, 2.0);
    const auto blk = random_block(d, 101);
    const DTensor rows = attention_rows(constant(z), blk, heads);
    for (int i = 0; i < rows.dims[0]; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += rows.at(i, j);
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }

    // permutation equivariance of tokens + positional rows
    DTensor epos = random_tensor({n, d}, 102);
    auto run = [&](const DTensor& zz, const DTensor& ee) {
        VarT<double> t = add(constant(zz), constant(ee));
        for (int l = 0; l < 2; ++l) t = transformer_block(t, random_block(d, 200 + l), heads);
        return t.val();
    };
    const DTensor base = run(z, epos);
    const int perm[6] = {4, 2, 0, 5, 1, 3};
    DTensor pz = z, pe = epos;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            pz.at(i, j) = z.at(perm[i], j);
            pe.at(i, j) = epos.at(perm[i], j);
        }
    const DTensor permuted = run(pz, pe);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            worst_perm = std::max(worst_perm, std::abs(permuted.at(i, j) - base.at(perm[i], j)));

    // frozen 3-token post-norm block fixture (d=2, 1 head)
    auto mat = [](std::vector<int> dims, std::vector<double> values) {
        DTensor t = DTensor::make(std::move(dims));
        t.v = std::move(values);
        return constant(t);
    };
    AttentionBlockT<double> fix;
    fix.wq = mat({2, 2}, {0.4, -0.2, 0.1, 0.5});
    fix.wk = mat({2, 2}, {-0.3, 0.2, 0.6, -0.1});
    fix.wv = mat({2, 2}, {0.5, 0.3, -0.2, 0.4});
    fix.wo = mat({2, 2}, {0.7, -0.1, 0.2, 0.6});
    fix.ln1_g = mat({2}, {1.1, 0.9});
    fix.ln1_b = mat({2}, {0.05, -0.02});
    fix.ffn_w1 = mat({2, 4}, {0.3, -0.4, 0.2, 0.1, -0.2, 0.5, 0.4, -0.3});
    fix.ffn_b1 = mat({4}, {0.01, -0.03, 0.02, 0.0});
    fix.ffn_w2 = mat({4, 2}, {0.2, -0.1, 0.4, 0.3, -0.3, 0.2, 0.1, -0.5});
    fix.ffn_b2 = mat({2}, {-0.01, 0.02});
    fix.ln2_g = mat({2}, {0.95, 1.05});
    fix.ln2_b = mat({2}, {0.0, 0.01});
    DTensor zfix = DTensor::make({3, 2});
    zfix.v = {0.5, -0.3, 0.2, 0.7, -0.6, 0.1};
    const VarT<double> bout = transformer_block(constant(zfix), fix, 1);
    const double expect[6] = {0.9499963554660423,  -1.039995971830889, -0.9499956564075015,
                              1.0599951991872385, -0.9499956566646087, 1.0599951994714099};
    for (int i = 0; i < 6; ++i) worst_fix = std::max(worst_fix, std::abs(bout.val().v[i] - expect[i]));

    r.seconds = seconds_since(t0);
    r.passed = worst_sum < 1e-6 && worst_perm < 1e-6 && worst_fix < 1e-6;
    r.detail = "row-sum " + fmt(worst_sum) + ", permutation " + fmt(worst_perm) + ", fixture " + fmt(worst_fix);
    return r;
}

CriterionResult criterion_berhu() {
    const auto t0 = Clock::now();
    CriterionResult r{7, "BerHu branch continuity and the 2.6 fixture", false, "", 0.0};
    double cont = 0.0;
    for (double c : {0.2, 1.0, 3.7}) cont = std::max(cont, std::abs(c - (c * c + c * c) / (2.0 * c)));

    ErpImage gt = ErpImage::make(4, 2, 1);
    for (size_t i = 0; i < gt.data.size(); ++i) gt.data[i] = static_cast<float>(i + 1);
    std::vector<std::uint8_t> one(8, 0);
    one[3] = 1;
    ErpImage pred = gt;
    pred.data[3] += 1.f;
    const BerhuEntry fix = berhu(pred, gt, one);
    const BerhuEntry zero = berhu(gt, gt);

    r.seconds = seconds_since(t0);
    r.passed = cont < 1e-12 && std::abs(fix.value - 2.6) < 1e-9 && std::abs(fix.border - 0.2) < 1e-12 &&
               zero.value == 0.0;
    r.detail = "continuity " + fmt(cont) + ", fixture " + fmt(fix.value) + ", zero-at-equal " + fmt(zero.value);
    return r;
}

CriterionResult criterion_metrics() {
    const auto t0 = Clock::now();
    CriterionResult r{8, "metrics fixture and scale behavior", false, "", 0.0};
    std::vector<std::uint8_t> mask(8, 0);
    mask[0] = mask[1] = mask[2] = mask[3] = 1;
    ErpImage g4 = ErpImage::make(4, 2, 1);
    ErpImage p4 = ErpImage::make(4, 2, 1);
    const float gv[4] = {1.f, 2.f, 4.f, 8.f}, pv[4] = {1.f, 1.f, 4.f, 10.f};
    for (int i = 0; i < 4; ++i) {
        g4.data[i] = gv[i];
        p4.data[i] = pv[i];
    }
    g4.data[4] = g4.data[5] = g4.data[6] = g4.data[7] = 1.f;
    p4.data[4] = p4.data[5] = p4.data[6] = p4.data[7] = 1.f;
    const MetricsRecord fix = metrics(p4, g4, mask);

    double worst = 0.0;
    worst = std::max(worst, std::abs(fix.abs_rel - 0.1875));
    worst = std::max(worst, std::abs(fix.sq_rel - 0.25));
    worst = std::max(worst, std::abs(fix.rmse - 1.1180339887498949));
    worst = std::max(worst, std::abs(fix.rmse_log - 0.36408998146451343));
    worst = std::max(worst, std::abs(fix.delta1 - 0.5));
    worst = std::max(worst, std::abs(fix.delta2 - 0.75));
    worst = std::max(worst, std::abs(fix.delta3 - 0.75));

    double scale_err = 0.0;
    for (double k : {0.5, 2.0}) {
        ErpImage gs = g4, ps = p4;
        for (auto& v : gs.data) v = static_cast<float>(v * k);
        for (auto& v : ps.data) v = static_cast<float>(v * k);
        const MetricsRecord ms = metrics(ps, gs, mask);
        scale_err = std::max(scale_err, std::abs(ms.abs_rel - fix.abs_rel));
        scale_err = std::max(scale_err, std::abs(ms.delta1 - fix.delta1));
        scale_err = std::max(scale_err, std::abs(ms.delta2 - fix.delta2));
        scale_err = std::max(scale_err, std::abs(ms.delta3 - fix.delta3));
        scale_err = std::max(scale_err, std::abs(ms.rmse - k * fix.rmse) / k);
        scale_err = std::max(scale_err, std::abs(ms.sq_rel - k * fix.sq_rel) / k);
    }

    r.seconds = seconds_since(t0);
    r.passed = worst < 1e-9 && scale_err < 1e-6;
    r.detail = "fixture error " + fmt(worst) + ", scale error " + fmt(scale_err);
    return r;
}

}  // namespace

std::vector<CriterionResult> run_selftest(const std::string& data_dir) {
    std::vector<CriterionResult> results;
    results.push_back(criterion_roundtrip());
    results.push_back(criterion_closed_forms());
    results.push_back(criterion_coverage());
    results.push_back(criterion_resampling(data_dir));
    results.push_back(criterion_gradients());
    results.push_back(criterion_attention());
    results.push_back(criterion_berhu());
    results.push_back(criterion_metrics());
    return results;
}

bool all_passed(const std::vector<CriterionResult>& results) {
    for (const auto& r : results)
        if (!r.passed) return false;
    return true;
}

}  // namespace tandepth
