#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tandepth/geo_embedding.hpp"
#include "tandepth/train_eval.hpp"

using namespace tandepth;

namespace {

DTensor random_tensor(std::vector<int> dims, uint64_t seed, double lo = -0.6, double hi = 0.6) {
    DTensor t = DTensor::make(std::move(dims));
    Rng rng(seed);
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

struct EmbedParams {
    VarT<double> w1, b1, w2, b2;
};

EmbedParams random_embed(int hidden, int out, uint64_t seed) {
    EmbedParams p;
    p.w1 = make_leaf(random_tensor({hidden, 5, 1, 1}, seed), true);
    p.b1 = make_leaf(random_tensor({hidden}, seed + 1), true);
    p.w2 = make_leaf(random_tensor({out, hidden, 1, 1}, seed + 2), true);
    p.b2 = make_leaf(random_tensor({out}, seed + 3), true);
    return p;
}

}  // namespace

TEST_CASE("build_attrs: defaults, constant depth, analytic depth") {
    const PatchLayout layout = build_patch_layout({{-30.0, 3}, {30.0, 3}}, 80.0, 32);
    const GeomAttrs a = build_attrs(layout, 9);
    REQUIRE(a.n == 6);
    REQUIRE(a.res == 9);
    for (double r : a.rho) CHECK(r == 1.0);  // unit sphere on iteration 1
    for (int p = 0; p < a.n; ++p) {
        CHECK(a.lambda_c[p] == layout.poses[p].lambda_c);
        CHECK(a.phi_c[p] == layout.poses[p].phi_c);
    }
    // angle channels agree with a tangent grid of the same resolution
    const auto grid = tangent_grid(layout.poses[2], layout.fov_deg, 9);
    for (int i = 0; i < 81; ++i) {
        CHECK(a.lambda[2 * 81 + i] == grid[i].lambda);
        CHECK(a.phi[2 * 81 + i] == grid[i].phi);
    }

    // constant previous depth -> constant rho
    ErpImage flat = ErpImage::make(128, 64, 1);
    std::fill(flat.data.begin(), flat.data.end(), 2.5f);
    const GeomAttrs af = build_attrs(layout, 9, &flat);
    for (double r : af.rho) CHECK(r == doctest::Approx(2.5).epsilon(1e-6));

    // analytic box-room depth at the patch center (odd res -> exact pose)
    const SceneSpec spec{2.0, 1.6, 1.2, 0, 77};
    const RenderedScene scene = render_scene(spec, 256, 128);
    const GeomAttrs ab = build_attrs(layout, 9, &scene.depth);
    for (int p = 0; p < a.n; ++p) {
        const double expect = box_exit_distance(spec, layout.poses[p].lambda_c, layout.poses[p].phi_c);
        const double got = ab.rho[p * 81 + 4 * 9 + 4];
        CHECK(got == doctest::Approx(expect).epsilon(2e-2));  // bilinear tolerance
    }
}

TEST_CASE("embed: zeros, pointwise sharing, parameter gradients") {
    const PatchLayout layout = build_patch_layout({{15.0, 2}}, 70.0, 16);
    PatchLayout twin = layout;
    twin.poses[1] = twin.poses[0];  // identical pose -> identical 5-tuples
    const GeomAttrs attrs = build_attrs(twin, 4);
    VarT<double> a5 = constant(attrs_tensor<double>(attrs));

    // zero parameters give zero features
    EmbedParams zero;
    zero.w1 = make_leaf(DTensor::make({6, 5, 1, 1}), false);
    zero.b1 = make_leaf(DTensor::make({6}), false);
    zero.w2 = make_leaf(DTensor::make({8, 6, 1, 1}), false);
    zero.b2 = make_leaf(DTensor::make({8}), false);
    VarT<double> zf = embed(a5, zero.w1, zero.b1, zero.w2, zero.b2);
    for (double v : zf.val().v) CHECK(v == 0.0);

    // identical tuples in different patches embed identically (the alignment
    // mechanism: the MLP is pointwise and patch-shared)
    EmbedParams p = random_embed(6, 8, 900);
    VarT<double> f = embed(a5, p.w1, p.b1, p.w2, p.b2);
    const size_t plane = 16;
    for (int c = 0; c < 8; ++c)
        for (size_t i = 0; i < plane; ++i)
            CHECK(f.val().v[(0 * 8 + c) * plane + i] == f.val().v[(1 * 8 + c) * plane + i]);

    // gradients of all four parameter tensors vs central differences
    DTensor weight = random_tensor({2, 8, 4, 4}, 66);
    auto build = [&] {
        return sum_all(mul(embed(a5, p.w1, p.b1, p.w2, p.b2), constant(weight)));
    };
    backward(build());
    auto check = [&](VarT<double> v, uint64_t seed) {
        auto eval = [&] {
            VarT<double> e = embed(a5, make_leaf(p.w1.val(), false), make_leaf(p.b1.val(), false),
                                   make_leaf(p.w2.val(), false), make_leaf(p.b2.val(), false));
            return sum_all(mul(e, constant(weight))).val().v[0];
        };
        CHECK(fd_check(v.n->val.data(), v.grad().data(), v.val().numel(), eval, 1e-5, 0, seed) < 1e-3);
    };
    check(p.w1, 1);
    check(p.b1, 2);
    check(p.w2, 3);
    check(p.b2, 4);
}

TEST_CASE("fuse: identity, permutation, shape checks") {
    DTensor img = random_tensor({3, 4, 5, 5}, 70);
    DTensor zero = DTensor::make({3, 4, 5, 5});
    VarT<double> fused = fuse(constant(img), constant(zero));
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(fused.val().v[i] == img.v[i]);

    DTensor geo = random_tensor({3, 4, 5, 5}, 71);
    VarT<double> ab = fuse(constant(img), constant(geo));
    // elementwise, so permuting patches commutes with fusing
    const int perm[3] = {2, 0, 1};
    DTensor pi = img, pg = geo;
    const size_t stride = 4 * 25;
    for (int i = 0; i < 3; ++i) {
        std::copy_n(img.v.begin() + perm[i] * stride, stride, pi.v.begin() + i * stride);
        std::copy_n(geo.v.begin() + perm[i] * stride, stride, pg.v.begin() + i * stride);
    }
    VarT<double> pab = fuse(constant(pi), constant(pg));
    for (int i = 0; i < 3; ++i)
        for (size_t k = 0; k < stride; ++k) CHECK(pab.val().v[i * stride + k] == ab.val().v[perm[i] * stride + k]);

    DTensor mismatched = DTensor::make({3, 4, 5, 6});
    CHECK_THROWS_AS(fuse(constant(img), constant(mismatched)), std::invalid_argument);
}

TEST_CASE("update_rho: fixed point, invalid fallback, idempotence, locality") {
    const PatchLayout layout = build_patch_layout({{-20.0, 3}, {20.0, 3}}, 80.0, 16);
    const GeomAttrs base = build_attrs(layout, 8);

    // merged depth identically 1 is a fixed point of the update
    ErpImage ones = ErpImage::make(96, 48, 1);
    std::fill(ones.data.begin(), ones.data.end(), 1.f);
    const GeomAttrs same = update_rho(base, ones);
    for (size_t i = 0; i < base.rho.size(); ++i) CHECK(same.rho[i] == doctest::Approx(1.0).epsilon(1e-7));

    // invalid-masked region keeps rho at 1; valid region resamples
    ErpImage half = ErpImage::make(96, 48, 1);
    std::fill(half.data.begin(), half.data.end(), 3.f);
    half.mask.assign(half.n_pixels(), 1);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) half.mask[static_cast<size_t>(y) * 96 + x] = 0;  // left half invalid
    const GeomAttrs mixed = update_rho(base, half);
    bool saw_fallback = false, saw_sampled = false;
    for (size_t i = 0; i < mixed.rho.size(); ++i) {
        if (mixed.rho[i] == 1.0) saw_fallback = true;
        if (std::abs(mixed.rho[i] - 3.0) < 1e-6) saw_sampled = true;
        CHECK(mixed.lambda[i] == base.lambda[i]);  // angles untouched
        CHECK(mixed.phi[i] == base.phi[i]);
    }
    CHECK(saw_fallback);
    CHECK(saw_sampled);

    // idempotent given the same merged depth
    const GeomAttrs twice = update_rho(mixed, half);
    for (size_t i = 0; i < mixed.rho.size(); ++i) CHECK(twice.rho[i] == mixed.rho[i]);

    // embedding changes only where rho changed
    struct EmbedParams p = random_embed(6, 4, 200);
    VarT<double> before = embed(constant(attrs_tensor<double>(base)), p.w1, p.b1, p.w2, p.b2);
    VarT<double> after = embed(constant(attrs_tensor<double>(mixed)), p.w1, p.b1, p.w2, p.b2);
    const size_t plane = 64;
    for (int n = 0; n < 6; ++n)
        for (size_t i = 0; i < plane; ++i) {
            const bool rho_changed = mixed.rho[n * plane + i] != base.rho[n * plane + i];
            bool out_changed = false;
            for (int ch = 0; ch < 4; ++ch)
                out_changed = out_changed ||
                              before.val().v[(n * 4 + ch) * plane + i] != after.val().v[(n * 4 + ch) * plane + i];
            if (!rho_changed) CHECK_FALSE(out_changed);
        }
}

TEST_CASE("sample_rho_var: values, fallback, gradient") {
    const PatchLayout layout = build_patch_layout({{0.0, 2}}, 75.0, 16);
    const GeomAttrs attrs = build_attrs(layout, 6);
    const int W = 64, H = 32;

    DTensor depth = DTensor::make({1, 1, H, W});
    Rng rng(80);
    for (auto& v : depth.v) v = rng.uniform(0.5, 3.0);

    // all-valid: matches the plain update path
    VarT<double> dvar = make_leaf(depth, true);
    VarT<double> rho = sample_rho_var(dvar, attrs, {});
    ErpImage dimg = ErpImage::make(W, H, 1);
    for (size_t i = 0; i < dimg.data.size(); ++i) dimg.data[i] = static_cast<float>(depth.v[i]);
    const GeomAttrs plain = update_rho(attrs, dimg);
    for (size_t i = 0; i < plain.rho.size(); ++i) CHECK(rho.val().v[i] == doctest::Approx(plain.rho[i]).epsilon(1e-6));

    // fully-invalid mask falls back to 1 and blocks the gradient
    std::vector<std::uint8_t> dead(static_cast<size_t>(W) * H, 0);
    VarT<double> rho_dead = sample_rho_var(make_leaf(depth, true), attrs, dead);
    for (double v : rho_dead.val().v) CHECK(v == 1.0);

    // gradient through the sampling
    DTensor weight = random_tensor({2, 1, 6, 6}, 81);
    backward(sum_all(mul(rho, constant(weight))));
    auto eval = [&] {
        VarT<double> r = sample_rho_var(make_leaf(dvar.val(), false), attrs, {});
        return sum_all(mul(r, constant(weight))).val().v[0];
    };
    CHECK(fd_check(dvar.val().data(), dvar.grad().data(), depth.numel(), eval, 1e-6, 80, 82) < 1e-3);
}
