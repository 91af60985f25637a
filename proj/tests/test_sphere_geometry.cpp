#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tandepth/sphere_geometry.hpp"
#include "tandepth/tensor.hpp"

using namespace tandepth;

TEST_CASE("erp_to_sphere centered convention") {
    // image center sits between pixels: half-integer coordinate maps to (0,0)
    auto p = erp_to_sphere(511.5, 255.5, 1024, 512);
    CHECK(p.lambda == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(p.phi == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(p.rho == 1.0);

    // leftmost pixel center of a 4x2 image
    auto q = erp_to_sphere(0, 0, 4, 2);
    CHECK(q.lambda == doctest::Approx(-3.0 * M_PI / 4.0));

    // high-precision evaluation of the two closed forms (independent of the
    // implementation, frozen from a numpy run)
    auto r = erp_to_sphere(300, 100, 1024, 512);
    CHECK(r.lambda == doctest::Approx(-1.2977477465512524).epsilon(1e-15));
    CHECK(r.phi == doctest::Approx(0.95413605006486879).epsilon(1e-15));

    CHECK_THROWS_AS(erp_to_sphere(1024, 0, 1024, 512), std::invalid_argument);
    CHECK_THROWS_AS(erp_to_sphere(-1, 0, 1024, 512), std::invalid_argument);
    CHECK_THROWS_AS(erp_to_sphere(0, 0, 1000, 512), std::invalid_argument);
}

TEST_CASE("sphere_to_erp inverts erp_to_sphere") {
    double x, y;
    sphere_to_erp(0.0, 0.0, 1024, 512, x, y);
    CHECK(x == doctest::Approx(511.5).epsilon(1e-12));
    CHECK(y == doctest::Approx(255.5).epsilon(1e-12));

    // wrap symmetry: -pi and just below +pi land on opposite image edges
    double xl, xr, yy;
    sphere_to_erp(-M_PI, 0.0, 1024, 512, xl, yy);
    sphere_to_erp(M_PI - 1e-9, 0.0, 1024, 512, xr, yy);
    CHECK(xl == doctest::Approx(-0.5).epsilon(1e-9));
    CHECK(xr == doctest::Approx(1023.5).epsilon(1e-6));

    // pixel-center roundtrip is exact to 1e-12
    Rng rng(7);
    for (int k = 0; k < 1000; ++k) {
        const double xe = std::floor(rng.uniform() * 1024);
        const double ye = std::floor(rng.uniform() * 512);
        const auto p = erp_to_sphere(xe, ye, 1024, 512);
        double xb, yb;
        sphere_to_erp(p.lambda, p.phi, 1024, 512, xb, yb);
        CHECK(std::abs(xb - xe) < 1e-12 * 1024);
        CHECK(std::abs(yb - ye) < 1e-12 * 512);
    }
}

TEST_CASE("gnomonic forward closed forms") {
    // tangency point maps to the origin
    const TangentPose pose{0.4, -0.7};
    auto r0 = gnomonic_forward({0.4, -0.7, 1.0}, pose);
    CHECK(r0.valid);
    CHECK(r0.coord.x_t == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(r0.coord.y_t == doctest::Approx(0.0).epsilon(1e-15));

    // equatorial reduction x_t = tan(dl), meridian reduction y_t = tan(phi)
    auto re = gnomonic_forward({M_PI / 6.0, 0.0, 1.0}, {0.0, 0.0});
    CHECK(re.coord.x_t == doctest::Approx(std::tan(M_PI / 6.0)).epsilon(1e-15));
    CHECK(re.coord.y_t == doctest::Approx(0.0).epsilon(1e-15));
    auto rm = gnomonic_forward({0.0, M_PI / 6.0, 1.0}, {0.0, 0.0});
    CHECK(rm.coord.x_t == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(rm.coord.y_t == doctest::Approx(std::tan(M_PI / 6.0)).epsilon(1e-15));

    // direct high-precision evaluation of the projection formulas (frozen
    // from a numpy run): pose (30, 45) deg, point (40, 50) deg
    auto rd = gnomonic_forward({deg2rad(40.0), deg2rad(50.0), 1.0}, {deg2rad(30.0), deg2rad(45.0)});
    CHECK(rd.valid);
    CHECK(rd.coord.x_t == doctest::Approx(0.11282733125517544).epsilon(1e-14));
    CHECK(rd.coord.y_t == doctest::Approx(0.095079258850084988).epsilon(1e-14));
}

TEST_CASE("gnomonic validity and NaN hygiene") {
    // antipode of the pose is invalid, and nothing non-finite escapes
    auto r = gnomonic_forward({M_PI - 0.1, 0.0, 1.0}, {0.0, 0.0});
    CHECK_FALSE(r.valid);
    CHECK(std::isfinite(r.coord.x_t));
    CHECK(std::isfinite(r.coord.y_t));

    Rng rng(11);
    for (int k = 0; k < 20000; ++k) {
        const SphericalPoint p{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0)), 1.0};
        const TangentPose q{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0))};
        const auto f = gnomonic_forward(p, q);
        CHECK(std::isfinite(f.coord.x_t));
        CHECK(std::isfinite(f.coord.y_t));
        const double cos_c = std::sin(q.phi_c) * std::sin(p.phi) +
                             std::cos(q.phi_c) * std::cos(p.phi) * std::cos(wrap_delta(p.lambda - q.lambda_c));
        CHECK(f.valid == (cos_c > kHemisphereEps));
        const auto inv = gnomonic_inverse({rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0)}, q);
        CHECK(std::isfinite(inv.lambda));
        CHECK(std::isfinite(inv.phi));
    }
}

TEST_CASE("gnomonic inverse") {
    // gamma = 0 singularity returns the pose exactly
    const TangentPose pose{-2.13, 0.815};
    auto p = gnomonic_inverse({0.0, 0.0}, pose);
    CHECK(p.lambda == pose.lambda_c);
    CHECK(p.phi == pose.phi_c);
    CHECK(p.rho == 1.0);

    // inverse of the equatorial reduction
    auto q = gnomonic_inverse({1.0, 0.0}, {0.0, 0.0});
    CHECK(q.lambda == doctest::Approx(M_PI / 4.0).epsilon(1e-15));
    CHECK(q.phi == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("gnomonic roundtrip on the valid hemisphere") {
    Rng rng(1234);
    double worst = 0.0;
    int tested = 0;
    while (tested < 100000) {
        const SphericalPoint p{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0)), 1.0};
        const TangentPose q{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0))};
        const auto f = gnomonic_forward(p, q);
        const double cos_c = std::cos(angular_distance(p, {q.lambda_c, q.phi_c, 1.0}));
        if (!f.valid || cos_c <= 0.1) continue;
        ++tested;
        const auto back = gnomonic_inverse(f.coord, q);
        worst = std::max(worst, angular_distance(p, back));
    }
    CHECK(worst < 1e-9);

    // and the other direction: coord -> sphere -> coord
    for (int k = 0; k < 20000; ++k) {
        const TangentPose q{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0))};
        const TangentCoord c{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
        const auto s = gnomonic_inverse(c, q);
        const auto f = gnomonic_forward(s, q);
        REQUIRE(f.valid);
        CHECK(std::abs(f.coord.x_t - c.x_t) < 1e-9);
        CHECK(std::abs(f.coord.y_t - c.y_t) < 1e-9);
    }
}

TEST_CASE("longitude-shift equivariance") {
    Rng rng(99);
    for (int k = 0; k < 5000; ++k) {
        const SphericalPoint p{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0)), 1.0};
        const TangentPose q{rng.uniform(-M_PI, M_PI), std::asin(rng.uniform(-1.0, 1.0))};
        const double shift = rng.uniform(-M_PI, M_PI);
        const auto a = gnomonic_forward(p, q);
        const auto b = gnomonic_forward({wrap_longitude(p.lambda + shift), p.phi, 1.0},
                                        {wrap_longitude(q.lambda_c + shift), q.phi_c});
        CHECK(a.valid == b.valid);
        const double cos_c = std::cos(angular_distance(p, {q.lambda_c, q.phi_c, 1.0}));
        if (a.valid && cos_c > 0.1) {
            CHECK(std::abs(a.coord.x_t - b.coord.x_t) < 1e-12);
            CHECK(std::abs(a.coord.y_t - b.coord.y_t) < 1e-12);
        }
    }
}

TEST_CASE("patch layout") {
    const PatchLayout def = default_layout();
    REQUIRE(def.n_patches() == 18);
    CHECK(def.fov_deg == 80.0);
    CHECK(def.patch_res == 256);

    // ring structure {(-67.5,3), (-22.5,6), (22.5,6), (67.5,3)}, bottom to top
    const double lat[4] = {-67.5, -22.5, 22.5, 67.5};
    const int cnt[4] = {3, 6, 6, 3};
    int idx = 0;
    for (int r = 0; r < 4; ++r)
        for (int k = 0; k < cnt[r]; ++k, ++idx) {
            CHECK(def.poses[idx].phi_c == doctest::Approx(deg2rad(lat[r])).epsilon(1e-15));
            CHECK(def.poses[idx].lambda_c ==
                  doctest::Approx(wrap_longitude(deg2rad(360.0 * k / cnt[r]))).epsilon(1e-12));
        }

    // bottom ring longitudes are {0, 120, 240} degrees
    CHECK(def.poses[0].lambda_c == doctest::Approx(0.0));
    CHECK(def.poses[1].lambda_c == doctest::Approx(deg2rad(120.0)));
    CHECK(def.poses[2].lambda_c == doctest::Approx(wrap_longitude(deg2rad(240.0))));

    const PatchLayout single = build_patch_layout({{0.0, 4}}, 60.0, 32);
    REQUIRE(single.n_patches() == 4);
    CHECK(single.poses[0].lambda_c == doctest::Approx(0.0));
    CHECK(single.poses[1].lambda_c == doctest::Approx(M_PI / 2.0));
    CHECK(single.poses[2].lambda_c == doctest::Approx(-M_PI).epsilon(1e-12));  // 180 wraps
    CHECK(single.poses[3].lambda_c == doctest::Approx(-M_PI / 2.0));

    CHECK_THROWS_AS(build_patch_layout({{0.0, 4}}, 180.0, 32), std::invalid_argument);
    CHECK_THROWS_AS(build_patch_layout({{0.0, 4}}, 80.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_patch_layout({{90.0, 4}}, 80.0, 32), std::invalid_argument);
    CHECK_THROWS_AS(build_patch_layout({{0.0, 0}}, 80.0, 32), std::invalid_argument);
}

TEST_CASE("tangent grid") {
    const TangentPose pose{deg2rad(25.0), deg2rad(-40.0)};
    const int res = 9;
    const double fov = 70.0;
    const auto grid = tangent_grid(pose, fov, res);
    REQUIRE(grid.size() == static_cast<size_t>(res) * res);

    // center pixel of an odd-res grid is exactly the pose
    const auto& c = grid[4 * res + 4];
    CHECK(c.lambda == pose.lambda_c);
    CHECK(c.phi == pose.phi_c);

    // corner angular distance closed form
    const double t = std::tan(deg2rad(fov) / 2.0);
    const double expect = std::atan(std::sqrt(2.0) * t * (res - 1) / res);
    const double got = angular_distance(grid[0], {pose.lambda_c, pose.phi_c, 1.0});
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));

    // column mirror: x_t -> -x_t flips the longitude offset around the pose
    for (int j = 0; j < res; ++j)
        for (int i = 0; i < res; ++i) {
            const auto& a = grid[j * res + i];
            const auto& b = grid[j * res + (res - 1 - i)];
            CHECK(std::abs(wrap_delta(a.lambda - pose.lambda_c) + wrap_delta(b.lambda - pose.lambda_c)) < 1e-12);
            CHECK(std::abs(a.phi - b.phi) < 1e-12);
        }

    // row 0 is the patch top (higher latitude for an equatorial pose)
    const auto eq = tangent_grid({0.0, 0.0}, fov, res);
    CHECK(eq[0 * res + 4].phi > eq[8 * res + 4].phi);
}
