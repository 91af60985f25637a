#include "tandepth/geo_embedding.hpp"

#include <stdexcept>

namespace tandepth {

namespace {

double sample_rho_plain(const ErpImage& depth, double lambda, double phi) {
    double xe, ye;
    sphere_to_erp(lambda, phi, depth.width, depth.height, xe, ye);
    float v;
    if (!sample_erp_masked(depth, 0, xe, ye, v)) return 1.0;  // invalid -> unit sphere
    return std::max(static_cast<double>(v), kDepthFloor);
}

}  // namespace

GeomAttrs build_attrs(const PatchLayout& layout, int feat_res, const ErpImage* prev_depth) {
    if (feat_res < 2) throw std::invalid_argument("build_attrs: feat_res must be >= 2");
    if (prev_depth && prev_depth->channels != 1)
        throw std::invalid_argument("build_attrs: prev_depth must be single-channel");

    GeomAttrs a;
    a.n = layout.n_patches();
    a.res = feat_res;
    const size_t plane = static_cast<size_t>(feat_res) * feat_res;
    a.lambda.resize(a.n * plane);
    a.phi.resize(a.n * plane);
    a.rho.assign(a.n * plane, 1.0);
    a.lambda_c.resize(a.n);
    a.phi_c.resize(a.n);

    for (int p = 0; p < a.n; ++p) {
        a.lambda_c[p] = layout.poses[p].lambda_c;
        a.phi_c[p] = layout.poses[p].phi_c;
        const auto grid = tangent_grid(layout.poses[p], layout.fov_deg, feat_res);
        for (size_t i = 0; i < plane; ++i) {
            a.lambda[p * plane + i] = grid[i].lambda;
            a.phi[p * plane + i] = grid[i].phi;
            if (prev_depth) a.rho[p * plane + i] = sample_rho_plain(*prev_depth, grid[i].lambda, grid[i].phi);
        }
    }
    return a;
}

GeomAttrs update_rho(const GeomAttrs& attrs, const ErpImage& merged_depth) {
    if (merged_depth.channels != 1) throw std::invalid_argument("update_rho: depth must be single-channel");
    GeomAttrs out = attrs;
    const size_t npix = attrs.pix_count();
    for (size_t i = 0; i < npix; ++i)
        out.rho[i] = sample_rho_plain(merged_depth, attrs.lambda[i], attrs.phi[i]);
    return out;
}

}  // namespace tandepth
