#include "tandepth/sphere_geometry.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace tandepth {

double wrap_longitude(double lambda) {
    double x = std::fmod(lambda + M_PI, 2.0 * M_PI);
    if (x < 0) x += 2.0 * M_PI;
    return x - M_PI;
}

double wrap_delta(double d) {
    double x = std::fmod(d - M_PI, 2.0 * M_PI);
    if (x <= 0) x += 2.0 * M_PI;
    return x - M_PI;  // (-pi, pi]
}

double clamp_latitude(double phi) { return std::clamp(phi, -M_PI / 2.0, M_PI / 2.0); }

double deg2rad(double d) { return d * M_PI / 180.0; }
double rad2deg(double r) { return r * 180.0 / M_PI; }

SphericalPoint erp_to_sphere(double x_e, double y_e, int width, int height) {
    if (width != 2 * height) throw std::invalid_argument("erp_to_sphere: width must equal 2*height");
    if (x_e < -0.5 || x_e >= width - 0.5 || y_e < -0.5 || y_e > height - 0.5)
        throw std::invalid_argument("erp_to_sphere: pixel index out of range");
    SphericalPoint p;
    p.lambda = 2.0 * M_PI * (x_e + 0.5) / width - M_PI;
    p.phi = M_PI / 2.0 - M_PI * (y_e + 0.5) / height;
    p.rho = 1.0;
    return p;
}

void sphere_to_erp(double lambda, double phi, int width, int height, double& x_e, double& y_e) {
    x_e = (wrap_longitude(lambda) + M_PI) * width / (2.0 * M_PI) - 0.5;
    y_e = (M_PI / 2.0 - clamp_latitude(phi)) * height / M_PI - 0.5;
}

GnomonicResult gnomonic_forward(const SphericalPoint& point, const TangentPose& pose) {
    const double dl = wrap_delta(point.lambda - pose.lambda_c);
    const double sin_phi = std::sin(point.phi), cos_phi = std::cos(point.phi);
    const double sin_pc = std::sin(pose.phi_c), cos_pc = std::cos(pose.phi_c);
    const double cos_dl = std::cos(dl);
    const double cos_c = sin_pc * sin_phi + cos_pc * cos_phi * cos_dl;

    GnomonicResult r;
    if (cos_c <= kHemisphereEps) {
        r.valid = false;
        r.coord = {0.0, 0.0};  // placeholder; never NaN
        return r;
    }
    r.valid = true;
    r.coord.x_t = cos_phi * std::sin(dl) / cos_c;
    r.coord.y_t = (cos_pc * sin_phi - sin_pc * cos_phi * cos_dl) / cos_c;
    return r;
}

SphericalPoint gnomonic_inverse(const TangentCoord& coord, const TangentPose& pose) {
    const double x = coord.x_t, y = coord.y_t;
    const double gamma2 = x * x + y * y;
    SphericalPoint p;
    p.rho = 1.0;
    if (gamma2 == 0.0) {  // removable singularity at the tangency point
        p.lambda = pose.lambda_c;
        p.phi = pose.phi_c;
        return p;
    }
    // With c = arctan(gamma): sin(c) = gamma/sqrt(1+gamma^2),
    // cos(c) = 1/sqrt(1+gamma^2). Substituting into the inverse formulas
    // cancels gamma and leaves the closed forms below.
    const double sin_pc = std::sin(pose.phi_c), cos_pc = std::cos(pose.phi_c);
    const double inv_hyp = 1.0 / std::sqrt(1.0 + gamma2);
    double s = (sin_pc + y * cos_pc) * inv_hyp;
    s = std::clamp(s, -1.0, 1.0);
    p.phi = std::asin(s);
    p.lambda = wrap_longitude(pose.lambda_c + std::atan2(x, cos_pc - y * sin_pc));
    return p;
}

void sphere_to_unit(double lambda, double phi, double out[3]) {
    const double cp = std::cos(phi);
    out[0] = cp * std::cos(lambda);
    out[1] = cp * std::sin(lambda);
    out[2] = std::sin(phi);
}

PatchLayout build_patch_layout(const std::vector<RingSpec>& rings, double fov_deg, int patch_res) {
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw std::invalid_argument("layout: fov must be in (0, 180) degrees");
    if (patch_res < 2) throw std::invalid_argument("layout: patch_res must be >= 2");
    if (rings.empty()) throw std::invalid_argument("layout: need at least one ring");

    std::vector<RingSpec> sorted = rings;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const RingSpec& a, const RingSpec& b) { return a.latitude_deg < b.latitude_deg; });

    PatchLayout layout;
    layout.fov_deg = fov_deg;
    layout.patch_res = patch_res;
    for (const RingSpec& ring : sorted) {
        if (ring.count < 1) throw std::invalid_argument("layout: ring count must be >= 1");
        if (!(ring.latitude_deg > -90.0 && ring.latitude_deg < 90.0))
            throw std::invalid_argument("layout: ring latitude must be strictly inside (-90, 90)");
        for (int k = 0; k < ring.count; ++k) {
            TangentPose pose;
            pose.lambda_c = wrap_longitude(deg2rad(360.0 * k / ring.count));
            pose.phi_c = deg2rad(ring.latitude_deg);
            layout.poses.push_back(pose);
        }
    }
    return layout;
}

PatchLayout default_layout() {
    return build_patch_layout({{-67.5, 3}, {-22.5, 6}, {22.5, 6}, {67.5, 3}}, 80.0, 256);
}

std::vector<SphericalPoint> tangent_grid(const TangentPose& pose, double fov_deg, int res) {
    if (!(fov_deg > 0.0 && fov_deg < 180.0) || res < 2) throw std::invalid_argument("tangent_grid: bad fov or res");
    const double t = std::tan(deg2rad(fov_deg) / 2.0);
    std::vector<SphericalPoint> grid(static_cast<size_t>(res) * res);
    for (int j = 0; j < res; ++j) {
        const double y_t = (1.0 - 2.0 * (j + 0.5) / res) * t;  // row 0 = patch top
        for (int i = 0; i < res; ++i) {
            const double x_t = (2.0 * (i + 0.5) / res - 1.0) * t;
            grid[static_cast<size_t>(j) * res + i] = gnomonic_inverse({x_t, y_t}, pose);
        }
    }
    return grid;
}

double angular_distance(const SphericalPoint& a, const SphericalPoint& b) {
    double u[3], w[3];
    sphere_to_unit(a.lambda, a.phi, u);
    sphere_to_unit(b.lambda, b.phi, w);
    const double dot = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
    double cx = u[1] * w[2] - u[2] * w[1];
    double cy = u[2] * w[0] - u[0] * w[2];
    double cz = u[0] * w[1] - u[1] * w[0];
    return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot);
}

}  // namespace tandepth
