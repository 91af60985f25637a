#pragma once

#include <cmath>
#include <vector>

namespace tandepth {

// Angle conventions used throughout: longitude lambda in [-pi, pi), latitude
// phi in [-pi/2, pi/2] with +pi/2 at the top image row. All geometry runs in
// double precision.

struct SphericalPoint {
    double lambda = 0.0;
    double phi = 0.0;
    double rho = 1.0;  // 1 on the unit sphere; scene units when carrying depth
};

struct TangentPose {
    double lambda_c = 0.0;
    double phi_c = 0.0;
};

struct TangentCoord {
    double x_t = 0.0;
    double y_t = 0.0;
};

struct GnomonicResult {
    TangentCoord coord;
    bool valid = false;  // front hemisphere only
};

// Grazing-incidence cutoff on cos(c); beyond it the projection diverges.
inline constexpr double kHemisphereEps = 1e-9;

// Wrap into [-pi, pi).
double wrap_longitude(double lambda);
// Wrap into (-pi, pi] (used for longitude differences).
double wrap_delta(double d);
double clamp_latitude(double phi);

double deg2rad(double d);
double rad2deg(double r);

// ERP pixel grid <-> sphere. Coordinates are continuous with integer values at
// pixel centers; valid range is [-0.5, W-0.5) x [-0.5, H-0.5).
SphericalPoint erp_to_sphere(double x_e, double y_e, int width, int height);
void sphere_to_erp(double lambda, double phi, int width, int height, double& x_e, double& y_e);

// Gnomonic projection onto the plane tangent at `pose`, and its inverse.
GnomonicResult gnomonic_forward(const SphericalPoint& point, const TangentPose& pose);
SphericalPoint gnomonic_inverse(const TangentCoord& coord, const TangentPose& pose);

// Unit direction in 3D: x = cos(phi)cos(lambda), y = cos(phi)sin(lambda),
// z = sin(phi).
void sphere_to_unit(double lambda, double phi, double out[3]);

struct RingSpec {
    double latitude_deg = 0.0;
    int count = 0;
};

struct PatchLayout {
    std::vector<TangentPose> poses;
    double fov_deg = 80.0;
    int patch_res = 256;

    int n_patches() const { return static_cast<int>(poses.size()); }
    double tan_half_fov() const { return std::tan(deg2rad(fov_deg) / 2.0); }
};

// Rings are laid out bottom-to-top; within a ring the k-th pose sits at
// longitude k*360/count degrees (wrapped into [-pi, pi) for storage).
PatchLayout build_patch_layout(const std::vector<RingSpec>& rings, double fov_deg, int patch_res);

// The 18-pose layout: 3/6/6/3 patches on latitudes -67.5/-22.5/22.5/67.5,
// 80 degree FoV, 256 px patches.
PatchLayout default_layout();

// res x res grid of unit-sphere points for one patch. Pixel (col i, row j)
// maps to x_t = (2(i+0.5)/res - 1)*tan(fov/2), y_t mirrored so row 0 is the
// patch top.
std::vector<SphericalPoint> tangent_grid(const TangentPose& pose, double fov_deg, int res);

// Continuous patch-pixel coordinates of a tangent-plane point (inverse of the
// tangent_grid pixel mapping).
inline void tangent_to_patch_pixel(const TangentCoord& c, double tan_half_fov, int res, double& px, double& py) {
    px = (c.x_t / tan_half_fov + 1.0) * res / 2.0 - 0.5;
    py = (1.0 - c.y_t / tan_half_fov) * res / 2.0 - 0.5;
}

// Great-circle distance between two points on the unit sphere, in radians.
double angular_distance(const SphericalPoint& a, const SphericalPoint& b);

}  // namespace tandepth
