#include "tandepth/patch_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tandepth {

ErpImage ErpImage::make(int width, int height, int channels) {
    if (width != 2 * height || height < 1) throw std::invalid_argument("ErpImage: width must equal 2*height");
    if (channels < 1) throw std::invalid_argument("ErpImage: channels must be >= 1");
    ErpImage img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.data.assign(static_cast<size_t>(width) * height * channels, 0.f);
    return img;
}

PatchStack PatchStack::make(int n, int res, int channels) {
    if (n < 1 || res < 2 || channels < 1) throw std::invalid_argument("PatchStack: bad shape");
    PatchStack s;
    s.n = n;
    s.res = res;
    s.channels = channels;
    s.data.assign(static_cast<size_t>(n) * channels * res * res, 0.f);
    return s;
}

ProjectionTables build_tables(const PatchLayout& layout, int width, int height) {
    if (width != 2 * height || height < 2) throw std::invalid_argument("build_tables: width must equal 2*height");
    if (layout.poses.empty()) throw std::invalid_argument("build_tables: empty layout");

    ProjectionTables t;
    t.layout = layout;
    t.width = width;
    t.height = height;

    const int res = layout.patch_res;
    const int n_patches = layout.n_patches();
    t.forward.resize(n_patches);

#pragma omp parallel for schedule(static)
    for (int p = 0; p < n_patches; ++p) {
        const auto grid = tangent_grid(layout.poses[p], layout.fov_deg, res);
        auto& fwd = t.forward[p];
        fwd.resize(static_cast<size_t>(res) * res * 2);
        for (size_t i = 0; i < grid.size(); ++i) {
            double xe, ye;
            sphere_to_erp(grid[i].lambda, grid[i].phi, width, height, xe, ye);
            fwd[2 * i] = xe;
            fwd[2 * i + 1] = ye;
        }
    }

    const size_t npix = static_cast<size_t>(width) * height;
    t.inv_entries.assign(npix * ProjectionTables::kMaxOverlap, {});
    t.inv_count.assign(npix, 0);
    const double bound = layout.tan_half_fov();

    bool overflow = false;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const SphericalPoint pt = erp_to_sphere(x, y, width, height);
            const size_t pix = static_cast<size_t>(y) * width + x;
            for (int p = 0; p < n_patches; ++p) {
                const GnomonicResult g = gnomonic_forward(pt, layout.poses[p]);
                if (!g.valid) continue;
                if (std::max(std::abs(g.coord.x_t), std::abs(g.coord.y_t)) > bound) continue;
                const int k = t.inv_count[pix];
                if (k >= ProjectionTables::kMaxOverlap) {
                    overflow = true;
                    continue;
                }
                double px, py;
                tangent_to_patch_pixel(g.coord, bound, res, px, py);
                t.inv_entries[pix * ProjectionTables::kMaxOverlap + k] = {p, static_cast<float>(px),
                                                                          static_cast<float>(py)};
                t.inv_count[pix] = static_cast<std::uint8_t>(k + 1);
            }
        }
    }
    if (overflow)
        throw std::invalid_argument("build_tables: a pixel overlaps more than " +
                                    std::to_string(ProjectionTables::kMaxOverlap) + " patches");
    return t;
}

float sample_erp(const ErpImage& img, int c, double x_e, double y_e) {
    const int W = img.width, H = img.height;
    const int x0 = static_cast<int>(std::floor(x_e));
    const double fx = x_e - x0;
    double y = std::clamp(y_e, 0.0, static_cast<double>(H - 1));
    int y0 = static_cast<int>(std::floor(y));
    if (y0 > H - 2) y0 = H - 2 >= 0 ? H - 2 : 0;
    const double fy = y - y0;
    const int xa = ((x0 % W) + W) % W;           // wrap
    const int xb = (xa + 1) % W;                 // columns W-1 and 0 adjacent
    const int y1 = std::min(y0 + 1, H - 1);
    const double v00 = img.at(c, y0, xa), v01 = img.at(c, y0, xb);
    const double v10 = img.at(c, y1, xa), v11 = img.at(c, y1, xb);
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
}

bool sample_erp_masked(const ErpImage& img, int c, double x_e, double y_e, float& out) {
    const int W = img.width, H = img.height;
    const int x0 = static_cast<int>(std::floor(x_e));
    const double fx = x_e - x0;
    double y = std::clamp(y_e, 0.0, static_cast<double>(H - 1));
    int y0 = static_cast<int>(std::floor(y));
    if (y0 > H - 2) y0 = H - 2 >= 0 ? H - 2 : 0;
    const double fy = y - y0;
    const int xa = ((x0 % W) + W) % W;
    const int xb = (xa + 1) % W;
    const int y1 = std::min(y0 + 1, H - 1);
    if (!(img.valid(y0, xa) && img.valid(y0, xb) && img.valid(y1, xa) && img.valid(y1, xb))) return false;
    const double v00 = img.at(c, y0, xa), v01 = img.at(c, y0, xb);
    const double v10 = img.at(c, y1, xa), v11 = img.at(c, y1, xb);
    out = static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
    return true;
}

float sample_patch(const PatchStack& s, int p, int c, double px, double py) {
    const int res = s.res;
    const double x = std::clamp(px, 0.0, res - 1.0);
    const double y = std::clamp(py, 0.0, res - 1.0);
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 > res - 2) x0 = res - 2 >= 0 ? res - 2 : 0;
    if (y0 > res - 2) y0 = res - 2 >= 0 ? res - 2 : 0;
    const double fx = x - x0, fy = y - y0;
    const int x1 = std::min(x0 + 1, res - 1), y1 = std::min(y0 + 1, res - 1);
    const double v00 = s.at(p, c, y0, x0), v01 = s.at(p, c, y0, x1);
    const double v10 = s.at(p, c, y1, x0), v11 = s.at(p, c, y1, x1);
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
}

PatchStack extract_patches(const ErpImage& erp, const ProjectionTables& tables) {
    if (erp.width != tables.width || erp.height != tables.height)
        throw std::invalid_argument("extract_patches: image shape does not match tables");
    const int res = tables.layout.patch_res;
    const int n = tables.layout.n_patches();
    PatchStack out = PatchStack::make(n, res, erp.channels);

#pragma omp parallel for schedule(static)
    for (int p = 0; p < n; ++p) {
        const auto& fwd = tables.forward[p];
        for (int c = 0; c < erp.channels; ++c)
            for (int j = 0; j < res; ++j)
                for (int i = 0; i < res; ++i) {
                    const size_t k = static_cast<size_t>(j) * res + i;
                    out.at(p, c, j, i) = sample_erp(erp, c, fwd[2 * k], fwd[2 * k + 1]);
                }
    }
    return out;
}

ErpImage merge_to_erp(const PatchStack& depths, const ConfidenceStack& conf, const ProjectionTables& tables) {
    const int res = tables.layout.patch_res, n = tables.layout.n_patches();
    if (depths.n != n || depths.res != res || depths.channels != 1)
        throw std::invalid_argument("merge_to_erp: depth stack misaligned with tables");
    if (conf.n != n || conf.res != res || conf.channels != 1)
        throw std::invalid_argument("merge_to_erp: confidence stack misaligned with tables");

    ErpImage out = ErpImage::make(tables.width, tables.height, 1);
    out.mask.assign(out.n_pixels(), 0);

#pragma omp parallel for schedule(static)
    for (int y = 0; y < tables.height; ++y) {
        for (int x = 0; x < tables.width; ++x) {
            const size_t pix = static_cast<size_t>(y) * tables.width + x;
            const int cnt = tables.count_at(pix);
            if (cnt == 0) continue;  // stays masked invalid
            const auto* es = tables.entries_at(pix);
            double num = 0.0, den = 0.0, plain = 0.0;
            for (int k = 0; k < cnt; ++k) {
                const double d = sample_patch(depths, es[k].patch, 0, es[k].px, es[k].py);
                const double w = sample_patch(conf, es[k].patch, 0, es[k].px, es[k].py);
                num += w * d;
                den += w;
                plain += d;
            }
            out.at(0, y, x) = static_cast<float>(den < kMergeEps ? plain / cnt : num / (den + kMergeEps));
            out.mask[pix] = 1;
        }
    }
    return out;
}

ErpImage mean_merge(const PatchStack& depths, const ProjectionTables& tables) {
    ConfidenceStack unit = PatchStack::make(depths.n, depths.res, 1);
    std::fill(unit.data.begin(), unit.data.end(), 1.f);
    return merge_to_erp(depths, unit, tables);
}

double psnr(const ErpImage& a, const ErpImage& b, double peak) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw std::invalid_argument("psnr: shape mismatch");
    double se = 0.0;
    int64_t count = 0;
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y < a.height; ++y)
            for (int x = 0; x < a.width; ++x) {
                if (!a.valid(y, x) || !b.valid(y, x)) continue;
                const double d = static_cast<double>(a.at(c, y, x)) - b.at(c, y, x);
                se += d * d;
                ++count;
            }
    if (count == 0) throw std::invalid_argument("psnr: no jointly valid pixels");
    const double mse = se / count;
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace tandepth
