#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tandepth/model.hpp"
#include "tandepth/patch_pipeline.hpp"
#include "tandepth/sphere_geometry.hpp"

namespace tandepth {

// ---- OMNIDEPTH v1 ----
// ASCII header "OMNIDEPTH v1 <W> <H>\n", then H*W little-endian float32,
// row-major, top row first. NaN encodes invalid pixels.

struct FloatGrid {
    int width = 0, height = 0;
    std::vector<float> data;                // NaN-free; invalid pixels are 0
    std::vector<std::uint8_t> valid;        // per pixel
};

FloatGrid read_depth_file(const std::string& path);
void write_depth_file(const std::string& path, int width, int height, const float* data,
                      const std::uint8_t* valid_mask /* nullptr = all valid */);

void write_depth_file(const std::string& path, const ErpImage& img);
ErpImage grid_to_erp(const FloatGrid& grid);

// ---- OMNIPARAM v1 ----
// Line "OMNIPARAM v1", one manifest line per tensor ("<name> <rank> <dims...>"),
// a blank line, then all values as little-endian float32 in manifest order.

struct NamedTensor {
    std::string name;
    std::vector<int> dims;
    std::vector<float> values;
};

std::vector<NamedTensor> read_params_file(const std::string& path);
void write_params_file(const std::string& path, const ParamStoreT<float>& params);

// Loads into an existing store; every name must match an entry of equal shape.
void load_params(ParamStoreT<float>& params, const std::vector<NamedTensor>& tensors);

// ---- run configuration ----
// Line-oriented "key = value" text; '#' starts a comment; unknown keys are an
// error.

struct RunConfig {
    std::vector<RingSpec> rings = {{-67.5, 3}, {-22.5, 6}, {22.5, 6}, {67.5, 3}};
    double fov_deg = 80.0;
    int patch_res = 64;
    int erp_height = 64;  // width is always 2*height
    int channels0 = 8, channels1 = 32, channels2 = 64;
    int embed_hidden = 32;
    int reduce_channels = 4;
    int blocks = 6;
    int heads = 4;
    int train_iters = 2;
    int scenes = 8;
    int steps = 1500;
    double lr = 1e-4;
    std::uint64_t seed = 1;

    PatchLayout make_layout() const { return build_patch_layout(rings, fov_deg, patch_res); }
    ModelConfig make_model_config() const {
        ModelConfig m;
        m.c0 = channels0;
        m.c1 = channels1;
        m.c2 = channels2;
        m.embed_hidden = embed_hidden;
        m.reduce_channels = reduce_channels;
        m.blocks = blocks;
        m.heads = heads;
        m.patch_res = patch_res;
        m.n_patches = 0;
        for (const RingSpec& r : rings) m.n_patches += r.count;
        return m;
    }
};

RunConfig read_config(const std::string& path);
std::string describe_config_keys();

// ---- PNG (8-bit, gray or RGB) ----

struct PngImage {
    int width = 0, height = 0, channels = 0;  // 1 or 3
    std::vector<std::uint8_t> data;           // interleaved
};

PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& img);

// [0,1] float conversion; gray PNG -> 1 channel, RGB -> 3. The image must be
// ERP-shaped (width = 2*height).
ErpImage png_to_erp(const PngImage& img);
PngImage erp_to_png(const ErpImage& img);

// [0,1] float conversion of a gray PNG of any shape (patch files).
FloatGrid png_to_grid(const PngImage& img);

bool has_suffix(const std::string& s, const std::string& suffix);

}  // namespace tandepth
