#include "tandepth/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tandepth {

namespace {

// All binary payloads are little-endian float32; this build targets
// little-endian hosts.
static_assert(sizeof(float) == 4, "float32 required");

void write_exact(std::ofstream& os, const void* p, size_t n, const std::string& path) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw std::runtime_error("write failed: " + path);
}

void read_exact(std::ifstream& is, void* p, size_t n, const std::string& path) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw std::runtime_error("truncated file (expected " + std::to_string(n) + " more bytes): " + path);
}

}  // namespace

FloatGrid read_depth_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open depth file: " + path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("truncated depth header: " + path);
    std::istringstream hdr(line);
    std::string magic, version;
    int w = 0, h = 0;
    hdr >> magic >> version >> w >> h;
    if (magic != "OMNIDEPTH" || version != "v1" || !hdr || w < 1 || h < 1)
        throw std::runtime_error("bad OMNIDEPTH v1 header: " + path);
    FloatGrid g;
    g.width = w;
    g.height = h;
    g.data.resize(static_cast<size_t>(w) * h);
    read_exact(is, g.data.data(), g.data.size() * sizeof(float), path);
    g.valid.resize(g.data.size());
    for (size_t i = 0; i < g.data.size(); ++i) {
        if (std::isnan(g.data[i])) {
            g.valid[i] = 0;
            g.data[i] = 0.f;
        } else {
            g.valid[i] = 1;
        }
    }
    return g;
}

void write_depth_file(const std::string& path, int width, int height, const float* data,
                      const std::uint8_t* valid_mask) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot create depth file: " + path);
    os << "OMNIDEPTH v1 " << width << " " << height << "\n";
    const size_t n = static_cast<size_t>(width) * height;
    if (!valid_mask) {
        write_exact(os, data, n * sizeof(float), path);
        return;
    }
    std::vector<float> buf(data, data + n);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (size_t i = 0; i < n; ++i)
        if (!valid_mask[i]) buf[i] = nan;
    write_exact(os, buf.data(), n * sizeof(float), path);
}

void write_depth_file(const std::string& path, const ErpImage& img) {
    if (img.channels != 1) throw std::invalid_argument("write_depth_file: single-channel image required");
    write_depth_file(path, img.width, img.height, img.data.data(), img.mask.empty() ? nullptr : img.mask.data());
}

ErpImage grid_to_erp(const FloatGrid& grid) {
    ErpImage img = ErpImage::make(grid.width, grid.height, 1);
    img.data = grid.data;
    if (std::find(grid.valid.begin(), grid.valid.end(), 0) != grid.valid.end()) img.mask = grid.valid;
    return img;
}

std::vector<NamedTensor> read_params_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open params file: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "OMNIPARAM v1")
        throw std::runtime_error("bad OMNIPARAM v1 header: " + path);
    std::vector<NamedTensor> tensors;
    while (std::getline(is, line)) {
        if (line.empty()) break;  // manifest terminator
        std::istringstream ls(line);
        NamedTensor t;
        int rank = 0;
        ls >> t.name >> rank;
        if (!ls || rank < 1 || rank > 4) throw std::runtime_error("bad manifest line in " + path + ": " + line);
        int64_t n = 1;
        for (int i = 0; i < rank; ++i) {
            int d = 0;
            ls >> d;
            if (!ls || d < 1) throw std::runtime_error("bad manifest dims in " + path + ": " + line);
            t.dims.push_back(d);
            n *= d;
        }
        t.values.resize(static_cast<size_t>(n));
        tensors.push_back(std::move(t));
    }
    for (auto& t : tensors) read_exact(is, t.values.data(), t.values.size() * sizeof(float), path);
    return tensors;
}

void write_params_file(const std::string& path, const ParamStoreT<float>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot create params file: " + path);
    os << "OMNIPARAM v1\n";
    for (const auto& e : params.entries) {
        os << e.name << " " << e.var.val().nd;
        for (int i = 0; i < e.var.val().nd; ++i) os << " " << e.var.val().dims[i];
        os << "\n";
    }
    os << "\n";
    for (const auto& e : params.entries)
        write_exact(os, e.var.val().data(), e.var.val().v.size() * sizeof(float), path);
}

void load_params(ParamStoreT<float>& params, const std::vector<NamedTensor>& tensors) {
    if (tensors.size() != params.entries.size())
        throw std::runtime_error("params file has " + std::to_string(tensors.size()) + " tensors, model wants " +
                                 std::to_string(params.entries.size()));
    for (const auto& t : tensors) {
        VarT<float> v = params.get(t.name);
        const auto& val = v.val();
        bool shape_ok = val.nd == static_cast<int>(t.dims.size());
        for (size_t i = 0; shape_ok && i < t.dims.size(); ++i) shape_ok = val.dims[i] == t.dims[i];
        if (!shape_ok) throw std::runtime_error("parameter shape mismatch for " + t.name);
        v.n->val.v = t.values;
    }
}

namespace {

struct KeyValue {
    std::string key, value;
};

std::vector<KeyValue> parse_kv_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::vector<KeyValue> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
        out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
    }
    return out;
}

std::vector<RingSpec> parse_rings(const std::string& text) {
    // "lat:count,lat:count,..."
    std::vector<RingSpec> rings;
    std::istringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw std::runtime_error("rings: expected lat:count, got '" + item + "'");
        RingSpec r;
        r.latitude_deg = std::stod(item.substr(0, colon));
        r.count = std::stoi(item.substr(colon + 1));
        rings.push_back(r);
    }
    if (rings.empty()) throw std::runtime_error("rings: empty specification");
    return rings;
}

}  // namespace

RunConfig read_config(const std::string& path) {
    RunConfig cfg;
    for (const auto& [key, value] : parse_kv_lines(path)) {
        try {
            if (key == "rings") cfg.rings = parse_rings(value);
            else if (key == "fov_deg") cfg.fov_deg = std::stod(value);
            else if (key == "patch_res") cfg.patch_res = std::stoi(value);
            else if (key == "erp_height") cfg.erp_height = std::stoi(value);
            else if (key == "channels0") cfg.channels0 = std::stoi(value);
            else if (key == "channels1") cfg.channels1 = std::stoi(value);
            else if (key == "channels2") cfg.channels2 = std::stoi(value);
            else if (key == "embed_hidden") cfg.embed_hidden = std::stoi(value);
            else if (key == "reduce_channels") cfg.reduce_channels = std::stoi(value);
            else if (key == "blocks") cfg.blocks = std::stoi(value);
            else if (key == "heads") cfg.heads = std::stoi(value);
            else if (key == "train_iters") cfg.train_iters = std::stoi(value);
            else if (key == "scenes") cfg.scenes = std::stoi(value);
            else if (key == "steps") cfg.steps = std::stoi(value);
            else if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else throw std::runtime_error("unknown config key: " + key);
        } catch (const std::invalid_argument&) {
            throw std::runtime_error("bad value for config key " + key + ": '" + value + "'");
        }
    }
    return cfg;
}

std::string describe_config_keys() {
    const RunConfig d;
    std::ostringstream os;
    os << "config keys (key = value per line, # comments):\n"
       << "  rings            ring layout lat:count,... (default -67.5:3,-22.5:6,22.5:6,67.5:3)\n"
       << "  fov_deg          patch field of view (default " << d.fov_deg << ")\n"
       << "  patch_res        patch resolution, multiple of 8 (default " << d.patch_res << ")\n"
       << "  erp_height       ERP height, width is 2x (default " << d.erp_height << ")\n"
       << "  channels0/1/2    encoder stage widths (default " << d.channels0 << "/" << d.channels1 << "/"
       << d.channels2 << ")\n"
       << "  embed_hidden     geometric MLP hidden width (default " << d.embed_hidden << ")\n"
       << "  reduce_channels  1x1 token reduction width (default " << d.reduce_channels << ")\n"
       << "  blocks           transformer depth (default " << d.blocks << ")\n"
       << "  heads            attention heads (default " << d.heads << ")\n"
       << "  train_iters      unrolled refinement iterations (default " << d.train_iters << ")\n"
       << "  scenes           synthetic scene count (default " << d.scenes << ")\n"
       << "  steps            training steps (default " << d.steps << ")\n"
       << "  lr               initial learning rate, cosine-annealed (default " << d.lr << ")\n"
       << "  seed             RNG seed (default " << d.seed << ")\n";
    return os.str();
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ErpImage png_to_erp(const PngImage& img) {
    ErpImage e = ErpImage::make(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                e.at(c, y, x) =
                    img.data[(static_cast<size_t>(y) * img.width + x) * img.channels + c] / 255.f;
    return e;
}

FloatGrid png_to_grid(const PngImage& img) {
    if (img.channels != 1) throw std::invalid_argument("png_to_grid: gray PNG required");
    FloatGrid g;
    g.width = img.width;
    g.height = img.height;
    g.data.resize(static_cast<size_t>(img.width) * img.height);
    g.valid.assign(g.data.size(), 1);
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] = img.data[i] / 255.f;
    return g;
}

PngImage erp_to_png(const ErpImage& img) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("erp_to_png: want 1 or 3 channels");
    PngImage p;
    p.width = img.width;
    p.height = img.height;
    p.channels = img.channels;
    p.data.resize(static_cast<size_t>(img.width) * img.height * img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
                p.data[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.f));
            }
    return p;
}

}  // namespace tandepth
