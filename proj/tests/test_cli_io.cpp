#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tandepth/io.hpp"

using namespace tandepth;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "tandepth_io_test";
    fs::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("depth file: bit-identical roundtrip, NaN mask, truncation") {
    const fs::path dir = temp_dir();
    const int W = 20, H = 10;
    std::vector<float> data(W * H);
    std::vector<std::uint8_t> valid(W * H, 1);
    Rng rng(1);
    for (auto& v : data) v = static_cast<float>(rng.uniform(-5.0, 5.0));
    valid[7] = valid[113] = 0;

    const std::string path = (dir / "depth.od").string();
    write_depth_file(path, W, H, data.data(), valid.data());
    const FloatGrid g = read_depth_file(path);
    CHECK(g.width == W);
    CHECK(g.height == H);
    for (int i = 0; i < W * H; ++i) {
        CHECK(g.valid[i] == valid[i]);
        if (valid[i]) CHECK(g.data[i] == data[i]);  // bit-identical payload
    }

    // second write of the re-read grid is byte-identical
    const std::string path2 = (dir / "depth2.od").string();
    write_depth_file(path2, W, H, g.data.data(), g.valid.data());
    CHECK(slurp(path) == slurp(path2));

    // truncated payload is rejected with a diagnostic
    const auto bytes = slurp(path);
    const std::string trunc = (dir / "trunc.od").string();
    std::ofstream(trunc, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 13));
    CHECK_THROWS_WITH_AS(static_cast<void>(read_depth_file(trunc)),
                         doctest::Contains("truncated"), std::runtime_error);

    // wrong magic
    const std::string bad = (dir / "bad.od").string();
    std::ofstream(bad) << "OMNIWRONG v1 4 2\n";
    CHECK_THROWS_AS(static_cast<void>(read_depth_file(bad)), std::runtime_error);
    CHECK_THROWS_AS(static_cast<void>(read_depth_file((dir / "missing.od").string())), std::runtime_error);
}

TEST_CASE("params file: byte-identical roundtrip and shape validation") {
    const fs::path dir = temp_dir();
    ModelConfig cfg;
    cfg.patch_res = 16;
    cfg.n_patches = 2;
    cfg.c0 = 4;
    cfg.c1 = 6;
    cfg.c2 = 8;
    cfg.embed_hidden = 5;
    cfg.reduce_channels = 2;
    cfg.blocks = 1;
    cfg.heads = 2;
    auto model = ModelT<float>::init(cfg, 5);

    const std::string path = (dir / "model.op").string();
    write_params_file(path, model.params);
    const auto tensors = read_params_file(path);
    CHECK(tensors.size() == model.params.entries.size());

    auto other = ModelT<float>::init(cfg, 6);
    load_params(other.params, tensors);
    for (size_t i = 0; i < model.params.entries.size(); ++i) {
        const auto& a = model.params.entries[i].var.val();
        const auto& b = other.params.entries[i].var.val();
        for (int64_t k = 0; k < a.numel(); ++k) CHECK(a.v[k] == b.v[k]);
    }

    const std::string path2 = (dir / "model2.op").string();
    write_params_file(path2, other.params);
    CHECK(slurp(path) == slurp(path2));  // byte-identical

    // mismatched shapes are rejected
    ModelConfig narrow = cfg;
    narrow.c0 = 3;
    auto wrong = ModelT<float>::init(narrow, 5);
    CHECK_THROWS_AS(load_params(wrong.params, tensors), std::runtime_error);

    // truncated payload is rejected
    const auto bytes = slurp(path);
    const std::string trunc = (dir / "trunc.op").string();
    std::ofstream(trunc, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    CHECK_THROWS_WITH_AS(static_cast<void>(read_params_file(trunc)), doctest::Contains("truncated"),
                         std::runtime_error);
}

TEST_CASE("config: parsing, defaults, unknown keys") {
    const fs::path dir = temp_dir();
    const std::string path = (dir / "run.cfg").string();
    {
        std::ofstream os(path);
        os << "# desk-scale run\n"
           << "rings = -60:2, 0:4, 60:2\n"
           << "fov_deg = 75\n"
           << "patch_res = 32\n"
           << "erp_height = 48\n"
           << "lr = 0.001\n"
           << "seed = 12345\n";
    }
    const RunConfig cfg = read_config(path);
    REQUIRE(cfg.rings.size() == 3);
    CHECK(cfg.rings[0].latitude_deg == -60.0);
    CHECK(cfg.rings[1].count == 4);
    CHECK(cfg.fov_deg == 75.0);
    CHECK(cfg.patch_res == 32);
    CHECK(cfg.erp_height == 48);
    CHECK(cfg.lr == 0.001);
    CHECK(cfg.seed == 12345);
    // untouched keys keep their defaults
    CHECK(cfg.blocks == 6);
    CHECK(cfg.heads == 4);
    CHECK(cfg.train_iters == 2);

    const PatchLayout layout = cfg.make_layout();
    CHECK(layout.n_patches() == 8);
    const ModelConfig mc = cfg.make_model_config();
    CHECK(mc.n_patches == 8);
    CHECK(mc.patch_res == 32);

    const std::string bad = (dir / "bad.cfg").string();
    std::ofstream(bad) << "patch_size = 32\n";  // typo
    CHECK_THROWS_WITH_AS(static_cast<void>(read_config(bad)), doctest::Contains("unknown config key"),
                         std::runtime_error);

    const std::string badval = (dir / "badval.cfg").string();
    std::ofstream(badval) << "patch_res = twelve\n";
    CHECK_THROWS_AS(static_cast<void>(read_config(badval)), std::runtime_error);

    // the default config matches the paper-shaped defaults
    const RunConfig defaults;
    int n = 0;
    for (const auto& r : defaults.rings) n += r.count;
    CHECK(n == 18);
    CHECK(defaults.fov_deg == 80.0);
    CHECK(defaults.blocks == 6);
    CHECK(defaults.heads == 4);
    CHECK(defaults.train_iters == 2);
    CHECK(defaults.lr == 1e-4);
}

TEST_CASE("png: lossless 8-bit roundtrip") {
    const fs::path dir = temp_dir();
    PngImage img;
    img.width = 9;
    img.height = 7;
    img.channels = 3;
    img.data.resize(9 * 7 * 3);
    Rng rng(2);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.uniform() * 256);

    const std::string path = (dir / "t.png").string();
    write_png(path, img);
    const PngImage back = read_png(path);
    CHECK(back.width == 9);
    CHECK(back.height == 7);
    CHECK(back.channels == 3);
    CHECK(back.data == img.data);

    PngImage gray;
    gray.width = 5;
    gray.height = 4;
    gray.channels = 1;
    gray.data.assign(20, 0);
    for (size_t i = 0; i < gray.data.size(); ++i) gray.data[i] = static_cast<std::uint8_t>(13 * i);
    const std::string gpath = (dir / "g.png").string();
    write_png(gpath, gray);
    CHECK(read_png(gpath).data == gray.data);

    // float conversion maps 0..255 onto [0,1]; ERP conversion wants 2:1
    const FloatGrid as_grid = png_to_grid(gray);
    CHECK(as_grid.data[1] == doctest::Approx(13.0 / 255.0));
    CHECK_THROWS_AS(static_cast<void>(png_to_erp(back)), std::invalid_argument);
}

TEST_CASE("suffix helper") {
    CHECK(has_suffix("depth.od", ".od"));
    CHECK(has_suffix("a.png", ".png"));
    CHECK_FALSE(has_suffix("a.png", ".od"));
    CHECK_FALSE(has_suffix("od", ".od"));
}
