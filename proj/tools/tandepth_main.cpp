// tandepth: tangent-patch monocular depth for equirectangular panoramas.
//
// Subcommands: project, merge, infer, train, eval, selftest. Exit codes:
// 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tandepth/io.hpp"
#include "tandepth/selftest.hpp"
#include "tandepth/train_eval.hpp"

namespace fs = std::filesystem;
using namespace tandepth;

namespace {

ErpImage load_erp_input(const std::string& path) {
    if (has_suffix(path, ".png")) return png_to_erp(read_png(path));
    return grid_to_erp(read_depth_file(path));
}

// Gray-to-RGB replication so grayscale panoramas feed the 3-channel encoder.
ErpImage ensure_channels(const ErpImage& img, int channels) {
    if (img.channels == channels) return img;
    if (img.channels == 1 && channels == 3) {
        ErpImage out = ErpImage::make(img.width, img.height, 3);
        for (int c = 0; c < 3; ++c)
            std::copy(img.data.begin(), img.data.begin() + img.n_pixels(),
                      out.data.begin() + c * img.n_pixels());
        out.mask = img.mask;
        return out;
    }
    throw std::runtime_error("input has " + std::to_string(img.channels) + " channels, the model wants " +
                             std::to_string(channels));
}

struct Manifest {
    int erp_width = 0, erp_height = 0;
    PatchLayout layout;
    std::vector<std::string> files;
};

void write_manifest(const std::string& dir, const Manifest& m) {
    std::ofstream os(dir + "/layout.txt");
    if (!os) throw std::runtime_error("cannot create manifest in " + dir);
    os << std::setprecision(17);
    os << "erp_width = " << m.erp_width << "\n"
       << "erp_height = " << m.erp_height << "\n"
       << "fov_deg = " << m.layout.fov_deg << "\n"
       << "patch_res = " << m.layout.patch_res << "\n"
       << "patches = " << m.layout.n_patches() << "\n";
    for (int p = 0; p < m.layout.n_patches(); ++p)
        os << "pose " << p << " = " << m.layout.poses[p].lambda_c << " " << m.layout.poses[p].phi_c << " "
           << m.files[p] << "\n";
}

Manifest read_manifest(const std::string& dir) {
    std::ifstream is(dir + "/layout.txt");
    if (!is) throw std::runtime_error("no layout.txt manifest in " + dir);
    Manifest m;
    int n = -1;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "erp_width") {
            std::string eq;
            ls >> eq >> m.erp_width;
        } else if (key == "erp_height") {
            std::string eq;
            ls >> eq >> m.erp_height;
        } else if (key == "fov_deg") {
            std::string eq;
            ls >> eq >> m.layout.fov_deg;
        } else if (key == "patch_res") {
            std::string eq;
            ls >> eq >> m.layout.patch_res;
        } else if (key == "patches") {
            std::string eq;
            ls >> eq >> n;
        } else if (key == "pose") {
            int idx;
            std::string eq, file;
            TangentPose pose;
            ls >> idx >> eq >> pose.lambda_c >> pose.phi_c >> file;
            if (!ls) throw std::runtime_error("bad pose line in manifest: " + line);
            m.layout.poses.push_back(pose);
            m.files.push_back(file);
        }
    }
    if (m.erp_width != 2 * m.erp_height || n < 1 || static_cast<int>(m.layout.poses.size()) != n)
        throw std::runtime_error("inconsistent manifest in " + dir);
    return m;
}

PatchStack read_patch_dir(const std::string& dir, const Manifest& m) {
    PatchStack s = PatchStack::make(m.layout.n_patches(), m.layout.patch_res, 1);
    for (int p = 0; p < m.layout.n_patches(); ++p) {
        const std::string path = dir + "/" + m.files[p];
        FloatGrid g;
        if (has_suffix(path, ".png")) {
            const PngImage img = read_png(path);
            if (img.channels != 1) throw std::runtime_error("patch must be single-channel: " + path);
            g = png_to_grid(img);
        } else {
            g = read_depth_file(path);
        }
        if (g.width != m.layout.patch_res || g.height != m.layout.patch_res)
            throw std::runtime_error("patch resolution mismatch: " + path);
        std::copy(g.data.begin(), g.data.end(), s.data.begin() + static_cast<size_t>(p) * g.data.size());
    }
    return s;
}

int cmd_project(const std::string& input, const std::string& config, const std::string& out_dir) {
    const RunConfig cfg = config.empty() ? RunConfig{} : read_config(config);
    const ErpImage erp = load_erp_input(input);
    const PatchLayout layout = cfg.make_layout();
    const ProjectionTables tables = build_tables(layout, erp.width, erp.height);
    const PatchStack patches = extract_patches(erp, tables);

    fs::create_directories(out_dir);
    const bool as_png = has_suffix(input, ".png");
    Manifest m;
    m.erp_width = erp.width;
    m.erp_height = erp.height;
    m.layout = layout;
    for (int p = 0; p < layout.n_patches(); ++p) {
        std::ostringstream name;
        name << "patch_" << std::setw(3) << std::setfill('0') << p << (as_png ? ".png" : ".od");
        m.files.push_back(name.str());
        const std::string path = out_dir + "/" + name.str();
        if (as_png) {
            ErpImage one;  // reuse the PNG writer on a square grid
            one.width = one.height = layout.patch_res;
            one.channels = patches.channels;
            one.data.assign(patches.data.begin() + static_cast<size_t>(p) * patches.channels * layout.patch_res * layout.patch_res,
                            patches.data.begin() + static_cast<size_t>(p + 1) * patches.channels * layout.patch_res * layout.patch_res);
            write_png(path, erp_to_png(one));
        } else {
            write_depth_file(path, layout.patch_res, layout.patch_res,
                             patches.data.data() + static_cast<size_t>(p) * layout.patch_res * layout.patch_res,
                             nullptr);
        }
    }
    write_manifest(out_dir, m);
    std::cout << "wrote " << layout.n_patches() << " patches to " << out_dir << "\n";
    return 0;
}

int cmd_merge(const std::string& patches_dir, const std::string& confidence, const std::string& config,
              const std::string& out_path) {
    const Manifest m = read_manifest(patches_dir);
    if (!config.empty()) {
        const RunConfig cfg = read_config(config);
        const PatchLayout expect = cfg.make_layout();
        if (expect.n_patches() != m.layout.n_patches() || expect.patch_res != m.layout.patch_res)
            throw std::runtime_error("config does not match the patch manifest");
    }
    const ProjectionTables tables = build_tables(m.layout, m.erp_width, m.erp_height);
    const PatchStack depths = read_patch_dir(patches_dir, m);

    ErpImage merged;
    if (confidence == "uniform") {
        merged = mean_merge(depths, tables);
    } else {
        const PatchStack conf = read_patch_dir(confidence, m);
        merged = merge_to_erp(depths, conf, tables);
    }
    write_depth_file(out_path, merged);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

ModelT<float> build_model(const RunConfig& cfg, const std::string& params_path) {
    auto model = ModelT<float>::init(cfg.make_model_config(), cfg.seed);
    load_params(model.params, read_params_file(params_path));
    return model;
}

int cmd_infer(const std::string& input, const std::string& params_path, int iters, const std::string& config,
              const std::string& out_path) {
    const RunConfig cfg = config.empty() ? RunConfig{} : read_config(config);
    ErpImage erp = load_erp_input(input);

    PipelineConfig pcfg;
    pcfg.model = cfg.make_model_config();
    pcfg.layout = cfg.make_layout();
    pcfg.erp_width = erp.width;
    pcfg.erp_height = erp.height;
    const PipelineContext ctx = PipelineContext::build(pcfg);

    auto model = build_model(cfg, params_path);
    erp = ensure_channels(erp, model.cfg.in_channels);
    const InferResult result = infer(erp, model, ctx, iters);
    write_depth_file(out_path, result.depth);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

std::vector<SceneSpec> parse_scenes(const std::string& arg, uint64_t seed) {
    char* end = nullptr;
    const long n = std::strtol(arg.c_str(), &end, 10);
    if (end && *end == '\0') {
        if (n < 1) throw std::runtime_error("scene count must be >= 1");
        return make_scenes(static_cast<int>(n), seed);
    }
    std::ifstream is(arg);
    if (!is) throw std::runtime_error("cannot open scene manifest: " + arg);
    std::vector<SceneSpec> scenes;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        SceneSpec s;
        ls >> s.half_x >> s.half_y >> s.half_z >> s.texture_id >> s.seed;
        if (!ls) throw std::runtime_error("bad scene line: " + line);
        scenes.push_back(s);
    }
    if (scenes.empty()) throw std::runtime_error("scene manifest is empty: " + arg);
    return scenes;
}

int cmd_train(const std::string& scenes_arg, int steps, uint64_t seed, bool seed_set, double lr,
              const std::string& config, const std::string& out_path) {
    RunConfig cfg = config.empty() ? RunConfig{} : read_config(config);
    if (steps > 0) cfg.steps = steps;
    if (seed_set) cfg.seed = seed;
    if (lr > 0) cfg.lr = lr;

    PipelineConfig pcfg;
    pcfg.model = cfg.make_model_config();
    pcfg.layout = cfg.make_layout();
    pcfg.erp_width = 2 * cfg.erp_height;
    pcfg.erp_height = cfg.erp_height;
    const PipelineContext ctx = PipelineContext::build(pcfg);

    const auto scenes = parse_scenes(scenes_arg.empty() ? std::to_string(cfg.scenes) : scenes_arg, cfg.seed);
    auto model = ModelT<float>::init(pcfg.model, cfg.seed);

    TrainOptions opt;
    opt.steps = cfg.steps;
    opt.lr = cfg.lr;
    opt.seed = cfg.seed;
    opt.train_iters = cfg.train_iters;

    const TrainResult result = train(model, ctx, scenes, opt);
    std::cout << std::setprecision(10);
    for (const auto& rec : result.trace) {
        std::cout << "step=" << rec.step << " lr=" << rec.lr << " loss=" << rec.loss;
        for (size_t i = 0; i < rec.iteration_losses.size(); ++i)
            std::cout << " iter" << i << "=" << rec.iteration_losses[i];
        std::cout << "\n";
    }
    if (!out_path.empty()) {
        write_params_file(out_path, model.params);
        std::cerr << "wrote " << out_path << "\n";
    }
    return 0;
}

std::vector<std::uint8_t> load_mask_file(const std::string& path, size_t expect) {
    std::vector<std::uint8_t> mask;
    if (has_suffix(path, ".png")) {
        const PngImage img = read_png(path);
        if (img.channels != 1) throw std::runtime_error("mask PNG must be grayscale");
        mask.resize(img.data.size());
        for (size_t i = 0; i < img.data.size(); ++i) mask[i] = img.data[i] != 0;
    } else {
        const FloatGrid g = read_depth_file(path);
        mask.resize(g.data.size());
        for (size_t i = 0; i < g.data.size(); ++i) mask[i] = g.valid[i] && g.data[i] > 0.f;
    }
    if (mask.size() != expect) throw std::runtime_error("mask size does not match the depth maps");
    return mask;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path, const std::string& mask_path) {
    const ErpImage pred = grid_to_erp(read_depth_file(pred_path));
    const ErpImage gt = grid_to_erp(read_depth_file(gt_path));
    std::vector<std::uint8_t> mask;
    if (!mask_path.empty()) mask = load_mask_file(mask_path, gt.n_pixels());
    const MetricsRecord m = metrics(pred, gt, mask);
    std::cout << std::setprecision(10);
    std::cout << "abs_rel=" << m.abs_rel << "\n"
              << "sq_rel=" << m.sq_rel << "\n"
              << "rmse=" << m.rmse << "\n"
              << "rmse_log=" << m.rmse_log << "\n"
              << "delta1=" << m.delta1 << "\n"
              << "delta2=" << m.delta2 << "\n"
              << "delta3=" << m.delta3 << "\n"
              << "valid_count=" << m.valid_count << "\n";
    return 0;
}

int cmd_selftest(const std::string& data_dir) {
    const auto results = run_selftest(data_dir);
    for (const auto& r : results)
        std::cout << (r.passed ? "[PASS]" : "[FAIL]") << " criterion " << r.id << ": " << r.name << " (" << r.detail
                  << ")\n";
    return all_passed(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tangent-patch monocular depth for equirectangular panoramas"};
    app.require_subcommand(1);
    app.footer(describe_config_keys());

    std::string input, config, out, patches_dir, confidence = "uniform", params_path;
    std::string pred_path, gt_path, mask_path, scenes_arg, data_dir = "data";
    int iters = 2, steps = 0;
    std::uint64_t seed = 0;
    double lr = 0;

    auto* project = app.add_subcommand("project", "split an ERP image into tangent patches");
    project->add_option("--input", input, "ERP input (.png or OMNIDEPTH)")->required();
    project->add_option("--config", config, "run configuration file");
    project->add_option("--out", out, "output directory")->required();

    auto* merge = app.add_subcommand("merge", "merge patch depths back onto the ERP grid");
    merge->add_option("--patches", patches_dir, "directory with layout.txt and patch files")->required();
    merge->add_option("--confidence", confidence, "confidence patch directory, or 'uniform'");
    merge->add_option("--config", config, "run configuration file (consistency check)");
    merge->add_option("--out", out, "output OMNIDEPTH file")->required();

    auto* infer_cmd = app.add_subcommand("infer", "predict an ERP depth map");
    infer_cmd->add_option("--input", input, "ERP RGB input (.png)")->required();
    infer_cmd->add_option("--params", params_path, "OMNIPARAM model file")->required();
    infer_cmd->add_option("--iters", iters, "refinement iterations")->check(CLI::Range(1, 4));
    infer_cmd->add_option("--config", config, "run configuration file");
    infer_cmd->add_option("--out", out, "output OMNIDEPTH file")->required();

    auto* train_cmd = app.add_subcommand("train", "train on analytic box-room scenes");
    train_cmd->add_option("--scenes", scenes_arg, "scene count or scene manifest file");
    train_cmd->add_option("--steps", steps, "training steps");
    train_cmd->add_option("--seed", seed, "RNG seed");
    train_cmd->add_option("--lr", lr, "initial learning rate");
    train_cmd->add_option("--config", config, "run configuration file");
    train_cmd->add_option("--out", out, "output OMNIPARAM file");

    auto* eval_cmd = app.add_subcommand("eval", "depth metrics between two OMNIDEPTH files");
    eval_cmd->add_option("--pred", pred_path, "predicted depth")->required();
    eval_cmd->add_option("--gt", gt_path, "ground-truth depth")->required();
    eval_cmd->add_option("--mask", mask_path, "optional validity mask (.png or OMNIDEPTH)");

    auto* selftest_cmd = app.add_subcommand("selftest", "run the invariant/oracle suite");
    selftest_cmd->add_option("--data", data_dir, "data directory with the committed test image");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(project)) return cmd_project(input, config, out);
        if (app.got_subcommand(merge)) return cmd_merge(patches_dir, confidence, config, out);
        if (app.got_subcommand(infer_cmd)) return cmd_infer(input, params_path, iters, config, out);
        if (app.got_subcommand(train_cmd))
            return cmd_train(scenes_arg, steps, seed, train_cmd->count("--seed") > 0, lr, config, out);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(pred_path, gt_path, mask_path);
        if (app.got_subcommand(selftest_cmd)) return cmd_selftest(data_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
