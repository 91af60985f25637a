#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tandepth/io.hpp"
#include "tandepth/selftest.hpp"
#include "tandepth/train_eval.hpp"

namespace py = pybind11;
using namespace tandepth;

namespace {

ErpImage erp_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() == 2) {
        ErpImage img = ErpImage::make(static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)), 1);
        std::copy_n(arr.data(), img.data.size(), img.data.begin());
        return img;
    }
    if (arr.ndim() == 3) {  // (C, H, W)
        ErpImage img = ErpImage::make(static_cast<int>(arr.shape(2)), static_cast<int>(arr.shape(1)),
                                      static_cast<int>(arr.shape(0)));
        std::copy_n(arr.data(), img.data.size(), img.data.begin());
        return img;
    }
    throw std::invalid_argument("expected a (H,W) or (C,H,W) float array");
}

py::array_t<float> erp_to_array(const ErpImage& img, bool nan_invalid = true) {
    py::array_t<float> out(img.channels == 1 ? std::vector<py::ssize_t>{img.height, img.width}
                                             : std::vector<py::ssize_t>{img.channels, img.height, img.width});
    float* dst = out.mutable_data();
    std::copy(img.data.begin(), img.data.end(), dst);
    if (nan_invalid && !img.mask.empty())
        for (int c = 0; c < img.channels; ++c)
            for (size_t i = 0; i < img.n_pixels(); ++i)
                if (!img.mask[i]) dst[c * img.n_pixels() + i] = std::numeric_limits<float>::quiet_NaN();
    return out;
}

py::array_t<float> stack_to_array(const PatchStack& s) {
    py::array_t<float> out({static_cast<py::ssize_t>(s.n), static_cast<py::ssize_t>(s.channels),
                            static_cast<py::ssize_t>(s.res), static_cast<py::ssize_t>(s.res)});
    std::copy(s.data.begin(), s.data.end(), out.mutable_data());
    return out;
}

PatchStack stack_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() == 3) {  // (N, res, res) -> single channel
        PatchStack s = PatchStack::make(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)), 1);
        if (arr.shape(1) != arr.shape(2)) throw std::invalid_argument("patches must be square");
        std::copy_n(arr.data(), s.data.size(), s.data.begin());
        return s;
    }
    if (arr.ndim() == 4) {
        if (arr.shape(2) != arr.shape(3)) throw std::invalid_argument("patches must be square");
        PatchStack s = PatchStack::make(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(2)),
                                        static_cast<int>(arr.shape(1)));
        std::copy_n(arr.data(), s.data.size(), s.data.begin());
        return s;
    }
    throw std::invalid_argument("expected a (N,res,res) or (N,C,res,res) float array");
}

std::vector<std::uint8_t> mask_from_optional(py::object mask, size_t expect) {
    if (mask.is_none()) return {};
    auto arr = py::cast<py::array_t<bool, py::array::c_style | py::array::forcecast>>(mask);
    if (static_cast<size_t>(arr.size()) != expect) throw std::invalid_argument("mask size mismatch");
    std::vector<std::uint8_t> out(expect);
    for (size_t i = 0; i < expect; ++i) out[i] = arr.data()[i] ? 1 : 0;
    return out;
}

py::dict metrics_dict(const MetricsRecord& m) {
    py::dict d;
    d["abs_rel"] = m.abs_rel;
    d["sq_rel"] = m.sq_rel;
    d["rmse"] = m.rmse;
    d["rmse_log"] = m.rmse_log;
    d["delta1"] = m.delta1;
    d["delta2"] = m.delta2;
    d["delta3"] = m.delta3;
    d["valid_count"] = m.valid_count;
    return d;
}

// End-to-end pipeline handle: configuration, parameters, training, inference.
struct Pipeline {
    RunConfig cfg;
    PipelineContext ctx;
    ModelT<float> model;

    explicit Pipeline(const RunConfig& config, uint64_t seed) : cfg(config) {
        PipelineConfig pcfg;
        pcfg.model = cfg.make_model_config();
        pcfg.layout = cfg.make_layout();
        pcfg.erp_width = 2 * cfg.erp_height;
        pcfg.erp_height = cfg.erp_height;
        ctx = PipelineContext::build(pcfg);
        model = ModelT<float>::init(pcfg.model, seed);
    }

    std::vector<double> train_scenes(int scenes, int steps, double lr, uint64_t seed) {
        TrainOptions opt;
        opt.steps = steps;
        opt.lr = lr;
        opt.seed = seed;
        opt.train_iters = cfg.train_iters;
        const TrainResult r = train(model, ctx, make_scenes(scenes, seed), opt);
        std::vector<double> losses;
        for (const auto& rec : r.trace) losses.push_back(rec.loss);
        return losses;
    }

    py::array_t<float> infer_rgb(py::array_t<float, py::array::c_style | py::array::forcecast> rgb, int iters) {
        return erp_to_array(infer(erp_from_array(rgb), model, ctx, iters).depth);
    }

    void save(const std::string& path) const { write_params_file(path, model.params); }
    void load(const std::string& path) { load_params(model.params, read_params_file(path)); }
    int64_t n_params() const { return model.params.total_params(); }
};

RunConfig config_from_kwargs(py::kwargs kwargs) {
    RunConfig cfg;
    for (auto item : kwargs) {
        const std::string key = py::cast<std::string>(item.first);
        if (key == "patch_res") cfg.patch_res = py::cast<int>(item.second);
        else if (key == "erp_height") cfg.erp_height = py::cast<int>(item.second);
        else if (key == "fov_deg") cfg.fov_deg = py::cast<double>(item.second);
        else if (key == "channels") {
            auto t = py::cast<std::vector<int>>(item.second);
            if (t.size() != 3) throw std::invalid_argument("channels wants three values");
            cfg.channels0 = t[0];
            cfg.channels1 = t[1];
            cfg.channels2 = t[2];
        } else if (key == "embed_hidden") cfg.embed_hidden = py::cast<int>(item.second);
        else if (key == "reduce_channels") cfg.reduce_channels = py::cast<int>(item.second);
        else if (key == "blocks") cfg.blocks = py::cast<int>(item.second);
        else if (key == "heads") cfg.heads = py::cast<int>(item.second);
        else if (key == "train_iters") cfg.train_iters = py::cast<int>(item.second);
        else if (key == "rings") {
            cfg.rings.clear();
            for (auto ring : py::cast<py::list>(item.second)) {
                auto pair = py::cast<std::pair<double, int>>(ring);
                cfg.rings.push_back({pair.first, pair.second});
            }
        } else throw std::invalid_argument("unknown config key: " + key);
    }
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_tandepth, m) {
    m.doc() = "tangent-patch monocular depth for equirectangular panoramas";

    m.def("erp_to_sphere", [](double x, double y, int w, int h) {
        const SphericalPoint p = erp_to_sphere(x, y, w, h);
        return py::make_tuple(p.lambda, p.phi);
    }, py::arg("x_e"), py::arg("y_e"), py::arg("width"), py::arg("height"));

    m.def("sphere_to_erp", [](double lambda, double phi, int w, int h) {
        double x, y;
        sphere_to_erp(lambda, phi, w, h, x, y);
        return py::make_tuple(x, y);
    }, py::arg("lambda_"), py::arg("phi"), py::arg("width"), py::arg("height"));

    m.def("gnomonic_forward", [](double lambda, double phi, double lambda_c, double phi_c) {
        const GnomonicResult r = gnomonic_forward({lambda, phi, 1.0}, {lambda_c, phi_c});
        return py::make_tuple(r.coord.x_t, r.coord.y_t, r.valid);
    }, py::arg("lambda_"), py::arg("phi"), py::arg("lambda_c"), py::arg("phi_c"));

    m.def("gnomonic_inverse", [](double x_t, double y_t, double lambda_c, double phi_c) {
        const SphericalPoint p = gnomonic_inverse({x_t, y_t}, {lambda_c, phi_c});
        return py::make_tuple(p.lambda, p.phi);
    }, py::arg("x_t"), py::arg("y_t"), py::arg("lambda_c"), py::arg("phi_c"));

    py::class_<ProjectionTables>(m, "ProjectionTables")
        .def_property_readonly("width", [](const ProjectionTables& t) { return t.width; })
        .def_property_readonly("height", [](const ProjectionTables& t) { return t.height; })
        .def_property_readonly("n_patches", [](const ProjectionTables& t) { return t.layout.n_patches(); })
        .def("coverage_count", [](const ProjectionTables& t) {
            py::array_t<int> out({static_cast<py::ssize_t>(t.height), static_cast<py::ssize_t>(t.width)});
            for (size_t i = 0; i < t.inv_count.size(); ++i) out.mutable_data()[i] = t.inv_count[i];
            return out;
        });

    m.def("default_layout_tables", [](int width, int height, int patch_res) {
        PatchLayout layout = default_layout();
        if (patch_res > 0) layout.patch_res = patch_res;
        return build_tables(layout, width, height);
    }, py::arg("width"), py::arg("height"), py::arg("patch_res") = 0);

    m.def("build_tables", [](std::vector<std::pair<double, int>> rings, double fov_deg, int patch_res, int width,
                             int height) {
        std::vector<RingSpec> rs;
        for (auto& [lat, count] : rings) rs.push_back({lat, count});
        return build_tables(build_patch_layout(rs, fov_deg, patch_res), width, height);
    }, py::arg("rings"), py::arg("fov_deg"), py::arg("patch_res"), py::arg("width"), py::arg("height"));

    m.def("extract_patches", [](py::array_t<float, py::array::c_style | py::array::forcecast> erp,
                                const ProjectionTables& tables) {
        return stack_to_array(extract_patches(erp_from_array(erp), tables));
    }, py::arg("erp"), py::arg("tables"));

    m.def("merge_to_erp", [](py::array_t<float, py::array::c_style | py::array::forcecast> depths, py::object conf,
                             const ProjectionTables& tables) {
        const PatchStack d = stack_from_array(depths);
        if (conf.is_none()) return erp_to_array(mean_merge(d, tables));
        const PatchStack c = stack_from_array(py::cast<py::array_t<float>>(conf));
        return erp_to_array(merge_to_erp(d, c, tables));
    }, py::arg("depths"), py::arg("confidence") = py::none(), py::arg("tables"));

    m.def("render_scene", [](double half_x, double half_y, double half_z, int texture_id, uint64_t seed, int width,
                             int height) {
        const RenderedScene s = render_scene({half_x, half_y, half_z, texture_id, seed}, width, height);
        return py::make_tuple(erp_to_array(s.rgb), erp_to_array(s.depth));
    }, py::arg("half_x"), py::arg("half_y"), py::arg("half_z"), py::arg("texture_id"), py::arg("seed"),
       py::arg("width"), py::arg("height"));

    m.def("metrics", [](py::array_t<float, py::array::c_style | py::array::forcecast> pred,
                        py::array_t<float, py::array::c_style | py::array::forcecast> gt, py::object mask) {
        const ErpImage p = erp_from_array(pred), g = erp_from_array(gt);
        return metrics_dict(metrics(p, g, mask_from_optional(mask, g.n_pixels())));
    }, py::arg("pred"), py::arg("gt"), py::arg("mask") = py::none());

    m.def("berhu", [](py::array_t<float, py::array::c_style | py::array::forcecast> pred,
                      py::array_t<float, py::array::c_style | py::array::forcecast> gt, py::object mask) {
        const ErpImage p = erp_from_array(pred), g = erp_from_array(gt);
        const BerhuEntry e = berhu(p, g, mask_from_optional(mask, g.n_pixels()));
        py::dict d;
        d["value"] = e.value;
        d["border"] = e.border;
        d["valid_count"] = e.valid_count;
        return d;
    }, py::arg("pred"), py::arg("gt"), py::arg("mask") = py::none());

    m.def("read_depth", [](const std::string& path) { return erp_to_array(grid_to_erp(read_depth_file(path))); },
          py::arg("path"));
    m.def("write_depth", [](const std::string& path,
                            py::array_t<float, py::array::c_style | py::array::forcecast> depth) {
        const ErpImage img = erp_from_array(depth);  // NaN-free input expected
        write_depth_file(path, img);
    }, py::arg("path"), py::arg("depth"));

    m.def("selftest", [](const std::string& data_dir) {
        py::list out;
        for (const auto& r : run_selftest(data_dir)) {
            py::dict d;
            d["id"] = r.id;
            d["name"] = r.name;
            d["passed"] = r.passed;
            d["detail"] = r.detail;
            out.append(d);
        }
        return out;
    }, py::arg("data_dir"));

    py::class_<Pipeline>(m, "Pipeline")
        .def(py::init([](uint64_t seed, py::kwargs kwargs) {
            return new Pipeline(config_from_kwargs(kwargs), seed);
        }), py::arg("seed") = 1)
        .def("train", &Pipeline::train_scenes, py::arg("scenes") = 8, py::arg("steps") = 100,
             py::arg("lr") = 1e-3, py::arg("seed") = 1)
        .def("infer", &Pipeline::infer_rgb, py::arg("rgb"), py::arg("iters") = 2)
        .def("save", &Pipeline::save, py::arg("path"))
        .def("load", &Pipeline::load, py::arg("path"))
        .def_property_readonly("n_params", &Pipeline::n_params);
}
