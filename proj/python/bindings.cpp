// Copyright (c) 2026 The shadowdiff Authors.
// All rights reserved.
//
// This software is licensed under the Apache License, Version 2.0 (the "License").
// You may not use this file except in compliance with the License. You may
// obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "shadowdiff/attention.hpp"
#include "shadowdiff/cli.hpp"
#include "shadowdiff/config.hpp"
#include "shadowdiff/data.hpp"
#include "shadowdiff/errors.hpp"
#include "shadowdiff/metrics.hpp"
#include "shadowdiff/sampler.hpp"
#include "shadowdiff/schedule.hpp"
#include "shadowdiff/trainer.hpp"
#include "shadowdiff/vit_sim.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

namespace py = pybind11;
using namespace shadowdiff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a)
{
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

Array to_array(const torch::Tensor& t)
{
    auto c = t.detach().to(torch::kFloat64).contiguous().cpu();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    Array out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * c.numel());
    return out;
}

nlohmann::json json_of(const py::object& obj)
{
    if (obj.is_none()) {
        return nlohmann::json::object();
    }
    auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
    return nlohmann::json::parse(text);
}

py::object py_of(const nlohmann::json& j)
{
    return py::module_::import("json").attr("loads")(j.dump());
}

std::unique_ptr<FeatureExtractor> extractor_from(const py::object& config)
{
    ExtractorConfig c;
    auto j = json_of(config);
    if (!j.empty()) {
        c = j.get<ExtractorConfig>();
    }
    return make_extractor(c);
}

py::dict trajectory_dict(const SampleTrajectory& traj)
{
    py::list steps;
    for (const auto& s : traj.steps) {
        py::dict d;
        d["t"] = s.t;
        d["t_prev"] = s.t_prev;
        d["x0_hat"] = to_array(s.x0_hat);
        d["attention"] = to_array(s.attention);
        d["l_sim"] = s.l_sim;
        d["l_total"] = s.l_total;
        steps.append(d);
    }
    py::dict out;
    out["steps"] = steps;
    out["output"] = to_array(traj.output);
    out["steps_executed"] = traj.steps_executed;
    out["stopped_early"] = traj.stopped_early;
    out["selected_step"] = traj.selected_step ? py::cast(*traj.selected_step) : py::none();
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Attention-guided diffusion shadow removal: numerical core.";

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_OSError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_static("linear", &NoiseSchedule::linear, py::arg("steps") = 1000,
                    py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02)
        .def_property_readonly("steps", &NoiseSchedule::steps)
        .def("beta", &NoiseSchedule::beta)
        .def("alpha_bar", &NoiseSchedule::alpha_bar)
        .def("alpha_bars", [](const NoiseSchedule& s) {
            return std::vector<double>(s.alpha_bars().begin(), s.alpha_bars().end());
        });

    m.def("q_sample", [](const Array& x0, int t, const Array& eps, const NoiseSchedule& s) {
        return to_array(q_sample(to_tensor(x0), t, to_tensor(eps), s));
    }, py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
    m.def("predict_x0", [](const Array& x_t, const Array& eps, int t, const NoiseSchedule& s) {
        return to_array(predict_x0(to_tensor(x_t), to_tensor(eps), t, s));
    }, py::arg("x_t"), py::arg("eps_hat"), py::arg("t"), py::arg("schedule"));
    m.def("ddim_step", [](const Array& x_t, const Array& eps, int t, int t_prev, const NoiseSchedule& s) {
        return to_array(ddim_step(to_tensor(x_t), to_tensor(eps), t, t_prev, s));
    }, py::arg("x_t"), py::arg("eps_hat"), py::arg("t"), py::arg("t_prev"), py::arg("schedule"));
    m.def("inference_timesteps", &inference_timesteps, py::arg("train_steps"), py::arg("infer_steps"));

    m.def("compute_cam", [](const Array& features, const Array& weights, int64_t h, int64_t w) {
        return to_array(compute_cam(to_tensor(features), to_tensor(weights), h, w));
    }, py::arg("feature_map"), py::arg("class_weights"), py::arg("height"), py::arg("width"));
    m.def("residual_target", [](const Array& x0, const Array& x_cond, double gain) {
        return to_array(residual_target(to_tensor(x0), to_tensor(x_cond), gain));
    }, py::arg("x0"), py::arg("x_cond"), py::arg("gain") = 5.0);
    m.def("loss_att", [](const Array& a, const Array& target) {
        return loss_att(to_tensor(a), to_tensor(target)).item<double>();
    });
    m.def("loss_cam", py::overload_cast<double, double>(&loss_cam),
          py::arg("prob_shadow"), py::arg("prob_clean"));

    m.def("self_similarity", [](const Array& keys) { return to_array(self_similarity(to_tensor(keys))); });
    m.def("descriptor_distance", [](const Array& a, const Array& b) {
        return descriptor_distance(to_tensor(a), to_tensor(b)).item<double>();
    });
    m.def("principal_projections", [](const Array& d, int64_t k) {
        return to_array(principal_projections(to_tensor(d), k));
    }, py::arg("descriptor"), py::arg("components") = 3);
    m.def("extract_keys", [](const Array& image, int layer, const py::object& config) {
        auto extractor = extractor_from(config);
        torch::NoGradGuard no_grad;
        return to_array(extract_keys(to_tensor(image), layer, *extractor).keys);
    }, py::arg("image"), py::arg("layer") = kDefaultVitLayer, py::arg("extractor") = py::none(),
       "Patch keys [n, d] of a [3, H, W] image in [-1, 1].");
    m.def("loss_sim", [](const Array& x_cond, const Array& x0_hat, int layer, const py::object& config) {
        auto extractor = extractor_from(config);
        torch::NoGradGuard no_grad;
        return loss_sim(to_tensor(x_cond), to_tensor(x0_hat), *extractor, layer).item<double>();
    }, py::arg("x_cond"), py::arg("x0_hat"), py::arg("layer") = kDefaultVitLayer,
       py::arg("extractor") = py::none());

    m.def("stop_check", [](const std::vector<double>& history, double rel_tol, int patience) {
        SamplingConfig c;
        c.stop_rel_tol = rel_tol;
        c.stop_patience = patience;
        return stop_check(history, c);
    }, py::arg("loss_history"), py::arg("rel_tol") = 0.01, py::arg("patience") = 1);

    m.def("sample", [](const Array& x_cond, const Array& attention, const py::function& predictor,
                       const NoiseSchedule& s, const py::object& sampling, const py::object& extractor) {
        SamplingConfig config;
        auto j = json_of(sampling);
        if (!j.empty()) {
            config = j.get<SamplingConfig>();
        }
        auto ext = extractor_from(extractor);
        NoisePredictor wrapped = [&](const torch::Tensor& x_t, const torch::Tensor& xc,
                                     const torch::Tensor& a, int t) {
            py::tuple r = predictor(to_array(x_t), to_array(xc), to_array(a), t);
            return DenoiserOutput{to_tensor(r[0].cast<Array>()), to_tensor(r[1].cast<Array>())};
        };
        return trajectory_dict(sample(to_tensor(x_cond), to_tensor(attention), wrapped, s, *ext, config));
    }, py::arg("x_cond"), py::arg("attention"), py::arg("predictor"), py::arg("schedule"),
       py::arg("sampling") = py::none(), py::arg("extractor") = py::none(),
       "Guided DDIM sampling with a Python noise predictor "
       "(x_t, x_cond, attention, t) -> (eps_hat, attention_refined), all batched [1, ...].");

    m.def("srgb8_to_lab", &srgb8_to_lab);
    m.def("region_metrics", [](const Array& pred, const Array& truth, const std::optional<Array>& mask) {
        std::optional<torch::Tensor> m;
        if (mask) {
            m = to_tensor(*mask);
        }
        return py_of(to_json(region_metrics(to_tensor(pred), to_tensor(truth), m)));
    }, py::arg("pred"), py::arg("truth"), py::arg("mask") = py::none(),
       "Shadow, non-shadow and whole-image RMSE (LAB), PSNR and SSIM of [3, H, W] images in [0, 1].");

    m.def("synth_shadow", [](const Array& clean, const py::object& spec) {
        auto pair = synth_shadow(to_tensor(clean), json_of(spec).get<ShadowSpec>());
        return py::make_tuple(to_array(pair.shadow), to_array(*pair.mask));
    }, py::arg("clean"), py::arg("spec"));
    m.def("make_scene", [](int64_t size, uint64_t seed) { return to_array(make_scene(size, seed)); });

    py::class_<Checkpoint>(m, "Checkpoint", "A trained denoiser loaded from a checkpoint file.")
        .def(py::init([](const std::string& path) { return load_checkpoint(path); }), py::arg("path"))
        .def_readonly("iteration", &Checkpoint::iteration)
        .def_property_readonly("config", [](const Checkpoint& c) { return py_of(nlohmann::json(c.config)); })
        .def_property_readonly("schedule", [](const Checkpoint& c) { return c.config.schedule(); })
        .def("predict", [](Checkpoint& c, const Array& x_t, const Array& x_cond, const Array& a, int t) {
            torch::NoGradGuard no_grad;
            auto batch = [](const Array& x) { return to_tensor(x).unsqueeze(0).to(torch::kFloat32); };
            auto out = c.model->forward(batch(x_t), batch(x_cond), batch(a), torch::tensor({t}, torch::kLong));
            return py::make_tuple(to_array(out.eps_hat[0]), to_array(out.attention[0]));
        }, py::arg("x_t"), py::arg("x_cond"), py::arg("attention"), py::arg("t"),
           "Noise estimate and refined attention for single [C, H, W] model-space arrays.")
        .def("classify", [](Checkpoint& c, const Array& image) {
            torch::NoGradGuard no_grad;
            auto x = to_tensor(image).unsqueeze(0).to(torch::kFloat32);
            auto out = c.model->classify(x);
            auto cam = compute_cam(out.feature_map[0], out.class_weights, x.size(2), x.size(3));
            return py::make_tuple(out.probability[0].item<double>(), to_array(cam));
        }, py::arg("image"), "Shadow probability and CAM [1, H, W] of a model-space [3, H, W] image.")
        .def("sample", [](Checkpoint& c, const Array& x_cond, const py::object& sampling,
                          const py::object& extractor) {
            SamplingConfig config;
            auto j = json_of(sampling);
            if (!j.empty()) {
                config = j.get<SamplingConfig>();
            }
            auto ext = extractor_from(extractor);
            config.cam_init = config.cam_init && c.iteration > 0;
            torch::NoGradGuard no_grad;
            auto x = to_tensor(x_cond).to(torch::kFloat32);
            return trajectory_dict(sample(x, c.model, c.config.schedule(), *ext, config));
        }, py::arg("x_cond"), py::arg("sampling") = py::none(), py::arg("extractor") = py::none(),
           "Guided sampling with the trained network; x_cond is model-space [3, H, W].");

    m.def("run_cli", [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return run_cli(args);
    }, "Runs a `shadowdiff` subcommand in-process and returns its exit code.");
}
