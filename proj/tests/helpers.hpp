#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include <protext/protext.hpp>

namespace testutil {

using protext::num::GradientMap;
using protext::num::ParameterSet;
using protext::num::Tape;
using protext::num::Tensor;

// Scalar-valued graph builder; takes the parameter set so finite differences
// can re-evaluate after a perturbation.
using Builder = std::function<Tape::NodeId(Tape&, const ParameterSet&)>;

inline double eval_scalar(const Builder& build, const ParameterSet& params) {
    Tape tape;
    return tape.value(build(tape, params)).data[0];
}

// Central differences against the analytic gradient of every trainable
// entry; returns the worst relative error, |a-f| / max(|a|, |f|, floor).
inline double fd_max_rel_err(const Builder& build, ParameterSet params, double eps = 1e-5,
                             double floor = 1e-6) {
    Tape tape;
    const Tape::NodeId loss = build(tape, params);
    const GradientMap grads = tape.backward(loss, params);
    double worst = 0.0;
    for (auto& [name, p] : params) {
        if (!p.trainable) {
            continue;
        }
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data[i];
            p.value.data[i] = orig + eps;
            const double up = eval_scalar(build, params);
            p.value.data[i] = orig - eps;
            const double dn = eval_scalar(build, params);
            p.value.data[i] = orig;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = g.data[i];
            const double rel =
                std::fabs(an - fd) / std::max({floor, std::fabs(an), std::fabs(fd)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// Fresh directory under the system temp root; unique per call.
inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::atomic<unsigned> counter{0};
    const std::filesystem::path p = std::filesystem::temp_directory_path() /
                                    ("protext-test-" + tag + "-" +
                                     std::to_string(counter.fetch_add(1)));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline protext::text::EncoderConfig toy_encoder_config(std::size_t layers = 2,
                                                       std::size_t d_model = 16,
                                                       std::size_t proj = 8,
                                                       std::size_t ctx = 16) {
    protext::text::EncoderConfig c;
    c.num_layers = layers;
    c.d_model = d_model;
    c.num_heads = d_model >= 4 ? 4 : 1;
    c.mlp_ratio = 4.0;
    c.context_length = ctx;
    c.projection_dim = proj;
    return c;
}

}  // namespace testutil
