#pragma once

// AdamW with decoupled weight decay, plus warmup + cosine learning-rate
// schedules. State (first/second moments, step count) is keyed by parameter
// name so checkpoint round-trips restore the exact optimizer trajectory.

#include <cmath>
#include <map>
#include <string>

#include "protext/common.hpp"
#include "protext/tape.hpp"
#include "protext/tensor.hpp"

namespace protext::num {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (cfg.lr < 0.0 || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 ||
            cfg.beta2 >= 1.0 || cfg.eps < 0.0 || cfg.weight_decay < 0.0) {
            throw ValidationError("AdamW config out of range");
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return step_; }

    // One update over every trainable parameter. `lr_override` < 0 means use
    // the configured rate; the scheduler passes the current rate here.
    void step(ParameterSet& params, const GradientMap& grads, double lr_override = -1.0) {
        const double lr = lr_override < 0.0 ? cfg_.lr : lr_override;
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [id, p] : params) {
            if (!p.trainable) {
                continue;
            }
            auto git = grads.find(id);
            if (git == grads.end()) {
                throw ValidationError("AdamW: missing gradient for trainable parameter " + id);
            }
            const Tensor& g = git->second;
            if (!g.same_shape(p.value)) {
                throw ValidationError("AdamW: gradient shape mismatch for " + id);
            }
            State& st = state_[id];
            if (st.m.size() != g.size()) {
                st.m.assign(g.size(), 0.0);
                st.v.assign(g.size(), 0.0);
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double gv = g.data[i];
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gv;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gv * gv;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                p.value.data[i] -=
                    lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.value.data[i]);
            }
            require_finite(p.value, "AdamW update of " + id);
        }
    }

    struct State {
        std::vector<double> m;
        std::vector<double> v;
    };

    const std::map<std::string, State>& state() const { return state_; }
    std::map<std::string, State>& mutable_state() { return state_; }
    void set_step_count(std::uint64_t s) { step_ = s; }

private:
    AdamWConfig cfg_;
    std::uint64_t step_ = 0;
    std::map<std::string, State> state_;
};

enum class DecayKind { cosine, constant };

// Linear warmup from 0 to base over `warmup_steps`, then either a cosine
// ramp down to 0 at `total_steps` or a constant rate.
struct LrSchedule {
    double base_lr = 1e-3;
    std::uint64_t warmup_steps = 0;
    std::uint64_t total_steps = 1;
    DecayKind decay = DecayKind::cosine;

    double at(std::uint64_t step) const {
        if (total_steps == 0 || warmup_steps > total_steps) {
            throw ValidationError("LrSchedule: invalid step counts");
        }
        if (step < warmup_steps) {
            return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
        }
        if (decay == DecayKind::constant) {
            return base_lr;
        }
        if (step >= total_steps) {
            return 0.0;
        }
        const double progress = static_cast<double>(step - warmup_steps) /
                                static_cast<double>(total_steps - warmup_steps);
        return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
    }
};

}  // namespace protext::num
