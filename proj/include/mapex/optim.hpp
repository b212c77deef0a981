#pragma once

#include <cmath>
#include <vector>

#include "mapex/errors.hpp"
#include "mapex/tensor.hpp"

namespace mapex {

// AdamW with decoupled weight decay. Moments live per parameter; the step
// counter increases once per step() call.
class AdamW {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.95;
        double eps = 1e-8;
        double weight_decay = 0.05;
    };

    AdamW(std::vector<Tensor> params, Hyper hp) : params_(std::move(params)), hp_(hp) {
        if (hp_.lr <= 0) throw ConfigError("adamw lr must be positive");
        slots_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slots_[i].m.assign(params_[i].size(), 0.0);
            slots_[i].v.assign(params_[i].size(), 0.0);
        }
    }

    long step_count() const { return step_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        // abort before mutating anything if any gradient is non-finite
        for (auto& p : params_)
            for (double g : p.grad())
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in adamw step");
        ++step_;
        double bc1 = 1.0 - std::pow(hp_.beta1, step_);
        double bc2 = 1.0 - std::pow(hp_.beta2, step_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& val = params_[i].value();
            auto& g = params_[i].grad();
            auto& m = slots_[i].m;
            auto& v = slots_[i].v;
            for (std::size_t j = 0; j < val.size(); ++j) {
                val[j] *= 1.0 - hp_.lr * hp_.weight_decay;
                m[j] = hp_.beta1 * m[j] + (1.0 - hp_.beta1) * g[j];
                v[j] = hp_.beta2 * v[j] + (1.0 - hp_.beta2) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                val[j] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps);
            }
        }
    }

    void set_lr(double lr) { hp_.lr = lr; }
    double lr() const { return hp_.lr; }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Tensor> params_;
    std::vector<Slot> slots_;
    Hyper hp_;
    long step_ = 0;
};

}  // namespace mapex
