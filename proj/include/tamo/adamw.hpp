#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tamo/errors.hpp"
#include "tamo/tape.hpp"
#include "tamo/tensor.hpp"

namespace tamo {

struct LrSchedule {
    enum class Kind { Constant, Step, Cosine };
    Kind kind = Kind::Constant;
    double base_lr = 1e-3;
    double final_lr = 0.0;
    int64_t decay_after = 0;  // Step: switch point; Cosine: total steps.

    double at(int64_t step) const {
        switch (kind) {
            case Kind::Constant:
                return base_lr;
            case Kind::Step:
                return step < decay_after ? base_lr : final_lr;
            case Kind::Cosine: {
                if (decay_after <= 0 || step >= decay_after) return final_lr;
                double f = 0.5 * (1.0 + std::cos(3.141592653589793 * static_cast<double>(step) /
                                                 static_cast<double>(decay_after)));
                return final_lr + (base_lr - final_lr) * f;
            }
        }
        return base_lr;
    }
};

struct Param {
    std::string name;
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment

    explicit Param(std::string n, Tensor init)
        : name(std::move(n)),
          value(std::move(init)),
          m(Tensor::zeros(value.shape)),
          v(Tensor::zeros(value.shape)) {}
};

// Step counter + hyperparameters; per-parameter moments live in Param.
struct OptimizerState {
    LrSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t step = 0;
};

// One decoupled-weight-decay Adam step. Update math runs in f64; parameter
// storage stays f32. lr == 0 leaves parameter values exactly unchanged.
inline void adamw_step(std::vector<Param>& params,
                       const std::vector<const std::vector<double>*>& grads,
                       OptimizerState& state) {
    if (params.size() != grads.size()) {
        throw ContractError("adamw_step: params/grads count mismatch");
    }
    state.step += 1;
    double lr = state.schedule.at(state.step - 1);
    if (lr < 0.0) throw ContractError("adamw_step: negative learning rate");
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Param& prm = params[p];
        const std::vector<double>& g = *grads[p];
        if (g.size() != prm.value.data.size()) {
            throw ContractError("adamw_step: gradient size mismatch for " + prm.name);
        }
        for (size_t i = 0; i < g.size(); ++i) {
            double gi = g[i];
            if (!std::isfinite(gi)) {
                throw DivergenceError("non-finite gradient in parameter '" + prm.name + "'");
            }
            double m = state.beta1 * static_cast<double>(prm.m.data[i]) + (1.0 - state.beta1) * gi;
            double v = state.beta2 * static_cast<double>(prm.v.data[i]) +
                       (1.0 - state.beta2) * gi * gi;
            prm.m.data[i] = static_cast<float>(m);
            prm.v.data[i] = static_cast<float>(v);
            if (lr != 0.0) {
                double mhat = m / bc1;
                double vhat = v / bc2;
                double w = static_cast<double>(prm.value.data[i]);
                w -= lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * w);
                prm.value.data[i] = static_cast<float>(w);
            }
        }
    }
}

// Registration-ordered parameter collection shared by the trainable models.
class ParamSet {
public:
    int add(std::string name, Tensor init) {
        params_.emplace_back(std::move(name), std::move(init));
        return static_cast<int>(params_.size() - 1);
    }

    Param& operator[](int i) { return params_[static_cast<size_t>(i)]; }
    const Param& operator[](int i) const { return params_[static_cast<size_t>(i)]; }
    size_t size() const { return params_.size(); }
    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }

    // Pushes every parameter as a tape leaf, in registration order.
    std::vector<Tape::Id> attach(Tape& tape) const {
        std::vector<Tape::Id> ids;
        ids.reserve(params_.size());
        for (const auto& p : params_) ids.push_back(tape.leaf(p.value));
        return ids;
    }

    void apply_gradients(Tape& tape, const std::vector<Tape::Id>& ids, OptimizerState& state) {
        std::vector<const std::vector<double>*> grads;
        grads.reserve(ids.size());
        for (auto id : ids) grads.push_back(&tape.grad(id));
        adamw_step(params_, grads, state);
    }

private:
    std::vector<Param> params_;
};

}  // namespace tamo
