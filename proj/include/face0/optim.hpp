#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "face0/errors.hpp"
#include "face0/tensor.hpp"

namespace face0 {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam with bias correction. Moment state is stored in float32 alongside the
// parameters; the per-element update itself runs in double so that repeated
// runs are reproducible and small moments don't wash out.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t steps_taken() const { return t_; }
    const std::map<std::string, Tensor>& first_moments() const { return m_; }
    const std::map<std::string, Tensor>& second_moments() const { return v_; }

    void restore(std::map<std::string, Tensor> m, std::map<std::string, Tensor> v,
                 std::int64_t steps) {
        if (steps < 0) throw ContractError("adam: step counter cannot be negative");
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = steps;
    }

    void step(std::map<std::string, Tensor>& params,
              const std::map<std::string, Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end())
                throw ContractError("adam: no gradient for parameter '" + name + "'");
            const Tensor& g = git->second;
            require_same_dims(p, g, "adam");
            Tensor& m = state(m_, name, p);
            Tensor& v = state(v_, name, p);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double gi = g.data[i];
                const double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
                m.data[i] = static_cast<float>(mi);
                v.data[i] = static_cast<float>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                p.data[i] = static_cast<float>(p.data[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
            if (!p.all_finite())
                throw NumericError("adam: parameter '" + name + "' went non-finite");
        }
    }

private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;

    static Tensor& state(std::map<std::string, Tensor>& store, const std::string& name,
                         const Tensor& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor::zeros(like.dims)).first;
        return it->second;
    }
};

// Exponential moving average of a parameter set. Written as a relaxation
// toward the live value so that shadow == live is an exact fixed point.
inline void ema_update(std::map<std::string, Tensor>& shadow,
                       const std::map<std::string, Tensor>& live, float decay) {
    if (decay < 0.0f || decay >= 1.0f)
        throw ContractError("ema_update: decay must lie in [0, 1)");
    if (shadow.size() != live.size())
        throw ContractError("ema_update: shadow and live parameter sets differ");
    const float step = 1.0f - decay;
    for (auto& [name, s] : shadow) {
        auto it = live.find(name);
        if (it == live.end())
            throw ContractError("ema_update: live set is missing '" + name + "'");
        require_same_dims(s, it->second, "ema_update");
        for (std::size_t i = 0; i < s.numel(); ++i)
            s.data[i] += step * (it->second.data[i] - s.data[i]);
    }
}

}  // namespace face0
