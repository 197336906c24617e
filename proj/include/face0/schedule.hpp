#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "face0/errors.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// Variance-preserving cosine schedule on continuous time t in [0,1]:
// alpha = cos(t*pi/2), sigma = sqrt(1 - alpha^2), uniform loss weight.
// Boundaries are exact; in the open interval alpha is clamped away from 0
// and 1 so divisions by alpha and noise levels stay well conditioned.

struct SchedulePoint {
    float alpha = 0.0f;
    float sigma = 0.0f;
    float w = 1.0f;  // loss weight
};

inline SchedulePoint schedule_eval(double t) {
    if (!(t >= 0.0 && t <= 1.0))
        throw ContractError("schedule_eval: t=" + std::to_string(t) + " outside [0,1]");
    SchedulePoint p;
    if (t == 0.0) {
        p.alpha = 1.0f;
        p.sigma = 0.0f;
    } else if (t == 1.0) {
        p.alpha = 0.0f;
        p.sigma = 1.0f;
    } else {
        const double a = std::clamp(std::cos(t * 3.14159265358979323846 / 2.0), 1e-4, 1.0 - 1e-4);
        p.alpha = static_cast<float>(a);
        p.sigma = static_cast<float>(std::sqrt(1.0 - a * a));
    }
    return p;
}

// z_t and its time, the state a sampler walks backwards through.
struct LatentState {
    Tensor z;
    float t = 0.0f;
};

inline LatentState add_noise(const Tensor& x0, double t, const Tensor& eps) {
    require_same_dims(x0, eps, "add_noise");
    const SchedulePoint p = schedule_eval(t);
    Tensor z = Tensor::zeros(x0.dims);
    for (std::size_t i = 0; i < z.numel(); ++i)
        z.data[i] = p.alpha * x0.data[i] + p.sigma * eps.data[i];
    return LatentState{std::move(z), static_cast<float>(t)};
}

// One deterministic DDIM update (eta = 0): reconstruct x0 from the noise
// prediction, clamp it, and re-noise to the earlier time. The clamp guards
// against blow-ups from a barely trained model; with an exact predictor it
// never engages on data in [-1,1].
inline LatentState ddim_step(const LatentState& state, const Tensor& eps_hat, double t_prev) {
    require_same_dims(state.z, eps_hat, "ddim_step");
    const double t = static_cast<double>(state.t);
    if (!(t_prev >= 0.0 && t_prev < t))
        throw ContractError("ddim_step: need 0 <= t_prev < t, got t_prev=" +
                            std::to_string(t_prev) + ", t=" + std::to_string(t));
    const SchedulePoint from = schedule_eval(t);
    const SchedulePoint to = schedule_eval(t_prev);
    LatentState out;
    out.t = static_cast<float>(t_prev);
    out.z = Tensor::zeros(state.z.dims);
    for (std::size_t i = 0; i < out.z.numel(); ++i) {
        const float x0 = std::clamp((state.z.data[i] - from.sigma * eps_hat.data[i]) / from.alpha,
                                    -1.5f, 1.5f);
        out.z.data[i] = to.alpha * x0 + to.sigma * eps_hat.data[i];
    }
    if (!out.z.all_finite()) throw NumericError("ddim_step: non-finite latent");
    return out;
}

// The sampling grid: n+1 times from 1 down to 0 inclusive.
inline std::vector<double> sample_times(int n) {
    if (n < 1) throw ContractError("sample_times: need at least one step");
    std::vector<double> ts;
    ts.reserve(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i)
        ts.push_back(static_cast<double>(n - i) / static_cast<double>(n));
    return ts;
}

}  // namespace face0
