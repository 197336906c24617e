#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "face0/errors.hpp"
#include "face0/graph.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// Builds a scalar loss from named tensors. The builder must register each
// checked tensor with g.param(name, value) so its gradient is collected.
using LossBuilder = std::function<Graph::Id(Graph&, const std::map<std::string, Tensor>&)>;

struct GradCheckReport {
    float max_rel_err = 0.0f;
    std::string worst_param;
    std::size_t worst_index = 0;
    float analytic = 0.0f;
    float numeric = 0.0f;
};

namespace detail {

inline float eval_loss(const LossBuilder& f, const std::map<std::string, Tensor>& params) {
    Graph g;
    Graph::Id loss = f(g, params);
    if (!g.value(loss).is_scalar())
        throw ContractError("grad_check: loss must be scalar, got " + dims_str(g.value(loss).dims));
    return g.value(loss).data[0];
}

}  // namespace detail

// Central-difference check of every coordinate of every named tensor.
// Relative error uses a unit floor so gradients near zero are compared
// absolutely. Also evaluates the loss twice and insists on bit-identical
// values and gradients; a nondeterministic builder is a contract violation.
inline GradCheckReport grad_check(const LossBuilder& f, std::map<std::string, Tensor> params,
                                  float eps = 1e-3f) {
    Graph g1;
    Graph::Id l1 = f(g1, params);
    if (!g1.value(l1).is_scalar())
        throw ContractError("grad_check: loss must be scalar, got " + dims_str(g1.value(l1).dims));
    g1.backward(l1);
    auto grads = g1.named_grads();

    Graph g2;
    Graph::Id l2 = f(g2, params);
    g2.backward(l2);
    if (!bit_equal(g1.value(l1), g2.value(l2)))
        throw ContractError("grad_check: loss differs between identical evaluations");
    for (const auto& [name, grad] : g2.named_grads()) {
        auto it = grads.find(name);
        if (it == grads.end() || !bit_equal(it->second, grad))
            throw ContractError("grad_check: gradient of '" + name +
                                "' differs between identical evaluations");
    }

    GradCheckReport report;
    for (auto& [name, tensor] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // builder ignored this tensor
        const Tensor& analytic = git->second;
        for (std::size_t i = 0; i < tensor.numel(); ++i) {
            const float saved = tensor.data[i];
            tensor.data[i] = saved + eps;
            const float up = detail::eval_loss(f, params);
            tensor.data[i] = saved - eps;
            const float down = detail::eval_loss(f, params);
            tensor.data[i] = saved;
            const float fd = (up - down) / (2.0f * eps);
            const float a = analytic.data[i];
            const float denom = std::max(1.0f, std::abs(a));
            const float rel = std::abs(a - fd) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = fd;
            }
        }
    }
    return report;
}

}  // namespace face0
