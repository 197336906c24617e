#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "face0/gradcheck.hpp"
#include "face0/graph.hpp"
#include "face0/rng.hpp"
#include "face0/tensor.hpp"

using namespace face0;

namespace {

// Random tensor with entries kept away from zero, for ops with a kink there.
Tensor randn_off_zero(Dims d, Rng& rng, float margin = 0.2f) {
    Tensor t = Tensor::randn(std::move(d), rng, 1.0f);
    for (auto& v : t.data) v += (v >= 0.0f ? margin : -margin);
    return t;
}

constexpr float kSimpleTol = 2e-3f;
constexpr float kCompositeTol = 5e-3f;

}  // namespace

TEST_CASE("gradient of sum of squares is 2x") {
    Graph g;
    Tensor x({3}, {1.0f, 2.0f, 3.0f});
    auto xid = g.input(std::move(x));
    auto loss = g.sum(g.mul(xid, xid));
    REQUIRE(g.value(loss).data[0] == Catch::Approx(14.0));
    g.backward(loss);
    const Tensor& dx = g.grad(xid);
    REQUIRE(dx.data[0] == Catch::Approx(2.0));
    REQUIRE(dx.data[1] == Catch::Approx(4.0));
    REQUIRE(dx.data[2] == Catch::Approx(6.0));
}

TEST_CASE("identity map has zero loss and zero weight gradient") {
    Graph g;
    Tensor w({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    Tensor x({2, 2}, {0.3f, -0.7f, 1.1f, 0.2f});
    auto wid = g.param("w", w);
    auto xid = g.constant(x);
    auto loss = g.mse(g.matmul(xid, wid), xid);
    REQUIRE(g.value(loss).data[0] == 0.0f);
    g.backward(loss);
    for (float v : g.param_grad(wid).data) REQUIRE(v == 0.0f);
}

TEST_CASE("convolution of ones matches hand counts") {
    // All-ones 4x4 input, all-ones 3x3 kernel, zero padding: each output pixel
    // counts the in-bounds taps, so corners see 4 and interior pixels see 9.
    Graph g;
    auto x = g.constant(Tensor::full({1, 4, 4}, 1.0f));
    auto w = g.constant(Tensor::full({1, 1, 3, 3}, 1.0f));
    auto y = g.conv2d(x, w, 1, 1);
    const Tensor& out = g.value(y);
    REQUIRE(out.dims == Dims{1, 4, 4});
    REQUIRE(out.at3(0, 0, 0) == 4.0f);
    REQUIRE(out.at3(0, 0, 1) == 6.0f);
    REQUIRE(out.at3(0, 1, 1) == 9.0f);
    REQUIRE(out.at3(0, 1, 2) == 9.0f);
    REQUIRE(out.at3(0, 3, 3) == 4.0f);
}

TEST_CASE("strided convolution halves the resolution") {
    Graph g;
    auto x = g.constant(Tensor::full({2, 8, 8}, 0.5f));
    auto w = g.constant(Tensor::full({3, 2, 3, 3}, 0.1f));
    auto y = g.conv2d(x, w, 2, 1);
    REQUIRE(g.value(y).dims == Dims{3, 4, 4});
}

TEST_CASE("shape errors carry both operand shapes") {
    Graph g;
    auto a = g.constant(Tensor::zeros({2, 3}));
    auto b = g.constant(Tensor::zeros({2, 3}));
    try {
        g.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2x3]") != std::string::npos);
    }
    REQUIRE_THROWS_AS(g.add(a, g.constant(Tensor::zeros({3, 2}))), ShapeError);
    REQUIRE_THROWS_AS(g.conv2d(a, b, 1, 1), ShapeError);
}

TEST_CASE("softmax rows are normalized and uniform logits are uniform") {
    Graph g;
    auto z = g.constant(Tensor::full({2, 5}, 0.7f));
    const Tensor& y = g.value(g.softmax(z));
    for (int r = 0; r < 2; ++r) {
        float s = 0.0f;
        for (int c = 0; c < 5; ++c) {
            REQUIRE(y.at2(r, c) == Catch::Approx(0.2).margin(1e-6));
            s += y.at2(r, c);
        }
        REQUIRE(s == Catch::Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
    Rng rng(31);
    Graph g;
    auto x = g.constant(Tensor::randn({4, 16}, rng, 3.0f));
    const Tensor& y = g.value(g.layer_norm(x));
    for (int r = 0; r < 4; ++r) {
        double mean = 0.0, var = 0.0;
        for (int c = 0; c < 16; ++c) mean += y.at2(r, c);
        mean /= 16.0;
        for (int c = 0; c < 16; ++c) var += (y.at2(r, c) - mean) * (y.at2(r, c) - mean);
        var /= 16.0;
        REQUIRE(std::abs(mean) < 1e-5);
        REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("non-finite op results raise a numeric error") {
    Graph g;
    auto big = g.constant(Tensor::full({4}, 3e38f));
    REQUIRE_THROWS_AS(g.add(big, big), NumericError);
}

TEST_CASE("parameters off the loss path report zero gradients") {
    Graph g;
    auto used = g.param("used", Tensor::full({2}, 1.0f));
    g.param("unused", Tensor::full({3}, 1.0f));
    auto loss = g.sum(g.mul(used, used));
    g.backward(loss);
    auto grads = g.named_grads();
    REQUIRE(grads.at("used").data[0] == Catch::Approx(2.0));
    REQUIRE(grads.at("unused").dims == Dims{3});
    for (float v : grads.at("unused").data) REQUIRE(v == 0.0f);
}

TEST_CASE("backward requires a scalar loss") {
    Graph g;
    auto x = g.input(Tensor::zeros({2, 2}));
    REQUIRE_THROWS_AS(g.backward(x), ContractError);
}

TEST_CASE("gradcheck flags a nondeterministic builder") {
    int calls = 0;
    auto builder = [&calls](Graph& g, const std::map<std::string, Tensor>& p) {
        auto x = g.param("x", p.at("x"));
        // Injects a different constant on every call.
        auto drift = g.constant(Tensor::scalar(0.001f * static_cast<float>(calls++)));
        return g.sum(g.add(g.mean(x), drift));
    };
    std::map<std::string, Tensor> params{{"x", Tensor::full({3}, 1.0f)}};
    REQUIRE_THROWS_AS(grad_check(builder, params), ContractError);
}

// ---- finite-difference property checks, one op at a time ----

TEST_CASE("gradcheck elementwise ops") {
    Rng rng(101);
    std::map<std::string, Tensor> params{{"a", Tensor::randn({3, 4}, rng, 1.0f)},
                                         {"b", Tensor::randn({3, 4}, rng, 1.0f)}};
    SECTION("add") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mean(g.add(g.param("a", p.at("a")), g.param("b", p.at("b"))));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
    SECTION("sub") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mean(g.sub(g.param("a", p.at("a")), g.param("b", p.at("b"))));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
    SECTION("mul") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mean(g.mul(g.param("a", p.at("a")), g.param("b", p.at("b"))));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
    SECTION("scale") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mean(g.scale(g.param("a", p.at("a")), -2.5f));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
}

TEST_CASE("gradcheck relu away from the kink") {
    Rng rng(102);
    std::map<std::string, Tensor> params{{"x", randn_off_zero({4, 5}, rng)}};
    auto r = grad_check(
        [](Graph& g, const std::map<std::string, Tensor>& p) {
            return g.mean(g.relu(g.param("x", p.at("x"))));
        },
        params);
    REQUIRE(r.max_rel_err < kSimpleTol);
}

TEST_CASE("gradcheck matmul and transpose") {
    Rng rng(103);
    std::map<std::string, Tensor> params{{"a", Tensor::randn({3, 4}, rng, 0.7f)},
                                         {"b", Tensor::randn({4, 2}, rng, 0.7f)}};
    auto r = grad_check(
        [](Graph& g, const std::map<std::string, Tensor>& p) {
            auto prod = g.matmul(g.param("a", p.at("a")), g.param("b", p.at("b")));
            return g.mse(g.transpose2(prod), g.constant(Tensor::full({2, 3}, 0.25f)));
        },
        params);
    REQUIRE(r.max_rel_err < kCompositeTol);
}

TEST_CASE("gradcheck reshape and gather") {
    Rng rng(104);
    std::map<std::string, Tensor> params{{"t", Tensor::randn({6, 3}, rng, 1.0f)}};
    auto r = grad_check(
        [](Graph& g, const std::map<std::string, Tensor>& p) {
            // Repeated ids exercise scatter-add accumulation in the backward.
            auto rows = g.gather_rows(g.param("t", p.at("t")), {1, 4, 1, 0});
            return g.mean(g.mul(rows, g.reshape(rows, {4, 3})));
        },
        params);
    REQUIRE(r.max_rel_err < kCompositeTol);
}

TEST_CASE("gradcheck row and channel broadcasts") {
    Rng rng(105);
    std::map<std::string, Tensor> params{{"x", Tensor::randn({5, 4}, rng, 1.0f)},
                                         {"b", Tensor::randn({4}, rng, 1.0f)},
                                         {"w", Tensor::randn({4}, rng, 1.0f)},
                                         {"img", Tensor::randn({3, 4, 4}, rng, 1.0f)},
                                         {"cb", Tensor::randn({3}, rng, 1.0f)}};
    SECTION("add_row / mul_row") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                auto h = g.add_row(g.param("x", p.at("x")), g.param("b", p.at("b")));
                return g.mean(g.mul_row(h, g.param("w", p.at("w"))));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
    SECTION("add_cbias / mean_spatial") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                auto h = g.add_cbias(g.param("img", p.at("img")), g.param("cb", p.at("cb")));
                return g.sum(g.mean_spatial(g.mul(h, h)));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
}

TEST_CASE("gradcheck convolution stride 1 and 2") {
    Rng rng(106);
    std::map<std::string, Tensor> params{{"x", Tensor::randn({2, 6, 6}, rng, 0.8f)},
                                         {"w", Tensor::randn({3, 2, 3, 3}, rng, 0.4f)}};
    SECTION("stride 1") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                auto y = g.conv2d(g.param("x", p.at("x")), g.param("w", p.at("w")), 1, 1);
                return g.mse(y, g.constant(Tensor::zeros({3, 6, 6})));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
    SECTION("stride 2") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                auto y = g.conv2d(g.param("x", p.at("x")), g.param("w", p.at("w")), 2, 1);
                return g.mse(y, g.constant(Tensor::zeros({3, 3, 3})));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
}

TEST_CASE("gradcheck upsample and concat") {
    Rng rng(107);
    std::map<std::string, Tensor> params{{"a", Tensor::randn({2, 3, 3}, rng, 1.0f)},
                                         {"b", Tensor::randn({1, 6, 6}, rng, 1.0f)}};
    auto r = grad_check(
        [](Graph& g, const std::map<std::string, Tensor>& p) {
            auto up = g.upsample2(g.param("a", p.at("a")));
            auto cat = g.concat_ch(up, g.param("b", p.at("b")));
            return g.mean(g.mul(cat, cat));
        },
        params);
    REQUIRE(r.max_rel_err < kCompositeTol);
}

TEST_CASE("gradcheck softmax and layer norm") {
    Rng rng(108);
    std::map<std::string, Tensor> params{{"x", Tensor::randn({3, 6}, rng, 1.2f)}};
    SECTION("softmax") {
        Tensor target = Tensor::zeros({3, 6});
        for (int i = 0; i < 3; ++i) target.at2(i, i) = 1.0f;
        auto r = grad_check(
            [target](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mse(g.softmax(g.param("x", p.at("x"))), g.constant(target));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
    SECTION("layer norm") {
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                auto y = g.layer_norm(g.param("x", p.at("x")));
                return g.mean(g.mul(y, g.constant(Tensor::full({3, 6}, 0.3f))));
            },
            params);
        REQUIRE(r.max_rel_err < kCompositeTol);
    }
}

TEST_CASE("gradcheck losses") {
    Rng rng(109);
    SECTION("mse both sides") {
        std::map<std::string, Tensor> params{{"a", Tensor::randn({7}, rng, 1.0f)},
                                             {"b", Tensor::randn({7}, rng, 1.0f)}};
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.mse(g.param("a", p.at("a")), g.param("b", p.at("b")));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
    SECTION("cross entropy") {
        std::map<std::string, Tensor> params{{"z", Tensor::randn({4, 5}, rng, 1.0f)}};
        auto r = grad_check(
            [](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.cross_entropy(g.param("z", p.at("z")), {0, 3, 2, 4});
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
    SECTION("bce on logits") {
        Tensor targets({6}, {1.0f, 0.0f, 1.0f, 0.0f, 0.5f, 1.0f});
        std::map<std::string, Tensor> params{{"z", Tensor::randn({6}, rng, 1.0f)}};
        auto r = grad_check(
            [targets](Graph& g, const std::map<std::string, Tensor>& p) {
                return g.bce_logits(g.param("z", p.at("z")), g.constant(targets));
            },
            params);
        REQUIRE(r.max_rel_err < kSimpleTol);
    }
}

TEST_CASE("gradcheck a small conv net end to end") {
    Rng rng(110);
    std::map<std::string, Tensor> params{
        {"c1", Tensor::randn({4, 2, 3, 3}, rng, 0.3f)},
        {"b1", Tensor::randn({4}, rng, 0.1f)},
        {"c2", Tensor::randn({2, 4, 3, 3}, rng, 0.3f)},
        {"w", Tensor::randn({2, 3}, rng, 0.5f)},
    };
    Rng drng(111);
    const Tensor img = Tensor::randn({2, 6, 6}, drng, 1.0f);
    auto r = grad_check(
        [img](Graph& g, const std::map<std::string, Tensor>& p) {
            auto h = g.conv2d(g.constant(img), g.param("c1", p.at("c1")), 1, 1);
            h = g.relu(g.add_cbias(h, g.param("b1", p.at("b1"))));
            h = g.conv2d(h, g.param("c2", p.at("c2")), 2, 1);
            auto pooled = g.mean_spatial(h);  // [2]
            auto logits = g.matmul(g.reshape(pooled, {1, 2}), g.param("w", p.at("w")));
            return g.cross_entropy(logits, {1});
        },
        params, 2e-3f);
    REQUIRE(r.max_rel_err < kCompositeTol);
}
