#pragma once

#include <cmath>
#include <string>

#include "face0/errors.hpp"
#include "face0/face_pipeline.hpp"
#include "face0/graph.hpp"
#include "face0/params.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// A small two-resolution U-Net predicting the noise in a 3xHxW latent.
// Each resolution carries one cross-attention block whose queries are the
// spatial positions and whose keys/values are the L context tokens, so text
// and face conditioning enter through the same door. The timestep enters as
// sinusoidal features pushed through a 2-layer MLP and added per channel.
struct DenoiserConfig {
    int h = 48, w = 48;
    int c1 = 16, c2 = 32;  // channels at full / half resolution
    int n_sin = 16;        // sinusoidal time feature count (even)
    int d_t = 32;          // time embedding width
    int d_c = 16;          // context token width

    void validate() const {
        if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0)
            throw ContractError("denoiser: H and W must be even and at least 2");
        if (c1 < 1 || c2 < 1 || d_t < 1 || d_c < 1)
            throw ContractError("denoiser: widths must be positive");
        if (n_sin < 2 || n_sin % 2 != 0)
            throw ContractError("denoiser: n_sin must be even and at least 2");
    }
};

inline void init_denoiser_params(ParamSet& p, const DenoiserConfig& c) {
    c.validate();
    auto conv = [&](const std::string& name, int co, int ci, int k, bool temb) {
        p.add_uniform("unet." + name + ".w", {co, ci, k, k}, ci * k * k);
        p.add_zeros("unet." + name + ".b", {co});
        if (temb) p.add_uniform("unet." + name + ".t", {c.d_t, co}, c.d_t);
    };
    auto attn = [&](const std::string& name, int ch) {
        p.add_uniform("unet." + name + ".q", {ch, ch}, ch);
        p.add_uniform("unet." + name + ".k", {c.d_c, ch}, c.d_c);
        p.add_uniform("unet." + name + ".v", {c.d_c, ch}, c.d_c);
        p.add_uniform("unet." + name + ".o", {ch, ch}, ch);
        p.add_zeros("unet." + name + ".ln.b", {ch});
        Tensor ones = Tensor::full({ch}, 1.0f);
        p.add_tensor("unet." + name + ".ln.g", ones);
    };

    p.add_uniform("unet.temb.l1.w", {c.n_sin, c.d_t}, c.n_sin);
    p.add_zeros("unet.temb.l1.b", {c.d_t});
    p.add_uniform("unet.temb.l2.w", {c.d_t, c.d_t}, c.d_t);
    p.add_zeros("unet.temb.l2.b", {c.d_t});

    conv("enc1a", c.c1, 3, 3, false);
    conv("enc1b", c.c1, c.c1, 3, true);
    attn("attn1", c.c1);
    conv("down", c.c2, c.c1, 3, false);
    conv("enc2", c.c2, c.c2, 3, true);
    attn("attn2", c.c2);
    conv("mid", c.c2, c.c2, 3, true);
    conv("dec1", c.c1, c.c1 + c.c2, 1, false);
    conv("dec2", c.c1, c.c1, 3, true);
    // The head starts at zero so an untrained model predicts zero noise.
    p.add_zeros("unet.head.w", {3, c.c1, 3, 3});
    p.add_zeros("unet.head.b", {3});
}

// Sinusoidal features of t: sin/cos pairs at geometrically spaced rates.
inline Tensor time_features(double t, int n_sin) {
    Tensor f = Tensor::zeros({1, n_sin});
    for (int i = 0; i < n_sin / 2; ++i) {
        const double angle = t * 1.57079632679489661923 * std::pow(2.0, i);
        f.at2(0, 2 * i) = static_cast<float>(std::sin(angle));
        f.at2(0, 2 * i + 1) = static_cast<float>(std::cos(angle));
    }
    return f;
}

namespace detail {

// Cross-attention at one resolution: layer-normed spatial positions query the
// context tokens; the result is added back as a residual.
inline Graph::Id cross_attention(Graph& g, const ParamBinder& bind, const std::string& name,
                                 Graph::Id feat, Graph::Id ctx, int ch, int hh, int ww) {
    auto x = g.transpose2(g.reshape(feat, {ch, hh * ww}));  // [positions, ch]
    auto ln = g.add_row(g.mul_row(g.layer_norm(x), bind(g, "unet." + name + ".ln.g")),
                        bind(g, "unet." + name + ".ln.b"));
    auto q = g.matmul(ln, bind(g, "unet." + name + ".q"));
    auto k = g.matmul(ctx, bind(g, "unet." + name + ".k"));
    auto v = g.matmul(ctx, bind(g, "unet." + name + ".v"));
    auto scores = g.scale(g.matmul(q, g.transpose2(k)),
                          static_cast<float>(1.0 / std::sqrt(static_cast<double>(ch))));
    auto att = g.matmul(g.softmax(scores), v);
    auto out = g.matmul(att, bind(g, "unet." + name + ".o"));
    return g.reshape(g.transpose2(g.add(x, out)), {ch, hh, ww});
}

}  // namespace detail

// Builds the noise-prediction graph. z: [3,H,W]; ctx: [L, d_c]. Returns an id
// with the same dims as z. Differentiable w.r.t. any bound parameters and the
// context tokens.
inline Graph::Id denoise_graph(Graph& g, const ParamBinder& bind, const DenoiserConfig& c,
                               Graph::Id z, double t, Graph::Id ctx) {
    c.validate();
    if (g.value(z).dims != Dims{3, c.h, c.w})
        throw ShapeError("denoise: latent is " + dims_str(g.value(z).dims) + ", want " +
                         dims_str({3, c.h, c.w}));
    if (g.value(ctx).rank() != 2 || g.value(ctx).dim(1) != c.d_c)
        throw ShapeError("denoise: context is " + dims_str(g.value(ctx).dims) +
                         ", want [Lx" + std::to_string(c.d_c) + "]");

    auto temb = g.relu(g.add_row(g.matmul(g.constant(time_features(t, c.n_sin)),
                                          bind(g, "unet.temb.l1.w")),
                                 bind(g, "unet.temb.l1.b")));
    temb = g.add_row(g.matmul(temb, bind(g, "unet.temb.l2.w")), bind(g, "unet.temb.l2.b"));
    auto temb_bias = [&](Graph::Id x, const std::string& name, int ch) {
        auto proj = g.reshape(g.matmul(temb, bind(g, "unet." + name + ".t")), {ch});
        return g.add_cbias(x, proj);
    };
    auto conv_block = [&](Graph::Id x, const std::string& name, int stride, int pad, bool with_t,
                          int ch) {
        auto y = g.add_cbias(g.conv2d(x, bind(g, "unet." + name + ".w"), stride, pad),
                             bind(g, "unet." + name + ".b"));
        if (with_t) y = temb_bias(y, name, ch);
        return g.relu(y);
    };

    const int h2 = c.h / 2, w2 = c.w / 2;
    auto e1 = conv_block(z, "enc1a", 1, 1, false, c.c1);
    e1 = conv_block(e1, "enc1b", 1, 1, true, c.c1);
    auto a1 = detail::cross_attention(g, bind, "attn1", e1, ctx, c.c1, c.h, c.w);
    auto d0 = conv_block(a1, "down", 2, 1, false, c.c2);
    auto e2 = conv_block(d0, "enc2", 1, 1, true, c.c2);
    auto a2 = detail::cross_attention(g, bind, "attn2", e2, ctx, c.c2, h2, w2);
    auto m = conv_block(a2, "mid", 1, 1, true, c.c2);
    auto u = g.concat_ch(g.upsample2(m), a1);
    auto d1 = conv_block(u, "dec1", 1, 0, false, c.c1);
    auto d2 = conv_block(d1, "dec2", 1, 1, true, c.c1);
    return g.add_cbias(g.conv2d(d2, bind(g, "unet.head.w"), 1, 1), bind(g, "unet.head.b"));
}

// Plain-tensor evaluation against a frozen parameter set.
inline Tensor denoise(const ParamSet& params, const DenoiserConfig& c, const Tensor& z, double t,
                      const Tensor& ctx) {
    Graph g;
    return g.value(denoise_graph(g, frozen_binder(params), c, g.constant(z), t, g.constant(ctx)));
}

}  // namespace face0
