#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "face0/errors.hpp"
#include "face0/graph.hpp"
#include "face0/image.hpp"
#include "face0/optim.hpp"
#include "face0/params.hpp"
#include "face0/rng.hpp"
#include "face0/tensor.hpp"
#include "face0/toy_faces.hpp"

namespace face0 {

// Resolves a parameter name to a graph leaf. Training binds names as
// differentiable params; inference binds them as constants.
using ParamBinder = std::function<Graph::Id(Graph&, const std::string&)>;

inline ParamBinder trainable_binder(const ParamSet& p) {
    return [&p](Graph& g, const std::string& name) { return p.use(g, name); };
}

inline ParamBinder frozen_binder(const ParamSet& p) {
    return [&p](Graph& g, const std::string& name) { return g.constant(p.at(name)); };
}

// ---- crop geometry ----

struct CropMargins {
    int left = 0, right = 0, top = 0, bottom = 0;

    void validate() const {
        if (left < 0 || right < 0 || top < 0 || bottom < 0)
            throw ContractError("margins must be non-negative");
    }
};

// Default conditioning-crop margins: modest context left/right/below the
// detected face box and extra headroom above for hair, stated at the
// reference crop size.
inline constexpr CropMargins kDefaultMargins{2, 2, 5, 2};
inline constexpr int kMarginRefScale = 24;

// Margins are stored at a reference crop scale and stretched to each box, so
// the extra context captured (hair above, chin below) stays proportional.
inline CropMargins scale_margins(const CropMargins& ref, int ref_scale, const FaceBox& box) {
    ref.validate();
    if (ref_scale <= 0) throw ContractError("reference margin scale must be positive");
    const double factor =
        static_cast<double>(std::max(box.width(), box.height())) / static_cast<double>(ref_scale);
    CropMargins out;
    out.left = static_cast<int>(std::lround(ref.left * factor));
    out.right = static_cast<int>(std::lround(ref.right * factor));
    out.top = static_cast<int>(std::lround(ref.top * factor));
    out.bottom = static_cast<int>(std::lround(ref.bottom * factor));
    return out;
}

inline FaceBox expand_box(const FaceBox& box, const CropMargins& m) {
    box.validate();
    m.validate();
    FaceBox out = box;
    out.x0 = std::max(0, box.x0 - m.left);
    out.y0 = std::max(0, box.y0 - m.top);
    out.x1 = std::min(box.img_w, box.x1 + m.right);
    out.y1 = std::min(box.img_h, box.y1 + m.bottom);
    out.validate();
    return out;
}

// Crops the box and scales it so the longer side fills the target square;
// the shorter side is centered with zero padding. Bilinear sampling, with
// scale 1 reproducing pixels exactly.
inline Tensor crop_resize(const Tensor& image, const FaceBox& box, int target) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("crop_resize: want 3xHxW, got " + dims_str(image.dims));
    if (box.img_h != image.dim(1) || box.img_w != image.dim(2))
        throw ContractError("crop_resize: box belongs to a different image size");
    box.validate();
    if (target < 1) throw ContractError("crop_resize: target must be positive");

    const int bw = box.width(), bh = box.height();
    int cw, ch;  // content size inside the target square
    if (bw >= bh) {
        cw = target;
        ch = std::max(1, static_cast<int>(std::lround(
                             static_cast<double>(bh) * target / static_cast<double>(bw))));
    } else {
        ch = target;
        cw = std::max(1, static_cast<int>(std::lround(
                             static_cast<double>(bw) * target / static_cast<double>(bh))));
    }
    const int ox0 = (target - cw) / 2;
    const int oy0 = (target - ch) / 2;

    Tensor out = Tensor::zeros({3, target, target});
    for (int y = 0; y < ch; ++y) {
        double sy = (y + 0.5) * static_cast<double>(bh) / ch - 0.5 + box.y0;
        sy = std::clamp(sy, static_cast<double>(box.y0), static_cast<double>(box.y1 - 1));
        const int y0i = static_cast<int>(std::floor(sy));
        const int y1i = std::min(y0i + 1, box.y1 - 1);
        const float fy = static_cast<float>(sy - y0i);
        for (int x = 0; x < cw; ++x) {
            double sx = (x + 0.5) * static_cast<double>(bw) / cw - 0.5 + box.x0;
            sx = std::clamp(sx, static_cast<double>(box.x0), static_cast<double>(box.x1 - 1));
            const int x0i = static_cast<int>(std::floor(sx));
            const int x1i = std::min(x0i + 1, box.x1 - 1);
            const float fx = static_cast<float>(sx - x0i);
            for (int c = 0; c < 3; ++c) {
                const float v00 = image.at3(c, y0i, x0i), v01 = image.at3(c, y0i, x1i);
                const float v10 = image.at3(c, y1i, x0i), v11 = image.at3(c, y1i, x1i);
                const float top = v00 + fx * (v01 - v00);
                const float bot = v10 + fx * (v11 - v10);
                out.at3(c, oy0 + y, ox0 + x) = top + fy * (bot - top);
            }
        }
    }
    return out;
}

// The canonical image -> conditioning-crop path: proportional margins, box
// expansion, aspect-preserving resize.
inline Tensor face_crop(const Tensor& image, const FaceBox& box, const CropMargins& margins_ref,
                        int ref_scale, int target) {
    const CropMargins m = scale_margins(margins_ref, ref_scale, box);
    return crop_resize(image, expand_box(box, m), target);
}

// ---- face embeddings ----

enum class EmbeddingSource { computed, random, interpolated, perturbed };

struct FaceEmbedding {
    Tensor v;  // [D_f]
    EmbeddingSource source = EmbeddingSource::computed;
};

// ---- the conditioning embedder: identity classifier, head dropped ----

struct EmbedderConfig {
    int crop = 24;   // input is 3 x crop x crop; crop must be divisible by 4
    int d_f = 32;    // embedding width (the penultimate layer)
    int c1 = 16, c2 = 24, c3 = 32;
    int n_classes = 0;
};

inline void init_embedder_params(ParamSet& p, const EmbedderConfig& c) {
    if (c.crop % 4 != 0) throw ContractError("embedder crop size must be divisible by 4");
    if (c.n_classes < 2) throw ContractError("embedder needs at least 2 identity classes");
    p.add_uniform("emb.c1.w", {c.c1, 3, 3, 3}, 3 * 9);
    p.add_zeros("emb.c1.b", {c.c1});
    p.add_uniform("emb.c2.w", {c.c2, c.c1, 3, 3}, c.c1 * 9);
    p.add_zeros("emb.c2.b", {c.c2});
    p.add_uniform("emb.c3.w", {c.c3, c.c2, 3, 3}, c.c2 * 9);
    p.add_zeros("emb.c3.b", {c.c3});
    p.add_uniform("emb.fc1.w", {c.c3, c.d_f}, c.c3);
    p.add_zeros("emb.fc1.b", {c.d_f});
    p.add_uniform("emb.head.w", {c.d_f, c.n_classes}, c.d_f);
    p.add_zeros("emb.head.b", {c.n_classes});
}

// Features of the penultimate layer, before the ReLU feeding the class head;
// they are signed, which keeps cosine geometry informative.
inline Graph::Id embedder_features(Graph& g, const ParamBinder& bind, Graph::Id crop,
                                   const EmbedderConfig& c) {
    auto h = g.conv2d(crop, bind(g, "emb.c1.w"), 1, 1);
    h = g.relu(g.add_cbias(h, bind(g, "emb.c1.b")));
    h = g.conv2d(h, bind(g, "emb.c2.w"), 2, 1);
    h = g.relu(g.add_cbias(h, bind(g, "emb.c2.b")));
    h = g.conv2d(h, bind(g, "emb.c3.w"), 2, 1);
    h = g.relu(g.add_cbias(h, bind(g, "emb.c3.b")));
    auto pooled = g.reshape(g.mean_spatial(h), {1, c.c3});
    return g.add_row(g.matmul(pooled, bind(g, "emb.fc1.w")), bind(g, "emb.fc1.b"));  // [1, d_f]
}

inline Graph::Id embedder_logits(Graph& g, const ParamBinder& bind, Graph::Id features,
                                 const EmbedderConfig& c) {
    (void)c;
    return g.add_row(g.matmul(g.relu(features), bind(g, "emb.head.w")), bind(g, "emb.head.b"));
}

struct Embedder {
    EmbedderConfig config;
    ParamSet params;
    bool trained = false;
    float heldout_acc = 0.0f;
};

inline FaceEmbedding embed_face(const Embedder& e, const Tensor& crop) {
    if (crop.rank() != 3 || crop.dim(0) != 3 || crop.dim(1) != e.config.crop ||
        crop.dim(2) != e.config.crop)
        throw ShapeError("embed_face: want 3x" + std::to_string(e.config.crop) + "x" +
                         std::to_string(e.config.crop) + ", got " + dims_str(crop.dims));
    Graph g;
    auto feat = embedder_features(g, frozen_binder(e.params), g.constant(crop), e.config);
    return FaceEmbedding{Tensor({e.config.d_f}, g.value(feat).data), EmbeddingSource::computed};
}

inline float cosine(const Tensor& a, const Tensor& b) {
    require_same_dims(a, b, "cosine");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += static_cast<double>(a.data[i]) * b.data[i];
        na += static_cast<double>(a.data[i]) * a.data[i];
        nb += static_cast<double>(b.data[i]) * b.data[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0f;
    return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

// Identity classification on labeled crops; the trained network minus its
// head becomes the frozen conditioning embedder.
inline Embedder pretrain_embedder(const std::vector<Tensor>& crops,
                                  const std::vector<int>& labels, int n_classes, int epochs,
                                  std::uint64_t seed, const EmbedderConfig& base = {}) {
    if (n_classes < 2) throw ContractError("pretrain_embedder: need at least 2 identities");
    if (crops.size() != labels.size() || crops.empty())
        throw ContractError("pretrain_embedder: crops and labels must align and be non-empty");

    Embedder e;
    e.config = base;
    e.config.n_classes = n_classes;
    e.params = ParamSet(stream_seed(seed, "embedder-init"));
    init_embedder_params(e.params, e.config);

    // Every tenth example is held out for the accuracy report.
    std::vector<int> train_idx, held_idx;
    for (std::size_t i = 0; i < crops.size(); ++i)
        (i % 10 == 0 ? held_idx : train_idx).push_back(static_cast<int>(i));

    AdamConfig ac;
    ac.lr = 1e-3f;
    Adam opt(ac);
    const int batch = 16;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Rng shuffle_rng(stream_seed(seed, "embedder-epoch", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            Graph g;
            const ParamBinder bind = trainable_binder(e.params);
            // Bind each parameter once per step so gradients accumulate.
            std::map<std::string, Graph::Id> bound;
            const ParamBinder cached = [&](Graph& gg, const std::string& n) {
                auto it = bound.find(n);
                if (it != bound.end()) return it->second;
                return bound.emplace(n, bind(gg, n)).first->second;
            };
            Graph::Id loss = -1;
            const std::size_t stop = std::min(order.size(), start + batch);
            for (std::size_t i = start; i < stop; ++i) {
                const int idx = order[i];
                auto feat = embedder_features(g, cached, g.constant(crops[static_cast<std::size_t>(idx)]),
                                              e.config);
                auto ce = g.cross_entropy(embedder_logits(g, cached, feat, e.config),
                                          {labels[static_cast<std::size_t>(idx)]});
                loss = (loss < 0) ? ce : g.add(loss, ce);
            }
            loss = g.scale(loss, 1.0f / static_cast<float>(stop - start));
            g.backward(loss);
            opt.step(e.params.tensors(), g.named_grads());
        }
    }

    if (epochs > 0) {
        e.trained = true;
        int correct = 0;
        for (int idx : held_idx) {
            Graph g;
            auto feat = embedder_features(g, frozen_binder(e.params),
                                          g.constant(crops[static_cast<std::size_t>(idx)]), e.config);
            const Tensor& logits = g.value(embedder_logits(g, frozen_binder(e.params), feat, e.config));
            int best = 0;
            for (int c = 1; c < n_classes; ++c)
                if (logits.at2(0, c) > logits.at2(0, best)) best = c;
            if (best == labels[static_cast<std::size_t>(idx)]) ++correct;
        }
        e.heldout_acc = held_idx.empty()
                            ? 0.0f
                            : static_cast<float>(correct) / static_cast<float>(held_idx.size());
    }
    return e;
}

inline void save_embedder(const std::filesystem::path& ckpt_path, const Embedder& e) {
    save_checkpoint(ckpt_path, e.params.tensors());
    nlohmann::json j;
    j["trained"] = e.trained;
    j["heldout_acc"] = e.heldout_acc;
    j["crop"] = e.config.crop;
    j["d_f"] = e.config.d_f;
    j["c1"] = e.config.c1;
    j["c2"] = e.config.c2;
    j["c3"] = e.config.c3;
    j["n_classes"] = e.config.n_classes;
    const std::filesystem::path side = std::filesystem::path(ckpt_path).replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + side.string() + "' for writing");
    out << j.dump(1) << '\n';
}

inline Embedder load_embedder(const std::filesystem::path& ckpt_path) {
    const std::filesystem::path side = std::filesystem::path(ckpt_path).replace_extension(".json");
    std::ifstream in(side);
    if (!in)
        throw IoError("cannot open '" + side.string() + "' (run pretrain-embedder first?)");
    nlohmann::json j;
    in >> j;
    Embedder e;
    e.config.crop = j.at("crop").get<int>();
    e.config.d_f = j.at("d_f").get<int>();
    e.config.c1 = j.at("c1").get<int>();
    e.config.c2 = j.at("c2").get<int>();
    e.config.c3 = j.at("c3").get<int>();
    e.config.n_classes = j.at("n_classes").get<int>();
    e.trained = j.at("trained").get<bool>();
    e.heldout_acc = j.at("heldout_acc").get<float>();
    auto tensors = load_checkpoint(ckpt_path);
    e.params = ParamSet(0);
    e.params.tensors() = std::move(tensors);
    return e;
}

// ---- projection MLP: face embedding -> k context tokens ----

struct ProjectionConfig {
    int d_f = 32;
    int d_c = 16;
    int k = 3;
};

inline void init_projection_params(ParamSet& p, const ProjectionConfig& c) {
    p.add_uniform("proj.l1.w", {c.d_f, c.d_f}, c.d_f);
    p.add_zeros("proj.l1.b", {c.d_f});
    p.add_uniform("proj.l2.w", {c.d_f, c.d_f}, c.d_f);
    p.add_zeros("proj.l2.b", {c.d_f});
    p.add_uniform("proj.l3.w", {c.d_f, c.d_f}, c.d_f);
    p.add_zeros("proj.l3.b", {c.d_f});
    p.add_uniform("proj.l4.w", {c.d_f, c.k * c.d_c}, c.d_f);
    p.add_zeros("proj.l4.b", {c.k * c.d_c});
}

// Four affine layers with ReLU after the first three; the last layer's output
// is split in order into k tokens.
inline Graph::Id project_tokens(Graph& g, const ParamBinder& bind, Graph::Id f,
                                const ProjectionConfig& c) {
    if (g.value(f).dims != Dims{1, c.d_f})
        throw ShapeError("project: want [1x" + std::to_string(c.d_f) + "], got " +
                         dims_str(g.value(f).dims));
    auto h = g.relu(g.add_row(g.matmul(f, bind(g, "proj.l1.w")), bind(g, "proj.l1.b")));
    h = g.relu(g.add_row(g.matmul(h, bind(g, "proj.l2.w")), bind(g, "proj.l2.b")));
    h = g.relu(g.add_row(g.matmul(h, bind(g, "proj.l3.w")), bind(g, "proj.l3.b")));
    h = g.add_row(g.matmul(h, bind(g, "proj.l4.w")), bind(g, "proj.l4.b"));
    return g.reshape(h, {c.k, c.d_c});
}

inline Tensor project(const ParamSet& params, const FaceEmbedding& f, const ProjectionConfig& c) {
    Graph g;
    auto id = project_tokens(g, frozen_binder(params), g.constant(Tensor({1, c.d_f}, f.v.data)), c);
    return g.value(id);
}

// ---- context assembly ----

enum class TokenSource { text, face, zeroed };

struct Context {
    Tensor tokens;  // [L, D_c]
    std::vector<TokenSource> provenance;
};

inline void init_token_table(ParamSet& p, int vocab_size, int d_c) {
    p.add_randn("text.table", {vocab_size, d_c}, 0.5f);
}

// First L-k positions embed the caption ids through the frozen table; the
// last k are the projected face tokens, or zeros when the face is absent.
inline Context assemble_context(const Tensor& table, const CaptionTokens& caption,
                                const Tensor* face_tokens, int k) {
    const int L = kContextLen;
    if (k < 0 || k > L) throw ContractError("assemble_context: override count k exceeds L");
    const int d_c = table.dim(1);
    if (face_tokens) {
        if (face_tokens->rank() != 2 || face_tokens->dim(0) != k || face_tokens->dim(1) != d_c)
            throw ShapeError("assemble_context: face tokens " + dims_str(face_tokens->dims) +
                             " do not match k=" + std::to_string(k) + ", d_c=" + std::to_string(d_c));
    }
    Context ctx;
    ctx.tokens = Tensor::zeros({L, d_c});
    ctx.provenance.assign(static_cast<std::size_t>(L), TokenSource::zeroed);
    for (int i = 0; i < L - k; ++i) {
        const int id = caption[static_cast<std::size_t>(i)];
        if (id < 0 || id >= table.dim(0))
            throw ContractError("assemble_context: caption token out of vocabulary");
        for (int j = 0; j < d_c; ++j) ctx.tokens.at2(i, j) = table.at2(id, j);
        ctx.provenance[static_cast<std::size_t>(i)] = TokenSource::text;
    }
    for (int i = L - k; i < L; ++i) {
        if (face_tokens) {
            for (int j = 0; j < d_c; ++j)
                ctx.tokens.at2(i, j) = face_tokens->at2(i - (L - k), j);
            ctx.provenance[static_cast<std::size_t>(i)] = TokenSource::face;
        }
    }
    return ctx;
}

// Graph-side assembly used in training, where face tokens carry gradients.
inline Graph::Id assemble_context_graph(Graph& g, const Tensor& table,
                                        const CaptionTokens& caption, Graph::Id face_tokens_or_neg,
                                        int k, int d_c) {
    const int L = kContextLen;
    if (k < 0 || k > L) throw ContractError("assemble_context: override count k exceeds L");
    std::vector<int> text_ids(caption.begin(), caption.begin() + (L - k));
    auto text = g.gather_rows(g.constant(table), text_ids);
    if (k == 0) return text;
    Graph::Id tail = face_tokens_or_neg >= 0 ? face_tokens_or_neg
                                             : g.constant(Tensor::zeros({k, d_c}));
    return g.concat_rows(text, tail);
}

// ---- condition dropout ----

struct MaybeTokens {
    bool present = false;
    Tensor tokens;
};

// With probability p the projected tokens are replaced by the absent-face
// sentinel (all zeros downstream).
inline MaybeTokens dropout_condition(const Tensor& tokens, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ContractError("dropout probability outside [0,1]");
    if (rng.bernoulli(p)) return MaybeTokens{false, {}};
    return MaybeTokens{true, tokens};
}

// ---- embedding algebra ----

inline FaceEmbedding lerp(const FaceEmbedding& a, const FaceEmbedding& b, float t) {
    require_same_dims(a.v, b.v, "lerp");
    if (t < 0.0f || t > 1.0f) throw ContractError("lerp: t outside [0,1]");
    Tensor out = a.v;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = (1.0f - t) * a.v.data[i] + t * b.v.data[i];
    return FaceEmbedding{std::move(out), EmbeddingSource::interpolated};
}

inline FaceEmbedding weighted_mean(const std::vector<FaceEmbedding>& es,
                                   std::vector<float> weights) {
    if (es.empty()) throw ContractError("weighted_mean: no embeddings");
    if (weights.size() != es.size())
        throw ContractError("weighted_mean: weight count does not match embedding count");
    double sum = 0.0;
    for (float w : weights) sum += w;
    if (sum <= 0.0) throw ContractError("weighted_mean: weights must sum to a positive value");
    for (auto& w : weights) w = static_cast<float>(w / sum);
    Tensor out = Tensor::zeros(es[0].v.dims);
    for (std::size_t e = 0; e < es.size(); ++e) {
        require_same_dims(es[0].v, es[e].v, "weighted_mean");
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += weights[e] * es[e].v.data[i];
    }
    return FaceEmbedding{std::move(out), EmbeddingSource::interpolated};
}

inline FaceEmbedding perturb(const FaceEmbedding& e, float sigma, std::uint64_t seed) {
    if (sigma < 0.0f) throw ContractError("perturb: sigma must be non-negative");
    Tensor out = e.v;
    if (sigma > 0.0f) {
        Rng rng(stream_seed(seed, "perturb"));
        for (auto& v : out.data) v += sigma * rng.normal_f();
    }
    return FaceEmbedding{std::move(out), EmbeddingSource::perturbed};
}

// ---- mixture of Gaussians over embedding space ----

struct MixtureSpec {
    std::vector<float> weights;
    std::vector<Tensor> means;    // each [D_f]
    std::vector<Tensor> stddevs;  // each [D_f], >= 0

    int components() const { return static_cast<int>(weights.size()); }
    int dim() const { return means.empty() ? 0 : means[0].dim(0); }

    void validate() const {
        if (weights.empty() || weights.size() != means.size() || weights.size() != stddevs.size())
            throw ContractError("mixture: component lists are empty or misaligned");
        double sum = 0.0;
        for (float w : weights) {
            if (w < 0.0f) throw ContractError("mixture: negative weight");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-4) throw ContractError("mixture: weights must sum to 1");
        for (std::size_t m = 0; m < means.size(); ++m) {
            require_same_dims(means[m], means[0], "mixture");
            require_same_dims(stddevs[m], means[0], "mixture");
            for (float s : stddevs[m].data)
                if (s < 0.0f) throw ContractError("mixture: negative stddev");
        }
    }
};

inline int nearest_component_of(const std::vector<Tensor>& means, const Tensor& v) {
    int best = 0;
    double best_d = -1.0;
    for (std::size_t m = 0; m < means.size(); ++m) {
        double d = 0.0;
        for (std::size_t i = 0; i < v.numel(); ++i) {
            const double diff = static_cast<double>(v.data[i]) - means[m].data[i];
            d += diff * diff;
        }
        if (best_d < 0.0 || d < best_d) {
            best_d = d;
            best = static_cast<int>(m);
        }
    }
    return best;
}

inline int nearest_component(const MixtureSpec& spec, const Tensor& v) {
    return nearest_component_of(spec.means, v);
}

// Deterministic k-means (Lloyd) plus per-cluster diagonal stddev.
inline MixtureSpec fit_mixture(const std::vector<Tensor>& embeddings, int m, std::uint64_t seed,
                               int iters = 25) {
    if (embeddings.empty()) throw ContractError("fit_mixture: no embeddings");
    if (m < 1 || m > static_cast<int>(embeddings.size()))
        throw ContractError("fit_mixture: component count out of range");
    const int n = static_cast<int>(embeddings.size());
    const int d = embeddings[0].dim(0);
    for (const Tensor& e : embeddings) require_same_dims(e, embeddings[0], "fit_mixture");

    MixtureSpec spec;
    Rng rng(stream_seed(seed, "mixture-init"));
    std::vector<int> picked;
    while (static_cast<int>(picked.size()) < m) {
        const int cand = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        if (std::find(picked.begin(), picked.end(), cand) == picked.end()) picked.push_back(cand);
    }
    for (int c : picked) spec.means.push_back(embeddings[static_cast<std::size_t>(c)]);

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i)
            assign[static_cast<std::size_t>(i)] = nearest_component_of(spec.means, embeddings[static_cast<std::size_t>(i)]);
        for (int c = 0; c < m; ++c) {
            Tensor mean = Tensor::zeros({d});
            int count = 0;
            for (int i = 0; i < n; ++i)
                if (assign[static_cast<std::size_t>(i)] == c) {
                    ++count;
                    for (int j = 0; j < d; ++j)
                        mean.data[static_cast<std::size_t>(j)] += embeddings[static_cast<std::size_t>(i)].data[static_cast<std::size_t>(j)];
                }
            if (count == 0) {
                // Re-seed an empty cluster at the point farthest from its center.
                int far = 0;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    const Tensor& c2 = spec.means[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
                    double dd = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double diff = embeddings[static_cast<std::size_t>(i)].data[static_cast<std::size_t>(j)] - c2.data[static_cast<std::size_t>(j)];
                        dd += diff * diff;
                    }
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                spec.means[static_cast<std::size_t>(c)] = embeddings[static_cast<std::size_t>(far)];
            } else {
                for (int j = 0; j < d; ++j)
                    mean.data[static_cast<std::size_t>(j)] /= static_cast<float>(count);
                spec.means[static_cast<std::size_t>(c)] = std::move(mean);
            }
        }
    }
    for (int i = 0; i < n; ++i)
        assign[static_cast<std::size_t>(i)] = nearest_component_of(spec.means, embeddings[static_cast<std::size_t>(i)]);

    spec.weights.assign(static_cast<std::size_t>(m), 0.0f);
    spec.stddevs.assign(static_cast<std::size_t>(m), Tensor::zeros({d}));
    std::vector<int> counts(static_cast<std::size_t>(m), 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    for (int c = 0; c < m; ++c)
        spec.weights[static_cast<std::size_t>(c)] = static_cast<float>(counts[static_cast<std::size_t>(c)]) / static_cast<float>(n);
    for (int i = 0; i < n; ++i) {
        const int c = assign[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) {
            const float diff = embeddings[static_cast<std::size_t>(i)].data[static_cast<std::size_t>(j)] -
                               spec.means[static_cast<std::size_t>(c)].data[static_cast<std::size_t>(j)];
            spec.stddevs[static_cast<std::size_t>(c)].data[static_cast<std::size_t>(j)] += diff * diff;
        }
    }
    for (int c = 0; c < m; ++c)
        for (int j = 0; j < d; ++j) {
            float& s = spec.stddevs[static_cast<std::size_t>(c)].data[static_cast<std::size_t>(j)];
            s = std::max(1e-3f, std::sqrt(s / static_cast<float>(std::max(1, counts[static_cast<std::size_t>(c)]))));
        }
    spec.validate();
    return spec;
}

inline FaceEmbedding sample_random_embedding(const MixtureSpec& spec, Rng& rng) {
    spec.validate();
    const double u = rng.uniform();
    double acc = 0.0;
    int comp = spec.components() - 1;
    for (int c = 0; c < spec.components(); ++c) {
        acc += spec.weights[static_cast<std::size_t>(c)];
        if (u < acc) {
            comp = c;
            break;
        }
    }
    Tensor out = spec.means[static_cast<std::size_t>(comp)];
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] += spec.stddevs[static_cast<std::size_t>(comp)].data[i] * rng.normal_f();
    return FaceEmbedding{std::move(out), EmbeddingSource::random};
}

inline nlohmann::json mixture_to_json(const MixtureSpec& spec) {
    nlohmann::json j;
    j["weights"] = spec.weights;
    auto means = nlohmann::json::array();
    auto stds = nlohmann::json::array();
    for (const Tensor& t : spec.means) means.push_back(t.data);
    for (const Tensor& t : spec.stddevs) stds.push_back(t.data);
    j["means"] = std::move(means);
    j["stddevs"] = std::move(stds);
    return j;
}

inline MixtureSpec mixture_from_json(const nlohmann::json& j) {
    MixtureSpec spec;
    spec.weights = j.at("weights").get<std::vector<float>>();
    for (const auto& mj : j.at("means")) {
        auto data = mj.get<std::vector<float>>();
        spec.means.push_back(Tensor({static_cast<int>(data.size())}, data));
    }
    for (const auto& sj : j.at("stddevs")) {
        auto data = sj.get<std::vector<float>>();
        spec.stddevs.push_back(Tensor({static_cast<int>(data.size())}, data));
    }
    spec.validate();
    return spec;
}

inline void save_mixture(const std::filesystem::path& path, const MixtureSpec& spec) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << mixture_to_json(spec).dump(1) << '\n';
}

inline MixtureSpec load_mixture(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "' (run train-probes first?)");
    nlohmann::json j;
    in >> j;
    return mixture_from_json(j);
}

}  // namespace face0
