#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "face0/diffusion.hpp"
#include "face0/face_pipeline.hpp"
#include "face0/toy_faces.hpp"

namespace face0 {

// ---- small metric helpers ----

// Intersection over union of two boxes (image sizes are ignored).
inline float iou(const FaceBox& a, const FaceBox& b) {
    const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    const long inter = static_cast<long>(std::max(0, ix1 - ix0)) * std::max(0, iy1 - iy0);
    const long uni = a.area() + b.area() - inter;
    return uni <= 0 ? 0.0f : static_cast<float>(static_cast<double>(inter) / static_cast<double>(uni));
}

// Probability that a positive score ranks above a negative one (ties count half).
inline double auc_score(const std::vector<float>& pos, const std::vector<float>& neg) {
    if (pos.empty() || neg.empty()) throw ContractError("auc_score: need both score sets");
    double wins = 0.0;
    for (float p : pos)
        for (float n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline double total_variation(const std::array<double, 4>& p, const std::array<double, 4>& q) {
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
    return 0.5 * tv;
}

// ---- rendered crop sets (probe and embedder training data) ----

struct LabeledCrops {
    std::vector<Tensor> crops;
    std::vector<int> labels;
};

// ---- the detection grid ----

// Three scales spanning the face sizes the generator can produce: quarter
// canvas up to half canvas (the largest possible face), geometrically spaced.
// Capping the ladder at m/2 keeps a too-wide hit on a mid-size face inside
// IoU 0.5 of the truth, which matters because the largest passing box wins.
inline std::vector<int> detect_scales(int m) {
    const int mid = static_cast<int>(std::lround(std::sqrt(0.125) * m));
    std::vector<int> out{std::max(4, m / 4), std::max(4, mid), std::max(4, m / 2)};
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// Every square the detector scans for an ih x iw image: three scales on a
// stride-m/8 grid, with the right and bottom edges always included.
inline std::vector<FaceBox> detect_candidates(int ih, int iw) {
    const int m = std::min(ih, iw);
    const int stride = std::max(1, m / 8);
    std::vector<FaceBox> out;
    for (int sz : detect_scales(m)) {
        if (sz > m) continue;
        auto positions = [&](int extent) {
            std::vector<int> xs;
            for (int x = 0; x + sz <= extent; x += stride) xs.push_back(x);
            if (xs.empty() || xs.back() != extent - sz) xs.push_back(extent - sz);
            return xs;
        };
        for (int y : positions(ih))
            for (int x : positions(iw)) {
                FaceBox cand;
                cand.x0 = x;
                cand.y0 = y;
                cand.x1 = x + sz;
                cand.y1 = y + sz;
                cand.img_w = iw;
                cand.img_h = ih;
                out.push_back(cand);
            }
    }
    return out;
}

// The scan candidate that overlaps the box best; how faces look to the scan.
inline FaceBox best_candidate_view(const FaceBox& box, int ih, int iw) {
    const auto cands = detect_candidates(ih, iw);
    const FaceBox* best = &cands.front();
    float best_iou = -1.0f;
    for (const FaceBox& c : cands) {
        const float v = iou(c, box);
        if (v > best_iou) {
            best_iou = v;
            best = &c;
        }
    }
    return *best;
}

// One face crop per (identity, scene), cropped with the standard margins.
// Candidate views add crops per scene taken from detection grid squares
// instead of the exact box — the best-fitting candidate and the best of the
// next scale up — so embeddings stay stable under imperfect detection.
inline LabeledCrops render_identity_crops(const std::vector<IdentityParams>& ids, int per_id,
                                          int crop_size, std::uint64_t seed, int canvas = 48,
                                          int min_face = 12, bool candidate_views = false) {
    if (ids.empty() || per_id < 1) throw ContractError("render_identity_crops: empty request");
    const std::vector<FaceBox> cands = detect_candidates(canvas, canvas);
    LabeledCrops out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < per_id; ++j) {
            Rng rng(stream_seed(seed, "crops", static_cast<std::uint64_t>(i),
                                static_cast<std::uint64_t>(j)));
            const SceneParams sc = sample_scene(ids[i], rng, canvas, min_face);
            auto [img, box] = render(ids[i], sc, canvas);
            out.crops.push_back(face_crop(img, box, kDefaultMargins, kMarginRefScale, crop_size));
            out.labels.push_back(static_cast<int>(i));
            if (candidate_views) {
                const FaceBox* best = nullptr;
                float best_iou = -1.0f;
                for (const FaceBox& c : cands) {
                    const float v = iou(c, box);
                    if (v > best_iou) { best_iou = v; best = &c; }
                }
                out.crops.push_back(
                    face_crop(img, *best, kDefaultMargins, kMarginRefScale, crop_size));
                out.labels.push_back(static_cast<int>(i));
            }
        }
    }
    return out;
}

// ---- the identity probe: classifier + face/background head + attributes ----
//
// A single crop network used only for measurement: it names the identity a
// face crop belongs to, says whether a crop contains a face at all (the
// detector scores grid candidates with this head), and regresses the eight
// underlying identity attributes for distribution probes.

struct IdentityProbe {
    EmbedderConfig cfg;                // backbone dims; n_classes = ids.size()
    ParamSet params;                   // emb.* backbone and class head, det.*, attr.*
    std::vector<IdentityParams> ids;   // class index -> identity
    bool trained = false;
    float heldout_acc = 0.0f;          // identity accuracy on held-out face crops
    float det_acc = 0.0f;              // face/background accuracy on held-out crops
};

namespace detail {

inline void init_probe_heads(ParamSet& p, const EmbedderConfig& c) {
    p.add_uniform("det.w", {c.d_f, 1}, c.d_f);
    p.add_zeros("det.b", {1});
    p.add_uniform("attr.w", {c.d_f, 8}, c.d_f);
    p.add_zeros("attr.b", {8});
}

inline Graph::Id probe_det_logit(Graph& g, const ParamBinder& bind, Graph::Id features) {
    return g.add_row(g.matmul(features, bind(g, "det.w")), bind(g, "det.b"));
}

inline Graph::Id probe_attr_out(Graph& g, const ParamBinder& bind, Graph::Id features) {
    return g.add_row(g.matmul(features, bind(g, "attr.w")), bind(g, "attr.b"));
}

}  // namespace detail

struct ProbeOutputs {
    Tensor class_probs;  // [1, n_classes]
    float face_score = 0.0f;
    Tensor attrs;        // [1, 8]
};

inline ProbeOutputs probe_eval(const IdentityProbe& probe, const Tensor& crop) {
    if (!probe.trained) throw ContractError("probe_eval: the identity probe is not trained");
    Graph g;
    const ParamBinder bind = frozen_binder(probe.params);
    auto feat = embedder_features(g, bind, g.constant(crop), probe.cfg);
    ProbeOutputs out;
    out.class_probs = g.value(g.softmax(embedder_logits(g, bind, feat, probe.cfg)));
    const float logit = g.value(detail::probe_det_logit(g, bind, feat)).data[0];
    out.face_score = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logit))));
    out.attrs = g.value(detail::probe_attr_out(g, bind, feat));
    return out;
}

struct ProbeTrainConfig {
    int scenes_per_id = 20;
    int epochs = 20;
    std::uint64_t seed = 0;
    int canvas = 48;
    int min_face = 12;
    EmbedderConfig base{};     // backbone dims; n_classes is overwritten
    float attr_weight = 1.0f;  // weight of the attribute regression term
    float noise_aug = 0.1f;    // additive-noise stddev on half the examples
    float bg_weight = 2.0f;    // background weight in the face/background loss;
                               // the scan sees ~50x more background than faces
    float pos_weight = 2.0f;   // face weight in the same loss; counters the
                               // many-background example mix to keep recall
};

namespace detail {

struct ProbeExample {
    Tensor crop;
    int label = -1;           // class index, or -1 for background
    Tensor attrs;             // [1,8], positives only
    bool det_example = true;  // false: trains only the identity/attribute heads
};

// Training examples come from the same candidate grid the detector scans.
// Candidates overlapping the true box well are faces; near misses (offset or
// oversized boxes), far backgrounds, pure noise, and pixel-shuffled face
// crops are all background, so the face head learns tight fits, not texture.
inline std::vector<ProbeExample> render_probe_set(const std::vector<IdentityParams>& ids,
                                                  const ProbeTrainConfig& cfg) {
    constexpr float kFaceIou = 0.55f;    // at or above: a face candidate
    constexpr float kMissIou = 0.5f;     // below: background; the band between
                                         // stays unsupervised
    std::vector<ProbeExample> out;
    const int crop = cfg.base.crop;
    const auto cands = detect_candidates(cfg.canvas, cfg.canvas);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < cfg.scenes_per_id; ++j) {
            Rng rng(stream_seed(cfg.seed, "probe", static_cast<std::uint64_t>(i),
                                static_cast<std::uint64_t>(j)));
            const SceneParams sc = sample_scene(ids[i], rng, cfg.canvas, cfg.min_face);
            auto [img, box] = render(ids[i], sc, cfg.canvas);

            // Group candidates by fit and, for background, by scale: every
            // scan scale must learn to say no, or the largest wins by default.
            std::vector<std::size_t> face_cands;
            std::map<int, std::vector<std::size_t>> near_by_scale, far_by_scale;
            for (std::size_t c = 0; c < cands.size(); ++c) {
                const float v = iou(cands[c], box);
                const int sz = cands[c].width();
                if (v >= kFaceIou) face_cands.push_back(c);
                else if (v >= 0.1f && v < kMissIou) near_by_scale[sz].push_back(c);
                else if (v < 0.1f) far_by_scale[sz].push_back(c);
            }
            std::sort(face_cands.begin(), face_cands.end(), [&](std::size_t a, std::size_t b) {
                return iou(cands[a], box) > iou(cands[b], box);
            });
            if (face_cands.size() > 2) face_cands.resize(2);

            for (std::size_t c : face_cands) {
                ProbeExample pos;
                pos.crop = crop_resize(img, cands[c], crop);
                if (cfg.noise_aug > 0.0f && rng.bernoulli(0.5))
                    for (auto& v : pos.crop.data) v += cfg.noise_aug * rng.normal_f();
                pos.label = static_cast<int>(i);
                pos.attrs = Tensor({1, 8}, std::vector<float>(ids[i].v.begin(), ids[i].v.end()));
                out.push_back(std::move(pos));
            }

            auto push_bg = [&](const Tensor& source,
                               const std::map<int, std::vector<std::size_t>>& groups,
                               std::size_t reps) {
                for (const auto& [sz, group] : groups) {
                    for (std::size_t k = 0; k < reps; ++k) {
                        ProbeExample neg;
                        neg.crop =
                            crop_resize(source, cands[group[rng.uniform_int(group.size())]], crop);
                        if (cfg.noise_aug > 0.0f && rng.bernoulli(0.5))
                            for (auto& v : neg.crop.data) v += cfg.noise_aug * rng.normal_f();
                        out.push_back(std::move(neg));
                    }
                }
            };
            push_bg(img, near_by_scale, 1);
            push_bg(img, far_by_scale, 1);

            // Structureless noise, cropped through the same scan path so its
            // statistics match what the detector will actually score.
            Tensor noise_canvas = Tensor::zeros({3, cfg.canvas, cfg.canvas});
            for (auto& v : noise_canvas.data) v = rng.uniform_f(-1.0f, 1.0f);
            std::map<int, std::vector<std::size_t>> all_by_scale;
            for (std::size_t c = 0; c < cands.size(); ++c)
                all_by_scale[cands[c].width()].push_back(c);
            push_bg(noise_canvas, all_by_scale, 2);

            // The best face crop with its pixels shuffled: face statistics
            // without face structure.
            if (!face_cands.empty()) {
                ProbeExample shuffled;
                shuffled.crop = crop_resize(img, cands[face_cands[0]], crop);
                for (std::size_t n = shuffled.crop.numel(); n > 1; --n)
                    std::swap(shuffled.crop.data[n - 1], shuffled.crop.data[rng.uniform_int(n)]);
                out.push_back(std::move(shuffled));
            }

            // A canonically framed crop for the identity and attribute heads
            // only; the face/background head never sees this framing.
            ProbeExample canon;
            canon.crop = face_crop(img, box, kDefaultMargins, kMarginRefScale, crop);
            canon.label = static_cast<int>(i);
            canon.attrs = Tensor({1, 8}, std::vector<float>(ids[i].v.begin(), ids[i].v.end()));
            canon.det_example = false;
            out.push_back(std::move(canon));

            // The best oversized candidate, identity/attribute heads only:
            // when the detector returns a box a scale too large, the identity
            // read-out should still name the right face.
            const FaceBox* over = nullptr;
            float over_iou = -1.0f;
            for (const FaceBox& c : cands) {
                const float v = iou(c, box);
                if (c.width() > box.width() && v > over_iou) { over_iou = v; over = &c; }
            }
            if (over != nullptr) {
                ProbeExample wide;
                wide.crop = crop_resize(img, *over, crop);
                wide.label = static_cast<int>(i);
                wide.attrs = Tensor({1, 8}, std::vector<float>(ids[i].v.begin(), ids[i].v.end()));
                wide.det_example = false;
                out.push_back(std::move(wide));
            }
        }
    }
    return out;
}

}  // namespace detail

inline IdentityProbe train_identity_probe(const std::vector<IdentityParams>& ids,
                                          const ProbeTrainConfig& cfg) {
    if (ids.size() < 2) throw ContractError("train_identity_probe: need at least 2 identities");
    if (cfg.epochs < 1 || cfg.scenes_per_id < 2)
        throw ContractError("train_identity_probe: need at least one epoch and two scenes per id");

    IdentityProbe probe;
    probe.cfg = cfg.base;
    probe.cfg.n_classes = static_cast<int>(ids.size());
    probe.ids = ids;
    probe.params = ParamSet(stream_seed(cfg.seed, "probe-init"));
    init_embedder_params(probe.params, probe.cfg);
    detail::init_probe_heads(probe.params, probe.cfg);

    const auto examples = detail::render_probe_set(ids, cfg);
    std::vector<int> train_idx, held_idx;
    for (std::size_t i = 0; i < examples.size(); ++i)
        (i % 10 == 0 ? held_idx : train_idx).push_back(static_cast<int>(i));

    AdamConfig ac;
    ac.lr = 1e-3f;
    Adam opt(ac);
    const int batch = 16;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Rng shuffle_rng(stream_seed(cfg.seed, "probe-epoch", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            Graph g;
            std::map<std::string, Graph::Id> bound;
            const ParamBinder bind = [&](Graph& gg, const std::string& n) {
                auto it = bound.find(n);
                if (it != bound.end()) return it->second;
                return bound.emplace(n, gg.param(n, probe.params.at(n))).first->second;
            };
            Graph::Id loss = -1;
            const std::size_t stop = std::min(order.size(), start + batch);
            for (std::size_t i = start; i < stop; ++i) {
                const detail::ProbeExample& ex = examples[static_cast<std::size_t>(order[i])];
                auto feat = embedder_features(g, bind, g.constant(ex.crop), probe.cfg);
                Graph::Id l = -1;
                if (ex.det_example) {
                    const float det_target = ex.label >= 0 ? 1.0f : 0.0f;
                    l = g.bce_logits(detail::probe_det_logit(g, bind, feat),
                                     g.constant(Tensor({1, 1}, {det_target})));
                    const float w = ex.label < 0 ? cfg.bg_weight : cfg.pos_weight;
                    if (w != 1.0f) l = g.scale(l, w);
                }
                if (ex.label >= 0) {
                    auto ce = g.cross_entropy(embedder_logits(g, bind, feat, probe.cfg),
                                              {ex.label});
                    l = l < 0 ? ce : g.add(l, ce);
                    auto am = g.mse(detail::probe_attr_out(g, bind, feat), g.constant(ex.attrs));
                    l = g.add(l, g.scale(am, cfg.attr_weight));
                }
                loss = loss < 0 ? l : g.add(loss, l);
            }
            loss = g.scale(loss, 1.0f / static_cast<float>(stop - start));
            g.backward(loss);
            auto grads = g.named_grads();
            // An all-background batch never touches the class or attribute
            // heads; those parameters get zero grads.
            for (const auto& [name, t] : probe.params.tensors())
                if (grads.find(name) == grads.end()) grads.emplace(name, Tensor::zeros(t.dims));
            opt.step(probe.params.tensors(), grads);
        }
    }
    probe.trained = true;

    int id_total = 0, id_correct = 0, det_total = 0, det_correct = 0;
    for (int idx : held_idx) {
        const detail::ProbeExample& ex = examples[static_cast<std::size_t>(idx)];
        const ProbeOutputs o = probe_eval(probe, ex.crop);
        if (ex.det_example) {
            ++det_total;
            if ((o.face_score > 0.5f) == (ex.label >= 0)) ++det_correct;
        }
        if (ex.label >= 0) {
            ++id_total;
            int best = 0;
            for (int c = 1; c < probe.cfg.n_classes; ++c)
                if (o.class_probs.at2(0, c) > o.class_probs.at2(0, best)) best = c;
            if (best == ex.label) ++id_correct;
        }
    }
    probe.heldout_acc =
        id_total == 0 ? 0.0f : static_cast<float>(id_correct) / static_cast<float>(id_total);
    probe.det_acc =
        det_total == 0 ? 0.0f : static_cast<float>(det_correct) / static_cast<float>(det_total);
    return probe;
}

// ---- the caption scorer: two towers trained contrastively ----

struct CaptionScorerConfig {
    int d_e = 16;     // shared space width
    int c1 = 8, c2 = 12;
    int d_tok = 16;   // caption token embedding width
    float tau = 0.07f;
    int canvas = 48;
};

struct CaptionScorer {
    CaptionScorerConfig cfg;
    ParamSet params;  // imgt.*, capt.*
    bool trained = false;
};

namespace detail {

inline void init_scorer_params(ParamSet& p, const CaptionScorerConfig& c) {
    p.add_uniform("imgt.c1.w", {c.c1, 3, 3, 3}, 3 * 9);
    p.add_zeros("imgt.c1.b", {c.c1});
    p.add_uniform("imgt.c2.w", {c.c2, c.c1, 3, 3}, c.c1 * 9);
    p.add_zeros("imgt.c2.b", {c.c2});
    p.add_uniform("imgt.fc.w", {c.c2, c.d_e}, c.c2);
    p.add_zeros("imgt.fc.b", {c.d_e});
    p.add_randn("capt.table", {vocab::kSize, c.d_tok}, 0.5f);
    p.add_uniform("capt.fc.w", {c.d_tok, c.d_e}, c.d_tok);
    p.add_zeros("capt.fc.b", {c.d_e});
}

// Both towers end in a row standardization, so dot products live on a fixed
// scale and cosine at evaluation time matches the training geometry.
inline Graph::Id image_tower(Graph& g, const ParamBinder& bind, const CaptionScorerConfig& c,
                             Graph::Id image) {
    auto h = g.relu(g.add_cbias(g.conv2d(image, bind(g, "imgt.c1.w"), 2, 1), bind(g, "imgt.c1.b")));
    h = g.relu(g.add_cbias(g.conv2d(h, bind(g, "imgt.c2.w"), 2, 1), bind(g, "imgt.c2.b")));
    auto v = g.reshape(g.mean_spatial(h), {1, c.c2});
    v = g.add_row(g.matmul(v, bind(g, "imgt.fc.w")), bind(g, "imgt.fc.b"));
    return g.layer_norm(v);
}

inline Graph::Id caption_tower(Graph& g, const ParamBinder& bind, const CaptionScorerConfig& c,
                               const CaptionTokens& caption) {
    const std::vector<int> ids(caption.begin(), caption.end());
    auto toks = g.gather_rows(bind(g, "capt.table"), ids);  // [L, d_tok]
    const Tensor ones({1, kContextLen}, std::vector<float>(kContextLen, 1.0f));
    auto pooled = g.scale(g.matmul(g.constant(ones), toks), 1.0f / kContextLen);
    auto v = g.add_row(g.matmul(pooled, bind(g, "capt.fc.w")), bind(g, "capt.fc.b"));
    return g.layer_norm(v);
}

}  // namespace detail

struct CaptionScorerTrainConfig {
    int pairs = 768;
    int steps = 1600;
    int batch = 16;
    std::uint64_t seed = 0;
    int canvas = 48;
    int min_face = 12;
};

inline CaptionScorer train_caption_scorer(const std::vector<IdentityParams>& ids,
                                          const CaptionScorerTrainConfig& tc,
                                          const CaptionScorerConfig& base = {}) {
    if (ids.empty()) throw ContractError("train_caption_scorer: need identities to render");
    if (tc.pairs < tc.batch || tc.batch < 2)
        throw ContractError("train_caption_scorer: batch must be >= 2 and <= pairs");

    CaptionScorer sc;
    sc.cfg = base;
    sc.cfg.canvas = tc.canvas;
    sc.params = ParamSet(stream_seed(tc.seed, "scorer-init"));
    detail::init_scorer_params(sc.params, sc.cfg);

    std::vector<Tensor> images;
    std::vector<CaptionTokens> captions;
    for (int j = 0; j < tc.pairs; ++j) {
        Rng rng(stream_seed(tc.seed, "pair", static_cast<std::uint64_t>(j)));
        const IdentityParams& id = ids[static_cast<std::size_t>(j) % ids.size()];
        const SceneParams scn = sample_scene(id, rng, tc.canvas, tc.min_face);
        auto [img, box] = render(id, scn, tc.canvas);
        (void)box;
        images.push_back(std::move(img));
        captions.push_back(make_caption(scn, rng));
    }

    AdamConfig ac;
    ac.lr = 1e-3f;
    Adam opt(ac);
    std::vector<int> labels(static_cast<std::size_t>(tc.batch));
    for (int b = 0; b < tc.batch; ++b) labels[static_cast<std::size_t>(b)] = b;
    for (int step = 0; step < tc.steps; ++step) {
        Rng pick(stream_seed(tc.seed, "tower-batch", static_cast<std::uint64_t>(step)));
        Graph g;
        std::map<std::string, Graph::Id> bound;
        const ParamBinder bind = [&](Graph& gg, const std::string& n) {
            auto it = bound.find(n);
            if (it != bound.end()) return it->second;
            return bound.emplace(n, gg.param(n, sc.params.at(n))).first->second;
        };
        Graph::Id img_rows = -1, cap_rows = -1;
        for (int b = 0; b < tc.batch; ++b) {
            const std::size_t j = pick.uniform_int(images.size());
            auto iv = detail::image_tower(g, bind, sc.cfg, g.constant(images[j]));
            auto cv = detail::caption_tower(g, bind, sc.cfg, captions[j]);
            img_rows = b == 0 ? iv : g.concat_rows(img_rows, iv);
            cap_rows = b == 0 ? cv : g.concat_rows(cap_rows, cv);
        }
        // Standardized rows have squared norm ~= d_e, so this scaling makes
        // the logits behave like cosines over the temperature.
        auto sim = g.scale(g.matmul(img_rows, g.transpose2(cap_rows)),
                           1.0f / (sc.cfg.tau * static_cast<float>(sc.cfg.d_e)));
        auto loss = g.scale(g.add(g.cross_entropy(sim, labels),
                                  g.cross_entropy(g.transpose2(sim), labels)),
                            0.5f);
        g.backward(loss);
        opt.step(sc.params.tensors(), g.named_grads());
    }
    sc.trained = true;
    return sc;
}

inline Tensor caption_vector(const CaptionScorer& sc, const CaptionTokens& caption) {
    if (!sc.trained) throw ContractError("caption scorer is not trained");
    Graph g;
    return g.value(detail::caption_tower(g, frozen_binder(sc.params), sc.cfg, caption));
}

inline Tensor image_vector(const CaptionScorer& sc, const Tensor& image) {
    if (!sc.trained) throw ContractError("caption scorer is not trained");
    Graph g;
    return g.value(detail::image_tower(g, frozen_binder(sc.params), sc.cfg, g.constant(image)));
}

inline float text_alignment(const CaptionScorer& sc, const Tensor& image,
                            const CaptionTokens& caption) {
    return cosine(image_vector(sc, image), caption_vector(sc, caption));
}

// ---- the probe bundle ----

struct EvalProbes {
    IdentityProbe probe;  // identities + detection + attributes
    Embedder face_tower;  // crop embeddings for face alignment (held-out identities)
    CaptionScorer scorer; // caption alignment
};

inline void require_trained(const EvalProbes& p, const char* who) {
    if (!p.probe.trained || !p.face_tower.trained || !p.scorer.trained)
        throw ContractError(std::string(who) + ": evaluation probes are not trained");
}

inline void save_eval_probes(const std::filesystem::path& path, const EvalProbes& p) {
    std::map<std::string, Tensor> all;
    for (const auto& [name, t] : p.probe.params.tensors()) all.emplace("probe." + name, t);
    for (const auto& [name, t] : p.face_tower.params.tensors()) all.emplace("ft." + name, t);
    for (const auto& [name, t] : p.scorer.params.tensors()) all.emplace("sc." + name, t);
    save_checkpoint(path, all);

    nlohmann::json j;
    j["probe"] = {{"crop", p.probe.cfg.crop},     {"d_f", p.probe.cfg.d_f},
                  {"c1", p.probe.cfg.c1},         {"c2", p.probe.cfg.c2},
                  {"c3", p.probe.cfg.c3},         {"n_classes", p.probe.cfg.n_classes},
                  {"trained", p.probe.trained},   {"heldout_acc", p.probe.heldout_acc},
                  {"det_acc", p.probe.det_acc}};
    nlohmann::json ids = nlohmann::json::array();
    for (const IdentityParams& id : p.probe.ids)
        ids.push_back(std::vector<float>(id.v.begin(), id.v.end()));
    j["probe"]["ids"] = ids;
    j["face_tower"] = {{"crop", p.face_tower.config.crop}, {"d_f", p.face_tower.config.d_f},
                       {"c1", p.face_tower.config.c1},     {"c2", p.face_tower.config.c2},
                       {"c3", p.face_tower.config.c3},
                       {"n_classes", p.face_tower.config.n_classes},
                       {"trained", p.face_tower.trained},
                       {"heldout_acc", p.face_tower.heldout_acc}};
    j["scorer"] = {{"d_e", p.scorer.cfg.d_e},   {"c1", p.scorer.cfg.c1},
                   {"c2", p.scorer.cfg.c2},     {"d_tok", p.scorer.cfg.d_tok},
                   {"tau", p.scorer.cfg.tau},   {"canvas", p.scorer.cfg.canvas},
                   {"trained", p.scorer.trained}};
    j["L"] = kContextLen;
    std::vector<std::string> words(vocab::kWords, vocab::kWords + vocab::kSize);
    j["vocab"] = words;
    const std::filesystem::path side = std::filesystem::path(path).replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + side.string() + "' for writing");
    out << j.dump(1) << '\n';
}

inline EvalProbes load_eval_probes(const std::filesystem::path& path) {
    const std::filesystem::path side = std::filesystem::path(path).replace_extension(".json");
    std::ifstream in(side);
    if (!in) throw IoError("cannot open '" + side.string() + "' (run train-probes first?)");
    nlohmann::json j;
    in >> j;
    if (j.at("L").get<int>() != kContextLen)
        throw ContractError("probe checkpoint context length does not match this build");
    const auto words = j.at("vocab").get<std::vector<std::string>>();
    if (static_cast<int>(words.size()) != vocab::kSize)
        throw ContractError("probe checkpoint vocabulary does not match this build");
    for (int i = 0; i < vocab::kSize; ++i)
        if (words[static_cast<std::size_t>(i)] != vocab::kWords[i])
            throw ContractError("probe checkpoint vocabulary does not match this build");

    EvalProbes p;
    const auto& jp = j.at("probe");
    p.probe.cfg.crop = jp.at("crop").get<int>();
    p.probe.cfg.d_f = jp.at("d_f").get<int>();
    p.probe.cfg.c1 = jp.at("c1").get<int>();
    p.probe.cfg.c2 = jp.at("c2").get<int>();
    p.probe.cfg.c3 = jp.at("c3").get<int>();
    p.probe.cfg.n_classes = jp.at("n_classes").get<int>();
    p.probe.trained = jp.at("trained").get<bool>();
    p.probe.heldout_acc = jp.at("heldout_acc").get<float>();
    p.probe.det_acc = jp.at("det_acc").get<float>();
    for (const auto& row : jp.at("ids")) {
        IdentityParams id;
        const auto vals = row.get<std::vector<float>>();
        if (vals.size() != id.v.size())
            throw IoError("probe checkpoint has a malformed identity entry");
        std::copy(vals.begin(), vals.end(), id.v.begin());
        p.probe.ids.push_back(id);
    }
    const auto& jf = j.at("face_tower");
    p.face_tower.config.crop = jf.at("crop").get<int>();
    p.face_tower.config.d_f = jf.at("d_f").get<int>();
    p.face_tower.config.c1 = jf.at("c1").get<int>();
    p.face_tower.config.c2 = jf.at("c2").get<int>();
    p.face_tower.config.c3 = jf.at("c3").get<int>();
    p.face_tower.config.n_classes = jf.at("n_classes").get<int>();
    p.face_tower.trained = jf.at("trained").get<bool>();
    p.face_tower.heldout_acc = jf.at("heldout_acc").get<float>();
    const auto& js = j.at("scorer");
    p.scorer.cfg.d_e = js.at("d_e").get<int>();
    p.scorer.cfg.c1 = js.at("c1").get<int>();
    p.scorer.cfg.c2 = js.at("c2").get<int>();
    p.scorer.cfg.d_tok = js.at("d_tok").get<int>();
    p.scorer.cfg.tau = js.at("tau").get<float>();
    p.scorer.cfg.canvas = js.at("canvas").get<int>();
    p.scorer.trained = js.at("trained").get<bool>();

    auto all = load_checkpoint(path);
    auto take_prefixed = [&](const std::string& prefix, std::map<std::string, Tensor>& into) {
        for (auto it = all.begin(); it != all.end();) {
            if (it->first.rfind(prefix, 0) == 0) {
                into.emplace(it->first.substr(prefix.size()), std::move(it->second));
                it = all.erase(it);
            } else {
                ++it;
            }
        }
    };
    std::map<std::string, Tensor> probe_t, ft_t, sc_t;
    take_prefixed("probe.", probe_t);
    take_prefixed("ft.", ft_t);
    take_prefixed("sc.", sc_t);
    if (probe_t.empty() || ft_t.empty() || sc_t.empty())
        throw IoError("probe checkpoint is missing a parameter group");
    p.probe.params = ParamSet(0);
    p.probe.params.tensors() = std::move(probe_t);
    p.face_tower.params = ParamSet(0);
    p.face_tower.params.tensors() = std::move(ft_t);
    p.scorer.params = ParamSet(0);
    p.scorer.params.tensors() = std::move(sc_t);
    return p;
}

// ---- face detection: a scored grid scan ----

struct Detection {
    FaceBox box;
    float score = 0.0f;
};

// Scores every grid candidate with the probe's face/background head, keeps
// those above the threshold, and returns the largest by the standard tie
// rules.
inline std::optional<Detection> detect_face(const IdentityProbe& probe, const Tensor& image,
                                            float threshold = 0.5f) {
    if (!probe.trained) throw ContractError("detect_face: the identity probe is not trained");
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("detect_face: want a 3xHxW image, got " + dims_str(image.dims));

    std::vector<Detection> hits;
    for (const FaceBox& cand : detect_candidates(image.dim(1), image.dim(2))) {
        Graph g;
        const ParamBinder bind = frozen_binder(probe.params);
        auto feat = embedder_features(
            g, bind, g.constant(crop_resize(image, cand, probe.cfg.crop)), probe.cfg);
        const float logit = g.value(detail::probe_det_logit(g, bind, feat)).data[0];
        const float score =
            static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logit))));
        if (score > threshold) hits.push_back(Detection{cand, score});
    }
    if (hits.empty()) return std::nullopt;
    std::vector<FaceBox> boxes;
    boxes.reserve(hits.size());
    for (const Detection& h : hits) boxes.push_back(h.box);
    const FaceBox best = largest_face(boxes);
    for (const Detection& h : hits)
        if (h.box.x0 == best.x0 && h.box.y0 == best.y0 && h.box.x1 == best.x1 &&
            h.box.y1 == best.y1)
            return h;
    return hits.front();  // unreachable
}

// ---- alignment scores ----

// Crop embedding of the detected face, if any: the shared first half of
// face_alignment and of the consistency measurements.
inline std::optional<Tensor> detected_face_embedding(const EvalProbes& probes,
                                                     const Tensor& image) {
    require_trained(probes, "detected_face_embedding");
    const auto det = detect_face(probes.probe, image);
    if (!det) return std::nullopt;
    const Tensor crop = face_crop(image, det->box, kDefaultMargins, kMarginRefScale,
                                  probes.face_tower.config.crop);
    return embed_face(probes.face_tower, crop).v;
}

// Zero when no face is detected; otherwise cosine between the detected crop's
// embedding and the reference crop's embedding, both through the face tower.
inline float face_alignment(const EvalProbes& probes, const Tensor& image,
                            const Tensor& reference_crop) {
    const auto emb = detected_face_embedding(probes, image);
    if (!emb) return 0.0f;
    return cosine(*emb, embed_face(probes.face_tower, reference_crop).v);
}

inline float overall_score(float text_align, float face_align) {
    return text_align + face_align;
}

// Identity-probe confidence that the face in the image is the given class;
// zero when no face is detected.
inline float probe_identity_confidence(const EvalProbes& probes, const Tensor& image,
                                       int class_index) {
    require_trained(probes, "probe_identity_confidence");
    if (class_index < 0 || class_index >= probes.probe.cfg.n_classes)
        throw ContractError("probe_identity_confidence: class index out of range");
    const auto det = detect_face(probes.probe, image);
    if (!det) return 0.0f;
    // The probe trained on grid candidates, so it reads the detected square.
    const Tensor crop = crop_resize(image, det->box, probes.probe.cfg.crop);
    return probe_eval(probes.probe, crop).class_probs.at2(0, class_index);
}

inline std::vector<float> median_smooth3(const std::vector<float>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float a = v[i == 0 ? 0 : i - 1];
        const float b = v[i];
        const float c = v[std::min(v.size() - 1, i + 1)];
        out[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
    }
    return out;
}

// ---- the evaluation run ----

struct EvalIdentityRef {
    int id = 0;           // caller's identity index, echoed into the report
    FaceEmbedding f;      // conditioning embedding (conditioning embedder)
    Tensor ref_crop;      // reference crop for face alignment (face-tower size)
};

// Renders one canonical scene of the identity and derives both the
// conditioning embedding and the alignment reference crop from it.
inline EvalIdentityRef make_identity_ref(const IdentityParams& id, int index,
                                         const Embedder& cond, std::uint64_t seed,
                                         int canvas = 48, int min_face = 12) {
    if (!cond.trained) throw ContractError("make_identity_ref: embedder is not trained");
    Rng rng(stream_seed(seed, "ref", static_cast<std::uint64_t>(index)));
    const SceneParams sc = sample_scene(id, rng, canvas, min_face);
    auto [img, box] = render(id, sc, canvas);
    EvalIdentityRef ref;
    ref.id = index;
    ref.ref_crop = face_crop(img, box, kDefaultMargins, kMarginRefScale, cond.config.crop);
    ref.f = embed_face(cond, ref.ref_crop);
    return ref;
}

struct EvalCell {
    int identity = 0;
    int prompt = 0;
    std::uint64_t seed = 0;
    float text_align = 0.0f;
    float face_align = 0.0f;
    float mismatch_align = 0.0f;  // same image scored against another identity's reference
    float overall = 0.0f;
    bool face_found = false;
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
};

namespace detail {

inline Aggregate aggregate_of(const std::vector<double>& xs) {
    Aggregate a;
    if (xs.empty()) return a;
    for (double x : xs) a.mean += x;
    a.mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(var / static_cast<double>(xs.size()));
    return a;
}

}  // namespace detail

struct EvalReport {
    std::vector<EvalCell> cells;
    Aggregate text, face, overall_agg;
    Aggregate best_overall;        // best-of-k over seeds per (identity, prompt)
    int best_k = 0;                // seeds per (identity, prompt) group
    double mismatch_face_mean = 0.0;
    double detect_rate = 0.0;
    GuidanceWeights gw;
    int n_steps = 0;
    double wall_seconds = 0.0;
};

// Full (identity x prompt x seed) cross product, assembled in lexicographic
// order. Each generated image is scored against its own identity's reference
// and, for the specificity gap, against the next identity's reference.
inline EvalReport run_eval(const DiffusionModel& model, const ParamSet& weights,
                           const EvalProbes& probes,
                           const std::vector<EvalIdentityRef>& identities,
                           const std::vector<CaptionTokens>& prompts,
                           const std::vector<std::uint64_t>& seeds,
                           const GuidanceWeights& gw = guidance_preset("photo"),
                           int n_steps = 50) {
    require_trained(probes, "run_eval");
    if (identities.empty() || prompts.empty() || seeds.empty())
        throw ContractError("run_eval: need identities, prompts and seeds");
    const auto t_start = std::chrono::steady_clock::now();

    std::vector<Tensor> ref_embs;
    for (const EvalIdentityRef& r : identities)
        ref_embs.push_back(embed_face(probes.face_tower, r.ref_crop).v);

    EvalReport rep;
    rep.gw = gw;
    rep.n_steps = n_steps;
    rep.best_k = static_cast<int>(seeds.size());
    std::vector<double> texts, faces, overalls, mismatches;
    int found = 0;
    for (std::size_t i = 0; i < identities.size(); ++i) {
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            for (std::size_t s = 0; s < seeds.size(); ++s) {
                const std::uint64_t cell_seed =
                    stream_seed(seeds[s], "eval-cell", static_cast<std::uint64_t>(i),
                                static_cast<std::uint64_t>(p));
                const SampleResult sr =
                    sample(model, weights, prompts[p], identities[i].f, gw, n_steps, cell_seed);
                EvalCell cell;
                cell.identity = identities[i].id;
                cell.prompt = static_cast<int>(p);
                cell.seed = seeds[s];
                cell.text_align = text_alignment(probes.scorer, sr.image, prompts[p]);
                const auto emb = detected_face_embedding(probes, sr.image);
                cell.face_found = emb.has_value();
                const std::size_t other = (i + 1) % identities.size();
                if (emb) {
                    cell.face_align = cosine(*emb, ref_embs[i]);
                    cell.mismatch_align = cosine(*emb, ref_embs[other]);
                    ++found;
                }
                cell.overall = overall_score(cell.text_align, cell.face_align);
                texts.push_back(cell.text_align);
                faces.push_back(cell.face_align);
                overalls.push_back(cell.overall);
                if (identities.size() > 1) mismatches.push_back(cell.mismatch_align);
                rep.cells.push_back(cell);
            }
        }
    }
    rep.text = detail::aggregate_of(texts);
    rep.face = detail::aggregate_of(faces);
    rep.overall_agg = detail::aggregate_of(overalls);
    rep.mismatch_face_mean = mismatches.empty() ? 0.0 : detail::aggregate_of(mismatches).mean;
    rep.detect_rate = static_cast<double>(found) / static_cast<double>(rep.cells.size());

    std::vector<double> best;
    for (std::size_t i = 0; i < identities.size(); ++i) {
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            double mx = -1e30;
            for (const EvalCell& c : rep.cells)
                if (c.identity == identities[i].id && c.prompt == static_cast<int>(p))
                    mx = std::max(mx, static_cast<double>(c.overall));
            best.push_back(mx);
        }
    }
    rep.best_overall = detail::aggregate_of(best);
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rep;
}

inline void write_eval_csv(const std::filesystem::path& path, const EvalReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "identity_id,prompt_id,seed,text_align,face_align,overall\n";
    char line[160];
    for (const EvalCell& c : rep.cells) {
        std::snprintf(line, sizeof line, "%d,%d,%llu,%.6f,%.6f,%.6f\n", c.identity, c.prompt,
                      static_cast<unsigned long long>(c.seed), static_cast<double>(c.text_align),
                      static_cast<double>(c.face_align), static_cast<double>(c.overall));
        out << line;
    }
}

inline void write_eval_markdown(const std::filesystem::path& path, const EvalReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    char buf[256];
    out << "# Evaluation summary\n\n";
    std::snprintf(buf, sizeof buf, "%zu cells, %d sampling steps, w=%.2f c=%.2f a=%.2f\n\n",
                  rep.cells.size(), rep.n_steps, static_cast<double>(rep.gw.w),
                  static_cast<double>(rep.gw.c), static_cast<double>(rep.gw.a));
    out << buf;
    out << "| Aggregation | Text | Face | Overall |\n";
    out << "|---|---|---|---|\n";
    std::snprintf(buf, sizeof buf,
                  "| Average | %.3f \xc2\xb1 %.3f | %.3f \xc2\xb1 %.3f | %.3f \xc2\xb1 %.3f |\n",
                  rep.text.mean, rep.text.stddev, rep.face.mean, rep.face.stddev,
                  rep.overall_agg.mean, rep.overall_agg.stddev);
    out << buf;
    std::snprintf(buf, sizeof buf, "| Best of %d | | | %.3f \xc2\xb1 %.3f |\n", rep.best_k,
                  rep.best_overall.mean, rep.best_overall.stddev);
    out << buf;
    std::snprintf(buf, sizeof buf,
                  "\nDetection rate: %.3f\n\nMismatched-reference face alignment mean: %.3f "
                  "(gap %.3f)\n",
                  rep.detect_rate, rep.mismatch_face_mean,
                  rep.face.mean - rep.mismatch_face_mean);
    out << buf;
}

// ---- consistency across generations ----

struct ConsistencyReport {
    int n_images = 0;
    int n_detected = 0;
    std::optional<float> mean_pairwise;  // empty when fewer than two faces were found
};

// One generation per (prompt, seed) under a fixed face embedding; reports the
// mean pairwise face-embedding cosine across all detected faces.
inline ConsistencyReport consistency(const DiffusionModel& model, const ParamSet& weights,
                                     const EvalProbes& probes, const FaceEmbedding& f,
                                     const std::vector<CaptionTokens>& prompts,
                                     const std::vector<std::uint64_t>& seeds,
                                     const GuidanceWeights& gw = guidance_preset("photo"),
                                     int n_steps = 50) {
    require_trained(probes, "consistency");
    if (prompts.empty() || seeds.empty())
        throw ContractError("consistency: need prompts and seeds");
    ConsistencyReport rep;
    std::vector<Tensor> embs;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const SampleResult sr =
                sample(model, weights, prompts[p], f, gw, n_steps,
                       stream_seed(seeds[s], "consistency", static_cast<std::uint64_t>(p)));
            ++rep.n_images;
            if (auto e = detected_face_embedding(probes, sr.image)) embs.push_back(std::move(*e));
        }
    }
    rep.n_detected = static_cast<int>(embs.size());
    if (embs.size() >= 2) {
        double acc = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < embs.size(); ++i)
            for (std::size_t j = i + 1; j < embs.size(); ++j) {
                acc += cosine(embs[i], embs[j]);
                ++n;
            }
        rep.mean_pairwise = static_cast<float>(acc / n);
    }
    return rep;
}

// ---- the randomized-embedding attribute experiment ----

inline int skin_bin(float skin) {
    return std::clamp(static_cast<int>(skin * 4.0f), 0, 3);
}

struct BiasReport {
    std::array<double, 4> random_hist{};  // skin-tone bins under random embeddings
    std::array<double, 4> text_hist{};    // skin-tone bins under text-only conditioning
    int n_random = 0, n_random_detected = 0;
    int n_text = 0, n_text_detected = 0;
};

// For each prompt: n generations with a fresh mixture draw each, and n
// text-only generations; the recovered skin attribute of every detected face
// is binned into four equal bins.
inline BiasReport bias_experiment(const DiffusionModel& model, const ParamSet& weights,
                                  const EvalProbes& probes,
                                  const std::vector<CaptionTokens>& prompts, int n,
                                  const MixtureSpec& mix, std::uint64_t seed,
                                  const GuidanceWeights& gw = guidance_preset("photo"),
                                  int n_steps = 50) {
    require_trained(probes, "bias_experiment");
    if (n < 0) throw ContractError("bias_experiment: negative sample count");
    BiasReport rep;
    if (n == 0 || prompts.empty()) return rep;
    const GuidanceWeights text_gw{gw.w, 0.0f, 0.0f};

    auto probe_skin = [&](const Tensor& image) -> std::optional<float> {
        const auto det = detect_face(probes.probe, image);
        if (!det) return std::nullopt;
        const Tensor crop = crop_resize(image, det->box, probes.probe.cfg.crop);
        return probe_eval(probes.probe, crop).attrs.at2(0, 0);
    };

    for (std::size_t p = 0; p < prompts.size(); ++p) {
        for (int j = 0; j < n; ++j) {
            Rng er(stream_seed(seed, "bias-emb", static_cast<std::uint64_t>(p),
                               static_cast<std::uint64_t>(j)));
            const FaceEmbedding f = sample_random_embedding(mix, er);
            const SampleResult sr =
                sample(model, weights, prompts[p], f, gw, n_steps,
                       stream_seed(seed, "bias-img", static_cast<std::uint64_t>(p),
                                   static_cast<std::uint64_t>(j)));
            ++rep.n_random;
            if (auto skin = probe_skin(sr.image)) {
                ++rep.n_random_detected;
                rep.random_hist[static_cast<std::size_t>(skin_bin(*skin))] += 1.0;
            }

            const SampleResult st =
                sample(model, weights, prompts[p], std::nullopt, text_gw, n_steps,
                       stream_seed(seed, "bias-txt", static_cast<std::uint64_t>(p),
                                   static_cast<std::uint64_t>(j)));
            ++rep.n_text;
            if (auto skin = probe_skin(st.image)) {
                ++rep.n_text_detected;
                rep.text_hist[static_cast<std::size_t>(skin_bin(*skin))] += 1.0;
            }
        }
    }
    if (rep.n_random_detected > 0)
        for (double& v : rep.random_hist) v /= rep.n_random_detected;
    if (rep.n_text_detected > 0)
        for (double& v : rep.text_hist) v /= rep.n_text_detected;
    return rep;
}

// The attribute distribution the mixture itself induces: each component's
// weight is spread over the pool members assigned to it by nearest mean.
inline std::array<double, 4> mixture_skin_reference(const MixtureSpec& mix,
                                                    const std::vector<Tensor>& pool_embeddings,
                                                    const std::vector<float>& pool_skins) {
    if (pool_embeddings.size() != pool_skins.size() || pool_embeddings.empty())
        throw ContractError("mixture_skin_reference: pool embeddings and skins must align");
    mix.validate();
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(mix.components()));
    for (std::size_t i = 0; i < pool_embeddings.size(); ++i)
        members[static_cast<std::size_t>(nearest_component(mix, pool_embeddings[i]))].push_back(i);

    std::array<double, 4> ref{};
    double assigned = 0.0;
    for (int c = 0; c < mix.components(); ++c) {
        const auto& ms = members[static_cast<std::size_t>(c)];
        if (ms.empty()) continue;
        const double w = mix.weights[static_cast<std::size_t>(c)];
        assigned += w;
        for (std::size_t i : ms)
            ref[static_cast<std::size_t>(skin_bin(pool_skins[i]))] +=
                w / static_cast<double>(ms.size());
    }
    if (assigned <= 0.0)
        throw ContractError("mixture_skin_reference: no pool member is assigned to any component");
    for (double& v : ref) v /= assigned;
    return ref;
}

}  // namespace face0
