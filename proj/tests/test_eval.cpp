#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "face0/eval.hpp"

using namespace face0;

namespace {

FaceBox box_of(int x0, int y0, int x1, int y1, int w = 48, int h = 48) {
    return FaceBox{x0, y0, x1, y1, w, h};
}

// Full-size measurement backbone: the same shape the conditioning embedder
// uses, so the probes see faces at deployment resolution.
EmbedderConfig probe_backbone() {
    EmbedderConfig c;
    c.crop = 24;
    c.d_f = 32;
    c.c1 = 16;
    c.c2 = 24;
    c.c3 = 32;
    c.n_classes = 0;
    return c;
}

// Slimmer feature width for the evaluation image tower; verification needs
// fewer dimensions than 32-way classification.
EmbedderConfig tower_backbone() {
    EmbedderConfig c = probe_backbone();
    c.d_f = 16;
    return c;
}

// Cheap configuration for determinism and validation checks only.
EmbedderConfig tiny_backbone() {
    EmbedderConfig c;
    c.crop = 16;
    c.d_f = 16;
    c.c1 = 8;
    c.c2 = 12;
    c.c3 = 16;
    c.n_classes = 0;
    return c;
}

const std::vector<IdentityParams>& probe_world() {
    static const std::vector<IdentityParams> ids = sample_identity_set(6, 611);
    return ids;
}

const IdentityProbe& shared_probe() {
    static const IdentityProbe probe = [] {
        ProbeTrainConfig cfg;
        cfg.scenes_per_id = 20;
        cfg.epochs = 20;
        cfg.seed = 929;
        cfg.base = probe_backbone();
        return train_identity_probe(probe_world(), cfg);
    }();
    return probe;
}

const std::vector<IdentityParams>& tower_world() {
    static const std::vector<IdentityParams> ids = sample_identity_set(8, 17);
    return ids;
}

const Embedder& shared_face_tower() {
    static const Embedder e = [] {
        const LabeledCrops lc = render_identity_crops(tower_world(), 32, 24, 23, 48, 12, true);
        return pretrain_embedder(lc.crops, lc.labels, static_cast<int>(tower_world().size()), 48,
                                 23, tower_backbone());
    }();
    return e;
}

const CaptionScorer& shared_scorer() {
    static const CaptionScorer sc = [] {
        CaptionScorerTrainConfig tc;
        tc.pairs = 768;
        tc.steps = 1600;
        tc.batch = 16;
        tc.seed = 31;
        return train_caption_scorer(tower_world(), tc);
    }();
    return sc;
}

const EvalProbes& shared_probes() {
    static const EvalProbes p = [] {
        EvalProbes out;
        out.probe = shared_probe();
        out.face_tower = shared_face_tower();
        out.scorer = shared_scorer();
        return out;
    }();
    return p;
}

// ---- a miniature generator for report-level tests ----

DenoiserConfig mini_unet() {
    DenoiserConfig c;
    c.h = 8;
    c.w = 8;
    c.c1 = 3;
    c.c2 = 4;
    c.n_sin = 4;
    c.d_t = 6;
    c.d_c = 4;
    return c;
}

ProjectionConfig mini_proj() {
    ProjectionConfig c;
    c.d_f = 6;
    c.d_c = 4;
    c.k = 2;
    return c;
}

DiffusionModel mini_model(std::uint64_t seed) {
    DiffusionModel m = init_diffusion_model(seed, mini_unet(), mini_proj());
    Rng rng(stream_seed(seed, "test-head"));
    for (auto& v : m.params.at("unet.head.w").data) v = 0.05f * rng.normal_f();
    for (auto& v : m.params.at("unet.head.b").data) v = 0.05f * rng.normal_f();
    return m;
}

FaceEmbedding random_embedding(int d, std::uint64_t seed) {
    Rng rng(seed);
    return FaceEmbedding{Tensor::randn({d}, rng, 1.0f), EmbeddingSource::random};
}

std::vector<EvalIdentityRef> mini_refs(int n) {
    std::vector<EvalIdentityRef> refs;
    for (int i = 0; i < n; ++i) {
        Rng rng(stream_seed(7100, "mini-ref", static_cast<std::uint64_t>(i)));
        const IdentityParams& id = tower_world()[static_cast<std::size_t>(i)];
        const SceneParams sc = sample_scene(id, rng, 48, 12);
        auto [img, box] = render(id, sc, 48);
        EvalIdentityRef r;
        r.id = i;
        r.ref_crop = face_crop(img, box, kDefaultMargins, kMarginRefScale, 24);
        r.f = random_embedding(6, 500 + static_cast<std::uint64_t>(i));
        refs.push_back(std::move(r));
    }
    return refs;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
    if (a.tensors().size() != b.tensors().size()) return false;
    for (const auto& [name, t] : a.tensors()) {
        auto it = b.tensors().find(name);
        if (it == b.tensors().end() || !bit_equal(t, it->second)) return false;
    }
    return true;
}

// Copies the src pixels inside `region` into dst with its top-left at (ox, oy).
void paste_region(Tensor& dst, const Tensor& src, const FaceBox& region, int ox, int oy) {
    const int H = dst.dim(1), W = dst.dim(2);
    for (int c = 0; c < 3; ++c)
        for (int y = region.y0; y < region.y1; ++y)
            for (int x = region.x0; x < region.x1; ++x) {
                const int dy = oy + (y - region.y0), dx = ox + (x - region.x0);
                if (dy < 0 || dy >= H || dx < 0 || dx >= W) continue;
                dst.data[static_cast<std::size_t>((c * H + dy) * W + dx)] =
                    src.data[static_cast<std::size_t>((c * src.dim(1) + y) * src.dim(2) + x)];
            }
}

}  // namespace

TEST_CASE("iou matches hand-computed overlaps") {
    const FaceBox a = box_of(0, 0, 10, 10);
    REQUIRE(iou(a, a) == 1.0f);
    REQUIRE(iou(a, box_of(20, 20, 30, 30)) == 0.0f);
    REQUIRE(iou(a, box_of(10, 0, 20, 10)) == 0.0f);  // touching edges do not overlap
    // inter 5*10 = 50, union 100 + 100 - 50 = 150
    REQUIRE(iou(a, box_of(5, 0, 15, 10)) == Catch::Approx(50.0 / 150.0).epsilon(1e-6));
    // contained: inter 16, union 100
    REQUIRE(iou(a, box_of(2, 2, 6, 6)) == Catch::Approx(0.16).epsilon(1e-6));
    REQUIRE(iou(box_of(2, 2, 6, 6), a) == Catch::Approx(0.16).epsilon(1e-6));
}

TEST_CASE("detection grid covers every visible face size") {
    // Three geometrically spaced scales from quarter to half canvas.
    REQUIRE(detect_scales(48) == std::vector<int>{12, 17, 24});
    REQUIRE(detect_scales(8) == std::vector<int>{4});  // tiny images collapse

    const auto cands = detect_candidates(48, 48);
    REQUIRE_FALSE(cands.empty());
    bool edge_x = false, edge_y = false;
    for (const FaceBox& c : cands) {
        c.validate();
        REQUIRE(c.width() == c.height());
        edge_x = edge_x || c.x1 == 48;
        edge_y = edge_y || c.y1 == 48;
    }
    REQUIRE(edge_x);  // right and bottom edges are always scanned
    REQUIRE(edge_y);

    // Structural ceiling: every placeable face has a candidate overlapping it
    // at IoU >= 0.5, so grid geometry never caps detection below that bar.
    for (int i = 0; i < 200; ++i) {
        Rng rng(stream_seed(2468, "grid", static_cast<std::uint64_t>(i)));
        const IdentityParams& id = probe_world()[static_cast<std::size_t>(i) % probe_world().size()];
        const SceneParams sc = sample_scene(id, rng, 48, 12);
        auto [img, truth] = render(id, sc, 48);
        (void)img;
        REQUIRE(iou(best_candidate_view(truth, 48, 48), truth) >= 0.5f);
    }
}

TEST_CASE("auc_score ranks positives against negatives") {
    REQUIRE(auc_score({2.0f, 3.0f}, {0.0f, 1.0f}) == 1.0);
    REQUIRE(auc_score({0.0f, 1.0f}, {2.0f, 3.0f}) == 0.0);
    REQUIRE(auc_score({1.0f}, {1.0f}) == 0.5);
    REQUIRE(auc_score({1.0f, 3.0f}, {2.0f}) == 0.5);
    REQUIRE(auc_score({1.0f, 2.0f}, {1.0f}) == 0.75);
    REQUIRE_THROWS_AS(auc_score({}, {1.0f}), ContractError);
    REQUIRE_THROWS_AS(auc_score({1.0f}, {}), ContractError);
}

TEST_CASE("total variation distance on histograms") {
    const std::array<double, 4> p{1.0, 0.0, 0.0, 0.0};
    const std::array<double, 4> q{0.0, 1.0, 0.0, 0.0};
    REQUIRE(total_variation(p, p) == 0.0);
    REQUIRE(total_variation(p, q) == 1.0);
    REQUIRE(total_variation({0.5, 0.5, 0.0, 0.0}, {0.25, 0.25, 0.25, 0.25}) ==
            Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("median smoothing and skin binning") {
    REQUIRE(median_smooth3({1.0f, 5.0f, 1.0f}) == std::vector<float>{1.0f, 1.0f, 1.0f});
    REQUIRE(median_smooth3({1.0f, 2.0f, 3.0f}) == std::vector<float>{1.0f, 2.0f, 3.0f});
    REQUIRE(median_smooth3({4.0f}) == std::vector<float>{4.0f});
    REQUIRE(median_smooth3({3.0f, 3.0f, 0.0f, 3.0f, 3.0f}) ==
            std::vector<float>{3.0f, 3.0f, 3.0f, 3.0f, 3.0f});

    REQUIRE(skin_bin(-0.5f) == 0);
    REQUIRE(skin_bin(0.0f) == 0);
    REQUIRE(skin_bin(0.24f) == 0);
    REQUIRE(skin_bin(0.26f) == 1);
    REQUIRE(skin_bin(0.51f) == 2);
    REQUIRE(skin_bin(0.76f) == 3);
    REQUIRE(skin_bin(0.99f) == 3);
    REQUIRE(skin_bin(1.5f) == 3);
}

TEST_CASE("overall score is the exact sum of its parts") {
    REQUIRE(overall_score(0.24f, 0.72f) == Catch::Approx(0.96).margin(1e-6));
    REQUIRE(overall_score(0.23f, 0.66f) == Catch::Approx(0.89).margin(1e-6));
    REQUIRE(overall_score(0.23f, 0.0f) == 0.23f);
    for (int i = 0; i < 32; ++i) {
        const float t = -1.0f + 2.0f * static_cast<float>(i) / 31.0f;
        const float f = 1.0f - 2.0f * static_cast<float>(i) / 31.0f;
        REQUIRE(overall_score(t, f) == t + f);
    }
}

TEST_CASE("caption parsing round-trips through words") {
    const CaptionTokens c = caption_from_words("a photo of person");
    REQUIRE(c[0] == vocab::id_of("a"));
    REQUIRE(c[1] == vocab::id_of("photo"));
    REQUIRE(c[2] == vocab::id_of("of"));
    REQUIRE(c[3] == vocab::id_of("person"));
    REQUIRE(c[4] == vocab::kEnd);
    REQUIRE(c[5] == vocab::kPad);
    REQUIRE(caption_str(c) == "a photo of person");
    REQUIRE(caption_from_words("  a   photo  ")[0] == vocab::id_of("a"));
    REQUIRE(caption_from_words("")[0] == vocab::kEnd);
    REQUIRE_THROWS_AS(caption_from_words("a mystery word"), ContractError);
    REQUIRE_THROWS_AS(caption_from_words("a a a a a a a a"), ContractError);
}

TEST_CASE("rendered crop sets carry matching labels") {
    const LabeledCrops lc = render_identity_crops(probe_world(), 3, 16, 5);
    REQUIRE(lc.crops.size() == probe_world().size() * 3);
    REQUIRE(lc.labels.size() == lc.crops.size());
    REQUIRE(lc.crops[0].dims == Dims{3, 16, 16});
    REQUIRE(lc.labels.front() == 0);
    REQUIRE(lc.labels.back() == static_cast<int>(probe_world().size()) - 1);

    // Candidate views double the crops: one exact, one from the scan grid.
    const LabeledCrops cv = render_identity_crops(probe_world(), 3, 16, 5, 48, 12, true);
    REQUIRE(cv.crops.size() == 2 * lc.crops.size());
    REQUIRE(cv.labels[0] == cv.labels[1]);

    REQUIRE_THROWS_AS(render_identity_crops({}, 3, 16, 5), ContractError);
    REQUIRE_THROWS_AS(render_identity_crops(probe_world(), 0, 16, 5), ContractError);
}

TEST_CASE("identity probe learns identities and face detection") {
    const IdentityProbe& probe = shared_probe();
    INFO("heldout identity accuracy " << probe.heldout_acc << ", face/background accuracy "
                                      << probe.det_acc);
    REQUIRE(probe.trained);
    REQUIRE(probe.cfg.n_classes == 6);
    REQUIRE(probe.heldout_acc >= 0.8f);
    REQUIRE(probe.det_acc >= 0.9f);

    // Probe outputs have the documented shapes and ranges.
    const LabeledCrops lc = render_identity_crops(probe_world(), 1, 24, 999);
    const ProbeOutputs out = probe_eval(probe, lc.crops[0]);
    REQUIRE(out.class_probs.dims == Dims{1, 6});
    float sum = 0.0f;
    for (float v : out.class_probs.data) sum += v;
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-4));
    REQUIRE(out.face_score >= 0.0f);
    REQUIRE(out.face_score <= 1.0f);
    REQUIRE(out.attrs.dims == Dims{1, 8});

    // Canonically framed crops of fresh scenes classify reliably; dataset
    // manifest checks lean on this read-out.
    int canon_ok = 0;
    const int canon_n = 48;
    for (int i = 0; i < canon_n; ++i) {
        Rng rng(stream_seed(8101, "canon", static_cast<std::uint64_t>(i)));
        const int who = i % static_cast<int>(probe_world().size());
        const IdentityParams& id = probe_world()[static_cast<std::size_t>(who)];
        const SceneParams sc = sample_scene(id, rng, 48, 12);
        auto [img, box] = render(id, sc, 48);
        const Tensor crop = face_crop(img, box, kDefaultMargins, kMarginRefScale, probe.cfg.crop);
        const ProbeOutputs o = probe_eval(probe, crop);
        int best = 0;
        for (int c = 1; c < probe.cfg.n_classes; ++c)
            if (o.class_probs.at2(0, c) > o.class_probs.at2(0, best)) best = c;
        if (best == who) ++canon_ok;
    }
    INFO("canonical-crop identity correct on " << canon_ok << "/" << canon_n);
    REQUIRE(canon_ok >= 40);

    IdentityProbe untrained;
    REQUIRE_THROWS_AS(probe_eval(untrained, lc.crops[0]), ContractError);

    REQUIRE_THROWS_AS(train_identity_probe({probe_world()[0]}, ProbeTrainConfig{}),
                      ContractError);
}

TEST_CASE("probe training is deterministic") {
    ProbeTrainConfig cfg;
    cfg.scenes_per_id = 6;
    cfg.epochs = 2;
    cfg.seed = 77;
    cfg.base = tiny_backbone();
    const auto ids = sample_identity_set(4, 88);
    const IdentityProbe a = train_identity_probe(ids, cfg);
    const IdentityProbe b = train_identity_probe(ids, cfg);
    REQUIRE(params_equal(a.params, b.params));
    REQUIRE(a.heldout_acc == b.heldout_acc);
    REQUIRE(a.det_acc == b.det_acc);
}

TEST_CASE("detector recovers dataset face boxes") {
    const IdentityProbe& probe = shared_probe();
    int found = 0, good = 0;
    double iou_sum = 0.0;
    const int n = 40;
    for (int i = 0; i < n; ++i) {
        Rng rng(stream_seed(3001, "det-scene", static_cast<std::uint64_t>(i)));
        const IdentityParams& id = probe_world()[static_cast<std::size_t>(i) % probe_world().size()];
        const SceneParams sc = sample_scene(id, rng, 48, 12);
        auto [img, truth] = render(id, sc, 48);
        const auto det = detect_face(probe, img);
        if (!det) continue;
        ++found;
        const float v = iou(det->box, truth);
        iou_sum += v;
        if (v >= 0.5f) ++good;
        REQUIRE(det->score > 0.5f);
        det->box.validate();
    }
    INFO("found " << found << "/" << n << ", iou>=0.5 on " << good << ", mean iou "
                  << (found ? iou_sum / found : 0.0));
    REQUIRE(found >= 35);
    REQUIRE(static_cast<double>(good) >= 0.6 * found);
    REQUIRE(iou_sum / found >= 0.5);
}

TEST_CASE("detector rejects structureless noise") {
    const IdentityProbe& probe = shared_probe();
    int none = 0;
    for (int i = 0; i < 100; ++i) {
        Rng rng(stream_seed(4001, "noise", static_cast<std::uint64_t>(i)));
        Tensor img = Tensor::zeros({3, 48, 48});
        for (auto& v : img.data) v = rng.uniform_f(-1.0f, 1.0f);
        if (!detect_face(probe, img)) ++none;
    }
    INFO("no-detection on " << none << "/100 noise images");
    REQUIRE(none >= 95);

    REQUIRE_THROWS_AS(detect_face(probe, Tensor::zeros({48, 48})), ShapeError);
    IdentityProbe untrained;
    REQUIRE_THROWS_AS(detect_face(untrained, Tensor::zeros({3, 48, 48})), ContractError);
}

TEST_CASE("detector prefers the larger of two faces") {
    const IdentityProbe& probe = shared_probe();

    // Base scenes carry a face wide enough to claim a top-scale box.
    auto draw_big = [](std::uint64_t trial, const IdentityParams** id_out) -> SceneParams {
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng(stream_seed(5001, "pair-big", trial, attempt));
            const IdentityParams& id = probe_world()[rng.uniform_int(probe_world().size())];
            const SceneParams sc = sample_scene(id, rng, 48, 12);
            auto [img, box] = render(id, sc, 48);
            (void)img;
            if (std::max(box.width(), box.height()) >= 22) {
                *id_out = &id;
                return sc;
            }
            REQUIRE(attempt < 2000);
        }
    };

    int correct = 0;
    const int trials = 12;
    const int small_px = 11;  // below the middle scan scale, so any box the
                              // distractor passes is smaller than the base face's
    for (int i = 0; i < trials; ++i) {
        const IdentityParams* big_id = nullptr;
        const SceneParams big_sc = draw_big(static_cast<std::uint64_t>(i), &big_id);
        auto [big_img, big_box] = render(*big_id, big_sc, 48);

        // Second face: a fresh scene's face squared up and shrunk to a tile.
        Rng rng(stream_seed(5001, "pair-small", static_cast<std::uint64_t>(i)));
        const IdentityParams& small_id = probe_world()[rng.uniform_int(probe_world().size())];
        const SceneParams small_sc = sample_scene(small_id, rng, 48, 12);
        auto [small_img, small_box] = render(small_id, small_sc, 48);
        const int side = std::max(small_box.width(), small_box.height());
        const int scx = (small_box.x0 + small_box.x1) / 2, scy = (small_box.y0 + small_box.y1) / 2;
        FaceBox square = box_of(std::max(0, scx - side / 2), std::max(0, scy - side / 2), 0, 0);
        square.x1 = std::min(48, square.x0 + side);
        square.y1 = std::min(48, square.y0 + side);
        const Tensor tile = crop_resize(small_img, square, small_px);

        // Paste it into a corner clear of the base face.
        bool placed = false;
        FaceBox pasted;
        for (const auto& [ox, oy] : std::vector<std::pair<int, int>>{
                 {48 - small_px, 48 - small_px}, {0, 48 - small_px}, {48 - small_px, 0}, {0, 0}}) {
            pasted = box_of(ox, oy, ox + small_px, oy + small_px);
            if (iou(pasted, big_box) == 0.0f) {
                placed = true;
                break;
            }
        }
        REQUIRE(placed);
        Tensor composite = big_img;
        paste_region(composite, tile, box_of(0, 0, small_px, small_px), pasted.x0, pasted.y0);
        const auto det = detect_face(probe, composite);
        if (det && iou(det->box, big_box) > iou(det->box, pasted)) ++correct;
    }
    INFO("larger face chosen in " << correct << "/" << trials);
    REQUIRE(correct >= 9);
}

TEST_CASE("face alignment separates identities through detection") {
    const EvalProbes& probes = shared_probes();
    INFO("face tower heldout accuracy " << probes.face_tower.heldout_acc);
    REQUIRE(probes.face_tower.trained);
    REQUIRE(probes.face_tower.heldout_acc >= 0.85f);

    // Each triple scores one image against a same-identity reference crop and
    // a different-identity reference crop, both from unseen scenes. A missed
    // detection zeroes both sides and counts as a loss.
    int wins = 0, detected = 0;
    const int n = 500;
    for (int i = 0; i < n; ++i) {
        Rng rng(stream_seed(6001, "triple", static_cast<std::uint64_t>(i)));
        const std::size_t ia = rng.uniform_int(tower_world().size());
        std::size_t ib = rng.uniform_int(tower_world().size());
        if (ib == ia) ib = (ib + 1) % tower_world().size();
        auto ref_of = [&](const IdentityParams& id) {
            const SceneParams sc = sample_scene(id, rng, 48, 12);
            auto [img, box] = render(id, sc, 48);
            return face_crop(img, box, kDefaultMargins, kMarginRefScale,
                             probes.face_tower.config.crop);
        };
        const SceneParams sa = sample_scene(tower_world()[ia], rng, 48, 12);
        auto [img, box] = render(tower_world()[ia], sa, 48);
        (void)box;
        const float same = face_alignment(probes, img, ref_of(tower_world()[ia]));
        const float diff = face_alignment(probes, img, ref_of(tower_world()[ib]));
        if (same != 0.0f || diff != 0.0f) ++detected;
        if (same > diff) ++wins;
    }
    INFO("same-identity reference wins " << wins << "/" << n << " (detected " << detected << ")");
    REQUIRE(detected >= 430);
    REQUIRE(wins >= 370);
}

TEST_CASE("own caption outscores shuffled captions") {
    const CaptionScorer& sc = shared_scorer();
    REQUIRE(sc.trained);

    std::vector<Tensor> images;
    std::vector<CaptionTokens> captions;
    const int n = 500;
    for (int i = 0; i < n; ++i) {
        Rng rng(stream_seed(6501, "cap-pair", static_cast<std::uint64_t>(i)));
        const IdentityParams& id = tower_world()[static_cast<std::size_t>(i) % tower_world().size()];
        const SceneParams scn = sample_scene(id, rng, 48, 12);
        auto [img, box] = render(id, scn, 48);
        (void)box;
        images.push_back(std::move(img));
        captions.push_back(make_caption(scn, rng));
    }
    int wins = 0, trials = 0;
    Rng pick(stream_seed(6501, "cap-shuffle"));
    for (int i = 0; i < n; ++i) {
        std::size_t j = pick.uniform_int(static_cast<std::uint64_t>(n));
        for (int tries = 0; tries < 50 && captions[j] == captions[static_cast<std::size_t>(i)];
             ++tries)
            j = pick.uniform_int(static_cast<std::uint64_t>(n));
        if (captions[j] == captions[static_cast<std::size_t>(i)]) continue;
        ++trials;
        const float own = text_alignment(sc, images[static_cast<std::size_t>(i)],
                                         captions[static_cast<std::size_t>(i)]);
        const float other = text_alignment(sc, images[static_cast<std::size_t>(i)], captions[j]);
        REQUIRE(own >= -1.0f);
        REQUIRE(own <= 1.0f);
        if (own > other) ++wins;
    }
    INFO("own caption wins " << wins << "/" << trials);
    REQUIRE(trials >= 450);
    REQUIRE(static_cast<double>(wins) >= 0.95 * trials);
}

TEST_CASE("face alignment is zero without a face and exact against itself") {
    const EvalProbes& probes = shared_probes();
    const int tower_crop = probes.face_tower.config.crop;

    // A noise image with no detection scores exactly zero.
    bool checked_none = false;
    for (int i = 0; i < 10; ++i) {
        Rng rng(stream_seed(7001, "align-noise", static_cast<std::uint64_t>(i)));
        Tensor img = Tensor::zeros({3, 48, 48});
        for (auto& v : img.data) v = rng.uniform_f(-1.0f, 1.0f);
        if (detect_face(probes.probe, img)) continue;
        const Tensor any_ref = render_identity_crops(tower_world(), 1, tower_crop, 40).crops[0];
        REQUIRE(face_alignment(probes, img, any_ref) == 0.0f);
        checked_none = true;
        break;
    }
    REQUIRE(checked_none);

    // When the reference crop is taken from the image's own detected box, the
    // two embeddings coincide and the cosine is exactly one.
    {
        Rng rng(stream_seed(7003, "align-id", 0));
        const IdentityParams& id = probe_world()[0];
        const SceneParams scn = sample_scene(id, rng, 48, 12);
        auto [img, box] = render(id, scn, 48);
        (void)box;
        const auto det = detect_face(probes.probe, img);
        REQUIRE(det.has_value());
        const Tensor det_ref =
            face_crop(img, det->box, kDefaultMargins, kMarginRefScale, tower_crop);
        REQUIRE(face_alignment(probes, img, det_ref) >= 0.99f);
    }

    // Against its own ground-truth crop the score stays high: detected boxes
    // frame the face a little differently than the exact box does.
    int n_self = 0;
    double worst = 1.0, mean_self = 0.0;
    const int attempts = 16;
    for (int i = 0; i < attempts; ++i) {
        Rng rng(stream_seed(7002, "align-self", static_cast<std::uint64_t>(i)));
        const IdentityParams& id = probe_world()[static_cast<std::size_t>(i) % probe_world().size()];
        const SceneParams scn = sample_scene(id, rng, 48, 12);
        auto [img, box] = render(id, scn, 48);
        if (!detect_face(probes.probe, img)) continue;
        const Tensor self_ref = face_crop(img, box, kDefaultMargins, kMarginRefScale, tower_crop);
        const double v = face_alignment(probes, img, self_ref);
        worst = std::min(worst, v);
        mean_self += v;
        ++n_self;
    }
    INFO("self alignment on " << n_self << "/" << attempts << " images, worst " << worst
                              << ", mean " << (n_self ? mean_self / n_self : 0.0));
    REQUIRE(n_self >= 13);
    REQUIRE(mean_self / n_self >= 0.95);
    REQUIRE(worst >= 0.88);
}

TEST_CASE("probe identity confidence tracks the pictured identity") {
    const EvalProbes& probes = shared_probes();
    int correct = 0, measured = 0;
    for (int i = 0; i < 16; ++i) {
        Rng rng(stream_seed(7501, "conf", static_cast<std::uint64_t>(i)));
        const int who = i % static_cast<int>(probe_world().size());
        const SceneParams sc = sample_scene(probe_world()[static_cast<std::size_t>(who)], rng, 48, 12);
        auto [img, box] = render(probe_world()[static_cast<std::size_t>(who)], sc, 48);
        (void)box;
        if (!detect_face(probes.probe, img)) continue;
        ++measured;
        float best = -1.0f;
        int best_class = -1;
        for (int c = 0; c < probes.probe.cfg.n_classes; ++c) {
            const float conf = probe_identity_confidence(probes, img, c);
            if (conf > best) {
                best = conf;
                best_class = c;
            }
        }
        if (best_class == who) ++correct;
    }
    INFO("argmax identity correct on " << correct << "/" << measured);
    REQUIRE(measured >= 12);
    REQUIRE(static_cast<double>(correct) >= 0.55 * measured);

    REQUIRE_THROWS_AS(probe_identity_confidence(probes, Tensor::zeros({3, 48, 48}), -1),
                      ContractError);
    REQUIRE_THROWS_AS(probe_identity_confidence(probes, Tensor::zeros({3, 48, 48}), 99),
                      ContractError);
}

TEST_CASE("eval probes save and load bit-exactly") {
    const EvalProbes& probes = shared_probes();
    const auto dir = std::filesystem::temp_directory_path() / "face0_probe_test";
    std::filesystem::create_directories(dir);
    const auto path_a = dir / "probes.ckpt";
    const auto path_b = dir / "probes_again.ckpt";

    save_eval_probes(path_a, probes);
    const EvalProbes loaded = load_eval_probes(path_a);
    REQUIRE(params_equal(loaded.probe.params, probes.probe.params));
    REQUIRE(params_equal(loaded.face_tower.params, probes.face_tower.params));
    REQUIRE(params_equal(loaded.scorer.params, probes.scorer.params));
    REQUIRE(loaded.probe.cfg.n_classes == probes.probe.cfg.n_classes);
    REQUIRE(loaded.probe.heldout_acc == probes.probe.heldout_acc);
    REQUIRE(loaded.probe.ids.size() == probes.probe.ids.size());
    for (std::size_t i = 0; i < loaded.probe.ids.size(); ++i)
        REQUIRE(loaded.probe.ids[i].v == probes.probe.ids[i].v);
    REQUIRE(loaded.face_tower.config.crop == probes.face_tower.config.crop);
    REQUIRE(loaded.scorer.cfg.tau == probes.scorer.cfg.tau);

    save_eval_probes(path_b, loaded);
    REQUIRE(file_bytes(path_a) == file_bytes(path_b));
    REQUIRE(file_bytes(dir / "probes.json") == file_bytes(dir / "probes_again.json"));

    // A vocabulary mismatch in the sidecar is rejected.
    nlohmann::json j;
    {
        std::ifstream in(dir / "probes.json");
        in >> j;
    }
    j["vocab"][2] = "mystery";
    {
        std::ofstream out(dir / "probes.json", std::ios::trunc);
        out << j.dump(1) << '\n';
    }
    REQUIRE_THROWS_AS(load_eval_probes(path_a), ContractError);

    REQUIRE_THROWS_WITH(load_eval_probes(dir / "missing.ckpt"),
                        Catch::Matchers::ContainsSubstring("train-probes"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation run fills every cell deterministically") {
    const EvalProbes& probes = shared_probes();
    const DiffusionModel model = mini_model(31);
    const auto refs = mini_refs(2);
    const std::vector<CaptionTokens> prompts = {caption_from_words("a photo of person"),
                                                caption_from_words("a sketch of face")};
    const std::vector<std::uint64_t> seeds = {11, 12};

    const auto before = probes.probe.params;
    const EvalReport rep =
        run_eval(model, model.params, probes, refs, prompts, seeds, guidance_preset("photo"), 4);
    REQUIRE(params_equal(before, probes.probe.params));

    REQUIRE(rep.cells.size() == 8);
    REQUIRE(rep.best_k == 2);
    std::size_t idx = 0;
    for (int i = 0; i < 2; ++i)
        for (int p = 0; p < 2; ++p)
            for (int s = 0; s < 2; ++s) {
                const EvalCell& c = rep.cells[idx++];
                REQUIRE(c.identity == i);
                REQUIRE(c.prompt == p);
                REQUIRE(c.seed == seeds[static_cast<std::size_t>(s)]);
                REQUIRE(c.overall == c.text_align + c.face_align);
                if (!c.face_found) REQUIRE(c.face_align == 0.0f);
            }
    REQUIRE(rep.best_overall.mean >= rep.overall_agg.mean - 1e-12);
    REQUIRE(rep.detect_rate >= 0.0);
    REQUIRE(rep.detect_rate <= 1.0);
    REQUIRE(rep.wall_seconds > 0.0);

    const EvalReport again =
        run_eval(model, model.params, probes, refs, prompts, seeds, guidance_preset("photo"), 4);
    REQUIRE(again.cells.size() == rep.cells.size());
    for (std::size_t i = 0; i < rep.cells.size(); ++i) {
        REQUIRE(again.cells[i].text_align == rep.cells[i].text_align);
        REQUIRE(again.cells[i].face_align == rep.cells[i].face_align);
        REQUIRE(again.cells[i].overall == rep.cells[i].overall);
    }

    const auto dir = std::filesystem::temp_directory_path() / "face0_eval_report";
    std::filesystem::create_directories(dir);
    write_eval_csv(dir / "cells.csv", rep);
    write_eval_markdown(dir / "summary.md", rep);
    std::ifstream csv(dir / "cells.csv");
    std::string line;
    int lines = 0;
    bool header_ok = false;
    while (std::getline(csv, line)) {
        if (lines == 0) header_ok = line == "identity_id,prompt_id,seed,text_align,face_align,overall";
        ++lines;
    }
    REQUIRE(header_ok);
    REQUIRE(lines == 9);
    const std::string md = file_bytes(dir / "summary.md");
    REQUIRE(md.find("Detection rate") != std::string::npos);
    REQUIRE(md.find("Best of 2") != std::string::npos);
    std::filesystem::remove_all(dir);

    REQUIRE_THROWS_AS(
        run_eval(model, model.params, probes, {}, prompts, seeds, guidance_preset("photo"), 4),
        ContractError);
    REQUIRE_THROWS_AS(
        run_eval(model, model.params, probes, refs, {}, seeds, guidance_preset("photo"), 4),
        ContractError);
    REQUIRE_THROWS_AS(
        run_eval(model, model.params, probes, refs, prompts, {}, guidance_preset("photo"), 4),
        ContractError);
}

TEST_CASE("consistency over generations") {
    const EvalProbes& probes = shared_probes();
    const DiffusionModel model = mini_model(32);
    const FaceEmbedding f = random_embedding(6, 99);
    const std::vector<CaptionTokens> one_prompt = {caption_from_words("a photo of person")};

    // One generation can never produce a pairwise score.
    const ConsistencyReport single =
        consistency(model, model.params, probes, f, one_prompt, {5}, guidance_preset("photo"), 4);
    REQUIRE(single.n_images == 1);
    REQUIRE_FALSE(single.mean_pairwise.has_value());

    const std::vector<CaptionTokens> prompts = {caption_from_words("a photo of person"),
                                                caption_from_words("a dark face")};
    const ConsistencyReport a =
        consistency(model, model.params, probes, f, prompts, {5, 6}, guidance_preset("photo"), 4);
    const ConsistencyReport b =
        consistency(model, model.params, probes, f, prompts, {5, 6}, guidance_preset("photo"), 4);
    REQUIRE(a.n_images == 4);
    REQUIRE(a.n_images == b.n_images);
    REQUIRE(a.n_detected == b.n_detected);
    REQUIRE(a.mean_pairwise.has_value() == b.mean_pairwise.has_value());
    if (a.mean_pairwise) REQUIRE(*a.mean_pairwise == *b.mean_pairwise);

    REQUIRE_THROWS_AS(
        consistency(model, model.params, probes, f, {}, {5}, guidance_preset("photo"), 4),
        ContractError);
}

TEST_CASE("bias experiment handles empty and repeated runs") {
    const EvalProbes& probes = shared_probes();
    const DiffusionModel model = mini_model(33);

    MixtureSpec mix;
    mix.weights = {0.6f, 0.4f};
    Rng mr(414);
    mix.means = {Tensor::randn({6}, mr, 1.0f), Tensor::randn({6}, mr, 1.0f)};
    mix.stddevs = {Tensor::full({6}, 0.05f), Tensor::full({6}, 0.05f)};
    const std::vector<CaptionTokens> prompts = {caption_from_words("a photo of person")};

    const BiasReport empty =
        bias_experiment(model, model.params, probes, prompts, 0, mix, 1, guidance_preset("photo"), 4);
    REQUIRE(empty.n_random == 0);
    REQUIRE(empty.n_text == 0);
    for (double v : empty.random_hist) REQUIRE(v == 0.0);
    for (double v : empty.text_hist) REQUIRE(v == 0.0);

    const BiasReport a =
        bias_experiment(model, model.params, probes, prompts, 1, mix, 7, guidance_preset("photo"), 4);
    const BiasReport b =
        bias_experiment(model, model.params, probes, prompts, 1, mix, 7, guidance_preset("photo"), 4);
    REQUIRE(a.n_random == 1);
    REQUIRE(a.n_text == 1);
    REQUIRE(a.n_random_detected == b.n_random_detected);
    REQUIRE(a.n_text_detected == b.n_text_detected);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(a.random_hist[i] == b.random_hist[i]);
        REQUIRE(a.text_hist[i] == b.text_hist[i]);
    }

    REQUIRE_THROWS_AS(
        bias_experiment(model, model.params, probes, prompts, -1, mix, 1, guidance_preset("photo"), 4),
        ContractError);
}

TEST_CASE("mixture reference spreads component weight across the pool") {
    MixtureSpec mix;
    mix.weights = {0.7f, 0.3f};
    mix.means = {Tensor::full({2}, 0.0f), Tensor::full({2}, 10.0f)};
    mix.stddevs = {Tensor::full({2}, 1.0f), Tensor::full({2}, 1.0f)};

    const std::vector<Tensor> pool = {Tensor({2}, {0.0f, 0.0f}), Tensor({2}, {0.1f, 0.0f}),
                                      Tensor({2}, {10.0f, 10.0f})};
    const std::vector<float> skins = {0.1f, 0.3f, 0.9f};
    const auto ref = mixture_skin_reference(mix, pool, skins);
    REQUIRE(ref[0] == Catch::Approx(0.35).margin(1e-9));
    REQUIRE(ref[1] == Catch::Approx(0.35).margin(1e-9));
    REQUIRE(ref[2] == 0.0);
    REQUIRE(ref[3] == Catch::Approx(0.30).margin(1e-9));
    REQUIRE(total_variation(ref, ref) == 0.0);

    // A component with no pool members renormalizes over the rest.
    const std::vector<Tensor> near_only = {Tensor({2}, {0.0f, 0.0f}), Tensor({2}, {0.1f, 0.0f})};
    const std::vector<float> skins2 = {0.1f, 0.3f};
    const auto ref2 = mixture_skin_reference(mix, near_only, skins2);
    REQUIRE(ref2[0] == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(ref2[1] == Catch::Approx(0.5).margin(1e-9));

    REQUIRE_THROWS_AS(mixture_skin_reference(mix, pool, skins2), ContractError);
    REQUIRE_THROWS_AS(mixture_skin_reference(mix, {}, {}), ContractError);
}

TEST_CASE("caption scorer training is deterministic") {
    CaptionScorerTrainConfig tc;
    tc.pairs = 32;
    tc.steps = 20;
    tc.batch = 8;
    tc.seed = 55;
    const CaptionScorer a = train_caption_scorer(tower_world(), tc);
    const CaptionScorer b = train_caption_scorer(tower_world(), tc);
    REQUIRE(params_equal(a.params, b.params));

    REQUIRE_THROWS_AS(train_caption_scorer({}, tc), ContractError);
    CaptionScorerTrainConfig bad = tc;
    bad.batch = 1;
    REQUIRE_THROWS_AS(train_caption_scorer(tower_world(), bad), ContractError);

    CaptionScorer untrained;
    REQUIRE_THROWS_AS(text_alignment(untrained, Tensor::zeros({3, 48, 48}), padding_caption()),
                      ContractError);
}

TEST_CASE("identity references come from the conditioning embedder") {
    const Embedder& tower = shared_face_tower();
    const EvalIdentityRef ref = make_identity_ref(tower_world()[0], 0, tower, 321);
    REQUIRE(ref.id == 0);
    REQUIRE(ref.ref_crop.dims == Dims{3, 24, 24});
    REQUIRE(ref.f.v.dims == Dims{16});
    REQUIRE(ref.f.source == EmbeddingSource::computed);

    const EvalIdentityRef again = make_identity_ref(tower_world()[0], 0, tower, 321);
    REQUIRE(bit_equal(ref.f.v, again.f.v));
    REQUIRE(bit_equal(ref.ref_crop, again.ref_crop));

    Embedder untrained;
    REQUIRE_THROWS_AS(make_identity_ref(tower_world()[0], 0, untrained, 321), ContractError);
}
