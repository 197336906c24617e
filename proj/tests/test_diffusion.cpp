#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "face0/diffusion.hpp"
#include "face0/gradcheck.hpp"

using namespace face0;

namespace {

// t such that alpha(t) = cos(t*pi/2) hits the requested value.
double t_for_alpha(double alpha) { return std::acos(alpha) / 1.57079632679489661923; }

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

Embedder mini_embedder() {
    Embedder e;
    e.config = EmbedderConfig{8, 6, 2, 3, 4, 2};
    e.params = ParamSet(404);
    init_embedder_params(e.params, e.config);
    e.trained = true;
    e.heldout_acc = 1.0f;
    return e;
}

DiffusionModel mini_model(std::uint64_t seed, bool live_head) {
    DiffusionModel m = init_diffusion_model(seed, mini_unet(), mini_proj());
    if (live_head) {
        Rng rng(stream_seed(seed, "test-head"));
        for (auto& v : m.params.at("unet.head.w").data) v = 0.05f * rng.normal_f();
        for (auto& v : m.params.at("unet.head.b").data) v = 0.05f * rng.normal_f();
    }
    return m;
}

std::vector<TrainingExample> mini_examples(int n, std::uint64_t seed) {
    std::vector<TrainingExample> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        TrainingExample ex;
        ex.record_id = i;
        ex.image = Tensor::zeros({3, 8, 8});
        for (auto& v : ex.image.data) v = rng.uniform_f(-1.0f, 1.0f);
        ex.box = FaceBox{1, 1, 7, 7, 8, 8};
        for (auto& t : ex.caption) t = static_cast<int>(rng.uniform_int(vocab::kSize));
        out.push_back(std::move(ex));
    }
    return out;
}

Tensor randn_like(Dims dims, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(std::move(dims), rng, 1.0f);
}

}  // namespace

TEST_CASE("schedule is variance preserving with exact boundaries") {
    REQUIRE(schedule_eval(0.0).alpha == 1.0f);
    REQUIRE(schedule_eval(0.0).sigma == 0.0f);
    REQUIRE(schedule_eval(1.0).alpha == 0.0f);
    REQUIRE(schedule_eval(1.0).sigma == 1.0f);

    float prev_alpha = 2.0f;
    for (int i = 0; i <= 1000; ++i) {
        const double t = static_cast<double>(i) / 1000.0;
        const SchedulePoint p = schedule_eval(t);
        const double vp = static_cast<double>(p.alpha) * p.alpha +
                          static_cast<double>(p.sigma) * p.sigma;
        REQUIRE(std::abs(vp - 1.0) <= 1e-6);
        REQUIRE(p.alpha <= prev_alpha);
        REQUIRE(p.w == 1.0f);
        prev_alpha = p.alpha;
    }

    REQUIRE(schedule_eval(0.9999999).alpha == Catch::Approx(1e-4).margin(1e-9));
    REQUIRE(schedule_eval(1e-9).alpha == Catch::Approx(1.0 - 1e-4).margin(1e-6));
    REQUIRE_THROWS_AS(schedule_eval(-0.01), ContractError);
    REQUIRE_THROWS_AS(schedule_eval(1.01), ContractError);
}

TEST_CASE("add_noise mixes signal and noise by the schedule") {
    const Tensor x0({1}, {2.0f});
    const Tensor eps({1}, {1.0f});
    const LatentState z = add_noise(x0, t_for_alpha(0.8), eps);
    REQUIRE(z.z.data[0] == Catch::Approx(2.2).margin(1e-5));

    REQUIRE(bit_equal(add_noise(x0, 0.0, eps).z, x0));
    REQUIRE(bit_equal(add_noise(x0, 1.0, eps).z, eps));
    REQUIRE_THROWS_AS(add_noise(x0, 0.5, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("ddim_step reconstructs and renoises") {
    const double t = t_for_alpha(0.8);
    LatentState state{Tensor({1}, {1.0f}), static_cast<float>(t)};
    const Tensor eps({1}, {0.5f});

    const LatentState out = ddim_step(state, eps, 0.0);
    REQUIRE(out.z.data[0] == Catch::Approx(0.875).margin(1e-5));
    REQUIRE(out.t == 0.0f);

    // The reconstruction clamp engages on wild latents.
    LatentState wild{Tensor({1}, {10.0f}), static_cast<float>(t)};
    const LatentState clamped = ddim_step(wild, Tensor({1}, {0.0f}), 0.0);
    REQUIRE(clamped.z.data[0] == Catch::Approx(1.5).margin(1e-5));

    REQUIRE_THROWS_AS(ddim_step(state, eps, t), ContractError);
    REQUIRE_THROWS_AS(ddim_step(state, eps, 0.9), ContractError);
}

TEST_CASE("chained ddim steps with a fixed prediction compose") {
    Rng rng(12);
    Tensor z0 = Tensor::randn({3, 4, 4}, rng, 0.3f);
    Tensor eps = Tensor::randn({3, 4, 4}, rng, 0.3f);

    LatentState direct{z0, 0.9f};
    const LatentState one = ddim_step(direct, eps, 0.1);

    LatentState via{z0, 0.9f};
    const LatentState half = ddim_step(via, eps, 0.5);
    const LatentState two = ddim_step(half, eps, 0.1);
    REQUIRE(max_abs_diff(one.z, two.z) < 1e-3f);
}

TEST_CASE("sample_times spans 1 to 0") {
    const auto ts = sample_times(4);
    REQUIRE(ts.size() == 5);
    REQUIRE(ts.front() == 1.0);
    REQUIRE(ts.back() == 0.0);
    REQUIRE(ts[2] == 0.5);
    REQUIRE_THROWS_AS(sample_times(0), ContractError);
}

TEST_CASE("cfg_combine reproduces the scalar oracle") {
    const Tensor unc({1}, {0.0f});
    const Tensor text({1}, {3.0f});
    const Tensor face({1}, {2.0f});
    const Tensor both({1}, {1.0f});

    const CfgResult r = cfg_combine(unc, text, face, both, GuidanceWeights{7.5f, 0.4f, 0.0f});
    REQUIRE(r.combined.data[0] == Catch::Approx(2.2).margin(1e-5));
    REQUIRE(r.guided.data[0] == Catch::Approx(16.5).margin(1e-4));
}

TEST_CASE("cfg_combine parameter boundaries select single terms") {
    const Tensor unc = randn_like({8}, 1);
    const Tensor text = randn_like({8}, 2);
    const Tensor face = randn_like({8}, 3);
    const Tensor both = randn_like({8}, 4);

    REQUIRE(bit_equal(cfg_combine(unc, text, face, both, {2.0f, 1.0f, 0.0f}).combined, both));
    REQUIRE(bit_equal(cfg_combine(unc, text, face, both, {2.0f, 0.0f, 1.0f}).combined, face));
    REQUIRE(bit_equal(cfg_combine(unc, text, face, both, {2.0f, 0.0f, 0.0f}).combined, text));

    // w=1 needs no unconditioned pass at all.
    const CfgResult no_unc = cfg_combine(Tensor(), text, face, both, {1.0f, 1.0f, 0.0f});
    REQUIRE(bit_equal(no_unc.guided, both));
}

TEST_CASE("cfg_combine with c=1 matches two-term guidance bit for bit") {
    const Tensor unc = randn_like({64}, 5);
    const Tensor both = randn_like({64}, 6);
    const float w = 7.5f;

    const CfgResult r = cfg_combine(unc, Tensor(), Tensor(), both, {w, 1.0f, 0.0f});
    Tensor ref = Tensor::zeros({64});
    for (std::size_t i = 0; i < ref.numel(); ++i)
        ref.data[i] = w * both.data[i] + (1.0f - w) * unc.data[i];
    REQUIRE(bit_equal(r.guided, ref));
}

TEST_CASE("cfg_combine is linear and validates its inputs") {
    const GuidanceWeights gw{7.5f, 0.3f, 0.4f};
    const Tensor u1 = randn_like({16}, 7), t1 = randn_like({16}, 8);
    const Tensor f1 = randn_like({16}, 9), b1 = randn_like({16}, 10);
    const Tensor u2 = randn_like({16}, 11), t2 = randn_like({16}, 12);
    const Tensor f2 = randn_like({16}, 13), b2 = randn_like({16}, 14);

    auto scale_t = [](const Tensor& t, float s) {
        Tensor out = t;
        for (auto& v : out.data) v *= s;
        return out;
    };
    auto add_t = [](const Tensor& a, const Tensor& b) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
        return out;
    };

    const Tensor g1 = cfg_combine(u1, t1, f1, b1, gw).guided;
    const Tensor homog =
        cfg_combine(scale_t(u1, 2.5f), scale_t(t1, 2.5f), scale_t(f1, 2.5f), scale_t(b1, 2.5f), gw)
            .guided;
    const Tensor g2 = cfg_combine(u2, t2, f2, b2, gw).guided;
    const Tensor addit =
        cfg_combine(add_t(u1, u2), add_t(t1, t2), add_t(f1, f2), add_t(b1, b2), gw).guided;
    // Tolerance is relative to the magnitudes flowing through the weighted
    // sum, since the output itself may cancel to near zero.
    auto flow = [&](std::size_t i) {
        return 1.0f + std::abs(gw.w) * (std::abs(b1.data[i]) + std::abs(b2.data[i]) +
                                        std::abs(f1.data[i]) + std::abs(f2.data[i]) +
                                        std::abs(t1.data[i]) + std::abs(t2.data[i])) +
               std::abs(1.0f - gw.w) * (std::abs(u1.data[i]) + std::abs(u2.data[i]));
    };
    for (std::size_t i = 0; i < g1.numel(); ++i) {
        REQUIRE(std::abs(homog.data[i] - 2.5f * g1.data[i]) <= 1e-6f * flow(i));
        REQUIRE(std::abs(addit.data[i] - (g1.data[i] + g2.data[i])) <= 1e-6f * flow(i));
    }

    REQUIRE_THROWS_AS(cfg_combine(u1, Tensor(), f1, b1, gw), ContractError);  // text required
    REQUIRE_THROWS_AS(cfg_combine(u1, t1, f1, Tensor::zeros({4}), gw), ShapeError);
    Tensor inf_unc = u1;
    inf_unc.data[0] = std::numeric_limits<float>::infinity();
    REQUIRE_THROWS_AS(cfg_combine(inf_unc, t1, f1, b1, gw), NumericError);
}

TEST_CASE("guidance presets encode the three published settings") {
    const GuidanceWeights photo = guidance_preset("photo");
    REQUIRE(photo.w == 7.5f);
    REQUIRE(photo.c == 1.0f);
    const GuidanceWeights art = guidance_preset("artistic");
    REQUIRE(art.c == 0.55f);
    REQUIRE(art.a == 0.0f);
    const GuidanceWeights ext = guidance_preset("extreme-style");
    REQUIRE(ext.c == 1.4f);
    REQUIRE(ext.a == 1.0f);
    REQUIRE_THROWS_AS(guidance_preset("vivid"), ContractError);
}

TEST_CASE("an untrained denoiser predicts zero noise deterministically") {
    const DiffusionModel m = mini_model(3, false);
    const Tensor z = randn_like({3, 8, 8}, 20);
    const Tensor ctx = randn_like({8, 4}, 21);
    const Tensor e1 = denoise(m.params, m.unet, z, 0.4, ctx);
    REQUIRE(e1.dims == z.dims);
    for (float v : e1.data) REQUIRE(v == 0.0f);  // zero-initialized head

    const DiffusionModel live = mini_model(3, true);
    const Tensor e2 = denoise(live.params, live.unet, z, 0.4, ctx);
    const Tensor e3 = denoise(live.params, live.unet, z, 0.4, ctx);
    REQUIRE(bit_equal(e2, e3));
    bool any = false;
    for (float v : e2.data) any = any || v != 0.0f;
    REQUIRE(any);

    REQUIRE_THROWS_AS(denoise(live.params, live.unet, randn_like({3, 4, 4}, 22), 0.4, ctx),
                      ShapeError);
    REQUIRE_THROWS_AS(denoise(live.params, live.unet, z, 0.4, randn_like({8, 5}, 23)),
                      ShapeError);
}

TEST_CASE("a tiny cross-attention block passes the gradient check") {
    ParamSet p(31);
    const int ch = 3, d_c = 4;
    p.add_uniform("unet.tiny.q", {ch, ch}, ch);
    p.add_uniform("unet.tiny.k", {d_c, ch}, d_c);
    p.add_uniform("unet.tiny.v", {d_c, ch}, d_c);
    p.add_uniform("unet.tiny.o", {ch, ch}, ch);
    p.add_tensor("unet.tiny.ln.g", Tensor::full({ch}, 1.0f));
    p.add_zeros("unet.tiny.ln.b", {ch});
    auto params = p.tensors();
    params["x"] = randn_like({ch, 2, 2}, 30);
    params["ctx"] = randn_like({2, d_c}, 31);
    const Tensor target = randn_like({ch, 2, 2}, 32);

    auto builder = [&](Graph& g, const std::map<std::string, Tensor>& ps) {
        ParamBinder bind = [&](Graph& gg, const std::string& name) {
            return gg.param(name, ps.at(name));
        };
        auto out = detail::cross_attention(g, bind, "tiny", g.param("x", ps.at("x")),
                                           g.param("ctx", ps.at("ctx")), ch, 2, 2);
        return g.mse(out, g.constant(target));
    };
    const GradCheckReport rep = grad_check(builder, params);
    INFO(rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic << " fd "
                         << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
}

TEST_CASE("denoiser gradients w.r.t. parameters and context match finite differences") {
    const DiffusionModel m = mini_model(6, true);
    auto params = m.params.tensors();
    params["ctx"] = randn_like({8, 4}, 40);
    const Tensor z = randn_like({3, 8, 8}, 41);

    auto builder = [&](Graph& g, const std::map<std::string, Tensor>& ps) {
        ParamBinder bind = [&](Graph& gg, const std::string& name) {
            return gg.param(name, ps.at(name));
        };
        return g.mean(denoise_graph(g, bind, m.unet, g.constant(z), 0.37, g.param("ctx", ps.at("ctx"))));
    };
    const GradCheckReport rep = grad_check(builder, params);
    INFO(rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic << " fd "
                         << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
}

TEST_CASE("training loss starts near one and is invariant to batch order") {
    const DiffusionModel m = mini_model(9, false);
    const Embedder emb = mini_embedder();
    const auto data = mini_examples(6, 50);
    NoiseLossOptions opt;

    std::vector<const TrainingExample*> fwd{&data[0], &data[1], &data[2], &data[3]};
    std::vector<const TrainingExample*> rev{&data[3], &data[0], &data[2], &data[1]};
    const float l1 = training_loss(m, emb, fwd, opt, 77, 5);
    const float l2 = training_loss(m, emb, rev, opt, 77, 5);
    REQUIRE(l1 == l2);
    REQUIRE(l1 == Catch::Approx(1.0).margin(0.25));  // zero model vs unit-normal noise

    REQUIRE(training_loss(m, emb, fwd, opt, 77, 5) == l1);
    REQUIRE(training_loss(m, emb, fwd, opt, 77, 6) != l1);

    Embedder raw = mini_embedder();
    raw.trained = false;
    REQUIRE_THROWS_AS(training_loss(m, raw, fwd, opt, 77, 5), ContractError);
    REQUIRE_THROWS_AS(training_loss(m, emb, {}, opt, 77, 5), ContractError);
}

TEST_CASE("face dropout steers gradients away from the projection") {
    const DiffusionModel m = mini_model(10, true);
    const Embedder emb = mini_embedder();
    const auto data = mini_examples(3, 51);
    std::vector<const TrainingExample*> batch{&data[0], &data[1], &data[2]};

    auto grad_norm_of = [&](double p_face) {
        NoiseLossOptions opt;
        opt.p_face = p_face;
        opt.p_text = 0.0;
        Graph g;
        auto loss = training_loss_graph(g, m, emb, batch, opt, 78, 0);
        g.backward(loss);
        auto grads = g.named_grads();
        double norm = 0.0;
        auto it = grads.find("proj.l1.w");
        if (it != grads.end())
            for (float v : it->second.data) norm += std::abs(v);
        return norm;
    };
    REQUIRE(grad_norm_of(1.0) == 0.0);
    REQUIRE(grad_norm_of(0.0) > 0.0);
}

TEST_CASE("training loss gradients match finite differences end to end") {
    const DiffusionModel m = mini_model(11, true);
    const Embedder emb = mini_embedder();
    const auto data = mini_examples(2, 52);
    std::vector<const TrainingExample*> batch{&data[0], &data[1]};
    NoiseLossOptions opt;
    opt.p_face = 0.0;  // keep the projection in the graph
    opt.p_text = 0.0;

    auto params = m.params.tensors();
    auto builder = [&](Graph& g, const std::map<std::string, Tensor>& ps) {
        DiffusionModel probe;
        probe.unet = m.unet;
        probe.proj = m.proj;
        probe.token_table = m.token_table;
        probe.params = ParamSet(0);
        probe.params.tensors() = ps;
        return training_loss_graph(g, probe, emb, batch, opt, 79, 3);
    };
    // A smaller step keeps the centered difference off ReLU kinks.
    const GradCheckReport rep = grad_check(builder, params, 3e-4f);
    INFO(rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic << " fd "
                         << rep.numeric);
    REQUIRE(rep.max_rel_err < 1e-3);
}

TEST_CASE("short training runs are deterministic and freeze what must stay frozen") {
    const Embedder emb = mini_embedder();
    const auto data = mini_examples(8, 53);
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch = 2;
    cfg.checkpoint_every = 0;
    cfg.log_every = 1000;

    DiffusionModel m1 = mini_model(12, false);
    const Tensor table_before = m1.token_table;
    const auto emb_before = emb.params.tensors();
    const TrainResult r1 = train(m1, emb, data, cfg);
    REQUIRE(r1.losses.size() == 5);
    REQUIRE(bit_equal(m1.token_table, table_before));
    for (const auto& [name, t] : emb.params.tensors()) REQUIRE(bit_equal(t, emb_before.at(name)));

    DiffusionModel m2 = mini_model(12, false);
    const TrainResult r2 = train(m2, emb, data, cfg);
    REQUIRE(r1.losses == r2.losses);
    for (const auto& [name, t] : m1.params.tensors())
        REQUIRE(bit_equal(t, m2.params.tensors().at(name)));
    for (const auto& [name, t] : r1.ema.tensors())
        REQUIRE(bit_equal(t, r2.ema.tensors().at(name)));

    // EMA stays close to the live weights but is not identical after updates.
    bool ema_differs = false;
    for (const auto& [name, t] : r1.ema.tensors())
        if (!bit_equal(t, m1.params.tensors().at(name))) ema_differs = true;
    REQUIRE(ema_differs);
}

TEST_CASE("diffusion checkpoints round-trip every tensor and the config") {
    namespace fs = std::filesystem;
    const Embedder emb = mini_embedder();
    const auto data = mini_examples(8, 54);
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    cfg.checkpoint_every = 2;
    cfg.log_every = 1000;
    const fs::path dir = fs::temp_directory_path() / "face0_ckpt_test";
    fs::create_directories(dir);

    DiffusionModel m = mini_model(13, false);
    const TrainResult r = train(m, emb, data, cfg, dir);
    const fs::path ckpt = dir / "checkpoint.ckpt";
    REQUIRE(fs::exists(ckpt));

    const DiffusionCheckpoint back = load_diffusion_checkpoint(ckpt);
    REQUIRE(back.step == 3);
    REQUIRE(back.adam_steps == 3);
    REQUIRE(back.model.unet.h == 8);
    REQUIRE(back.model.proj.k == 2);
    REQUIRE(bit_equal(back.model.token_table, m.token_table));
    for (const auto& [name, t] : m.params.tensors())
        REQUIRE(bit_equal(t, back.model.params.tensors().at(name)));
    for (const auto& [name, t] : r.ema.tensors())
        REQUIRE(bit_equal(t, back.ema.tensors().at(name)));
    REQUIRE(back.adam_m.size() == m.params.tensors().size());

    // A checkpoint whose vocabulary disagrees with this build is rejected.
    const fs::path side = dir / "checkpoint.json";
    nlohmann::json j;
    {
        std::ifstream in(side);
        in >> j;
    }
    j["vocab"][2] = "mystery";
    {
        std::ofstream out(side, std::ios::trunc);
        out << j.dump(1);
    }
    REQUIRE_THROWS_AS(load_diffusion_checkpoint(ckpt), ContractError);
    fs::remove_all(dir);
}

TEST_CASE("sampling is deterministic and skips exactly the zero-weight passes") {
    const DiffusionModel m = mini_model(14, true);
    ParamSet weights(0);
    weights.tensors() = m.params.tensors();
    CaptionTokens prompt{};
    prompt[0] = vocab::id_of("photo");
    prompt[5] = vocab::kEnd;
    Rng rng(70);
    const FaceEmbedding face{Tensor::randn({6}, rng, 1.0f), EmbeddingSource::computed};

    const SampleResult a = sample(m, weights, prompt, face, guidance_preset("photo"), 4, 9);
    REQUIRE(a.image.dims == Dims{3, 8, 8});
    for (float v : a.image.data) {
        REQUIRE(v >= -1.0f);
        REQUIRE(v <= 1.0f);
    }
    REQUIRE(a.denoiser_passes == 2 * 4);  // c=1: joint + unconditioned per step

    const SampleResult b = sample(m, weights, prompt, face, guidance_preset("photo"), 4, 9);
    REQUIRE(bit_equal(a.image, b.image));
    const SampleResult c = sample(m, weights, prompt, face, guidance_preset("photo"), 4, 10);
    REQUIRE_FALSE(bit_equal(a.image, c.image));

    REQUIRE(sample(m, weights, prompt, face, guidance_preset("artistic"), 2, 9).denoiser_passes ==
            3 * 2);
    REQUIRE(sample(m, weights, prompt, face, guidance_preset("extreme-style"), 2, 9)
                .denoiser_passes == 3 * 2);
    REQUIRE(sample(m, weights, prompt, face, GuidanceWeights{1.0f, 1.0f, 0.0f}, 2, 9)
                .denoiser_passes == 1 * 2);

    // Text-only sampling needs no face; face-needing weights without one fail.
    const SampleResult text_only =
        sample(m, weights, prompt, std::nullopt, GuidanceWeights{7.5f, 0.0f, 0.0f}, 2, 9);
    REQUIRE(text_only.denoiser_passes == 2 * 2);
    REQUIRE_THROWS_WITH(sample(m, weights, prompt, std::nullopt, guidance_preset("photo"), 2, 9),
                        Catch::Matchers::ContainsSubstring("c="));
    REQUIRE_THROWS_WITH(
        sample(m, weights, prompt, std::nullopt, GuidanceWeights{7.5f, 0.0f, 1.0f}, 2, 9),
        Catch::Matchers::ContainsSubstring("a="));
}

TEST_CASE("different presets render different images from the same seed") {
    const DiffusionModel m = mini_model(15, true);
    ParamSet weights(0);
    weights.tensors() = m.params.tensors();
    CaptionTokens prompt{};
    prompt[0] = vocab::id_of("painting");
    Rng rng(71);
    const FaceEmbedding face{Tensor::randn({6}, rng, 1.0f), EmbeddingSource::computed};

    const SampleResult photo = sample(m, weights, prompt, face, guidance_preset("photo"), 4, 33);
    const SampleResult art = sample(m, weights, prompt, face, guidance_preset("artistic"), 4, 33);
    REQUIRE_FALSE(bit_equal(photo.image, art.image));
}
