#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "face0/denoiser.hpp"
#include "face0/face_pipeline.hpp"
#include "face0/graph.hpp"
#include "face0/optim.hpp"
#include "face0/schedule.hpp"
#include "face0/toy_faces.hpp"

namespace face0 {

// ---- guidance weights and the three-term combination ----

// w is the overall guidance scale; c weighs the jointly conditioned
// prediction against the single-condition ones, and a splits the remainder
// between face-only and text-only. No range restriction: c=1.4 and c
// slightly above 1 are legitimate settings.
struct GuidanceWeights {
    float w = 7.5f;
    float c = 1.0f;
    float a = 0.0f;

    void validate() const {
        if (!std::isfinite(w) || !std::isfinite(c) || !std::isfinite(a))
            throw ContractError("guidance weights must be finite");
    }
};

inline GuidanceWeights guidance_preset(const std::string& name) {
    if (name == "photo") return GuidanceWeights{7.5f, 1.0f, 0.0f};
    if (name == "artistic") return GuidanceWeights{7.5f, 0.55f, 0.0f};
    if (name == "extreme-style") return GuidanceWeights{7.5f, 1.4f, 1.0f};
    throw ContractError("unknown guidance preset '" + name +
                        "' (have: photo, artistic, extreme-style)");
}

struct CfgResult {
    Tensor combined;  // the c/a mixture of the conditioned predictions
    Tensor guided;    // after applying the guidance scale against unconditioned
};

namespace detail {

inline const Tensor& cfg_require(const Tensor& t, const Tensor* ref, const char* which,
                                 float coef) {
    if (t.numel() == 0)
        throw ContractError(std::string("cfg_combine: ") + which +
                            " prediction required (coefficient " + std::to_string(coef) + ")");
    if (ref) require_same_dims(*ref, t, "cfg_combine");
    return t;
}

}  // namespace detail

// combined = c*both + (1-c)*(a*face + (1-a)*text); guided = w*combined +
// (1-w)*uncond. Inputs whose coefficient is exactly zero are never read and
// may be empty; with c=1 the arithmetic reduces bit-for-bit to standard
// two-term guidance.
inline CfgResult cfg_combine(const Tensor& eps_uncond, const Tensor& eps_text,
                             const Tensor& eps_face, const Tensor& eps_both,
                             const GuidanceWeights& gw) {
    gw.validate();
    const float cb = gw.c;
    const float cf = (1.0f - gw.c) * gw.a;
    const float ct = (1.0f - gw.c) * (1.0f - gw.a);
    const float cu = 1.0f - gw.w;

    // Fixed term order keeps the reduction deterministic.
    std::vector<std::pair<float, const Tensor*>> terms;
    const Tensor* ref = nullptr;
    if (cb != 0.0f) terms.emplace_back(cb, &detail::cfg_require(eps_both, ref, "joint", cb));
    if (!terms.empty()) ref = terms.front().second;
    if (cf != 0.0f) terms.emplace_back(cf, &detail::cfg_require(eps_face, ref, "face-only", cf));
    if (!ref && !terms.empty()) ref = terms.front().second;
    if (ct != 0.0f) terms.emplace_back(ct, &detail::cfg_require(eps_text, ref, "text-only", ct));
    if (terms.empty()) throw ContractError("cfg_combine: no conditioned term has weight");
    ref = terms.front().second;

    CfgResult r;
    r.combined = Tensor::zeros(ref->dims);
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const float coef = terms[k].first;
        const Tensor& t = *terms[k].second;
        if (k == 0)
            for (std::size_t i = 0; i < t.numel(); ++i) r.combined.data[i] = coef * t.data[i];
        else
            for (std::size_t i = 0; i < t.numel(); ++i) r.combined.data[i] += coef * t.data[i];
    }

    if (cu == 0.0f) {
        r.guided = r.combined;
    } else {
        detail::cfg_require(eps_uncond, ref, "unconditioned", cu);
        r.guided = Tensor::zeros(ref->dims);
        for (std::size_t i = 0; i < r.guided.numel(); ++i)
            r.guided.data[i] = gw.w * r.combined.data[i] + cu * eps_uncond.data[i];
    }
    if (!r.guided.all_finite()) throw NumericError("cfg_combine: non-finite guidance output");
    return r;
}

// ---- the joint model: denoiser + projection over a frozen token table ----

struct DiffusionModel {
    DenoiserConfig unet;
    ProjectionConfig proj;
    Tensor token_table;  // [vocab, d_c], frozen throughout training
    ParamSet params;     // unet.* and proj.*, both trainable
};

inline DiffusionModel init_diffusion_model(std::uint64_t seed, const DenoiserConfig& dcfg = {},
                                           const ProjectionConfig& pcfg = {},
                                           int vocab_size = vocab::kSize) {
    if (dcfg.d_c != pcfg.d_c)
        throw ContractError("model: denoiser and projection disagree on the token width");
    DiffusionModel m;
    m.unet = dcfg;
    m.proj = pcfg;
    m.params = ParamSet(stream_seed(seed, "model"));
    init_denoiser_params(m.params, dcfg);
    init_projection_params(m.params, pcfg);
    ParamSet table_set(stream_seed(seed, "model"));
    init_token_table(table_set, vocab_size, dcfg.d_c);
    m.token_table = std::move(table_set.at("text.table"));
    return m;
}

// ---- training ----

struct TrainingExample {
    std::int64_t record_id = 0;
    Tensor image;  // [3,H,W] in [-1,1]
    CaptionTokens caption{};
    FaceBox box;
};

inline std::vector<TrainingExample> load_training_set(const DatasetManifest& m,
                                                      const std::filesystem::path& root) {
    std::vector<TrainingExample> out;
    out.reserve(m.records.size());
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const DatasetRecord& r = m.records[i];
        out.push_back(TrainingExample{static_cast<std::int64_t>(i), read_ppm(root / r.image),
                                      r.caption, r.box});
    }
    return out;
}

struct NoiseLossOptions {
    double p_face = 0.1;  // drop the face condition (zeroed tokens)
    double p_text = 0.1;  // drop the caption (replaced by the padding caption)
    CropMargins margins = kDefaultMargins;
    int margin_ref = kMarginRefScale;
};

// The denoising objective over one batch. Each example draws its own (t, eps,
// dropout) stream keyed by (seed, step, record id) — never by batch position —
// and the batch is reduced in record order, so the loss is invariant to batch
// order. The face embedder is applied outside the graph: it is frozen.
inline Graph::Id training_loss_graph(Graph& g, const DiffusionModel& model, const Embedder& emb,
                                     const std::vector<const TrainingExample*>& batch,
                                     const NoiseLossOptions& opt, std::uint64_t seed,
                                     std::int64_t step) {
    if (batch.empty()) throw ContractError("training_loss: empty batch");
    if (!emb.trained) throw ContractError("training_loss: the face embedder is not pretrained");
    if (opt.p_face < 0.0 || opt.p_face > 1.0 || opt.p_text < 0.0 || opt.p_text > 1.0)
        throw ContractError("training_loss: dropout probabilities outside [0,1]");

    std::vector<const TrainingExample*> ordered = batch;
    std::sort(ordered.begin(), ordered.end(),
              [](const TrainingExample* a, const TrainingExample* b) {
                  return a->record_id < b->record_id;
              });

    std::map<std::string, Graph::Id> bound;
    ParamBinder bind = [&](Graph& gg, const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        const auto id = gg.param(name, model.params.at(name));
        bound.emplace(name, id);
        return id;
    };

    Graph::Id total = -1;
    for (const TrainingExample* ex : ordered) {
        Rng rng(stream_seed(seed, "step", static_cast<std::uint64_t>(step),
                            static_cast<std::uint64_t>(ex->record_id)));
        const double t = rng.uniform();
        Tensor eps = Tensor::randn(ex->image.dims, rng, 1.0f);
        const bool drop_face = rng.bernoulli(opt.p_face);
        const bool drop_text = rng.bernoulli(opt.p_text);

        Graph::Id face_tokens = -1;
        if (!drop_face) {
            const Tensor crop =
                face_crop(ex->image, ex->box, opt.margins, opt.margin_ref, emb.config.crop);
            const FaceEmbedding f = embed_face(emb, crop);
            face_tokens = project_tokens(
                g, bind, g.constant(Tensor({1, model.proj.d_f}, f.v.data)), model.proj);
        }
        const CaptionTokens caption = drop_text ? padding_caption() : ex->caption;
        auto ctx = assemble_context_graph(g, model.token_table, caption, face_tokens,
                                          model.proj.k, model.proj.d_c);
        const LatentState z = add_noise(ex->image, t, eps);
        auto pred = denoise_graph(g, bind, model.unet, g.constant(z.z), t, ctx);
        const float wt = schedule_eval(t).w;
        auto l = g.mse(pred, g.constant(eps));
        if (wt != 1.0f) l = g.scale(l, wt);
        total = total < 0 ? l : g.add(total, l);
    }
    return g.scale(total, 1.0f / static_cast<float>(ordered.size()));
}

inline float training_loss(const DiffusionModel& model, const Embedder& emb,
                           const std::vector<const TrainingExample*>& batch,
                           const NoiseLossOptions& opt, std::uint64_t seed, std::int64_t step) {
    Graph g;
    return g.value(training_loss_graph(g, model, emb, batch, opt, seed, step)).data[0];
}

// ---- checkpoints ----

struct DiffusionCheckpoint {
    DiffusionModel model;
    ParamSet ema;
    std::map<std::string, Tensor> adam_m, adam_v;
    std::int64_t step = 0;
    std::int64_t adam_steps = 0;
};

inline void save_diffusion_checkpoint(const std::filesystem::path& path,
                                      const DiffusionModel& model, const ParamSet& ema,
                                      const Adam& adam, std::int64_t step) {
    std::map<std::string, Tensor> all = model.params.tensors();
    for (const auto& [name, t] : ema.tensors()) all.emplace("ema." + name, t);
    for (const auto& [name, t] : adam.first_moments()) all.emplace("adam.m." + name, t);
    for (const auto& [name, t] : adam.second_moments()) all.emplace("adam.v." + name, t);
    all.emplace("text.table", model.token_table);
    save_checkpoint(path, all);

    nlohmann::json j;
    j["schedule"] = "cosine-vp";
    j["step"] = step;
    j["adam_steps"] = adam.steps_taken();
    j["h"] = model.unet.h;
    j["w"] = model.unet.w;
    j["c1"] = model.unet.c1;
    j["c2"] = model.unet.c2;
    j["n_sin"] = model.unet.n_sin;
    j["d_t"] = model.unet.d_t;
    j["d_c"] = model.unet.d_c;
    j["d_f"] = model.proj.d_f;
    j["k"] = model.proj.k;
    j["L"] = kContextLen;
    std::vector<std::string> words(vocab::kWords, vocab::kWords + vocab::kSize);
    j["vocab"] = words;
    const std::filesystem::path side = std::filesystem::path(path).replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + side.string() + "' for writing");
    out << j.dump(1) << '\n';
}

inline DiffusionCheckpoint load_diffusion_checkpoint(const std::filesystem::path& path) {
    const std::filesystem::path side = std::filesystem::path(path).replace_extension(".json");
    std::ifstream in(side);
    if (!in) throw IoError("cannot open '" + side.string() + "' (run train first?)");
    nlohmann::json j;
    in >> j;

    DiffusionCheckpoint ck;
    ck.model.unet.h = j.at("h").get<int>();
    ck.model.unet.w = j.at("w").get<int>();
    ck.model.unet.c1 = j.at("c1").get<int>();
    ck.model.unet.c2 = j.at("c2").get<int>();
    ck.model.unet.n_sin = j.at("n_sin").get<int>();
    ck.model.unet.d_t = j.at("d_t").get<int>();
    ck.model.unet.d_c = j.at("d_c").get<int>();
    ck.model.proj.d_f = j.at("d_f").get<int>();
    ck.model.proj.d_c = ck.model.unet.d_c;
    ck.model.proj.k = j.at("k").get<int>();
    ck.step = j.at("step").get<std::int64_t>();
    ck.adam_steps = j.at("adam_steps").get<std::int64_t>();
    if (j.at("L").get<int>() != kContextLen)
        throw ContractError("checkpoint context length does not match this build");
    const auto words = j.at("vocab").get<std::vector<std::string>>();
    if (static_cast<int>(words.size()) != vocab::kSize)
        throw ContractError("checkpoint vocabulary does not match this build");
    for (int i = 0; i < vocab::kSize; ++i)
        if (words[static_cast<std::size_t>(i)] != vocab::kWords[i])
            throw ContractError("checkpoint vocabulary does not match this build");

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
    std::map<std::string, Tensor> ema_t, m_t, v_t;
    take_prefixed("ema.", ema_t);
    take_prefixed("adam.m.", m_t);
    take_prefixed("adam.v.", v_t);
    auto table_it = all.find("text.table");
    if (table_it == all.end()) throw IoError("checkpoint is missing the token table");
    ck.model.token_table = std::move(table_it->second);
    all.erase(table_it);
    ck.model.params = ParamSet(0);
    ck.model.params.tensors() = std::move(all);
    ck.ema = ParamSet(0);
    ck.ema.tensors() = std::move(ema_t);
    ck.adam_m = std::move(m_t);
    ck.adam_v = std::move(v_t);
    if (ck.ema.tensors().size() != ck.model.params.tensors().size())
        throw IoError("checkpoint live and EMA parameter sets differ");
    return ck;
}

// ---- the training loop ----

struct TrainConfig {
    int steps = 10000;
    int batch = 4;
    AdamConfig adam{};
    float ema_decay = 0.999f;
    NoiseLossOptions loss{};
    std::uint64_t seed = 0;
    int checkpoint_every = 2000;
    int log_every = 100;
};

struct TrainResult {
    ParamSet ema;
    std::vector<float> losses;      // one entry per step
    double initial_loss = 0.0;      // mean of the first few steps
    double final_loss = 0.0;        // mean of the last few steps
};

// Adam on denoiser + projection with an EMA shadow; token table and embedder
// are never touched. Writes a rolling checkpoint into run_dir when given one.
inline TrainResult train(DiffusionModel& model, const Embedder& emb,
                         const std::vector<TrainingExample>& data, const TrainConfig& cfg,
                         const std::filesystem::path& run_dir = {},
                         const std::function<void(int, float)>& progress = {}) {
    if (data.empty()) throw ContractError("train: empty dataset");
    if (cfg.steps < 1 || cfg.batch < 1) throw ContractError("train: steps and batch must be >= 1");
    if (!emb.trained) throw ContractError("train: the face embedder is not pretrained");

    TrainResult res;
    res.ema = ParamSet(0);
    res.ema.tensors() = model.params.tensors();
    Adam adam(cfg.adam);
    res.losses.reserve(static_cast<std::size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        try {
            Rng pick(stream_seed(cfg.seed, "batch", static_cast<std::uint64_t>(step)));
            std::vector<const TrainingExample*> batch;
            batch.reserve(static_cast<std::size_t>(cfg.batch));
            for (int b = 0; b < cfg.batch; ++b)
                batch.push_back(&data[pick.uniform_int(data.size())]);

            Graph g;
            auto loss_id = training_loss_graph(g, model, emb, batch, cfg.loss, cfg.seed, step);
            const float loss = g.value(loss_id).data[0];
            g.backward(loss_id);
            auto grads = g.named_grads();
            // Parameters that never entered this step's graph (e.g. the
            // projection when every example dropped its face) get zero grads.
            for (const auto& [name, t] : model.params.tensors())
                if (grads.find(name) == grads.end()) grads.emplace(name, Tensor::zeros(t.dims));
            adam.step(model.params.tensors(), grads);
            ema_update(res.ema.tensors(), model.params.tensors(), cfg.ema_decay);
            res.losses.push_back(loss);

            if (progress && (step % cfg.log_every == 0 || step == cfg.steps - 1))
                progress(step, loss);
            const bool last = step == cfg.steps - 1;
            if (!run_dir.empty() &&
                (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)))
                save_diffusion_checkpoint(run_dir / "checkpoint.ckpt", model, res.ema, adam,
                                          step + 1);
        } catch (const NumericError& e) {
            throw NumericError("training aborted at step " + std::to_string(step) + ": " +
                               e.what());
        }
    }

    const std::size_t window =
        std::min<std::size_t>(20, res.losses.size());
    double init = 0.0, fin = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        init += res.losses[i];
        fin += res.losses[res.losses.size() - 1 - i];
    }
    res.initial_loss = init / static_cast<double>(window);
    res.final_loss = fin / static_cast<double>(window);
    return res;
}

// ---- sampling ----

struct SampleResult {
    Tensor image;            // [3,H,W] clamped to [-1,1]
    int denoiser_passes = 0;
    int steps = 0;
};

// DDIM from seeded Gaussian noise. Builds the four contexts but evaluates
// only the denoiser passes whose combination coefficient is nonzero; with
// c=1 that is two passes per step, the standard guidance cost.
inline SampleResult sample(const DiffusionModel& model, const ParamSet& weights,
                           const CaptionTokens& prompt, const std::optional<FaceEmbedding>& face,
                           const GuidanceWeights& gw, int n_steps, std::uint64_t seed) {
    gw.validate();
    if (n_steps < 1) throw ContractError("sample: need at least one step");
    const float cb = gw.c;
    const float cf = (1.0f - gw.c) * gw.a;
    const float ct = (1.0f - gw.c) * (1.0f - gw.a);
    const float cu = 1.0f - gw.w;
    if (!face) {
        if (cb != 0.0f)
            throw ContractError("sample: weight c=" + std::to_string(gw.c) +
                                " needs the face-conditioned pass, but no face embedding given");
        if (cf != 0.0f)
            throw ContractError("sample: weight a=" + std::to_string(gw.a) +
                                " needs the face-only pass, but no face embedding given");
    }

    Tensor face_tokens;
    if (face) face_tokens = project(weights, *face, model.proj);
    const Tensor* ftoks = face ? &face_tokens : nullptr;
    const CaptionTokens padding = padding_caption();
    const int k = model.proj.k;
    const Tensor ctx_both = face ? assemble_context(model.token_table, prompt, ftoks, k).tokens
                                 : Tensor();
    const Tensor ctx_text = assemble_context(model.token_table, prompt, nullptr, k).tokens;
    const Tensor ctx_face = face ? assemble_context(model.token_table, padding, ftoks, k).tokens
                                 : Tensor();
    const Tensor ctx_unc = assemble_context(model.token_table, padding, nullptr, k).tokens;

    Rng rng(stream_seed(seed, "sample"));
    LatentState state{Tensor::randn({3, model.unet.h, model.unet.w}, rng, 1.0f), 1.0f};

    SampleResult res;
    res.steps = n_steps;
    const std::vector<double> ts = sample_times(n_steps);
    for (int i = 0; i < n_steps; ++i) {
        const double t = ts[static_cast<std::size_t>(i)];
        Tensor e_unc, e_text, e_face, e_both;
        // Fixed evaluation order; unused passes are skipped entirely.
        if (cu != 0.0f) {
            e_unc = denoise(weights, model.unet, state.z, t, ctx_unc);
            ++res.denoiser_passes;
        }
        if (ct != 0.0f) {
            e_text = denoise(weights, model.unet, state.z, t, ctx_text);
            ++res.denoiser_passes;
        }
        if (cf != 0.0f) {
            e_face = denoise(weights, model.unet, state.z, t, ctx_face);
            ++res.denoiser_passes;
        }
        if (cb != 0.0f) {
            e_both = denoise(weights, model.unet, state.z, t, ctx_both);
            ++res.denoiser_passes;
        }
        const CfgResult cfg = cfg_combine(e_unc, e_text, e_face, e_both, gw);
        state = ddim_step(state, cfg.guided, ts[static_cast<std::size_t>(i) + 1]);
    }

    res.image = std::move(state.z);
    for (auto& v : res.image.data) v = std::clamp(v, -1.0f, 1.0f);
    return res;
}

}  // namespace face0
