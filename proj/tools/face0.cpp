// face0: command-line front end wiring the library into reproducible runs.
//
// Every invocation resolves a run directory <root>/<config-hash> so changing
// the configuration can never overwrite an earlier experiment. Exit codes:
// 0 success, 2 usage error, 3 missing prerequisite artifact, 4 numeric
// failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "face0/config.hpp"
#include "face0/diffusion.hpp"
#include "face0/eval.hpp"
#include "face0/image.hpp"

namespace fs = std::filesystem;
using namespace face0;

namespace {

constexpr const char* kVersion = "v0.1.0";

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct RunPaths {
    fs::path dir;

    fs::path dataset_dir() const { return dir / "dataset"; }
    fs::path manifest() const { return dataset_dir() / "manifest.json"; }
    fs::path embedder() const { return dir / "embedder.ckpt"; }
    fs::path mixture() const { return dir / "mixture.json"; }
    fs::path model() const { return dir / "checkpoint.ckpt"; }
    fs::path probes() const { return dir / "probes.ckpt"; }
    fs::path eval_dir() const { return dir / "eval"; }
    fs::path samples_dir() const { return dir / "samples"; }
};

// The artifact root: flag beats environment beats the local default.
fs::path run_root(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("FACE0_RUN_DIR"); env && *env) return env;
    return "runs";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

// Records stage completion. Wall time makes these bytes run-dependent, so
// determinism comparisons must skip this one file.
void note_stage(const RunPaths& p, const RunConfig& cfg, const std::string& stage,
                double wall_seconds) {
    nlohmann::json j;
    {
        std::ifstream in(p.dir / "run-manifest.json");
        if (in) {
            try {
                in >> j;
            } catch (const nlohmann::json::exception&) {
                j = nlohmann::json::object();
            }
        }
    }
    j["config_hash"] = config_hash(cfg);
    j["version"] = kVersion;
    j["stages"][stage] = {{"wall_seconds", wall_seconds}, {"version", kVersion}};
    write_text(p.dir / "run-manifest.json", j.dump(1) + "\n");
}

RunPaths prepare_run(const RunConfig& cfg, const std::string& root_flag) {
    RunPaths p{run_root(root_flag) / config_hash(cfg)};
    std::error_code ec;
    fs::create_directories(p.dir, ec);
    if (ec) throw IoError("cannot create '" + p.dir.string() + "': " + ec.message());
    write_text(p.dir / "config.json", config_to_json(cfg).dump(1) + "\n");
    std::printf("run directory %s\n", p.dir.string().c_str());
    return p;
}

DatasetManifest need_manifest(const RunPaths& p) { return load_manifest(p.manifest()); }

Embedder need_embedder(const RunPaths& p) { return load_embedder(p.embedder()); }

MixtureSpec need_mixture(const RunPaths& p) {
    if (!fs::exists(p.mixture()))
        throw IoError("cannot open '" + p.mixture().string() + "' (run pretrain-embedder first?)");
    return load_mixture(p.mixture());
}

DiffusionCheckpoint need_model(const RunPaths& p) { return load_diffusion_checkpoint(p.model()); }

EvalProbes need_probes(const RunPaths& p) { return load_eval_probes(p.probes()); }

std::vector<IdentityParams> train_identities(const DatasetManifest& m) {
    return {m.identities.begin(), m.identities.begin() + m.n_train_identities};
}

std::vector<IdentityParams> eval_identities(const DatasetManifest& m) {
    return {m.identities.begin() + m.n_train_identities, m.identities.end()};
}

const char* source_name(EmbeddingSource s) {
    switch (s) {
        case EmbeddingSource::computed: return "computed";
        case EmbeddingSource::random: return "random";
        case EmbeddingSource::interpolated: return "interpolated";
        case EmbeddingSource::perturbed: return "perturbed";
    }
    return "unknown";
}

// ---- subcommands ----

int cmd_gen_data(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m =
        build_dataset(cfg.data.examples, cfg.data.train_identities, cfg.data.eval_identities,
                      cfg.data.seed, p.dataset_dir(), cfg.data.canvas, cfg.data.min_face);
    std::printf("dataset: %zu examples, %d train + %d eval identities, canvas %d, min face %d\n",
                m.records.size(), m.n_train_identities, m.n_eval_identities(), m.canvas,
                m.min_face);
    std::printf("manifest %s\n", p.manifest().string().c_str());
    note_stage(p, cfg, "gen-data", seconds_since(t0));
    return 0;
}

int cmd_pretrain_embedder(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m = need_manifest(p);
    const std::vector<IdentityParams> ids = train_identities(m);

    const LabeledCrops lc =
        render_identity_crops(ids, cfg.embedder.crops_per_identity, cfg.embedder.crop,
                              cfg.embedder.seed, m.canvas, m.min_face);
    std::printf("pretraining on %zu crops of %d identities...\n", lc.crops.size(),
                static_cast<int>(ids.size()));
    const Embedder emb = pretrain_embedder(lc.crops, lc.labels, static_cast<int>(ids.size()),
                                           cfg.embedder.epochs, cfg.embedder.seed,
                                           cfg.embedder_config());

    // Verification AUC on fresh scenes: same-identity pairs vs mixed pairs.
    std::vector<Tensor> probe_crops;
    std::vector<int> probe_labels;
    const int per_id = 5;
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (int k = 0; k < per_id; ++k) {
            Rng rng(stream_seed(cfg.embedder.seed, "auc", i, static_cast<std::uint64_t>(k)));
            const SceneParams sc = sample_scene(ids[i], rng, m.canvas, m.min_face);
            auto [img, box] = render(ids[i], sc, m.canvas);
            probe_crops.push_back(
                face_crop(img, box, kDefaultMargins, kMarginRefScale, emb.config.crop));
            probe_labels.push_back(static_cast<int>(i));
        }
    std::vector<Tensor> vecs;
    vecs.reserve(probe_crops.size());
    for (const Tensor& c : probe_crops) vecs.push_back(embed_face(emb, c).v);
    std::vector<float> pos, neg;
    for (std::size_t a = 0; a < vecs.size(); ++a)
        for (std::size_t b = a + 1; b < vecs.size(); ++b)
            (probe_labels[a] == probe_labels[b] ? pos : neg)
                .push_back(cosine(vecs[a], vecs[b]));
    const double auc = auc_score(pos, neg);
    std::printf("heldout identity accuracy %.3f, verification AUC %.3f\n",
                static_cast<double>(emb.heldout_acc), auc);

    // Embedding-space mixture over the pretraining crops.
    std::vector<Tensor> all;
    all.reserve(lc.crops.size());
    for (const Tensor& c : lc.crops) all.push_back(embed_face(emb, c).v);
    const MixtureSpec mix =
        fit_mixture(all, cfg.embedder.mixture_components, cfg.embedder.mixture_seed);
    save_mixture(p.mixture(), mix);
    save_embedder(p.embedder(), emb);
    std::printf("saved %s and %s\n", p.embedder().string().c_str(),
                p.mixture().string().c_str());
    note_stage(p, cfg, "pretrain-embedder", seconds_since(t0));
    return 0;
}

int cmd_train(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m = need_manifest(p);
    const Embedder emb = need_embedder(p);
    if (emb.config.d_f != cfg.embedder.d_f || emb.config.crop != cfg.embedder.crop)
        throw ContractError("config: the saved embedder has d_f=" +
                            std::to_string(emb.config.d_f) + ", crop=" +
                            std::to_string(emb.config.crop) + ", which disagrees with the config");

    DiffusionModel model =
        init_diffusion_model(cfg.model.seed, cfg.denoiser_config(), cfg.projection_config());
    const TrainConfig tc = cfg.train_config();

    if (tc.steps == 0) {
        // Nothing to optimize: the checkpoint is the initialization itself.
        ParamSet ema(0);
        ema.tensors() = model.params.tensors();
        Adam adam(tc.adam);
        save_diffusion_checkpoint(p.model(), model, ema, adam, 0);
        std::printf("steps=0: wrote the initialization to %s\n", p.model().string().c_str());
        note_stage(p, cfg, "train", seconds_since(t0));
        return 0;
    }

    const std::vector<TrainingExample> data = load_training_set(m, p.dataset_dir());
    std::printf("training on %zu examples for %d steps (batch %d)...\n", data.size(), tc.steps,
                tc.batch);
    const TrainResult res =
        train(model, emb, data, tc, p.dir, [&](int step, float loss) {
            std::printf("step %6d  loss %.5f\n", step, static_cast<double>(loss));
            std::fflush(stdout);
        });
    std::printf("initial loss %.5f, final loss %.5f (ratio %.3f)\n", res.initial_loss,
                res.final_loss,
                res.initial_loss > 0 ? res.final_loss / res.initial_loss : 0.0);
    std::printf("checkpoint %s\n", p.model().string().c_str());
    note_stage(p, cfg, "train", seconds_since(t0));
    return 0;
}

int cmd_train_probes(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m = need_manifest(p);
    const std::vector<IdentityParams> eval_ids = eval_identities(m);
    if (eval_ids.size() < 2)
        throw ContractError("train-probes: need at least 2 evaluation identities");

    ProbeTrainConfig pc;
    pc.scenes_per_id = cfg.probes.scenes_per_identity;
    pc.epochs = cfg.probes.epochs;
    pc.seed = cfg.probes.seed;
    pc.canvas = m.canvas;
    pc.min_face = m.min_face;
    pc.base = cfg.embedder_config();
    std::printf("training identity probe on %zu evaluation identities...\n", eval_ids.size());
    EvalProbes probes;
    probes.probe = train_identity_probe(eval_ids, pc);
    std::printf("probe heldout identity accuracy %.3f, face/background accuracy %.3f\n",
                static_cast<double>(probes.probe.heldout_acc),
                static_cast<double>(probes.probe.det_acc));

    EmbedderConfig tower_cfg = cfg.embedder_config();
    tower_cfg.d_f = cfg.probes.tower_d_f;
    const LabeledCrops lc = render_identity_crops(
        eval_ids, cfg.probes.tower_crops_per_identity, tower_cfg.crop, cfg.probes.tower_seed,
        m.canvas, m.min_face, /*candidate_views=*/true);
    std::printf("training verification tower on %zu crops...\n", lc.crops.size());
    probes.face_tower =
        pretrain_embedder(lc.crops, lc.labels, static_cast<int>(eval_ids.size()),
                          cfg.probes.tower_epochs, cfg.probes.tower_seed, tower_cfg);
    std::printf("tower heldout identity accuracy %.3f\n",
                static_cast<double>(probes.face_tower.heldout_acc));

    CaptionScorerTrainConfig sc;
    sc.pairs = cfg.probes.scorer_pairs;
    sc.steps = cfg.probes.scorer_steps;
    sc.batch = cfg.probes.scorer_batch;
    sc.seed = cfg.probes.scorer_seed;
    sc.canvas = m.canvas;
    sc.min_face = m.min_face;
    std::printf("training caption scorer (%d pairs, %d steps)...\n", sc.pairs, sc.steps);
    probes.scorer = train_caption_scorer(train_identities(m), sc);

    save_eval_probes(p.probes(), probes);
    std::printf("saved %s\n", p.probes().string().c_str());
    note_stage(p, cfg, "train-probes", seconds_since(t0));
    return 0;
}

std::vector<EvalIdentityRef> make_refs(const RunConfig& cfg, const DatasetManifest& m,
                                       const Embedder& cond) {
    std::vector<EvalIdentityRef> refs;
    const std::vector<IdentityParams> ids = eval_identities(m);
    for (std::size_t i = 0; i < ids.size(); ++i)
        refs.push_back(make_identity_ref(ids[i], static_cast<int>(i), cond, cfg.eval.ref_seed,
                                         m.canvas, m.min_face));
    return refs;
}

std::vector<CaptionTokens> parse_prompts(const std::vector<std::string>& texts) {
    std::vector<CaptionTokens> out;
    for (const std::string& t : texts) out.push_back(caption_from_words(t));
    return out;
}

int cmd_eval(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m = need_manifest(p);
    const Embedder cond = need_embedder(p);
    const DiffusionCheckpoint ck = need_model(p);
    const EvalProbes probes = need_probes(p);

    const std::vector<EvalIdentityRef> refs = make_refs(cfg, m, cond);
    const std::vector<CaptionTokens> prompts = parse_prompts(cfg.eval.prompts);
    std::printf("evaluating %zu identities x %zu prompts x %zu seeds at %d steps...\n",
                refs.size(), prompts.size(), cfg.eval.seeds.size(), cfg.eval.steps);
    const EvalReport rep = run_eval(ck.model, ck.ema, probes, refs, prompts, cfg.eval.seeds,
                                    cfg.preset("photo"), cfg.eval.steps);

    std::error_code ec;
    fs::create_directories(p.eval_dir(), ec);
    if (ec) throw IoError("cannot create '" + p.eval_dir().string() + "': " + ec.message());
    write_eval_csv(p.eval_dir() / "cells.csv", rep);
    write_eval_markdown(p.eval_dir() / "summary.md", rep);

    nlohmann::json j;
    j["cells"] = rep.cells.size();
    j["text_mean"] = rep.text.mean;
    j["face_mean"] = rep.face.mean;
    j["overall_mean"] = rep.overall_agg.mean;
    j["best_overall_mean"] = rep.best_overall.mean;
    j["best_k"] = rep.best_k;
    j["mismatch_face_mean"] = rep.mismatch_face_mean;
    j["face_gap"] = rep.face.mean - rep.mismatch_face_mean;
    j["detect_rate"] = rep.detect_rate;
    j["steps"] = rep.n_steps;
    write_text(p.eval_dir() / "report.json", j.dump(1) + "\n");

    std::printf("text %.3f  face %.3f  overall %.3f  best-of-%d %.3f\n", rep.text.mean,
                rep.face.mean, rep.overall_agg.mean, rep.best_k, rep.best_overall.mean);
    std::printf("detect rate %.3f  mismatched-reference face %.3f  gap %.3f\n", rep.detect_rate,
                rep.mismatch_face_mean, rep.face.mean - rep.mismatch_face_mean);
    std::printf("wrote %s\n", (p.eval_dir() / "cells.csv").string().c_str());
    note_stage(p, cfg, "eval", seconds_since(t0));
    return 0;
}

int cmd_consistency(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DiffusionCheckpoint ck = need_model(p);
    const EvalProbes probes = need_probes(p);
    const MixtureSpec mix = need_mixture(p);

    const int np = std::min<int>(cfg.consistency.prompts_used,
                                 static_cast<int>(cfg.eval.prompts.size()));
    const int ns =
        std::min<int>(cfg.consistency.seeds_used, static_cast<int>(cfg.eval.seeds.size()));
    const std::vector<CaptionTokens> prompts = parse_prompts(
        {cfg.eval.prompts.begin(), cfg.eval.prompts.begin() + np});
    const std::vector<std::uint64_t> seeds = {cfg.eval.seeds.begin(),
                                              cfg.eval.seeds.begin() + ns};

    // Arm one: a single embedding shared by every generation.
    Rng fixed_rng(stream_seed(cfg.consistency.embedding_seed, "consistency", 0));
    const FaceEmbedding f = sample_random_embedding(mix, fixed_rng);
    const ConsistencyReport fixed_rep = consistency(ck.model, ck.ema, probes, f, prompts, seeds,
                                                    cfg.preset("photo"), cfg.eval.steps);

    // Arm two: the same grid, but each image draws its own embedding.
    std::vector<Tensor> varied;
    int varied_images = 0;
    std::uint64_t cell = 0;
    for (const CaptionTokens& prompt : prompts)
        for (std::uint64_t seed : seeds) {
            Rng r(stream_seed(cfg.consistency.embedding_seed, "varied", ++cell));
            const FaceEmbedding fi = sample_random_embedding(mix, r);
            const SampleResult s = sample(ck.model, ck.ema, prompt, fi, cfg.preset("photo"),
                                          cfg.eval.steps, seed);
            ++varied_images;
            if (auto e = detected_face_embedding(probes, s.image)) varied.push_back(*e);
        }
    std::optional<double> varied_pairwise;
    if (varied.size() >= 2) {
        double acc = 0.0;
        int n = 0;
        for (std::size_t a = 0; a < varied.size(); ++a)
            for (std::size_t b = a + 1; b < varied.size(); ++b) {
                acc += cosine(varied[a], varied[b]);
                ++n;
            }
        varied_pairwise = acc / n;
    }

    nlohmann::json j;
    j["fixed"] = {{"images", fixed_rep.n_images},
                  {"detected", fixed_rep.n_detected},
                  {"mean_pairwise", fixed_rep.mean_pairwise
                                        ? nlohmann::json(*fixed_rep.mean_pairwise)
                                        : nlohmann::json()}};
    j["varied"] = {{"images", varied_images},
                   {"detected", static_cast<int>(varied.size())},
                   {"mean_pairwise", varied_pairwise ? nlohmann::json(*varied_pairwise)
                                                     : nlohmann::json()}};
    write_text(p.dir / "consistency.json", j.dump(1) + "\n");

    std::printf("fixed embedding: %d/%d faces, pairwise %.4f\n", fixed_rep.n_detected,
                fixed_rep.n_images,
                fixed_rep.mean_pairwise ? static_cast<double>(*fixed_rep.mean_pairwise) : 0.0);
    std::printf("varied embeddings: %zu/%d faces, pairwise %.4f\n", varied.size(), varied_images,
                varied_pairwise ? *varied_pairwise : 0.0);
    if (fixed_rep.mean_pairwise && varied_pairwise)
        std::printf("consistency advantage %.4f\n",
                    static_cast<double>(*fixed_rep.mean_pairwise) - *varied_pairwise);
    note_stage(p, cfg, "consistency", seconds_since(t0));
    return 0;
}

int cmd_bias(const RunConfig& cfg, const RunPaths& p) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetManifest m = need_manifest(p);
    const Embedder cond = need_embedder(p);
    const DiffusionCheckpoint ck = need_model(p);
    const EvalProbes probes = need_probes(p);
    const MixtureSpec mix = need_mixture(p);

    const std::vector<CaptionTokens> prompts = parse_prompts(cfg.eval.prompts);
    std::printf("sampling %d images per conditioning arm...\n", cfg.bias.samples);
    const BiasReport rep = bias_experiment(ck.model, ck.ema, probes, prompts, cfg.bias.samples,
                                           mix, cfg.bias.seed, cfg.preset("photo"),
                                           cfg.eval.steps);

    // Reference distribution: mixture weight spread over the skin tones of
    // the training identities, measured in the same embedding space.
    std::vector<Tensor> pool;
    std::vector<float> skins;
    const std::vector<IdentityParams> ids = train_identities(m);
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (int k = 0; k < 4; ++k) {
            Rng rng(stream_seed(cfg.bias.seed, "bias-pool", i, static_cast<std::uint64_t>(k)));
            const SceneParams sc = sample_scene(ids[i], rng, m.canvas, m.min_face);
            auto [img, box] = render(ids[i], sc, m.canvas);
            pool.push_back(embed_face(cond, face_crop(img, box, kDefaultMargins, kMarginRefScale,
                                                      cond.config.crop))
                               .v);
            skins.push_back(ids[i].v[0]);
        }
    const auto reference = mixture_skin_reference(mix, pool, skins);

    const double tv_random = total_variation(rep.random_hist, reference);
    const double tv_text = total_variation(rep.text_hist, reference);

    nlohmann::json j;
    j["random"] = {{"samples", rep.n_random},
                   {"detected", rep.n_random_detected},
                   {"hist", rep.random_hist},
                   {"tv_vs_reference", tv_random}};
    j["text_only"] = {{"samples", rep.n_text},
                      {"detected", rep.n_text_detected},
                      {"hist", rep.text_hist},
                      {"tv_vs_reference", tv_text}};
    j["reference_hist"] = reference;
    write_text(p.dir / "bias.json", j.dump(1) + "\n");

    std::printf("random-embedding skin histogram: %.3f %.3f %.3f %.3f (TV vs reference %.3f)\n",
                rep.random_hist[0], rep.random_hist[1], rep.random_hist[2], rep.random_hist[3],
                tv_random);
    std::printf("text-only skin histogram:        %.3f %.3f %.3f %.3f (TV vs reference %.3f)\n",
                rep.text_hist[0], rep.text_hist[1], rep.text_hist[2], rep.text_hist[3], tv_text);
    note_stage(p, cfg, "bias", seconds_since(t0));
    return 0;
}

// ---- sampling ----

struct SampleFlags {
    std::string prompt;
    std::uint64_t seed = 0;
    int steps = 0;  // 0: take the eval default
    std::string preset = "photo";
    std::string face_image;
    bool random_face = false;
    std::string face_a, face_b;
    double lerp_t = -1.0;
    std::vector<std::string> faces;
    std::vector<double> weights;
    std::string out;
    std::string sweep_c, sweep_a;
};

// "lo:hi:n" -> n evenly spaced values, endpoints included.
std::vector<float> parse_sweep(const std::string& s, const char* flag) {
    const auto c1 = s.find(':');
    const auto c2 = s.find(':', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
        throw ContractError(std::string(flag) + " wants lo:hi:n, got '" + s + "'");
    float lo = 0.0f, hi = 0.0f;
    int n = 0;
    try {
        lo = std::stof(s.substr(0, c1));
        hi = std::stof(s.substr(c1 + 1, c2 - c1 - 1));
        n = std::stoi(s.substr(c2 + 1));
    } catch (const std::exception&) {
        throw ContractError(std::string(flag) + " wants lo:hi:n, got '" + s + "'");
    }
    if (n < 1) throw ContractError(std::string(flag) + ": need at least one point");
    std::vector<float> out;
    for (int i = 0; i < n; ++i)
        out.push_back(n == 1 ? lo
                             : lo + (hi - lo) * static_cast<float>(i) / static_cast<float>(n - 1));
    return out;
}

FaceEmbedding embed_image_file(const RunPaths& p, const Embedder& cond, const EvalProbes& probes,
                               const std::string& path) {
    const Tensor img = read_ppm(path);
    const auto det = detect_face(probes.probe, img);
    if (!det) throw NumericError("no face detected in '" + path + "'");
    const Tensor crop =
        face_crop(img, det->box, kDefaultMargins, kMarginRefScale, cond.config.crop);
    (void)p;
    return embed_face(cond, crop);
}

int cmd_sample(const RunConfig& cfg, const RunPaths& p, const SampleFlags& fl) {
    const auto t0 = std::chrono::steady_clock::now();

    // Exactly one way of choosing the face condition may be given.
    int sources = 0;
    sources += !fl.face_image.empty();
    sources += fl.random_face;
    sources += (!fl.face_a.empty() || !fl.face_b.empty() || fl.lerp_t >= 0.0);
    sources += !fl.faces.empty();
    if (sources > 1)
        throw ContractError(
            "choose one of --face, --random-face, --face-a/--face-b/--lerp-t, --faces");
    if (!fl.weights.empty() && fl.faces.empty())
        throw ContractError("--weights needs --faces");
    if ((!fl.face_a.empty()) != (!fl.face_b.empty()))
        throw ContractError("--face-a and --face-b must be given together");
    if (fl.lerp_t >= 0.0 && fl.face_a.empty())
        throw ContractError("--lerp-t needs --face-a and --face-b");

    const GuidanceWeights gw = cfg.preset(fl.preset);
    const DiffusionCheckpoint ck = need_model(p);

    std::optional<FaceEmbedding> face;
    nlohmann::json source = nlohmann::json::object();
    if (!fl.face_image.empty()) {
        const Embedder cond = need_embedder(p);
        const EvalProbes probes = need_probes(p);
        face = embed_image_file(p, cond, probes, fl.face_image);
        source["image"] = fl.face_image;
    } else if (fl.random_face) {
        const MixtureSpec mix = need_mixture(p);
        Rng rng(stream_seed(fl.seed, "random-face"));
        face = sample_random_embedding(mix, rng);
        source["mixture"] = p.mixture().string();
    } else if (!fl.face_a.empty()) {
        const double t = fl.lerp_t >= 0.0 ? fl.lerp_t : 0.5;
        const Embedder cond = need_embedder(p);
        const EvalProbes probes = need_probes(p);
        const FaceEmbedding a = embed_image_file(p, cond, probes, fl.face_a);
        const FaceEmbedding b = embed_image_file(p, cond, probes, fl.face_b);
        face = lerp(a, b, static_cast<float>(t));
        source["image_a"] = fl.face_a;
        source["image_b"] = fl.face_b;
        source["lerp_t"] = t;
    } else if (!fl.faces.empty()) {
        const Embedder cond = need_embedder(p);
        const EvalProbes probes = need_probes(p);
        std::vector<FaceEmbedding> es;
        for (const std::string& f : fl.faces) es.push_back(embed_image_file(p, cond, probes, f));
        std::vector<float> ws(fl.weights.begin(), fl.weights.end());
        if (ws.empty()) ws.assign(es.size(), 1.0f);
        face = weighted_mean(es, ws);
        source["images"] = fl.faces;
        source["weights"] = ws;
    } else {
        // No face source: legal only when the weights never read a face pass.
        const bool needs_face = gw.c != 0.0f || (1.0f - gw.c) * gw.a != 0.0f;
        if (needs_face)
            throw ContractError("preset '" + fl.preset +
                                "' conditions on a face; give --face, --random-face, "
                                "--face-a/--face-b, or --faces");
        source["none"] = true;
    }
    if (face) source["kind"] = source_name(face->source);

    const CaptionTokens prompt =
        caption_from_words(fl.prompt.empty() ? cfg.eval.prompts.at(0) : fl.prompt);
    const int steps = fl.steps > 0 ? fl.steps : cfg.eval.steps;

    std::error_code ec;
    fs::create_directories(p.samples_dir(), ec);
    if (ec) throw IoError("cannot create '" + p.samples_dir().string() + "': " + ec.message());

    nlohmann::json meta;
    meta["prompt"] = caption_str(prompt);
    meta["seed"] = fl.seed;
    meta["steps"] = steps;
    meta["preset"] = fl.preset;
    meta["checkpoint_step"] = ck.step;
    meta["embedding_source"] = source;

    fs::path out_path;
    if (fl.sweep_c.empty() && fl.sweep_a.empty()) {
        const SampleResult s = sample(ck.model, ck.ema, prompt, face, gw, steps, fl.seed);
        out_path = fl.out.empty()
                       ? p.samples_dir() / ("sample-" + std::to_string(fl.seed) + ".ppm")
                       : fs::path(fl.out);
        write_ppm(out_path, s.image);
        meta["guidance"] = {{"w", gw.w}, {"c", gw.c}, {"a", gw.a}};
        meta["denoiser_passes"] = s.denoiser_passes;
    } else {
        // Guidance sweep: one mosaic over (c, a) with a fixed latent seed.
        const std::vector<float> cs =
            fl.sweep_c.empty() ? std::vector<float>{gw.c} : parse_sweep(fl.sweep_c, "--sweep-c");
        const std::vector<float> as =
            fl.sweep_a.empty() ? std::vector<float>{gw.a} : parse_sweep(fl.sweep_a, "--sweep-a");
        const int H = ck.model.unet.h, W = ck.model.unet.w;
        Tensor mosaic = Tensor::zeros(
            {3, static_cast<int>(as.size()) * H, static_cast<int>(cs.size()) * W});
        nlohmann::json grid = nlohmann::json::array();
        for (std::size_t r = 0; r < as.size(); ++r)
            for (std::size_t q = 0; q < cs.size(); ++q) {
                GuidanceWeights g2 = gw;
                g2.c = cs[q];
                g2.a = as[r];
                const SampleResult s = sample(ck.model, ck.ema, prompt, face, g2, steps, fl.seed);
                for (int ch = 0; ch < 3; ++ch)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x)
                            mosaic.data[static_cast<std::size_t>(
                                (ch * static_cast<int>(as.size()) * H +
                                 (static_cast<int>(r) * H + y)) *
                                    static_cast<int>(cs.size()) * W +
                                static_cast<int>(q) * W + x)] =
                                s.image.data[static_cast<std::size_t>((ch * H + y) * W + x)];
                grid.push_back({{"row", r}, {"col", q}, {"w", g2.w}, {"c", g2.c}, {"a", g2.a}});
            }
        out_path = fl.out.empty()
                       ? p.samples_dir() / ("sweep-" + std::to_string(fl.seed) + ".ppm")
                       : fs::path(fl.out);
        write_ppm(out_path, mosaic);
        meta["guidance"] = {{"w", gw.w}, {"grid", grid}};
        meta["sweep"] = {{"rows_a", as}, {"cols_c", cs}};
    }
    write_text(fs::path(out_path).replace_extension(".json"), meta.dump(1) + "\n");
    std::printf("wrote %s\n", out_path.string().c_str());
    note_stage(p, cfg, "sample", seconds_since(t0));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"face0: face-embedding-conditioned toy diffusion"};
    app.require_subcommand(1);
    std::string config_path, root_flag;
    app.add_option("--config", config_path, "JSON run configuration (defaults apply when absent)");
    app.add_option("--run-root", root_flag,
                   "artifact root (default: $FACE0_RUN_DIR, then ./runs)");

    auto* c_gen = app.add_subcommand("gen-data", "render the synthetic dataset");
    auto* c_emb = app.add_subcommand("pretrain-embedder",
                                     "train the conditioning embedder and fit the mixture");
    auto* c_train = app.add_subcommand("train", "train the diffusion model");
    auto* c_probes = app.add_subcommand("train-probes", "train the evaluation probes");
    auto* c_eval = app.add_subcommand("eval", "run the identity x prompt x seed evaluation");
    auto* c_cons = app.add_subcommand("consistency",
                                      "compare fixed- vs varied-embedding generations");
    auto* c_bias = app.add_subcommand("bias", "skin-tone histograms under random vs text-only");
    auto* c_samp = app.add_subcommand("sample", "generate images from the checkpoint");

    // `--config` and `--run-root` may appear after the subcommand name.
    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    SampleFlags fl;
    c_samp->add_option("--prompt", fl.prompt, "caption words (default: first eval prompt)");
    c_samp->add_option("--seed", fl.seed, "latent seed");
    c_samp->add_option("--steps", fl.steps, "denoising steps (default: eval steps)");
    c_samp->add_option("--preset", fl.preset, "guidance preset name")->default_val("photo");
    c_samp->add_option("--face", fl.face_image, "face image (PPM) to condition on");
    c_samp->add_flag("--random-face", fl.random_face, "draw the embedding from the mixture");
    c_samp->add_option("--face-a", fl.face_a, "interpolation endpoint A (PPM)");
    c_samp->add_option("--face-b", fl.face_b, "interpolation endpoint B (PPM)");
    c_samp->add_option("--lerp-t", fl.lerp_t, "interpolation position in [0,1]");
    c_samp->add_option("--faces", fl.faces, "face images for a weighted mean")->delimiter(',');
    c_samp->add_option("--weights", fl.weights, "weights matching --faces")->delimiter(',');
    c_samp->add_option("--out", fl.out, "output image path");
    c_samp->add_option("--sweep-c", fl.sweep_c, "mosaic over c: lo:hi:n");
    c_samp->add_option("--sweep-a", fl.sweep_a, "mosaic over a: lo:hi:n");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg =
            config_path.empty() ? RunConfig{} : load_run_config(config_path);
        cfg.validate();
        const RunPaths paths = prepare_run(cfg, root_flag);
        if (c_gen->parsed()) return cmd_gen_data(cfg, paths);
        if (c_emb->parsed()) return cmd_pretrain_embedder(cfg, paths);
        if (c_train->parsed()) return cmd_train(cfg, paths);
        if (c_probes->parsed()) return cmd_train_probes(cfg, paths);
        if (c_eval->parsed()) return cmd_eval(cfg, paths);
        if (c_cons->parsed()) return cmd_consistency(cfg, paths);
        if (c_bias->parsed()) return cmd_bias(cfg, paths);
        if (c_samp->parsed()) return cmd_sample(cfg, paths, fl);
        std::fprintf(stderr, "no subcommand given\n");
        return 2;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
