#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "face0/diffusion.hpp"
#include "face0/errors.hpp"
#include "face0/eval.hpp"
#include "face0/face_pipeline.hpp"
#include "face0/toy_faces.hpp"

namespace face0 {

// Run configuration with full defaulting: an empty JSON object (or no config
// file at all) is the reference desk-scale pipeline. Unknown keys are
// rejected so a typo cannot silently fall back to a default.

struct DataSection {
    int examples = 2000;
    int train_identities = 20;
    int eval_identities = 8;
    std::uint64_t seed = 11;
    int canvas = 48;
    int min_face = 12;
};

struct EmbedderSection {
    int crop = 24;
    int d_f = 32;
    int c1 = 16, c2 = 24, c3 = 32;
    int crops_per_identity = 100;
    int epochs = 30;
    std::uint64_t seed = 21;
    int mixture_components = 4;
    std::uint64_t mixture_seed = 22;
};

struct ModelSection {
    int context_len = kContextLen;  // L: caption/context token count
    int k = 3;                      // face tokens overriding the context tail
    int d_c = 16;                   // context token width
    int c1 = 16, c2 = 32;           // denoiser channels at full / half resolution
    int n_sin = 16;
    int d_t = 32;
    std::uint64_t seed = 31;
};

struct TrainSection {
    int steps = 10000;
    int batch = 4;
    float lr = 1e-3f;
    float ema_decay = 0.999f;
    float p_face_drop = 0.1f;
    float p_text_drop = 0.1f;
    std::uint64_t seed = 41;
    int checkpoint_every = 2000;
    int log_every = 100;
};

struct ProbesSection {
    int scenes_per_identity = 20;
    int epochs = 20;
    std::uint64_t seed = 51;
    int tower_crops_per_identity = 32;
    int tower_epochs = 48;
    int tower_d_f = 16;
    std::uint64_t tower_seed = 52;
    int scorer_pairs = 768;
    int scorer_steps = 1600;
    int scorer_batch = 16;
    std::uint64_t scorer_seed = 53;
};

struct EvalSection {
    std::vector<std::string> prompts = {
        "photo large person bright plain",
        "painting large face dark hat",
        "sketch small person bright glasses",
    };
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8};
    int steps = 50;
    std::uint64_t ref_seed = 71;
};

struct ConsistencySection {
    int prompts_used = 2;  // leading entries of eval.prompts
    int seeds_used = 2;    // leading entries of eval.seeds
    std::uint64_t embedding_seed = 81;
};

struct BiasSection {
    int samples = 32;  // per conditioning arm
    std::uint64_t seed = 91;
};

struct RunConfig {
    std::string schedule = "cosine-vp";
    DataSection data;
    EmbedderSection embedder;
    ModelSection model;
    TrainSection train;
    ProbesSection probes;
    EvalSection eval;
    ConsistencySection consistency;
    BiasSection bias;
    std::map<std::string, GuidanceWeights> presets = {
        {"photo", guidance_preset("photo")},
        {"artistic", guidance_preset("artistic")},
        {"extreme-style", guidance_preset("extreme-style")},
    };

    void validate() const {
        if (model.context_len != kContextLen)
            throw ContractError("config: the caption format fixes context_len at " +
                                std::to_string(kContextLen));
        if (model.k < 1 || model.k > model.context_len)
            throw ContractError("config: need 1 <= k <= context_len");
        if (schedule != "cosine-vp")
            throw ContractError("config: unknown schedule '" + schedule + "'");
        auto prob = [](float p, const char* name) {
            if (!(p >= 0.0f && p <= 1.0f))
                throw ContractError(std::string("config: ") + name + " must be in [0,1]");
        };
        prob(train.p_face_drop, "p_face_drop");
        prob(train.p_text_drop, "p_text_drop");
        if (!(train.ema_decay > 0.0f && train.ema_decay < 1.0f))
            throw ContractError("config: ema_decay must be in (0,1)");
        if (data.examples < 0 || data.train_identities < 2 || data.eval_identities < 0)
            throw ContractError("config: dataset counts out of range");
        if (data.canvas < 8 || data.canvas % 2 != 0)
            throw ContractError("config: canvas must be even and at least 8");
        if (embedder.crop % 4 != 0)
            throw ContractError("config: embedder crop must be divisible by 4");
        if (train.steps < 0 || train.batch < 1)
            throw ContractError("config: training steps/batch out of range");
        if (eval.prompts.empty() || eval.seeds.empty())
            throw ContractError("config: eval needs at least one prompt and one seed");
        if (eval.steps < 1) throw ContractError("config: eval steps must be positive");
        if (consistency.prompts_used < 1 || consistency.seeds_used < 1)
            throw ContractError("config: consistency needs at least one prompt and seed");
        if (bias.samples < 0) throw ContractError("config: bias sample count is negative");
        for (const auto& [name, gw] : presets) {
            if (name.empty()) throw ContractError("config: preset with an empty name");
            gw.validate();
        }
        for (const std::string& p : eval.prompts) caption_from_words(p);  // throws on bad words
    }

    DenoiserConfig denoiser_config() const {
        DenoiserConfig d;
        d.h = data.canvas;
        d.w = data.canvas;
        d.c1 = model.c1;
        d.c2 = model.c2;
        d.n_sin = model.n_sin;
        d.d_t = model.d_t;
        d.d_c = model.d_c;
        return d;
    }

    ProjectionConfig projection_config() const {
        ProjectionConfig p;
        p.d_f = embedder.d_f;
        p.d_c = model.d_c;
        p.k = model.k;
        return p;
    }

    EmbedderConfig embedder_config() const {
        EmbedderConfig e;
        e.crop = embedder.crop;
        e.d_f = embedder.d_f;
        e.c1 = embedder.c1;
        e.c2 = embedder.c2;
        e.c3 = embedder.c3;
        return e;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.steps = train.steps;
        t.batch = train.batch;
        t.adam.lr = train.lr;
        t.ema_decay = train.ema_decay;
        t.loss.p_face = train.p_face_drop;
        t.loss.p_text = train.p_text_drop;
        t.seed = train.seed;
        t.checkpoint_every = train.checkpoint_every;
        t.log_every = train.log_every;
        return t;
    }

    GuidanceWeights preset(const std::string& name) const {
        auto it = presets.find(name);
        if (it == presets.end())
            throw ContractError("config: no sampling preset named '" + name + "'");
        return it->second;
    }
};

namespace detail {

// Strict field reader: every key in the JSON object must be consumed.
class FieldReader {
public:
    FieldReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object())
            throw ContractError("config: '" + where_ + "' must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.push_back(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ContractError("config: '" + where_ + "." + key + "' has the wrong type");
        }
    }

    const nlohmann::json* sub(const char* key) {
        seen_.push_back(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool known = false;
            for (const char* k : seen_)
                if (it.key() == k) known = true;
            if (!known)
                throw ContractError("config: unknown key '" + where_ + "." + it.key() + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::vector<const char*> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::FieldReader top(j, "config");
    top.get("schedule", c.schedule);

    if (const auto* s = top.sub("data")) {
        detail::FieldReader r(*s, "data");
        r.get("examples", c.data.examples);
        r.get("train_identities", c.data.train_identities);
        r.get("eval_identities", c.data.eval_identities);
        r.get("seed", c.data.seed);
        r.get("canvas", c.data.canvas);
        r.get("min_face", c.data.min_face);
        r.finish();
    }
    if (const auto* s = top.sub("embedder")) {
        detail::FieldReader r(*s, "embedder");
        r.get("crop", c.embedder.crop);
        r.get("d_f", c.embedder.d_f);
        r.get("c1", c.embedder.c1);
        r.get("c2", c.embedder.c2);
        r.get("c3", c.embedder.c3);
        r.get("crops_per_identity", c.embedder.crops_per_identity);
        r.get("epochs", c.embedder.epochs);
        r.get("seed", c.embedder.seed);
        r.get("mixture_components", c.embedder.mixture_components);
        r.get("mixture_seed", c.embedder.mixture_seed);
        r.finish();
    }
    if (const auto* s = top.sub("model")) {
        detail::FieldReader r(*s, "model");
        r.get("context_len", c.model.context_len);
        r.get("k", c.model.k);
        r.get("d_c", c.model.d_c);
        r.get("c1", c.model.c1);
        r.get("c2", c.model.c2);
        r.get("n_sin", c.model.n_sin);
        r.get("d_t", c.model.d_t);
        r.get("seed", c.model.seed);
        r.finish();
    }
    if (const auto* s = top.sub("train")) {
        detail::FieldReader r(*s, "train");
        r.get("steps", c.train.steps);
        r.get("batch", c.train.batch);
        r.get("lr", c.train.lr);
        r.get("ema_decay", c.train.ema_decay);
        r.get("p_face_drop", c.train.p_face_drop);
        r.get("p_text_drop", c.train.p_text_drop);
        r.get("seed", c.train.seed);
        r.get("checkpoint_every", c.train.checkpoint_every);
        r.get("log_every", c.train.log_every);
        r.finish();
    }
    if (const auto* s = top.sub("probes")) {
        detail::FieldReader r(*s, "probes");
        r.get("scenes_per_identity", c.probes.scenes_per_identity);
        r.get("epochs", c.probes.epochs);
        r.get("seed", c.probes.seed);
        r.get("tower_crops_per_identity", c.probes.tower_crops_per_identity);
        r.get("tower_epochs", c.probes.tower_epochs);
        r.get("tower_d_f", c.probes.tower_d_f);
        r.get("tower_seed", c.probes.tower_seed);
        r.get("scorer_pairs", c.probes.scorer_pairs);
        r.get("scorer_steps", c.probes.scorer_steps);
        r.get("scorer_batch", c.probes.scorer_batch);
        r.get("scorer_seed", c.probes.scorer_seed);
        r.finish();
    }
    if (const auto* s = top.sub("eval")) {
        detail::FieldReader r(*s, "eval");
        r.get("prompts", c.eval.prompts);
        r.get("seeds", c.eval.seeds);
        r.get("steps", c.eval.steps);
        r.get("ref_seed", c.eval.ref_seed);
        r.finish();
    }
    if (const auto* s = top.sub("consistency")) {
        detail::FieldReader r(*s, "consistency");
        r.get("prompts_used", c.consistency.prompts_used);
        r.get("seeds_used", c.consistency.seeds_used);
        r.get("embedding_seed", c.consistency.embedding_seed);
        r.finish();
    }
    if (const auto* s = top.sub("bias")) {
        detail::FieldReader r(*s, "bias");
        r.get("samples", c.bias.samples);
        r.get("seed", c.bias.seed);
        r.finish();
    }
    if (const auto* s = top.sub("presets")) {
        if (!s->is_object()) throw ContractError("config: 'presets' must be a JSON object");
        for (auto it = s->begin(); it != s->end(); ++it) {
            detail::FieldReader r(*it, "presets." + it.key());
            GuidanceWeights gw =
                c.presets.count(it.key()) ? c.presets.at(it.key()) : GuidanceWeights{};
            r.get("w", gw.w);
            r.get("c", gw.c);
            r.get("a", gw.a);
            r.finish();
            c.presets[it.key()] = gw;
        }
    }
    top.finish();
    c.validate();
    return c;
}

// Canonical form: every field spelled out, keys sorted by the serializer, so
// the hash of a config is independent of which defaults were written down.
inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["schedule"] = c.schedule;
    j["data"] = {{"examples", c.data.examples},
                 {"train_identities", c.data.train_identities},
                 {"eval_identities", c.data.eval_identities},
                 {"seed", c.data.seed},
                 {"canvas", c.data.canvas},
                 {"min_face", c.data.min_face}};
    j["embedder"] = {{"crop", c.embedder.crop},
                     {"d_f", c.embedder.d_f},
                     {"c1", c.embedder.c1},
                     {"c2", c.embedder.c2},
                     {"c3", c.embedder.c3},
                     {"crops_per_identity", c.embedder.crops_per_identity},
                     {"epochs", c.embedder.epochs},
                     {"seed", c.embedder.seed},
                     {"mixture_components", c.embedder.mixture_components},
                     {"mixture_seed", c.embedder.mixture_seed}};
    j["model"] = {{"context_len", c.model.context_len},
                  {"k", c.model.k},
                  {"d_c", c.model.d_c},
                  {"c1", c.model.c1},
                  {"c2", c.model.c2},
                  {"n_sin", c.model.n_sin},
                  {"d_t", c.model.d_t},
                  {"seed", c.model.seed}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch", c.train.batch},
                  {"lr", c.train.lr},
                  {"ema_decay", c.train.ema_decay},
                  {"p_face_drop", c.train.p_face_drop},
                  {"p_text_drop", c.train.p_text_drop},
                  {"seed", c.train.seed},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"log_every", c.train.log_every}};
    j["probes"] = {{"scenes_per_identity", c.probes.scenes_per_identity},
                   {"epochs", c.probes.epochs},
                   {"seed", c.probes.seed},
                   {"tower_crops_per_identity", c.probes.tower_crops_per_identity},
                   {"tower_epochs", c.probes.tower_epochs},
                   {"tower_d_f", c.probes.tower_d_f},
                   {"tower_seed", c.probes.tower_seed},
                   {"scorer_pairs", c.probes.scorer_pairs},
                   {"scorer_steps", c.probes.scorer_steps},
                   {"scorer_batch", c.probes.scorer_batch},
                   {"scorer_seed", c.probes.scorer_seed}};
    j["eval"] = {{"prompts", c.eval.prompts},
                 {"seeds", c.eval.seeds},
                 {"steps", c.eval.steps},
                 {"ref_seed", c.eval.ref_seed}};
    j["consistency"] = {{"prompts_used", c.consistency.prompts_used},
                        {"seeds_used", c.consistency.seeds_used},
                        {"embedding_seed", c.consistency.embedding_seed}};
    j["bias"] = {{"samples", c.bias.samples}, {"seed", c.bias.seed}};
    nlohmann::json presets = nlohmann::json::object();
    for (const auto& [name, gw] : c.presets)
        presets[name] = {{"w", gw.w}, {"c", gw.c}, {"a", gw.a}};
    j["presets"] = presets;
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// FNV-1a over the canonical serialization; the leading 8 hex digits name the
// run directory, so a changed config can never overwrite an older run.
inline std::string config_hash(const RunConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 8);
}

}  // namespace face0
