#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "face0/errors.hpp"
#include "face0/image.hpp"
#include "face0/rng.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// ---- captions ----

// Closed caption vocabulary. Ids are frozen: they are baked into datasets and
// checkpoints, so reordering them invalidates artifacts.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kEnd = 1;
inline constexpr const char* kWords[] = {
    "<pad>", "<end>", "a",      "the",   "photo",   "painting", "sketch",  "of",
    "person", "face",  "with",   "hat",   "glasses", "portrait", "plain",   "bright",
    "dark",   "warm",  "cool",   "scene", "image",   "style",    "simple",  "small",
    "large",  "wearing", "in",   "on",    "background", "picture", "closeup", "view",
};
inline constexpr int kSize = static_cast<int>(sizeof kWords / sizeof kWords[0]);
static_assert(kSize == 32);

inline int id_of(const std::string& word) {
    for (int i = 0; i < kSize; ++i)
        if (word == kWords[i]) return i;
    throw ContractError("unknown caption word '" + word + "'");
}
}  // namespace vocab

inline constexpr int kContextLen = 8;  // caption / context length L

using CaptionTokens = std::array<int, kContextLen>;

inline std::string caption_str(const CaptionTokens& c) {
    std::string s;
    for (int id : c) {
        if (id == vocab::kPad || id == vocab::kEnd) continue;
        if (!s.empty()) s += ' ';
        s += vocab::kWords[id];
    }
    return s;
}

// Parses a whitespace-separated prompt into tokens, appending the end marker
// and padding. Unknown words and over-long prompts are contract errors.
inline CaptionTokens caption_from_words(const std::string& text) {
    CaptionTokens toks{};
    toks.fill(vocab::kPad);
    int n = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && text[pos] == ' ') ++pos;
        if (pos >= text.size()) break;
        std::size_t end = text.find(' ', pos);
        if (end == std::string::npos) end = text.size();
        if (n >= kContextLen - 1)
            throw ContractError("caption '" + text + "' is longer than " +
                                std::to_string(kContextLen - 1) + " words");
        toks[static_cast<std::size_t>(n++)] = vocab::id_of(text.substr(pos, end - pos));
        pos = end;
    }
    toks[static_cast<std::size_t>(n)] = vocab::kEnd;
    return toks;
}

// ---- identities and scenes ----

// Eight appearance knobs, each in [0,1]. Identity alone fixes the face
// geometry and coloring; everything else about an image comes from the scene.
struct IdentityParams {
    std::array<float, 8> v{};

    float skin() const { return v[0]; }
    float hair_color() const { return v[1]; }
    float hair_style() const { return v[2]; }
    float face_w() const { return v[3]; }
    float face_h() const { return v[4]; }
    float eye_spacing() const { return v[5]; }
    float eye_size() const { return v[6]; }
    float mouth_curve() const { return v[7]; }

    // Quantized hair style: 0 bald, 1 flat, 2 round, 3 spiky.
    int hair_kind() const { return std::min(3, static_cast<int>(hair_style() * 4.0f)); }
};

inline float identity_linf(const IdentityParams& a, const IdentityParams& b) {
    float d = 0.0f;
    for (int i = 0; i < 8; ++i) d = std::max(d, std::abs(a.v[i] - b.v[i]));
    return d;
}

inline IdentityParams sample_identity(std::uint64_t seed) {
    Rng rng(stream_seed(seed, "identity"));
    IdentityParams id;
    for (auto& c : id.v) c = rng.uniform_f();
    return id;
}

// Pairwise-distinct identities (we enforce a margin above the 0.1 rule so
// downstream distinctness checks never sit on the boundary).
inline std::vector<IdentityParams> sample_identity_set(int n, std::uint64_t seed,
                                                       float min_linf = 0.15f) {
    std::vector<IdentityParams> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            IdentityParams cand = sample_identity(
                stream_seed(seed, "identity-set", static_cast<std::uint64_t>(i),
                            static_cast<std::uint64_t>(attempt)));
            bool ok = true;
            for (const auto& prev : out)
                if (identity_linf(cand, prev) < min_linf) {
                    ok = false;
                    break;
                }
            if (ok) {
                out.push_back(cand);
                placed = true;
            }
        }
        if (!placed)
            throw ContractError("could not place identity " + std::to_string(i) +
                                " with min distance " + std::to_string(min_linf));
    }
    return out;
}

enum class Style : int { photo = 0, painting = 1, sketch = 2 };
enum class Accessory : int { none = 0, hat = 1, glasses = 2 };

inline const char* style_word(Style s) {
    switch (s) {
        case Style::photo: return "photo";
        case Style::painting: return "painting";
        case Style::sketch: return "sketch";
    }
    throw ContractError("bad style tag");
}

struct SceneParams {
    float cx = 0.0f, cy = 0.0f;  // face center in pixels
    float scale = 0.0f;          // face size unit in pixels
    Style style = Style::photo;
    Accessory accessory = Accessory::none;
    std::uint64_t bg_seed = 0;
};

// Background drawing parameters, derived from the seed alone so rendering and
// captioning agree on them without storing derived fields.
struct BgParams {
    std::array<float, 3> base{};
    std::array<float, 3> amp{};
    float fx1, fy1, ph1;
    float fx2, fy2, ph2;

    float luma() const { return 0.299f * base[0] + 0.587f * base[1] + 0.114f * base[2]; }
};

inline BgParams bg_params(std::uint64_t bg_seed) {
    Rng rng(stream_seed(bg_seed, "background"));
    BgParams p;
    for (auto& b : p.base) b = rng.uniform_f(0.30f, 0.70f);
    for (auto& a : p.amp) a = rng.uniform_f(0.02f, 0.12f);
    p.fx1 = rng.uniform_f(0.05f, 0.20f);
    p.fy1 = rng.uniform_f(0.05f, 0.20f);
    p.ph1 = rng.uniform_f(0.0f, 6.2831853f);
    p.fx2 = rng.uniform_f(0.05f, 0.20f);
    p.fy2 = rng.uniform_f(0.05f, 0.20f);
    p.ph2 = rng.uniform_f(0.0f, 6.2831853f);
    return p;
}

// ---- face boxes ----

struct FaceBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel bounds
    int img_w = 0, img_h = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }

    void validate() const {
        if (!(0 <= x0 && x0 < x1 && x1 <= img_w && 0 <= y0 && y0 < y1 && y1 <= img_h))
            throw ContractError("invalid face box (" + std::to_string(x0) + "," +
                                std::to_string(y0) + "," + std::to_string(x1) + "," +
                                std::to_string(y1) + ") in " + std::to_string(img_w) + "x" +
                                std::to_string(img_h));
    }
};

inline FaceBox largest_face(const std::vector<FaceBox>& boxes) {
    if (boxes.empty()) throw ContractError("largest_face: empty box list");
    const FaceBox* best = &boxes[0];
    for (const FaceBox& b : boxes) {
        if (b.area() > best->area() ||
            (b.area() == best->area() &&
             std::pair(b.y0, b.x0) < std::pair(best->y0, best->x0)))
            best = &b;
    }
    return *best;
}

inline float box_iou(const FaceBox& a, const FaceBox& b) {
    const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    const long inter = static_cast<long>(std::max(0, ix1 - ix0)) * std::max(0, iy1 - iy0);
    const long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<float>(inter) / static_cast<float>(uni) : 0.0f;
}

// ---- rendering ----

namespace glyph {

// Horizontal half-extent of face-plus-hair, in pixels.
inline float half_width(const IdentityParams& id, float scale) {
    const float rx = scale * (0.55f + 0.35f * id.face_w());
    switch (id.hair_kind()) {
        case 1: return rx * 1.02f;
        case 2: return rx * 1.08f;
        case 3: return rx * 1.05f;
        default: return rx;
    }
}

// Extent above the face center (hair included), in pixels.
inline float top_extent(const IdentityParams& id, float scale) {
    const float ry = scale * (0.65f + 0.35f * id.face_h());
    switch (id.hair_kind()) {
        case 1: return ry * 1.10f;
        case 2: return ry * 1.25f;
        case 3: return ry * 1.30f;
        default: return ry;
    }
}

inline float bottom_extent(const IdentityParams& id, float scale) {
    return scale * (0.65f + 0.35f * id.face_h());
}

struct Palette {
    std::array<float, 3> skin, hair;
};

inline Palette palette(const IdentityParams& id) {
    const float s = id.skin();
    Palette p;
    p.skin = {0.95f - 0.63f * s, 0.80f - 0.58f * s, 0.62f - 0.50f * s};
    // Four hair anchors: black, brown, ginger, blond.
    static constexpr std::array<std::array<float, 3>, 4> anchors{{
        {0.05f, 0.04f, 0.03f},
        {0.35f, 0.20f, 0.10f},
        {0.65f, 0.35f, 0.15f},
        {0.85f, 0.70f, 0.40f},
    }};
    const float h = std::clamp(id.hair_color(), 0.0f, 1.0f) * 3.0f;
    const int lo = std::min(2, static_cast<int>(h));
    const float t = h - static_cast<float>(lo);
    for (int c = 0; c < 3; ++c)
        p.hair[c] = anchors[lo][c] + t * (anchors[lo + 1][c] - anchors[lo][c]);
    return p;
}

}  // namespace glyph

// Analytic renderer: colors a single sample point. Pure function of its
// arguments, evaluated on a supersampled grid by render().
namespace detail {

inline std::array<float, 3> shade_point(float x, float y, const IdentityParams& id,
                                        const SceneParams& sc, const BgParams& bg,
                                        const glyph::Palette& pal) {
    std::array<float, 3> col;
    // Background: base color plus two low-frequency waves.
    const float w1 = std::sin(x * bg.fx1 + y * bg.fy1 + bg.ph1);
    const float w2 = std::sin(x * bg.fx2 - y * bg.fy2 + bg.ph2);
    for (int c = 0; c < 3; ++c) col[c] = bg.base[c] + bg.amp[c] * (0.6f * w1 + 0.4f * w2);

    const float rx = sc.scale * (0.55f + 0.35f * id.face_w());
    const float ry = sc.scale * (0.65f + 0.35f * id.face_h());
    const float dx = x - sc.cx, dy = y - sc.cy;

    // Hair behind the face: style-specific cap above the face center.
    const int hk = id.hair_kind();
    if (hk != 0) {
        bool hair = false;
        if (hk == 1) {
            const float e = (dx / (rx * 1.02f)) * (dx / (rx * 1.02f)) +
                            (dy / (ry * 1.10f)) * (dy / (ry * 1.10f));
            hair = e <= 1.0f && dy < -0.45f * ry;
        } else if (hk == 2) {
            const float e = (dx / (rx * 1.08f)) * (dx / (rx * 1.08f)) +
                            (dy / (ry * 1.25f)) * (dy / (ry * 1.25f));
            hair = e <= 1.0f && dy < -0.15f * ry;
        } else {
            // Spiky: the top boundary follows a triangle wave.
            if (std::abs(dx) < rx * 1.05f && dy < -0.30f * ry) {
                const float saw = std::abs(
                    2.0f * (x * 0.45f - std::floor(x * 0.45f)) - 1.0f);  // 0..1 triangle
                if (dy > -(1.00f + 0.30f * saw) * ry) hair = true;
            }
        }
        if (hair) col = pal.hair;
    }

    // Face ellipse.
    const float fe = (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry);
    if (fe <= 1.0f) col = pal.skin;

    // Eyes.
    const float d = rx * (0.35f + 0.25f * id.eye_spacing());
    const float re = sc.scale * (0.06f + 0.08f * id.eye_size());
    const float ey = sc.cy - 0.25f * ry;
    for (float sx : {-1.0f, 1.0f}) {
        const float ex = sc.cx + sx * d;
        const float ee = ((x - ex) / (re * 1.2f)) * ((x - ex) / (re * 1.2f)) +
                         ((y - ey) / re) * ((y - ey) / re);
        if (ee <= 1.0f) col = {0.08f, 0.08f, 0.10f};
    }

    // Mouth: a thin curved band; curvature sign encodes smile vs frown.
    {
        const float rm = rx * 0.50f;
        const float my = sc.cy + 0.45f * ry;
        const float curve = 2.0f * (id.mouth_curve() - 0.5f);
        if (std::abs(dx) <= rm) {
            const float u = dx / rm;
            const float yc = my + curve * 0.35f * ry * u * u;
            const float thick = std::max(0.8f, sc.scale * 0.06f);
            if (std::abs(y - yc) <= thick) col = {0.55f, 0.15f, 0.18f};
        }
    }

    // Glasses: rings around the eyes plus a bridge.
    if (sc.accessory == Accessory::glasses) {
        const float rg = re * 1.7f;
        const float ring = std::max(0.7f, sc.scale * 0.05f);
        for (float sx : {-1.0f, 1.0f}) {
            const float ex = sc.cx + sx * d;
            const float dist = std::sqrt((x - ex) * (x - ex) + (y - ey) * (y - ey));
            if (std::abs(dist - rg) <= ring) col = {0.10f, 0.10f, 0.12f};
        }
        if (std::abs(y - ey) <= ring && std::abs(dx) <= d - rg + ring)
            col = {0.10f, 0.10f, 0.12f};
    }

    // Hat: positioned from the scene alone (never from identity), so pixels
    // outside the face box depend only on the scene.
    if (sc.accessory == Accessory::hat) {
        const float top = sc.cy - 2.00f * sc.scale;
        const float brim = sc.cy - 1.55f * sc.scale;
        if (y >= top && y <= brim) {
            const float cap_half = 0.95f * sc.scale;
            const float brim_half = 1.25f * sc.scale;
            const bool in_cap = std::abs(dx) <= cap_half;
            const bool in_brim = y >= brim - 0.12f * sc.scale && std::abs(dx) <= brim_half;
            if (in_cap || in_brim) col = {0.12f, 0.15f, 0.35f};
        }
    }

    return col;
}

inline void style_grade(Style style, std::array<float, 3>& col) {
    switch (style) {
        case Style::photo: break;
        case Style::painting:
            col[0] = col[0] * 1.08f + 0.03f;
            col[2] = col[2] * 0.90f - 0.02f;
            break;
        case Style::sketch: {
            const float luma = 0.299f * col[0] + 0.587f * col[1] + 0.114f * col[2];
            for (auto& c : col) c = 0.2f * c + 0.8f * luma + 0.05f;
            break;
        }
    }
    for (auto& c : col) c = std::clamp(c, 0.0f, 1.0f);
}

}  // namespace detail

// Renders identity + scene to an image in [-1,1] and the tight face box.
// The box covers everything whose pixels depend on the identity: face, hair,
// and glasses (their rings follow the eyes). Hats are excluded because they
// are positioned from the scene alone. 2x2 supersampling.
inline std::pair<Tensor, FaceBox> render(const IdentityParams& id, const SceneParams& sc,
                                         int canvas) {
    float hw = glyph::half_width(id, sc.scale);
    const float te = glyph::top_extent(id, sc.scale);
    const float be = glyph::bottom_extent(id, sc.scale);
    if (sc.cx - hw < 0.0f || sc.cx + hw > static_cast<float>(canvas) || sc.cy - te < 0.0f ||
        sc.cy + be > static_cast<float>(canvas))
        throw ContractError("render: face extends outside the canvas");
    if (sc.accessory == Accessory::glasses) {
        const float rx = sc.scale * (0.55f + 0.35f * id.face_w());
        const float d = rx * (0.35f + 0.25f * id.eye_spacing());
        const float re = sc.scale * (0.06f + 0.08f * id.eye_size());
        const float ring = std::max(0.7f, sc.scale * 0.05f);
        hw = std::max(hw, d + re * 1.7f + ring);
    }

    const BgParams bg = bg_params(sc.bg_seed);
    const glyph::Palette pal = glyph::palette(id);
    Tensor img = Tensor::zeros({3, canvas, canvas});
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            std::array<float, 3> acc{0.0f, 0.0f, 0.0f};
            for (float oy : {0.25f, 0.75f})
                for (float ox : {0.25f, 0.75f}) {
                    auto c = detail::shade_point(static_cast<float>(x) + ox,
                                                 static_cast<float>(y) + oy, id, sc, bg, pal);
                    for (int i = 0; i < 3; ++i) acc[i] += c[i];
                }
            std::array<float, 3> col{acc[0] * 0.25f, acc[1] * 0.25f, acc[2] * 0.25f};
            detail::style_grade(sc.style, col);
            for (int c = 0; c < 3; ++c) img.at3(c, y, x) = col[c] * 2.0f - 1.0f;
        }

    FaceBox box;
    box.img_w = canvas;
    box.img_h = canvas;
    box.x0 = std::max(0, static_cast<int>(std::floor(sc.cx - hw)));
    box.y0 = std::max(0, static_cast<int>(std::floor(sc.cy - te)));
    box.x1 = std::min(canvas, static_cast<int>(std::ceil(sc.cx + hw)));
    box.y1 = std::min(canvas, static_cast<int>(std::ceil(sc.cy + be)));
    box.validate();
    return {std::move(img), box};
}

// Scene sampling: draws until the glyph box meets the minimum size and fits
// the canvas. Caption-visible scene attributes (style, accessory, size and
// background brightness words) are decided here.
inline SceneParams sample_scene(const IdentityParams& id, Rng& rng, int canvas, int min_face) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        SceneParams sc;
        sc.scale = rng.uniform_f(8.5f, 14.0f);
        const float hw = glyph::half_width(id, sc.scale);
        const float te = glyph::top_extent(id, sc.scale);
        const float be = glyph::bottom_extent(id, sc.scale);
        const float margin = 1.0f;
        const float xlo = hw + margin, xhi = static_cast<float>(canvas) - hw - margin;
        const float ylo = te + margin, yhi = static_cast<float>(canvas) - be - margin;
        sc.cx = rng.uniform_f(xlo, xhi);
        sc.cy = rng.uniform_f(ylo, yhi);
        const double su = rng.uniform();
        sc.style = su < 0.5 ? Style::photo : (su < 0.75 ? Style::painting : Style::sketch);
        const double au = rng.uniform();
        sc.accessory =
            au < 0.5 ? Accessory::none : (au < 0.75 ? Accessory::hat : Accessory::glasses);
        sc.bg_seed = rng.next_u64();
        if (xlo >= xhi || ylo >= yhi) continue;
        if (2.0f * hw < static_cast<float>(min_face) ||
            te + be < static_cast<float>(min_face))
            continue;
        // Hat must stay on canvas too.
        if (sc.accessory == Accessory::hat && sc.cy - 2.0f * sc.scale < 0.0f) continue;
        return sc;
    }
    throw ContractError("sample_scene: could not place a face of at least " +
                        std::to_string(min_face) + " px on a " + std::to_string(canvas) +
                        " px canvas");
}

// Caption template: five content words (style, size, subject, lighting,
// accessory-or-filler), then the end marker and padding. Identity is not an
// input, so captions can never leak who is in the image.
inline CaptionTokens make_caption(const SceneParams& sc, Rng& rng) {
    CaptionTokens toks{};
    toks.fill(vocab::kPad);
    toks[0] = vocab::id_of(style_word(sc.style));
    toks[1] = vocab::id_of(sc.scale >= 11.0f ? "large" : "small");
    toks[2] = vocab::id_of(rng.bernoulli(0.5) ? "person" : "face");
    toks[3] = vocab::id_of(bg_params(sc.bg_seed).luma() > 0.5f ? "bright" : "dark");
    switch (sc.accessory) {
        case Accessory::hat: toks[4] = vocab::id_of("hat"); break;
        case Accessory::glasses: toks[4] = vocab::id_of("glasses"); break;
        case Accessory::none: {
            static constexpr const char* fillers[] = {"plain", "simple", "closeup"};
            toks[4] = vocab::id_of(fillers[rng.uniform_int(3)]);
            break;
        }
    }
    toks[5] = vocab::kEnd;
    return toks;
}

// An all-padding caption: the unconditioned text input.
inline CaptionTokens padding_caption() {
    CaptionTokens toks{};
    toks.fill(vocab::kPad);
    return toks;
}

// ---- dataset ----

struct DatasetRecord {
    std::string image;  // path relative to the dataset root
    CaptionTokens caption{};
    FaceBox box;
    int identity = 0;  // index into DatasetManifest::identities
    int style = 0;
    int accessory = 0;
    float scale = 0.0f;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    int canvas = 0;
    int min_face = 0;
    int n_train_identities = 0;
    std::vector<IdentityParams> identities;  // train identities first, then eval
    std::vector<DatasetRecord> records;

    int n_eval_identities() const {
        return static_cast<int>(identities.size()) - n_train_identities;
    }
    const IdentityParams& train_identity(int i) const {
        if (i < 0 || i >= n_train_identities) throw ContractError("train identity index out of range");
        return identities[static_cast<std::size_t>(i)];
    }
    const IdentityParams& eval_identity(int i) const {
        if (i < 0 || i >= n_eval_identities()) throw ContractError("eval identity index out of range");
        return identities[static_cast<std::size_t>(n_train_identities + i)];
    }
};

namespace detail {

inline nlohmann::json box_json(const FaceBox& b) {
    return nlohmann::json{{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1},
                          {"img_w", b.img_w}, {"img_h", b.img_h}};
}

inline FaceBox box_from_json(const nlohmann::json& j) {
    FaceBox b;
    b.x0 = j.at("x0").get<int>();
    b.y0 = j.at("y0").get<int>();
    b.x1 = j.at("x1").get<int>();
    b.y1 = j.at("y1").get<int>();
    b.img_w = j.at("img_w").get<int>();
    b.img_h = j.at("img_h").get<int>();
    b.validate();
    return b;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["canvas"] = m.canvas;
    j["min_face"] = m.min_face;
    j["n_train_identities"] = m.n_train_identities;
    auto ids = nlohmann::json::array();
    for (const auto& id : m.identities) ids.push_back(id.v);
    j["identities"] = std::move(ids);
    auto recs = nlohmann::json::array();
    for (const auto& r : m.records) {
        nlohmann::json rj;
        rj["image"] = r.image;
        rj["caption"] = r.caption;
        rj["box"] = detail::box_json(r.box);
        rj["identity"] = r.identity;
        rj["style"] = r.style;
        rj["accessory"] = r.accessory;
        rj["scale"] = r.scale;
        recs.push_back(std::move(rj));
    }
    j["records"] = std::move(recs);
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.canvas = j.at("canvas").get<int>();
    m.min_face = j.at("min_face").get<int>();
    m.n_train_identities = j.at("n_train_identities").get<int>();
    for (const auto& idj : j.at("identities")) {
        IdentityParams id;
        id.v = idj.get<std::array<float, 8>>();
        m.identities.push_back(id);
    }
    for (const auto& rj : j.at("records")) {
        DatasetRecord r;
        r.image = rj.at("image").get<std::string>();
        r.caption = rj.at("caption").get<CaptionTokens>();
        r.box = detail::box_from_json(rj.at("box"));
        r.identity = rj.at("identity").get<int>();
        r.style = rj.at("style").get<int>();
        r.accessory = rj.at("accessory").get<int>();
        r.scale = rj.at("scale").get<float>();
        m.records.push_back(std::move(r));
    }
    return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << manifest_to_json(m).dump(1) << '\n';
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' (run gen-data first?)");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + path.string() + "' is not a valid manifest: " + e.what());
    }
    try {
        return manifest_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + path.string() + "' is missing manifest fields: " + e.what());
    }
}

// Generates the dataset: images under out_dir/images/NNNNNN.ppm plus
// out_dir/manifest.json. Every record uses a training identity; evaluation
// identities are listed in the manifest but have no images, so the diffusion
// model never sees them.
inline DatasetManifest build_dataset(int n_examples, int n_train_ids, int n_eval_ids,
                                     std::uint64_t seed, const std::filesystem::path& out_dir,
                                     int canvas = 48, int min_face = 12) {
    if (n_train_ids < 2) throw ContractError("build_dataset: need at least 2 train identities");
    if (n_eval_ids < 0 || n_examples < 0) throw ContractError("build_dataset: negative count");

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());

    DatasetManifest m;
    m.seed = seed;
    m.canvas = canvas;
    m.min_face = min_face;
    m.n_train_identities = n_train_ids;
    m.identities = sample_identity_set(n_train_ids + n_eval_ids, seed);

    char name[32];
    for (int i = 0; i < n_examples; ++i) {
        Rng rng(stream_seed(seed, "record", static_cast<std::uint64_t>(i)));
        DatasetRecord r;
        r.identity = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_train_ids)));
        const IdentityParams& id = m.identities[static_cast<std::size_t>(r.identity)];
        SceneParams sc = sample_scene(id, rng, canvas, min_face);
        auto [img, box] = render(id, sc, canvas);
        r.caption = make_caption(sc, rng);
        r.box = box;
        r.style = static_cast<int>(sc.style);
        r.accessory = static_cast<int>(sc.accessory);
        r.scale = sc.scale;
        std::snprintf(name, sizeof name, "images/%06d.ppm", i);
        r.image = name;
        write_ppm(out_dir / r.image, img);
        m.records.push_back(std::move(r));
    }
    save_manifest(out_dir / "manifest.json", m);
    return m;
}

}  // namespace face0
