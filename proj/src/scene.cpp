#include "ppmn/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ppmn/errors.hpp"
#include "ppmn/rng.hpp"

namespace ppmn {

namespace {

constexpr std::uint64_t kPhraseCodebookSalt = 0xA5A5'5A5A'C3C3'3C3CULL;
constexpr int kPlacementAttempts = 200;
constexpr std::size_t kMinThingArea = 2;

template <typename V>
void shuffle(V& v, CounterRng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rng.below(i)]);
    }
}

struct Layout {
    std::vector<std::uint8_t> segments;
    std::vector<SegmentInfo> info;
};

// One attempt at painting bands and instances; empty optional if some
// segment lost all (or, for things, nearly all) of its pixels.
std::optional<Layout> try_layout(const SceneConfig& cfg, CounterRng& rng) {
    const std::size_t h = cfg.height, w = cfg.width;
    const std::size_t ks = cfg.stuff_classes();
    Layout lay;
    lay.segments.assign(h * w, 0);

    std::vector<std::uint32_t> stuff(ks);
    std::iota(stuff.begin(), stuff.end(), 0u);
    shuffle(stuff, rng);
    // ks - 1 distinct cut rows in 1..h-1.
    std::vector<std::size_t> rows(h - 1);
    std::iota(rows.begin(), rows.end(), std::size_t{1});
    shuffle(rows, rng);
    std::vector<std::size_t> cuts(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(ks - 1));
    std::sort(cuts.begin(), cuts.end());
    cuts.insert(cuts.begin(), 0);
    cuts.push_back(h);
    for (std::size_t b = 0; b < ks; ++b) {
        const auto id = static_cast<std::uint32_t>(lay.info.size());
        lay.info.push_back({id, stuff[b], Category::stuff});
        for (std::size_t y = cuts[b]; y < cuts[b + 1]; ++y)
            for (std::size_t x = 0; x < w; ++x) lay.segments[y * w + x] = static_cast<std::uint8_t>(id);
    }

    std::vector<std::uint32_t> things;
    for (std::size_t c = ks; c < cfg.num_classes; ++c) things.push_back(static_cast<std::uint32_t>(c));
    shuffle(things, rng);
    const double min_side = std::max(2.0, std::min(h, w) / 5.0);
    const double max_side = std::max(min_side, std::min(h, w) / 2.0);
    for (auto cls : things) {
        const std::size_t count = rng.uniform() < cfg.plural_fraction ? 2 + rng.below(2) : 1;
        for (std::size_t k = 0; k < count; ++k) {
            const auto id = static_cast<std::uint32_t>(lay.info.size());
            lay.info.push_back({id, cls, Category::thing});
            const double sh = rng.uniform(min_side, max_side);
            const double sw = rng.uniform(min_side, max_side);
            const double cy = rng.uniform(0.0, static_cast<double>(h));
            const double cx = rng.uniform(0.0, static_cast<double>(w));
            const bool ellipse = rng.uniform() < 0.5;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const double dy = (static_cast<double>(y) + 0.5 - cy) / (sh / 2.0);
                    const double dx = (static_cast<double>(x) + 0.5 - cx) / (sw / 2.0);
                    const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
                    if (inside) lay.segments[y * w + x] = static_cast<std::uint8_t>(id);
                }
            }
        }
    }

    std::vector<std::size_t> area(lay.info.size(), 0);
    for (auto s : lay.segments) ++area[s];
    for (const auto& seg : lay.info) {
        const std::size_t need = seg.category == Category::thing ? kMinThingArea : 1;
        if (area[seg.id] < need) return std::nullopt;
    }
    return lay;
}

}  // namespace

std::size_t SceneConfig::stuff_classes() const {
    const auto things = static_cast<std::size_t>(std::llround(things_fraction * static_cast<double>(num_classes)));
    return std::max<std::size_t>(1, num_classes - std::min(things, num_classes));
}

void SceneConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("scene config: " + m); };
    if (height == 0 || width == 0) fail("grid extents must be positive");
    if (num_phrases == 0) fail("num_phrases must be at least 1");
    if (num_classes == 0) fail("num_classes must be at least 1");
    if (visual_dim == 0 || phrase_dim == 0) fail("feature dimensions must be positive");
    if (num_classes > visual_dim || num_classes > phrase_dim) {
        fail("orthonormal codebooks need num_classes <= visual_dim and <= phrase_dim");
    }
    for (double f : {things_fraction, plural_fraction, ungrounded_fraction}) {
        if (!(f >= 0.0 && f <= 1.0)) fail("fractions must lie in [0, 1]");
    }
    if (noise_sigma < 0 || appearance_jitter < 0) fail("noise scales must be non-negative");
    if (max_words == 0) fail("max_words must be at least 1");
    if (num_classes > 255) fail("at most 255 classes fit the u8 segment map");
}

bool Sample::operator==(const Sample& o) const {
    auto same_ann = [](const PhraseAnnotation& a, const PhraseAnnotation& b) {
        return a.id == b.id && a.class_id == b.class_id && a.grounded == b.grounded && a.plurality == b.plurality &&
               a.category == b.category && a.word_span == b.word_span && a.instances == b.instances;
    };
    auto same_seg = [](const SegmentInfo& a, const SegmentInfo& b) {
        return a.id == b.id && a.class_id == b.class_id && a.category == b.category;
    };
    return height == o.height && width == o.width && visual_dim == o.visual_dim && phrase_dim == o.phrase_dim &&
           visual == o.visual && phrases == o.phrases && words == o.words && segments == o.segments &&
           std::equal(segment_info.begin(), segment_info.end(), o.segment_info.begin(), o.segment_info.end(), same_seg) &&
           std::equal(annotations.begin(), annotations.end(), o.annotations.begin(), o.annotations.end(), same_ann) &&
           truth.masks == o.truth.masks && truth.valid == o.truth.valid;
}

std::vector<double> orthonormal_codebook(std::size_t rows, std::size_t dim, std::uint64_t seed) {
    if (rows > dim) throw ConfigError("orthonormal codebook: more rows than dimensions");
    CounterRng rng(seed);
    std::vector<double> m(rows * dim);
    for (std::size_t r = 0; r < rows; ++r) {
        double* v = m.data() + r * dim;
        for (int attempt = 0;; ++attempt) {
            for (std::size_t i = 0; i < dim; ++i) v[i] = rng.normal();
            // Modified Gram-Schmidt, applied twice for numerical orthogonality.
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t q = 0; q < r; ++q) {
                    const double* u = m.data() + q * dim;
                    double d = 0.0;
                    for (std::size_t i = 0; i < dim; ++i) d += u[i] * v[i];
                    for (std::size_t i = 0; i < dim; ++i) v[i] -= d * u[i];
                }
            }
            double norm = 0.0;
            for (std::size_t i = 0; i < dim; ++i) norm += v[i] * v[i];
            norm = std::sqrt(norm);
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < dim; ++i) v[i] /= norm;
                break;
            }
            if (attempt > 16) throw GenerationError("orthonormal codebook: degenerate draws");
        }
    }
    return m;
}

Sample generate_scene(const SceneConfig& cfg) {
    cfg.validate();
    const std::uint64_t book_seed = cfg.codebook_seed.value_or(cfg.seed);
    const auto class_codes = orthonormal_codebook(cfg.num_classes, cfg.visual_dim, book_seed);
    const auto phrase_codes = orthonormal_codebook(cfg.num_classes, cfg.phrase_dim, book_seed ^ kPhraseCodebookSalt);

    const std::size_t h = cfg.height, w = cfg.width, p = h * w;
    if (cfg.stuff_classes() > h) {
        throw GenerationError("cannot place " + std::to_string(cfg.stuff_classes()) + " stuff bands in " +
                              std::to_string(h) + " rows");
    }
    CounterRng rng(cfg.seed);
    std::optional<Layout> layout;
    for (int attempt = 0; attempt < kPlacementAttempts && !layout; ++attempt) layout = try_layout(cfg, rng);
    if (!layout) {
        throw GenerationError("could not place " + std::to_string(cfg.num_classes) + " classes on a " +
                              std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    if (layout->info.size() > 256) throw GenerationError("more than 256 segments");

    Sample s;
    s.height = h;
    s.width = w;
    s.visual_dim = cfg.visual_dim;
    s.phrase_dim = cfg.phrase_dim;
    s.segments = std::move(layout->segments);
    s.segment_info = std::move(layout->info);

    // Pixel features: class code + per-segment offset + per-pixel noise.
    std::vector<double> offsets(s.segment_info.size() * cfg.visual_dim, 0.0);
    for (auto& o : offsets) o = cfg.appearance_jitter * rng.normal();
    s.visual.resize(p * cfg.visual_dim);
    for (std::size_t i = 0; i < p; ++i) {
        const auto seg = s.segments[i];
        const double* code = class_codes.data() + s.segment_info[seg].class_id * cfg.visual_dim;
        const double* off = offsets.data() + seg * cfg.visual_dim;
        for (std::size_t c = 0; c < cfg.visual_dim; ++c) {
            s.visual[i * cfg.visual_dim + c] = static_cast<float>(code[c] + off[c] + cfg.noise_sigma * rng.normal());
        }
    }

    // Phrase classes: grounded phrases cycle through the shuffled classes so
    // every class is referenced before any repeats.
    const std::size_t n = cfg.num_phrases;
    const auto ungrounded = std::min(n, static_cast<std::size_t>(std::llround(cfg.ungrounded_fraction * static_cast<double>(n))));
    std::vector<std::uint32_t> classes(cfg.num_classes);
    std::iota(classes.begin(), classes.end(), 0u);
    shuffle(classes, rng);
    std::vector<std::pair<std::uint32_t, bool>> phrase_class;  // (class, grounded)
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n - ungrounded) {
            phrase_class.emplace_back(classes[i % classes.size()], true);
        } else {
            phrase_class.emplace_back(static_cast<std::uint32_t>(rng.below(cfg.num_classes)), false);
        }
    }
    shuffle(phrase_class, rng);

    const std::size_t ks = cfg.stuff_classes();
    s.truth.phrases = n;
    s.truth.height = h;
    s.truth.width = w;
    s.truth.masks.assign(n * p, 0);
    s.phrases.resize(n * cfg.phrase_dim);
    for (std::size_t k = 0; k < n; ++k) {
        const auto [cls, grounded] = phrase_class[k];
        PhraseAnnotation a;
        a.id = static_cast<std::uint32_t>(k);
        a.class_id = cls;
        a.grounded = grounded;
        a.category = cls < ks ? Category::stuff : Category::thing;
        if (grounded) {
            for (const auto& seg : s.segment_info) {
                if (seg.class_id == cls) a.instances.push_back(seg.id);
            }
        }
        a.plurality = a.instances.size() >= 2 ? Plurality::plural : Plurality::singular;
        for (std::size_t i = 0; i < p; ++i) {
            if (std::find(a.instances.begin(), a.instances.end(), s.segments[i]) != a.instances.end()) {
                s.truth.masks[k * p + i] = 1;
            }
        }
        const double* code = phrase_codes.data() + cls * cfg.phrase_dim;
        for (std::size_t c = 0; c < cfg.phrase_dim; ++c) {
            s.phrases[k * cfg.phrase_dim + c] = static_cast<float>(code[c] + cfg.noise_sigma * rng.normal());
        }
        const std::size_t nw = 1 + rng.below(cfg.max_words);
        for (std::size_t j = 0; j < nw; ++j) {
            a.word_span.push_back(static_cast<std::uint32_t>(s.num_words()));
            for (std::size_t c = 0; c < cfg.phrase_dim; ++c) {
                s.words.push_back(static_cast<float>(code[c] + cfg.noise_sigma * rng.normal()));
            }
        }
        s.truth.valid.push_back(grounded);
        s.truth.category.push_back(a.category);
        s.truth.plurality.push_back(a.plurality);
        s.annotations.push_back(std::move(a));
    }
    return s;
}

std::vector<Sample> generate_dataset(const SceneConfig& cfg, std::size_t samples) {
    std::vector<Sample> out;
    out.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        SceneConfig c = cfg;
        c.codebook_seed = cfg.codebook_seed.value_or(cfg.seed);
        c.seed = cfg.seed ^ static_cast<std::uint64_t>(i);
        out.push_back(generate_scene(c));
    }
    return out;
}

}  // namespace ppmn
