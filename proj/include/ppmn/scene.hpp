#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "ppmn/ground_truth.hpp"

namespace ppmn {

struct SceneConfig {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t num_phrases = 6;
    std::size_t num_classes = 5;
    std::size_t visual_dim = 32;
    std::size_t phrase_dim = 32;
    double things_fraction = 0.6;      // share of classes that are things; at least one class is stuff
    double plural_fraction = 0.3;      // chance a thing class gets 2-3 instances
    double ungrounded_fraction = 0.0;  // share of phrases without a mask
    double noise_sigma = 0.1;
    double appearance_jitter = 0.0;    // std of a per-segment offset added to every pixel of the segment
    std::size_t max_words = 3;         // words per phrase drawn from 1..max_words
    std::uint64_t seed = 0;
    // Seed of the class and phrase codebooks. Samples of one dataset share
    // it; defaults to `seed`.
    std::optional<std::uint64_t> codebook_seed;

    std::size_t stuff_classes() const;
    void validate() const;
};

struct SegmentInfo {
    std::uint32_t id = 0;
    std::uint32_t class_id = 0;
    Category category = Category::stuff;
};

struct PhraseAnnotation {
    std::uint32_t id = 0;
    std::uint32_t class_id = 0;
    bool grounded = false;
    Plurality plurality = Plurality::singular;
    Category category = Category::stuff;
    std::vector<std::uint32_t> word_span;  // indices into Sample::words
    std::vector<std::uint32_t> instances;  // segment ids making up the mask
};

struct Sample {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t visual_dim = 0;
    std::size_t phrase_dim = 0;
    std::vector<float> visual;    // height x width x visual_dim
    std::vector<float> phrases;   // N x phrase_dim
    std::vector<float> words;     // num_words x phrase_dim
    std::vector<std::uint8_t> segments;  // height x width segment ids
    std::vector<SegmentInfo> segment_info;
    std::vector<PhraseAnnotation> annotations;
    GroundTruth truth;

    std::size_t num_phrases() const { return annotations.size(); }
    std::size_t num_words() const { return phrase_dim ? words.size() / phrase_dim : 0; }

    bool operator==(const Sample& o) const;
};

// K x dim matrix of orthonormal rows (Gram-Schmidt on Gaussian draws).
std::vector<double> orthonormal_codebook(std::size_t rows, std::size_t dim, std::uint64_t seed);

// Deterministic synthetic scene. Stuff classes tile the grid as horizontal
// bands, thing instances are rectangles or ellipses painted on top; each
// pixel ends up with exactly one segment id. Throws GenerationError if some
// segment cannot keep a visible pixel.
Sample generate_scene(const SceneConfig& cfg);

// Per-sample seeds are seed ^ index; the codebook seed stays `cfg.seed`.
std::vector<Sample> generate_dataset(const SceneConfig& cfg, std::size_t samples);

}  // namespace ppmn
