#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ppmn/ground_truth.hpp"

namespace ppmn {

using BinaryMask = std::vector<std::uint8_t>;

struct PhraseResult {
    double iou = 0.0;
    Category category = Category::thing;
    Plurality plurality = Plurality::singular;
};

// Grid and comparison used for recall; defaults are 101 thresholds
// 0.00..1.00 and a strict `iou > t`.
struct CurveConfig {
    std::size_t points = 101;
    bool strict = true;
};

struct RecallCurve {
    std::vector<double> thresholds;
    std::vector<double> recalls;
};

struct SplitResult {
    std::optional<double> ar;  // absent when the split has no phrases
    std::size_t count = 0;
    RecallCurve curve;
};

struct EvalReport {
    SplitResult overall, things, stuff, singulars, plurals;
};

// Pixel on iff m > tau.
BinaryMask binarize(std::span<const double> m, double tau = 0.5);
BinaryMask binarize(std::span<const float> m, double tau = 0.5);

// Arithmetic mean of the maps selected by `span` (indices into word_maps).
std::vector<double> average_word_maps(std::span<const std::vector<double>> word_maps,
                                      std::span<const std::uint32_t> span);

// Pixelwise union.
BinaryMask aggregate_plural(std::span<const BinaryMask> instance_masks);

// |a & b| / |a | b|; two empty masks give 1.
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

RecallCurve recall_curve(std::span<const PhraseResult> results, const CurveConfig& cfg = {});

// Trapezoidal area under the curve.
double average_recall(const RecallCurve& curve);

EvalReport split_report(std::span<const PhraseResult> results, const CurveConfig& cfg = {});

// `iou,recall` header plus one row per threshold, six decimals.
std::string curve_csv(const RecallCurve& curve);

// {overall|things|stuff|singulars|plurals: {ar, count, recalls}, thresholds}.
// `ar` is null for an empty split.
nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// Standalone SVG line chart of recall versus IoU threshold: one polyline per
// split that has a curve, plus axes and a legend.
std::string report_svg(const EvalReport& report);

}  // namespace ppmn
