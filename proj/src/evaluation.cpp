#include "ppmn/evaluation.hpp"

#include <algorithm>
#include <cstdio>

#include "ppmn/errors.hpp"

namespace ppmn {

namespace {

template <typename T>
BinaryMask binarize_impl(std::span<const T> m, double tau) {
    BinaryMask out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<double>(m[i]) > tau ? 1 : 0;
    return out;
}

}  // namespace

BinaryMask binarize(std::span<const double> m, double tau) { return binarize_impl(m, tau); }
BinaryMask binarize(std::span<const float> m, double tau) { return binarize_impl(m, tau); }

std::vector<double> average_word_maps(std::span<const std::vector<double>> word_maps,
                                      std::span<const std::uint32_t> span) {
    if (span.empty()) throw UsageError("average_word_maps: empty word span");
    for (auto w : span) {
        if (w >= word_maps.size()) throw BoundsError("average_word_maps: word index " + std::to_string(w) + " out of range");
    }
    const std::size_t p = word_maps[span[0]].size();
    std::vector<double> out(p, 0.0);
    for (auto w : span) {
        if (word_maps[w].size() != p) throw DimensionError("average_word_maps: word maps differ in size");
        for (std::size_t i = 0; i < p; ++i) out[i] += word_maps[w][i];
    }
    for (auto& v : out) v /= static_cast<double>(span.size());
    return out;
}

BinaryMask aggregate_plural(std::span<const BinaryMask> instance_masks) {
    if (instance_masks.empty()) throw UsageError("aggregate_plural: no instance masks");
    BinaryMask out(instance_masks[0].size(), 0);
    for (const auto& m : instance_masks) {
        if (m.size() != out.size()) throw DimensionError("aggregate_plural: instance masks differ in size");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] || m[i]) ? 1 : 0;
    }
    return out;
}

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) {
        throw DimensionError("iou: mask sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

RecallCurve recall_curve(std::span<const PhraseResult> results, const CurveConfig& cfg) {
    if (results.empty()) throw UsageError("recall_curve: no results");
    if (cfg.points < 2) throw ConfigError("recall_curve: need at least two thresholds");
    RecallCurve curve;
    curve.thresholds.resize(cfg.points);
    curve.recalls.resize(cfg.points);
    const double total = static_cast<double>(results.size());
    for (std::size_t k = 0; k < cfg.points; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(cfg.points - 1);
        std::size_t hits = 0;
        for (const auto& r : results) {
            if (cfg.strict ? r.iou > t : r.iou >= t) ++hits;
        }
        curve.thresholds[k] = t;
        curve.recalls[k] = static_cast<double>(hits) / total;
    }
    return curve;
}

double average_recall(const RecallCurve& curve) {
    if (curve.thresholds.size() != curve.recalls.size() || curve.thresholds.size() < 2) {
        throw UsageError("average_recall: malformed curve");
    }
    double area = 0.0;
    for (std::size_t k = 0; k + 1 < curve.thresholds.size(); ++k) {
        const double dt = curve.thresholds[k + 1] - curve.thresholds[k];
        area += 0.5 * (curve.recalls[k] + curve.recalls[k + 1]) * dt;
    }
    return area;
}

EvalReport split_report(std::span<const PhraseResult> results, const CurveConfig& cfg) {
    auto make = [&](auto&& keep) {
        std::vector<PhraseResult> sel;
        for (const auto& r : results) {
            if (keep(r)) sel.push_back(r);
        }
        SplitResult s;
        s.count = sel.size();
        if (!sel.empty()) {
            s.curve = recall_curve(sel, cfg);
            s.ar = average_recall(s.curve);
        }
        return s;
    };
    EvalReport rep;
    rep.overall = make([](const PhraseResult&) { return true; });
    rep.things = make([](const PhraseResult& r) { return r.category == Category::thing; });
    rep.stuff = make([](const PhraseResult& r) { return r.category == Category::stuff; });
    rep.singulars = make([](const PhraseResult& r) { return r.plurality == Plurality::singular; });
    rep.plurals = make([](const PhraseResult& r) { return r.plurality == Plurality::plural; });
    return rep;
}

std::string curve_csv(const RecallCurve& curve) {
    std::string out = "iou,recall\n";
    char buf[64];
    for (std::size_t k = 0; k < curve.thresholds.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f\n", curve.thresholds[k], curve.recalls[k]);
        out += buf;
    }
    return out;
}

namespace {

const char* const kSplits[] = {"overall", "things", "stuff", "singulars", "plurals"};

template <typename Report>
auto* split_at(Report& r, std::size_t i) {
    decltype(&r.overall) all[] = {&r.overall, &r.things, &r.stuff, &r.singulars, &r.plurals};
    return all[i];
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json j;
    for (std::size_t i = 0; i < 5; ++i) {
        const SplitResult& s = *split_at(report, i);
        nlohmann::json e;
        e["ar"] = s.ar ? nlohmann::json(*s.ar) : nlohmann::json(nullptr);
        e["count"] = s.count;
        e["recalls"] = s.curve.recalls;
        j[kSplits[i]] = std::move(e);
        if (i == 0) j["thresholds"] = s.curve.thresholds;
    }
    return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport rep;
    try {
        std::vector<double> thresholds = j.at("thresholds").get<std::vector<double>>();
        for (std::size_t i = 0; i < 5; ++i) {
            const auto& e = j.at(kSplits[i]);
            SplitResult& s = *split_at(rep, i);
            s.count = e.at("count").get<std::size_t>();
            if (!e.at("ar").is_null()) s.ar = e.at("ar").get<double>();
            if (e.contains("recalls")) {
                s.curve.recalls = e.at("recalls").get<std::vector<double>>();
                if (!s.curve.recalls.empty()) s.curve.thresholds = thresholds;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report JSON: ") + e.what());
    }
    return rep;
}

}  // namespace ppmn
