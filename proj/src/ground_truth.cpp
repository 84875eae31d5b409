#include "ppmn/ground_truth.hpp"

#include <algorithm>

#include "ppmn/errors.hpp"

namespace ppmn {

std::string to_string(Category c) { return c == Category::thing ? "thing" : "stuff"; }
std::string to_string(Plurality p) { return p == Plurality::singular ? "singular" : "plural"; }

Category category_from_string(const std::string& s) {
    if (s == "thing") return Category::thing;
    if (s == "stuff") return Category::stuff;
    throw FormatError("unknown category '" + s + "'");
}

Plurality plurality_from_string(const std::string& s) {
    if (s == "singular") return Plurality::singular;
    if (s == "plural") return Plurality::plural;
    throw FormatError("unknown plurality '" + s + "'");
}

std::size_t GroundTruth::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

void GroundTruth::validate() const {
    if (masks.size() != phrases * pixels() || valid.size() != phrases || category.size() != phrases ||
        plurality.size() != phrases) {
        throw FormatError("ground truth: array sizes disagree with " + std::to_string(phrases) + " phrases");
    }
    for (std::size_t n = 0; n < phrases; ++n) {
        const auto* r = row(n);
        for (std::size_t i = 0; i < pixels(); ++i) {
            if (r[i] > 1) throw FormatError("ground truth: mask values must be 0 or 1");
            if (!valid[n] && r[i] != 0) {
                throw FormatError("ground truth: phrase " + std::to_string(n) + " is not grounded but has a mask");
            }
        }
    }
}

}  // namespace ppmn
