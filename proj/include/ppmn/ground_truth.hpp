#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ppmn {

enum class Category { thing, stuff };
enum class Plurality { singular, plural };

std::string to_string(Category c);
std::string to_string(Plurality p);
Category category_from_string(const std::string& s);
Plurality plurality_from_string(const std::string& s);

// Per-phrase binary masks with validity flags and tags. Rows of invalid
// (ungrounded or padded) phrases are all zero.
struct GroundTruth {
    std::size_t phrases = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> masks;  // phrases x height x width, values 0/1
    std::vector<bool> valid;
    std::vector<Category> category;
    std::vector<Plurality> plurality;

    std::size_t pixels() const { return height * width; }
    std::size_t valid_count() const;
    const std::uint8_t* row(std::size_t n) const { return masks.data() + n * pixels(); }

    // Throws FormatError if sizes disagree, a mask value is not 0/1, or an
    // invalid row is nonzero.
    void validate() const;
};

}  // namespace ppmn
