#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <vector>

namespace protomatch {

/// BOP object id.
struct ClassId {
    std::uint32_t value = 0;

    friend auto operator<=>(const ClassId&, const ClassId&) = default;
};

/// Raw extractor output; components must be finite.
struct Embedding {
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const Embedding&, const Embedding&) = default;
};

/// Mean of the L2-normalized support embeddings of one class. Not itself
/// unit length unless all supports coincide.
struct Prototype {
    ClassId class_id;
    std::vector<double> vector;
    std::uint16_t k_support = 0;

    friend bool operator==(const Prototype&, const Prototype&) = default;
};

}  // namespace protomatch

template <>
struct std::hash<protomatch::ClassId> {
    std::size_t operator()(const protomatch::ClassId& c) const noexcept {
        return std::hash<std::uint32_t>{}(c.value);
    }
};
