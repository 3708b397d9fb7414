#pragma once

/// @file prototype_store.hpp
/// Class prototypes built from support-set embeddings, and their on-disk
/// form.
///
/// Store file layout (little-endian):
///   "DPMP" | version u16 | dim u32 | count u32 | provenance_len u32 | provenance bytes
///   count x ( class_id u32 | k_support u16 | dim x f64 )
///   crc32 u32 over every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protomatch/types.hpp"

namespace protomatch {

inline constexpr std::uint16_t kStoreVersion = 1;

struct SupportSet {
    ClassId class_id;
    std::vector<Embedding> embeddings;
};

/// Mean of the normalized supports, accumulated in input order.
/// Throws InvalidArgument for an empty set, DimensionMismatch for ragged
/// supports, and ZeroVector naming the offending support index.
Prototype build_prototype(const SupportSet& support);

class PrototypeStore {
public:
    PrototypeStore() = default;
    explicit PrototypeStore(std::string provenance) : provenance_(std::move(provenance)) {}

    /// Builds and inserts the prototype for `support`. Existing entries are
    /// never touched. Throws DuplicateClass or DimensionMismatch.
    const Prototype& add(const SupportSet& support);

    /// Inserts an already built prototype (used by the loader).
    const Prototype& insert(Prototype prototype);

    std::size_t dimension() const noexcept { return dimension_; }
    std::size_t size() const noexcept { return ordered_.size(); }
    bool empty() const noexcept { return ordered_.empty(); }
    const std::string& provenance() const noexcept { return provenance_; }
    void set_provenance(std::string p) { provenance_ = std::move(p); }

    bool contains(ClassId id) const noexcept;
    /// Throws UnknownClass.
    const Prototype& at(ClassId id) const;

    /// Prototypes in ascending class id order.
    std::span<const Prototype> prototypes() const noexcept { return ordered_; }

    friend bool operator==(const PrototypeStore& a, const PrototypeStore& b) {
        return a.dimension_ == b.dimension_ && a.provenance_ == b.provenance_ &&
               a.ordered_ == b.ordered_;
    }

private:
    std::size_t dimension_ = 0;
    std::string provenance_;
    std::vector<Prototype> ordered_;
};

PrototypeStore build_store(std::span<const SupportSet> supports, std::string provenance = {});

/// Pairwise cosine between L2-normalized prototypes, in store order.
/// Symmetric with a unit diagonal. Throws ZeroVector for a zero prototype.
std::vector<std::vector<double>> prototype_similarity_matrix(const PrototypeStore& store);

std::vector<std::uint8_t> serialize_store(const PrototypeStore& store);
PrototypeStore deserialize_store(std::span<const std::uint8_t> bytes);

/// Atomic write (temp file and rename). Throws Io.
void save_store(const PrototypeStore& store, const std::filesystem::path& path);
/// Throws Io, BadMagic, VersionMismatch or Corrupt.
PrototypeStore load_store(const std::filesystem::path& path);

}  // namespace protomatch
