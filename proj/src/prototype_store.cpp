#include "protomatch/prototype_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "binary.hpp"
#include "protomatch/error.hpp"
#include "protomatch/scoring.hpp"

namespace protomatch {

namespace {

constexpr std::string_view kStoreMagic = "DPMP";

std::string class_label(ClassId id) { return "class " + std::to_string(id.value); }

}  // namespace

Prototype build_prototype(const SupportSet& support) {
    if (support.embeddings.empty()) {
        throw Error(ErrorCode::InvalidArgument, class_label(support.class_id) + " has no supports");
    }
    if (support.embeddings.size() > std::numeric_limits<std::uint16_t>::max()) {
        throw Error(ErrorCode::InvalidArgument, class_label(support.class_id) + " has too many supports");
    }
    const std::size_t dim = support.embeddings.front().dim();
    std::vector<double> sum(dim, 0.0);
    for (std::size_t i = 0; i < support.embeddings.size(); ++i) {
        const Embedding& e = support.embeddings[i];
        if (e.dim() != dim) {
            throw Error(ErrorCode::DimensionMismatch,
                        class_label(support.class_id) + " support " + std::to_string(i) +
                            " has dim " + std::to_string(e.dim()) + ", expected " +
                            std::to_string(dim));
        }
        try {
            const NormalizedEmbedding z = l2_normalize(e);
            const auto zv = z.values();
            for (std::size_t j = 0; j < dim; ++j) sum[j] += zv[j];
        } catch (const Error& err) {
            throw Error(err.code(), class_label(support.class_id) + " support " +
                                        std::to_string(i) + ": " + err.what());
        }
    }
    const double k = static_cast<double>(support.embeddings.size());
    for (double& v : sum) v /= k;
    // The mean of unit vectors has norm <= 1, but rounding in normalisation can
    // leave it an ulp or two above. Pull it back so cosine scores stay in [-1, 1].
    for (int guard = 0; guard < 8 && l2_norm(sum) > 1.0; ++guard) {
        const double shrink = std::nextafter(1.0 / l2_norm(sum), 0.0);
        for (double& v : sum) v *= shrink;
    }
    return Prototype{support.class_id, std::move(sum),
                     static_cast<std::uint16_t>(support.embeddings.size())};
}

const Prototype& PrototypeStore::add(const SupportSet& support) {
    if (contains(support.class_id)) {
        throw Error(ErrorCode::DuplicateClass, class_label(support.class_id) + " already onboarded");
    }
    return insert(build_prototype(support));
}

const Prototype& PrototypeStore::insert(Prototype prototype) {
    if (prototype.vector.empty()) {
        throw Error(ErrorCode::InvalidArgument, class_label(prototype.class_id) + " has an empty vector");
    }
    if (!ordered_.empty() && prototype.vector.size() != dimension_) {
        throw Error(ErrorCode::DimensionMismatch,
                    class_label(prototype.class_id) + " has dim " +
                        std::to_string(prototype.vector.size()) + ", store dim is " +
                        std::to_string(dimension_));
    }
    const auto pos = std::lower_bound(
        ordered_.begin(), ordered_.end(), prototype.class_id,
        [](const Prototype& p, ClassId id) { return p.class_id < id; });
    if (pos != ordered_.end() && pos->class_id == prototype.class_id) {
        throw Error(ErrorCode::DuplicateClass, class_label(prototype.class_id) + " already onboarded");
    }
    dimension_ = prototype.vector.size();
    return *ordered_.insert(pos, std::move(prototype));
}

bool PrototypeStore::contains(ClassId id) const noexcept {
    const auto pos = std::lower_bound(ordered_.begin(), ordered_.end(), id,
                                      [](const Prototype& p, ClassId c) { return p.class_id < c; });
    return pos != ordered_.end() && pos->class_id == id;
}

const Prototype& PrototypeStore::at(ClassId id) const {
    const auto pos = std::lower_bound(ordered_.begin(), ordered_.end(), id,
                                      [](const Prototype& p, ClassId c) { return p.class_id < c; });
    if (pos == ordered_.end() || pos->class_id != id) {
        throw Error(ErrorCode::UnknownClass, class_label(id) + " is not in the store");
    }
    return *pos;
}

PrototypeStore build_store(std::span<const SupportSet> supports, std::string provenance) {
    PrototypeStore store(std::move(provenance));
    for (const SupportSet& s : supports) store.add(s);
    return store;
}

std::vector<std::vector<double>> prototype_similarity_matrix(const PrototypeStore& store) {
    const auto protos = store.prototypes();
    std::vector<NormalizedEmbedding> unit;
    unit.reserve(protos.size());
    for (const Prototype& p : protos) {
        try {
            unit.push_back(l2_normalize(p.vector));
        } catch (const Error& err) {
            throw Error(err.code(), class_label(p.class_id) + ": " + err.what());
        }
    }
    const std::size_t n = protos.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = unit[i].values();
        for (std::size_t j = i; j < n; ++j) {
            const auto b = unit[j].values();
            double dot = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
            m[i][j] = dot;
            m[j][i] = dot;
        }
    }
    return m;
}

std::vector<std::uint8_t> serialize_store(const PrototypeStore& store) {
    detail::ByteWriter w;
    w.put_bytes(kStoreMagic);
    w.put<std::uint16_t>(kStoreVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.dimension()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.provenance().size()));
    w.put_bytes(store.provenance());
    for (const Prototype& p : store.prototypes()) {
        w.put<std::uint32_t>(p.class_id.value);
        w.put<std::uint16_t>(p.k_support);
        for (const double v : p.vector) w.put<double>(v);
    }
    w.put<std::uint32_t>(detail::crc32(w.bytes()));
    return std::move(w.bytes());
}

PrototypeStore deserialize_store(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kStoreMagic.size() ||
        !std::equal(kStoreMagic.begin(), kStoreMagic.end(), bytes.begin())) {
        throw Error(ErrorCode::BadMagic, "not a prototype store");
    }
    detail::ByteReader r(bytes);
    r.get_string(kStoreMagic.size());
    const auto version = r.get<std::uint16_t>();
    if (version != kStoreVersion) {
        throw Error(ErrorCode::VersionMismatch, "store version " + std::to_string(version) +
                                                    ", expected " + std::to_string(kStoreVersion));
    }
    if (bytes.size() < sizeof(std::uint32_t) + r.position()) {
        throw Error(ErrorCode::Corrupt, "store is truncated");
    }
    const auto payload = bytes.first(bytes.size() - sizeof(std::uint32_t));
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, bytes.data() + payload.size(), sizeof(stored_crc));
    if (detail::crc32(payload) != stored_crc) {
        throw Error(ErrorCode::Corrupt, "store checksum mismatch");
    }

    detail::ByteReader body(payload);
    body.get_string(kStoreMagic.size());
    body.get<std::uint16_t>();
    const auto dim = body.get<std::uint32_t>();
    const auto count = body.get<std::uint32_t>();
    const auto provenance_len = body.get<std::uint32_t>();
    PrototypeStore store(body.get_string(provenance_len));
    for (std::uint32_t i = 0; i < count; ++i) {
        Prototype p;
        p.class_id = ClassId{body.get<std::uint32_t>()};
        p.k_support = body.get<std::uint16_t>();
        p.vector.resize(dim);
        for (double& v : p.vector) v = body.get<double>();
        try {
            store.insert(std::move(p));
        } catch (const Error& err) {
            throw Error(ErrorCode::Corrupt, err.what());
        }
    }
    if (body.remaining() != 0) throw Error(ErrorCode::Corrupt, "trailing bytes after records");
    return store;
}

void save_store(const PrototypeStore& store, const std::filesystem::path& path) {
    detail::write_file_atomic(path, serialize_store(store));
}

PrototypeStore load_store(const std::filesystem::path& path) {
    return deserialize_store(detail::read_file(path));
}

}  // namespace protomatch
