#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "protomatch/error.hpp"
#include "protomatch/prototype_store.hpp"
#include "protomatch/scoring.hpp"

namespace pm = protomatch;
namespace fs = std::filesystem;

namespace {

pm::SupportSet random_support(std::uint32_t cls, std::size_t k, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    pm::SupportSet s{pm::ClassId{cls}, {}};
    for (std::size_t i = 0; i < k; ++i) {
        pm::Embedding e;
        e.values.resize(d);
        for (double& v : e.values) v = n(rng);
        s.embeddings.push_back(std::move(e));
    }
    return s;
}

template <typename Fn>
pm::ErrorCode error_of(Fn&& fn) {
    try {
        fn();
    } catch (const pm::Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return pm::ErrorCode::Io;
}

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("protomatch_store_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(BuildPrototype, SingleSupportIsItsDirection) {
    const auto p = pm::build_prototype({pm::ClassId{1}, {pm::Embedding{{3, 4}}}});
    EXPECT_DOUBLE_EQ(p.vector[0], 0.6);
    EXPECT_DOUBLE_EQ(p.vector[1], 0.8);
    EXPECT_NEAR(pm::l2_norm(p.vector), 1.0, 1e-15);
    EXPECT_EQ(p.k_support, 1);
}

TEST(BuildPrototype, OrthogonalPair) {
    const auto p = pm::build_prototype({pm::ClassId{1}, {pm::Embedding{{1, 0}}, pm::Embedding{{0, 1}}}});
    EXPECT_EQ(p.vector, (std::vector<double>{0.5, 0.5}));
    EXPECT_NEAR(pm::l2_norm(p.vector), 0.70711, 1e-5);
}

TEST(BuildPrototype, MatchesSlowMean) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = random_support(1, 10, 32, rng);
        std::vector<std::vector<double>> raw;
        for (const auto& e : s.embeddings) raw.push_back(e.values);
        const auto expected = pm::oracle::reference_prototype(raw);
        const auto p = pm::build_prototype(s);
        for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(p.vector[i], expected[i], 1e-9);
    }
}

TEST(BuildPrototype, NormAtMostOneAndOneForDuplicates) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        EXPECT_LE(pm::l2_norm(pm::build_prototype(random_support(1, 1 + rng() % 10, 24, rng)).vector),
                  1.0 + 1e-15);
    }
    auto s = random_support(1, 1, 24, rng);
    for (int i = 0; i < 4; ++i) s.embeddings.push_back(s.embeddings.front());
    EXPECT_NEAR(pm::l2_norm(pm::build_prototype(s).vector), 1.0, 1e-15);
}

TEST(BuildPrototype, PermutationInvariant) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        auto s = random_support(1, 10, 64, rng);
        const auto a = pm::build_prototype(s);
        std::shuffle(s.embeddings.begin(), s.embeddings.end(), rng);
        const auto b = pm::build_prototype(s);
        for (std::size_t i = 0; i < a.vector.size(); ++i) EXPECT_NEAR(a.vector[i], b.vector[i], 1e-12);
    }
}

TEST(BuildPrototype, Errors) {
    EXPECT_EQ(error_of([] { pm::build_prototype({pm::ClassId{1}, {}}); }), pm::ErrorCode::InvalidArgument);
    EXPECT_EQ(error_of([] {
                  pm::build_prototype({pm::ClassId{1}, {pm::Embedding{{1, 0}}, pm::Embedding{{1}}}});
              }),
              pm::ErrorCode::DimensionMismatch);
    try {
        pm::build_prototype({pm::ClassId{4}, {pm::Embedding{{1, 0}}, pm::Embedding{{0, 0}}}});
        FAIL();
    } catch (const pm::Error& e) {
        EXPECT_EQ(e.code(), pm::ErrorCode::ZeroVector);
        EXPECT_NE(std::string(e.what()).find("support 1"), std::string::npos) << e.what();
    }
}

TEST(PrototypeStore, OrderIndependentBuild) {
    std::mt19937_64 rng(12);
    const std::vector<pm::SupportSet> ab{random_support(1, 3, 8, rng), random_support(2, 3, 8, rng)};
    const std::vector<pm::SupportSet> ba{ab[1], ab[0]};
    const auto x = pm::build_store(ab);
    const auto y = pm::build_store(ba);
    EXPECT_EQ(x.size(), 2u);
    EXPECT_EQ(x, y);
}

TEST(PrototypeStore, AppendLeavesExistingBitIdentical) {
    std::mt19937_64 rng(13);
    pm::PrototypeStore store("test");
    store.add(random_support(5, 4, 16, rng));
    store.add(random_support(1, 4, 16, rng));
    const auto before = std::vector<pm::Prototype>(store.prototypes().begin(), store.prototypes().end());
    const auto bytes_p1 = pm::serialize_store(store);
    store.add(random_support(3, 4, 16, rng));
    EXPECT_EQ(store.size(), 3u);
    for (const auto& p : before) {
        const auto& now = store.at(p.class_id);
        ASSERT_EQ(now.vector.size(), p.vector.size());
        EXPECT_EQ(std::memcmp(now.vector.data(), p.vector.data(), p.vector.size() * sizeof(double)), 0);
    }
    EXPECT_NE(bytes_p1, pm::serialize_store(store));
}

TEST(PrototypeStore, DuplicateAndMismatchRejected) {
    std::mt19937_64 rng(14);
    pm::PrototypeStore store;
    store.add(random_support(1, 2, 8, rng));
    EXPECT_EQ(error_of([&] { store.add(random_support(1, 2, 8, rng)); }), pm::ErrorCode::DuplicateClass);
    EXPECT_EQ(error_of([&] { store.add(random_support(2, 2, 9, rng)); }), pm::ErrorCode::DimensionMismatch);
    EXPECT_EQ(error_of([&] { store.at(pm::ClassId{7}); }), pm::ErrorCode::UnknownClass);
    EXPECT_EQ(store.size(), 1u);
}

TEST(PrototypeStore, TenByTenSetting) {
    std::mt19937_64 rng(15);
    std::vector<pm::SupportSet> supports;
    for (std::uint32_t c = 1; c <= 10; ++c) supports.push_back(random_support(c, 10, 32, rng));
    const auto store = pm::build_store(supports, "extractor-x");
    EXPECT_EQ(store.size(), 10u);
    for (const auto& p : store.prototypes()) EXPECT_EQ(p.k_support, 10);
}

TEST(SimilarityMatrix, OrthogonalIsIdentity) {
    pm::PrototypeStore store;
    store.insert({pm::ClassId{1}, {1, 0}, 1});
    store.insert({pm::ClassId{2}, {0, 1}, 1});
    const auto m = pm::prototype_similarity_matrix(store);
    EXPECT_EQ(m, (std::vector<std::vector<double>>{{1, 0}, {0, 1}}));
}

TEST(SimilarityMatrix, SymmetricUnitDiagonalAndMatchesOracle) {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<pm::SupportSet> supports;
        for (std::uint32_t c = 1; c <= 3; ++c) supports.push_back(random_support(c, 5, 12, rng));
        const auto store = pm::build_store(supports);
        std::vector<std::vector<double>> vectors;
        for (const auto& p : store.prototypes()) vectors.push_back(p.vector);
        const auto expected = pm::oracle::reference_cosine_matrix(vectors);
        const auto m = pm::prototype_similarity_matrix(store);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_NEAR(m[i][i], 1.0, 1e-9);
            for (std::size_t j = 0; j < 3; ++j) {
                EXPECT_EQ(m[i][j], m[j][i]);
                EXPECT_NEAR(m[i][j], expected[i][j], 1e-9);
            }
        }
    }
}

TEST(StoreFile, RoundtripIsBitExact) {
    std::mt19937_64 rng(17);
    std::vector<pm::SupportSet> supports;
    for (std::uint32_t c = 1; c <= 10; ++c) supports.push_back(random_support(c * 3, 10, 48, rng));
    const auto store = pm::build_store(supports, "dinov2-vitl14/cls");
    const auto path = temp_path("roundtrip.dpmp");
    pm::save_store(store, path);
    const auto loaded = pm::load_store(path);
    EXPECT_EQ(loaded, store);
    EXPECT_EQ(pm::serialize_store(loaded), pm::serialize_store(store));
    fs::remove(path);
}

TEST(StoreFile, DeterministicBytes) {
    std::mt19937_64 rng(18);
    const std::vector<pm::SupportSet> supports{random_support(1, 3, 8, rng), random_support(2, 3, 8, rng)};
    EXPECT_EQ(pm::serialize_store(pm::build_store(supports, "x")),
              pm::serialize_store(pm::build_store(supports, "x")));
}

TEST(StoreFile, EmptyStoreRoundtrips) {
    const pm::PrototypeStore empty("nothing");
    EXPECT_EQ(pm::deserialize_store(pm::serialize_store(empty)), empty);
}

TEST(StoreFile, CorruptionDetected) {
    std::mt19937_64 rng(19);
    const auto store = pm::build_store(std::vector<pm::SupportSet>{random_support(1, 2, 8, rng)});
    const auto bytes = pm::serialize_store(store);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 9);
    EXPECT_EQ(error_of([&] { pm::deserialize_store(truncated); }), pm::ErrorCode::Corrupt);

    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_EQ(error_of([&] { pm::deserialize_store(magic); }), pm::ErrorCode::BadMagic);

    auto version = bytes;
    version[4] = 9;
    EXPECT_EQ(error_of([&] { pm::deserialize_store(version); }), pm::ErrorCode::VersionMismatch);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_EQ(error_of([&] { pm::deserialize_store(flipped); }), pm::ErrorCode::Corrupt);

    EXPECT_EQ(error_of([&] { pm::deserialize_store(std::vector<std::uint8_t>{'D', 'P'}); }),
              pm::ErrorCode::BadMagic);
}

TEST(StoreFile, MissingFileIsIo) {
    EXPECT_EQ(error_of([] { pm::load_store(temp_path("does-not-exist.dpmp")); }), pm::ErrorCode::Io);
}
