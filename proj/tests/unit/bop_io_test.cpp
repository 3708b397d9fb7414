#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "protomatch/bop_io.hpp"
#include "protomatch/error.hpp"
#include "synthetic.hpp"

namespace pm = protomatch;
namespace fs = std::filesystem;

namespace {

class IoTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("protomatch_io_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return {std::istreambuf_iterator<char>(in), {}};
    }
    static void spit(const fs::path& p, const std::string& s) {
        std::ofstream out(p, std::ios::binary);
        out << s;
    }

    fs::path dir_;
};

pm::EmbeddingArchive random_archive(std::mt19937_64& rng, pm::Dtype dtype, std::size_t count) {
    pm::EmbeddingArchive a;
    a.extractor = "vit-s/cls";
    a.crop_policy = "longer-224-pad";
    a.dtype = dtype;
    a.dim = 1 + static_cast<std::uint32_t>(rng() % 16);
    std::normal_distribution<double> n;
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> row(a.dim);
        for (double& v : row) v = dtype == pm::Dtype::F32 ? double(float(n(rng))) : n(rng);
        if (rng() % 2) {
            a.append(pm::SupportKey{pm::ClassId{std::uint32_t(i / 10 + 1)}, std::uint32_t(i % 10)}, row);
        } else {
            a.append(pm::ProposalKey{std::int64_t(i % 3), 0, i}, row);
        }
    }
    if (count == 0) a.dim = 8;
    return a;
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

bool has_kind(const pm::ValidationReport& r, const std::string& kind) {
    return std::any_of(r.violations.begin(), r.violations.end(),
                       [&](const pm::Violation& v) { return v.kind == kind; });
}

}  // namespace

TEST_F(IoTest, EmbeddingArchiveRoundtrips) {
    std::mt19937_64 rng(50);
    for (int trial = 0; trial < 30; ++trial) {
        const auto dtype = trial % 2 ? pm::Dtype::F32 : pm::Dtype::F64;
        const auto a = random_archive(rng, dtype, rng() % 101);
        const auto p = path("e.dpme");
        pm::write_embedding_archive(a, p);
        const auto bytes = slurp(p);
        const auto side = slurp(pm::sidecar_path(p));
        const auto b = pm::read_embedding_archive(p);
        EXPECT_EQ(a, b);
        pm::write_embedding_archive(b, p);
        EXPECT_EQ(slurp(p), bytes);
        EXPECT_EQ(slurp(pm::sidecar_path(p)), side);
        EXPECT_TRUE(pm::validate_file(p).clean());
    }
}

TEST_F(IoTest, EmptyArchiveRoundtrips) {
    pm::EmbeddingArchive a;
    a.dim = 4;
    a.extractor = "x";
    const auto p = path("empty.dpme");
    pm::write_embedding_archive(a, p);
    EXPECT_EQ(pm::read_embedding_archive(p), a);
}

TEST_F(IoTest, ArchiveHeaderCountMismatchIsCorrupt) {
    std::mt19937_64 rng(51);
    const auto p = path("c.dpme");
    pm::write_embedding_archive(random_archive(rng, pm::Dtype::F64, 5), p);
    auto bytes = slurp(p);
    bytes[10] = 7;  // count field low byte
    spit(p, bytes);
    EXPECT_EQ(error_of([&] { pm::read_embedding_archive(p); }), pm::ErrorCode::Corrupt);
    EXPECT_TRUE(has_kind(pm::validate_file(p), "length-mismatch"));
}

TEST_F(IoTest, ArchiveBadMagicAndVersion) {
    std::mt19937_64 rng(52);
    const auto p = path("m.dpme");
    pm::write_embedding_archive(random_archive(rng, pm::Dtype::F64, 2), p);
    auto bytes = slurp(p);
    auto magic = bytes;
    magic[0] = 'Q';
    spit(p, magic);
    EXPECT_EQ(error_of([&] { pm::read_embedding_archive(p); }), pm::ErrorCode::BadMagic);
    auto version = bytes;
    version[4] = 2;
    spit(p, version);
    EXPECT_EQ(error_of([&] { pm::read_embedding_archive(p); }), pm::ErrorCode::VersionMismatch);
}

TEST_F(IoTest, F32PayloadDeclaredF64IsOneViolation) {
    std::mt19937_64 rng(53);
    auto a = random_archive(rng, pm::Dtype::F32, 6);
    const auto p = path("d.dpme");
    pm::write_embedding_archive(a, p);
    auto bytes = slurp(p);
    bytes[18] = 1;  // dtype tag: f64
    spit(p, bytes);
    const auto report = pm::validate_file(p);
    ASSERT_EQ(report.violations.size(), 1u);
    EXPECT_EQ(report.violations[0].kind, "dtype-mismatch");
    EXPECT_EQ(error_of([&] { pm::read_embedding_archive(p); }), pm::ErrorCode::Corrupt);
}

TEST_F(IoTest, MissingSidecarAndDuplicateKeys) {
    std::mt19937_64 rng(54);
    auto a = random_archive(rng, pm::Dtype::F64, 3);
    const auto p = path("k.dpme");
    pm::write_embedding_archive(a, p);
    fs::remove(pm::sidecar_path(p));
    EXPECT_TRUE(has_kind(pm::validate_file(p), "missing-sidecar"));

    a.keys[1] = a.keys[0];
    pm::write_embedding_archive(a, p);
    EXPECT_TRUE(has_kind(pm::validate_file(p), "duplicate-key"));
    EXPECT_EQ(error_of([&] { pm::read_embedding_archive(p); }),
              std::holds_alternative<pm::SupportKey>(a.keys[0]) ? pm::ErrorCode::DuplicateClass
                                                                : pm::ErrorCode::SchemaViolation);
}

TEST_F(IoTest, SupportSetsGroupByClass) {
    pm::EmbeddingArchive a;
    a.append(pm::SupportKey{pm::ClassId{2}, 1}, std::vector<double>{0, 2});
    a.append(pm::SupportKey{pm::ClassId{1}, 0}, std::vector<double>{1, 0});
    a.append(pm::SupportKey{pm::ClassId{2}, 0}, std::vector<double>{0, 1});
    const auto sets = pm::support_sets(a);
    ASSERT_EQ(sets.size(), 2u);
    EXPECT_EQ(sets[0].class_id, pm::ClassId{1});
    EXPECT_EQ(sets[1].embeddings[0].values, (std::vector<double>{0, 1}));
    EXPECT_EQ(sets[1].embeddings[1].values, (std::vector<double>{0, 2}));

    a.append(pm::SupportKey{pm::ClassId{1}, 0}, std::vector<double>{1, 1});
    EXPECT_EQ(error_of([&] { pm::support_sets(a); }), pm::ErrorCode::DuplicateClass);
}

TEST_F(IoTest, ProposalArchiveRoundtrip) {
    pm::synthetic::Config cfg;
    cfg.scenes = 3;
    cfg.image_width = 160;
    cfg.image_height = 120;
    auto bench = pm::synthetic::make_benchmark(cfg);
    for (auto& b : bench.batches) b.embeddings.clear();
    const auto p = path("p.jsonl");
    pm::write_proposal_archive(bench.batches, p);
    const auto text = slurp(p);
    const auto back = pm::read_proposal_archive(p);
    ASSERT_EQ(back.size(), bench.batches.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].scene_id, bench.batches[i].scene_id);
        EXPECT_EQ(back[i].image_width, 160);
        EXPECT_EQ(back[i].proposals, bench.batches[i].proposals);
    }
    pm::write_proposal_archive(back, p);
    EXPECT_EQ(slurp(p), text);
    EXPECT_TRUE(pm::validate_file(p).clean());
}

TEST_F(IoTest, ProposalDefaultsAndErrors) {
    const auto p = path("q.jsonl");
    spit(p, R"({"scene_id":1,"image_id":0,"width":2,"height":2,"rle":[1,2,1]})" "\n");
    const auto b = pm::read_proposal_archive(p);
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b[0].proposals[0].generator_iou, 1.0);
    EXPECT_EQ(b[0].proposals[0].stability, 1.0);
    EXPECT_EQ(b[0].proposals[0].area_px, 2u);

    spit(p, R"({"scene_id":1,"image_id":0,"width":2,"height":2,"rle":[1,2]})" "\n");
    EXPECT_EQ(error_of([&] { pm::read_proposal_archive(p); }), pm::ErrorCode::SchemaViolation);
    EXPECT_TRUE(has_kind(pm::validate_file(p), "rle-sum"));
}

TEST_F(IoTest, TruncatedJsonLinesNamesLine) {
    const auto p = path("t.jsonl");
    const std::string good = R"({"scene_id":1,"image_id":0,"width":2,"height":2,"rle":[0,4]})";
    spit(p, good + "\n" + good + "\n" + good.substr(0, 25));
    const auto report = pm::validate_file(p);
    ASSERT_EQ(report.violations.size(), 1u);
    EXPECT_EQ(report.violations[0].kind, "json-syntax");
    EXPECT_EQ(report.violations[0].location, "line 3");
}

TEST_F(IoTest, BopResultsRoundtripAndSorted) {
    std::mt19937_64 rng(55);
    std::vector<pm::ScoredDetection> dets;
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int i = 0; i < 50; ++i) {
        dets.push_back({std::int64_t(rng() % 4), std::int64_t(rng() % 2), pm::ClassId{std::uint32_t(1 + rng() % 5)},
                        {int(rng() % 100), int(rng() % 100), 1 + int(rng() % 50), 1 + int(rng() % 50)}, u(rng),
                        i % 3 ? -1.0 : u(rng)});
    }
    const auto p = path("r.json");
    pm::write_bop_results(dets, p);
    auto expected = dets;
    pm::sort_results(expected);
    EXPECT_EQ(pm::read_bop_results(p), expected);
    EXPECT_TRUE(pm::validate_file(p).clean());

    // Readers accept any order; validate flags it.
    std::vector<pm::ScoredDetection> unsorted{expected.back(), expected.front()};
    std::string text = "[";
    for (std::size_t i = 0; i < unsorted.size(); ++i) {
        const auto& d = unsorted[i];
        text += (i ? "," : "") + std::string("{\"scene_id\":") + std::to_string(d.scene_id) +
                ",\"image_id\":" + std::to_string(d.image_id) + ",\"category_id\":" +
                std::to_string(d.class_id.value) + ",\"bbox\":[" + std::to_string(d.bbox.x) + "," +
                std::to_string(d.bbox.y) + "," + std::to_string(d.bbox.w) + "," + std::to_string(d.bbox.h) +
                "],\"score\":" + pm::format_double(d.score) + ",\"time\":-1}";
    }
    spit(p, text + "]");
    EXPECT_EQ(pm::read_bop_results(p).size(), 2u);
    EXPECT_TRUE(has_kind(pm::validate_file(p), "unsorted"));
}

TEST_F(IoTest, GroundTruthRoundtrip) {
    pm::synthetic::Config cfg;
    cfg.scenes = 4;
    auto gt = pm::synthetic::make_benchmark(cfg).ground_truth;
    gt.annotations[0].ignore = true;
    const auto p = path("gt.json");
    pm::write_ground_truth(gt, p);
    EXPECT_EQ(pm::read_ground_truth(p), gt);
    EXPECT_TRUE(pm::validate_file(p).clean());

    spit(p, R"({"categories":[{"id":1}],"images":[{"scene_id":1,"image_id":0,"width":10,"height":10}],)"
            R"("annotations":[{"scene_id":1,"image_id":0,"category_id":2,"bbox":[0,0,20,5]}]})");
    const auto report = pm::validate_file(p);
    EXPECT_TRUE(has_kind(report, "unknown-category"));
    EXPECT_TRUE(has_kind(report, "bbox-out-of-image"));
}

TEST_F(IoTest, RetainedIndicesRoundtrip) {
    const std::vector<pm::RetainedIndices> r{{1, 0, {0, 3, 4}}, {2, 5, {}}};
    const auto p = path("keep.json");
    pm::write_retained_indices(r, p);
    EXPECT_EQ(pm::read_retained_indices(p), r);
    EXPECT_EQ(pm::validate_file(p).format, "retained-indices");
}

TEST_F(IoTest, ConfigRoundtripAndDefaults) {
    pm::PipelineConfig cfg;
    cfg.tau = 0.55;
    cfg.proposal_nms_metric = pm::OverlapMetric::Mask;
    EXPECT_EQ(pm::parse_config(pm::format_config(cfg)), cfg);
    EXPECT_EQ(pm::parse_config("# nothing\n[pipeline]\n"), pm::PipelineConfig{});
    EXPECT_EQ(pm::parse_config("tau = 0.3\n").tau, 0.3);
    EXPECT_EQ(error_of([] { pm::parse_config("tau = 1.3\n"); }), pm::ErrorCode::SchemaViolation);
    EXPECT_EQ(error_of([] { pm::parse_config("bogus = 0.3\n"); }), pm::ErrorCode::SchemaViolation);

    const auto p = path("run.toml");
    spit(p, "[pipeline]\ntau = x\nfoo = 1\n");
    const auto report = pm::validate_file(p);
    EXPECT_EQ(report.violations.size(), 2u);
    EXPECT_TRUE(has_kind(report, "value"));
    EXPECT_TRUE(has_kind(report, "unknown-key"));
}

TEST_F(IoTest, FormatDoubleRoundtrips) {
    std::mt19937_64 rng(56);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng);
        EXPECT_EQ(std::stod(pm::format_double(v)), v);
    }
    EXPECT_EQ(pm::format_double(1.0), "1.0");
    EXPECT_EQ(pm::format_double(0.5), "0.5");
}

TEST_F(IoTest, StoreValidates) {
    pm::PrototypeStore store("x");
    store.insert({pm::ClassId{1}, {1, 0}, 1});
    const auto p = path("s.dpmp");
    pm::save_store(store, p);
    EXPECT_TRUE(pm::validate_file(p).clean());
    auto bytes = slurp(p);
    bytes[bytes.size() - 6] ^= 1;
    spit(p, bytes);
    EXPECT_FALSE(pm::validate_file(p).clean());
}

TEST_F(IoTest, MissingFileIsIo) {
    EXPECT_EQ(error_of([&] { pm::validate_file(path("nope.json")); }), pm::ErrorCode::Io);
}
