#pragma once

/// @file bop_io.hpp
/// Readers and writers for the engine's interchange files.
///
///  - Embedding archive (binary, little-endian):
///      "DPME" | version u16 | dim u32 | count u64 | dtype u8 (0 = f32, 1 = f64)
///      count x dim values
///    plus a JSON sidecar at "<path>.json" holding the extractor id, crop
///    policy, dtype and one key per record. Values are always promoted to
///    f64 on read.
///  - Proposal archive: JSON lines, one mask proposal per line. The
///    proposal index of a record is its ordinal within its (scene, image).
///  - BOP result file: JSON array sorted by scene, image and descending score.
///  - Ground truth: COCO-like JSON object with categories, images and
///    annotations keyed by (scene_id, image_id).
///  - Retained-index file: JSON array of {scene_id, image_id, indices}.
///  - Run configuration: TOML-style `key = value` file.
///
/// Every writer replaces its target atomically.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "protomatch/evaluation.hpp"
#include "protomatch/pipeline.hpp"
#include "protomatch/prototype_store.hpp"

namespace protomatch {

inline constexpr std::uint16_t kEmbeddingArchiveVersion = 1;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

struct SupportKey {
    ClassId class_id;
    std::uint32_t support_index = 0;
    friend auto operator<=>(const SupportKey&, const SupportKey&) = default;
};

struct ProposalKey {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    std::uint64_t proposal_index = 0;
    friend auto operator<=>(const ProposalKey&, const ProposalKey&) = default;
};

using EmbeddingKey = std::variant<SupportKey, ProposalKey>;

struct EmbeddingArchive {
    std::string extractor;
    std::string crop_policy;
    Dtype dtype = Dtype::F32;
    std::uint32_t dim = 0;
    std::vector<EmbeddingKey> keys;
    /// Row-major, keys.size() x dim.
    std::vector<double> values;

    std::size_t count() const noexcept { return keys.size(); }
    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(values).subspan(i * dim, dim);
    }
    void append(EmbeddingKey key, std::span<const double> row);

    friend bool operator==(const EmbeddingArchive&, const EmbeddingArchive&) = default;
};

std::filesystem::path sidecar_path(const std::filesystem::path& archive);

void write_embedding_archive(const EmbeddingArchive& archive, const std::filesystem::path& path);
EmbeddingArchive read_embedding_archive(const std::filesystem::path& path);

/// Groups support records by class (ascending) in support_index order.
/// Throws SchemaViolation if the archive holds proposal keys.
std::vector<SupportSet> support_sets(const EmbeddingArchive& archive);

/// Fills `embeddings` of each batch from proposal-keyed records. Throws
/// SchemaViolation for support keys or keys naming unknown proposals.
void attach_embeddings(std::span<ProposalBatch> batches, const EmbeddingArchive& archive);

void write_proposal_archive(std::span<const ProposalBatch> batches, const std::filesystem::path& path);
/// Batches sorted by (scene_id, image_id); embeddings left empty.
std::vector<ProposalBatch> read_proposal_archive(const std::filesystem::path& path);

void write_bop_results(std::span<const ScoredDetection> detections, const std::filesystem::path& path);
std::vector<ScoredDetection> read_bop_results(const std::filesystem::path& path);
/// Sorts by (scene_id, image_id, descending score); stable otherwise.
void sort_results(std::vector<ScoredDetection>& detections);

void write_ground_truth(const GroundTruthSet& gt, const std::filesystem::path& path);
GroundTruthSet read_ground_truth(const std::filesystem::path& path);

struct RetainedIndices {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    std::vector<std::size_t> indices;
    friend bool operator==(const RetainedIndices&, const RetainedIndices&) = default;
};

void write_retained_indices(std::span<const RetainedIndices> retained, const std::filesystem::path& path);
std::vector<RetainedIndices> read_retained_indices(const std::filesystem::path& path);

std::string format_config(const PipelineConfig& cfg);
/// Keys absent from `text` keep their defaults. Throws SchemaViolation.
PipelineConfig parse_config(std::string_view text);
void write_config(const PipelineConfig& cfg, const std::filesystem::path& path);
PipelineConfig read_config(const std::filesystem::path& path);

std::string format_report_json(const ApReport& report);
/// One-row table: method, AP for `dataset` and the mean, in percent.
std::string format_report_csv(const ApReport& report, std::string_view method,
                              std::string_view dataset);

/// Atomic text write used for reports and tables.
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double v);

struct Violation {
    std::string kind;
    std::string location;
    std::string message;
};

struct ValidationReport {
    std::string format;
    std::vector<Violation> violations;
    bool clean() const noexcept { return violations.empty(); }
};

/// Detects the file's format from its magic bytes or extension and lists
/// every problem found. Throws Io only.
ValidationReport validate_file(const std::filesystem::path& path);

}  // namespace protomatch
