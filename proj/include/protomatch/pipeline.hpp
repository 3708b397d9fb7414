#pragma once

/// @file pipeline.hpp
/// Per-image detection: proposal filtering, prototype matching, tau gating
/// and class-wise NMS.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protomatch/geometry.hpp"
#include "protomatch/prototype_store.hpp"
#include "protomatch/scoring.hpp"

namespace protomatch {

enum class OverlapMetric { Box, Mask };

struct PipelineConfig {
    double min_area_ratio = 0.0005;
    double generator_iou_floor = 0.60;
    double stability_floor = 0.85;
    double theta_nms = 0.75;
    OverlapMetric proposal_nms_metric = OverlapMetric::Box;
    double tau = 0.4;
    double classwise_nms_iou = 0.5;

    /// Throws InvalidArgument unless every threshold lies in [0, 1].
    void validate() const;

    friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

struct ProposalBatch {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    std::int32_t image_width = 0;
    std::int32_t image_height = 0;
    std::vector<MaskProposal> proposals;
    /// Either empty, or parallel to `proposals`; an entry may be absent for
    /// proposals that were never embedded (filtered out upstream).
    std::vector<std::optional<Embedding>> embeddings;
};

struct Detection {
    BoundingBox bbox;
    ClassId class_id;
    double score = 0.0;
    ScoreBreakdown diagnostics;
    std::size_t proposal_index = 0;
};

struct DetectionRun {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    std::vector<Detection> detections;
    /// Engine-side matching time in seconds, or -1 when not recorded.
    double time_s = -1.0;
};

/// Area floor, then generator score floors, then proposal NMS at
/// theta_nms. Returns surviving indices ascending.
std::vector<std::size_t> filter_proposals(const ProposalBatch& batch, const PipelineConfig& cfg);

/// Scores each listed proposal and keeps those with S_filter >= tau, before
/// any class-wise suppression. Output follows `indices` order.
/// Throws MissingEmbeddings or DimensionMismatch.
std::vector<Detection> score_candidates(const ProposalBatch& batch,
                                        std::span<const std::size_t> indices,
                                        const PrototypeStore& store, const PipelineConfig& cfg);

/// Greedy NMS run independently inside each predicted class. Output sorted
/// by descending score, then class id, then proposal index.
std::vector<Detection> classwise_nms(std::vector<Detection> candidates, double iou_threshold);

/// score_candidates followed by classwise_nms.
std::vector<Detection> identify(const ProposalBatch& batch, std::span<const std::size_t> indices,
                                const PrototypeStore& store, const PipelineConfig& cfg);

/// filter_proposals then identify.
DetectionRun detect(const ProposalBatch& batch, const PrototypeStore& store,
                    const PipelineConfig& cfg);

/// Runs detect over many images on `threads` workers (0 = hardware
/// concurrency). Output is sorted by (scene_id, image_id) whatever the
/// completion order. When `record_time` is false every run keeps time -1 so
/// repeated runs serialize identically.
std::vector<DetectionRun> detect_all(std::span<const ProposalBatch> batches,
                                     const PrototypeStore& store, const PipelineConfig& cfg,
                                     unsigned threads = 0, bool record_time = false);

}  // namespace protomatch
