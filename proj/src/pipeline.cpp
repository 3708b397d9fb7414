#include "protomatch/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <tuple>

#include "protomatch/error.hpp"

namespace protomatch {

namespace {

void require_unit_interval(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument,
                    std::string(name) + " = " + std::to_string(v) + " is outside [0, 1]");
    }
}

std::string proposal_key(const ProposalBatch& b, std::size_t index) {
    return "scene " + std::to_string(b.scene_id) + " image " + std::to_string(b.image_id) +
           " proposal " + std::to_string(index);
}

}  // namespace

void PipelineConfig::validate() const {
    require_unit_interval(min_area_ratio, "min_area_ratio");
    require_unit_interval(generator_iou_floor, "generator_iou_floor");
    require_unit_interval(stability_floor, "stability_floor");
    require_unit_interval(theta_nms, "theta_nms");
    require_unit_interval(tau, "tau");
    require_unit_interval(classwise_nms_iou, "classwise_nms_iou");
}

std::vector<std::size_t> filter_proposals(const ProposalBatch& batch, const PipelineConfig& cfg) {
    if (batch.image_width <= 0 || batch.image_height <= 0) {
        throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
    }
    const double min_area = cfg.min_area_ratio * (static_cast<double>(batch.image_width) *
                                                  static_cast<double>(batch.image_height));

    std::vector<std::size_t> survivors;
    for (std::size_t i = 0; i < batch.proposals.size(); ++i) {
        const MaskProposal& p = batch.proposals[i];
        if (static_cast<double>(p.area_px) < min_area) continue;
        if (p.generator_iou < cfg.generator_iou_floor || p.stability < cfg.stability_floor) continue;
        survivors.push_back(i);
    }

    std::vector<double> scores(survivors.size());
    for (std::size_t i = 0; i < survivors.size(); ++i) {
        scores[i] = batch.proposals[survivors[i]].generator_iou;
    }
    const auto overlap = [&](std::size_t a, std::size_t b) {
        const MaskProposal& pa = batch.proposals[survivors[a]];
        const MaskProposal& pb = batch.proposals[survivors[b]];
        return cfg.proposal_nms_metric == OverlapMetric::Mask ? mask_iou(pa.mask, pb.mask)
                                                              : box_iou(pa.bbox, pb.bbox);
    };
    const auto kept = nms_by(std::span<const double>(scores), cfg.theta_nms, overlap);

    std::vector<std::size_t> out;
    out.reserve(kept.size());
    for (const std::size_t k : kept) out.push_back(survivors[k]);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Detection> score_candidates(const ProposalBatch& batch,
                                        std::span<const std::size_t> indices,
                                        const PrototypeStore& store, const PipelineConfig& cfg) {
    std::vector<Detection> out;
    if (indices.empty()) return out;
    if (store.empty()) throw Error(ErrorCode::InvalidArgument, "prototype store is empty");

    for (const std::size_t index : indices) {
        if (index >= batch.proposals.size()) {
            throw Error(ErrorCode::InvalidArgument, proposal_key(batch, index) + " does not exist");
        }
        if (index >= batch.embeddings.size() || !batch.embeddings[index]) {
            throw Error(ErrorCode::MissingEmbeddings, "no embedding for " + proposal_key(batch, index));
        }
        const Embedding& e = *batch.embeddings[index];
        if (e.dim() != store.dimension()) {
            throw Error(ErrorCode::DimensionMismatch,
                        proposal_key(batch, index) + " has dim " + std::to_string(e.dim()) +
                            ", store dim is " + std::to_string(store.dimension()));
        }
        const SimilarityRow row = cosine_scores(l2_normalize(e), store.prototypes());
        const ScoreBreakdown b = score_row(row);
        if (b.s_filter < cfg.tau) continue;
        out.push_back(Detection{batch.proposals[index].bbox, b.predicted, b.s_final, b, index});
    }
    return out;
}

std::vector<Detection> classwise_nms(std::vector<Detection> candidates, double iou_threshold) {
    std::map<ClassId, std::vector<Detection>> by_class;
    for (Detection& d : candidates) by_class[d.class_id].push_back(std::move(d));

    std::vector<Detection> out;
    for (auto& [cls, group] : by_class) {
        std::vector<ScoredBox> boxes;
        boxes.reserve(group.size());
        for (const Detection& d : group) boxes.push_back({d.bbox, d.score});
        for (const std::size_t k : nms(boxes, iou_threshold)) out.push_back(std::move(group[k]));
    }
    std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.class_id != b.class_id) return a.class_id < b.class_id;
        return a.proposal_index < b.proposal_index;
    });
    return out;
}

std::vector<Detection> identify(const ProposalBatch& batch, std::span<const std::size_t> indices,
                                const PrototypeStore& store, const PipelineConfig& cfg) {
    return classwise_nms(score_candidates(batch, indices, store, cfg), cfg.classwise_nms_iou);
}

DetectionRun detect(const ProposalBatch& batch, const PrototypeStore& store,
                    const PipelineConfig& cfg) {
    cfg.validate();
    DetectionRun run;
    run.scene_id = batch.scene_id;
    run.image_id = batch.image_id;
    const auto retained = filter_proposals(batch, cfg);
    run.detections = identify(batch, retained, store, cfg);
    return run;
}

std::vector<DetectionRun> detect_all(std::span<const ProposalBatch> batches,
                                     const PrototypeStore& store, const PipelineConfig& cfg,
                                     unsigned threads, bool record_time) {
    cfg.validate();
    std::vector<DetectionRun> runs(batches.size());
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, batches.size())));

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        for (std::size_t i = next++; i < batches.size(); i = next++) {
            try {
                const auto start = std::chrono::steady_clock::now();
                runs[i] = detect(batches[i], store, cfg);
                if (record_time) {
                    runs[i].time_s = std::chrono::duration<double>(
                                         std::chrono::steady_clock::now() - start)
                                         .count();
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = batches.size();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }
    if (failure) std::rethrow_exception(failure);

    std::stable_sort(runs.begin(), runs.end(), [](const DetectionRun& a, const DetectionRun& b) {
        return std::tie(a.scene_id, a.image_id) < std::tie(b.scene_id, b.image_id);
    });
    return runs;
}

}  // namespace protomatch
