// protomatch command-line tool.
//
// Offline stage:  build-prototypes
// Online stage:   filter-proposals -> (external embedding) -> detect
// Diagnostics:    evaluate, prototype-similarity, validate

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "protomatch/bop_io.hpp"
#include "protomatch/error.hpp"
#include "protomatch/evaluation.hpp"
#include "protomatch/pipeline.hpp"
#include "protomatch/prototype_store.hpp"
#include "protomatch/scoring.hpp"

namespace pm = protomatch;

namespace {

constexpr int kExitViolations = 1;
constexpr int kExitUsage = 2;

struct GlobalOptions {
    std::string config_path;
    std::string log_level;
};

pm::PipelineConfig resolve_config(const GlobalOptions& g, std::optional<double> tau,
                                  std::optional<double> classwise_nms) {
    pm::PipelineConfig cfg;
    if (!g.config_path.empty()) cfg = pm::read_config(g.config_path);
    if (tau) cfg.tau = *tau;
    if (classwise_nms) cfg.classwise_nms_iou = *classwise_nms;
    cfg.validate();
    return cfg;
}

void log_config(const pm::PipelineConfig& cfg) {
    std::istringstream lines(pm::format_config(cfg));
    spdlog::info("resolved configuration:");
    for (std::string line; std::getline(lines, line);) spdlog::info("  {}", line);
}

int run_build_prototypes(const GlobalOptions& g, const std::string& supports,
                         const std::string& out, const std::string& provenance) {
    log_config(resolve_config(g, std::nullopt, std::nullopt));
    const pm::EmbeddingArchive archive = pm::read_embedding_archive(supports);
    const auto sets = pm::support_sets(archive);
    const pm::PrototypeStore store =
        pm::build_store(sets, provenance.empty() ? archive.extractor : provenance);
    pm::save_store(store, out);

    std::printf("class_id,k_support,norm\n");
    for (const pm::Prototype& p : store.prototypes()) {
        std::printf("%u,%u,%.9f\n", p.class_id.value, unsigned{p.k_support}, pm::l2_norm(p.vector));
    }
    spdlog::info("wrote {} prototypes of dim {} to {}", store.size(), store.dimension(), out);
    return 0;
}

int run_filter_proposals(const GlobalOptions& g, const std::string& proposals,
                         const std::string& out) {
    const pm::PipelineConfig cfg = resolve_config(g, std::nullopt, std::nullopt);
    log_config(cfg);
    const auto batches = pm::read_proposal_archive(proposals);
    std::vector<pm::RetainedIndices> retained;
    std::size_t total = 0;
    std::size_t kept = 0;
    for (const pm::ProposalBatch& b : batches) {
        auto indices = pm::filter_proposals(b, cfg);
        total += b.proposals.size();
        kept += indices.size();
        std::printf("scene %lld image %lld: %zu of %zu proposals retained\n",
                    static_cast<long long>(b.scene_id), static_cast<long long>(b.image_id),
                    indices.size(), b.proposals.size());
        retained.push_back({b.scene_id, b.image_id, std::move(indices)});
    }
    pm::write_retained_indices(retained, out);
    spdlog::info("retained {} of {} proposals over {} images", kept, total, batches.size());
    return 0;
}

int run_detect(const GlobalOptions& g, const std::string& proposals, const std::string& embeddings,
               const std::string& store_path, const std::string& out, std::optional<double> tau,
               std::optional<double> classwise_nms, unsigned threads, bool record_time) {
    const pm::PipelineConfig cfg = resolve_config(g, tau, classwise_nms);
    log_config(cfg);
    auto batches = pm::read_proposal_archive(proposals);
    const pm::EmbeddingArchive archive = pm::read_embedding_archive(embeddings);
    const pm::PrototypeStore store = pm::load_store(store_path);
    pm::attach_embeddings(batches, archive);

    // Key consistency is checked in image order so the reported key is
    // the first missing one regardless of thread scheduling.
    for (const pm::ProposalBatch& b : batches) {
        for (const std::size_t i : pm::filter_proposals(b, cfg)) {
            if (!b.embeddings[i]) {
                throw pm::Error(pm::ErrorCode::MissingEmbeddings,
                                "first unmatched proposal key: scene_id=" + std::to_string(b.scene_id) +
                                    " image_id=" + std::to_string(b.image_id) +
                                    " proposal_index=" + std::to_string(i));
            }
        }
    }

    const auto runs = pm::detect_all(batches, store, cfg, threads, record_time);
    pm::write_bop_results(pm::flatten(runs), out);

    std::size_t total = 0;
    for (const pm::DetectionRun& r : runs) {
        std::printf("scene %lld image %lld: %zu detections\n", static_cast<long long>(r.scene_id),
                    static_cast<long long>(r.image_id), r.detections.size());
        total += r.detections.size();
    }
    std::printf("total: %zu detections over %zu images\n", total, runs.size());
    return 0;
}

int run_evaluate(const std::string& results, const std::string& gt_path, const std::string& out,
                 const std::string& csv, const std::string& method, const std::string& dataset,
                 std::size_t max_dets, unsigned threads) {
    spdlog::info("resolved evaluation options: max_dets={} threads={} iou=0.50:0.05:0.95 recall_points={}",
                 max_dets, threads, pm::kRecallPointCount);
    const auto detections = pm::read_bop_results(results);
    const pm::GroundTruthSet gt = pm::read_ground_truth(gt_path);
    pm::EvalOptions options;
    options.max_detections_per_image = max_dets;
    options.threads = threads;
    const pm::ApReport report = pm::evaluate(detections, gt, options);

    if (!out.empty()) pm::write_text_file(out, pm::format_report_json(report));
    if (!csv.empty()) pm::write_text_file(csv, pm::format_report_csv(report, method, dataset));

    std::printf("%-10s %8s\n", "IoU", "AP");
    for (std::size_t t = 0; t < pm::kIouThresholdCount; ++t) {
        std::printf("%-10.2f %8.4f\n", pm::iou_thresholds()[t], report.per_threshold_ap[t]);
    }
    std::printf("\n%-10s %8s\n", "class", "AP");
    for (const auto& [cls, ap] : report.per_class_ap) std::printf("%-10u %8.4f\n", cls.value, ap);
    std::printf("\nmean_ap %.6f (%zu classes)\n", report.mean_ap, report.evaluated_classes);
    return 0;
}

int run_prototype_similarity(const std::string& store_path, const std::string& out) {
    const pm::PrototypeStore store = pm::load_store(store_path);
    const auto m = pm::prototype_similarity_matrix(store);
    std::string csv = "class_id";
    for (const pm::Prototype& p : store.prototypes()) csv += "," + std::to_string(p.class_id.value);
    csv += '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
        csv += std::to_string(store.prototypes()[i].class_id.value);
        for (const double v : m[i]) csv += "," + pm::format_double(v);
        csv += '\n';
    }
    pm::write_text_file(out, csv);
    spdlog::info("wrote {}x{} similarity matrix to {}", m.size(), m.size(), out);
    return 0;
}

int run_validate(const std::vector<std::string>& paths) {
    bool clean = true;
    for (const std::string& path : paths) {
        const pm::ValidationReport report = pm::validate_file(path);
        std::printf("%s: %s, %zu violation(s)\n", path.c_str(), report.format.c_str(),
                    report.violations.size());
        for (const pm::Violation& v : report.violations) {
            std::printf("  [%s] %s: %s\n", v.kind.c_str(), v.location.c_str(), v.message.c_str());
        }
        clean = clean && report.clean();
    }
    return clean ? 0 : kExitViolations;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("protomatch");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");

    CLI::App app{"Training-free few-shot object detection by prototype matching"};
    app.require_subcommand(1);

    GlobalOptions g;
    const char* env_level = std::getenv("PROTOMATCH_LOG_LEVEL");
    g.log_level = env_level != nullptr ? env_level : "info";
    app.add_option("--config", g.config_path, "Run configuration file (TOML)")->check(CLI::ExistingFile);
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

    std::string supports, out, provenance, proposals, embeddings, store, results, gt, csv;
    std::string method = "protomatch";
    std::string dataset = "local";
    std::optional<double> tau, classwise_nms;
    unsigned threads = 0;
    std::size_t max_dets = 100;
    bool record_time = false;
    std::vector<std::string> validate_paths;

    auto* build = app.add_subcommand("build-prototypes", "Build a prototype store from support embeddings");
    build->add_option("--supports", supports, "Support embedding archive")->required()->check(CLI::ExistingFile);
    build->add_option("--out", out, "Output store path")->required();
    build->add_option("--provenance", provenance, "Extractor identifier (default: from the archive)");

    auto* filter = app.add_subcommand("filter-proposals", "Apply area, score and NMS filters to proposals");
    filter->add_option("--proposals", proposals, "Proposal archive (JSON lines)")->required()->check(CLI::ExistingFile);
    filter->add_option("--out", out, "Retained-index file")->required();

    auto* detect = app.add_subcommand("detect", "Match proposals against prototypes");
    detect->add_option("--proposals", proposals, "Proposal archive (JSON lines)")->required()->check(CLI::ExistingFile);
    detect->add_option("--embeddings", embeddings, "Proposal embedding archive")->required()->check(CLI::ExistingFile);
    detect->add_option("--store", store, "Prototype store")->required()->check(CLI::ExistingFile);
    detect->add_option("--out", out, "BOP result file")->required();
    detect->add_option("--tau", tau, "Filter threshold on S_filter")->check(CLI::Range(0.0, 1.0));
    detect->add_option("--classwise-nms", classwise_nms, "Class-wise NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
    detect->add_option("--threads", threads, "Worker threads (0 = all cores)");
    detect->add_flag("--record-time", record_time, "Write measured matching time instead of -1");

    auto* evaluate = app.add_subcommand("evaluate", "Compute AP@[.50:.95] against local ground truth");
    evaluate->add_option("--results", results, "BOP result file")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--gt", gt, "Ground-truth annotation file")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--out", out, "ApReport JSON output");
    evaluate->add_option("--csv", csv, "Optional one-row CSV table");
    evaluate->add_option("--method", method, "Method label for the CSV");
    evaluate->add_option("--dataset", dataset, "Dataset label for the CSV");
    evaluate->add_option("--max-dets", max_dets, "Detections kept per image and class");
    evaluate->add_option("--threads", threads, "Worker threads (0 = all cores)");

    auto* similarity = app.add_subcommand("prototype-similarity", "Pairwise cosine between class prototypes");
    similarity->add_option("--store", store, "Prototype store")->required()->check(CLI::ExistingFile);
    similarity->add_option("--out", out, "CSV output")->required();

    auto* validate = app.add_subcommand("validate", "Check interchange files for schema violations");
    validate->add_option("paths", validate_paths, "Files to check")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    try {
        if (build->parsed()) return run_build_prototypes(g, supports, out, provenance);
        if (filter->parsed()) return run_filter_proposals(g, proposals, out);
        if (detect->parsed()) {
            return run_detect(g, proposals, embeddings, store, out, tau, classwise_nms, threads, record_time);
        }
        if (evaluate->parsed()) {
            return run_evaluate(results, gt, out, csv, method, dataset, max_dets, threads);
        }
        if (similarity->parsed()) return run_prototype_similarity(store, out);
        if (validate->parsed()) return run_validate(validate_paths);
    } catch (const pm::Error& e) {
        spdlog::error("{}", e.what());
        return pm::exit_code(e.code());
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 70;
    }
    return kExitUsage;
}
