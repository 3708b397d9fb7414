#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "protomatch/bop_io.hpp"
#include "protomatch/error.hpp"
#include "protomatch/evaluation.hpp"
#include "protomatch/geometry.hpp"
#include "protomatch/pipeline.hpp"
#include "protomatch/prototype_store.hpp"
#include "protomatch/scoring.hpp"

namespace py = pybind11;
namespace pm = protomatch;
using namespace pybind11::literals;

// Class ids and embeddings cross the boundary as plain ints and float lists.
namespace pybind11::detail {

template <>
struct type_caster<pm::ClassId> {
    PYBIND11_TYPE_CASTER(pm::ClassId, const_name("int"));
    bool load(handle src, bool convert) {
        make_caster<std::uint32_t> inner;
        if (!inner.load(src, convert)) return false;
        value = pm::ClassId{cast_op<std::uint32_t>(inner)};
        return true;
    }
    static handle cast(pm::ClassId id, return_value_policy, handle) {
        return PyLong_FromUnsignedLong(id.value);
    }
};

template <>
struct type_caster<pm::Embedding> {
    PYBIND11_TYPE_CASTER(pm::Embedding, const_name("list[float]"));
    bool load(handle src, bool convert) {
        make_caster<std::vector<double>> inner;
        if (!inner.load(src, convert)) return false;
        value = pm::Embedding{cast_op<std::vector<double>&&>(std::move(inner))};
        return true;
    }
    static handle cast(const pm::Embedding& e, return_value_policy policy, handle parent) {
        return make_caster<std::vector<double>>::cast(e.values, policy, parent);
    }
};

}  // namespace pybind11::detail

namespace {

PYBIND11_CONSTINIT py::gil_safe_call_once_and_store<py::object> error_type;

pm::BinaryMask encode_array(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw py::value_error("mask must be a 2-d array");
    const auto h = static_cast<std::uint32_t>(a.shape(0));
    const auto w = static_cast<std::uint32_t>(a.shape(1));
    return pm::rle_encode(std::span<const std::uint8_t>(a.data(), a.size()), w, h);
}

py::array_t<std::uint8_t> decode_array(const pm::BinaryMask& m) {
    const auto dense = pm::rle_decode(m);
    py::array_t<std::uint8_t> out({m.height(), m.width()});
    std::memcpy(out.mutable_data(), dense.data(), dense.size());
    return out;
}

pm::SimilarityRow row_of(const std::vector<double>& scores) {
    pm::SimilarityRow row;
    for (std::size_t i = 0; i < scores.size(); ++i) row.class_ids.push_back(pm::ClassId{std::uint32_t(i)});
    row.scores = scores;
    return row;
}

}  // namespace

PYBIND11_MODULE(_protomatch, m) {
    m.doc() = "Training-free prototype matching for instance detection";

    error_type.call_once_and_store_result(
        [&]() { return py::object(py::exception<pm::Error>(m, "Error")); });
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const pm::Error& e) {
            py::object type = error_type.get_stored();
            py::object inst = type(e.what());
            inst.attr("code") = std::string(pm::to_string(e.code()));
            PyErr_SetObject(type.ptr(), inst.ptr());
        }
    });
    m.def("exit_code", [](const std::string& name) {
        for (int c = 0; c <= static_cast<int>(pm::ErrorCode::SchemaViolation); ++c) {
            const auto code = static_cast<pm::ErrorCode>(c);
            if (pm::to_string(code) == name) return pm::exit_code(code);
        }
        throw py::value_error("unknown error code " + name);
    }, "code"_a);

    // ------------------------------------------------------------ geometry
    py::class_<pm::BoundingBox>(m, "BoundingBox")
        .def(py::init([](std::int32_t x, std::int32_t y, std::int32_t w, std::int32_t h) {
                 return pm::BoundingBox{x, y, w, h};
             }),
             "x"_a, "y"_a, "w"_a, "h"_a)
        .def_readwrite("x", &pm::BoundingBox::x)
        .def_readwrite("y", &pm::BoundingBox::y)
        .def_readwrite("w", &pm::BoundingBox::w)
        .def_readwrite("h", &pm::BoundingBox::h)
        .def_property_readonly("area", &pm::BoundingBox::area)
        .def("fits", &pm::BoundingBox::fits, "image_width"_a, "image_height"_a)
        .def("to_list", [](const pm::BoundingBox& b) { return std::vector<std::int32_t>{b.x, b.y, b.w, b.h}; })
        .def(py::self == py::self)
        .def("__repr__", [](const pm::BoundingBox& b) {
            return "BoundingBox(" + std::to_string(b.x) + ", " + std::to_string(b.y) + ", " +
                   std::to_string(b.w) + ", " + std::to_string(b.h) + ")";
        });

    py::class_<pm::BinaryMask>(m, "BinaryMask")
        .def(py::init<std::uint32_t, std::uint32_t, std::vector<std::uint32_t>>(), "width"_a,
             "height"_a, "runs"_a)
        .def_static("from_array", &encode_array, "array"_a)
        .def("to_array", &decode_array)
        .def_property_readonly("width", &pm::BinaryMask::width)
        .def_property_readonly("height", &pm::BinaryMask::height)
        .def_property_readonly("runs", [](const pm::BinaryMask& mk) {
            return std::vector<std::uint32_t>(mk.runs().begin(), mk.runs().end());
        })
        .def_property_readonly("area", &pm::BinaryMask::area)
        .def(py::self == py::self);

    m.def("mask_to_bbox", &pm::mask_to_bbox, "mask"_a);
    m.def("box_iou", &pm::box_iou, "a"_a, "b"_a);
    m.def("mask_iou", &pm::mask_iou, "a"_a, "b"_a);

    py::class_<pm::MaskProposal>(m, "MaskProposal")
        .def(py::init(&pm::make_proposal), "mask"_a, "generator_iou"_a = 1.0, "stability"_a = 1.0)
        .def_readonly("mask", &pm::MaskProposal::mask)
        .def_readonly("generator_iou", &pm::MaskProposal::generator_iou)
        .def_readonly("stability", &pm::MaskProposal::stability)
        .def_readonly("bbox", &pm::MaskProposal::bbox)
        .def_readonly("area", &pm::MaskProposal::area_px);

    m.def("nms", [](const std::vector<pm::BoundingBox>& boxes, const std::vector<double>& scores,
                    double threshold) {
        if (boxes.size() != scores.size()) throw py::value_error("boxes and scores differ in length");
        std::vector<pm::ScoredBox> items;
        for (std::size_t i = 0; i < boxes.size(); ++i) items.push_back({boxes[i], scores[i]});
        return pm::nms(items, threshold);
    }, "boxes"_a, "scores"_a, "threshold"_a);

    // ------------------------------------------------------------- scoring
    m.def("l2_norm", [](const std::vector<double>& v) { return pm::l2_norm(v); }, "values"_a);
    m.def("l2_normalize", [](const std::vector<double>& v, double eps) {
        const auto z = pm::l2_normalize(v, eps);
        return std::vector<double>(z.values().begin(), z.values().end());
    }, "values"_a, "epsilon"_a = pm::kDefaultNormEpsilon);
    m.def("softmax_max", [](const std::vector<double>& s) { return pm::softmax_max(s); }, "scores"_a);

    py::class_<pm::ScoreBreakdown>(m, "ScoreBreakdown")
        .def_readonly("predicted", &pm::ScoreBreakdown::predicted)
        .def_readonly("s_max", &pm::ScoreBreakdown::s_max)
        .def_readonly("p_max", &pm::ScoreBreakdown::p_max)
        .def_readonly("s_filter", &pm::ScoreBreakdown::s_filter)
        .def_readonly("s_mc", &pm::ScoreBreakdown::s_mc)
        .def_readonly("s_final", &pm::ScoreBreakdown::s_final);

    // `predicted` is the position in `scores`.
    m.def("score_row", [](const std::vector<double>& s) {
        if (s.empty()) throw py::value_error("scores must not be empty");
        return pm::score_row(row_of(s));
    }, "scores"_a);

    // ---------------------------------------------------------- prototypes
    py::class_<pm::Prototype>(m, "Prototype")
        .def_readonly("class_id", &pm::Prototype::class_id)
        .def_readonly("vector", &pm::Prototype::vector)
        .def_readonly("k_support", &pm::Prototype::k_support);

    m.def("build_prototype", [](pm::ClassId id, std::vector<pm::Embedding> supports) {
        return pm::build_prototype({id, std::move(supports)});
    }, "class_id"_a, "supports"_a);

    py::class_<pm::PrototypeStore>(m, "PrototypeStore")
        .def(py::init<std::string>(), "provenance"_a = "")
        .def("add", [](pm::PrototypeStore& s, pm::ClassId id, std::vector<pm::Embedding> supports) {
            return s.add({id, std::move(supports)});
        }, "class_id"_a, "supports"_a)
        .def("__len__", &pm::PrototypeStore::size)
        .def("__contains__", &pm::PrototypeStore::contains)
        .def("at", &pm::PrototypeStore::at, "class_id"_a)
        .def_property_readonly("dimension", &pm::PrototypeStore::dimension)
        .def_property("provenance", &pm::PrototypeStore::provenance, &pm::PrototypeStore::set_provenance)
        .def_property_readonly("prototypes", [](const pm::PrototypeStore& s) {
            return std::vector<pm::Prototype>(s.prototypes().begin(), s.prototypes().end());
        })
        .def("cosine_scores", [](const pm::PrototypeStore& s, const std::vector<double>& e) {
            return pm::cosine_scores(pm::l2_normalize(e), s.prototypes()).scores;
        }, "embedding"_a)
        .def("similarity_matrix", &pm::prototype_similarity_matrix)
        .def("to_bytes", [](const pm::PrototypeStore& s) {
            const auto bytes = pm::serialize_store(s);
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        })
        .def_static("from_bytes", [](const py::bytes& b) {
            const std::string_view v = b;
            return pm::deserialize_store(std::span(reinterpret_cast<const std::uint8_t*>(v.data()), v.size()));
        }, "data"_a)
        .def("save", [](const pm::PrototypeStore& s, const std::filesystem::path& p) { pm::save_store(s, p); }, "path"_a)
        .def_static("load", &pm::load_store, "path"_a)
        .def(py::self == py::self);

    // ------------------------------------------------------------ pipeline
    py::enum_<pm::OverlapMetric>(m, "OverlapMetric")
        .value("Box", pm::OverlapMetric::Box)
        .value("Mask", pm::OverlapMetric::Mask);

    py::class_<pm::PipelineConfig>(m, "PipelineConfig")
        .def(py::init<>())
        .def_readwrite("min_area_ratio", &pm::PipelineConfig::min_area_ratio)
        .def_readwrite("generator_iou_floor", &pm::PipelineConfig::generator_iou_floor)
        .def_readwrite("stability_floor", &pm::PipelineConfig::stability_floor)
        .def_readwrite("theta_nms", &pm::PipelineConfig::theta_nms)
        .def_readwrite("proposal_nms_metric", &pm::PipelineConfig::proposal_nms_metric)
        .def_readwrite("tau", &pm::PipelineConfig::tau)
        .def_readwrite("classwise_nms_iou", &pm::PipelineConfig::classwise_nms_iou)
        .def("validate", &pm::PipelineConfig::validate)
        .def(py::self == py::self);

    py::class_<pm::ProposalBatch>(m, "ProposalBatch")
        .def(py::init([](std::int64_t scene, std::int64_t image, std::int32_t w, std::int32_t h) {
                 return pm::ProposalBatch{scene, image, w, h, {}, {}};
             }),
             "scene_id"_a, "image_id"_a, "width"_a, "height"_a)
        .def_readwrite("scene_id", &pm::ProposalBatch::scene_id)
        .def_readwrite("image_id", &pm::ProposalBatch::image_id)
        .def_readwrite("width", &pm::ProposalBatch::image_width)
        .def_readwrite("height", &pm::ProposalBatch::image_height)
        .def_readwrite("proposals", &pm::ProposalBatch::proposals)
        .def_readwrite("embeddings", &pm::ProposalBatch::embeddings)
        .def("add", [](pm::ProposalBatch& b, pm::MaskProposal p, std::optional<pm::Embedding> e) {
            b.proposals.push_back(std::move(p));
            b.embeddings.resize(b.proposals.size() - 1);
            b.embeddings.push_back(std::move(e));
        }, "proposal"_a, "embedding"_a = py::none());

    py::class_<pm::Detection>(m, "Detection")
        .def_readonly("bbox", &pm::Detection::bbox)
        .def_readonly("class_id", &pm::Detection::class_id)
        .def_readonly("score", &pm::Detection::score)
        .def_readonly("diagnostics", &pm::Detection::diagnostics)
        .def_readonly("proposal_index", &pm::Detection::proposal_index);

    py::class_<pm::DetectionRun>(m, "DetectionRun")
        .def_readonly("scene_id", &pm::DetectionRun::scene_id)
        .def_readonly("image_id", &pm::DetectionRun::image_id)
        .def_readonly("detections", &pm::DetectionRun::detections)
        .def_readonly("time", &pm::DetectionRun::time_s);

    m.def("filter_proposals", &pm::filter_proposals, "batch"_a, "config"_a = pm::PipelineConfig{});
    m.def("identify", [](const pm::ProposalBatch& b, const std::vector<std::size_t>& idx,
                         const pm::PrototypeStore& s, const pm::PipelineConfig& c) {
        return pm::identify(b, idx, s, c);
    }, "batch"_a, "indices"_a, "store"_a, "config"_a = pm::PipelineConfig{});
    m.def("detect", &pm::detect, "batch"_a, "store"_a, "config"_a = pm::PipelineConfig{});
    m.def("detect_all", [](const std::vector<pm::ProposalBatch>& batches, const pm::PrototypeStore& s,
                           const pm::PipelineConfig& c, unsigned threads, bool record_time) {
        py::gil_scoped_release release;
        return pm::detect_all(batches, s, c, threads, record_time);
    }, "batches"_a, "store"_a, "config"_a = pm::PipelineConfig{}, "threads"_a = 0,
       "record_time"_a = false);

    // ---------------------------------------------------------- evaluation
    py::class_<pm::ScoredDetection>(m, "ScoredDetection")
        .def(py::init([](std::int64_t scene, std::int64_t image, pm::ClassId c, pm::BoundingBox b,
                         double score, double time) {
                 return pm::ScoredDetection{scene, image, c, b, score, time};
             }),
             "scene_id"_a, "image_id"_a, "category_id"_a, "bbox"_a, "score"_a, "time"_a = -1.0)
        .def_readonly("scene_id", &pm::ScoredDetection::scene_id)
        .def_readonly("image_id", &pm::ScoredDetection::image_id)
        .def_readonly("category_id", &pm::ScoredDetection::class_id)
        .def_readonly("bbox", &pm::ScoredDetection::bbox)
        .def_readonly("score", &pm::ScoredDetection::score)
        .def_readonly("time", &pm::ScoredDetection::time_s)
        .def(py::self == py::self);

    py::class_<pm::GroundTruthAnnotation>(m, "GroundTruthAnnotation")
        .def(py::init([](std::int64_t scene, std::int64_t image, pm::ClassId c, pm::BoundingBox b,
                         bool ignore) { return pm::GroundTruthAnnotation{scene, image, c, b, ignore}; }),
             "scene_id"_a, "image_id"_a, "category_id"_a, "bbox"_a, "ignore"_a = false)
        .def_readonly("scene_id", &pm::GroundTruthAnnotation::scene_id)
        .def_readonly("image_id", &pm::GroundTruthAnnotation::image_id)
        .def_readonly("category_id", &pm::GroundTruthAnnotation::class_id)
        .def_readonly("bbox", &pm::GroundTruthAnnotation::bbox)
        .def_readonly("ignore", &pm::GroundTruthAnnotation::ignore);

    py::class_<pm::ImageInfo>(m, "ImageInfo")
        .def(py::init([](std::int64_t scene, std::int64_t image, std::int32_t w, std::int32_t h) {
                 return pm::ImageInfo{scene, image, w, h};
             }),
             "scene_id"_a, "image_id"_a, "width"_a, "height"_a)
        .def_readonly("scene_id", &pm::ImageInfo::scene_id)
        .def_readonly("image_id", &pm::ImageInfo::image_id)
        .def_readonly("width", &pm::ImageInfo::width)
        .def_readonly("height", &pm::ImageInfo::height);

    py::class_<pm::GroundTruthSet>(m, "GroundTruthSet")
        .def(py::init([](std::vector<pm::ClassId> c, std::vector<pm::ImageInfo> i,
                         std::vector<pm::GroundTruthAnnotation> a) {
                 return pm::GroundTruthSet{std::move(c), std::move(i), std::move(a)};
             }),
             "classes"_a, "images"_a, "annotations"_a)
        .def_readonly("classes", &pm::GroundTruthSet::classes)
        .def_readonly("images", &pm::GroundTruthSet::images)
        .def_readonly("annotations", &pm::GroundTruthSet::annotations)
        .def(py::self == py::self);

    py::class_<pm::ApReport>(m, "ApReport")
        .def_readonly("per_class_ap", &pm::ApReport::per_class_ap)
        .def_readonly("per_threshold_ap", &pm::ApReport::per_threshold_ap)
        .def_readonly("mean_ap", &pm::ApReport::mean_ap)
        .def_readonly("evaluated_classes", &pm::ApReport::evaluated_classes);

    m.def("flatten", [](const std::vector<pm::DetectionRun>& runs) { return pm::flatten(runs); }, "runs"_a);
    m.def("evaluate", [](const std::vector<pm::ScoredDetection>& dets, const pm::GroundTruthSet& gt,
                         std::size_t max_dets) {
        return pm::evaluate(dets, gt, {max_dets, 1});
    }, "detections"_a, "ground_truth"_a, "max_detections_per_image"_a = 100);
    m.def("iou_thresholds", &pm::iou_thresholds);

    // ------------------------------------------------------------------ io
    m.def("read_proposal_archive", &pm::read_proposal_archive, "path"_a);
    m.def("write_proposal_archive", [](const std::vector<pm::ProposalBatch>& b, const std::filesystem::path& p) {
        pm::write_proposal_archive(b, p);
    }, "batches"_a, "path"_a);
    m.def("read_bop_results", &pm::read_bop_results, "path"_a);
    m.def("write_bop_results", [](const std::vector<pm::ScoredDetection>& d, const std::filesystem::path& p) {
        pm::write_bop_results(d, p);
    }, "detections"_a, "path"_a);
    m.def("read_ground_truth", &pm::read_ground_truth, "path"_a);
    m.def("write_ground_truth", &pm::write_ground_truth, "ground_truth"_a, "path"_a);
    m.def("read_config", &pm::read_config, "path"_a);
    m.def("write_config", &pm::write_config, "config"_a, "path"_a);
    m.def("validate_file", [](const std::filesystem::path& p) {
        const auto r = pm::validate_file(p);
        py::list out;
        for (const auto& v : r.violations) out.append(py::make_tuple(v.kind, v.location, v.message));
        return py::make_tuple(r.format, out);
    }, "path"_a);
}
