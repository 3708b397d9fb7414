#include "protomatch/bop_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>

#include "binary.hpp"
#include "protomatch/error.hpp"

namespace protomatch {

using nlohmann::json;

namespace {

constexpr std::string_view kArchiveMagic = "DPME";
constexpr std::string_view kStoreMagic = "DPMP";
constexpr std::size_t kArchiveHeaderSize = 4 + 2 + 4 + 8 + 1;

// Collects problems while parsing. A strict sink throws on the first one,
// which is how the readers use it; the validator keeps going.
class Sink {
public:
    explicit Sink(bool strict) : strict_(strict) {}

    void add(ErrorCode code, std::string kind, std::string location, std::string message) {
        if (strict_) {
            throw Error(code, (location.empty() ? "" : location + ": ") + message);
        }
        violations_.push_back({std::move(kind), std::move(location), std::move(message)});
    }
    void schema(std::string kind, std::string location, std::string message) {
        add(ErrorCode::SchemaViolation, std::move(kind), std::move(location), std::move(message));
    }

    std::size_t count() const noexcept { return violations_.size(); }
    std::vector<Violation>& violations() noexcept { return violations_; }

private:
    bool strict_;
    std::vector<Violation> violations_;
};

std::size_t element_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }
const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

std::optional<Dtype> parse_dtype(std::string_view s) {
    if (s == "f32") return Dtype::F32;
    if (s == "f64") return Dtype::F64;
    return std::nullopt;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

std::optional<json> parse_json(std::string_view text, Sink& sink, const std::string& where) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t line = line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1);
        sink.schema("json-syntax", where + "line " + std::to_string(line), e.what());
        return std::nullopt;
    }
}

// Field accessors that report instead of throwing json exceptions.
std::optional<std::int64_t> get_int(const json& obj, const char* field, Sink& sink,
                                    const std::string& loc, std::int64_t min_value = 0) {
    const auto it = obj.find(field);
    if (it == obj.end()) {
        sink.schema("missing-field", loc, std::string("missing \"") + field + "\"");
        return std::nullopt;
    }
    if (!it->is_number_integer()) {
        sink.schema("type", loc, std::string("\"") + field + "\" must be an integer");
        return std::nullopt;
    }
    const auto v = it->get<std::int64_t>();
    if (v < min_value) {
        sink.schema("range", loc, std::string("\"") + field + "\" must be >= " + std::to_string(min_value));
        return std::nullopt;
    }
    return v;
}

std::optional<double> get_number(const json& obj, const char* field, Sink& sink,
                                 const std::string& loc, std::optional<double> fallback = std::nullopt) {
    const auto it = obj.find(field);
    if (it == obj.end()) {
        if (fallback) return fallback;
        sink.schema("missing-field", loc, std::string("missing \"") + field + "\"");
        return std::nullopt;
    }
    if (!it->is_number()) {
        sink.schema("type", loc, std::string("\"") + field + "\" must be a number");
        return std::nullopt;
    }
    const double v = it->get<double>();
    if (!std::isfinite(v)) {
        sink.schema("non-finite", loc, std::string("\"") + field + "\" is not finite");
        return std::nullopt;
    }
    return v;
}

std::optional<BoundingBox> get_bbox(const json& obj, Sink& sink, const std::string& loc) {
    const auto it = obj.find("bbox");
    if (it == obj.end() || !it->is_array() || it->size() != 4 ||
        !std::all_of(it->begin(), it->end(), [](const json& v) { return v.is_number_integer(); })) {
        sink.schema("bbox", loc, "\"bbox\" must be an array of 4 integers");
        return std::nullopt;
    }
    const auto v = it->get<std::vector<std::int64_t>>();
    constexpr std::int64_t kMax = std::numeric_limits<std::int32_t>::max();
    if (v[0] < 0 || v[1] < 0 || v[2] < 1 || v[3] < 1 || v[0] > kMax || v[1] > kMax ||
        v[2] > kMax || v[3] > kMax) {
        sink.schema("bbox", loc, "\"bbox\" needs x, y >= 0 and w, h >= 1");
        return std::nullopt;
    }
    return BoundingBox{static_cast<std::int32_t>(v[0]), static_cast<std::int32_t>(v[1]),
                       static_cast<std::int32_t>(v[2]), static_cast<std::int32_t>(v[3])};
}

json key_to_json(const EmbeddingKey& key) {
    return std::visit(
        [](const auto& k) -> json {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, SupportKey>) {
                return {{"class_id", k.class_id.value}, {"support_index", k.support_index}};
            } else {
                return {{"scene_id", k.scene_id},
                        {"image_id", k.image_id},
                        {"proposal_index", k.proposal_index}};
            }
        },
        key);
}

std::optional<EmbeddingKey> key_from_json(const json& j, Sink& sink, const std::string& loc) {
    if (!j.is_object()) {
        sink.schema("bad-key", loc, "key must be an object");
        return std::nullopt;
    }
    if (j.contains("class_id")) {
        const std::size_t before = sink.count();
        const auto cls = get_int(j, "class_id", sink, loc);
        const auto idx = get_int(j, "support_index", sink, loc);
        if (sink.count() != before || !cls || !idx) return std::nullopt;
        if (*cls > std::numeric_limits<std::uint32_t>::max() ||
            *idx > std::numeric_limits<std::uint32_t>::max()) {
            sink.schema("range", loc, "class_id and support_index must fit in 32 bits");
            return std::nullopt;
        }
        return SupportKey{ClassId{static_cast<std::uint32_t>(*cls)}, static_cast<std::uint32_t>(*idx)};
    }
    if (j.contains("scene_id")) {
        const std::size_t before = sink.count();
        const auto scene = get_int(j, "scene_id", sink, loc);
        const auto image = get_int(j, "image_id", sink, loc);
        const auto idx = get_int(j, "proposal_index", sink, loc);
        if (sink.count() != before || !scene || !image || !idx) return std::nullopt;
        return ProposalKey{*scene, *image, static_cast<std::uint64_t>(*idx)};
    }
    sink.schema("bad-key", loc, "key needs class_id/support_index or scene_id/image_id/proposal_index");
    return std::nullopt;
}

// ---------------------------------------------------------------- embeddings

std::optional<EmbeddingArchive> parse_embedding_archive(std::span<const std::uint8_t> bytes,
                                                        const std::optional<std::string>& sidecar,
                                                        Sink& sink) {
    if (bytes.size() < kArchiveMagic.size() ||
        !std::equal(kArchiveMagic.begin(), kArchiveMagic.end(), bytes.begin())) {
        sink.add(ErrorCode::BadMagic, "bad-magic", "header", "not an embedding archive");
        return std::nullopt;
    }
    if (bytes.size() < kArchiveHeaderSize) {
        sink.add(ErrorCode::Corrupt, "truncated", "header", "header is truncated");
        return std::nullopt;
    }
    detail::ByteReader r(bytes);
    r.get_string(kArchiveMagic.size());
    const auto version = r.get<std::uint16_t>();
    const auto dim = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    const auto dtype_tag = r.get<std::uint8_t>();
    if (version != kEmbeddingArchiveVersion) {
        sink.add(ErrorCode::VersionMismatch, "version", "header",
                 "archive version " + std::to_string(version) + ", expected " +
                     std::to_string(kEmbeddingArchiveVersion));
        return std::nullopt;
    }
    if (dtype_tag > 1) {
        sink.schema("dtype", "header", "unknown dtype tag " + std::to_string(dtype_tag));
        return std::nullopt;
    }
    const Dtype dtype = static_cast<Dtype>(dtype_tag);
    const std::size_t payload = bytes.size() - kArchiveHeaderSize;
    const auto expected_for = [&](Dtype d) -> long double {
        return static_cast<long double>(count) * dim * element_size(d);
    };
    bool dtype_reported = false;
    if (static_cast<long double>(payload) != expected_for(dtype)) {
        const Dtype other = dtype == Dtype::F32 ? Dtype::F64 : Dtype::F32;
        if (count > 0 && dim > 0 && static_cast<long double>(payload) == expected_for(other)) {
            sink.add(ErrorCode::Corrupt, "dtype-mismatch", "header",
                     std::string("payload length matches ") + dtype_name(other) +
                         " records but the header declares " + dtype_name(dtype));
            dtype_reported = true;
        } else {
            sink.add(ErrorCode::Corrupt, "length-mismatch", "payload",
                     "payload is " + std::to_string(payload) + " bytes, header implies " +
                         std::to_string(static_cast<unsigned long long>(expected_for(dtype))));
        }
        return std::nullopt;
    }

    EmbeddingArchive archive;
    archive.dtype = dtype;
    archive.dim = dim;
    archive.values.resize(static_cast<std::size_t>(count) * dim);
    for (std::size_t i = 0; i < archive.values.size(); ++i) {
        const double v = dtype == Dtype::F32 ? static_cast<double>(r.get<float>()) : r.get<double>();
        if (!std::isfinite(v)) {
            sink.schema("non-finite", "record " + std::to_string(i / std::max<std::uint32_t>(dim, 1)),
                        "component " + std::to_string(i % std::max<std::uint32_t>(dim, 1)) +
                            " is not finite");
        }
        archive.values[i] = v;
    }

    if (!sidecar) {
        sink.schema("missing-sidecar", "sidecar", "metadata sidecar not found");
        return std::nullopt;
    }
    const auto meta = parse_json(*sidecar, sink, "sidecar ");
    if (!meta) return std::nullopt;
    if (!meta->is_object()) {
        sink.schema("type", "sidecar", "sidecar must be a JSON object");
        return std::nullopt;
    }
    const auto str_field = [&](const char* name) -> std::string {
        const auto it = meta->find(name);
        if (it == meta->end() || !it->is_string()) {
            sink.schema("missing-field", "sidecar", std::string("\"") + name + "\" must be a string");
            return {};
        }
        return it->get<std::string>();
    };
    archive.extractor = str_field("extractor");
    archive.crop_policy = str_field("crop_policy");
    const std::string dtype_str = str_field("dtype");
    const auto declared = parse_dtype(dtype_str);
    if (!dtype_reported && (!declared || *declared != dtype)) {
        sink.add(ErrorCode::Corrupt, "dtype-mismatch", "sidecar",
                 "sidecar dtype \"" + dtype_str + "\" disagrees with header " + dtype_name(dtype));
    }

    const auto keys_it = meta->find("keys");
    if (keys_it == meta->end() || !keys_it->is_array()) {
        sink.schema("missing-field", "sidecar", "\"keys\" must be an array");
        return std::nullopt;
    }
    if (keys_it->size() != count) {
        sink.schema("key-count", "sidecar",
                    std::to_string(keys_it->size()) + " keys for " + std::to_string(count) + " records");
        return std::nullopt;
    }
    std::set<EmbeddingKey> seen;
    for (std::size_t i = 0; i < keys_it->size(); ++i) {
        const std::string loc = "keys[" + std::to_string(i) + "]";
        auto key = key_from_json((*keys_it)[i], sink, loc);
        if (!key) continue;
        if (!seen.insert(*key).second) {
            // A repeated support key would silently double-weight a class.
            sink.add(std::holds_alternative<SupportKey>(*key) ? ErrorCode::DuplicateClass
                                                              : ErrorCode::SchemaViolation,
                     "duplicate-key", loc, "key appears more than once");
        }
        archive.keys.push_back(*key);
    }
    if (archive.keys.size() != count) return std::nullopt;
    return archive;
}

// ---------------------------------------------------------------- proposals

struct ProposalRecord {
    std::int64_t scene_id;
    std::int64_t image_id;
    std::int32_t width;
    std::int32_t height;
    MaskProposal proposal;
};

std::vector<ProposalRecord> parse_proposals(std::string_view text, Sink& sink) {
    std::vector<ProposalRecord> out;
    std::map<std::tuple<std::int64_t, std::int64_t>, std::pair<std::int64_t, std::int64_t>> dims;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string_view line =
            text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

        const std::string loc = "line " + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            sink.schema("json-syntax", loc, e.what());
            continue;
        }
        if (!j.is_object()) {
            sink.schema("type", loc, "record must be a JSON object");
            continue;
        }
        const std::size_t before = sink.count();
        const auto scene = get_int(j, "scene_id", sink, loc);
        const auto image = get_int(j, "image_id", sink, loc);
        const auto width = get_int(j, "width", sink, loc, 1);
        const auto height = get_int(j, "height", sink, loc, 1);
        const auto giou = get_number(j, "generator_iou", sink, loc, 1.0);
        const auto stab = get_number(j, "stability", sink, loc, 1.0);
        for (const auto& [name, v] : {std::pair{"generator_iou", giou}, std::pair{"stability", stab}}) {
            if (v && (*v < 0.0 || *v > 1.0)) sink.schema("range", loc, std::string(name) + " outside [0, 1]");
        }
        const auto rle_it = j.find("rle");
        if (rle_it == j.end() || !rle_it->is_array() ||
            !std::all_of(rle_it->begin(), rle_it->end(), [](const json& v) {
                return v.is_number_unsigned() && v.get<std::uint64_t>() <= 0xffffffffull;
            })) {
            sink.schema("rle", loc, "\"rle\" must be an array of non-negative 32-bit integers");
        }
        if (sink.count() != before) continue;
        if (*width > std::numeric_limits<std::int32_t>::max() ||
            *height > std::numeric_limits<std::int32_t>::max()) {
            sink.schema("range", loc, "image dimensions too large");
            continue;
        }

        const auto key = std::tuple{*scene, *image};
        const auto [it, inserted] = dims.try_emplace(key, *width, *height);
        if (!inserted && it->second != std::pair{*width, *height}) {
            sink.schema("image-dims", loc, "image size differs from earlier records of the same image");
            continue;
        }
        try {
            BinaryMask mask(static_cast<std::uint32_t>(*width), static_cast<std::uint32_t>(*height),
                            rle_it->get<std::vector<std::uint32_t>>());
            out.push_back({*scene, *image, static_cast<std::int32_t>(*width),
                           static_cast<std::int32_t>(*height),
                           make_proposal(std::move(mask), *giou, *stab)});
        } catch (const Error& e) {
            sink.schema(e.code() == ErrorCode::EmptyMask ? "empty-mask" : "rle-sum", loc, e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------- results

std::vector<ScoredDetection> parse_results(const json& j, Sink& sink) {
    std::vector<ScoredDetection> out;
    if (!j.is_array()) {
        sink.schema("type", "", "result file must be a JSON array");
        return out;
    }
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string loc = "[" + std::to_string(i) + "]";
        const json& r = j[i];
        if (!r.is_object()) {
            sink.schema("type", loc, "record must be an object");
            continue;
        }
        const std::size_t before = sink.count();
        const auto scene = get_int(r, "scene_id", sink, loc);
        const auto image = get_int(r, "image_id", sink, loc);
        const auto cat = get_int(r, "category_id", sink, loc);
        const auto box = get_bbox(r, sink, loc);
        const auto score = get_number(r, "score", sink, loc);
        const auto time = get_number(r, "time", sink, loc);
        if (sink.count() != before) continue;
        if (*cat > std::numeric_limits<std::uint32_t>::max()) {
            sink.schema("range", loc, "category_id too large");
            continue;
        }
        out.push_back({*scene, *image, ClassId{static_cast<std::uint32_t>(*cat)}, *box, *score, *time});
    }
    return out;
}

// ---------------------------------------------------------------- ground truth

GroundTruthSet parse_ground_truth(const json& j, Sink& sink) {
    GroundTruthSet gt;
    if (!j.is_object()) {
        sink.schema("type", "", "ground truth must be a JSON object");
        return gt;
    }
    const auto array_field = [&](const char* name) -> const json* {
        const auto it = j.find(name);
        if (it == j.end() || !it->is_array()) {
            sink.schema("missing-field", "", std::string("\"") + name + "\" must be an array");
            return nullptr;
        }
        return &*it;
    };

    std::set<ClassId> classes;
    if (const json* cats = array_field("categories")) {
        for (std::size_t i = 0; i < cats->size(); ++i) {
            const std::string loc = "categories[" + std::to_string(i) + "]";
            const json& c = (*cats)[i];
            if (!c.is_object()) {
                sink.schema("type", loc, "category must be an object");
                continue;
            }
            const auto id = get_int(c, "id", sink, loc);
            if (!id) continue;
            const ClassId cls{static_cast<std::uint32_t>(*id)};
            if (!classes.insert(cls).second) sink.schema("duplicate-category", loc, "category listed twice");
            gt.classes.push_back(cls);
        }
    }

    std::map<std::tuple<std::int64_t, std::int64_t>, ImageInfo> images;
    if (const json* ims = array_field("images")) {
        for (std::size_t i = 0; i < ims->size(); ++i) {
            const std::string loc = "images[" + std::to_string(i) + "]";
            const json& im = (*ims)[i];
            if (!im.is_object()) {
                sink.schema("type", loc, "image must be an object");
                continue;
            }
            const std::size_t before = sink.count();
            const auto scene = get_int(im, "scene_id", sink, loc);
            const auto image = get_int(im, "image_id", sink, loc);
            const auto w = get_int(im, "width", sink, loc, 1);
            const auto h = get_int(im, "height", sink, loc, 1);
            if (sink.count() != before) continue;
            const ImageInfo info{*scene, *image, static_cast<std::int32_t>(*w), static_cast<std::int32_t>(*h)};
            if (!images.try_emplace({*scene, *image}, info).second) {
                sink.schema("duplicate-image", loc, "image listed twice");
                continue;
            }
            gt.images.push_back(info);
        }
    }

    if (const json* anns = array_field("annotations")) {
        for (std::size_t i = 0; i < anns->size(); ++i) {
            const std::string loc = "annotations[" + std::to_string(i) + "]";
            const json& a = (*anns)[i];
            if (!a.is_object()) {
                sink.schema("type", loc, "annotation must be an object");
                continue;
            }
            const std::size_t before = sink.count();
            const auto scene = get_int(a, "scene_id", sink, loc);
            const auto image = get_int(a, "image_id", sink, loc);
            const auto cat = get_int(a, "category_id", sink, loc);
            const auto box = get_bbox(a, sink, loc);
            bool ignore = false;
            if (const auto it = a.find("ignore"); it != a.end()) {
                if (it->is_boolean()) {
                    ignore = it->get<bool>();
                } else if (it->is_number_integer()) {
                    ignore = it->get<std::int64_t>() != 0;
                } else {
                    sink.schema("type", loc, "\"ignore\" must be a boolean");
                }
            }
            if (sink.count() != before) continue;
            const ClassId cls{static_cast<std::uint32_t>(*cat)};
            if (!classes.contains(cls)) {
                sink.schema("unknown-category", loc, "category " + std::to_string(*cat) + " is not listed");
            }
            const auto im = images.find({*scene, *image});
            if (im == images.end()) {
                sink.schema("unknown-image", loc, "image is not listed");
            } else if (!box->fits(im->second.width, im->second.height)) {
                sink.schema("bbox-out-of-image", loc, "bbox exceeds the image bounds");
            }
            if (sink.count() != before) continue;
            gt.annotations.push_back({*scene, *image, cls, *box, ignore});
        }
    }
    return gt;
}

// ---------------------------------------------------------------- retained indices

std::vector<RetainedIndices> parse_retained(const json& j, Sink& sink) {
    std::vector<RetainedIndices> out;
    if (!j.is_array()) {
        sink.schema("type", "", "retained-index file must be a JSON array");
        return out;
    }
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string loc = "[" + std::to_string(i) + "]";
        const json& r = j[i];
        if (!r.is_object()) {
            sink.schema("type", loc, "entry must be an object");
            continue;
        }
        const std::size_t before = sink.count();
        const auto scene = get_int(r, "scene_id", sink, loc);
        const auto image = get_int(r, "image_id", sink, loc);
        const auto it = r.find("indices");
        if (it == r.end() || !it->is_array() ||
            !std::all_of(it->begin(), it->end(), [](const json& v) { return v.is_number_unsigned(); })) {
            sink.schema("indices", loc, "\"indices\" must be an array of non-negative integers");
        }
        if (sink.count() != before) continue;
        auto indices = it->get<std::vector<std::size_t>>();
        if (!std::is_sorted(indices.begin(), indices.end()) ||
            std::adjacent_find(indices.begin(), indices.end()) != indices.end()) {
            sink.schema("indices", loc, "indices must be strictly ascending");
            continue;
        }
        out.push_back({*scene, *image, std::move(indices)});
    }
    return out;
}

// ---------------------------------------------------------------- config

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

PipelineConfig parse_config_text(std::string_view text, Sink& sink) {
    PipelineConfig cfg;
    const std::map<std::string_view, double PipelineConfig::*> numeric = {
        {"min_area_ratio", &PipelineConfig::min_area_ratio},
        {"generator_iou_floor", &PipelineConfig::generator_iou_floor},
        {"stability_floor", &PipelineConfig::stability_floor},
        {"theta_nms", &PipelineConfig::theta_nms},
        {"tau", &PipelineConfig::tau},
        {"classwise_nms_iou", &PipelineConfig::classwise_nms_iou},
    };
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line =
            text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        const std::string loc = "line " + std::to_string(line_no);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line != "[pipeline]") sink.schema("unknown-section", loc, std::string(line));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            sink.schema("syntax", loc, "expected key = value");
            continue;
        }
        const std::string key(trim(line.substr(0, eq)));
        const std::string_view value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) {
            sink.schema("duplicate-key", loc, "\"" + key + "\" set twice");
            continue;
        }
        if (key == "proposal_nms_metric") {
            if (value == "\"box\"") {
                cfg.proposal_nms_metric = OverlapMetric::Box;
            } else if (value == "\"mask\"") {
                cfg.proposal_nms_metric = OverlapMetric::Mask;
            } else {
                sink.schema("value", loc, "proposal_nms_metric must be \"box\" or \"mask\"");
            }
            continue;
        }
        const auto field = numeric.find(key);
        if (field == numeric.end()) {
            sink.schema("unknown-key", loc, "unknown key \"" + key + "\"");
            continue;
        }
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
        if (ec != std::errc{} || ptr != value.data() + value.size() || !std::isfinite(v)) {
            sink.schema("value", loc, "\"" + key + "\" needs a number");
            continue;
        }
        if (v < 0.0 || v > 1.0) {
            sink.schema("range", loc, "\"" + key + "\" must lie in [0, 1]");
            continue;
        }
        cfg.*(field->second) = v;
    }
    return cfg;
}

std::optional<std::string> read_optional_text(const std::filesystem::path& path) {
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    return detail::read_text_file(path);
}

std::string dump_records(const std::vector<json>& records) {
    if (records.empty()) return "[]\n";
    std::string out = "[\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        out += "  ";
        out += records[i].dump();
        out += i + 1 < records.size() ? ",\n" : "\n";
    }
    out += "]\n";
    return out;
}

}  // namespace

// ============================================================================

void EmbeddingArchive::append(EmbeddingKey key, std::span<const double> r) {
    if (keys.empty() && values.empty() && dim == 0) dim = static_cast<std::uint32_t>(r.size());
    if (r.size() != dim) {
        throw Error(ErrorCode::DimensionMismatch,
                    "row has dim " + std::to_string(r.size()) + ", archive dim is " + std::to_string(dim));
    }
    keys.push_back(key);
    values.insert(values.end(), r.begin(), r.end());
}

std::filesystem::path sidecar_path(const std::filesystem::path& archive) {
    std::filesystem::path p = archive;
    p += ".json";
    return p;
}

void write_embedding_archive(const EmbeddingArchive& archive, const std::filesystem::path& path) {
    if (archive.values.size() != archive.keys.size() * archive.dim) {
        throw Error(ErrorCode::InvalidArgument, "archive values do not match keys x dim");
    }
    detail::ByteWriter w;
    w.put_bytes(kArchiveMagic);
    w.put<std::uint16_t>(kEmbeddingArchiveVersion);
    w.put<std::uint32_t>(archive.dim);
    w.put<std::uint64_t>(archive.keys.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(archive.dtype));
    for (const double v : archive.values) {
        if (archive.dtype == Dtype::F32) {
            w.put<float>(static_cast<float>(v));
        } else {
            w.put<double>(v);
        }
    }

    json keys = json::array();
    for (const auto& k : archive.keys) keys.push_back(key_to_json(k));
    const json meta = {
        {"format", "DPME"},
        {"version", kEmbeddingArchiveVersion},
        {"extractor", archive.extractor},
        {"crop_policy", archive.crop_policy},
        {"dtype", dtype_name(archive.dtype)},
        {"read_as", "f64"},
        {"keys", keys},
    };
    detail::write_file_atomic(sidecar_path(path), meta.dump(1) + "\n");
    detail::write_file_atomic(path, w.bytes());
}

EmbeddingArchive read_embedding_archive(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    const auto sidecar = read_optional_text(sidecar_path(path));
    Sink sink(true);
    auto archive = parse_embedding_archive(bytes, sidecar, sink);
    if (!archive) throw Error(ErrorCode::Corrupt, path.string() + " could not be read");
    return std::move(*archive);
}

std::vector<SupportSet> support_sets(const EmbeddingArchive& archive) {
    std::map<ClassId, std::map<std::uint32_t, std::size_t>> rows;
    for (std::size_t i = 0; i < archive.count(); ++i) {
        const auto* key = std::get_if<SupportKey>(&archive.keys[i]);
        if (key == nullptr) {
            throw Error(ErrorCode::SchemaViolation,
                        "record " + std::to_string(i) + " is keyed by proposal, expected class_id/support_index");
        }
        if (!rows[key->class_id].emplace(key->support_index, i).second) {
            throw Error(ErrorCode::DuplicateClass,
                        "class " + std::to_string(key->class_id.value) + " support " +
                            std::to_string(key->support_index) + " appears twice");
        }
    }
    std::vector<SupportSet> out;
    for (const auto& [cls, by_index] : rows) {
        SupportSet s{cls, {}};
        for (const auto& [idx, row] : by_index) {
            const auto r = archive.row(row);
            s.embeddings.push_back(Embedding{{r.begin(), r.end()}});
        }
        out.push_back(std::move(s));
    }
    return out;
}

void attach_embeddings(std::span<ProposalBatch> batches, const EmbeddingArchive& archive) {
    std::map<std::tuple<std::int64_t, std::int64_t>, ProposalBatch*> lookup;
    for (ProposalBatch& b : batches) {
        lookup[{b.scene_id, b.image_id}] = &b;
        b.embeddings.assign(b.proposals.size(), std::nullopt);
    }
    for (std::size_t i = 0; i < archive.count(); ++i) {
        const auto* key = std::get_if<ProposalKey>(&archive.keys[i]);
        if (key == nullptr) {
            throw Error(ErrorCode::SchemaViolation,
                        "record " + std::to_string(i) + " is keyed by class, expected a proposal key");
        }
        const std::string name = "scene " + std::to_string(key->scene_id) + " image " +
                                 std::to_string(key->image_id) + " proposal " +
                                 std::to_string(key->proposal_index);
        const auto it = lookup.find({key->scene_id, key->image_id});
        if (it == lookup.end() || key->proposal_index >= it->second->proposals.size()) {
            throw Error(ErrorCode::SchemaViolation, "embedding for unknown " + name);
        }
        auto& slot = it->second->embeddings[key->proposal_index];
        if (slot) throw Error(ErrorCode::SchemaViolation, "duplicate embedding for " + name);
        const auto r = archive.row(i);
        slot = Embedding{{r.begin(), r.end()}};
    }
}

void write_proposal_archive(std::span<const ProposalBatch> batches, const std::filesystem::path& path) {
    std::string out;
    for (const ProposalBatch& b : batches) {
        for (const MaskProposal& p : b.proposals) {
            const json j = {
                {"scene_id", b.scene_id},
                {"image_id", b.image_id},
                {"width", b.image_width},
                {"height", b.image_height},
                {"rle", std::vector<std::uint32_t>(p.mask.runs().begin(), p.mask.runs().end())},
                {"generator_iou", p.generator_iou},
                {"stability", p.stability},
            };
            out += j.dump();
            out += '\n';
        }
    }
    detail::write_file_atomic(path, out);
}

std::vector<ProposalBatch> read_proposal_archive(const std::filesystem::path& path) {
    Sink sink(true);
    auto records = parse_proposals(detail::read_text_file(path), sink);
    std::map<std::tuple<std::int64_t, std::int64_t>, ProposalBatch> grouped;
    for (ProposalRecord& r : records) {
        ProposalBatch& b = grouped[{r.scene_id, r.image_id}];
        b.scene_id = r.scene_id;
        b.image_id = r.image_id;
        b.image_width = r.width;
        b.image_height = r.height;
        b.proposals.push_back(std::move(r.proposal));
    }
    std::vector<ProposalBatch> out;
    out.reserve(grouped.size());
    for (auto& [key, b] : grouped) out.push_back(std::move(b));
    return out;
}

void sort_results(std::vector<ScoredDetection>& detections) {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const ScoredDetection& a, const ScoredDetection& b) {
                         if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
                         if (a.image_id != b.image_id) return a.image_id < b.image_id;
                         return a.score > b.score;
                     });
}

void write_bop_results(std::span<const ScoredDetection> detections, const std::filesystem::path& path) {
    std::vector<ScoredDetection> sorted(detections.begin(), detections.end());
    sort_results(sorted);
    std::vector<json> records;
    records.reserve(sorted.size());
    for (const ScoredDetection& d : sorted) {
        if (!std::isfinite(d.score)) throw Error(ErrorCode::InvalidArgument, "non-finite detection score");
        records.push_back({
            {"scene_id", d.scene_id},
            {"image_id", d.image_id},
            {"category_id", d.class_id.value},
            {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
            {"score", d.score},
            {"time", d.time_s},
        });
    }
    detail::write_file_atomic(path, dump_records(records));
}

std::vector<ScoredDetection> read_bop_results(const std::filesystem::path& path) {
    Sink sink(true);
    const auto j = parse_json(detail::read_text_file(path), sink, "");
    return parse_results(*j, sink);
}

void write_ground_truth(const GroundTruthSet& gt, const std::filesystem::path& path) {
    json cats = json::array();
    for (const ClassId c : gt.classes) cats.push_back({{"id", c.value}});
    json images = json::array();
    for (const ImageInfo& im : gt.images) {
        images.push_back({{"scene_id", im.scene_id},
                          {"image_id", im.image_id},
                          {"width", im.width},
                          {"height", im.height}});
    }
    json anns = json::array();
    for (const GroundTruthAnnotation& a : gt.annotations) {
        anns.push_back({{"scene_id", a.scene_id},
                        {"image_id", a.image_id},
                        {"category_id", a.class_id.value},
                        {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}},
                        {"ignore", a.ignore}});
    }
    const json doc = {{"categories", cats}, {"images", images}, {"annotations", anns}};
    detail::write_file_atomic(path, doc.dump(1) + "\n");
}

GroundTruthSet read_ground_truth(const std::filesystem::path& path) {
    Sink sink(true);
    const auto j = parse_json(detail::read_text_file(path), sink, "");
    return parse_ground_truth(*j, sink);
}

void write_retained_indices(std::span<const RetainedIndices> retained, const std::filesystem::path& path) {
    std::vector<json> records;
    for (const RetainedIndices& r : retained) {
        records.push_back({{"scene_id", r.scene_id}, {"image_id", r.image_id}, {"indices", r.indices}});
    }
    detail::write_file_atomic(path, dump_records(records));
}

std::vector<RetainedIndices> read_retained_indices(const std::filesystem::path& path) {
    Sink sink(true);
    const auto j = parse_json(detail::read_text_file(path), sink, "");
    return parse_retained(*j, sink);
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    detail::write_file_atomic(path, text);
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, ptr);
    // Keep the value recognisably floating point.
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string format_config(const PipelineConfig& cfg) {
    std::ostringstream out;
    out << "[pipeline]\n"
        << "min_area_ratio = " << format_double(cfg.min_area_ratio) << '\n'
        << "generator_iou_floor = " << format_double(cfg.generator_iou_floor) << '\n'
        << "stability_floor = " << format_double(cfg.stability_floor) << '\n'
        << "theta_nms = " << format_double(cfg.theta_nms) << '\n'
        << "proposal_nms_metric = "
        << (cfg.proposal_nms_metric == OverlapMetric::Mask ? "\"mask\"" : "\"box\"") << '\n'
        << "tau = " << format_double(cfg.tau) << '\n'
        << "classwise_nms_iou = " << format_double(cfg.classwise_nms_iou) << '\n';
    return out.str();
}

PipelineConfig parse_config(std::string_view text) {
    Sink sink(true);
    return parse_config_text(text, sink);
}

void write_config(const PipelineConfig& cfg, const std::filesystem::path& path) {
    detail::write_file_atomic(path, format_config(cfg));
}

PipelineConfig read_config(const std::filesystem::path& path) {
    return parse_config(detail::read_text_file(path));
}

std::string format_report_json(const ApReport& report) {
    json per_threshold = json::object();
    for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
        char key[16];
        std::snprintf(key, sizeof(key), "%.2f", iou_thresholds()[t]);
        per_threshold[key] = report.per_threshold_ap[t];
    }
    json per_class = json::object();
    for (const auto& [cls, ap] : report.per_class_ap) per_class[std::to_string(cls.value)] = ap;
    const json doc = {{"mean_ap", report.mean_ap},
                      {"evaluated_classes", report.evaluated_classes},
                      {"per_threshold_ap", per_threshold},
                      {"per_class_ap", per_class}};
    return doc.dump(2) + "\n";
}

std::string format_report_csv(const ApReport& report, std::string_view method, std::string_view dataset) {
    char value[32];
    std::snprintf(value, sizeof(value), "%.1f", report.mean_ap * 100.0);
    std::string out = "method,";
    out.append(dataset).append(",Mean\n").append(method).append(",");
    out.append(value).append(",").append(value).append("\n");
    return out;
}

ValidationReport validate_file(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    ValidationReport report;
    Sink sink(false);
    const auto starts_with = [&](std::string_view magic) {
        return bytes.size() >= magic.size() && std::equal(magic.begin(), magic.end(), bytes.begin());
    };
    const std::string ext = path.extension().string();
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());

    if (starts_with(kArchiveMagic) || ext == ".dpme") {
        report.format = "embedding-archive";
        const auto sidecar = read_optional_text(sidecar_path(path));
        parse_embedding_archive(bytes, sidecar, sink);
    } else if (starts_with(kStoreMagic) || ext == ".dpmp") {
        report.format = "prototype-store";
        try {
            deserialize_store(bytes);
        } catch (const Error& e) {
            sink.add(e.code(), std::string(to_string(e.code())), "store", e.what());
        }
    } else if (ext == ".jsonl") {
        report.format = "proposal-archive";
        parse_proposals(text, sink);
    } else if (ext == ".toml") {
        report.format = "run-config";
        parse_config_text(text, sink);
    } else if (ext == ".json") {
        const auto j = parse_json(text, sink, "");
        if (!j) {
            report.format = "json";
        } else if (j->is_array() && !j->empty() && (*j)[0].is_object() && (*j)[0].contains("indices")) {
            report.format = "retained-indices";
            parse_retained(*j, sink);
        } else if (j->is_array()) {
            report.format = "bop-results";
            const auto records = parse_results(*j, sink);
            if (sink.count() == 0) {
                for (std::size_t i = 1; i < records.size(); ++i) {
                    const auto& a = records[i - 1];
                    const auto& b = records[i];
                    if (std::tuple(a.scene_id, a.image_id, -a.score) > std::tuple(b.scene_id, b.image_id, -b.score)) {
                        sink.schema("unsorted", "[" + std::to_string(i) + "]",
                                    "records must be sorted by scene, image and descending score");
                    }
                }
            }
        } else if (j->is_object() && j->contains("annotations")) {
            report.format = "ground-truth";
            parse_ground_truth(*j, sink);
        } else {
            report.format = "json";
            sink.schema("unknown-format", "", "unrecognised JSON document");
        }
    } else {
        report.format = "unknown";
        sink.schema("unknown-format", "", "cannot infer the file format from " + path.filename().string());
    }
    report.violations = std::move(sink.violations());
    return report;
}

}  // namespace protomatch
