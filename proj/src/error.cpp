#include "protomatch/error.hpp"

namespace protomatch {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::EmptyMask: return "EmptyMask";
        case ErrorCode::MalformedRle: return "MalformedRle";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::DuplicateClass: return "DuplicateClass";
        case ErrorCode::MissingEmbeddings: return "MissingEmbeddings";
        case ErrorCode::UnknownClass: return "UnknownClass";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::Io: return "Io";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::Corrupt: return "Corrupt";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
    }
    return "Unknown";
}

int exit_code(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument: return 2;
        case ErrorCode::Io: return 3;
        case ErrorCode::BadMagic:
        case ErrorCode::VersionMismatch:
        case ErrorCode::Corrupt:
        case ErrorCode::SchemaViolation: return 4;
        case ErrorCode::EmptyMask:
        case ErrorCode::MalformedRle:
        case ErrorCode::ZeroVector:
        case ErrorCode::DimensionMismatch: return 5;
        case ErrorCode::DuplicateClass: return 6;
        case ErrorCode::MissingEmbeddings: return 7;
        case ErrorCode::UnknownClass: return 8;
    }
    return 70;
}

}  // namespace protomatch
