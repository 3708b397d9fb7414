#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace protomatch {

enum class ErrorCode {
    EmptyMask,
    MalformedRle,
    ZeroVector,
    DimensionMismatch,
    DuplicateClass,
    MissingEmbeddings,
    UnknownClass,
    InvalidArgument,
    Io,
    BadMagic,
    VersionMismatch,
    Corrupt,
    SchemaViolation,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Process exit status for an error family. Codes are stable; see README.
int exit_code(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace protomatch
