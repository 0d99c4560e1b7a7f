// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tpfp {

enum class ErrorKind {
    // checkpoint / filesystem
    Io,
    MissingIndex,
    HeaderMalformed,
    SizeMismatch,
    UnsupportedDType,
    DuplicateTensor,
    ConfigMissing,
    // name and shape resolution
    ConfigFieldMissing,
    TensorNotFound,
    UnresolvedLayer,
    AmbiguousPattern,
    ShapeContradiction,
    RuleFileInvalid,
    KindMissing,
    // numerics
    DegenerateTensor,
    NonFiniteEncountered,
    DegenerateLayer,
    DegenerateSequence,
    ConstantInput,
    LengthMismatch,
    TooFewSamples,
    TargetShorterThanSource,
    // documents and registry
    DocumentMalformed,
    SchemaVersionUnsupported,
    HashMismatch,
    DuplicateModelId,
    RegistryLocked,
    SpecInvalid,
    // command line
    Usage,
};

// Grouping used for process exit codes.
enum class ErrorFamily { Usage = 1, Io = 2, Resolution = 3, Numeric = 4, Integrity = 5 };

std::string_view to_string(ErrorKind kind);
ErrorFamily family_of(ErrorKind kind);

inline int exit_code_for(ErrorKind kind) { return static_cast<int>(family_of(kind)); }

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& detail() const noexcept { return detail_; }

    // Same kind, message prefixed with `context`.
    Error with_context(std::string_view context) const {
        return Error(kind_, std::string(context) + ": " + detail_);
    }

private:
    ErrorKind kind_;
    std::string detail_;
};

}  // namespace tpfp
