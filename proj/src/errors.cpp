// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/errors.h"

namespace tpfp {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io: return "Io";
        case ErrorKind::MissingIndex: return "MissingIndex";
        case ErrorKind::HeaderMalformed: return "HeaderMalformed";
        case ErrorKind::SizeMismatch: return "SizeMismatch";
        case ErrorKind::UnsupportedDType: return "UnsupportedDType";
        case ErrorKind::DuplicateTensor: return "DuplicateTensor";
        case ErrorKind::ConfigMissing: return "ConfigMissing";
        case ErrorKind::ConfigFieldMissing: return "ConfigFieldMissing";
        case ErrorKind::TensorNotFound: return "TensorNotFound";
        case ErrorKind::UnresolvedLayer: return "UnresolvedLayer";
        case ErrorKind::AmbiguousPattern: return "AmbiguousPattern";
        case ErrorKind::ShapeContradiction: return "ShapeContradiction";
        case ErrorKind::RuleFileInvalid: return "RuleFileInvalid";
        case ErrorKind::KindMissing: return "KindMissing";
        case ErrorKind::DegenerateTensor: return "DegenerateTensor";
        case ErrorKind::NonFiniteEncountered: return "NonFiniteEncountered";
        case ErrorKind::DegenerateLayer: return "DegenerateLayer";
        case ErrorKind::DegenerateSequence: return "DegenerateSequence";
        case ErrorKind::ConstantInput: return "ConstantInput";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::TooFewSamples: return "TooFewSamples";
        case ErrorKind::TargetShorterThanSource: return "TargetShorterThanSource";
        case ErrorKind::DocumentMalformed: return "DocumentMalformed";
        case ErrorKind::SchemaVersionUnsupported: return "SchemaVersionUnsupported";
        case ErrorKind::HashMismatch: return "HashMismatch";
        case ErrorKind::DuplicateModelId: return "DuplicateModelId";
        case ErrorKind::RegistryLocked: return "RegistryLocked";
        case ErrorKind::SpecInvalid: return "SpecInvalid";
        case ErrorKind::Usage: return "Usage";
    }
    return "Unknown";
}

ErrorFamily family_of(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::MissingIndex:
        case ErrorKind::HeaderMalformed:
        case ErrorKind::SizeMismatch:
        case ErrorKind::UnsupportedDType:
        case ErrorKind::DuplicateTensor:
        case ErrorKind::ConfigMissing:
            return ErrorFamily::Io;
        case ErrorKind::ConfigFieldMissing:
        case ErrorKind::TensorNotFound:
        case ErrorKind::UnresolvedLayer:
        case ErrorKind::AmbiguousPattern:
        case ErrorKind::ShapeContradiction:
        case ErrorKind::RuleFileInvalid:
        case ErrorKind::KindMissing:
            return ErrorFamily::Resolution;
        case ErrorKind::DegenerateTensor:
        case ErrorKind::NonFiniteEncountered:
        case ErrorKind::DegenerateLayer:
        case ErrorKind::DegenerateSequence:
        case ErrorKind::ConstantInput:
        case ErrorKind::LengthMismatch:
        case ErrorKind::TooFewSamples:
        case ErrorKind::TargetShorterThanSource:
            return ErrorFamily::Numeric;
        case ErrorKind::DocumentMalformed:
        case ErrorKind::SchemaVersionUnsupported:
        case ErrorKind::HashMismatch:
        case ErrorKind::DuplicateModelId:
        case ErrorKind::RegistryLocked:
        case ErrorKind::SpecInvalid:
            return ErrorFamily::Integrity;
        case ErrorKind::Usage:
            return ErrorFamily::Usage;
    }
    return ErrorFamily::Usage;
}

}  // namespace tpfp
