#include "malimg/error.hpp"

namespace malimg {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::NotAligned: return "NotAligned";
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::UnknownFamily: return "UnknownFamily";
        case ErrorKind::FamilyTooSmall: return "FamilyTooSmall";
        case ErrorKind::BadSpec: return "BadSpec";
        case ErrorKind::BadConfig: return "BadConfig";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::BatchMismatch: return "BatchMismatch";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::StructuralMismatch: return "StructuralMismatch";
        case ErrorKind::EmptyCorpus: return "EmptyCorpus";
        case ErrorKind::TooFewRows: return "TooFewRows";
        case ErrorKind::DegenerateLabels: return "DegenerateLabels";
        case ErrorKind::EmptyReference: return "EmptyReference";
        case ErrorKind::ExternalToolFailure: return "ExternalToolFailure";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace malimg
