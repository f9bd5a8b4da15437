#pragma once

#include <stdexcept>
#include <string>

namespace mpo {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
    using Error::Error;
};
struct RankMismatch : Error {
    using Error::Error;
};
struct AxisMismatch : Error {
    using Error::Error;
};
struct ConvergenceFailure : Error {
    using Error::Error;
};
struct BondMismatch : Error {
    using Error::Error;
};
struct InvalidCap : Error {
    using Error::Error;
};
struct MissingCentral : Error {
    using Error::Error;
};
struct StaleCache : Error {
    using Error::Error;
};
struct InvalidGroupCount : Error {
    using Error::Error;
};
struct EmptyVocab : Error {
    using Error::Error;
};
struct VocabTooSmall : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct CorruptManifest : Error {
    using Error::Error;
};
struct VersionUnsupported : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

}  // namespace mpo
