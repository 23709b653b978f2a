#pragma once

#include <stdexcept>
#include <string>

namespace pdae {

/// Bad argument, shape, range, or ordering passed to an operation.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Inconsistent or incomplete configuration (unknown keys, missing weights, mismatched specs).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or unreadable input files (IDX, images, checkpoints).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// IDX file with a bad magic number, element type, dimension count, or size.
class IdxHeaderError : public FormatError {
public:
    explicit IdxHeaderError(const std::string& what) : FormatError(what) {}
};

/// An image file that cannot be opened or decoded.
class ImageReadError : public FormatError {
public:
    explicit ImageReadError(const std::string& what) : FormatError(what) {}
};

/// A dataset source that yields no items.
class EmptyDatasetError : public ValidationError {
public:
    explicit EmptyDatasetError(const std::string& what) : ValidationError(what) {}
};

/// A run-time invariant was violated (e.g. frozen parameters changed).
class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pdae
