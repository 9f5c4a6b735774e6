#pragma once

#include <stdexcept>
#include <string>

namespace ctxspeech {

// Shape/dimension mismatch between tensors. Message names the offending shapes.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Violated call contract (non-scalar loss, non-finite position scaling, ...).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid or inconsistent configuration (layer counts, widths, divisibility).
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad user-supplied input (empty text, non-positive durations, unreadable file).
class InputError : public std::invalid_argument {
public:
    explicit InputError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Embedding provider failure, carries the token/sentence position in the message.
class ProviderError : public std::runtime_error {
public:
    explicit ProviderError(const std::string& msg) : std::runtime_error(msg) {}
};

// Sequence-length disagreement when fusing parallel feature streams.
class AlignmentError : public std::invalid_argument {
public:
    explicit AlignmentError(const std::string& msg) : std::invalid_argument(msg) {}
};

} // namespace ctxspeech
