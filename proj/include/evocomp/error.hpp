#pragma once

#include <stdexcept>
#include <string>

namespace evocomp {

enum class Errc {
    dimension_mismatch,
    non_finite,
    empty_input,
    out_of_range,
    length_mismatch,
    invalid_config,
    io,
    format,
    search_space_too_large,
    scorer_failure,
    transport,
    malformed_response,
    protocol,
    remote_error,
    timeout,
};

inline const char* errc_name(Errc c) noexcept {
    switch (c) {
        case Errc::dimension_mismatch: return "dimension-mismatch";
        case Errc::non_finite: return "non-finite";
        case Errc::empty_input: return "empty-input";
        case Errc::out_of_range: return "out-of-range";
        case Errc::length_mismatch: return "length-mismatch";
        case Errc::invalid_config: return "invalid-config";
        case Errc::io: return "io";
        case Errc::format: return "format";
        case Errc::search_space_too_large: return "search-space-too-large";
        case Errc::scorer_failure: return "scorer-failure";
        case Errc::transport: return "transport";
        case Errc::malformed_response: return "malformed-response";
        case Errc::protocol: return "protocol";
        case Errc::remote_error: return "remote-error";
        case Errc::timeout: return "timeout";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    [[nodiscard]] Errc code() const noexcept { return code_; }

    /// True for failures raised while talking to an external scorer process.
    [[nodiscard]] bool is_remote() const noexcept {
        return code_ == Errc::transport || code_ == Errc::malformed_response ||
               code_ == Errc::protocol || code_ == Errc::remote_error || code_ == Errc::timeout;
    }

private:
    Errc code_;
};

}  // namespace evocomp
