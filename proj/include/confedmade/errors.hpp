#pragma once

#include <stdexcept>
#include <string>

namespace confedmade {

// Error taxonomy. Every throw site uses the most specific type so callers
// (and the CLI) can map failures to machine-readable records.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Rethrows the in-flight exception with a context prefix, preserving its
// type. Call from a catch block only.
[[noreturn]] inline void rethrow_with_context(const std::string& ctx) {
    try {
        throw;
    } catch (const DimensionError& e) {
        throw DimensionError(ctx + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(ctx + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(ctx + e.what());
    } catch (const NumericError& e) {
        throw NumericError(ctx + e.what());
    } catch (const DataError& e) {
        throw DataError(ctx + e.what());
    } catch (const FormatError& e) {
        throw FormatError(ctx + e.what());
    } catch (const UsageError& e) {
        throw UsageError(ctx + e.what());
    } catch (const IoError& e) {
        throw IoError(ctx + e.what());
    } catch (const std::exception& e) {
        throw ProtocolError(ctx + e.what());
    }
}

}  // namespace confedmade
