#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace fedcpc {

using Rng = std::mt19937_64;

/// Combines seed material into one 64-bit seed (splitmix64 chain).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// 64-bit FNV-1a; stable across platforms, used to key per-utterance seeds.
std::uint64_t stable_hash(std::string_view text);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is
/// processed exactly once; callers write results to index-owned slots so the
/// outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body);

/// True when FEDCPC_DETERMINISTIC is set to a non-empty value other than "0".
bool deterministic_mode();

/// Diagnostics go to stderr.
void log_warning(const std::string& message);
void log_info(const std::string& message);
void set_log_quiet(bool quiet);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

}  // namespace fedcpc
