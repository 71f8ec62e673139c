#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hallucheck::util {

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(std::string_view text);

std::string sha256_hex(std::span<const unsigned char> bytes);
inline std::string sha256_hex(std::string_view s) {
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

/// UTC timestamp, ISO-8601 with seconds.
std::string utc_now();

/// Fixed-point rendering for tables and CSVs ("%.*f", locale independent).
std::string fixed(double v, int decimals);

/// Shortest round-trip decimal rendering of a double.
std::string shortest(double v);

std::string csv_escape(const std::string& s);

}  // namespace hallucheck::util
