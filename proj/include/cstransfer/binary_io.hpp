#pragma once

// Little-endian primitive readers/writers shared by the tensor and
// checkpoint formats. Reads throw FormatError on truncation.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "cstransfer/errors.hpp"

namespace cstransfer::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        U out = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
        }
        return out;
    } else {
        return v;
    }
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, std::string_view what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw FormatError("truncated input while reading " + std::string(what));
    }
}

template <typename U>
void write_uint(std::ostream& out, U v) {
    const U le = to_little(v);
    char buf[sizeof(U)];
    std::memcpy(buf, &le, sizeof(U));
    out.write(buf, sizeof(U));
}

template <typename U>
U read_uint(std::istream& in, std::string_view what) {
    char buf[sizeof(U)];
    read_exact(in, buf, sizeof(U), what);
    U le;
    std::memcpy(&le, buf, sizeof(U));
    return to_little(le);
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_uint(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_uint(out, v); }
inline void write_f64(std::ostream& out, double v) { write_uint(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t read_u32(std::istream& in, std::string_view what) { return read_uint<std::uint32_t>(in, what); }
inline std::uint64_t read_u64(std::istream& in, std::string_view what) { return read_uint<std::uint64_t>(in, what); }
inline double read_f64(std::istream& in, std::string_view what) {
    return std::bit_cast<double>(read_uint<std::uint64_t>(in, what));
}

inline void write_string(std::ostream& out, std::string_view s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::string_view what, std::size_t max_len = std::size_t{1} << 28) {
    const auto len = read_u64(in, what);
    if (len > max_len) {
        throw FormatError("implausible string length while reading " + std::string(what));
    }
    std::string s(static_cast<std::size_t>(len), '\0');
    read_exact(in, s.data(), s.size(), what);
    return s;
}

}  // namespace cstransfer::binio
