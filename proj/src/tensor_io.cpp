#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "cstransfer/binary_io.hpp"
#include "cstransfer/errors.hpp"
#include "cstransfer/tensor.hpp"

namespace cstransfer {

namespace {
constexpr std::array<char, 4> kMagic{'C', 'S', 'T', 'N'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kMagic.data(), kMagic.size());
    binio::write_u32(out, kTensorFormatVersion);
    binio::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) {
        binio::write_u64(out, d);
    }
    for (double v : t.values()) {
        binio::write_f64(out, v);
    }
    if (!out) {
        throw FormatError("write_tensor: stream write failed");
    }
}

Tensor read_tensor(std::istream& in) {
    std::array<char, 4> magic{};
    binio::read_exact(in, magic.data(), magic.size(), "tensor magic");
    if (magic != kMagic) {
        throw FormatError("read_tensor: bad magic bytes");
    }
    const auto version = binio::read_u32(in, "tensor version");
    if (version != kTensorFormatVersion) {
        throw FormatError("read_tensor: unsupported version " + std::to_string(version));
    }
    const auto rank = binio::read_u32(in, "tensor rank");
    if (rank > kMaxRank) {
        throw FormatError("read_tensor: implausible rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) {
        const auto v = binio::read_u64(in, "tensor dim");
        if (v == 0 || v > (std::uint64_t{1} << 32)) {
            throw FormatError("read_tensor: invalid dim " + std::to_string(v));
        }
        d = static_cast<std::size_t>(v);
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
        v = binio::read_f64(in, "tensor data");
    }
    try {
        return Tensor(std::move(shape), std::move(values));
    } catch (const NumericError&) {
        throw FormatError("read_tensor: non-finite value in payload");
    }
}

}  // namespace cstransfer
