#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <type_traits>
#include <vector>

namespace reettt {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

/// Caller checks that pos + sizeof(T) bytes are available.
template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(u);
}

/// Throw IoError on failure.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace reettt
