#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace pcqr {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);

/// Parses a full token as a double; accepts "inf", "-inf", "+inf".
double parse_double(std::string_view text);

std::int64_t parse_int(std::string_view text);

/// Splits on a single delimiter character; keeps empty fields.
std::vector<std::string_view> split(std::string_view line, char delimiter);

std::string_view trim(std::string_view text);

/// Writes `contents` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// Raw little-endian binary stream helpers for model files.
class BinaryWriter {
  public:
    explicit BinaryWriter(std::ostream& out) : out_(out) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put_array(const T* data, std::size_t count) {
        put<std::uint64_t>(count);
        out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
    }

    void put_string(std::string_view text) { put_array(text.data(), text.size()); }

  private:
    std::ostream& out_;
};

class BinaryReader {
  public:
    explicit BinaryReader(std::istream& in) : in_(in) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        T value{};
        in_.read(reinterpret_cast<char*>(&value), sizeof(T));
        if (!in_) throw std::runtime_error("truncated binary stream");
        return value;
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    std::vector<T> get_array(std::uint64_t max_count = std::uint64_t{1} << 34) {
        const auto count = get<std::uint64_t>();
        if (count > max_count) throw std::runtime_error("corrupt binary stream: array too large");
        std::vector<T> values(count);
        in_.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(sizeof(T) * count));
        if (!in_) throw std::runtime_error("truncated binary stream");
        return values;
    }

    std::string get_string() {
        auto chars = get_array<char>(1 << 20);
        return {chars.begin(), chars.end()};
    }

  private:
    std::istream& in_;
};

}  // namespace pcqr
