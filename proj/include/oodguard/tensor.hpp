#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "oodguard/errors.hpp"

namespace oodguard {

enum class Dtype { f32, f64, i64 };

constexpr const char* descr_of(Dtype dt) {
    switch (dt) {
    case Dtype::f32: return "<f4";
    case Dtype::f64: return "<f8";
    case Dtype::i64: return "<i8";
    }
    return "?";
}

constexpr std::size_t element_size(Dtype dt) {
    return dt == Dtype::f32 ? 4 : 8;
}

// Dense row-major numeric buffer. The payload keeps its source type so that
// disk round-trips are bitwise; detector math converts to double on access.
class TensorBuffer {
public:
    using Storage =
        std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>>;

    TensorBuffer() : shape_{0}, data_(std::vector<double>{}) {}
    TensorBuffer(std::vector<std::size_t> shape, Storage data);

    static TensorBuffer from_f32(std::vector<std::size_t> shape, std::vector<float> v);
    static TensorBuffer from_f64(std::vector<std::size_t> shape, std::vector<double> v);
    static TensorBuffer from_i64(std::vector<std::size_t> shape, std::vector<std::int64_t> v);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept;          // element count
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    Dtype dtype() const noexcept;
    bool is_floating() const noexcept { return dtype() != Dtype::i64; }

    const Storage& storage() const noexcept { return data_; }
    const std::vector<float>& f32() const { return std::get<std::vector<float>>(data_); }
    const std::vector<double>& f64() const { return std::get<std::vector<double>>(data_); }
    const std::vector<std::int64_t>& i64() const {
        return std::get<std::vector<std::int64_t>>(data_);
    }

    // Element i converted to double regardless of dtype.
    double at_f64(std::size_t i) const;
    std::vector<double> to_f64() const;

    bool operator==(const TensorBuffer& other) const = default;

private:
    std::vector<std::size_t> shape_;
    Storage data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// NPY v1.0, C-order, little-endian only. Anything else is an error, never a
// silent conversion.
TensorBuffer read_npy(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_npy(const TensorBuffer& tensor);

TensorBuffer read_npy_file(const std::filesystem::path& path);
void write_npy_file(const std::filesystem::path& path, const TensorBuffer& tensor);

// Mean over all trailing spatial axes: [N, C, ...spatial] -> [N, C].
// Rank-2 input is returned unchanged.
TensorBuffer spatial_mean(const TensorBuffer& tensor);

}  // namespace oodguard
