#include "oodguard/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace oodguard {
namespace {

constexpr std::uint8_t kMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};

template <typename T>
void byteswap_all(std::vector<T>& v) {
    for (T& x : v) {
        auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(x);
        std::reverse(bytes.begin(), bytes.end());
        x = std::bit_cast<T>(bytes);
    }
}

template <typename T>
std::vector<T> decode_payload(std::span<const std::uint8_t> payload, std::size_t count) {
    std::vector<T> out(count);
    std::memcpy(out.data(), payload.data(), count * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) byteswap_all(out);
    return out;
}

template <typename T>
void encode_payload(const std::vector<T>& v, std::vector<std::uint8_t>& out) {
    std::vector<T> tmp;
    const T* src = v.data();
    if constexpr (std::endian::native == std::endian::big) {
        tmp = v;
        byteswap_all(tmp);
        src = tmp.data();
    }
    const auto offset = out.size();
    out.resize(offset + v.size() * sizeof(T));
    std::memcpy(out.data() + offset, src, v.size() * sizeof(T));
}

// Pulls the quoted/one-word value following "'key':" out of the header dict.
std::string dict_value(const std::string& header, const std::string& key) {
    const std::string needle = "'" + key + "':";
    const auto pos = header.find(needle);
    if (pos == std::string::npos) {
        raise(Errc::malformed_header, "header dict missing key '" + key + "'");
    }
    auto i = pos + needle.size();
    while (i < header.size() && header[i] == ' ') ++i;
    if (i >= header.size()) raise(Errc::malformed_header, "truncated header dict");
    if (header[i] == '\'') {
        const auto end = header.find('\'', i + 1);
        if (end == std::string::npos) raise(Errc::malformed_header, "unterminated string");
        return header.substr(i + 1, end - i - 1);
    }
    if (header[i] == '(') {
        const auto end = header.find(')', i);
        if (end == std::string::npos) raise(Errc::malformed_header, "unterminated shape tuple");
        return header.substr(i, end - i + 1);
    }
    auto end = header.find_first_of(",}", i);
    if (end == std::string::npos) raise(Errc::malformed_header, "unterminated value");
    std::string v = header.substr(i, end - i);
    while (!v.empty() && v.back() == ' ') v.pop_back();
    return v;
}

std::vector<std::size_t> parse_shape(const std::string& tuple) {
    if (tuple.size() < 2 || tuple.front() != '(' || tuple.back() != ')') {
        raise(Errc::malformed_header, "bad shape tuple: " + tuple);
    }
    std::vector<std::size_t> shape;
    std::size_t i = 1;
    while (i < tuple.size() - 1) {
        while (i < tuple.size() - 1 && (tuple[i] == ' ' || tuple[i] == ',')) ++i;
        if (i >= tuple.size() - 1) break;
        std::size_t value = 0;
        bool any = false;
        while (i < tuple.size() - 1 && tuple[i] >= '0' && tuple[i] <= '9') {
            value = value * 10 + static_cast<std::size_t>(tuple[i] - '0');
            ++i;
            any = true;
        }
        if (!any) raise(Errc::malformed_header, "non-numeric shape entry in " + tuple);
        shape.push_back(value);
    }
    return shape;
}

Dtype parse_descr(const std::string& descr) {
    if (descr == "<f4") return Dtype::f32;
    if (descr == "<f8") return Dtype::f64;
    if (descr == "<i8") return Dtype::i64;
    raise(Errc::unsupported_dtype, "dtype '" + descr + "' (supported: <f4, <f8, <i8)");
}

std::string format_shape(const std::vector<std::size_t>& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out += std::to_string(shape[i]);
        if (shape.size() == 1) {
            out += ",";
        } else if (i + 1 < shape.size()) {
            out += ", ";
        }
    }
    out += ")";
    return out;
}

}  // namespace

TensorBuffer::TensorBuffer(std::vector<std::size_t> shape, Storage data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    const auto declared = shape_product(shape_);
    const auto actual = std::visit([](const auto& v) { return v.size(); }, data_);
    if (declared != actual) {
        raise(Errc::size_mismatch, "shape declares " + std::to_string(declared) +
                                       " elements, buffer holds " + std::to_string(actual));
    }
}

TensorBuffer TensorBuffer::from_f32(std::vector<std::size_t> shape, std::vector<float> v) {
    return TensorBuffer(std::move(shape), Storage(std::move(v)));
}
TensorBuffer TensorBuffer::from_f64(std::vector<std::size_t> shape, std::vector<double> v) {
    return TensorBuffer(std::move(shape), Storage(std::move(v)));
}
TensorBuffer TensorBuffer::from_i64(std::vector<std::size_t> shape, std::vector<std::int64_t> v) {
    return TensorBuffer(std::move(shape), Storage(std::move(v)));
}

std::size_t TensorBuffer::size() const noexcept {
    return std::visit([](const auto& v) { return v.size(); }, data_);
}

Dtype TensorBuffer::dtype() const noexcept {
    switch (data_.index()) {
    case 0: return Dtype::f32;
    case 1: return Dtype::f64;
    default: return Dtype::i64;
    }
}

double TensorBuffer::at_f64(std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
}

std::vector<double> TensorBuffer::to_f64() const {
    return std::visit(
        [](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

TensorBuffer read_npy(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 10) raise(Errc::malformed_header, "file shorter than fixed preamble");
    if (std::memcmp(bytes.data(), kMagic, 6) != 0) {
        raise(Errc::malformed_header, "bad magic string");
    }
    if (bytes[6] != 0x01 || bytes[7] != 0x00) {
        raise(Errc::malformed_header, "unsupported format version " + std::to_string(bytes[6]) +
                                          "." + std::to_string(bytes[7]));
    }
    const std::size_t header_len =
        static_cast<std::size_t>(bytes[8]) | (static_cast<std::size_t>(bytes[9]) << 8);
    if (bytes.size() < 10 + header_len) raise(Errc::malformed_header, "truncated header");
    const std::string header(reinterpret_cast<const char*>(bytes.data()) + 10, header_len);
    if (header.empty() || header.back() != '\n') {
        raise(Errc::malformed_header, "header not newline-terminated");
    }

    const std::string order = dict_value(header, "fortran_order");
    if (order == "True") raise(Errc::malformed_header, "fortran_order=True is not supported");
    if (order != "False") raise(Errc::malformed_header, "bad fortran_order value: " + order);
    const Dtype dtype = parse_descr(dict_value(header, "descr"));
    const auto shape = parse_shape(dict_value(header, "shape"));

    const auto payload = bytes.subspan(10 + header_len);
    const auto count = shape_product(shape);
    if (payload.size() != count * element_size(dtype)) {
        raise(Errc::size_mismatch, "payload is " + std::to_string(payload.size()) +
                                       " bytes, expected " +
                                       std::to_string(count * element_size(dtype)));
    }

    switch (dtype) {
    case Dtype::f32: return TensorBuffer(shape, decode_payload<float>(payload, count));
    case Dtype::f64: return TensorBuffer(shape, decode_payload<double>(payload, count));
    case Dtype::i64: return TensorBuffer(shape, decode_payload<std::int64_t>(payload, count));
    }
    raise(Errc::unsupported_dtype, "unreachable");
}

std::vector<std::uint8_t> write_npy(const TensorBuffer& tensor) {
    std::string dict = "{'descr': '";
    dict += descr_of(tensor.dtype());
    dict += "', 'fortran_order': False, 'shape': ";
    dict += format_shape(tensor.shape());
    dict += ", }";
    // Pad with spaces so magic + version + length field + header is a
    // multiple of 64, with the final byte a newline.
    const std::size_t unpadded = 10 + dict.size() + 1;
    const std::size_t padded = (unpadded + 63) / 64 * 64;
    dict.append(padded - unpadded, ' ');
    dict += '\n';

    std::vector<std::uint8_t> out;
    out.reserve(padded + tensor.size() * element_size(tensor.dtype()));
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(0x01);
    out.push_back(0x00);
    out.push_back(static_cast<std::uint8_t>(dict.size() & 0xff));
    out.push_back(static_cast<std::uint8_t>((dict.size() >> 8) & 0xff));
    out.insert(out.end(), dict.begin(), dict.end());

    std::visit([&out](const auto& v) { encode_payload(v, out); }, tensor.storage());
    return out;
}

TensorBuffer read_npy_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(Errc::io_failure, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return read_npy(bytes);
}

void write_npy_file(const std::filesystem::path& path, const TensorBuffer& tensor) {
    const auto bytes = write_npy(tensor);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(Errc::io_failure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) raise(Errc::io_failure, "short write to " + path.string());
}

TensorBuffer spatial_mean(const TensorBuffer& tensor) {
    if (tensor.rank() < 2) {
        raise(Errc::dimension_mismatch, "spatial_mean needs rank >= 2, got rank " +
                                            std::to_string(tensor.rank()));
    }
    if (!tensor.is_floating()) {
        raise(Errc::unsupported_dtype, "spatial_mean over integer tensor");
    }
    if (tensor.rank() == 2) return tensor;

    const auto& shape = tensor.shape();
    const std::size_t n = shape[0];
    const std::size_t c = shape[1];
    std::size_t spatial = 1;
    for (std::size_t axis = 2; axis < shape.size(); ++axis) spatial *= shape[axis];

    std::vector<double> out(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t base = (i * c + j) * spatial;
            double acc = 0.0;
            for (std::size_t s = 0; s < spatial; ++s) acc += tensor.at_f64(base + s);
            out[i * c + j] = spatial > 0 ? acc / static_cast<double>(spatial) : 0.0;
        }
    }
    if (tensor.dtype() == Dtype::f32) {
        std::vector<float> out32(out.begin(), out.end());
        return TensorBuffer::from_f32({n, c}, std::move(out32));
    }
    return TensorBuffer::from_f64({n, c}, std::move(out));
}

}  // namespace oodguard
