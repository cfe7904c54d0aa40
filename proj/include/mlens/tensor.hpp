#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mlens/common.hpp"
#include "mlens/rng.hpp"

namespace mlens {

// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
// No views or strides; ops copy. Storage precision on disk is 32-bit (EMBD).
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != data_.size())
            throw ShapeError("tensor: shape does not match data length");
#ifndef NDEBUG
        check_finite("construct");
#endif
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::size_t n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        std::size_t n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor truncated_normal(std::vector<std::size_t> shape, double stddev, Rng& rng) {
        std::size_t n = element_count(shape);
        std::vector<double> d(n);
        for (auto& x : d) x = rng.truncated_normal(stddev);
        return Tensor(std::move(shape), std::move(d));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors; rank is the caller's contract.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 0 : shape_[1]; }

    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    void ensure_grad() {
        if (!grad) grad = std::vector<double>(data_.size(), 0.0);
    }
    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }

    void check_finite(const char* what) const {
        for (double v : data_)
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << ']';
        return os.str();
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffull));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    explicit ByteReader(const std::string& b) : buf(b) {}

    std::size_t remaining() const { return buf.size() - pos; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw DataError(std::string("unexpected end of data while reading ") + what);
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]);
        pos += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        std::uint64_t lo = u32(what);
        std::uint64_t hi = u32(what);
        return lo | (hi << 32);
    }

    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

// EMBD tensor format: magic "EMBD", u32 LE version=1, u32 rank, rank x u32
// dims, row-major 32-bit LE floats. Values widen to 64-bit on load.
inline void append_embd(std::string& out, const Tensor& t) {
    out.append("EMBD", 4);
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f32(out, static_cast<float>(t[i]));
}

inline Tensor read_embd(detail::ByteReader& r) {
    if (r.bytes(4, "EMBD magic") != "EMBD") throw DataError("bad EMBD magic");
    std::uint32_t version = r.u32("EMBD version");
    if (version != 1) throw DataError("unsupported EMBD version " + std::to_string(version));
    std::uint32_t rank = r.u32("EMBD rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u32("EMBD dim");
    std::size_t n = Tensor::element_count(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = static_cast<double>(r.f32("EMBD value"));
    Tensor t(std::move(shape), std::move(data));
    t.check_finite("EMBD payload");
    return t;
}

inline void save_embd(const Tensor& t, const std::string& path) {
    std::string buf;
    append_embd(buf, t);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline Tensor load_embd(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    std::string buf = os.str();
    detail::ByteReader r(buf);
    Tensor t = read_embd(r);
    if (r.remaining() != 0) throw DataError("trailing bytes after EMBD payload: " + path);
    return t;
}

// Round every value to 32-bit storage precision in place. Checkpoint saves
// apply this to the live state so a resumed run continues from exactly the
// bytes on disk.
inline void quantize_to_storage(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(static_cast<float>(t[i]));
}

}  // namespace mlens
