#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace panfpn {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Dense rank-4 float tensor, (batch, channel, rows, cols), row-major contiguous.
/// An optional gradient buffer of identical shape is allocated on demand.
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w) : n_(n), c_(c), h_(h), w_(w) {
        if (n < 1 || c < 1 || h < 1 || w < 1) {
            throw ShapeError("tensor dimensions must all be >= 1, got (" + shape_str(n, c, h, w) + ")");
        }
        data_.assign(static_cast<size_t>(n) * c * h * w, 0.0f);
    }

    int n() const { return n_; }
    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }
    size_t size() const { return data_.size(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    float at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    size_t index(int n, int c, int h, int w) const {
        return ((static_cast<size_t>(n) * c_ + c) * h_ + h) * w_ + w;
    }

    bool same_shape(const Tensor& o) const {
        return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }

    std::string shape() const { return shape_str(n_, c_, h_, w_); }

    bool has_grad() const { return !grad_.empty(); }
    void ensure_grad() {
        if (grad_.empty()) grad_.assign(data_.size(), 0.0f);
    }
    void zero_grad() {
        if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0f);
    }
    float* grad() {
        ensure_grad();
        return grad_.data();
    }
    const float* grad() const { return grad_.data(); }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    static std::string shape_str(int n, int c, int h, int w) {
        return std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w);
    }

private:
    int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<float> data_;
    std::vector<float> grad_;
};

/// splitmix64 stream; identical seeds give identical parameter streams on any platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97f4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [0, m).
    uint64_t next_below(uint64_t m) { return next_u64() % m; }

private:
    uint64_t state_;
};

// --- tensor interchange file: "PTSR" magic, version 1, u8 rank, u32le dims, f32le data ---

namespace detail {
inline void put_u32le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline bool host_is_little_endian() {
    const uint32_t one = 1;
    return *reinterpret_cast<const unsigned char*>(&one) == 1;
}
}  // namespace detail

inline void save_tensor(std::ostream& os, const Tensor& t) {
    os.write("PTSR", 4);
    os.put(1);  // version
    os.put(4);  // rank
    detail::put_u32le(os, static_cast<uint32_t>(t.n()));
    detail::put_u32le(os, static_cast<uint32_t>(t.c()));
    detail::put_u32le(os, static_cast<uint32_t>(t.h()));
    detail::put_u32le(os, static_cast<uint32_t>(t.w()));
    if (detail::host_is_little_endian()) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
    } else {
        for (size_t i = 0; i < t.size(); ++i) {
            uint32_t bits;
            std::memcpy(&bits, t.data() + i, 4);
            detail::put_u32le(os, bits);
        }
    }
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    save_tensor(f, t);
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PTSR", 4) != 0) {
        throw std::runtime_error("not a tensor file (bad magic)");
    }
    const int version = is.get();
    if (version != 1) throw std::runtime_error("unsupported tensor file version " + std::to_string(version));
    const int rank = is.get();
    if (rank < 1 || rank > 4) throw std::runtime_error("unsupported tensor rank " + std::to_string(rank));
    std::array<uint32_t, 4> dims = {1, 1, 1, 1};
    // dims are stored outermost-first; pad missing leading dims with 1
    for (int i = 0; i < rank; ++i) dims[4 - rank + i] = detail::get_u32le(is);
    if (!is) throw std::runtime_error("truncated tensor header");
    Tensor t(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
             static_cast<int>(dims[3]));
    if (detail::host_is_little_endian()) {
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
    } else {
        for (size_t i = 0; i < t.size(); ++i) {
            uint32_t bits = detail::get_u32le(is);
            std::memcpy(t.data() + i, &bits, 4);
        }
    }
    if (!is) throw std::runtime_error("truncated tensor data");
    return t;
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    return load_tensor(f);
}

}  // namespace panfpn
