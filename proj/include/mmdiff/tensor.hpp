#ifndef MMDIFF_TENSOR_HPP
#define MMDIFF_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdiff {

// Dense row-major tensor of doubles. Double precision keeps finite-difference
// gradient checks well below the noise floor they would hit in float32.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(count(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != count(shape)) {
            throw std::invalid_argument("tensor: data size does not match shape");
        }
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double x) {
        Tensor t(std::move(s));
        for (double& e : t.v) e = x;
        return t;
    }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
    double at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
    double& at(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int64_t> s) const {
        if (count(s) != numel()) throw std::invalid_argument("reshape: element count mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.v = v;
        return t;
    }

    bool all_finite() const {
        for (double e : v) {
            if (!std::isfinite(e)) return false;
        }
        return true;
    }

    double min() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double e : v) m = e < m ? e : m;
        return m;
    }
    double max() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double e : v) m = e > m ? e : m;
        return m;
    }
    double sum() const {
        double s = 0.0;
        for (double e : v) s += e;
        return s;
    }
    double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

// ---------------------------------------------------------------------------
// Counter-style RNG. splitmix64 for uniforms, Box-Muller for normals; fully
// specified so runs are reproducible bit-for-bit independent of the platform's
// <random> internals.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable mix for deriving independent seed streams, e.g. per-sample seeds
// from (global_seed, index).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    uint64_t st = s;
    return splitmix64(st);
}
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix_seed(mix_seed(a, b, c), d);
}

struct Rng {
    uint64_t state = 0;
    double spare = 0.0;
    bool has_spare = false;

    explicit Rng(uint64_t seed = 0) : state(seed) {}

    uint64_t next_u64() { return splitmix64(state); }

    // uniform in [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t n) {
        // n is small in this codebase; modulo bias is negligible for n << 2^64
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0) {
        for (double& e : t.v) e = mean + stddev * normal();
    }
    void fill_uniform(Tensor& t, double lo = 0.0, double hi = 1.0) {
        for (double& e : t.v) e = uniform(lo, hi);
    }
};

inline Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    rng.fill_normal(t);
    return t;
}

// ---------------------------------------------------------------------------
// FNV-1a checksums, used for manifest entries and frozen-weight verification.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t checksum(const Tensor& t, uint64_t h = 0xcbf29ce484222325ULL) {
    h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
    return fnv1a64(t.v.data(), t.v.size() * sizeof(double), h);
}

inline std::string hex64(uint64_t x) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[x & 0xf];
        x >>= 4;
    }
    return s;
}

}  // namespace mmdiff

#endif  // MMDIFF_TENSOR_HPP
