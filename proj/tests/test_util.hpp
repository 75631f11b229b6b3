#ifndef MMDIFF_TEST_UTIL_HPP
#define MMDIFF_TEST_UTIL_HPP

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mmdiff/tensor.hpp"

namespace mmtest {

// Central finite differences of f at x, perturbing entry i of the buffer.
inline double central_diff(std::function<double()> f, double* slot, double h) {
    double orig = *slot;
    *slot = orig + h;
    double fp = f();
    *slot = orig - h;
    double fm = f();
    *slot = orig;
    return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    double d = std::fabs(a - b);
    double m = std::max(std::fabs(a), std::fabs(b));
    return d / std::max(m, floor);
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("mmdiff_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
};

}  // namespace mmtest

#endif  // MMDIFF_TEST_UTIL_HPP
