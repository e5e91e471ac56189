#pragma once

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "zeroloc/tensor.hpp"

namespace zt {

inline zeroloc::Tensor make(std::vector<std::size_t> shape, std::vector<float> data) {
    return zeroloc::Tensor(std::move(shape), std::move(data));
}

inline zeroloc::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937& gen, float lo = -1.0f,
                                     float hi = 1.0f) {
    zeroloc::Tensor t = zeroloc::Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (float& v : t.data) v = dist(gen);
    return t;
}

inline bool bitwise_equal(const zeroloc::Tensor& a, const zeroloc::Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] != b.data[i]) return false;
    }
    return true;
}

inline double max_abs_diff(const zeroloc::Tensor& a, const zeroloc::Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    }
    return m;
}

// Unique path under the build temp dir; removed lazily by the OS, not us.
class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("zeroloc_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {});
}

inline void spit(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace zt
