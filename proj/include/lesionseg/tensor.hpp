#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lesionseg/errors.hpp"

namespace lesionseg::nn {

// Dense N x C x D x H x W tensor.
template <typename T>
struct Tensor {
    std::array<std::int64_t, 5> shape{0, 0, 0, 0, 0};
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, T fill = T(0))
        : shape{n, c, d, h, w}, data(static_cast<std::size_t>(n * c * d * h * w), fill) {}
    explicit Tensor(std::array<std::int64_t, 5> s, T fill = T(0))
        : Tensor(s[0], s[1], s[2], s[3], s[4], fill) {}

    std::int64_t batch() const noexcept { return shape[0]; }
    std::int64_t channels() const noexcept { return shape[1]; }
    std::int64_t spatial_size() const noexcept { return shape[2] * shape[3] * shape[4]; }
    std::size_t size() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }

    T* channel_ptr(std::int64_t n, std::int64_t c) noexcept {
        return data.data() + (n * shape[1] + c) * spatial_size();
    }
    const T* channel_ptr(std::int64_t n, std::int64_t c) const noexcept {
        return data.data() + (n * shape[1] + c) * spatial_size();
    }
    T& at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) noexcept {
        return data[static_cast<std::size_t>((((n * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x)];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return data[static_cast<std::size_t>((((n * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x)];
    }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.assign(t.data.begin(), t.data.end());
    return out;
}

}  // namespace lesionseg::nn
