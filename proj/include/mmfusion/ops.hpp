#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmf {

using Ext2 = std::array<int64_t, 2>;
using Ext3 = std::array<int64_t, 3>;

// floor((in + 2*pad - kernel) / stride) + 1; throws ConfigError when the result is < 1
// or the stride is < 1.
int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, int64_t pad);

// Cross-correlation (no kernel flip) with zero padding. `bias` may be undefined.
// input [N,C,H,W], weight [O,C,kH,kW] -> [N,O,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Ext2 stride = {1, 1}, Ext2 padding = {0, 0});

// input [N,C,D,H,W], weight [O,C,kD,kH,kW] -> [N,O,D',H',W'].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Ext3 stride = {1, 1, 1}, Ext3 padding = {0, 0, 0});

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// Sum of all elements -> shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Normalizes over every axis except 1. In training mode uses batch statistics and updates
// the running buffers (momentum-weighted, unbiased variance); in eval mode uses the
// running buffers only.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     NDArray<T>& running_mean, NDArray<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

// Padding counts as -inf. Requires padding <= kernel / 2 on each axis.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, Ext2 kernel, Ext2 stride, Ext2 padding = {0, 0});

template <typename T>
Tensor<T> max_pool3d(const Tensor<T>& x, Ext3 kernel, Ext3 stride, Ext3 padding = {0, 0, 0});

// [N,C,...] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// x [N,F], weight [K,F], bias [K] (may be undefined) -> [N,K]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& tensors, size_t axis);

// Mean over the batch of -log softmax(logits)[label]. logits [N,K].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int64_t> labels);

// Row-wise softmax of [N,K] values (no graph).
template <typename T>
NDArray<T> softmax(const NDArray<T>& logits);

}  // namespace mmf
