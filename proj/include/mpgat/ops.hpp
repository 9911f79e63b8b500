#pragma once

#include <vector>

#include "mpgat/tensor.hpp"

// Differentiable tensor operations. Every op validates its input shapes,
// computes the forward value, and (when a tape is active and some input
// requires a gradient) records a backward rule that accumulates into the
// inputs' grad buffers. Ops treat leading dimensions as batch where noted.

namespace mpgat {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// Activations.
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor tanh_t(const Tensor& x);
Tensor sigmoid_t(const Tensor& x);
Tensor abs_t(const Tensor& x);

// out = fill where mask != 0, else x. mask must not require grad.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double fill);

// Normalizes each slice along the last dimension; max-shifted for stability.
Tensor softmax_lastdim(const Tensor& x);

// Rank-2 matrix product [M x K] * [K x P] -> [M x P].
Tensor matmul(const Tensor& a, const Tensor& b);

// Leading dims of a and b must match; multiplies the trailing two:
// [.. x R x C] * [.. x C x Q] -> [.. x R x Q].
Tensor batch_matmul(const Tensor& a, const Tensor& b);

// x[.. x Din] * w[Din x Dout] (+ bias[Dout]) -> [.. x Dout].
Tensor linear_lastdim(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

// x[.. x Cin x T] with w[Cout x Cin] -> [.. x Cout x T]. A 1x1 convolution
// over the channel axis.
Tensor channel_linear(const Tensor& x, const Tensor& w);

// x[.. x Cin x T], w[Cout x Cin x K] -> [.. x Cout x T].
// out[..,c,t] = sum_{i,k} w[c,i,k] * x[..,i,t - k*dilation], zero for
// negative time indices; never reads future inputs.
Tensor dilated_causal_conv1d(const Tensor& x, const Tensor& w, int64_t dilation);

// out[.., i, j] = s1[.., i] + s2[.., j]; s1 and s2 share shape [.. x F].
Tensor pairwise_add(const Tensor& s1, const Tensor& s2);

// x[B x F x N x T] lifted by w[F x D]: out[b,f,n,t,d] = x[b,f,n,t] * w[f,d].
Tensor feature_lift(const Tensor& x, const Tensor& w);

// Slices preserved in argument order along `axis`; all other dims equal.
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);

// Drops `axis`, keeping the slice at `index`.
Tensor select_axis(const Tensor& x, int64_t axis, int64_t index);

// Rows [begin, end) of the first axis.
Tensor slice_axis0(const Tensor& x, int64_t begin, int64_t end);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);

// Reductions.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_lastdim(const Tensor& x);

// Non-differentiable helper: tile a tensor B times along a new leading axis.
Tensor repeat_leading(const Tensor& x, int64_t times);

bool all_finite(const Tensor& x);

}  // namespace mpgat
