#pragma once

#include <span>
#include <vector>

#include "kmax/tensor.hpp"

namespace kmax {

// Linear algebra --------------------------------------------------------

// [m x k] x [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// 2-D transpose.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// x * W + b for row-major x; bias broadcasts over rows.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Adds a vector of length last-dim to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

// Normalization / attention maps ----------------------------------------

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
// One-hot of the maximum along `axis`; lowest index wins ties. The result is
// detached from the graph (zero gradient through the assignment).
Tensor argmax_onehot(const Tensor& x, std::size_t axis = 0);
// Per-row normalization over the last dim with learnable gain / bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Reductions ------------------------------------------------------------

// Reduces `axis` away (the axis is removed from the shape; a rank-1 input
// reduces to shape {1}).
Tensor reduce_sum(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Indexing --------------------------------------------------------------

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Gathers along axis 0 (rows may repeat).
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
// Gathers flat elements into a rank-1 tensor.
Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices);

// Spatial ---------------------------------------------------------------

// [H x W x C] -> [fH x fW x C], nearest neighbour.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
inline Tensor upsample2x(const Tensor& x) { return upsample_nearest(x, 2); }
// 3x3 convolution, zero padding 1. x: [H x W x Cin], weight: [3 x 3 x Cin x Cout].
// Output: [ceil(H/stride) x ceil(W/stride) x Cout]. stride in {1, 2}.
Tensor conv3x3(const Tensor& x, const Tensor& weight, std::size_t stride);

// Losses ----------------------------------------------------------------

inline constexpr int kIgnoreIndex = -1;

// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]]. Rows with
// target kIgnoreIndex are skipped. With empty `weights` the result is the
// mean over non-ignored rows (0 if all rows are ignored).
Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const double> weights = {});

}  // namespace kmax
