#pragma once

#include <cstdint>
#include <vector>

#include "wavenerf/tensor.hpp"

namespace wavenerf {

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor elu(const Tensor& a);       // alpha = 1
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);       // argument clamped at 700 to stay finite
Tensor abs(const Tensor& a);

// Scalar reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// x[..., C] scaled per row by s[..., 1]; leading extents must match.
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Sum over the middle axis: [A,B,C] -> [A,C].
Tensor sum_mid(const Tensor& x);

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);                    // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);   // [...,in]x[in,out]+[out]
Tensor bmm(const Tensor& a, const Tensor& b);                       // [B,m,k]x[B,k,n]

// ---- softmax & moments ------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);
// Entries with mask == 0 get probability 0; a fully masked row is all zeros.
Tensor masked_softmax_lastdim(const Tensor& x, const std::vector<uint8_t>& mask);
// x[P,V,C] + per-(point,view) mask -> [P,2C]: mean and population variance
// over the valid views; rows with no valid view are zero.
Tensor masked_moments_views(const Tensor& x, const std::vector<uint8_t>& mask);

// ---- convolution ------------------------------------------------------------

struct Conv2dOpts {
    int stride_h = 1, stride_w = 1;
    int dil_h = 1, dil_w = 1;
    int pad_h = 0, pad_w = 0;
};
Conv2dOpts conv_opts(int stride, int dilation, int padding);

// Cross-correlation: x[C,H,W], w[O,C,kh,kw] -> [O,H',W'].
Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dOpts& opts);
// Exact adjoint of conv2d under the same opts: y[O,H',W'], w[O,C,kh,kw] -> [C,H,W].
Tensor deconv2d(const Tensor& y, const Tensor& w, const Conv2dOpts& opts);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // x[C,H,W] + b[C]

// ---- interpolation ----------------------------------------------------------

// Coordinates are fixed geometry, never differentiated through. Samples
// outside the grid are clamped to the border; a sample farther than
// kClampMargin outside is flagged invalid.
inline constexpr double kClampMargin = 0.5;

struct SampleResult {
    Tensor values;               // [P, C]
    std::vector<uint8_t> valid;  // per point
};

// map[C,H,W] sampled at uv[P*2] = (x, y) pixel coordinates.
SampleResult interpolate_bilinear(const Tensor& map, const std::vector<double>& uv);
// vol[D,C,H,W] sampled at xyz[P*3] = (x, y, plane) coordinates.
SampleResult interpolate_trilinear(const Tensor& vol, const std::vector<double>& xyz);

// Half-pixel-aligned factor-2 upsampling of [C,H,W].
Tensor upsample2x_bilinear(const Tensor& x);

}  // namespace wavenerf
