#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "wavenerf/tensor.hpp"

namespace wavenerf {

// Orthonormal two-channel filter bank; synthesis reuses the analysis taps.
struct WaveletFilter {
    std::string id;
    std::vector<double> lo;
    std::vector<double> hi;
};

// Registry lookup by tag; "haar" is always available.
const WaveletFilter& wavelet_filter(const std::string& id);

struct Subbands {
    Tensor ll, lh, hl, hh;  // each [C, H/2, W/2]
};

// Level-2 image decomposition. Level indices follow the coarse-to-fine
// convention: level-1 subbands live at (H/4, W/4) next to the low band,
// level-2 subbands at (H/2, W/2).
struct WaveletPyramid {
    Tensor low;                      // w_L: [C, H/4, W/4]
    std::array<Tensor, 3> high_l1;   // LH, HL, HH at [C, H/4, W/4]
    std::array<Tensor, 3> high_l2;   // LH, HL, HH at [C, H/2, W/2]
    std::string filter_id;
};

// Separable one-level analysis with symmetric (half-sample) boundary
// extension. Band naming: LH is lowpass along H / highpass along W, HL the
// converse, HH highpass in both. Not differentiable: outputs are detached.
Subbands dwt2(const Tensor& image, const WaveletFilter& filter = wavelet_filter("haar"));

// Perfect-reconstruction synthesis: idwt2(dwt2(x)) == x for orthonormal taps.
Tensor idwt2(const Subbands& bands, const WaveletFilter& filter = wavelet_filter("haar"));

WaveletPyramid decompose(const Tensor& image, int levels = 2,
                         const WaveletFilter& filter = wavelet_filter("haar"));

// Full inverse of decompose.
Tensor synthesize(const WaveletPyramid& pyramid);

// 2D compounded high-frequency map: level-1 subbands upsampled x2 and
// concatenated with the level-2 subbands -> [6C, H/2, W/2].
Tensor compound_hf(const WaveletPyramid& pyramid);

// Inverse Wavelet Block: channel-concatenates the previous-level latent
// features with the current-level subband stack and applies a learnable
// stride-2 deconvolution (kernel 2x2) plus ELU, doubling the spatial
// extent. weight is [C_prev + 3*C_band, C_out, 2, 2], bias [C_out].
Tensor iwb(const Tensor& f_prev, const std::array<Tensor, 3>& bands, const Tensor& weight,
           const Tensor& bias);

// Deconvolution weights that embed the synthesis filter bank with identity
// channel mixing, so that iwb(LL, {LH,HL,HH}) with these weights matches
// idwt2 on nonnegative images. Requires 2-tap filters.
Tensor iwb_synthesis_weight(int channels, const WaveletFilter& filter = wavelet_filter("haar"));

// PFM export naming convention: <stem>.L.pfm for the low band,
// <stem>.l<level>.<LH|HL|HH>.pfm for the high bands.
std::vector<std::pair<std::string, Tensor>> pyramid_band_files(const std::string& stem,
                                                               const WaveletPyramid& pyramid);

}  // namespace wavenerf
