#pragma once

#include "wavenerf/tensor.hpp"

namespace wavenerf {

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double hfiv = 0.0;
};

inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) over [0,1] images; identical inputs cap at 99 dB.
double psnr(const Tensor& a, const Tensor& b);

// Mean local SSIM on the grayscale conversion, 11x11 Gaussian window
// (sigma 1.5), k1=0.01, k2=0.03, dynamic range 1.
double ssim(const Tensor& a, const Tensor& b);

// Proportion of high-frequency wavelet energy in an image; zero-energy
// images define HF_c == 0.
double high_freq_proportion(const Tensor& image);

// |HF_c(gt) - HF_c(rendered)| using the level-2 decomposition.
double hfiv(const Tensor& gt, const Tensor& rendered);

MetricReport evaluate_pair(const Tensor& gt, const Tensor& rendered);

}  // namespace wavenerf
