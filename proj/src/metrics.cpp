#include "wavenerf/metrics.hpp"

#include <cmath>
#include <vector>

#include "wavenerf/errors.hpp"
#include "wavenerf/wavelet.hpp"

namespace wavenerf {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": extent mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    if (a.ndim() != 3) throw DimensionError(std::string(op) + ": images must be [C,H,W]");
}

std::vector<double> to_gray(const Tensor& img) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<double> g(static_cast<size_t>(hw));
    const double* d = img.raw();
    if (c == 1) {
        std::copy(d, d + hw, g.begin());
    } else if (c == 3) {
        for (int64_t p = 0; p < hw; ++p) {
            g[static_cast<size_t>(p)] = 0.2126 * d[p] + 0.7152 * d[hw + p] + 0.0722 * d[2 * hw + p];
        }
    } else {
        throw DimensionError("ssim: images must have 1 or 3 channels");
    }
    return g;
}

double energy(const Tensor& t) {
    double acc = 0.0;
    for (const double v : t.data()) acc += v * v;
    return acc;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    check_pair(a, b, "psnr");
    double mse = 0.0;
    const double* pa = a.raw();
    const double* pb = b.raw();
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = pa[i] - pb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
    check_pair(a, b, "ssim");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = 0.01 * 0.01;
    constexpr double kC2 = 0.03 * 0.03;
    const int h = a.dim(1), w = a.dim(2);
    if (h < kWin || w < kWin) {
        throw DimensionError("ssim: image smaller than the 11x11 window");
    }
    const std::vector<double> ga = to_gray(a);
    const std::vector<double> gb = to_gray(b);

    double kernel[kWin];
    double ksum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double x = i - (kWin - 1) / 2.0;
        kernel[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
        ksum += kernel[i];
    }
    for (double& k : kernel) k /= ksum;

    // Separable Gaussian over valid positions only.
    auto blur = [&](const std::vector<double>& src) {
        std::vector<double> tmp(static_cast<size_t>(h) * (w - kWin + 1));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x + kWin <= w; ++x) {
                double acc = 0.0;
                for (int k = 0; k < kWin; ++k) acc += kernel[k] * src[static_cast<size_t>(y) * w + x + k];
                tmp[static_cast<size_t>(y) * (w - kWin + 1) + x] = acc;
            }
        }
        std::vector<double> out(static_cast<size_t>(h - kWin + 1) * (w - kWin + 1));
        for (int y = 0; y + kWin <= h; ++y) {
            for (int x = 0; x < w - kWin + 1; ++x) {
                double acc = 0.0;
                for (int k = 0; k < kWin; ++k) acc += kernel[k] * tmp[static_cast<size_t>(y + k) * (w - kWin + 1) + x];
                out[static_cast<size_t>(y) * (w - kWin + 1) + x] = acc;
            }
        }
        return out;
    };

    std::vector<double> aa(ga.size()), bb(gb.size()), ab(ga.size());
    for (size_t i = 0; i < ga.size(); ++i) {
        aa[i] = ga[i] * ga[i];
        bb[i] = gb[i] * gb[i];
        ab[i] = ga[i] * gb[i];
    }
    const auto mu_a = blur(ga);
    const auto mu_b = blur(gb);
    const auto m_aa = blur(aa);
    const auto m_bb = blur(bb);
    const auto m_ab = blur(ab);

    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double va = m_aa[i] - mu_a[i] * mu_a[i];
        const double vb = m_bb[i] - mu_b[i] * mu_b[i];
        const double cov = m_ab[i] - mu_a[i] * mu_b[i];
        acc += ((2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2)) /
               ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2));
    }
    return acc / static_cast<double>(mu_a.size());
}

double high_freq_proportion(const Tensor& image) {
    const WaveletPyramid p = decompose(image);
    double hf = 0.0;
    for (const Tensor& b : p.high_l1) hf += energy(b);
    for (const Tensor& b : p.high_l2) hf += energy(b);
    const double total = hf + energy(p.low);
    if (total <= 0.0) return 0.0;
    return hf / total;
}

double hfiv(const Tensor& gt, const Tensor& rendered) {
    check_pair(gt, rendered, "hfiv");
    if (gt.dim(1) % 4 != 0 || gt.dim(2) % 4 != 0) {
        throw DimensionError("hfiv: extents must be divisible by 4");
    }
    return std::fabs(high_freq_proportion(gt) - high_freq_proportion(rendered));
}

MetricReport evaluate_pair(const Tensor& gt, const Tensor& rendered) {
    MetricReport r;
    r.psnr = psnr(gt, rendered);
    r.ssim = ssim(gt, rendered);
    r.hfiv = hfiv(gt, rendered);
    return r;
}

}  // namespace wavenerf
