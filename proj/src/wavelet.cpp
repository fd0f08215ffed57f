#include "wavenerf/wavelet.hpp"

#include <cmath>

#include "wavenerf/errors.hpp"
#include "wavenerf/ops.hpp"
#include "wavenerf/parallel.hpp"

namespace wavenerf {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

// Symmetric half-sample extension: ... x1 x0 | x0 x1 ... xn-1 | xn-1 ...
inline int reflect(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// One analysis pass along the last axis of a [rows, n] view.
void analyze_axis(const double* in, double* out_lo, double* out_hi, int64_t rows, int n,
                  const WaveletFilter& f) {
    const int half = n / 2;
    const int taps = static_cast<int>(f.lo.size());
    parallel_for(rows, [&](int64_t lo_r, int64_t hi_r) {
        for (int64_t r = lo_r; r < hi_r; ++r) {
            const double* x = in + r * n;
            double* yl = out_lo + r * half;
            double* yh = out_hi + r * half;
            for (int k = 0; k < half; ++k) {
                double al = 0.0, ah = 0.0;
                for (int t = 0; t < taps; ++t) {
                    const double xv = x[reflect(2 * k + t, n)];
                    al += f.lo[static_cast<size_t>(t)] * xv;
                    ah += f.hi[static_cast<size_t>(t)] * xv;
                }
                yl[k] = al;
                yh[k] = ah;
            }
        }
    }, 512);
}

// Transposed analysis: scatters band coefficients back along the last axis.
void synthesize_axis(const double* in_lo, const double* in_hi, double* out, int64_t rows, int n,
                     const WaveletFilter& f) {
    const int half = n / 2;
    const int taps = static_cast<int>(f.lo.size());
    parallel_for(rows, [&](int64_t lo_r, int64_t hi_r) {
        for (int64_t r = lo_r; r < hi_r; ++r) {
            const double* yl = in_lo + r * half;
            const double* yh = in_hi + r * half;
            double* x = out + r * n;
            std::fill(x, x + n, 0.0);
            for (int k = 0; k < half; ++k) {
                for (int t = 0; t < taps; ++t) {
                    const int i = reflect(2 * k + t, n);
                    x[i] += f.lo[static_cast<size_t>(t)] * yl[k] +
                            f.hi[static_cast<size_t>(t)] * yh[k];
                }
            }
        }
    }, 512);
}

// Rotates the last two axes of a [C, H, W] buffer into [C, W, H].
std::vector<double> transpose_hw(const std::vector<double>& in, int c, int h, int w) {
    std::vector<double> out(in.size());
    parallel_for(static_cast<int64_t>(c), [&](int64_t lo, int64_t hi) {
        for (int64_t ch = lo; ch < hi; ++ch) {
            const double* src = in.data() + ch * h * w;
            double* dst = out.data() + ch * h * w;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) dst[static_cast<int64_t>(j) * h + i] = src[static_cast<int64_t>(i) * w + j];
        }
    });
    return out;
}

void check_bands(const Subbands& b, const char* op) {
    const Shape& s = b.ll.shape();
    for (const Tensor* t : {&b.lh, &b.hl, &b.hh}) {
        if (t->shape() != s) {
            throw DimensionError(std::string(op) + ": band shape mismatch " + shape_str(s) +
                                 " vs " + shape_str(t->shape()));
        }
    }
}

}  // namespace

const WaveletFilter& wavelet_filter(const std::string& id) {
    static const std::vector<WaveletFilter> registry = {
        {"haar", {kInvSqrt2, kInvSqrt2}, {kInvSqrt2, -kInvSqrt2}},
    };
    for (const auto& f : registry) {
        if (f.id == id) return f;
    }
    throw ConfigError("unknown wavelet filter: " + id);
}

Subbands dwt2(const Tensor& image, const WaveletFilter& filter) {
    if (image.ndim() != 3) throw DimensionError("dwt2: image must be [C,H,W]");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("dwt2: extents must be even, got " + shape_str(image.shape()));
    }
    const int hh = h / 2, hw = w / 2;
    // Pass 1 along W.
    std::vector<double> lo_w(static_cast<size_t>(c) * h * hw), hi_w(lo_w.size());
    analyze_axis(image.raw(), lo_w.data(), hi_w.data(), static_cast<int64_t>(c) * h, w, filter);
    // Pass 2 along H via transpose.
    auto lo_w_t = transpose_hw(lo_w, c, h, hw);
    auto hi_w_t = transpose_hw(hi_w, c, h, hw);
    const size_t band = static_cast<size_t>(c) * hh * hw;
    std::vector<double> ll_t(band), hl_t(band), lh_t(band), hh_t(band);
    analyze_axis(lo_w_t.data(), ll_t.data(), hl_t.data(), static_cast<int64_t>(c) * hw, h, filter);
    analyze_axis(hi_w_t.data(), lh_t.data(), hh_t.data(), static_cast<int64_t>(c) * hw, h, filter);
    const Shape bs{c, hh, hw};
    Subbands out;
    out.ll = Tensor::from_data(bs, transpose_hw(ll_t, c, hw, hh));
    out.lh = Tensor::from_data(bs, transpose_hw(lh_t, c, hw, hh));
    out.hl = Tensor::from_data(bs, transpose_hw(hl_t, c, hw, hh));
    out.hh = Tensor::from_data(bs, transpose_hw(hh_t, c, hw, hh));
    return out;
}

Tensor idwt2(const Subbands& bands, const WaveletFilter& filter) {
    check_bands(bands, "idwt2");
    const int c = bands.ll.dim(0), hh = bands.ll.dim(1), hw = bands.ll.dim(2);
    const int h = hh * 2, w = hw * 2;
    // Invert pass 2 (along H), in transposed layout.
    auto ll_t = transpose_hw({bands.ll.data().begin(), bands.ll.data().end()}, c, hh, hw);
    auto lh_t = transpose_hw({bands.lh.data().begin(), bands.lh.data().end()}, c, hh, hw);
    auto hl_t = transpose_hw({bands.hl.data().begin(), bands.hl.data().end()}, c, hh, hw);
    auto hh_t = transpose_hw({bands.hh.data().begin(), bands.hh.data().end()}, c, hh, hw);
    std::vector<double> lo_w_t(static_cast<size_t>(c) * hw * h), hi_w_t(lo_w_t.size());
    synthesize_axis(ll_t.data(), hl_t.data(), lo_w_t.data(), static_cast<int64_t>(c) * hw, h, filter);
    synthesize_axis(lh_t.data(), hh_t.data(), hi_w_t.data(), static_cast<int64_t>(c) * hw, h, filter);
    auto lo_w = transpose_hw(lo_w_t, c, hw, h);
    auto hi_w = transpose_hw(hi_w_t, c, hw, h);
    // Invert pass 1 (along W).
    std::vector<double> img(static_cast<size_t>(c) * h * w);
    synthesize_axis(lo_w.data(), hi_w.data(), img.data(), static_cast<int64_t>(c) * h, w, filter);
    return Tensor::from_data({c, h, w}, std::move(img));
}

WaveletPyramid decompose(const Tensor& image, int levels, const WaveletFilter& filter) {
    if (levels != 2) throw ContractError("decompose: only J=2 is supported");
    if (image.ndim() != 3) throw DimensionError("decompose: image must be [C,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    if (h % 4 != 0 || w % 4 != 0) {
        throw DimensionError("decompose: extents must be divisible by 4, got " +
                             shape_str(image.shape()));
    }
    Subbands first = dwt2(image, filter);
    Subbands second = dwt2(first.ll, filter);
    WaveletPyramid p;
    p.low = second.ll;
    p.high_l1 = {second.lh, second.hl, second.hh};
    p.high_l2 = {first.lh, first.hl, first.hh};
    p.filter_id = filter.id;
    return p;
}

Tensor synthesize(const WaveletPyramid& pyramid) {
    const WaveletFilter& f = wavelet_filter(pyramid.filter_id);
    Subbands inner{pyramid.low, pyramid.high_l1[0], pyramid.high_l1[1], pyramid.high_l1[2]};
    Tensor ll = idwt2(inner, f);
    Subbands outer{ll, pyramid.high_l2[0], pyramid.high_l2[1], pyramid.high_l2[2]};
    return idwt2(outer, f);
}

Tensor compound_hf(const WaveletPyramid& pyramid) {
    std::vector<Tensor> parts;
    parts.reserve(6);
    for (const Tensor& b : pyramid.high_l1) parts.push_back(upsample2x_bilinear(b));
    for (const Tensor& b : pyramid.high_l2) parts.push_back(b);
    return concat(parts, 0);
}

Tensor iwb(const Tensor& f_prev, const std::array<Tensor, 3>& bands, const Tensor& weight,
           const Tensor& bias) {
    for (const Tensor& b : bands) {
        if (b.ndim() != 3 || f_prev.ndim() != 3 || b.dim(1) != f_prev.dim(1) ||
            b.dim(2) != f_prev.dim(2)) {
            throw DimensionError("iwb: extent mismatch between features " +
                                 shape_str(f_prev.shape()) + " and subband " + shape_str(b.shape()));
        }
    }
    Tensor stacked = concat({f_prev, bands[0], bands[1], bands[2]}, 0);
    Tensor up = deconv2d(stacked, weight, conv_opts(2, 1, 0));
    return elu(add_channel_bias(up, bias));
}

Tensor iwb_synthesis_weight(int channels, const WaveletFilter& filter) {
    if (filter.lo.size() != 2) {
        throw ContractError("iwb_synthesis_weight requires a 2-tap filter bank");
    }
    // Input channel blocks [LL | LH | HL | HH]; band XY scatters fH[ky]*fW[kx].
    const std::array<std::pair<const std::vector<double>*, const std::vector<double>*>, 4> taps = {{
        {&filter.lo, &filter.lo},
        {&filter.lo, &filter.hi},
        {&filter.hi, &filter.lo},
        {&filter.hi, &filter.hi},
    }};
    Tensor w = Tensor::zeros({4 * channels, channels, 2, 2});
    double* pw = w.raw();
    for (int band = 0; band < 4; ++band) {
        const auto& [fh, fw] = taps[static_cast<size_t>(band)];
        for (int c = 0; c < channels; ++c) {
            const int64_t in_ch = static_cast<int64_t>(band) * channels + c;
            for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx)
                    pw[((in_ch * channels + c) * 2 + ky) * 2 + kx] =
                        (*fh)[static_cast<size_t>(ky)] * (*fw)[static_cast<size_t>(kx)];
        }
    }
    return w;
}

std::vector<std::pair<std::string, Tensor>> pyramid_band_files(const std::string& stem,
                                                               const WaveletPyramid& pyramid) {
    static const char* names[3] = {"LH", "HL", "HH"};
    std::vector<std::pair<std::string, Tensor>> files;
    files.emplace_back(stem + ".L.pfm", pyramid.low);
    for (int i = 0; i < 3; ++i) files.emplace_back(stem + ".l1." + names[i] + ".pfm", pyramid.high_l1[i]);
    for (int i = 0; i < 3; ++i) files.emplace_back(stem + ".l2." + names[i] + ".pfm", pyramid.high_l2[i]);
    return files;
}

}  // namespace wavenerf
