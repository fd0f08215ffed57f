#pragma once

// Shared test utilities: independent oracles (finite differences, naive
// convolution/matmul loops, Gaussian blur) and small scene/config builders.
// Everything here is deliberately written without reference to the library
// kernels it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/ops.hpp"
#include "wavenerf/rng.hpp"
#include "wavenerf/tensor.hpp"

namespace wtest {

using namespace wavenerf;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool grad = false) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v), grad);
}

inline double eval_scalar(const std::function<Tensor()>& f) {
    NoGradGuard no_grad;
    return f().value();
}

// max|a-b| / (max|a| + max|b| + eps), the symmetric relative error used by
// every gradient check.
inline double rel_err(std::span<const double> a, std::span<const double> b) {
    double num = 0.0, ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::fabs(a[i] - b[i]));
        ma = std::max(ma, std::fabs(a[i]));
        mb = std::max(mb, std::fabs(b[i]));
    }
    return num / (ma + mb + 1e-12);
}

// Central finite differences of the scalar f() w.r.t. every element of x,
// recomputing the forward pass per probe.
inline std::vector<double> fd_grad(Tensor x, const std::function<Tensor()>& f, double eps = 1e-5) {
    std::vector<double> g(static_cast<size_t>(x.numel()));
    double* v = x.raw();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double saved = v[i];
        v[i] = saved + eps;
        const double up = eval_scalar(f);
        v[i] = saved - eps;
        const double dn = eval_scalar(f);
        v[i] = saved;
        g[static_cast<size_t>(i)] = (up - dn) / (2.0 * eps);
    }
    return g;
}

// Elementwise gradient check of f() (a scalar graph) w.r.t. each listed
// grad-enabled tensor. Returns the worst relative error.
inline double gradcheck(const std::vector<Tensor>& wrt, const std::function<Tensor()>& f,
                        double eps = 1e-5) {
    for (Tensor t : wrt) t.zero_grad();
    Tensor loss = f();
    backward(loss);
    double worst = 0.0;
    for (Tensor t : wrt) {
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        if (analytic.empty()) analytic.assign(static_cast<size_t>(t.numel()), 0.0);
        const std::vector<double> numeric = fd_grad(t, f, eps);
        worst = std::max(worst, rel_err(analytic, numeric));
    }
    return worst;
}

// Directional derivative check: perturbs the whole tensor along a random
// unit direction. Two forward passes per tensor, usable on large graphs.
inline double gradcheck_directional(Tensor t, const std::function<Tensor()>& f, Rng& rng,
                                    double eps = 1e-5) {
    t.zero_grad();
    Tensor loss = f();
    backward(loss);
    std::vector<double> dir(static_cast<size_t>(t.numel()));
    double norm = 0.0;
    for (double& d : dir) {
        d = rng.normal();
        norm += d * d;
    }
    norm = std::sqrt(norm);
    for (double& d : dir) d /= norm;
    double analytic = 0.0;
    auto g = t.grad();
    for (int64_t i = 0; i < t.numel(); ++i) analytic += g[i] * dir[static_cast<size_t>(i)];

    double* v = t.raw();
    std::vector<double> saved(v, v + t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) v[i] = saved[static_cast<size_t>(i)] + eps * dir[static_cast<size_t>(i)];
    const double up = eval_scalar(f);
    for (int64_t i = 0; i < t.numel(); ++i) v[i] = saved[static_cast<size_t>(i)] - eps * dir[static_cast<size_t>(i)];
    const double dn = eval_scalar(f);
    std::copy(saved.begin(), saved.end(), v);
    const double numeric = (up - dn) / (2.0 * eps);
    return std::fabs(analytic - numeric) / (std::fabs(analytic) + std::fabs(numeric) + 1e-9);
}

// Naive triple-loop matrix product.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int m, int k, int n) {
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int t = 0; t < k; ++t)
                out[static_cast<size_t>(i) * n + j] +=
                    a[static_cast<size_t>(i) * k + t] * b[static_cast<size_t>(t) * n + j];
    return out;
}

// Direct nested-loop cross-correlation with zero padding.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int c, int h, int w,
                                        const std::vector<double>& k, int o, int kh, int kw,
                                        int stride, int dilation, int pad, int& oh, int& ow) {
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    ow = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    std::vector<double> out(static_cast<size_t>(o) * oh * ow, 0.0);
    for (int oc = 0; oc < o; ++oc)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (int ic = 0; ic < c; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int y = i * stride - pad + ky * dilation;
                            const int xx = j * stride - pad + kx * dilation;
                            if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                            acc += x[(static_cast<size_t>(ic) * h + y) * w + xx] *
                                   k[((static_cast<size_t>(oc) * c + ic) * kh + ky) * kw + kx];
                        }
                out[(static_cast<size_t>(oc) * oh + i) * ow + j] = acc;
            }
    return out;
}

// Separable Gaussian blur with reflected borders (metrics tests only).
inline Tensor gaussian_blur(const Tensor& img, double sigma) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kern(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kern[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kern[static_cast<size_t>(i + radius)];
    }
    for (double& k : kern) k /= sum;
    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };
    std::vector<double> tmp(static_cast<size_t>(c) * h * w), out(tmp.size());
    const double* src = img.raw();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[static_cast<size_t>(i + radius)] *
                           src[(static_cast<size_t>(ch) * h + y) * w + reflect(x + i, w)];
                tmp[(static_cast<size_t>(ch) * h + y) * w + x] = acc;
            }
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[static_cast<size_t>(i + radius)] *
                           tmp[(static_cast<size_t>(ch) * h + reflect(y + i, h)) * w + x];
                out[(static_cast<size_t>(ch) * h + y) * w + x] = acc;
            }
    return Tensor::from_data({c, h, w}, std::move(out));
}

// Camera at `pos` looking at the origin; identical conventions to the
// scene generator but rebuilt here from first principles.
inline CameraView lookat_camera(const Eigen::Vector3d& pos, int size, double fov_deg, double near,
                                double far) {
    CameraView cam;
    const Eigen::Vector3d forward = (-pos).normalized();
    Eigen::Vector3d right = forward.cross(Eigen::Vector3d(0.0, 0.0, 1.0));
    if (right.norm() < 1e-9) right = Eigen::Vector3d(1.0, 0.0, 0.0);
    right.normalize();
    const Eigen::Vector3d down = forward.cross(right).normalized();
    cam.R.row(0) = right.transpose();
    cam.R.row(1) = down.transpose();
    cam.R.row(2) = forward.transpose();
    cam.t = -cam.R * pos;
    const double f = 0.5 * size / std::tan(0.5 * fov_deg * M_PI / 180.0);
    cam.K << f, 0, (size - 1) * 0.5, 0, f, (size - 1) * 0.5, 0, 0, 1;
    cam.width = cam.height = size;
    cam.near = near;
    cam.far = far;
    return cam;
}

// Micro pipeline configuration: 2 views, 8x8 images, 4 samples per ray.
inline Config micro_config() {
    Config cfg;
    cfg.seed = 7;
    cfg.model.spatial_channels = {3, 4, 5};
    cfg.model.freq_channels = 4;
    cfg.model.latent_channels = 3;
    cfg.model.cnn_hidden = 4;
    cfg.model.token_width = 8;
    cfg.model.attn_heads = 2;
    cfg.model.ff_hidden = 8;
    cfg.model.mlp_hidden = 6;
    cfg.volumes.d_spatial = {3, 4, 5};
    cfg.volumes.d_freq = 4;
    cfg.sampler.n_coarse = 3;
    cfg.sampler.n_fine = 1;
    cfg.scene.image_size = 8;
    cfg.scene.n_sources = 2;
    cfg.scene.n_train_targets = 2;
    cfg.scene.n_heldout = 1;
    cfg.scene.n_spheres = 1;
    cfg.scene.n_boxes = 0;
    cfg.train.steps = 2;
    cfg.train.batch = 4;
    return cfg;
}

// Small-but-real configuration for behavioral tests: 16x16 images, V=3.
inline Config mini_config() {
    Config cfg;
    cfg.seed = 11;
    cfg.model.spatial_channels = {4, 6, 8};
    cfg.model.freq_channels = 6;
    cfg.model.latent_channels = 4;
    cfg.model.cnn_hidden = 6;
    cfg.model.token_width = 8;
    cfg.model.attn_heads = 2;
    cfg.model.ff_hidden = 12;
    cfg.model.mlp_hidden = 8;
    cfg.volumes.d_spatial = {4, 6, 8};
    cfg.volumes.d_freq = 6;
    cfg.sampler.n_coarse = 12;
    cfg.sampler.n_fine = 4;
    cfg.scene.image_size = 16;
    cfg.scene.n_sources = 3;
    cfg.scene.n_train_targets = 3;
    cfg.scene.n_heldout = 1;
    cfg.scene.texture_freq = 5.0;
    cfg.train.steps = 3;
    cfg.train.batch = 8;
    cfg.train.lr = 1e-3;
    return cfg;
}

}  // namespace wtest
