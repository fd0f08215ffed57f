#include "wavenerf/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "wavenerf/errors.hpp"

namespace wavenerf {

std::vector<double> sample_coarse(const Ray& ray, int n_coarse, Rng& rng) {
    if (n_coarse < 2) throw ContractError("sample_coarse requires n_coarse >= 2");
    std::vector<double> z(static_cast<size_t>(n_coarse));
    const double width = (ray.far - ray.near) / n_coarse;
    for (int i = 0; i < n_coarse; ++i) {
        z[static_cast<size_t>(i)] = ray.near + (i + rng.uniform()) * width;
    }
    return z;
}

namespace {

// Value-only trilinear mean-|.| over all channels of [D,C,H,W].
double mean_abs_sample(const Tensor& grid, double x, double y, double plane) {
    const int d = grid.dim(0), c = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
    auto axis = [](double v, int n) {
        v = std::min(std::max(v, 0.0), static_cast<double>(n - 1));
        int i0 = std::min(static_cast<int>(v), n - 2);
        if (i0 < 0) i0 = 0;
        const double f = v - i0;
        return std::tuple<int, int, double, double>(i0, std::min(i0 + 1, n - 1), 1.0 - f, f);
    };
    const auto [x0, x1, wx0, wx1] = axis(x, w);
    const auto [y0, y1, wy0, wy1] = axis(y, h);
    const auto [p0, p1, wp0, wp1] = axis(plane, d);
    const double* g = grid.raw();
    const int64_t chw = static_cast<int64_t>(c) * h * w;
    double acc = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        const double* g0 = g + p0 * chw + static_cast<int64_t>(ch) * h * w;
        const double* g1 = g + p1 * chw + static_cast<int64_t>(ch) * h * w;
        const double s0 = wy0 * (wx0 * g0[y0 * w + x0] + wx1 * g0[y0 * w + x1]) +
                          wy1 * (wx0 * g0[y1 * w + x0] + wx1 * g0[y1 * w + x1]);
        const double s1 = wy0 * (wx0 * g1[y0 * w + x0] + wx1 * g1[y0 * w + x1]) +
                          wy1 * (wx0 * g1[y1 * w + x0] + wx1 * g1[y1 * w + x1]);
        acc += std::fabs(wp0 * s0 + wp1 * s1);
    }
    return acc / c;
}

}  // namespace

std::vector<double> frequency_weights(const Ray& ray, const std::vector<double>& z,
                                      const SceneFeatures& scene) {
    std::vector<double> weights(z.size(), 0.0);
    for (size_t i = 0; i < z.size(); ++i) {
        const Eigen::Vector3d x = ray.origin + z[i] * ray.dir;
        double acc = 0.0;
        int n_valid = 0;
        for (const ViewFeatures& vf : scene.per_view) {
            const FeatureVolume& vol = vf.freq;
            const CameraView& cam = scene.views[static_cast<size_t>(vol.ref_view)];
            const VolumeCoord vc = volume_coords(cam, vol.scale, vol.hypotheses, vol.grid.dim(2),
                                                 vol.grid.dim(3), x);
            if (!vc.valid) continue;
            acc += mean_abs_sample(vol.grid, vc.x, vc.y, vc.plane);
            ++n_valid;
        }
        if (n_valid > 0) weights[i] = acc / n_valid;
    }
    return weights;
}

std::vector<double> build_pdf(const std::vector<double>& weights, double eps_floor) {
    if (weights.size() < 2) throw ContractError("build_pdf requires >= 2 point weights");
    const size_t bins = weights.size() - 1;
    std::vector<double> pdf(bins);
    double total = 0.0;
    for (size_t k = 0; k < bins; ++k) {
        const double mid = 0.5 * (weights[k] + weights[k + 1]);
        pdf[k] = std::max(mid, 0.0) + eps_floor;
        total += pdf[k];
    }
    const double inv = 1.0 / total;
    for (double& v : pdf) v *= inv;
    return pdf;
}

std::vector<double> sample_fine(const std::vector<double>& pdf, const std::vector<double>& coarse_z,
                                int n_fine, Rng& rng) {
    if (pdf.size() + 1 != coarse_z.size()) {
        throw ContractError("sample_fine: pdf must have |coarse_z| - 1 bins");
    }
    std::vector<double> fine(static_cast<size_t>(n_fine));
    size_t bin = 0;
    double cdf_lo = 0.0;
    for (int j = 0; j < n_fine; ++j) {
        const double u = (j + rng.uniform()) / n_fine;  // stratified, increasing
        while (bin + 1 < pdf.size() && cdf_lo + pdf[bin] < u) {
            cdf_lo += pdf[bin];
            ++bin;
        }
        const double frac = std::min(1.0, std::max(0.0, (u - cdf_lo) / pdf[bin]));
        fine[static_cast<size_t>(j)] = coarse_z[bin] + frac * (coarse_z[bin + 1] - coarse_z[bin]);
    }
    return fine;
}

std::vector<double> merge_samples(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    size_t i = 0, j = 0;
    auto push = [&out](double v) {
        if (out.empty() || v - out.back() > 1e-12) out.push_back(v);
    };
    while (i < a.size() || j < b.size()) {
        if (j >= b.size() || (i < a.size() && a[i] <= b[j])) {
            push(a[i++]);
        } else {
            push(b[j++]);
        }
    }
    return out;
}

SampleSet sample_ray(const Ray& ray, const SceneFeatures& scene, const SamplerConfig& cfg,
                     SamplingStrategy strategy, uint64_t seed, uint64_t ray_id) {
    SampleSet s;
    Rng coarse_rng = Rng::stream(seed, {kStreamCoarse, ray_id});
    Rng fine_rng = Rng::stream(seed, {kStreamFine, ray_id});
    s.coarse_z = sample_coarse(ray, cfg.n_coarse, coarse_rng);
    if (strategy == SamplingStrategy::kFss) {
        const std::vector<double> w = frequency_weights(ray, s.coarse_z, scene);
        s.pdf = build_pdf(w, cfg.eps_floor_value());
        s.fine_z = sample_fine(s.pdf, s.coarse_z, cfg.n_fine, fine_rng);
    } else {
        s.pdf.assign(static_cast<size_t>(cfg.n_coarse - 1), 1.0 / (cfg.n_coarse - 1));
        s.fine_z.resize(static_cast<size_t>(cfg.n_fine));
        const double width = (ray.far - ray.near) / std::max(1, cfg.n_fine);
        for (int j = 0; j < cfg.n_fine; ++j) {
            s.fine_z[static_cast<size_t>(j)] = ray.near + (j + fine_rng.uniform()) * width;
        }
    }
    s.merged_z = merge_samples(s.coarse_z, s.fine_z);
    return s;
}

}  // namespace wavenerf
