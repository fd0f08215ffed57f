#pragma once

#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/mvs.hpp"
#include "wavenerf/rng.hpp"

namespace wavenerf {

struct SampleSet {
    std::vector<double> coarse_z;  // N_c sorted depths along the ray
    std::vector<double> pdf;       // over the N_c - 1 coarse bins
    std::vector<double> fine_z;    // N_f sorted
    std::vector<double> merged_z;  // sorted union
};

// Stratified: one uniform draw per equal-width bin of [near, far].
std::vector<double> sample_coarse(const Ray& ray, int n_coarse, Rng& rng);

// Mean absolute frequency-volume response per coarse point: each point is
// projected into every source view's P_w, trilinearly interpolated and
// reduced by mean |.| over channels, then averaged over the valid views.
// Points invalid in every view get weight 0. Reads volume values only.
std::vector<double> frequency_weights(const Ray& ray, const std::vector<double>& z,
                                      const SceneFeatures& scene);

// Bin mass = max(midpoint of adjacent point weights, 0) + eps_floor,
// normalized; eps_floor guarantees a valid pdf for any weights.
std::vector<double> build_pdf(const std::vector<double>& weights, double eps_floor);

// Inverse-CDF transform of n_fine stratified draws, piecewise linear
// within bins; output is sorted.
std::vector<double> sample_fine(const std::vector<double>& pdf, const std::vector<double>& coarse_z,
                                int n_fine, Rng& rng);

// Sorted union; values closer than 1e-12 collapse.
std::vector<double> merge_samples(const std::vector<double>& a, const std::vector<double>& b);

enum class SamplingStrategy { kUniform, kFss };

// Full per-ray pipeline. RNG streams derive from (seed, pixel identity), so
// batches of rays sample deterministically in parallel.
SampleSet sample_ray(const Ray& ray, const SceneFeatures& scene, const SamplerConfig& cfg,
                     SamplingStrategy strategy, uint64_t seed, uint64_t ray_id);

}  // namespace wavenerf
