#pragma once

#include <memory>
#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/mvs.hpp"
#include "wavenerf/optim.hpp"
#include "wavenerf/sampler.hpp"

namespace wavenerf {

struct AbaParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct AeMlpParams {
    Tensor enc0_w, enc0_b;  // 1x3, stride 1
    Tensor enc1_w, enc1_b;  // 1x3, stride 2
    Tensor enc2_w, enc2_b;  // 1x3, stride 2
    Tensor dec1_w, dec1_b;  // 1x4 transposed, stride 2
    Tensor fuse1_w, fuse1_b;
    Tensor dec0_w, dec0_b;
    Tensor fuse0_w, fuse0_b;
    Tensor head_w, head_b;  // 1x1 to a single density channel
};

struct RendererParams {
    Tensor sp_view_w, sp_view_b, sp_glob_w, sp_glob_b;
    Tensor fr_view_w, fr_view_b, fr_glob_w, fr_glob_b;
    AbaParams aba_spatial, aba_freq;
    AeMlpParams ae;
    Tensor ws_w1, ws_b1, ws_w2, ws_b2;  // spatial+freq tokens -> color view weights
    Tensor ww_w1, ww_b1, ww_w2, ww_b2;  // freq tokens -> frequency view weights
    Tensor lt_w1, lt_b1, lt_w2, lt_b2;  // color modulation from predicted coefficients

    static RendererParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
};

// Fixed per-batch geometry: sample points, their projections into each
// source view and the constant per-view samples c_{n,v} / f_{n,v}.
struct TokenGeometry {
    int p = 0, v = 0;
    std::vector<double> points;      // P x 3 world positions
    std::vector<uint8_t> valid;      // P x V frustum validity
    std::vector<uint8_t> any_valid;  // P
    std::vector<double> uv_full;     // P x V x 2
    std::vector<double> dir_enc;     // P x V x E
    // Per level 0..2 spatial plus frequency: P x V fractional plane index.
    std::array<std::vector<double>, 4> plane;
    Tensor color_samples;  // [P,V,3] constant
    Tensor freq_samples;   // [P,V,F] constant
};

TokenGeometry build_token_geometry(const std::vector<Eigen::Vector3d>& points,
                                   const std::vector<Eigen::Vector3d>& ray_dirs,
                                   const SceneFeatures& scene, const ModelConfig& cfg);

enum class TokenDomain { kSpatial, kFrequency };

// Fused gather + linear embedding for one domain: output [P, V+1, tw] with
// the view-independent token in slot 0. Invalid (point, view) features are
// zero before embedding.
Tensor embed_tokens(const SceneFeatures& scene, const std::shared_ptr<TokenGeometry>& geo,
                    TokenDomain domain, const RendererParams& params, const ModelConfig& cfg);

// One multi-head self-attention layer over the view axis plus a
// feed-forward layer, both residual. Keys and values are the view tokens
// (masked by validity); queries include the global token, so with V == 1
// the attention weight is identically 1 and the output does not depend on
// the query/key projections.
Tensor aggregate(const Tensor& tokens, const std::vector<uint8_t>& view_valid,
                 const AbaParams& params, const ModelConfig& cfg);

// Convex combination of per-view samples under the given view weights:
// weights [P,V] (rows summing to <= 1), samples [P,V,C] -> [P,C].
Tensor predict_freq(const Tensor& view_weights, const Tensor& samples);

// Weighted color modulated by the predicted coefficients: the base convex
// combination is scaled by (LT(f_hat) + 1) and clamped below at zero.
Tensor predict_color(const Tensor& view_weights, const Tensor& color_samples, const Tensor& f_hat,
                     const RendererParams& params);

// Auto-encoder-style 1-D convolutional stack along the ray axis producing
// nonnegative densities; invalid samples are forced to zero.
Tensor density(const Tensor& refined_global, int rays, int samples_per_ray,
               const std::vector<uint8_t>& point_valid, const AeMlpParams& params);

struct CompositeResult {
    Tensor color;      // [R,3]
    Tensor freq;       // [R,F]
    Tensor depth;      // [R,1]
    Tensor sum_alpha;  // [R,1]
};

// Transmittance compositing over per-ray segments with interval-scaled
// densities: sigma_tilde_n = sigma_n * (z_{n+1} - z_n), last interval
// closing at the ray's far bound.
CompositeResult composite_rays(const Tensor& sigma, const Tensor& color, const Tensor& freq,
                               const std::vector<double>& z, int rays, int samples_per_ray,
                               const std::vector<double>& far);

// Value-level compositing weights for analysis and tests.
std::vector<double> compositing_weights(const std::vector<double>& sigma,
                                        const std::vector<double>& z, double far);

struct RenderBatch {
    Tensor color, freq, depth, sum_alpha;  // per ray
    Tensor sigma;                          // [R * N]
    std::vector<double> z;                 // flattened sample depths
    std::vector<uint8_t> point_valid;
    std::vector<SampleSet> samples;
    int samples_per_ray = 0;
};

// Full path: sample -> tokens -> aggregate -> density + heads -> composite.
// Frozen sample sets (when provided) bypass the sampler so that finite
// difference checks see a fixed integration grid.
RenderBatch render_rays(const std::vector<Ray>& rays, const SceneFeatures& scene,
                        const RendererParams& params, const ModelConfig& mcfg,
                        const SamplerConfig& scfg, SamplingStrategy strategy, uint64_t seed,
                        const std::vector<SampleSet>* frozen = nullptr);

}  // namespace wavenerf
