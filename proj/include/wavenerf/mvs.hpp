#pragma once

#include <array>
#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/optim.hpp"
#include "wavenerf/tensor.hpp"
#include "wavenerf/wavelet.hpp"

namespace wavenerf {

// Per-view 2D features. Spatial maps f_s^(l) live at scales 1/4, 1/2, 1 of
// the input; f_w and the raw compounded high-frequency map at 1/2.
struct FeatureMaps {
    std::array<Tensor, 3> f_s;
    Tensor f_w;
    Tensor hf_map;  // compound_hf of the input image (not learned)
};

struct ConvLayer {
    Tensor w, b;
};

struct FeatureExtractorParams {
    std::array<std::vector<ConvLayer>, 3> cnn;  // per spatial level
    std::vector<ConvLayer> cnn_freq;
    Tensor iwb1_w, iwb1_b;
    Tensor iwb2_w, iwb2_b;

    static FeatureExtractorParams create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
};

FeatureMaps extract_features(const CameraView& view, const FeatureExtractorParams& params,
                             const ModelConfig& cfg);

inline constexpr int kFrequencyLevel = -1;

// Plane-sweep grid over depth hypotheses in one reference frustum. Grid
// features are the population variance across valid views concatenated
// with their mean: [D, 2C, h, w].
struct FeatureVolume {
    int level = 0;  // 0..2 spatial cascade, kFrequencyLevel for P_w
    std::vector<double> hypotheses;
    Tensor grid;
    int ref_view = 0;
    double scale = 1.0;  // map resolution relative to full
    std::vector<uint8_t> degenerate;  // planes where < 2 views are ever valid
};

struct WarpResult {
    Tensor map;                  // [C, h, w] in the reference grid
    std::vector<uint8_t> valid;  // per pixel
};

// Back-projects every reference pixel to fronto-parallel depth z, reprojects
// into view cam_v and samples its map bilinearly. `scale` is the map
// resolution relative to the full image.
WarpResult homography_warp(const Tensor& feat, const CameraView& cam_v, const CameraView& cam_ref,
                           double z, double scale);

// Variance + mean cost volume across views; maps[i] belongs to cams[i] and
// cams[ref] is the reference. Differentiable w.r.t. the maps.
FeatureVolume build_volume(const std::vector<Tensor>& maps, const std::vector<CameraView>& cams,
                           int ref, const std::vector<double>& hypotheses, double scale, int level);

// Per-pixel hypothesis depth minimizing the summed variance channels.
std::vector<double> variance_argmin_depth(const FeatureVolume& vol);

// Uniform ladder over [lo, hi] inclusive.
std::vector<double> uniform_hypotheses(double lo, double hi, int count);

struct ViewFeatures {
    FeatureMaps maps;
    std::array<FeatureVolume, 3> spatial;
    FeatureVolume freq;
};

struct SceneFeatures {
    std::vector<CameraView> views;  // the V source views
    std::vector<ViewFeatures> per_view;
};

// Full WMVS composition: features per view, then cascaded spatial volumes
// (level 0 spans [near, far]; each finer level halves the range around the
// median variance-argmin depth of the previous level, clamped to [near,
// far]) plus the uniformly sampled frequency volume, per reference view.
SceneFeatures wmvs(const std::vector<CameraView>& views, const FeatureExtractorParams& params,
                   const ModelConfig& mcfg, const VolumeConfig& vcfg);

// Shared frustum parameterization used by every volume consumer: world
// point -> (x, y, plane) sampling coordinates plus validity.
struct VolumeCoord {
    double x = 0.0, y = 0.0, plane = 0.0;
    double depth = 0.0;           // camera-frame z
    double u_full = 0.0, v_full = 0.0;  // full-resolution pixel coords
    bool valid = false;
};

VolumeCoord volume_coords(const CameraView& cam, double scale, const std::vector<double>& hyps,
                          int grid_h, int grid_w, const Eigen::Vector3d& x_world);

}  // namespace wavenerf
