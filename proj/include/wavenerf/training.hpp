#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/pipeline.hpp"
#include "wavenerf/tensor.hpp"

namespace wavenerf {

// ---- losses -----------------------------------------------------------------

// Mean over rays of the squared color error ||c_hat - c_gt||^2.
Tensor loss_color(const Tensor& c_pred, const Tensor& c_gt);

// Same form over frequency-coefficient vectors.
Tensor loss_freq_base(const Tensor& f_pred, const Tensor& f_gt);

// Weighted frequency loss: per-ray squared color error scaled by the
// nonnegative per-ray weight (mean |f_gt|), averaged over rays.
Tensor loss_wfl(const Tensor& c_pred, const Tensor& c_gt, const Tensor& weights);

struct DepthLoss {
    Tensor value;
    bool mask_empty = false;
};

// Mean absolute depth error over rays with mask != 0; a fully masked batch
// yields zero with mask_empty set.
DepthLoss loss_depth(const Tensor& d_pred, const std::vector<double>& d_gt,
                     const std::vector<uint8_t>& mask);

struct LossReport {
    double l_c = 0.0, l_fb = 0.0, l_fw = 0.0, l_d = 0.0, total = 0.0;
    bool depth_mask_empty = false;
    Tensor total_tensor;  // graph root for backward
};

inline constexpr double kWeightFreqBase = 0.1;
inline constexpr double kWeightWfl = 0.5;
inline constexpr double kWeightDepth = 0.1;

LossReport total_loss(const Tensor& l_c, const Tensor& l_fb, const Tensor& l_fw,
                      const DepthLoss& l_d);

// Ground-truth frequency coefficients: the compounded high-frequency map of
// the image, bilinearly upsampled to full resolution -> [6C, H, W].
Tensor freq_target(const Tensor& image);

// ---- synthetic scenes ---------------------------------------------------------

struct SceneObject {
    bool is_box = false;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double radius = 0.5;                 // sphere
    Eigen::Vector3d half_extent = Eigen::Vector3d::Zero();  // box
    Eigen::Vector3d base_color = Eigen::Vector3d::Ones();
    Eigen::Vector3d tex_u = Eigen::Vector3d::UnitX();
    Eigen::Vector3d tex_v = Eigen::Vector3d::UnitY();
    double tex_freq = 6.0;
    double tex_phase = 0.0;
};

// Emission-only analytic scene with exact per-ray color and depth, plus a
// deterministic camera rig of V sources, train targets and held-out views.
struct SyntheticScene {
    SceneSpec spec;
    std::vector<SceneObject> objects;
    Eigen::Vector3d background = Eigen::Vector3d(0.04, 0.05, 0.07);
    std::vector<CameraView> sources;
    std::vector<CameraView> train_targets;
    std::vector<CameraView> heldout;

    // Oracle: first-hit color and ray depth; misses return the background
    // with depth == ray.far (sentinel).
    void trace(const Ray& ray, Eigen::Vector3d& color, double& depth) const;
    Eigen::Vector3d albedo(const SceneObject& obj, const Eigen::Vector3d& p) const;
};

SyntheticScene generate_scene(const SceneSpec& spec, uint64_t seed);

// ---- training loop ------------------------------------------------------------

struct TrainResult {
    std::string checkpoint_path;
    std::string log_path;
    int steps = 0;
    double final_total = 0.0;
    LossReport last;
};

// Adam over deterministic ray batches; appends one CSV row per step with
// header step,L_c,L_fb,L_fw,L_D,total,psnr_train. Throws Error after
// writing a diagnostic checkpoint if the loss diverges.
TrainResult train(const SyntheticScene& scene, Pipeline& pipeline, const std::string& out_dir);

// Renders a full view in ray chunks without recording the graph and
// returns [3,H,W] values (also depth and sum-alpha when requested).
Tensor render_view(Pipeline& pipeline, const SceneFeatures& features, const CameraView& target,
                   uint64_t seed, Tensor* depth_out = nullptr, Tensor* freq_norm_out = nullptr);

}  // namespace wavenerf
