#include "wavenerf/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "wavenerf/errors.hpp"
#include "wavenerf/io.hpp"
#include "wavenerf/ops.hpp"
#include "wavenerf/parallel.hpp"
#include "wavenerf/wavelet.hpp"

namespace wavenerf {

namespace fs = std::filesystem;

namespace {

void check_batch_pair(const Tensor& pred, const Tensor& gt, const char* op) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError(std::string(op) + ": prediction " + shape_str(pred.shape()) +
                             " vs target " + shape_str(gt.shape()));
    }
}

}  // namespace

Tensor loss_color(const Tensor& c_pred, const Tensor& c_gt) {
    check_batch_pair(c_pred, c_gt, "loss_color");
    const Tensor d = sub(c_pred, c_gt);
    return scale(sum(mul(d, d)), 1.0 / c_pred.dim(0));
}

Tensor loss_freq_base(const Tensor& f_pred, const Tensor& f_gt) {
    check_batch_pair(f_pred, f_gt, "loss_freq_base");
    const Tensor d = sub(f_pred, f_gt);
    return scale(sum(mul(d, d)), 1.0 / f_pred.dim(0));
}

Tensor loss_wfl(const Tensor& c_pred, const Tensor& c_gt, const Tensor& weights) {
    check_batch_pair(c_pred, c_gt, "loss_wfl");
    if (weights.ndim() != 2 || weights.dim(0) != c_pred.dim(0) || weights.dim(1) != 1) {
        throw DimensionError("loss_wfl: weights must be [R,1]");
    }
    const Tensor d = sub(c_pred, c_gt);
    return scale(sum(scale_rows(mul(d, d), weights)), 1.0 / c_pred.dim(0));
}

DepthLoss loss_depth(const Tensor& d_pred, const std::vector<double>& d_gt,
                     const std::vector<uint8_t>& mask) {
    const int r = d_pred.dim(0);
    if (static_cast<int>(d_gt.size()) != r || static_cast<int>(mask.size()) != r) {
        throw DimensionError("loss_depth: batch extents disagree");
    }
    int n = 0;
    std::vector<double> gt(d_gt.begin(), d_gt.end());
    std::vector<double> m(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        m[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)] ? 1.0 : 0.0;
        n += mask[static_cast<size_t>(i)] ? 1 : 0;
    }
    DepthLoss out;
    out.mask_empty = n == 0;
    if (n == 0) {
        out.value = Tensor::scalar(0.0);
        return out;
    }
    const Tensor diff = sub(d_pred, Tensor::from_data({r, 1}, std::move(gt)));
    const Tensor masked = mul(abs(diff), Tensor::from_data({r, 1}, std::move(m)));
    out.value = scale(sum(masked), 1.0 / n);
    return out;
}

LossReport total_loss(const Tensor& l_c, const Tensor& l_fb, const Tensor& l_fw,
                      const DepthLoss& l_d) {
    LossReport rep;
    rep.l_c = l_c.value();
    rep.l_fb = l_fb.value();
    rep.l_fw = l_fw.value();
    rep.l_d = l_d.value.value();
    rep.depth_mask_empty = l_d.mask_empty;
    rep.total_tensor = add(add(l_c, scale(l_fb, kWeightFreqBase)),
                           add(scale(l_fw, kWeightWfl), scale(l_d.value, kWeightDepth)));
    rep.total = rep.total_tensor.value();
    return rep;
}

Tensor freq_target(const Tensor& image) {
    return upsample2x_bilinear(compound_hf(decompose(image)));
}

// ---- synthetic scenes ---------------------------------------------------------

Eigen::Vector3d SyntheticScene::albedo(const SceneObject& obj, const Eigen::Vector3d& p) const {
    const Eigen::Vector3d local = p - obj.center;
    const double a = std::sin(obj.tex_freq * local.dot(obj.tex_u) + obj.tex_phase);
    const double b = std::sin(obj.tex_freq * 1.7 * local.dot(obj.tex_v) + 2.0 * obj.tex_phase);
    const double tex = 0.55 + 0.25 * a + 0.2 * b;
    Eigen::Vector3d c = obj.base_color * tex;
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

namespace {

bool intersect_sphere(const Ray& ray, const SceneObject& obj, double& t_hit) {
    const Eigen::Vector3d oc = ray.origin - obj.center;
    const double b = oc.dot(ray.dir);
    const double c = oc.squaredNorm() - obj.radius * obj.radius;
    const double disc = b * b - c;
    if (disc < 0.0) return false;
    const double rt = std::sqrt(disc);
    double t = -b - rt;
    if (t < 1e-9) t = -b + rt;
    if (t < 1e-9) return false;
    t_hit = t;
    return true;
}

bool intersect_box(const Ray& ray, const SceneObject& obj, double& t_hit) {
    double t0 = 0.0, t1 = 1e300;
    for (int a = 0; a < 3; ++a) {
        const double inv = 1.0 / ray.dir(a);
        double ta = (obj.center(a) - obj.half_extent(a) - ray.origin(a)) * inv;
        double tb = (obj.center(a) + obj.half_extent(a) - ray.origin(a)) * inv;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    const double t = t0 > 1e-9 ? t0 : t1;
    if (t < 1e-9) return false;
    t_hit = t;
    return true;
}

CameraView make_camera(const Eigen::Vector3d& center, double fov_deg, int size, double near,
                       double far) {
    CameraView cam;
    const Eigen::Vector3d forward = (-center).normalized();  // look at the origin
    const Eigen::Vector3d world_up(0.0, 0.0, 1.0);
    Eigen::Vector3d right = forward.cross(world_up);
    if (right.norm() < 1e-9) right = Eigen::Vector3d(1.0, 0.0, 0.0);
    right.normalize();
    const Eigen::Vector3d down = forward.cross(right).normalized();
    cam.R.row(0) = right.transpose();
    cam.R.row(1) = down.transpose();
    cam.R.row(2) = forward.transpose();
    cam.t = -cam.R * center;
    const double f = 0.5 * size / std::tan(0.5 * fov_deg * M_PI / 180.0);
    cam.K << f, 0.0, (size - 1) * 0.5, 0.0, f, (size - 1) * 0.5, 0.0, 0.0, 1.0;
    cam.width = size;
    cam.height = size;
    cam.near = near;
    cam.far = far;
    return cam;
}

Eigen::Vector3d rig_position(double radius, double azimuth_deg, double elevation_deg) {
    const double az = azimuth_deg * M_PI / 180.0;
    const double el = elevation_deg * M_PI / 180.0;
    return {radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
            radius * std::sin(el)};
}

Tensor render_oracle_image(const SyntheticScene& scene, const CameraView& cam) {
    const int h = cam.height, w = cam.width;
    std::vector<double> img(static_cast<size_t>(3) * h * w);
    parallel_for(static_cast<int64_t>(h) * w, [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            const int row = static_cast<int>(p / w);
            const int col = static_cast<int>(p % w);
            Eigen::Vector3d color;
            double depth;
            scene.trace(camera_ray(cam, row, col), color, depth);
            for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(c) * h + row) * w + col] = color(c);
        }
    }, 256);
    return Tensor::from_data({3, h, w}, std::move(img));
}

}  // namespace

void SyntheticScene::trace(const Ray& ray, Eigen::Vector3d& color, double& depth) const {
    double best = 1e300;
    const SceneObject* hit = nullptr;
    for (const SceneObject& obj : objects) {
        double t;
        const bool ok = obj.is_box ? intersect_box(ray, obj, t) : intersect_sphere(ray, obj, t);
        if (ok && t < best) {
            best = t;
            hit = &obj;
        }
    }
    if (hit == nullptr) {
        color = background;
        depth = ray.far;  // miss sentinel
        return;
    }
    color = albedo(*hit, ray.origin + best * ray.dir);
    depth = best;
}

SyntheticScene generate_scene(const SceneSpec& spec, uint64_t seed) {
    if (spec.n_spheres + spec.n_boxes < 1) throw ConfigError("scene spec has no objects");
    SyntheticScene scene;
    scene.spec = spec;
    Rng rng = Rng::stream(seed, {kStreamSceneGen});

    const double r_dom = spec.domain_radius;
    for (int i = 0; i < spec.n_spheres + spec.n_boxes; ++i) {
        SceneObject obj;
        obj.is_box = i >= spec.n_spheres;
        obj.center = Eigen::Vector3d(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                     rng.uniform(-0.35, 0.35)) *
                     r_dom;
        obj.radius = rng.uniform(0.3, 0.55) * r_dom;
        obj.half_extent = Eigen::Vector3d(rng.uniform(0.2, 0.4), rng.uniform(0.2, 0.4),
                                          rng.uniform(0.2, 0.4)) *
                          r_dom;
        obj.base_color = Eigen::Vector3d(rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0),
                                         rng.uniform(0.4, 1.0));
        obj.tex_u = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
        obj.tex_v = obj.tex_u.cross(Eigen::Vector3d(0.0, 0.0, 1.0)).normalized();
        if (!obj.tex_v.allFinite() || obj.tex_v.norm() < 0.5) obj.tex_v = Eigen::Vector3d::UnitY();
        obj.tex_freq = spec.texture_freq * rng.uniform(0.8, 1.25) / r_dom;
        obj.tex_phase = rng.uniform(0.0, 6.28);
        scene.objects.push_back(obj);
    }

    const double near = spec.rig_radius - 1.8 * r_dom;
    const double far = spec.rig_radius + 1.8 * r_dom;
    if (near <= 0.0) throw ConfigError("scene rig_radius too small for the domain radius");

    auto add_view = [&](std::vector<CameraView>& dst, double az, double el) {
        dst.push_back(make_camera(rig_position(spec.rig_radius, az, el), spec.fov_deg,
                                  spec.image_size, near, far));
    };
    const double spread = 12.0;
    for (int i = 0; i < spec.n_sources; ++i) {
        const double az = spread * (i - 0.5 * (spec.n_sources - 1));
        add_view(scene.sources, az, 18.0);
    }
    for (int i = 0; i < spec.n_train_targets; ++i) {
        const double az = -16.0 + 32.0 * (i + 0.5) / spec.n_train_targets;
        const double el = 13.0 + 9.0 * ((i % 3) / 2.0);
        add_view(scene.train_targets, az, el);
    }
    for (int i = 0; i < spec.n_heldout; ++i) {
        const double az = i % 2 == 0 ? 5.0 : -5.0;
        const double el = 16.0 + 3.0 * (i / 2);
        add_view(scene.heldout, az, el);
    }

    for (auto* group : {&scene.sources, &scene.train_targets, &scene.heldout}) {
        for (CameraView& cam : *group) {
            cam.image = render_oracle_image(scene, cam);
            cam.validate();
        }
    }
    return scene;
}

// ---- training loop ------------------------------------------------------------

namespace {

struct TargetData {
    const CameraView* cam;
    Tensor f_gt;                    // [F,H,W]
    std::vector<double> wfl;        // per pixel mean |f_gt|
    std::vector<double> depth;      // oracle ray depth per pixel
    std::vector<uint8_t> depth_ok;  // oracle hit (miss rays carry the far sentinel)
};

TargetData build_target(const SyntheticScene& scene, const CameraView& cam) {
    TargetData t;
    t.cam = &cam;
    t.f_gt = freq_target(cam.image);
    const int h = cam.height, w = cam.width;
    const int fc = t.f_gt.dim(0);
    t.wfl.resize(static_cast<size_t>(h) * w);
    const double* f = t.f_gt.raw();
    for (int64_t p = 0; p < static_cast<int64_t>(h) * w; ++p) {
        double acc = 0.0;
        for (int c = 0; c < fc; ++c) acc += std::fabs(f[static_cast<int64_t>(c) * h * w + p]);
        t.wfl[static_cast<size_t>(p)] = acc / fc;
    }
    t.depth.resize(static_cast<size_t>(h) * w);
    t.depth_ok.resize(static_cast<size_t>(h) * w);
    for (int row = 0; row < h; ++row) {
        for (int col = 0; col < w; ++col) {
            Eigen::Vector3d color;
            double depth;
            const Ray ray = camera_ray(cam, row, col);
            scene.trace(ray, color, depth);
            t.depth[static_cast<size_t>(row) * w + col] = depth;
            t.depth_ok[static_cast<size_t>(row) * w + col] = depth < ray.far ? 1 : 0;
        }
    }
    return t;
}

}  // namespace

TrainResult train(const SyntheticScene& scene, Pipeline& pipeline, const std::string& out_dir) {
    const Config& cfg = pipeline.cfg;
    fs::create_directories(out_dir);
    const std::string log_path = (fs::path(out_dir) / "log.csv").string();
    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();

    std::vector<TargetData> targets;
    for (const CameraView& cam : scene.train_targets) targets.push_back(build_target(scene, cam));
    if (targets.empty()) throw ConfigError("scene has no training targets");

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open training log: " + log_path);
    log << "step,L_c,L_fb,L_fw,L_D,total,psnr_train\n";

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.train.lr;
    adam_cfg.beta1 = cfg.train.beta1;
    adam_cfg.beta2 = cfg.train.beta2;
    adam_cfg.eps = cfg.train.adam_eps;
    AdamState adam(pipeline.params);

    TrainResult result;
    result.log_path = log_path;
    result.checkpoint_path = ckpt_path;
    pipeline.save(ckpt_path);  // step-0 state

    const int fc = cfg.model.freq_coeff_width();
    const int batch = cfg.train.batch;
    for (int step = 0; step < cfg.train.steps; ++step) {
        Rng batch_rng = Rng::stream(cfg.seed, {kStreamRayBatch, static_cast<uint64_t>(step)});
        std::vector<Ray> rays(static_cast<size_t>(batch));
        std::vector<double> c_gt(static_cast<size_t>(batch) * 3);
        std::vector<double> f_gt(static_cast<size_t>(batch) * fc);
        std::vector<double> w_gt(static_cast<size_t>(batch));
        std::vector<double> d_gt(static_cast<size_t>(batch));
        std::vector<uint8_t> d_ok(static_cast<size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            const TargetData& t = targets[static_cast<size_t>(batch_rng.uniform_int(
                static_cast<int>(targets.size())))];
            const int h = t.cam->height, w = t.cam->width;
            const int row = batch_rng.uniform_int(h);
            const int col = batch_rng.uniform_int(w);
            rays[static_cast<size_t>(i)] = camera_ray(*t.cam, row, col);
            const int64_t px = static_cast<int64_t>(row) * w + col;
            const double* img = t.cam->image.raw();
            for (int c = 0; c < 3; ++c) c_gt[static_cast<size_t>(i) * 3 + c] = img[c * h * w + px];
            const double* f = t.f_gt.raw();
            for (int c = 0; c < fc; ++c) f_gt[static_cast<size_t>(i) * fc + c] = f[static_cast<int64_t>(c) * h * w + px];
            w_gt[static_cast<size_t>(i)] = t.wfl[static_cast<size_t>(px)];
            d_gt[static_cast<size_t>(i)] = t.depth[static_cast<size_t>(px)];
            d_ok[static_cast<size_t>(i)] = t.depth_ok[static_cast<size_t>(px)];
        }

        SceneFeatures features = pipeline.build_features(scene.sources);
        RenderBatch rb = pipeline.render(rays, features, SamplingStrategy::kFss,
                                         cfg.seed + static_cast<uint64_t>(step) * 0x9e37ULL);

        const Tensor c_target = Tensor::from_data({batch, 3}, std::move(c_gt));
        const Tensor f_target = Tensor::from_data({batch, fc}, std::move(f_gt));
        const Tensor wfl_w = Tensor::from_data({batch, 1}, std::move(w_gt));
        std::vector<uint8_t> depth_mask(static_cast<size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            depth_mask[static_cast<size_t>(i)] =
                d_ok[static_cast<size_t>(i)] && rb.sum_alpha[i] > 0.5 ? 1 : 0;
        }

        const Tensor l_c = loss_color(rb.color, c_target);
        const Tensor l_fb = loss_freq_base(rb.freq, f_target);
        const Tensor l_fw = loss_wfl(rb.color, c_target, wfl_w);
        const DepthLoss l_d = loss_depth(rb.depth, d_gt, depth_mask);
        LossReport rep = total_loss(l_c, l_fb, l_fw, l_d);

        if (!std::isfinite(rep.total)) {
            pipeline.save((fs::path(out_dir) / "checkpoint_diverged.bin").string());
            log.flush();
            throw Error("training diverged at step " + std::to_string(step) +
                        " (total loss not finite); diagnostic checkpoint written");
        }

        pipeline.params.zero_grad();
        backward(rep.total_tensor);
        double lr = adam_cfg.lr;
        if (cfg.train.cosine_decay && cfg.train.steps > 1) {
            lr = adam_cfg.lr * 0.5 * (1.0 + std::cos(M_PI * step / (cfg.train.steps - 1)));
        }
        adam.step(pipeline.params, adam_cfg, lr);

        if (cfg.train.log_every > 0 && step % cfg.train.log_every == 0) {
            const double mse = rep.l_c / 3.0;
            const double psnr = mse <= 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
            log << step << ',' << format_double(rep.l_c) << ',' << format_double(rep.l_fb) << ','
                << format_double(rep.l_fw) << ',' << format_double(rep.l_d) << ','
                << format_double(rep.total) << ',' << format_double(psnr) << '\n';
        }
        if (cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0) {
            pipeline.save((fs::path(out_dir) / ("checkpoint_" + std::to_string(step + 1) + ".bin"))
                              .string());
        }
        result.steps = step + 1;
        result.final_total = rep.total;
        result.last = rep;
    }
    pipeline.save(ckpt_path);
    log.flush();
    return result;
}

Tensor render_view(Pipeline& pipeline, const SceneFeatures& features, const CameraView& target,
                   uint64_t seed, Tensor* depth_out, Tensor* freq_norm_out) {
    NoGradGuard no_grad;
    const int h = target.height, w = target.width;
    const int fc = pipeline.cfg.model.freq_coeff_width();
    std::vector<double> img(static_cast<size_t>(3) * h * w);
    std::vector<double> depth(static_cast<size_t>(h) * w);
    std::vector<double> fnorm(static_cast<size_t>(h) * w);
    const int chunk = 512;
    for (int start = 0; start < h * w; start += chunk) {
        const int count = std::min(chunk, h * w - start);
        std::vector<Ray> rays(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            rays[static_cast<size_t>(i)] = camera_ray(target, (start + i) / w, (start + i) % w);
        }
        RenderBatch rb = pipeline.render(rays, features, SamplingStrategy::kFss, seed);
        for (int i = 0; i < count; ++i) {
            const int64_t px = start + i;
            for (int c = 0; c < 3; ++c) {
                img[static_cast<size_t>(c) * h * w + px] = rb.color[i * 3 + c];
            }
            depth[static_cast<size_t>(px)] = rb.depth[i];
            double acc = 0.0;
            for (int c = 0; c < fc; ++c) acc += rb.freq[i * fc + c] * rb.freq[i * fc + c];
            fnorm[static_cast<size_t>(px)] = std::sqrt(acc);
        }
    }
    if (depth_out) *depth_out = Tensor::from_data({1, h, w}, std::move(depth));
    if (freq_norm_out) *freq_norm_out = Tensor::from_data({1, h, w}, std::move(fnorm));
    return Tensor::from_data({3, h, w}, std::move(img));
}

}  // namespace wavenerf
