#include "wavenerf/mvs.hpp"

#include <algorithm>
#include <cmath>

#include "wavenerf/errors.hpp"
#include "wavenerf/ops.hpp"
#include "wavenerf/parallel.hpp"

namespace wavenerf {

namespace {

ConvLayer make_conv(ParamStore& store, const std::string& name, int in_ch, int out_ch, int k,
                    Rng& rng) {
    const double init = std::sqrt(2.0 / (in_ch * k * k));
    ConvLayer layer;
    layer.w = store.make(name + ".w", {out_ch, in_ch, k, k}, init, rng);
    // Zero biases keep the response to a zero map exactly zero.
    layer.b = store.make_zeros(name + ".b", {out_ch});
    return layer;
}

std::vector<ConvLayer> make_cnn(ParamStore& store, const std::string& name, int in_ch, int hidden,
                                int out_ch, Rng& rng) {
    std::vector<ConvLayer> layers;
    layers.push_back(make_conv(store, name + ".0", in_ch, hidden, 3, rng));
    layers.push_back(make_conv(store, name + ".1", hidden, hidden, 3, rng));
    layers.push_back(make_conv(store, name + ".2", hidden, out_ch, 3, rng));
    return layers;
}

Tensor run_cnn(Tensor x, const std::vector<ConvLayer>& layers) {
    for (const ConvLayer& l : layers) {
        x = elu(add_channel_bias(conv2d(x, l.w, conv_opts(1, 1, 1)), l.b));
    }
    return x;
}

}  // namespace

FeatureExtractorParams FeatureExtractorParams::create(ParamStore& store, const ModelConfig& cfg,
                                                      Rng& rng) {
    FeatureExtractorParams p;
    const int c_img = cfg.image_channels;
    const int lat = cfg.latent_channels;
    p.cnn[0] = make_cnn(store, "fx.cnn0", c_img, cfg.cnn_hidden, cfg.spatial_channels[0], rng);
    p.cnn[1] = make_cnn(store, "fx.cnn1", cfg.spatial_channels[0] + lat, cfg.cnn_hidden,
                        cfg.spatial_channels[1], rng);
    p.cnn[2] = make_cnn(store, "fx.cnn2", cfg.spatial_channels[1] + lat, cfg.cnn_hidden,
                        cfg.spatial_channels[2], rng);
    p.cnn_freq = make_cnn(store, "fx.cnnw", 6 * c_img, cfg.cnn_hidden, cfg.freq_channels, rng);

    const int in1 = c_img + 3 * c_img;  // w_L plus three level-1 subbands
    const int in2 = lat + 3 * c_img;
    const double s1 = std::sqrt(2.0 / (in1 * 4));
    const double s2 = std::sqrt(2.0 / (in2 * 4));
    p.iwb1_w = store.make("fx.iwb1.w", {in1, lat, 2, 2}, s1, rng);
    p.iwb1_b = store.make_zeros("fx.iwb1.b", {lat});
    p.iwb2_w = store.make("fx.iwb2.w", {in2, lat, 2, 2}, s2, rng);
    p.iwb2_b = store.make_zeros("fx.iwb2.b", {lat});
    return p;
}

FeatureMaps extract_features(const CameraView& view, const FeatureExtractorParams& params,
                             const ModelConfig& cfg) {
    (void)cfg;
    if (!view.image.defined()) throw ContractError("extract_features: view has no image");
    if (view.image.dim(1) % 4 != 0 || view.image.dim(2) % 4 != 0) {
        throw DimensionError("extract_features: image extents must be divisible by 4, got " +
                             shape_str(view.image.shape()));
    }
    const WaveletPyramid pyr = decompose(view.image);

    FeatureMaps maps;
    maps.f_s[0] = run_cnn(pyr.low, params.cnn[0]);

    // f_L^(0) is the low band itself; each IWB doubles the extent.
    Tensor lat1 = iwb(pyr.low, pyr.high_l1, params.iwb1_w, params.iwb1_b);
    maps.f_s[1] = run_cnn(concat({upsample2x_bilinear(maps.f_s[0]), lat1}, 0), params.cnn[1]);

    Tensor lat2 = iwb(lat1, pyr.high_l2, params.iwb2_w, params.iwb2_b);
    maps.f_s[2] = run_cnn(concat({upsample2x_bilinear(maps.f_s[1]), lat2}, 0), params.cnn[2]);

    maps.hf_map = compound_hf(pyr);
    maps.f_w = run_cnn(maps.hf_map, params.cnn_freq);
    return maps;
}

namespace {

// Per-view projection constants: pix_v = (z * M * p + b) for a reference
// pixel ray p = (u_full, v_full, 1). Avoids per-cell matrix products.
struct WarpGeometry {
    Eigen::Matrix3d m;
    Eigen::Vector3d b;
};

WarpGeometry warp_geometry(const CameraView& src, const CameraView& ref) {
    if (std::abs(ref.K.determinant()) < 1e-12 || std::abs(src.K.determinant()) < 1e-12) {
        throw GeometryError("singular intrinsics matrix");
    }
    const Eigen::Matrix3d r_rel = src.R * ref.R.transpose();
    WarpGeometry g;
    g.m = src.K * r_rel * ref.K.inverse();
    g.b = src.K * (src.t - r_rel * ref.t);
    return g;
}

struct TapWeights {
    int x0, x1, y0, y1;
    double wx0, wx1, wy0, wy1;
};

inline TapWeights taps_for(double x, double y, int w, int h) {
    TapWeights t;
    const double cx = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    const double cy = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
    t.x0 = std::min(static_cast<int>(cx), w - 2);
    t.y0 = std::min(static_cast<int>(cy), h - 2);
    if (w == 1) t.x0 = 0;
    if (h == 1) t.y0 = 0;
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    const double fx = cx - t.x0;
    const double fy = cy - t.y0;
    t.wx0 = 1.0 - fx;
    t.wx1 = fx;
    t.wy0 = 1.0 - fy;
    t.wy1 = fy;
    return t;
}

inline bool inside_margin(double x, double y, int w, int h) {
    return x >= -kClampMargin && x <= (w - 1) + kClampMargin && y >= -kClampMargin &&
           y <= (h - 1) + kClampMargin;
}

}  // namespace

WarpResult homography_warp(const Tensor& feat, const CameraView& cam_v, const CameraView& cam_ref,
                           double z, double scale) {
    if (feat.ndim() != 3) throw DimensionError("homography_warp: features must be [C,h,w]");
    const int h = feat.dim(1), w = feat.dim(2);
    const WarpGeometry g = warp_geometry(cam_v, cam_ref);
    std::vector<double> uv(static_cast<size_t>(h) * w * 2);
    std::vector<uint8_t> front(static_cast<size_t>(h) * w, 1);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double u_full = (j + 0.5) / scale - 0.5;
            const double v_full = (i + 0.5) / scale - 0.5;
            const Eigen::Vector3d hvec = z * (g.m * Eigen::Vector3d(u_full, v_full, 1.0)) + g.b;
            const size_t idx = static_cast<size_t>(i) * w + j;
            if (hvec.z() <= 1e-12) {
                front[idx] = 0;
                uv[2 * idx] = -1e9;
                uv[2 * idx + 1] = -1e9;
            } else {
                uv[2 * idx] = scale_coord(hvec.x() / hvec.z(), scale);
                uv[2 * idx + 1] = scale_coord(hvec.y() / hvec.z(), scale);
            }
        }
    }
    SampleResult s = interpolate_bilinear(feat, uv);
    WarpResult out;
    out.valid.resize(front.size());
    for (size_t i = 0; i < front.size(); ++i) out.valid[i] = front[i] && s.valid[i];
    out.map = reshape(permute(s.values, {1, 0}), {feat.dim(0), h, w});
    return out;
}

FeatureVolume build_volume(const std::vector<Tensor>& maps, const std::vector<CameraView>& cams,
                           int ref, const std::vector<double>& hypotheses, double scale,
                           int level) {
    if (maps.size() != cams.size() || maps.size() < 2) {
        throw ContractError("build_volume requires >= 2 views with matching cameras");
    }
    for (size_t i = 1; i < hypotheses.size(); ++i) {
        if (!(hypotheses[i] > hypotheses[i - 1])) {
            throw ContractError("build_volume: depth hypotheses must be strictly increasing");
        }
    }
    const int v_count = static_cast<int>(maps.size());
    const int c = maps[0].dim(0), h = maps[0].dim(1), w = maps[0].dim(2);
    for (const Tensor& m : maps) {
        if (m.shape() != maps[0].shape()) {
            throw DimensionError("build_volume: feature map shapes differ: " +
                                 shape_str(m.shape()) + " vs " + shape_str(maps[0].shape()));
        }
    }
    const int d_count = static_cast<int>(hypotheses.size());
    const int64_t hw = static_cast<int64_t>(h) * w;

    // Reference-pixel rays in full resolution, shared across planes.
    std::vector<double> rays(static_cast<size_t>(hw) * 3);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const size_t idx = static_cast<size_t>(i) * w + j;
            rays[3 * idx] = (j + 0.5) / scale - 0.5;
            rays[3 * idx + 1] = (i + 0.5) / scale - 0.5;
            rays[3 * idx + 2] = 1.0;
        }
    }
    std::vector<WarpGeometry> geo;
    for (int v = 0; v < v_count; ++v) geo.push_back(warp_geometry(cams[static_cast<size_t>(v)], cams[static_cast<size_t>(ref)]));

    // src coordinates per (view, pixel): pix = (z * mray + b).
    std::vector<double> mray(static_cast<size_t>(v_count) * hw * 3);
    for (int v = 0; v < v_count; ++v) {
        for (int64_t p = 0; p < hw; ++p) {
            const Eigen::Vector3d r(rays[3 * p], rays[3 * p + 1], 1.0);
            const Eigen::Vector3d mp = geo[static_cast<size_t>(v)].m * r;
            double* out = &mray[(static_cast<size_t>(v) * hw + p) * 3];
            out[0] = mp.x();
            out[1] = mp.y();
            out[2] = mp.z();
        }
    }

    // Sample view v's map for plane z at reference pixel p; returns false if
    // the projection leaves the source frustum.
    auto sample_taps = [&](int v, int64_t p, double z, TapWeights& t) -> bool {
        if (v == ref) {
            t.x0 = t.x1 = static_cast<int>(p % w);
            t.y0 = t.y1 = static_cast<int>(p / w);
            t.wx0 = 1.0;
            t.wx1 = 0.0;
            t.wy0 = 1.0;
            t.wy1 = 0.0;
            return true;
        }
        const double* mp = &mray[(static_cast<size_t>(v) * hw + p) * 3];
        const double hz = z * mp[2] + geo[static_cast<size_t>(v)].b.z();
        if (hz <= 1e-12) return false;
        const double sx = scale_coord((z * mp[0] + geo[static_cast<size_t>(v)].b.x()) / hz, scale);
        const double sy = scale_coord((z * mp[1] + geo[static_cast<size_t>(v)].b.y()) / hz, scale);
        if (!inside_margin(sx, sy, w, h)) return false;
        t = taps_for(sx, sy, w, h);
        return true;
    };

    std::vector<const double*> map_ptr(static_cast<size_t>(v_count));
    for (int v = 0; v < v_count; ++v) map_ptr[static_cast<size_t>(v)] = maps[static_cast<size_t>(v)].raw();

    std::vector<uint8_t> degenerate(static_cast<size_t>(d_count), 0);
    std::vector<int> plane_max_valid(static_cast<size_t>(d_count), 0);

    Tensor grid = make_op(
        "mvs_volume", {d_count, 2 * c, h, w}, maps,
        [&](TensorImpl& out) {
            double* po = out.values.data();
            parallel_for(static_cast<int64_t>(d_count) * hw, [&](int64_t lo, int64_t hi) {
                std::vector<double> acc(static_cast<size_t>(c));
                std::vector<double> acc2(static_cast<size_t>(c));
                for (int64_t cell = lo; cell < hi; ++cell) {
                    const int d = static_cast<int>(cell / hw);
                    const int64_t p = cell % hw;
                    const double z = hypotheses[static_cast<size_t>(d)];
                    std::fill(acc.begin(), acc.end(), 0.0);
                    std::fill(acc2.begin(), acc2.end(), 0.0);
                    int n = 0;
                    for (int v = 0; v < v_count; ++v) {
                        TapWeights t;
                        if (!sample_taps(v, p, z, t)) continue;
                        ++n;
                        const double* m = map_ptr[static_cast<size_t>(v)];
                        for (int ch = 0; ch < c; ++ch) {
                            const double* mc = m + static_cast<int64_t>(ch) * hw;
                            const double s = t.wy0 * (t.wx0 * mc[t.y0 * w + t.x0] + t.wx1 * mc[t.y0 * w + t.x1]) +
                                             t.wy1 * (t.wx0 * mc[t.y1 * w + t.x0] + t.wx1 * mc[t.y1 * w + t.x1]);
                            acc[static_cast<size_t>(ch)] += s;
                            acc2[static_cast<size_t>(ch)] += s * s;
                        }
                    }
                    // n >= 1 always: the reference view samples itself.
                    const double inv = 1.0 / n;
                    double* cell_out = po + static_cast<int64_t>(d) * 2 * c * hw + p;
                    for (int ch = 0; ch < c; ++ch) {
                        const double mu = acc[static_cast<size_t>(ch)] * inv;
                        const double var = std::max(0.0, acc2[static_cast<size_t>(ch)] * inv - mu * mu);
                        cell_out[static_cast<int64_t>(ch) * hw] = var;
                        cell_out[static_cast<int64_t>(c + ch) * hw] = mu;
                    }
                }
            }, 256);
            // Per-plane view validity, early-out once two views agree.
            for (int d = 0; d < d_count; ++d) {
                int mx = 0;
                const double z = hypotheses[static_cast<size_t>(d)];
                for (int64_t p = 0; p < hw && mx < 2; ++p) {
                    int n = 0;
                    for (int v = 0; v < v_count; ++v) {
                        TapWeights t;
                        if (sample_taps(v, p, z, t)) ++n;
                    }
                    mx = std::max(mx, n);
                }
                plane_max_valid[static_cast<size_t>(d)] = mx;
            }
        },
        [maps, hypotheses, sample_taps, v_count, c, hw, w, d_count](TensorImpl* out) {
            const double* g = out->grad.data();
            std::vector<const double*> mp(static_cast<size_t>(v_count));
            std::vector<double*> gp(static_cast<size_t>(v_count));
            for (int v = 0; v < v_count; ++v) {
                mp[static_cast<size_t>(v)] = maps[static_cast<size_t>(v)].raw();
                gp[static_cast<size_t>(v)] = maps[static_cast<size_t>(v)].requires_grad()
                                                 ? maps[static_cast<size_t>(v)].impl_raw()->grad_data()
                                                 : nullptr;
            }
            // Channel-sliced scatter: each worker owns a disjoint channel
            // range across every view, so writes never collide.
            parallel_for(c, [&](int64_t clo, int64_t chi) {
                std::vector<TapWeights> taps(static_cast<size_t>(v_count));
                std::vector<uint8_t> ok(static_cast<size_t>(v_count));
                for (int64_t cell = 0; cell < static_cast<int64_t>(d_count) * hw; ++cell) {
                    const int d = static_cast<int>(cell / hw);
                    const int64_t p = cell % hw;
                    const double z = hypotheses[static_cast<size_t>(d)];
                    int n = 0;
                    for (int v = 0; v < v_count; ++v) {
                        ok[static_cast<size_t>(v)] = sample_taps(v, p, z, taps[static_cast<size_t>(v)]) ? 1 : 0;
                        n += ok[static_cast<size_t>(v)];
                    }
                    const double inv = 1.0 / n;
                    const double* cell_g = g + static_cast<int64_t>(d) * 2 * c * hw + p;
                    for (int64_t ch = clo; ch < chi; ++ch) {
                        const double gv = cell_g[ch * hw];
                        const double gm = cell_g[(c + ch) * hw];
                        if (gv == 0.0 && gm == 0.0) continue;
                        // Recompute the channel mean for the variance chain.
                        double mu = 0.0;
                        for (int v = 0; v < v_count; ++v) {
                            if (!ok[static_cast<size_t>(v)]) continue;
                            const TapWeights& t = taps[static_cast<size_t>(v)];
                            const double* mc = mp[static_cast<size_t>(v)] + ch * hw;
                            mu += t.wy0 * (t.wx0 * mc[t.y0 * w + t.x0] + t.wx1 * mc[t.y0 * w + t.x1]) +
                                  t.wy1 * (t.wx0 * mc[t.y1 * w + t.x0] + t.wx1 * mc[t.y1 * w + t.x1]);
                        }
                        mu *= inv;
                        for (int v = 0; v < v_count; ++v) {
                            if (!ok[static_cast<size_t>(v)] || gp[static_cast<size_t>(v)] == nullptr) continue;
                            const TapWeights& t = taps[static_cast<size_t>(v)];
                            const double* mc = mp[static_cast<size_t>(v)] + ch * hw;
                            const double s = t.wy0 * (t.wx0 * mc[t.y0 * w + t.x0] + t.wx1 * mc[t.y0 * w + t.x1]) +
                                             t.wy1 * (t.wx0 * mc[t.y1 * w + t.x0] + t.wx1 * mc[t.y1 * w + t.x1]);
                            const double ds = inv * (gm + 2.0 * (s - mu) * gv);
                            double* gc = gp[static_cast<size_t>(v)] + ch * hw;
                            gc[t.y0 * w + t.x0] += ds * t.wy0 * t.wx0;
                            gc[t.y0 * w + t.x1] += ds * t.wy0 * t.wx1;
                            gc[t.y1 * w + t.x0] += ds * t.wy1 * t.wx0;
                            gc[t.y1 * w + t.x1] += ds * t.wy1 * t.wx1;
                        }
                    }
                }
            }, 1);
        });

    for (int d = 0; d < d_count; ++d) degenerate[static_cast<size_t>(d)] = plane_max_valid[static_cast<size_t>(d)] < 2;

    FeatureVolume vol;
    vol.level = level;
    vol.hypotheses = hypotheses;
    vol.grid = grid;
    vol.ref_view = ref;
    vol.scale = scale;
    vol.degenerate = std::move(degenerate);
    return vol;
}

std::vector<double> variance_argmin_depth(const FeatureVolume& vol) {
    const int d = vol.grid.dim(0);
    const int c2 = vol.grid.dim(1);
    const int c = c2 / 2;
    const int64_t hw = static_cast<int64_t>(vol.grid.dim(2)) * vol.grid.dim(3);
    const double* g = vol.grid.raw();
    std::vector<double> depth(static_cast<size_t>(hw));
    parallel_for(hw, [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            int best = 0;
            double best_cost = 1e300;
            for (int di = 0; di < d; ++di) {
                double cost = 0.0;
                const double* cell = g + static_cast<int64_t>(di) * c2 * hw + p;
                for (int ch = 0; ch < c; ++ch) cost += cell[static_cast<int64_t>(ch) * hw];
                if (cost < best_cost) {
                    best_cost = cost;
                    best = di;
                }
            }
            depth[static_cast<size_t>(p)] = vol.hypotheses[static_cast<size_t>(best)];
        }
    }, 512);
    return depth;
}

std::vector<double> uniform_hypotheses(double lo, double hi, int count) {
    std::vector<double> z(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        z[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (count - 1);
    }
    return z;
}

namespace {

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// Window of `width` centered at c, shifted to stay inside [near, far].
std::pair<double, double> clamped_window(double center, double width, double near, double far) {
    double lo = std::max(near, center - width / 2.0);
    double hi = std::min(far, lo + width);
    lo = std::max(near, hi - width);
    return {lo, hi};
}

}  // namespace

SceneFeatures wmvs(const std::vector<CameraView>& views, const FeatureExtractorParams& params,
                   const ModelConfig& mcfg, const VolumeConfig& vcfg) {
    if (views.size() < 2) throw ContractError("wmvs requires at least two posed views");
    for (const CameraView& v : views) v.validate();

    SceneFeatures scene;
    scene.views = views;
    std::vector<FeatureMaps> maps;
    maps.reserve(views.size());
    for (const CameraView& v : views) maps.push_back(extract_features(v, params, mcfg));

    const int v_count = static_cast<int>(views.size());
    for (int ref = 0; ref < v_count; ++ref) {
        ViewFeatures vf;
        vf.maps = maps[static_cast<size_t>(ref)];
        const double near = views[static_cast<size_t>(ref)].near;
        const double far = views[static_cast<size_t>(ref)].far;
        const double full_range = far - near;

        const std::array<double, 3> scales = {0.25, 0.5, 1.0};
        double center = 0.5 * (near + far);
        for (int level = 0; level < 3; ++level) {
            std::vector<Tensor> level_maps;
            for (int v = 0; v < v_count; ++v) level_maps.push_back(maps[static_cast<size_t>(v)].f_s[static_cast<size_t>(level)]);
            std::vector<double> hyps;
            if (level == 0) {
                hyps = uniform_hypotheses(near, far, vcfg.d_spatial[0]);
            } else {
                const double width = full_range / std::pow(2.0, level);
                auto [lo, hi] = clamped_window(center, width, near, far);
                hyps = uniform_hypotheses(lo, hi, vcfg.d_spatial[static_cast<size_t>(level)]);
            }
            vf.spatial[static_cast<size_t>(level)] =
                build_volume(level_maps, views, ref, hyps, scales[static_cast<size_t>(level)], level);
            // Hypothesis placement for the next level is detached from the
            // graph: the argmin is piecewise constant in the features.
            center = median_of(variance_argmin_depth(vf.spatial[static_cast<size_t>(level)]));
        }

        std::vector<Tensor> freq_maps;
        for (int v = 0; v < v_count; ++v) freq_maps.push_back(maps[static_cast<size_t>(v)].f_w);
        vf.freq = build_volume(freq_maps, views, ref, uniform_hypotheses(near, far, vcfg.d_freq),
                               0.5, kFrequencyLevel);
        scene.per_view.push_back(std::move(vf));
    }
    return scene;
}

VolumeCoord volume_coords(const CameraView& cam, double scale, const std::vector<double>& hyps,
                          int grid_h, int grid_w, const Eigen::Vector3d& x_world) {
    VolumeCoord c;
    const Projection pr = project_point(cam, x_world);
    c.depth = pr.depth;
    if (!pr.in_front) return c;
    c.u_full = pr.u;
    c.v_full = pr.v;
    c.x = scale_coord(pr.u, scale);
    c.y = scale_coord(pr.v, scale);

    const int d = static_cast<int>(hyps.size());
    // Fractional plane index: linear in index space between hypotheses.
    double plane;
    if (pr.depth <= hyps[0]) {
        const double step = hyps[1] - hyps[0];
        plane = (pr.depth - hyps[0]) / step;
    } else if (pr.depth >= hyps[static_cast<size_t>(d - 1)]) {
        const double step = hyps[static_cast<size_t>(d - 1)] - hyps[static_cast<size_t>(d - 2)];
        plane = (d - 1) + (pr.depth - hyps[static_cast<size_t>(d - 1)]) / step;
    } else {
        const auto it = std::upper_bound(hyps.begin(), hyps.end(), pr.depth);
        const int k = static_cast<int>(it - hyps.begin()) - 1;
        plane = k + (pr.depth - hyps[static_cast<size_t>(k)]) /
                        (hyps[static_cast<size_t>(k + 1)] - hyps[static_cast<size_t>(k)]);
    }
    c.plane = plane;
    c.valid = inside_margin(c.x, c.y, grid_w, grid_h) && plane >= -kClampMargin &&
              plane <= (d - 1) + kClampMargin;
    return c;
}

}  // namespace wavenerf
