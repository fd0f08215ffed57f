#include "wavenerf/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "wavenerf/errors.hpp"
#include "wavenerf/ops.hpp"
#include "wavenerf/parallel.hpp"

namespace wavenerf {

namespace {

Tensor make_linear_w(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                     double gain = 1.0) {
    return store.make(name, {in, out}, gain * std::sqrt(1.0 / in), rng);
}

struct TapW {
    int x0, x1, y0, y1;
    double wx0, wx1, wy0, wy1;
};

inline TapW taps2d(double x, double y, int w, int h) {
    TapW t;
    const double cx = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    const double cy = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
    t.x0 = std::min(static_cast<int>(cx), std::max(0, w - 2));
    t.y0 = std::min(static_cast<int>(cy), std::max(0, h - 2));
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    const double fx = cx - t.x0, fy = cy - t.y0;
    t.wx0 = 1.0 - fx;
    t.wx1 = fx;
    t.wy0 = 1.0 - fy;
    t.wy1 = fy;
    return t;
}

struct TapAxis {
    int i0, i1;
    double w0, w1;
};

inline TapAxis tap_axis(double v, int n) {
    TapAxis a;
    const double c = std::min(std::max(v, 0.0), static_cast<double>(n - 1));
    a.i0 = std::min(static_cast<int>(c), std::max(0, n - 2));
    a.i1 = std::min(a.i0 + 1, n - 1);
    const double f = c - a.i0;
    a.w0 = 1.0 - f;
    a.w1 = f;
    return a;
}

inline double sample_map_value(const double* m, int /*h*/, int w, const TapW& t) {
    return t.wy0 * (t.wx0 * m[t.y0 * w + t.x0] + t.wx1 * m[t.y0 * w + t.x1]) +
           t.wy1 * (t.wx0 * m[t.y1 * w + t.x0] + t.wx1 * m[t.y1 * w + t.x1]);
}

}  // namespace

RendererParams RendererParams::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    RendererParams p;
    const int tw = cfg.token_width;
    const int e = 2 * cfg.dir_enc_freqs;
    const int c0 = cfg.spatial_channels[0], c1 = cfg.spatial_channels[1],
              c2 = cfg.spatial_channels[2];
    const int in_s = c2 + 2 * (c0 + c1 + c2) + e;
    const int in_f = cfg.freq_channels + 2 * cfg.freq_channels + e;
    const int f_width = cfg.freq_coeff_width();

    p.sp_view_w = make_linear_w(store, "rd.sp_view.w", in_s, tw, rng);
    p.sp_view_b = store.make_zeros("rd.sp_view.b", {tw});
    p.sp_glob_w = make_linear_w(store, "rd.sp_glob.w", 2 * in_s, tw, rng);
    p.sp_glob_b = store.make_zeros("rd.sp_glob.b", {tw});
    p.fr_view_w = make_linear_w(store, "rd.fr_view.w", in_f, tw, rng);
    p.fr_view_b = store.make_zeros("rd.fr_view.b", {tw});
    p.fr_glob_w = make_linear_w(store, "rd.fr_glob.w", 2 * in_f, tw, rng);
    p.fr_glob_b = store.make_zeros("rd.fr_glob.b", {tw});

    auto make_aba = [&](const std::string& prefix) {
        AbaParams a;
        a.wq = make_linear_w(store, prefix + ".wq", tw, tw, rng);
        a.bq = store.make_zeros(prefix + ".bq", {tw});
        a.wk = make_linear_w(store, prefix + ".wk", tw, tw, rng);
        a.bk = store.make_zeros(prefix + ".bk", {tw});
        a.wv = make_linear_w(store, prefix + ".wv", tw, tw, rng);
        a.bv = store.make_zeros(prefix + ".bv", {tw});
        a.wo = make_linear_w(store, prefix + ".wo", tw, tw, rng, 0.5);
        a.bo = store.make_zeros(prefix + ".bo", {tw});
        a.ff1_w = make_linear_w(store, prefix + ".ff1.w", tw, cfg.ff_hidden, rng);
        a.ff1_b = store.make_zeros(prefix + ".ff1.b", {cfg.ff_hidden});
        a.ff2_w = make_linear_w(store, prefix + ".ff2.w", cfg.ff_hidden, tw, rng, 0.5);
        a.ff2_b = store.make_zeros(prefix + ".ff2.b", {tw});
        return a;
    };
    p.aba_spatial = make_aba("rd.aba_s");
    p.aba_freq = make_aba("rd.aba_w");

    auto conv_pair = [&](const std::string& name, int o, int c, int k, bool transposed) {
        const double s = std::sqrt(2.0 / ((transposed ? o : c) * k));
        return std::pair<Tensor, Tensor>(store.make(name + ".w", {o, c, 1, k}, s, rng),
                                         store.make_zeros(name + ".b", {transposed ? c : o}));
    };
    std::tie(p.ae.enc0_w, p.ae.enc0_b) = conv_pair("rd.ae.enc0", tw, tw, 3, false);
    std::tie(p.ae.enc1_w, p.ae.enc1_b) = conv_pair("rd.ae.enc1", tw, tw, 3, false);
    std::tie(p.ae.enc2_w, p.ae.enc2_b) = conv_pair("rd.ae.enc2", tw, tw, 3, false);
    std::tie(p.ae.dec1_w, p.ae.dec1_b) = conv_pair("rd.ae.dec1", tw, tw, 4, true);
    std::tie(p.ae.fuse1_w, p.ae.fuse1_b) = conv_pair("rd.ae.fuse1", tw, 2 * tw, 1, false);
    std::tie(p.ae.dec0_w, p.ae.dec0_b) = conv_pair("rd.ae.dec0", tw, tw, 4, true);
    std::tie(p.ae.fuse0_w, p.ae.fuse0_b) = conv_pair("rd.ae.fuse0", tw, 2 * tw, 1, false);
    std::tie(p.ae.head_w, p.ae.head_b) = conv_pair("rd.ae.head", 1, tw, 1, false);

    p.ws_w1 = make_linear_w(store, "rd.ws.w1", 2 * tw, cfg.mlp_hidden, rng);
    p.ws_b1 = store.make_zeros("rd.ws.b1", {cfg.mlp_hidden});
    p.ws_w2 = make_linear_w(store, "rd.ws.w2", cfg.mlp_hidden, 1, rng);
    p.ws_b2 = store.make_zeros("rd.ws.b2", {1});
    p.ww_w1 = make_linear_w(store, "rd.ww.w1", tw, cfg.mlp_hidden, rng);
    p.ww_b1 = store.make_zeros("rd.ww.b1", {cfg.mlp_hidden});
    p.ww_w2 = make_linear_w(store, "rd.ww.w2", cfg.mlp_hidden, 1, rng);
    p.ww_b2 = store.make_zeros("rd.ww.b2", {1});
    p.lt_w1 = make_linear_w(store, "rd.lt.w1", f_width, cfg.mlp_hidden, rng);
    p.lt_b1 = store.make_zeros("rd.lt.b1", {cfg.mlp_hidden});
    // Modulation starts at exactly LT == 0, i.e. a factor of 1.
    p.lt_w2 = store.make_zeros("rd.lt.w2", {cfg.mlp_hidden, 1});
    p.lt_b2 = store.make_zeros("rd.lt.b2", {1});
    return p;
}

namespace {

void encode_direction(double angle, int freqs, double* out) {
    for (int k = 0; k < freqs; ++k) {
        const double a = angle * static_cast<double>(1 << k);
        out[2 * k] = std::sin(a);
        out[2 * k + 1] = std::cos(a);
    }
}

}  // namespace

TokenGeometry build_token_geometry(const std::vector<Eigen::Vector3d>& points,
                                   const std::vector<Eigen::Vector3d>& ray_dirs,
                                   const SceneFeatures& scene, const ModelConfig& cfg) {
    const int p_count = static_cast<int>(points.size());
    const int v_count = static_cast<int>(scene.views.size());
    const int e = 2 * cfg.dir_enc_freqs;
    const int f_width = cfg.freq_coeff_width();

    TokenGeometry g;
    g.p = p_count;
    g.v = v_count;
    g.points.resize(static_cast<size_t>(p_count) * 3);
    g.valid.assign(static_cast<size_t>(p_count) * v_count, 0);
    g.any_valid.assign(static_cast<size_t>(p_count), 0);
    g.uv_full.assign(static_cast<size_t>(p_count) * v_count * 2, 0.0);
    g.dir_enc.assign(static_cast<size_t>(p_count) * v_count * e, 0.0);
    for (auto& pl : g.plane) pl.assign(static_cast<size_t>(p_count) * v_count, 0.0);

    std::vector<double> colors(static_cast<size_t>(p_count) * v_count * 3, 0.0);
    std::vector<double> freqs(static_cast<size_t>(p_count) * v_count * f_width, 0.0);

    parallel_for(p_count, [&](int64_t lo, int64_t hi) {
        for (int64_t pi = lo; pi < hi; ++pi) {
            const Eigen::Vector3d& x = points[static_cast<size_t>(pi)];
            g.points[3 * pi] = x.x();
            g.points[3 * pi + 1] = x.y();
            g.points[3 * pi + 2] = x.z();
            for (int v = 0; v < v_count; ++v) {
                const CameraView& cam = scene.views[static_cast<size_t>(v)];
                const ViewFeatures& vf = scene.per_view[static_cast<size_t>(v)];
                const int64_t pv = pi * v_count + v;
                const Projection pr = project_point(cam, x);
                if (!pr.in_front) continue;
                const bool in_img = pr.u >= -kClampMargin && pr.u <= cam.width - 1 + kClampMargin &&
                                    pr.v >= -kClampMargin && pr.v <= cam.height - 1 + kClampMargin;
                const bool in_depth = pr.depth >= cam.near && pr.depth <= cam.far;
                g.uv_full[2 * pv] = pr.u;
                g.uv_full[2 * pv + 1] = pr.v;
                for (int l = 0; l < 3; ++l) {
                    const FeatureVolume& vol = vf.spatial[static_cast<size_t>(l)];
                    g.plane[static_cast<size_t>(l)][static_cast<size_t>(pv)] = [&] {
                        const VolumeCoord vc = volume_coords(cam, vol.scale, vol.hypotheses,
                                                             vol.grid.dim(2), vol.grid.dim(3), x);
                        return vc.plane;
                    }();
                }
                const VolumeCoord vcf = volume_coords(cam, vf.freq.scale, vf.freq.hypotheses,
                                                      vf.freq.grid.dim(2), vf.freq.grid.dim(3), x);
                g.plane[3][static_cast<size_t>(pv)] = vcf.plane;
                if (!(in_img && in_depth)) continue;
                g.valid[static_cast<size_t>(pv)] = 1;
                g.any_valid[static_cast<size_t>(pi)] = 1;

                // Angle between the target ray and the source viewing ray.
                const Eigen::Vector3d src_dir = (x - cam.center()).normalized();
                const double cosang =
                    std::min(1.0, std::max(-1.0, ray_dirs[static_cast<size_t>(pi)].dot(src_dir)));
                encode_direction(std::acos(cosang), cfg.dir_enc_freqs,
                                 &g.dir_enc[static_cast<size_t>(pv) * e]);

                // Constant per-view samples: image color and raw HF coefficients.
                const Tensor& img = cam.image;
                const TapW ti = taps2d(pr.u, pr.v, cam.width, cam.height);
                for (int ch = 0; ch < 3; ++ch) {
                    colors[static_cast<size_t>(pv) * 3 + ch] = sample_map_value(
                        img.raw() + static_cast<int64_t>(ch) * cam.height * cam.width, cam.height,
                        cam.width, ti);
                }
                const Tensor& hf = vf.maps.hf_map;
                const int hh = hf.dim(1), hw = hf.dim(2);
                const TapW th = taps2d(scale_coord(pr.u, 0.5), scale_coord(pr.v, 0.5), hw, hh);
                for (int ch = 0; ch < f_width; ++ch) {
                    freqs[static_cast<size_t>(pv) * f_width + ch] = sample_map_value(
                        hf.raw() + static_cast<int64_t>(ch) * hh * hw, hh, hw, th);
                }
            }
        }
    }, 128);

    g.color_samples = Tensor::from_data({p_count, v_count, 3}, std::move(colors));
    g.freq_samples = Tensor::from_data({p_count, v_count, f_width}, std::move(freqs));
    return g;
}

namespace {

struct DomainLayout {
    std::vector<Tensor> maps;                  // per view
    std::vector<std::vector<Tensor>> volumes;  // per view, per level
    std::vector<int> vol_level_index;          // into TokenGeometry::plane
    double map_scale = 1.0;
    int map_ch = 0;
    std::vector<int> vol_ch;
    int in_dim = 0;
    int enc_dim = 0;
};

DomainLayout domain_layout(const SceneFeatures& scene, TokenDomain domain, const ModelConfig& cfg) {
    DomainLayout d;
    d.enc_dim = 2 * cfg.dir_enc_freqs;
    const int v_count = static_cast<int>(scene.views.size());
    for (int v = 0; v < v_count; ++v) {
        const ViewFeatures& vf = scene.per_view[static_cast<size_t>(v)];
        if (domain == TokenDomain::kSpatial) {
            d.maps.push_back(vf.maps.f_s[2]);
            d.volumes.push_back({vf.spatial[0].grid, vf.spatial[1].grid, vf.spatial[2].grid});
        } else {
            d.maps.push_back(vf.maps.f_w);
            d.volumes.push_back({vf.freq.grid});
        }
    }
    if (domain == TokenDomain::kSpatial) {
        d.vol_level_index = {0, 1, 2};
        d.map_scale = 1.0;
    } else {
        d.vol_level_index = {3};
        d.map_scale = 0.5;
    }
    d.map_ch = d.maps[0].dim(0);
    for (const Tensor& vol : d.volumes[0]) d.vol_ch.push_back(vol.dim(1));
    d.in_dim = d.map_ch + d.enc_dim;
    for (int c : d.vol_ch) d.in_dim += c;
    return d;
}

}  // namespace

Tensor embed_tokens(const SceneFeatures& scene, const std::shared_ptr<TokenGeometry>& geo,
                    TokenDomain domain, const RendererParams& params, const ModelConfig& cfg) {
    const DomainLayout lay = domain_layout(scene, domain, cfg);
    const Tensor w_view = domain == TokenDomain::kSpatial ? params.sp_view_w : params.fr_view_w;
    const Tensor b_view = domain == TokenDomain::kSpatial ? params.sp_view_b : params.fr_view_b;
    const Tensor w_glob = domain == TokenDomain::kSpatial ? params.sp_glob_w : params.fr_glob_w;
    const Tensor b_glob = domain == TokenDomain::kSpatial ? params.sp_glob_b : params.fr_glob_b;

    const int p_count = geo->p;
    const int v_count = geo->v;
    const int in = lay.in_dim;
    const int tw = w_view.dim(1);
    if (w_view.dim(0) != in || w_glob.dim(0) != 2 * in) {
        throw DimensionError("embed_tokens: embedding width mismatch for domain input " +
                             std::to_string(in));
    }

    std::vector<Tensor> inputs;
    for (const Tensor& m : lay.maps) inputs.push_back(m);
    for (const auto& vv : lay.volumes)
        for (const Tensor& t : vv) inputs.push_back(t);
    inputs.push_back(w_view);
    inputs.push_back(b_view);
    inputs.push_back(w_glob);
    inputs.push_back(b_glob);

    // Gathers the per-view feature vector for (pi, v) into feat.
    auto gather = [lay, geo](int64_t pi, int v, double* feat) {
        const int v_count = geo->v;
        const int64_t pv = pi * v_count + v;
        if (!geo->valid[static_cast<size_t>(pv)]) {
            std::fill(feat, feat + lay.in_dim, 0.0);
            return;
        }
        const double u = geo->uv_full[2 * pv];
        const double w_full = geo->uv_full[2 * pv + 1];
        int off = 0;
        {
            const Tensor& m = lay.maps[static_cast<size_t>(v)];
            const int mh = m.dim(1), mw = m.dim(2);
            const TapW t = taps2d(scale_coord(u, lay.map_scale), scale_coord(w_full, lay.map_scale),
                                  mw, mh);
            for (int ch = 0; ch < lay.map_ch; ++ch) {
                feat[off + ch] =
                    sample_map_value(m.raw() + static_cast<int64_t>(ch) * mh * mw, mh, mw, t);
            }
            off += lay.map_ch;
        }
        for (size_t li = 0; li < lay.volumes[static_cast<size_t>(v)].size(); ++li) {
            const Tensor& vol = lay.volumes[static_cast<size_t>(v)][li];
            const int d = vol.dim(0), c = vol.dim(1), vh = vol.dim(2), vw = vol.dim(3);
            const double scale = li < lay.vol_level_index.size() && lay.vol_level_index[li] == 0
                                     ? 0.25
                                     : (lay.vol_level_index[li] == 2 ? 1.0 : 0.5);
            const TapW t =
                taps2d(scale_coord(u, scale), scale_coord(w_full, scale), vw, vh);
            const TapAxis ap =
                tap_axis(geo->plane[static_cast<size_t>(lay.vol_level_index[li])][static_cast<size_t>(pv)], d);
            const int64_t chw = static_cast<int64_t>(c) * vh * vw;
            for (int ch = 0; ch < c; ++ch) {
                const double s0 = sample_map_value(
                    vol.raw() + ap.i0 * chw + static_cast<int64_t>(ch) * vh * vw, vh, vw, t);
                const double s1 = sample_map_value(
                    vol.raw() + ap.i1 * chw + static_cast<int64_t>(ch) * vh * vw, vh, vw, t);
                feat[off + ch] = ap.w0 * s0 + ap.w1 * s1;
            }
            off += c;
        }
        const double* enc = &geo->dir_enc[static_cast<size_t>(pi * v_count + v) * lay.enc_dim];
        for (int k = 0; k < lay.enc_dim; ++k) feat[off + k] = enc[k];
    };

    return make_op(
        "embed_tokens", {p_count, v_count + 1, tw}, inputs,
        [&](TensorImpl& out) {
            double* po = out.values.data();
            const double* wv = w_view.raw();
            const double* bv = b_view.raw();
            const double* wg = w_glob.raw();
            const double* bg = b_glob.raw();
            parallel_for(p_count, [&](int64_t lo, int64_t hi) {
                std::vector<double> feat(static_cast<size_t>(in));
                std::vector<double> mu(static_cast<size_t>(in)), m2(static_cast<size_t>(in));
                for (int64_t pi = lo; pi < hi; ++pi) {
                    double* prow = po + pi * (v_count + 1) * tw;
                    std::fill(mu.begin(), mu.end(), 0.0);
                    std::fill(m2.begin(), m2.end(), 0.0);
                    int n = 0;
                    for (int v = 0; v < v_count; ++v) {
                        gather(pi, v, feat.data());
                        double* trow = prow + (1 + v) * tw;
                        std::copy(bv, bv + tw, trow);
                        for (int t = 0; t < in; ++t) {
                            const double x = feat[static_cast<size_t>(t)];
                            if (x == 0.0) continue;
                            const double* wrow = wv + static_cast<int64_t>(t) * tw;
                            for (int o = 0; o < tw; ++o) trow[o] += x * wrow[o];
                        }
                        if (geo->valid[static_cast<size_t>(pi * v_count + v)]) {
                            ++n;
                            for (int t = 0; t < in; ++t) {
                                mu[static_cast<size_t>(t)] += feat[static_cast<size_t>(t)];
                                m2[static_cast<size_t>(t)] +=
                                    feat[static_cast<size_t>(t)] * feat[static_cast<size_t>(t)];
                            }
                        }
                    }
                    std::copy(bg, bg + tw, prow);
                    if (n > 0) {
                        const double invn = 1.0 / n;
                        for (int t = 0; t < in; ++t) {
                            mu[static_cast<size_t>(t)] *= invn;
                            m2[static_cast<size_t>(t)] =
                                m2[static_cast<size_t>(t)] * invn -
                                mu[static_cast<size_t>(t)] * mu[static_cast<size_t>(t)];
                        }
                        for (int t = 0; t < 2 * in; ++t) {
                            const double x = t < in ? mu[static_cast<size_t>(t)]
                                                    : m2[static_cast<size_t>(t - in)];
                            if (x == 0.0) continue;
                            const double* wrow = wg + static_cast<int64_t>(t) * tw;
                            for (int o = 0; o < tw; ++o) prow[o] += x * wrow[o];
                        }
                    }
                }
            }, 32);
        },
        [geo, lay, w_view, b_view, w_glob, b_glob, gather, p_count, v_count, in,
         tw](TensorImpl* out) {
            const double* g = out->grad.data();
            const double* wv = w_view.raw();
            const double* wg = w_glob.raw();
            const int threads = num_threads();
            const int64_t chunk_size = 2048;

            std::vector<double> dwv(static_cast<size_t>(in) * tw, 0.0);
            std::vector<double> dbv(static_cast<size_t>(tw), 0.0);
            std::vector<double> dwg(static_cast<size_t>(2 * in) * tw, 0.0);
            std::vector<double> dbg(static_cast<size_t>(tw), 0.0);
            // Per-thread partials, reduced in fixed order after each chunk.
            std::vector<std::vector<double>> t_dwv(static_cast<size_t>(threads)),
                t_dwg(static_cast<size_t>(threads)), t_dbv(static_cast<size_t>(threads)),
                t_dbg(static_cast<size_t>(threads));

            std::vector<double> feats, dfeats, moments;
            for (int64_t chunk_lo = 0; chunk_lo < p_count; chunk_lo += chunk_size) {
                const int64_t chunk_hi = std::min<int64_t>(p_count, chunk_lo + chunk_size);
                const int64_t cp = chunk_hi - chunk_lo;
                feats.assign(static_cast<size_t>(cp) * v_count * in, 0.0);
                dfeats.assign(static_cast<size_t>(cp) * v_count * in, 0.0);
                moments.assign(static_cast<size_t>(cp) * 2 * in, 0.0);
                for (auto* tv : {&t_dwv, &t_dbv, &t_dwg, &t_dbg}) {
                    for (auto& buf : *tv) buf.clear();
                }

                // Pass 1: recompute features, push gradients to features and
                // parameters.
                parallel_for(cp, [&](int64_t lo, int64_t hi) {
                    // Identify the worker by its range start (deterministic).
                    const int tid = static_cast<int>((lo * threads) / std::max<int64_t>(1, cp));
                    auto& my_dwv = t_dwv[static_cast<size_t>(tid)];
                    auto& my_dbv = t_dbv[static_cast<size_t>(tid)];
                    auto& my_dwg = t_dwg[static_cast<size_t>(tid)];
                    auto& my_dbg = t_dbg[static_cast<size_t>(tid)];
                    if (my_dwv.empty()) my_dwv.assign(static_cast<size_t>(in) * tw, 0.0);
                    if (my_dbv.empty()) my_dbv.assign(static_cast<size_t>(tw), 0.0);
                    if (my_dwg.empty()) my_dwg.assign(static_cast<size_t>(2 * in) * tw, 0.0);
                    if (my_dbg.empty()) my_dbg.assign(static_cast<size_t>(tw), 0.0);
                    for (int64_t ci = lo; ci < hi; ++ci) {
                        const int64_t pi = chunk_lo + ci;
                        double* feat_p = &feats[static_cast<size_t>(ci) * v_count * in];
                        double* dfeat_p = &dfeats[static_cast<size_t>(ci) * v_count * in];
                        double* mom = &moments[static_cast<size_t>(ci) * 2 * in];
                        int n = 0;
                        for (int v = 0; v < v_count; ++v) {
                            gather(pi, v, feat_p + static_cast<int64_t>(v) * in);
                            if (geo->valid[static_cast<size_t>(pi * v_count + v)]) ++n;
                        }
                        double* mu = mom;
                        double* var = mom + in;
                        if (n > 0) {
                            const double invn = 1.0 / n;
                            for (int v = 0; v < v_count; ++v) {
                                if (!geo->valid[static_cast<size_t>(pi * v_count + v)]) continue;
                                const double* fv = feat_p + static_cast<int64_t>(v) * in;
                                for (int t = 0; t < in; ++t) {
                                    mu[t] += fv[t] * invn;
                                    var[t] += fv[t] * fv[t] * invn;
                                }
                            }
                            for (int t = 0; t < in; ++t) var[t] -= mu[t] * mu[t];
                        }
                        const double* grow = g + pi * (v_count + 1) * tw;
                        // View tokens.
                        for (int v = 0; v < v_count; ++v) {
                            const double* gv = grow + (1 + v) * tw;
                            const double* fv = feat_p + static_cast<int64_t>(v) * in;
                            double* dfv = dfeat_p + static_cast<int64_t>(v) * in;
                            for (int t = 0; t < in; ++t) {
                                const double* wrow = wv + static_cast<int64_t>(t) * tw;
                                double acc = 0.0;
                                for (int o = 0; o < tw; ++o) acc += gv[o] * wrow[o];
                                dfv[t] = acc;
                                if (fv[t] != 0.0) {
                                    double* dwrow = my_dwv.data() + static_cast<int64_t>(t) * tw;
                                    for (int o = 0; o < tw; ++o) dwrow[o] += fv[t] * gv[o];
                                }
                            }
                            for (int o = 0; o < tw; ++o) my_dbv[static_cast<size_t>(o)] += gv[o];
                        }
                        // Global token through the masked moments.
                        const double* g0 = grow;
                        for (int o = 0; o < tw; ++o) my_dbg[static_cast<size_t>(o)] += g0[o];
                        if (n > 0) {
                            const double invn = 1.0 / n;
                            for (int t = 0; t < 2 * in; ++t) {
                                const double x = t < in ? mu[t] : var[t - in];
                                if (x != 0.0) {
                                    double* dwrow = my_dwg.data() + static_cast<int64_t>(t) * tw;
                                    for (int o = 0; o < tw; ++o) dwrow[o] += x * g0[o];
                                }
                            }
                            std::vector<double> dmom(static_cast<size_t>(2 * in), 0.0);
                            for (int t = 0; t < 2 * in; ++t) {
                                const double* wrow = wg + static_cast<int64_t>(t) * tw;
                                double acc = 0.0;
                                for (int o = 0; o < tw; ++o) acc += g0[o] * wrow[o];
                                dmom[static_cast<size_t>(t)] = acc;
                            }
                            for (int v = 0; v < v_count; ++v) {
                                if (!geo->valid[static_cast<size_t>(pi * v_count + v)]) continue;
                                const double* fv = feat_p + static_cast<int64_t>(v) * in;
                                double* dfv = dfeat_p + static_cast<int64_t>(v) * in;
                                for (int t = 0; t < in; ++t) {
                                    dfv[t] += invn * (dmom[static_cast<size_t>(t)] +
                                                      2.0 * (fv[t] - mu[t]) * dmom[static_cast<size_t>(in + t)]);
                                }
                            }
                        }
                    }
                }, 16);
                for (int tid = 0; tid < threads; ++tid) {
                    if (!t_dwv[static_cast<size_t>(tid)].empty())
                        for (size_t i = 0; i < dwv.size(); ++i) dwv[i] += t_dwv[static_cast<size_t>(tid)][i];
                    if (!t_dbv[static_cast<size_t>(tid)].empty())
                        for (size_t i = 0; i < dbv.size(); ++i) dbv[i] += t_dbv[static_cast<size_t>(tid)][i];
                    if (!t_dwg[static_cast<size_t>(tid)].empty())
                        for (size_t i = 0; i < dwg.size(); ++i) dwg[i] += t_dwg[static_cast<size_t>(tid)][i];
                    if (!t_dbg[static_cast<size_t>(tid)].empty())
                        for (size_t i = 0; i < dbg.size(); ++i) dbg[i] += t_dbg[static_cast<size_t>(tid)][i];
                }

                // Pass 2: scatter feature gradients into maps and volumes,
                // channel-sliced per target.
                for (int v = 0; v < v_count; ++v) {
                    const Tensor& m = lay.maps[static_cast<size_t>(v)];
                    if (m.requires_grad()) {
                        double* gm = m.impl_raw()->grad_data();
                        const int mh = m.dim(1), mw = m.dim(2);
                        parallel_for(lay.map_ch, [&](int64_t clo, int64_t chi) {
                            for (int64_t ch = clo; ch < chi; ++ch) {
                                double* gmc = gm + ch * mh * mw;
                                for (int64_t ci = 0; ci < cp; ++ci) {
                                    const int64_t pi = chunk_lo + ci;
                                    const int64_t pv = pi * v_count + v;
                                    if (!geo->valid[static_cast<size_t>(pv)]) continue;
                                    const double dv = dfeats[(static_cast<size_t>(ci) * v_count + v) * in + ch];
                                    if (dv == 0.0) continue;
                                    const TapW t = taps2d(scale_coord(geo->uv_full[2 * pv], lay.map_scale),
                                                          scale_coord(geo->uv_full[2 * pv + 1], lay.map_scale),
                                                          mw, mh);
                                    gmc[t.y0 * mw + t.x0] += dv * t.wy0 * t.wx0;
                                    gmc[t.y0 * mw + t.x1] += dv * t.wy0 * t.wx1;
                                    gmc[t.y1 * mw + t.x0] += dv * t.wy1 * t.wx0;
                                    gmc[t.y1 * mw + t.x1] += dv * t.wy1 * t.wx1;
                                }
                            }
                        }, 1);
                    }
                    int off = lay.map_ch;
                    for (size_t li = 0; li < lay.volumes[static_cast<size_t>(v)].size(); ++li) {
                        const Tensor& vol = lay.volumes[static_cast<size_t>(v)][li];
                        const int vd = vol.dim(0), vc = vol.dim(1), vh = vol.dim(2), vw = vol.dim(3);
                        const double scale = lay.vol_level_index[li] == 0
                                                 ? 0.25
                                                 : (lay.vol_level_index[li] == 2 ? 1.0 : 0.5);
                        if (vol.requires_grad()) {
                            double* gvp = vol.impl_raw()->grad_data();
                            const int64_t chw = static_cast<int64_t>(vc) * vh * vw;
                            parallel_for(vc, [&](int64_t clo, int64_t chi) {
                                for (int64_t ch = clo; ch < chi; ++ch) {
                                    for (int64_t ci = 0; ci < cp; ++ci) {
                                        const int64_t pi = chunk_lo + ci;
                                        const int64_t pv = pi * v_count + v;
                                        if (!geo->valid[static_cast<size_t>(pv)]) continue;
                                        const double dv =
                                            dfeats[(static_cast<size_t>(ci) * v_count + v) * in + off + ch];
                                        if (dv == 0.0) continue;
                                        const TapW t = taps2d(
                                            scale_coord(geo->uv_full[2 * pv], scale),
                                            scale_coord(geo->uv_full[2 * pv + 1], scale), vw, vh);
                                        const TapAxis ap = tap_axis(
                                            geo->plane[static_cast<size_t>(lay.vol_level_index[li])][static_cast<size_t>(pv)],
                                            vd);
                                        double* g0p = gvp + ap.i0 * chw + ch * vh * vw;
                                        double* g1p = gvp + ap.i1 * chw + ch * vh * vw;
                                        g0p[t.y0 * vw + t.x0] += dv * ap.w0 * t.wy0 * t.wx0;
                                        g0p[t.y0 * vw + t.x1] += dv * ap.w0 * t.wy0 * t.wx1;
                                        g0p[t.y1 * vw + t.x0] += dv * ap.w0 * t.wy1 * t.wx0;
                                        g0p[t.y1 * vw + t.x1] += dv * ap.w0 * t.wy1 * t.wx1;
                                        g1p[t.y0 * vw + t.x0] += dv * ap.w1 * t.wy0 * t.wx0;
                                        g1p[t.y0 * vw + t.x1] += dv * ap.w1 * t.wy0 * t.wx1;
                                        g1p[t.y1 * vw + t.x0] += dv * ap.w1 * t.wy1 * t.wx0;
                                        g1p[t.y1 * vw + t.x1] += dv * ap.w1 * t.wy1 * t.wx1;
                                    }
                                }
                            }, 1);
                        }
                        off += vc;
                    }
                }
            }

            if (w_view.requires_grad()) {
                double* p = w_view.impl_raw()->grad_data();
                for (size_t i = 0; i < dwv.size(); ++i) p[i] += dwv[i];
            }
            if (b_view.requires_grad()) {
                double* p = b_view.impl_raw()->grad_data();
                for (size_t i = 0; i < dbv.size(); ++i) p[i] += dbv[i];
            }
            if (w_glob.requires_grad()) {
                double* p = w_glob.impl_raw()->grad_data();
                for (size_t i = 0; i < dwg.size(); ++i) p[i] += dwg[i];
            }
            if (b_glob.requires_grad()) {
                double* p = b_glob.impl_raw()->grad_data();
                for (size_t i = 0; i < dbg.size(); ++i) p[i] += dbg[i];
            }
        });
}

Tensor aggregate(const Tensor& tokens, const std::vector<uint8_t>& view_valid,
                 const AbaParams& params, const ModelConfig& cfg) {
    const int p = tokens.dim(0);
    const int s = tokens.dim(1);  // V + 1, global in slot 0
    const int nv = s - 1;
    const int tw = tokens.dim(2);
    const int heads = cfg.attn_heads;
    const int dh = tw / heads;
    if (static_cast<int>(view_valid.size()) != p * nv) {
        throw DimensionError("aggregate: validity mask must be P x V");
    }

    auto to_heads = [&](const Tensor& t, int rows) {
        return reshape(permute(reshape(t, {p, rows, heads, dh}), {0, 2, 1, 3}),
                       {p * heads, rows, dh});
    };
    const Tensor views = slice(tokens, 1, 1, nv);
    Tensor q = to_heads(linear(tokens, params.wq, params.bq), s);
    Tensor k = to_heads(linear(views, params.wk, params.bk), nv);
    Tensor v = to_heads(linear(views, params.wv, params.bv), nv);
    Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));

    // Invalid views are never attended; tiled over heads and query rows.
    std::vector<uint8_t> mask(static_cast<size_t>(p) * heads * s * nv);
    for (int pi = 0; pi < p; ++pi) {
        for (int h = 0; h < heads; ++h) {
            for (int qi = 0; qi < s; ++qi) {
                uint8_t* row = &mask[((static_cast<size_t>(pi) * heads + h) * s + qi) * nv];
                for (int vi = 0; vi < nv; ++vi) {
                    row[vi] = view_valid[static_cast<size_t>(pi) * nv + vi];
                }
            }
        }
    }
    Tensor attn = masked_softmax_lastdim(scores, mask);
    Tensor ctx = reshape(permute(reshape(bmm(attn, v), {p, heads, s, dh}), {0, 2, 1, 3}), {p, s, tw});
    Tensor x = add(tokens, linear(ctx, params.wo, params.bo));
    Tensor ff = linear(elu(linear(x, params.ff1_w, params.ff1_b)), params.ff2_w, params.ff2_b);
    return add(x, ff);
}

Tensor predict_freq(const Tensor& view_weights, const Tensor& samples) {
    if (samples.ndim() != 3 || view_weights.ndim() != 2 ||
        view_weights.dim(0) != samples.dim(0) || view_weights.dim(1) != samples.dim(1)) {
        throw DimensionError("predict_freq: weights " + shape_str(view_weights.shape()) +
                             " vs samples " + shape_str(samples.shape()));
    }
    const int p = samples.dim(0), v = samples.dim(1);
    return sum_mid(scale_rows(samples, reshape(view_weights, {p, v, 1})));
}

Tensor predict_color(const Tensor& view_weights, const Tensor& color_samples, const Tensor& f_hat,
                     const RendererParams& params) {
    const Tensor base = predict_freq(view_weights, color_samples);
    const Tensor lt =
        linear(elu(linear(f_hat, params.lt_w1, params.lt_b1)), params.lt_w2, params.lt_b2);
    return relu(scale_rows(base, add_scalar(lt, 1.0)));
}

Tensor density(const Tensor& refined_global, int rays, int samples_per_ray,
               const std::vector<uint8_t>& point_valid, const AeMlpParams& params) {
    const int p = refined_global.dim(0);
    const int tw = refined_global.dim(1);
    if (p != rays * samples_per_ray) throw DimensionError("density: P != rays * samples_per_ray");
    if (samples_per_ray % 4 != 0) {
        throw ContractError("density: samples per ray must be divisible by 4");
    }
    const Conv2dOpts same{1, 1, 1, 1, 0, 1};
    const Conv2dOpts down{1, 2, 1, 1, 0, 1};
    const Conv2dOpts up{1, 2, 1, 1, 0, 1};
    const Conv2dOpts one{1, 1, 1, 1, 0, 0};

    Tensor x = permute(reshape(refined_global, {rays, samples_per_ray, tw}), {2, 0, 1});
    Tensor e0 = elu(add_channel_bias(conv2d(x, params.enc0_w, same), params.enc0_b));
    Tensor e1 = elu(add_channel_bias(conv2d(e0, params.enc1_w, down), params.enc1_b));
    Tensor e2 = elu(add_channel_bias(conv2d(e1, params.enc2_w, down), params.enc2_b));
    Tensor d1 = elu(add_channel_bias(deconv2d(e2, params.dec1_w, up), params.dec1_b));
    Tensor f1 = elu(add_channel_bias(conv2d(concat({d1, e1}, 0), params.fuse1_w, one), params.fuse1_b));
    Tensor d0 = elu(add_channel_bias(deconv2d(f1, params.dec0_w, up), params.dec0_b));
    Tensor f0 = elu(add_channel_bias(conv2d(concat({d0, e0}, 0), params.fuse0_w, one), params.fuse0_b));
    Tensor raw = add_channel_bias(conv2d(f0, params.head_w, one), params.head_b);

    std::vector<double> mask(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) mask[static_cast<size_t>(i)] = point_valid[static_cast<size_t>(i)] ? 1.0 : 0.0;
    // raw is [1, R, N]; flatten to ray-major point order.
    return mul(softplus(reshape(raw, {p})), Tensor::from_data({p}, std::move(mask)));
}

CompositeResult composite_rays(const Tensor& sigma, const Tensor& color, const Tensor& freq,
                               const std::vector<double>& z, int rays, int samples_per_ray,
                               const std::vector<double>& far) {
    const int n = samples_per_ray;
    const int p = rays * n;
    if (sigma.numel() != p || color.dim(0) != p || freq.dim(0) != p ||
        static_cast<int>(z.size()) != p || static_cast<int>(far.size()) != rays) {
        throw DimensionError("composite_rays: inconsistent batch extents");
    }
    for (int r = 0; r < rays; ++r) {
        for (int i = 1; i < n; ++i) {
            if (!(z[static_cast<size_t>(r * n + i)] > z[static_cast<size_t>(r * n + i - 1)])) {
                throw ContractError("composite_rays: sample depths must be strictly increasing");
            }
        }
    }
    const int fc = freq.dim(1);
    const int out_w = 3 + fc + 2;

    auto deltas = [&](int r, int i) {
        const double zi = z[static_cast<size_t>(r * n + i)];
        return i + 1 < n ? z[static_cast<size_t>(r * n + i + 1)] - zi
                         : std::max(0.0, far[static_cast<size_t>(r)] - zi);
    };

    Tensor packed = make_op(
        "composite", {rays, out_w}, {sigma, color, freq},
        [&](TensorImpl& out) {
            const double* ps = sigma.raw();
            const double* pc = color.raw();
            const double* pf = freq.raw();
            double* po = out.values.data();
            parallel_for(rays, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    double* orow = po + r * out_w;
                    double t = 1.0;
                    for (int i = 0; i < n; ++i) {
                        const int64_t idx = r * n + i;
                        const double st = ps[idx] * deltas(static_cast<int>(r), i);
                        const double a = t * -std::expm1(-st);
                        for (int ch = 0; ch < 3; ++ch) orow[ch] += a * pc[idx * 3 + ch];
                        for (int ch = 0; ch < fc; ++ch) orow[3 + ch] += a * pf[idx * fc + ch];
                        orow[3 + fc] += a * z[static_cast<size_t>(idx)];
                        orow[3 + fc + 1] += a;
                        t *= std::exp(-st);
                    }
                }
            }, 32);
        },
        [sigma, color, freq, z, far, rays, n, fc, out_w, deltas](TensorImpl* out) {
            const double* g = out->grad.data();
            const double* ps = sigma.raw();
            const double* pc = color.raw();
            const double* pf = freq.raw();
            double* gs = sigma.requires_grad() ? sigma.impl_raw()->grad_data() : nullptr;
            double* gc = color.requires_grad() ? color.impl_raw()->grad_data() : nullptr;
            double* gf = freq.requires_grad() ? freq.impl_raw()->grad_data() : nullptr;
            parallel_for(rays, [&](int64_t lo, int64_t hi) {
                std::vector<double> alpha(static_cast<size_t>(n)), trans(static_cast<size_t>(n) + 1),
                    wsum(static_cast<size_t>(n));
                for (int64_t r = lo; r < hi; ++r) {
                    const double* grow = g + r * out_w;
                    trans[0] = 1.0;
                    for (int i = 0; i < n; ++i) {
                        const int64_t idx = r * n + i;
                        const double st = ps[idx] * deltas(static_cast<int>(r), i);
                        alpha[static_cast<size_t>(i)] = trans[static_cast<size_t>(i)] * -std::expm1(-st);
                        trans[static_cast<size_t>(i) + 1] = trans[static_cast<size_t>(i)] * std::exp(-st);
                        // dL/d alpha_i.
                        double wv = grow[3 + fc] * z[static_cast<size_t>(idx)] + grow[3 + fc + 1];
                        for (int ch = 0; ch < 3; ++ch) wv += grow[ch] * pc[idx * 3 + ch];
                        for (int ch = 0; ch < fc; ++ch) wv += grow[3 + ch] * pf[idx * fc + ch];
                        wsum[static_cast<size_t>(i)] = wv;
                    }
                    if (gc || gf) {
                        for (int i = 0; i < n; ++i) {
                            const int64_t idx = r * n + i;
                            const double a = alpha[static_cast<size_t>(i)];
                            if (gc)
                                for (int ch = 0; ch < 3; ++ch) gc[idx * 3 + ch] += a * grow[ch];
                            if (gf)
                                for (int ch = 0; ch < fc; ++ch) gf[idx * fc + ch] += a * grow[3 + ch];
                        }
                    }
                    if (gs) {
                        // Suffix sums of w_m * alpha_m.
                        double suffix = 0.0;
                        for (int i = n - 1; i >= 0; --i) {
                            const int64_t idx = r * n + i;
                            const double d = deltas(static_cast<int>(r), i);
                            gs[idx] += d * (wsum[static_cast<size_t>(i)] * trans[static_cast<size_t>(i) + 1] - suffix);
                            suffix += wsum[static_cast<size_t>(i)] * alpha[static_cast<size_t>(i)];
                        }
                    }
                }
            }, 32);
        });

    CompositeResult res;
    res.color = slice(packed, 1, 0, 3);
    res.freq = slice(packed, 1, 3, fc);
    res.depth = slice(packed, 1, 3 + fc, 1);
    res.sum_alpha = slice(packed, 1, 3 + fc + 1, 1);
    return res;
}

std::vector<double> compositing_weights(const std::vector<double>& sigma,
                                        const std::vector<double>& z, double far) {
    const size_t n = sigma.size();
    std::vector<double> alpha(n);
    double t = 1.0;
    for (size_t i = 0; i < n; ++i) {
        const double delta = i + 1 < n ? z[i + 1] - z[i] : std::max(0.0, far - z[i]);
        const double st = sigma[i] * delta;
        alpha[i] = t * -std::expm1(-st);
        t *= std::exp(-st);
    }
    return alpha;
}

RenderBatch render_rays(const std::vector<Ray>& rays, const SceneFeatures& scene,
                        const RendererParams& params, const ModelConfig& mcfg,
                        const SamplerConfig& scfg, SamplingStrategy strategy, uint64_t seed,
                        const std::vector<SampleSet>* frozen) {
    const int r_count = static_cast<int>(rays.size());
    const int n = scfg.n_total();
    const int v_count = static_cast<int>(scene.views.size());

    RenderBatch batch;
    batch.samples_per_ray = n;
    batch.samples.resize(static_cast<size_t>(r_count));
    if (frozen) {
        if (static_cast<int>(frozen->size()) != r_count) {
            throw ContractError("render_rays: frozen sample count does not match rays");
        }
        batch.samples = *frozen;
    } else {
        std::vector<SampleSet>& out = batch.samples;
        parallel_for(r_count, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const Ray& ray = rays[static_cast<size_t>(i)];
                const uint64_t ray_id =
                    (static_cast<uint64_t>(ray.row) << 20) ^ static_cast<uint64_t>(ray.col) ^
                    (static_cast<uint64_t>(i) << 40);
                out[static_cast<size_t>(i)] = sample_ray(ray, scene, scfg, strategy, seed, ray_id);
            }
        }, 16);
    }

    // Flatten to exactly n samples per ray; padded slots stay invalid.
    batch.z.assign(static_cast<size_t>(r_count) * n, 0.0);
    std::vector<uint8_t> padded(static_cast<size_t>(r_count) * n, 0);
    std::vector<double> far(static_cast<size_t>(r_count));
    std::vector<Eigen::Vector3d> points(static_cast<size_t>(r_count) * n);
    std::vector<Eigen::Vector3d> dirs(static_cast<size_t>(r_count) * n);
    for (int r = 0; r < r_count; ++r) {
        const Ray& ray = rays[static_cast<size_t>(r)];
        far[static_cast<size_t>(r)] = ray.far;
        const std::vector<double>& mz = batch.samples[static_cast<size_t>(r)].merged_z;
        const int actual = static_cast<int>(mz.size());
        for (int i = 0; i < n; ++i) {
            double zi;
            if (i < actual) {
                zi = mz[static_cast<size_t>(i)];
            } else {
                // Strictly increasing filler past the last real sample.
                const double last = actual > 0 ? mz[static_cast<size_t>(actual - 1)] : ray.near;
                const double room = std::max(1e-9, ray.far - last);
                zi = last + room * static_cast<double>(i - actual + 1) /
                                static_cast<double>(n - actual + 1);
                padded[static_cast<size_t>(r) * n + i] = 1;
            }
            batch.z[static_cast<size_t>(r) * n + i] = zi;
            points[static_cast<size_t>(r) * n + i] = ray.origin + zi * ray.dir;
            dirs[static_cast<size_t>(r) * n + i] = ray.dir;
        }
    }

    auto geo = std::make_shared<TokenGeometry>(build_token_geometry(points, dirs, scene, mcfg));
    batch.point_valid.assign(static_cast<size_t>(r_count) * n, 0);
    for (int64_t i = 0; i < static_cast<int64_t>(r_count) * n; ++i) {
        batch.point_valid[static_cast<size_t>(i)] =
            geo->any_valid[static_cast<size_t>(i)] && !padded[static_cast<size_t>(i)];
    }

    Tensor sp_tokens = embed_tokens(scene, geo, TokenDomain::kSpatial, params, mcfg);
    Tensor fr_tokens = embed_tokens(scene, geo, TokenDomain::kFrequency, params, mcfg);
    Tensor sp_ref = aggregate(sp_tokens, geo->valid, params.aba_spatial, mcfg);
    Tensor fr_ref = aggregate(fr_tokens, geo->valid, params.aba_freq, mcfg);

    const int p_count = geo->p;
    Tensor sp_glob = reshape(slice(sp_ref, 1, 0, 1), {p_count, mcfg.token_width});
    Tensor sp_views = slice(sp_ref, 1, 1, v_count);
    // Frequency-domain global tokens are produced but intentionally unused:
    // only the spatial globals drive the density estimate.
    Tensor fr_views = slice(fr_ref, 1, 1, v_count);

    batch.sigma = density(sp_glob, r_count, n, batch.point_valid, params.ae);

    Tensor ws_in = concat({sp_views, fr_views}, 2);
    Tensor ws_logits = reshape(
        linear(elu(linear(ws_in, params.ws_w1, params.ws_b1)), params.ws_w2, params.ws_b2),
        {p_count, v_count});
    Tensor ww_logits = reshape(
        linear(elu(linear(fr_views, params.ww_w1, params.ww_b1)), params.ww_w2, params.ww_b2),
        {p_count, v_count});
    Tensor w_s = masked_softmax_lastdim(ws_logits, geo->valid);
    Tensor w_w = masked_softmax_lastdim(ww_logits, geo->valid);

    Tensor f_hat = predict_freq(w_w, geo->freq_samples);
    Tensor c_hat = predict_color(w_s, geo->color_samples, f_hat, params);

    const CompositeResult comp =
        composite_rays(batch.sigma, c_hat, f_hat, batch.z, r_count, n, far);
    batch.color = comp.color;
    batch.freq = comp.freq;
    batch.depth = comp.depth;
    batch.sum_alpha = comp.sum_alpha;
    return batch;
}

}  // namespace wavenerf
