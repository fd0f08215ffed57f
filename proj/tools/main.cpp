#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "wavenerf/config.hpp"
#include "wavenerf/errors.hpp"
#include "wavenerf/io.hpp"
#include "wavenerf/metrics.hpp"
#include "wavenerf/parallel.hpp"
#include "wavenerf/pipeline.hpp"
#include "wavenerf/training.hpp"
#include "wavenerf/wavelet.hpp"

namespace fs = std::filesystem;
using namespace wavenerf;

namespace {

struct GlobalOpts {
    uint64_t seed = 0;
    bool seed_set = false;
    std::string config_path;
    std::string out_dir;
    int threads = 0;
};

class ManifestScope {
public:
    ManifestScope(std::string out_dir, RunManifest m)
        : out_dir_(std::move(out_dir)), manifest_(std::move(m)), start_(clock_t::now()) {
        fs::create_directories(out_dir_);
        write_manifest(out_dir_, manifest_);
    }
    void finalize(const std::string& status) {
        manifest_.status = status;
        manifest_.wall_seconds =
            std::chrono::duration<double>(clock_t::now() - start_).count();
        write_manifest(out_dir_, manifest_);
    }
    void add(const std::string& key, const std::string& value) {
        manifest_.extra.emplace_back(key, value);
    }

private:
    using clock_t = std::chrono::steady_clock;
    std::string out_dir_;
    RunManifest manifest_;
    clock_t::time_point start_;
};

RunManifest make_manifest(const std::string& command, const GlobalOpts& g, uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config_path = g.config_path;
    m.seed = seed;
    m.code_version = kCodeVersion;
    m.out_dir = g.out_dir;
    return m;
}

Config resolve_config(const GlobalOpts& g, bool required) {
    Config cfg;
    if (!g.config_path.empty()) {
        cfg = load_config(g.config_path);
    } else if (required) {
        throw ConfigError("--config is required for this command");
    } else {
        apply_env_overrides(cfg);
    }
    if (g.seed_set) cfg.seed = g.seed;
    if (g.threads > 0) cfg.threads = g.threads;
    if (cfg.threads > 0) set_num_threads(cfg.threads);
    return cfg;
}

SyntheticScene scene_from_config(const Config& cfg) {
    if (!cfg.scene_file.empty()) {
        if (!fs::exists(cfg.scene_file)) {
            throw IoError("scene file not found: " + cfg.scene_file);
        }
        SceneDocument doc = load_scene_document(cfg.scene_file);
        SyntheticScene scene;
        scene.spec = cfg.scene;
        for (size_t i = 0; i < doc.views.size(); ++i) {
            if (doc.roles[i] == "source") {
                scene.sources.push_back(doc.views[i]);
            } else if (doc.roles[i] == "heldout") {
                scene.heldout.push_back(doc.views[i]);
            } else {
                scene.train_targets.push_back(doc.views[i]);
            }
        }
        if (static_cast<int>(scene.sources.size()) < 2) {
            throw ConfigError("external scene needs at least two source views with images");
        }
        return scene;
    }
    return generate_scene(cfg.scene, cfg.seed);
}

void export_scene(const SyntheticScene& scene, const std::string& dir) {
    fs::create_directories(dir);
    std::vector<CameraView> views;
    std::vector<std::string> roles, files;
    auto dump = [&](const std::vector<CameraView>& group, const std::string& role,
                    const std::string& prefix) {
        for (size_t i = 0; i < group.size(); ++i) {
            const std::string name = prefix + std::to_string(i) + ".png";
            save_png((fs::path(dir) / name).string(), group[i].image);
            views.push_back(group[i]);
            roles.push_back(role);
            files.push_back(name);
        }
    };
    dump(scene.sources, "source", "source_");
    dump(scene.train_targets, "target", "target_");
    dump(scene.heldout, "heldout", "heldout_");
    save_scene_document((fs::path(dir) / "cameras.json").string(), views, roles, files);
}

int cmd_decompose(const GlobalOpts& g, const std::string& image_path, bool reconstruct) {
    if (g.out_dir.empty()) throw ConfigError("--out is required");
    const Tensor image = load_png(image_path);
    const WaveletPyramid pyr = decompose(image);  // validates extents before any output
    fs::create_directories(g.out_dir);
    ManifestScope manifest(g.out_dir, make_manifest("decompose", g, g.seed));
    const std::string stem = fs::path(image_path).stem().string();
    for (const auto& [name, band] : pyramid_band_files(stem, pyr)) {
        save_pfm((fs::path(g.out_dir) / name).string(), band);
    }
    if (reconstruct) {
        save_png((fs::path(g.out_dir) / (stem + ".reconstructed.png")).string(), synthesize(pyr));
    }
    manifest.finalize("ok");
    return 0;
}

int cmd_train(const GlobalOpts& g, bool dry_run) {
    Config cfg = resolve_config(g, true);
    cfg.validate();
    if (!cfg.scene_file.empty() && !fs::exists(cfg.scene_file)) {
        throw IoError("scene file not found: " + cfg.scene_file);
    }
    if (dry_run) {
        std::cout << "config ok\n";
        return 0;
    }
    if (g.out_dir.empty()) throw ConfigError("--out is required");
    ManifestScope manifest(g.out_dir, make_manifest("train", g, cfg.seed));
    {
        std::ofstream os(fs::path(g.out_dir) / "config.json");
        os << config_to_json(cfg) << "\n";
    }
    SyntheticScene scene = scene_from_config(cfg);
    if (cfg.scene_file.empty()) export_scene(scene, (fs::path(g.out_dir) / "scene").string());

    Pipeline pipeline = Pipeline::create(cfg);
    const TrainResult result = train(scene, pipeline, g.out_dir);
    manifest.add("checkpoint", result.checkpoint_path);
    manifest.add("log", result.log_path);
    manifest.add("final_total", format_double(result.final_total));
    manifest.finalize("ok");
    return 0;
}

int cmd_render(const GlobalOpts& g, const std::string& checkpoint, const std::string& cameras) {
    if (g.out_dir.empty()) throw ConfigError("--out is required");
    GlobalOpts g2 = g;
    if (g2.config_path.empty()) {
        const fs::path sibling = fs::path(checkpoint).parent_path() / "config.json";
        if (fs::exists(sibling)) g2.config_path = sibling.string();
    }
    Config cfg = resolve_config(g2, true);
    cfg.validate();
    Pipeline pipeline = Pipeline::create(cfg);
    pipeline.load(checkpoint);

    SceneDocument doc = load_scene_document(cameras);
    std::vector<CameraView> sources;
    std::vector<std::pair<CameraView, std::string>> targets;
    for (size_t i = 0; i < doc.views.size(); ++i) {
        if (doc.roles[i] == "source") {
            sources.push_back(doc.views[i]);
        } else {
            targets.emplace_back(doc.views[i], doc.roles[i]);
        }
    }
    if (sources.size() < 2) throw ConfigError("camera file needs >= 2 source views with images");

    ManifestScope manifest(g.out_dir, make_manifest("render", g2, cfg.seed));
    const SceneFeatures features = pipeline.build_features(sources);
    for (size_t i = 0; i < targets.size(); ++i) {
        CameraView& cam = targets[i].first;
        if (cam.width == 0 || cam.height == 0) {
            throw ConfigError("target view " + std::to_string(i) + " needs width/height");
        }
        Tensor depth, fnorm;
        const Tensor color = render_view(pipeline, features, cam, cfg.seed, &depth, &fnorm);
        const std::string stem = "view_" + std::to_string(i);
        save_png((fs::path(g.out_dir) / (stem + ".png")).string(), color);
        save_pfm((fs::path(g.out_dir) / (stem + ".depth.pfm")).string(), depth);
        save_pfm((fs::path(g.out_dir) / (stem + ".freq.pfm")).string(), fnorm);
        if (cam.image.defined()) {
            manifest.add(stem + "_psnr", format_double(psnr(cam.image, color)));
        }
    }
    manifest.finalize("ok");
    return 0;
}

int cmd_sample_stats(const GlobalOpts& g, const std::string& checkpoint, int n_rays) {
    Config cfg = resolve_config(g, true);
    cfg.validate();
    if (g.out_dir.empty()) throw ConfigError("--out is required");
    fs::create_directories(g.out_dir);
    ManifestScope manifest(g.out_dir, make_manifest("sample-stats", g, cfg.seed));
    Pipeline pipeline = Pipeline::create(cfg);
    if (!checkpoint.empty()) pipeline.load(checkpoint);
    SyntheticScene scene = scene_from_config(cfg);
    const CameraView& target = scene.heldout.empty() ? scene.train_targets.front()
                                                     : scene.heldout.front();

    const SceneFeatures features = pipeline.build_features(scene.sources);
    NoGradGuard no_grad;
    std::ofstream csv(fs::path(g.out_dir) / "sample_stats.csv", std::ios::trunc);
    csv << "ray,depth,sigma,strategy\n";
    Rng rng = Rng::stream(cfg.seed, {kStreamTest, 77});
    std::vector<Ray> rays;
    for (int i = 0; i < n_rays; ++i) {
        rays.push_back(camera_ray(target, rng.uniform_int(target.height),
                                  rng.uniform_int(target.width)));
    }
    for (const auto& [strategy, tag] :
         {std::pair<SamplingStrategy, const char*>{SamplingStrategy::kUniform, "uniform"},
          {SamplingStrategy::kFss, "fss"}}) {
        RenderBatch rb = pipeline.render(rays, features, strategy, cfg.seed);
        const int n = rb.samples_per_ray;
        for (int r = 0; r < n_rays; ++r) {
            for (int i = 0; i < n; ++i) {
                csv << r << ',' << format_double(rb.z[static_cast<size_t>(r) * n + i]) << ','
                    << format_double(rb.sigma[r * n + i]) << ',' << tag << '\n';
            }
        }
    }
    manifest.finalize("ok");
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& gt_dir, const std::string& rendered_dir) {
    if (g.out_dir.empty()) throw ConfigError("--out is required");
    fs::create_directories(g.out_dir);
    auto list_pngs = [](const std::string& dir) {
        std::set<std::string> names;
        if (fs::exists(dir)) {
            for (const auto& e : fs::directory_iterator(dir)) {
                if (e.path().extension() == ".png") names.insert(e.path().filename().string());
            }
        }
        return names;
    };
    const auto gt_names = list_pngs(gt_dir);
    const auto rd_names = list_pngs(rendered_dir);

    int warnings = 0;
    for (const auto& n : gt_names) {
        if (!rd_names.count(n)) {
            std::cerr << "warning: unpaired ground-truth image skipped: " << n << "\n";
            ++warnings;
        }
    }
    for (const auto& n : rd_names) {
        if (!gt_names.count(n)) {
            std::cerr << "warning: unpaired rendered image skipped: " << n << "\n";
            ++warnings;
        }
    }

    std::ofstream csv(fs::path(g.out_dir) / "metrics.csv", std::ios::trunc);
    csv << "image,psnr,ssim,hfiv\n";
    double sp = 0.0, ss = 0.0, sh = 0.0;
    int count = 0;
    for (const auto& n : gt_names) {
        if (!rd_names.count(n)) continue;
        const Tensor a = load_png((fs::path(gt_dir) / n).string());
        const Tensor b = load_png((fs::path(rendered_dir) / n).string());
        const MetricReport m = evaluate_pair(a, b);
        csv << n << ',' << format_double(m.psnr) << ',' << format_double(m.ssim) << ','
            << format_double(m.hfiv) << '\n';
        sp += m.psnr;
        ss += m.ssim;
        sh += m.hfiv;
        ++count;
    }
    if (count > 0) {
        csv << "mean," << format_double(sp / count) << ',' << format_double(ss / count) << ','
            << format_double(sh / count) << '\n';
    } else {
        std::cerr << "warning: no matched image pairs\n";
        ++warnings;
    }
    if (warnings > 0) std::cerr << warnings << " warning(s)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"wavelet-domain multi-view renderer"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "global RNG seed")->each([&](const std::string&) {
        g.seed_set = true;
    });
    app.add_option("--config", g.config_path, "config JSON path");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--threads", g.threads, "worker thread count");

    std::string image_path, checkpoint, cameras, gt_dir, rendered_dir;
    bool reconstruct = false, dry_run = false;
    int n_rays = 128;

    CLI::App* dec = app.add_subcommand("decompose", "wavelet-decompose a PNG into PFM bands");
    dec->add_option("image", image_path, "input PNG")->required();
    dec->add_flag("--reconstruct", reconstruct, "also write the reconstructed PNG");

    CLI::App* tr = app.add_subcommand("train", "train on a synthetic or external scene");
    tr->add_flag("--dry-run", dry_run, "validate the config and exit");

    CLI::App* rd = app.add_subcommand("render", "render target views from a checkpoint");
    rd->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();
    rd->add_option("--cameras", cameras, "scene camera JSON")->required();

    CLI::App* st = app.add_subcommand("sample-stats", "per-sample density by sampling strategy");
    st->add_option("--checkpoint", checkpoint, "parameter checkpoint");
    st->add_option("--rays", n_rays, "ray count");

    CLI::App* ev = app.add_subcommand("eval", "PSNR/SSIM/HFIV over paired image directories");
    ev->add_option("--gt", gt_dir, "ground-truth directory")->required();
    ev->add_option("--rendered", rendered_dir, "rendered directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (dec->parsed()) return cmd_decompose(g, image_path, reconstruct);
        if (tr->parsed()) return cmd_train(g, dry_run);
        if (rd->parsed()) return cmd_render(g, checkpoint, cameras);
        if (st->parsed()) return cmd_sample_stats(g, checkpoint, n_rays);
        if (ev->parsed()) return cmd_eval(g, gt_dir, rendered_dir);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
