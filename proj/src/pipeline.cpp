#include "wavenerf/pipeline.hpp"

#include "wavenerf/parallel.hpp"

namespace wavenerf {

Pipeline Pipeline::create(const Config& cfg) {
    cfg.validate();
    if (cfg.threads > 0) set_num_threads(cfg.threads);
    Pipeline p;
    p.cfg = cfg;
    Rng rng = Rng::stream(cfg.seed, {kStreamParamInit});
    p.fx = FeatureExtractorParams::create(p.params, cfg.model, rng);
    p.rd = RendererParams::create(p.params, cfg.model, rng);
    return p;
}

SceneFeatures Pipeline::build_features(const std::vector<CameraView>& sources) const {
    return wmvs(sources, fx, cfg.model, cfg.volumes);
}

RenderBatch Pipeline::render(const std::vector<Ray>& rays, const SceneFeatures& features,
                             SamplingStrategy strategy, uint64_t seed,
                             const std::vector<SampleSet>* frozen) const {
    return render_rays(rays, features, rd, cfg.model, cfg.sampler, strategy, seed, frozen);
}

}  // namespace wavenerf
