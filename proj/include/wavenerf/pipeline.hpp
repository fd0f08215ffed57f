#pragma once

#include <string>
#include <vector>

#include "wavenerf/checkpoint.hpp"
#include "wavenerf/config.hpp"
#include "wavenerf/mvs.hpp"
#include "wavenerf/renderer.hpp"

namespace wavenerf {

// Owns every learned parameter and wires the WMVS features into the
// renderer. One instance per process; construction is deterministic in
// (config, seed).
struct Pipeline {
    Config cfg;
    ParamStore params;
    FeatureExtractorParams fx;
    RendererParams rd;

    static Pipeline create(const Config& cfg);

    SceneFeatures build_features(const std::vector<CameraView>& sources) const;

    RenderBatch render(const std::vector<Ray>& rays, const SceneFeatures& features,
                       SamplingStrategy strategy, uint64_t seed,
                       const std::vector<SampleSet>* frozen = nullptr) const;

    void save(const std::string& path) const { save_checkpoint(path, params); }
    void load(const std::string& path) { load_checkpoint(path, params); }
};

}  // namespace wavenerf
