#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace wavenerf {

// Feature extractor and renderer widths.
struct ModelConfig {
    std::array<int, 3> spatial_channels = {8, 16, 32};  // f_s^(0..2)
    int freq_channels = 16;                             // f_w
    int latent_channels = 8;                            // IWB outputs f_L^(l)
    int cnn_hidden = 16;
    int token_width = 16;
    int attn_heads = 2;
    int ff_hidden = 32;
    int mlp_hidden = 32;     // view-weight MLPs and LT
    int dir_enc_freqs = 4;   // sinusoidal view-direction encoding
    int image_channels = 3;

    int freq_coeff_width() const { return 6 * image_channels; }  // F = 6C
};

struct VolumeConfig {
    std::array<int, 3> d_spatial = {8, 32, 48};  // planes per cascade level
    int d_freq = 32;
};

struct SamplerConfig {
    int n_coarse = 96;
    int n_fine = 32;
    // Additive floor mass per pdf bin; defaults to 1e-3 of the uniform
    // per-bin mass when < 0.
    double eps_floor = -1.0;

    double eps_floor_value() const {
        return eps_floor >= 0.0 ? eps_floor : 1e-3 / static_cast<double>(n_coarse - 1);
    }
    int n_total() const { return n_coarse + n_fine; }
};

struct SceneSpec {
    int n_spheres = 2;
    int n_boxes = 1;
    double domain_radius = 1.0;
    double texture_freq = 7.0;
    double rig_radius = 4.0;
    double fov_deg = 40.0;
    int image_size = 64;
    int n_sources = 3;  // V
    int n_train_targets = 6;
    int n_heldout = 2;
};

struct TrainConfig {
    int steps = 2000;
    int batch = 512;
    double lr = 5e-4;
    bool cosine_decay = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int checkpoint_every = 0;  // 0: only final
    int log_every = 1;
};

struct Config {
    uint64_t seed = 1;
    int threads = 0;  // 0: hardware concurrency
    std::string scene_file;  // external scene JSON; empty -> synthetic
    ModelConfig model;
    VolumeConfig volumes;
    SamplerConfig sampler;
    SceneSpec scene;
    TrainConfig train;

    void validate() const;  // throws ConfigError naming the offending key
};

// Parses the JSON config document; unknown keys raise ConfigError naming
// the key. Then applies WAVENERF_<SECTION>_<KEY> environment overrides
// (e.g. WAVENERF_TRAIN_STEPS=500).
Config load_config(const std::string& path);
Config config_from_json_text(const std::string& text);
void apply_env_overrides(Config& cfg);
std::string config_to_json(const Config& cfg);

}  // namespace wavenerf
