#include "wavenerf/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "wavenerf/errors.hpp"

namespace wavenerf {

namespace {

using nlohmann::json;

[[noreturn]] void bad_key(const std::string& section, const std::string& key) {
    throw ConfigError("unknown config key: " + (section.empty() ? key : section + "." + key));
}

template <typename T>
void read_field(const json& j, const std::string& section, const std::string& key, T& out) {
    try {
        out = j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError("invalid value for config key " + section + "." + key);
    }
}

void parse_model(const json& j, ModelConfig& m) {
    for (const auto& [key, val] : j.items()) {
        if (key == "spatial_channels") {
            std::vector<int> v;
            read_field(val, "model", key, v);
            if (v.size() != 3) throw ConfigError("model.spatial_channels must have 3 entries");
            std::copy(v.begin(), v.end(), m.spatial_channels.begin());
        } else if (key == "freq_channels") read_field(val, "model", key, m.freq_channels);
        else if (key == "latent_channels") read_field(val, "model", key, m.latent_channels);
        else if (key == "cnn_hidden") read_field(val, "model", key, m.cnn_hidden);
        else if (key == "token_width") read_field(val, "model", key, m.token_width);
        else if (key == "attn_heads") read_field(val, "model", key, m.attn_heads);
        else if (key == "ff_hidden") read_field(val, "model", key, m.ff_hidden);
        else if (key == "mlp_hidden") read_field(val, "model", key, m.mlp_hidden);
        else if (key == "dir_enc_freqs") read_field(val, "model", key, m.dir_enc_freqs);
        else bad_key("model", key);
    }
}

void parse_volumes(const json& j, VolumeConfig& v) {
    for (const auto& [key, val] : j.items()) {
        if (key == "d_spatial") {
            std::vector<int> d;
            read_field(val, "volumes", key, d);
            if (d.size() != 3) throw ConfigError("volumes.d_spatial must have 3 entries");
            std::copy(d.begin(), d.end(), v.d_spatial.begin());
        } else if (key == "d_freq") read_field(val, "volumes", key, v.d_freq);
        else bad_key("volumes", key);
    }
}

void parse_sampler(const json& j, SamplerConfig& s) {
    for (const auto& [key, val] : j.items()) {
        if (key == "n_coarse") read_field(val, "sampler", key, s.n_coarse);
        else if (key == "n_fine") read_field(val, "sampler", key, s.n_fine);
        else if (key == "eps_floor") read_field(val, "sampler", key, s.eps_floor);
        else bad_key("sampler", key);
    }
}

void parse_scene(const json& j, SceneSpec& s) {
    for (const auto& [key, val] : j.items()) {
        if (key == "n_spheres") read_field(val, "scene", key, s.n_spheres);
        else if (key == "n_boxes") read_field(val, "scene", key, s.n_boxes);
        else if (key == "domain_radius") read_field(val, "scene", key, s.domain_radius);
        else if (key == "texture_freq") read_field(val, "scene", key, s.texture_freq);
        else if (key == "rig_radius") read_field(val, "scene", key, s.rig_radius);
        else if (key == "fov_deg") read_field(val, "scene", key, s.fov_deg);
        else if (key == "image_size") read_field(val, "scene", key, s.image_size);
        else if (key == "n_sources") read_field(val, "scene", key, s.n_sources);
        else if (key == "n_train_targets") read_field(val, "scene", key, s.n_train_targets);
        else if (key == "n_heldout") read_field(val, "scene", key, s.n_heldout);
        else bad_key("scene", key);
    }
}

void parse_train(const json& j, TrainConfig& t) {
    for (const auto& [key, val] : j.items()) {
        if (key == "steps") read_field(val, "train", key, t.steps);
        else if (key == "batch") read_field(val, "train", key, t.batch);
        else if (key == "lr") read_field(val, "train", key, t.lr);
        else if (key == "cosine_decay") read_field(val, "train", key, t.cosine_decay);
        else if (key == "beta1") read_field(val, "train", key, t.beta1);
        else if (key == "beta2") read_field(val, "train", key, t.beta2);
        else if (key == "adam_eps") read_field(val, "train", key, t.adam_eps);
        else if (key == "checkpoint_every") read_field(val, "train", key, t.checkpoint_every);
        else if (key == "log_every") read_field(val, "train", key, t.log_every);
        else bad_key("train", key);
    }
}

}  // namespace

void Config::validate() const {
    if (scene.image_size % 4 != 0 || scene.image_size < 8) {
        throw ConfigError("scene.image_size must be a multiple of 4 and >= 8");
    }
    if (scene.n_sources < 2) throw ConfigError("scene.n_sources must be >= 2");
    if (sampler.n_coarse < 2) throw ConfigError("sampler.n_coarse must be >= 2");
    if (sampler.n_fine < 0) throw ConfigError("sampler.n_fine must be >= 0");
    if (sampler.n_total() % 4 != 0) {
        throw ConfigError("sampler.n_coarse + sampler.n_fine must be divisible by 4");
    }
    for (int d : volumes.d_spatial) {
        if (d < 2) throw ConfigError("volumes.d_spatial entries must be >= 2");
    }
    if (volumes.d_freq < 2) throw ConfigError("volumes.d_freq must be >= 2");
    if (train.steps < 0 || train.batch < 1) {
        throw ConfigError("train.steps must be >= 0 and train.batch >= 1");
    }
    if (model.token_width % model.attn_heads != 0) {
        throw ConfigError("model.token_width must be divisible by model.attn_heads");
    }
    if (scene.n_spheres + scene.n_boxes < 1) {
        throw ConfigError("scene must contain at least one object");
    }
}

Config config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    Config cfg;
    for (const auto& [key, val] : j.items()) {
        if (key == "seed") read_field(val, "", key, cfg.seed);
        else if (key == "threads") read_field(val, "", key, cfg.threads);
        else if (key == "scene_file") read_field(val, "", key, cfg.scene_file);
        else if (key == "model") parse_model(val, cfg.model);
        else if (key == "volumes") parse_volumes(val, cfg.volumes);
        else if (key == "sampler") parse_sampler(val, cfg.sampler);
        else if (key == "scene") parse_scene(val, cfg.scene);
        else if (key == "train") parse_train(val, cfg.train);
        else bad_key("", key);
    }
    return cfg;
}

Config load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    Config cfg = config_from_json_text(ss.str());
    apply_env_overrides(cfg);
    return cfg;
}

void apply_env_overrides(Config& cfg) {
    auto get = [](const char* name) -> const char* { return std::getenv(name); };
    auto as_int = [](const char* name, const char* v) {
        try {
            return std::stoll(v);
        } catch (...) {
            throw ConfigError(std::string("invalid value in env override ") + name);
        }
    };
    auto as_double = [](const char* name, const char* v) {
        try {
            return std::stod(v);
        } catch (...) {
            throw ConfigError(std::string("invalid value in env override ") + name);
        }
    };
    if (const char* v = get("WAVENERF_SEED")) cfg.seed = static_cast<uint64_t>(as_int("WAVENERF_SEED", v));
    if (const char* v = get("WAVENERF_THREADS")) cfg.threads = static_cast<int>(as_int("WAVENERF_THREADS", v));
    if (const char* v = get("WAVENERF_SCENE_FILE")) cfg.scene_file = v;
    if (const char* v = get("WAVENERF_TRAIN_STEPS")) cfg.train.steps = static_cast<int>(as_int("WAVENERF_TRAIN_STEPS", v));
    if (const char* v = get("WAVENERF_TRAIN_BATCH")) cfg.train.batch = static_cast<int>(as_int("WAVENERF_TRAIN_BATCH", v));
    if (const char* v = get("WAVENERF_TRAIN_LR")) cfg.train.lr = as_double("WAVENERF_TRAIN_LR", v);
    if (const char* v = get("WAVENERF_SCENE_IMAGE_SIZE")) cfg.scene.image_size = static_cast<int>(as_int("WAVENERF_SCENE_IMAGE_SIZE", v));
    if (const char* v = get("WAVENERF_SAMPLER_N_COARSE")) cfg.sampler.n_coarse = static_cast<int>(as_int("WAVENERF_SAMPLER_N_COARSE", v));
    if (const char* v = get("WAVENERF_SAMPLER_N_FINE")) cfg.sampler.n_fine = static_cast<int>(as_int("WAVENERF_SAMPLER_N_FINE", v));
}

std::string config_to_json(const Config& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    if (!cfg.scene_file.empty()) j["scene_file"] = cfg.scene_file;
    j["model"] = {
        {"spatial_channels", cfg.model.spatial_channels},
        {"freq_channels", cfg.model.freq_channels},
        {"latent_channels", cfg.model.latent_channels},
        {"cnn_hidden", cfg.model.cnn_hidden},
        {"token_width", cfg.model.token_width},
        {"attn_heads", cfg.model.attn_heads},
        {"ff_hidden", cfg.model.ff_hidden},
        {"mlp_hidden", cfg.model.mlp_hidden},
        {"dir_enc_freqs", cfg.model.dir_enc_freqs},
    };
    j["volumes"] = {{"d_spatial", cfg.volumes.d_spatial}, {"d_freq", cfg.volumes.d_freq}};
    j["sampler"] = {{"n_coarse", cfg.sampler.n_coarse},
                    {"n_fine", cfg.sampler.n_fine},
                    {"eps_floor", cfg.sampler.eps_floor}};
    j["scene"] = {
        {"n_spheres", cfg.scene.n_spheres},
        {"n_boxes", cfg.scene.n_boxes},
        {"domain_radius", cfg.scene.domain_radius},
        {"texture_freq", cfg.scene.texture_freq},
        {"rig_radius", cfg.scene.rig_radius},
        {"fov_deg", cfg.scene.fov_deg},
        {"image_size", cfg.scene.image_size},
        {"n_sources", cfg.scene.n_sources},
        {"n_train_targets", cfg.scene.n_train_targets},
        {"n_heldout", cfg.scene.n_heldout},
    };
    j["train"] = {
        {"steps", cfg.train.steps},
        {"batch", cfg.train.batch},
        {"lr", cfg.train.lr},
        {"cosine_decay", cfg.train.cosine_decay},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"adam_eps", cfg.train.adam_eps},
        {"checkpoint_every", cfg.train.checkpoint_every},
        {"log_every", cfg.train.log_every},
    };
    return j.dump(2);
}

}  // namespace wavenerf
