#pragma once

#include <string>
#include <vector>

#include "wavenerf/camera.hpp"
#include "wavenerf/tensor.hpp"

namespace wavenerf {

// 8-bit PNG; values scale to [0,1] on load (gray and RGBA inputs are
// expanded/truncated to RGB). Saving clamps to [0,1] and rounds.
Tensor load_png(const std::string& path);              // [3,H,W]
void save_png(const std::string& path, const Tensor& image);

// Portable float map, little-endian, scale -1.0, rows bottom-up. One or
// three channels; round-trips float64 payloads through float32 storage.
void save_pfm(const std::string& path, const Tensor& map);  // [1|3,H,W]
Tensor load_pfm(const std::string& path);

// Shortest round-trip decimal formatting; keeps logs bit-stable.
std::string format_double(double v);

// Camera scene document: {"views":[{"K":[9],"R":[9],"t":[3],"near":..,
// "far":..,"image":"path.png","role":"source|target"}]}, matrices
// row-major. Image paths resolve relative to the JSON file; entries
// without an image stay undefined. Role defaults: first n_sources_hint
// entries are sources when no role keys are present.
struct SceneDocument {
    std::vector<CameraView> views;
    std::vector<std::string> roles;  // "source" | "target" | "heldout"
};

SceneDocument load_scene_document(const std::string& path, bool load_images = true);
void save_scene_document(const std::string& path, const std::vector<CameraView>& views,
                         const std::vector<std::string>& roles,
                         const std::vector<std::string>& image_files);

// Run manifest: written once before work starts, finalized on exit.
struct RunManifest {
    std::string command;
    std::string config_path;
    uint64_t seed = 0;
    std::string code_version;
    std::string out_dir;
    double wall_seconds = 0.0;
    std::string status = "running";
    std::vector<std::pair<std::string, std::string>> extra;
};

void write_manifest(const std::string& out_dir, const RunManifest& manifest);

inline constexpr const char* kCodeVersion = "0.1.0";

}  // namespace wavenerf
