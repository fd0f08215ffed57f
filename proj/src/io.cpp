#include "wavenerf/io.hpp"

#include <png.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "wavenerf/errors.hpp"

namespace wavenerf {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("failed to decode PNG: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    std::vector<double> data(static_cast<size_t>(3) * h * w);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                data[(static_cast<size_t>(c) * h + y) * w + x] = row[3 * x + c] / 255.0;
            }
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return Tensor::from_data({3, h, w}, std::move(data));
}

void save_png(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw DimensionError("save_png: image must be [3,H,W], got " + shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open image for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("failed to encode PNG: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    const double* d = image.raw();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = d[(static_cast<size_t>(c) * h + y) * w + x];
                row[3 * x + c] = static_cast<png_byte>(
                    std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

void save_pfm(const std::string& path, const Tensor& map) {
    if (map.ndim() != 3 || (map.dim(0) != 1 && map.dim(0) != 3)) {
        throw DimensionError("save_pfm: map must be [1|3,H,W], got " + shape_str(map.shape()));
    }
    static_assert(std::endian::native == std::endian::little);
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open PFM for writing: " + path);
    os << (c == 3 ? "PF" : "Pf") << "\n" << w << " " << h << "\n" << "-1.0" << "\n";
    const double* d = map.raw();
    std::vector<float> row(static_cast<size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {  // bottom-up scanlines
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                row[static_cast<size_t>(x) * c + ch] =
                    static_cast<float>(d[(static_cast<size_t>(ch) * h + y) * w + x]);
            }
        }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failure on PFM: " + path);
}

Tensor load_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open PFM: " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    is >> magic >> w >> h >> scale;
    if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) {
        throw IoError("malformed PFM header: " + path);
    }
    if (scale > 0.0) throw IoError("big-endian PFM is not supported: " + path);
    is.get();  // single whitespace after the header
    const int c = magic == "PF" ? 3 : 1;
    std::vector<double> data(static_cast<size_t>(c) * h * w);
    std::vector<float> row(static_cast<size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (is.gcount() != static_cast<std::streamsize>(row.size() * sizeof(float))) {
            throw IoError("truncated PFM payload: " + path);
        }
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                data[(static_cast<size_t>(ch) * h + y) * w + x] = row[static_cast<size_t>(x) * c + ch];
            }
        }
    }
    return Tensor::from_data({c, h, w}, std::move(data));
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

SceneDocument load_scene_document(const std::string& path, bool load_images) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open scene file: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed scene JSON " + path + ": " + e.what());
    }
    if (!j.contains("views") || !j["views"].is_array()) {
        throw IoError("scene JSON missing views array: " + path);
    }
    SceneDocument doc;
    const fs::path base = fs::path(path).parent_path();
    for (const auto& jv : j["views"]) {
        CameraView cam;
        const auto k = jv.at("K").get<std::vector<double>>();
        const auto r = jv.at("R").get<std::vector<double>>();
        const auto t = jv.at("t").get<std::vector<double>>();
        if (k.size() != 9 || r.size() != 9 || t.size() != 3) {
            throw IoError("camera matrices must be 9/9/3 floats: " + path);
        }
        for (int i = 0; i < 3; ++i) {
            for (int c = 0; c < 3; ++c) {
                cam.K(i, c) = k[static_cast<size_t>(3 * i + c)];
                cam.R(i, c) = r[static_cast<size_t>(3 * i + c)];
            }
            cam.t(i) = t[static_cast<size_t>(i)];
        }
        cam.near = jv.at("near").get<double>();
        cam.far = jv.at("far").get<double>();
        if (jv.contains("width")) cam.width = jv["width"].get<int>();
        if (jv.contains("height")) cam.height = jv["height"].get<int>();
        if (jv.contains("image") && !jv["image"].is_null()) {
            const std::string img = (base / jv["image"].get<std::string>()).string();
            if (load_images) {
                cam.image = load_png(img);
                cam.height = cam.image.dim(1);
                cam.width = cam.image.dim(2);
            }
        }
        doc.views.push_back(std::move(cam));
        doc.roles.push_back(jv.value("role", std::string("")));
    }
    // Default role split: entries with images are sources, the rest targets.
    for (size_t i = 0; i < doc.roles.size(); ++i) {
        if (doc.roles[i].empty()) {
            doc.roles[i] = doc.views[i].image.defined() ? "source" : "target";
        }
    }
    return doc;
}

void save_scene_document(const std::string& path, const std::vector<CameraView>& views,
                         const std::vector<std::string>& roles,
                         const std::vector<std::string>& image_files) {
    json j;
    j["views"] = json::array();
    for (size_t i = 0; i < views.size(); ++i) {
        const CameraView& cam = views[i];
        json jv;
        std::vector<double> k(9), r(9), t(3);
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
                k[static_cast<size_t>(3 * a + b)] = cam.K(a, b);
                r[static_cast<size_t>(3 * a + b)] = cam.R(a, b);
            }
            t[static_cast<size_t>(a)] = cam.t(a);
        }
        jv["K"] = k;
        jv["R"] = r;
        jv["t"] = t;
        jv["near"] = cam.near;
        jv["far"] = cam.far;
        jv["width"] = cam.width;
        jv["height"] = cam.height;
        if (i < roles.size() && !roles[i].empty()) jv["role"] = roles[i];
        if (i < image_files.size() && !image_files[i].empty()) jv["image"] = image_files[i];
        j["views"].push_back(std::move(jv));
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write scene file: " + path);
    os << j.dump(2) << "\n";
}

void write_manifest(const std::string& out_dir, const RunManifest& manifest) {
    json j;
    j["command"] = manifest.command;
    j["config"] = manifest.config_path;
    j["seed"] = manifest.seed;
    j["code_version"] = manifest.code_version.empty() ? kCodeVersion : manifest.code_version;
    j["out_dir"] = manifest.out_dir;
    j["wall_seconds"] = manifest.wall_seconds;
    j["status"] = manifest.status;
    for (const auto& [k, v] : manifest.extra) j[k] = v;
    const fs::path p = fs::path(out_dir) / "manifest.json";
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + p.string());
    os << j.dump(2) << "\n";
}

}  // namespace wavenerf
