#pragma once

#include <Eigen/Dense>
#include <vector>

#include "wavenerf/tensor.hpp"

namespace wavenerf {

// Posed input or target view. Pixel convention used throughout: integer
// image coordinates are pixel centers, so K maps camera space to grid
// coordinates that index feature maps directly.
struct CameraView {
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();  // intrinsics, pixels
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // world-to-camera
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    Tensor image;  // [C,H,W] linear values in [0,1]; may be undefined for targets
    double near = 0.0;
    double far = 0.0;
    int width = 0;
    int height = 0;

    // Checks R orthonormality (1e-9), det(R) == +1, K normalization and the
    // depth range; throws GeometryError on violation.
    void validate() const;

    Eigen::Vector3d center() const { return -R.transpose() * t; }
};

struct Projection {
    double u = 0.0, v = 0.0;  // pixel coordinates (x = column, y = row)
    double depth = 0.0;       // camera-frame z
    bool in_front = false;
};

Projection project_point(const CameraView& cam, const Eigen::Vector3d& x_world);

// Pixel (u, v) at camera depth z back to world space.
Eigen::Vector3d backproject_pixel(const CameraView& cam, double u, double v, double depth);

struct Ray {
    Eigen::Vector3d origin = Eigen::Vector3d::Zero();
    Eigen::Vector3d dir = Eigen::Vector3d::UnitZ();  // unit length
    double near = 0.0, far = 0.0;
    int row = 0, col = 0;  // target pixel
};

Ray camera_ray(const CameraView& cam, int row, int col);

// Full-resolution pixel coordinate mapped to a map at `scale` (0.5 means
// half resolution), preserving pixel-center alignment.
inline double scale_coord(double x_full, double scale) {
    return (x_full + 0.5) * scale - 0.5;
}

}  // namespace wavenerf
