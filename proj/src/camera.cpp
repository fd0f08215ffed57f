#include "wavenerf/camera.hpp"

#include <cmath>

#include "wavenerf/errors.hpp"

namespace wavenerf {

void CameraView::validate() const {
    const Eigen::Matrix3d rtr = R.transpose() * R;
    if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
        throw GeometryError("camera rotation is not orthonormal");
    }
    if (std::abs(R.determinant() - 1.0) > 1e-9) {
        throw GeometryError("camera rotation determinant is not +1");
    }
    if (std::abs(K(2, 2) - 1.0) > 1e-12 || K(0, 0) <= 0.0 || K(1, 1) <= 0.0) {
        throw GeometryError("intrinsics must have positive focals and K[2,2] == 1");
    }
    if (!(near > 0.0) || !(far > near)) {
        throw GeometryError("depth range requires 0 < near < far");
    }
}

Projection project_point(const CameraView& cam, const Eigen::Vector3d& x_world) {
    const Eigen::Vector3d x_cam = cam.R * x_world + cam.t;
    Projection p;
    p.depth = x_cam.z();
    p.in_front = x_cam.z() > 1e-12;
    if (p.in_front) {
        const Eigen::Vector3d h = cam.K * x_cam;
        p.u = h.x() / h.z();
        p.v = h.y() / h.z();
    }
    return p;
}

Eigen::Vector3d backproject_pixel(const CameraView& cam, double u, double v, double depth) {
    const double det = cam.K.determinant();
    if (std::abs(det) < 1e-12) throw GeometryError("singular intrinsics matrix");
    const Eigen::Vector3d pix(u, v, 1.0);
    const Eigen::Vector3d x_cam = depth * (cam.K.inverse() * pix);
    return cam.R.transpose() * (x_cam - cam.t);
}

Ray camera_ray(const CameraView& cam, int row, int col) {
    const double det = cam.K.determinant();
    if (std::abs(det) < 1e-12) throw GeometryError("singular intrinsics matrix");
    Ray r;
    r.origin = cam.center();
    const Eigen::Vector3d d_cam = cam.K.inverse() * Eigen::Vector3d(col, row, 1.0);
    r.dir = (cam.R.transpose() * d_cam).normalized();
    r.near = cam.near;
    r.far = cam.far;
    r.row = row;
    r.col = col;
    return r;
}

}  // namespace wavenerf
