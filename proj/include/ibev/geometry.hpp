#pragma once

// Rigid-pose algebra, pinhole projection and differentiable bilinear feature
// gathering. Pose matrices are 4x4 row-major doubles regardless of the tensor
// scalar type; point sets are differentiable [P x 3] tensors tagged with the
// frame they live in.

#include <array>
#include <cmath>
#include <cstdint>

#include "ibev/tensor.hpp"

namespace ibev {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

struct Mat4 {
    // Row-major. m[r*4+c].
    std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

    static Mat4 identity() { return {}; }

    static Mat4 translation(double x, double y, double z) {
        Mat4 t;
        t.m[3] = x;
        t.m[7] = y;
        t.m[11] = z;
        return t;
    }

    static Mat4 rotation_z(double rad) {
        Mat4 t;
        const double c = std::cos(rad), s = std::sin(rad);
        t.m[0] = c;
        t.m[1] = -s;
        t.m[4] = s;
        t.m[5] = c;
        return t;
    }

    static Mat4 rotation_x(double rad) {
        Mat4 t;
        const double c = std::cos(rad), s = std::sin(rad);
        t.m[5] = c;
        t.m[6] = -s;
        t.m[9] = s;
        t.m[10] = c;
        return t;
    }

    static Mat4 rotation_y(double rad) {
        Mat4 t;
        const double c = std::cos(rad), s = std::sin(rad);
        t.m[0] = c;
        t.m[2] = s;
        t.m[8] = -s;
        t.m[10] = c;
        return t;
    }

    Mat4 operator*(const Mat4& o) const {
        Mat4 r;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double acc = 0;
                for (int k = 0; k < 4; ++k) acc += m[i * 4 + k] * o.m[k * 4 + j];
                r.m[i * 4 + j] = acc;
            }
        return r;
    }

    Vec3 apply(const Vec3& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
    }

    Vec3 apply_rotation(const Vec3& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z, m[4] * p.x + m[5] * p.y + m[6] * p.z,
                m[8] * p.x + m[9] * p.y + m[10] * p.z};
    }

    Vec3 translation_part() const { return {m[3], m[7], m[11]}; }

    bool is_rigid(double tol = 1e-9) const {
        // R^T R = I, det R = +1, last row [0 0 0 1].
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double dot = 0;
                for (int k = 0; k < 3; ++k) dot += m[k * 4 + i] * m[k * 4 + j];
                if (std::fabs(dot - (i == j ? 1.0 : 0.0)) > tol) return false;
            }
        const double det = m[0] * (m[5] * m[10] - m[6] * m[9]) -
                           m[1] * (m[4] * m[10] - m[6] * m[8]) +
                           m[2] * (m[4] * m[9] - m[5] * m[8]);
        if (std::fabs(det - 1.0) > tol) return false;
        return m[12] == 0 && m[13] == 0 && m[14] == 0 && m[15] == 1;
    }

    Mat4 inverse_rigid() const {
        if (!is_rigid(1e-6)) throw ConfigError("pose error: matrix is not a rigid transform");
        Mat4 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i * 4 + j] = m[j * 4 + i];
        const Vec3 t = translation_part();
        r.m[3] = -(r.m[0] * t.x + r.m[1] * t.y + r.m[2] * t.z);
        r.m[7] = -(r.m[4] * t.x + r.m[5] * t.y + r.m[6] * t.z);
        r.m[11] = -(r.m[8] * t.x + r.m[9] * t.y + r.m[10] * t.z);
        return r;
    }
};

// Rigid transform locating the ego frame: matrix maps ego -> world.
struct EgoPose {
    Mat4 matrix;

    void validate() const {
        if (!matrix.is_rigid()) throw ConfigError("pose error: EgoPose matrix is not rigid");
    }

    EgoPose inverse() const { return {matrix.inverse_rigid()}; }
};

struct CameraModel {
    double fx = 0, fy = 0, cx = 0, cy = 0;  // pixels
    Mat4 extrinsics;                        // ego -> camera
    int width = 0, height = 0;

    void validate() const {
        if (fx <= 0 || fy <= 0) throw ConfigError("camera: focal lengths must be positive");
        if (cx < 0 || cx >= width || cy < 0 || cy >= height)
            throw ConfigError("camera: principal point outside image");
        if (!extrinsics.is_rigid(1e-6)) throw ConfigError("camera: extrinsics not rigid");
    }
};

enum class PointFrame { CurrentEgo, PastEgo, Camera };

template <class T>
struct Point3Set {
    Tensor<T> pts;  // [P x 3]
    PointFrame frame = PointFrame::CurrentEgo;
};

inline constexpr double kZNear = 0.1;  // meters

// ---------------------------------------------------------------------------
// Differentiable point transform by a constant rigid matrix.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> apply_rigid(const Tensor<T>& pts, const Mat4& m) {
    if (pts.rank() != 2 || pts.dim(1) != 3) throw ShapeError("apply_rigid: need [P x 3]");
    const int64_t p = pts.dim(0);
    std::vector<T> out(static_cast<size_t>(p * 3));
    const auto& v = pts.data();
    for (int64_t i = 0; i < p; ++i) {
        const Vec3 q = m.apply({static_cast<double>(v[i * 3]), static_cast<double>(v[i * 3 + 1]),
                                static_cast<double>(v[i * 3 + 2])});
        out[i * 3] = static_cast<T>(q.x);
        out[i * 3 + 1] = static_cast<T>(q.y);
        out[i * 3 + 2] = static_cast<T>(q.z);
    }
    auto backward = [pts, m, p](typename Tensor<T>::Node& node) {
        if (!pts.requires_grad()) return;
        Tensor<T> pm = pts;
        auto& g = pm.grad();
        const auto& go = node.grad;
        for (int64_t i = 0; i < p; ++i)
            for (int j = 0; j < 3; ++j) {
                // dP = R^T dOut
                double acc = 0;
                for (int r = 0; r < 3; ++r)
                    acc += m.m[r * 4 + j] * static_cast<double>(go[i * 3 + r]);
                g[i * 3 + j] += static_cast<T>(acc);
            }
    };
    return Tensor<T>::create("apply_rigid", {p, 3}, std::move(out), {pts}, std::move(backward));
}

// Eq-style frame alignment: returns (e_past * e_cur^-1) P, applied verbatim.
// With poses stored ego->world this composition maps current-frame points
// into the past frame when called with inverted poses; the temporal gather
// does exactly that (the alternative world->ego reading folds the inverses
// into the stored matrices instead).
template <class T>
Point3Set<T> transform_to_frame(const Point3Set<T>& points, const EgoPose& e_past,
                                const EgoPose& e_cur) {
    e_past.validate();
    e_cur.validate();
    const Mat4 m = e_past.matrix * e_cur.matrix.inverse_rigid();
    return {apply_rigid(points.pts, m), points.frame};
}

// ---------------------------------------------------------------------------
// Pinhole projection of camera-frame points. Valid rows have depth > z_near
// and land inside image bounds; invalid rows get uv = 0 and no gradient.
// ---------------------------------------------------------------------------
template <class T>
struct Projection {
    Tensor<T> uv;                 // [P x 2]
    std::vector<uint8_t> valid;   // one flag per point
};

template <class T>
Projection<T> pinhole_project(const Tensor<T>& cam_pts, const CameraModel& cam,
                              double z_near = kZNear) {
    if (cam_pts.rank() != 2 || cam_pts.dim(1) != 3)
        throw ShapeError("pinhole_project: need [P x 3]");
    const int64_t p = cam_pts.dim(0);
    std::vector<T> uv(static_cast<size_t>(p * 2), T(0));
    std::vector<uint8_t> valid(static_cast<size_t>(p), 0);
    const auto& v = cam_pts.data();
    for (int64_t i = 0; i < p; ++i) {
        const double x = v[i * 3], y = v[i * 3 + 1], z = v[i * 3 + 2];
        if (z <= z_near) continue;
        const double u = cam.fx * x / z + cam.cx;
        const double w = cam.fy * y / z + cam.cy;
        if (u < 0 || u > cam.width - 1 || w < 0 || w > cam.height - 1) continue;
        valid[i] = 1;
        uv[i * 2] = static_cast<T>(u);
        uv[i * 2 + 1] = static_cast<T>(w);
    }
    auto backward = [cam_pts, cam, p, valid](typename Tensor<T>::Node& node) {
        if (!cam_pts.requires_grad()) return;
        Tensor<T> pm = cam_pts;
        auto& g = pm.grad();
        const auto& go = node.grad;
        const auto& v2 = cam_pts.data();
        for (int64_t i = 0; i < p; ++i) {
            if (!valid[i]) continue;
            const double x = v2[i * 3], y = v2[i * 3 + 1], z = v2[i * 3 + 2];
            const double gu = go[i * 2], gv = go[i * 2 + 1];
            g[i * 3] += static_cast<T>(gu * cam.fx / z);
            g[i * 3 + 1] += static_cast<T>(gv * cam.fy / z);
            g[i * 3 + 2] += static_cast<T>(-(gu * cam.fx * x + gv * cam.fy * y) / (z * z));
        }
    };
    Projection<T> out;
    out.valid = valid;
    out.uv = Tensor<T>::create("pinhole_project", {p, 2}, std::move(uv), {cam_pts},
                               std::move(backward));
    return out;
}

// Projects ego-frame points into a camera view.
template <class T>
Projection<T> project_to_view(const Point3Set<T>& points, const CameraModel& cam,
                              double z_near = kZNear) {
    cam.validate();
    Tensor<T> cam_pts = apply_rigid(points.pts, cam.extrinsics);
    return pinhole_project(cam_pts, cam, z_near);
}

// ---------------------------------------------------------------------------
// Bilinear gather from a [h x w x c] feature map at continuous (u, v) pixel
// coordinates, border-clamped. Rows with valid == 0 produce zeros and block
// all gradients. Differentiable both to the map and to the coordinates.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> bilinear_gather(const Tensor<T>& map, const Tensor<T>& uv,
                          const std::vector<uint8_t>& valid) {
    if (map.rank() != 3) throw ShapeError("bilinear_gather: map must be [h x w x c]");
    if (map.dim(0) < 2 || map.dim(1) < 2)
        throw ShapeError("bilinear_gather: map extents must be at least 2x2");
    if (uv.rank() != 2 || uv.dim(1) != 2) throw ShapeError("bilinear_gather: uv must be [P x 2]");
    const int64_t h = map.dim(0), w = map.dim(1), c = map.dim(2), p = uv.dim(0);
    if (static_cast<int64_t>(valid.size()) != p)
        throw ShapeError("bilinear_gather: valid mask length mismatch");

    struct Corner {
        int64_t y0, x0, y1, x1;
        T fu, fv;  // fractional offsets after clamping
    };
    std::vector<Corner> corners(static_cast<size_t>(p));
    std::vector<T> out(static_cast<size_t>(p * c), T(0));
    const auto& mv = map.data();
    const auto& uvv = uv.data();
    for (int64_t i = 0; i < p; ++i) {
        if (!valid[i]) continue;
        double u = static_cast<double>(uvv[i * 2]);
        double v = static_cast<double>(uvv[i * 2 + 1]);
        u = std::clamp(u, 0.0, static_cast<double>(w - 1));
        v = std::clamp(v, 0.0, static_cast<double>(h - 1));
        const int64_t x0 = static_cast<int64_t>(std::floor(u));
        const int64_t y0 = static_cast<int64_t>(std::floor(v));
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const T fu = static_cast<T>(u - static_cast<double>(x0));
        const T fv = static_cast<T>(v - static_cast<double>(y0));
        corners[i] = {y0, x0, y1, x1, fu, fv};
        const T w00 = (T(1) - fu) * (T(1) - fv);
        const T w10 = fu * (T(1) - fv);
        const T w01 = (T(1) - fu) * fv;
        const T w11 = fu * fv;
        const T* p00 = mv.data() + (y0 * w + x0) * c;
        const T* p10 = mv.data() + (y0 * w + x1) * c;
        const T* p01 = mv.data() + (y1 * w + x0) * c;
        const T* p11 = mv.data() + (y1 * w + x1) * c;
        T* o = out.data() + i * c;
        for (int64_t k = 0; k < c; ++k)
            o[k] = w00 * p00[k] + w10 * p10[k] + w01 * p01[k] + w11 * p11[k];
    }
    auto backward = [map, uv, valid, corners, h, w, c, p](typename Tensor<T>::Node& node) {
        const auto& go = node.grad;
        const auto& mv2 = map.data();
        Tensor<T> mm = map, um = uv;
        T* gm = map.requires_grad() ? mm.grad().data() : nullptr;
        T* gu = uv.requires_grad() ? um.grad().data() : nullptr;
        for (int64_t i = 0; i < p; ++i) {
            if (!valid[i]) continue;
            const Corner& cr = corners[i];
            const T fu = cr.fu, fv = cr.fv;
            const int64_t i00 = (cr.y0 * w + cr.x0) * c;
            const int64_t i10 = (cr.y0 * w + cr.x1) * c;
            const int64_t i01 = (cr.y1 * w + cr.x0) * c;
            const int64_t i11 = (cr.y1 * w + cr.x1) * c;
            const T* g = go.data() + i * c;
            if (gm) {
                const T w00 = (T(1) - fu) * (T(1) - fv);
                const T w10 = fu * (T(1) - fv);
                const T w01 = (T(1) - fu) * fv;
                const T w11 = fu * fv;
                for (int64_t k = 0; k < c; ++k) {
                    gm[i00 + k] += w00 * g[k];
                    gm[i10 + k] += w10 * g[k];
                    gm[i01 + k] += w01 * g[k];
                    gm[i11 + k] += w11 * g[k];
                }
            }
            if (gu) {
                // d/du = (1-fv)(p10-p00) + fv(p11-p01); d/dv symmetric.
                // Inside the clamp region du*/du = 1, outside 0 (flat).
                const auto& uvv2 = uv.data();
                const double uo = uvv2[i * 2], vo = uvv2[i * 2 + 1];
                const bool u_active = uo > 0.0 && uo < static_cast<double>(w - 1);
                const bool v_active = vo > 0.0 && vo < static_cast<double>(h - 1);
                T du = T(0), dv = T(0);
                for (int64_t k = 0; k < c; ++k) {
                    const T a = mv2[i00 + k], b = mv2[i10 + k];
                    const T cc = mv2[i01 + k], d = mv2[i11 + k];
                    du += g[k] * ((T(1) - fv) * (b - a) + fv * (d - cc));
                    dv += g[k] * ((T(1) - fu) * (cc - a) + fu * (d - b));
                }
                if (u_active) gu[i * 2] += du;
                if (v_active) gu[i * 2 + 1] += dv;
            }
        }
    };
    return Tensor<T>::create("bilinear_gather", {p, c}, std::move(out), {map, uv},
                             std::move(backward));
}

// Single-point convenience form: samples one (u, v) location.
template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& uv) {
    Tensor<T> row = bilinear_gather(map, uv, {1});
    return reshape(row, {map.dim(2)});
}

}  // namespace ibev
