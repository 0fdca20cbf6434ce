#pragma once

// Poincare ball primitives. The space with curvature -c is the open ball of
// radius 1/sqrt(c); every producing op re-projects so that
// sqrt(c)*||x|| <= 1 - eps stays true (eps = 1e-5 by default, the point at
// which the conformal factor and artanh start losing double precision).
//
// The kernels are free functions templated on the scalar so they can run in
// long double for oracle cross-checks; BallPoint/TangentVector wrap the
// double instantiation with validated curvature/dimension.

#include <Eigen/Dense>

#include <cmath>

#include "codonball/common.hpp"

namespace codonball::ball {

constexpr double kBoundaryEps = 1e-5;

template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
S conformal_factor(const VecX<S>& x, S c) {
    return S(2) / (S(1) - c * x.squaredNorm());
}

template <class S>
VecX<S> project_to_ball(const VecX<S>& v, S c, S eps = S(kBoundaryEps)) {
    if (!v.allFinite()) throw ValidationError("project_to_ball: non-finite input");
    const S max_norm = (S(1) - eps) / std::sqrt(c);
    const S n = v.norm();
    if (n <= max_norm) return v;
    return v * (max_norm / n);
}

template <class S>
VecX<S> mobius_add(const VecX<S>& x, const VecX<S>& y, S c, S eps = S(kBoundaryEps)) {
    const S xy = x.dot(y);
    const S x2 = x.squaredNorm();
    const S y2 = y.squaredNorm();
    const S den = S(1) + S(2) * c * xy + c * c * x2 * y2;
    VecX<S> out = ((S(1) + S(2) * c * xy + c * y2) * x + (S(1) - c * x2) * y) / den;
    return project_to_ball(out, c, eps);
}

template <class S>
S dist(const VecX<S>& x, const VecX<S>& y, S c) {
    const S x2 = x.squaredNorm();
    const S y2 = y.squaredNorm();
    const S d2 = (x - y).squaredNorm();
    S u = S(1) + S(2) * c * d2 / ((S(1) - c * x2) * (S(1) - c * y2));
    if (u < S(1)) u = S(1);
    return std::acosh(u) / std::sqrt(c);
}

// exp with the conformal scaling of Eq-style tangent parameterization:
// d(x, exp_map(x, v)) == conformal_factor(x) * ||v|| exactly.
template <class S>
VecX<S> exp_map(const VecX<S>& x, const VecX<S>& v, S c, S eps = S(kBoundaryEps)) {
    const S vn = v.norm();
    if (vn == S(0)) return x;
    const S sc = std::sqrt(c);
    const S lam = conformal_factor(x, c);
    VecX<S> step = std::tanh(sc * lam * vn / S(2)) * v / (sc * vn);
    return mobius_add(x, step, c, eps);
}

template <class S>
VecX<S> log_map(const VecX<S>& x, const VecX<S>& y, S c) {
    if (x == y) return VecX<S>::Zero(x.size());
    VecX<S> w = mobius_add<S>(-x, y, c, S(0));
    const S wn = w.norm();
    if (wn == S(0)) return VecX<S>::Zero(x.size());
    const S sc = std::sqrt(c);
    const S lam = conformal_factor(x, c);
    S arg = sc * wn;
    const S edge = S(1) - S(1e-12);
    if (arg > edge) arg = edge;
    return (S(2) / (sc * lam)) * std::atanh(arg) * w / wn;
}

// --- validated double wrappers ---

struct BallPoint {
    Eigen::VectorXd coords;
    double curvature = 1.0;

    BallPoint() = default;
    BallPoint(Eigen::VectorXd v, double c, double eps = kBoundaryEps)
        : coords(project_to_ball<double>(std::move(v), c, eps)), curvature(c) {
        if (!(c > 0)) throw ValidationError("BallPoint: curvature must be positive");
    }

    static BallPoint origin(Eigen::Index dim, double c) {
        return BallPoint(Eigen::VectorXd::Zero(dim), c);
    }

    Eigen::Index dim() const { return coords.size(); }
    double norm() const { return coords.norm(); }
};

struct TangentVector {
    Eigen::VectorXd coords;
    BallPoint base;
};

inline void check_pair(const BallPoint& x, const BallPoint& y, const char* op) {
    if (x.dim() != y.dim())
        throw ValidationError(std::string(op) + ": dimension mismatch " +
                              std::to_string(x.dim()) + " vs " + std::to_string(y.dim()));
    if (x.curvature != y.curvature)
        throw ValidationError(std::string(op) + ": curvature mismatch");
}

inline double conformal_factor(const BallPoint& x) {
    return conformal_factor<double>(x.coords, x.curvature);
}

inline BallPoint mobius_add(const BallPoint& x, const BallPoint& y, double eps = kBoundaryEps) {
    check_pair(x, y, "mobius_add");
    return BallPoint(mobius_add<double>(x.coords, y.coords, x.curvature, eps), x.curvature, eps);
}

inline double dist(const BallPoint& x, const BallPoint& y) {
    check_pair(x, y, "dist");
    return dist<double>(x.coords, y.coords, x.curvature);
}

inline BallPoint exp_map(const BallPoint& x, const TangentVector& v, double eps = kBoundaryEps) {
    check_pair(x, v.base, "exp_map");
    if (v.base.coords != x.coords) throw ValidationError("exp_map: tangent vector based elsewhere");
    return BallPoint(exp_map<double>(x.coords, v.coords, x.curvature, eps), x.curvature, eps);
}

inline TangentVector log_map(const BallPoint& x, const BallPoint& y) {
    check_pair(x, y, "log_map");
    return TangentVector{log_map<double>(x.coords, y.coords, x.curvature), x};
}

} // namespace codonball::ball
