#pragma once

// Tape-differentiable Poincare ball ops, composed from diff primitives.
// Points are matrix rows: an (m x n) Var is m points of dimension n. The
// closed forms used here (tanh step, acosh distance) keep outputs inside the
// ball for interior inputs, so no projection node is emitted; producers of
// raw vectors must project before entering the tape.

#include "codonball/ball.hpp"
#include "codonball/diff.hpp"

namespace codonball::ball {

using diff::Axis;
using diff::Var;

// (m x 1) squared row norms.
inline Var row_sqnorms(Var x) { return diff::sum(diff::mul(x, x), Axis::Cols); }

// (m x 1) row norms, floored away from zero so divisions stay finite. The
// floor region has zero gradient, matching the removable singularity.
inline Var safe_row_norms(Var x, double floor = 1e-15) {
    return diff::clamp(diff::norm(x, Axis::Cols), floor, std::numeric_limits<double>::infinity());
}

inline Var conformal_factor(Var x, double c) {
    Var one = x.tape->scalar(1.0);
    return diff::div(x.tape->scalar(2.0), diff::sub(one, diff::mul_scalar(row_sqnorms(x), c)));
}

inline Var mobius_add(Var x, Var y, double c) {
    Var xy = diff::sum(diff::mul(x, y), Axis::Cols);
    Var x2 = row_sqnorms(x);
    Var y2 = row_sqnorms(y);
    Var one = x.tape->scalar(1.0);
    Var two_c_xy = diff::mul_scalar(xy, 2.0 * c);
    Var coef_x = diff::add(diff::add(one, two_c_xy), diff::mul_scalar(y2, c));
    Var coef_y = diff::sub(one, diff::mul_scalar(x2, c));
    Var den = diff::add(diff::add(one, two_c_xy), diff::mul_scalar(diff::mul(x2, y2), c * c));
    Var num = diff::add(diff::mul(coef_x, x), diff::mul(coef_y, y));
    return diff::div(num, den);
}

// acosh(u) composed as log(u + sqrt(u^2 - 1)); u is floored just above 1 so
// coincident points give distance ~0 with a zero (clamped) gradient instead
// of a singular one.
inline Var acosh_compose(Var u) {
    Var uc = diff::clamp(u, 1.0 + 1e-15, std::numeric_limits<double>::infinity());
    Var s = diff::sqrt(diff::sub(diff::mul(uc, uc), u.tape->scalar(1.0)));
    return diff::log(diff::add(uc, s));
}

// (m x 1) rowwise distance between paired rows of x and y.
inline Var dist(Var x, Var y, double c) {
    Var d2 = row_sqnorms(diff::sub(x, y));
    Var one = x.tape->scalar(1.0);
    Var fx = diff::sub(one, diff::mul_scalar(row_sqnorms(x), c));
    Var fy = diff::sub(one, diff::mul_scalar(row_sqnorms(y), c));
    Var u = diff::add(one, diff::div(diff::mul_scalar(d2, 2.0 * c), diff::mul(fx, fy)));
    return diff::mul_scalar(acosh_compose(u), 1.0 / std::sqrt(c));
}

// (m x k) distances between every row of z and every row of p.
inline Var pairwise_dist(Var z, Var p, double c) {
    Var g = diff::matmul(z, p, false, true);
    Var z2 = row_sqnorms(z);
    Var p2 = diff::transpose(row_sqnorms(p));
    Var d2 = diff::sub(diff::add(z2, p2), diff::mul_scalar(g, 2.0));
    Var one = z.tape->scalar(1.0);
    Var fz = diff::sub(one, diff::mul_scalar(z2, c));
    Var fp = diff::sub(one, diff::mul_scalar(p2, c));
    Var u = diff::add(one, diff::div(diff::mul_scalar(d2, 2.0 * c), diff::mul(fz, fp)));
    return diff::mul_scalar(acosh_compose(u), 1.0 / std::sqrt(c));
}

inline Var exp_map(Var x, Var v, double c) {
    const double sc = std::sqrt(c);
    Var s = safe_row_norms(v);
    Var lam = conformal_factor(x, c);
    Var t = diff::tanh(diff::mul_scalar(diff::mul(lam, s), sc / 2.0));
    Var step = diff::mul(diff::div(t, diff::mul_scalar(s, sc)), v);
    return mobius_add(x, step, c);
}

inline Var log_map(Var x, Var y, double c) {
    const double sc = std::sqrt(c);
    Var w = mobius_add(diff::neg(x), y, c);
    Var wn = safe_row_norms(w);
    Var lam = conformal_factor(x, c);
    Var scaled = diff::div(diff::artanh(diff::mul_scalar(wn, sc)), diff::mul_scalar(diff::mul(lam, wn), sc / 2.0));
    return diff::mul(scaled, w);
}

// Fast paths for a base point at the origin (the token-projection step).
inline Var exp_map_origin(Var v, double c) {
    const double sc = std::sqrt(c);
    Var s = safe_row_norms(v);
    Var t = diff::tanh(diff::mul_scalar(s, sc));
    return diff::mul(diff::div(t, diff::mul_scalar(s, sc)), v);
}

inline Var log_map_origin(Var y, double c) {
    const double sc = std::sqrt(c);
    Var s = safe_row_norms(y);
    Var t = diff::artanh(diff::mul_scalar(s, sc));
    return diff::mul(diff::div(t, diff::mul_scalar(s, sc)), y);
}

} // namespace codonball::ball
