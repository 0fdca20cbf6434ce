#include "codonball/heads.hpp"

#include <cmath>

#include "codonball/ball.hpp"
#include "codonball/ball_diff.hpp"

namespace codonball::heads {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using diff::Var;

namespace {

double clamp_unit(double v) { return std::min(1.0, std::max(-1.0, v)); }

void check_point_dim(const MatrixXd& x, Eigen::Index want, const char* op) {
    if (x.cols() != want)
        throw ValidationError(std::string(op) + ": expected points of dimension " +
                              std::to_string(want) + ", got " + std::to_string(x.cols()));
}

} // namespace

MatrixXd softmax_rows(const MatrixXd& logits) {
    MatrixXd probs = logits;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::RowVectorXd row = probs.row(i);
        row = (row.array() - row.maxCoeff()).exp();
        probs.row(i) = row / row.sum();
    }
    return probs;
}

MatrixXd hyperbolic_mlr_scores(const MatrixXd& x, const HyperbolicLinearParams& p) {
    p.validate();
    check_point_dim(x, p.Z.cols(), "hyperbolic_mlr_scores");
    const double c = p.curvature;
    const double sc = std::sqrt(c);
    const Eigen::Index m = x.rows(), k = p.Z.rows();
    VectorXd zn = p.Z.rowwise().norm();
    MatrixXd zhat = p.Z.array().colwise() / zn.array();
    MatrixXd dots = x * zhat.transpose();   // (m x k)
    VectorXd ch = (2.0 * sc * p.r.array()).cosh();
    VectorXd sh = (2.0 * sc * p.r.array()).sinh();
    MatrixXd scores(m, k);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double lam = 2.0 / (1.0 - c * x.row(i).squaredNorm());
        for (Eigen::Index j = 0; j < k; ++j) {
            const double a = lam * sc * dots(i, j) * ch(j) - (lam - 1.0) * sh(j);
            scores(i, j) = (2.0 / sc) * zn(j) * std::asinh(a);
        }
    }
    return scores;
}

MatrixXd hyperbolic_fc(const MatrixXd& x, const HyperbolicLinearParams& p) {
    const double c = p.curvature;
    const double sc = std::sqrt(c);
    MatrixXd w = (sc * hyperbolic_mlr_scores(x, p)).array().sinh() / sc;
    MatrixXd out(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const double denom = 1.0 + std::sqrt(1.0 + c * w.row(i).squaredNorm());
        out.row(i) = ball::project_to_ball<double>(VectorXd(w.row(i).transpose() / denom), c).transpose();
    }
    return out;
}

MatrixXd project_tokens(const MatrixXd& h, const HyperbolicLinearParams& fc) {
    check_point_dim(h, fc.Z.cols(), "project_tokens");
    const double c = fc.curvature;
    const double sc = std::sqrt(c);
    MatrixXd x(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        const double n = h.row(i).norm();
        if (n == 0.0) {
            x.row(i).setZero();
        } else {
            x.row(i) = std::tanh(sc * n) / (sc * n) * h.row(i);
        }
    }
    return hyperbolic_fc(x, fc);
}

double half_aperture(const VectorXd& z, const ConeConfig& cfg) {
    cfg.validate();
    const double n = z.norm();
    if (n < cfg.min_radius() - 1e-12)
        throw ValidationError("half_aperture: point radius " + std::to_string(n) +
                              " below the minimum " + std::to_string(cfg.min_radius()));
    const double arg = cfg.K * (1.0 - cfg.curvature * n * n) / (std::sqrt(cfg.curvature) * n);
    return std::asin(clamp_unit(arg));
}

double cone_angle(const VectorXd& x, const VectorXd& y, double curvature) {
    const double nx2 = x.squaredNorm();
    if (nx2 < 1e-30) throw ValidationError("cone_angle: apex at the origin");
    const double dxy = (x - y).norm();
    if (dxy < 1e-15) throw ValidationError("cone_angle: coincident points");
    const double ny2 = y.squaredNorm();
    const double xy = x.dot(y);
    const double num = xy * (1.0 + curvature * nx2) - nx2 * (1.0 + curvature * ny2);
    const double under = std::max(1.0 + curvature * curvature * nx2 * ny2 - 2.0 * curvature * xy, 0.0);
    const double den = std::sqrt(nx2) * dxy * std::sqrt(under);
    if (den < 1e-300) throw ValidationError("cone_angle: degenerate configuration");
    return std::acos(clamp_unit(num / den));
}

double cone_energy(const VectorXd& x, const VectorXd& y, const ConeConfig& cfg) {
    return std::max(0.0, cone_angle(x, y, cfg.curvature) - cfg.eta * half_aperture(x, cfg));
}

HeadOutput proto_logits(const MatrixXd& z, const PrototypeSet& protos, ProtoMode mode, double beta) {
    if (!(beta > 0)) throw ValidationError("proto_logits: beta must be positive");
    protos.validate();
    check_point_dim(z, protos.dim(), "proto_logits");
    const MatrixXd points = protos.points_by_token_id();
    const double c = protos.curvature;
    HeadOutput out;
    out.logits.resize(z.rows(), points.rows());
    if (mode == ProtoMode::Distance) {
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            for (Eigen::Index k = 0; k < points.rows(); ++k)
                out.logits(i, k) = -beta * ball::dist<double>(z.row(i).transpose(),
                                                              points.row(k).transpose(), c);
    } else {
        ConeConfig cfg{protos.cone_k, protos.cone_eta, c};
        for (Eigen::Index k = 0; k < points.rows(); ++k)
            if (points.row(k).norm() < cfg.min_radius())
                throw ValidationError("proto_logits: prototype radius below the cone minimum");
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            for (Eigen::Index k = 0; k < points.rows(); ++k)
                out.logits(i, k) =
                    -beta * cone_energy(points.row(k).transpose(), z.row(i).transpose(), cfg);
    }
    out.probabilities = softmax_rows(out.logits);
    return out;
}

HeadOutput euclidean_mlr(const MatrixXd& h, const MatrixXd& weight, const VectorXd& bias) {
    if (weight.cols() != h.cols() || weight.rows() != bias.size())
        throw ValidationError("euclidean_mlr: weight " + std::to_string(weight.rows()) + "x" +
                              std::to_string(weight.cols()) + " does not match input dimension " +
                              std::to_string(h.cols()));
    HeadOutput out;
    out.logits = h * weight.transpose();
    out.logits.rowwise() += bias.transpose();
    out.probabilities = softmax_rows(out.logits);
    return out;
}

// --- tape versions ---

Var hyperbolic_mlr_scores_tape(Var x, Var z, Var r, double curvature) {
    const double sc = std::sqrt(curvature);
    diff::Tape* t = x.tape;
    Var rn = diff::clamp(diff::norm(z, diff::Axis::Cols), 1e-8,
                         std::numeric_limits<double>::infinity());   // (k x 1)
    Var zhat = diff::div(z, rn);
    Var dots = diff::mul_scalar(diff::matmul(x, zhat, false, true), sc);   // (m x k)
    Var lam = ball::conformal_factor(x, curvature);                       // (m x 1)
    Var two_sc_r = diff::mul_scalar(r, 2.0 * sc);                          // (1 x k)
    Var ch = diff::cosh(two_sc_r);
    Var sh = diff::sinh(two_sc_r);
    Var one = t->scalar(1.0);
    Var inner = diff::sub(diff::mul(diff::mul(lam, dots), ch), diff::mul(diff::sub(lam, one), sh));
    Var rn_row = diff::transpose(rn);   // (1 x k)
    return diff::mul(diff::mul_scalar(rn_row, 2.0 / sc), diff::asinh(inner));
}

Var hyperbolic_fc_tape(Var x, Var z, Var r, double curvature) {
    const double sc = std::sqrt(curvature);
    Var scores = hyperbolic_mlr_scores_tape(x, z, r, curvature);
    Var w = diff::mul_scalar(diff::sinh(diff::mul_scalar(scores, sc)), 1.0 / sc);
    Var wn2 = ball::row_sqnorms(w);
    Var one = x.tape->scalar(1.0);
    Var denom = diff::add(one, diff::sqrt(diff::add(one, diff::mul_scalar(wn2, curvature))));
    return diff::div(w, denom);
}

Var project_tokens_tape(Var h, Var fc_z, Var fc_r, double curvature) {
    return hyperbolic_fc_tape(ball::exp_map_origin(h, curvature), fc_z, fc_r, curvature);
}

Var cone_energy_tape(Var x_rows, Var y_rows, const ConeConfig& cfg) {
    cfg.validate();
    const double c = cfg.curvature;
    diff::Tape* t = x_rows.tape;
    Var one = t->scalar(1.0);
    Var x2 = ball::row_sqnorms(x_rows);
    Var y2 = ball::row_sqnorms(y_rows);
    Var xy = diff::sum(diff::mul(x_rows, y_rows), diff::Axis::Cols);
    Var num = diff::sub(diff::mul(xy, diff::add(one, diff::mul_scalar(x2, c))),
                        diff::mul(x2, diff::add(one, diff::mul_scalar(y2, c))));
    auto positive_sqrt = [&](Var v) {
        return diff::sqrt(diff::clamp(v, 1e-30, std::numeric_limits<double>::infinity()));
    };
    Var dxy = positive_sqrt(ball::row_sqnorms(diff::sub(x_rows, y_rows)));
    Var xn = positive_sqrt(x2);
    Var under = diff::sub(diff::add(one, diff::mul_scalar(diff::mul(x2, y2), c * c)),
                          diff::mul_scalar(xy, 2.0 * c));
    Var den = diff::mul(diff::mul(xn, dxy), positive_sqrt(under));
    Var angle = diff::acos(diff::div(num, den));
    Var aperture_arg =
        diff::div(diff::mul_scalar(diff::sub(one, diff::mul_scalar(x2, c)), cfg.K),
                  diff::mul_scalar(xn, std::sqrt(c)));
    Var aperture = diff::asin(aperture_arg);
    return diff::max0(diff::sub(angle, diff::mul_scalar(aperture, cfg.eta)));
}

DiffHeadOutput proto_logits_tape(Var z, const PrototypeSet& protos, ProtoMode mode, double beta) {
    if (!(beta > 0)) throw ValidationError("proto_logits: beta must be positive");
    protos.validate();
    if (z.cols() != protos.dim())
        throw ValidationError("proto_logits: input dimension " + std::to_string(z.cols()) +
                              " does not match prototypes of dimension " + std::to_string(protos.dim()));
    diff::Tape* t = z.tape;
    const double c = protos.curvature;
    const MatrixXd pts = protos.points_by_token_id();
    Var logits;
    if (mode == ProtoMode::Distance) {
        Var p = t->constant(pts);
        logits = diff::mul_scalar(ball::pairwise_dist(z, p, c), -beta);
    } else {
        ConeConfig cfg{protos.cone_k, protos.cone_eta, c};
        Eigen::RowVectorXd p2 = pts.rowwise().squaredNorm().transpose();
        Eigen::RowVectorXd pn = p2.array().sqrt();
        Eigen::RowVectorXd psi(pts.rows());
        for (Eigen::Index k = 0; k < pts.rows(); ++k)
            psi(k) = half_aperture(pts.row(k).transpose(), cfg);

        Var one = t->scalar(1.0);
        Var p2v = t->constant(p2);
        Var pnv = t->constant(pn);
        Var g = diff::matmul(z, t->constant(pts), false, true);   // <p_k, z_i>
        Var z2 = ball::row_sqnorms(z);
        Var num = diff::sub(diff::mul(g, diff::add(one, diff::mul_scalar(p2v, c))),
                            diff::mul(p2v, diff::add(one, diff::mul_scalar(z2, c))));
        auto positive_sqrt = [&](Var v) {
            return diff::sqrt(diff::clamp(v, 1e-30, std::numeric_limits<double>::infinity()));
        };
        Var d2 = diff::sub(diff::add(z2, p2v), diff::mul_scalar(g, 2.0));
        Var dxy = positive_sqrt(d2);
        Var under = diff::sub(diff::add(one, diff::mul_scalar(diff::mul(p2v, z2), c * c)),
                              diff::mul_scalar(g, 2.0 * c));
        Var den = diff::mul(diff::mul(pnv, dxy), positive_sqrt(under));
        Var angle = diff::acos(diff::div(num, den));
        Var energy = diff::max0(diff::sub(angle, diff::mul_scalar(t->constant(psi), cfg.eta)));
        logits = diff::mul_scalar(energy, -beta);
    }
    return DiffHeadOutput{logits, diff::softmax(logits)};
}

DiffHeadOutput euclidean_mlr_tape(Var h, Var weight, Var bias) {
    Var logits = diff::add(diff::matmul(h, weight, false, true), bias);
    return DiffHeadOutput{logits, diff::softmax(logits)};
}

} // namespace codonball::heads
