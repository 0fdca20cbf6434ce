#include "codonball/treembed.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "codonball/ball.hpp"
#include "codonball/ball_diff.hpp"
#include "codonball/diff.hpp"

namespace codonball::treembed {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Seeded rotation from the QR decomposition of a Gaussian matrix, signs
// fixed so the result is deterministic.
MatrixXd random_rotation(int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    MatrixXd a(dim, dim);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = gauss(rng);
    Eigen::HouseholderQR<MatrixXd> qr(a);
    MatrixXd q = qr.householderQ();
    MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int i = 0; i < dim; ++i)
        if (r(i, i) < 0) q.col(i) = -q.col(i);
    return q;
}

// Householder map sending unit vector `from` onto unit vector `to`.
void reflect_onto(MatrixXd& rows, const VectorXd& from, const VectorXd& to) {
    VectorXd d = from - to;
    const double dn2 = d.squaredNorm();
    if (dn2 < 1e-24) return;
    rows -= (2.0 / dn2) * (rows * d) * d.transpose();
}

// m exactly symmetric unit vectors in R^dim (pairwise inner product
// -1/(m-1)); requires m <= dim + 1.
MatrixXd regular_simplex(int dim, int m, std::uint64_t seed) {
    MatrixXd u = MatrixXd::Zero(m, m);
    const double off = -1.0 / m;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) u(i, j) = (i == j ? 1.0 + off : off);
    // rotate the all-ones normal onto e_m, then drop the now-zero last axis
    VectorXd ones = VectorXd::Constant(m, 1.0 / std::sqrt(static_cast<double>(m)));
    VectorXd em = VectorXd::Zero(m);
    em(m - 1) = 1.0;
    reflect_onto(u, ones, em);
    MatrixXd dirs = MatrixXd::Zero(m, dim);
    dirs.leftCols(m - 1) = u.leftCols(m - 1);
    for (int i = 0; i < m; ++i) dirs.row(i) /= dirs.row(i).norm();
    return dirs * random_rotation(dim, seed).transpose();
}

MatrixXd circle_directions(int m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 2.0 * std::numbers::pi);
    const double phase = unif(rng);
    MatrixXd dirs(m, 2);
    for (int i = 0; i < m; ++i) {
        const double a = phase + 2.0 * std::numbers::pi * i / m;
        dirs(i, 0) = std::cos(a);
        dirs(i, 1) = std::sin(a);
    }
    return dirs;
}

// Sphere repulsion fallback for more directions than the simplex supports.
MatrixXd repulsion_directions(int dim, int m, const VectorXd* pinned, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    MatrixXd u(m, dim);
    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = gauss(rng);
    const int first_free = pinned ? 1 : 0;
    if (pinned) u.row(0) = pinned->transpose();
    for (int i = 0; i < m; ++i) u.row(i) /= u.row(i).norm();
    double lr = 0.3 / m;
    for (int it = 0; it < 200; ++it) {
        MatrixXd force = MatrixXd::Zero(m, dim);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < m; ++j) {
                if (i == j) continue;
                VectorXd d = (u.row(i) - u.row(j)).transpose();
                const double n = std::max(d.norm(), 1e-9);
                force.row(i) += (d / (n * n * n)).transpose();
            }
        }
        for (int i = first_free; i < m; ++i) {
            VectorXd f = force.row(i).transpose();
            f -= f.dot(u.row(i).transpose()) * u.row(i).transpose();
            u.row(i) += lr * f.transpose();
            u.row(i) /= u.row(i).norm();
        }
        lr *= 0.99;
    }
    return u;
}

} // namespace

MatrixXd sibling_directions(int dim, int k, const VectorXd* pinned, std::uint64_t seed) {
    if (dim < 2) throw ValidationError("sibling_directions: dimension must be at least 2");
    if (k <= 0) return MatrixXd(0, dim);
    const int m = k + (pinned ? 1 : 0);
    if (m == 1) {
        MatrixXd one = MatrixXd::Zero(1, dim);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss;
        for (int j = 0; j < dim; ++j) one(0, j) = gauss(rng);
        one.row(0) /= one.row(0).norm();
        return one;
    }
    if (dim == 2) {
        MatrixXd all = circle_directions(m, seed);
        if (!pinned) return all;
        // rotate so the first direction lands on the pinned one, keep the rest
        const double target = std::atan2((*pinned)(1), (*pinned)(0));
        const double have = std::atan2(all(0, 1), all(0, 0));
        const double rot = target - have;
        Eigen::Matrix2d r;
        r << std::cos(rot), -std::sin(rot), std::sin(rot), std::cos(rot);
        MatrixXd out = all.bottomRows(k) * r.transpose();
        return out;
    }
    if (m <= dim + 1) {
        MatrixXd all = regular_simplex(dim, m, seed);
        if (!pinned) return all;
        VectorXd v0 = all.row(0).transpose();
        reflect_onto(all, v0, *pinned);
        for (int i = 0; i < m; ++i) all.row(i) /= all.row(i).norm();
        return all.bottomRows(k);
    }
    MatrixXd all = repulsion_directions(dim, m, pinned, seed);
    return pinned ? MatrixXd(all.bottomRows(k)) : all;
}

TreeEmbedding embed_tree_constructive(const hierarchy::CodonTree& tree, int dim, double curvature,
                                      double tau, std::uint64_t seed) {
    if (dim < 2) throw ValidationError("embed_tree_constructive: dimension must be at least 2");
    if (!(tau > 0)) throw ValidationError("embed_tree_constructive: tau must be positive");
    if (!(curvature > 0)) throw ValidationError("embed_tree_constructive: curvature must be positive");

    TreeEmbedding emb;
    emb.curvature = curvature;
    emb.tau = tau;
    emb.points = MatrixXd::Zero(tree.size(), dim);

    std::vector<int> order = {tree.root()};
    for (std::size_t qi = 0; qi < order.size(); ++qi) {
        const int u = order[qi];
        const auto& ch = tree.children(u);
        if (ch.empty()) continue;
        if (static_cast<int>(ch.size()) > 4096)
            throw ValidationError("embed_tree_constructive: node '" + tree.node(u).id +
                                  "' has more children than the placement routine supports");
        const VectorXd pu = emb.points.row(u).transpose();
        VectorXd back;
        const VectorXd* pinned = nullptr;
        if (u != tree.root()) {
            const VectorXd pp = emb.points.row(tree.node(u).parent).transpose();
            back = ball::log_map<double>(pu, pp, curvature);
            back /= back.norm();
            pinned = &back;
        }
        MatrixXd dirs =
            sibling_directions(dim, static_cast<int>(ch.size()), pinned, derive_seed(seed, "dirs", static_cast<std::uint64_t>(u)));
        const double lam = ball::conformal_factor<double>(pu, curvature);
        for (std::size_t i = 0; i < ch.size(); ++i) {
            // d(x, exp_x(v)) = lambda_x * ||v||, so ||v|| = tau / lambda_x
            VectorXd v = dirs.row(static_cast<Eigen::Index>(i)).transpose() * (tau / lam);
            emb.points.row(ch[i]) = ball::exp_map<double>(pu, v, curvature).transpose();
            order.push_back(ch[i]);
        }
    }
    return emb;
}

double embedding_objective(const TreeEmbedding& emb, const hierarchy::CodonTree& tree) {
    const int n = tree.size();
    if (emb.points.rows() != n) throw ValidationError("embedding does not cover the tree");
    double total = 0.0;
    long pairs = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double target = emb.tau * tree.tree_distance(i, j);
            const double d = ball::dist<double>(emb.points.row(i).transpose(),
                                                emb.points.row(j).transpose(), emb.curvature);
            const double rel = d / target - 1.0;
            total += rel * rel;
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

namespace {

// Euclidean gradient of the mean squared relative distortion, via the tape.
MatrixXd objective_gradient(const TreeEmbedding& emb, const MatrixXd& inv_target,
                            const MatrixXd& offdiag) {
    const Eigen::Index n = emb.points.rows();
    diff::Tape t;
    diff::Var p = t.input(emb.points, true);
    diff::Var g = diff::matmul(p, p, false, true);
    diff::Var s = ball::row_sqnorms(p);
    diff::Var st = diff::transpose(s);
    diff::Var d2 = diff::sub(diff::add(s, st), diff::mul_scalar(g, 2.0));
    diff::Var one = t.scalar(1.0);
    diff::Var f = diff::sub(one, diff::mul_scalar(s, emb.curvature));
    diff::Var ft = diff::sub(one, diff::mul_scalar(st, emb.curvature));
    diff::Var u = diff::add(one, diff::div(diff::mul_scalar(d2, 2.0 * emb.curvature), diff::mul(f, ft)));
    // push the diagonal away from the acosh singularity; it is masked below
    u = diff::add(u, t.constant(3.0 * MatrixXd::Identity(n, n)));
    diff::Var d = diff::mul_scalar(ball::acosh_compose(u), 1.0 / std::sqrt(emb.curvature));
    diff::Var rel = diff::sub(diff::mul(d, t.constant(inv_target)), one);
    diff::Var masked = diff::mul(diff::mul(rel, rel), t.constant(offdiag));
    diff::Var obj = diff::mul_scalar(diff::sum(masked), 1.0 / static_cast<double>(n * (n - 1)));
    t.backward(obj);
    return t.grad(p);
}

} // namespace

RefineResult refine_embedding(const TreeEmbedding& emb, const hierarchy::CodonTree& tree, int steps,
                              double lr) {
    if (steps < 0) throw ValidationError("refine_embedding: steps must be non-negative");
    const int n = tree.size();
    if (emb.points.rows() != n) throw ValidationError("embedding does not cover the tree");

    RefineResult result;
    result.embedding = emb;
    result.objective_trace.push_back(embedding_objective(emb, tree));
    result.final_lr = lr;
    if (steps == 0) return result;

    MatrixXd inv_target(n, n), offdiag(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int dt = (i == j) ? 1 : tree.tree_distance(i, j);
            inv_target(i, j) = 1.0 / (emb.tau * dt);
            offdiag(i, j) = (i == j) ? 0.0 : 1.0;
        }
    }

    TreeEmbedding& cur = result.embedding;
    double cur_obj = result.objective_trace.back();
    for (int step = 0; step < steps; ++step) {
        MatrixXd grad = objective_gradient(cur, inv_target, offdiag);
        bool accepted = false;
        for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
            TreeEmbedding cand = cur;
            for (int i = 0; i < n; ++i) {
                if (i == tree.root()) continue;   // root stays pinned at the origin
                const VectorXd x = cur.points.row(i).transpose();
                const double lam = ball::conformal_factor<double>(x, cur.curvature);
                const VectorXd v = -(lr / (lam * lam)) * grad.row(i).transpose();
                cand.points.row(i) = ball::exp_map<double>(x, v, cur.curvature).transpose();
            }
            const double cand_obj = embedding_objective(cand, tree);
            if (cand_obj <= cur_obj) {
                cur = std::move(cand);
                cur_obj = cand_obj;
                accepted = true;
            } else {
                lr *= 0.5;
            }
        }
        result.objective_trace.push_back(cur_obj);
        if (!accepted) break;   // learning rate exhausted
    }
    result.final_lr = lr;
    return result;
}

DistortionReport distortion_report(const TreeEmbedding& emb, const hierarchy::CodonTree& tree) {
    const int n = tree.size();
    if (emb.points.rows() != n) throw ValidationError("distortion_report: embedding does not cover the tree");
    DistortionReport rep;
    double total = 0.0;
    std::map<int, double> class_total;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const int dt = tree.tree_distance(i, j);
            const double d = ball::dist<double>(emb.points.row(i).transpose(),
                                                emb.points.row(j).transpose(), emb.curvature);
            const double rel = std::abs(d / (emb.tau * dt) - 1.0);
            total += rel;
            rep.worst_rel = std::max(rep.worst_rel, rel);
            ++rep.pair_count;
            class_total[dt] += d;
            ++rep.class_pair_count[dt];
        }
    }
    rep.mean_rel = total / static_cast<double>(rep.pair_count);
    for (const auto& [dt, sum] : class_total)
        rep.class_mean_dist[dt] = sum / static_cast<double>(rep.class_pair_count[dt]);
    return rep;
}

heads::PrototypeSet leaf_prototypes(const TreeEmbedding& emb, const hierarchy::CodonTree& tree,
                                    double cone_k, double cone_eta) {
    if (!tree.covers_vocabulary())
        throw ValidationError("leaf_prototypes: tree does not cover the vocabulary");
    heads::PrototypeSet protos;
    protos.curvature = emb.curvature;
    protos.tau = emb.tau;
    protos.cone_k = cone_k;
    protos.cone_eta = cone_eta;
    protos.points.resize(vocab::kSize, emb.dim());
    protos.token_order.reserve(vocab::kSize);
    for (int token = 0; token < vocab::kSize; ++token) {
        protos.token_order.push_back(vocab::token_string(token));
        protos.points.row(token) = emb.points.row(tree.leaf_of_token(token));
    }
    protos.validate();
    return protos;
}

} // namespace codonball::treembed
