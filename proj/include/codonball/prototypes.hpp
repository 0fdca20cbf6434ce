#pragma once

// A frozen set of ball points, one per vocabulary token, produced by the
// hierarchy embedding. Rows of `points` follow `token_order`. Carries every
// constant the prototype heads need so a file round-trips the full setup.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "codonball/common.hpp"
#include "codonball/vocab.hpp"

namespace codonball::heads {

struct PrototypeSet {
    Eigen::MatrixXd points;               // (vocab x dim)
    std::vector<std::string> token_order; // row k holds the point for token_order[k]
    double curvature = 1.0;
    double tau = 2.0;
    double cone_k = 0.1;
    double cone_eta = 1.05;

    Eigen::Index dim() const { return points.cols(); }
    Eigen::Index count() const { return points.rows(); }

    void validate() const {
        if (points.rows() != static_cast<Eigen::Index>(token_order.size()))
            throw ValidationError("prototypes: token order does not match point count");
        if (!(curvature > 0)) throw ValidationError("prototypes: curvature must be positive");
        if (!points.allFinite()) throw ValidationError("prototypes: non-finite coordinates");
        for (Eigen::Index i = 0; i < points.rows(); ++i) {
            const double n2 = points.row(i).squaredNorm();
            if (curvature * n2 >= 1.0)
                throw ValidationError("prototypes: point for " + token_order[static_cast<std::size_t>(i)] +
                                      " is outside the ball");
            if (std::sqrt(n2) < 1e-3)
                throw ValidationError("prototypes: point for " + token_order[static_cast<std::size_t>(i)] +
                                      " sits at the origin");
        }
    }

    // Rows reordered so row k is the point for vocabulary token k.
    Eigen::MatrixXd points_by_token_id() const {
        Eigen::MatrixXd out(vocab::kSize, points.cols());
        std::vector<bool> seen(vocab::kSize, false);
        for (Eigen::Index i = 0; i < points.rows(); ++i) {
            const int id = vocab::token_id(token_order[static_cast<std::size_t>(i)]);
            if (id < 0) throw ValidationError("prototypes: unknown token '" +
                                              token_order[static_cast<std::size_t>(i)] + "'");
            if (seen[static_cast<std::size_t>(id)])
                throw ValidationError("prototypes: duplicate token '" +
                                      token_order[static_cast<std::size_t>(i)] + "'");
            seen[static_cast<std::size_t>(id)] = true;
            out.row(id) = points.row(i);
        }
        if (points.rows() != vocab::kSize)
            throw ValidationError("prototypes: expected " + std::to_string(vocab::kSize) +
                                  " tokens, got " + std::to_string(points.rows()));
        return out;
    }
};

} // namespace codonball::heads
