#pragma once

// Classification heads: Euclidean MLR baseline, hyperbolic MLR, hyperbolic
// fully connected projection, and the two prototype heads (negative distance
// and entailment cone energy). Plain evaluators work on Eigen matrices with
// points as rows; the *_tape variants build the same math on a diff::Tape.

#include <Eigen/Dense>

#include "codonball/diff.hpp"
#include "codonball/prototypes.hpp"

namespace codonball::heads {

struct HyperbolicLinearParams {
    Eigen::MatrixXd Z;   // (out x in)
    Eigen::VectorXd r;   // (out)
    double curvature = 1.0;

    void validate() const {
        if (Z.rows() != r.size())
            throw ValidationError("hyperbolic layer: Z rows and r length differ");
        for (Eigen::Index k = 0; k < Z.rows(); ++k)
            if (Z.row(k).norm() < 1e-8)
                throw ValidationError("hyperbolic layer: row " + std::to_string(k) +
                                      " of Z is numerically zero");
    }
};

struct ConeConfig {
    double K = 0.1;
    double eta = 1.05;
    double curvature = 1.0;

    // Smallest radius at which the half aperture is defined (asin argument 1).
    double min_radius() const {
        return (-1.0 + std::sqrt(1.0 + 4.0 * K * K)) / (2.0 * K * std::sqrt(curvature));
    }
    void validate() const {
        if (!(K > 0)) throw ValidationError("cone config: K must be positive");
        if (!(eta > 1.0)) throw ValidationError("cone config: eta must exceed 1");
        if (!(curvature > 0)) throw ValidationError("cone config: curvature must be positive");
    }
};

struct HeadOutput {
    Eigen::MatrixXd logits;          // (points x classes)
    Eigen::MatrixXd probabilities;   // row-softmax of logits
};

enum class ProtoMode { Distance, Entailment };

// --- plain evaluation, points as matrix rows ---

// Signed-distance scores of the hyperbolic MLR for every row of x.
Eigen::MatrixXd hyperbolic_mlr_scores(const Eigen::MatrixXd& x, const HyperbolicLinearParams& p);

// Hyperbolic fully connected layer: rows of x to rows in the out-dim ball.
Eigen::MatrixXd hyperbolic_fc(const Eigen::MatrixXd& x, const HyperbolicLinearParams& p);

// Backbone states -> prototype-dimension ball points: exp at the origin,
// then the hyperbolic fully connected layer.
Eigen::MatrixXd project_tokens(const Eigen::MatrixXd& h, const HyperbolicLinearParams& fc);

double half_aperture(const Eigen::VectorXd& z, const ConeConfig& cfg);
double cone_angle(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double curvature);
double cone_energy(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const ConeConfig& cfg);

HeadOutput proto_logits(const Eigen::MatrixXd& z, const PrototypeSet& protos, ProtoMode mode,
                        double beta);

HeadOutput euclidean_mlr(const Eigen::MatrixXd& h, const Eigen::MatrixXd& weight,
                         const Eigen::VectorXd& bias);

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

// --- tape evaluation ---

struct DiffHeadOutput {
    diff::Var logits;
    diff::Var probabilities;
};

diff::Var hyperbolic_mlr_scores_tape(diff::Var x, diff::Var z, diff::Var r, double curvature);
diff::Var hyperbolic_fc_tape(diff::Var x, diff::Var z, diff::Var r, double curvature);
diff::Var project_tokens_tape(diff::Var h, diff::Var fc_z, diff::Var fc_r, double curvature);
diff::Var cone_energy_tape(diff::Var x_rows, diff::Var y_rows, const ConeConfig& cfg);
DiffHeadOutput proto_logits_tape(diff::Var z, const PrototypeSet& protos, ProtoMode mode, double beta);
DiffHeadOutput euclidean_mlr_tape(diff::Var h, diff::Var weight, diff::Var bias);

} // namespace codonball::heads
