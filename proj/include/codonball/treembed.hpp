#pragma once

// Embeds a codon tree into the Poincare ball: recursive construction that
// steps geodesic length tau from parent to child along well-separated
// tangent directions, followed by Riemannian refinement of the relative
// distortion over all node pairs.

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <vector>

#include "codonball/hierarchy.hpp"
#include "codonball/prototypes.hpp"

namespace codonball::treembed {

struct TreeEmbedding {
    Eigen::MatrixXd points;   // (tree.size() x dim), row per node index
    double curvature = 1.0;
    double tau = 2.0;

    Eigen::Index dim() const { return points.cols(); }
};

struct DistortionReport {
    double mean_rel = 0.0;
    double worst_rel = 0.0;
    long pair_count = 0;
    // tree distance class (1..4 for the codon tree) -> mean embedded distance
    std::map<int, double> class_mean_dist;
    std::map<int, long> class_pair_count;
};

struct RefineResult {
    TreeEmbedding embedding;
    // objective value before each accepted step plus the final value;
    // non-increasing by construction
    std::vector<double> objective_trace;
    double final_lr = 0.0;
};

// k unit directions in R^dim, pairwise well separated and away from
// `pinned` when given (the direction back to the parent). Exact regular
// simplex / circle constructions when the dimension allows, seeded sphere
// repulsion otherwise.
Eigen::MatrixXd sibling_directions(int dim, int k, const Eigen::VectorXd* pinned, std::uint64_t seed);

TreeEmbedding embed_tree_constructive(const hierarchy::CodonTree& tree, int dim, double curvature,
                                      double tau, std::uint64_t seed);

// Mean squared relative distortion over distinct node pairs.
double embedding_objective(const TreeEmbedding& emb, const hierarchy::CodonTree& tree);

// Riemannian descent with monotone acceptance: a step that increases the
// objective is rejected and the learning rate halved. The root stays at the
// origin.
RefineResult refine_embedding(const TreeEmbedding& emb, const hierarchy::CodonTree& tree, int steps,
                              double lr);

DistortionReport distortion_report(const TreeEmbedding& emb, const hierarchy::CodonTree& tree);

heads::PrototypeSet leaf_prototypes(const TreeEmbedding& emb, const hierarchy::CodonTree& tree,
                                    double cone_k, double cone_eta);

} // namespace codonball::treembed
