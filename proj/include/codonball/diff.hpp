#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape owns the computation graph; Var is a cheap handle into it. Values
// are Eigen double matrices (vectors are n x 1 or 1 x n). Backward walks the
// tape once in reverse and accumulates gradients for every node that
// requires them. All ops are deterministic: identical tapes produce
// bit-identical values and gradients.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "codonball/common.hpp"

namespace codonball::diff {

using Matrix = Eigen::MatrixXd;

enum class Op : std::uint8_t {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    Norm,
    Dot,
    Concat,
    Slice,
    Tanh,
    Artanh,
    Sinh,
    Asinh,
    Cosh,
    Acos,
    Asin,
    Sqrt,
    Exp,
    Log,
    Softmax,
    LayerNorm,
    EmbeddingLookup,
    Clamp,
    Max0,
};

const char* op_name(Op op);

// Reduction layout for Sum/Norm: All collapses to 1x1, Rows collapses the
// row dimension (result 1 x n), Cols collapses the column dimension
// (result m x 1).
enum class Axis : std::uint8_t { All, Rows, Cols };

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Tape {
  public:
    Var input(Matrix value, bool requires_grad = false);
    Var constant(Matrix value) { return input(std::move(value), false); }
    Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

    // Runs reverse accumulation from a scalar output. Rejects non-scalar
    // outputs. May be called once per tape.
    void backward(Var output);

    const Matrix& value(Var v) const;
    // Gradient of the backward() output w.r.t. v; zero matrix if v did not
    // participate or does not require gradients.
    Matrix grad(Var v) const;
    bool requires_grad(Var v) const;

    std::size_t size() const { return nodes_.size(); }

    // --- op construction (used by the free functions below) ---
    struct Node {
        Op op = Op::Input;
        std::array<int, 3> in{-1, -1, -1};
        Matrix value;
        bool requires_grad = false;
        Axis axis = Axis::All;
        double lo = 0.0, hi = 0.0;               // Clamp bounds
        int r0 = 0, nr = 0, c0 = 0, nc = 0;      // Slice block
        bool trans_a = false, trans_b = false;   // MatMul
        int concat_axis = 0;
        std::vector<int> extra_in;               // Concat operands beyond in[]
        std::vector<int> lookup;                 // EmbeddingLookup row ids
        Matrix cached;                           // op-specific forward cache
    };

    Var emit(Node node);
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  private:
    void accumulate(int id, const Matrix& g);
    void backward_node(int id);

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;   // empty matrix = not yet touched
    bool ran_backward_ = false;
};

// --- elementwise binary ops (same shape, or broadcast from 1x1, 1xn, mx1) ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);
Var neg(Var a);

// --- linear algebra ---
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
// (m x 1) <-> (1 x m) without a dedicated kind: multiply by an identity.
Var transpose(Var a);

// --- reductions ---
Var sum(Var a, Axis axis = Axis::All);
Var mean(Var a);
Var norm(Var a, Axis axis = Axis::All);
Var dot(Var a, Var b);

// --- shape ops ---
Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var a, int r0, int nr, int c0, int nc);
Var slice_rows(Var a, int r0, int nr);
Var slice_cols(Var a, int c0, int nc);

// --- elementwise analytic ops ---
// artanh clamps its input to |x| <= 1 - 1e-12; acos/asin clamp values to
// [-1, 1] but cap the derivative at the 1e-12-interior point so gradients
// stay finite at the domain edge. Outside a clamp the gradient is that of
// the constant branch (zero).
Var tanh(Var a);
Var artanh(Var a);
Var sinh(Var a);
Var asinh(Var a);
Var cosh(Var a);
Var acos(Var a);
Var asin(Var a);
Var sqrt(Var a);
Var exp(Var a);
Var log(Var a);
Var max0(Var a);
Var clamp(Var a, double lo, double hi);

// --- fused NN ops ---
Var softmax(Var a);                      // row-wise
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var embedding_lookup(Var table, const std::vector<int>& ids);

// --- gradient verification ---
struct GradCheckOptions {
    double step = 1e-6;
    // When > 0, only this many coordinates per input are checked (chosen
    // deterministically from `seed`); 0 checks every coordinate.
    int max_coords_per_input = 0;
    std::uint64_t seed = 0;
    // Returns true when the inputs sit on a non-differentiable point (hinge,
    // clamp edge); the check is then skipped and reported as such.
    std::function<bool(const std::vector<Matrix>&)> on_boundary;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    bool skipped = false;
    std::string reason;
};

using DiffFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares tape gradients of a scalar-valued function against central finite
// differences. Error metric per coordinate: |analytic - central| /
// max(1, |central|).
GradCheckResult grad_check(const DiffFn& f, const std::vector<Matrix>& inputs,
                           const GradCheckOptions& opts = {});

} // namespace codonball::diff
