#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "codonball/diff.hpp"

using namespace codonball;
using diff::Axis;
using diff::Matrix;
using diff::Tape;
using diff::Var;

namespace {

Matrix rowvec(std::initializer_list<double> xs) {
    Matrix m(1, static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) m(0, i++) = x;
    return m;
}

Matrix random_matrix(int r, int c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = dist(rng);
    return m;
}

} // namespace

TEST_CASE("forward values match definitions") {
    Tape t;
    Var a = t.input(rowvec({1, 2}));
    Var b = t.input(rowvec({3, 4}));
    CHECK((a + b).value() == rowvec({4, 6}));

    Matrix id3 = Matrix::Identity(3, 3);
    std::mt19937_64 rng(7);
    Matrix m = random_matrix(3, 5, rng);
    Var vm = t.input(m);
    Var prod = diff::matmul(t.input(id3), vm);
    CHECK((prod.value() - m).cwiseAbs().maxCoeff() == 0.0);

    // frozen from a 40-digit evaluation of 0.5*ln((1+x)/(1-x)) at x = 0.5
    Var at = diff::artanh(t.input(Matrix::Constant(1, 1, 0.5)));
    CHECK(at.value()(0, 0) == doctest::Approx(0.5493061443340548).epsilon(1e-12));
}

TEST_CASE("shape mismatch is rejected with op name") {
    Tape t;
    Var a = t.input(Matrix::Zero(2, 3));
    Var b = t.input(Matrix::Zero(3, 2));
    CHECK_THROWS_WITH_AS(diff::add(a, b), doctest::Contains("add"), ValidationError);
    CHECK_THROWS_AS(diff::matmul(a, a), ValidationError);
    CHECK_THROWS_AS(diff::dot(a, b), ValidationError);
}

TEST_CASE("backward on simple forms") {
    SUBCASE("sum of squares") {
        Tape t;
        Var x = t.input(rowvec({1, 2, 3}), true);
        Var loss = diff::sum(diff::mul(x, x));
        t.backward(loss);
        CHECK(t.grad(x) == rowvec({2, 4, 6}));
    }
    SUBCASE("dot is bilinear") {
        Tape t;
        Var a = t.input(rowvec({1, -2, 0.5}), true);
        Var b = t.input(rowvec({4, 5, 6}), true);
        Var loss = diff::dot(a, b);
        t.backward(loss);
        CHECK(t.grad(a) == rowvec({4, 5, 6}));
        CHECK(t.grad(b) == rowvec({1, -2, 0.5}));
    }
    SUBCASE("non-scalar output rejected") {
        Tape t;
        Var x = t.input(rowvec({1, 2}), true);
        CHECK_THROWS_AS(t.backward(x), ValidationError);
    }
}

TEST_CASE("broadcast add/mul reduce gradients to source shape") {
    Tape t;
    std::mt19937_64 rng(3);
    Var x = t.input(random_matrix(4, 3, rng), true);
    Var row = t.input(random_matrix(1, 3, rng), true);
    Var col = t.input(random_matrix(4, 1, rng), true);
    Var y = diff::mul(diff::add(x, row), col);
    Var loss = diff::sum(y);
    t.backward(loss);
    CHECK(t.grad(row).rows() == 1);
    CHECK(t.grad(row).cols() == 3);
    CHECK(t.grad(col).rows() == 4);
    CHECK(t.grad(col).cols() == 1);
    // d loss / d row_j = sum_i col_i
    CHECK(t.grad(row)(0, 0) == doctest::Approx(col.value().sum()).epsilon(1e-14));
}

TEST_CASE("outer broadcast between column and row") {
    Tape t;
    Var col = t.input(rowvec({1, 2, 3}).transpose(), true);
    Var row = t.input(rowvec({10, 20}), true);
    Var y = diff::add(col, row);
    CHECK(y.rows() == 3);
    CHECK(y.cols() == 2);
    CHECK(y.value()(2, 1) == 23);
    t.backward(diff::sum(y));
    CHECK(t.grad(col) == Matrix::Constant(3, 1, 2.0));
    CHECK(t.grad(row) == Matrix::Constant(1, 2, 3.0));
}

TEST_CASE("every op kind passes the finite-difference oracle") {
    // 100 seeded random interior inputs per kind, relative error < 1e-4.
    constexpr int kTrials = 100;
    constexpr double kTol = 1e-4;

    auto scalarize = [](Tape& t, Var v) {
        // random-but-fixed projection to a scalar so vector ops are checkable
        Matrix w(v.rows(), v.cols());
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.3 + 0.1 * static_cast<double>(i % 7);
        return diff::dot(v, t.input(w));
    };

    struct KindCheck {
        const char* name;
        int arity;
        double lo, hi;
        std::function<Var(Tape&, const std::vector<Var>&)> fn;
    };

    std::vector<KindCheck> checks;
    auto add_unary = [&](const char* name, double lo, double hi, auto op) {
        checks.push_back({name, 1, lo, hi, [op, &scalarize](Tape& t, const std::vector<Var>& v) {
                              return scalarize(t, op(v[0]));
                          }});
    };
    add_unary("tanh", -2, 2, [](Var v) { return diff::tanh(v); });
    add_unary("artanh", -0.9, 0.9, [](Var v) { return diff::artanh(v); });
    add_unary("sinh", -2, 2, [](Var v) { return diff::sinh(v); });
    add_unary("asinh", -3, 3, [](Var v) { return diff::asinh(v); });
    add_unary("cosh", -2, 2, [](Var v) { return diff::cosh(v); });
    add_unary("acos", -0.9, 0.9, [](Var v) { return diff::acos(v); });
    add_unary("asin", -0.9, 0.9, [](Var v) { return diff::asin(v); });
    add_unary("sqrt", 0.1, 4, [](Var v) { return diff::sqrt(v); });
    add_unary("exp", -2, 2, [](Var v) { return diff::exp(v); });
    add_unary("log", 0.1, 5, [](Var v) { return diff::log(v); });
    add_unary("max0", 0.05, 2, [](Var v) { return diff::max0(v); });
    add_unary("clamp", -0.45, 0.45, [](Var v) { return diff::clamp(v, -0.5, 0.5); });
    add_unary("softmax", -2, 2, [](Var v) { return diff::softmax(v); });
    add_unary("sum_rows", -2, 2, [](Var v) { return diff::sum(v, Axis::Rows); });
    add_unary("sum_cols", -2, 2, [](Var v) { return diff::sum(v, Axis::Cols); });
    add_unary("mean", -2, 2, [](Var v) { return diff::mean(v); });
    add_unary("norm_all", 0.3, 2, [](Var v) { return diff::norm(v); });
    add_unary("norm_cols", 0.3, 2, [](Var v) { return diff::norm(v, Axis::Cols); });
    add_unary("slice", -2, 2, [](Var v) { return diff::slice(v, 1, 2, 1, 2); });

    auto add_binary = [&](const char* name, double lo, double hi, auto op) {
        checks.push_back({name, 2, lo, hi, [op, &scalarize](Tape& t, const std::vector<Var>& v) {
                              return scalarize(t, op(v[0], v[1]));
                          }});
    };
    add_binary("add", -2, 2, [](Var a, Var b) { return diff::add(a, b); });
    add_binary("sub", -2, 2, [](Var a, Var b) { return diff::sub(a, b); });
    add_binary("mul", -2, 2, [](Var a, Var b) { return diff::mul(a, b); });
    add_binary("div", 0.5, 2, [](Var a, Var b) { return diff::div(a, b); });
    add_binary("matmul", -1, 1, [](Var a, Var b) { return diff::matmul(a, b, false, true); });
    add_binary("dot", -2, 2, [](Var a, Var b) { return diff::dot(a, b); });
    add_binary("concat", -2, 2,
               [](Var a, Var b) { return diff::concat({a, b}, 1); });

    std::mt19937_64 rng(2024);
    for (const auto& chk : checks) {
        CAPTURE(chk.name);
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            std::vector<Matrix> inputs;
            for (int k = 0; k < chk.arity; ++k) inputs.push_back(random_matrix(3, 4, rng, chk.lo, chk.hi));
            auto res = diff::grad_check(chk.fn, inputs, {});
            worst = std::max(worst, res.max_rel_err);
        }
        CHECK_MESSAGE(worst < kTol, chk.name << " worst rel err " << worst);
    }

    // layer_norm and embedding_lookup need shaped inputs
    {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            std::vector<Matrix> inputs = {random_matrix(3, 6, rng), random_matrix(1, 6, rng, 0.5, 1.5),
                                          random_matrix(1, 6, rng)};
            auto res = diff::grad_check(
                [&scalarize](Tape& t, const std::vector<Var>& v) {
                    return scalarize(t, diff::layer_norm(v[0], v[1], v[2]));
                },
                inputs, {});
            worst = std::max(worst, res.max_rel_err);
        }
        CHECK_MESSAGE(worst < kTol, "layer_norm worst rel err " << worst);
    }
    {
        double worst = 0.0;
        std::vector<int> ids = {2, 0, 2, 3};
        for (int trial = 0; trial < kTrials; ++trial) {
            std::vector<Matrix> inputs = {random_matrix(5, 4, rng)};
            auto res = diff::grad_check(
                [&](Tape& t, const std::vector<Var>& v) {
                    return scalarize(t, diff::embedding_lookup(v[0], ids));
                },
                inputs, {});
            worst = std::max(worst, res.max_rel_err);
        }
        CHECK_MESSAGE(worst < kTol, "embedding_lookup worst rel err " << worst);
    }
}

TEST_CASE("grad_check on exact quadratic is tight") {
    std::mt19937_64 rng(5);
    Matrix x = random_matrix(1, 6, rng);
    auto res = diff::grad_check(
        [](Tape&, const std::vector<Var>& v) { return diff::dot(v[0], v[0]); }, {x}, {});
    CHECK(res.max_rel_err < 1e-9);
}

TEST_CASE("grad_check reports boundary points as skipped") {
    diff::GradCheckOptions opts;
    opts.on_boundary = [](const std::vector<Matrix>&) { return true; };
    auto res = diff::grad_check(
        [](Tape&, const std::vector<Var>& v) { return diff::sum(v[0]); }, {Matrix::Zero(1, 2)}, opts);
    CHECK(res.skipped);
}

TEST_CASE("tape replay is bit-identical") {
    auto run = [](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tape t;
        Var x = t.input(random_matrix(4, 4, rng), true);
        Var y = diff::softmax(diff::matmul(x, x, false, true));
        Var loss = diff::mean(diff::mul(y, y));
        t.backward(loss);
        return std::make_pair(loss.value()(0, 0), t.grad(x));
    };
    auto [l1, g1] = run(99);
    auto [l2, g2] = run(99);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("gradients of clamped regions follow the constant branch") {
    Tape t;
    Var x = t.input(Matrix::Constant(1, 1, 2.0), true);
    Var y = diff::clamp(x, -1.0, 1.0);
    t.backward(diff::sum(y));
    CHECK(t.grad(x)(0, 0) == 0.0);

    Tape t2;
    Var z = t2.input(Matrix::Constant(1, 1, 0.999999999999999), true);
    Var w = diff::artanh(z);   // inside the 1 - 1e-12 edge -> clamped
    CHECK(std::isfinite(w.value()(0, 0)));
    t2.backward(diff::sum(w));
    CHECK(t2.grad(z)(0, 0) == 0.0);
}

TEST_CASE("acos is value-exact at the domain edge with a capped derivative") {
    Tape t;
    Var one = t.input(Matrix::Constant(1, 1, 1.0), true);
    Var y = diff::acos(one);
    CHECK(y.value()(0, 0) == 0.0);
    t.backward(diff::sum(y));
    CHECK(std::isfinite(t.grad(one)(0, 0)));
}
