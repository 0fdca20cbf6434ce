#include "codonball/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace codonball::diff {

namespace {

constexpr double kArtanhEdge = 1.0 - 1e-12;
constexpr double kAsinEdge = 1.0 - 1e-12;
constexpr double kLogFloor = 1e-300;

std::string shape_str(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

[[noreturn]] void shape_error(Op op, const Matrix& a, const Matrix& b) {
    throw ValidationError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) +
                          " and " + shape_str(b));
}

bool broadcastable(const Matrix& a, const Matrix& b, Eigen::Index& r, Eigen::Index& c) {
    auto dim_ok = [](Eigen::Index x, Eigen::Index y, Eigen::Index& out) {
        if (x == y) { out = x; return true; }
        if (x == 1) { out = y; return true; }
        if (y == 1) { out = x; return true; }
        return false;
    };
    return dim_ok(a.rows(), b.rows(), r) && dim_ok(a.cols(), b.cols(), c);
}

Matrix broadcast_to(const Matrix& m, Eigen::Index r, Eigen::Index c) {
    if (m.rows() == r && m.cols() == c) return m;
    return m.replicate(r / m.rows(), c / m.cols());
}

// Sums a full-shape gradient back down to the pre-broadcast shape.
Matrix reduce_to(const Matrix& g, Eigen::Index r, Eigen::Index c) {
    if (g.rows() == r && g.cols() == c) return g;
    Matrix out = g;
    if (r == 1 && out.rows() != 1) { Matrix t = out.colwise().sum(); out.swap(t); }
    if (c == 1 && out.cols() != 1) { Matrix t = out.rowwise().sum(); out.swap(t); }
    return out;
}

} // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::MatMul: return "matmul";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Norm: return "norm";
        case Op::Dot: return "dot";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Tanh: return "tanh";
        case Op::Artanh: return "artanh";
        case Op::Sinh: return "sinh";
        case Op::Asinh: return "asinh";
        case Op::Cosh: return "cosh";
        case Op::Acos: return "acos";
        case Op::Asin: return "asin";
        case Op::Sqrt: return "sqrt";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::EmbeddingLookup: return "embedding_lookup";
        case Op::Clamp: return "clamp";
        case Op::Max0: return "max0";
    }
    return "?";
}

const Matrix& Var::value() const {
    if (!valid()) throw ValidationError("use of an empty Var handle");
    return tape->value(*this);
}

Var Tape::input(Matrix value, bool requires_grad) {
    if (!value.allFinite())
        throw ValidationError("input: non-finite values");
    Node n;
    n.op = Op::Input;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return emit(std::move(n));
}

Var Tape::emit(Node node) {
    if (node.op != Op::Input) {
        bool rg = false;
        for (int i : node.in)
            if (i >= 0) rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
        for (int i : node.extra_in) rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
        node.requires_grad = rg;
    }
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
    return nodes_.at(static_cast<std::size_t>(v.id)).value;
}

bool Tape::requires_grad(Var v) const {
    return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
}

Matrix Tape::grad(Var v) const {
    const auto& g = grads_.at(static_cast<std::size_t>(v.id));
    if (g.size() == 0) {
        const auto& val = nodes_[static_cast<std::size_t>(v.id)].value;
        return Matrix::Zero(val.rows(), val.cols());
    }
    return g;
}

void Tape::accumulate(int id, const Matrix& g) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad) return;
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.size() == 0)
        slot = g;
    else
        slot += g;
}

void Tape::backward(Var output) {
    if (output.tape != this) throw ValidationError("backward: output from another tape");
    if (ran_backward_) throw ValidationError("backward: tape already differentiated");
    const Matrix& out = value(output);
    if (out.size() != 1)
        throw ValidationError("backward: output must be scalar, got " + shape_str(out));
    ran_backward_ = true;
    grads_.assign(nodes_.size(), Matrix());
    if (!nodes_[static_cast<std::size_t>(output.id)].requires_grad) return;
    grads_[static_cast<std::size_t>(output.id)] = Matrix::Constant(1, 1, 1.0);
    for (int id = output.id; id >= 0; --id) {
        if (grads_[static_cast<std::size_t>(id)].size() == 0) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Matrix& g = grads_[static_cast<std::size_t>(id)];
    auto in_val = [&](int k) -> const Matrix& {
        return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(k)])].value;
    };
    switch (n.op) {
        case Op::Input:
            break;
        case Op::Add: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            accumulate(n.in[0], reduce_to(g, a.rows(), a.cols()));
            accumulate(n.in[1], reduce_to(g, b.rows(), b.cols()));
            break;
        }
        case Op::Sub: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            accumulate(n.in[0], reduce_to(g, a.rows(), a.cols()));
            accumulate(n.in[1], reduce_to(-g, b.rows(), b.cols()));
            break;
        }
        case Op::Mul: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            if (a.rows() == b.rows() && a.cols() == b.cols()) {
                accumulate(n.in[0], g.cwiseProduct(b));
                accumulate(n.in[1], g.cwiseProduct(a));
            } else {
                Matrix ab = broadcast_to(a, g.rows(), g.cols());
                Matrix bb = broadcast_to(b, g.rows(), g.cols());
                accumulate(n.in[0], reduce_to(g.cwiseProduct(bb), a.rows(), a.cols()));
                accumulate(n.in[1], reduce_to(g.cwiseProduct(ab), b.rows(), b.cols()));
            }
            break;
        }
        case Op::Div: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            if (a.rows() == b.rows() && a.cols() == b.cols()) {
                accumulate(n.in[0], g.cwiseQuotient(b));
                accumulate(n.in[1], -g.cwiseProduct(a).cwiseQuotient(b.cwiseProduct(b)));
            } else {
                Matrix ab = broadcast_to(a, g.rows(), g.cols());
                Matrix bb = broadcast_to(b, g.rows(), g.cols());
                accumulate(n.in[0], reduce_to(g.cwiseQuotient(bb), a.rows(), a.cols()));
                Matrix gb = -g.cwiseProduct(ab).cwiseQuotient(bb.cwiseProduct(bb));
                accumulate(n.in[1], reduce_to(gb, b.rows(), b.cols()));
            }
            break;
        }
        case Op::MatMul: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            Matrix ga, gb;
            if (!n.trans_a && !n.trans_b) {
                ga = g * b.transpose();
                gb = a.transpose() * g;
            } else if (!n.trans_a && n.trans_b) {
                ga = g * b;
                gb = g.transpose() * a;
            } else if (n.trans_a && !n.trans_b) {
                ga = b * g.transpose();
                gb = a * g;
            } else {
                ga = b.transpose() * g.transpose();
                gb = g.transpose() * a.transpose();
            }
            accumulate(n.in[0], ga);
            accumulate(n.in[1], gb);
            break;
        }
        case Op::Sum: {
            const Matrix& a = in_val(0);
            accumulate(n.in[0], broadcast_to(g, a.rows(), a.cols()));
            break;
        }
        case Op::Mean: {
            const Matrix& a = in_val(0);
            accumulate(n.in[0], Matrix::Constant(a.rows(), a.cols(),
                                                 g(0, 0) / static_cast<double>(a.size())));
            break;
        }
        case Op::Norm: {
            const Matrix& a = in_val(0);
            // d||x||/dx = x/||x|| per reduced group; 0 subgradient at the origin.
            Matrix scale = g.cwiseQuotient(
                (n.value.array() > 0.0).select(n.value, Matrix::Constant(g.rows(), g.cols(), 1.0)));
            scale = (n.value.array() > 0.0).select(scale, Matrix::Zero(g.rows(), g.cols()));
            Matrix da;
            switch (n.axis) {
                case Axis::All: da = scale(0, 0) * a; break;
                case Axis::Rows: da = a.array().rowwise() * scale.row(0).array(); break;
                case Axis::Cols: da = a.array().colwise() * scale.col(0).array(); break;
            }
            accumulate(n.in[0], da);
            break;
        }
        case Op::Dot: {
            const Matrix& a = in_val(0);
            const Matrix& b = in_val(1);
            accumulate(n.in[0], g(0, 0) * b);
            accumulate(n.in[1], g(0, 0) * a);
            break;
        }
        case Op::Concat: {
            std::vector<int> ids;
            for (int i : n.in)
                if (i >= 0) ids.push_back(i);
            for (int i : n.extra_in) ids.push_back(i);
            Eigen::Index off = 0;
            for (int cid : ids) {
                const Matrix& p = nodes_[static_cast<std::size_t>(cid)].value;
                if (n.concat_axis == 0) {
                    accumulate(cid, g.middleRows(off, p.rows()));
                    off += p.rows();
                } else {
                    accumulate(cid, g.middleCols(off, p.cols()));
                    off += p.cols();
                }
            }
            break;
        }
        case Op::Slice: {
            const Matrix& a = in_val(0);
            Matrix da = Matrix::Zero(a.rows(), a.cols());
            da.block(n.r0, n.c0, n.nr, n.nc) = g;
            accumulate(n.in[0], da);
            break;
        }
        case Op::Tanh: {
            Matrix da = g.cwiseProduct(Matrix::Ones(g.rows(), g.cols()) - n.value.cwiseProduct(n.value));
            accumulate(n.in[0], da);
            break;
        }
        case Op::Artanh: {
            const Matrix& a = in_val(0);
            Matrix da = (a.array().abs() < kArtanhEdge)
                            .select(g.array() / (1.0 - a.array().square()), 0.0);
            accumulate(n.in[0], da);
            break;
        }
        case Op::Sinh: {
            accumulate(n.in[0], g.cwiseProduct(in_val(0).array().cosh().matrix()));
            break;
        }
        case Op::Asinh: {
            const Matrix& a = in_val(0);
            Matrix da = g.array() / (a.array().square() + 1.0).sqrt();
            accumulate(n.in[0], da);
            break;
        }
        case Op::Cosh: {
            accumulate(n.in[0], g.cwiseProduct(in_val(0).array().sinh().matrix()));
            break;
        }
        case Op::Acos: {
            const Matrix& a = in_val(0);
            auto xd = a.array().min(kAsinEdge).max(-kAsinEdge);
            Matrix da = -g.array() / (1.0 - xd.square()).sqrt();
            accumulate(n.in[0], da);
            break;
        }
        case Op::Asin: {
            const Matrix& a = in_val(0);
            auto xd = a.array().min(kAsinEdge).max(-kAsinEdge);
            Matrix da = g.array() / (1.0 - xd.square()).sqrt();
            accumulate(n.in[0], da);
            break;
        }
        case Op::Sqrt: {
            const Matrix& a = in_val(0);
            Matrix da = (a.array() > 0.0).select(0.5 * g.array() / n.value.array(), 0.0);
            accumulate(n.in[0], da);
            break;
        }
        case Op::Exp: {
            accumulate(n.in[0], g.cwiseProduct(n.value));
            break;
        }
        case Op::Log: {
            const Matrix& a = in_val(0);
            Matrix da = (a.array() > kLogFloor).select(g.array() / a.array(), 0.0);
            accumulate(n.in[0], da);
            break;
        }
        case Op::Softmax: {
            const Matrix& y = n.value;
            Matrix gy = g.cwiseProduct(y);
            Eigen::VectorXd row_dots = gy.rowwise().sum();
            Matrix da = gy - (y.array().colwise() * row_dots.array()).matrix();
            accumulate(n.in[0], da);
            break;
        }
        case Op::LayerNorm: {
            const Matrix& gamma = in_val(1);
            const Eigen::Index m = n.value.rows(), c = n.value.cols();
            Matrix xhat = n.cached.leftCols(c);
            Eigen::VectorXd inv_std = n.cached.col(c);
            Matrix dxhat = g.array().rowwise() * gamma.row(0).array();
            Eigen::VectorXd s1 = dxhat.rowwise().sum();
            Eigen::VectorXd s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
            Matrix dx = dxhat * static_cast<double>(c);
            dx.colwise() -= s1;
            dx -= (xhat.array().colwise() * s2.array()).matrix();
            dx.array().colwise() *= (inv_std / static_cast<double>(c)).array();
            accumulate(n.in[0], dx);
            (void)m;
            accumulate(n.in[1], g.cwiseProduct(xhat).colwise().sum());
            accumulate(n.in[2], g.colwise().sum());
            break;
        }
        case Op::EmbeddingLookup: {
            const Matrix& table = in_val(0);
            Matrix dt = Matrix::Zero(table.rows(), table.cols());
            for (std::size_t k = 0; k < n.lookup.size(); ++k)
                dt.row(n.lookup[k]) += g.row(static_cast<Eigen::Index>(k));
            accumulate(n.in[0], dt);
            break;
        }
        case Op::Clamp: {
            const Matrix& a = in_val(0);
            Matrix da = ((a.array() > n.lo) && (a.array() < n.hi)).select(g, Matrix::Zero(g.rows(), g.cols()));
            accumulate(n.in[0], da);
            break;
        }
        case Op::Max0: {
            const Matrix& a = in_val(0);
            Matrix da = (a.array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols()));
            accumulate(n.in[0], da);
            break;
        }
    }
}

namespace {

Tape* common_tape(Var a, Var b, Op op) {
    if (!a.valid() || !b.valid()) throw ValidationError(std::string(op_name(op)) + ": empty Var");
    if (a.tape != b.tape) throw ValidationError(std::string(op_name(op)) + ": operands from different tapes");
    return a.tape;
}

Var binary_elementwise(Op op, Var a, Var b) {
    Tape* t = common_tape(a, b, op);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    Eigen::Index r, c;
    if (!broadcastable(av, bv, r, c)) shape_error(op, av, bv);
    Tape::Node n;
    n.op = op;
    n.in = {a.id, b.id, -1};
    const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
    if (same) {
        switch (op) {
            case Op::Add: n.value = av + bv; break;
            case Op::Sub: n.value = av - bv; break;
            case Op::Mul: n.value = av.cwiseProduct(bv); break;
            case Op::Div: n.value = av.cwiseQuotient(bv); break;
            default: throw ValidationError("not an elementwise op");
        }
    } else {
        Matrix ab = broadcast_to(av, r, c);
        Matrix bb = broadcast_to(bv, r, c);
        switch (op) {
            case Op::Add: n.value = ab + bb; break;
            case Op::Sub: n.value = ab - bb; break;
            case Op::Mul: n.value = ab.cwiseProduct(bb); break;
            case Op::Div: n.value = ab.cwiseQuotient(bb); break;
            default: throw ValidationError("not an elementwise op");
        }
    }
    return t->emit(std::move(n));
}

template <class Fwd>
Var unary(Op op, Var a, Fwd&& fwd) {
    if (!a.valid()) throw ValidationError(std::string(op_name(op)) + ": empty Var");
    Tape::Node n;
    n.op = op;
    n.in = {a.id, -1, -1};
    n.value = fwd(a.value());
    return a.tape->emit(std::move(n));
}

} // namespace

Var add(Var a, Var b) { return binary_elementwise(Op::Add, a, b); }
Var sub(Var a, Var b) { return binary_elementwise(Op::Sub, a, b); }
Var mul(Var a, Var b) { return binary_elementwise(Op::Mul, a, b); }
Var div(Var a, Var b) { return binary_elementwise(Op::Div, a, b); }

Var add_scalar(Var a, double s) { return add(a, a.tape->scalar(s)); }
Var mul_scalar(Var a, double s) { return mul(a, a.tape->scalar(s)); }
Var neg(Var a) { return mul_scalar(a, -1.0); }

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
    Tape* t = common_tape(a, b, Op::MatMul);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    const Eigen::Index ak = trans_a ? av.rows() : av.cols();
    const Eigen::Index bk = trans_b ? bv.cols() : bv.rows();
    if (ak != bk) shape_error(Op::MatMul, av, bv);
    Tape::Node n;
    n.op = Op::MatMul;
    n.in = {a.id, b.id, -1};
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    if (!trans_a && !trans_b) n.value = av * bv;
    else if (!trans_a && trans_b) n.value = av * bv.transpose();
    else if (trans_a && !trans_b) n.value = av.transpose() * bv;
    else n.value = av.transpose() * bv.transpose();
    return t->emit(std::move(n));
}

Var transpose(Var a) {
    Matrix eye = Matrix::Identity(a.rows(), a.rows());
    return matmul(a, a.tape->constant(std::move(eye)), true, false);
}

Var sum(Var a, Axis axis) {
    Tape::Node n;
    n.op = Op::Sum;
    n.in = {a.id, -1, -1};
    n.axis = axis;
    const Matrix& av = a.value();
    switch (axis) {
        case Axis::All: n.value = Matrix::Constant(1, 1, av.sum()); break;
        case Axis::Rows: n.value = av.colwise().sum(); break;
        case Axis::Cols: n.value = av.rowwise().sum(); break;
    }
    return a.tape->emit(std::move(n));
}

Var mean(Var a) {
    Tape::Node n;
    n.op = Op::Mean;
    n.in = {a.id, -1, -1};
    n.value = Matrix::Constant(1, 1, a.value().mean());
    return a.tape->emit(std::move(n));
}

Var norm(Var a, Axis axis) {
    Tape::Node n;
    n.op = Op::Norm;
    n.in = {a.id, -1, -1};
    n.axis = axis;
    const Matrix& av = a.value();
    switch (axis) {
        case Axis::All: n.value = Matrix::Constant(1, 1, av.norm()); break;
        case Axis::Rows: n.value = av.colwise().norm(); break;
        case Axis::Cols: n.value = av.rowwise().norm(); break;
    }
    return a.tape->emit(std::move(n));
}

Var dot(Var a, Var b) {
    Tape* t = common_tape(a, b, Op::Dot);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(Op::Dot, av, bv);
    Tape::Node n;
    n.op = Op::Dot;
    n.in = {a.id, b.id, -1};
    n.value = Matrix::Constant(1, 1, av.cwiseProduct(bv).sum());
    return t->emit(std::move(n));
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ValidationError("concat: no operands");
    if (axis != 0 && axis != 1) throw ValidationError("concat: axis must be 0 or 1");
    Tape* t = parts.front().tape;
    Eigen::Index total = 0;
    for (const Var& p : parts) {
        if (p.tape != t) throw ValidationError("concat: operands from different tapes");
        if (axis == 0) {
            if (p.cols() != parts.front().cols())
                shape_error(Op::Concat, parts.front().value(), p.value());
            total += p.rows();
        } else {
            if (p.rows() != parts.front().rows())
                shape_error(Op::Concat, parts.front().value(), p.value());
            total += p.cols();
        }
    }
    Tape::Node n;
    n.op = Op::Concat;
    n.concat_axis = axis;
    for (std::size_t i = 0; i < parts.size() && i < 3; ++i) n.in[i] = parts[i].id;
    for (std::size_t i = 3; i < parts.size(); ++i) n.extra_in.push_back(parts[i].id);
    if (axis == 0) {
        n.value.resize(total, parts.front().cols());
        Eigen::Index off = 0;
        for (const Var& p : parts) {
            n.value.middleRows(off, p.rows()) = p.value();
            off += p.rows();
        }
    } else {
        n.value.resize(parts.front().rows(), total);
        Eigen::Index off = 0;
        for (const Var& p : parts) {
            n.value.middleCols(off, p.cols()) = p.value();
            off += p.cols();
        }
    }
    return t->emit(std::move(n));
}

Var slice(Var a, int r0, int nr, int c0, int nc) {
    const Matrix& av = a.value();
    if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > av.rows() || c0 + nc > av.cols())
        throw ValidationError("slice: block [" + std::to_string(r0) + "," + std::to_string(nr) +
                              "," + std::to_string(c0) + "," + std::to_string(nc) +
                              "] outside " + shape_str(av));
    Tape::Node n;
    n.op = Op::Slice;
    n.in = {a.id, -1, -1};
    n.r0 = r0; n.nr = nr; n.c0 = c0; n.nc = nc;
    n.value = av.block(r0, c0, nr, nc);
    return a.tape->emit(std::move(n));
}

Var slice_rows(Var a, int r0, int nr) { return slice(a, r0, nr, 0, static_cast<int>(a.cols())); }
Var slice_cols(Var a, int c0, int nc) { return slice(a, 0, static_cast<int>(a.rows()), c0, nc); }

Var tanh(Var a) {
    return unary(Op::Tanh, a, [](const Matrix& x) -> Matrix { return x.array().tanh(); });
}

Var artanh(Var a) {
    return unary(Op::Artanh, a, [](const Matrix& x) -> Matrix {
        return x.array().min(kArtanhEdge).max(-kArtanhEdge).atanh();
    });
}

Var sinh(Var a) {
    return unary(Op::Sinh, a, [](const Matrix& x) -> Matrix { return x.array().sinh(); });
}

Var asinh(Var a) {
    return unary(Op::Asinh, a, [](const Matrix& x) -> Matrix {
        return x.unaryExpr([](double v) { return std::asinh(v); });
    });
}

Var cosh(Var a) {
    return unary(Op::Cosh, a, [](const Matrix& x) -> Matrix { return x.array().cosh(); });
}

Var acos(Var a) {
    return unary(Op::Acos, a, [](const Matrix& x) -> Matrix {
        return x.array().min(1.0).max(-1.0).acos();
    });
}

Var asin(Var a) {
    return unary(Op::Asin, a, [](const Matrix& x) -> Matrix {
        return x.array().min(1.0).max(-1.0).asin();
    });
}

Var sqrt(Var a) {
    return unary(Op::Sqrt, a, [](const Matrix& x) -> Matrix { return x.array().max(0.0).sqrt(); });
}

Var exp(Var a) {
    return unary(Op::Exp, a, [](const Matrix& x) -> Matrix { return x.array().exp(); });
}

Var log(Var a) {
    return unary(Op::Log, a, [](const Matrix& x) -> Matrix { return x.array().max(kLogFloor).log(); });
}

Var max0(Var a) {
    return unary(Op::Max0, a, [](const Matrix& x) -> Matrix { return x.array().max(0.0); });
}

Var clamp(Var a, double lo, double hi) {
    if (!(lo <= hi)) throw ValidationError("clamp: lo > hi");
    Tape::Node n;
    n.op = Op::Clamp;
    n.in = {a.id, -1, -1};
    n.lo = lo;
    n.hi = hi;
    n.value = a.value().array().max(lo).min(hi);
    return a.tape->emit(std::move(n));
}

Var softmax(Var a) {
    const Matrix& x = a.value();
    Matrix y = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
    y.array().colwise() /= y.rowwise().sum().array();
    Tape::Node n;
    n.op = Op::Softmax;
    n.in = {a.id, -1, -1};
    n.value = std::move(y);
    return a.tape->emit(std::move(n));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape* t = common_tape(x, gamma, Op::LayerNorm);
    common_tape(gamma, beta, Op::LayerNorm);
    const Matrix& xv = x.value();
    const Matrix& gv = gamma.value();
    const Matrix& bv = beta.value();
    if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols())
        throw ValidationError("layer_norm: gamma/beta must be 1x" + std::to_string(xv.cols()));
    const Eigen::Index m = xv.rows(), c = xv.cols();
    Matrix cached(m, c + 1);
    Eigen::VectorXd mu = xv.rowwise().mean();
    Matrix centered = xv.colwise() - mu;
    Eigen::VectorXd inv_std =
        (centered.rowwise().squaredNorm() / static_cast<double>(c)).array() + eps;
    inv_std = inv_std.array().rsqrt();
    cached.leftCols(c) = centered.array().colwise() * inv_std.array();
    cached.col(c) = inv_std;
    Matrix out = (cached.leftCols(c).array().rowwise() * gv.row(0).array()).rowwise() +
                 bv.row(0).array();
    Tape::Node n;
    n.op = Op::LayerNorm;
    n.in = {x.id, gamma.id, beta.id};
    n.value = std::move(out);
    n.cached = std::move(cached);
    return t->emit(std::move(n));
}

Var embedding_lookup(Var table, const std::vector<int>& ids) {
    const Matrix& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] < 0 || ids[k] >= tv.rows())
            throw ValidationError("embedding_lookup: id " + std::to_string(ids[k]) +
                                  " outside table with " + std::to_string(tv.rows()) + " rows");
        out.row(static_cast<Eigen::Index>(k)) = tv.row(ids[k]);
    }
    Tape::Node n;
    n.op = Op::EmbeddingLookup;
    n.in = {table.id, -1, -1};
    n.lookup = ids;
    n.value = std::move(out);
    return table.tape->emit(std::move(n));
}

GradCheckResult grad_check(const DiffFn& f, const std::vector<Matrix>& inputs,
                           const GradCheckOptions& opts) {
    GradCheckResult result;
    if (opts.on_boundary && opts.on_boundary(inputs)) {
        result.skipped = true;
        result.reason = "inputs on a non-differentiable boundary";
        return result;
    }

    auto eval = [&](const std::vector<Matrix>& xs) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(xs.size());
        for (const Matrix& x : xs) vars.push_back(tape.input(x, false));
        Var out = f(tape, vars);
        if (out.value().size() != 1) throw ValidationError("grad_check: function must be scalar");
        return out.value()(0, 0);
    };

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Matrix& x : inputs) vars.push_back(tape.input(x, true));
    Var out = f(tape, vars);
    if (out.value().size() != 1) throw ValidationError("grad_check: function must be scalar");
    tape.backward(out);

    std::mt19937_64 rng(opts.seed);
    std::vector<Matrix> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Matrix analytic = tape.grad(vars[i]);
        const Eigen::Index n = inputs[i].size();
        std::vector<Eigen::Index> coords;
        if (opts.max_coords_per_input > 0 && n > opts.max_coords_per_input) {
            std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
            for (int k = 0; k < opts.max_coords_per_input; ++k) coords.push_back(pick(rng));
        } else {
            coords.resize(static_cast<std::size_t>(n));
            for (Eigen::Index k = 0; k < n; ++k) coords[static_cast<std::size_t>(k)] = k;
        }
        for (Eigen::Index idx : coords) {
            const double orig = work[i](idx);
            work[i](idx) = orig + opts.step;
            const double fp = eval(work);
            work[i](idx) = orig - opts.step;
            const double fm = eval(work);
            work[i](idx) = orig;
            const double cd = (fp - fm) / (2.0 * opts.step);
            const double err = std::abs(analytic(idx) - cd) / std::max(1.0, std::abs(cd));
            result.max_rel_err = std::max(result.max_rel_err, err);
        }
    }
    return result;
}

} // namespace codonball::diff
