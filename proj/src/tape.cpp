#include "xmc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace xmc::ad {

namespace {

constexpr double kGeluC1 = 0.79788456080286535588;  // sqrt(2/pi)
constexpr double kGeluC2 = 0.044715;

double gelu_forward(double x) {
    double u = kGeluC1 * (x + kGeluC2 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
    double u = kGeluC1 * (x + kGeluC2 * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC1 * (1.0 + 3.0 * kGeluC2 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw XmcError(msg);
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Constant: return "constant";
        case Op::Input: return "input";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "multiply";
        case Op::Div: return "divide";
        case Op::Affine: return "affine";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Abs: return "abs";
        case Op::Clamp: return "clamp";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Gelu: return "gelu";
        case Op::SoftmaxRows: return "softmax";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::SliceCols: return "slice_cols";
        case Op::ConcatCols: return "concat_cols";
        case Op::GatherRows: return "embedding-gather";
        case Op::ScatterRows: return "scatter_rows";
        case Op::RowSum: return "row_sum";
        case Op::RowMean: return "row_mean";
        case Op::ColSum: return "col_sum";
        case Op::BroadcastCol: return "broadcast_col";
        case Op::BroadcastRow: return "broadcast_row";
        case Op::SumAll: return "sum";
        case Op::BroadcastScalar: return "broadcast_scalar";
    }
    return "?";
}

// Forward kernel shared by eager recording and replay, so replayed
// activations are bit-identical to the cached ones.
Tensor eval_node(const Node& n, const std::vector<Tensor>& vals, Tensor* aux_out) {
    auto unary = [&](auto f) {
        Tensor out = vals[0];
        for (double& v : out.data()) v = f(v);
        return out;
    };
    auto binary = [&](auto f) {
        Tensor out = vals[0];
        const Tensor& y = vals[1];
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(out[i], y[i]);
        return out;
    };

    switch (n.op) {
        case Op::Constant:
        case Op::Input:
            return n.value;
        case Op::Add: return binary([](double a, double b) { return a + b; });
        case Op::Sub: return binary([](double a, double b) { return a - b; });
        case Op::Mul: return binary([](double a, double b) { return a * b; });
        case Op::Div: return binary([](double a, double b) { return a / b; });
        case Op::Affine: return unary([&](double v) { return n.a * v + n.b; });
        case Op::Log: return unary([](double v) { return std::log(v); });
        case Op::Sqrt: return unary([](double v) { return std::sqrt(v); });
        case Op::Abs: {
            Tensor out = vals[0];
            Tensor sign({out.rows(), out.cols()});
            for (std::size_t i = 0; i < out.numel(); ++i) {
                sign[i] = out[i] < 0.0 ? -1.0 : 1.0;
                out[i] = std::abs(out[i]);
            }
            if (aux_out) *aux_out = std::move(sign);
            return out;
        }
        case Op::Clamp: {
            Tensor out = vals[0];
            Tensor mask({out.rows(), out.cols()});
            for (std::size_t i = 0; i < out.numel(); ++i) {
                mask[i] = (out[i] > n.a && out[i] < n.b) ? 1.0 : 0.0;
                out[i] = std::min(std::max(out[i], n.a), n.b);
            }
            if (aux_out) *aux_out = std::move(mask);
            return out;
        }
        case Op::Sigmoid: return unary([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        case Op::Tanh: return unary([](double v) { return std::tanh(v); });
        case Op::Gelu: return unary([](double v) { return gelu_forward(v); });
        case Op::SoftmaxRows: {
            Tensor out = vals[0];
            std::size_t r = out.rows(), c = out.cols();
            for (std::size_t i = 0; i < r; ++i) {
                double* row = out.data().data() + i * c;
                double m = row[0];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    row[j] = std::exp(row[j] - m);
                    s += row[j];
                }
                for (std::size_t j = 0; j < c; ++j) row[j] /= s;
            }
            return out;
        }
        case Op::MatMul: {
            const Tensor& A = vals[0];
            const Tensor& B = vals[1];
            std::size_t m = A.rows(), k = A.cols(), c = B.cols();
            Tensor out({m, c});
            const double* a = A.data().data();
            const double* b = B.data().data();
            double* o = out.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = a + i * k;
                double* orow = o + i * c;
                for (std::size_t p = 0; p < k; ++p) {
                    double av = arow[p];
                    if (av == 0.0) continue;
                    const double* brow = b + p * c;
                    for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
                }
            }
            return out;
        }
        case Op::Transpose: {
            const Tensor& x = vals[0];
            Tensor out({x.cols(), x.rows()});
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
            return out;
        }
        case Op::SliceCols: {
            const Tensor& x = vals[0];
            std::size_t w = static_cast<std::size_t>(n.i1 - n.i0);
            Tensor out({x.rows(), w});
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, static_cast<std::size_t>(n.i0) + j);
            return out;
        }
        case Op::ConcatCols: {
            std::size_t r = vals[0].rows(), total = 0;
            for (const Tensor& t : vals) total += t.cols();
            Tensor out({r, total});
            std::size_t off = 0;
            for (const Tensor& t : vals) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < t.cols(); ++j) out.at(i, off + j) = t.at(i, j);
                off += t.cols();
            }
            return out;
        }
        case Op::GatherRows: {
            const Tensor& table = vals[0];
            Tensor out({n.rows.size(), table.cols()});
            for (std::size_t i = 0; i < n.rows.size(); ++i)
                for (std::size_t j = 0; j < table.cols(); ++j)
                    out.at(i, j) = table.at(static_cast<std::size_t>(n.rows[i]), j);
            return out;
        }
        case Op::ScatterRows: {
            const Tensor& x = vals[0];
            Tensor out({static_cast<std::size_t>(n.i0), x.cols()});
            for (std::size_t i = 0; i < n.rows.size(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    out.at(static_cast<std::size_t>(n.rows[i]), j) += x.at(i, j);
            return out;
        }
        case Op::RowSum:
        case Op::RowMean: {
            const Tensor& x = vals[0];
            Tensor out({x.rows(), 1});
            double inv = n.op == Op::RowMean ? 1.0 / static_cast<double>(x.cols()) : 1.0;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j);
                out.at(i, 0) = s * inv;
            }
            return out;
        }
        case Op::ColSum: {
            const Tensor& x = vals[0];
            Tensor out({1, x.cols()});
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) out.at(0, j) += x.at(i, j);
            return out;
        }
        case Op::BroadcastCol: {
            const Tensor& x = vals[0];
            Tensor out({x.rows(), static_cast<std::size_t>(n.i0)});
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) = x.at(i, 0);
            return out;
        }
        case Op::BroadcastRow: {
            const Tensor& x = vals[0];
            Tensor out({static_cast<std::size_t>(n.i0), x.cols()});
            for (std::size_t i = 0; i < out.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(0, j);
            return out;
        }
        case Op::SumAll: {
            double s = 0.0;
            for (double v : vals[0].data()) s += v;
            return Tensor::scalar(s);
        }
        case Op::BroadcastScalar: {
            return Tensor::full(static_cast<std::size_t>(n.i0), static_cast<std::size_t>(n.i1), vals[0].item());
        }
    }
    throw XmcError("eval_node: unhandled op");
}

NodeId Tape::push(Node n) {
    std::vector<Tensor> vals;
    vals.reserve(n.parents.size());
    for (NodeId p : n.parents) vals.push_back(nodes_[static_cast<std::size_t>(p)].value);
    if (n.op != Op::Constant && n.op != Op::Input) {
        n.value = eval_node(n, vals, &n.aux);
    }
    n.gradient_rule = gradient_rule_depth_ > 0;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_exists(NodeId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(),
            "tape: node id " + std::to_string(id) + " out of range");
}

NodeId Tape::constant(Tensor v) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(v);
    return push(std::move(n));
}

NodeId Tape::input(Tensor v) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(v);
    NodeId id = push(std::move(n));
    inputs_.push_back(id);
    return id;
}

namespace {
void check_same_shape(const Tape& t, Op op, NodeId x, NodeId y) {
    if (!t.value(x).same_shape(t.value(y))) {
        throw XmcError(std::string(op_name(op)) + ": shape mismatch " + t.value(x).shape_str() + " vs " +
                       t.value(y).shape_str());
    }
}
}  // namespace

NodeId Tape::add(NodeId x, NodeId y) {
    check_exists(x); check_exists(y); check_same_shape(*this, Op::Add, x, y);
    return push({Op::Add, {x, y}});
}
NodeId Tape::sub(NodeId x, NodeId y) {
    check_exists(x); check_exists(y); check_same_shape(*this, Op::Sub, x, y);
    return push({Op::Sub, {x, y}});
}
NodeId Tape::mul(NodeId x, NodeId y) {
    check_exists(x); check_exists(y); check_same_shape(*this, Op::Mul, x, y);
    return push({Op::Mul, {x, y}});
}
NodeId Tape::div(NodeId x, NodeId y) {
    check_exists(x); check_exists(y); check_same_shape(*this, Op::Div, x, y);
    return push({Op::Div, {x, y}});
}
NodeId Tape::affine(NodeId x, double scale, double shift) {
    check_exists(x);
    Node n{Op::Affine, {x}};
    n.a = scale; n.b = shift;
    return push(std::move(n));
}
NodeId Tape::log(NodeId x) { check_exists(x); return push({Op::Log, {x}}); }
NodeId Tape::sqrt(NodeId x) { check_exists(x); return push({Op::Sqrt, {x}}); }
NodeId Tape::abs(NodeId x) { check_exists(x); return push({Op::Abs, {x}}); }
NodeId Tape::clamp(NodeId x, double lo, double hi) {
    check_exists(x);
    require(lo <= hi, "clamp: lo > hi");
    Node n{Op::Clamp, {x}};
    n.a = lo; n.b = hi;
    return push(std::move(n));
}
NodeId Tape::sigmoid(NodeId x) { check_exists(x); return push({Op::Sigmoid, {x}}); }
NodeId Tape::tanh(NodeId x) { check_exists(x); return push({Op::Tanh, {x}}); }
NodeId Tape::gelu(NodeId x) { check_exists(x); return push({Op::Gelu, {x}}); }
NodeId Tape::softmax_rows(NodeId x) { check_exists(x); return push({Op::SoftmaxRows, {x}}); }

NodeId Tape::matmul(NodeId x, NodeId y) {
    check_exists(x); check_exists(y);
    require(value(x).cols() == value(y).rows(), "matmul: shape mismatch " + value(x).shape_str() + " vs " +
                                                    value(y).shape_str());
    return push({Op::MatMul, {x, y}});
}
NodeId Tape::transpose(NodeId x) { check_exists(x); return push({Op::Transpose, {x}}); }

NodeId Tape::slice_cols(NodeId x, int c0, int c1) {
    check_exists(x);
    require(c0 >= 0 && c1 > c0 && static_cast<std::size_t>(c1) <= value(x).cols(),
            "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") invalid for " +
                value(x).shape_str());
    Node n{Op::SliceCols, {x}};
    n.i0 = c0; n.i1 = c1;
    return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    require(!parts.empty(), "concat_cols: empty part list");
    for (NodeId p : parts) check_exists(p);
    std::size_t r = value(parts[0]).rows();
    for (NodeId p : parts) require(value(p).rows() == r, "concat_cols: row mismatch");
    Node n{Op::ConcatCols, parts};
    return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId table, const std::vector<int>& rows) {
    check_exists(table);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && static_cast<std::size_t>(rows[i]) < value(table).rows(),
                "embedding-gather: row index " + std::to_string(rows[i]) + " at position " + std::to_string(i) +
                    " out of range for table " + value(table).shape_str());
    }
    Node n{Op::GatherRows, {table}};
    n.rows = rows;
    return push(std::move(n));
}

NodeId Tape::scatter_rows(NodeId x, const std::vector<int>& rows, int out_rows) {
    check_exists(x);
    require(rows.size() == value(x).rows(), "scatter_rows: index count mismatch");
    for (int r : rows) require(r >= 0 && r < out_rows, "scatter_rows: row index out of range");
    Node n{Op::ScatterRows, {x}};
    n.rows = rows;
    n.i0 = out_rows;
    return push(std::move(n));
}

NodeId Tape::row_sum(NodeId x) { check_exists(x); return push({Op::RowSum, {x}}); }
NodeId Tape::row_mean(NodeId x) { check_exists(x); return push({Op::RowMean, {x}}); }
NodeId Tape::col_sum(NodeId x) { check_exists(x); return push({Op::ColSum, {x}}); }

NodeId Tape::broadcast_col(NodeId x, int d) {
    check_exists(x);
    require(value(x).cols() == 1, "broadcast_col: source must be N x 1, got " + value(x).shape_str());
    Node n{Op::BroadcastCol, {x}};
    n.i0 = d;
    return push(std::move(n));
}

NodeId Tape::broadcast_row(NodeId x, int r) {
    check_exists(x);
    require(value(x).rows() == 1, "broadcast_row: source must be 1 x D, got " + value(x).shape_str());
    Node n{Op::BroadcastRow, {x}};
    n.i0 = r;
    return push(std::move(n));
}

NodeId Tape::sum_all(NodeId x) { check_exists(x); return push({Op::SumAll, {x}}); }

NodeId Tape::mean_all(NodeId x) {
    check_exists(x);
    return affine(sum_all(x), 1.0 / static_cast<double>(value(x).numel()), 0.0);
}

NodeId Tape::broadcast_scalar(NodeId x, int r, int c) {
    check_exists(x);
    require(value(x).numel() == 1, "broadcast_scalar: source must be scalar");
    Node n{Op::BroadcastScalar, {x}};
    n.i0 = r; n.i1 = c;
    return push(std::move(n));
}

NodeId Tape::l2_norm(NodeId x, double eps) {
    return sqrt(affine(sum_all(mul(x, x)), 1.0, eps));
}

NodeId Tape::l1_norm(NodeId x) { return sum_all(abs(x)); }

NodeId Tape::layernorm_row(NodeId x, NodeId gamma, NodeId beta, double eps) {
    check_exists(x); check_exists(gamma); check_exists(beta);
    int d = static_cast<int>(value(x).cols());
    require(value(gamma).rows() == 1 && value(gamma).cols() == static_cast<std::size_t>(d),
            "layernorm: gamma must be 1 x D");
    require(value(beta).rows() == 1 && value(beta).cols() == static_cast<std::size_t>(d),
            "layernorm: beta must be 1 x D");
    int r = static_cast<int>(value(x).rows());
    // Built from primitives so double backward is exact; DeepLift applies
    // the plain-gradient rule throughout (layernorm is not elementwise).
    GradientRuleScope scope(*this);
    NodeId mu = broadcast_col(row_mean(x), d);
    NodeId xc = sub(x, mu);
    NodeId var = row_mean(mul(xc, xc));
    NodeId sd = sqrt(affine(var, 1.0, eps));
    NodeId xh = div(xc, broadcast_col(sd, d));
    return add(mul(xh, broadcast_row(gamma, r)), broadcast_row(beta, r));
}

NodeId Tape::apply(const std::string& primitive, const std::vector<NodeId>& args) {
    auto arity = [&](std::size_t n) {
        require(args.size() == n, primitive + ": expected " + std::to_string(n) + " operand(s), got " +
                                      std::to_string(args.size()));
    };
    if (primitive == "add") { arity(2); return add(args[0], args[1]); }
    if (primitive == "sub") { arity(2); return sub(args[0], args[1]); }
    if (primitive == "multiply") { arity(2); return mul(args[0], args[1]); }
    if (primitive == "divide") { arity(2); return div(args[0], args[1]); }
    if (primitive == "matmul") { arity(2); return matmul(args[0], args[1]); }
    if (primitive == "transpose") { arity(1); return transpose(args[0]); }
    if (primitive == "softmax") { arity(1); return softmax_rows(args[0]); }
    if (primitive == "sigmoid") { arity(1); return sigmoid(args[0]); }
    if (primitive == "tanh") { arity(1); return tanh(args[0]); }
    if (primitive == "gelu") { arity(1); return gelu(args[0]); }
    if (primitive == "log") { arity(1); return log(args[0]); }
    if (primitive == "abs") { arity(1); return abs(args[0]); }
    if (primitive == "clamp") { arity(1); return clamp(args[0], 0.0, 1.0); }
    if (primitive == "sum") { arity(1); return sum_all(args[0]); }
    if (primitive == "mean") { arity(1); return mean_all(args[0]); }
    if (primitive == "l1_norm") { arity(1); return l1_norm(args[0]); }
    if (primitive == "l2_norm") { arity(1); return l2_norm(args[0]); }
    throw XmcError("unsupported primitive: " + primitive);
}

std::unordered_map<NodeId, NodeId> Tape::backward_nodes(NodeId output, NodeId seed) {
    check_exists(output);
    check_exists(seed);
    require(value(seed).same_shape(value(output)),
            "backward: seed shape " + value(seed).shape_str() + " does not match output " +
                value(output).shape_str());

    // Ancestors of the output; only they receive gradient contributions.
    std::vector<char> reach(nodes_.size(), 0);
    std::deque<NodeId> work{output};
    reach[static_cast<std::size_t>(output)] = 1;
    while (!work.empty()) {
        NodeId id = work.front();
        work.pop_front();
        for (NodeId p : nodes_[static_cast<std::size_t>(id)].parents) {
            if (!reach[static_cast<std::size_t>(p)]) {
                reach[static_cast<std::size_t>(p)] = 1;
                work.push_back(p);
            }
        }
    }

    std::unordered_map<NodeId, NodeId> grad;
    grad[output] = seed;
    auto accumulate = [&](NodeId target, NodeId contrib) {
        auto it = grad.find(target);
        if (it == grad.end()) {
            grad[target] = contrib;
        } else {
            it->second = add(it->second, contrib);
        }
    };

    // New nodes created below get ids above `output`, so the fixed
    // id range keeps the sweep well-defined while the tape grows.
    for (NodeId id = output; id >= 0; --id) {
        if (!reach[static_cast<std::size_t>(id)]) continue;
        auto git = grad.find(id);
        if (git == grad.end()) continue;
        NodeId g = git->second;
        // Copy: pushing gradient nodes below may reallocate nodes_.
        const Node n = nodes_[static_cast<std::size_t>(id)];
        switch (n.op) {
            case Op::Constant:
            case Op::Input:
                break;
            case Op::Add:
                accumulate(n.parents[0], g);
                accumulate(n.parents[1], g);
                break;
            case Op::Sub:
                accumulate(n.parents[0], g);
                accumulate(n.parents[1], affine(g, -1.0, 0.0));
                break;
            case Op::Mul:
                accumulate(n.parents[0], mul(g, n.parents[1]));
                accumulate(n.parents[1], mul(g, n.parents[0]));
                break;
            case Op::Div: {
                // z = x / y: dx = g / y, dy = -g * z / y
                accumulate(n.parents[0], div(g, n.parents[1]));
                accumulate(n.parents[1], affine(div(mul(g, id), n.parents[1]), -1.0, 0.0));
                break;
            }
            case Op::Affine:
                accumulate(n.parents[0], affine(g, n.a, 0.0));
                break;
            case Op::Log:
                accumulate(n.parents[0], div(g, n.parents[0]));
                break;
            case Op::Sqrt:
                accumulate(n.parents[0], div(affine(g, 0.5, 0.0), id));
                break;
            case Op::Abs:
                accumulate(n.parents[0], mul(g, constant(n.aux)));
                break;
            case Op::Clamp:
                accumulate(n.parents[0], mul(g, constant(n.aux)));
                break;
            case Op::Sigmoid: {
                NodeId one_minus = affine(id, -1.0, 1.0);
                accumulate(n.parents[0], mul(g, mul(id, one_minus)));
                break;
            }
            case Op::Tanh:
                accumulate(n.parents[0], mul(g, affine(mul(id, id), -1.0, 1.0)));
                break;
            case Op::Gelu: {
                // Derivative rebuilt from the input so double backward
                // stays exact.
                NodeId x = n.parents[0];
                NodeId x2 = mul(x, x);
                NodeId inner = affine(add(x, affine(mul(x2, x), kGeluC2, 0.0)), kGeluC1, 0.0);
                NodeId t = tanh(inner);
                NodeId dt = affine(mul(t, t), -1.0, 1.0);
                NodeId du = affine(x2, kGeluC1 * 3.0 * kGeluC2, kGeluC1);
                NodeId term1 = affine(t, 0.5, 0.5);
                NodeId term2 = mul(affine(x, 0.5, 0.0), mul(dt, du));
                accumulate(n.parents[0], mul(g, add(term1, term2)));
                break;
            }
            case Op::SoftmaxRows: {
                NodeId gy = mul(g, id);
                NodeId s = broadcast_col(row_sum(gy), static_cast<int>(n.value.cols()));
                accumulate(n.parents[0], mul(id, sub(g, s)));
                break;
            }
            case Op::MatMul:
                accumulate(n.parents[0], matmul(g, transpose(n.parents[1])));
                accumulate(n.parents[1], matmul(transpose(n.parents[0]), g));
                break;
            case Op::Transpose:
                accumulate(n.parents[0], transpose(g));
                break;
            case Op::SliceCols: {
                const std::size_t src_rows = value(n.parents[0]).rows();
                const std::size_t src_cols = value(n.parents[0]).cols();
                std::vector<NodeId> parts;
                if (n.i0 > 0) parts.push_back(constant(Tensor({src_rows, static_cast<std::size_t>(n.i0)})));
                parts.push_back(g);
                if (static_cast<std::size_t>(n.i1) < src_cols)
                    parts.push_back(constant(Tensor({src_rows, src_cols - static_cast<std::size_t>(n.i1)})));
                accumulate(n.parents[0], parts.size() == 1 ? g : concat_cols(parts));
                break;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (NodeId p : n.parents) {
                    int w = static_cast<int>(value(p).cols());
                    accumulate(p, slice_cols(g, off, off + w));
                    off += w;
                }
                break;
            }
            case Op::GatherRows:
                accumulate(n.parents[0], scatter_rows(g, n.rows, static_cast<int>(value(n.parents[0]).rows())));
                break;
            case Op::ScatterRows:
                accumulate(n.parents[0], gather_rows(g, n.rows));
                break;
            case Op::RowSum:
                accumulate(n.parents[0], broadcast_col(g, static_cast<int>(value(n.parents[0]).cols())));
                break;
            case Op::RowMean: {
                int d = static_cast<int>(value(n.parents[0]).cols());
                accumulate(n.parents[0], affine(broadcast_col(g, d), 1.0 / d, 0.0));
                break;
            }
            case Op::ColSum:
                accumulate(n.parents[0], broadcast_row(g, static_cast<int>(value(n.parents[0]).rows())));
                break;
            case Op::BroadcastCol:
                accumulate(n.parents[0], row_sum(g));
                break;
            case Op::BroadcastRow:
                accumulate(n.parents[0], col_sum(g));
                break;
            case Op::SumAll: {
                const Tensor& src = value(n.parents[0]);
                accumulate(n.parents[0],
                           broadcast_scalar(g, static_cast<int>(src.rows()), static_cast<int>(src.cols())));
                break;
            }
            case Op::BroadcastScalar:
                accumulate(n.parents[0], sum_all(g));
                break;
        }
    }
    return grad;
}

GradientSet Tape::backward(NodeId output, const Tensor& seed) {
    NodeId seed_node = constant(seed);
    auto grad_nodes = backward_nodes(output, seed_node);
    GradientSet out;
    for (NodeId in : inputs_) {
        auto it = grad_nodes.find(in);
        if (it != grad_nodes.end()) {
            out.emplace(in, value(it->second));
        } else {
            out.emplace(in, Tensor(value(in).shape()));
        }
    }
    return out;
}

std::vector<Tensor> Tape::replay(const std::unordered_map<NodeId, Tensor>& input_overrides) const {
    std::vector<Tensor> vals(nodes_.size());
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op == Op::Input) {
            auto it = input_overrides.find(static_cast<NodeId>(id));
            if (it != input_overrides.end()) {
                require(it->second.same_shape(n.value), "replay: override shape " + it->second.shape_str() +
                                                            " does not match input " + n.value.shape_str());
                vals[id] = it->second;
                continue;
            }
            vals[id] = n.value;
            continue;
        }
        if (n.op == Op::Constant) {
            vals[id] = n.value;
            continue;
        }
        std::vector<Tensor> parent_vals;
        parent_vals.reserve(n.parents.size());
        for (NodeId p : n.parents) parent_vals.push_back(vals[static_cast<std::size_t>(p)]);
        vals[id] = eval_node(n, parent_vals, nullptr);
    }
    return vals;
}

ReferenceContext Tape::reference(const std::unordered_map<NodeId, Tensor>& input_overrides) const {
    ReferenceContext ctx;
    ctx.values = replay(input_overrides);
    ctx.topo_hash = topo_hash();
    return ctx;
}

std::uint64_t Tape::topo_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto fnv = [&](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ULL;
    };
    for (const Node& n : nodes_) {
        fnv(static_cast<std::uint64_t>(n.op));
        for (NodeId p : n.parents) fnv(static_cast<std::uint64_t>(p) + 1);
        fnv(n.value.rows());
        fnv(n.value.cols());
    }
    return h;
}

// ---------------------------------------------------------------------------

ForwardRecord forward_record(const Program& program, const std::map<std::string, Tensor>& inputs) {
    ForwardRecord fr;
    std::map<std::string, NodeId> ids;
    for (const auto& [name, tensor] : inputs) ids[name] = fr.tape.input(tensor);
    fr.input_ids = ids;
    fr.output = program.build(fr.tape, ids);
    if (fr.output < 0 || static_cast<std::size_t>(fr.output) >= fr.tape.size()) {
        throw XmcError("forward_record: program returned an invalid output node");
    }
    return fr;
}

std::map<std::string, Tensor> finite_diff_grad(const Program& program,
                                               const std::map<std::string, Tensor>& inputs, double h) {
    require(h > 0.0, "finite_diff_grad: step size must be positive");
    ForwardRecord fr = forward_record(program, inputs);
    require(fr.tape.value(fr.output).numel() == 1,
            "finite_diff_grad: program output is not scalar, shape " + fr.tape.value(fr.output).shape_str());

    std::map<std::string, Tensor> grads;
    for (const auto& [name, tensor] : inputs) {
        Tensor g({tensor.rows(), tensor.cols()});
        Tensor work = tensor;
        NodeId id = fr.input_ids.at(name);
        for (std::size_t i = 0; i < tensor.numel(); ++i) {
            double orig = work[i];
            work[i] = orig + h;
            double up = fr.tape.replay({{id, work}})[static_cast<std::size_t>(fr.output)].item();
            work[i] = orig - h;
            double down = fr.tape.replay({{id, work}})[static_cast<std::size_t>(fr.output)].item();
            work[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads[name] = std::move(g);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// DeepLift

namespace {

// Evaluates an op's vector-Jacobian product numerically at the actual
// activations by borrowing the forward kernels.
Tensor eval_like(Op op, const std::vector<Tensor>& vals, int i0 = 0, int i1 = 0,
                 const std::vector<int>* rows = nullptr) {
    Node n;
    n.op = op;
    n.i0 = i0;
    n.i1 = i1;
    if (rows) n.rows = *rows;
    return eval_node(n, vals, nullptr);
}

Tensor ew(const Tensor& x, const std::function<double(double)>& f) {
    Tensor out = x;
    for (double& v : out.data()) v = f(v);
    return out;
}

Tensor ew2(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(out[i], b[i]);
    return out;
}

double unary_derivative(const Node& n, double x, double y) {
    switch (n.op) {
        case Op::Log: return 1.0 / x;
        case Op::Sqrt: return 0.5 / y;
        case Op::Abs: return x < 0.0 ? -1.0 : 1.0;
        case Op::Clamp: return (x > n.a && x < n.b) ? 1.0 : 0.0;
        case Op::Sigmoid: return y * (1.0 - y);
        case Op::Tanh: return 1.0 - y * y;
        case Op::Gelu: return gelu_derivative(x);
        default: throw XmcError("unary_derivative: not a unary nonlinearity");
    }
}

bool is_unary_nonlinear(Op op) {
    switch (op) {
        case Op::Log:
        case Op::Sqrt:
        case Op::Abs:
        case Op::Clamp:
        case Op::Sigmoid:
        case Op::Tanh:
        case Op::Gelu:
            return true;
        default:
            return false;
    }
}

}  // namespace

GradientSet deeplift_multipliers(const Tape& tape, const ReferenceContext& ref, NodeId output,
                                 int class_index) {
    if (ref.topo_hash != tape.topo_hash() || ref.values.size() != tape.size()) {
        throw XmcError("deeplift: reference context does not match tape topology");
    }
    const Tensor& out_val = tape.value(output);
    require(class_index >= 0 && static_cast<std::size_t>(class_index) < out_val.numel(),
            "deeplift: class index " + std::to_string(class_index) + " out of range for output " +
                out_val.shape_str());

    std::unordered_map<NodeId, Tensor> mult;
    Tensor seed({out_val.rows(), out_val.cols()});
    seed[static_cast<std::size_t>(class_index)] = 1.0;
    mult[output] = std::move(seed);

    auto accumulate = [&](NodeId target, Tensor contrib) {
        auto it = mult.find(target);
        if (it == mult.end()) {
            mult.emplace(target, std::move(contrib));
        } else {
            for (std::size_t i = 0; i < contrib.numel(); ++i) it->second[i] += contrib[i];
        }
    };

    for (NodeId id = output; id >= 0; --id) {
        auto mit = mult.find(id);
        if (mit == mult.end()) continue;
        Tensor m = mit->second;
        const Node& n = tape.node(id);
        if (n.op == Op::Constant || n.op == Op::Input) continue;
        NodeId p0 = n.parents.empty() ? -1 : n.parents[0];

        if (is_unary_nonlinear(n.op) && !n.gradient_rule) {
            // Rescale rule with the gradient fallback near zero difference.
            const Tensor& x = tape.value(p0);
            const Tensor& xr = ref.values[static_cast<std::size_t>(p0)];
            const Tensor& y = tape.value(id);
            const Tensor& yr = ref.values[static_cast<std::size_t>(id)];
            Tensor r({x.rows(), x.cols()});
            for (std::size_t i = 0; i < x.numel(); ++i) {
                double dx = x[i] - xr[i];
                r[i] = std::abs(dx) < 1e-10 ? unary_derivative(n, x[i], y[i]) : (y[i] - yr[i]) / dx;
            }
            accumulate(p0, ew2(m, r, [](double a, double b) { return a * b; }));
            continue;
        }

        switch (n.op) {
            case Op::Add:
                accumulate(n.parents[0], m);
                accumulate(n.parents[1], m);
                break;
            case Op::Sub:
                accumulate(n.parents[0], m);
                accumulate(n.parents[1], ew(m, [](double v) { return -v; }));
                break;
            case Op::Mul:
                accumulate(n.parents[0], ew2(m, tape.value(n.parents[1]), [](double a, double b) { return a * b; }));
                accumulate(n.parents[1], ew2(m, tape.value(n.parents[0]), [](double a, double b) { return a * b; }));
                break;
            case Op::Div: {
                const Tensor& y = tape.value(n.parents[1]);
                const Tensor& z = tape.value(id);
                accumulate(n.parents[0], ew2(m, y, [](double a, double b) { return a / b; }));
                Tensor gb = ew2(m, z, [](double a, double b) { return a * b; });
                accumulate(n.parents[1], ew2(gb, y, [](double a, double b) { return -a / b; }));
                break;
            }
            case Op::Affine:
                accumulate(p0, ew(m, [&](double v) { return n.a * v; }));
                break;
            case Op::SoftmaxRows: {
                const Tensor& y = tape.value(id);
                Tensor gy = ew2(m, y, [](double a, double b) { return a * b; });
                Tensor s = eval_like(Op::RowSum, {gy});
                Tensor sb = eval_like(Op::BroadcastCol, {s}, static_cast<int>(y.cols()));
                Tensor diff = ew2(m, sb, [](double a, double b) { return a - b; });
                accumulate(p0, ew2(y, diff, [](double a, double b) { return a * b; }));
                break;
            }
            case Op::MatMul: {
                Tensor bt = eval_like(Op::Transpose, {tape.value(n.parents[1])});
                Tensor at = eval_like(Op::Transpose, {tape.value(n.parents[0])});
                accumulate(n.parents[0], eval_like(Op::MatMul, {m, bt}));
                accumulate(n.parents[1], eval_like(Op::MatMul, {at, m}));
                break;
            }
            case Op::Transpose:
                accumulate(p0, eval_like(Op::Transpose, {m}));
                break;
            case Op::SliceCols: {
                const Tensor& src = tape.value(p0);
                Tensor g({src.rows(), src.cols()});
                for (std::size_t i = 0; i < src.rows(); ++i)
                    for (int j = n.i0; j < n.i1; ++j)
                        g.at(i, static_cast<std::size_t>(j)) = m.at(i, static_cast<std::size_t>(j - n.i0));
                accumulate(p0, std::move(g));
                break;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (NodeId p : n.parents) {
                    int w = static_cast<int>(tape.value(p).cols());
                    Tensor g({tape.value(p).rows(), static_cast<std::size_t>(w)});
                    for (std::size_t i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < w; ++j)
                            g.at(i, static_cast<std::size_t>(j)) = m.at(i, static_cast<std::size_t>(off + j));
                    accumulate(p, std::move(g));
                    off += w;
                }
                break;
            }
            case Op::GatherRows:
                accumulate(p0, eval_like(Op::ScatterRows, {m}, static_cast<int>(tape.value(p0).rows()), 0, &n.rows));
                break;
            case Op::ScatterRows:
                accumulate(p0, eval_like(Op::GatherRows, {m}, 0, 0, &n.rows));
                break;
            case Op::RowSum:
                accumulate(p0, eval_like(Op::BroadcastCol, {m}, static_cast<int>(tape.value(p0).cols())));
                break;
            case Op::RowMean: {
                double inv = 1.0 / static_cast<double>(tape.value(p0).cols());
                Tensor g = eval_like(Op::BroadcastCol, {m}, static_cast<int>(tape.value(p0).cols()));
                accumulate(p0, ew(g, [&](double v) { return v * inv; }));
                break;
            }
            case Op::ColSum:
                accumulate(p0, eval_like(Op::BroadcastRow, {m}, static_cast<int>(tape.value(p0).rows())));
                break;
            case Op::BroadcastCol:
                accumulate(p0, eval_like(Op::RowSum, {m}));
                break;
            case Op::BroadcastRow:
                accumulate(p0, eval_like(Op::ColSum, {m}));
                break;
            case Op::SumAll: {
                const Tensor& src = tape.value(p0);
                accumulate(p0, Tensor::full(src.rows(), src.cols(), m.item()));
                break;
            }
            case Op::BroadcastScalar:
                accumulate(p0, eval_like(Op::SumAll, {m}));
                break;
            default:
                // gradient_rule unary nonlinearity
                if (is_unary_nonlinear(n.op)) {
                    const Tensor& x = tape.value(p0);
                    const Tensor& y = tape.value(id);
                    Tensor r({x.rows(), x.cols()});
                    for (std::size_t i = 0; i < x.numel(); ++i) r[i] = unary_derivative(n, x[i], y[i]);
                    accumulate(p0, ew2(m, r, [](double a, double b) { return a * b; }));
                } else {
                    throw XmcError(std::string("deeplift: unhandled op ") + op_name(n.op));
                }
        }
    }

    GradientSet out;
    for (NodeId in : tape.inputs()) {
        auto it = mult.find(in);
        if (it != mult.end()) {
            out.emplace(in, it->second);
        } else {
            out.emplace(in, Tensor(tape.value(in).shape()));
        }
    }
    return out;
}

}  // namespace xmc::ad
