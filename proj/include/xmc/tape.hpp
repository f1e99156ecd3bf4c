#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmc/tensor.hpp"

namespace xmc::ad {

using NodeId = int;

enum class Op {
    Constant,
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Affine,       // a * x + b, elementwise
    Log,
    Sqrt,
    Abs,
    Clamp,        // bounds in (a, b); derivative mask cached at record time
    Sigmoid,
    Tanh,
    Gelu,         // tanh approximation
    SoftmaxRows,
    MatMul,
    Transpose,
    SliceCols,    // columns [i0, i1)
    ConcatCols,
    GatherRows,   // rows[] into a table
    ScatterRows,  // adjoint of GatherRows; i0 = output row count
    RowSum,       // N x D -> N x 1
    RowMean,
    ColSum,       // N x D -> 1 x D
    BroadcastCol, // N x 1 -> N x D (D = i0)
    BroadcastRow, // 1 x D -> N x D (N = i0)
    SumAll,       // -> 1 x 1
    BroadcastScalar  // 1 x 1 -> i0 x i1
};

const char* op_name(Op op);

struct Node {
    Op op = Op::Constant;
    std::vector<NodeId> parents;
    Tensor value;
    double a = 0.0;          // Affine scale / Clamp lo
    double b = 0.0;          // Affine shift / Clamp hi
    int i0 = 0;              // slice start / broadcast size / scatter rows
    int i1 = 0;              // slice end / broadcast cols
    std::vector<int> rows;   // gather/scatter row indices
    Tensor aux;              // cached derivative mask (Clamp) or sign (Abs)
    bool gradient_rule = false;  // DeepLift: force the plain-gradient rule
};

// Gradients keyed by node id, one entry per marked input.
using GradientSet = std::unordered_map<NodeId, Tensor>;

// Per-node activations of a second forward pass over the same graph
// topology; consumed by the DeepLift multiplier sweep.
struct ReferenceContext {
    std::vector<Tensor> values;
    std::uint64_t topo_hash = 0;
};

// Records a computation eagerly: building a node evaluates it immediately
// and caches the activation. Node ids are topologically ordered by
// construction, which backward exploits by walking ids in reverse.
class Tape {
public:
    NodeId constant(Tensor v);
    NodeId input(Tensor v);

    NodeId add(NodeId x, NodeId y);
    NodeId sub(NodeId x, NodeId y);
    NodeId mul(NodeId x, NodeId y);
    NodeId div(NodeId x, NodeId y);
    NodeId affine(NodeId x, double scale, double shift);
    NodeId log(NodeId x);
    NodeId sqrt(NodeId x);
    NodeId abs(NodeId x);
    NodeId clamp(NodeId x, double lo, double hi);
    NodeId sigmoid(NodeId x);
    NodeId tanh(NodeId x);
    NodeId gelu(NodeId x);
    NodeId softmax_rows(NodeId x);
    NodeId matmul(NodeId x, NodeId y);
    NodeId transpose(NodeId x);
    NodeId slice_cols(NodeId x, int c0, int c1);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId gather_rows(NodeId table, const std::vector<int>& rows);
    NodeId scatter_rows(NodeId x, const std::vector<int>& rows, int out_rows);
    NodeId row_sum(NodeId x);
    NodeId row_mean(NodeId x);
    NodeId col_sum(NodeId x);
    NodeId broadcast_col(NodeId x, int cols);
    NodeId broadcast_row(NodeId x, int rows);
    NodeId sum_all(NodeId x);
    NodeId mean_all(NodeId x);
    NodeId broadcast_scalar(NodeId x, int rows, int cols);

    // Composite helpers (built from the primitives above).
    NodeId l2_norm(NodeId x, double eps = 0.0);  // Frobenius norm
    NodeId l1_norm(NodeId x);
    NodeId layernorm_row(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);

    // Name-based dispatch for generic program construction; throws a
    // descriptive error for unknown primitive names.
    NodeId apply(const std::string& primitive, const std::vector<NodeId>& args);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<NodeId>& inputs() const { return inputs_; }

    // Builds gradient nodes of <seed, output> for every ancestor of
    // `output`, on this same tape, so gradients are themselves
    // differentiable (double backward). Returns node -> gradient node.
    std::unordered_map<NodeId, NodeId> backward_nodes(NodeId output, NodeId seed);

    // Gradient values for every marked input (zeros when unreachable).
    GradientSet backward(NodeId output, const Tensor& seed);

    // Recomputes every activation from the recorded graph; with no
    // overrides this must reproduce the cached values bit-exactly.
    std::vector<Tensor> replay(const std::unordered_map<NodeId, Tensor>& input_overrides = {}) const;

    ReferenceContext reference(const std::unordered_map<NodeId, Tensor>& input_overrides) const;

    std::uint64_t topo_hash() const;

    // RAII scope that marks created nodes for DeepLift's plain-gradient
    // rule (used inside layernorm, whose pieces are not elementwise).
    class GradientRuleScope {
    public:
        explicit GradientRuleScope(Tape& t) : tape_(t) { ++tape_.gradient_rule_depth_; }
        ~GradientRuleScope() { --tape_.gradient_rule_depth_; }
        GradientRuleScope(const GradientRuleScope&) = delete;
        GradientRuleScope& operator=(const GradientRuleScope&) = delete;

    private:
        Tape& tape_;
    };

private:
    friend Tensor eval_node(const Node& n, const std::vector<Tensor>& vals, Tensor* aux_out);

    NodeId push(Node n);
    NodeId push_checked(Node n);
    void check_exists(NodeId id) const;

    std::vector<Node> nodes_;
    std::vector<NodeId> inputs_;
    int gradient_rule_depth_ = 0;
};

// ---------------------------------------------------------------------------
// Program-level API (the spec's forward_record / backward / finite_diff /
// deeplift_multipliers entry points).

struct Program {
    // Builds the output node from named input nodes using tape primitives.
    std::function<NodeId(Tape&, const std::map<std::string, NodeId>&)> build;
};

struct ForwardRecord {
    Tape tape;
    NodeId output = -1;
    std::map<std::string, NodeId> input_ids;
};

ForwardRecord forward_record(const Program& program, const std::map<std::string, Tensor>& inputs);

// Central finite differences of a scalar-valued program, per input
// coordinate. Independent of the reverse-mode path by construction: it
// only ever re-runs the forward evaluation.
std::map<std::string, Tensor> finite_diff_grad(const Program& program,
                                               const std::map<std::string, Tensor>& inputs,
                                               double h);

// DeepLift multipliers w.r.t. every marked input. Elementwise
// nonlinearities use the rescale rule (a - a_ref) / (x - x_ref) with a
// gradient fallback when |x - x_ref| < 1e-10; everything else (linear ops,
// softmax, layernorm internals) takes the plain-gradient rule evaluated at
// the actual activations. `class_index` selects the output row; pass 0 for
// scalar outputs.
GradientSet deeplift_multipliers(const Tape& tape, const ReferenceContext& ref, NodeId output,
                                 int class_index);

}  // namespace xmc::ad
