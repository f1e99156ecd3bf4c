#pragma once

// Shared helpers for the test suites: random tensors, gradient-agreement
// scoring, and a battery of seeded random programs that together touch
// every tape primitive.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xmc/rng.hpp"
#include "xmc/tape.hpp"
#include "xmc/tensor.hpp"

namespace xmc::test {

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t({r, c});
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Relative disagreement between two gradients, gradcheck style.
inline double grad_error(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

struct RandomProgram {
    std::string name;
    ad::Program program;
    std::map<std::string, Tensor> inputs;
};

// Seeded random scalar-valued programs. Indexed cyclically over a set of
// templates so that any run of >= 7 consecutive ids covers every primitive
// at least once (matmul, add, sub, multiply, divide, embedding-gather,
// softmax, sigmoid, tanh, gelu, layernorm, L1/L2 norm, sum, mean, log,
// clamp, abs, transpose, slice/concat, broadcasts).
inline RandomProgram make_random_program(std::uint64_t id) {
    Rng rng(0xabcdef01u + id * 977);
    RandomProgram rp;
    int kind = static_cast<int>(id % 7);
    switch (kind) {
        case 0: {  // two-layer MLP with tanh and sigmoid
            rp.name = "mlp";
            rp.inputs["x"] = random_tensor(rng, 4, 3);
            rp.inputs["w1"] = random_tensor(rng, 3, 5);
            rp.inputs["w2"] = random_tensor(rng, 5, 2);
            rp.inputs["b1"] = random_tensor(rng, 1, 5);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto h = t.tanh(t.add(t.matmul(in.at("x"), in.at("w1")), t.broadcast_row(in.at("b1"), 4)));
                auto y = t.sigmoid(t.matmul(h, in.at("w2")));
                return t.mean_all(y);
            };
            break;
        }
        case 1: {  // self-attention block with layernorm and gelu
            rp.name = "attention";
            rp.inputs["x"] = random_tensor(rng, 5, 4);
            rp.inputs["wq"] = random_tensor(rng, 4, 4);
            rp.inputs["wk"] = random_tensor(rng, 4, 4);
            rp.inputs["wv"] = random_tensor(rng, 4, 4);
            rp.inputs["gamma"] = random_tensor(rng, 1, 4, 0.5, 1.5);
            rp.inputs["beta"] = random_tensor(rng, 1, 4, -0.2, 0.2);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto q = t.matmul(in.at("x"), in.at("wq"));
                auto k = t.matmul(in.at("x"), in.at("wk"));
                auto v = t.matmul(in.at("x"), in.at("wv"));
                auto att = t.softmax_rows(t.affine(t.matmul(q, t.transpose(k)), 0.5, 0.0));
                auto o = t.layernorm_row(t.matmul(att, v), in.at("gamma"), in.at("beta"));
                return t.mean_all(t.gelu(o));
            };
            break;
        }
        case 2: {  // embedding gather into an L2 norm
            rp.name = "embedding";
            rp.inputs["table"] = random_tensor(rng, 7, 4);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto x = t.gather_rows(in.at("table"), {1, 3, 3, 6, 0});
                return t.l2_norm(t.row_mean(x));
            };
            break;
        }
        case 3: {  // elementwise zoo: log, abs, clamp, divide
            rp.name = "elementwise";
            rp.inputs["x"] = random_tensor(rng, 3, 4);
            rp.inputs["y"] = random_tensor(rng, 3, 4, 0.5, 1.5);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto s = t.affine(t.sigmoid(in.at("x")), 0.9, 0.1);  // in (0.1, 1.0)
                auto l = t.log(s);
                auto d = t.div(l, in.at("y"));
                auto c = t.clamp(t.abs(d), 1e-4, 50.0);
                return t.affine(t.l1_norm(c), 0.1, 0.0);
            };
            break;
        }
        case 4: {  // slices, concat, subtraction
            rp.name = "slices";
            rp.inputs["x"] = random_tensor(rng, 4, 6);
            rp.inputs["w"] = random_tensor(rng, 6, 3);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto left = t.slice_cols(in.at("x"), 0, 3);
                auto right = t.slice_cols(in.at("x"), 3, 6);
                auto diff = t.sub(left, right);
                auto both = t.concat_cols({diff, t.mul(left, right)});
                return t.mean_all(t.tanh(t.matmul(both, in.at("w"))));
            };
            break;
        }
        case 5: {  // softmax + log interaction (cross-entropy-like)
            rp.name = "xent";
            rp.inputs["z"] = random_tensor(rng, 3, 5);
            Tensor target = random_tensor(rng, 3, 5, 0.05, 1.0);
            for (std::size_t i = 0; i < 3; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < 5; ++j) s += target.at(i, j);
                for (std::size_t j = 0; j < 5; ++j) target.at(i, j) /= s;
            }
            rp.inputs["target"] = target;
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto p = t.softmax_rows(in.at("z"));
                auto ll = t.mul(in.at("target"), t.log(p));
                return t.affine(t.sum_all(ll), -1.0, 0.0);
            };
            break;
        }
        default: {  // broadcasts and reductions
            rp.name = "broadcast";
            rp.inputs["x"] = random_tensor(rng, 4, 3);
            rp.inputs["scale"] = random_tensor(rng, 1, 1, 0.5, 2.0);
            rp.program.build = [](ad::Tape& t, const std::map<std::string, ad::NodeId>& in) {
                auto s = t.broadcast_scalar(in.at("scale"), 4, 3);
                auto z = t.mul(in.at("x"), s);
                auto rs = t.broadcast_col(t.row_sum(z), 3);
                auto cs = t.broadcast_row(t.col_sum(z), 4);
                return t.mean_all(t.sigmoid(t.add(rs, cs)));
            };
            break;
        }
    }
    return rp;
}

}  // namespace xmc::test
