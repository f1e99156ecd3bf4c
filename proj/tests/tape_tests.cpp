#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "support.hpp"
#include "xmc/tape.hpp"

using namespace xmc;
using namespace xmc::ad;
using xmc::test::grad_error;
using xmc::test::make_random_program;
using xmc::test::random_tensor;

namespace {

// Independent straight-line evaluator for the two-layer oracle check:
// plain dot-product loops, no tape involved.
Tensor oracle_matmul(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) s += a.at(i, p) * b.at(p, j);
            out.at(i, j) = s;
        }
    return out;
}

Tensor oracle_tanh(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data()) v = std::tanh(v);
    return out;
}

Tensor oracle_sigmoid(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
    return out;
}

}  // namespace

TEST_CASE("square program records one multiply node") {
    Program p;
    p.build = [](Tape& t, const std::map<std::string, NodeId>& in) { return t.mul(in.at("x"), in.at("x")); };
    auto fr = forward_record(p, {{"x", Tensor::scalar(3.0)}});
    CHECK(fr.tape.value(fr.output).item() == doctest::Approx(9.0));
    int mul_nodes = 0;
    for (std::size_t i = 0; i < fr.tape.size(); ++i)
        if (fr.tape.node(static_cast<NodeId>(i)).op == Op::Mul) ++mul_nodes;
    CHECK(mul_nodes == 1);
}

TEST_CASE("softmax of zeros is uniform") {
    Tape t;
    auto y = t.softmax_rows(t.constant(Tensor::row({0.0, 0.0})));
    CHECK(t.value(y).at(0, 0) == doctest::Approx(0.5));
    CHECK(t.value(y).at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("two-layer network matches an independent eager evaluation") {
    Rng rng(42);
    Tensor x = random_tensor(rng, 4, 3);
    Tensor w1 = random_tensor(rng, 3, 5);
    Tensor w2 = random_tensor(rng, 5, 2);

    Tape t;
    auto h = t.tanh(t.matmul(t.input(x), t.input(w1)));
    auto y = t.sigmoid(t.matmul(h, t.input(w2)));

    Tensor expected = oracle_sigmoid(oracle_matmul(oracle_tanh(oracle_matmul(x, w1)), w2));
    CHECK(max_abs_diff(t.value(y), expected) < 1e-12);
}

TEST_CASE("replay reproduces cached activations bit-exactly") {
    auto rp = make_random_program(1);
    auto fr = forward_record(rp.program, rp.inputs);
    auto vals = fr.tape.replay();
    for (std::size_t i = 0; i < fr.tape.size(); ++i) {
        CHECK(vals[i] == fr.tape.value(static_cast<NodeId>(i)));
    }
}

TEST_CASE("backward of x squared") {
    Tape t;
    auto x = t.input(Tensor::scalar(3.0));
    auto y = t.mul(x, x);
    auto g = t.backward(y, Tensor::scalar(1.0));
    CHECK(g.at(x).item() == doctest::Approx(6.0));
}

TEST_CASE("backward through sum of softmax is exactly zero") {
    Rng rng(7);
    Tape t;
    auto x = t.input(random_tensor(rng, 2, 5, -2.0, 2.0));
    auto y = t.sum_all(t.softmax_rows(x));
    auto g = t.backward(y, Tensor::scalar(1.0));
    for (double v : g.at(x).data()) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("backward rejects a bad seed shape") {
    Tape t;
    auto x = t.input(Tensor::row({1.0, 2.0}));
    auto y = t.sigmoid(x);
    CHECK_THROWS_AS(t.backward(y, Tensor::scalar(1.0)), XmcError);
}

TEST_CASE("three-layer network gradients agree with finite differences") {
    Rng rng(99);
    std::map<std::string, Tensor> inputs{
        {"x", random_tensor(rng, 3, 4)},  {"w1", random_tensor(rng, 4, 6)},
        {"w2", random_tensor(rng, 6, 4)}, {"w3", random_tensor(rng, 4, 1)},
    };
    Program p;
    p.build = [](Tape& t, const std::map<std::string, NodeId>& in) {
        auto h1 = t.tanh(t.matmul(in.at("x"), in.at("w1")));
        auto h2 = t.gelu(t.matmul(h1, in.at("w2")));
        auto y = t.sigmoid(t.matmul(h2, in.at("w3")));
        return t.mean_all(y);
    };
    auto fr = forward_record(p, inputs);
    auto grads = fr.tape.backward(fr.output, Tensor::scalar(1.0));
    auto fd = finite_diff_grad(p, inputs, 1e-5);
    for (const auto& [name, id] : fr.input_ids) {
        CHECK(grad_error(grads.at(id), fd.at(name)) < 1e-4);
    }
}

TEST_CASE("finite differences on the quadratic and the constant") {
    Program sq;
    sq.build = [](Tape& t, const std::map<std::string, NodeId>& in) { return t.mul(in.at("x"), in.at("x")); };
    auto g = finite_diff_grad(sq, {{"x", Tensor::scalar(3.0)}}, 1e-5);
    CHECK(std::abs(g.at("x").item() - 6.0) < 1e-8);

    Program constant;
    constant.build = [](Tape& t, const std::map<std::string, NodeId>& in) {
        return t.mul(t.constant(Tensor::scalar(0.0)), t.sum_all(in.at("x")));
    };
    auto gz = finite_diff_grad(constant, {{"x", Tensor::row({1.0, -2.0, 3.0})}}, 1e-5);
    for (double v : gz.at("x").data()) CHECK(v == 0.0);
}

TEST_CASE("finite differences reject non-scalar programs") {
    Program vec;
    vec.build = [](Tape& t, const std::map<std::string, NodeId>& in) { return t.sigmoid(in.at("x")); };
    CHECK_THROWS_AS(finite_diff_grad(vec, {{"x", Tensor::row({1.0, 2.0})}}, 1e-5), XmcError);
    Program sq;
    sq.build = [](Tape& t, const std::map<std::string, NodeId>& in) { return t.mul(in.at("x"), in.at("x")); };
    CHECK_THROWS_AS(finite_diff_grad(sq, {{"x", Tensor::scalar(1.0)}}, 0.0), XmcError);
}

TEST_CASE("gradient correctness across 21 random programs covering every primitive") {
    for (std::uint64_t id = 0; id < 21; ++id) {
        auto rp = make_random_program(id);
        CAPTURE(rp.name);
        CAPTURE(id);
        auto fr = forward_record(rp.program, rp.inputs);
        auto grads = fr.tape.backward(fr.output, Tensor::scalar(1.0));
        auto fd = finite_diff_grad(rp.program, rp.inputs, 1e-5);
        for (const auto& [name, nid] : fr.input_ids) {
            CAPTURE(name);
            CHECK(grad_error(grads.at(nid), fd.at(name)) < 1e-4);
        }
    }
}

TEST_CASE("backward is linear in the objective") {
    Rng rng(2024);
    Tensor xv = random_tensor(rng, 3, 3);
    Tensor wv = random_tensor(rng, 3, 3);
    const double a = 1.7, b = -0.4;

    auto grads_of = [&](bool combined) {
        Tape t;
        auto x = t.input(xv);
        auto w = t.input(wv);
        auto f = t.mean_all(t.tanh(t.matmul(x, w)));
        auto g = t.l2_norm(t.sigmoid(x));
        if (combined) {
            auto total = t.add(t.affine(f, a, 0.0), t.affine(g, b, 0.0));
            return std::pair{t.backward(total, Tensor::scalar(1.0)), x};
        }
        auto gf = t.backward(f, Tensor::scalar(1.0));
        auto gg = t.backward(g, Tensor::scalar(1.0));
        GradientSet mix;
        for (auto& [id, tensor] : gf) {
            Tensor m = tensor;
            for (std::size_t i = 0; i < m.numel(); ++i) m[i] = a * m[i] + b * gg.at(id)[i];
            mix.emplace(id, std::move(m));
        }
        return std::pair{mix, x};
    };

    auto [combined, xc] = grads_of(true);
    auto [mixed, xm] = grads_of(false);
    CHECK(max_abs_diff(combined.at(xc), mixed.at(xm)) < 1e-12);
}

TEST_CASE("identical seeds produce bit-identical tapes and gradients") {
    auto run = [] {
        auto rp = make_random_program(3);
        auto fr = forward_record(rp.program, rp.inputs);
        auto grads = fr.tape.backward(fr.output, Tensor::scalar(1.0));
        return std::pair{fr.tape.value(fr.output), grads};
    };
    auto [y1, g1] = run();
    auto [y2, g2] = run();
    CHECK(y1 == y2);
    REQUIRE(g1.size() == g2.size());
    for (auto& [id, tensor] : g1) CHECK(tensor == g2.at(id));
}

TEST_CASE("unsupported primitive is named in the error") {
    Tape t;
    auto x = t.input(Tensor::scalar(1.0));
    try {
        t.apply("convolve", {x});
        FAIL("expected an error");
    } catch (const XmcError& e) {
        CHECK(std::string(e.what()).find("convolve") != std::string::npos);
    }
}

TEST_CASE("shape mismatch names both shapes") {
    Tape t;
    auto a = t.input(Tensor::matrix(2, 3));
    auto b = t.input(Tensor::matrix(4, 2));
    try {
        t.matmul(a, b);
        FAIL("expected an error");
    } catch (const XmcError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

// --- DeepLift ---------------------------------------------------------------

TEST_CASE("deeplift on a linear layer recovers w (x - b) exactly") {
    Rng rng(5);
    Tensor w = random_tensor(rng, 4, 1);
    Tensor xv = random_tensor(rng, 1, 4);
    Tensor bv = random_tensor(rng, 1, 4);

    Tape t;
    auto x = t.input(xv);
    auto y = t.matmul(x, t.constant(w));
    auto ref = t.reference({{x, bv}});
    auto mult = deeplift_multipliers(t, ref, y, 0);

    double contrib_sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        double contribution = mult.at(x)[i] * (xv[i] - bv[i]);
        CHECK(contribution == doctest::Approx(w[i] * (xv[i] - bv[i])));
        contrib_sum += contribution;
    }
    double fx = t.value(y).item();
    double fb = ref.values[static_cast<std::size_t>(y)].item();
    CHECK(contrib_sum == doctest::Approx(fx - fb).epsilon(1e-12));
}

TEST_CASE("deeplift with x equal to the baseline gives zero contributions") {
    Rng rng(6);
    Tensor xv = random_tensor(rng, 1, 3);
    Tape t;
    auto x = t.input(xv);
    auto y = t.sum_all(t.tanh(x));
    auto ref = t.reference({{x, xv}});
    auto mult = deeplift_multipliers(t, ref, y, 0);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(mult.at(x)[i] * (xv[i] - xv[i]) == 0.0);
    }
}

TEST_CASE("deeplift completeness on a linear plus tanh chain") {
    Rng rng(8);
    Tensor w1 = random_tensor(rng, 4, 6);
    Tensor w2 = random_tensor(rng, 6, 1);
    Tensor xv = random_tensor(rng, 1, 4);
    Tensor bv = random_tensor(rng, 1, 4);

    Tape t;
    auto x = t.input(xv);
    auto y = t.matmul(t.tanh(t.matmul(x, t.constant(w1))), t.constant(w2));
    auto ref = t.reference({{x, bv}});
    auto mult = deeplift_multipliers(t, ref, y, 0);

    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) total += mult.at(x)[i] * (xv[i] - bv[i]);
    double fx = t.value(y).item();
    double fb = ref.values[static_cast<std::size_t>(y)].item();
    CHECK(std::abs(total - (fx - fb)) < 1e-9);
}

TEST_CASE("deeplift completeness across elementwise chains with sigmoid and gelu") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(100 + s);
        Tensor w1 = random_tensor(rng, 3, 5);
        Tensor w2 = random_tensor(rng, 5, 5);
        Tensor w3 = random_tensor(rng, 5, 1);
        Tensor xv = random_tensor(rng, 1, 3);
        Tensor bv = random_tensor(rng, 1, 3);

        Tape t;
        auto x = t.input(xv);
        auto h1 = t.sigmoid(t.matmul(x, t.constant(w1)));
        auto h2 = t.tanh(t.matmul(h1, t.constant(w2)));
        auto y = t.matmul(h2, t.constant(w3));
        auto ref = t.reference({{x, bv}});
        auto mult = deeplift_multipliers(t, ref, y, 0);

        double total = 0.0;
        for (std::size_t i = 0; i < 3; ++i) total += mult.at(x)[i] * (xv[i] - bv[i]);
        double fx = t.value(y).item();
        double fb = ref.values[static_cast<std::size_t>(y)].item();
        CHECK(std::abs(total - (fx - fb)) < 1e-8);
    }
}

TEST_CASE("deeplift rejects a mismatched reference") {
    Tape t1;
    auto x1 = t1.input(Tensor::scalar(1.0));
    auto y1 = t1.tanh(x1);
    (void)y1;

    Tape t2;
    auto x2 = t2.input(Tensor::scalar(1.0));
    auto y2 = t2.sigmoid(x2);
    auto ref2 = t2.reference({{x2, Tensor::scalar(0.0)}});

    CHECK_THROWS_AS(deeplift_multipliers(t1, ref2, y1, 0), XmcError);
}

// --- double backward (the IGR mechanism) ------------------------------------

TEST_CASE("gradient-of-gradient-norm matches finite differences") {
    // Builds n(w) = || d/dx mean(sigmoid(x w)) ||_2 and checks dn/dw
    // against central differences on n evaluated by a fresh first-order
    // backward at each probe.
    Rng rng(31);
    Tensor xv = random_tensor(rng, 2, 3);
    Tensor wv = random_tensor(rng, 3, 2);

    auto penalty_value = [&](const Tensor& w) {
        Tape t;
        auto x = t.input(xv);
        auto wn = t.input(w);
        auto loss = t.mean_all(t.sigmoid(t.matmul(x, wn)));
        auto gnodes = t.backward_nodes(loss, t.constant(Tensor::scalar(1.0)));
        auto norm = t.l2_norm(gnodes.at(x), 1e-24);
        return t.value(norm).item();
    };

    Tape t;
    auto x = t.input(xv);
    auto w = t.input(wv);
    auto loss = t.mean_all(t.sigmoid(t.matmul(x, w)));
    auto gnodes = t.backward_nodes(loss, t.constant(Tensor::scalar(1.0)));
    auto norm = t.l2_norm(gnodes.at(x), 1e-24);
    auto second = t.backward(norm, Tensor::scalar(1.0));

    const double h = 1e-5;
    Tensor fd({3, 2});
    Tensor probe = wv;
    for (std::size_t i = 0; i < wv.numel(); ++i) {
        double orig = probe[i];
        probe[i] = orig + h;
        double up = penalty_value(probe);
        probe[i] = orig - h;
        double down = penalty_value(probe);
        probe[i] = orig;
        fd[i] = (up - down) / (2.0 * h);
    }
    CHECK(grad_error(second.at(w), fd) < 1e-4);
}
