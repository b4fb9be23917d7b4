#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "simt/attention.hpp"
#include "simt/gradcheck.hpp"
#include "simt/graph.hpp"
#include "simt/rng.hpp"
#include "simt/tensor.hpp"

using namespace simt;

namespace {

Tensor random_tensor(std::vector<int> shape, Pcg32& rng, double scale = 1.0) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.next_gaussian();
    return t;
}

// finite-difference check of a single op: loss = sum(op_out * fixed_random).
// The weighting tensor is drawn once and frozen so every finite-difference
// evaluation differentiates the same function.
struct OpCheck {
    Pcg32 wrng{909};
    Tensor frozen;
    bool drawn = false;

    Var weighted_sum(Graph& g, Var x) {
        if (!drawn) {
            frozen = Tensor(x.value().shape());
            for (int64_t i = 0; i < frozen.size(); ++i) frozen[i] = wrng.next_gaussian();
            drawn = true;
        }
        return g.sum(g.mul(x, g.constant(frozen)));
    }
};

double op_grad_error(std::vector<Parameter*> params,
                     const std::function<Var(Graph&, const std::vector<Var>&)>& build) {
    auto loss = [&](bool with_grad) {
        Graph g(with_grad);
        std::vector<Var> leaves;
        for (Parameter* p : params) leaves.push_back(g.leaf(*p));
        Var out = build(g, leaves);
        if (with_grad) g.backward(out);
        return out.value()[0];
    };
    return grad_check(params, loss, 1e-5).max_rel_error;
}

} // namespace

TEST_CASE("tensor validates shape and finiteness") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::nan("")}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from({1}, {std::numeric_limits<double>::infinity()}),
                    std::invalid_argument);
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.at(1, 2) == 6.0);
}

TEST_CASE("softmax hand values") {
    auto u = softmax(std::vector<double>{0.0, 0.0, 0.0});
    CHECK(u[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(u[2] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    auto single = softmax(std::vector<double>{5.0});
    CHECK(single[0] == doctest::Approx(1.0).epsilon(1e-12));

    auto two = softmax(std::vector<double>{0.0, std::log(2.0)});
    CHECK(two[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(two[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));

    CHECK_THROWS_AS(softmax(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("softmax is a shift-invariant probability vector") {
    Pcg32 rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + static_cast<int>(rng.next_below(12));
        std::vector<double> v(n), shifted(n);
        double c = 10.0 * rng.next_gaussian();
        for (int i = 0; i < n; ++i) {
            v[i] = 5.0 * rng.next_gaussian();
            shifted[i] = v[i] + c;
        }
        auto s = softmax(v);
        auto s2 = softmax(shifted);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            CHECK(s[i] >= 0.0);
            CHECK(s[i] <= 1.0);
            CHECK(std::fabs(s[i] - s2[i]) < 1e-9);
            total += s[i];
        }
        CHECK(std::fabs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("scaled dot product") {
    std::vector<double> zero{0.0, 0.0, 0.0};
    std::vector<double> k{1.0, -2.0, 0.5};
    CHECK(scaled_dot(zero, k, 4) == 0.0);
    CHECK(scaled_dot(std::vector<double>{2.0}, std::vector<double>{3.0}, 1) ==
          doctest::Approx(6.0));
    CHECK(scaled_dot(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}, 2) == 0.0);
    CHECK_THROWS_AS(scaled_dot(std::vector<double>{1.0}, k, 2), std::invalid_argument);
}

TEST_CASE("prefix mean pooling") {
    std::vector<std::vector<double>> states{{0.0}, {2.0}};
    CHECK(mean_pool_prefix(states, 1)[0] == 0.0);
    CHECK(mean_pool_prefix(states, 2)[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(mean_pool_prefix(states, 0), std::invalid_argument);
    CHECK_THROWS_AS(mean_pool_prefix(states, 3), std::invalid_argument);

    std::vector<std::vector<double>> constant(5, {3.0, -1.0});
    for (int j = 1; j <= 5; ++j) {
        auto m = mean_pool_prefix(constant, j);
        CHECK(m[0] == doctest::Approx(3.0));
        CHECK(m[1] == doctest::Approx(-1.0));
    }

    // incremental form matches the batch form
    Pcg32 rng(7);
    std::vector<std::vector<double>> seq;
    RunningPrefixMean rm(3);
    for (int j = 1; j <= 8; ++j) {
        seq.push_back({rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()});
        rm.push(seq.back());
        auto batch = mean_pool_prefix(seq, j);
        auto inc = rm.mean();
        for (int t = 0; t < 3; ++t) CHECK(batch[t] == doctest::Approx(inc[t]).epsilon(1e-15));
    }
}

TEST_CASE("backward: square, constant, linear") {
    Parameter w("w", Tensor::scalar(3.0));
    {
        Graph g;
        Var wv = g.leaf(w);
        Var loss = g.sum(g.mul(wv, wv));
        g.backward(loss);
        CHECK(w.grad[0] == doctest::Approx(6.0));
    }
    {
        // loss constant in w: gradient stays zero
        w.zero_grad();
        Graph g;
        g.leaf(w);
        Var loss = g.constant(Tensor::scalar(5.0));
        g.backward(loss);
        CHECK(w.grad[0] == 0.0);
        Var loss2 = g.sum(g.scale(g.leaf(w), 0.0));
        g.backward(loss2);
        CHECK(w.grad[0] == 0.0);
    }
    {
        Parameter ws("ws", Tensor::from({4}, {1, 2, 3, 4}));
        Graph g;
        Var loss = g.sum(g.leaf(ws));
        g.backward(loss);
        for (int i = 0; i < 4; ++i) CHECK(ws.grad[i] == doctest::Approx(1.0));
    }
}

TEST_CASE("backward rejects non-scalar losses") {
    Parameter w("w", Tensor::from({2}, {1.0, 2.0}));
    Graph g;
    Var wv = g.leaf(w);
    CHECK_THROWS_AS(g.backward(wv), std::invalid_argument);
}

TEST_CASE("backward additivity: sum of losses equals summed backwards") {
    Pcg32 rng(3);
    Parameter a("a", random_tensor({3, 3}, rng));
    Parameter b("b", random_tensor({3, 3}, rng));

    auto grads_of = [&](bool combined) {
        a.zero_grad();
        b.zero_grad();
        Graph g;
        Var av = g.leaf(a);
        Var bv = g.leaf(b);
        Var l1 = g.sum(g.mul(av, bv));
        Var l2 = g.sum(g.matmul(av, bv));
        if (combined) {
            g.backward(g.add(l1, l2));
        } else {
            g.backward(l1);
            g.backward(l2);
        }
        std::vector<double> out;
        for (int64_t i = 0; i < a.grad.size(); ++i) out.push_back(a.grad[i]);
        for (int64_t i = 0; i < b.grad.size(); ++i) out.push_back(b.grad[i]);
        return out;
    };

    auto separate = grads_of(false);
    auto combined = grads_of(true);
    REQUIRE(separate.size() == combined.size());
    for (size_t i = 0; i < separate.size(); ++i) {
        CHECK(std::fabs(separate[i] - combined[i]) < 1e-9);
    }
}

TEST_CASE("grad_check quadratic form") {
    Pcg32 rng(11);
    Parameter w("w", random_tensor({1, 4}, rng));
    Tensor a = random_tensor({4, 4}, rng);

    auto loss = [&](bool with_grad) {
        Graph g(with_grad);
        Var wv = g.leaf(w);
        Var aw = g.matmul(wv, g.constant(a)); // [1,4]
        Var l = g.sum(g.mul(aw, wv));
        if (with_grad) g.backward(l);
        return l.value()[0];
    };
    CHECK(grad_check({&w}, loss, 1e-5).max_rel_error < 1e-6);
}

TEST_CASE("grad_check linear function is near exact") {
    Pcg32 rng(13);
    Parameter w("w", random_tensor({6}, rng));
    Tensor c = random_tensor({6}, rng);
    auto loss = [&](bool with_grad) {
        Graph g(with_grad);
        Var l = g.sum(g.mul(g.leaf(w), g.constant(c)));
        if (with_grad) g.backward(l);
        return l.value()[0];
    };
    CHECK(grad_check({&w}, loss, 1e-5).max_rel_error < 1e-9);
}

TEST_CASE("per-op gradients pass finite differences") {
    Pcg32 rng(101);

    SUBCASE("matmul") {
        OpCheck oc;
        Parameter a("a", random_tensor({3, 4}, rng));
        Parameter b("b", random_tensor({4, 5}, rng));
        double err = op_grad_error({&a, &b}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.matmul(l[0], l[1]));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("matmul_nt") {
        OpCheck oc;
        Parameter a("a", random_tensor({3, 4}, rng));
        Parameter b("b", random_tensor({5, 4}, rng));
        double err = op_grad_error({&a, &b}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.matmul_nt(l[0], l[1]));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("layer_norm") {
        OpCheck oc;
        Parameter x("x", random_tensor({4, 6}, rng));
        Parameter gain("g", random_tensor({6}, rng));
        Parameter bias("b", random_tensor({6}, rng));
        double err = op_grad_error({&x, &gain, &bias}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.layer_norm(l[0], l[1], l[2]));
        });
        CHECK(err < 1e-5);
    }
    SUBCASE("prefix_softmax") {
        OpCheck oc;
        Parameter x("x", random_tensor({4, 4}, rng));
        std::vector<int> lens{1, 2, 3, 4};
        double err = op_grad_error({&x}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.prefix_softmax(l[0], lens));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("prefix_row_mean") {
        OpCheck oc;
        Parameter x("x", random_tensor({5, 3}, rng));
        double err = op_grad_error({&x}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.prefix_row_mean(l[0]));
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("sigmoid relu abs") {
        OpCheck oc;
        Parameter x("x", random_tensor({4, 4}, rng));
        double err = op_grad_error({&x}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.sigmoid(g.relu(g.abs(l[0]))));
        });
        CHECK(err < 1e-5);
    }
    SUBCASE("cross_entropy with smoothing") {
        OpCheck oc;
        Parameter x("x", random_tensor({3, 7}, rng));
        std::vector<int> targets{2, 0, 6};
        double err = op_grad_error({&x}, [&](Graph& g, const std::vector<Var>& l) {
            return g.cross_entropy(l[0], targets, 0.1);
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("gather and slices") {
        OpCheck oc;
        Parameter t("t", random_tensor({6, 4}, rng));
        std::vector<int> ids{0, 3, 3, 5};
        double err = op_grad_error({&t}, [&](Graph& g, const std::vector<Var>& l) {
            Var gathered = g.gather_rows(l[0], ids);
            Var sl = g.concat_cols({g.col_slice(gathered, 0, 2), g.col_slice(gathered, 2, 2)});
            Var rows = g.concat_rows(g.row_slice(sl, 0, 2), g.row_slice(sl, 2, 2));
            return oc.weighted_sum(g, rows);
        });
        CHECK(err < 1e-6);
    }
    SUBCASE("add_rowvec and row_sum") {
        OpCheck oc;
        Parameter x("x", random_tensor({3, 5}, rng));
        Parameter b("b", random_tensor({5}, rng));
        double err = op_grad_error({&x, &b}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.row_sum(g.add_rowvec(l[0], l[1])));
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("ssa weight op gradients pass finite differences") {
    Pcg32 rng(303);
    const int I = 4, J = 5;
    // p strictly inside (0,1) with well separated values so the max-allocation
    // argmax cannot flip under the finite-difference perturbation
    Tensor praw = Tensor::matrix(I, J);
    for (int i = 0; i < I; ++i) {
        for (int j = 0; j < J; ++j) praw.at(i, j) = 0.08 + 0.83 * rng.next_double();
    }
    Parameter p("p", praw);
    Parameter es("es", random_tensor({I, J}, rng));
    Parameter et("et", random_tensor({I, I}, rng));
    std::vector<int> bounds{2, 3, 5, 4};

    for (Allocation mode : {Allocation::expected, Allocation::max}) {
        OpCheck oc;
        double err = op_grad_error({&p, &es, &et}, [&](Graph& g, const std::vector<Var>& l) {
            return oc.weighted_sum(g, g.ssa_weights(l[0], l[1], l[2], bounds, mode));
        });
        CHECK(err < 1e-5);
    }
}

TEST_CASE("f32 tensors round storage to float") {
    Tensor t = Tensor::from({2}, {1.0 + 1e-12, 2.5}, Precision::f32);
    CHECK(t[0] == static_cast<double>(static_cast<float>(1.0 + 1e-12)));
    CHECK(t[1] == 2.5);
}
