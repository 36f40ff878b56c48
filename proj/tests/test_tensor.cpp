#include <catch2/catch.hpp>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tivat/tensor.hpp"

using namespace tivat;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul values and contract", "[tensorcore]") {
    SECTION("identity") {
        Tensor eye({2, 2}, {1, 0, 0, 1});
        Tensor m({2, 2}, {1, 2, 3, 4});
        Tensor r = matmul(eye, m);
        CHECK(r.data() == std::vector<double>({1, 2, 3, 4}));
    }
    SECTION("hand expansion") {
        Tensor a({2, 2}, {1, 2, 3, 4});
        Tensor b({2, 1}, {5, 6});
        Tensor r = matmul(a, b);
        CHECK(r(0, 0) == Approx(17.0));
        CHECK(r(1, 0) == Approx(39.0));
    }
    SECTION("random vs triple-loop oracle") {
        std::mt19937_64 rng(11);
        for (int rep = 0; rep < 20; ++rep) {
            std::uniform_int_distribution<std::size_t> d(1, 6);
            const std::size_t m = d(rng), k = d(rng), n = d(rng);
            Tensor a = random_tensor({m, k}, rng, false);
            Tensor b = random_tensor({k, n}, rng, false);
            Tensor r = matmul(a, b);
            auto want = oracle::matmul(a.data(), m, k, b.data(), n);
            for (std::size_t i = 0; i < want.size(); ++i)
                CHECK(r.data()[i] == Approx(want[i]).margin(1e-12));
        }
    }
    SECTION("dimension error names both shapes") {
        Tensor a({2, 3});
        Tensor b({4, 5});
        REQUIRE_THROWS_WITH(matmul(a, b), Catch::Contains("(2x3)") && Catch::Contains("(4x5)"));
    }
}

TEST_CASE("softmax values and stability", "[tensorcore]") {
    SECTION("symmetry") {
        Tensor x({2}, {0.0, 0.0});
        Tensor y = softmax(x, 0);
        CHECK(y(0) == Approx(0.5));
        CHECK(y(1) == Approx(0.5));
    }
    SECTION("direct evaluation") {
        Tensor x({2}, {std::log(2.0), 0.0});
        Tensor y = softmax(x, 0);
        CHECK(y(0) == Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(y(1) == Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SECTION("max subtraction prevents overflow") {
        Tensor x({2}, {1000.0, 0.0});
        Tensor y = softmax(x, 0);
        CHECK(y(0) == Approx(1.0));
        CHECK(y(1) == Approx(0.0).margin(1e-300));
    }
    SECTION("sums to one along axis") {
        std::mt19937_64 rng(7);
        Tensor x = random_tensor({3, 4, 5}, rng, false, -50.0, 50.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            Tensor y = softmax(x, axis);
            Tensor s = mean(y, axis);  // mean * n == sum
            for (double v : s.data()) CHECK(v * x.dim(axis) == Approx(1.0).epsilon(1e-12));
        }
    }
    SECTION("invalid axis") { REQUIRE_THROWS(softmax(Tensor({2, 2}), 5)); }
}

TEST_CASE("gather semantics", "[tensorcore]") {
    Tensor x({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    SECTION("single row") {
        Tensor r = gather(x, {1});
        CHECK(r.shape() == Shape({1, 2}));
        CHECK(r.data() == std::vector<double>({3, 4}));
    }
    SECTION("order preserved") {
        Tensor r = gather(x, {2, 0});
        CHECK(r.data() == std::vector<double>({5, 6, 1, 2}));
    }
    SECTION("out of bounds names index") {
        REQUIRE_THROWS_AS(gather(x, {3}), std::out_of_range);
        REQUIRE_THROWS_WITH(gather(x, {7}), Catch::Contains("7"));
    }
    SECTION("duplicate index accumulates gradient") {
        Tensor src({3, 1}, {1.0, 2.0, 3.0}, true);
        auto loss_fn = [&]() {
            Tensor g = gather(src, {1, 1});
            return sum_all(mul(g, g));
        };
        auto res = gradcheck::check(loss_fn, {src});
        INFO(res.detail);
        CHECK(res.ok);
        // direct check: d/dx1 of 2*x1^2 = 4*x1 = 8
        src.node()->grad.clear();
        backward(loss_fn());
        CHECK(src.grad()[1] == Approx(8.0));
    }
    SECTION("scatter conserves gradient mass") {
        std::mt19937_64 rng(3);
        Tensor src = random_tensor({5, 3}, rng, true);
        Tensor g = gather(src, {4, 1, 1, 0});
        Tensor loss = sum_all(g);
        backward(loss);
        double mass = 0.0;
        for (double v : src.grad()) mass += v;
        CHECK(mass == Approx(4.0 * 3.0));  // each gathered element got grad 1
    }
}

TEST_CASE("structural ops", "[tensorcore]") {
    SECTION("concat 1d") {
        Tensor a({2}, {1, 2});
        Tensor b({1}, {3});
        Tensor c = concat({a, b}, 0);
        CHECK(c.data() == std::vector<double>({1, 2, 3}));
    }
    SECTION("concat shape mismatch") {
        REQUIRE_THROWS(concat({Tensor({2, 2}), Tensor({2, 3})}, 0));
    }
    SECTION("reshape round trip bit-identical") {
        std::mt19937_64 rng(5);
        Tensor x = random_tensor({3, 4}, rng, false);
        Tensor y = reshape(reshape(x, {2, 6}), {3, 4});
        CHECK(y.data() == x.data());
    }
    SECTION("transpose round trip bit-identical") {
        std::mt19937_64 rng(6);
        Tensor x = random_tensor({3, 4}, rng, false);
        Tensor y = transpose(transpose(x));
        CHECK(y.data() == x.data());
        Tensor z = permute(permute(random_tensor({2, 3, 4}, rng, false), {2, 0, 1}), {1, 2, 0});
        (void)z;
    }
    SECTION("permute inverse recovers layout") {
        std::mt19937_64 rng(8);
        Tensor x = random_tensor({2, 3, 4}, rng, false);
        Tensor y = permute(permute(x, {2, 0, 1}), {1, 2, 0});
        CHECK(y.data() == x.data());
    }
}

TEST_CASE("layer norm and friends", "[tensorcore]") {
    SECTION("constant vector maps to beta") {
        Tensor x({1, 4}, {3.0, 3.0, 3.0, 3.0});
        Tensor gamma({4}, {1, 1, 1, 1});
        Tensor beta({4}, {0, 0, 0, 0});
        Tensor y = layer_norm(x, gamma, beta);
        for (double v : y.data()) CHECK(v == Approx(0.0).margin(1e-12));
    }
    SECTION("pairwise distance 3-4-5") {
        Tensor a({1, 2}, {0.0, 0.0});
        Tensor b({1, 2}, {3.0, 4.0});
        CHECK(pairwise_distance(a, b)(0, 0) == Approx(5.0));
    }
    SECTION("gelu known values") {
        Tensor x({3}, {0.0, 100.0, -100.0});
        Tensor y = gelu(x);
        CHECK(y(0) == Approx(0.0).margin(1e-15));
        CHECK(y(1) == Approx(100.0));
        CHECK(y(2) == Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("non-finite results are rejected", "[tensorcore]") {
    Tensor big({1}, {1e308});
    REQUIRE_THROWS_AS(mul(big, big), std::runtime_error);
}

TEST_CASE("backward basics", "[tensorcore]") {
    SECTION("sum of squares") {
        Tensor x({2}, {1.0, 2.0}, true);
        Tensor loss = sum_all(mul(x, x));
        backward(loss);
        CHECK(x.grad()[0] == Approx(2.0));
        CHECK(x.grad()[1] == Approx(4.0));
    }
    SECTION("non-scalar loss rejected") {
        Tensor x({2}, {1.0, 2.0}, true);
        REQUIRE_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
    }
    SECTION("softmax+matmul chain matches finite differences") {
        std::mt19937_64 rng(17);
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tensor c = random_tensor({3, 2}, rng, false);
        auto loss_fn = [&]() { return mean_all(mul(softmax(matmul(a, b), 1), c)); };
        auto res = gradcheck::check(loss_fn, {a, b});
        INFO(res.detail);
        CHECK(res.ok);
    }
    SECTION("unused leaf gets zero grad") {
        Tensor x({2}, {1.0, 2.0}, true);
        Tensor unused({2}, {5.0, 6.0}, true);
        backward(sum_all(mul(x, x)));
        CHECK(unused.grad() == std::vector<double>({0.0, 0.0}));
    }
    SECTION("diamond reuse accumulates once per path") {
        Tensor x({1}, {3.0}, true);
        Tensor y = add(mul(x, x), mul(x, x));  // 2x^2, dy/dx = 4x = 12
        backward(sum_all(y));
        CHECK(x.grad()[0] == Approx(12.0));
    }
}

TEST_CASE("gradient check across the op set", "[tensorcore][gradcheck]") {
    std::mt19937_64 rng(23);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor gamma = random_tensor({4}, rng, true, 0.5, 1.5);
    Tensor beta = random_tensor({4}, rng);
    Tensor pts = random_tensor({3, 2}, rng);
    Tensor pts2 = random_tensor({4, 2}, rng, true, 2.0, 3.0);
    Tensor srows = random_tensor({3}, rng);
    Tensor weight_const = random_tensor({3, 4}, rng, false);

    auto weighted = [&](Tensor t, const Tensor& c) { return mean_all(mul(t, c)); };

    struct Case {
        const char* name;
        std::function<Tensor()> fn;
        std::vector<Tensor> leaves;
    };
    Tensor c34 = random_tensor({3, 4}, rng, false);
    Tensor c35 = random_tensor({3, 5}, rng, false);
    Tensor c43 = random_tensor({4, 3}, rng, false);
    Tensor c4 = random_tensor({4}, rng, false);
    Tensor c64 = random_tensor({6, 4}, rng, false);
    Tensor cg34 = random_tensor({3, 4}, rng, false);
    Tensor cp34 = random_tensor({3, 4}, rng, false);

    std::vector<Case> cases = {
        {"add", [&] { return weighted(add(a, b), c34); }, {a, b}},
        {"sub", [&] { return weighted(sub(a, b), c34); }, {a, b}},
        {"mul", [&] { return weighted(mul(a, b), c34); }, {a, b}},
        {"scale", [&] { return weighted(scale(a, -2.5), c34); }, {a}},
        {"matmul", [&] { return weighted(matmul(a, w), c35); }, {a, w}},
        {"linear", [&] { return weighted(linear(a, w, bias), c35); }, {a, w, bias}},
        {"softmax", [&] { return weighted(softmax(a, 1), c34); }, {a}},
        {"mean_axis", [&] { return weighted(mean(a, 0), c4); }, {a}},
        {"mean_all", [&] { return mean_all(a); }, {a}},
        {"sum_all", [&] { return scale(sum_all(a), 0.1); }, {a}},
        {"concat", [&] { return weighted(concat({a, b}, 0), c64); }, {a, b}},
        {"reshape", [&] { return weighted(reshape(a, {4, 3}), c43); }, {a}},
        {"transpose", [&] { return weighted(transpose(a), c43); }, {a}},
        {"gather", [&] { return weighted(gather(a, {2, 0, 2}), cg34); }, {a}},
        {"layer_norm", [&] { return weighted(layer_norm(a, gamma, beta), c34); }, {a, gamma, beta}},
        {"gelu", [&] { return weighted(gelu(a), c34); }, {a}},
        {"pairwise_distance", [&] { return weighted(pairwise_distance(pts, pts2), cp34); }, {pts, pts2}},
        {"scale_rows", [&] { return weighted(scale_rows(a, srows), c34); }, {a, srows}},
    };
    for (auto& tc : cases) {
        DYNAMIC_SECTION("op " << tc.name) {
            auto res = gradcheck::check(tc.fn, tc.leaves);
            INFO(tc.name << ": " << res.detail << " worst=" << res.worst_rel_err);
            CHECK(res.ok);
        }
    }
}
