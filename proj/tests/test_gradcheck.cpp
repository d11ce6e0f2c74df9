#include <catch2/catch_amalgamated.hpp>

#include "ibev/geometry.hpp"
#include "ibev/gradcheck.hpp"
#include "ibev/tensor.hpp"

using ibev::grad_check;
using ibev::Rng;
using Td = ibev::Tensor<double>;

namespace {
constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;
}  // namespace

TEST_CASE("grad_check on sum of squares", "[gradcheck]") {
    Td x = Td::from({2}, {1, 2});
    x.set_requires_grad();
    auto f = [&] { return ibev::sum_all(ibev::mul(x, x)); };

    x.zero_grad();
    Td y = f();
    y.backward();
    CHECK(x.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    CHECK(x.grad()[1] == Catch::Approx(4.0).margin(1e-12));

    auto res = grad_check(f, {x}, kEps);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("grad_check on constant function", "[gradcheck]") {
    Td x = Td::from({3}, {1, 2, 3});
    x.set_requires_grad();
    auto f = [&] { return ibev::sum_all(ibev::scale(ibev::mul(x, Td::zeros({3})), 1.0)); };
    auto res = grad_check(f, {x}, kEps);
    CHECK(res.max_rel_err == 0.0);
}

TEST_CASE("grad_check on softmax-linear composite", "[gradcheck]") {
    Rng rng(5);
    Td x = Td::uniform({3, 4}, -1, 1, rng);
    Td w = Td::uniform({4, 6}, -1, 1, rng);
    Td b = Td::uniform({6}, -0.5, 0.5, rng);
    x.set_requires_grad();
    w.set_requires_grad();
    b.set_requires_grad();
    Td probe = Td::uniform({3, 6}, -1, 1, rng);
    auto f = [&] {
        Td s = ibev::softmax(ibev::linear(x, w, b), 1);
        return ibev::sum_all(ibev::mul(s, probe));
    };
    auto res = grad_check(f, {x, w, b}, kEps);
    CHECK(res.max_rel_err < kTol);
}

TEST_CASE("every primitive op passes grad_check on 10 random instances", "[gradcheck]") {
    struct OpCase {
        const char* name;
        std::function<double(uint64_t)> run;  // returns max rel err for a seed
    };

    auto rnd_shape2 = [](Rng& rng) {
        return ibev::Shape{rng.uniform_int(1, 5), rng.uniform_int(1, 6)};
    };

    std::vector<OpCase> cases;

    auto add_unary = [&](const char* name, auto op, double lo, double hi) {
        cases.push_back({name, [=](uint64_t seed) {
                             Rng rng(seed);
                             Td x = Td::uniform({rng.uniform_int(1, 4), rng.uniform_int(1, 7)},
                                                lo, hi, rng);
                             x.set_requires_grad();
                             Td probe = Td::uniform(x.shape(), -1, 1, rng);
                             auto f = [&] { return ibev::sum_all(ibev::mul(op(x), probe)); };
                             return grad_check(f, {x}, kEps).max_rel_err;
                         }});
    };
    add_unary("relu", [](const Td& t) { return ibev::relu(t); }, 0.2, 2.0);
    add_unary("sigmoid", [](const Td& t) { return ibev::sigmoid(t); }, -3.0, 3.0);
    add_unary("tanh", [](const Td& t) { return ibev::tanh_op(t); }, -2.0, 2.0);
    add_unary("exp", [](const Td& t) { return ibev::exp_op(t); }, -2.0, 2.0);
    add_unary("log", [](const Td& t) { return ibev::log_op(t); }, 0.5, 4.0);
    add_unary("sqrt", [](const Td& t) { return ibev::sqrt_op(t); }, 0.5, 4.0);
    add_unary("scale", [](const Td& t) { return ibev::scale(t, 2.5); }, -2.0, 2.0);

    auto add_binary = [&](const char* name, auto op) {
        cases.push_back({name, [=, &rnd_shape2](uint64_t seed) {
                             Rng rng(seed);
                             ibev::Shape sa = rnd_shape2(rng);
                             // Alternate between equal shapes and broadcasts.
                             ibev::Shape sb = sa;
                             if (seed % 3 == 1) sb = {sa[1]};
                             if (seed % 3 == 2) sb = {sa[0], 1};
                             Td a = Td::uniform(sa, 0.5, 2.0, rng);
                             Td b = Td::uniform(sb, 0.5, 2.0, rng);
                             a.set_requires_grad();
                             b.set_requires_grad();
                             Td probe = Td::uniform(sa, -1, 1, rng);
                             auto f = [&] { return ibev::sum_all(ibev::mul(op(a, b), probe)); };
                             return grad_check(f, {a, b}, kEps).max_rel_err;
                         }});
    };
    add_binary("add", [](const Td& a, const Td& b) { return ibev::add(a, b); });
    add_binary("sub", [](const Td& a, const Td& b) { return ibev::sub(a, b); });
    add_binary("mul", [](const Td& a, const Td& b) { return ibev::mul(a, b); });
    add_binary("div", [](const Td& a, const Td& b) { return ibev::div(a, b); });

    cases.push_back({"matmul", [](uint64_t seed) {
                         Rng rng(seed);
                         const int64_t m = rng.uniform_int(1, 4), k = rng.uniform_int(1, 5),
                                       n = rng.uniform_int(1, 4);
                         Td a = Td::uniform({m, k}, -1, 1, rng);
                         Td b = Td::uniform({k, n}, -1, 1, rng);
                         a.set_requires_grad();
                         b.set_requires_grad();
                         Td probe = Td::uniform({m, n}, -1, 1, rng);
                         auto f = [&] {
                             return ibev::sum_all(ibev::mul(ibev::matmul(a, b), probe));
                         };
                         return grad_check(f, {a, b}, kEps).max_rel_err;
                     }});

    cases.push_back({"softmax", [](uint64_t seed) {
                         Rng rng(seed);
                         Td x = Td::uniform({rng.uniform_int(2, 4), rng.uniform_int(2, 6)}, -2,
                                            2, rng);
                         x.set_requires_grad();
                         const size_t axis = seed % 2;
                         Td probe = Td::uniform(x.shape(), -1, 1, rng);
                         auto f = [&] {
                             return ibev::sum_all(ibev::mul(ibev::softmax(x, axis), probe));
                         };
                         return grad_check(f, {x}, kEps).max_rel_err;
                     }});

    cases.push_back({"normalize", [](uint64_t seed) {
                         Rng rng(seed);
                         Td x = Td::uniform({rng.uniform_int(1, 3), rng.uniform_int(3, 8)}, -2,
                                            2, rng);
                         x.set_requires_grad();
                         Td probe = Td::uniform(x.shape(), -1, 1, rng);
                         auto f = [&] {
                             return ibev::sum_all(
                                 ibev::mul(ibev::normalize_lastdim(x, 1e-5), probe));
                         };
                         return grad_check(f, {x}, kEps).max_rel_err;
                     }});

    cases.push_back({"sum_axis", [](uint64_t seed) {
                         Rng rng(seed);
                         Td x = Td::uniform({3, 4, 2}, -2, 2, rng);
                         x.set_requires_grad();
                         const size_t axis = seed % 3;
                         auto f = [&] {
                             Td s = ibev::sum_axis(x, axis);
                             return ibev::sum_all(ibev::mul(s, s));
                         };
                         return grad_check(f, {x}, kEps).max_rel_err;
                     }});

    cases.push_back({"permute_reshape", [](uint64_t seed) {
                         Rng rng(seed);
                         Td x = Td::uniform({2, 3, 4}, -2, 2, rng);
                         x.set_requires_grad();
                         auto f = [&] {
                             Td p = ibev::permute(x, {2, 0, 1});
                             Td r = ibev::reshape(p, {8, 3});
                             return ibev::sum_all(ibev::mul(r, r));
                         };
                         return grad_check(f, {x}, kEps).max_rel_err;
                     }});

    cases.push_back({"concat_slice", [](uint64_t seed) {
                         Rng rng(seed);
                         Td a = Td::uniform({3, 2}, -2, 2, rng);
                         Td b = Td::uniform({3, 3}, -2, 2, rng);
                         a.set_requires_grad();
                         b.set_requires_grad();
                         auto f = [&] {
                             Td c = ibev::concat<double>({a, b}, 1);
                             Td s = ibev::slice(c, 1, 1, 3);
                             return ibev::sum_all(ibev::mul(s, s));
                         };
                         return grad_check(f, {a, b}, kEps).max_rel_err;
                     }});

    cases.push_back({"scale_rows", [](uint64_t seed) {
                         Rng rng(seed);
                         Td x = Td::uniform({4, 3}, -2, 2, rng);
                         x.set_requires_grad();
                         std::vector<double> s{0.5, 0.0, 2.0, 1.0};
                         auto f = [&] {
                             Td y = ibev::scale_rows(x, s);
                             return ibev::sum_all(ibev::mul(y, y));
                         };
                         return grad_check(f, {x}, kEps).max_rel_err;
                     }});

    cases.push_back({"bilinear_gather", [](uint64_t seed) {
                         Rng rng(seed);
                         Td map = Td::uniform({4, 5, 3}, -1, 1, rng);
                         // Keep coordinates away from integer grid lines.
                         std::vector<double> uvv;
                         for (int i = 0; i < 6; ++i) {
                             uvv.push_back(rng.uniform_int(0, 3) + 0.3 + 0.4 * rng.uniform());
                             uvv.push_back(rng.uniform_int(0, 2) + 0.3 + 0.4 * rng.uniform());
                         }
                         Td uv = Td::from({6, 2}, uvv);
                         map.set_requires_grad();
                         uv.set_requires_grad();
                         std::vector<uint8_t> valid(6, 1);
                         valid[2] = 0;
                         Td probe = Td::uniform({6, 3}, -1, 1, rng);
                         auto f = [&] {
                             Td g = ibev::bilinear_gather(map, uv, valid);
                             return ibev::sum_all(ibev::mul(g, probe));
                         };
                         return grad_check(f, {map, uv}, kEps).max_rel_err;
                     }});

    for (const auto& c : cases) {
        INFO("op: " << c.name);
        for (uint64_t seed = 1; seed <= 10; ++seed) {
            INFO("seed: " << seed);
            CHECK(c.run(seed) < kTol);
        }
    }
}
