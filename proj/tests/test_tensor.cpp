#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "ibev/params.hpp"
#include "ibev/tensor.hpp"

using ibev::Rng;
using ibev::Shape;
using Td = ibev::Tensor<double>;
using Tf = ibev::Tensor<float>;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 int64_t m, int64_t k, int64_t n) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

}  // namespace

TEST_CASE("matmul identity and annihilator", "[tensor]") {
    Td eye = Td::from({2, 2}, {1, 0, 0, 1});
    Td a = Td::from({2, 2}, {1, 2, 3, 4});
    Td r = ibev::matmul(eye, a);
    CHECK(r.data() == std::vector<double>{1, 2, 3, 4});

    Td z = Td::zeros({2, 3});
    Td b = Td::from({3, 4}, std::vector<double>(12, 7.0));
    Td r2 = ibev::matmul(z, b);
    for (double v : r2.data()) CHECK(v == 0.0);
    CHECK(r2.shape() == Shape{2, 4});
}

TEST_CASE("matmul hand product", "[tensor]") {
    Td a = Td::from({2, 2}, {1, 2, 3, 4});
    Td b = Td::from({2, 2}, {5, 6, 7, 8});
    Td c = ibev::matmul(a, b);
    CHECK(c.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul dimension error names both shapes", "[tensor]") {
    Td a = Td::zeros({2, 3});
    Td b = Td::zeros({4, 2});
    try {
        ibev::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ibev::ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul agrees with triple-loop oracle on random 5x7 * 7x3", "[tensor]") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Td a = Td::uniform({5, 7}, -2.0, 2.0, rng);
        Td b = Td::uniform({7, 3}, -2.0, 2.0, rng);
        Td c = ibev::matmul(a, b);
        auto expect = naive_matmul(a.data(), b.data(), 5, 7, 3);
        for (size_t i = 0; i < expect.size(); ++i)
            CHECK(std::fabs(c.data()[i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("softmax constant row is uniform", "[tensor]") {
    Td x = Td::from({1, 3}, {4.2, 4.2, 4.2});
    Td s = ibev::softmax(x, 1);
    for (double v : s.data()) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax closed form for [0, ln 3]", "[tensor]") {
    Td x = Td::from({1, 2}, {0.0, std::log(3.0)});
    Td s = ibev::softmax(x, 1);
    // Oracle: direct exp/sum in double precision.
    const double e0 = std::exp(0.0), e1 = 3.0;
    CHECK(s.data()[0] == Catch::Approx(e0 / (e0 + e1)).epsilon(1e-12));
    CHECK(s.data()[1] == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax normalizes and stays positive for large magnitudes", "[tensor]") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Td x = Td::uniform({4, 9}, -1e4, 1e4, rng);
        Td s = ibev::softmax(x, 1);
        for (int64_t r = 0; r < 4; ++r) {
            double sum = 0;
            for (int64_t j = 0; j < 9; ++j) {
                const double v = s.at({r, j});
                CHECK(v > 0.0);
                CHECK(v < 1.0 + 1e-12);
                sum += v;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("linear identity, zero input, hand case", "[tensor]") {
    Td w = Td::from({2, 2}, {1, 0, 0, 1});
    Td x = Td::from({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(ibev::linear(x, w).data() == x.data());

    Td b = Td::from({2}, {10, 10});
    Td z = Td::zeros({3, 2});
    Td r = ibev::linear(z, w, b);
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(r.at({i, 0}) == 10.0);
        CHECK(r.at({i, 1}) == 10.0);
    }

    Td w2 = Td::from({2, 2}, {1, 2, 3, 4});
    Td x2 = Td::from({1, 2}, {1, 1});
    Td r2 = ibev::linear(x2, w2, b);
    CHECK(r2.data() == std::vector<double>{14, 16});
}

TEST_CASE("activations", "[tensor]") {
    Td x = Td::from({3}, {-1, 0, 2});
    CHECK(ibev::relu(x).data() == std::vector<double>{0, 0, 2});
    CHECK(ibev::sigmoid(Td::scalar(0.0)).item() == 0.5);
    CHECK(ibev::sigmoid(Td::scalar(std::log(3.0))).item() == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("non-finite forward aborts with op name", "[tensor]") {
    Td x = Td::scalar(1e308);
    try {
        ibev::exp_op(x);
        FAIL("expected NumericError");
    } catch (const ibev::NumericError& e) {
        CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
}

TEST_CASE("gradient linearity: backward of sum equals sum of backwards", "[tensor]") {
    Rng rng(3);
    Td x = Td::uniform({4, 5}, -1, 1, rng);
    x.set_requires_grad();

    auto make_losses = [&]() {
        Td a = ibev::sum_all(ibev::mul(x, x));
        Td b = ibev::sum_all(ibev::sigmoid(x));
        return std::pair{a, b};
    };

    // Combined backward.
    {
        auto [a, b] = make_losses();
        ibev::add(a, b).backward();
    }
    std::vector<double> combined = x.grad();
    x.zero_grad();

    // Separate backwards accumulate.
    {
        auto [a, b] = make_losses();
        a.backward();
        b.backward();
    }
    for (size_t i = 0; i < combined.size(); ++i)
        CHECK(std::fabs(combined[i] - x.grad()[i]) <= 1e-12);
}

TEST_CASE("broadcast add and reductions", "[tensor]") {
    Td a = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Td bias = Td::from({3}, {10, 20, 30});
    Td r = ibev::add(a, bias);
    CHECK(r.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

    Td col = Td::from({2, 1}, {100, 200});
    Td r2 = ibev::add(a, col);
    CHECK(r2.data() == std::vector<double>{101, 102, 103, 204, 205, 206});

    Td s0 = ibev::sum_axis(a, 0);
    CHECK(s0.data() == std::vector<double>{5, 7, 9});
    Td s1 = ibev::sum_axis(a, 1);
    CHECK(s1.data() == std::vector<double>{6, 15});
    CHECK(ibev::sum_all(a).item() == 21.0);
}

TEST_CASE("permute and reshape round trips", "[tensor]") {
    Rng rng(11);
    Td x = Td::uniform({2, 3, 4}, -1, 1, rng);
    Td p = ibev::permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p.at({3, 1, 2}) == x.at({1, 2, 3}));
    Td back = ibev::permute(p, {1, 2, 0});
    CHECK(back.data() == x.data());

    Td r = ibev::reshape(x, {6, 4});
    CHECK(r.data() == x.data());
}

TEST_CASE("concat and slice invert each other", "[tensor]") {
    Rng rng(13);
    Td a = Td::uniform({3, 2}, -1, 1, rng);
    Td b = Td::uniform({3, 5}, -1, 1, rng);
    Td cat = ibev::concat<double>({a, b}, 1);
    CHECK(cat.shape() == Shape{3, 7});
    CHECK(ibev::slice(cat, 1, 0, 2).data() == a.data());
    CHECK(ibev::slice(cat, 1, 2, 5).data() == b.data());
}

TEST_CASE("checkpoint round trip is bit-exact", "[params]") {
    namespace fs = std::filesystem;
    const std::string stem = (fs::temp_directory_path() / "ibev_ckpt_test").string();

    Rng rng(99);
    ibev::ParameterStore<float> store;
    store.add_uniform_fan_in("layer0.weight", {7, 5}, rng);
    store.add_zeros("layer0.bias", {5});
    store.add_query("queries", {4, 6}, rng);

    ibev::CheckpointWriter w;
    for (const auto& p : store.all()) w.add_tensor(p.name, p.tensor.shape(), p.tensor.data());
    w.add_meta("step", "123");
    w.write(stem);

    ibev::CheckpointReader r(stem);
    CHECK(r.meta("step") == "123");
    for (const auto& p : store.all()) {
        auto t = r.tensor<float>(p.name);
        REQUIRE(t.shape() == p.tensor.shape());
        CHECK(std::memcmp(t.data().data(), p.tensor.data().data(),
                          t.data().size() * sizeof(float)) == 0);
    }

    // Rewriting from the loaded tensors reproduces identical bytes.
    ibev::CheckpointWriter w2;
    for (const auto& p : store.all())
        w2.add_tensor(p.name, p.tensor.shape(), r.tensor<float>(p.name).data());
    w2.add_meta("step", "123");
    w2.write(stem + "_2");
    auto read_all = [](const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    };
    CHECK(read_all(stem + ".bin") == read_all(stem + "_2.bin"));
    CHECK(read_all(stem + ".manifest") == read_all(stem + "_2.manifest"));

    // Wrong dtype is rejected.
    CHECK_THROWS_AS(r.tensor<double>("layer0.weight"), ibev::IoError);
}

TEST_CASE("float32 training precision is available", "[tensor]") {
    Tf a = Tf::from({2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tf b = Tf::from({2, 2}, {5.f, 6.f, 7.f, 8.f});
    CHECK(ibev::matmul(a, b).data() == std::vector<float>{19.f, 22.f, 43.f, 50.f});
}
