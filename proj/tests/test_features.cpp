#include "slu/features.hpp"

#include <cstdio>
#include <random>

#include "doctest.h"

using namespace slu;

namespace {

Matrix make(std::initializer_list<std::initializer_list<double>> rows) {
    int r = static_cast<int>(rows.size());
    int c = r ? static_cast<int>(rows.begin()->size()) : 0;
    Matrix m(r, c);
    int i = 0;
    for (auto& row : rows) {
        int j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

}  // namespace

TEST_CASE("cmvn moments on a two-point corpus") {
    Matrix x = make({{1, 3}, {3, 5}});
    CmvnStats s = accumulate_cmvn(std::span<const Matrix>(&x, 1));
    CHECK(s.count == 2);
    CHECK(s.mean[0] == doctest::Approx(2.0));
    CHECK(s.mean[1] == doctest::Approx(4.0));
    CHECK(s.variance[0] == doctest::Approx(1.0));
    CHECK(s.variance[1] == doctest::Approx(1.0));
}

TEST_CASE("cmvn constant corpus has zero variance") {
    Matrix x(5, 3, 2.5);
    CmvnStats s = accumulate_cmvn(std::span<const Matrix>(&x, 1));
    for (int d = 0; d < 3; ++d) {
        CHECK(s.mean[d] == doctest::Approx(2.5));
        CHECK(s.variance[d] == doctest::Approx(0.0));
    }
}

TEST_CASE("cmvn is invariant to chunking and order") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    Matrix whole(10, 4);
    for (double& v : whole.data()) v = dist(rng);
    Matrix a(4, 4), b(6, 4);
    for (int t = 0; t < 4; ++t)
        for (int d = 0; d < 4; ++d) a(t, d) = whole(t, d);
    for (int t = 0; t < 6; ++t)
        for (int d = 0; d < 4; ++d) b(t, d) = whole(t + 4, d);

    CmvnStats sw = accumulate_cmvn(std::span<const Matrix>(&whole, 1));
    std::vector<Matrix> parts{a, b};
    CmvnStats sp = accumulate_cmvn(parts);
    std::vector<Matrix> rev{b, a};
    CmvnStats sr = accumulate_cmvn(rev);
    for (int d = 0; d < 4; ++d) {
        CHECK(sp.mean[d] == doctest::Approx(sw.mean[d]).epsilon(1e-12));
        CHECK(sp.variance[d] == doctest::Approx(sw.variance[d]).epsilon(1e-12));
        CHECK(sr.mean[d] == doctest::Approx(sp.mean[d]).epsilon(1e-12));
        CHECK(sr.variance[d] == doctest::Approx(sp.variance[d]).epsilon(1e-12));
    }
}

TEST_CASE("empty corpus is rejected") {
    std::vector<Matrix> corpus;
    CHECK_THROWS(accumulate_cmvn(corpus));
    Matrix empty(0, 4);
    std::vector<Matrix> empties{empty};
    CHECK_THROWS(accumulate_cmvn(empties));
}

TEST_CASE("apply_cmvn standardizes its own corpus") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> dist(3.0, 2.0);
    Matrix x(50, 3);
    for (double& v : x.data()) v = dist(rng);
    CmvnStats s = accumulate_cmvn(std::span<const Matrix>(&x, 1));
    Matrix n = apply_cmvn(x, s, 1e-12);
    for (int d = 0; d < 3; ++d) {
        double m = 0.0, v = 0.0;
        for (int t = 0; t < 50; ++t) m += n(t, d);
        m /= 50;
        for (int t = 0; t < 50; ++t) v += (n(t, d) - m) * (n(t, d) - m);
        v /= 50;
        CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("constant dim maps to zero under the variance floor") {
    Matrix x(4, 2);
    for (int t = 0; t < 4; ++t) {
        x(t, 0) = 7.0;
        x(t, 1) = t;
    }
    CmvnStats s = accumulate_cmvn(std::span<const Matrix>(&x, 1));
    Matrix n = apply_cmvn(x, s, 1e-8);
    for (int t = 0; t < 4; ++t) CHECK(n(t, 0) == doctest::Approx(0.0));
}

TEST_CASE("apply_cmvn exact point") {
    Matrix x = make({{2, 4}});
    CmvnStats s;
    s.mean = {2, 4};
    s.variance = {1, 1};
    s.count = 2;
    Matrix n = apply_cmvn(x, s, 1e-300);
    CHECK(n(0, 0) == doctest::Approx(0.0));
    CHECK(n(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("apply_cmvn rejects dimension mismatch") {
    Matrix x(2, 3);
    CmvnStats s;
    s.mean = {0, 0};
    s.variance = {1, 1};
    s.count = 1;
    CHECK_THROWS(apply_cmvn(x, s));
}

TEST_CASE("cmvn round trip recovers input") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Matrix x(20, 5);
    for (double& v : x.data()) v = dist(rng);
    CmvnStats s = accumulate_cmvn(std::span<const Matrix>(&x, 1));
    const double eps = 1e-8;
    Matrix n = apply_cmvn(x, s, eps);
    for (int t = 0; t < 20; ++t)
        for (int d = 0; d < 5; ++d) {
            double back = n(t, d) * std::sqrt(s.variance[d] + eps) + s.mean[d];
            CHECK(back == doctest::Approx(x(t, d)).epsilon(1e-12));
        }
}

TEST_CASE("stack_frames paper-default shape") {
    Matrix x(32, 80, 0.5);
    Matrix out = stack_frames(x, 8, 3);
    CHECK(out.rows() == 9);
    CHECK(out.cols() == 640);
}

TEST_CASE("stack_frames exact fit and degenerate input") {
    Matrix fit(8, 4, 1.0);
    CHECK(stack_frames(fit, 8, 3).rows() == 1);
    CHECK(stack_frames(fit, 8, 3).cols() == 32);
    Matrix small(7, 4, 1.0);
    CHECK(stack_frames(small, 8, 3).rows() == 0);
}

TEST_CASE("stack_frames window contents") {
    Matrix x(10, 2);
    for (int t = 0; t < 10; ++t) {
        x(t, 0) = t;
        x(t, 1) = 10 + t;
    }
    Matrix out = stack_frames(x, 3, 2);
    REQUIRE(out.rows() == 4);
    // frame 1 covers input frames 2,3,4
    CHECK(out(1, 0) == 2);
    CHECK(out(1, 1) == 12);
    CHECK(out(1, 2) == 3);
    CHECK(out(1, 4) == 4);
}

TEST_CASE("stack_frames length formula over small grid") {
    for (int T = 1; T <= 64; T += 3)
        for (int w = 1; w <= 16; w += 2)
            for (int s = 1; s <= 8; ++s) {
                Matrix x(T, 2, 1.0);
                int expect = T >= w ? (T - w) / s + 1 : 0;
                CHECK(stack_frames(x, w, s).rows() == expect);
            }
}

TEST_CASE("feature file round trip") {
    Matrix x(6, 3);
    for (size_t i = 0; i < x.size(); ++i)
        x.data()[i] = static_cast<double>(static_cast<float>(0.25 * i - 1.0));
    std::string path = "test_feat_tmp.bin";
    write_feature_file(path, x, 42);
    uint32_t reserved = 0;
    Matrix back = read_feature_file(path, &reserved);
    CHECK(reserved == 42);
    CHECK(back == x);
    std::remove(path.c_str());
}

TEST_CASE("cmvn stats file round trip") {
    CmvnStats s;
    s.mean = {1.5, -2.0};
    s.variance = {0.25, 4.0};
    s.count = 123;
    std::string path = "test_cmvn_tmp.bin";
    write_cmvn_file(path, s);
    CmvnStats back = read_cmvn_file(path);
    CHECK(back.count == 123);
    CHECK(back.mean == s.mean);
    CHECK(back.variance == s.variance);
    std::remove(path.c_str());
}
