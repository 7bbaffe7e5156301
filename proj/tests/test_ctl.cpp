#include "slu/ctl.hpp"

#include <cmath>
#include <random>

#include "doctest.h"

using namespace slu;

namespace {

Matrix column(std::initializer_list<double> vals) {
    Matrix m(static_cast<int>(vals.size()), 1);
    int t = 0;
    for (double v : vals) m(t++, 0) = v;
    return m;
}

Matrix random_probs(int T, int E, std::mt19937_64& rng, double lo = 0.05, double hi = 0.95) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix y(T, E);
    for (double& v : y.data()) v = dist(rng);
    return y;
}

}  // namespace

TEST_CASE("rectified delta on a hand column") {
    BoundaryProbs b = rectified_delta(column({0.1, 0.7, 0.7, 0.2}));
    CHECK(b.on(0, 0) == doctest::Approx(0.1));
    CHECK(b.on(1, 0) == doctest::Approx(0.6));
    CHECK(b.on(2, 0) == doctest::Approx(0.0));
    CHECK(b.on(3, 0) == doctest::Approx(0.0));
    CHECK(b.off(0, 0) == doctest::Approx(0.0));
    CHECK(b.off(3, 0) == doctest::Approx(0.5));
}

TEST_CASE("rectified delta of a constant column") {
    BoundaryProbs b = rectified_delta(column({0.4, 0.4, 0.4}));
    CHECK(b.on(0, 0) == doctest::Approx(0.4));
    CHECK(b.on(1, 0) == doctest::Approx(0.0));
    CHECK(b.on(2, 0) == doctest::Approx(0.0));
    for (int t = 0; t < 3; ++t) CHECK(b.off(t, 0) == doctest::Approx(0.0));
}

TEST_CASE("monotone increasing column has zero offsets") {
    BoundaryProbs b = rectified_delta(column({0.1, 0.3, 0.8}));
    for (int t = 0; t < 3; ++t) CHECK(b.off(t, 0) == doctest::Approx(0.0));
}

TEST_CASE("emission probability products") {
    std::vector<double> z1{0.8};
    CHECK(emission_prob(z1, {0}) == doctest::Approx(0.8));
    CHECK(emission_prob(z1, {}) == doctest::Approx(0.2));
    std::vector<double> z2{0.5, 0.5};
    CHECK(emission_prob(z2, {}) == doctest::Approx(0.25));
    CHECK(emission_prob(z2, {0}) == doctest::Approx(0.25));
    CHECK(emission_prob(z2, {0, 1}) == doctest::Approx(0.25));
    std::vector<double> z3{0.9, 0.1};
    CHECK(emission_prob(z3, {0}) == doctest::Approx(0.81));
}

TEST_CASE("single frame single onset") {
    CtlTarget target{{0}, 1, CtlMode::OnsetOnly};
    LossResult r = ctl_loss(column({0.8}), target);
    CHECK(r.loss == doctest::Approx(-std::log(0.8)).epsilon(1e-10));
    CHECK(r.loss == doctest::Approx(0.223144).epsilon(1e-5));
}

TEST_CASE("two frames, one label, both emission orders") {
    // y = [0.6, 0.1]: z_on = [0.6, 0], z_off = [0, 0.5]; offset-labeled target
    // over alphabet {onset(A), offset(A)} emitting offset(A).
    // Checked against the subset enumeration oracle.
    Matrix y = column({0.6, 0.1});
    CtlTarget onset_target{{0}, 2, CtlMode::OnsetOffset};
    double dp = ctl_loss(y, onset_target).loss;
    CHECK(ctl_brute_force(y, onset_target) == doctest::Approx(dp).epsilon(1e-10));
}

TEST_CASE("generic z1 z2 alternation sums to 0.5") {
    // alpha_2(1) = z1(1-z2) + (1-z1)z2 with z1=0.6, z2=0.5 -> 0.5.
    // Realize with onset-only alphabet {A} and y chosen so z_on = [0.6, 0.5]...
    // not representable monotonically; use a direct two-event-frame instance:
    // y rising 0 -> 0.6 gives z1 = 0.6; a second utterance frame cannot give
    // z2 = 0.5 while rising from 0.6, so verify the identity via brute force
    // on y = [0.6, 0.1] offsets instead and on a rising pair.
    Matrix y = column({0.6, 0.8});
    CtlTarget t{{0}, 1, CtlMode::OnsetOnly};
    // z_on = [0.6, 0.2]: P = 0.6*0.8 + 0.4*0.2 = 0.56
    CHECK(ctl_loss(y, t).loss == doctest::Approx(-std::log(0.56)).epsilon(1e-10));
    CHECK(ctl_brute_force(y, t) == doctest::Approx(-std::log(0.56)).epsilon(1e-10));
}

TEST_CASE("repeated label cannot be emitted twice at one frame") {
    CtlTarget t{{0, 0}, 1, CtlMode::OnsetOnly};
    // single frame: the only path needs A twice at frame 1 -> probability 0
    CHECK_THROWS(ctl_loss(column({0.9}), t));
    CHECK_THROWS(ctl_brute_force(column({0.9}), t));
    // two frames with two positive onsets: mass from multi-frame emission
    Matrix y(2, 1);
    y(0, 0) = 0.5;
    y(1, 0) = 0.9;  // z_on = [0.5, 0.4]
    double dp = ctl_loss(y, t).loss;
    CHECK(dp == doctest::Approx(-std::log(0.5 * 0.4)).epsilon(1e-10));
    CHECK(ctl_brute_force(y, t) == doctest::Approx(dp).epsilon(1e-10));
}

TEST_CASE("empty target multiplies all complements") {
    std::mt19937_64 rng(4);
    Matrix y = random_probs(3, 2, rng);
    CtlTarget t{{}, 2, CtlMode::OnsetOnly};
    double dp = ctl_loss(y, t).loss;
    CHECK(ctl_brute_force(y, t) == doctest::Approx(dp).epsilon(1e-10));
    BoundaryProbs b = rectified_delta(y);
    double expect = 1.0;
    for (int tt = 0; tt < 3; ++tt)
        for (int e = 0; e < 2; ++e) expect *= 1.0 - b.on(tt, e);
    CHECK(dp == doctest::Approx(-std::log(expect)).epsilon(1e-10));
}

TEST_CASE("label with identically zero boundary probability is unreachable") {
    Matrix y(3, 2);
    for (int t = 0; t < 3; ++t) {
        y(t, 0) = 0.2 + 0.2 * t;  // event 0 rises
        y(t, 1) = 0.0;            // event 1 never on
    }
    CtlTarget t{{1}, 2, CtlMode::OnsetOnly};
    CHECK_THROWS_WITH_AS(ctl_loss(y, t), "ctl_loss: unreachable target", std::runtime_error);
}

TEST_CASE("oracle equivalence on random instances") {
    std::mt19937_64 rng(2024);
    int tried = 0;
    for (int trial = 0; trial < 300; ++trial) {
        std::uniform_int_distribution<int> td(1, 4), ad(1, 2), kd(0, 3);
        int T = td(rng), A = ad(rng), k = kd(rng);
        Matrix y = random_probs(T, A, rng);
        CtlTarget target;
        target.alphabet_size = A;
        target.mode = CtlMode::OnsetOnly;
        std::uniform_int_distribution<int> ld(0, A - 1);
        for (int i = 0; i < k; ++i) target.labels.push_back(ld(rng));
        double dp, bf;
        try {
            dp = ctl_loss(y, target).loss;
            bf = ctl_brute_force(y, target);
        } catch (const std::exception&) {
            continue;
        }
        CHECK(std::fabs(dp - bf) <= 1e-9);
        ++tried;
    }
    CHECK(tried > 150);
}

TEST_CASE("no-collapse: [A,A] has positive probability across frames") {
    Matrix y(3, 1);
    y(0, 0) = 0.6;
    y(1, 0) = 0.1;
    y(2, 0) = 0.7;  // onsets at frames 0 and 2
    CtlTarget t{{0, 0}, 1, CtlMode::OnsetOnly};
    LossResult r = ctl_loss(y, t);
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss > 0.0);
}

TEST_CASE("overlap: two labels emitted at one frame") {
    Matrix y(1, 2);
    y(0, 0) = 0.9;
    y(0, 1) = 0.8;
    CtlTarget t{{0, 1}, 2, CtlMode::OnsetOnly};
    LossResult r = ctl_loss(y, t);
    CHECK(r.loss == doctest::Approx(-std::log(0.72)).epsilon(1e-10));
}

TEST_CASE("increasing an on-path z does not increase single-label loss") {
    // Nondecreasing y realizes z_on(t) = y(t) - y(t-1); raising every y from
    // frame j onward by eps bumps z_on(j) alone, all other z fixed.
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        const int T = 4;
        std::uniform_real_distribution<double> zd(0.05, 0.2);
        std::vector<double> z(T);
        for (double& v : z) v = zd(rng);
        Matrix y(T, 1);
        double cum = 0.0;
        for (int t = 0; t < T; ++t) y(t, 0) = (cum += z[t]);
        CtlTarget target{{0}, 1, CtlMode::OnsetOnly};
        double base = ctl_loss(y, target).loss;
        std::uniform_int_distribution<int> jd(0, T - 1);
        int j = jd(rng);
        Matrix up = y;
        for (int t = j; t < T; ++t) up(t, 0) += 0.05;
        double bumped = ctl_loss(up, target).loss;
        CHECK(bumped <= base + 1e-12);
    }
}

TEST_CASE("mil_pool direct values") {
    CHECK(mil_pool(column({0.2, 0.8}))[0] == doctest::Approx(0.68));
    CHECK(mil_pool(column({0.3, 0.3, 0.3}))[0] == doctest::Approx(0.3));
    CHECK(mil_pool(column({0.0, 0.0}))[0] == doctest::Approx(0.0));
}

TEST_CASE("mil_pool lies between min and max frame probability") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix y = random_probs(6, 3, rng, 0.0, 1.0);
        std::vector<double> pooled = mil_pool(y);
        for (int e = 0; e < 3; ++e) {
            double lo = 1.0, hi = 0.0;
            for (int t = 0; t < 6; ++t) {
                lo = std::min(lo, y(t, e));
                hi = std::max(hi, y(t, e));
            }
            CHECK(pooled[e] >= lo - 1e-12);
            CHECK(pooled[e] <= hi + 1e-12);
        }
    }
}

TEST_CASE("ctl_mil_loss weight degeneracies") {
    std::mt19937_64 rng(6);
    Matrix y = random_probs(3, 2, rng);
    CtlTarget t{{0}, 2, CtlMode::OnsetOnly};
    std::vector<int> bag = bag_from_target(t, 2);
    CHECK(bag[0] == 1);
    CHECK(bag[1] == 0);

    LossResult pure = ctl_loss(y, t);
    LossResult w0 = ctl_mil_loss(y, t, bag, 1.0, 0.0);
    CHECK(w0.loss == doctest::Approx(pure.loss).epsilon(1e-12));

    // w_ctl = 0, constant y, single event, bag 1 -> BCE(-ln c) on pooled c
    Matrix c(3, 1, 0.7);
    CtlTarget tc{{0}, 1, CtlMode::OnsetOnly};
    LossResult milonly = ctl_mil_loss(c, tc, {1}, 0.0, 1.0);
    CHECK(milonly.loss == doctest::Approx(-std::log(0.7)).epsilon(1e-9));
}

TEST_CASE("ctl_mil equal weights on the single-frame instance") {
    CtlTarget t{{0}, 1, CtlMode::OnsetOnly};
    LossResult r = ctl_mil_loss(column({0.8}), t, {1}, 0.5, 0.5);
    CHECK(r.loss == doctest::Approx(0.223144).epsilon(1e-5));
}

TEST_CASE("ctl_mil_loss validates weights") {
    CtlTarget t{{0}, 1, CtlMode::OnsetOnly};
    CHECK_THROWS(ctl_mil_loss(column({0.5}), t, {1}, 0.7, 0.5));
    CHECK_THROWS(ctl_mil_loss(column({0.5}), t, {1}, -0.5, 1.5));
}

TEST_CASE("finite-difference gradient check away from ties") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 10; ++trial) {
        int T = 4, A = 2;
        Matrix y = random_probs(T, A, rng, 0.1, 0.9);
        CtlTarget target;
        target.alphabet_size = A;
        target.mode = CtlMode::OnsetOnly;
        std::uniform_int_distribution<int> ld(0, A - 1);
        for (int i = 0; i < 2; ++i) target.labels.push_back(ld(rng));
        // skip instances too close to a rectifier tie for stable differences
        bool tied = false;
        for (int t = 1; t < T; ++t)
            for (int e = 0; e < A; ++e)
                if (std::fabs(y(t, e) - y(t - 1, e)) < 1e-3) tied = true;
        if (tied) continue;
        try {
            CHECK(ctl_grad_check(y, target, 1e-5) <= 1e-4);
        } catch (const std::runtime_error&) {
            continue;  // unreachable target draw
        }
    }
}

TEST_CASE("ctl_mil gradient matches finite differences") {
    std::mt19937_64 rng(17);
    Matrix y = random_probs(3, 2, rng, 0.15, 0.85);
    y(1, 0) = y(0, 0) + 0.05;
    y(2, 0) = y(1, 0) - 0.07;
    CtlTarget t{{0}, 2, CtlMode::OnsetOnly};
    std::vector<int> bag = bag_from_target(t, 2);
    LossResult analytic = ctl_mil_loss(y, t, bag, 0.5, 0.5);
    double h = 1e-5;
    for (int tt = 0; tt < 3; ++tt)
        for (int e = 0; e < 2; ++e) {
            Matrix up = y, dn = y;
            up(tt, e) += h;
            dn(tt, e) -= h;
            double fd = (ctl_mil_loss(up, t, bag, 0.5, 0.5).loss -
                         ctl_mil_loss(dn, t, bag, 0.5, 0.5).loss) / (2 * h);
            double g = analytic.grad(tt, e);
            double denom = std::max({std::fabs(fd), std::fabs(g), 1e-6});
            CHECK(std::fabs(fd - g) / denom <= 1e-4);
        }
}
