#include <doctest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "sam/accum.hpp"

using sam::ExactSum;

TEST_CASE("exact sum is independent of addition order and grouping") {
    std::mt19937_64 eng(7);
    std::uniform_real_distribution<double> mag(-40.0, 40.0);
    std::vector<double> xs(2000);
    for (double& x : xs) x = std::ldexp(2.0 * (eng() % 2) - 1.0, static_cast<int>(mag(eng))) *
                             (1.0 + 1e-9 * static_cast<double>(eng() % 1000));

    ExactSum base;
    for (double x : xs) base.add(x);
    const double v0 = base.value();

    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(xs.begin(), xs.end(), eng);
        // random partition into 4 groups, merged in random order
        std::vector<ExactSum> groups(4);
        for (std::size_t i = 0; i < xs.size(); ++i) groups[eng() % 4].add(xs[i]);
        ExactSum total;
        for (const auto& g : groups) total.merge(g);
        CHECK(total.value() == v0);
    }
}

TEST_CASE("exact sum survives catastrophic cancellation") {
    ExactSum s;
    s.add(1e300);
    s.add(1.0);
    s.add(-1e300);
    CHECK(s.value() == 1.0);

    ExactSum t;
    t.add(1e-300);
    t.add(1e308);
    t.add(-1e308);
    t.add(1e-300);
    CHECK(t.value() == 2e-300);
}

TEST_CASE("hi/lo split round-trips through re-accumulation") {
    std::mt19937_64 eng(13);
    ExactSum s;
    for (int i = 0; i < 500; ++i)
        s.add((static_cast<double>(eng()) / 1e19 - 0.9) * std::ldexp(1.0, i % 40));
    double hi, lo;
    s.to_hilo(hi, lo);
    ExactSum back;
    back.add(hi);
    back.add(lo);
    CHECK(back.value() == s.value());
    CHECK(std::abs(lo) <= std::abs(hi) * 1e-15);
}

TEST_CASE("simple sums match plain arithmetic") {
    ExactSum s;
    s.add(0.25);
    s.add(0.5);
    s.add(-0.125);
    CHECK(s.value() == 0.625);

    ExactSum zero;
    CHECK(zero.value() == 0.0);
    zero.add(3.5);
    zero.add(-3.5);
    CHECK(zero.value() == 0.0);
}

TEST_CASE("rejects non-finite input") {
    ExactSum s;
    CHECK_THROWS_AS(s.add(std::numeric_limits<double>::infinity()), sam::Error);
    CHECK_THROWS_AS(s.add(std::numeric_limits<double>::quiet_NaN()), sam::Error);
}

TEST_CASE("denormals accumulate exactly") {
    const double tiny = std::numeric_limits<double>::denorm_min();
    ExactSum s;
    for (int i = 0; i < 1000; ++i) s.add(tiny);
    CHECK(s.value() == 1000.0 * tiny);
}
