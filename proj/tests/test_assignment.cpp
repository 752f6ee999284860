// Assignment solvers and EMD against brute-force enumeration oracles.

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rpd/assignment.hpp"
#include "test_util.hpp"

using namespace rpd;
using rpdtest::random_tensor;

namespace {

double assignment_cost(const Tensor& cost, const std::vector<int64_t>& match) {
    double s = 0.0;
    for (int64_t i = 0; i < cost.rows; ++i) s += cost(i, match[size_t(i)]);
    return s;
}

// Brute force over all n! matchings.
double brute_force_min_cost(const Tensor& cost) {
    int64_t n = cost.rows;
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        best = std::min(best, assignment_cost(cost, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

double brute_force_emd(const Tensor& a, const Tensor& b) {
    int64_t n = a.rows;
    Tensor cost(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < 3; ++c) {
                double d = a(i, c) - b(j, c);
                s += d * d;
            }
            cost(i, j) = std::sqrt(s);
        }
    return brute_force_min_cost(cost) / double(n);
}

}  // namespace

TEST(Assignment, ExactMatchesBruteForce) {
    Rng rng(101);
    for (int64_t n = 1; n <= 7; ++n)
        for (int rep = 0; rep < 8; ++rep) {
            Tensor cost = random_tensor(rng, n, n);
            for (double& c : cost.v) c = std::abs(c);
            auto match = solve_assignment(cost);
            std::vector<char> used(static_cast<size_t>(n), 0);
            for (int64_t col : match) {
                ASSERT_GE(col, 0);
                ASSERT_LT(col, n);
                ASSERT_FALSE(used[size_t(col)]);
                used[size_t(col)] = 1;
            }
            EXPECT_NEAR(assignment_cost(cost, match), brute_force_min_cost(cost), 1e-10)
                << "n=" << n;
        }
}

TEST(Assignment, ExactHandlesTiesAndNegatives) {
    Tensor cost = Tensor::full(4, 4, 2.5);
    auto match = solve_assignment(cost);
    EXPECT_NEAR(assignment_cost(cost, match), 10.0, 1e-12);

    Rng rng(103);
    Tensor c2 = random_tensor(rng, 5, 5);  // signed costs
    EXPECT_NEAR(assignment_cost(c2, solve_assignment(c2)), brute_force_min_cost(c2), 1e-10);
}

TEST(Assignment, AuctionNearExactSmall) {
    Rng rng(107);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor cost = random_tensor(rng, 12, 12);
        for (double& c : cost.v) c = std::abs(c);
        double exact = assignment_cost(cost, solve_assignment(cost));
        auto am = auction_assignment(cost, 1e-9);
        std::vector<char> used(12, 0);
        for (int64_t col : am) {
            ASSERT_GE(col, 0);
            ASSERT_FALSE(used[size_t(col)]);
            used[size_t(col)] = 1;
        }
        EXPECT_LE(assignment_cost(cost, am), exact + 12 * 1e-9 + 1e-12);
    }
}

TEST(Assignment, AuctionWithinDocumentedBoundAtScale) {
    Rng rng(109);
    int64_t n = 300;
    Tensor a = random_tensor(rng, n, 3), b = random_tensor(rng, n, 3);
    Tensor cost(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < 3; ++c) {
                double d = a(i, c) - b(j, c);
                s += d * d;
            }
            cost(i, j) = std::sqrt(s);
        }
    double exact_mean = assignment_cost(cost, solve_assignment(cost)) / double(n);
    double approx_mean = emd(a, b);  // n > 256 routes through the auction
    EXPECT_GE(approx_mean, exact_mean - 1e-12);
    EXPECT_LE(approx_mean, exact_mean + kEmdApproxEps + 1e-12);
}

TEST(Emd, TrivialExamples) {
    Tensor a(2, 3), b(2, 3);
    a(1, 0) = 1.0;
    b(0, 0) = 1.0;  // reversed order of a
    EXPECT_EQ(emd(a, a), 0.0);
    EXPECT_EQ(emd(a, b), 0.0);

    Tensor c(2, 3);
    c(1, 0) = 2.0;
    EXPECT_NEAR(emd(a, c), 0.5, 1e-12);
}

TEST(Emd, MatchesBruteForceUpTo6) {
    Rng rng(113);
    for (int64_t n = 1; n <= 6; ++n)
        for (int rep = 0; rep < 6; ++rep) {
            Tensor a = random_tensor(rng, n, 3);
            Tensor b = random_tensor(rng, n, 3);
            EXPECT_NEAR(emd(a, b), brute_force_emd(a, b), 1e-10) << "n=" << n;
        }
}

TEST(Emd, MetricProperties) {
    Rng rng(127);
    Tensor a = random_tensor(rng, 9, 3);
    Tensor b = random_tensor(rng, 9, 3);
    EXPECT_NEAR(emd(a, b), emd(b, a), 1e-10);
    EXPECT_GT(emd(a, b), 0.0);

    // zero iff equal as multisets: shuffle rows of a
    Tensor sh(9, 3);
    std::vector<int64_t> perm = {4, 7, 0, 8, 2, 6, 1, 5, 3};
    for (int64_t i = 0; i < 9; ++i)
        for (int64_t c = 0; c < 3; ++c) sh(i, c) = a(perm[size_t(i)], c);
    EXPECT_EQ(emd(a, sh), 0.0);

    Tensor pert = a;
    pert(3, 1) += 1e-3;
    EXPECT_GT(emd(a, pert), 0.0);
}

TEST(Emd, Errors) {
    Tensor a(2, 3), b(3, 3);
    EXPECT_THROW(emd(a, b), InvalidArgument);
    Tensor c(2, 2), d(2, 2);
    EXPECT_THROW(emd(c, d), InvalidArgument);
    Tensor e(0, 3);
    EXPECT_THROW(emd(e, e), InvalidArgument);
}

TEST(Emd, MatchingIsReusable) {
    Rng rng(131);
    Tensor a = random_tensor(rng, 5, 3);
    Tensor b = random_tensor(rng, 5, 3);
    auto [value, match] = emd_with_matching(a, b);
    double total = 0.0;
    for (int64_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
            double d = a(i, c) - b(match[size_t(i)], c);
            s += d * d;
        }
        total += std::sqrt(s);
    }
    EXPECT_NEAR(value, total / 5.0, 1e-12);
}
