#pragma once

// Minimum-cost perfect matching: exact shortest-augmenting-path solver
// (Jonker-Volgenant style, O(n^3)) for n <= kExactAssignmentLimit, and an
// epsilon-scaled auction beyond. The auction's final epsilon bounds the error
// of the *mean* matched cost by kEmdApproxEps (total error <= n * eps).

#include <limits>
#include <utility>
#include <vector>

#include "rpd/common.hpp"
#include "rpd/tensor.hpp"

namespace rpd {

inline constexpr int64_t kExactAssignmentLimit = 256;
inline constexpr double kEmdApproxEps = 1e-7;

// Exact min-cost perfect matching on a square cost matrix; returns row -> col.
inline std::vector<int64_t> solve_assignment(const Tensor& cost) {
    const int64_t n = cost.rows;
    RPD_CHECK(cost.cols == n && n >= 1, "solve_assignment: square cost required, got ",
              cost.rows, "x", cost.cols);
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(size_t(n + 1), 0.0), v(size_t(n + 1), 0.0);
    std::vector<int64_t> p(size_t(n + 1), 0), way(size_t(n + 1), 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(size_t(n + 1), inf);
        std::vector<char> used(size_t(n + 1), 0);
        do {
            used[size_t(j0)] = 1;
            int64_t i0 = p[size_t(j0)], j1 = 0;
            double delta = inf;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[size_t(j)]) continue;
                double cur = cost(i0 - 1, j - 1) - u[size_t(i0)] - v[size_t(j)];
                if (cur < minv[size_t(j)]) {
                    minv[size_t(j)] = cur;
                    way[size_t(j)] = j0;
                }
                if (minv[size_t(j)] < delta) {
                    delta = minv[size_t(j)];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[size_t(j)]) {
                    u[size_t(p[size_t(j)])] += delta;
                    v[size_t(j)] -= delta;
                } else {
                    minv[size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[size_t(j0)] != 0);
        do {
            int64_t j1 = way[size_t(j0)];
            p[size_t(j0)] = p[size_t(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> row_to_col(static_cast<size_t>(n), -1);
    for (int64_t j = 1; j <= n; ++j) row_to_col[size_t(p[size_t(j)] - 1)] = j - 1;
    return row_to_col;
}

// Epsilon-scaled auction (maximizes -cost). After the final phase at
// eps_final the assignment's total cost is within n * eps_final of optimal.
inline std::vector<int64_t> auction_assignment(const Tensor& cost, double eps_final) {
    const int64_t n = cost.rows;
    RPD_CHECK(cost.cols == n && n >= 1, "auction_assignment: square cost required");
    RPD_CHECK(eps_final > 0.0, "auction_assignment: eps must be positive");
    if (n == 1) return {0};
    double cmax = 0.0;
    for (double c : cost.v) cmax = std::max(cmax, std::abs(c));
    const double ninf = -std::numeric_limits<double>::infinity();
    std::vector<double> price(static_cast<size_t>(n), 0.0);
    std::vector<int64_t> owner(static_cast<size_t>(n), -1);
    std::vector<int64_t> col_of(static_cast<size_t>(n), -1);
    double eps = std::max(cmax / 2.0, eps_final);
    for (;;) {
        std::fill(owner.begin(), owner.end(), -1);
        std::fill(col_of.begin(), col_of.end(), -1);
        std::vector<int64_t> pending;
        pending.reserve(size_t(n));
        for (int64_t i = n - 1; i >= 0; --i) pending.push_back(i);
        while (!pending.empty()) {
            int64_t i = pending.back();
            pending.pop_back();
            double best = ninf, second = ninf;
            int64_t bj = -1;
            for (int64_t j = 0; j < n; ++j) {
                double val = -cost(i, j) - price[size_t(j)];
                if (val > best) {
                    second = best;
                    best = val;
                    bj = j;
                } else if (val > second) {
                    second = val;
                }
            }
            price[size_t(bj)] += best - second + eps;
            if (owner[size_t(bj)] >= 0) {
                col_of[size_t(owner[size_t(bj)])] = -1;
                pending.push_back(owner[size_t(bj)]);
            }
            owner[size_t(bj)] = i;
            col_of[size_t(i)] = bj;
        }
        if (eps <= eps_final) break;
        eps = std::max(eps / 5.0, eps_final);
    }
    return col_of;
}

// Earth Mover's Distance between equal-size 3D point sets: minimum over
// perfect matchings of the mean Euclidean distance. Exact for
// n <= kExactAssignmentLimit, auction-approximate (error <= kEmdApproxEps
// on the mean) beyond.
inline std::pair<double, std::vector<int64_t>> emd_with_matching(const Tensor& a,
                                                                 const Tensor& b) {
    RPD_CHECK(a.cols == 3 && b.cols == 3, "emd: point sets must be [n,3]");
    RPD_CHECK(a.rows == b.rows, "emd: unequal cardinality ", a.rows, " vs ", b.rows);
    RPD_CHECK(a.rows >= 1, "emd: empty sets");
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
    std::vector<int64_t> match = n <= kExactAssignmentLimit
                                     ? solve_assignment(cost)
                                     : auction_assignment(cost, kEmdApproxEps);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) total += cost(i, match[size_t(i)]);
    return {total / double(n), std::move(match)};
}

inline double emd(const Tensor& a, const Tensor& b) { return emd_with_matching(a, b).first; }

}  // namespace rpd
